//! Command-line entry point: ingest, encode, train, infer, energy, selftest.
//!
//! Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.

use crate::bev::{build_frame, load_pointcloud, BevConfig, BevFrame};
use crate::checkpoint;
use crate::config::Config;
use crate::decode::{assemble, detection_csv_row, DecodeConfig, Variant, DETECTION_CSV_HEADER};
use crate::encoding::{encode, EncoderKind};
use crate::energy::{build_report, parse_rates_csv, reference_rates, report_csv, EnergyConstants};
use crate::error::{Error, Result};
use crate::losses::KpLossConfig;
use crate::network::{plan_canonical, ForwardOptions, GraphConfig, GraphSpec};
use crate::neuron::SpikeMode;
use crate::rng::RngStream;
use crate::tensor::{deserialize_tensor, serialize_tensor, serialize_train, DenseTensor, Shape};
use crate::train::{fit, readout_maps, TrainConfig};
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::Path;

const USAGE: &str = "\
spikegrid <command> [flags]

commands:
  ingest    --input <points.bin> --output <frame.bevt> [--config <file>] [--scale N]
  encode    --input <frame.bevt> --encoder <poisson|latency|zaxis|self> --steps T
            [--seed S] [--output <train.bevs>] [--stats]
  train     --out-dir <dir> [--config <file>] [--epochs N] [--steps-per-epoch N]
            [--batch N] [--lr X] [--seed S] [--scale N] [--steps T]
            [--encoder E] [--threads N]
  infer     --checkpoint <ck.sgck> --frame <frame.bevt> --variant <vmem|spike>
            [--encoder E] [--seed S] [--threshold X] --output <dets.csv>
  energy    (--canonical [--scale N] | --graph <file>)
            (--table3 | --rates <csv> | --measured --checkpoint <ck> [--frames N] [--seed S])
            [--output <report.csv>]
  selftest

environment: SPIKEGRID_THREADS caps worker threads.
";

/// Boolean flags (no value follows them).
const BOOL_FLAGS: &[&str] = &["stats", "canonical", "table3", "measured", "help"];

struct Args {
    flags: BTreeMap<String, String>,
    bools: BTreeSet<String>,
}

impl Args {
    fn parse(argv: &[String]) -> Result<Args> {
        let mut flags = BTreeMap::new();
        let mut bools = BTreeSet::new();
        let mut i = 0;
        while i < argv.len() {
            let arg = &argv[i];
            let name = arg
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("unexpected argument '{arg}'")))?;
            if BOOL_FLAGS.contains(&name) {
                bools.insert(name.to_string());
                i += 1;
            } else {
                let value = argv
                    .get(i + 1)
                    .ok_or_else(|| Error::Config(format!("flag --{name} needs a value")))?;
                flags.insert(name.to_string(), value.clone());
                i += 2;
            }
        }
        Ok(Args { flags, bools })
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.flags.get(name).map(String::as_str)
    }

    fn require(&self, name: &str) -> Result<&str> {
        self.get(name).ok_or_else(|| Error::Config(format!("missing required flag --{name}")))
    }

    fn get_parsed<T: std::str::FromStr>(&self, name: &str) -> Result<Option<T>> {
        match self.get(name) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::Config(format!("--{name} '{v}' is not a valid value"))),
        }
    }

    fn has(&self, name: &str) -> bool {
        self.bools.contains(name)
    }
}

fn load_config(args: &Args) -> Result<Config> {
    match args.get("config") {
        None => Ok(Config::default()),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::io(format!("reading config {path}"), e))?;
            Config::parse(&text)
        }
    }
}

fn bev_config(cfg: &Config, scale: usize) -> Result<BevConfig> {
    let mut bev = BevConfig::scaled(scale);
    if let Some(v) = cfg.get_parsed::<f32>("bev", "range_x")? {
        bev.range_x = v;
    }
    if let Some(v) = cfg.get_parsed::<f32>("bev", "range_y")? {
        bev.range_y = v;
    }
    if let Some(v) = cfg.get_parsed::<f32>("bev", "cell")? {
        bev.cell = v;
    }
    if let Some(v) = cfg.get_parsed::<usize>("bev", "grid")? {
        bev.grid = v;
    }
    if let Some(v) = cfg.get_parsed::<usize>("bev", "z_bins")? {
        bev.z_bins = v;
    }
    if let Some(v) = cfg.get_parsed::<f32>("bev", "z_bin_top")? {
        bev.z_bin_top = v;
    }
    if let Some(v) = cfg.get_parsed::<f32>("bev", "z_shift")? {
        bev.z_shift = v;
    }
    if let Some(v) = cfg.get_parsed::<f32>("bev", "z_range")? {
        bev.z_range = v;
    }
    bev.validate()?;
    Ok(bev)
}

fn env_threads() -> usize {
    std::env::var("SPIKEGRID_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0)
}

fn write_file(path: &str, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {path}"), e))?;
    f.write_all(bytes).map_err(|e| Error::io(format!("writing {path}"), e))
}

fn read_frame(path: &str) -> Result<BevFrame> {
    let mut f = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening {path}"), e))?;
    let combined = deserialize_tensor(&mut f)?;
    let s = combined.shape();
    if s.channels < 6 {
        return Err(Error::Shape(format!(
            "frame {path} has {} channels; expected 5 primary + z bins",
            s.channels
        )));
    }
    let z_bins = s.channels - 5;
    let mut primary = DenseTensor::zeros(Shape::new(s.batch, 5, s.height, s.width));
    let mut zbins = DenseTensor::zeros(Shape::new(s.batch, z_bins, s.height, s.width));
    for b in 0..s.batch {
        for c in 0..5 {
            primary.plane_mut(b, c).copy_from_slice(combined.plane(b, c));
        }
        for c in 0..z_bins {
            zbins.plane_mut(b, c).copy_from_slice(combined.plane(b, 5 + c));
        }
    }
    Ok(BevFrame { primary, zbins, combined })
}

fn cmd_ingest(args: &Args) -> Result<()> {
    let input = args.require("input")?;
    let output = args.require("output")?;
    let cfg = load_config(args)?;
    let scale = args.get_parsed::<usize>("scale")?.unwrap_or(1);
    let bev = bev_config(&cfg, scale)?;
    let mut f = std::fs::File::open(input)
        .map_err(|e| Error::io(format!("opening {input}"), e))?;
    let pc = load_pointcloud(&mut f)?;
    let frame = build_frame(&pc, &bev)?;
    let mut buf = Vec::new();
    serialize_tensor(&frame.combined, &mut buf)?;
    write_file(output, &buf)?;
    println!(
        "ingested {} points into {}x{} frame -> {}",
        pc.len(),
        bev.grid,
        bev.grid,
        output
    );
    Ok(())
}

fn cmd_encode(args: &Args) -> Result<()> {
    let input = args.require("input")?;
    let kind = EncoderKind::parse(args.require("encoder")?)?;
    let steps: usize = args.get_parsed("steps")?.unwrap_or(13);
    let seed: u64 = args.get_parsed("seed")?.unwrap_or(0);
    let frame = read_frame(input)?;
    let mut rng = RngStream::new(seed, 0x0E0C);
    let drive = encode(kind, &frame, steps, &mut rng)?;
    if args.has("stats") {
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for t in 0..drive.steps() {
            let f = drive.frame(t);
            sum += f.data().iter().map(|&v| v as f64).sum::<f64>();
            n += f.data().len();
        }
        println!("encoder={} steps={} rate={:.6}", kind.name(), steps, sum / n.max(1) as f64);
        return Ok(());
    }
    let output = args.require("output")?;
    match kind {
        EncoderKind::Poisson | EncoderKind::Latency => {
            let frames: Vec<DenseTensor> = (0..drive.steps()).map(|t| drive.frame(t).clone()).collect();
            let train = crate::tensor::SpikeTrain::from_frames(frames)?;
            let mut buf = Vec::new();
            serialize_train(&train, &mut buf)?;
            write_file(output, &buf)?;
            println!("wrote {} steps to {}", steps, output);
            Ok(())
        }
        _ => Err(Error::Config(
            "self and zaxis drives are not binary spike trains; use --stats".into(),
        )),
    }
}

fn train_config(args: &Args, cfg: &Config) -> Result<TrainConfig> {
    let mut tc = TrainConfig::default();
    let from_cfg = |key: &str| cfg.get("train", key).map(str::to_string);
    macro_rules! pick {
        ($field:expr, $name:literal, $ty:ty) => {
            if let Some(v) = from_cfg($name) {
                $field = v.parse::<$ty>().map_err(|_| {
                    Error::Config(format!("[train] {} = '{}' is not valid", $name, v))
                })?;
            }
            if let Some(v) = args.get_parsed::<$ty>($name)? {
                $field = v;
            }
        };
    }
    pick!(tc.epochs, "epochs", usize);
    pick!(tc.steps_per_epoch, "steps-per-epoch", usize);
    pick!(tc.batch, "batch", usize);
    pick!(tc.lr, "lr", f64);
    pick!(tc.clip_norm, "clip_norm", f32);
    pick!(tc.restart_period, "restart_period", f64);
    pick!(tc.restart_mult, "restart_mult", f64);
    pick!(tc.seed, "seed", u64);
    pick!(tc.scale, "scale", usize);
    pick!(tc.steps, "steps", usize);
    pick!(tc.max_objects, "max_objects", usize);
    pick!(tc.threads, "threads", usize);
    if tc.threads == 0 {
        tc.threads = env_threads();
    }
    if let Some(v) = cfg.get_parsed::<bool>("train", "per_channel_lif")? {
        tc.per_channel_lif = v;
    }
    if let Some(e) = cfg.get("train", "encoder") {
        tc.encoder = EncoderKind::parse(e)?;
    }
    if let Some(e) = args.get("encoder") {
        tc.encoder = EncoderKind::parse(e)?;
    }
    // Loss section.
    let mut kp = KpLossConfig::default();
    let mut gate_set = false;
    if let Some(v) = cfg.get_parsed::<f32>("loss", "alpha_t")? {
        kp.alpha_t = v;
    }
    if let Some(v) = cfg.get_parsed::<f32>("loss", "w_e")? {
        kp.w_e = v;
    }
    if let Some(v) = cfg.get_parsed::<f32>("loss", "w_f")? {
        kp.w_f = v;
    }
    if let Some(v) = cfg.get_parsed::<f32>("loss", "alpha")? {
        kp.alpha = v;
    }
    if let Some(v) = cfg.get_parsed::<f32>("loss", "beta")? {
        kp.beta = v;
    }
    if let Some(v) = cfg.get_parsed::<usize>("loss", "k")? {
        kp.k = v;
    }
    if let Some(v) = cfg.get_parsed::<f32>("loss", "eps")? {
        kp.eps = v;
    }
    if let Some(v) = cfg.get_parsed::<f32>("loss", "lambda_d")? {
        kp.lambda_d = v;
    }
    if let Some(v) = cfg.get_parsed::<usize>("loss", "e_gate")? {
        kp.e_gate = v;
        gate_set = true;
    }
    tc.kp = kp;
    if let Some(v) = cfg.get_parsed::<f32>("loss", "w_box")? {
        tc.w_box = v;
    }
    if let Some(v) = cfg.get_parsed::<f32>("loss", "w_rot")? {
        tc.w_rot = v;
    }
    if let Some(v) = cfg.get_parsed::<f32>("loss", "rot_smoothing")? {
        tc.rot_smoothing = v;
    }
    if !gate_set {
        tc = tc.with_default_gate();
    }
    Ok(tc)
}

fn cmd_train(args: &Args) -> Result<()> {
    let out_dir = args.require("out-dir")?.to_string();
    let cfg = load_config(args)?;
    let tc = train_config(args, &cfg)?;
    let outcome = fit(&tc, Some(Path::new(&out_dir)))?;
    let last = outcome.epochs.last();
    println!(
        "trained {} epochs x {} steps (batch {}) at scale {}; outputs in {}",
        tc.epochs, tc.steps_per_epoch, tc.batch, tc.scale, out_dir
    );
    if let Some(r) = last {
        println!(
            "final: kp {:.4} box {:.4} rot {:.4} firing rate {:.4}",
            r.kp_loss, r.box_loss, r.rot_loss, r.mean_firing_rate
        );
    }
    Ok(())
}

fn cmd_infer(args: &Args) -> Result<()> {
    let ck_path = args.require("checkpoint")?;
    let frame_path = args.require("frame")?;
    let variant = Variant::parse(args.require("variant")?)?;
    let output = args.require("output")?;
    let seed: u64 = args.get_parsed("seed")?.unwrap_or(0);
    let kind = match args.get("encoder") {
        Some(e) => EncoderKind::parse(e)?,
        None => EncoderKind::SelfCoding,
    };
    let mut dc = DecodeConfig::default();
    if let Some(v) = args.get_parsed::<f32>("threshold")? {
        dc.threshold = v;
    }
    let mut f = std::fs::File::open(ck_path)
        .map_err(|e| Error::io(format!("opening {ck_path}"), e))?;
    let net = checkpoint::load(&mut f)?;
    let frame = read_frame(frame_path)?;
    let expect = kind.input_channels(frame.zbins.shape().channels);
    if expect != net.cfg.input_channels {
        return Err(Error::Config(format!(
            "checkpoint expects {} input channels but encoder '{}' on this frame produces {}",
            net.cfg.input_channels,
            kind.name(),
            expect
        )));
    }
    let mut rng = RngStream::new(seed, 0x1FE2);
    let drive = encode(kind, &frame, net.cfg.steps, &mut rng)?;
    let maps = readout_maps(&net, &drive, variant)?;
    let dets = assemble(&maps, variant, &dc)?;
    let mut csv = String::from(DETECTION_CSV_HEADER);
    csv.push('\n');
    for d in &dets {
        csv.push_str(&detection_csv_row(0, d));
        csv.push('\n');
    }
    write_file(output, csv.as_bytes())?;
    println!("{} detections ({} variant) -> {}", dets.len(), variant.name(), output);
    Ok(())
}

fn cmd_energy(args: &Args) -> Result<()> {
    let (spec, measured_header): (GraphSpec, Option<String>) = if args.has("canonical") {
        let scale = args.get_parsed::<usize>("scale")?.unwrap_or(1);
        let cfg = GraphConfig { scale, ..GraphConfig::default() };
        (plan_canonical(&cfg)?, None)
    } else if let Some(path) = args.get("graph") {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading graph {path}"), e))?;
        (GraphSpec::parse_text(&text)?, None)
    } else if args.has("measured") {
        let ck = args.require("checkpoint")?;
        let mut f = std::fs::File::open(ck)
            .map_err(|e| Error::io(format!("opening {ck}"), e))?;
        let net = checkpoint::load(&mut f)?;
        (net.spec().clone(), None)
    } else {
        return Err(Error::Config(
            "energy needs a graph: --canonical, --graph <file>, or --measured --checkpoint <ck>".into(),
        ));
    };
    let (rates, header) = if args.has("table3") {
        (reference_rates(), None)
    } else if let Some(path) = args.get("rates") {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading rates {path}"), e))?;
        (parse_rates_csv(&text)?, None)
    } else if args.has("measured") {
        let ck = args.require("checkpoint")?;
        let mut f = std::fs::File::open(ck)
            .map_err(|e| Error::io(format!("opening {ck}"), e))?;
        let net = checkpoint::load(&mut f)?;
        let frames: usize = args.get_parsed("frames")?.unwrap_or(8);
        let seed: u64 = args.get_parsed("seed")?.unwrap_or(0);
        let bev = BevConfig::scaled(net.cfg.scale);
        let kind = if net.cfg.input_channels == 6 {
            EncoderKind::ZAxisTemporal
        } else {
            EncoderKind::SelfCoding
        };
        let mut stats = crate::network::FiringStats::default();
        for i in 0..frames {
            let mut srng = RngStream::new(seed, 0xE4E2).substream(i as u64);
            let scene = crate::scene::gen_scene(&mut srng, &bev, 2)?;
            let mut erng = RngStream::new(seed, 0xE4E3).substream(i as u64);
            let drive = encode(kind, &scene.frame, net.cfg.steps, &mut erng)?;
            let out = net.forward(
                &drive,
                ForwardOptions { record: false, capture_vmem: false, mode: SpikeMode::Binary },
            )?;
            stats.merge(&out.stats);
        }
        let rates: Vec<(String, f64)> = stats
            .per_block
            .iter()
            .map(|(n, s, t)| (n.clone(), *s as f64 / (*t).max(1) as f64))
            .collect();
        let header = format!(
            "# firing rates measured on {frames} synthetic scenes (seed {seed}, {} encoder)\n",
            kind.name()
        );
        (rates, Some(header))
    } else {
        return Err(Error::Config(
            "energy needs rates: --table3, --rates <csv>, or --measured".into(),
        ));
    };
    let _ = measured_header;
    // The timestep budget follows the analyzed graph.
    let consts = EnergyConstants { steps: spec.steps, ..EnergyConstants::default() };
    let report = build_report(&spec, &rates, &consts)?;
    let mut csv = header.unwrap_or_default();
    csv.push_str(&report_csv(&report));
    match args.get("output") {
        Some(path) => {
            write_file(path, csv.as_bytes())?;
            println!(
                "total ratio {:.2}, hardware extrapolation {:.0}x -> {}",
                report.total.ratio.unwrap_or(f64::NAN),
                report.hardware_extrapolation,
                path
            );
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn check(name: &str, ok: bool, failures: &mut usize) {
    if ok {
        println!("PASS {name}");
    } else {
        println!("FAIL {name}");
        *failures += 1;
    }
}

fn cmd_selftest() -> Result<()> {
    let mut failures = 0usize;

    // Canonical MAC table.
    let spec = plan_canonical(&GraphConfig::default())?;
    check("canonical-mac-total", spec.total_macs() == 68_898_918_400, &mut failures);
    let rows: &[(&str, u64)] = &[
        ("Stem", 162_201_600),
        ("DB1", 2_785_280_000),
        ("DB2", 3_632_332_800),
        ("DB3", 4_066_918_400),
        ("DB4", 4_286_976_000),
        ("UB4_4", 8_659_763_200),
        ("UB3_4", 16_472_473_600),
        ("UB2_3", 14_981_529_600),
        ("UB1_2", 12_215_910_400),
        ("Keypoint", 532_070_400),
        ("Box", 534_528_000),
        ("Rotation", 568_934_400),
    ];
    check(
        "canonical-mac-blocks",
        rows.iter().all(|(n, m)| spec.block(n).map(|b| b.macs()) == Some(*m)),
        &mut failures,
    );

    // Reference energy report.
    let report = build_report(&spec, &reference_rates(), &EnergyConstants::default())?;
    check(
        "energy-cnn-total",
        (report.total.cnn_uj - 316935.0246).abs() < 1e-3,
        &mut failures,
    );
    check(
        "energy-snn-total",
        (report.total.snn_uj - 95170.4304).abs() / 95170.4304 < 0.005,
        &mut failures,
    );
    check(
        "energy-ratio",
        report.total.ratio.map(|r| (r - 3.33).abs() < 0.01).unwrap_or(false),
        &mut failures,
    );
    check(
        "energy-hardware-extrapolation",
        (report.hardware_extrapolation - 43.0).abs() < 1.0,
        &mut failures,
    );

    // LIF step oracle.
    let p = crate::neuron::LifParams::new(0.9, 1.0, 2.0)?;
    let state = crate::neuron::LifState {
        u: DenseTensor::from_vec(Shape::new(1, 1, 1, 1), vec![0.5])?,
    };
    let inp = DenseTensor::from_vec(Shape::new(1, 1, 1, 1), vec![0.3])?;
    let (s, next) = crate::neuron::lif_step(&state, &inp, &p)?;
    check(
        "lif-step-oracle",
        s.data()[0] == 0.0 && next.u.data()[0] == 0.75,
        &mut failures,
    );

    // Surrogate gradient vs the centered finite difference of tanh(kx)/k,
    // evaluated through the exact identity
    // tanh(a) - tanh(b) = sinh(a-b) / (cosh(a) cosh(b)),
    // which stays accurate where tanh saturates to 1 in floating point.
    let mut sur_ok = true;
    for &k in &[0.5f64, 1.0, 2.0, 5.0] {
        for i in 0..=600 {
            let x = -3.0 + i as f64 * 0.01;
            let h = 1e-5;
            let fd = (2.0 * k * h).sinh() / (2.0 * k * h * (k * (x + h)).cosh() * (k * (x - h)).cosh());
            let got = crate::neuron::surrogate_grad_scalar(x as f32, k as f32) as f64;
            if (got - fd).abs() > fd.abs() * 1e-5 {
                sur_ok = false;
            }
        }
    }
    check("surrogate-finite-difference", sur_ok, &mut failures);

    // Poisson encoder statistics.
    let mut pois_ok = true;
    for &x in &[0.1f32, 0.5, 0.9] {
        let frame = DenseTensor::from_vec(Shape::new(1, 1, 10, 100), vec![x; 1000])?;
        let mut rng = RngStream::new(42, 1000 + (x * 10.0) as u64);
        let train = crate::encoding::encode_poisson(&frame, 10, &mut rng)?;
        let rate = train.count_spikes() as f64 / 10_000.0;
        let sigma = (x as f64 * (1.0 - x as f64) / 10_000.0).sqrt();
        if (rate - x as f64).abs() > 3.0 * sigma {
            pois_ok = false;
        }
    }
    check("poisson-statistics", pois_ok, &mut failures);

    // Tensor serialization round trip.
    let mut rng = RngStream::new(3, 3);
    let t = DenseTensor::from_vec(
        Shape::new(2, 3, 4, 5),
        (0..120).map(|_| rng.next_range(-2.0, 2.0)).collect(),
    )?;
    let mut buf = Vec::new();
    serialize_tensor(&t, &mut buf)?;
    let back = deserialize_tensor(&mut buf.as_slice())?;
    check("bevt-round-trip", t == back, &mut failures);

    if failures > 0 {
        Err(Error::Internal(format!("{failures} selftest suites failed")))
    } else {
        println!("selftest: all suites passed");
        Ok(())
    }
}

/// Run the CLI; returns the process exit code.
pub fn run(argv: &[String]) -> i32 {
    if argv.is_empty() {
        eprint!("{USAGE}");
        return 1;
    }
    let command = argv[0].as_str();
    let args = match Args::parse(&argv[1..]) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            eprint!("{USAGE}");
            return 1;
        }
    };
    if args.has("help") || command == "help" {
        print!("{USAGE}");
        return 0;
    }
    let result = match command {
        "ingest" => cmd_ingest(&args),
        "encode" => cmd_encode(&args),
        "train" => cmd_train(&args),
        "infer" => cmd_infer(&args),
        "energy" => cmd_energy(&args),
        "selftest" => cmd_selftest(),
        other => {
            eprintln!("error: unknown command '{other}'");
            eprint!("{USAGE}");
            return 1;
        }
    };
    match result {
        Ok(()) => 0,
        Err(e @ (Error::Config(_) | Error::Domain(_) | Error::Parse { .. } | Error::Shape(_))) => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
