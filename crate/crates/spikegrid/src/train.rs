//! Surrogate-gradient training over the unrolled graph: per-sample forward/
//! backward on synthetic scenes, deterministic batch aggregation, Adam with
//! warm restarts, metrics logging, and held-out recall evaluation.

use crate::bev::BevConfig;
use crate::checkpoint;
use crate::decode::{assemble, DecodeConfig, HeadMaps, Variant};
use crate::encoding::{encode, EncoderKind};
use crate::error::{Error, Result};
use crate::losses::{box_loss_with_grad, kp_loss_with_grad, rot_loss_with_grad, KpLossConfig, ROT_BINS};
use crate::network::{FiringStats, ForwardOptions, GraphConfig, NetGrads, Network};
use crate::neuron::SpikeMode;
use crate::optim::{clip_global_norm, Adam, Schedule};
use crate::rng::RngStream;
use crate::scene::{gen_scene, SyntheticScene};
use crate::tensor::DenseTensor;
use std::io::Write as _;
use std::path::Path;

/// Stream ids for the independent stochastic sites.
const STREAM_INIT: u64 = 1;
const STREAM_SCENES: u64 = 2;
const STREAM_ENCODER: u64 = 3;
const STREAM_HELDOUT: u64 = 4;

/// Training run configuration.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub clip_norm: f32,
    /// First cosine cycle length in epochs.
    pub restart_period: f64,
    pub restart_mult: f64,
    pub seed: u64,
    /// Network divisor (desk scale: 8).
    pub scale: usize,
    /// Timesteps T.
    pub steps: usize,
    pub encoder: EncoderKind,
    pub max_objects: usize,
    pub kp: KpLossConfig,
    pub w_box: f32,
    pub w_rot: f32,
    pub rot_smoothing: f32,
    /// Worker cap; 0 uses min(batch, available cores).
    pub threads: usize,
    pub init_gain: f32,
    pub thr_init: f32,
    pub beta_init: f32,
    /// Learn LIF decay/threshold per channel instead of per layer.
    pub per_channel_lif: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 25,
            steps_per_epoch: 20,
            batch: 4,
            lr: 1e-3,
            lr_min: 0.0,
            clip_norm: 1.0,
            restart_period: 10.0,
            restart_mult: 2.0,
            seed: 7,
            scale: 8,
            steps: 13,
            encoder: EncoderKind::SelfCoding,
            max_objects: 3,
            kp: KpLossConfig::default(),
            w_box: 1.0,
            w_rot: 1.0,
            rot_smoothing: 0.1,
            threads: 0,
            init_gain: 1.0,
            thr_init: 0.4,
            beta_init: 0.9,
            per_channel_lif: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_norm <= 0.0 {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.lr <= 0.0 && self.epochs > 0 {
            // lr = 0 is allowed for no-op training checks.
        }
        if self.lr < 0.0 {
            return Err(Error::Config("lr must be non-negative".into()));
        }
        if self.steps < 2 {
            return Err(Error::Config("training needs T >= 2".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        self.kp.validate()
    }

    /// Dice gating epoch: first 20% of training unless overridden.
    pub fn effective_kp(&self) -> KpLossConfig {
        KpLossConfig { e_gate: self.kp.e_gate.min(self.epochs), ..self.kp }
    }

    pub fn bev_config(&self) -> BevConfig {
        BevConfig::scaled(self.scale)
    }

    pub fn graph_config(&self) -> GraphConfig {
        let bev = self.bev_config();
        GraphConfig {
            scale: self.scale,
            steps: self.steps,
            input_channels: self.encoder.input_channels(bev.z_bins),
            per_channel_lif: self.per_channel_lif,
            surrogate_k: 2.0,
            beta_init: self.beta_init,
            thr_init: self.thr_init,
            init_gain: self.init_gain,
        }
    }

    /// Default gate at 20% of the configured epochs.
    pub fn with_default_gate(mut self) -> Self {
        self.kp.e_gate = (self.epochs as f32 * 0.2).floor() as usize;
        self
    }
}

/// One epoch of the metrics log.
#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: usize,
    pub kp_loss: f64,
    pub box_loss: f64,
    pub rot_loss: f64,
    /// Network mean firing rate (spikes per neuron-step).
    pub mean_firing_rate: f64,
    /// MAC-weighted mean, the energy-table total convention.
    pub mac_weighted_rate: f64,
    pub lr: f64,
}

pub const METRICS_CSV_HEADER: &str = "epoch,kp_loss,box_loss,rot_loss,mean_firing_rate,lr";

pub fn metrics_csv(rows: &[EpochRow]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.8}\n",
            r.epoch, r.kp_loss, r.box_loss, r.rot_loss, r.mean_firing_rate, r.lr
        ));
    }
    out
}

/// Completed training run.
pub struct FitOutcome {
    pub net: Network,
    pub epochs: Vec<EpochRow>,
    /// Per-optimizer-step keypoint loss (batch mean).
    pub step_kp: Vec<f64>,
}

struct SampleResult {
    grads: NetGrads,
    kp: f64,
    boxl: f64,
    rot: f64,
    stats: FiringStats,
}

fn sample_pass(
    net: &Network,
    bev_cfg: &BevConfig,
    cfg: &TrainConfig,
    kp_cfg: &KpLossConfig,
    epoch: usize,
    scene_seed: u64,
) -> Result<SampleResult> {
    let mut scene_rng = RngStream::new(cfg.seed, STREAM_SCENES).substream(scene_seed);
    let n_objects = 1 + scene_rng.next_below(cfg.max_objects.max(1));
    let scene = gen_scene(&mut scene_rng, bev_cfg, n_objects)?;
    let mut enc_rng = RngStream::new(cfg.seed, STREAM_ENCODER).substream(scene_seed);
    let drive = encode(cfg.encoder, &scene.frame, cfg.steps, &mut enc_rng)?;
    let out = net.forward(
        &drive,
        ForwardOptions { record: true, capture_vmem: false, mode: SpikeMode::Binary },
    )?;
    let trace = out
        .trace
        .as_ref()
        .ok_or_else(|| Error::Internal("forward did not retain state for backward".into()))?;
    let (kp, kp_grads) = kp_loss_with_grad(&out.head_spikes[0], &scene.gt, kp_cfg, epoch)?;
    let (boxl, mut box_grads) = box_loss_with_grad(&out.head_spikes[1], &scene.gt, kp_cfg.k)?;
    let (rot, mut rot_grads) =
        rot_loss_with_grad(&out.head_spikes[2], &scene.gt, &[1.0; ROT_BINS], cfg.rot_smoothing)?;
    for g in &mut box_grads {
        g.scale(cfg.w_box);
    }
    for g in &mut rot_grads {
        g.scale(cfg.w_rot);
    }
    let grads = net.backward(trace, &[kp_grads, box_grads, rot_grads])?;
    Ok(SampleResult { grads, kp, boxl, rot, stats: out.stats })
}

fn worker_count(cfg: &TrainConfig) -> usize {
    let hw = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let cap = if cfg.threads == 0 { hw } else { cfg.threads };
    cap.clamp(1, cfg.batch)
}

/// One optimizer step over a fresh batch; deterministic in `(seed, step)`
/// regardless of the worker count, because per-sample results are merged in
/// sample order.
fn batch_step(
    net: &Network,
    cfg: &TrainConfig,
    kp_cfg: &KpLossConfig,
    epoch: usize,
    global_step: usize,
) -> Result<(NetGrads, f64, f64, f64, FiringStats)> {
    let bev_cfg = cfg.bev_config();
    let workers = worker_count(cfg);
    let mut results: Vec<Option<Result<SampleResult>>> = (0..cfg.batch).map(|_| None).collect();
    if workers <= 1 {
        for (i, slot) in results.iter_mut().enumerate() {
            let seed = (global_step * cfg.batch + i) as u64;
            *slot = Some(sample_pass(net, &bev_cfg, cfg, kp_cfg, epoch, seed));
        }
    } else {
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for i in 0..cfg.batch {
                let seed = (global_step * cfg.batch + i) as u64;
                let bev_cfg = &bev_cfg;
                handles.push((
                    i,
                    scope.spawn(move || sample_pass(net, bev_cfg, cfg, kp_cfg, epoch, seed)),
                ));
            }
            for (i, h) in handles {
                results[i] = Some(h.join().unwrap_or_else(|_| {
                    Err(Error::Internal("training worker panicked".into()))
                }));
            }
        });
    }
    let mut total: Option<NetGrads> = None;
    let mut kp_sum = 0.0;
    let mut box_sum = 0.0;
    let mut rot_sum = 0.0;
    let mut stats = FiringStats::default();
    for slot in results {
        let r = slot.expect("all samples scheduled")?;
        kp_sum += r.kp;
        box_sum += r.boxl;
        rot_sum += r.rot;
        stats.merge(&r.stats);
        match total.as_mut() {
            None => total = Some(r.grads),
            Some(t) => t.add_assign(&r.grads),
        }
    }
    let mut grads = total.expect("batch is non-empty");
    grads.scale(1.0 / cfg.batch as f32);
    let b = cfg.batch as f64;
    Ok((grads, kp_sum / b, box_sum / b, rot_sum / b, stats))
}

/// Train on generated scenes. When `out_dir` is given, `metrics.csv` and
/// `checkpoint.sgck` are refreshed after every epoch, so the last good
/// checkpoint survives a divergence abort.
pub fn fit(cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<FitOutcome> {
    cfg.validate()?;
    let kp_cfg = cfg.effective_kp();
    let mut init_rng = RngStream::new(cfg.seed, STREAM_INIT);
    let mut net = Network::build_canonical(cfg.graph_config(), &mut init_rng)?;
    let mut adam = Adam::new();
    let schedule = Schedule {
        lr_max: cfg.lr,
        lr_min: cfg.lr_min,
        restart_period: cfg.restart_period,
        restart_mult: cfg.restart_mult,
    };
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step_kp = Vec::with_capacity(cfg.epochs * cfg.steps_per_epoch);
    let mut global_step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut kp_acc = 0.0;
        let mut box_acc = 0.0;
        let mut rot_acc = 0.0;
        let mut rate_acc = 0.0;
        let mut mac_acc = 0.0;
        let mut lr_last = schedule.lr_at_epoch(epoch as f64);
        for step in 0..cfg.steps_per_epoch {
            let (mut grads, kp, boxl, rot, stats) =
                batch_step(&net, cfg, &kp_cfg, epoch, global_step)?;
            if !(kp.is_finite() && boxl.is_finite() && rot.is_finite()) {
                return Err(Error::Numeric(format!(
                    "loss diverged at epoch {epoch} step {step}; last good checkpoint is the previous epoch"
                )));
            }
            step_kp.push(kp);
            kp_acc += kp;
            box_acc += boxl;
            rot_acc += rot;
            rate_acc += stats.overall_rate();
            mac_acc += stats.mac_weighted_rate(net.spec());
            let progress = epoch as f64 + step as f64 / cfg.steps_per_epoch as f64;
            lr_last = schedule.lr_at_epoch(progress);
            clip_global_norm(&mut grads, cfg.clip_norm)?;
            adam.step(&mut net, &mut grads, lr_last)?;
            global_step += 1;
        }
        let n = cfg.steps_per_epoch.max(1) as f64;
        let row = EpochRow {
            epoch,
            kp_loss: kp_acc / n,
            box_loss: box_acc / n,
            rot_loss: rot_acc / n,
            mean_firing_rate: rate_acc / n,
            mac_weighted_rate: mac_acc / n,
            lr: lr_last,
        };
        epochs.push(row);
        if let Some(dir) = out_dir {
            write_outputs(dir, &net, &epochs)?;
        }
    }
    Ok(FitOutcome { net, epochs, step_kp })
}

fn write_outputs(dir: &Path, net: &Network, epochs: &[EpochRow]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let metrics_path = dir.join("metrics.csv");
    let mut f = std::fs::File::create(&metrics_path)
        .map_err(|e| Error::io(format!("creating {}", metrics_path.display()), e))?;
    f.write_all(metrics_csv(epochs).as_bytes())
        .map_err(|e| Error::io("writing metrics.csv", e))?;
    let ckpt_path = dir.join("checkpoint.sgck");
    let mut f = std::fs::File::create(&ckpt_path)
        .map_err(|e| Error::io(format!("creating {}", ckpt_path.display()), e))?;
    checkpoint::save(net, &mut f)?;
    Ok(())
}

/// Held-out scenes drawn from a dedicated stream (at least one object each).
pub fn heldout_scenes(cfg: &TrainConfig, count: usize) -> Result<Vec<SyntheticScene>> {
    let bev_cfg = cfg.bev_config();
    let mut scenes = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = RngStream::new(cfg.seed, STREAM_HELDOUT).substream(i as u64);
        let n = 1 + rng.next_below(cfg.max_objects.max(1));
        scenes.push(gen_scene(&mut rng, &bev_cfg, n)?);
    }
    Ok(scenes)
}

/// Head maps for decoding under the chosen readout variant.
pub fn readout_maps(net: &Network, scene_drive_frames: &crate::encoding::InputDrive, variant: Variant) -> Result<HeadMaps> {
    let out = net.forward(
        scene_drive_frames,
        ForwardOptions {
            record: false,
            capture_vmem: variant == Variant::Vmem,
            mode: SpikeMode::Binary,
        },
    )?;
    match variant {
        Variant::Spike => Ok(HeadMaps {
            kp: DenseTensor::mean_of(&out.head_spikes[0])?,
            boxes: DenseTensor::mean_of(&out.head_spikes[1])?,
            rot: DenseTensor::mean_of(&out.head_spikes[2])?,
        }),
        Variant::Vmem => {
            let vmem = out
                .head_vmem
                .ok_or_else(|| Error::Config("graph did not capture membranes for vmem readout".into()))?;
            let [kp, boxes, rot] = vmem;
            // Box and rotation membranes are normalized by the accumulation
            // horizon so they decode on the same scale as rates.
            let mut boxes = boxes;
            boxes.scale(1.0 / net.vmem_rate_scale(1));
            let mut rot = rot;
            rot.scale(1.0 / net.vmem_rate_scale(2));
            Ok(HeadMaps { kp, boxes, rot })
        }
    }
}

/// Recall of planted objects within a center tolerance (in cells).
#[derive(Debug, Clone, Copy)]
pub struct RecallReport {
    pub recovered: usize,
    pub total: usize,
}

impl RecallReport {
    pub fn recall(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.recovered as f64 / self.total as f64
        }
    }
}

pub fn evaluate_recall(
    net: &Network,
    cfg: &TrainConfig,
    scenes: &[SyntheticScene],
    variant: Variant,
    decode_cfg: &DecodeConfig,
    tolerance_cells: usize,
) -> Result<RecallReport> {
    let mut recovered = 0usize;
    let mut total = 0usize;
    for (i, scene) in scenes.iter().enumerate() {
        let mut enc_rng = RngStream::new(cfg.seed, STREAM_HELDOUT).substream(0xE0_0000 + i as u64);
        let drive = encode(cfg.encoder, &scene.frame, cfg.steps, &mut enc_rng)?;
        let maps = readout_maps(net, &drive, variant)?;
        let dets = assemble(&maps, variant, decode_cfg)?;
        for o in &scene.objects {
            total += 1;
            let hit = dets.iter().any(|d| {
                d.row.abs_diff(o.cell.0) <= tolerance_cells && d.col.abs_diff(o.cell.1) <= tolerance_cells
            });
            if hit {
                recovered += 1;
            }
        }
    }
    Ok(RecallReport { recovered, total })
}
