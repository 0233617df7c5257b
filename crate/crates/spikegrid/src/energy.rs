//! Block-wise synaptic-operation energy model: MAC counting per layer,
//! accumulate-only SNN energy versus multiply-accumulate CNN energy, and the
//! per-block report with stage subtotals and the hardware extrapolation.

use crate::error::{Error, Result};
use crate::network::{BlockSpec, GraphSpec, LayerSpec, Stage};

/// 45 nm process constants plus the timestep budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyConstants {
    /// Energy per multiply-accumulate, picojoules.
    pub e_mac: f64,
    /// Energy per accumulate-only event, picojoules.
    pub e_ac: f64,
    pub steps: usize,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        EnergyConstants { e_mac: 4.6, e_ac: 0.9, steps: 13 }
    }
}

impl EnergyConstants {
    pub fn validate(&self) -> Result<()> {
        if self.e_mac <= 0.0 || self.e_ac <= 0.0 {
            return Err(Error::Config("energy constants must be positive".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("energy model needs steps >= 1".into()));
        }
        Ok(())
    }
}

/// Synaptic MAC count of one layer: `C_in * K^2 * C_out * H_out * W_out`
/// for conv and transposed conv (output-resolution convention); zero for
/// normalization, LIF, and concatenation. Bias additions are excluded.
pub fn mac_count(layer: &LayerSpec) -> u64 {
    layer.macs()
}

/// Event-driven energy: `MACs * rate * T * E_AC` picojoules.
pub fn snn_energy(macs: u64, rate: f64, consts: &EnergyConstants) -> Result<f64> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Domain(format!("firing rate {rate} outside [0,1]")));
    }
    Ok(macs as f64 * rate * consts.steps as f64 * consts.e_ac)
}

/// Dense inference energy: `MACs * E_MAC` picojoules.
pub fn cnn_energy(macs: u64, consts: &EnergyConstants) -> f64 {
    macs as f64 * consts.e_mac
}

/// CNN/SNN energy ratio `E_MAC / (rate * T * E_AC)`; `None` for a silent
/// block (reported as an em dash).
pub fn energy_ratio(rate: f64, consts: &EnergyConstants) -> Option<f64> {
    if rate <= 0.0 {
        return None;
    }
    Some(consts.e_mac / (rate * consts.steps as f64 * consts.e_ac))
}

/// One row of the energy report.
#[derive(Debug, Clone)]
pub struct EnergyRow {
    pub stage: Stage,
    pub block: String,
    pub input: (usize, usize, usize),
    pub macs: u64,
    pub rate: f64,
    pub snn_uj: f64,
    pub cnn_uj: f64,
    pub snn_share: f64,
    pub cnn_share: f64,
    pub ratio: Option<f64>,
}

impl EnergyRow {
    pub fn sparsity(&self) -> f64 {
        1.0 - self.rate
    }
}

/// The in-memory mirror of the block-wise energy table.
#[derive(Debug, Clone)]
pub struct EnergyReport {
    pub blocks: Vec<EnergyRow>,
    /// MAC-weighted subtotals per stage, in stage order.
    pub subtotals: Vec<EnergyRow>,
    pub total: EnergyRow,
    /// Ratio times T: the loop-free hardware extrapolation.
    pub hardware_extrapolation: f64,
    pub consts: EnergyConstants,
}

const PJ_PER_UJ: f64 = 1e6;

fn row_from(
    stage: Stage,
    name: &str,
    input: (usize, usize, usize),
    macs: u64,
    rate: f64,
    consts: &EnergyConstants,
) -> Result<EnergyRow> {
    Ok(EnergyRow {
        stage,
        block: name.to_string(),
        input,
        macs,
        rate,
        snn_uj: snn_energy(macs, rate, consts)? / PJ_PER_UJ,
        cnn_uj: cnn_energy(macs, consts) / PJ_PER_UJ,
        snn_share: 0.0,
        cnn_share: 0.0,
        ratio: None,
    })
}

/// Build the full report from a graph and per-block firing rates.
///
/// Every block in the graph must have a rate; subtotal and total rates are
/// MAC-weighted means, matching the table's aggregation.
pub fn build_report(
    graph: &GraphSpec,
    rates: &[(String, f64)],
    consts: &EnergyConstants,
) -> Result<EnergyReport> {
    consts.validate()?;
    let rate_for = |b: &BlockSpec| -> Result<f64> {
        rates
            .iter()
            .find(|(n, _)| n == &b.name)
            .map(|(_, r)| *r)
            .ok_or_else(|| Error::Config(format!("missing firing rate for block '{}'", b.name)))
    };
    let mut blocks = Vec::with_capacity(graph.blocks.len());
    for b in &graph.blocks {
        blocks.push(row_from(b.stage, &b.name, b.input, b.macs(), rate_for(b)?, consts)?);
    }
    let mut subtotals = Vec::new();
    for stage in [Stage::Input, Stage::Encoder, Stage::Decoder, Stage::Output] {
        let rows: Vec<&EnergyRow> = blocks.iter().filter(|r| r.stage == stage).collect();
        if rows.is_empty() {
            continue;
        }
        let macs: u64 = rows.iter().map(|r| r.macs).sum();
        let weighted: f64 = rows.iter().map(|r| r.macs as f64 * r.rate).sum();
        let rate = weighted / macs as f64;
        let name = format!("{} subtotal", stage.name());
        subtotals.push(row_from(stage, &name, (0, 0, 0), macs, rate, consts)?);
    }
    let total_macs: u64 = blocks.iter().map(|r| r.macs).sum();
    let total_rate: f64 =
        blocks.iter().map(|r| r.macs as f64 * r.rate).sum::<f64>() / total_macs as f64;
    let mut total = row_from(Stage::Output, "Total", (0, 0, 0), total_macs, total_rate, consts)?;
    // Shares and ratios against the totals.
    let fill = |r: &mut EnergyRow, total_snn: f64, total_cnn: f64, consts: &EnergyConstants| {
        r.snn_share = 100.0 * r.snn_uj / total_snn;
        r.cnn_share = 100.0 * r.cnn_uj / total_cnn;
        r.ratio = energy_ratio(r.rate, consts);
    };
    let (tot_snn, tot_cnn) = (total.snn_uj, total.cnn_uj);
    for r in blocks.iter_mut().chain(subtotals.iter_mut()) {
        fill(r, tot_snn, tot_cnn, consts);
    }
    fill(&mut total, tot_snn, tot_cnn, consts);
    let hw = total.ratio.map(|r| r * consts.steps as f64).unwrap_or(f64::INFINITY);
    Ok(EnergyReport {
        blocks,
        subtotals,
        total,
        hardware_extrapolation: hw,
        consts: *consts,
    })
}

/// The published per-block firing rates for the canonical graph, used by
/// the `--table3`-style report without a trained network.
pub fn reference_rates() -> Vec<(String, f64)> {
    [
        ("Stem", 0.0183),
        ("DB1", 0.0744),
        ("DB2", 0.0873),
        ("DB3", 0.0682),
        ("DB4", 0.0907),
        ("UB4_4", 0.1231),
        ("UB3_4", 0.1414),
        ("UB2_3", 0.0933),
        ("UB1_2", 0.1295),
        ("Keypoint", 0.3485),
        ("Box", 0.3465),
        ("Rotation", 0.3434),
    ]
    .iter()
    .map(|(n, r)| (n.to_string(), *r))
    .collect()
}

fn fmt_ratio(r: Option<f64>) -> String {
    match r {
        Some(v) => format!("{v:.2}"),
        None => "-".to_string(),
    }
}

/// Render the report as CSV with the table's column set.
pub fn report_csv(report: &EnergyReport) -> String {
    let mut out = String::from(
        "stage,block,input_chw,macs,firing_rate,sparsity,snn_uj,cnn_uj,snn_share_pct,cnn_share_pct,cnn_snn_ratio\n",
    );
    let mut push = |r: &EnergyRow| {
        let input = if r.input == (0, 0, 0) {
            "-".to_string()
        } else {
            format!("{}x{}x{}", r.input.0, r.input.1, r.input.2)
        };
        out.push_str(&format!(
            "{},{},{},{},{:.4},{:.4},{:.4},{:.4},{:.2},{:.2},{}\n",
            r.stage.name(),
            r.block,
            input,
            r.macs,
            r.rate,
            r.sparsity(),
            r.snn_uj,
            r.cnn_uj,
            r.snn_share,
            r.cnn_share,
            fmt_ratio(r.ratio),
        ));
    };
    for r in &report.blocks {
        push(r);
    }
    for r in &report.subtotals {
        push(r);
    }
    push(&report.total);
    out.push_str(&format!(
        "# hardware extrapolation (loop-free): {:.1}x\n",
        report.hardware_extrapolation
    ));
    out
}

/// Parse a `block,rate` CSV (header optional).
pub fn parse_rates_csv(text: &str) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, rate) = line.split_once(',').ok_or_else(|| Error::Parse {
            offset: i as u64,
            message: format!("expected 'block,rate', got '{line}'"),
        })?;
        if i == 0 && rate.trim().parse::<f64>().is_err() {
            continue; // header row
        }
        let r: f64 = rate.trim().parse().map_err(|_| Error::Parse {
            offset: i as u64,
            message: format!("bad rate '{rate}'"),
        })?;
        out.push((name.trim().to_string(), r));
    }
    Ok(out)
}
