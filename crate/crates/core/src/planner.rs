//! Analytic memory and communication model: model-state bytes per stage,
//! maximum trainable model size, activation and buffer footprints, and
//! per-step communication volume. Also emits the printed reference tables.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::zerodp::Stage;

/// Optimizer memory multiplier of mixed-precision Adam (bytes per parameter).
pub const ADAM_K: f64 = 12.0;

/// Decimal gigabyte.
pub const GB: f64 = 1e9;

/// Bytes per fp16 activation element.
pub const ACTIVATION_BYTES: f64 = 2.0;

/// Per-category byte breakdown. `total` is always the sum of the categories.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MemoryEstimate {
    pub params_f16: f64,
    pub grads_f16: f64,
    pub optimizer: f64,
    pub activations: f64,
    pub temp_buffers: f64,
    pub total: f64,
}

impl MemoryEstimate {
    pub fn from_parts(
        params_f16: f64,
        grads_f16: f64,
        optimizer: f64,
        activations: f64,
        temp_buffers: f64,
    ) -> Self {
        MemoryEstimate {
            params_f16,
            grads_f16,
            optimizer,
            activations,
            temp_buffers,
            total: params_f16 + grads_f16 + optimizer + activations + temp_buffers,
        }
    }

    pub fn model_states(&self) -> f64 {
        self.params_f16 + self.grads_f16 + self.optimizer
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelShape {
    pub psi: f64,
    pub hidden_dim: f64,
    pub seq_length: f64,
    pub batch: f64,
    pub transformer_layers: f64,
}

impl ModelShape {
    /// 1.5B-parameter GPT-2 at batch 32 and sequence length 1024.
    pub const GPT2_1_5B: ModelShape = ModelShape {
        psi: 1.5e9,
        hidden_dim: 1600.0,
        seq_length: 1024.0,
        batch: 32.0,
        transformer_layers: 48.0,
    };
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterSpec {
    pub total_gpus: u64,
    pub mp_degree: u64,
    pub device_mem_bytes: f64,
}

impl ClusterSpec {
    pub fn dp_degree(&self) -> u64 {
        self.total_gpus / self.mp_degree
    }
}

/// Persistent model-state bytes per data-parallel rank.
pub fn model_state_bytes(psi: f64, k: f64, n_d: f64, stage: Stage) -> MemoryEstimate {
    let (p, g, o) = match stage {
        Stage::Baseline => (2.0 * psi, 2.0 * psi, k * psi),
        Stage::Pos => (2.0 * psi, 2.0 * psi, k * psi / n_d),
        Stage::PosG => (2.0 * psi, 2.0 * psi / n_d, k * psi / n_d),
        Stage::PosGP => (2.0 * psi / n_d, 2.0 * psi / n_d, k * psi / n_d),
    };
    MemoryEstimate::from_parts(p, g, o, 0.0, 0.0)
}

/// Bytes per parameter of model state on one device (before MP division).
fn bytes_per_param(stage: Stage, n_d: f64, k: f64) -> f64 {
    model_state_bytes(1.0, k, n_d, stage).total
}

/// Largest Ψ whose model states, split over `n_m` model-parallel ranks,
/// fit in `device_mem_bytes`.
pub fn max_model_size(stage: Stage, n_d: f64, n_m: f64, device_mem_bytes: f64, k: f64) -> f64 {
    device_mem_bytes * n_m / bytes_per_param(stage, n_d, k)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActivationBytes {
    pub device: f64,
    pub host: f64,
}

/// Activation memory per device. Without checkpointing this is
/// 12·h·b·s·L fp16 elements; with one checkpoint per block it is h·b·s·L.
/// Partitioning (`pa`) divides by the MP degree; offload (`pa_cpu`) moves
/// the result to host memory.
pub fn activation_bytes(
    shape: &ModelShape,
    checkpointed: bool,
    mp_degree: f64,
    pa: bool,
    pa_cpu: bool,
) -> ActivationBytes {
    let per_block = if checkpointed { 1.0 } else { 12.0 };
    let mut bytes = per_block
        * shape.hidden_dim
        * shape.batch
        * shape.seq_length
        * shape.transformer_layers
        * ACTIVATION_BYTES;
    if pa || pa_cpu {
        bytes /= mp_degree;
    }
    if pa_cpu {
        ActivationBytes {
            device: 0.0,
            host: bytes,
        }
    } else {
        ActivationBytes {
            device: bytes,
            host: 0.0,
        }
    }
}

/// Temporary fused buffer for Ψ elements (fp32 when `fused_fp32`, else
/// fp16), capped at `cb_limit` bytes when given.
pub fn temp_buffer_bytes(psi: f64, fused_fp32: bool, cb_limit: Option<f64>) -> f64 {
    let per = if fused_fp32 { 4.0 } else { 2.0 };
    let bytes = per * psi;
    match cb_limit {
        Some(cap) => bytes.min(cap),
        None => bytes,
    }
}

/// Asymptotic per-rank elements moved per step.
pub fn dp_comm_volume(stage: Stage, psi: f64) -> f64 {
    match stage {
        Stage::PosGP => 3.0 * psi,
        _ => 2.0 * psi,
    }
}

/// Exact per-rank elements sent per step by the ring collectives for a
/// padded parameter count. `padded` must be a multiple of `n_ranks`.
pub fn dp_comm_volume_exact(stage: Stage, padded: u64, n_ranks: u64) -> u64 {
    let passes = match stage {
        Stage::PosGP => 3,
        _ => 2,
    };
    passes * padded / n_ranks * (n_ranks - 1)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MpComm {
    /// Elements per block moved by the model-parallel all-reduces.
    pub mp_volume: f64,
    /// Extra elements per block for the activation all-gather.
    pub pa_overhead: f64,
    /// Activation bytes moved to and from host per block with offload.
    pub pa_cpu_movement: f64,
    pub ratio: f64,
}

/// Per transformer block: six all-reduces of b·s·h elements, each moving
/// twice its size, against one all-gather of b·s·h for partitioned
/// activation checkpoints.
pub fn mp_comm_per_block(batch: f64, seq: f64, hidden: f64) -> MpComm {
    let message = batch * seq * hidden;
    let mp_volume = 6.0 * 2.0 * message;
    let pa_overhead = message;
    MpComm {
        mp_volume,
        pa_overhead,
        pa_cpu_movement: 2.0 * pa_overhead,
        ratio: pa_overhead / mp_volume,
    }
}

/// Print a GB value the way the reference tables do: whole numbers at or
/// above 100 (truncated), otherwise three significant figures rounded half
/// up with at most two decimals.
pub fn format_printed_gb(value: f64) -> String {
    if value >= 100.0 {
        return format!("{}", libm::floor(value) as u64);
    }
    let digits = if value >= 1.0 {
        libm::floor(libm::log10(value)) as i32 + 1
    } else {
        0
    };
    let decimals = (3 - digits).clamp(0, 2);
    let scale = libm::pow(10.0, decimals as f64);
    let rounded = libm::floor(value * scale + 0.5) / scale;
    let mut s = format!("{:.*}", decimals as usize, rounded);
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    s
}

/// Print a parameter count: `T` units of 1024 B from 512 B upward,
/// otherwise billions with one decimal.
pub fn format_param_count(count: f64) -> String {
    let billions = count / 1e9;
    let (value, unit) = if billions >= 512.0 {
        (billions / 1024.0, "T")
    } else {
        (billions, "B")
    };
    let mut s = format!("{:.1}", libm::floor(value * 10.0 + 0.5) / 10.0);
    if s.ends_with(".0") {
        s.truncate(s.len() - 2);
    }
    s.push_str(unit);
    s
}

/// Model sizes and DP degrees of the per-device memory table.
pub const TABLE1_MODELS: [(&str, f64); 3] = [("7.5B", 7.5e9), ("128B", 128e9), ("1T", 1e12)];
pub const TABLE1_DP: [u64; 6] = [1, 4, 16, 64, 256, 1024];
/// MP degrees of the maximum-model-size table (64 DP ranks each).
pub const TABLE2_MP: [u64; 5] = [1, 2, 4, 8, 16];
pub const TABLE2_DP: u64 = 64;
pub const V100_MEM_BYTES: f64 = 32.0 * GB;

const SCHEMA: &str = "# schema=1\n";

const PARTITIONED: [Stage; 3] = [Stage::Pos, Stage::PosG, Stage::PosGP];

fn stage_label(stage: Stage) -> &'static str {
    match stage {
        Stage::Baseline => "Baseline",
        Stage::Pos => "P_os",
        Stage::PosG => "P_os+g",
        Stage::PosGP => "P_os+g+p",
    }
}

/// One printed cell of the per-device memory table.
#[derive(Clone, Debug, PartialEq)]
pub struct Table1Cell {
    pub dp: u64,
    pub model: &'static str,
    pub stage: Stage,
    pub bytes: f64,
    pub printed: String,
}

pub fn table1_cells() -> Vec<Table1Cell> {
    let mut cells = Vec::new();
    for dp in TABLE1_DP {
        for (model, psi) in TABLE1_MODELS {
            for stage in PARTITIONED {
                let bytes = model_state_bytes(psi, ADAM_K, dp as f64, stage).total;
                cells.push(Table1Cell {
                    dp,
                    model,
                    stage,
                    bytes,
                    printed: format_printed_gb(bytes / GB),
                });
            }
        }
    }
    cells
}

/// One row of the maximum-model-size table.
#[derive(Clone, Debug, PartialEq)]
pub struct Table2Row {
    pub mp: u64,
    pub gpus: u64,
    pub sizes: [f64; 4],
}

pub fn table2_rows() -> Vec<Table2Row> {
    TABLE2_MP
        .iter()
        .map(|&mp| {
            let mut sizes = [0.0; 4];
            for (slot, stage) in sizes.iter_mut().zip(Stage::ALL) {
                *slot = max_model_size(stage, TABLE2_DP as f64, mp as f64, V100_MEM_BYTES, ADAM_K);
            }
            Table2Row {
                mp,
                gpus: mp * TABLE2_DP,
                sizes,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Table {
    Table1,
    Table2,
    Fig1,
}

impl core::str::FromStr for Table {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table1" => Ok(Table::Table1),
            "table2" => Ok(Table::Table2),
            "fig1" => Ok(Table::Fig1),
            other => Err(format!(
                "unknown table {other:?} (expected table1, table2 or fig1)"
            )),
        }
    }
}

pub fn emit_table(which: Table) -> String {
    match which {
        Table::Table1 => emit_table1(),
        Table::Table2 => emit_table2(),
        Table::Fig1 => emit_fig1(7.5e9, 64.0),
    }
}

/// Printed GB per (DP, model, stage), followed by the exact byte counts.
pub fn emit_table1() -> String {
    let cells = table1_cells();
    let mut out = String::from(SCHEMA);
    let mut header = vec_str(["DP"]);
    for (model, _) in TABLE1_MODELS {
        for stage in PARTITIONED {
            header.push(format!("{model} {} (GB)", stage_label(stage)));
        }
    }
    for (model, _) in TABLE1_MODELS {
        for stage in PARTITIONED {
            header.push(format!("{model} {} (bytes)", stage_label(stage)));
        }
    }
    out.push_str(&header.join(","));
    out.push('\n');
    for row in cells.chunks(9) {
        let mut line = vec_str([]);
        line.push(format!("{}", row[0].dp));
        line.extend(row.iter().map(|c| c.printed.clone()));
        line.extend(row.iter().map(|c| format!("{:.0}", c.bytes)));
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Printed maximum model sizes per MP degree, followed by exact counts.
pub fn emit_table2() -> String {
    let mut out = String::from(SCHEMA);
    out.push_str("MP,GPUs");
    for stage in Stage::ALL {
        let _ = write!(out, ",{}", stage_label(stage));
    }
    for stage in Stage::ALL {
        let _ = write!(out, ",{} (params)", stage_label(stage));
    }
    out.push('\n');
    for row in table2_rows() {
        let _ = write!(out, "{},{}", row.mp, row.gpus);
        for s in row.sizes {
            let _ = write!(out, ",{}", format_param_count(s));
        }
        for s in row.sizes {
            let _ = write!(out, ",{:.0}", libm::floor(s));
        }
        out.push('\n');
    }
    out
}

/// Model-state breakdown for each stage at one (Ψ, N_d).
pub fn emit_fig1(psi: f64, n_d: f64) -> String {
    let mut out = String::from(SCHEMA);
    out.push_str("Stage,Parameters (bytes),Gradients (bytes),Optimizer States (bytes),Total (bytes),Total (GB)\n");
    for stage in Stage::ALL {
        let m = model_state_bytes(psi, ADAM_K, n_d, stage);
        let _ = writeln!(
            out,
            "{},{:.0},{:.0},{:.0},{:.0},{}",
            stage_label(stage),
            m.params_f16,
            m.grads_f16,
            m.optimizer,
            m.total,
            format_printed_gb(m.total / GB)
        );
    }
    out
}

fn vec_str<const N: usize>(items: [&str; N]) -> Vec<String> {
    items.iter().map(|s| String::from(*s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gb(psi: f64, n: f64, stage: Stage) -> f64 {
        model_state_bytes(psi, ADAM_K, n, stage).total / GB
    }

    #[test]
    fn seven_and_a_half_billion_at_64() {
        assert_eq!(format_printed_gb(gb(7.5e9, 64.0, Stage::Baseline)), "120");
        assert_eq!(format_printed_gb(gb(7.5e9, 64.0, Stage::Pos)), "31.4");
        assert_eq!(format_printed_gb(gb(7.5e9, 64.0, Stage::PosG)), "16.6");
        assert_eq!(format_printed_gb(gb(7.5e9, 64.0, Stage::PosGP)), "1.88");
        assert_eq!(format_printed_gb(gb(1e12, 1024.0, Stage::PosGP)), "15.6");
    }

    #[test]
    fn printing_rule() {
        assert_eq!(format_printed_gb(41.25), "41.3");
        assert_eq!(format_printed_gb(0.46875), "0.47");
        assert_eq!(format_printed_gb(0.1171875), "0.12");
        assert_eq!(format_printed_gb(513.5), "513");
        assert_eq!(format_printed_gb(257.75), "257");
        assert_eq!(format_printed_gb(62.5), "62.5");
        assert_eq!(format_printed_gb(30.0), "30");
        assert_eq!(format_printed_gb(2.0), "2");
    }

    #[test]
    fn single_rank_stages_coincide() {
        for (_, psi) in TABLE1_MODELS {
            let base = gb(psi, 1.0, Stage::Baseline);
            for stage in Stage::ALL {
                assert_eq!(gb(psi, 1.0, stage), base);
            }
            assert_eq!(base, 16.0 * psi / GB);
        }
    }

    #[test]
    fn categories_sum_to_total() {
        for stage in Stage::ALL {
            let m = model_state_bytes(1200.0, ADAM_K, 4.0, stage);
            assert_eq!(m.total, m.params_f16 + m.grads_f16 + m.optimizer);
        }
        assert_eq!(
            model_state_bytes(1200.0, ADAM_K, 4.0, Stage::Baseline).total,
            19_200.0
        );
        assert_eq!(
            model_state_bytes(1200.0, ADAM_K, 4.0, Stage::PosG).total,
            6_600.0
        );
        assert_eq!(
            model_state_bytes(1200.0, ADAM_K, 4.0, Stage::PosGP).total,
            4_800.0
        );
    }

    #[test]
    fn max_size_examples() {
        let b = max_model_size(Stage::Baseline, 64.0, 1.0, V100_MEM_BYTES, ADAM_K);
        assert_eq!(b, 2e9);
        let p = max_model_size(Stage::Pos, 64.0, 1.0, V100_MEM_BYTES, ADAM_K);
        assert_eq!(format_param_count(p), "7.6B");
        let t = max_model_size(Stage::PosGP, 64.0, 16.0, V100_MEM_BYTES, ADAM_K);
        assert_eq!(format_param_count(t), "2T");
        assert_eq!(format_param_count(512e9), "0.5T");
    }

    #[test]
    fn activation_and_buffers() {
        let a = activation_bytes(&ModelShape::GPT2_1_5B, false, 1.0, false, false);
        assert_eq!(a.device, 60_397_977_600.0);
        let off = activation_bytes(&ModelShape::GPT2_1_5B, true, 16.0, true, true);
        assert_eq!(off.device, 0.0);
        assert!(off.host > 0.0);
        let ck1 = activation_bytes(&ModelShape::GPT2_1_5B, true, 1.0, false, false);
        let ck16 = activation_bytes(&ModelShape::GPT2_1_5B, true, 16.0, false, false);
        assert_eq!(ck1, ck16);
        assert_eq!(temp_buffer_bytes(1.5e9, true, None), 6e9);
        assert_eq!(temp_buffer_bytes(100e9, true, Some(256e6)), 256e6);
        assert_eq!(temp_buffer_bytes(1000.0, true, Some(256e6)), 4000.0);
    }

    #[test]
    fn communication() {
        assert_eq!(dp_comm_volume(Stage::PosG, 1e9), 2e9);
        assert_eq!(dp_comm_volume(Stage::PosGP, 1e9), 3e9);
        assert_eq!(dp_comm_volume_exact(Stage::Pos, 1000, 4), 1500);
        assert_eq!(dp_comm_volume_exact(Stage::PosGP, 1000, 4), 2250);
        assert_eq!(dp_comm_volume_exact(Stage::PosGP, 8, 1), 0);
        let mp = mp_comm_per_block(1.0, 1024.0, 8192.0);
        assert_eq!(mp.mp_volume, 100_663_296.0);
        assert_eq!(mp.ratio, 1.0 / 12.0);
        assert_eq!(mp.pa_cpu_movement, 2.0 * mp.pa_overhead);
    }

    #[test]
    fn table_shapes() {
        let t1 = emit_table1();
        assert!(t1.starts_with("# schema=1\nDP,"));
        assert_eq!(t1.lines().count(), 2 + TABLE1_DP.len());
        let t2 = emit_table2();
        assert_eq!(t2.lines().count(), 2 + TABLE2_MP.len());
        assert!(t2.contains("\n16,1024,32B,"));
        let f = emit_fig1(7.5e9, 64.0);
        assert!(f.contains("P_os+g+p,") && f.trim_end().ends_with("1.88"));
    }
}
