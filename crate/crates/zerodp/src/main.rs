use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Stdio};

use anyhow::{anyhow, Context as _};
use clap::{Args, Parser, Subcommand};

use zerodp::config::{RunArgs, RunConfig, TransportKind};
use zerodp::run::{self, digest_hex};
use zerodp::tcp::{self, TcpOptions, TcpTransport};
use zerodp::trace::{frag_csv, parse_trace};
use zerodp_core::collectives::{block_on, ProcessGroup};
use zerodp_core::fragsim::{self, Fit, HeapModel, Policy};
use zerodp_core::planner::{
    self, activation_bytes, model_state_bytes, temp_buffer_bytes, ModelShape, Table, ADAM_K, GB,
};
use zerodp_core::zerodp::{Fault, SuiteConfig};
use zerodp_core::Stage;

/// Deterministic partitioned data-parallel training simulator and memory planner.
#[derive(Parser)]
#[command(name = "zerodp", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Memory and communication planner.
    Plan(PlanArgs),
    /// Train one stage and print per-step CSV and the final digest.
    Train(TrainArgs),
    /// Check every stage against the baseline bit for bit.
    Verify(VerifyArgs),
    /// Fragmentation simulator.
    Frag(FragArgs),
    /// Compare planner predictions with measured state bytes and traffic.
    Report(ReportArgs),
}

#[derive(Args)]
struct PlanArgs {
    /// Emit a reference table: table1, table2 or fig1.
    #[arg(long)]
    table: Option<Table>,
    /// Parameter count.
    #[arg(long)]
    psi: Option<f64>,
    /// Data-parallel degree.
    #[arg(long, default_value_t = 1.0)]
    dp: f64,
    /// Model-parallel degree.
    #[arg(long, default_value_t = 1.0)]
    mp: f64,
    #[arg(long, default_value = "base")]
    stage: Stage,
    /// Optimizer bytes per parameter.
    #[arg(long, default_value_t = ADAM_K)]
    k: f64,
    /// Add activations for a transformer with this hidden size.
    #[arg(long, requires_all = ["seq", "batch", "blocks"])]
    hidden: Option<f64>,
    #[arg(long)]
    seq: Option<f64>,
    #[arg(long)]
    batch: Option<f64>,
    /// Transformer blocks.
    #[arg(long)]
    blocks: Option<f64>,
    /// One activation checkpoint per block.
    #[arg(long)]
    checkpoint: bool,
    /// Partition activation checkpoints across model-parallel ranks.
    #[arg(long)]
    pa: bool,
    /// Offload partitioned checkpoints to host memory.
    #[arg(long)]
    pa_cpu: bool,
    /// Add a fused fp32 temporary buffer of psi elements.
    #[arg(long)]
    temp_buffer: bool,
    /// Cap on the temporary buffer in bytes.
    #[arg(long)]
    cb_limit: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    rank: RankArgs,
}

#[derive(Args, Clone, Default)]
struct RankArgs {
    /// Join a TCP run as this rank instead of coordinating.
    #[arg(long)]
    rank: Option<usize>,
    /// Comma-separated host:port list; overrides the roster file.
    #[arg(long, hide = true)]
    peers: Option<String>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    rank: RankArgs,
    /// Rank counts to check, e.g. 1,2,4,8 (sim transport).
    #[arg(long, value_delimiter = ',')]
    ranks_list: Option<Vec<usize>>,
    /// Perturb the averaged gradient: step:index:delta.
    #[arg(long)]
    fault: Option<String>,
    /// Stage receiving the fault.
    #[arg(long, default_value = "os+g")]
    fault_stage: Stage,
}

#[derive(Args)]
struct FragArgs {
    /// Trace file; otherwise a trace is generated.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Heap capacity in bytes (default: the trace's capacity comment).
    #[arg(long)]
    capacity: Option<u64>,
    /// interleaved, md_defrag, or both when omitted.
    #[arg(long)]
    policy: Option<Policy>,
    #[arg(long, value_parser = ["first", "best"], default_value = "first")]
    fit: String,
    #[arg(long, default_value_t = 8)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    ckpt: u64,
    #[arg(long, default_value_t = 16)]
    temp: u64,
    #[arg(long, default_value_t = 4)]
    grads: u64,
    /// Print the generated trace instead of simulating it.
    #[arg(long)]
    emit_trace: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    ranks_list: Vec<usize>,
}

/// Failure classes mapped to exit codes.
enum Failure {
    /// Verification or protocol failure.
    Run(anyhow::Error),
    /// Bad arguments or configuration.
    Usage(anyhow::Error),
}

impl From<zerodp_core::Error> for Failure {
    fn from(e: zerodp_core::Error) -> Self {
        match e {
            zerodp_core::Error::Config(c) => Failure::Usage(c.into()),
            other => Failure::Run(other.into()),
        }
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Run(e.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Plan(a) => cmd_plan(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Verify(a) => cmd_verify(a),
        Cmd::Frag(a) => cmd_frag(a),
        Cmd::Report(a) => cmd_report(a),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn emit(output: Option<&Path>, text: &str) -> Result<(), Failure> {
    match output {
        Some(p) => std::fs::write(p, text)
            .with_context(|| format!("writing {}", p.display()))
            .map_err(runtime),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).map_err(runtime)
        }
    }
}

fn cmd_plan(a: PlanArgs) -> Result<ExitCode, Failure> {
    if let Some(t) = a.table {
        emit(None, &planner::emit_table(t))?;
        return Ok(ExitCode::SUCCESS);
    }
    let psi = a
        .psi
        .ok_or_else(|| usage(anyhow!("give --table or --psi")))?;
    if !(psi > 0.0 && a.dp >= 1.0 && a.mp >= 1.0) {
        return Err(usage(anyhow!("psi must be positive and dp, mp at least 1")));
    }
    let states = model_state_bytes(psi, a.k, a.dp, a.stage);
    let activations = match (a.hidden, a.seq, a.batch, a.blocks) {
        (Some(h), Some(s), Some(b), Some(l)) => {
            if a.pa_cpu && !a.pa {
                return Err(usage(anyhow!("--pa-cpu requires --pa")));
            }
            let shape = ModelShape {
                psi,
                hidden_dim: h,
                seq_length: s,
                batch: b,
                transformer_layers: l,
            };
            activation_bytes(&shape, a.checkpoint, a.mp, a.pa, a.pa_cpu)
        }
        _ => planner::ActivationBytes {
            device: 0.0,
            host: 0.0,
        },
    };
    let temp = if a.temp_buffer || a.cb_limit.is_some() {
        temp_buffer_bytes(psi, true, a.cb_limit)
    } else {
        0.0
    };
    let m = planner::MemoryEstimate::from_parts(
        states.params_f16 / a.mp,
        states.grads_f16 / a.mp,
        states.optimizer / a.mp,
        activations.device,
        temp,
    );
    let mut s = String::from("# schema=1\ncategory,bytes,GB\n");
    for (name, v) in [
        ("params_f16", m.params_f16),
        ("grads_f16", m.grads_f16),
        ("optimizer", m.optimizer),
        ("model_states", m.model_states()),
        ("activations", m.activations),
        ("activations_host", activations.host),
        ("temp_buffers", m.temp_buffers),
        ("total", m.total),
    ] {
        s.push_str(&format!(
            "{name},{v:.0},{}\n",
            planner::format_printed_gb(v / GB)
        ));
    }
    emit(None, &s)?;
    Ok(ExitCode::SUCCESS)
}

fn resolve(run: &RunArgs) -> Result<RunConfig, Failure> {
    RunConfig::resolve(run).map_err(usage)
}

fn roster_for(cfg: &RunConfig, rank: &RankArgs) -> Result<Vec<String>, Failure> {
    if let Some(p) = &rank.peers {
        return tcp::parse_roster(&p.replace(',', "\n")).map_err(|e| usage(anyhow!(e)));
    }
    match &cfg.roster {
        Some(path) => tcp::read_roster(path).map_err(|e| usage(anyhow!(e))),
        None => tcp::loopback_roster(cfg.n_ranks).map_err(runtime),
    }
}

/// Re-run this command once per rank as child processes and wait for all.
/// Rank 0's stdout is passed through; the others are silenced.
fn coordinate(roster: &[String]) -> Result<ExitCode, Failure> {
    let exe = std::env::current_exe().map_err(runtime)?;
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut children = Vec::with_capacity(roster.len());
    for r in 0..roster.len() {
        let child = Command::new(&exe)
            .args(&args)
            .arg("--rank")
            .arg(r.to_string())
            .arg("--peers")
            .arg(roster.join(","))
            .stdout(if r == 0 {
                Stdio::inherit()
            } else {
                Stdio::null()
            })
            .stderr(Stdio::inherit())
            .spawn()
            .with_context(|| format!("spawning rank {r}"))
            .map_err(runtime)?;
        children.push(child);
    }
    let mut worst = 0;
    for (r, mut c) in children.into_iter().enumerate() {
        let status = c.wait().map_err(runtime)?;
        let code = status.code().unwrap_or(1);
        if code != 0 {
            eprintln!("rank {r} exited with status {code}");
        }
        worst = worst.max(code);
    }
    Ok(ExitCode::from(worst.clamp(0, 255) as u8))
}

fn join_mesh(rank: usize, roster: &[String]) -> Result<ProcessGroup<TcpTransport>, Failure> {
    let t = TcpTransport::connect(rank, roster, TcpOptions::default()).map_err(runtime)?;
    Ok(ProcessGroup::new(t))
}

fn finish_mesh(group: ProcessGroup<TcpTransport>) -> Result<(), Failure> {
    group.into_transport().shutdown().map_err(runtime)
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode, Failure> {
    let cfg = resolve(&a.run)?;
    let out = match cfg.transport {
        TransportKind::Sim => run::train_sim(&cfg)?,
        TransportKind::Tcp => {
            let roster = roster_for(&cfg, &a.rank)?;
            if roster.len() != cfg.n_ranks {
                return Err(usage(anyhow!(
                    "roster lists {} ranks but --ranks is {}",
                    roster.len(),
                    cfg.n_ranks
                )));
            }
            let Some(rank) = a.rank.rank else {
                return coordinate(&roster);
            };
            let mut group = join_mesh(rank, &roster)?;
            let out = block_on(run::train_rank(&mut group, &cfg))?;
            finish_mesh(group)?;
            if rank != 0 {
                return Ok(ExitCode::SUCCESS);
            }
            out
        }
    };
    let digest = format!("digest={}\n", digest_hex(out.digest));
    match &cfg.output {
        Some(p) => {
            emit(Some(p), &run::train_csv(&out))?;
            emit(None, &digest)?;
        }
        None => emit(None, &format!("{}# {digest}", run::train_csv(&out)))?,
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_fault(s: &str) -> Result<Fault, Failure> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || usage(anyhow!("--fault expects step:index:delta, got {s:?}"));
    let [step, index, delta] = parts.as_slice() else {
        return Err(bad());
    };
    Ok(Fault {
        step: step.parse().map_err(|_| bad())?,
        index: index.parse().map_err(|_| bad())?,
        delta: delta.parse().map_err(|_| bad())?,
    })
}

fn cmd_verify(a: VerifyArgs) -> Result<ExitCode, Failure> {
    let cfg = resolve(&a.run)?;
    let mut suite = SuiteConfig::new(cfg.spec, cfg.steps, cfg.seed);
    suite.global_batch = cfg.global_batch;
    suite.hyper = cfg.hyper;
    suite.engine = cfg.engine;
    if let Some(f) = &a.fault {
        suite.engine.fault = Some(parse_fault(f)?);
        suite.fault_stage = Some(a.fault_stage);
    }
    let verdict = match cfg.transport {
        TransportKind::Sim => {
            suite.n_ranks = match a.ranks_list {
                Some(l) => l,
                None if a.run.ranks.is_some() => vec![cfg.n_ranks],
                None => vec![1, 2, 4, 8],
            };
            for &n in &suite.n_ranks {
                if n == 0 || !suite.global_batch.is_multiple_of(n) {
                    return Err(usage(anyhow!(
                        "batch of {} samples does not split evenly over {n} ranks",
                        suite.global_batch
                    )));
                }
            }
            zerodp_core::zerodp::run_equivalence_suite(&suite)?
        }
        TransportKind::Tcp => {
            let roster = roster_for(&cfg, &a.rank)?;
            let Some(rank) = a.rank.rank else {
                return coordinate(&roster);
            };
            let mut group = join_mesh(rank, &roster)?;
            let v = block_on(zerodp_core::zerodp::verify_rank(&mut group, &suite))?;
            finish_mesh(group)?;
            if rank != 0 {
                return Ok(if v.all_equal() && v.memory_mismatches.is_empty() {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(1)
                });
            }
            v
        }
    };
    emit(cfg.output.as_deref(), &run::verdict_csv(&verdict))?;
    for d in &verdict.divergences {
        eprintln!("{d}");
    }
    for (n, s) in &verdict.memory_mismatches {
        eprintln!("N={n} stage {s}: measured state bytes differ from the planner");
    }
    if verdict.all_equal() && verdict.memory_mismatches.is_empty() {
        eprintln!(
            "all stages bitwise equal to baseline over {} runs",
            verdict.runs.len()
        );
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(1))
    }
}

fn cmd_frag(a: FragArgs) -> Result<ExitCode, Failure> {
    let (file_capacity, events) = match &a.trace {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))
                .map_err(usage)?;
            let t = parse_trace(&text)
                .with_context(|| format!("in {}", p.display()))
                .map_err(usage)?;
            (t.capacity, t.events)
        }
        None => {
            if a.ckpt == 0 || a.temp == 0 || a.grads == 0 {
                return Err(usage(anyhow!("generator sizes must be positive")));
            }
            let events = fragsim::gen_training_trace(a.layers, a.ckpt, a.temp, a.grads);
            (None, events)
        }
    };
    if a.emit_trace {
        emit(
            None,
            &zerodp::trace::write_trace(a.capacity.or(file_capacity), &events),
        )?;
        return Ok(ExitCode::SUCCESS);
    }
    let capacity = match a.capacity.or(file_capacity) {
        Some(c) => c,
        None if a.trace.is_none() => {
            fragsim::long_lived_total(&events) + fragsim::peak_short_live(&events)
        }
        None => bail_usage("trace has no capacity comment; pass --capacity")?,
    };
    let fit = if a.fit == "best" {
        Fit::Best
    } else {
        Fit::First
    };
    let policies = match a.policy {
        Some(p) => vec![p],
        None => vec![Policy::Interleaved, Policy::MdDefrag],
    };
    let mut reports = Vec::new();
    for p in policies {
        let heap = HeapModel::new(capacity, p).with_fit(fit);
        let r = fragsim::simulate(&heap, &events).map_err(usage)?;
        reports.push((p, r));
    }
    emit(None, &frag_csv(capacity, &reports))?;
    Ok(ExitCode::SUCCESS)
}

fn bail_usage<T>(msg: &str) -> Result<T, Failure> {
    Err(usage(anyhow!(msg.to_owned())))
}

fn cmd_report(a: ReportArgs) -> Result<ExitCode, Failure> {
    let cfg = resolve(&a.run)?;
    for &n in &a.ranks_list {
        if n == 0 || !cfg.global_batch.is_multiple_of(n) {
            return Err(usage(anyhow!(
                "batch of {} samples does not split evenly over {n} ranks",
                cfg.global_batch
            )));
        }
    }
    let rows = run::planner_agreement(&cfg, &a.ranks_list)?;
    emit(cfg.output.as_deref(), &run::report_csv(&rows))?;
    if rows.iter().all(run::ReportRow::agrees) {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("planner and measurement disagree");
        Ok(ExitCode::from(1))
    }
}
