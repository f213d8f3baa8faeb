//! `resext`: schedule analysis and correction, concentrated attention,
//! benchmarks and fixture generation.
//!
//! Exit codes: 0 on success, 1 on runtime or numeric failure, 2 on usage
//! errors. With `--json`, standard output carries exactly one JSON document
//! and human-readable text goes to standard error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use resext::harness::{random_inputs, token_grid};
use resext::oracle::{naive_attention, DENSE_CAP};
use resext::tensor_io::{read_tensor, AnyTensor};
use resext::{
    auto_detector, build_schedule, check_non_repetition, correct_dominant, memory_report, period_table, rdfc,
    scale_ntk, scale_pi, scale_yarn, AttentionInputs, BlockConfig, CollisionDetector, ConcentrationConfig,
    Concentrator, DType, Engine, Error, FrequencySchedule, MemoryShape, PeriodDetector, ResolutionSpec, RopeConfig,
    Scalar, ScratchMeter, YarnParams,
};

#[derive(Parser, Debug)]
#[command(name = "resext", version, about = "Resolution extrapolation toolkit for rotary attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Period table, dominant frequency and non-repetition verdict.
    Analyze(AnalyzeArgs),
    /// Rescale or correct a schedule file.
    Correct(CorrectArgs),
    /// Run entropy-guided concentrated attention on tensor files.
    Attend(AttendArgs),
    /// Time both attention stages and compare memory with a dense matrix.
    Bench(BenchArgs),
    /// Write seeded Q/K/V and token-grid tensor files.
    Fixtures(FixturesArgs),
}

#[derive(clap::Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    base: f64,
    #[arg(long)]
    axis_dim: usize,
    #[arg(long)]
    train_len: usize,
    #[arg(long)]
    target_len: usize,
    /// Convention used for indices in human output.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(0..=1))]
    index_origin: u8,
    #[arg(long)]
    json: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    Pi,
    Ntk,
    Yarn,
    Dominant,
    Rdfc,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum DetectorKind {
    Collision,
    Window,
}

#[derive(clap::Args, Debug)]
struct CorrectArgs {
    /// Schedule for the height axis (and the width axis unless --schedule-w).
    #[arg(long)]
    schedule: PathBuf,
    #[arg(long)]
    schedule_w: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long)]
    train_h: Option<usize>,
    #[arg(long)]
    train_w: Option<usize>,
    #[arg(long)]
    target_h: Option<usize>,
    #[arg(long)]
    target_w: Option<usize>,
    /// Scale factor for pi/ntk/yarn; defaults to target_h / train_h.
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long, default_value_t = 0.25)]
    window: f64,
    #[arg(long, value_enum, default_value_t = DetectorKind::Collision)]
    detector: DetectorKind,
    /// Collision tolerance for the collision detector.
    #[arg(long, default_value_t = 1e-9)]
    tolerance: f64,
    #[arg(long, default_value_t = 1.0)]
    yarn_alpha: f64,
    #[arg(long, default_value_t = 32.0)]
    yarn_beta: f64,
    #[arg(long)]
    out: PathBuf,
    /// Output for the width axis; written only when given.
    #[arg(long)]
    out_w: Option<PathBuf>,
    /// Iteration log for rdfc; defaults to OUT with extension `rdfc.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(clap::Args, Debug)]
struct AttendArgs {
    #[arg(long)]
    q: PathBuf,
    #[arg(long)]
    k: PathBuf,
    #[arg(long)]
    v: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    lambda_min: f64,
    #[arg(long, default_value_t = 1.3)]
    lambda_max: f64,
    #[arg(long, default_value_t = 2.0)]
    p: f64,
    #[arg(long, default_value_t = 128)]
    bq: usize,
    #[arg(long, default_value_t = 128)]
    bkv: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also write the report JSON here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Compare against the dense oracle.
    #[arg(long)]
    check: bool,
    /// Overrides the default check tolerance (1e-4 for f32, 1e-8 for f64).
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long, env = "UITF_WORKERS", default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    json: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum DTypeArg {
    F32,
    F64,
}

impl DTypeArg {
    fn dtype(self) -> DType {
        match self {
            DTypeArg::F32 => DType::F32,
            DTypeArg::F64 => DType::F64,
        }
    }
}

#[derive(clap::Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 128)]
    bq: usize,
    #[arg(long, default_value_t = 128)]
    bkv: usize,
    #[arg(long, value_enum, default_value_t = DTypeArg::F32)]
    dtype: DTypeArg,
    /// Element size for the dense-matrix estimate; defaults to the dtype size.
    #[arg(long)]
    naive_elem_bytes: Option<usize>,
    /// Memory the run may use for inputs, output and scratch.
    #[arg(long, default_value_t = 1024)]
    budget_mb: usize,
    /// Report analytic numbers only.
    #[arg(long)]
    dry_run: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "UITF_WORKERS", default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    json: bool,
}

#[derive(clap::Args, Debug)]
struct FixturesArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    /// Token counts of the Q/K/V fixtures.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 7, 33])]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    /// Token grids as HxW.
    #[arg(long, value_delimiter = ',', value_parser = parse_grid)]
    grids: Vec<(usize, usize)>,
    #[arg(long, default_value_t = 8)]
    feature_dim: usize,
    #[arg(long, value_enum, default_value_t = DTypeArg::F32)]
    dtype: DTypeArg,
    #[arg(long)]
    json: bool,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h = h.parse().map_err(|e| format!("bad height in {s:?}: {e}"))?;
    let w = w.parse().map_err(|e| format!("bad width in {s:?}: {e}"))?;
    Ok((h, w))
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Argument(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

/// Routes human text to stderr when stdout is reserved for JSON.
struct Console {
    json: bool,
}

impl Console {
    fn say(&self, text: impl AsRef<str>) {
        if self.json {
            eprintln!("{}", text.as_ref());
        } else {
            println!("{}", text.as_ref());
        }
    }

    fn emit(&self, value: &impl Serialize) -> CmdResult {
        if self.json {
            let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
            println!("{text}");
        }
        Ok(())
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn read_schedule(path: &Path) -> Result<FrequencySchedule, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    FrequencySchedule::from_json(&text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn write_schedule(path: &Path, schedule: &FrequencySchedule) -> CmdResult {
    fs::write(path, schedule.to_json()? + "\n").map_err(|e| io_err(path, e))
}

fn cmd_analyze(args: AnalyzeArgs) -> CmdResult {
    let console = Console { json: args.json };
    let schedule = build_schedule(RopeConfig::new(args.base, args.axis_dim).with_index_origin(args.index_origin))?;
    let table = period_table(&schedule, args.train_len)?;
    let k = table.dominant_index;
    let verdict = check_non_repetition(&schedule, k, args.target_len)?;

    console.say(format!(
        "base {} axis_dim {} train {} target {}",
        args.base, args.axis_dim, args.train_len, args.target_len
    ));
    console.say(format!("{:>5}  {:>14}  {:>14}", "index", "theta", "period"));
    for (i, (theta, period)) in schedule.freqs.iter().zip(&table.periods).enumerate() {
        let mark = if i == k { "  <- dominant" } else { "" };
        console.say(format!("{:>5}  {theta:>14.6e}  {period:>14.4}{mark}", schedule.display_index(i)));
    }
    console.say(format!(
        "dominant index {} (0-based) / {} (1-based), period {:.4}",
        k,
        k + 1,
        table.periods[k]
    ));
    console.say(if verdict {
        format!("non-repetition holds over {} tokens", args.target_len)
    } else {
        format!(
            "repeats: period {:.4} is shorter than the target {}",
            table.periods[k], args.target_len
        )
    });

    console.emit(&json!({
        "base": args.base,
        "axis_dim": args.axis_dim,
        "index_origin": args.index_origin,
        "train_len": args.train_len,
        "target_len": args.target_len,
        "freqs": schedule.freqs,
        "periods": table.periods,
        "dominant_index": { "zero_based": k, "one_based": k + 1 },
        "dominant_period": table.periods[k],
        "non_repetition": verdict,
    }))
}

fn default_log_path(out: &Path) -> PathBuf {
    out.with_extension("rdfc.jsonl")
}

fn cmd_correct(args: CorrectArgs) -> CmdResult {
    let console = Console { json: args.json };
    let sched_h = read_schedule(&args.schedule)?;
    let sched_w = match &args.schedule_w {
        Some(p) => read_schedule(p)?,
        None => sched_h.clone(),
    };

    let need = |v: Option<usize>, name: &str| v.ok_or_else(|| Failure::Usage(format!("--{name} is required for this mode")));
    let scale = |train: Option<usize>, target: Option<usize>| -> Result<f64, Failure> {
        match args.scale {
            Some(s) => Ok(s),
            None => Ok(need(target, "target-h")? as f64 / need(train, "train-h")? as f64),
        }
    };

    let mut summary = json!({ "mode": format!("{:?}", args.mode).to_lowercase() });
    let (out_h, out_w) = match args.mode {
        Mode::Pi | Mode::Ntk | Mode::Yarn => {
            let s_h = scale(args.train_h, args.target_h)?;
            let s_w = match args.scale {
                Some(s) => s,
                None => need(args.target_w.or(args.target_h), "target-w")? as f64
                    / need(args.train_w.or(args.train_h), "train-w")? as f64,
            };
            let params = YarnParams {
                alpha: args.yarn_alpha,
                beta: args.yarn_beta,
            };
            let apply = |sched: &FrequencySchedule, s: f64, train: Option<usize>| -> Result<FrequencySchedule, Failure> {
                Ok(match args.mode {
                    Mode::Pi => scale_pi(sched, s)?,
                    Mode::Ntk => scale_ntk(sched.config(), s)?,
                    _ => scale_yarn(sched.config(), s, need(train, "train-h")?, params)?,
                })
            };
            summary["scale"] = json!({ "h": s_h, "w": s_w });
            (
                apply(&sched_h, s_h, args.train_h)?,
                apply(&sched_w, s_w, args.train_w.or(args.train_h))?,
            )
        }
        Mode::Dominant => {
            let (train_h, target_h) = (need(args.train_h, "train-h")?, need(args.target_h, "target-h")?);
            let train_w = args.train_w.unwrap_or(train_h);
            let target_w = args.target_w.unwrap_or(target_h);
            let (h, kh) = correct_dominant(&sched_h, train_h, target_h)?;
            let (w, kw) = correct_dominant(&sched_w, train_w, target_w)?;
            console.say(format!("h: corrected index {} (0-based)", kh));
            console.say(format!("w: corrected index {} (0-based)", kw));
            summary["corrected_index"] = json!({ "h": kh, "w": kw });
            (h, w)
        }
        Mode::Rdfc => {
            let (train_h, target_h) = (need(args.train_h, "train-h")?, need(args.target_h, "target-h")?);
            let spec = ResolutionSpec::new(
                train_h,
                args.train_w.unwrap_or(train_h),
                target_h,
                args.target_w.unwrap_or(target_h),
            )?;
            let collision = CollisionDetector {
                window: args.window,
                tolerance: args.tolerance,
            };
            let window = auto_detector(args.window);
            let detector: &dyn PeriodDetector = match args.detector {
                DetectorKind::Collision => &collision,
                DetectorKind::Window => &window,
            };
            let log_path = args.log.clone().unwrap_or_else(|| default_log_path(&args.out));
            let write_log = |text: String| fs::write(&log_path, text).map_err(|e| io_err(&log_path, e));
            match rdfc(&sched_h, &sched_w, spec, detector) {
                Ok((h, w, log)) => {
                    write_log(log.to_json_lines()?)?;
                    for it in &log.iterations {
                        console.say(format!(
                            "{}: N = {} -> index {} ({:.6e} -> {:.6e})",
                            it.axis, it.observed_period, it.chosen_index, it.old, it.new
                        ));
                    }
                    summary["log"] = json!(log_path);
                    summary["iterations"] = json!(log.iterations.len());
                    (h, w)
                }
                Err(Error::Stagnation { axis, period, log }) | Err(Error::IterationCap { axis, cap: period, log }) => {
                    write_log(log.to_json_lines()?)?;
                    return Err(Failure::Runtime(format!(
                        "rdfc stopped on the {axis} axis at {period} after {} iterations; partial log in {}",
                        log.iterations.len(),
                        log_path.display()
                    )));
                }
                Err(e) => return Err(e.into()),
            }
        }
    };

    write_schedule(&args.out, &out_h)?;
    summary["h"] = json!({ "out": args.out, "corrections": out_h.corrections.len() });
    if let Some(path) = &args.out_w {
        write_schedule(path, &out_w)?;
        summary["w"] = json!({ "out": path, "corrections": out_w.corrections.len() });
    }
    console.say(format!(
        "wrote {} ({} corrections)",
        args.out.display(),
        out_h.corrections.len()
    ));
    console.emit(&summary)
}

#[derive(Serialize)]
struct CheckReport {
    max_abs_diff: f64,
    tolerance: f64,
    passed: bool,
}

#[derive(Serialize)]
struct AttendReport {
    dtype: &'static str,
    heads: usize,
    tokens: usize,
    head_dim: usize,
    value_dim: usize,
    blocks: BlockConfig,
    workers: usize,
    config: ConcentrationConfig,
    entropy: resext::EntropyReport,
    lambda: Vec<f64>,
    peak_scratch_bytes: usize,
    check: Option<CheckReport>,
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F32 => "f32",
        DType::F64 => "f64",
    }
}

fn attend_typed<T: Scalar>(
    args: &AttendArgs,
    q: resext::Tensor<T>,
    k: resext::Tensor<T>,
    v: resext::Tensor<T>,
) -> Result<(resext::Tensor<T>, AttendReport), Failure> {
    let inputs = AttentionInputs::new(q, k, v)?;
    let cfg = ConcentrationConfig {
        lambda_min: args.lambda_min,
        lambda_max: args.lambda_max,
        exponent_p: args.p,
    };
    let blocks = BlockConfig::new(args.bq, args.bkv);
    if args.check && inputs.tokens() > DENSE_CAP {
        return Err(Error::Size {
            what: "tokens for --check".into(),
            actual: inputs.tokens(),
            limit: DENSE_CAP,
        }
        .into());
    }
    let meter = ScratchMeter::new();
    let engine = Engine::new(blocks).with_workers(args.workers).with_meter(Arc::clone(&meter));
    let run = Concentrator::new(cfg, engine).run(&inputs, false)?;

    let check = if args.check {
        let dense = naive_attention(&inputs, &run.focus.per_head)?;
        let diff = run.output.max_abs_diff(&dense)?;
        let tolerance = args.tolerance.unwrap_or(match T::DTYPE {
            DType::F32 => 1e-4,
            DType::F64 => 1e-8,
        });
        Some(CheckReport {
            max_abs_diff: diff,
            tolerance,
            passed: diff <= tolerance,
        })
    } else {
        None
    };

    let report = AttendReport {
        dtype: dtype_name(T::DTYPE),
        heads: inputs.heads(),
        tokens: inputs.tokens(),
        head_dim: inputs.head_dim(),
        value_dim: inputs.value_dim(),
        blocks,
        workers: args.workers.max(1),
        config: cfg,
        entropy: run.entropy,
        lambda: run.focus.per_head,
        peak_scratch_bytes: meter.peak_total(),
        check,
    };
    Ok((run.output, report))
}

fn cmd_attend(args: AttendArgs) -> CmdResult {
    let console = Console { json: args.json };
    let load = |p: &Path| read_tensor(p).map_err(|e| io_err(p, e));
    let (q, k, v) = (load(&args.q)?, load(&args.k)?, load(&args.v)?);

    let (output, report): (AnyTensor, AttendReport) = match (q, k, v) {
        (AnyTensor::F32(q), AnyTensor::F32(k), AnyTensor::F32(v)) => {
            let (o, r) = attend_typed(&args, q, k, v)?;
            (o.into(), r)
        }
        (AnyTensor::F64(q), AnyTensor::F64(k), AnyTensor::F64(v)) => {
            let (o, r) = attend_typed(&args, q, k, v)?;
            (o.into(), r)
        }
        (q, k, v) => {
            return Err(Failure::Runtime(format!(
                "mixed element types: q {:?}, k {:?}, v {:?}",
                q.dtype(),
                k.dtype(),
                v.dtype()
            )))
        }
    };

    let bytes = output.to_bytes()?;
    fs::write(&args.out, bytes).map_err(|e| io_err(&args.out, e))?;
    if let Some(path) = &args.report {
        let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| io_err(path, e))?;
    }

    console.say(format!(
        "{} heads x {} tokens ({}), lambda per head: {:?}",
        report.heads, report.tokens, report.dtype, report.lambda
    ));
    if let Some(c) = &report.check {
        console.say(format!(
            "oracle max-abs deviation {:.3e} (tolerance {:.1e}): {}",
            c.max_abs_diff,
            c.tolerance,
            if c.passed { "ok" } else { "FAILED" }
        ));
    }
    console.emit(&report)?;
    match &report.check {
        Some(c) if !c.passed => Err(Failure::Runtime(format!(
            "deviation {:.3e} exceeds tolerance {:.1e}",
            c.max_abs_diff, c.tolerance
        ))),
        _ => Ok(()),
    }
}

fn bench_typed<T: Scalar>(args: &BenchArgs, blocks: BlockConfig) -> Result<Value, Failure> {
    let inputs = random_inputs::<T>(args.heads, args.n, args.dim, args.dim, args.seed)?;
    let meter = ScratchMeter::new();
    let engine = Engine::new(blocks).with_workers(args.workers).with_meter(Arc::clone(&meter));

    let start = Instant::now();
    let report = engine.entropy_pass(&inputs)?;
    let entropy_ms = start.elapsed().as_secs_f64() * 1e3;
    let focus = resext::focus_map(&report, &ConcentrationConfig::default())?;

    let start = Instant::now();
    let out = engine.attention_forward(&inputs, &focus)?;
    let forward_ms = start.elapsed().as_secs_f64() * 1e3;
    if !out.all_finite() {
        return Err(Error::Numeric("attention output is not finite".into()).into());
    }
    Ok(json!({
        "entropy_pass_ms": entropy_ms,
        "attention_forward_ms": forward_ms,
        "peak_scratch_total_bytes": meter.peak_total(),
        "peak_scratch_per_worker_bytes": meter.peak_per_worker(),
        "entropy": report,
        "lambda": focus.per_head,
    }))
}

fn cmd_bench(args: BenchArgs) -> CmdResult {
    let console = Console { json: args.json };
    let blocks = BlockConfig::new(args.bq, args.bkv);
    blocks.validate()?;
    if args.n == 0 || args.heads == 0 || args.dim == 0 {
        return Err(Failure::Usage("--n, --heads and --dim must be positive".into()));
    }
    let elem = args.dtype.dtype().size();
    let shape = MemoryShape {
        tokens: args.n,
        heads: args.heads,
        head_dim: args.dim,
        value_dim: args.dim,
        elem_bytes: elem,
    };
    let analytic = memory_report(shape, blocks);
    let naive = memory_report(
        MemoryShape {
            elem_bytes: args.naive_elem_bytes.unwrap_or(elem),
            ..shape
        },
        blocks,
    );
    let workers = args.workers.max(1);
    let tensors = (4 * args.heads * args.n * args.dim * elem) as u128;
    let required = tensors + (analytic.engine_bytes * workers) as u128;
    let budget = args.budget_mb as u128 * (1 << 20);

    console.say(format!(
        "n {} heads {} dim {} ({}), blocks {}x{}, workers {workers}",
        args.n,
        args.heads,
        args.dim,
        dtype_name(args.dtype.dtype()),
        args.bq,
        args.bkv
    ));
    console.say(format!(
        "engine scratch per worker {} B, dense score matrices {} B ({:.2} GiB, {} B/head)",
        analytic.engine_bytes,
        naive.naive_bytes,
        naive.naive_bytes as f64 / (1u64 << 30) as f64,
        naive.naive_bytes_per_head
    ));

    let mut summary = json!({
        "n": args.n,
        "heads": args.heads,
        "dim": args.dim,
        "dtype": dtype_name(args.dtype.dtype()),
        "blocks": blocks,
        "workers": workers,
        "engine_bytes": analytic.engine_bytes,
        "score_scratch_bytes": analytic.score_scratch_bytes,
        "naive_elem_bytes": args.naive_elem_bytes.unwrap_or(elem),
        "naive_bytes": naive.naive_bytes.to_string(),
        "naive_gib": naive.naive_bytes as f64 / (1u64 << 30) as f64,
        "naive_bytes_per_head": naive.naive_bytes_per_head.to_string(),
        "required_bytes": required.to_string(),
        "budget_bytes": budget.to_string(),
        "dry_run": args.dry_run,
    });

    if !args.dry_run {
        if required > budget {
            return Err(Error::Size {
                what: "bench memory in bytes".into(),
                actual: usize::try_from(required).unwrap_or(usize::MAX),
                limit: usize::try_from(budget).unwrap_or(usize::MAX),
            }
            .into());
        }
        let measured = match args.dtype {
            DTypeArg::F32 => bench_typed::<f32>(&args, blocks)?,
            DTypeArg::F64 => bench_typed::<f64>(&args, blocks)?,
        };
        console.say(format!(
            "entropy pass {:.1} ms, forward {:.1} ms, peak scratch per worker {} B",
            measured["entropy_pass_ms"].as_f64().unwrap_or(0.0),
            measured["attention_forward_ms"].as_f64().unwrap_or(0.0),
            measured["peak_scratch_per_worker_bytes"]
        ));
        summary["measured"] = measured;
    }
    console.emit(&summary)
}

fn cmd_fixtures(args: FixturesArgs) -> CmdResult {
    let console = Console { json: args.json };
    fs::create_dir_all(&args.out_dir).map_err(|e| io_err(&args.out_dir, e))?;
    let tag = dtype_name(args.dtype.dtype());
    let mut files = Vec::new();

    let mut put = |name: String, tensor: AnyTensor| -> CmdResult {
        let path = args.out_dir.join(&name);
        let bytes = tensor.to_bytes()?;
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        files.push(json!({ "name": name, "shape": tensor.shape() }));
        Ok(())
    };

    for &n in &args.sizes {
        let seed = args.seed.wrapping_add(n as u64);
        let parts: [(&str, AnyTensor); 3] = match args.dtype {
            DTypeArg::F32 => {
                let x = random_inputs::<f32>(args.heads, n, args.dim, args.dim, seed)?;
                [("q", x.q().clone().into()), ("k", x.k().clone().into()), ("v", x.v().clone().into())]
            }
            DTypeArg::F64 => {
                let x = random_inputs::<f64>(args.heads, n, args.dim, args.dim, seed)?;
                [("q", x.q().clone().into()), ("k", x.k().clone().into()), ("v", x.v().clone().into())]
            }
        };
        for (role, tensor) in parts {
            put(format!("n{n}.{tag}.{role}.uitf"), tensor)?;
        }
    }
    for &(h, w) in &args.grids {
        let seed = args.seed.wrapping_add((h * w) as u64);
        let tokens: AnyTensor = match args.dtype {
            DTypeArg::F32 => token_grid::<f32>(h, w, args.feature_dim, seed)?.tokens.into(),
            DTypeArg::F64 => token_grid::<f64>(h, w, args.feature_dim, seed)?.tokens.into(),
        };
        put(format!("grid{h}x{w}.{tag}.uitf"), tokens)?;
    }

    let manifest = json!({
        "seed": args.seed,
        "dtype": tag,
        "heads": args.heads,
        "dim": args.dim,
        "feature_dim": args.feature_dim,
        "files": files,
    });
    let path = args.out_dir.join(format!("manifest.{tag}.json"));
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))?;
    console.say(format!("wrote {} tensors to {}", files.len(), args.out_dir.display()));
    console.emit(&manifest)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Analyze(a) => cmd_analyze(a),
        Command::Correct(a) => cmd_correct(a),
        Command::Attend(a) => cmd_attend(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Fixtures(a) => cmd_fixtures(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
