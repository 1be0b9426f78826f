//! The `affinity-lab` command line.
//!
//! Exit codes: 0 on success, 1 for usage errors (unknown flags, bad flag
//! values), 2 for data errors (unreadable or malformed files). Results go to
//! stdout, diagnostics to stderr. Output files are written to a temporary
//! name and renamed into place, so a failing run leaves no partial output.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::affinity::{expand_rate_set, ground_truth_affinity, CategoryHistogram, RateSet};
use crate::error::Error;
use crate::loss::{build_weight_table, evaluate, sigmoid, LossConfig, Scheme};
use crate::metrics::{affinity_accuracy, miou};
use crate::propagation::{propagate, AffinityMode, ProbabilityMap, PropagationConfig};
use crate::synth::{corrupt_predictions, gen_voronoi_labels, SynthConfig};
use crate::tensor_io::{self, load_label_map, load_tensor, save_label_map, save_tensor, LabelMap, Tensor, MAGIC};

pub const THREADS_ENV: &str = "AFFINITY_LAB_THREADS";
pub const DEFAULT_RATES: &str = "8,(12,24),16";

#[derive(Debug, Parser)]
#[command(name = "affinity-lab", version, about = "Dilated pixel affinity toolkit")]
struct Cli {
    /// Worker threads for internal parallelism; outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate seeded Voronoi label maps and corrupted probability maps.
    Synth(SynthArgs),
    /// Derive binary ground-truth affinity from a label map.
    GenAffinity(GenAffinityArgs),
    /// Neighbor-category frequencies per rate.
    Stats(StatsArgs),
    /// Evaluate the focal affinity loss (and optionally its gradient).
    Loss(LossArgs),
    /// Refine a probability map by affinity propagation.
    Refine(RefineArgs),
    /// Mean intersection over union of a prediction.
    Eval(EvalArgs),
    /// Per-category affinity accuracy.
    AffinityAcc(AffinityAccArgs),
}

fn parse_rates(s: &str) -> Result<RateSet, String> {
    expand_rate_set(s).map_err(|e| e.to_string())
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<AffinityMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    cells: usize,
    #[arg(long, default_value_t = 2)]
    blur_radius: usize,
    #[arg(long, default_value_t = 0.08)]
    flip_rate: f64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Number of samples; sample k uses seed + k.
    #[arg(long, default_value_t = 1)]
    count: u64,
    #[arg(long, default_value = "synth")]
    prefix: String,
    /// Directory (created if missing) receiving `<prefix>_<k>.png` and `<prefix>_<k>.probs.aft`.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct GenAffinityArgs {
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value = DEFAULT_RATES, value_parser = parse_rates)]
    rates: RateSet,
    /// Float32 `[8|R|, H, W]` affinity values.
    #[arg(long)]
    out: PathBuf,
    /// Uint8 validity mask of the same shape.
    #[arg(long)]
    out_valid: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StatsArgs {
    /// A label PNG or a directory of them.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value = DEFAULT_RATES, value_parser = parse_rates)]
    rates: RateSet,
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct LossArgs {
    /// Float32 `[8|R|, H, W]` affinity logits.
    #[arg(long)]
    logits: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value = DEFAULT_RATES, value_parser = parse_rates)]
    rates: RateSet,
    #[arg(long, default_value = "sqrt", value_parser = parse_scheme)]
    scheme: Scheme,
    #[arg(long, default_value_t = 2.0)]
    gamma: f64,
    #[arg(long, default_value_t = 1.2)]
    beta: f64,
    /// Labels (file or directory) for the category statistics; defaults to `--labels`.
    #[arg(long)]
    stats_labels: Option<PathBuf>,
    /// Write the gradient with respect to the logits as AFT1.
    #[arg(long)]
    grad_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RefineArgs {
    /// Float32 `[C, H, W]` class probabilities.
    #[arg(long)]
    probs: PathBuf,
    /// Float32 `[8|R|, H, W]` affinity logits, or binary affinity with `--mode gt`.
    #[arg(long)]
    affinity: PathBuf,
    /// Optional uint8 validity mask; defaults to in-grid neighbors.
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long, default_value = DEFAULT_RATES, value_parser = parse_rates)]
    rates: RateSet,
    #[arg(long, default_value = "logits", value_parser = parse_mode)]
    mode: AffinityMode,
    #[arg(long, default_value_t = 6.0)]
    lambda: f64,
    #[arg(long, default_value_t = 7.0)]
    mu: f64,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long)]
    symmetrize: bool,
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth labels; when given, the refined mIoU is printed.
    #[arg(long)]
    gt: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// A label PNG or an AFT1 probability map (scored by argmax).
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Number of classes; inferred from the inputs when omitted.
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Debug, Args)]
struct AffinityAccArgs {
    /// Float32 `[8|R|, H, W]` predicted affinity probabilities.
    #[arg(long)]
    pred: PathBuf,
    /// Treat `--pred` as logits and apply the logistic sigmoid first.
    #[arg(long)]
    from_logits: bool,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value = DEFAULT_RATES, value_parser = parse_rates)]
    rates: RateSet,
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Data(String),
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn data_at(path: &Path) -> impl Fn(Error) -> Failure + '_ {
    move |e| match e {
        // io errors already carry the path
        Error::Io { .. } => Failure::Data(e.to_string()),
        other => Failure::Data(format!("{}: {other}", path.display())),
    }
}

fn data(e: Error) -> Failure {
    Failure::Data(e.to_string())
}

/// Runs the CLI with the process's stdout and stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}

/// Runs the CLI, writing results to `out` and diagnostics to `err`.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    let threads = cli.threads.or_else(|| {
        std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse().ok())
    });
    let mut buffer: Vec<u8> = Vec::new();
    let result = match threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(cli.command, &mut buffer)),
            Err(e) => Err(usage(format!("cannot start {n} threads: {e}"))),
        },
        None => dispatch(cli.command, &mut buffer),
    };
    let result = result.and_then(|()| {
        out.write_all(&buffer)
            .map_err(|e| Failure::Data(format!("writing stdout: {e}")))
    });
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            1
        }
        Err(Failure::Data(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            2
        }
    }
}

fn dispatch(cmd: Command, out: &mut Vec<u8>) -> CliResult<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::GenAffinity(a) => gen_affinity(a),
        Command::Stats(a) => stats(a, out),
        Command::Loss(a) => loss(a, out),
        Command::Refine(a) => refine(a, out),
        Command::Eval(a) => eval(a, out),
        Command::AffinityAcc(a) => affinity_acc(a, out),
    }
}

fn emit(out: &mut Vec<u8>, text: &str) -> CliResult<()> {
    out.extend_from_slice(text.as_bytes());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    tensor_io::write_atomic(path, text.as_bytes()).map_err(data)
}

/// `%.12g`-style rendering: 12 significant digits, trailing zeros trimmed.
pub fn format_significant(x: f64) -> String {
    const DIGITS: usize = 12;
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.*e}", DIGITS - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..DIGITS as i32).contains(&exp) {
        let decimals = (DIGITS as i32 - 1 - exp).max(0) as usize;
        let fixed = format!("{x:.decimals$}");
        if fixed.contains('.') {
            fixed.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            fixed
        }
    } else {
        let m = if mantissa.contains('.') {
            mantissa.trim_end_matches('0').trim_end_matches('.')
        } else {
            mantissa
        };
        format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn load_labels_at(path: &Path) -> CliResult<LabelMap> {
    load_label_map(path).map_err(data_at(path))
}

fn load_tensor_at(path: &Path) -> CliResult<Tensor> {
    load_tensor(path).map_err(data_at(path))
}

/// A single label PNG or every `*.png` in a directory, in name order.
fn load_label_set(path: &Path) -> CliResult<Vec<LabelMap>> {
    if !path.is_dir() {
        return Ok(vec![load_labels_at(path)?]);
    }
    let entries = std::fs::read_dir(path).map_err(|e| data(Error::io(path, e)))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Failure::Data(format!("{}: no PNG label maps found", path.display())));
    }
    files.iter().map(|p| load_labels_at(p)).collect()
}

fn histogram_of(path: &Path, rates: &RateSet) -> CliResult<CategoryHistogram> {
    let maps = load_label_set(path)?;
    let mut hist = CategoryHistogram::new(rates);
    for m in &maps {
        hist.accumulate(m);
    }
    Ok(hist)
}

fn synth(a: SynthArgs) -> CliResult<()> {
    let base = SynthConfig {
        seed: a.seed,
        height: a.height,
        width: a.width,
        num_classes: a.classes,
        num_cells: a.cells,
        blur_radius: a.blur_radius,
        flip_rate: a.flip_rate,
        temperature: a.temperature,
    };
    base.validate().map_err(usage)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| data(Error::io(&a.out_dir, e)))?;
    if !a.out_dir.is_dir() {
        return Err(Failure::Data(format!("{}: not a directory", a.out_dir.display())));
    }
    for k in 0..a.count {
        let cfg = SynthConfig {
            seed: a.seed.wrapping_add(k),
            ..base
        };
        let labels = gen_voronoi_labels(&cfg).map_err(data)?;
        let probs = corrupt_predictions(&labels, &cfg).map_err(data)?;
        let stem = format!("{}_{k:04}", a.prefix);
        let label_path = a.out_dir.join(format!("{stem}.png"));
        let probs_path = a.out_dir.join(format!("{stem}.probs.aft"));
        save_label_map(&labels, &label_path).map_err(data_at(&label_path))?;
        let t = probs.to_tensor().map_err(data)?;
        save_tensor(&t, &probs_path).map_err(data_at(&probs_path))?;
    }
    Ok(())
}

fn gen_affinity(a: GenAffinityArgs) -> CliResult<()> {
    let labels = load_labels_at(&a.labels)?;
    let gt = ground_truth_affinity(&labels, &a.rates);
    let (values, mask) = gt.to_tensors().map_err(data)?;
    save_tensor(&values, &a.out).map_err(data_at(&a.out))?;
    if let Some(p) = &a.out_valid {
        save_tensor(&mask, p).map_err(data_at(p))?;
    }
    Ok(())
}

fn stats(a: StatsArgs, out: &mut Vec<u8>) -> CliResult<()> {
    let hist = histogram_of(&a.labels, &a.rates)?;
    let csv = hist.to_csv();
    match &a.out_csv {
        Some(p) => write_text(p, &csv),
        None => emit(out, &csv),
    }
}

fn loss(a: LossArgs, out: &mut Vec<u8>) -> CliResult<()> {
    let cfg = LossConfig::new(a.gamma, a.beta).map_err(usage)?;
    let labels = load_labels_at(&a.labels)?;
    let gt = ground_truth_affinity(&labels, &a.rates);
    let raw = load_tensor_at(&a.logits)?;
    let logits = crate::affinity::AffinityField::from_tensors(&raw, None, &a.rates)
        .and_then(|f| f.with_mask_of(&gt))
        .map_err(data_at(&a.logits))?;
    let hist = match &a.stats_labels {
        Some(p) => histogram_of(p, &a.rates)?,
        None => {
            let mut h = CategoryHistogram::new(&a.rates);
            h.accumulate_field(&gt);
            h
        }
    };
    let weights = build_weight_table(&hist, a.scheme).map_err(data)?;
    let result = evaluate(&logits, &gt, &weights, &cfg, a.grad_out.is_some()).map_err(data)?;
    if let (Some(path), Some(grad)) = (&a.grad_out, &result.grad) {
        let (values, _) = grad.to_tensors().map_err(data)?;
        save_tensor(&values, path).map_err(data_at(path))?;
    }
    emit(out, &format!("{}\n", format_significant(result.loss)))
}

fn refine(a: RefineArgs, out: &mut Vec<u8>) -> CliResult<()> {
    let cfg = PropagationConfig {
        lambda: a.lambda,
        mu: a.mu,
        iterations: a.iters,
        mode: a.mode,
        symmetrize: a.symmetrize,
    };
    cfg.validate().map_err(usage)?;
    let probs_t = load_tensor_at(&a.probs)?;
    let probs = ProbabilityMap::from_tensor(&probs_t).map_err(data_at(&a.probs))?;
    let values = load_tensor_at(&a.affinity)?;
    let mask = a.valid.as_deref().map(load_tensor_at).transpose()?;
    let affinity = crate::affinity::AffinityField::from_tensors(&values, mask.as_ref(), &a.rates)
        .map_err(data_at(&a.affinity))?;
    let refined = propagate(&probs, &affinity, &cfg).map_err(data)?;
    let gt = a.gt.as_deref().map(load_labels_at).transpose()?;
    let t = refined.to_tensor().map_err(data)?;
    save_tensor(&t, &a.out).map_err(data_at(&a.out))?;
    if let Some(gt) = gt {
        let score = miou(&refined.argmax(), &gt, refined.classes()).map_err(data)?;
        emit(out, &format!("{}\n", format_significant(score)))?;
    }
    Ok(())
}

fn eval(a: EvalArgs, out: &mut Vec<u8>) -> CliResult<()> {
    let gt = load_labels_at(&a.gt)?;
    let head = std::fs::read(&a.pred).map_err(|e| data(Error::io(&a.pred, e)))?;
    let (pred, inferred) = if head.starts_with(&MAGIC) {
        let t = Tensor::from_bytes(&head).map_err(data_at(&a.pred))?;
        let probs = ProbabilityMap::from_tensor(&t).map_err(data_at(&a.pred))?;
        (probs.argmax(), probs.classes())
    } else {
        let pred = load_labels_at(&a.pred)?;
        let top = pred.max_class().max(gt.max_class()).map_or(1, |m| m as usize + 1);
        (pred, top)
    };
    let classes = a.classes.unwrap_or(inferred);
    let score = miou(&pred, &gt, classes).map_err(data)?;
    emit(out, &format!("{}\n", format_significant(score)))
}

fn affinity_acc(a: AffinityAccArgs, out: &mut Vec<u8>) -> CliResult<()> {
    let labels = load_labels_at(&a.labels)?;
    let gt = ground_truth_affinity(&labels, &a.rates);
    let raw = load_tensor_at(&a.pred)?;
    let mut pred = crate::affinity::AffinityField::from_tensors(&raw, None, &a.rates)
        .and_then(|f| f.with_mask_of(&gt))
        .map_err(data_at(&a.pred))?;
    if a.from_logits {
        pred = pred.map_valid(sigmoid);
    }
    let table = affinity_accuracy(&pred, &gt).map_err(data)?;
    let csv = table.to_csv();
    match &a.out_csv {
        Some(p) => write_text(p, &csv),
        None => emit(out, &csv),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digits() {
        assert_eq!(format_significant(0.173_286_795_139_986_33), "0.17328679514");
        assert_eq!(format_significant(1.0), "1");
        assert_eq!(format_significant(0.583_333_333_333_333_4), "0.583333333333");
        assert_eq!(format_significant(1.5e-9), "1.5e-09");
        assert_eq!(format_significant(123456.0), "123456");
        assert_eq!(format_significant(0.0), "0");
    }

    #[test]
    fn usage_errors_exit_one() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        assert_eq!(run_with(["affinity-lab", "stats", "--bogus"], &mut out, &mut err), 1);
        assert!(!err.is_empty());
        let (mut out, mut err) = (Vec::new(), Vec::new());
        assert_eq!(
            run_with(["affinity-lab", "stats", "--labels", "x.png", "--rates", "8,"], &mut out, &mut err),
            1
        );
    }

    #[test]
    fn help_exits_zero() {
        for sub in ["synth", "gen-affinity", "stats", "loss", "refine", "eval", "affinity-acc"] {
            let (mut out, mut err) = (Vec::new(), Vec::new());
            assert_eq!(run_with(["affinity-lab", sub, "--help"], &mut out, &mut err), 0, "{sub}");
            assert!(String::from_utf8(out).unwrap().contains("Usage"));
        }
    }

    #[test]
    fn missing_file_is_a_data_error() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run_with(["affinity-lab", "stats", "--labels", "/no/such/file.png"], &mut out, &mut err);
        assert_eq!(code, 2);
        assert!(String::from_utf8(err).unwrap().contains("/no/such/file.png"));
    }
}
