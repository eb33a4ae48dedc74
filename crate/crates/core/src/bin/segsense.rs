use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use segsense::fitting::AxisUnits;
use segsense::mask::{DEFAULT_CUTOFF, DEFAULT_MIN_FOREGROUND};
use segsense::metrics::{MetricConfig, Spacing};
use segsense::report::{self, DataCategory, FitKind, FitSet, SurfaceTarget, SweepFile};
use segsense::sweep::{self, EpochSelection, SweepOptions};
use segsense::volume;
use segsense::{Error, Result};

/// Sensitivity analysis of segmentation performance indices.
#[derive(Parser, Debug)]
#[command(name = "segsense", version, about)]
struct Cli {
    /// Configuration file (TOML, or JSON with a .json extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Coordinates used for surface fits and recommendation queries.
    #[arg(long, global = true, default_value = "index")]
    units: AxisUnits,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Score predicted masks against ground truth, paired by file stem.
    Evaluate(EvaluateArgs),
    /// Write a train/validation/test split manifest for a mask directory.
    Split(SplitArgs),
    /// Run a sensitivity sweep described by --config into the --out directory.
    Sweep(SweepArgs),
    /// Fit exponential traces or scaling surfaces to a stored sweep.
    Fit(FitArgs),
    /// Rank models by a fitted surface at a query point.
    Recommend(RecommendArgs),
    /// Emit plot-ready tables for a stored sweep.
    Report(ReportArgs),
    /// Volume series and OCT-A/OCT ratio from slice stacks or a series CSV.
    Volume(VolumeArgs),
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth pixels above this intensity are foreground.
    #[arg(long, default_value_t = DEFAULT_CUTOFF)]
    cutoff: u8,
    /// Pixel spacing as DY,DX for the Hausdorff distance.
    #[arg(long, value_parser = parse_spacing)]
    spacing: Option<Spacing>,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    masks: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CUTOFF)]
    cutoff: u8,
    #[arg(long, default_value_t = DEFAULT_MIN_FOREGROUND)]
    min_foreground: usize,
    /// train,validation,test fractions.
    #[arg(long, value_parser = parse_ratios, default_value = "0.8,0.1,0.1")]
    ratios: (f64, f64, f64),
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Worker threads (default: configuration value, then all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Scratch directory for external predictors (default: <out>/work).
    #[arg(long)]
    workdir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Sweep directory written by `segsense sweep`.
    #[arg(long)]
    sweep: PathBuf,
    /// exp or surface.
    #[arg(long, default_value = "surface")]
    kind: FitKind,
    /// Use each cell's best epoch instead of the final one.
    #[arg(long)]
    best_epoch: bool,
}

#[derive(Args, Debug)]
struct RecommendArgs {
    /// Fit set JSON written by `segsense fit --kind surface`.
    #[arg(long)]
    fits: PathBuf,
    #[arg(long)]
    ntrain: f64,
    #[arg(long)]
    ntest: f64,
    #[arg(long, default_value = "dice")]
    index: SurfaceTarget,
    #[arg(long, default_value = "low-variation")]
    category: DataCategory,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    sweep: PathBuf,
    #[arg(long)]
    best_epoch: bool,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct VolumeInput {
    /// CSV with columns day,modality,stack_dir.
    #[arg(long)]
    stacks: Option<PathBuf>,
    /// CSV with columns day,modality,stack_id,voxel_count[,normalized_volume].
    #[arg(long)]
    series: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VolumeArgs {
    #[command(flatten)]
    input: VolumeInput,
    #[arg(long, default_value_t = DEFAULT_CUTOFF)]
    cutoff: u8,
}

fn parse_spacing(s: &str) -> std::result::Result<Spacing, String> {
    let (dy, dx) = s.split_once(',').ok_or("expected DY,DX")?;
    let dy: f64 = dy.trim().parse().map_err(|e| format!("{e}"))?;
    let dx: f64 = dx.trim().parse().map_err(|e| format!("{e}"))?;
    Ok(Spacing { dy, dx })
}

fn parse_ratios(s: &str) -> std::result::Result<(f64, f64, f64), String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err("expected three comma-separated fractions".into()),
    }
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Writes to `--out` when given, stdout otherwise.
fn emit(out: Option<&Path>, body: &str) -> Result<()> {
    match out {
        Some(p) => write_file(p, body),
        None => std::io::stdout()
            .write_all(body.as_bytes())
            .map_err(|e| Error::io("writing stdout", e)),
    }
}

fn require_out(out: Option<&PathBuf>, command: &str) -> Result<PathBuf> {
    out.cloned()
        .ok_or_else(|| Error::InvalidArgument(format!("{command} needs --out <dir>")))
}

/// Reads the `metrics` table of a configuration file, if any.
fn metric_config(path: Option<&Path>) -> Result<MetricConfig> {
    let Some(path) = path else {
        return Ok(MetricConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let bad = |e: String| Error::InvalidArgument(format!("{}: {e}", path.display()));
    let value: serde_json::Value = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?
    } else {
        let t: toml::Table = toml::from_str(&text).map_err(|e| bad(e.to_string()))?;
        serde_json::to_value(t).map_err(|e| bad(e.to_string()))?
    };
    match value.get("metrics") {
        Some(m) => serde_json::from_value(m.clone()).map_err(|e| bad(e.to_string())),
        None => Ok(MetricConfig::default()),
    }
}

fn selection(best: bool) -> EpochSelection {
    if best {
        EpochSelection::Best
    } else {
        EpochSelection::Final
    }
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn run(cli: Cli) -> Result<u8> {
    let out = cli.out.as_deref();
    match cli.command {
        Command::Evaluate(a) => {
            let mut cfg = metric_config(cli.config.as_deref())?;
            if let Some(s) = a.spacing {
                cfg.spacing = s;
            }
            let result = report::evaluate_dirs(&a.gt, &a.pred, &cfg, a.cutoff)?;
            emit(out, &result.csv()?)?;
            for (id, msg) in &result.pair_errors {
                eprintln!("error: pair {id}: {msg}");
            }
            Ok(if result.pair_errors.is_empty() { 0 } else { 2 })
        }
        Command::Split(a) => {
            let seed = cli.seed.unwrap_or(0);
            let json = report::split_dir(&a.masks, a.cutoff, a.min_foreground, a.ratios, seed)?;
            emit(out, &json)?;
            Ok(0)
        }
        Command::Sweep(a) => {
            let config = cli
                .config
                .as_deref()
                .ok_or_else(|| Error::InvalidArgument("sweep needs --config <file>".into()))?;
            let out = require_out(cli.out.as_ref(), "sweep")?;
            let mut file = SweepFile::load(config)?;
            if let Some(seed) = cli.seed {
                file.sweep.seed = seed;
            }
            file.sweep.validate()?;
            let data = file.data.load(file.sweep.seed)?;
            let opts = SweepOptions {
                workdir: Some(a.workdir.unwrap_or_else(|| out.join("work"))),
                threads: a.threads.or(file.threads),
            };
            let result = sweep::run_sweep(&file.sweep, &data, &opts)?;
            sweep::write_sweep_dir(&result, &out)?;
            let failed: Vec<_> = result.failed().collect();
            for (key, failure) in &failed {
                eprintln!("cell {}: failed: {failure}", key.relative_dir().display());
            }
            Ok(if failed.is_empty() { 0 } else { 3 })
        }
        Command::Fit(a) => {
            let result = sweep::read_sweep_dir(&a.sweep)?;
            let fit = match a.kind {
                FitKind::Exp => report::fit_exponentials(&result)?,
                FitKind::Surface => report::fit_surfaces(&result, cli.units, selection(a.best_epoch))?,
            };
            warn_all(&fit.warnings);
            match out {
                Some(dir) => {
                    write_file(&dir.join("fits.json"), &fit.fits.to_json())?;
                    write_file(&dir.join("residuals.csv"), &fit.residuals_csv)?;
                }
                None => emit(None, &fit.fits.to_json())?,
            }
            Ok(0)
        }
        Command::Recommend(a) => {
            let fits = FitSet::load(&a.fits)?;
            let rec = report::recommend(&fits, a.ntrain, a.ntest, cli.units, a.index, a.category)?;
            match out {
                Some(dir) => {
                    write_file(
                        &dir.join("recommendation.json"),
                        &serde_json::to_string_pretty(&rec).expect("recommendation serializes"),
                    )?;
                    write_file(&dir.join("recommendation.csv"), &report::recommendation_csv(&rec)?)?;
                }
                None => emit(None, &report::recommendation_csv(&rec)?)?,
            }
            Ok(0)
        }
        Command::Report(a) => {
            let out = require_out(cli.out.as_ref(), "report")?;
            let result = sweep::read_sweep_dir(&a.sweep)?;
            let bundle = report::build_report(&result, selection(a.best_epoch))?;
            report::write_report(&bundle, &out)?;
            warn_all(&bundle.warnings);
            if bundle.completed_cells == 0 {
                eprintln!("error: every sweep cell failed; see failed_cells.csv");
                return Ok(3);
            }
            Ok(0)
        }
        Command::Volume(a) => {
            let series = match (a.input.stacks, a.input.series) {
                (Some(p), _) => report::series_from_stack_manifest(&p, a.cutoff)?,
                (None, Some(p)) => {
                    let f = fs::File::open(&p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
                    volume::read_series_csv(f)?
                }
                (None, None) => unreachable!("clap requires one input"),
            };
            let v = report::volume_report(&series)?;
            match out {
                Some(dir) => {
                    write_file(&dir.join("series.csv"), &v.series_csv)?;
                    if let Some(r) = &v.ratio_csv {
                        write_file(&dir.join("ratio.csv"), r)?;
                    }
                }
                None => emit(None, &v.series_csv)?,
            }
            if let Some(r) = &v.ratio {
                for day in &r.skipped_days {
                    eprintln!("warning: day {day}: OCT volume is zero, ratio skipped");
                }
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
