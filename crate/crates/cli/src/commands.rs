//! Command-line interface.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use apc_core::analysis::{
    dsmos_by_variant, fit_logistic_nls, group_apc, mos_by_variant, paired_t_bonferroni,
    read_apc_csv, read_ratings_csv, screen_apc_fit, screen_rater, ApcScreenOptions, Comparison,
    Screening,
};
use apc_core::eventlog::{read_log, replay_events};
use apc_core::manifest::StimulusManifest;
use apc_core::scale::{
    build_initial_scale, fit_pairwise_values, linearity_nmse, read_judgments_csv, read_rd_csv,
    resample_linear, PerceptualCurve, ReferenceScale,
};
use apc_core::sim::{run_mse_experiment, write_curves_csv, SimConfig, TrueQ};
use apc_core::{Error, PolicyKind};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::service::{estimates_body, serve, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "apc", version, about = "Adaptive paired-comparison quality measurement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compare selection policies on simulated observers.
    Simulate(SimulateArgs),
    /// Build and linearize reference scales.
    #[command(subcommand)]
    Scale(ScaleCommand),
    /// Fit per-rater psychometric functions to paired-comparison responses.
    Fit(FitArgs),
    /// Rating analysis.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Run the HTTP session service.
    Serve(ServeArgs),
    /// Verify a session event log and print its estimates.
    Replay(ReplayArgs),
    /// Write a stimulus manifest with opaque placeholder URLs.
    Manifest(ManifestArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Policies to run (repeatable); all when omitted.
    #[arg(long = "policy", value_name = "bald|staircase|random")]
    pub policies: Vec<PolicyKind>,
    #[arg(long, default_value_t = 500, env = "APC_OBSERVERS")]
    pub observers: usize,
    #[arg(long, default_value_t = 100, env = "APC_TRIALS")]
    pub trials: usize,
    #[arg(long, default_value_t = 0, env = "APC_SEED")]
    pub seed: u64,
    #[arg(long, default_value_t = 2.5, env = "APC_SLOPE")]
    pub slope: f64,
    #[arg(long, default_value_t = 0.02, env = "APC_LAPSE")]
    pub lapse: f64,
    /// Fixed true midpoint; overrides --q-lo/--q-hi.
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long, default_value_t = 5.0)]
    pub q_lo: f64,
    #[arg(long, default_value_t = 45.0)]
    pub q_hi: f64,
    #[arg(long, default_value_t = 50)]
    pub levels: u32,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum ScaleCommand {
    /// Sample the RD hull at log-spaced bitrates.
    Build {
        #[arg(long)]
        rd: PathBuf,
        #[arg(long, default_value_t = 50)]
        levels: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit per-level perceptual values to pairwise judgments.
    FitPairs {
        #[arg(long)]
        judgments: PathBuf,
        /// Number of levels; defaults to the highest level in the judgments.
        #[arg(long)]
        levels: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Resample a scale to equal perceptual steps.
    Linearize {
        #[arg(long)]
        scale: PathBuf,
        #[arg(long)]
        curve: PathBuf,
        /// RD table for re-selecting resolution and CRF at the new bitrates.
        #[arg(long)]
        rd: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the linearity nMSE of a perceptual curve.
    Nmse {
        #[arg(long)]
        curve: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub responses: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub levels: u32,
    #[arg(long, default_value_t = apc_core::analysis::MIN_RANGE)]
    pub min_range: f64,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Paired effect size and Bonferroni-corrected t-test between two conditions.
    EffectSize {
        /// CSV `rater_id,score` for condition A.
        #[arg(long)]
        a: PathBuf,
        /// CSV `rater_id,score` for condition B.
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 1)]
        family: usize,
        #[arg(long, default_value = "a-b")]
        label: String,
    },
    /// MOS and DS-MOS means with 95% CIs, after rater screening.
    Mos {
        #[arg(long)]
        ratings: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080, env = "APC_PORT")]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1", env = "APC_HOST")]
    pub host: String,
    #[arg(long, env = "APC_DATA_DIR")]
    pub data_dir: PathBuf,
    #[arg(long, env = "APC_MANIFEST")]
    pub manifest: PathBuf,
    #[arg(long, env = "APC_RATER_TOKEN")]
    pub rater_token: Option<String>,
    #[arg(long, env = "APC_EXPERIMENTER_TOKEN")]
    pub experimenter_token: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub log: PathBuf,
}

#[derive(Debug, Args)]
pub struct ManifestArgs {
    #[arg(long, default_value = "https://media.example")]
    pub base: String,
    /// Comma-separated clip ids.
    #[arg(long, value_delimiter = ',', required = true)]
    pub clips: Vec<String>,
    /// Comma-separated variant ids.
    #[arg(long, value_delimiter = ',', required = true)]
    pub variants: Vec<String>,
    #[arg(long, default_value_t = 50)]
    pub levels: u32,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Failure of a subcommand with its process exit code.
#[derive(Debug)]
pub enum CliError {
    Data(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Data(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Data(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn with_path<T>(path: &Path, r: apc_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Writes through `f` to the file, or to stdout when no path is given.
fn write_out(out: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> apc_core::Result<()>) -> CliResult {
    let internal = |e: &dyn std::fmt::Display| CliError::Internal(e.to_string());
    match out {
        Some(p) => {
            let file = File::create(p)
                .map_err(|e| CliError::Internal(format!("{}: {e}", p.display())))?;
            let mut w = BufWriter::new(file);
            f(&mut w).map_err(|e| internal(&e))?;
            w.flush().map_err(|e| internal(&e))
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            f(&mut lock).map_err(|e| internal(&e))?;
            lock.flush().map_err(|e| internal(&e))
        }
    }
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Scale(c) => scale(c),
        Command::Fit(a) => fit(a),
        Command::Analyze(c) => analyze(c),
        Command::Serve(a) => serve_cmd(a),
        Command::Replay(a) => replay(a),
        Command::Manifest(a) => manifest(a),
    }
}

fn simulate(a: SimulateArgs) -> CliResult {
    let cfg = SimConfig {
        policies: if a.policies.is_empty() {
            PolicyKind::ALL.to_vec()
        } else {
            a.policies
        },
        n_observers: a.observers,
        trials_max: a.trials,
        true_q: match a.q {
            Some(q) => TrueQ::Fixed { q },
            None => TrueQ::Uniform { lo: a.q_lo, hi: a.q_hi },
        },
        slope: a.slope,
        lapse: a.lapse,
        seed: a.seed,
        n_levels: a.levels,
        ..SimConfig::default()
    };
    let curves = run_mse_experiment(&cfg)?;
    write_out(a.out.as_deref(), |w| write_curves_csv(&curves, w))
}

fn scale(c: ScaleCommand) -> CliResult {
    match c {
        ScaleCommand::Build { rd, levels, out } => {
            let points = with_path(&rd, read_rd_csv(open(&rd)?))?;
            let s = build_initial_scale(&points, levels)?;
            write_out(out.as_deref(), |w| s.write_csv(w))
        }
        ScaleCommand::FitPairs { judgments, levels, out } => {
            let js = with_path(&judgments, read_judgments_csv(open(&judgments)?))?;
            let n = levels.unwrap_or_else(|| {
                js.iter().map(|j| j.level_a.max(j.level_b)).max().unwrap_or(0) as usize
            });
            let fit = fit_pairwise_values(&js, n)?;
            if !fit.converged {
                eprintln!("warning: stopped after {} iterations without converging", fit.iterations);
            }
            write_out(out.as_deref(), |w| fit.curve.write_csv(w))
        }
        ScaleCommand::Linearize { scale, curve, rd, out } => {
            let s = with_path(&scale, ReferenceScale::read_csv(open(&scale)?))?;
            let v = with_path(&curve, PerceptualCurve::read_csv(open(&curve)?))?;
            let rd = match rd {
                Some(p) => Some(with_path(&p, read_rd_csv(open(&p)?))?),
                None => None,
            };
            let lin = resample_linear(&s, &v, rd.as_deref())?;
            write_out(out.as_deref(), |w| lin.scale.write_csv(w))
        }
        ScaleCommand::Nmse { curve } => {
            let v = with_path(&curve, PerceptualCurve::read_csv(open(&curve)?))?;
            println!("{:.6}", linearity_nmse(&v)?);
            Ok(())
        }
    }
}

fn fit(a: FitArgs) -> CliResult {
    let responses = with_path(&a.responses, read_apc_csv(open(&a.responses)?))?;
    let opts = ApcScreenOptions {
        min_range: a.min_range,
        n_levels: a.levels,
    };
    write_out(a.out.as_deref(), |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "rater_id", "variant_id", "midpoint", "slope", "lower", "upper", "residual_norm",
            "se_midpoint", "verdict", "reason",
        ])?;
        for ((rater, variant), data) in group_apc(&responses) {
            let fit = fit_logistic_nls(&data);
            let verdict = screen_apc_fit(&fit, opts);
            let num = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
            let f = fit.as_ref().ok();
            let (label, reason) = match &verdict {
                Screening::Include => ("include", String::new()),
                Screening::Exclude(r) => ("exclude", r.to_string()),
            };
            out.write_record([
                rater,
                variant,
                num(f.map(|f| f.params.midpoint)),
                num(f.map(|f| f.params.slope)),
                num(f.map(|f| f.params.lower)),
                num(f.map(|f| f.params.upper)),
                num(f.map(|f| f.residual_norm)),
                num(f.and_then(|f| f.std_errors).map(|se| se[0])),
                label.to_string(),
                reason,
            ])?;
        }
        out.flush()?;
        Ok(())
    })
}

#[derive(Deserialize)]
struct ScoreRow {
    rater_id: String,
    score: f64,
}

fn read_scores(path: &Path) -> CliResult<BTreeMap<String, f64>> {
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let mut out = BTreeMap::new();
    for (i, row) in rdr.deserialize::<ScoreRow>().enumerate() {
        let row = with_path(path, row.map_err(Error::from))?;
        if out.insert(row.rater_id.clone(), row.score).is_some() {
            return Err(CliError::Data(format!(
                "{}: row {}: duplicate rater {}",
                path.display(),
                i + 1,
                row.rater_id
            )));
        }
    }
    Ok(out)
}

fn analyze(c: AnalyzeCommand) -> CliResult {
    match c {
        AnalyzeCommand::EffectSize { a, b, family, label } => {
            let (xa, xb) = (read_scores(&a)?, read_scores(&b)?);
            let unmatched: Vec<&String> = xa.keys().filter(|k| !xb.contains_key(*k)).collect();
            if !unmatched.is_empty() || xa.len() != xb.len() {
                return Err(CliError::Data(format!(
                    "raters must match across conditions; unmatched in A: {unmatched:?}"
                )));
            }
            let cmp = Comparison {
                label,
                x: xa.values().copied().collect(),
                y: xa.keys().map(|k| xb[k]).collect(),
            };
            let reports = paired_t_bonferroni(&[cmp], family)?;
            write_out(None, |w| {
                let mut out = csv::Writer::from_writer(w);
                for r in &reports {
                    out.serialize(r)?;
                }
                out.flush()?;
                Ok(())
            })
        }
        AnalyzeCommand::Mos { ratings } => {
            let records = with_path(&ratings, read_ratings_csv(open(&ratings)?))?;
            let mut by_rater: BTreeMap<&str, Vec<_>> = BTreeMap::new();
            for r in &records {
                by_rater.entry(&r.rater_id).or_default().push(r.clone());
            }
            let mut kept = Vec::new();
            for (rater, rs) in by_rater {
                match screen_rater(&rs) {
                    Screening::Include => kept.extend(rs),
                    Screening::Exclude(reason) => eprintln!("excluded rater {rater}: {reason}"),
                }
            }
            let mos = mos_by_variant(&kept)?;
            let has_ds = kept
                .iter()
                .any(|r| r.scale == apc_core::analysis::RatingScale::DsMos);
            let ds = if has_ds { dsmos_by_variant(&kept)? } else { BTreeMap::new() };
            println!("scale,variant,mean,ci_low,ci_high,n_raters");
            for (name, table) in [("MOS", mos), ("DS-MOS", ds)] {
                for (variant, m) in table {
                    println!(
                        "{name},{variant},{:.4},{:.4},{:.4},{}",
                        m.mean,
                        m.lower(),
                        m.upper(),
                        m.n_raters
                    );
                }
            }
            Ok(())
        }
    }
}

fn serve_cmd(a: ServeArgs) -> CliResult {
    let text = std::fs::read_to_string(&a.manifest)
        .map_err(|e| CliError::Data(format!("{}: {e}", a.manifest.display())))?;
    let manifest = with_path(&a.manifest, StimulusManifest::from_json(&text))?;
    let manifest_ref = a
        .manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "manifest".into());
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| CliError::Data(format!("bad address: {e}")))?;
    let cfg = ServiceConfig {
        data_dir: a.data_dir,
        manifest,
        manifest_ref,
        rater_token: a.rater_token,
        experimenter_token: a.experimenter_token,
    };
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Internal(e.to_string()))?;
    rt.block_on(serve(cfg, addr)).map_err(|e| match e {
        Error::Io(m) => CliError::Internal(m),
        other => CliError::Data(other.to_string()),
    })
}

fn replay(a: ReplayArgs) -> CliResult {
    let events = with_path(&a.log, read_log(open(&a.log)?))?;
    let r = with_path(&a.log, replay_events(&events))?;
    let body = estimates_body(&r.session_id, &r.state);
    println!("{}", serde_json::to_string_pretty(&body).map_err(|e| CliError::Internal(e.to_string()))?);
    Ok(())
}

fn manifest(a: ManifestArgs) -> CliResult {
    let m = StimulusManifest::synthetic(&a.base, &a.clips, &a.variants, a.levels);
    write_out(a.out.as_deref(), |w| {
        serde_json::to_writer_pretty(&mut *w, &m)?;
        writeln!(w)?;
        Ok(())
    })
}
