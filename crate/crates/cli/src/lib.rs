//! The `sofair` command line.
//!
//! Each subcommand delegates to `sofair-core` and writes a manifest next to
//! its artifact (`<out>.manifest.json`, or `manifest.json` inside an output
//! directory) that records the full argument vector, the resolved
//! configuration and SHA-256 hashes of every input and output.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error (missing, unreadable
//! or corrupt input), 3 numeric failure. Failures print one line to stderr:
//! `error code=<n> kind=<usage|data|numeric> message=<json string>`.

use std::fs;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use sofair_core::data::{
    load_adults, load_heritage, read_dataset, split, synth_biased, write_dataset, AdultsVariant, CategoricalEncoding,
    SynthSpec, TabularDataset,
};
use sofair_core::evaluation::{
    aufdc, bit_disparity, curve_report, distortion_max, information_max, pareto_filter, pareto_front, read_curve_csv,
    unmasked_bit_correlations, Aggregate, AuditProtocol, CurvePoint,
};
use sofair_core::info::{self, FiniteJoint};
use sofair_core::model::{train, BetaSampling, Mode, Model, ModelCheckpoint, ModelConfig};
use sofair_core::nn::ClassifierConfig;
use sofair_core::rng::substream;
use sofair_service::{ServeOptions, ServeState};

/// Environment variable used as the root for relative input paths.
pub const DATA_DIR_ENV: &str = "SOFAIR_DATA_DIR";

#[derive(Debug, Parser)]
#[command(name = "sofair", version, about = "Single-shot fair representations: data, training, curves, audits and serving")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dataset preparation.
    Data {
        #[command(subcommand)]
        action: DataAction,
    },
    /// Train one model and write a checkpoint.
    Train(TrainArgs),
    /// Trace the unfairness-distortion curve of a checkpoint.
    Curve(CurveArgs),
    /// Area under a traced curve.
    Aufdc(AufdcArgs),
    /// Sensitive and task accuracies of frozen codes.
    Pareto(ParetoArgs),
    /// Feature correlations of newly visible bits and per-bit disparity.
    Interpret(InterpretArgs),
    /// Exact finite-alphabet checks.
    Oracle {
        #[command(subcommand)]
        action: OracleAction,
    },
    /// Serve a checkpoint over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum DataAction {
    /// Load or generate a dataset, split it and write `train/val/test.sfds`.
    Prepare(PrepareArgs),
}

#[derive(Debug, Subcommand)]
pub enum OracleAction {
    /// Random encoders on one random joint; writes one row per encoder.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Synthetic,
    Adults,
    Heritage,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Gender,
    GenderRace,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    Index,
    OneHot,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Sofair,
    Msfair,
    SofairNos,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// d=8, A=8, lr 1e-3, 5000 iterations with a 1000-step rate warm-up.
    Desk,
    /// Learning rate 3e-5, 27000 iterations.
    Full,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateArg {
    Mean,
    Min,
}

#[derive(Debug, Args, Serialize)]
pub struct PrepareArgs {
    #[arg(long, value_enum)]
    pub source: Source,
    /// Raw CSV for `adults` and `heritage`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Split fractions train,validation,test.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.6, 0.2, 0.2])]
    pub split: Vec<f64>,
    /// Seed of the split (and of the synthetic generator unless `--synth-seed`).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Variant::Gender)]
    pub variant: Variant,
    #[arg(long, value_enum, default_value_t = Encoding::Index)]
    pub encoding: Encoding,
    /// Synthetic rows.
    #[arg(long, default_value_t = 20_000)]
    pub n: usize,
    /// Synthetic feature count.
    #[arg(long, default_value_t = 24)]
    pub p: usize,
    /// Synthetic sensitive groups.
    #[arg(long = "d-s", default_value_t = 4)]
    pub d_s: usize,
    /// Synthetic bias strength in [0, 1].
    #[arg(long, default_value_t = 1.0)]
    pub bias: f64,
    /// Synthetic group-mean spread.
    #[arg(long, default_value_t = 0.5)]
    pub shift: f64,
    /// Synthetic noise standard deviation.
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    #[arg(long)]
    pub synth_seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Training split (`.sfds`) or a prepared directory (uses `train.sfds`).
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Sofair)]
    pub mode: ModeArg,
    /// Fixed β; required for `msfair`.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, value_enum, default_value_t = Profile::Desk)]
    pub profile: Profile,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub max_bits: Option<usize>,
    /// Hidden widths of encoder and decoder, e.g. `128,128`.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// Mixture components of the rate model.
    #[arg(long)]
    pub components: Option<usize>,
    /// Steps over which the rate weight ramps up.
    #[arg(long)]
    pub rate_warmup: Option<usize>,
    /// One β per batch instead of one per sample.
    #[arg(long)]
    pub beta_per_batch: bool,
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct GridArgs {
    /// Comma list; `a,b,...,c` expands the progression `a, b, ..., c`.
    #[arg(long, conflicts_with = "beta_grid")]
    pub betas: Option<String>,
    /// N evenly spaced points on [0, 1], endpoints included.
    #[arg(long)]
    pub beta_grid: Option<usize>,
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct AuditArgs {
    #[arg(long, default_value_t = 5)]
    pub auditors: usize,
    #[arg(long, value_enum, default_value_t = AggregateArg::Mean)]
    pub aggregate: AggregateArg,
    /// Seed of the auditors and of their held-out split.
    #[arg(long, default_value_t = 0)]
    pub audit_seed: u64,
    #[arg(long, default_value_t = 400)]
    pub auditor_steps: usize,
    #[arg(long, default_value_t = 256)]
    pub auditor_hidden: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct CurveArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Evaluation split (`.sfds`) or a prepared directory (uses `test.sfds`).
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub audit: AuditArgs,
    /// CSV `beta,distortion,mi_lower,mean_bits`.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional JSON report with the Pareto set, normalizers and AUFDC.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct AufdcArgs {
    /// Curve CSV; may be given several times to compare curves under
    /// shared normalizers.
    #[arg(long, required = true)]
    pub curve: Vec<PathBuf>,
    #[arg(long)]
    pub d_max: Option<f64>,
    #[arg(long)]
    pub i_max: Option<f64>,
    /// Checkpoints matching each `--curve`, used to compute a shared D_max.
    #[arg(long)]
    pub ckpt: Vec<PathBuf>,
    /// Evaluation split for computing missing normalizers.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[command(flatten)]
    pub audit: AuditArgs,
    /// JSON result; printed to stdout as well.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ParetoArgs {
    /// One or more checkpoints; `msfair` ones contribute their fixed β,
    /// the others every grid point.
    #[arg(long, required = true)]
    pub ckpt: Vec<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 400)]
    pub classifier_steps: usize,
    /// CSV `model,beta,a_s,a_y`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct InterpretArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub beta_hi: f64,
    #[arg(long)]
    pub beta_lo: f64,
    /// CSV: feature-name header and one row of correlations.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional CSV `dim,position,visible_fraction,disparity` at `beta_lo`.
    #[arg(long)]
    pub disparity: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long, default_value_t = 8)]
    pub nx: usize,
    #[arg(long, default_value_t = 3)]
    pub ns: usize,
    #[arg(long, default_value_t = 6)]
    pub nz: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV `distortion,rate,unfairness,residual`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Evaluation split (`.sfds`) or a prepared directory (uses `test.sfds`).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Size of the startup curve grid.
    #[arg(long, default_value_t = 11)]
    pub beta_grid: usize,
    #[arg(long, default_value_t = 2048)]
    pub sample_rows: usize,
    #[command(flatten)]
    pub audit: AuditArgs,
    /// Allowed browser origin; any origin when omitted.
    #[arg(long)]
    pub cors_origin: Option<String>,
}

/// Failure category; fixes the exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Data,
    Numeric,
}

impl Kind {
    pub fn code(self) -> i32 {
        match self {
            Self::Usage => 1,
            Self::Data => 2,
            Self::Numeric => 3,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Usage => "usage",
            Self::Data => "data",
            Self::Numeric => "numeric",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self { kind: Kind::Usage, message: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self { kind: Kind::Data, message: msg.into() }
    }

    /// The single stderr line.
    pub fn line(&self) -> String {
        format!(
            "error code={} kind={} message={}",
            self.kind.code(),
            self.kind.name(),
            serde_json::to_string(&self.message).unwrap_or_default()
        )
    }
}

impl From<sofair_core::Error> for CliError {
    fn from(e: sofair_core::Error) -> Self {
        use sofair_core::Error as E;
        let kind = match &e {
            E::InvalidArgument(_) | E::OutOfRange(_) => Kind::Usage,
            E::Diverged { .. } | E::InvalidDistribution(_) => Kind::Numeric,
            E::DimensionMismatch(_) | E::MissingColumn(_) | E::Data(_) | E::Corrupt(_) | E::Io(_) | E::Csv(_) | E::Json(_) => {
                Kind::Data
            }
        };
        Self { kind, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Resolves an input path against `SOFAIR_DATA_DIR` when it is relative.
pub fn resolve_input(p: &Path) -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(root) if p.is_relative() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}

fn existing(p: &Path, what: &str) -> CliResult<PathBuf> {
    let r = resolve_input(p);
    if !r.exists() {
        return Err(CliError::data(format!("{what} {} does not exist", r.display())));
    }
    Ok(r)
}

/// A `.sfds` file, or `<dir>/<split>.sfds` for a prepared directory.
fn dataset_path(p: &Path, split_name: &str) -> CliResult<PathBuf> {
    let r = existing(p, "dataset")?;
    if r.is_dir() {
        let f = r.join(format!("{split_name}.sfds"));
        if !f.exists() {
            return Err(CliError::data(format!("{} has no {split_name}.sfds", r.display())));
        }
        return Ok(f);
    }
    Ok(r)
}

fn load_ckpt(p: &Path) -> CliResult<(PathBuf, ModelCheckpoint)> {
    let r = existing(p, "checkpoint")?;
    let ck = ModelCheckpoint::load(&r)?;
    Ok((r, ck))
}

/// Reads an evaluation split and maps it into the checkpoint's preprocessing.
fn load_eval(p: &Path, ck: &ModelCheckpoint) -> CliResult<(PathBuf, TabularDataset)> {
    let path = dataset_path(p, "test")?;
    let ds = read_dataset(&path)?;
    if ds.p() != ck.model.input_dim || ds.d_s() != ck.model.sensitive_dim {
        return Err(CliError::data(format!(
            "dataset {} has p={}, d_s={}; checkpoint expects p={}, d_s={}",
            path.display(),
            ds.p(),
            ds.d_s(),
            ck.model.input_dim,
            ck.model.sensitive_dim
        )));
    }
    let ds = if ds.stats == ck.stats { ds } else { ds.restandardize(&ck.stats) };
    Ok((path, ds))
}

fn file_sha256(p: &Path) -> CliResult<String> {
    Ok(hex::encode(Sha256::digest(fs::read(p)?)))
}

fn hashed(paths: &[PathBuf]) -> CliResult<Vec<Value>> {
    paths.iter().map(|p| Ok(json!({ "path": p.display().to_string(), "sha256": file_sha256(p)? }))).collect()
}

fn write_manifest(at: &Path, command: &str, args: &impl Serialize, resolved: Value, inputs: &[PathBuf], outputs: &[PathBuf]) -> CliResult<()> {
    let manifest = json!({
        "tool": "sofair",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "argv": std::env::args().collect::<Vec<_>>(),
        "args": serde_json::to_value(args).map_err(|e| CliError::data(e.to_string()))?,
        "resolved": resolved,
        "inputs": hashed(inputs)?,
        "outputs": hashed(outputs)?,
    });
    fs::write(at, serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::data(e.to_string()))?)?;
    Ok(())
}

fn manifest_for(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Parses a β list; `a,b,...,c` expands the arithmetic progression.
pub fn parse_betas(raw: &str) -> CliResult<Vec<f64>> {
    let parts: Vec<&str> = raw.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    let num = |s: &str| s.parse::<f64>().map_err(|_| CliError::usage(format!("beta {s:?} is not a number")));
    let mut out = Vec::new();
    let mut i = 0;
    while i < parts.len() {
        if parts[i] == "..." {
            if out.len() < 2 || i + 1 >= parts.len() {
                return Err(CliError::usage("`...` needs two values before it and one after"));
            }
            let (a, b) = (out[out.len() - 2], out[out.len() - 1]);
            let end = num(parts[i + 1])?;
            let step: f64 = b - a;
            if step <= 0.0 || end < b {
                return Err(CliError::usage("`...` needs an increasing progression"));
            }
            let k = ((end - a) / step).round() as usize;
            if (a + k as f64 * step - end).abs() > 1e-9 * step.max(1.0) {
                return Err(CliError::usage(format!("{end} is not on the progression {a}, {b}, ...")));
            }
            let start = out.len() - 2;
            out.truncate(start);
            out.extend((0..=k).map(|m| if m == k { end } else { a + m as f64 * step }));
            i += 2;
        } else {
            out.push(num(parts[i])?);
            i += 1;
        }
    }
    if let Some(bad) = out.iter().find(|b| !(0.0..=1.0).contains(*b)) {
        return Err(CliError::usage(format!("beta {bad} is outside [0, 1]")));
    }
    Ok(out)
}

fn grid(g: &GridArgs, default_n: usize) -> CliResult<Vec<f64>> {
    match (&g.betas, g.beta_grid) {
        (Some(raw), _) => parse_betas(raw),
        (None, Some(n)) if n >= 2 => Ok(sofair_service::uniform_grid(n)),
        (None, Some(n)) => Err(CliError::usage(format!("--beta-grid {n} needs at least 2 points"))),
        (None, None) => Ok(sofair_service::uniform_grid(default_n)),
    }
}

fn protocol(a: &AuditArgs) -> AuditProtocol {
    let d = AuditProtocol::default();
    AuditProtocol {
        auditors: a.auditors,
        aggregate: match a.aggregate {
            AggregateArg::Mean => Aggregate::Mean,
            AggregateArg::Min => Aggregate::Min,
        },
        seed: a.audit_seed,
        classifier: ClassifierConfig { steps: a.auditor_steps, hidden: a.auditor_hidden, ..d.classifier },
        ..d
    }
}

fn to_json(v: &impl Serialize) -> CliResult<Vec<u8>> {
    serde_json::to_vec_pretty(v).map_err(|e| CliError::data(e.to_string()))
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Data { action: DataAction::Prepare(a) } => cmd_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Curve(a) => cmd_curve(&a),
        Command::Aufdc(a) => cmd_aufdc(&a),
        Command::Pareto(a) => cmd_pareto(&a),
        Command::Interpret(a) => cmd_interpret(&a),
        Command::Oracle { action: OracleAction::Sweep(a) } => cmd_oracle(&a),
        Command::Serve(a) => cmd_serve(&a),
    }
}

fn cmd_data(a: &PrepareArgs) -> CliResult<()> {
    let fractions: [f64; 3] =
        a.split.clone().try_into().map_err(|_| CliError::usage("--split needs exactly three fractions"))?;
    let mut inputs = Vec::new();
    let (ds, report) = match a.source {
        Source::Synthetic => {
            if !(0.0..=1.0).contains(&a.bias) {
                return Err(CliError::usage(format!("--bias {} is outside [0, 1]", a.bias)));
            }
            let mut spec = SynthSpec::new(a.n, a.p, a.d_s, a.bias, a.synth_seed.unwrap_or(a.seed));
            spec.shift = a.shift;
            spec.noise = a.noise;
            (synth_biased(&spec)?, json!({ "generator": spec_json(&spec), "exact_feature_mi": spec.exact_feature_mi() }))
        }
        Source::Adults | Source::Heritage => {
            let input = a.input.as_deref().ok_or_else(|| CliError::usage("--input is required for this source"))?;
            let path = existing(input, "input")?;
            inputs.push(path.clone());
            let (ds, rep) = if matches!(a.source, Source::Adults) {
                let variant = match a.variant {
                    Variant::Gender => AdultsVariant::Gender,
                    Variant::GenderRace => AdultsVariant::GenderRace,
                };
                let encoding = match a.encoding {
                    Encoding::Index => CategoricalEncoding::Index,
                    Encoding::OneHot => CategoricalEncoding::OneHot,
                };
                load_adults(&path, variant, encoding)?
            } else {
                load_heritage(&path)?
            };
            (ds, json!({ "rows_read": rep.rows_read, "rows_dropped": rep.rows_dropped }))
        }
    };
    let (tr, va, te) = split(&ds, fractions, a.seed)?;
    fs::create_dir_all(&a.out)?;
    let outs: Vec<PathBuf> = ["train", "val", "test"].iter().map(|s| a.out.join(format!("{s}.sfds"))).collect();
    for (d, p) in [&tr, &va, &te].into_iter().zip(&outs) {
        write_dataset(p, d)?;
    }
    let resolved = json!({
        "source": report,
        "rows": { "train": tr.n(), "val": va.n(), "test": te.n() },
        "p": ds.p(),
        "d_s": ds.d_s(),
        "feature_names": ds.feature_names,
        "sensitive_names": ds.sensitive_names,
    });
    write_manifest(&a.out.join("manifest.json"), "data prepare", a, resolved, &inputs, &outs)?;
    println!("wrote {} / {} / {} rows to {}", tr.n(), va.n(), te.n(), a.out.display());
    Ok(())
}

fn spec_json(s: &SynthSpec) -> Value {
    json!({
        "n": s.n, "p": s.p, "d_s": s.d_s, "bias_strength": s.bias_strength, "factors": s.factors,
        "biased_factors": s.biased_factors, "shift": s.shift, "noise": s.noise, "seed": s.seed,
    })
}

/// The model configuration a `train` invocation resolves to.
pub fn train_config(a: &TrainArgs) -> CliResult<ModelConfig> {
    let base = match a.profile {
        Profile::Desk => ModelConfig::desk(),
        Profile::Full => ModelConfig::default(),
    };
    let mode = match a.mode {
        ModeArg::Sofair => Mode::Sofair,
        ModeArg::Msfair => Mode::Msfair,
        ModeArg::SofairNos => Mode::SofairNos,
    };
    if a.beta.is_some() && !matches!(mode, Mode::Msfair) {
        return Err(CliError::usage("--beta only applies to --mode msfair"));
    }
    let cfg = ModelConfig {
        mode,
        fixed_beta: a.beta,
        seed: a.seed,
        iterations: a.iters.unwrap_or(base.iterations),
        learning_rate: a.lr.unwrap_or(base.learning_rate),
        batch_size: a.batch_size.unwrap_or(base.batch_size),
        latent_dim: a.latent_dim.unwrap_or(base.latent_dim),
        max_bits: a.max_bits.unwrap_or(base.max_bits),
        components: a.components.unwrap_or(base.components),
        encoder_hidden: a.hidden.clone().unwrap_or_else(|| base.encoder_hidden.clone()),
        decoder_hidden: a.hidden.clone().unwrap_or_else(|| base.decoder_hidden.clone()),
        rate_warmup: a.rate_warmup.unwrap_or(base.rate_warmup),
        beta_sampling: if a.beta_per_batch { BetaSampling::PerBatch } else { base.beta_sampling },
        ..base
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let cfg = train_config(a)?;
    let path = dataset_path(&a.dataset, "train")?;
    let ds = read_dataset(&path)?;
    let ck = train(&ds, &cfg)?;
    ck.save(&a.out)?;
    let hash = file_sha256(&a.out)?;
    let last = ck.trace.last().map(|r| r.loss).unwrap_or(f64::NAN);
    let resolved = json!({ "config": cfg, "weight_hash": ck.model.weight_hash(), "final_loss": last });
    write_manifest(&manifest_for(&a.out), "train", a, resolved, &[path], std::slice::from_ref(&a.out))?;
    println!("{hash}  {}", a.out.display());
    Ok(())
}

fn cmd_curve(a: &CurveArgs) -> CliResult<()> {
    let (ck_path, ck) = load_ckpt(&a.ckpt)?;
    let (ds_path, ds) = load_eval(&a.dataset, &ck)?;
    let betas = grid(&a.grid, 11)?;
    let proto = protocol(&a.audit);
    let before = ck.model.weight_hash();
    let report = curve_report(&ck.model, &ds, &betas, &proto)?;
    if ck.model.weight_hash() != before {
        return Err(CliError { kind: Kind::Numeric, message: "encoder weights changed while tracing".into() });
    }
    report.write_csv(fs::File::create(&a.out)?)?;
    let mut outs = vec![a.out.clone()];
    if let Some(r) = &a.report {
        report.save_json(r)?;
        outs.push(r.clone());
    }
    let resolved = json!({ "betas": betas, "protocol": proto, "d_max": report.d_max, "i_max": report.i_max, "aufdc": report.aufdc });
    write_manifest(&manifest_for(&a.out), "curve", a, resolved, &[ck_path, ds_path], &outs)?;
    println!("{} points, AUFDC {:.6}", report.points.len(), report.aufdc);
    Ok(())
}

#[derive(Debug, Serialize)]
struct AufdcOut {
    curve: String,
    aufdc: f64,
    filtered: Vec<CurvePoint>,
}

fn cmd_aufdc(a: &AufdcArgs) -> CliResult<()> {
    let curves: Vec<PathBuf> = a.curve.iter().map(|c| existing(c, "curve")).collect::<CliResult<_>>()?;
    let points: Vec<Vec<CurvePoint>> = curves.iter().map(|c| read_curve_csv(c)).collect::<Result<_, _>>()?;
    let mut inputs = curves.clone();
    let observed = points.iter().flatten().map(|p| p.distortion).fold(0.0, f64::max);
    let needs_data = a.d_max.is_none() && !a.ckpt.is_empty() || a.i_max.is_none();
    let eval = match (&a.dataset, needs_data) {
        (Some(d), true) => {
            let p = dataset_path(d, "test")?;
            inputs.push(p.clone());
            Some(read_dataset(&p)?)
        }
        (None, true) if a.i_max.is_none() => return Err(CliError::usage("--i-max or --dataset is required")),
        _ => None,
    };
    let proto = protocol(&a.audit);
    let i_max = match a.i_max {
        Some(v) => v,
        None => information_max(eval.as_ref().expect("dataset loaded"), &proto)?,
    };
    let d_max = match a.d_max {
        Some(v) => v,
        None if a.ckpt.is_empty() => observed,
        None => {
            if a.ckpt.len() != points.len() {
                return Err(CliError::usage("give one --ckpt per --curve"));
            }
            let ds = eval.as_ref().ok_or_else(|| CliError::usage("--dataset is required with --ckpt"))?;
            let mut d = observed;
            for (c, pts) in a.ckpt.iter().zip(&points) {
                let (cp, ck) = load_ckpt(c)?;
                inputs.push(cp);
                let ds = if ds.stats == ck.stats { ds.clone() } else { ds.restandardize(&ck.stats) };
                let betas: Vec<f64> = pts.iter().map(|p| p.beta).collect();
                d = d.max(distortion_max(&ck.model, &ds, &betas, pts, proto.seed)?);
            }
            d
        }
    };
    let results: Vec<AufdcOut> = curves
        .iter()
        .zip(&points)
        .map(|(c, pts)| {
            let clamped: Vec<CurvePoint> = pts.iter().map(|p| CurvePoint { mi_lower: p.mi_lower.max(0.0), ..*p }).collect();
            let filtered = pareto_filter(&clamped);
            Ok(AufdcOut { curve: c.display().to_string(), aufdc: aufdc(&filtered, d_max, i_max)?, filtered })
        })
        .collect::<CliResult<_>>()?;
    let body = json!({ "d_max": d_max, "i_max": i_max, "curves": results });
    let text = to_json(&body)?;
    std::io::stdout().write_all(&text)?;
    println!();
    if let Some(out) = &a.out {
        fs::write(out, &text)?;
        write_manifest(&manifest_for(out), "aufdc", a, json!({ "d_max": d_max, "i_max": i_max }), &inputs, std::slice::from_ref(out))?;
    }
    Ok(())
}

fn cmd_pareto(a: &ParetoArgs) -> CliResult<()> {
    let betas = grid(&a.grid, 11)?;
    let mut inputs = Vec::new();
    let mut models: Vec<ModelCheckpoint> = Vec::new();
    for c in &a.ckpt {
        let (p, ck) = load_ckpt(c)?;
        inputs.push(p);
        models.push(ck);
    }
    let (ds_path, ds) = load_eval(&a.dataset, &models[0])?;
    inputs.push(ds_path);
    let cfg = ClassifierConfig { steps: a.classifier_steps, ..ClassifierConfig::default() };
    let mut w = String::from("model,beta,a_s,a_y\n");
    for (i, ck) in models.iter().enumerate() {
        let ds = if ds.stats == ck.stats { ds.clone() } else { ds.restandardize(&ck.stats) };
        let own: Vec<f64> = match ck.model.config.fixed_beta {
            Some(b) if matches!(ck.model.config.mode, Mode::Msfair) => vec![b],
            _ => betas.clone(),
        };
        let pairs: Vec<(&Model, f64)> = own.iter().map(|&b| (&ck.model, b)).collect();
        for fp in pareto_front(&pairs, &ds, &cfg, a.seed)? {
            w.push_str(&format!("{i},{},{},{}\n", fp.beta, fp.a_s, fp.a_y));
        }
    }
    fs::write(&a.out, &w)?;
    write_manifest(&manifest_for(&a.out), "pareto", a, json!({ "betas": betas, "classifier": cfg }), &inputs, std::slice::from_ref(&a.out))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_interpret(a: &InterpretArgs) -> CliResult<()> {
    for (name, b) in [("--beta-hi", a.beta_hi), ("--beta-lo", a.beta_lo)] {
        if !(0.0..=1.0).contains(&b) {
            return Err(CliError::usage(format!("{name} {b} is outside [0, 1]")));
        }
    }
    let (ck_path, ck) = load_ckpt(&a.ckpt)?;
    let (ds_path, ds) = load_eval(&a.dataset, &ck)?;
    let report = unmasked_bit_correlations(&ck.model, &ds, a.beta_hi, a.beta_lo)?;
    report.write_csv(fs::File::create(&a.out)?)?;
    let mut outs = vec![a.out.clone()];
    if let Some(p) = &a.disparity {
        let codes = ck.model.codes(ds.features.view(), a.beta_lo)?;
        let s = ds.sensitive_index();
        let mut w = String::from("dim,position,visible_fraction,disparity\n");
        for j in 0..ck.model.latent_dim() {
            for l in 0..ck.model.max_bits() {
                let (bits, groups): (Vec<u8>, Vec<usize>) =
                    codes.iter().zip(&s).filter(|(c, _)| c.mask()[[j, l]] == 1).map(|(c, &g)| (c.bits()[[j, l]], g)).unzip();
                let frac = bits.len() as f64 / codes.len().max(1) as f64;
                let disp = if bits.is_empty() { String::new() } else { bit_disparity(&bits, &groups, ds.d_s())?.value.to_string() };
                w.push_str(&format!("{j},{},{frac},{disp}\n", l + 1));
            }
        }
        fs::write(p, w)?;
        outs.push(p.clone());
    }
    write_manifest(&manifest_for(&a.out), "interpret", a, json!({ "empty": report.empty }), &[ck_path, ds_path], &outs)?;
    if report.empty {
        println!("no bits become visible between beta {} and {}", a.beta_hi, a.beta_lo);
    }
    Ok(())
}

fn cmd_oracle(a: &SweepArgs) -> CliResult<()> {
    if a.nx == 0 || a.nx > info::MAX_X || a.ns == 0 || a.ns > info::MAX_S || a.nz == 0 || a.nz > info::MAX_Z {
        return Err(CliError::usage(format!(
            "alphabet sizes must be in 1..={}, 1..={}, 1..={}",
            info::MAX_X,
            info::MAX_S,
            info::MAX_Z
        )));
    }
    let mut rng = substream(a.seed, "oracle");
    let joint = FiniteJoint::random(a.nx, a.ns, &mut rng)?;
    let points = info::frontier_scan(&joint, a.samples, a.nz, &mut rng)?;
    let mut w = String::from("distortion,rate,unfairness,residual\n");
    for p in &points {
        w.push_str(&format!("{},{},{},{}\n", p.distortion, p.rate, p.unfairness, p.residual));
    }
    fs::write(&a.out, w)?;
    let worst = points.iter().map(|p| p.residual).fold(0.0, f64::max);
    let (d, i) = info::fair_limit_check(&joint)?;
    let resolved = json!({ "max_residual": worst, "h_x_given_s": joint.h_x_given_s(), "fair_limit": [d, i] });
    write_manifest(&manifest_for(&a.out), "oracle sweep", a, resolved, &[], std::slice::from_ref(&a.out))?;
    println!("max residual {worst:e} over {} encoders", points.len());
    Ok(())
}

fn cmd_serve(a: &ServeArgs) -> CliResult<()> {
    let (_, ck) = load_ckpt(&a.ckpt)?;
    let (_, ds) = load_eval(&a.data, &ck)?;
    if a.beta_grid < 2 {
        return Err(CliError::usage("--beta-grid needs at least 2 points"));
    }
    let options = ServeOptions {
        grid: sofair_service::uniform_grid(a.beta_grid),
        sample_rows: a.sample_rows,
        protocol: protocol(&a.audit),
        cors_origin: a.cors_origin.clone(),
        ..ServeOptions::default()
    };
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| CliError::usage(format!("bad address {}:{}: {e}", a.host, a.port)))?;
    let state = ServeState::build(ck, ds, options)?;
    eprintln!("serving on http://{addr}");
    sofair_service::run(state, addr)?;
    Ok(())
}
