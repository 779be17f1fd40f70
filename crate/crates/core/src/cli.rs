//! Command-line front end: labeling runs, resume, synthetic tasks,
//! brute-force verification and evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::consistency::{FixIterations, LinkSet};
use crate::data::{self, Dataset, LabelSpace};
use crate::harness::{self, HarnessError};
use crate::predictor::synthetic::oracle_for;
use crate::predictor::{
    BackendConfig, MajorityOracle, OracleMode, Predictor, RemoteBackend, SyntheticTaskSpec,
    UniformOracle,
};
use crate::scorer::{Scorer, ScoringMode};
use crate::search::{
    read_checkpoint, write_atomic, Checkpoint, CheckpointError, InitRegime, Search, SearchConfig,
    SearchError, SearchSnapshot, CHECKPOINT_FORMAT,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATASET: i32 = 3;
pub const EXIT_BACKEND: i32 = 4;
pub const EXIT_CHECKPOINT: i32 = 5;

/// A failure carrying the exit status it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::new(EXIT_CONFIG, e.to_string())
}

fn dataset_err(e: impl std::fmt::Display) -> Failure {
    Failure::new(EXIT_DATASET, e.to_string())
}

impl From<SearchError> for Failure {
    fn from(e: SearchError) -> Self {
        let code = match &e {
            SearchError::Config(_) | SearchError::Init(_) => EXIT_CONFIG,
            SearchError::Predictor(_) => EXIT_BACKEND,
            SearchError::Checkpoint(_) => EXIT_CHECKPOINT,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Failure::new(EXIT_CHECKPOINT, e.to_string())
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let code = match &e {
            HarnessError::Predictor(_) => EXIT_BACKEND,
            HarnessError::Data(_) => EXIT_DATASET,
            _ => EXIT_CONFIG,
        };
        Failure::new(code, e.to_string())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

/// Which predictor a run talks to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    #[default]
    Remote,
    Planted,
    Majority,
    NonSalient,
    Uniform,
}

impl std::str::FromStr for PredictorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "remote" => Ok(Self::Remote),
            "planted" | "planted_concept" => Ok(Self::Planted),
            "majority" | "majority_bias" => Ok(Self::Majority),
            "non_salient" | "non-salient" => Ok(Self::NonSalient),
            "uniform" => Ok(Self::Uniform),
            other => Err(format!("unknown predictor `{other}`")),
        }
    }
}

/// Contents of the TOML config file: search parameters at top level plus
/// predictor selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub search: SearchConfig,
    pub labels: Vec<String>,
    pub predictor: PredictorKind,
    /// Synthetic task behind an oracle predictor.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<SyntheticTaskSpec>,
    pub backend: BackendConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            search: SearchConfig::default(),
            labels: LabelSpace::default().tokens().to_vec(),
            predictor: PredictorKind::default(),
            task: None,
            backend: BackendConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    pub fn label_space(&self) -> CliResult<LabelSpace> {
        LabelSpace::new(self.labels.iter().cloned()).map_err(config_err)
    }

    pub fn build_predictor(&self) -> CliResult<Box<dyn Predictor>> {
        let smoothing = self.task.as_ref().map_or(1.0, |t| t.smoothing);
        let task = |mode: OracleMode| -> CliResult<SyntheticTaskSpec> {
            let mut spec = self.task.clone().ok_or_else(|| {
                config_err("oracle predictors need a [task] table (see `icm synth`)")
            })?;
            spec.mode = mode;
            Ok(spec)
        };
        Ok(match self.predictor {
            PredictorKind::Remote => Box::new(RemoteBackend::new(self.backend.clone())),
            PredictorKind::Uniform => Box::new(UniformOracle::new()),
            PredictorKind::Majority => Box::new(MajorityOracle::new(smoothing)),
            PredictorKind::Planted => {
                oracle_for(&task(OracleMode::PlantedConcept)?).map_err(config_err)?
            }
            PredictorKind::NonSalient => {
                oracle_for(&task(OracleMode::NonSalient)?).map_err(config_err)?
            }
        })
    }
}

#[derive(Debug, Parser)]
#[command(name = "icm", version, about = "Label a dataset without supervision by maximizing internal coherence")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the search and write labeled records.
    Label(LabelArgs),
    /// Continue an interrupted run from its checkpoint.
    Resume(ResumeArgs),
    /// Generate a synthetic task and a matching config.
    Synth(SynthArgs),
    /// Enumerate every assignment of a small dataset and print the optimum.
    Bruteforce(BruteforceArgs),
    /// Score a labels file against golden labels.
    Eval(EvalArgs),
}

#[derive(Debug, Args, Default)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub k_init: Option<usize>,
    #[arg(long)]
    pub t0: Option<f64>,
    #[arg(long)]
    pub t_min: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub context_budget: Option<usize>,
    #[arg(long)]
    pub weight_factor: Option<f64>,
    /// exact or cached
    #[arg(long)]
    pub scoring: Option<ScoringMode>,
    /// random, golden or worst
    #[arg(long)]
    pub init: Option<InitRegime>,
    /// Repair iterations per step; 0 disables repair.
    #[arg(long)]
    pub fix_iterations: Option<usize>,
    /// Drop the inconsistency term and repair (ablation).
    #[arg(long)]
    pub no_consistency: bool,
    /// remote, planted, majority, non_salient or uniform
    #[arg(long)]
    pub oracle: Option<PredictorKind>,
    /// Use the remote backend at this base URL.
    #[arg(long)]
    pub backend_url: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let s = &mut cfg.search;
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = self.$field.clone() {
                    s.$field = v;
                }
            };
        }
        set!(seed);
        set!(alpha);
        set!(k_init);
        set!(t0);
        set!(t_min);
        set!(beta);
        set!(context_budget);
        set!(weight_factor);
        set!(init);
        if let Some(v) = self.iterations {
            s.iterations = Some(v);
        }
        if let Some(v) = self.scoring {
            s.scoring_mode = v;
        }
        if let Some(v) = self.fix_iterations {
            s.fix_iterations = FixIterations::Fixed(v);
        }
        if self.no_consistency {
            s.consistency_term = false;
        }
        if let Some(url) = &self.backend_url {
            cfg.backend.base_url = url.clone();
            cfg.predictor = PredictorKind::Remote;
        }
        if let Some(model) = &self.model {
            cfg.backend.model_name = model.clone();
        }
        if let Some(kind) = self.oracle {
            cfg.predictor = kind;
        }
    }
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Defaults to `<out>.checkpoint.json`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Run manifest log; defaults to `<out>.manifest.jsonl`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Write the per-step trace as JSONL.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Write the structured report as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    /// Stop after this many iterations, leaving a resumable checkpoint.
    #[arg(long, hide = true)]
    pub halt_after: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ResumeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, hide = true)]
    pub halt_after: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Dataset output; the config goes next to it as `<out>.toml`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// planted, majority or non_salient
    #[arg(long, default_value = "planted")]
    pub mode: OracleMode,
    #[arg(long, default_value_t = 0.5)]
    pub link_fraction: f64,
    #[arg(long, default_value_t = 1.0)]
    pub smoothing: f64,
    #[arg(long, default_value_t = 0.0)]
    pub contrary_weight: f64,
    /// Forbid both claims of a pair being False as well.
    #[arg(long)]
    pub exclusive_pairs: bool,
}

#[derive(Debug, Args)]
pub struct BruteforceArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Labeled records as written by `icm label`.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// A trace written by `icm label --trace`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    AbortedResumable,
    Failed,
}

/// One line of the append-only run log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub dataset: PathBuf,
    pub dataset_digest: String,
    pub predictor: String,
    pub config: RunConfig,
    pub started_at: f64,
    pub finished_at: f64,
    pub iterations: u64,
    pub forward_passes: u64,
    pub outcome: Outcome,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Run-level details kept inside the checkpoint so `resume` needs no flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunMeta {
    dataset: PathBuf,
    out: PathBuf,
    manifest: PathBuf,
    trace: Option<PathBuf>,
    report: Option<PathBuf>,
    config: RunConfig,
}

pub fn file_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, contents: &[u8]) -> CliResult {
    fs::write(path, contents).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn load_dataset(path: &Path, space: LabelSpace) -> CliResult<(Dataset, String)> {
    let bytes = fs::read(path).map_err(|e| dataset_err(format!("{}: {e}", path.display())))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|e| dataset_err(format!("{}: {e}", path.display())))?;
    let ds = data::parse_dataset(&text, space)
        .map_err(|e| dataset_err(format!("{}: {e}", path.display())))?;
    Ok((ds, file_digest(&bytes)))
}

fn effective_config(config: Option<&Path>, overrides: &Overrides) -> CliResult<RunConfig> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    overrides.apply(&mut cfg);
    cfg.search.validate().map_err(config_err)?;
    Ok(cfg)
}

fn append_manifest(path: &Path, manifest: &RunManifest) {
    let line = serde_json::to_string(manifest).expect("manifest serializes");
    let res = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .and_then(|mut f| writeln!(f, "{line}"));
    if let Err(e) = res {
        log::warn!("could not append run manifest to {}: {e}", path.display());
    }
}

/// Parses arguments and runs a command, returning the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Label(a) => cmd_label(a),
        Command::Resume(a) => cmd_resume(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Bruteforce(a) => cmd_bruteforce(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn cmd_label(args: LabelArgs) -> CliResult {
    let cfg = effective_config(args.config.as_deref(), &args.overrides)?;
    let (dataset, digest) = load_dataset(&args.dataset, cfg.label_space()?)?;
    let meta = RunMeta {
        dataset: args.dataset.clone(),
        manifest: args
            .manifest
            .clone()
            .unwrap_or_else(|| with_suffix(&args.out, ".manifest.jsonl")),
        out: args.out.clone(),
        trace: args.trace.clone(),
        report: args.report.clone(),
        config: cfg,
    };
    let checkpoint = args
        .checkpoint
        .unwrap_or_else(|| with_suffix(&args.out, ".checkpoint.json"));
    drive("label", &dataset, &digest, meta, &checkpoint, None, args.halt_after)
}

fn cmd_resume(args: ResumeArgs) -> CliResult {
    let cp = read_checkpoint(&args.checkpoint)?;
    let meta: RunMeta = serde_json::from_value(cp.meta.clone())
        .map_err(|e| CheckpointError::Corrupt(format!("run metadata: {e}")))?;
    let (dataset, digest) = load_dataset(&meta.dataset, meta.config.label_space()?)?;
    cp.verify_digest(&digest)?;
    drive(
        "resume",
        &dataset,
        &digest,
        meta,
        &args.checkpoint,
        Some(cp.snapshot),
        args.halt_after,
    )
}

fn drive(
    command: &str,
    dataset: &Dataset,
    digest: &str,
    meta: RunMeta,
    checkpoint: &Path,
    snapshot: Option<SearchSnapshot>,
    halt_after: Option<u64>,
) -> CliResult {
    let started = now();
    let clock = Instant::now();
    let cfg = meta.config.clone();
    let predictor = cfg.build_predictor()?;
    let links = LinkSet::from_dataset(dataset);
    log::info!(
        "{command}: {} examples, {} links, predictor {}",
        dataset.len(),
        links.len(),
        predictor.describe()
    );

    let mut manifest = RunManifest {
        command: command.to_owned(),
        dataset: meta.dataset.clone(),
        dataset_digest: digest.to_owned(),
        predictor: predictor.describe(),
        config: cfg.clone(),
        started_at: started,
        finished_at: 0.0,
        iterations: 0,
        forward_passes: 0,
        outcome: Outcome::Failed,
        error: None,
    };
    let meta_value = serde_json::to_value(&meta).expect("metadata serializes");
    let mut sink = |snap: &SearchSnapshot| {
        let cp = Checkpoint {
            format: CHECKPOINT_FORMAT,
            dataset_digest: digest.to_owned(),
            meta: meta_value.clone(),
            snapshot: snap.clone(),
        };
        let bytes = serde_json::to_vec(&cp).expect("checkpoint serializes");
        write_atomic(checkpoint, &bytes)
    };

    let mut search = match snapshot {
        Some(s) => Search::resume(dataset, &links, predictor.as_ref(), s),
        None => Search::new(dataset, &links, predictor.as_ref(), cfg.search.clone()),
    }
    .map_err(Failure::from)?;

    let stop = halt_after.unwrap_or(u64::MAX);
    let result = search
        .run_until(stop, &mut sink)
        .map_err(Failure::from)
        .and_then(|()| {
            if search.is_finished() {
                search.complete_assignment().map(Some).map_err(Failure::from)
            } else {
                Ok(None)
            }
        });
    manifest.finished_at = now();
    manifest.iterations = search.iteration();
    manifest.forward_passes = search.forward_passes();

    match result {
        Err(f) => {
            manifest.outcome = if f.code == EXIT_BACKEND && checkpoint.exists() {
                Outcome::AbortedResumable
            } else {
                Outcome::Failed
            };
            manifest.error = Some(f.message.clone());
            append_manifest(&meta.manifest, &manifest);
            if manifest.outcome == Outcome::AbortedResumable {
                log::error!("run aborted; resume with `icm resume --checkpoint {}`", checkpoint.display());
            }
            Err(f)
        }
        Ok(None) => {
            manifest.outcome = Outcome::AbortedResumable;
            append_manifest(&meta.manifest, &manifest);
            log::info!(
                "halted at iteration {}; checkpoint {}",
                search.iteration(),
                checkpoint.display()
            );
            Ok(())
        }
        Ok(Some(_)) => {
            write_file(&meta.out, data::serialize_labels(dataset, search.assignment()).as_bytes())?;
            if let Some(path) = &meta.trace {
                let mut text = String::new();
                for r in search.trace() {
                    text.push_str(&serde_json::to_string(r).expect("trace serializes"));
                    text.push('\n');
                }
                write_file(path, text.as_bytes())?;
            }
            let mut report = harness::run_report(search.trace(), search.assignment(), dataset, None);
            report.wall_clock_secs = Some(clock.elapsed().as_secs_f64());
            if let Some(path) = &meta.report {
                write_file(path, report.to_json().as_bytes())?;
            }
            print!("{}", report.summary());
            manifest.outcome = Outcome::Completed;
            append_manifest(&meta.manifest, &manifest);
            Ok(())
        }
    }
}

fn cmd_synth(args: SynthArgs) -> CliResult {
    let spec = SyntheticTaskSpec {
        size: args.size,
        planted_seed: args.seed,
        mode: args.mode,
        smoothing: args.smoothing,
        link_fraction: args.link_fraction,
        contrary_weight: args.contrary_weight,
        exclusive_pairs: args.exclusive_pairs,
    };
    let (dataset, _) = harness::generate_synthetic_task(&spec)?;
    write_file(&args.out, data::serialize_dataset(&dataset).as_bytes())?;
    let cfg = RunConfig {
        predictor: match spec.mode {
            OracleMode::PlantedConcept => PredictorKind::Planted,
            OracleMode::MajorityBias => PredictorKind::Majority,
            OracleMode::NonSalient => PredictorKind::NonSalient,
        },
        task: Some(spec),
        ..Default::default()
    };
    let config_path = with_suffix(&args.out, ".toml");
    let text = toml::to_string(&cfg).map_err(config_err)?;
    write_file(&config_path, text.as_bytes())?;
    println!("dataset={}", args.out.display());
    println!("config={}", config_path.display());
    Ok(())
}

fn cmd_bruteforce(args: BruteforceArgs) -> CliResult {
    let mut cfg = effective_config(args.config.as_deref(), &args.overrides)?;
    cfg.search.scoring_mode = ScoringMode::Exact;
    if cfg.predictor == PredictorKind::Remote {
        return Err(config_err("brute force needs an oracle predictor"));
    }
    let (dataset, _) = load_dataset(&args.dataset, cfg.label_space()?)?;
    let predictor = cfg.build_predictor()?;
    let links = LinkSet::from_dataset(&dataset);
    let scorer = Scorer::new(&dataset, &links, predictor.as_ref(), cfg.search.scorer_config());
    let (best, score) = harness::brute_force_optimum(&dataset, &scorer)?;
    println!("utility={:.12}", score.utility);
    println!("mutual_predictability={:.12}", score.mutual_predictability);
    println!("inconsistency={}", score.inconsistency);
    let space = dataset.label_space();
    let labels: BTreeMap<&str, &str> = (0..dataset.len())
        .map(|i| {
            (
                dataset.example(i).id.as_str(),
                space.token(best.get(i).expect("complete")),
            )
        })
        .collect();
    for (id, token) in labels {
        println!("{id} {token}");
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CliResult {
    let cfg = effective_config(args.config.as_deref(), &Overrides::default())?;
    let space = cfg.label_space()?;
    let (dataset, _) = load_dataset(&args.dataset, space.clone())?;
    let text = fs::read_to_string(&args.labels)
        .map_err(|e| dataset_err(format!("{}: {e}", args.labels.display())))?;
    let labels = data::parse_labels(&text, &space).map_err(dataset_err)?;
    let assignment = data::assignment_from_map(&dataset, &labels).map_err(dataset_err)?;
    let trace = match &args.trace {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| dataset_err(format!("{}: {e}", p.display())))?;
            text.lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| dataset_err(format!("{}: {e}", p.display())))?
        }
        None => Vec::new(),
    };
    match data::accuracy(&assignment, &dataset) {
        Ok(acc) => println!("accuracy={acc:.6}"),
        Err(e) => log::warn!("accuracy unavailable: {e}"),
    }
    print!(
        "{}",
        harness::run_report(&trace, &assignment, &dataset, None).summary()
    );
    Ok(())
}
