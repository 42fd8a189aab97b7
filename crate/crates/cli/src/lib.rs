//! Command implementations behind the `diffex` binary. Each command writes
//! its primary output to the given writer and returns a process exit code:
//! 0 success, 1 domain findings or failures, 2 usage or transport errors.

use std::collections::BTreeSet;
use std::io::{self, Write};
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use diffex_core::backend::conformance::{run_conformance, Probe};
use diffex_core::backend::remote::TOKEN_ENV;
use diffex_core::backend::{ServerHandle, SyntheticBackend};
use diffex_core::corpus::vlm::IngestError;
use diffex_core::corpus::{build_vlm_prompt, ingest_vlm_response, VlmPromptSpec};
use diffex_core::report::export_manifest;
use diffex_core::scoring::ScoreError;
use diffex_core::search::{ExpansionMode, RankedExplanations, ThresholdScope};
use diffex_core::{
    connect_remote_backend, load_corpus, make_synthetic_backend, render, serve, top_k, validate_corpus, BackendError,
    BackendSession, BeamConfig, Corpus, CorpusError, EditParams, ExplanationReport, Format, RemoteConfig, ScoreCache, ScoreMode,
    ScoringConfig, SearchError, SyntheticWorld,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failure(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Search(#[from] SearchError),
}

fn backend_code(e: &BackendError) -> i32 {
    match e {
        BackendError::Protocol { .. } => 1,
        _ => 2,
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failure(_) => 1,
            CliError::Backend(e) => backend_code(e),
            CliError::Search(e) => match e {
                SearchError::Config(_) | SearchError::Score(ScoreError::Config(_)) => 2,
                SearchError::Score(ScoreError::Backend(b)) | SearchError::Score(ScoreError::Partial { source: b, .. }) => {
                    backend_code(b)
                }
                SearchError::EmptyCorpus | SearchError::BoundExceeded { .. } => 1,
            },
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "diffex", version, about = "Hierarchical counterfactual explanation search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Corpus utilities.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Beam search over the corpus hierarchy.
    Discover(RunFlags),
    /// Beam search over combinations of chosen semantics.
    Joint(JointArgs),
    /// Serve a synthetic world over the backend wire protocol.
    ServeSynthetic(ServeArgs),
    /// Run the backend conformance checks against a world or endpoint.
    Conformance(ConformanceArgs),
}

#[derive(Debug, Subcommand)]
pub enum CorpusCommand {
    /// Check a corpus file and print its findings.
    Validate { path: PathBuf },
    /// Build a corpus from a saved VLM keyword response.
    FromVlm {
        response: PathBuf,
        #[arg(long)]
        domain: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the keyword-extraction prompt for a domain.
    Prompt {
        #[arg(long)]
        domain: String,
        /// Sample attribute names, repeatable.
        #[arg(long = "attribute", required = true)]
        attributes: Vec<String>,
    },
}

/// A threshold flag value: a number, or `none`/`-inf` to admit everything.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdArg(pub Option<f64>);

impl FromStr for ThresholdArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "-inf" | "-infinity" => Ok(ThresholdArg(None)),
            other => match other.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(ThresholdArg(Some(v))),
                _ => Err(format!("expected a finite number or 'none', got {s:?}")),
            },
        }
    }
}

fn parse_mode(s: &str) -> Result<ExpansionMode, String> {
    match s {
        "refine" => Ok(ExpansionMode::Refine),
        "augment" => Ok(ExpansionMode::Augment),
        _ => Err(format!("expected refine or augment, got {s:?}")),
    }
}

fn parse_score_mode(s: &str) -> Result<ScoreMode, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|_| {
        format!("expected mean_signed_delta, mean_abs_delta or mean_edited_score, got {s:?}")
    })
}

/// Flags shared by the search commands. Each one overrides the matching
/// config field.
#[derive(Debug, Clone, Default, Args)]
pub struct RunFlags {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, conflicts_with = "world")]
    pub backend_url: Option<String>,
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long)]
    pub beam_width: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub threshold: Option<ThresholdArg>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub depth: Option<u32>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<ExpansionMode>,
    #[arg(long, value_parser = parse_score_mode)]
    pub score_mode: Option<ScoreMode>,
    #[arg(long)]
    pub target_class: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub images: Option<Vec<String>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub edit_threshold: Option<f64>,
    #[arg(long)]
    pub skip_steps: Option<u32>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<Format>,
}

#[derive(Debug, Clone, Args)]
pub struct JointArgs {
    #[command(flatten)]
    pub run: RunFlags,
    /// Seed semantics by id or unique label, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub seeds: Vec<String>,
    #[arg(long, default_value_t = 2)]
    pub max_combo: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
}

#[derive(Debug, Clone, Args)]
pub struct ConformanceArgs {
    #[arg(long, conflicts_with = "world", required_unless_present = "world")]
    pub backend_url: Option<String>,
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long)]
    pub image: String,
    /// Prompt fragment of a semantic the backend knows.
    #[arg(long)]
    pub semantic: String,
    #[arg(long)]
    pub target_class: String,
    #[arg(long, default_value = "")]
    pub domain: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSource {
    pub world: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteSource {
    pub url: String,
    #[serde(default)]
    pub max_in_flight: Option<usize>,
    #[serde(default)]
    pub timeout_ms: Option<u64>,
    #[serde(default)]
    pub retries: Option<u32>,
}

/// Where edits and classifications come from. Exactly one of the two shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BackendSource {
    World(WorldSource),
    Remote(RemoteSource),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub format: Option<Format>,
    #[serde(default)]
    pub manifest_path: Option<PathBuf>,
    #[serde(default)]
    pub cache_path: Option<PathBuf>,
}

/// On-disk run configuration. Relative paths are resolved against the
/// directory holding the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default)]
    pub backend: Option<BackendSource>,
    #[serde(default)]
    pub images: Vec<String>,
    #[serde(default)]
    pub target_class: Option<String>,
    #[serde(default)]
    pub score_mode: Option<ScoreMode>,
    #[serde(default)]
    pub beam_width: Option<usize>,
    /// Absent or null admits every root.
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub max_depth: Option<u32>,
    #[serde(default)]
    pub mode: Option<ExpansionMode>,
    #[serde(default)]
    pub threshold_scope: Option<ThresholdScope>,
    #[serde(default)]
    pub parallelism: Option<usize>,
    #[serde(default)]
    pub edit_threshold: Option<f64>,
    #[serde(default)]
    pub skipped_steps: Option<u32>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub classifier: Option<String>,
    #[serde(default)]
    pub top_k: Option<usize>,
    #[serde(default)]
    pub output: OutputConfig,
}

pub const DEFAULT_EDIT_THRESHOLD: f64 = 0.75;
pub const DEFAULT_CLASSIFIER: &str = "unnamed";

fn existing(path: PathBuf, what: &str) -> Result<PathBuf, CliError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("reading {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| usage(format!("parsing {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.corpus.as_mut().map(rebase);
        if let Some(BackendSource::World(w)) = cfg.backend.as_mut() {
            rebase(&mut w.world);
        }
        cfg.output.path.as_mut().map(rebase);
        cfg.output.manifest_path.as_mut().map(rebase);
        cfg.output.cache_path.as_mut().map(rebase);
        Ok(cfg)
    }

    /// Config file (if any) with the flags laid over it.
    pub fn from_flags(flags: &RunFlags) -> Result<Self, CliError> {
        let mut cfg = match &flags.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(p) = &flags.corpus {
            cfg.corpus = Some(p.clone());
        }
        match (&flags.world, &flags.backend_url) {
            (Some(_), Some(_)) => return Err(usage("--world and --backend-url are mutually exclusive")),
            (Some(w), None) => cfg.backend = Some(BackendSource::World(WorldSource { world: w.clone() })),
            (None, Some(u)) => {
                cfg.backend = Some(BackendSource::Remote(RemoteSource {
                    url: u.clone(),
                    max_in_flight: None,
                    timeout_ms: None,
                    retries: None,
                }))
            }
            (None, None) => {}
        }
        if let Some(v) = flags.beam_width {
            cfg.beam_width = Some(v);
        }
        if let Some(ThresholdArg(v)) = flags.threshold {
            cfg.threshold = v;
        }
        if let Some(v) = flags.epsilon {
            cfg.epsilon = Some(v);
        }
        if let Some(v) = flags.depth {
            cfg.max_depth = Some(v);
        }
        if let Some(v) = flags.mode {
            cfg.mode = Some(v);
        }
        if let Some(v) = flags.score_mode {
            cfg.score_mode = Some(v);
        }
        if let Some(v) = &flags.target_class {
            cfg.target_class = Some(v.clone());
        }
        if let Some(v) = &flags.images {
            cfg.images = v.clone();
        }
        if let Some(v) = flags.seed {
            cfg.seed = Some(v);
        }
        if let Some(v) = flags.edit_threshold {
            cfg.edit_threshold = Some(v);
        }
        if let Some(v) = flags.skip_steps {
            cfg.skipped_steps = Some(v);
        }
        if let Some(v) = &flags.out {
            cfg.output.path = Some(v.clone());
        }
        if let Some(v) = flags.format {
            cfg.output.format = Some(v);
        }
        Ok(cfg)
    }

    pub fn beam(&self) -> BeamConfig {
        let d = BeamConfig::default();
        BeamConfig {
            beam_width: self.beam_width.unwrap_or(d.beam_width),
            threshold: self.threshold,
            max_depth: self.max_depth,
            expansion_mode: self.mode.unwrap_or(d.expansion_mode),
            improvement_epsilon: self.epsilon.unwrap_or(d.improvement_epsilon),
            threshold_scope: self.threshold_scope.unwrap_or(d.threshold_scope),
            parallelism: self.parallelism.unwrap_or(d.parallelism),
        }
    }

    pub fn params(&self) -> Result<EditParams, CliError> {
        let mut p = EditParams::new(self.edit_threshold.unwrap_or(DEFAULT_EDIT_THRESHOLD), self.seed.unwrap_or(0))?;
        if let Some(s) = self.skipped_steps {
            p.skipped_steps = s;
        }
        Ok(p)
    }
}

/// Everything a search command needs, loaded and checked.
pub struct Prepared {
    pub config: RunConfig,
    pub corpus: Corpus,
    pub session: BackendSession,
    pub scoring: ScoringConfig,
    pub beam: BeamConfig,
    pub params: EditParams,
    pub cache: ScoreCache,
}

fn open_backend(source: &BackendSource) -> Result<(BackendSession, Vec<String>), CliError> {
    match source {
        BackendSource::World(w) => {
            let world = SyntheticWorld::load(existing(w.world.clone(), "world file")?)?;
            let images = world.images.keys().cloned().collect();
            Ok((make_synthetic_backend(world)?, images))
        }
        BackendSource::Remote(r) => {
            let d = RemoteConfig::default();
            let cfg = RemoteConfig {
                max_in_flight: r.max_in_flight.unwrap_or(d.max_in_flight),
                timeout: r.timeout_ms.map(Duration::from_millis).unwrap_or(d.timeout),
                retries: r.retries.unwrap_or(d.retries),
            };
            let token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
            Ok((connect_remote_backend(&r.url, token, cfg)?, vec![]))
        }
    }
}

impl Prepared {
    pub fn new(config: RunConfig) -> Result<Self, CliError> {
        let corpus_path = config.corpus.clone().ok_or_else(|| usage("no corpus given (--corpus or config)"))?;
        let corpus = load_corpus(existing(corpus_path, "corpus file")?).map_err(|e| match e {
            CorpusError::Invalid(_) => CliError::Failure(e.to_string()),
            _ => usage(e),
        })?;
        let source = config.backend.clone().ok_or_else(|| usage("no backend given (--world, --backend-url or config)"))?;
        let (session, world_images) = open_backend(&source)?;
        let images = if config.images.is_empty() { world_images } else { config.images.clone() };
        if images.is_empty() {
            return Err(usage("no sample images given (--images or config)"));
        }
        let target = config.target_class.clone().ok_or_else(|| usage("no target class given"))?;
        session.check_label(&target)?;
        let scoring = ScoringConfig::new(images, target).with_mode(config.score_mode.unwrap_or_default());
        let beam = config.beam();
        let params = config.params()?;
        let cache = match &config.output.cache_path {
            Some(p) if p.exists() => {
                ScoreCache::load_jsonl(p).map_err(|e| usage(format!("loading cache {}: {e}", p.display())))?
            }
            _ => ScoreCache::new(),
        };
        Ok(Prepared { config, corpus, session, scoring, beam, params, cache })
    }

    fn report(&self, ranked: &RankedExplanations) -> ExplanationReport {
        let classifier = self.config.classifier.clone().unwrap_or_else(|| DEFAULT_CLASSIFIER.into());
        let report = ExplanationReport::from_ranked(ranked, &self.corpus.domain, classifier, Some(self.session.value_space()));
        match self.config.top_k {
            Some(k) => top_k(&report, k),
            None => report,
        }
    }

    /// Renders the report to the output path (or `out`), then writes the
    /// manifest and cache when configured.
    pub fn finish(&self, ranked: &RankedExplanations, out: &mut dyn Write) -> Result<(), CliError> {
        let report = self.report(ranked);
        let bytes = render(&report, self.config.output.format.unwrap_or(Format::Json));
        match &self.config.output.path {
            Some(p) => write_file(p, &bytes)?,
            None => out.write_all(&bytes).map_err(usage)?,
        }
        if let Some(p) = &self.config.output.manifest_path {
            let keys: BTreeSet<&str> = report.rows.iter().map(|r| r.candidate.as_str()).collect();
            let manifest = export_manifest(&self.cache, &self.scoring.target_class, |e| keys.contains(e.candidate_key.as_str()))
                .map_err(|e| CliError::Failure(e.to_string()))?;
            write_file(p, &manifest.to_csv())?;
        }
        if let Some(p) = &self.config.output.cache_path {
            self.cache.save_jsonl(p).map_err(|e| usage(format!("writing cache {}: {e}", p.display())))?;
        }
        log::info!(
            "{} rows, {} edit calls, {} classify calls",
            report.rows.len(),
            ranked.trace.edit_calls,
            ranked.trace.classify_calls
        );
        Ok(())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| usage(format!("writing {}: {e}", path.display())))
}

pub fn cmd_corpus_validate(path: &Path, out: &mut dyn Write) -> Result<i32, CliError> {
    let report = match load_corpus(existing(path.to_path_buf(), "corpus file")?) {
        Ok(corpus) => validate_corpus(&corpus),
        Err(CorpusError::Invalid(report)) => report,
        Err(e) => return Err(usage(e)),
    };
    write!(out, "{report}").map_err(usage)?;
    Ok(if report.is_clean() { 0 } else { 1 })
}

pub fn cmd_corpus_from_vlm(response: &Path, domain: &str, out_path: &Path, out: &mut dyn Write) -> Result<i32, CliError> {
    let text = std::fs::read_to_string(response).map_err(|e| usage(format!("reading {}: {e}", response.display())))?;
    let outcome = match ingest_vlm_response(&text, domain) {
        Ok(o) => o,
        Err(e @ IngestError::NoGroups) => return Err(CliError::Failure(e.to_string())),
        Err(e) => return Err(usage(e)),
    };
    for w in &outcome.warnings {
        log::warn!("{w}");
    }
    outcome.corpus.save(out_path).map_err(usage)?;
    writeln!(
        out,
        "wrote {} ({} roots, {} nodes)",
        out_path.display(),
        outcome.corpus.roots.len(),
        outcome.corpus.node_count()
    )
    .map_err(usage)?;
    Ok(0)
}

pub fn cmd_corpus_prompt(domain: &str, attributes: &[String], out: &mut dyn Write) -> Result<i32, CliError> {
    let spec = VlmPromptSpec {
        domain_name: domain.into(),
        sample_attribute_names: attributes.to_vec(),
        example_image_refs: vec![],
        sample_groups: vec![],
    };
    let prompt = build_vlm_prompt(&spec).map_err(usage)?;
    writeln!(out, "{prompt}").map_err(usage)?;
    Ok(0)
}

pub fn cmd_discover(flags: &RunFlags, out: &mut dyn Write) -> Result<i32, CliError> {
    let p = Prepared::new(RunConfig::from_flags(flags)?)?;
    let ranked = diffex_core::discover(&p.corpus, &p.beam, &p.scoring, &p.session, &p.params, &p.cache)?;
    p.finish(&ranked, out)?;
    Ok(0)
}

pub fn cmd_joint(args: &JointArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    if args.max_combo < 2 {
        return Err(usage(format!("--max-combo must be at least 2, got {}", args.max_combo)));
    }
    let p = Prepared::new(RunConfig::from_flags(&args.run)?)?;
    let index = p.corpus.index();
    let seeds = args
        .seeds
        .iter()
        .map(|k| {
            let node = index.resolve(k).ok_or_else(|| usage(format!("seed {k:?} matches no single corpus node")))?;
            Ok(index.semantic(&node.id).expect("resolved node is indexed"))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let ranked = diffex_core::joint_search(&seeds, args.max_combo, &p.beam, &p.scoring, &p.session, &p.params, &p.cache)?;
    p.finish(&ranked, out)?;
    Ok(0)
}

/// Starts serving `world` and returns once the socket is bound.
pub fn start_serve_synthetic(world: &Path, addr: SocketAddr) -> Result<ServerHandle, CliError> {
    let world = SyntheticWorld::load(existing(world.to_path_buf(), "world file")?)?;
    let backend = Arc::new(SyntheticBackend::new(world)?);
    serve(backend, addr).map_err(|e| usage(format!("binding {addr}: {e}")))
}

/// Serves until the process is killed. Prints the listening URL first.
pub fn cmd_serve_synthetic(args: &ServeArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let handle = start_serve_synthetic(&args.world, SocketAddr::new(args.host, args.port))?;
    writeln!(out, "listening on {}", handle.url()).map_err(usage)?;
    out.flush().map_err(usage)?;
    handle.wait().map_err(|e| CliError::Failure(e.to_string()))?;
    Ok(0)
}

pub fn cmd_conformance(args: &ConformanceArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let source = match (&args.world, &args.backend_url) {
        (Some(w), _) => BackendSource::World(WorldSource { world: w.clone() }),
        (None, Some(u)) => {
            BackendSource::Remote(RemoteSource { url: u.clone(), max_in_flight: None, timeout_ms: None, retries: None })
        }
        (None, None) => return Err(usage("give --world or --backend-url")),
    };
    let (session, _) = open_backend(&source)?;
    let probe = Probe {
        image_id: args.image.clone(),
        domain: args.domain.clone(),
        semantic: diffex_core::backend::SemanticEdit::add(&args.semantic),
        target_class: args.target_class.clone(),
        params: EditParams::new(DEFAULT_EDIT_THRESHOLD, 0)?,
    };
    let report = run_conformance(&session, &probe);
    for c in &report.checks {
        let status = if c.passed { "pass" } else { "FAIL" };
        if c.detail.is_empty() {
            writeln!(out, "{status} {}", c.name).map_err(usage)?;
        } else {
            writeln!(out, "{status} {}: {}", c.name, c.detail).map_err(usage)?;
        }
    }
    Ok(if report.all_passed() { 0 } else { 1 })
}

/// Dispatches a parsed command line. Errors are reported on `err`.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let result = match &cli.command {
        Command::Corpus(CorpusCommand::Validate { path }) => cmd_corpus_validate(path, out),
        Command::Corpus(CorpusCommand::FromVlm { response, domain, out: path }) => {
            cmd_corpus_from_vlm(response, domain, path, out)
        }
        Command::Corpus(CorpusCommand::Prompt { domain, attributes }) => cmd_corpus_prompt(domain, attributes, out),
        Command::Discover(flags) => cmd_discover(flags, out),
        Command::Joint(args) => cmd_joint(args, out),
        Command::ServeSynthetic(args) => cmd_serve_synthetic(args, out),
        Command::Conformance(args) => cmd_conformance(args, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

/// Parses `args` (including the program name) and runs. Clap usage errors
/// exit 2.
pub fn run_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli, out, err),
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            if e.use_stderr() {
                2
            } else {
                0
            }
        }
    }
}

pub fn stdio_main() -> i32 {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    run_args(std::env::args_os(), &mut out, &mut io::stderr())
}
