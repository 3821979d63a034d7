//! Configuration, run manifests and the command drivers behind the CLI.
//!
//! A pipeline configuration is one JSON document. Every field can be
//! overridden by a dotted flag (`--pq.num_subspaces 4`). Inputs are read,
//! hashed and validated before the output directory is touched, so a bad
//! configuration never leaves partial output behind.

use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::certainty::{Scorer, ScorerConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, render_report, AblationConfig, EvalOptions};
use crate::format::{self, Qrels};
use crate::index::{build_index, write_run};
use crate::monitor::{AdaptivePolicy, Monitor, MonitorConfig};
use crate::par::Execution;
use crate::pq::{default_num_subspaces, train_codebook, PqCodebook, PqConfig};
use crate::sim::{generate_instance, DepthClass, SimConfig};
use crate::types::EmbeddingSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
    pub codebook: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { corpus: None, queries: None, qrels: None, codebook: None, out_dir: PathBuf::from("out") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PqSection {
    /// `None` picks the divisor of D closest to D/8.
    pub num_subspaces: Option<usize>,
    pub centroids_per_subspace: usize,
    pub kmeans_iters: usize,
    /// Corpus rows (even stride) used for training; 0 means all.
    pub train_rows: usize,
}

impl Default for PqSection {
    fn default() -> Self {
        PqSection { num_subspaces: None, centroids_per_subspace: 256, kmeans_iters: 25, train_rows: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorSection {
    pub threshold: f64,
    pub policy: AdaptivePolicy,
    pub window: usize,
    /// `monitor` exits with status 2 when the alert rate exceeds this.
    pub max_alert_rate: Option<f64>,
}

impl Default for MonitorSection {
    fn default() -> Self {
        let base = MonitorConfig::default();
        MonitorSection {
            threshold: base.threshold,
            policy: AdaptivePolicy::ExpandK { factor: 3, cap: 100 },
            window: base.window,
            max_alert_rate: None,
        }
    }
}

impl MonitorSection {
    pub fn monitor_config(&self) -> MonitorConfig {
        MonitorConfig { threshold: self.threshold, policy: self.policy, window: self.window }
    }
}

/// Simulation parameters; the seed comes from the top-level `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub num_wells: usize,
    pub docs_per_well: usize,
    pub queries_per_well: usize,
    pub dim: usize,
    pub variance_bands: [f64; 3],
    pub separation_factor: f64,
    pub placement_spread: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        let d = SimConfig::default();
        SimSection {
            num_wells: d.num_wells,
            docs_per_well: d.docs_per_well,
            queries_per_well: d.queries_per_well,
            dim: d.dim,
            variance_bands: d.variance_bands,
            separation_factor: d.separation_factor,
            placement_spread: d.placement_spread,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub bootstrap_resamples: usize,
    /// 0 disables timing, keeping the report reproducible byte for byte.
    pub timing_repetitions: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { bootstrap_resamples: 1000, timing_repetitions: 0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    #[default]
    Exact,
    Adc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub mode: SearchMode,
    pub k: Option<usize>,
    pub tag: String,
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection { mode: SearchMode::Exact, k: None, tag: "semcert".into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// The only source of randomness for every command.
    pub seed: u64,
    pub paths: Paths,
    pub pq: PqSection,
    pub scoring: ScorerConfig,
    pub monitor: MonitorSection,
    pub sim: SimSection,
    pub eval: EvalSection,
    pub search: SearchSection,
}

/// Splits `--a.b=v` / `--a.b v` tokens into `(path, raw value)` pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::config(arg.clone(), "expected a `--section.field` override"))?;
        let (path, value) = match key.split_once('=') {
            Some((p, v)) => (p.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| Error::config(key, "override is missing a value"))?;
                (key.to_string(), v.clone())
            }
        };
        if path.is_empty() || path.split('.').any(str::is_empty) {
            return Err(Error::config(path, "malformed configuration key"));
        }
        out.push((path, value));
    }
    Ok(out)
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn apply_override(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut parts: Vec<&str> = path.split('.').collect();
    let leaf = parts.pop().expect("non-empty path");
    let mut node = root;
    for part in parts {
        node = node
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| Error::config(path, "unknown configuration key"))?;
    }
    let obj = node.as_object_mut().ok_or_else(|| Error::config(path, "unknown configuration key"))?;
    // Tagged enums (e.g. `monitor.policy`) gain fields when their kind changes.
    if !obj.contains_key(leaf) && !obj.contains_key("kind") {
        return Err(Error::config(path, "unknown configuration key"));
    }
    obj.insert(leaf.to_string(), value);
    Ok(())
}

impl PipelineConfig {
    /// Defaults, then the JSON file, then the dotted overrides.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut root = serde_json::to_value(PipelineConfig::default())?;
        if let Some(path) = file {
            let text = fs::read_to_string(path)?;
            let patch: Value =
                serde_json::from_str(&text).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
            if !patch.is_object() {
                return Err(Error::config("config", "top level must be a JSON object"));
            }
            merge(&mut root, patch);
        }
        for (path, raw) in overrides {
            apply_override(&mut root, path, raw)?;
        }
        serde_json::from_value(root).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn sim_config(&self) -> SimConfig {
        let s = &self.sim;
        SimConfig {
            num_wells: s.num_wells,
            docs_per_well: s.docs_per_well,
            queries_per_well: s.queries_per_well,
            dim: s.dim,
            variance_bands: s.variance_bands,
            separation_factor: s.separation_factor,
            placement_spread: s.placement_spread,
            seed: self.seed,
        }
    }

    pub fn pq_config(&self, dim: usize) -> PqConfig {
        PqConfig {
            num_subspaces: self.pq.num_subspaces.unwrap_or_else(|| default_num_subspaces(dim)),
            centroids_per_subspace: self.pq.centroids_per_subspace,
            kmeans_iters: self.pq.kmeans_iters,
            seed: self.seed,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            bootstrap_resamples: self.eval.bootstrap_resamples,
            seed: self.seed,
            gate: self.monitor.monitor_config(),
            ablation: AblationConfig::standard(self.scoring.alpha, self.scoring.beta),
            timing_repetitions: self.eval.timing_repetitions,
        }
    }

    /// Field-level checks that need no input data.
    pub fn validate(&self) -> Result<()> {
        self.scoring.validate()?;
        self.monitor
            .monitor_config()
            .validate(self.scoring.k)
            .map_err(|e| prefix_field("monitor", e))?;
        if let Some(rate) = self.monitor.max_alert_rate {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::config("monitor.max_alert_rate", "must lie in [0, 1]"));
            }
        }
        self.sim_config().validate().map_err(|e| prefix_field("sim", e))?;
        if self.eval.bootstrap_resamples < 100 {
            return Err(Error::config("eval.bootstrap_resamples", "must be at least 100"));
        }
        if (1..3).contains(&self.eval.timing_repetitions) {
            return Err(Error::config("eval.timing_repetitions", "must be 0 or at least 3"));
        }
        if self.search.k == Some(0) {
            return Err(Error::config("search.k", "must be at least 1"));
        }
        Ok(())
    }
}

fn prefix_field(section: &str, e: Error) -> Error {
    match e {
        Error::Config { field, message } => Error::Config { field: format!("{section}.{field}"), message },
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl FileDigest {
    fn of(path: &Path, bytes: &[u8]) -> Self {
        FileDigest { path: path.display().to_string(), sha256: hex::encode(Sha256::digest(bytes)), bytes: bytes.len() as u64 }
    }
}

/// Provenance record written next to every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: PipelineConfig,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

/// Input bytes are hashed exactly as read.
struct Inputs {
    digests: Vec<FileDigest>,
}

impl Inputs {
    fn new() -> Self {
        Inputs { digests: Vec::new() }
    }

    fn read(&mut self, field: &str, path: Option<&PathBuf>) -> Result<Vec<u8>> {
        let path = path.ok_or_else(|| Error::config(field, "required by this command"))?;
        if !path.exists() {
            return Err(Error::config(field, format!("{} does not exist", path.display())));
        }
        let bytes = fs::read(path)?;
        self.digests.push(FileDigest::of(path, &bytes));
        Ok(bytes)
    }

    fn embeddings(&mut self, field: &str, path: Option<&PathBuf>) -> Result<EmbeddingSet> {
        format::decode_embeddings(&self.read(field, path)?)
    }

    /// Like [`Inputs::embeddings`] but a file without rows yields an empty set.
    fn embeddings_or_empty(&mut self, field: &str, path: Option<&PathBuf>, dim: usize) -> Result<EmbeddingSet> {
        match self.embeddings(field, path) {
            Err(Error::EmptyInput(_)) => EmbeddingSet::empty(dim),
            other => other,
        }
    }

    fn codebook(&mut self, path: Option<&PathBuf>) -> Result<PqCodebook> {
        format::decode_codebook(&self.read("paths.codebook", path)?)
    }

    fn qrels(&mut self, path: Option<&PathBuf>) -> Result<Qrels> {
        format::parse_qrels(&self.read("paths.qrels", path)?[..])
    }
}

/// Exclusive handle on an output directory, released on drop.
struct OutputDir {
    dir: PathBuf,
    lock: PathBuf,
    outputs: Vec<FileDigest>,
}

impl OutputDir {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let lock = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Error::State(format!("{} is locked by another run", dir.display())));
            }
            Err(e) => return Err(e.into()),
        }
        Ok(OutputDir { dir: dir.to_path_buf(), lock, outputs: Vec::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, bytes)?;
        self.outputs.push(FileDigest::of(&path, bytes));
        Ok(path)
    }

    fn finish(mut self, command: &str, config: &PipelineConfig, inputs: Inputs, started: u128) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            inputs: inputs.digests,
            outputs: std::mem::take(&mut self.outputs),
            started_unix_ms: started,
            finished_unix_ms: now_ms(),
        };
        let mut f = File::create(self.dir.join(format!("{command}.manifest.json")))?;
        serde_json::to_writer_pretty(&mut f, &manifest)?;
        f.write_all(b"\n")?;
        Ok(manifest)
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

/// Result of a command: its manifest and whether a configured budget was
/// exceeded (exit status 2).
#[derive(Clone, Debug)]
pub struct CommandOutcome {
    pub manifest: RunManifest,
    pub budget_exceeded: bool,
}

impl From<RunManifest> for CommandOutcome {
    fn from(manifest: RunManifest) -> Self {
        CommandOutcome { manifest, budget_exceeded: false }
    }
}

fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Dimension { expected, actual });
    }
    Ok(())
}

fn to_json_line<T: Serialize>(buf: &mut Vec<u8>, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *buf, value)?;
    buf.push(b'\n');
    Ok(())
}

fn to_json_pretty<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut buf = serde_json::to_vec_pretty(value)?;
    buf.push(b'\n');
    Ok(buf)
}

/// Trains a PQ codebook on the corpus and writes `codebook.scpq`.
pub fn cmd_train_pq(cfg: &PipelineConfig) -> Result<CommandOutcome> {
    let started = now_ms();
    cfg.validate()?;
    let mut inputs = Inputs::new();
    let corpus = inputs.embeddings("paths.corpus", cfg.paths.corpus.as_ref())?;
    let train = corpus.strided_sample(cfg.pq.train_rows)?;
    let pq = cfg.pq_config(corpus.dim());
    pq.validate(train.dim(), train.len()).map_err(|e| prefix_field("pq", e))?;

    let mut out = OutputDir::acquire(&cfg.paths.out_dir)?;
    log::info!("training {}x{} codebook on {} rows", pq.num_subspaces, pq.centroids_per_subspace, train.len());
    let cb = train_codebook(&train, &pq)?;
    out.write("codebook.scpq", &format::encode_codebook(&cb)?)?;
    Ok(out.finish("train-pq", cfg, inputs, started)?.into())
}

/// Scores every query and writes `scores.jsonl`, one record per query in
/// query-file order.
pub fn cmd_score(cfg: &PipelineConfig) -> Result<CommandOutcome> {
    let started = now_ms();
    cfg.validate()?;
    let mut inputs = Inputs::new();
    let corpus = inputs.embeddings("paths.corpus", cfg.paths.corpus.as_ref())?;
    let queries = inputs.embeddings_or_empty("paths.queries", cfg.paths.queries.as_ref(), corpus.dim())?;
    let cb = inputs.codebook(cfg.paths.codebook.as_ref())?;
    check_dim(cb.dim(), corpus.dim())?;
    check_dim(cb.dim(), queries.dim())?;

    let mut out = OutputDir::acquire(&cfg.paths.out_dir)?;
    let mut buf = Vec::new();
    if !queries.is_empty() {
        let index = build_index(corpus, None)?;
        let scorer = Scorer::new(&index, &cb, cfg.scoring)?;
        log::info!("scoring {} queries", queries.len());
        for score in scorer.assess_batch(&queries, Execution::default())? {
            to_json_line(&mut buf, &score)?;
        }
    }
    out.write("scores.jsonl", &buf)?;
    Ok(out.finish("score", cfg, inputs, started)?.into())
}

/// Retrieves the top-K for every query and writes a TREC run file.
pub fn cmd_search(cfg: &PipelineConfig) -> Result<CommandOutcome> {
    let started = now_ms();
    cfg.validate()?;
    let mut inputs = Inputs::new();
    let corpus = inputs.embeddings("paths.corpus", cfg.paths.corpus.as_ref())?;
    let queries = inputs.embeddings_or_empty("paths.queries", cfg.paths.queries.as_ref(), corpus.dim())?;
    check_dim(corpus.dim(), queries.dim())?;
    let cb = match cfg.search.mode {
        SearchMode::Adc => Some(inputs.codebook(cfg.paths.codebook.as_ref())?),
        SearchMode::Exact => None,
    };
    if let Some(cb) = &cb {
        check_dim(cb.dim(), corpus.dim())?;
    }
    let k = cfg.search.k.unwrap_or(cfg.scoring.k);

    let mut out = OutputDir::acquire(&cfg.paths.out_dir)?;
    let index = build_index(corpus, cb)?;
    let lists = match cfg.search.mode {
        SearchMode::Exact => index.batch_search(&queries, k, Execution::default())?,
        SearchMode::Adc => crate::par::try_map_range(Execution::default(), queries.len(), |i| {
            index.search_adc(queries.row(i), k)
        })?,
    };
    let pairs: Vec<(&str, &_)> = queries.ids().iter().map(String::as_str).zip(lists.iter()).collect();
    let mut buf = Vec::new();
    write_run(&mut buf, &pairs, &cfg.search.tag)?;
    out.write("run.trec", &buf)?;
    Ok(out.finish("search", cfg, inputs, started)?.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WellRecord {
    pub concept_id: String,
    /// Byte offset of this well's centroid row inside `centroids.scrt`.
    pub centroid_offset: u64,
    pub variance: f64,
    pub depth_class: DepthClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WellsFile {
    pub seed: u64,
    pub config: SimConfig,
    pub wells: Vec<WellRecord>,
}

/// Writes a synthetic gravity-well instance: corpus, queries, qrels,
/// centroids and well metadata.
pub fn cmd_simulate(cfg: &PipelineConfig) -> Result<CommandOutcome> {
    let started = now_ms();
    cfg.validate()?;
    let sim = cfg.sim_config();
    let instance = generate_instance(&sim)?;

    let mut out = OutputDir::acquire(&cfg.paths.out_dir)?;
    out.write("corpus.scrt", &format::encode_embeddings(&instance.corpus)?)?;
    out.write("queries.scrt", &format::encode_embeddings(&instance.queries)?)?;
    let mut qrels = Vec::new();
    format::write_qrels(&mut qrels, &instance.relevance)?;
    out.write("qrels.txt", &qrels)?;
    out.write("centroids.scrt", &format::encode_embeddings(&instance.centroid_set()?)?)?;
    let row_bytes = (sim.dim * 4) as u64;
    let wells = instance
        .wells
        .iter()
        .enumerate()
        .map(|(i, w)| WellRecord {
            concept_id: w.concept_id.clone(),
            centroid_offset: 16 + i as u64 * row_bytes,
            variance: w.variance,
            depth_class: w.depth_class,
        })
        .collect();
    out.write("wells.json", &to_json_pretty(&WellsFile { seed: cfg.seed, config: sim, wells })?)?;
    log::info!("simulated {} docs and {} queries", instance.corpus.len(), instance.queries.len());
    Ok(out.finish("simulate", cfg, Inputs::new(), started)?.into())
}

/// Evaluates retrieval and certainty against qrels; writes `report.json`
/// and `report.txt`.
pub fn cmd_eval(cfg: &PipelineConfig) -> Result<CommandOutcome> {
    let started = now_ms();
    cfg.validate()?;
    let mut inputs = Inputs::new();
    let corpus = inputs.embeddings("paths.corpus", cfg.paths.corpus.as_ref())?;
    let queries = inputs.embeddings("paths.queries", cfg.paths.queries.as_ref())?;
    let qrels = inputs.qrels(cfg.paths.qrels.as_ref())?;
    let cb = inputs.codebook(cfg.paths.codebook.as_ref())?;
    check_dim(cb.dim(), corpus.dim())?;
    check_dim(cb.dim(), queries.dim())?;

    let mut out = OutputDir::acquire(&cfg.paths.out_dir)?;
    let index = build_index(corpus, None)?;
    let scorer = Scorer::new(&index, &cb, cfg.scoring)?;
    let report = evaluate(&scorer, &queries, &qrels, &cfg.eval_options())?;
    out.write("report.json", &to_json_pretty(&report)?)?;
    out.write("report.txt", render_report(&report).as_bytes())?;
    log::info!("mean recall {:.4} over {} queries", report.mean_recall, report.queries);
    Ok(out.finish("eval", cfg, inputs, started)?.into())
}

/// Streams the queries through the monitor; writes `events.jsonl` and
/// `summary.json`. The budget is exceeded when the alert rate is above
/// `monitor.max_alert_rate`.
pub fn cmd_monitor(cfg: &PipelineConfig) -> Result<CommandOutcome> {
    let started = now_ms();
    cfg.validate()?;
    let mut inputs = Inputs::new();
    let corpus = inputs.embeddings("paths.corpus", cfg.paths.corpus.as_ref())?;
    let queries = inputs.embeddings("paths.queries", cfg.paths.queries.as_ref())?;
    let cb = inputs.codebook(cfg.paths.codebook.as_ref())?;
    check_dim(cb.dim(), corpus.dim())?;
    check_dim(cb.dim(), queries.dim())?;

    let mut out = OutputDir::acquire(&cfg.paths.out_dir)?;
    let index = build_index(corpus, None)?;
    let scorer = Scorer::new(&index, &cb, cfg.scoring)?;
    let mut monitor = Monitor::new(scorer, cfg.monitor.monitor_config())?;
    let events = monitor.process_stream(&queries, Execution::default())?;
    let mut buf = Vec::new();
    for (event, _) in &events {
        to_json_line(&mut buf, &event.record())?;
    }
    out.write("events.jsonl", &buf)?;
    let summary = monitor.summary()?;
    out.write("summary.json", &to_json_pretty(&summary)?)?;
    let budget_exceeded = cfg.monitor.max_alert_rate.is_some_and(|max| summary.alert_rate > max);
    if budget_exceeded {
        log::warn!("alert rate {:.4} exceeds the configured maximum", summary.alert_rate);
    }
    let manifest = out.finish("monitor", cfg, inputs, started)?;
    Ok(CommandOutcome { manifest, budget_exceeded })
}
