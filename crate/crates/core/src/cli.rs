//! The `sgg` command line: scene generation, training, evaluation,
//! single-scene prediction and box-pair inspection.
//!
//! Exit codes: 0 success, 2 usage or missing input, 3 numeric failure,
//! 4 malformed or incompatible file.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::evaluation::{evaluate, predicate_counts, ranked_triplets, EvalConfig, TailThresholds};
use crate::geometry::{classify_relative_position, interaction_space, position_vector, Aabb};
use crate::scene::{
    generate_scene, load_scene, save_scene, scene_seed, GeneratorConfig, SceneError, SceneSample,
    Taxonomy,
};
use crate::training::{train, Checkpoint, TrainConfig, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_FORMAT: i32 = 4;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TAXONOMY_FILE: &str = "taxonomy.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const GRAPH_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "sgg", version, about = "3D scene graph generation on synthetic point-cloud scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate labeled synthetic scenes.
    Gen {
        #[arg(long)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Generator config (JSON, or TOML by extension).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a generated scene directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Training config (JSON, or TOML by extension).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a scene directory.
    Eval {
        /// Checkpoint file, or the training output directory holding it.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metric report JSON; a per-predicate CSV is written beside it.
        #[arg(long)]
        report: PathBuf,
        /// Scene directory whose predicate counts define the long-tail
        /// groups; the evaluated scenes are used when absent.
        #[arg(long)]
        group_data: Option<PathBuf>,
        #[arg(long, default_value_t = TailThresholds::default().head)]
        head_threshold: usize,
        #[arg(long, default_value_t = TailThresholds::default().body)]
        body_threshold: usize,
        /// Point resampling seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Predict the scene graph of one scene file.
    Predict {
        /// Checkpoint file, or the training output directory holding it.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Taxonomy file; defaults to the one beside the scene.
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        /// Minimum predicate probability of an emitted triplet.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the relative-position case, interaction space and position
    /// vector of a box pair.
    Geom {
        /// JSON `{"a": {"min": [..], "max": [..]}, "b": {...}}`.
        #[arg(long)]
        pair: PathBuf,
    },
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(m: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: m.into(),
        }
    }

    fn format(m: impl Into<String>) -> Self {
        Self {
            code: EXIT_FORMAT,
            message: m.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        let code = match e {
            SceneError::Io { .. } => EXIT_USAGE,
            SceneError::Config(_) => EXIT_USAGE,
            _ => EXIT_FORMAT,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = match e {
            TrainError::Config(_) | TrainError::EmptyDataset | TrainError::Io { .. } => EXIT_USAGE,
            TrainError::Numeric(_) | TrainError::NonFinite { .. } | TrainError::Diverged { .. } => {
                EXIT_NUMERIC
            }
            TrainError::Scene(_) | TrainError::Checkpoint(_) => EXIT_FORMAT,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::usage(format!("{}: {e}", path.display()))
}

/// One command invocation recorded in a directory's manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub taxonomy_hash: String,
    /// Seconds since the epoch from `SOURCE_DATE_EPOCH`, 0 when unset, so
    /// reruns write identical bytes.
    pub timestamp: u64,
}

/// The single manifest of an artifact directory, one record per command
/// that wrote into it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub runs: BTreeMap<String, RunRecord>,
}

pub fn tool_version() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

fn timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(0)
}

fn hash_json<S: Serialize>(value: &S) -> String {
    let canonical = serde_json::to_string(value).expect("config serializes");
    hex::encode(&Sha256::digest(canonical.as_bytes())[..8])
}

fn record_run(dir: &Path, command: &str, config_hash: String, seed: u64, taxonomy: &Taxonomy) -> Result<(), CliError> {
    let path = dir.join(MANIFEST_FILE);
    let mut manifest: RunManifest = match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text)
            .map_err(|e| CliError::format(format!("{}: {e}", path.display())))?,
        Err(_) => RunManifest::default(),
    };
    manifest.runs.insert(
        command.to_string(),
        RunRecord {
            version: tool_version(),
            config_hash,
            seed,
            taxonomy_hash: taxonomy.hash(),
            timestamp: timestamp(),
        },
    );
    write_text(&path, &(serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n"))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Reads a config as TOML when the extension is `.toml`, JSON otherwise.
pub fn read_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C, CliError> {
    let Some(path) = path else {
        return Ok(C::default());
    };
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let parsed = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

pub fn scene_file_name(index: usize) -> String {
    format!("scene_{index:05}.json")
}

/// Taxonomy and scenes of a generated directory, scenes in file-name order.
pub fn load_dataset(dir: &Path) -> Result<(Taxonomy, Vec<SceneSample>), CliError> {
    if !dir.is_dir() {
        return Err(CliError::usage(format!("{}: not a directory", dir.display())));
    }
    let taxonomy = Taxonomy::load(&dir.join(TAXONOMY_FILE))?;
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("scene_") && n.ends_with(".json"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::usage(format!("{}: no scene files", dir.display())));
    }
    let scenes = files
        .iter()
        .map(|p| load_scene(p, &taxonomy))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((taxonomy, scenes))
}

fn load_model(path: &Path, taxonomy: &Taxonomy) -> Result<(Checkpoint, crate::reasoning::Model, crate::numeric::ParamStore<f64>), CliError> {
    let file = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
    let ckpt = Checkpoint::load(&file)?;
    ckpt.check_taxonomy(taxonomy)?;
    let (model, store) = ckpt.restore::<f64>()?;
    Ok((ckpt, model, store))
}

pub fn cmd_gen(scenes: usize, seed: u64, config: Option<&Path>, out: &Path) -> Result<(), CliError> {
    if scenes == 0 {
        return Err(CliError::usage("--scenes must be at least 1"));
    }
    let cfg: GeneratorConfig = read_config(config)?;
    cfg.validate()?;
    let taxonomy = Taxonomy::synthetic();
    let samples = (0..scenes)
        .into_par_iter()
        .map(|i| generate_scene(scene_seed(seed, i as u64), &cfg))
        .collect::<Result<Vec<_>, _>>()?;
    create_dir(out)?;
    taxonomy.save(&out.join(TAXONOMY_FILE))?;
    for (i, s) in samples.iter().enumerate() {
        save_scene(s, &taxonomy, &out.join(scene_file_name(i)))?;
    }
    record_run(out, "gen", hash_json(&cfg), seed, &taxonomy)?;
    log::info!("wrote {scenes} scenes to {}", out.display());
    Ok(())
}

pub fn cmd_train(data: &Path, config: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let cfg: TrainConfig = read_config(config)?;
    cfg.validate()?;
    let (taxonomy, scenes) = load_dataset(data)?;
    create_dir(out)?;
    let log_path = out.join(TRAIN_LOG_FILE);
    let mut log_file = std::io::BufWriter::new(fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?);
    let mut write_failed = None;
    let trained = train::<f64>(&scenes, &taxonomy, &cfg, |l| {
        let line = serde_json::to_string(l).expect("log serializes");
        if let Err(e) = writeln!(log_file, "{line}") {
            write_failed.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_failed {
        return Err(io_err(&log_path, e));
    }
    log_file.flush().map_err(|e| io_err(&log_path, e))?;
    if let Some(last) = trained.logs.last() {
        if !last.loss.total.is_finite() {
            return Err(CliError {
                code: EXIT_NUMERIC,
                message: format!("final loss is {}", last.loss.total),
            });
        }
    }
    Checkpoint::from_trained(&trained, &taxonomy).save(&out.join(CHECKPOINT_FILE))?;
    record_run(out, "train", cfg.hash(), cfg.seed, &taxonomy)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    model: &Path,
    data: &Path,
    report: &Path,
    group_data: Option<&Path>,
    thresholds: TailThresholds,
    seed: u64,
) -> Result<(), CliError> {
    let (taxonomy, scenes) = load_dataset(data)?;
    let (ckpt, model, store) = load_model(model, &taxonomy)?;
    let counts = match group_data {
        Some(dir) => {
            let (t, s) = load_dataset(dir)?;
            if t.hash() != taxonomy.hash() {
                return Err(CliError::format("group data taxonomy differs from evaluated data"));
            }
            Some(predicate_counts(&s, t.num_predicates()))
        }
        None => None,
    };
    let predictions = scenes
        .iter()
        .map(|s| model.predict(&store, s, seed))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError {
            code: EXIT_NUMERIC,
            message: e.to_string(),
        })?;
    let config = EvalConfig {
        thresholds,
        ..EvalConfig::default()
    };
    let rep = evaluate(&predictions, &scenes, &taxonomy, &config, counts.as_deref())
        .map_err(|e| CliError::format(e.to_string()))?;
    let dir = parent_dir(report);
    create_dir(&dir)?;
    write_text(report, &rep.to_json())?;
    write_text(&report.with_extension("csv"), &rep.per_predicate_csv())?;
    let hash = hash_json(&(&config, hash_json(&ckpt.model_config), ckpt.epochs));
    record_run(&dir, "eval", hash, seed, &taxonomy)?;
    Ok(())
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictedEntity {
    pub id: u32,
    pub fine: usize,
    pub fine_score: f64,
    pub coarse: Option<usize>,
}

/// Predicted scene graph in the triplet-list style of scene files. Entity
/// references in `triplets` and `skeleton` are positions in `entities`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictedGraph {
    pub version: u32,
    pub taxonomy_hash: String,
    pub entities: Vec<PredictedEntity>,
    /// `[subject, object, predicate]`, best first.
    pub triplets: Vec<[usize; 3]>,
    /// Score of each triplet.
    pub scores: Vec<f64>,
    /// Ordered pairs the skeleton classifier keeps.
    pub skeleton: Vec<[usize; 2]>,
}

impl PredictedGraph {
    pub fn validate(&self, taxonomy: &Taxonomy) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::Schema(m));
        if self.version != GRAPH_VERSION {
            return bad(format!("graph version {}", self.version));
        }
        if self.taxonomy_hash != taxonomy.hash() {
            return Err(SceneError::TaxonomyMismatch {
                expected: taxonomy.hash(),
                found: self.taxonomy_hash.clone(),
            });
        }
        let n = self.entities.len();
        if self.triplets.len() != self.scores.len() {
            return bad("one score per triplet required".into());
        }
        for e in &self.entities {
            if e.fine >= taxonomy.num_fine() || e.coarse.is_some_and(|c| c >= taxonomy.num_coarse()) {
                return bad(format!("entity {} label out of range", e.id));
            }
            if !(0.0..=1.0).contains(&e.fine_score) {
                return bad(format!("entity {} score out of range", e.id));
            }
        }
        for t in &self.triplets {
            if t[0] >= n || t[1] >= n || t[0] == t[1] || t[2] >= taxonomy.num_predicates() {
                return bad(format!("invalid triplet {t:?}"));
            }
        }
        if self.scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return bad("triplet score out of range".into());
        }
        for e in &self.skeleton {
            if e[0] >= n || e[1] >= n || e[0] == e[1] {
                return bad(format!("invalid skeleton edge {e:?}"));
            }
        }
        Ok(())
    }
}

pub fn predict_graph(
    model: &crate::reasoning::Model,
    store: &crate::numeric::ParamStore<f64>,
    sample: &SceneSample,
    taxonomy: &Taxonomy,
    threshold: f64,
    seed: u64,
) -> Result<PredictedGraph, CliError> {
    let numeric = |e: String| CliError {
        code: EXIT_NUMERIC,
        message: e,
    };
    let p = model.predict(store, sample, seed).map_err(|e| numeric(e.to_string()))?;
    let entities = (0..sample.num_entities())
        .map(|i| {
            let row = p.fine_probs.row(i);
            let fine = crate::evaluation::ranking(row)[0];
            PredictedEntity {
                id: sample.instances[i].id,
                fine,
                fine_score: row[fine],
                coarse: p
                    .coarse_probs
                    .as_ref()
                    .map(|c| crate::evaluation::ranking(c.row(i))[0]),
            }
        })
        .collect();
    let pair_row: BTreeMap<(usize, usize), usize> =
        p.pairs.iter().enumerate().map(|(r, &pr)| (pr, r)).collect();
    let mut triplets = Vec::new();
    let mut scores = Vec::new();
    for t in ranked_triplets(&p).map_err(|e| numeric(e.to_string()))? {
        let r = pair_row[&(t.subject, t.object)];
        if p.predicate_probs.row(r)[t.predicate] >= threshold {
            triplets.push([t.subject, t.object, t.predicate]);
            scores.push(t.score);
        }
    }
    let skeleton = p
        .pairs
        .iter()
        .zip(&p.pre_gate)
        .filter(|(_, &g)| g >= 0.5)
        .map(|(&(i, j), _)| [i, j])
        .collect();
    Ok(PredictedGraph {
        version: GRAPH_VERSION,
        taxonomy_hash: taxonomy.hash(),
        entities,
        triplets,
        scores,
        skeleton,
    })
}

pub fn cmd_predict(
    model: &Path,
    scene: &Path,
    out: &Path,
    taxonomy: Option<&Path>,
    threshold: f64,
    seed: u64,
) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CliError::usage("--threshold must lie in [0, 1]"));
    }
    let tax_path = match taxonomy {
        Some(p) => p.to_path_buf(),
        None => parent_dir(scene).join(TAXONOMY_FILE),
    };
    let taxonomy = Taxonomy::load(&tax_path)?;
    let sample = load_scene(scene, &taxonomy)?;
    let (ckpt, model, store) = load_model(model, &taxonomy)?;
    let graph = predict_graph(&model, &store, &sample, &taxonomy, threshold, seed)?;
    graph.validate(&taxonomy)?;
    let dir = parent_dir(out);
    create_dir(&dir)?;
    write_text(out, &(serde_json::to_string(&graph).expect("graph serializes") + "\n"))?;
    let hash = hash_json(&(threshold, hash_json(&ckpt.model_config), ckpt.epochs));
    record_run(&dir, "predict", hash, seed, &taxonomy)?;
    Ok(())
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxPair {
    a: Aabb<f64>,
    b: Aabb<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GeomReport {
    pub case: String,
    pub relative_position: crate::geometry::RelativePosition,
    pub interaction_space: Aabb<f64>,
    pub position_vector: [f64; 12],
}

/// Geometry summary of the pair stored at `path`.
pub fn geom_report(path: &Path) -> Result<GeomReport, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let pair: BoxPair = serde_json::from_str(&text).map_err(|e| CliError::format(format!("{}: {e}", path.display())))?;
    let a = Aabb::new(pair.a.min, pair.a.max).map_err(|e| CliError::format(format!("box a: {e}")))?;
    let b = Aabb::new(pair.b.min, pair.b.max).map_err(|e| CliError::format(format!("box b: {e}")))?;
    let rel = classify_relative_position(&a, &b);
    Ok(GeomReport {
        case: rel.label(),
        relative_position: rel,
        interaction_space: interaction_space(&a, &b),
        position_vector: position_vector(&a, &b).0,
    })
}

pub fn cmd_geom(pair: &Path) -> Result<String, CliError> {
    let report = geom_report(pair)?;
    Ok(serde_json::to_string_pretty(&report).expect("report serializes"))
}

fn dispatch(cli: Cli) -> Result<Option<String>, CliError> {
    match cli.command {
        Command::Gen {
            scenes,
            seed,
            config,
            out,
        } => cmd_gen(scenes, seed, config.as_deref(), &out).map(|_| None),
        Command::Train { data, config, out } => cmd_train(&data, config.as_deref(), &out).map(|_| None),
        Command::Eval {
            model,
            data,
            report,
            group_data,
            head_threshold,
            body_threshold,
            seed,
        } => {
            if body_threshold > head_threshold {
                return Err(CliError::usage("--body-threshold exceeds --head-threshold"));
            }
            let t = TailThresholds {
                head: head_threshold,
                body: body_threshold,
            };
            cmd_eval(&model, &data, &report, group_data.as_deref(), t, seed).map(|_| None)
        }
        Command::Predict {
            model,
            scene,
            out,
            taxonomy,
            threshold,
            seed,
        } => cmd_predict(&model, &scene, &out, taxonomy.as_deref(), threshold, seed).map(|_| None),
        Command::Geom { pair } => cmd_geom(&pair).map(Some),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Output goes to stdout, diagnostics to stderr.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(Some(text)) => {
            println!("{text}");
            EXIT_OK
        }
        Ok(None) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
