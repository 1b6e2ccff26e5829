//! The staged pipeline: train, embed, reduce, cluster, report.
//!
//! Every stage reads and writes plain files under the output directory.
//! `manifest.json` records the configuration, the seeds and, per stage, a
//! fingerprint of its inputs and the SHA-256 of each output. A stage whose
//! fingerprint and outputs are unchanged since the last run is skipped.
//!
//! ```text
//! <out>/train/checkpoint.bin      trained network
//! <out>/train/loss.csv            iteration,loss
//! <out>/embeddings.csv            source_id,class_label,e_1..e_L
//! <out>/points.csv                source_id,x,y   (t-SNE of the normalized embeddings)
//! <out>/tsne_kl.csv               iteration,kl
//! <out>/clusters.json             source_id -> {cluster, role}
//! <out>/cluster_summary.json      per-cluster size, class composition, purity
//! <out>/report/*.png, *.json      tiles, heatmaps, scatter plots, retrieval, evaluation
//! <out>/manifest.json
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::figures::{cluster_tiles, heatmap_grid, scatter_plot, tile_layout};
use super::retrieval::{nearest_neighbors, one_nn_accuracy, RetrievalResult};
use crate::contrastive::EmbeddingRecord;
use crate::error::{Error, Result};
use crate::explain::{explain_image, write_explanation, ExplainConfig};
use crate::imageops::{load_rgb, save_png};
use crate::io;
use crate::nn::{Checkpoint, Network};
use crate::reduce::{cluster_summary, dbscan, mean_purity, neighborhoods, tsne_reduce, DbscanConfig, TsneConfig};
use crate::tensor::Tensor;
use crate::trainer::{load_dataset, parse_kv, train, DatasetIndex, Split, TrainConfig, CHECKPOINT_FILE, LOSS_FILE};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const POINTS_FILE: &str = "points.csv";
pub const KL_FILE: &str = "tsne_kl.csv";
pub const CLUSTERS_FILE: &str = "clusters.json";
pub const SUMMARY_FILE: &str = "cluster_summary.json";
pub const EVALUATION_FILE: &str = "report/evaluation.json";
const TRAIN_DIR: &str = "train";
const REPORT_DIR: &str = "report";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub train: TrainConfig,
    pub tsne: TsneConfig,
    pub dbscan: DbscanConfig,
    pub explain: ExplainConfig,
    /// Neighbours listed per exemplar in `retrieval.json`.
    pub neighbors: usize,
    /// Side of one tile in the grid figures, in pixels.
    pub tile_size: usize,
    pub overlay_opacity: f32,
    pub scatter_size: u32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dataset: PathBuf::from("data"),
            out: PathBuf::from("mnpair-out"),
            train: TrainConfig::default(),
            tsne: TsneConfig::default(),
            dbscan: DbscanConfig::default(),
            explain: ExplainConfig::default(),
            neighbors: 9,
            tile_size: 64,
            overlay_opacity: 0.5,
            scatter_size: 800,
        }
    }
}

/// Keys understood by [`PipelineConfig::set`] in addition to the training keys.
pub const PIPELINE_KEYS: &[&str] = &[
    "dataset",
    "out",
    "perplexity",
    "tsne_iterations",
    "tsne_learning_rate",
    "tsne_seed",
    "eps",
    "min_pts",
    "feature_layer",
    "reduction_layer",
    "post_activation",
    "neighbors",
    "tile_size",
    "overlay_opacity",
    "scatter_size",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.trim().parse().map_err(|e: T::Err| Error::Parse {
        context: format!("config key `{key}`"),
        message: format!("`{value}`: {e}"),
    })
}

impl PipelineConfig {
    /// Apply one `key = value` setting. `seed` seeds both training and t-SNE.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "dataset" => self.dataset = PathBuf::from(v),
            "out" => self.out = PathBuf::from(v),
            "seed" => {
                self.train.set(key, v)?;
                self.tsne.seed = self.train.seed;
            }
            "perplexity" => self.tsne.perplexity = parse(key, v)?,
            "tsne_iterations" => self.tsne.iterations = parse(key, v)?,
            "tsne_learning_rate" => self.tsne.learning_rate = parse(key, v)?,
            "tsne_seed" => self.tsne.seed = parse(key, v)?,
            "eps" => self.dbscan = DbscanConfig::new(parse(key, v)?, self.dbscan.min_pts())?,
            "min_pts" => self.dbscan = DbscanConfig::new(self.dbscan.eps(), parse(key, v)?)?,
            "feature_layer" => self.explain.feature_layer = v.to_owned(),
            "reduction_layer" => self.explain.reduction_layer = v.to_owned(),
            "post_activation" => self.explain.post_activation = parse(key, v)?,
            "neighbors" => self.neighbors = parse(key, v)?,
            "tile_size" => self.tile_size = parse(key, v)?,
            "overlay_opacity" => self.overlay_opacity = parse(key, v)?,
            "scatter_size" => self.scatter_size = parse(key, v)?,
            _ => self.train.set(key, v)?,
        }
        Ok(())
    }

    /// Apply every setting of a `key = value` file.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (k, v) in parse_kv(&text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.tile_size == 0 {
            return Err(Error::config("tile_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.overlay_opacity) {
            return Err(Error::config("overlay_opacity must lie in [0, 1]"));
        }
        Ok(())
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Train,
    Embed,
    Reduce,
    Cluster,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Train, Stage::Embed, Stage::Reduce, Stage::Cluster, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Embed => "embed",
            Stage::Reduce => "reduce",
            Stage::Cluster => "cluster",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    /// SHA-256 over the stage's settings and the checksums of its inputs.
    pub fingerprint: String,
    /// Output path relative to the output directory, with its SHA-256.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedStage {
    pub stage: Stage,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub train: u64,
    pub split: u64,
    pub tsne: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: PipelineConfig,
    pub seeds: Seeds,
    pub stages: Vec<StageRecord>,
    pub failed_stage: Option<FailedStage>,
}

impl Manifest {
    fn new(config: &PipelineConfig) -> Self {
        Manifest {
            version: MANIFEST_VERSION,
            config: config.clone(),
            seeds: Seeds {
                train: config.train.seed,
                split: config.train.seed,
                tsne: config.tsne.seed,
            },
            stages: Vec::new(),
            failed_stage: None,
        }
    }

    pub fn stage(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == stage)
    }

    fn put(&mut self, record: StageRecord) {
        self.stages.retain(|r| r.stage != record.stage);
        self.stages.push(record);
        self.stages.sort_by_key(|r| r.stage);
    }

    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }
}

/// Held-out and clustering figures written by the report stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub images: usize,
    pub classes: usize,
    pub held_out: usize,
    /// Test-split queries against the training split; `None` without a test split.
    pub one_nn_accuracy: Option<f64>,
    pub clusters: usize,
    pub noise: usize,
    pub mean_purity: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Lazily loaded dataset and images shared by the stages of one run.
struct Context<'a> {
    config: &'a PipelineConfig,
    dataset: Option<DatasetIndex>,
    images: Option<Vec<Tensor<f32>>>,
    dataset_digest: Option<String>,
}

impl<'a> Context<'a> {
    fn new(config: &'a PipelineConfig) -> Self {
        Context {
            config,
            dataset: None,
            images: None,
            dataset_digest: None,
        }
    }

    fn dataset(&mut self) -> Result<&DatasetIndex> {
        if self.dataset.is_none() {
            let mut ds = load_dataset(&self.config.dataset, self.config.train.seed)?;
            ds.image_size = self.config.train.input_size;
            self.dataset = Some(ds);
        }
        Ok(self.dataset.as_ref().expect("dataset loaded"))
    }

    fn images(&mut self) -> Result<(&DatasetIndex, &[Tensor<f32>])> {
        if self.images.is_none() {
            let start = Instant::now();
            let images = self.dataset()?.load_all()?;
            log::info!("decoded {} images in {:.1?}", images.len(), start.elapsed());
            self.images = Some(images);
        }
        Ok((
            self.dataset.as_ref().expect("dataset loaded"),
            self.images.as_deref().expect("images loaded"),
        ))
    }

    /// Hash of the file list, labels, split and file contents.
    fn dataset_digest(&mut self) -> Result<String> {
        if self.dataset_digest.is_none() {
            let ds = self.dataset()?;
            let mut h = Sha256::new();
            for (i, e) in ds.entries.iter().enumerate() {
                let bytes = fs::read(&e.path).map_err(|err| Error::io(&e.path, err))?;
                h.update(format!("{}\t{}\t{:?}\t", ds.source_id(i), e.class_label, e.split).as_bytes());
                h.update(Sha256::digest(&bytes));
            }
            h.update(ds.class_names.join("\n").as_bytes());
            self.dataset_digest = Some(hex::encode(h.finalize()));
        }
        Ok(self.dataset_digest.clone().expect("digest computed"))
    }

    fn input_sha(&self, rel: &str) -> Result<String> {
        let path = self.config.path(rel);
        if !path.exists() {
            return Err(Error::Usage(format!("missing input {path:?}; run the earlier stages first")));
        }
        file_sha256(&path)
    }

    fn fingerprint(&mut self, stage: Stage) -> Result<String> {
        let c = self.config;
        let ck = format!("{TRAIN_DIR}/{CHECKPOINT_FILE}");
        let parts: Vec<String> = match stage {
            Stage::Train => vec![serde_json::to_string(&c.train)?, self.dataset_digest()?],
            Stage::Embed => vec![self.input_sha(&ck)?, self.dataset_digest()?, c.train.input_size.to_string()],
            Stage::Reduce => vec![self.input_sha(EMBEDDINGS_FILE)?, serde_json::to_string(&c.tsne)?],
            Stage::Cluster => vec![
                self.input_sha(EMBEDDINGS_FILE)?,
                self.input_sha(POINTS_FILE)?,
                serde_json::to_string(&c.dbscan)?,
            ],
            Stage::Report => vec![
                self.input_sha(&ck)?,
                self.input_sha(EMBEDDINGS_FILE)?,
                self.input_sha(POINTS_FILE)?,
                self.input_sha(CLUSTERS_FILE)?,
                self.dataset_digest()?,
                serde_json::to_string(&(
                    &c.explain,
                    c.neighbors,
                    c.tile_size,
                    c.overlay_opacity,
                    c.scatter_size,
                    c.dbscan,
                ))?,
            ],
        };
        Ok(sha256_hex(format!("{}\n{}", stage.name(), parts.join("\n")).as_bytes()))
    }
}

fn outputs_intact(config: &PipelineConfig, record: &StageRecord) -> bool {
    !record.outputs.is_empty()
        && record
            .outputs
            .iter()
            .all(|(rel, sha)| file_sha256(&config.path(rel)).is_ok_and(|s| &s == sha))
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn run_train(ctx: &mut Context) -> Result<Vec<String>> {
    let config = ctx.config;
    let dir = config.path(TRAIN_DIR);
    ensure_dir(&dir)?;
    let (ds, images) = ctx.images()?;
    train(ds, images, &config.train, Some(&dir))?;
    Ok(vec![format!("{TRAIN_DIR}/{CHECKPOINT_FILE}"), format!("{TRAIN_DIR}/{LOSS_FILE}")])
}

fn load_network(config: &PipelineConfig) -> Result<Network<f32>> {
    Ok(Checkpoint::<f32>::load(&config.path(&format!("{TRAIN_DIR}/{CHECKPOINT_FILE}")))?.network)
}

fn run_embed(ctx: &mut Context) -> Result<Vec<String>> {
    let config = ctx.config;
    let network = load_network(config)?;
    let (ds, images) = ctx.images()?;
    let records = crate::trainer::extract_embeddings(&network, ds, images)?;
    io::write_embeddings_csv(&config.path(EMBEDDINGS_FILE), &records)?;
    Ok(vec![EMBEDDINGS_FILE.to_owned()])
}

fn run_reduce(config: &PipelineConfig) -> Result<Vec<String>> {
    let records = io::read_embeddings_csv(&config.path(EMBEDDINGS_FILE))?;
    let data: Vec<Vec<f64>> = records.iter().map(|r| r.normalized.clone()).collect();
    let result = tsne_reduce(&data, &config.tsne)?;
    let ids: Vec<String> = records.iter().map(|r| r.source_id.clone()).collect();
    io::write_points_csv(&config.path(POINTS_FILE), &ids, &result.points)?;
    io::write_kl_csv(&config.path(KL_FILE), &result.kl_trace)?;
    Ok(vec![POINTS_FILE.to_owned(), KL_FILE.to_owned()])
}

fn read_points_for(config: &PipelineConfig, records: &[EmbeddingRecord]) -> Result<Vec<[f64; 2]>> {
    let (ids, points) = io::read_points_csv(&config.path(POINTS_FILE))?;
    if ids.len() != records.len() || ids.iter().zip(records).any(|(a, r)| *a != r.source_id) {
        return Err(Error::Parse {
            context: POINTS_FILE.into(),
            message: "points do not match the embeddings".into(),
        });
    }
    Ok(points)
}

fn class_count(records: &[EmbeddingRecord]) -> usize {
    records.iter().map(|r| r.class_label + 1).max().unwrap_or(0)
}

fn run_cluster(config: &PipelineConfig) -> Result<Vec<String>> {
    let records = io::read_embeddings_csv(&config.path(EMBEDDINGS_FILE))?;
    let points = read_points_for(config, &records)?;
    let assignment = dbscan(&points, &config.dbscan);
    let ids: Vec<String> = records.iter().map(|r| r.source_id.clone()).collect();
    io::write_json(&config.path(CLUSTERS_FILE), &io::clusters_to_json(&ids, &assignment))?;
    let labels: Vec<usize> = records.iter().map(|r| r.class_label).collect();
    let summary = cluster_summary(&assignment, &labels, class_count(&records));
    io::write_json(&config.path(SUMMARY_FILE), &summary)?;
    log::info!(
        "{} clusters, {} noise points, mean purity {:.3}",
        assignment.n_clusters,
        assignment.noise_count(),
        mean_purity(&summary)
    );
    Ok(vec![CLUSTERS_FILE.to_owned(), SUMMARY_FILE.to_owned()])
}

fn run_report(ctx: &mut Context) -> Result<Vec<String>> {
    let config = ctx.config;
    ensure_dir(&config.path(REPORT_DIR))?;
    let records = io::read_embeddings_csv(&config.path(EMBEDDINGS_FILE))?;
    let points = read_points_for(config, &records)?;
    let ids: Vec<String> = records.iter().map(|r| r.source_id.clone()).collect();
    let mut assignment = io::clusters_from_json(&ids, &io::read_json(&config.path(CLUSTERS_FILE))?)?;
    assignment.neighbor_counts = neighborhoods(&points, config.dbscan.eps()).iter().map(Vec::len).collect();
    let n_classes = class_count(&records);
    let mut outputs = Vec::new();
    let mut emit = |rel: String| -> PathBuf {
        let p = config.path(&rel);
        outputs.push(rel);
        p
    };

    let labels: Vec<Option<usize>> = records.iter().map(|r| Some(r.class_label)).collect();
    save_png(
        &scatter_plot(&points, &labels, n_classes, config.scatter_size)?,
        &emit(format!("{REPORT_DIR}/scatter_classes.png")),
    )?;
    save_png(
        &scatter_plot(&points, &assignment.labels, assignment.n_clusters, config.scatter_size)?,
        &emit(format!("{REPORT_DIR}/scatter_clusters.png")),
    )?;

    let (ds, images) = ctx.images()?;
    if ds.entries.len() != records.len() || (0..records.len()).any(|i| ds.source_id(i) != records[i].source_id) {
        return Err(Error::config("embeddings do not match the dataset; rerun the embed stage"));
    }
    let split = |s: Split| -> Vec<EmbeddingRecord> { ds.indices(s).into_iter().map(|i| records[i].clone()).collect() };
    let (train_recs, test_recs) = (split(Split::Train), split(Split::Test));
    let one_nn = if test_recs.is_empty() || train_recs.is_empty() {
        None
    } else {
        Some(one_nn_accuracy(&test_recs, &train_recs)?)
    };
    let summary = cluster_summary(&assignment, &records.iter().map(|r| r.class_label).collect::<Vec<_>>(), n_classes);
    let evaluation = Evaluation {
        images: records.len(),
        classes: n_classes,
        held_out: test_recs.len(),
        one_nn_accuracy: one_nn,
        clusters: assignment.n_clusters,
        noise: assignment.noise_count(),
        mean_purity: mean_purity(&summary),
    };

    if assignment.n_clusters == 0 {
        log::warn!("no clusters found; skipping tile and heatmap grids");
    } else {
        let layout = tile_layout(&assignment, &records)?;
        io::write_json(&emit(format!("{REPORT_DIR}/tile_layout.json")), &layout)?;
        let retrieval: Vec<RetrievalResult> = layout
            .iter()
            .map(|row| nearest_neighbors(&records[row.members[0]], &records, config.neighbors))
            .collect::<Result<_>>()?;
        io::write_json(&emit(format!("{REPORT_DIR}/retrieval.json")), &retrieval)?;
        save_png(
            &cluster_tiles(&layout, images, config.tile_size)?,
            &emit(format!("{REPORT_DIR}/tiles.png")),
        )?;
        let network: Network<f64> = load_network(config)?.cast();
        save_png(
            &heatmap_grid(&layout, &network, images, &config.explain, config.overlay_opacity, config.tile_size)?,
            &emit(format!("{REPORT_DIR}/heatmaps.png")),
        )?;
    }
    io::write_json(&emit(EVALUATION_FILE.to_owned()), &evaluation)?;
    log::info!(
        "1-NN accuracy {:?}, {} clusters, mean purity {:.3}",
        evaluation.one_nn_accuracy,
        evaluation.clusters,
        evaluation.mean_purity
    );
    Ok(outputs)
}

fn execute(ctx: &mut Context, stage: Stage) -> Result<Vec<String>> {
    match stage {
        Stage::Train => run_train(ctx),
        Stage::Embed => run_embed(ctx),
        Stage::Reduce => run_reduce(ctx.config),
        Stage::Cluster => run_cluster(ctx.config),
        Stage::Report => run_report(ctx),
    }
}

fn checksums(config: &PipelineConfig, outputs: Vec<String>) -> Result<BTreeMap<String, String>> {
    outputs
        .into_iter()
        .map(|rel| Ok((rel.clone(), file_sha256(&config.path(&rel))?)))
        .collect()
}

fn previous_manifest(config: &PipelineConfig) -> Option<Manifest> {
    let path = config.path(MANIFEST_FILE);
    if !path.exists() {
        return None;
    }
    match Manifest::load(&path) {
        Ok(m) => Some(m),
        Err(e) => {
            log::warn!("ignoring unreadable manifest {path:?}: {e}");
            None
        }
    }
}

fn write_manifest(config: &PipelineConfig, manifest: &Manifest) -> Result<()> {
    io::write_json(&config.path(MANIFEST_FILE), manifest)
}

/// Run `stages` in order. With `resume`, a stage whose fingerprint and
/// outputs match the previous manifest is skipped. On failure the manifest
/// names the failing stage and earlier artifacts are left in place.
fn run_stages(config: &PipelineConfig, stages: &[Stage], resume: bool) -> Result<Manifest> {
    config.validate()?;
    ensure_dir(&config.out)?;
    let previous = previous_manifest(config);
    let mut manifest = Manifest::new(config);
    if let Some(prev) = &previous {
        for r in &prev.stages {
            if r.status == StageStatus::Done && !stages.contains(&r.stage) {
                manifest.put(r.clone());
            }
        }
    }
    let mut ctx = Context::new(config);
    for &stage in stages {
        let attempt = (|| -> Result<StageRecord> {
            let fingerprint = ctx.fingerprint(stage)?;
            if resume {
                if let Some(r) = previous.as_ref().and_then(|m| m.stage(stage)) {
                    if r.status == StageStatus::Done && r.fingerprint == fingerprint && outputs_intact(config, r) {
                        log::info!("stage {stage}: up to date, skipped");
                        return Ok(r.clone());
                    }
                }
            }
            let start = Instant::now();
            log::info!("stage {stage}: running");
            let outputs = execute(&mut ctx, stage)?;
            log::info!("stage {stage}: done in {:.1?}", start.elapsed());
            Ok(StageRecord {
                stage,
                status: StageStatus::Done,
                fingerprint,
                outputs: checksums(config, outputs)?,
            })
        })();
        match attempt {
            Ok(record) => {
                manifest.put(record);
                write_manifest(config, &manifest)?;
            }
            Err(e) => {
                manifest.put(StageRecord {
                    stage,
                    status: StageStatus::Failed,
                    fingerprint: String::new(),
                    outputs: BTreeMap::new(),
                });
                manifest.failed_stage = Some(FailedStage {
                    stage,
                    error: e.to_string(),
                });
                write_manifest(config, &manifest)?;
                return Err(e);
            }
        }
    }
    Ok(manifest)
}

/// Run every stage, resuming from artifacts that are still current.
pub fn run_pipeline(config: &PipelineConfig) -> Result<Manifest> {
    run_stages(config, &Stage::ALL, true)
}

/// Run one stage unconditionally from the persisted outputs of the earlier ones.
pub fn run_stage(config: &PipelineConfig, stage: Stage) -> Result<Manifest> {
    run_stages(config, &[stage], false)
}

/// Explain image files with the trained checkpoint, writing heatmaps,
/// overlays and JSON records into `<out>/explain`. Returns the JSON paths.
pub fn explain_files(config: &PipelineConfig, paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    if paths.is_empty() {
        return Err(Error::config("no images to explain"));
    }
    let network: Network<f64> = load_network(config)?.cast();
    let size = network.spec().input_shape[0];
    let dir = config.path("explain");
    ensure_dir(&dir)?;
    let mut written = Vec::new();
    let mut used: BTreeMap<String, usize> = BTreeMap::new();
    for path in paths {
        let image = load_rgb(path, size)?;
        let explanation = explain_image(&network, &image.cast(), &config.explain)?;
        let base = path
            .file_stem()
            .map_or_else(|| "image".to_owned(), |s| s.to_string_lossy().into_owned());
        let count = used.entry(base.clone()).or_insert(0);
        let stem = if *count == 0 { base.clone() } else { format!("{base}_{count}") };
        *count += 1;
        write_explanation(&dir, &stem, &path.display().to_string(), &image, &explanation, config.overlay_opacity)?;
        written.push(dir.join(format!("{stem}.json")));
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{generate_synthetic_dataset, SynthSpec};

    fn tiny_config(root: &Path) -> PipelineConfig {
        let mut c = PipelineConfig {
            dataset: root.join("data"),
            out: root.join("out"),
            ..PipelineConfig::default()
        };
        c.train.iterations = 2;
        c.train.batch_size = 8;
        c.train.input_size = 16;
        c.tsne.perplexity = 5.0;
        c.tsne.iterations = 300;
        c.dbscan = DbscanConfig::new(50.0, 3).unwrap();
        c.tile_size = 8;
        c.scatter_size = 64;
        c
    }

    fn synth(root: &Path) {
        let spec = SynthSpec {
            classes: 4,
            per_class: 8,
            size: 16,
            seed: 1,
        };
        generate_synthetic_dataset(&spec, &root.join("data")).unwrap();
    }

    #[test]
    fn config_keys_apply() {
        let mut c = PipelineConfig::default();
        c.set("seed", "7").unwrap();
        c.set("eps", "2.5").unwrap();
        c.set("min_pts", "4").unwrap();
        c.set("perplexity", "12").unwrap();
        c.set("post_activation", "false").unwrap();
        c.set("lr", "0.001").unwrap();
        assert_eq!((c.train.seed, c.tsne.seed), (7, 7));
        assert_eq!((c.dbscan.eps(), c.dbscan.min_pts()), (2.5, 4));
        assert_eq!(c.tsne.perplexity, 12.0);
        assert!(!c.explain.post_activation);
        assert_eq!(c.train.adam.learning_rate, 0.001);
        assert!(c.set("eps", "-1").is_err());
        assert!(c.set("nonsense", "1").is_err());
    }

    #[test]
    fn pipeline_runs_resumes_and_records_failures() {
        let tmp = tempfile::tempdir().unwrap();
        synth(tmp.path());
        let config = tiny_config(tmp.path());
        let m = run_pipeline(&config).unwrap();
        assert_eq!(m.stages.len(), 5);
        assert!(m.failed_stage.is_none());
        for f in [EMBEDDINGS_FILE, POINTS_FILE, CLUSTERS_FILE, SUMMARY_FILE, EVALUATION_FILE] {
            assert!(config.path(f).exists(), "{f}");
        }
        let on_disk = Manifest::load(&config.path(MANIFEST_FILE)).unwrap();
        assert_eq!(on_disk, m);

        let ck = config.path("train/checkpoint.bin");
        let before = fs::metadata(&ck).unwrap().modified().unwrap();
        let again = run_pipeline(&config).unwrap();
        assert_eq!(again, m);
        assert_eq!(fs::metadata(&ck).unwrap().modified().unwrap(), before);

        let mut changed = config.clone();
        changed.tsne.perplexity = 100.0;
        let err = run_pipeline(&changed).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let failed = Manifest::load(&config.path(MANIFEST_FILE)).unwrap();
        assert_eq!(failed.failed_stage.as_ref().map(|f| f.stage), Some(Stage::Reduce));
        assert_eq!(failed.stage(Stage::Embed), m.stage(Stage::Embed));
        assert!(config.path(EMBEDDINGS_FILE).exists());

        let single = run_stage(&config, Stage::Reduce).unwrap();
        assert_eq!(single.stage(Stage::Reduce), m.stage(Stage::Reduce));

        let out = explain_files(&config, &[config.dataset.join("0_stripes/0_stripes_0000.png")]).unwrap();
        assert!(out[0].exists());
        assert!(explain_files(&config, &[]).is_err());
    }
}
