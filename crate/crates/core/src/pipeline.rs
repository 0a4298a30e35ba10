//! Stage orchestration behind the `featlift` command line tool.
//!
//! Every stage reads its inputs from disk and writes its outputs under an
//! output folder, so a cached artifact can be swapped for a hand-written
//! tensor of the same shape.
//!
//! ```text
//! <out>/features/<frame>.fot   H×W×C per-view feature maps     (extract)
//! <out>/targets/               features.fot, view_count.fot    (project)
//! <model>/                     point network bundle, loss.csv  (distill)
//! <out>/segment/               labels.fot, scores.fot, segment.ply
//! <out>/query/                 mask.fot, query.ply
//! <out>/pseudo/                labels.fot, pseudo.ply
//! <out>/eval/                  report.csv, report.txt
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::distill::{forward_pointnet, train, write_loss_csv, PointBatch, PointNetParams, TrainOutcome, TrainSchedule, TrainingScene};
use crate::extract::{extract_view, ExtractConfig};
use crate::features::FeatureMap;
use crate::metrics::{accumulate, hiou, EvalReport};
use crate::openvocab::{
    build_class_embeddings, classify_points, generate_pseudo_labels, open_world_query, write_segmentation_ply,
    EmbeddingMatrix, FrequencyGroup, LabelSet, PseudoLabelDomain, QueryMode, Segmentation, Split,
    DEFAULT_TOP_FRACTION,
};
use crate::projection::{fuse_multiview, TargetFeatures, DEFAULT_TAU};
use crate::regions::generate_crops;
use crate::synthetic::{planted_scene, planted_vit, write_planted_scene, PlantedSceneConfig};
use crate::tensorio::{
    list_frames, load_frame, parse_f32_list, read_ply, read_tensor, subsample_frames, write_tensor, Frame, KvFile,
    PointCloud, Tensor,
};
use crate::vit_local::{forward_tokens, EncoderInput, ViTConfig, ViTWeights, Activation};
use crate::{Error, Result};

pub const CONFIG_KEYS: [&str; 22] = [
    "scales",
    "stride_frac",
    "n_superpixels",
    "compactness",
    "slic_iterations",
    "downscale",
    "tau",
    "frame_stride",
    "weights",
    "embeddings",
    "labels",
    "query",
    "top_fraction",
    "threshold",
    "lr0",
    "lr_decay",
    "lr_decay_every",
    "steps",
    "batch_scenes",
    "hidden",
    "k",
    "seed",
];

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub extract: ExtractConfig,
    pub tau: f32,
    pub frame_stride: usize,
    pub weights: Option<PathBuf>,
    /// Prompt embeddings, `K × P × C` or `K × C`.
    pub embeddings: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Query embedding, `C` or any `… × C` tensor averaged over leading axes.
    pub query: Option<PathBuf>,
    pub query_mode: QueryMode,
    pub schedule: TrainSchedule,
    pub hidden: usize,
    pub k: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            extract: ExtractConfig::default(),
            tau: DEFAULT_TAU,
            frame_stride: 10,
            weights: None,
            embeddings: None,
            labels: None,
            query: None,
            query_mode: QueryMode::TopFraction(DEFAULT_TOP_FRACTION),
            schedule: TrainSchedule::default(),
            hidden: 64,
            k: crate::distill::DEFAULT_K,
            seed: 0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Config(format!("key {key:?}: cannot parse {raw:?}")))
}

fn parse_frac(key: &str, raw: &str) -> Result<f32> {
    crate::tensorio::parse_fraction(raw.trim()).map_err(|e| Error::Config(format!("key {key:?}: {e}")))
}

impl PipelineConfig {
    /// Reads a `key=value` file. Relative paths resolve against its folder.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let kv = KvFile::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = PipelineConfig::default();
        for (k, v) in kv.iter() {
            cfg.set(k, v, Some(base))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides; paths are taken as given.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim(), None)?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, value: &str, base: Option<&Path>) -> Result<()> {
        let path = |v: &str| {
            let p = PathBuf::from(v);
            match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            }
        };
        let e = &mut self.extract;
        match key {
            "scales" => e.scales = parse_f32_list(value).map_err(|m| Error::Config(format!("key \"scales\": {m}")))?,
            "stride_frac" => e.stride_frac = parse_frac(key, value)?,
            "n_superpixels" => e.n_superpixels = parse_num(key, value)?,
            "compactness" => e.compactness = parse_num(key, value)?,
            "slic_iterations" => e.slic_iterations = parse_num(key, value)?,
            "downscale" => e.downscale = parse_num(key, value)?,
            "tau" => self.tau = parse_num(key, value)?,
            "frame_stride" => self.frame_stride = parse_num(key, value)?,
            "weights" => self.weights = Some(path(value)),
            "embeddings" => self.embeddings = Some(path(value)),
            "labels" => self.labels = Some(path(value)),
            "query" => self.query = Some(path(value)),
            "top_fraction" => self.query_mode = QueryMode::TopFraction(parse_frac(key, value)?),
            "threshold" => self.query_mode = QueryMode::Threshold(parse_num(key, value)?),
            "lr0" => self.schedule.lr0 = parse_num(key, value)?,
            "lr_decay" => self.schedule.decay = parse_num(key, value)?,
            "lr_decay_every" => self.schedule.decay_every = parse_num(key, value)?,
            "steps" => self.schedule.steps = parse_num(key, value)?,
            "batch_scenes" => self.schedule.batch_scenes = parse_num(key, value)?,
            "hidden" => self.hidden = parse_num(key, value)?,
            "k" => self.k = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.extract;
        if e.scales.is_empty() || e.scales.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
            return Err(Error::Config(format!("scales must lie in (0, 1], got {:?}", e.scales)));
        }
        if !(e.stride_frac > 0.0 && e.stride_frac <= 1.0) {
            return Err(Error::Config(format!("stride_frac must lie in (0, 1], got {}", e.stride_frac)));
        }
        if e.n_superpixels == 0 || e.downscale == 0 || e.slic_iterations == 0 {
            return Err(Error::Config("n_superpixels, downscale and slic_iterations must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.frame_stride == 0 || self.hidden == 0 || self.k == 0 {
            return Err(Error::Config("frame_stride, hidden and k must be positive".into()));
        }
        self.schedule.validate()
    }

    /// Every key with its current value; paths are written as given.
    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        let e = &self.extract;
        kv.set("scales", e.scales.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","));
        kv.set("stride_frac", e.stride_frac);
        kv.set("n_superpixels", e.n_superpixels);
        kv.set("compactness", e.compactness);
        kv.set("slic_iterations", e.slic_iterations);
        kv.set("downscale", e.downscale);
        kv.set("tau", self.tau);
        kv.set("frame_stride", self.frame_stride);
        for (key, p) in [("weights", &self.weights), ("embeddings", &self.embeddings), ("labels", &self.labels), ("query", &self.query)] {
            if let Some(p) = p {
                kv.set(key, p.display());
            }
        }
        match self.query_mode {
            QueryMode::TopFraction(r) => kv.set("top_fraction", r),
            QueryMode::Threshold(t) => kv.set("threshold", t),
        }
        kv.set("lr0", self.schedule.lr0);
        kv.set("lr_decay", self.schedule.decay);
        kv.set("lr_decay_every", self.schedule.decay_every);
        kv.set("steps", self.schedule.steps);
        kv.set("batch_scenes", self.schedule.batch_scenes);
        kv.set("hidden", self.hidden);
        kv.set("k", self.k);
        kv.set("seed", self.seed);
        kv
    }

    fn require<'a>(&self, p: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
        p.as_ref().ok_or_else(|| Error::Config(format!("no {key:?} path configured")))
    }

    pub fn load_weights(&self) -> Result<ViTWeights> {
        let dir = self.require(&self.weights, "weights")?;
        if !dir.join(crate::vit_local::MANIFEST_FILE).is_file() {
            return Err(Error::Config(format!("no weight bundle at {}", dir.display())));
        }
        ViTWeights::load(dir)
    }

    pub fn load_label_set(&self) -> Result<LabelSet> {
        LabelSet::load(self.require(&self.labels, "labels")?)
    }

    /// Class embeddings for the configured label set.
    pub fn load_embeddings(&self, labels: &LabelSet) -> Result<EmbeddingMatrix> {
        let t = read_tensor(self.require(&self.embeddings, "embeddings")?)?;
        let k = t.shape().first().copied().unwrap_or(0);
        if k != labels.len() || !(2..=3).contains(&t.shape().len()) {
            return Err(Error::Config(format!(
                "embedding tensor {:?} does not match {} classes in the label set",
                t.shape(),
                labels.len()
            )));
        }
        build_class_embeddings(&t, labels.names())
    }

    pub fn load_query(&self) -> Result<Vec<f32>> {
        let t = read_tensor(self.require(&self.query, "query")?)?;
        let c = *t.shape().last().ok_or_else(|| Error::Config("query tensor has rank 0".into()))?;
        let data = t.as_f32()?;
        if c == 0 || data.is_empty() {
            return Err(Error::Config("empty query tensor".into()));
        }
        let rows = data.len() / c;
        let mut q = vec![0.0f64; c];
        for row in data.chunks(c) {
            for (a, &v) in q.iter_mut().zip(row) {
                *a += v as f64;
            }
        }
        Ok(q.into_iter().map(|v| (v / rows as f64) as f32).collect())
    }
}

/// Output folder of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Workspace {
    pub scene: PathBuf,
    pub out: PathBuf,
}

impl Workspace {
    pub fn new(scene: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Workspace { scene: scene.into(), out: out.into() }
    }

    pub fn features_dir(&self) -> PathBuf {
        self.out.join("features")
    }

    pub fn feature_path(&self, frame: u32) -> PathBuf {
        self.features_dir().join(format!("{frame}.fot"))
    }

    pub fn targets_dir(&self) -> PathBuf {
        self.out.join("targets")
    }

    pub fn stage_dir(&self, stage: &str) -> Result<PathBuf> {
        let d = self.out.join(stage);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        Ok(d)
    }

    pub fn cloud(&self) -> Result<PointCloud> {
        read_ply(self.scene.join("cloud.ply"))
    }

    pub fn frame_ids(&self, cfg: &PipelineConfig) -> Result<Vec<u32>> {
        let ids = subsample_frames(&list_frames(&self.scene)?, cfg.frame_stride)?;
        if ids.is_empty() {
            return Err(Error::Data(format!("no frames in {}", self.scene.display())));
        }
        Ok(ids)
    }
}

/// Dense features for every selected view, written to `features/<id>.fot`.
pub fn cmd_extract(ws: &Workspace, cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let weights = cfg.load_weights()?;
    let ids = ws.frame_ids(cfg)?;
    let dir = ws.stage_dir("features")?;
    ids.par_iter()
        .map(|&id| {
            let frame = load_frame(&ws.scene, id)?;
            let started = Instant::now();
            let fm = extract_view(&frame.image, &weights, &cfg.extract)?;
            let path = dir.join(format!("{id}.fot"));
            fm.save(&path)?;
            log::info!("frame {id}: {}x{}x{} in {:.2?}", fm.width, fm.height, fm.channels, started.elapsed());
            Ok(path)
        })
        .collect()
}

/// Per-point targets from the cached feature maps.
pub fn cmd_project(ws: &Workspace, cfg: &PipelineConfig) -> Result<TargetFeatures> {
    let cloud = ws.cloud()?;
    let ids = ws.frame_ids(cfg)?;
    let loaded: Vec<(Frame, FeatureMap)> = ids
        .par_iter()
        .map(|&id| Ok((load_frame(&ws.scene, id)?, FeatureMap::load(ws.feature_path(id))?)))
        .collect::<Result<_>>()?;
    let views: Vec<(&Frame, &FeatureMap)> = loaded.iter().map(|(f, m)| (f, m)).collect();
    let targets = fuse_multiview(&cloud.positions, &views, cfg.tau)?;
    targets.save(ws.targets_dir())?;
    log::info!("{} of {} points supervised from {} views", targets.num_valid(), targets.len(), views.len());
    Ok(targets)
}

/// Trains one network over all scenes and writes it to `model_dir`.
pub fn cmd_distill(scenes: &[Workspace], model_dir: &Path, cfg: &PipelineConfig) -> Result<TrainOutcome> {
    if scenes.is_empty() {
        return Err(Error::Argument("no scenes to train on".into()));
    }
    let prepared: Vec<TrainingScene> = scenes
        .par_iter()
        .map(|ws| {
            let cloud = ws.cloud()?;
            let targets = TargetFeatures::load(ws.targets_dir())?;
            Ok(TrainingScene { batch: PointBatch::from_cloud(&cloud, cfg.k)?, targets })
        })
        .collect::<Result<_>>()?;
    let channels = prepared[0].targets.channels;
    if prepared.iter().any(|s| s.targets.channels != channels) {
        return Err(Error::Data("scenes have targets with different channel counts".into()));
    }
    let init = PointNetParams::init(cfg.hidden, channels, cfg.k, cfg.seed);
    let outcome = train(&prepared, init, &cfg.schedule)?;
    outcome.params.save(model_dir)?;
    write_loss_csv(model_dir.join("loss.csv"), &outcome.curve)?;
    Ok(outcome)
}

/// Where per-point features come from for the downstream stages.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureSource {
    /// Projected 2D targets; points seen by no view are left unlabeled.
    Targets,
    /// A distilled point network bundle.
    Model(PathBuf),
}

pub struct PointFeatures {
    pub channels: usize,
    pub features: Vec<f32>,
    pub valid: Option<Vec<bool>>,
}

pub fn point_features(ws: &Workspace, cloud: &PointCloud, source: &FeatureSource) -> Result<PointFeatures> {
    match source {
        FeatureSource::Targets => {
            let t = TargetFeatures::load(ws.targets_dir())?;
            if t.len() != cloud.len() {
                return Err(Error::Data(format!("{} targets for {} points", t.len(), cloud.len())));
            }
            Ok(PointFeatures { channels: t.channels, features: t.features, valid: Some(t.valid_mask) })
        }
        FeatureSource::Model(dir) => {
            let params = PointNetParams::<f32>::load(dir)?;
            let batch = PointBatch::from_cloud(cloud, params.k)?;
            let out = forward_pointnet(&batch, &params).output;
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("point network produced non-finite features".into()));
            }
            Ok(PointFeatures { channels: params.out_dim, features: out, valid: None })
        }
    }
}

fn save_labels(dir: &Path, name: &str, labels: &[i32]) -> Result<()> {
    write_tensor(dir.join(name), &Tensor::from_i32(vec![labels.len()], labels.to_vec())?)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<i32>> {
    let t = read_tensor(path)?;
    if t.shape().len() != 1 {
        return Err(Error::Data(format!("label tensor must be rank 1, got {:?}", t.shape())));
    }
    t.into_i32()
}

/// Annotation-free labels for every point.
pub fn cmd_segment(ws: &Workspace, cfg: &PipelineConfig, source: &FeatureSource) -> Result<Segmentation> {
    let labels = cfg.load_label_set()?;
    let emb = cfg.load_embeddings(&labels)?;
    let cloud = ws.cloud()?;
    let pf = point_features(ws, &cloud, source)?;
    let seg = classify_points(&pf.features, pf.channels, pf.valid.as_deref(), &emb)?;
    let dir = ws.stage_dir("segment")?;
    save_labels(&dir, "labels.fot", &seg.labels)?;
    write_tensor(dir.join("scores.fot"), &Tensor::from_f32(vec![seg.scores.len()], seg.scores.clone())?)?;
    write_segmentation_ply(dir.join("segment.ply"), &cloud, &seg.labels)?;
    Ok(seg)
}

/// Mask of points matching the configured query embedding.
pub fn cmd_query(ws: &Workspace, cfg: &PipelineConfig, source: &FeatureSource) -> Result<Vec<bool>> {
    let query = cfg.load_query()?;
    let cloud = ws.cloud()?;
    let pf = point_features(ws, &cloud, source)?;
    let mask = open_world_query(&pf.features, pf.channels, pf.valid.as_deref(), &query, cfg.query_mode)?;
    let dir = ws.stage_dir("query")?;
    write_tensor(dir.join("mask.fot"), &Tensor::from_u8(vec![mask.len()], mask.iter().map(|&m| m as u8).collect())?)?;
    let labels: Vec<i32> = mask.iter().map(|&m| if m { 0 } else { -1 }).collect();
    write_segmentation_ply(dir.join("query.ply"), &cloud, &labels)?;
    Ok(mask)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabels {
    pub labels: Vec<i32>,
    /// Share of unseen-class points whose pseudo-label is correct, in percent.
    pub unseen_accuracy: Option<f64>,
}

/// Keeps ground truth for seen classes and pseudo-labels the rest.
pub fn cmd_pseudo(ws: &Workspace, cfg: &PipelineConfig, source: &FeatureSource, domain: PseudoLabelDomain) -> Result<PseudoLabels> {
    let label_set = cfg.load_label_set()?;
    let emb = cfg.load_embeddings(&label_set)?;
    let cloud = ws.cloud()?;
    let gt = cloud
        .labels
        .as_ref()
        .ok_or_else(|| Error::Data("cloud.ply has no label property".into()))?;
    let seen = label_set.ids_with_split(Split::Seen);
    let unseen = label_set.ids_with_split(Split::Unseen);
    let gt_seen: Vec<i32> = gt.iter().map(|&g| if g >= 0 && seen.contains(&(g as usize)) { g } else { -1 }).collect();
    let pf = point_features(ws, &cloud, source)?;
    let labels = generate_pseudo_labels(&pf.features, pf.channels, pf.valid.as_deref(), &emb, &gt_seen, &unseen, domain)?;
    let on_unseen: Vec<bool> = gt
        .iter()
        .zip(&labels)
        .filter(|(&g, _)| g >= 0 && unseen.contains(&(g as usize)))
        .map(|(g, p)| g == p)
        .collect();
    let unseen_accuracy = (!on_unseen.is_empty())
        .then(|| 100.0 * on_unseen.iter().filter(|&&c| c).count() as f64 / on_unseen.len() as f64);
    let dir = ws.stage_dir("pseudo")?;
    save_labels(&dir, "labels.fot", &labels)?;
    write_segmentation_ply(dir.join("pseudo.ply"), &cloud, &labels)?;
    Ok(PseudoLabels { labels, unseen_accuracy })
}

/// Scores predictions against the cloud's ground truth.
///
/// Adds head/common/tail means when the label set carries groups and
/// seen/unseen means with hIoU when it carries splits.
pub fn evaluate(pred: &[i32], gt: &[i32], labels: &LabelSet) -> Result<EvalReport> {
    let cm = accumulate(pred, gt, labels.len())?;
    let mut report = EvalReport::new(&cm, labels.names())?;
    for (name, g) in [("head", FrequencyGroup::Head), ("common", FrequencyGroup::Common), ("tail", FrequencyGroup::Tail)] {
        let ids = labels.ids_in_group(g);
        if !ids.is_empty() {
            report = report.with_group(name, &ids);
        }
    }
    let (seen, unseen) = (labels.ids_with_split(Split::Seen), labels.ids_with_split(Split::Unseen));
    if !seen.is_empty() && !unseen.is_empty() {
        report = report.with_seen_unseen(&seen, &unseen);
    }
    Ok(report)
}

pub fn cmd_eval(ws: &Workspace, cfg: &PipelineConfig, predictions: &Path) -> Result<EvalReport> {
    let labels = cfg.load_label_set()?;
    let cloud = ws.cloud()?;
    let gt = cloud
        .labels
        .as_ref()
        .ok_or_else(|| Error::Data("cloud.ply has no label property".into()))?;
    let report = evaluate(&load_labels(predictions)?, gt, &labels)?;
    let dir = ws.stage_dir("eval")?;
    let csv = dir.join("report.csv");
    std::fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let txt = dir.join("report.txt");
    std::fs::write(&txt, report.to_pretty()).map_err(|e| Error::io(&txt, e))?;
    Ok(report)
}

pub const SYNTH_CONFIG: &str = "featlift.cfg";

/// Renders the planted scene with its encoder, embeddings and a config
/// (`featlift.cfg`) that points at them.
pub fn cmd_synth(dir: &Path) -> Result<PathBuf> {
    let scene = planted_scene(&PlantedSceneConfig::default())?;
    let weights = planted_vit();
    write_planted_scene(dir, &scene, &weights)?;
    let mut cfg = PipelineConfig { frame_stride: 1, ..Default::default() };
    cfg.weights = Some("weights".into());
    cfg.embeddings = Some("embeddings.fot".into());
    cfg.labels = Some("labels.txt".into());
    let path = dir.join(SYNTH_CONFIG);
    cfg.to_kv().save(&path, "planted scene written by `featlift synth`")?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

/// Quick invariant suite plus the planted end-to-end run inside `dir`.
pub fn selftest(dir: &Path) -> Result<Vec<Check>> {
    let mut out = Vec::new();

    let crops = generate_crops(640, 480, &[1.0, 0.5, 0.25], 0.5)?;
    let mut covered = vec![false; 640 * 480];
    for c in &crops {
        for y in c.y0..c.y0 + c.h {
            covered[y * 640 + c.x0..y * 640 + c.x0 + c.w].fill(true);
        }
    }
    out.push(check(
        "crop schedule",
        crops.len() == 59 && covered.iter().all(|&c| c),
        format!("{} crops on 640x480", crops.len()),
    ));

    let toy = ViTConfig {
        image_size: 32,
        patch_size: 8,
        width: 16,
        heads: 2,
        layers: 2,
        embed_dim: 8,
        mlp_dim: 32,
        ln_eps: 1e-5,
        activation: Activation::QuickGelu,
        ln_pre: true,
    };
    let w = ViTWeights::random(toy, 7)?;
    let mut input = EncoderInput::zeros(32);
    for (i, v) in input.data.iter_mut().enumerate() {
        *v = ((i * 37 % 101) as f32 / 50.0) - 1.0;
    }
    let (_, base) = forward_tokens(&input, &[], &w, true)?;
    let sets: Vec<Vec<usize>> = (0..5).map(|j| vec![j, (j * 7 + 3) % 16]).collect();
    let (_, with) = forward_tokens(&input, &sets, &w, true)?;
    let same = base.iter().zip(&with).all(|(a, b)| {
        a.main.len() == b.main.len() && a.main.iter().zip(&b.main).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    out.push(check("non-interference", same, "5 local tokens, 2 layers".into()));

    let pins = [hiou(58.6, 51.6), hiou(64.8, 26.1)];
    out.push(check(
        "hIoU pins",
        (pins[0] - 54.9).abs() <= 0.05 && (pins[1] - 37.2).abs() <= 0.05,
        format!("{:.2}, {:.2}", pins[0], pins[1]),
    ));

    let s = TrainSchedule { lr0: 0.8, ..Default::default() };
    out.push(check("lr schedule", s.lr_at(5000) == 0.8 * 0.99f32.powi(5), format!("lr(5000) = {}", s.lr_at(5000))));

    let started = Instant::now();
    let cfg_path = cmd_synth(dir)?;
    let cfg = PipelineConfig::load(&cfg_path)?;
    let ws = Workspace::new(dir, dir.join("out"));
    cmd_extract(&ws, &cfg)?;
    cmd_project(&ws, &cfg)?;
    let seg = cmd_segment(&ws, &cfg, &FeatureSource::Targets)?;
    let gt = ws.cloud()?.labels.unwrap_or_default();
    let report = evaluate(&seg.labels, &gt, &cfg.load_label_set()?)?;
    out.push(check(
        "planted segmentation",
        report.scores.miou == 100.0,
        format!("mIoU {:.1} in {:.1?}", report.scores.miou, started.elapsed()),
    ));
    let pseudo = cmd_pseudo(&ws, &cfg, &FeatureSource::Targets, PseudoLabelDomain::UnseenOnly)?;
    out.push(check(
        "planted pseudo-labels",
        pseudo.unseen_accuracy == Some(100.0),
        format!("unseen accuracy {:?}", pseudo.unseen_accuracy),
    ));
    Ok(out)
}
