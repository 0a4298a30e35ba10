//! Text-embedding classification of point features, open-world query masks
//! and pseudo-labels for unseen classes.

use std::path::Path;

use rayon::prelude::*;

use crate::tensorio::{palette_color, read_tensor, write_ply, PointCloud, Tensor};
use crate::{Error, Result};

/// One embedding row per class or query.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub dim: usize,
    /// `K × dim`
    pub rows: Vec<f32>,
    pub names: Vec<String>,
    pub normalized: bool,
}

fn l2(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

impl EmbeddingMatrix {
    /// Wraps rows as given; `normalize` rescales every row to unit length.
    pub fn new(names: Vec<String>, dim: usize, rows: Vec<f32>, normalize: bool) -> Result<Self> {
        if dim == 0 || rows.len() != names.len() * dim {
            return Err(Error::Argument(format!(
                "{} values for {} rows of dimension {dim}",
                rows.len(),
                names.len()
            )));
        }
        let mut m = EmbeddingMatrix { dim, rows, names, normalized: false };
        if normalize {
            for k in 0..m.len() {
                let n = l2(m.row(k));
                if n == 0.0 || !n.is_finite() {
                    return Err(Error::Data(format!("embedding for {:?} has zero norm", m.names[k])));
                }
                for v in &mut m.rows[k * dim..(k + 1) * dim] {
                    *v = (*v as f64 / n) as f32;
                }
            }
            m.normalized = true;
        }
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn row(&self, k: usize) -> &[f32] {
        &self.rows[k * self.dim..(k + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::from_f32(vec![self.len(), self.dim], self.rows.clone())
    }

    /// Loads a `K × C` or `K × P × C` tensor; prompt embeddings are averaged.
    pub fn load(path: impl AsRef<Path>, names: Vec<String>) -> Result<Self> {
        let t = read_tensor(path.as_ref())?;
        match t.shape().len() {
            2 | 3 => {
                if t.shape()[0] != names.len() {
                    return Err(Error::Config(format!(
                        "{}: {} embeddings for {} class names",
                        path.as_ref().display(),
                        t.shape()[0],
                        names.len()
                    )));
                }
                build_class_embeddings(&t, names)
            }
            _ => Err(Error::Format(format!("embedding tensor must be rank 2 or 3, got {:?}", t.shape()))),
        }
    }
}

/// Averages the prompt embeddings of every class and L2-normalizes the mean.
/// Accepts `K × P × C`, or `K × C` as a single prompt per class.
pub fn build_class_embeddings(prompts: &Tensor, names: Vec<String>) -> Result<EmbeddingMatrix> {
    let shape = prompts.shape();
    let (k, p, c) = match *shape {
        [k, p, c] => (k, p, c),
        [k, c] => (k, 1, c),
        _ => return Err(Error::Argument(format!("prompt embeddings must be K×P×C, got {shape:?}"))),
    };
    if names.len() != k {
        return Err(Error::Argument(format!("{k} classes but {} names", names.len())));
    }
    let data = prompts.as_f32()?;
    let mut rows = vec![0.0f32; k * c];
    for class in 0..k {
        let mut mean = vec![0.0f64; c];
        for prompt in 0..p {
            let base = (class * p + prompt) * c;
            for (m, &v) in mean.iter_mut().zip(&data[base..base + c]) {
                *m += v as f64;
            }
        }
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt() / p as f64;
        if !(norm > 1e-12) {
            return Err(Error::Data(format!("mean prompt embedding of {:?} has zero norm", names[class])));
        }
        for (r, m) in rows[class * c..(class + 1) * c].iter_mut().zip(&mean) {
            *r = (m / p as f64 / norm) as f32;
        }
    }
    Ok(EmbeddingMatrix { dim: c, rows, names, normalized: true })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    /// Winning class per point, −1 where the point has no usable feature.
    pub labels: Vec<i32>,
    /// Cosine of the winning class.
    pub scores: Vec<f32>,
}

fn check_features(features: &[f32], channels: usize, valid: Option<&[bool]>) -> Result<usize> {
    if channels == 0 || features.len() % channels != 0 {
        return Err(Error::Argument(format!("{} values are not rows of {channels}", features.len())));
    }
    let n = features.len() / channels;
    if valid.is_some_and(|v| v.len() != n) {
        return Err(Error::Argument("mask length does not match feature rows".into()));
    }
    Ok(n)
}

/// Cosine against each candidate row; `None` for masked or zero rows.
fn cosines(f: &[f32], emb: &EmbeddingMatrix, candidates: &[usize]) -> Option<Vec<f64>> {
    let n = l2(f);
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    Some(
        candidates
            .iter()
            .map(|&k| {
                let r = emb.row(k);
                let rn = if emb.normalized { 1.0 } else { l2(r) };
                f.iter().zip(r).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / (n * rn)
            })
            .collect(),
    )
}

fn argmax(scores: &[f64]) -> (usize, f64) {
    let mut best = (0, scores[0]);
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > best.1 {
            best = (i, s);
        }
    }
    best
}

fn classify_among(features: &[f32], channels: usize, valid: Option<&[bool]>, emb: &EmbeddingMatrix, candidates: &[usize]) -> Vec<(i32, f32)> {
    features
        .par_chunks(channels)
        .enumerate()
        .map(|(i, f)| {
            if valid.is_some_and(|v| !v[i]) {
                return (-1, 0.0);
            }
            match cosines(f, emb, candidates) {
                Some(s) => {
                    let (j, c) = argmax(&s);
                    (candidates[j] as i32, c as f32)
                }
                None => (-1, 0.0),
            }
        })
        .collect()
}

/// Argmax cosine over all classes; ties go to the smaller class index.
pub fn classify_points(features: &[f32], channels: usize, valid: Option<&[bool]>, emb: &EmbeddingMatrix) -> Result<Segmentation> {
    check_features(features, channels, valid)?;
    if emb.is_empty() {
        return Err(Error::Argument("no classes to classify against".into()));
    }
    if emb.dim != channels {
        return Err(Error::Config(format!("features have {channels} channels, embeddings {}", emb.dim)));
    }
    let all: Vec<usize> = (0..emb.len()).collect();
    let (labels, scores) = classify_among(features, channels, valid, emb, &all).into_iter().unzip();
    Ok(Segmentation { labels, scores })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum QueryMode {
    /// Keep points whose cosine is at least the value.
    Threshold(f32),
    /// Keep this fraction of points with the highest cosine.
    TopFraction(f32),
}

pub const DEFAULT_TOP_FRACTION: f32 = 0.05;

/// Mask of points matching a free-form query embedding.
pub fn open_world_query(features: &[f32], channels: usize, valid: Option<&[bool]>, query: &[f32], mode: QueryMode) -> Result<Vec<bool>> {
    let n = check_features(features, channels, valid)?;
    if query.len() != channels {
        return Err(Error::Config(format!("query has {} channels, features {channels}", query.len())));
    }
    let q = EmbeddingMatrix::new(vec!["query".into()], channels, query.to_vec(), true)?;
    let cos: Vec<Option<f64>> = features
        .par_chunks(channels)
        .enumerate()
        .map(|(i, f)| {
            if valid.is_some_and(|v| !v[i]) {
                None
            } else {
                cosines(f, &q, &[0]).map(|c| c[0])
            }
        })
        .collect();
    match mode {
        QueryMode::Threshold(theta) => Ok(cos.iter().map(|c| c.is_some_and(|c| c >= theta as f64)).collect()),
        QueryMode::TopFraction(rho) => {
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(Error::Argument(format!("top fraction must be in (0, 1], got {rho}")));
            }
            let mut ranked: Vec<(f64, usize)> = cos.iter().enumerate().filter_map(|(i, c)| c.map(|c| (c, i))).collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let keep = top_count(rho, n);
            let mut mask = vec![false; n];
            for &(_, i) in ranked.iter().take(keep) {
                mask[i] = true;
            }
            Ok(mask)
        }
    }
}

/// Number of points kept by a top-fraction query: `ceil(ρ·N)`, with values
/// within f32 rounding of an integer snapped to it, and at least one.
fn top_count(rho: f32, n: usize) -> usize {
    let x = rho as f64 * n as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-6 * x.max(1.0) { r } else { x.ceil() };
    (k as usize).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PseudoLabelDomain {
    /// Unlabeled points may only receive unseen classes.
    UnseenOnly,
    AllClasses,
}

/// Keeps every provided seen label and classifies the remaining points.
pub fn generate_pseudo_labels(
    features: &[f32],
    channels: usize,
    valid: Option<&[bool]>,
    emb: &EmbeddingMatrix,
    gt_seen: &[i32],
    unseen: &[usize],
    domain: PseudoLabelDomain,
) -> Result<Vec<i32>> {
    let n = check_features(features, channels, valid)?;
    if gt_seen.len() != n {
        return Err(Error::Argument(format!("{} labels for {n} points", gt_seen.len())));
    }
    if emb.dim != channels {
        return Err(Error::Config(format!("features have {channels} channels, embeddings {}", emb.dim)));
    }
    let candidates: Vec<usize> = match domain {
        PseudoLabelDomain::UnseenOnly => {
            if unseen.is_empty() {
                return Err(Error::Argument("no unseen classes to assign".into()));
            }
            if let Some(&bad) = unseen.iter().find(|&&k| k >= emb.len()) {
                return Err(Error::Argument(format!("unseen class {bad} out of range")));
            }
            unseen.to_vec()
        }
        PseudoLabelDomain::AllClasses => (0..emb.len()).collect(),
    };
    if candidates.is_empty() {
        return Err(Error::Argument("no classes to classify against".into()));
    }
    let predicted = classify_among(features, channels, valid, emb, &candidates);
    Ok(gt_seen
        .iter()
        .zip(predicted)
        .map(|(&g, (p, _))| if g >= 0 { g } else { p })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrequencyGroup {
    Head,
    Common,
    Tail,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Seen,
    Unseen,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassInfo {
    pub name: String,
    pub group: Option<FrequencyGroup>,
    pub split: Option<Split>,
}

/// Class vocabulary with an ignore list and benchmark groupings.
///
/// ```text
/// # comment
/// class: chair ; group=head ; split=seen
/// class: sofa ; split=unseen
/// ignore: otherfurniture
/// ```
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabelSet {
    pub classes: Vec<ClassInfo>,
    pub ignore: Vec<String>,
}

impl LabelSet {
    pub fn parse(text: &str) -> Result<Self> {
        let mut set = LabelSet::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: &str| Error::Config(format!("label set line {}: {m}", ln + 1));
            let (kind, rest) = line.split_once(':').ok_or_else(|| err("expected `class:` or `ignore:`"))?;
            let mut fields = rest.split(';').map(str::trim);
            let name = fields.next().unwrap_or("").to_string();
            if name.is_empty() {
                return Err(err("missing name"));
            }
            match kind.trim() {
                "ignore" => set.ignore.push(name),
                "class" => {
                    let mut info = ClassInfo { name, group: None, split: None };
                    for f in fields.filter(|f| !f.is_empty()) {
                        let (k, v) = f.split_once('=').ok_or_else(|| err("expected key=value"))?;
                        match (k.trim(), v.trim()) {
                            ("group", "head") => info.group = Some(FrequencyGroup::Head),
                            ("group", "common") => info.group = Some(FrequencyGroup::Common),
                            ("group", "tail") => info.group = Some(FrequencyGroup::Tail),
                            ("split", "seen") => info.split = Some(Split::Seen),
                            ("split", "unseen") => info.split = Some(Split::Unseen),
                            (k, v) => return Err(err(&format!("unknown attribute {k}={v}"))),
                        }
                    }
                    set.classes.push(info);
                }
                other => return Err(err(&format!("unknown entry kind {other:?}"))),
            }
        }
        let mut names: Vec<&str> = set.classes.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("class {:?} listed twice", w[0])));
        }
        if let Some(c) = set.classes.iter().find(|c| set.ignore.contains(&c.name)) {
            return Err(Error::Config(format!("class {:?} is also ignored", c.name)));
        }
        if set.classes.is_empty() {
            return Err(Error::Config("label set has no classes".into()));
        }
        Ok(set)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.classes {
            out.push_str(&format!("class: {}", c.name));
            if let Some(g) = c.group {
                let g = match g {
                    FrequencyGroup::Head => "head",
                    FrequencyGroup::Common => "common",
                    FrequencyGroup::Tail => "tail",
                };
                out.push_str(&format!(" ; group={g}"));
            }
            if let Some(s) = c.split {
                out.push_str(if s == Split::Seen { " ; split=seen" } else { " ; split=unseen" });
            }
            out.push('\n');
        }
        for i in &self.ignore {
            out.push_str(&format!("ignore: {i}\n"));
        }
        out
    }

    pub fn names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn ids_with_split(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.classes[i].split == Some(split)).collect()
    }

    pub fn ids_in_group(&self, group: FrequencyGroup) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.classes[i].group == Some(group)).collect()
    }
}

/// Writes the cloud with per-label palette colours and a label property.
pub fn write_segmentation_ply(path: impl AsRef<Path>, cloud: &PointCloud, labels: &[i32]) -> Result<()> {
    if labels.len() != cloud.len() {
        return Err(Error::Argument(format!("{} labels for {} points", labels.len(), cloud.len())));
    }
    let out = PointCloud {
        positions: cloud.positions.clone(),
        colors: Some(labels.iter().map(|&l| palette_color(l)).collect()),
        labels: Some(labels.to_vec()),
    };
    write_ply(path, &out)
}
