//! Small point network: per-point MLP with one k-NN mean-pooling layer.
//!
//! ```text
//! x  = (xyz − centroid, rgb / 255)
//! h1 = tanh(W1 x + b1)
//! p  = mean of h1 over the k nearest points
//! h2 = tanh(W2 p + b2)
//! y  = W3 h2 + b3
//! ```

use std::path::Path;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::knn::knn_indices;
use crate::tensorio::{read_tensor, write_tensor, KvFile, PointCloud, Tensor};
use crate::{Error, Result};

pub const INPUT_DIM: usize = 6;
pub const DEFAULT_K: usize = 16;
const MANIFEST_FORMAT: &str = "featlift-pointnet-1";

#[derive(Clone, Debug, PartialEq)]
pub struct PointNetParams<T> {
    pub hidden: usize,
    pub out_dim: usize,
    pub k: usize,
    /// `hidden × 6`
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    /// `hidden × hidden`
    pub w2: Vec<T>,
    pub b2: Vec<T>,
    /// `out_dim × hidden`
    pub w3: Vec<T>,
    pub b3: Vec<T>,
}

/// Parameter tensors in a fixed order: name, rows, cols.
pub fn param_layout(hidden: usize, out_dim: usize) -> [(&'static str, usize, usize); 6] {
    [
        ("w1", hidden, INPUT_DIM),
        ("b1", hidden, 1),
        ("w2", hidden, hidden),
        ("b2", hidden, 1),
        ("w3", out_dim, hidden),
        ("b3", out_dim, 1),
    ]
}

impl<T: Float> PointNetParams<T> {
    pub fn zeros(hidden: usize, out_dim: usize, k: usize) -> Self {
        let z = |n| vec![T::zero(); n];
        PointNetParams {
            hidden,
            out_dim,
            k,
            w1: z(hidden * INPUT_DIM),
            b1: z(hidden),
            w2: z(hidden * hidden),
            b2: z(hidden),
            w3: z(out_dim * hidden),
            b3: z(out_dim),
        }
    }

    /// Uniform Glorot initialization.
    pub fn init(hidden: usize, out_dim: usize, k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(hidden, out_dim, k);
        for (name, rows, cols) in param_layout(hidden, out_dim) {
            if cols == 1 {
                continue;
            }
            let a = (6.0 / (rows + cols) as f64).sqrt();
            for v in p.tensor_mut(name) {
                *v = T::from(rng.gen_range(-a..a)).unwrap();
            }
        }
        p
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn tensors(&self) -> [(&'static str, &Vec<T>); 6] {
        [("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2), ("w3", &self.w3), ("b3", &self.b3)]
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut Vec<T> {
        match name {
            "w1" => &mut self.w1,
            "b1" => &mut self.b1,
            "w2" => &mut self.w2,
            "b2" => &mut self.b2,
            "w3" => &mut self.w3,
            "b3" => &mut self.b3,
            _ => panic!("unknown parameter tensor {name}"),
        }
    }

    /// All parameters concatenated in layout order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors().iter().flat_map(|(_, t)| t.iter().copied()).collect()
    }

    pub fn unflatten(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.num_params());
        let mut off = 0;
        for (name, _, _) in param_layout(self.hidden, self.out_dim) {
            let t = self.tensor_mut(name);
            let n = t.len();
            t.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn cast<U: Float>(&self) -> PointNetParams<U> {
        let c = |v: &Vec<T>| v.iter().map(|&x| U::from(x).unwrap()).collect();
        PointNetParams {
            hidden: self.hidden,
            out_dim: self.out_dim,
            k: self.k,
            w1: c(&self.w1),
            b1: c(&self.b1),
            w2: c(&self.w2),
            b2: c(&self.b2),
            w3: c(&self.w3),
            b3: c(&self.b3),
        }
    }
}

impl PointNetParams<f32> {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let mut kv = KvFile::new();
        kv.set("format", MANIFEST_FORMAT);
        kv.set("input_dim", INPUT_DIM);
        kv.set("hidden", self.hidden);
        kv.set("out_dim", self.out_dim);
        kv.set("k", self.k);
        for ((name, rows, cols), (_, data)) in param_layout(self.hidden, self.out_dim).iter().zip(self.tensors()) {
            let shape = if *cols == 1 { vec![*rows] } else { vec![*rows, *cols] };
            let file = format!("{name}.fot");
            write_tensor(dir.join(&file), &Tensor::from_f32(shape, data.clone())?)?;
            kv.set(format!("tensor.{name}"), file);
        }
        kv.save(dir.join("manifest.txt"), "point network parameters")
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let kv = KvFile::load(dir.join("manifest.txt"))?;
        if kv.get("format") != Some(MANIFEST_FORMAT) {
            return Err(Error::Config(format!("{}: not a point network bundle", dir.display())));
        }
        let input_dim: usize = kv.parse_value("input_dim")?;
        if input_dim != INPUT_DIM {
            return Err(Error::Config(format!("unsupported input_dim {input_dim}")));
        }
        let mut p = Self::zeros(kv.parse_value("hidden")?, kv.parse_value("out_dim")?, kv.parse_value("k")?);
        for (name, rows, cols) in param_layout(p.hidden, p.out_dim) {
            let t = read_tensor(dir.join(kv.require(&format!("tensor.{name}"))?))?;
            let shape: &[usize] = if cols == 1 { &[rows] } else { &[rows, cols] };
            t.expect_shape(shape, name)?;
            *p.tensor_mut(name) = t.into_f32()?;
        }
        Ok(p)
    }
}

/// Network inputs and neighbourhoods for one cloud.
#[derive(Clone, Debug)]
pub struct PointBatch<T> {
    /// `N × 6`
    pub inputs: Vec<T>,
    pub neighbors: Vec<Vec<usize>>,
}

impl<T: Float> PointBatch<T> {
    pub fn from_cloud(cloud: &PointCloud, k: usize) -> Result<Self> {
        if cloud.is_empty() {
            return Err(Error::Argument("empty point cloud".into()));
        }
        if k == 0 {
            return Err(Error::Argument("k must be positive".into()));
        }
        let centroid = cloud.centroid();
        let mut inputs = Vec::with_capacity(cloud.len() * INPUT_DIM);
        for (i, p) in cloud.positions.iter().enumerate() {
            for a in 0..3 {
                inputs.push(T::from(p[a] as f64 - centroid[a] as f64).unwrap());
            }
            let rgb = cloud.colors.as_ref().map_or([0u8; 3], |c| c[i]);
            for v in rgb {
                inputs.push(T::from(v as f64 / 255.0).unwrap());
            }
        }
        Ok(PointBatch { inputs, neighbors: knn_indices(&cloud.positions, k) })
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn cast<U: Float>(&self) -> PointBatch<U> {
        PointBatch {
            inputs: self.inputs.iter().map(|&x| U::from(x).unwrap()).collect(),
            neighbors: self.neighbors.clone(),
        }
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    pub h1: Vec<T>,
    pub pooled: Vec<T>,
    pub h2: Vec<T>,
    pub output: Vec<T>,
}

/// `y[i] = W x[i] + b` for row-major `W` (`out × inp`).
fn affine<T: Float>(x: &[T], w: &[T], b: &[T], inp: usize, out: usize) -> Vec<T> {
    let n = x.len() / inp;
    let mut y = vec![T::zero(); n * out];
    for i in 0..n {
        let xi = &x[i * inp..(i + 1) * inp];
        for o in 0..out {
            let wr = &w[o * inp..(o + 1) * inp];
            y[i * out + o] = wr.iter().zip(xi).fold(b[o], |acc, (&a, &c)| acc + a * c);
        }
    }
    y
}

fn mean_pool<T: Float>(h: &[T], neighbors: &[Vec<usize>], d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); neighbors.len() * d];
    for (i, nb) in neighbors.iter().enumerate() {
        let inv = T::one() / T::from(nb.len()).unwrap();
        let o = &mut out[i * d..(i + 1) * d];
        for &j in nb {
            for (a, &v) in o.iter_mut().zip(&h[j * d..(j + 1) * d]) {
                *a = *a + v;
            }
        }
        for a in o.iter_mut() {
            *a = *a * inv;
        }
    }
    out
}

pub fn forward_pointnet<T: Float>(batch: &PointBatch<T>, p: &PointNetParams<T>) -> ForwardCache<T> {
    let h = p.hidden;
    let mut h1 = affine(&batch.inputs, &p.w1, &p.b1, INPUT_DIM, h);
    h1.iter_mut().for_each(|v| *v = v.tanh());
    let pooled = mean_pool(&h1, &batch.neighbors, h);
    let mut h2 = affine(&pooled, &p.w2, &p.b2, h, h);
    h2.iter_mut().for_each(|v| *v = v.tanh());
    let output = affine(&h2, &p.w3, &p.b3, h, p.out_dim);
    ForwardCache { h1, pooled, h2, output }
}

/// Accumulates `gW += Σ g[i] ⊗ x[i]`, `gb += Σ g[i]` and returns `Wᵀ g[i]` rows.
fn affine_backward<T: Float>(
    g: &[T],
    x: &[T],
    w: &[T],
    inp: usize,
    out: usize,
    gw: &mut [T],
    gb: &mut [T],
    want_input_grad: bool,
) -> Vec<T> {
    let n = g.len() / out;
    let mut gx = if want_input_grad { vec![T::zero(); n * inp] } else { Vec::new() };
    for i in 0..n {
        let gi = &g[i * out..(i + 1) * out];
        let xi = &x[i * inp..(i + 1) * inp];
        for o in 0..out {
            let go = gi[o];
            gb[o] = gb[o] + go;
            let row = &mut gw[o * inp..(o + 1) * inp];
            for (r, &xv) in row.iter_mut().zip(xi) {
                *r = *r + go * xv;
            }
            if want_input_grad {
                let gxi = &mut gx[i * inp..(i + 1) * inp];
                for (a, &wv) in gxi.iter_mut().zip(&w[o * inp..(o + 1) * inp]) {
                    *a = *a + go * wv;
                }
            }
        }
    }
    gx
}

/// Parameter gradients for an upstream gradient on the network output.
pub fn backward_pointnet<T: Float>(
    batch: &PointBatch<T>,
    p: &PointNetParams<T>,
    cache: &ForwardCache<T>,
    grad_output: &[T],
) -> PointNetParams<T> {
    let h = p.hidden;
    let mut g = PointNetParams::zeros(h, p.out_dim, p.k);
    let mut g_h2 = affine_backward(grad_output, &cache.h2, &p.w3, h, p.out_dim, &mut g.w3, &mut g.b3, true);
    for (gv, &hv) in g_h2.iter_mut().zip(&cache.h2) {
        *gv = *gv * (T::one() - hv * hv);
    }
    let g_pooled = affine_backward(&g_h2, &cache.pooled, &p.w2, h, h, &mut g.w2, &mut g.b2, true);
    let mut g_h1 = vec![T::zero(); cache.h1.len()];
    for (i, nb) in batch.neighbors.iter().enumerate() {
        let inv = T::one() / T::from(nb.len()).unwrap();
        for &j in nb {
            for k in 0..h {
                g_h1[j * h + k] = g_h1[j * h + k] + g_pooled[i * h + k] * inv;
            }
        }
    }
    for (gv, &hv) in g_h1.iter_mut().zip(&cache.h1) {
        *gv = *gv * (T::one() - hv * hv);
    }
    affine_backward(&g_h1, &batch.inputs, &p.w1, INPUT_DIM, h, &mut g.w1, &mut g.b1, false);
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(n: usize) -> PointCloud {
        let positions = (0..n).map(|i| [i as f32 * 0.1, (i % 3) as f32 * 0.2, (i % 2) as f32]).collect();
        let colors = (0..n).map(|i| [(i * 30) as u8, 100, (255 - i * 20) as u8]).collect();
        PointCloud { positions, colors: Some(colors), labels: None }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let b = PointBatch::<f32>::from_cloud(&cloud(5), 3).unwrap();
        let out = forward_pointnet(&b, &PointNetParams::zeros(4, 3, 3)).output;
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_point_pooling_is_identity() {
        let b = PointBatch::<f64>::from_cloud(&cloud(1), 16).unwrap();
        let c = forward_pointnet(&b, &PointNetParams::init(5, 2, 16, 3));
        assert_eq!(c.h1, c.pooled);
    }

    #[test]
    fn inputs_are_centered() {
        let b = PointBatch::<f64>::from_cloud(&cloud(4), 2).unwrap();
        for a in 0..3 {
            let s: f64 = (0..4).map(|i| b.inputs[i * 6 + a]).sum();
            assert!(s.abs() < 1e-6);
        }
        assert!((b.inputs[3] - 0.0).abs() < 1e-12 && (b.inputs[4] - 100.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn flatten_round_trip_and_bundle() {
        let p = PointNetParams::<f32>::init(4, 3, 16, 9);
        let mut q = PointNetParams::zeros(4, 3, 16);
        q.unflatten(&p.flatten());
        assert_eq!(p, q);
        let dir = tempfile::tempdir().unwrap();
        p.save(dir.path()).unwrap();
        assert_eq!(PointNetParams::load(dir.path()).unwrap(), p);
    }
}
