//! ViT encoder with per-super-pixel local classification tokens.
//!
//! The encoder runs the usual pre-norm transformer over the global class
//! token and the patch tokens. Alongside it, `N` local tokens start as copies
//! of the global token and pass through every block with the same weights,
//! except that each local token's attention uses keys and values from only
//! the patches assigned to its super-pixel. Local tokens never serve as keys
//! or values, so the global and patch trajectories are bit-identical to a
//! plain forward pass.
//!
//! The global/patch path and the local path are always computed by separate
//! matrix calls; mixing them in one batch would let the local rows perturb
//! blocking inside the GEMM kernel.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::features::FeatureMap;
use crate::regions::{assign_patches, PatchAssignment};
use crate::superpixel::SuperpixelMap;
use crate::tensorio::{read_tensor, write_tensor, KvFile, Rgb8Image, Tensor};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
const MANIFEST_FORMAT: &str = "featlift-vit-1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// `x · sigmoid(1.702 x)`, used by CLIP.
    QuickGelu,
    /// tanh approximation of GELU.
    GeluTanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::QuickGelu => "quick_gelu",
            Activation::GeluTanh => "gelu_tanh",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "quick_gelu" => Ok(Activation::QuickGelu),
            "gelu_tanh" | "gelu" => Ok(Activation::GeluTanh),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }

    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::QuickGelu => x / (1.0 + (-1.702 * x).exp()),
            Activation::GeluTanh => {
                0.5 * x * (1.0 + (0.797_884_6 * (x + 0.044715 * x * x * x)).tanh())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Token width `d`.
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    /// Output embedding dimension after the projection head.
    pub embed_dim: usize,
    pub mlp_dim: usize,
    pub ln_eps: f32,
    pub activation: Activation,
    /// Whether a layer norm is applied to the token sequence before the first block.
    pub ln_pre: bool,
}

impl ViTConfig {
    /// CLIP ViT-B/16 geometry.
    pub fn clip_b16() -> Self {
        ViTConfig {
            image_size: 224,
            patch_size: 16,
            width: 768,
            heads: 12,
            layers: 12,
            embed_dim: 512,
            mlp_dim: 3072,
            ln_eps: 1e-5,
            activation: Activation::QuickGelu,
            ln_pre: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.width == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if self.embed_dim == 0 || self.mlp_dim == 0 {
            return bad("embed_dim and mlp_dim must be positive".into());
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LayerNorm {
    pub fn identity(d: usize) -> Self {
        LayerNorm { weight: vec![1.0; d], bias: vec![0.0; d] }
    }

    fn apply(&self, x: &[f32], eps: f32) -> Vec<f32> {
        let d = self.weight.len();
        let mut out = vec![0.0f32; x.len()];
        for (row, o) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps as f64).sqrt();
            for k in 0..d {
                o[k] = ((row[k] as f64 - mean) * inv) as f32 * self.weight[k] + self.bias[k];
            }
        }
        out
    }
}

/// Dense layer `y = x Wᵀ + b` with `W` stored `out × in` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub out_dim: usize,
    pub in_dim: usize,
    pub weight: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize, bias: bool) -> Self {
        Linear {
            out_dim,
            in_dim,
            weight: vec![0.0; out_dim * in_dim],
            bias: bias.then(|| vec![0.0; out_dim]),
        }
    }

    pub fn forward(&self, x: &[f32], rows: usize) -> Vec<f32> {
        let mut y = vec![0.0f32; rows * self.out_dim];
        if rows == 0 {
            return y;
        }
        debug_assert_eq!(x.len(), rows * self.in_dim);
        // SAFETY: slices cover rows×in, out×in and rows×out elements with the strides given.
        unsafe {
            matrixmultiply::sgemm(
                rows,
                self.in_dim,
                self.out_dim,
                1.0,
                x.as_ptr(),
                self.in_dim as isize,
                1,
                self.weight.as_ptr(),
                1,
                self.in_dim as isize,
                0.0,
                y.as_mut_ptr(),
                self.out_dim as isize,
                1,
            );
        }
        if let Some(b) = &self.bias {
            for row in y.chunks_exact_mut(self.out_dim) {
                for (v, bb) in row.iter_mut().zip(b) {
                    *v += bb;
                }
            }
        }
        y
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub ln1: LayerNorm,
    /// Stacked query, key and value projections, `3d × d`.
    pub qkv: Linear,
    pub attn_out: Linear,
    pub ln2: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViTWeights {
    pub config: ViTConfig,
    /// Per-channel normalization applied to `[0, 1]` pixel values.
    pub mean: [f32; 3],
    pub std: [f32; 3],
    /// `d × 3p²`, input flattened channel-major then row-major within a patch.
    pub patch_embed: Linear,
    pub class_token: Vec<f32>,
    /// `(M + 1) × d`; row 0 belongs to the class token.
    pub pos_embed: Vec<f32>,
    pub ln_pre: Option<LayerNorm>,
    pub blocks: Vec<BlockWeights>,
    pub ln_final: LayerNorm,
    /// `embed_dim × d`, no bias.
    pub proj: Linear,
}

fn check_len(name: &str, v: &[f32], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::Format(format!("{name}: expected {n} values, found {}", v.len())));
    }
    Ok(())
}

impl ViTWeights {
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let d = c.width;
        let lin = |name: &str, l: &Linear, o: usize, i: usize, bias: Option<bool>| -> Result<()> {
            if l.out_dim != o || l.in_dim != i {
                return Err(Error::Format(format!(
                    "{name}: expected {o}x{i}, found {}x{}",
                    l.out_dim, l.in_dim
                )));
            }
            check_len(name, &l.weight, o * i)?;
            match (&l.bias, bias) {
                (Some(b), _) => check_len(name, b, o),
                (None, Some(true)) => Err(Error::Format(format!("{name}: missing bias"))),
                _ => Ok(()),
            }
        };
        let ln = |name: &str, l: &LayerNorm| -> Result<()> {
            check_len(name, &l.weight, d)?;
            check_len(name, &l.bias, d)
        };
        lin("patch_embed", &self.patch_embed, d, c.patch_dim(), None)?;
        check_len("class_token", &self.class_token, d)?;
        check_len("pos_embed", &self.pos_embed, (c.num_patches() + 1) * d)?;
        match (&self.ln_pre, c.ln_pre) {
            (Some(l), true) => ln("ln_pre", l)?,
            (None, false) => {}
            _ => return Err(Error::Format("ln_pre presence disagrees with config".into())),
        }
        if self.blocks.len() != c.layers {
            return Err(Error::Format(format!(
                "expected {} blocks, found {}",
                c.layers,
                self.blocks.len()
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            ln(&format!("blocks.{i}.ln1"), &b.ln1)?;
            ln(&format!("blocks.{i}.ln2"), &b.ln2)?;
            lin(&format!("blocks.{i}.attn.qkv"), &b.qkv, 3 * d, d, Some(true))?;
            lin(&format!("blocks.{i}.attn.out"), &b.attn_out, d, d, Some(true))?;
            lin(&format!("blocks.{i}.mlp.fc1"), &b.mlp_in, c.mlp_dim, d, Some(true))?;
            lin(&format!("blocks.{i}.mlp.fc2"), &b.mlp_out, d, c.mlp_dim, Some(true))?;
        }
        ln("ln_final", &self.ln_final)?;
        lin("proj", &self.proj, c.embed_dim, d, None)?;
        let all_finite = self
            .named_tensors()
            .iter()
            .all(|(_, v, _)| v.iter().all(|x| x.is_finite()));
        if !all_finite {
            return Err(Error::Format("weights contain non-finite values".into()));
        }
        Ok(())
    }

    /// Random weights with the given geometry, for tests and demos.
    pub fn random(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.width;
        let mut fill = |n: usize, scale: f32| -> Vec<f32> {
            (0..n).map(|_| rng.gen_range(-1.0f32..1.0) * scale).collect()
        };
        let lin = |o: usize, i: usize, bias: bool, fill: &mut dyn FnMut(usize, f32) -> Vec<f32>| Linear {
            out_dim: o,
            in_dim: i,
            weight: fill(o * i, (3.0 / i as f32).sqrt()),
            bias: bias.then(|| fill(o, 0.05)),
        };
        let ln = |fill: &mut dyn FnMut(usize, f32) -> Vec<f32>| LayerNorm {
            weight: fill(d, 0.1).into_iter().map(|v| 1.0 + v).collect(),
            bias: fill(d, 0.05),
        };
        let patch_embed = lin(d, config.patch_dim(), false, &mut fill);
        let class_token = fill(d, 0.5);
        let pos_embed = fill((config.num_patches() + 1) * d, 0.1);
        let ln_pre = config.ln_pre.then(|| ln(&mut fill));
        let blocks = (0..config.layers)
            .map(|_| BlockWeights {
                ln1: ln(&mut fill),
                qkv: lin(3 * d, d, true, &mut fill),
                attn_out: lin(d, d, true, &mut fill),
                ln2: ln(&mut fill),
                mlp_in: lin(config.mlp_dim, d, true, &mut fill),
                mlp_out: lin(d, config.mlp_dim, true, &mut fill),
            })
            .collect();
        let ln_final = ln(&mut fill);
        let proj = lin(config.embed_dim, d, false, &mut fill);
        let w = ViTWeights {
            mean: [0.5; 3],
            std: [0.25; 3],
            patch_embed,
            class_token,
            pos_embed,
            ln_pre,
            blocks,
            ln_final,
            proj,
            config,
        };
        w.validate()?;
        Ok(w)
    }

    /// Every tensor with its bundle name and shape.
    pub fn named_tensors(&self) -> Vec<(String, &Vec<f32>, Vec<usize>)> {
        let c = &self.config;
        let d = c.width;
        let mut v: Vec<(String, &Vec<f32>, Vec<usize>)> = Vec::new();
        fn push_lin<'a>(v: &mut Vec<(String, &'a Vec<f32>, Vec<usize>)>, name: &str, l: &'a Linear) {
            v.push((format!("{name}.weight"), &l.weight, vec![l.out_dim, l.in_dim]));
            if let Some(b) = &l.bias {
                v.push((format!("{name}.bias"), b, vec![l.out_dim]));
            }
        }
        fn push_ln<'a>(v: &mut Vec<(String, &'a Vec<f32>, Vec<usize>)>, name: &str, l: &'a LayerNorm) {
            v.push((format!("{name}.weight"), &l.weight, vec![l.weight.len()]));
            v.push((format!("{name}.bias"), &l.bias, vec![l.bias.len()]));
        }
        push_lin(&mut v, "patch_embed", &self.patch_embed);
        v.push(("class_token".into(), &self.class_token, vec![d]));
        v.push(("pos_embed".into(), &self.pos_embed, vec![c.num_patches() + 1, d]));
        if let Some(l) = &self.ln_pre {
            push_ln(&mut v, "ln_pre", l);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            push_ln(&mut v, &format!("blocks.{i}.ln1"), &b.ln1);
            push_lin(&mut v, &format!("blocks.{i}.attn.qkv"), &b.qkv);
            push_lin(&mut v, &format!("blocks.{i}.attn.out"), &b.attn_out);
            push_ln(&mut v, &format!("blocks.{i}.ln2"), &b.ln2);
            push_lin(&mut v, &format!("blocks.{i}.mlp.fc1"), &b.mlp_in);
            push_lin(&mut v, &format!("blocks.{i}.mlp.fc2"), &b.mlp_out);
        }
        push_ln(&mut v, "ln_final", &self.ln_final);
        push_lin(&mut v, "proj", &self.proj);
        v
    }

    /// Writes the bundle: one FOT1 file per tensor plus `manifest.txt`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let c = &self.config;
        let mut kv = KvFile::new();
        kv.set("format", MANIFEST_FORMAT);
        kv.set("image_size", c.image_size);
        kv.set("patch_size", c.patch_size);
        kv.set("width", c.width);
        kv.set("heads", c.heads);
        kv.set("layers", c.layers);
        kv.set("embed_dim", c.embed_dim);
        kv.set("mlp_dim", c.mlp_dim);
        kv.set("ln_eps", c.ln_eps);
        kv.set("activation", c.activation.name());
        kv.set("ln_pre", c.ln_pre);
        kv.set("mean", join(&self.mean));
        kv.set("std", join(&self.std));
        for (name, data, shape) in self.named_tensors() {
            let file = format!("{name}.fot");
            write_tensor(dir.join(&file), &Tensor::from_f32(shape, data.clone())?)?;
            kv.set(format!("tensor.{name}"), file);
        }
        kv.save(dir.join(MANIFEST_FILE), "ViT weight bundle")
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = dir.join(MANIFEST_FILE);
        if !manifest.is_file() {
            return Err(Error::Config(format!("no weight manifest at {}", manifest.display())));
        }
        let kv = KvFile::load(&manifest)?;
        if kv.get("format") != Some(MANIFEST_FORMAT) {
            return Err(Error::Config(format!(
                "{}: expected format={MANIFEST_FORMAT}",
                manifest.display()
            )));
        }
        let config = ViTConfig {
            image_size: kv.parse_value("image_size")?,
            patch_size: kv.parse_value("patch_size")?,
            width: kv.parse_value("width")?,
            heads: kv.parse_value("heads")?,
            layers: kv.parse_value("layers")?,
            embed_dim: kv.parse_value("embed_dim")?,
            mlp_dim: kv.parse_value("mlp_dim")?,
            ln_eps: kv.parse_or("ln_eps", 1e-5)?,
            activation: Activation::parse(kv.get("activation").unwrap_or("quick_gelu"))?,
            ln_pre: kv.parse_or("ln_pre", false)?,
        };
        config.validate()?;
        let triple = |key: &str| -> Result<[f32; 3]> {
            let v = kv.parse_f32_list(key)?;
            <[f32; 3]>::try_from(v.as_slice())
                .map_err(|_| Error::Config(format!("{key} must have 3 values")))
        };
        let mean = triple("mean")?;
        let std = triple("std")?;
        if std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("std must be positive".into()));
        }
        let get = |name: &str| -> Result<Tensor> {
            let file = kv.require(&format!("tensor.{name}"))?;
            read_tensor(dir.join(file))
        };
        let vec_of = |name: &str| -> Result<Vec<f32>> { get(name)?.into_f32() };
        let linear = |name: &str, bias: bool| -> Result<Linear> {
            let t = get(&format!("{name}.weight"))?;
            if t.shape().len() != 2 {
                return Err(Error::Format(format!("{name}.weight must be rank 2")));
            }
            let (o, i) = (t.shape()[0], t.shape()[1]);
            let b = if bias || kv.contains(&format!("tensor.{name}.bias")) {
                Some(vec_of(&format!("{name}.bias"))?)
            } else {
                None
            };
            Ok(Linear { out_dim: o, in_dim: i, weight: t.into_f32()?, bias: b })
        };
        let layer_norm = |name: &str| -> Result<LayerNorm> {
            Ok(LayerNorm {
                weight: vec_of(&format!("{name}.weight"))?,
                bias: vec_of(&format!("{name}.bias"))?,
            })
        };
        let blocks = (0..config.layers)
            .map(|i| {
                Ok(BlockWeights {
                    ln1: layer_norm(&format!("blocks.{i}.ln1"))?,
                    qkv: linear(&format!("blocks.{i}.attn.qkv"), true)?,
                    attn_out: linear(&format!("blocks.{i}.attn.out"), true)?,
                    ln2: layer_norm(&format!("blocks.{i}.ln2"))?,
                    mlp_in: linear(&format!("blocks.{i}.mlp.fc1"), true)?,
                    mlp_out: linear(&format!("blocks.{i}.mlp.fc2"), true)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let w = ViTWeights {
            mean,
            std,
            patch_embed: linear("patch_embed", false)?,
            class_token: vec_of("class_token")?,
            pos_embed: vec_of("pos_embed")?,
            ln_pre: if config.ln_pre { Some(layer_norm("ln_pre")?) } else { None },
            blocks,
            ln_final: layer_norm("ln_final")?,
            proj: linear("proj", false)?,
            config,
        };
        w.validate()?;
        Ok(w)
    }
}

fn join(v: &[f32]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Normalized encoder input, planar `3 × S × S`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderInput {
    pub size: usize,
    pub data: Vec<f32>,
}

impl EncoderInput {
    pub fn zeros(size: usize) -> Self {
        EncoderInput { size, data: vec![0.0; 3 * size * size] }
    }
}

/// Bilinear resize (half-pixel centers) of a crop to `size × size`, then
/// per-channel normalization `(v/255 − mean)/std`.
pub fn prepare_input(crop: &Rgb8Image, size: usize, mean: [f32; 3], std: [f32; 3]) -> EncoderInput {
    let (w, h) = (crop.width, crop.height);
    let mut data = vec![0.0f32; 3 * size * size];
    let sx = w as f64 / size as f64;
    let sy = h as f64 / size as f64;
    let coords = |dst: usize, scale: f64, extent: usize| -> (usize, usize, f32) {
        let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(extent - 1);
        let i1 = (i0 + 1).min(extent - 1);
        (i0, i1, (src - i0 as f64) as f32)
    };
    for y in 0..size {
        let (y0, y1, fy) = coords(y, sy, h);
        for x in 0..size {
            let (x0, x1, fx) = coords(x, sx, w);
            let (p00, p01) = (crop.pixel(x0, y0), crop.pixel(x1, y0));
            let (p10, p11) = (crop.pixel(x0, y1), crop.pixel(x1, y1));
            for c in 0..3 {
                let top = p00[c] as f32 * (1.0 - fx) + p01[c] as f32 * fx;
                let bot = p10[c] as f32 * (1.0 - fx) + p11[c] as f32 * fx;
                let v = (top * (1.0 - fy) + bot * fy) / 255.0;
                data[c * size * size + y * size + x] = (v - mean[c]) / std[c];
            }
        }
    }
    EncoderInput { size, data }
}

/// Token activations entering or leaving a block.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenState {
    pub width: usize,
    /// Global token followed by the `M` patch tokens, `(1 + M) × d`.
    pub main: Vec<f32>,
    /// Local tokens, `N × d`.
    pub locals: Vec<f32>,
}

impl TokenState {
    pub fn global(&self) -> &[f32] {
        &self.main[..self.width]
    }

    pub fn patches(&self) -> &[f32] {
        &self.main[self.width..]
    }

    pub fn num_patches(&self) -> usize {
        self.main.len() / self.width - 1
    }

    pub fn num_locals(&self) -> usize {
        self.locals.len() / self.width
    }
}

/// Patch embedding plus positional embeddings; `n_locals` copies of the
/// initial global token are appended as local tokens.
pub fn patchify_and_embed(input: &EncoderInput, n_locals: usize, w: &ViTWeights) -> Result<TokenState> {
    let c = &w.config;
    if input.size != c.image_size || input.data.len() != 3 * c.image_size * c.image_size {
        return Err(Error::Argument(format!(
            "encoder input must be {0}x{0}, got {1}x{1}",
            c.image_size, input.size
        )));
    }
    let (s, p, g, d) = (c.image_size, c.patch_size, c.grid(), c.width);
    let m = g * g;
    let mut patches = vec![0.0f32; m * c.patch_dim()];
    for py in 0..g {
        for px in 0..g {
            let row = &mut patches[(py * g + px) * c.patch_dim()..(py * g + px + 1) * c.patch_dim()];
            let mut k = 0;
            for ch in 0..3 {
                for yy in 0..p {
                    let base = ch * s * s + (py * p + yy) * s + px * p;
                    row[k..k + p].copy_from_slice(&input.data[base..base + p]);
                    k += p;
                }
            }
        }
    }
    let embedded = w.patch_embed.forward(&patches, m);
    let mut main = vec![0.0f32; (m + 1) * d];
    for k in 0..d {
        main[k] = w.class_token[k] + w.pos_embed[k];
    }
    for i in 0..m {
        for k in 0..d {
            main[(i + 1) * d + k] = embedded[i * d + k] + w.pos_embed[(i + 1) * d + k];
        }
    }
    if let Some(ln) = &w.ln_pre {
        main = ln.apply(&main, c.ln_eps);
    }
    let locals = main[..d].repeat(n_locals);
    Ok(TokenState { width: d, main, locals })
}

/// Output of [`local_attention`].
#[derive(Clone, Debug, PartialEq)]
pub struct LocalAttention {
    /// Concatenated head outputs, length `d`.
    pub output: Vec<f32>,
    /// Softmax weights per head over the token set, `heads × |set|`.
    pub weights: Vec<f32>,
}

/// Multi-head attention of one query over the rows of `keys`/`values`
/// listed in `token_set`, softmax-normalized over that set only.
///
/// `keys` and `values` are `T × d` row-major; the score scale is
/// `1/sqrt(d/heads)`.
pub fn local_attention(query: &[f32], keys: &[f32], values: &[f32], token_set: &[usize], heads: usize) -> Result<LocalAttention> {
    let d = query.len();
    if token_set.is_empty() {
        return Err(Error::Argument("local token has an empty key set".into()));
    }
    if heads == 0 || d % heads != 0 || keys.len() != values.len() || keys.len() % d != 0 {
        return Err(Error::Argument("inconsistent attention shapes".into()));
    }
    let t = keys.len() / d;
    if let Some(&bad) = token_set.iter().find(|&&i| i >= t) {
        return Err(Error::Argument(format!("token {bad} outside {t} keys")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut output = vec![0.0f32; d];
    let mut weights = vec![0.0f32; heads * token_set.len()];
    for h in 0..heads {
        let q = &query[h * dh..(h + 1) * dh];
        let wts = &mut weights[h * token_set.len()..(h + 1) * token_set.len()];
        for (wi, &i) in wts.iter_mut().zip(token_set) {
            let k = &keys[i * d + h * dh..i * d + (h + 1) * dh];
            *wi = q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * scale;
        }
        let max = wts.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for wi in wts.iter_mut() {
            *wi = (*wi - max).exp();
            sum += *wi;
        }
        for wi in wts.iter_mut() {
            *wi /= sum;
        }
        let out = &mut output[h * dh..(h + 1) * dh];
        for (wi, &i) in wts.iter().zip(token_set) {
            let v = &values[i * d + h * dh..i * d + (h + 1) * dh];
            for (o, vv) in out.iter_mut().zip(v) {
                *o += wi * vv;
            }
        }
    }
    Ok(LocalAttention { output, weights })
}

/// Standard multi-head self-attention over all rows of `qkv` (`T × 3d`).
fn full_attention(qkv: &[f32], t: usize, d: usize, heads: usize) -> Vec<f32> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut out = vec![0.0f32; t * d];
    let mut scores = vec![0.0f32; t * t];
    for h in 0..heads {
        // SAFETY: all pointers address in-bounds strided views of qkv, scores and out.
        unsafe {
            matrixmultiply::sgemm(
                t,
                dh,
                t,
                scale,
                qkv.as_ptr().add(h * dh),
                (3 * d) as isize,
                1,
                qkv.as_ptr().add(d + h * dh),
                1,
                (3 * d) as isize,
                0.0,
                scores.as_mut_ptr(),
                t as isize,
                1,
            );
        }
        for row in scores.chunks_exact_mut(t) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        // SAFETY: as above.
        unsafe {
            matrixmultiply::sgemm(
                t,
                t,
                dh,
                1.0,
                scores.as_ptr(),
                t as isize,
                1,
                qkv.as_ptr().add(2 * d + h * dh),
                (3 * d) as isize,
                1,
                0.0,
                out.as_mut_ptr().add(h * dh),
                d as isize,
                1,
            );
        }
    }
    out
}

fn mlp(x: &[f32], rows: usize, b: &BlockWeights, act: Activation) -> Vec<f32> {
    let mut hidden = b.mlp_in.forward(x, rows);
    for v in hidden.iter_mut() {
        *v = act.apply(*v);
    }
    b.mlp_out.forward(&hidden, rows)
}

fn add_in_place(dst: &mut [f32], src: &[f32]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// One transformer block. Global and patch tokens get full self-attention
/// among themselves; local token `j` attends only to the patches in
/// `token_sets[j]`. Every token then takes the shared residual, layer norm
/// and MLP path.
pub fn attention_block_restricted(
    state: &TokenState,
    token_sets: &[Vec<usize>],
    block: &BlockWeights,
    config: &ViTConfig,
) -> Result<TokenState> {
    let d = config.width;
    let t = state.main.len() / d;
    let n = state.num_locals();
    if token_sets.len() != n {
        return Err(Error::Argument(format!(
            "{n} local tokens but {} token sets",
            token_sets.len()
        )));
    }
    let m = t - 1;

    // global + patches
    let h = block.ln1.apply(&state.main, config.ln_eps);
    let qkv = block.qkv.forward(&h, t);
    let attn = full_attention(&qkv, t, d, config.heads);
    let mut main = state.main.clone();
    add_in_place(&mut main, &block.attn_out.forward(&attn, t));
    let h2 = block.ln2.apply(&main, config.ln_eps);
    add_in_place(&mut main, &mlp(&h2, t, block, config.activation));

    // locals: queries from themselves, keys/values from their assigned patches
    let mut locals = state.locals.clone();
    if n > 0 {
        let mut keys = vec![0.0f32; m * d];
        let mut values = vec![0.0f32; m * d];
        for i in 0..m {
            let row = &qkv[(i + 1) * 3 * d..(i + 2) * 3 * d];
            keys[i * d..(i + 1) * d].copy_from_slice(&row[d..2 * d]);
            values[i * d..(i + 1) * d].copy_from_slice(&row[2 * d..]);
        }
        let hl = block.ln1.apply(&state.locals, config.ln_eps);
        let qkv_l = block.qkv.forward(&hl, n);
        let mut attn_l = vec![0.0f32; n * d];
        for (j, set) in token_sets.iter().enumerate() {
            let q = &qkv_l[j * 3 * d..j * 3 * d + d];
            let a = local_attention(q, &keys, &values, set, config.heads)?;
            attn_l[j * d..(j + 1) * d].copy_from_slice(&a.output);
        }
        add_in_place(&mut locals, &block.attn_out.forward(&attn_l, n));
        let hl2 = block.ln2.apply(&locals, config.ln_eps);
        add_in_place(&mut locals, &mlp(&hl2, n, block, config.activation));
    }
    Ok(TokenState { width: d, main, locals })
}

/// Runs every block; returns the final state and, when `trace` is set, the
/// state after each block.
pub fn forward_tokens(
    input: &EncoderInput,
    token_sets: &[Vec<usize>],
    w: &ViTWeights,
    trace: bool,
) -> Result<(TokenState, Vec<TokenState>)> {
    let m = w.config.num_patches();
    for (j, set) in token_sets.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::Argument(format!("local token {j} has no assigned patches")));
        }
        if set.iter().any(|&i| i >= m) {
            return Err(Error::Argument(format!("local token {j} references a patch >= {m}")));
        }
    }
    let mut state = patchify_and_embed(input, token_sets.len(), w)?;
    let mut layers = Vec::new();
    for block in &w.blocks {
        state = attention_block_restricted(&state, token_sets, block, &w.config)?;
        if trace {
            layers.push(state.clone());
        }
    }
    Ok((state, layers))
}

/// Final layer norm and projection applied to `rows` tokens.
pub fn project_tokens(tokens: &[f32], rows: usize, w: &ViTWeights) -> Vec<f32> {
    let normed = w.ln_final.apply(tokens, w.config.ln_eps);
    w.proj.forward(&normed, rows)
}

#[derive(Clone, Debug)]
pub struct LocalFeatures {
    /// `N × embed_dim`, one row per super-pixel, unnormalized.
    pub superpixel_features: Vec<f32>,
    pub global_feature: Vec<f32>,
    pub assignment: PatchAssignment,
}

/// Full forward of one crop: upsample, assign patches to the crop's
/// super-pixels and read out one embedding per super-pixel.
pub fn forward_with_local_tokens(crop: &Rgb8Image, spmap: &SuperpixelMap, w: &ViTWeights) -> Result<LocalFeatures> {
    if spmap.width != crop.width || spmap.height != crop.height {
        return Err(Error::Argument("superpixel map does not match the crop".into()));
    }
    let assignment = assign_patches(spmap, w.config.grid())?;
    let input = prepare_input(crop, w.config.image_size, w.mean, w.std);
    let (state, _) = forward_tokens(&input, &assignment.token_sets, w, false)?;
    let global_feature = project_tokens(state.global(), 1, w);
    let superpixel_features = project_tokens(&state.locals, state.num_locals(), w);
    Ok(LocalFeatures { superpixel_features, global_feature, assignment })
}

/// Paints every pixel with its super-pixel's feature row.
pub fn broadcast_superpixel_features(features: &[f32], channels: usize, spmap: &SuperpixelMap) -> Result<FeatureMap> {
    if channels == 0 || features.len() != spmap.n_segments * channels {
        return Err(Error::Argument(format!(
            "{} feature values for {} segments of {channels} channels",
            features.len(),
            spmap.n_segments
        )));
    }
    let mut data = Vec::with_capacity(spmap.labels.len() * channels);
    for &l in &spmap.labels {
        if l < 0 || l as usize >= spmap.n_segments {
            return Err(Error::Data(format!("label {l} out of range")));
        }
        data.extend_from_slice(&features[l as usize * channels..(l as usize + 1) * channels]);
    }
    FeatureMap::new(spmap.width, spmap.height, channels, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> ViTConfig {
        ViTConfig {
            image_size: 16,
            patch_size: 4,
            width: 8,
            heads: 2,
            layers: 2,
            embed_dim: 6,
            mlp_dim: 16,
            ln_eps: 1e-5,
            activation: Activation::QuickGelu,
            ln_pre: true,
        }
    }

    fn random_input(size: usize, seed: u64) -> EncoderInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EncoderInput { size, data: (0..3 * size * size).map(|_| rng.gen_range(-2.0..2.0)).collect() }
    }

    #[test]
    fn zero_image_gives_positional_embeddings() {
        let mut w = ViTWeights::random(ViTConfig { ln_pre: false, ..toy_config() }, 1).unwrap();
        w.patch_embed.weight.iter_mut().for_each(|v| *v = 0.0);
        let s = patchify_and_embed(&EncoderInput::zeros(16), 0, &w).unwrap();
        assert_eq!(s.patches(), &w.pos_embed[8..]);
        assert!(s.locals.is_empty());
    }

    #[test]
    fn wrong_input_size_rejected() {
        let w = ViTWeights::random(toy_config(), 1).unwrap();
        assert!(matches!(
            patchify_and_embed(&EncoderInput::zeros(15), 0, &w),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn locals_start_as_global_copies() {
        let w = ViTWeights::random(toy_config(), 2).unwrap();
        let s = patchify_and_embed(&random_input(16, 1), 3, &w).unwrap();
        for j in 0..3 {
            assert_eq!(&s.locals[j * 8..(j + 1) * 8], s.global());
        }
    }

    #[test]
    fn singleton_set_returns_value_row() {
        let keys = vec![0.3f32, -1.0, 2.0, 0.5, 9.0, 1.0, 1.0, 1.0];
        let values = vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let a = local_attention(&[1.0, 2.0, 3.0, 4.0], &keys, &values, &[1], 2).unwrap();
        assert_eq!(a.output, vec![5.0, 6.0, 7.0, 8.0]);
        assert_eq!(a.weights, vec![1.0, 1.0]);
    }

    #[test]
    fn equal_scores_average_values() {
        let keys = vec![1.0f32; 3 * 2];
        let values = vec![1.0f32, 0.0, 3.0, 3.0, 5.0, -3.0];
        let a = local_attention(&[0.2, 0.2], &keys, &values, &[0, 1, 2], 1).unwrap();
        for (o, e) in a.output.iter().zip([3.0f32, 0.0]) {
            assert!((o - e).abs() < 1e-6);
        }
    }

    #[test]
    fn two_patch_weights_match_closed_form() {
        // head dim 4: q·k1/2 = 1, q·k2/2 = 0
        let q = [2.0f32, 0.0, 0.0, 0.0];
        let keys = [1.0f32, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let values = [1.0f32, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let a = local_attention(&q, &keys, &values, &[0, 1], 1).unwrap();
        let e = std::f64::consts::E;
        let (w1, w2) = (e / (e + 1.0), 1.0 / (e + 1.0));
        assert!((a.weights[0] as f64 - w1).abs() < 1e-6);
        assert!((a.weights[1] as f64 - w2).abs() < 1e-6);
        assert!((a.output[0] as f64 - w1).abs() < 1e-6 && (a.output[1] as f64 - w2).abs() < 1e-6);
    }

    #[test]
    fn empty_set_is_contract_violation() {
        assert!(local_attention(&[1.0], &[1.0], &[1.0], &[], 1).is_err());
    }

    #[test]
    fn locals_do_not_touch_main_path() {
        let w = ViTWeights::random(toy_config(), 5).unwrap();
        let input = random_input(16, 9);
        let (base, base_layers) = forward_tokens(&input, &[], &w, true).unwrap();
        let sets = vec![vec![0, 1, 2], vec![15], (0..16).collect::<Vec<_>>()];
        let (with, with_layers) = forward_tokens(&input, &sets, &w, true).unwrap();
        assert_eq!(base.main, with.main);
        for (a, b) in base_layers.iter().zip(&with_layers) {
            assert_eq!(a.main, b.main);
        }
    }

    #[test]
    fn identical_sets_give_identical_rows_and_permutation_equivariance() {
        let w = ViTWeights::random(toy_config(), 6).unwrap();
        let input = random_input(16, 3);
        let sets = vec![vec![1, 4, 5], vec![7, 8], vec![1, 4, 5], vec![0]];
        let (s, _) = forward_tokens(&input, &sets, &w, false).unwrap();
        let row = |st: &TokenState, j: usize| st.locals[j * 8..(j + 1) * 8].to_vec();
        assert_eq!(row(&s, 0), row(&s, 2));
        let perm = [3usize, 0, 1, 2];
        let psets: Vec<Vec<usize>> = perm.iter().map(|&p| sets[p].clone()).collect();
        let (ps, _) = forward_tokens(&input, &psets, &w, false).unwrap();
        for (j, &p) in perm.iter().enumerate() {
            assert_eq!(row(&ps, j), row(&s, p));
        }
    }

    #[test]
    fn bundle_round_trip_is_bit_exact() {
        let w = ViTWeights::random(toy_config(), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        w.save(dir.path()).unwrap();
        assert_eq!(ViTWeights::load(dir.path()).unwrap(), w);
    }

    #[test]
    fn missing_manifest_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(ViTWeights::load(dir.path()), Err(Error::Config(_))));
    }

    #[test]
    fn broadcast_paints_segments() {
        let map = SuperpixelMap::from_labels(3, 2, vec![0, 0, 1, 1, 0, 1]).unwrap();
        let fm = broadcast_superpixel_features(&[1.0, 0.0, 0.0, 1.0], 2, &map).unwrap();
        assert_eq!(fm.at(0, 0), &[1.0, 0.0]);
        assert_eq!(fm.at(2, 0), &[0.0, 1.0]);
        assert_eq!(fm.at(1, 1), &[1.0, 0.0]);
        // per-segment mean recovers the rows
        for seg in 0..2 {
            let px: Vec<&[f32]> = (0..6)
                .filter(|&i| map.labels[i] == seg)
                .map(|i| fm.at(i % 3, i / 3))
                .collect();
            let mean: Vec<f32> = (0..2).map(|k| px.iter().map(|p| p[k]).sum::<f32>() / px.len() as f32).collect();
            assert_eq!(mean, [[1.0, 0.0], [0.0, 1.0]][seg as usize]);
        }
        let one = SuperpixelMap::from_labels(2, 2, vec![0; 4]).unwrap();
        let c = broadcast_superpixel_features(&[0.5, 0.25], 2, &one).unwrap();
        assert!(c.data.chunks(2).all(|p| p == [0.5, 0.25]));
        assert!(broadcast_superpixel_features(&[1.0], 2, &one).is_err());
    }

    #[test]
    fn prepare_input_of_constant_crop_is_constant() {
        let crop = Rgb8Image::filled(37, 23, [51, 102, 204]);
        let inp = prepare_input(&crop, 16, [0.0; 3], [1.0; 3]);
        for c in 0..3 {
            let expect = [51.0f32, 102.0, 204.0][c] / 255.0;
            assert!(inp.data[c * 256..(c + 1) * 256].iter().all(|&v| (v - expect).abs() < 1e-6));
        }
    }
}
