//! Planted RGB-D scenes and a hand-built toy encoder whose features are
//! separable by construction.
//!
//! The scene is a gray back wall with five coloured panels in front of it.
//! Each panel colour sits on one signed axis of RGB around the encoder's
//! normalization mean, so the toy encoder maps it to a distinct direction
//! while gray maps to the zero vector. Panel points carry class labels; wall
//! points carry −1.

use std::path::Path;

use crate::openvocab::{ClassInfo, LabelSet, Split};
use crate::tensorio::{write_frame, write_ply, DepthMap, Frame, Intrinsics, PointCloud, Pose, Rgb8Image, Tensor};
use crate::vit_local::{
    forward_with_local_tokens, Activation, BlockWeights, LayerNorm, Linear, ViTConfig, ViTWeights,
};
use crate::superpixel::SuperpixelMap;
use crate::{Error, Result};

pub const WALL_GRAY: [u8; 3] = [128, 128, 128];

/// A flat rectangle facing the cameras at constant world `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct Panel {
    pub center: [f32; 2],
    pub half_size: [f32; 2],
    pub z: f32,
    pub color: [u8; 3],
    /// Class id, or −1 for background.
    pub label: i32,
}

impl Panel {
    fn contains(&self, x: f64, y: f64) -> bool {
        (x - self.center[0] as f64).abs() <= self.half_size[0] as f64
            && (y - self.center[1] as f64).abs() <= self.half_size[1] as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlantedSceneConfig {
    pub width: usize,
    pub height: usize,
    pub focal: f32,
    /// Camera x positions; each camera yaws slightly toward the scene centre.
    pub camera_x: Vec<f32>,
    /// Spacing of sampled points on panels and wall.
    pub panel_spacing: f32,
    pub wall_spacing: f32,
    /// Distance kept between sampled panel points and panel edges.
    pub edge_margin: f32,
}

impl Default for PlantedSceneConfig {
    fn default() -> Self {
        PlantedSceneConfig {
            width: 192,
            height: 144,
            focal: 160.0,
            camera_x: vec![-0.3, 0.0, 0.3],
            panel_spacing: 0.025,
            wall_spacing: 0.1,
            edge_margin: 0.06,
        }
    }
}

/// Class names and colours of the five planted classes.
pub const PLANTED_CLASSES: [(&str, [u8; 3]); 5] = [
    ("red", [255, 128, 128]),
    ("cyan", [0, 128, 128]),
    ("green", [128, 255, 128]),
    ("magenta", [128, 0, 128]),
    ("blue", [128, 128, 255]),
];

pub fn planted_panels() -> Vec<Panel> {
    let layout = [[-0.75f32, -0.4], [0.0, -0.4], [0.75, -0.4], [-0.4, 0.4], [0.4, 0.4]];
    let mut panels: Vec<Panel> = layout
        .iter()
        .zip(PLANTED_CLASSES)
        .enumerate()
        .map(|(i, (&c, (_, color)))| Panel { center: c, half_size: [0.225, 0.225], z: 2.0, color, label: i as i32 })
        .collect();
    panels.push(Panel { center: [0.0, 0.0], half_size: [2.5, 2.0], z: 3.0, color: WALL_GRAY, label: -1 });
    panels
}

pub fn planted_label_set() -> LabelSet {
    LabelSet {
        classes: PLANTED_CLASSES
            .iter()
            .enumerate()
            .map(|(i, (name, _))| ClassInfo {
                name: name.to_string(),
                group: None,
                split: Some(if i < 3 { Split::Seen } else { Split::Unseen }),
            })
            .collect(),
        ignore: vec!["wall".into()],
    }
}

fn yaw_pose(x: f32, yaw: f32) -> Pose {
    let (s, c) = yaw.sin_cos();
    Pose::from_rt([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]], [x, 0.0, 0.0])
}

/// Ray-casts colour and depth for one camera over the given panels.
pub fn render_view(id: u32, pose: Pose, intrinsics: Intrinsics, width: usize, height: usize, panels: &[Panel]) -> Result<Frame> {
    let mut image = Rgb8Image::filled(width, height, [0, 0, 0]);
    let mut depth = vec![0u16; width * height];
    let m = pose.0;
    let k = intrinsics;
    for v in 0..height {
        for u in 0..width {
            let d_cam = [(u as f64 - k.cx as f64) / k.fx as f64, (v as f64 - k.cy as f64) / k.fy as f64, 1.0];
            let dir: [f64; 3] = std::array::from_fn(|r| (0..3).map(|c| m[r][c] as f64 * d_cam[c]).sum());
            let origin = [m[0][3] as f64, m[1][3] as f64, m[2][3] as f64];
            let mut best: Option<(f64, &Panel)> = None;
            for p in panels {
                if dir[2].abs() < 1e-12 {
                    continue;
                }
                let s = (p.z as f64 - origin[2]) / dir[2];
                if s <= 0.0 {
                    continue;
                }
                let (x, y) = (origin[0] + s * dir[0], origin[1] + s * dir[1]);
                if p.contains(x, y) && best.is_none_or(|(b, _)| s < b) {
                    best = Some((s, p));
                }
            }
            if let Some((s, p)) = best {
                image.put(u, v, p.color);
                // camera-space depth equals the ray parameter because d_cam.z = 1
                depth[v * width + u] = (s * 1000.0).round().clamp(1.0, u16::MAX as f64) as u16;
            }
        }
    }
    Ok(Frame { id, image, depth: DepthMap::new(width, height, depth)?, pose, intrinsics })
}

fn grid_points(panel: &Panel, spacing: f32, margin: f32) -> Vec<[f32; 3]> {
    let span = |a: usize| 2.0 * (panel.half_size[a] - margin);
    let (nx, ny) = ((span(0) / spacing).floor() as usize + 1, (span(1) / spacing).floor() as usize + 1);
    let mut pts = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let x = panel.center[0] - panel.half_size[0] + margin + i as f32 * spacing;
            let y = panel.center[1] - panel.half_size[1] + margin + j as f32 * spacing;
            pts.push([x, y, panel.z]);
        }
    }
    pts
}

#[derive(Clone, Debug)]
pub struct PlantedScene {
    pub frames: Vec<Frame>,
    /// Points with colours and ground-truth labels.
    pub cloud: PointCloud,
    pub panels: Vec<Panel>,
    pub label_set: LabelSet,
}

pub fn planted_scene(cfg: &PlantedSceneConfig) -> Result<PlantedScene> {
    let panels = planted_panels();
    let intrinsics = Intrinsics::new(
        cfg.focal,
        cfg.focal,
        (cfg.width as f32 - 1.0) / 2.0,
        (cfg.height as f32 - 1.0) / 2.0,
    )?;
    let frames = cfg
        .camera_x
        .iter()
        .enumerate()
        .map(|(i, &x)| render_view(i as u32 * 10, yaw_pose(x, -x * 0.15), intrinsics, cfg.width, cfg.height, &panels))
        .collect::<Result<Vec<_>>>()?;
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    let mut labels = Vec::new();
    for p in &panels {
        let pts = if p.label < 0 {
            let visible = Panel { half_size: [1.6, 1.2], ..p.clone() };
            grid_points(&visible, cfg.wall_spacing, 0.0)
        } else {
            grid_points(p, cfg.panel_spacing, cfg.edge_margin)
        };
        colors.extend(std::iter::repeat(p.color).take(pts.len()));
        labels.extend(std::iter::repeat(p.label).take(pts.len()));
        positions.extend(pts);
    }
    let cloud = PointCloud { positions, colors: Some(colors), labels: Some(labels) };
    cloud.validate()?;
    Ok(PlantedScene { frames, cloud, panels, label_set: planted_label_set() })
}

/// One-layer encoder with uniform attention and identity value paths.
///
/// The patch embedding maps the mean normalized colour `(r, g, b)` of a patch
/// to `(r, g, b, −r, −g, −b, 0, 0)`, which has zero mean, so every layer norm
/// only rescales it. Queries and keys are zero, giving uniform attention over
/// each token set; values and the output projection are identities and the
/// MLP is zero. A local token therefore ends up along the mean direction of
/// its super-pixel's patches.
pub fn planted_vit() -> ViTWeights {
    let (p, d) = (4usize, 8usize);
    let config = ViTConfig {
        image_size: 32,
        patch_size: p,
        width: d,
        heads: 2,
        layers: 1,
        embed_dim: d,
        mlp_dim: 8,
        ln_eps: 1e-6,
        activation: Activation::QuickGelu,
        ln_pre: false,
    };
    let mut patch_embed = Linear::zeros(d, config.patch_dim(), false);
    let inv = 1.0 / (p * p) as f32;
    for c in 0..3 {
        for i in 0..p * p {
            patch_embed.weight[c * config.patch_dim() + c * p * p + i] = inv;
            patch_embed.weight[(c + 3) * config.patch_dim() + c * p * p + i] = -inv;
        }
    }
    let identity = |n: usize| {
        let mut l = Linear::zeros(n, n, true);
        for i in 0..n {
            l.weight[i * n + i] = 1.0;
        }
        l
    };
    let mut qkv = Linear::zeros(3 * d, d, true);
    for i in 0..d {
        qkv.weight[(2 * d + i) * d + i] = 1.0;
    }
    let block = BlockWeights {
        ln1: LayerNorm::identity(d),
        qkv,
        attn_out: identity(d),
        ln2: LayerNorm::identity(d),
        mlp_in: Linear::zeros(config.mlp_dim, d, true),
        mlp_out: Linear::zeros(d, config.mlp_dim, true),
    };
    let mut proj = identity(d);
    proj.bias = None;
    ViTWeights {
        mean: [128.0 / 255.0; 3],
        std: [0.5; 3],
        patch_embed,
        class_token: vec![0.0; d],
        pos_embed: vec![0.0; (config.num_patches() + 1) * d],
        ln_pre: None,
        blocks: vec![block],
        ln_final: LayerNorm::identity(d),
        proj,
        config,
    }
}

/// Stand-in for text prompts: each class is "described" by solid images of
/// its colour at a few intensities, encoded as a single super-pixel.
/// Returns a `K × P × C` tensor.
pub fn planted_prompt_embeddings(weights: &ViTWeights) -> Result<Tensor> {
    let shades = [1.0f32, 0.8, 0.6];
    let size = 32;
    let one = SuperpixelMap::from_labels(size, size, vec![0; size * size])?;
    let c = weights.config.embed_dim;
    let mut data = Vec::with_capacity(PLANTED_CLASSES.len() * shades.len() * c);
    for (_, color) in PLANTED_CLASSES {
        for s in shades {
            let shade = color.map(|v| (128.0 + (v as f32 - 128.0) * s).round() as u8);
            let img = Rgb8Image::filled(size, size, shade);
            let f = forward_with_local_tokens(&img, &one, weights)?;
            data.extend_from_slice(&f.superpixel_features);
        }
    }
    Tensor::from_f32(vec![PLANTED_CLASSES.len(), shades.len(), c], data)
}

/// Writes the scene folder: frames, `cloud.ply`, `labels.txt`,
/// `embeddings.fot` and the encoder bundle under `weights/`.
pub fn write_planted_scene(dir: impl AsRef<Path>, scene: &PlantedScene, weights: &ViTWeights) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for f in &scene.frames {
        write_frame(dir, f)?;
    }
    write_ply(dir.join("cloud.ply"), &scene.cloud)?;
    let labels = dir.join("labels.txt");
    std::fs::write(&labels, scene.label_set.to_text()).map_err(|e| Error::io(&labels, e))?;
    crate::tensorio::write_tensor(dir.join("embeddings.fot"), &planted_prompt_embeddings(weights)?)?;
    weights.save(dir.join("weights"))
}
