//! Point-to-pixel projection, depth-consistency filtering and multi-view
//! averaging of pixel features into per-point targets.
//!
//! Points are stored in world coordinates, so the world-to-grid transform of
//! voxel-based pipelines is the identity here. Intrinsics refer to the depth
//! image; feature maps may have any resolution and are sampled by nearest
//! neighbour after rescaling.

use std::path::Path;

use rayon::prelude::*;

use crate::features::FeatureMap;
use crate::tensorio::{read_tensor, write_tensor, DepthMap, Frame, Intrinsics, Pose, Tensor};
use crate::{Error, Result};

/// Depths at or below this are treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;
pub const DEFAULT_TAU: f32 = 0.10;

/// Projected pixel coordinates and camera-space depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelProjection {
    pub u: f64,
    pub v: f64,
    pub z: f64,
}

/// Projects world points into one camera.
#[derive(Clone, Debug)]
pub struct CameraProjector {
    world_to_cam: [[f64; 4]; 4],
    intrinsics: Intrinsics,
}

impl CameraProjector {
    pub fn new(pose: &Pose, intrinsics: &Intrinsics) -> Result<Self> {
        intrinsics.validate()?;
        Ok(CameraProjector { world_to_cam: pose.inverse_f64()?, intrinsics: *intrinsics })
    }

    pub fn project(&self, p: [f32; 3]) -> Option<PixelProjection> {
        let m = &self.world_to_cam;
        let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
        let c: [f64; 3] = std::array::from_fn(|r| m[r][0] * x + m[r][1] * y + m[r][2] * z + m[r][3]);
        if c[2] <= MIN_DEPTH {
            return None;
        }
        let k = &self.intrinsics;
        Some(PixelProjection {
            u: k.fx as f64 * c[0] / c[2] + k.cx as f64,
            v: k.fy as f64 * c[1] / c[2] + k.cy as f64,
            z: c[2],
        })
    }
}

/// `None` when the point is behind the camera.
pub fn project_point(p_world: [f32; 3], pose: &Pose, intrinsics: &Intrinsics) -> Result<Option<PixelProjection>> {
    Ok(CameraProjector::new(pose, intrinsics)?.project(p_world))
}

/// Inverse of [`project_point`]: the world point seen at pixel `(u, v)` with depth `z`.
pub fn unproject(u: f64, v: f64, z: f64, pose: &Pose, intrinsics: &Intrinsics) -> [f64; 3] {
    let k = intrinsics;
    let c = [(u - k.cx as f64) * z / k.fx as f64, (v - k.cy as f64) * z / k.fy as f64, z];
    let m = &pose.0;
    std::array::from_fn(|r| {
        m[r][0] as f64 * c[0] + m[r][1] as f64 * c[1] + m[r][2] as f64 * c[2] + m[r][3] as f64
    })
}

/// Nearest depth pixel of a projection, if inside the image.
pub fn depth_pixel(u: f64, v: f64, width: usize, height: usize) -> Option<(usize, usize)> {
    let (x, y) = (u.round(), v.round());
    if x < 0.0 || y < 0.0 || x >= width as f64 || y >= height as f64 {
        return None;
    }
    Some((x as usize, y as usize))
}

/// True when `(u, v)` lands on a valid depth pixel whose depth is within `tau` of `z`.
pub fn depth_filter(z: f64, u: f64, v: f64, depth: &DepthMap, tau: f32) -> bool {
    let Some((x, y)) = depth_pixel(u, v, depth.width, depth.height) else {
        return false;
    };
    match depth.raw(x, y) {
        0 => false,
        mm => (z - mm as f64 / 1000.0).abs() <= tau as f64,
    }
}

/// Per (point, view) projection outcome.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Visibility {
    pub valid: bool,
    pub u: f64,
    pub v: f64,
    pub z: f64,
}

impl Visibility {
    const HIDDEN: Visibility = Visibility { valid: false, u: f64::NAN, v: f64::NAN, z: f64::NAN };
}

pub fn compute_visibility(points: &[[f32; 3]], frame: &Frame, tau: f32) -> Result<Vec<Visibility>> {
    if !(tau > 0.0) {
        return Err(Error::Argument(format!("depth tolerance must be positive, got {tau}")));
    }
    let cam = CameraProjector::new(&frame.pose, &frame.intrinsics)?;
    Ok(points
        .iter()
        .map(|&p| match cam.project(p) {
            Some(pp) => Visibility {
                valid: depth_filter(pp.z, pp.u, pp.v, &frame.depth, tau),
                u: pp.u,
                v: pp.v,
                z: pp.z,
            },
            None => Visibility::HIDDEN,
        })
        .collect())
}

/// Feature-map pixel for a depth-resolution projection.
pub fn feature_pixel(u: f64, v: f64, depth: &DepthMap, fmap: &FeatureMap) -> (usize, usize) {
    let rescale = |c: f64, from: usize, to: usize| -> usize {
        let t = ((c + 0.5) * to as f64 / from as f64 - 0.5).round();
        t.clamp(0.0, (to - 1) as f64) as usize
    };
    (rescale(u, depth.width, fmap.width), rescale(v, depth.height, fmap.height))
}

/// Per-point averaged features with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetFeatures {
    pub channels: usize,
    /// `N × C`; invalid rows are zero.
    pub features: Vec<f32>,
    pub view_count: Vec<u32>,
    pub valid_mask: Vec<bool>,
}

pub const TARGET_FEATURES_FILE: &str = "features.fot";
pub const TARGET_COUNT_FILE: &str = "view_count.fot";

impl TargetFeatures {
    pub fn from_parts(channels: usize, features: Vec<f32>, view_count: Vec<u32>) -> Result<Self> {
        if channels == 0 || features.len() != view_count.len() * channels {
            return Err(Error::Argument(format!(
                "{} feature values for {} points of {channels} channels",
                features.len(),
                view_count.len()
            )));
        }
        let valid_mask = view_count.iter().map(|&c| c > 0).collect();
        Ok(TargetFeatures { channels, features, view_count, valid_mask })
    }

    pub fn len(&self) -> usize {
        self.view_count.len()
    }

    pub fn is_empty(&self) -> bool {
        self.view_count.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    pub fn num_valid(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        write_tensor(
            dir.join(TARGET_FEATURES_FILE),
            &Tensor::from_f32(vec![self.len(), self.channels], self.features.clone())?,
        )?;
        let counts = self.view_count.iter().map(|&c| c as i32).collect();
        write_tensor(dir.join(TARGET_COUNT_FILE), &Tensor::from_i32(vec![self.len()], counts)?)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let f = read_tensor(dir.join(TARGET_FEATURES_FILE))?;
        if f.shape().len() != 2 {
            return Err(Error::Format(format!("target features must be rank 2, got {:?}", f.shape())));
        }
        let (n, c) = (f.shape()[0], f.shape()[1]);
        let counts = read_tensor(dir.join(TARGET_COUNT_FILE))?;
        counts.expect_shape(&[n], "view_count")?;
        let counts = counts
            .into_i32()?
            .into_iter()
            .map(|v| u32::try_from(v).map_err(|_| Error::Format(format!("negative view count {v}"))))
            .collect::<Result<Vec<_>>>()?;
        let t = TargetFeatures::from_parts(c, f.into_f32()?, counts)?;
        for i in 0..n {
            if !t.valid_mask[i] && t.row(i).iter().any(|&v| v != 0.0) {
                return Err(Error::Format(format!("row {i} has no views but nonzero features")));
            }
        }
        Ok(t)
    }
}

/// Streaming accumulator over views; sums in f64.
#[derive(Clone, Debug)]
pub struct TargetAccumulator {
    channels: usize,
    sums: Vec<f64>,
    counts: Vec<u32>,
}

impl TargetAccumulator {
    pub fn new(num_points: usize, channels: usize) -> Self {
        TargetAccumulator { channels, sums: vec![0.0; num_points * channels], counts: vec![0; num_points] }
    }

    /// Adds every depth-consistent point-pixel pair of one view.
    pub fn add_view(&mut self, vis: &[Visibility], depth: &DepthMap, fmap: &FeatureMap) -> Result<()> {
        if fmap.channels != self.channels {
            return Err(Error::Argument(format!(
                "feature map has {} channels, expected {}",
                fmap.channels, self.channels
            )));
        }
        if vis.len() != self.counts.len() {
            return Err(Error::Argument("visibility length does not match point count".into()));
        }
        let c = self.channels;
        for (i, v) in vis.iter().enumerate() {
            if !v.valid {
                continue;
            }
            let (x, y) = feature_pixel(v.u, v.v, depth, fmap);
            for (s, &f) in self.sums[i * c..(i + 1) * c].iter_mut().zip(fmap.at(x, y)) {
                *s += f as f64;
            }
            self.counts[i] += 1;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<TargetFeatures> {
        let c = self.channels;
        let mut features = vec![0.0f32; self.sums.len()];
        for (i, &n) in self.counts.iter().enumerate() {
            if n > 0 {
                for k in 0..c {
                    features[i * c + k] = (self.sums[i * c + k] / n as f64) as f32;
                }
            }
        }
        TargetFeatures::from_parts(c, features, self.counts)
    }
}

/// Averages the depth-consistent pixel features of every view per point.
/// Views are accumulated in frame-id order, so the input order is irrelevant.
pub fn fuse_multiview(points: &[[f32; 3]], views: &[(&Frame, &FeatureMap)], tau: f32) -> Result<TargetFeatures> {
    if views.is_empty() {
        return Err(Error::Argument("no views supplied".into()));
    }
    let channels = views[0].1.channels;
    if let Some((f, _)) = views.iter().find(|(_, m)| m.channels != channels) {
        return Err(Error::Argument(format!("frame {} has a different channel count", f.id)));
    }
    let mut order: Vec<usize> = (0..views.len()).collect();
    order.sort_by_key(|&i| views[i].0.id);
    if order.windows(2).any(|w| views[w[0]].0.id == views[w[1]].0.id) {
        return Err(Error::Argument("duplicate frame ids".into()));
    }
    let visibility = order
        .par_iter()
        .map(|&i| compute_visibility(points, views[i].0, tau))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = TargetAccumulator::new(points.len(), channels);
    for (vis, &i) in visibility.iter().zip(&order) {
        acc.add_view(vis, &views[i].0.depth, views[i].1)?;
    }
    acc.finish()
}
