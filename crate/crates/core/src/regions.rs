//! Multi-scale crops, patch to super-pixel assignment and feature stitching.

use crate::features::FeatureMap;
use crate::superpixel::SuperpixelMap;
use crate::{Error, Result};

/// Smallest crop side accepted by [`generate_crops`].
pub const MIN_CROP_SIDE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CropSpec {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    pub scale_level: usize,
}

impl CropSpec {
    /// Canonical accumulation order: scale-major, then row-major.
    pub fn order_key(&self) -> (usize, usize, usize, usize, usize) {
        (self.scale_level, self.y0, self.x0, self.h, self.w)
    }
}

fn window_offsets(extent: usize, size: usize, stride: f64) -> Vec<usize> {
    let mut offs = Vec::new();
    let mut i = 0usize;
    loop {
        let off = (i as f64 * stride).round() as usize;
        if off + size >= extent {
            break;
        }
        offs.push(off);
        i += 1;
    }
    // final window clamped to the far edge
    offs.push(extent - size);
    offs.dedup();
    offs
}

/// Sliding windows for every scale, with the last window of each row and
/// column clamped to the view edge so the union always covers the view.
pub fn generate_crops(view_w: usize, view_h: usize, scales: &[f32], stride_frac: f32) -> Result<Vec<CropSpec>> {
    if view_w < MIN_CROP_SIDE || view_h < MIN_CROP_SIDE {
        return Err(Error::Argument(format!(
            "view {view_w}x{view_h} is smaller than the {MIN_CROP_SIDE}px minimum crop"
        )));
    }
    if !(stride_frac > 0.0 && stride_frac <= 1.0) {
        return Err(Error::Argument(format!("stride fraction {stride_frac} not in (0, 1]")));
    }
    if scales.is_empty() {
        return Err(Error::Argument("no crop scales given".into()));
    }
    let mut crops = Vec::new();
    for (level, &s) in scales.iter().enumerate() {
        if !(s > 0.0 && s <= 1.0) {
            return Err(Error::Argument(format!("crop scale {s} not in (0, 1]")));
        }
        let cw = ((s as f64 * view_w as f64).round() as usize).min(view_w);
        let ch = ((s as f64 * view_h as f64).round() as usize).min(view_h);
        if cw < MIN_CROP_SIDE || ch < MIN_CROP_SIDE {
            log::warn!("crop scale {s} gives a {cw}x{ch} window below {MIN_CROP_SIDE}px; skipped");
            continue;
        }
        let sx = (stride_frac as f64 * cw as f64).max(1.0);
        let sy = (stride_frac as f64 * ch as f64).max(1.0);
        for &y0 in &window_offsets(view_h, ch, sy) {
            for &x0 in &window_offsets(view_w, cw, sx) {
                let c = CropSpec { x0, y0, w: cw, h: ch, scale_level: level };
                if !crops.iter().any(|o: &CropSpec| o.x0 == x0 && o.y0 == y0 && o.w == cw && o.h == ch) {
                    crops.push(c);
                }
            }
        }
    }
    if crops.is_empty() {
        return Err(Error::Argument("every crop scale was below the minimum size".into()));
    }
    Ok(crops)
}

/// Encoder patches mapped onto the super-pixels of one crop.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchAssignment {
    /// Patches per side; `M = grid²`.
    pub grid: usize,
    /// Super-pixel id of every patch, row-major over the patch grid.
    pub patch_to_superpixel: Vec<i32>,
    /// Patch indices attending to each super-pixel's local token. Never empty.
    pub token_sets: Vec<Vec<usize>>,
    /// Segments that won no patch by majority and use their centroid patch.
    pub zero_patch: Vec<bool>,
}

impl PatchAssignment {
    pub fn num_patches(&self) -> usize {
        self.grid * self.grid
    }
}

/// Native-crop pixel column/row owning encoder patch index `p` along one axis.
#[inline]
fn patch_of(pixel: usize, extent: usize, grid: usize) -> usize {
    (((pixel as f64 + 0.5) * grid as f64 / extent as f64) as usize).min(grid - 1)
}

/// Majority-vote assignment of each patch's native footprint; ties go to the
/// smallest label. Segments left without patches get the patch holding their
/// centroid as a singleton token set.
pub fn assign_patches(spmap: &SuperpixelMap, grid: usize) -> Result<PatchAssignment> {
    if grid == 0 {
        return Err(Error::Argument("patch grid must be >= 1".into()));
    }
    let (w, h, n) = (spmap.width, spmap.height, spmap.n_segments);
    let m = grid * grid;
    let mut votes = vec![0u32; m * n];
    for y in 0..h {
        let py = patch_of(y, h, grid);
        for x in 0..w {
            let px = patch_of(x, w, grid);
            let l = spmap.labels[y * w + x];
            if l < 0 || l as usize >= n {
                return Err(Error::Argument(format!("label {l} outside [0, {n})")));
            }
            votes[(py * grid + px) * n + l as usize] += 1;
        }
    }
    let mut patch_to_superpixel = Vec::with_capacity(m);
    for p in 0..m {
        let row = &votes[p * n..(p + 1) * n];
        let best = if row.iter().all(|&v| v == 0) {
            // footprint smaller than a pixel: sample the pixel under the patch center
            let (px, py) = (p % grid, p / grid);
            let x = (((px as f64 + 0.5) * w as f64 / grid as f64) as usize).min(w - 1);
            let y = (((py as f64 + 0.5) * h as f64 / grid as f64) as usize).min(h - 1);
            spmap.labels[y * w + x] as usize
        } else {
            let mut best = 0;
            for (l, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = l;
                }
            }
            best
        };
        patch_to_superpixel.push(best as i32);
    }
    let mut token_sets = vec![Vec::new(); n];
    for (p, &s) in patch_to_superpixel.iter().enumerate() {
        token_sets[s as usize].push(p);
    }
    let mut zero_patch = vec![false; n];
    for (s, set) in token_sets.iter_mut().enumerate() {
        if set.is_empty() {
            zero_patch[s] = true;
            let [cx, cy] = spmap.centroids[s];
            let px = patch_of(cx.round().max(0.0) as usize, w, grid);
            let py = patch_of(cy.round().max(0.0) as usize, h, grid);
            set.push(py * grid + px);
        }
    }
    Ok(PatchAssignment { grid, patch_to_superpixel, token_sets, zero_patch })
}

/// Running per-pixel sum and coverage count for stitching crops onto a view.
#[derive(Clone, Debug)]
pub struct FusionAccumulator {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    sum: Vec<f64>,
    count: Vec<u32>,
}

impl FusionAccumulator {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        FusionAccumulator {
            width,
            height,
            channels,
            sum: vec![0.0; width * height * channels],
            count: vec![0; width * height],
        }
    }

    pub fn add(&mut self, crop: &CropSpec, features: &FeatureMap) -> Result<()> {
        if features.channels != self.channels {
            return Err(Error::Argument(format!(
                "crop has {} channels, accumulator {}",
                features.channels, self.channels
            )));
        }
        if features.width != crop.w || features.height != crop.h {
            return Err(Error::Argument(format!(
                "crop feature map {}x{} does not match rect {}x{}",
                features.width, features.height, crop.w, crop.h
            )));
        }
        if crop.x0 + crop.w > self.width || crop.y0 + crop.h > self.height {
            return Err(Error::Argument(format!("crop {crop:?} outside the view")));
        }
        let c = self.channels;
        for y in 0..crop.h {
            for x in 0..crop.w {
                let dst = (crop.y0 + y) * self.width + crop.x0 + x;
                self.count[dst] += 1;
                let src = features.at(x, y);
                for (s, v) in self.sum[dst * c..(dst + 1) * c].iter_mut().zip(src) {
                    *s += *v as f64;
                }
            }
        }
        Ok(())
    }

    pub fn count(&self) -> &[u32] {
        &self.count
    }

    pub fn finish(self) -> Result<FeatureMap> {
        let c = self.channels;
        let mut out = FeatureMap::zeros(self.width, self.height, c);
        for (p, &n) in self.count.iter().enumerate() {
            if n == 0 {
                return Err(Error::Argument(format!(
                    "pixel ({}, {}) not covered by any crop",
                    p % self.width,
                    p / self.width
                )));
            }
            for k in 0..c {
                out.data[p * c + k] = (self.sum[p * c + k] / n as f64) as f32;
            }
        }
        Ok(out)
    }
}

/// Per-pixel mean over every crop covering the pixel.
///
/// Crops are accumulated in scale-major, row-major order regardless of the
/// input order, so the output does not depend on how the list is permuted.
pub fn stitch_and_fuse(crop_maps: &[(CropSpec, FeatureMap)], view_w: usize, view_h: usize) -> Result<FeatureMap> {
    let first = crop_maps
        .first()
        .ok_or_else(|| Error::Argument("no crop feature maps to fuse".into()))?;
    let mut order: Vec<usize> = (0..crop_maps.len()).collect();
    order.sort_by_key(|&i| crop_maps[i].0.order_key());
    let mut acc = FusionAccumulator::new(view_w, view_h, first.1.channels);
    for i in order {
        let (crop, fm) = &crop_maps[i];
        acc.add(crop, fm)?;
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Oracle: every window placement enumerated independently.
    fn expected_count(extent: usize, scale: f64) -> usize {
        let size = (scale * extent as f64).round();
        let steps = ((1.0 - scale) / (scale / 2.0)).ceil() as usize;
        assert!(size >= 32.0);
        steps + 1
    }

    #[test]
    fn full_view_only() {
        let crops = generate_crops(640, 480, &[1.0], 0.5).unwrap();
        assert_eq!(crops, vec![CropSpec { x0: 0, y0: 0, w: 640, h: 480, scale_level: 0 }]);
    }

    #[test]
    fn three_scale_schedule_has_59_crops() {
        let crops = generate_crops(640, 480, &[1.0, 0.5, 0.25], 0.5).unwrap();
        let per_scale: Vec<usize> = (0..3).map(|l| crops.iter().filter(|c| c.scale_level == l).count()).collect();
        let oracle: Vec<usize> = [1.0, 0.5, 0.25]
            .iter()
            .map(|&s| expected_count(640, s) * expected_count(480, s))
            .collect();
        assert_eq!(per_scale, oracle);
        assert_eq!(per_scale, vec![1, 9, 49]);
        assert_eq!(crops.len(), 59);
    }

    #[test]
    fn union_covers_view() {
        for (w, h, scales, stride) in [
            (640usize, 480usize, vec![1.0f32, 0.5, 0.25], 0.5f32),
            (333, 257, vec![0.3, 0.7], 0.33),
            (100, 64, vec![0.5], 1.0),
        ] {
            let crops = generate_crops(w, h, &scales, stride).unwrap();
            let mut covered = vec![false; w * h];
            for c in &crops {
                assert!(c.x0 + c.w <= w && c.y0 + c.h <= h);
                for y in c.y0..c.y0 + c.h {
                    for x in c.x0..c.x0 + c.w {
                        covered[y * w + x] = true;
                    }
                }
            }
            assert!(covered.iter().all(|&v| v), "{w}x{h} {scales:?}");
        }
    }

    #[test]
    fn tiny_scales_are_skipped() {
        let crops = generate_crops(160, 120, &[1.0, 0.25], 0.5).unwrap();
        assert_eq!(crops.len(), 1);
        assert!(generate_crops(160, 120, &[1.5], 0.5).is_err());
        assert!(generate_crops(160, 120, &[1.0], 0.0).is_err());
    }

    #[test]
    fn identity_assignment_when_segments_are_patches() {
        // 4x4 grid over a 16x16 crop, one super-pixel per patch
        let labels: Vec<i32> = (0..256).map(|i| ((i / 16 / 4) * 4 + (i % 16) / 4) as i32).collect();
        let map = SuperpixelMap::from_labels(16, 16, labels).unwrap();
        let a = assign_patches(&map, 4).unwrap();
        assert_eq!(a.patch_to_superpixel, (0..16).collect::<Vec<i32>>());
        assert!(a.zero_patch.iter().all(|&z| !z));
    }

    #[test]
    fn single_segment_takes_all_patches() {
        let map = SuperpixelMap::from_labels(20, 20, vec![0; 400]).unwrap();
        let a = assign_patches(&map, 7).unwrap();
        assert!(a.patch_to_superpixel.iter().all(|&s| s == 0));
        assert_eq!(a.token_sets[0].len(), 49);
    }

    #[test]
    fn majority_wins_inside_a_footprint() {
        // one patch covering a 10x10 crop: 60 pixels label 1, 40 pixels label 0
        let labels: Vec<i32> = (0..100).map(|i| if i % 10 < 4 { 0 } else { 1 }).collect();
        let map = SuperpixelMap::from_labels(10, 10, labels).unwrap();
        let a = assign_patches(&map, 1).unwrap();
        assert_eq!(a.patch_to_superpixel, vec![1]);
        // the losing segment falls back to its centroid patch
        assert!(a.zero_patch[0]);
        assert_eq!(a.token_sets[0], vec![0]);
    }

    #[test]
    fn ties_go_to_smallest_label() {
        let labels: Vec<i32> = (0..16).map(|i| if i % 4 < 2 { 1 } else { 0 }).collect();
        let map = SuperpixelMap::from_labels(4, 4, labels).unwrap();
        assert_eq!(assign_patches(&map, 1).unwrap().patch_to_superpixel, vec![0]);
    }

    #[test]
    fn fusion_of_constant_and_overlap() {
        let f = [0.1f32, -3.7, 1e-3];
        let crops = generate_crops(64, 48, &[1.0, 0.5], 0.5).unwrap();
        let maps: Vec<_> = crops.iter().map(|c| (*c, FeatureMap::constant(c.w, c.h, &f))).collect();
        let out = stitch_and_fuse(&maps, 64, 48).unwrap();
        assert!(out.data.chunks(3).all(|px| px == f));

        let a = CropSpec { x0: 0, y0: 0, w: 40, h: 32, scale_level: 0 };
        let b = CropSpec { x0: 24, y0: 0, w: 40, h: 32, scale_level: 0 };
        let out = stitch_and_fuse(
            &[(a, FeatureMap::constant(40, 32, &[0.3])), (b, FeatureMap::constant(40, 32, &[0.7]))],
            64,
            32,
        )
        .unwrap();
        assert_eq!(out.at(10, 5), &[0.3]);
        assert_eq!(out.at(30, 5), &[((0.3f32 as f64 + 0.7f32 as f64) / 2.0) as f32]);
        assert_eq!(out.at(50, 5), &[0.7]);
    }

    #[test]
    fn fusion_rejects_mismatch_and_gaps() {
        let a = CropSpec { x0: 0, y0: 0, w: 32, h: 32, scale_level: 0 };
        assert!(stitch_and_fuse(&[(a, FeatureMap::constant(32, 32, &[1.0]))], 64, 32).is_err());
        let b = CropSpec { x0: 32, y0: 0, w: 32, h: 32, scale_level: 0 };
        assert!(stitch_and_fuse(
            &[(a, FeatureMap::constant(32, 32, &[1.0])), (b, FeatureMap::constant(32, 32, &[1.0, 2.0]))],
            64,
            32
        )
        .is_err());
    }
}
