//! Central-difference gradient verification in double precision.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::{distill_loss, distill_loss_grad};
use super::net::{backward_pointnet, forward_pointnet, param_layout, PointBatch, PointNetParams};
use crate::projection::TargetFeatures;
use crate::Result;

pub const FD_STEP: f64 = 1e-3;

/// A scalar objective over a flat parameter vector.
pub trait GradModel {
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, p: &[f64]);
    fn loss(&self) -> f64;
    fn gradient(&self) -> Vec<f64>;
    /// Named parameter ranges; probes are spread over every group.
    fn groups(&self) -> Vec<(String, Range<usize>)>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub probes: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub groups: Vec<GroupError>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-8)
}

/// Compares the analytic gradient with fourth-order central differences at
/// `n_probes` random coordinates, assigned round-robin to the model's groups.
pub fn finite_diff_check(model: &mut dyn GradModel, n_probes: usize, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = model.params();
    let analytic = model.gradient();
    let groups = model.groups();
    let mut errors: Vec<GroupError> = groups
        .iter()
        .map(|(name, _)| GroupError { name: name.clone(), probes: 0, max_rel_error: 0.0 })
        .collect();
    let mut p = base.clone();
    for probe in 0..n_probes {
        let gi = probe % groups.len();
        let range = groups[gi].1.clone();
        if range.is_empty() {
            continue;
        }
        let idx = rng.gen_range(range);
        let mut at = |offset: f64| {
            p[idx] = base[idx] + offset;
            model.set_params(&p);
            model.loss()
        };
        let (up2, up, down, down2) = (at(2.0 * FD_STEP), at(FD_STEP), at(-FD_STEP), at(-2.0 * FD_STEP));
        p[idx] = base[idx];
        let numeric = (8.0 * (up - down) - (up2 - down2)) / (12.0 * FD_STEP);
        let e = &mut errors[gi];
        e.probes += 1;
        e.max_rel_error = e.max_rel_error.max(relative_error(analytic[idx], numeric));
    }
    model.set_params(&base);
    let max_rel_error = errors.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
    GradCheckReport { max_rel_error, groups: errors }
}

/// Point network plus distillation loss on a fixed scene.
pub struct PointNetObjective {
    pub params: PointNetParams<f64>,
    pub batch: PointBatch<f64>,
    pub targets: TargetFeatures,
}

impl PointNetObjective {
    pub fn new(params: &PointNetParams<f32>, batch: &PointBatch<f32>, targets: TargetFeatures) -> Self {
        PointNetObjective { params: params.cast(), batch: batch.cast(), targets }
    }

    fn eval(&self) -> Result<(f64, Vec<f64>)> {
        let cache = forward_pointnet(&self.batch, &self.params);
        let (r, g_out) = distill_loss_grad(&cache.output, &self.targets)?;
        Ok((r.loss, backward_pointnet(&self.batch, &self.params, &cache, &g_out).flatten()))
    }
}

impl GradModel for PointNetObjective {
    fn params(&self) -> Vec<f64> {
        self.params.flatten()
    }

    fn set_params(&mut self, p: &[f64]) {
        self.params.unflatten(p);
    }

    fn loss(&self) -> f64 {
        let out = forward_pointnet(&self.batch, &self.params).output;
        distill_loss(&out, &self.targets).map(|r| r.loss).unwrap_or(f64::NAN)
    }

    fn gradient(&self) -> Vec<f64> {
        self.eval().map(|(_, g)| g).unwrap_or_default()
    }

    fn groups(&self) -> Vec<(String, Range<usize>)> {
        let mut off = 0;
        param_layout(self.params.hidden, self.params.out_dim)
            .iter()
            .map(|&(name, rows, cols)| {
                let r = off..off + rows * cols;
                off = r.end;
                (name.to_string(), r)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorio::PointCloud;

    /// `L(w) = ½‖A w − y‖²`
    struct Quadratic {
        a: Vec<[f64; 3]>,
        y: Vec<f64>,
        w: Vec<f64>,
    }

    impl GradModel for Quadratic {
        fn params(&self) -> Vec<f64> {
            self.w.clone()
        }
        fn set_params(&mut self, p: &[f64]) {
            self.w = p.to_vec();
        }
        fn loss(&self) -> f64 {
            self.a
                .iter()
                .zip(&self.y)
                .map(|(r, y)| (r.iter().zip(&self.w).map(|(a, w)| a * w).sum::<f64>() - y).powi(2) / 2.0)
                .sum()
        }
        fn gradient(&self) -> Vec<f64> {
            let mut g = vec![0.0; 3];
            for (r, y) in self.a.iter().zip(&self.y) {
                let res = r.iter().zip(&self.w).map(|(a, w)| a * w).sum::<f64>() - y;
                for k in 0..3 {
                    g[k] += res * r[k];
                }
            }
            g
        }
        fn groups(&self) -> Vec<(String, Range<usize>)> {
            vec![("w".into(), 0..3)]
        }
    }

    #[test]
    fn quadratic_is_exact() {
        let mut m = Quadratic {
            a: vec![[1.0, 2.0, -1.0], [0.5, 0.0, 3.0], [-2.0, 1.0, 1.0]],
            y: vec![1.0, -2.0, 0.5],
            w: vec![0.3, -0.7, 1.2],
        };
        assert!(finite_diff_check(&mut m, 30, 1).max_rel_error < 1e-9);
    }

    fn fixture(seed: u64) -> PointNetObjective {
        let positions: Vec<[f32; 3]> = (0..12)
            .map(|i| [(i as f32 * 0.37).sin(), (i as f32 * 0.71).cos(), i as f32 * 0.05])
            .collect();
        let colors = (0..12).map(|i| [(i * 20) as u8, (200 - i * 10) as u8, 90]).collect();
        let cloud = PointCloud::new(positions, Some(colors)).unwrap();
        let batch = PointBatch::from_cloud(&cloud, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats = (0..12 * 5).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let mut counts = vec![1u32; 12];
        counts[3] = 0;
        let mut t = TargetFeatures::from_parts(5, feats, counts).unwrap();
        t.features[15..20].iter_mut().for_each(|v| *v = 0.0);
        PointNetObjective::new(&PointNetParams::init(6, 5, 4, seed), &batch, t)
    }

    #[test]
    fn point_network_gradients_match() {
        let mut m = fixture(3);
        let r = finite_diff_check(&mut m, 120, 7);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert!(r.groups.iter().all(|g| g.probes == 20));
    }

    #[test]
    fn symmetric_orthogonal_point_has_zero_gradient() {
        // learned ⟂ target with the output coming straight from the bias
        let cloud = PointCloud::new(vec![[0.0; 3]], None).unwrap();
        let batch = PointBatch::from_cloud(&cloud, 1).unwrap();
        let mut p = PointNetParams::<f32>::zeros(2, 2, 1);
        p.b3 = vec![1.0, 0.0];
        let t = TargetFeatures::from_parts(2, vec![0.0, 1.0], vec![1]).unwrap();
        let mut m = PointNetObjective::new(&p, &batch, t);
        let g = m.gradient();
        // only the component along the target survives: d(−cos)/db3 = −t/‖f‖‖t‖
        assert!((g[g.len() - 2]).abs() < 1e-6);
        let r = finite_diff_check(&mut m, 12, 0);
        for ge in &r.groups {
            assert!(ge.max_rel_error < 1e-4, "{ge:?}");
        }
    }
}
