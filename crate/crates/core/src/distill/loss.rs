//! Negative cosine distance and its masked mean over supervised points.

use num_traits::Float;

use crate::projection::TargetFeatures;
use crate::{Error, Result};

/// Norms at or below this make a row degenerate.
pub const NORM_EPS: f64 = 1e-12;

/// Euclidean norm, rescaled by the largest magnitude so it does not overflow.
fn norm<T: Float>(v: &[T]) -> T {
    let m = v.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()));
    if m == T::zero() || !m.is_finite() {
        return m;
    }
    m * v.iter().fold(T::zero(), |acc, &x| acc + (x / m) * (x / m)).sqrt()
}

/// `−(a/‖a‖)·(b/‖b‖)`; `None` when either vector has (near) zero norm.
pub fn cosine_distance<T: Float>(a: &[T], b: &[T]) -> Option<T> {
    let eps = T::from(NORM_EPS).unwrap();
    let (na, nb) = (norm(a), norm(b));
    if na <= eps || nb <= eps {
        return None;
    }
    let d = -a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + (x / na) * (y / nb));
    Some(d.max(-T::one()).min(T::one()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport<T> {
    pub loss: T,
    /// Rows that contributed to the mean.
    pub valid: usize,
    /// Valid rows whose distance was defined as 0 because of a zero norm.
    pub degenerate: usize,
}

fn check_shapes(learned_len: usize, target: &TargetFeatures) -> Result<usize> {
    if learned_len != target.features.len() {
        return Err(Error::Argument(format!(
            "learned features have {learned_len} values, targets {}",
            target.features.len()
        )));
    }
    let valid = target.num_valid();
    if valid == 0 {
        return Err(Error::Argument("no supervised points".into()));
    }
    Ok(valid)
}

/// Mean negative cosine distance over the valid target rows.
pub fn distill_loss<T: Float>(learned: &[T], target: &TargetFeatures) -> Result<LossReport<T>> {
    let valid = check_shapes(learned.len(), target)?;
    let c = target.channels;
    let mut sum = T::zero();
    let mut degenerate = 0;
    for i in (0..target.len()).filter(|&i| target.valid_mask[i]) {
        let t: Vec<T> = target.row(i).iter().map(|&v| T::from(v).unwrap()).collect();
        match cosine_distance(&learned[i * c..(i + 1) * c], &t) {
            Some(d) => sum = sum + d,
            None => degenerate += 1,
        }
    }
    Ok(LossReport { loss: sum / T::from(valid).unwrap(), valid, degenerate })
}

/// Loss together with its gradient with respect to `learned`.
pub fn distill_loss_grad<T: Float>(learned: &[T], target: &TargetFeatures) -> Result<(LossReport<T>, Vec<T>)> {
    let valid = check_shapes(learned.len(), target)?;
    let c = target.channels;
    let scale = T::one() / T::from(valid).unwrap();
    let eps = T::from(NORM_EPS).unwrap();
    let mut grad = vec![T::zero(); learned.len()];
    let mut sum = T::zero();
    let mut degenerate = 0;
    for i in (0..target.len()).filter(|&i| target.valid_mask[i]) {
        let f = &learned[i * c..(i + 1) * c];
        let t: Vec<T> = target.row(i).iter().map(|&v| T::from(v).unwrap()).collect();
        let (nf, nt) = (norm(f), norm(&t));
        if nf <= eps || nt <= eps {
            degenerate += 1;
            continue;
        }
        let cos = f.iter().zip(&t).fold(T::zero(), |acc, (&x, &y)| acc + (x / nf) * (y / nt));
        sum = sum - cos;
        // d(−cos)/df = −t/(‖f‖‖t‖) + cos·f/‖f‖²
        let g = &mut grad[i * c..(i + 1) * c];
        for k in 0..c {
            g[k] = (-(t[k] / nt) + cos * (f[k] / nf)) / nf * scale;
        }
    }
    Ok((LossReport { loss: sum * scale, valid, degenerate }, grad))
}
