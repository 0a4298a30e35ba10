//! Plain SGD over scenes with a staircase learning-rate decay.

use std::io::Write;
use std::path::Path;

use super::loss::distill_loss_grad;
use super::net::{backward_pointnet, forward_pointnet, PointBatch, PointNetParams};
use crate::projection::TargetFeatures;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSchedule {
    pub lr0: f32,
    /// Factor applied once every `decay_every` steps.
    pub decay: f32,
    pub decay_every: usize,
    pub steps: usize,
    /// Scenes per step; scenes are visited cyclically.
    pub batch_scenes: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule { lr0: 0.05, decay: 0.99, decay_every: 1000, steps: 2000, batch_scenes: 1 }
    }
}

impl TrainSchedule {
    /// Learning rate 0.8 decayed by 0.99 every 1,000 steps.
    pub fn large_backbone(steps: usize) -> Self {
        TrainSchedule { lr0: 0.8, steps, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be non-negative, got {}", self.lr0)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay must be in (0, 1], got {}", self.decay)));
        }
        if self.decay_every == 0 || self.batch_scenes == 0 {
            return Err(Error::Config("decay_every and batch_scenes must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f32 {
        self.lr0 * self.decay.powi((step / self.decay_every) as i32)
    }
}

/// One cloud prepared for training with its targets.
#[derive(Clone, Debug)]
pub struct TrainingScene {
    pub batch: PointBatch<f32>,
    pub targets: TargetFeatures,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f32,
    /// Loss before the update of this step.
    pub loss: f32,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: PointNetParams<f32>,
    pub curve: Vec<LossRecord>,
    /// Zero-norm rows seen over the whole run.
    pub degenerate_rows: usize,
}

fn check_scene(s: &TrainingScene, p: &PointNetParams<f32>) -> Result<()> {
    if s.targets.channels != p.out_dim {
        return Err(Error::Argument(format!(
            "targets have {} channels, network outputs {}",
            s.targets.channels, p.out_dim
        )));
    }
    if s.targets.len() != s.batch.len() {
        return Err(Error::Argument(format!(
            "{} targets for {} points",
            s.targets.len(),
            s.batch.len()
        )));
    }
    Ok(())
}

/// Loss and summed parameter gradient of one scene.
pub fn scene_loss_grad(scene: &TrainingScene, params: &PointNetParams<f32>) -> Result<(f32, usize, PointNetParams<f32>)> {
    let cache = forward_pointnet(&scene.batch, params);
    let (report, g_out) = distill_loss_grad(&cache.output, &scene.targets)?;
    let grads = backward_pointnet(&scene.batch, params, &cache, &g_out);
    Ok((report.loss, report.degenerate, grads))
}

pub fn train(scenes: &[TrainingScene], init: PointNetParams<f32>, schedule: &TrainSchedule) -> Result<TrainOutcome> {
    schedule.validate()?;
    if scenes.is_empty() {
        return Err(Error::Argument("no training scenes".into()));
    }
    for s in scenes {
        check_scene(s, &init)?;
    }
    let mut params = init;
    let mut curve = Vec::with_capacity(schedule.steps);
    let mut degenerate_rows = 0;
    let inv_batch = 1.0 / schedule.batch_scenes as f32;
    for step in 0..schedule.steps {
        let lr = schedule.lr_at(step);
        let mut loss = 0.0f32;
        let mut grad = vec![0.0f32; params.num_params()];
        for b in 0..schedule.batch_scenes {
            let scene = &scenes[(step * schedule.batch_scenes + b) % scenes.len()];
            let (l, degenerate, g) = scene_loss_grad(scene, &params)?;
            loss += l * inv_batch;
            degenerate_rows += degenerate;
            for (a, v) in grad.iter_mut().zip(g.flatten()) {
                *a += v * inv_batch;
            }
        }
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss became {loss} at step {step}")));
        }
        curve.push(LossRecord { step, lr, loss });
        if lr > 0.0 {
            let mut flat = params.flatten();
            for (p, g) in flat.iter_mut().zip(&grad) {
                *p -= lr * g;
            }
            params.unflatten(&flat);
        }
    }
    if degenerate_rows > 0 {
        log::warn!("{degenerate_rows} zero-norm rows were skipped during training");
    }
    Ok(TrainOutcome { params, curve, degenerate_rows })
}

pub fn write_loss_csv(path: impl AsRef<Path>, curve: &[LossRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("step,lr,loss\n");
    for r in curve {
        out.push_str(&format!("{},{},{}\n", r.step, r.lr, r.loss));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}
