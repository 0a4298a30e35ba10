//! Distillation of per-point target features into a small point network.

mod gradcheck;
mod knn;
mod loss;
mod net;
mod train;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, GradModel, GroupError, PointNetObjective, FD_STEP};
pub use knn::{knn_brute_force, knn_indices};
pub use loss::{cosine_distance, distill_loss, distill_loss_grad, LossReport, NORM_EPS};
pub use net::{
    backward_pointnet, forward_pointnet, param_layout, ForwardCache, PointBatch, PointNetParams, DEFAULT_K, INPUT_DIM,
};
pub use train::{scene_loss_grad, train, write_loss_csv, LossRecord, TrainOutcome, TrainSchedule, TrainingScene};
