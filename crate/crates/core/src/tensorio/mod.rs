//! On-disk formats: FOT1 tensors, `key=value` configs, RGB-D scene folders and PLY clouds.

mod kv;
mod ply;
mod scene;
mod tensor;

pub use kv::{parse_f32_list, parse_fraction, KvFile};
pub use ply::{read_ply, read_ply_from, write_ply, write_ply_to, PointCloud};
pub use scene::{
    frame_paths, list_frames, load_frame, mm_to_m, palette_color, read_depth_png, read_rgb,
    subsample_frames, write_depth_png, write_frame, write_label_png, write_rgb_png, DepthMap,
    Frame, FramePaths, Intrinsics, Pose, Rgb8Image, POSE_LOAD_TOLERANCE,
};
pub use tensor::{read_tensor, write_tensor, DType, Tensor, TensorData, MAGIC};
