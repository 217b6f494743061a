//! Images, rigid planar motion, and synthetic SE(2) clips.

mod image;
mod pose;
pub mod store;
mod synth;
mod warp;

pub use image::{FrameSequence, GrayImage, ImageSequence};
pub use pose::{angle_diff, Pose2};
pub use synth::{
    build_se2_clips, build_se2_dataset, generate_se2_sequence, render_digit, sample_motion_params,
    synthetic_digits, MotionParams, SyntheticClip, DEFAULT_CANVAS, DEFAULT_NUM_FRAMES,
    MAX_TRANSLATION,
};
pub use warp::{image_center, sample_bilinear, warp_image};
