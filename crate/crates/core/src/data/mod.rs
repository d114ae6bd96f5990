//! Dataset files, the synthetic corpus, augmentation and test-time augmentation.

mod augment;
mod dataset;
mod image;
mod synth;
mod tta;

pub use augment::{apply_plan, augment, flip_h, flip_v, rot90, AugmentConfig, AugmentPlan};
pub use dataset::{Dataset, DatasetMeta, Split};
pub use image::{load_sample, read_pgm, read_ppm, rgb_to_tensor, save_sample, tensor_to_rgb, write_pgm, write_ppm, SegSample};
pub use synth::{class_names, synth_generate, synth_sample, MAX_CLASSES};
pub use tta::{predict, tta_predict, tta_probs, Flip};
