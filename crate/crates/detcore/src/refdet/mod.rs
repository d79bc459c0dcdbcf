//! Reference detection pipeline on synthetic data: scene generation,
//! multi-scale resizing, and a tiny trainable detector.

pub mod dataset;
pub mod detector;
pub mod scale;

pub use dataset::{gen_dataset, load_dataset, save_dataset, SynthImage};
pub use detector::{
    prepare_batch, AssignCfg, DetectorError, ImageSample, InferCfg, NormLayer, SgdCfg, SgdState,
    TinyDetector, TrainStepOut,
};
pub use scale::{resize_image, ScalePolicy};
