//! Building blocks for anchor-based object detection pipelines.
//!
//! The crate covers the numeric core of a two-stage detector without any
//! tensor framework: box geometry and delta coding ([`geom`]), the common
//! regression-loss family with analytic gradients ([`losses`]), anchor
//! generation / assignment / sampling ([`anchor`]), NMS variants
//! ([`postproc`]), batch- and group-normalization forward/backward kernels
//! ([`norm`]), a hook-driven training runner ([`pipeline`]), COCO-style
//! mAP/AR evaluation ([`metrics`]), and a tiny synthetic-data reference
//! detector ([`refdet`]) that ties everything together end to end.
//!
//! Independent reference implementations used to cross-check the fast paths
//! (pixel-counting IoU, brute-force NMS, finite-difference gradients, a
//! from-scratch AP evaluator) live in [`oracle`].

pub mod anchor;
pub mod config;
pub mod geom;
pub mod losses;
pub mod metrics;
pub mod norm;
pub mod oracle;
pub mod pipeline;
pub mod postproc;
pub mod refdet;
pub mod tensor;
