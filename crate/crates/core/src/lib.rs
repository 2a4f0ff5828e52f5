//! Controllable traffic-scenario generation.
//!
//! Agent futures are sampled from a diffusion model over PCA-embedded
//! trajectories. Sampling can be steered by differentiable cost programs
//! written in a small s-expression language over trajectory and Frenet
//! quantities, authored by hand or by a language model through a staged
//! understanding and refinement loop.

pub mod cli;
pub mod costdsl;
pub mod denoiser;
pub mod diffusion;
pub mod frenet;
pub mod grad;
pub mod llmguide;
pub mod metrics;
pub mod render;
pub mod scene;
pub mod synth;
