//! Event-driven spiking neural network engine and synaptic-energy profiler
//! for bird's-eye-view LiDAR object detection.
//!
//! The crate is organized around the pipeline:
//! point cloud → BEV frame ([`bev`]) → spike encoding ([`encoding`]) →
//! spiking encoder-decoder ([`network`], built on [`neuron`] and [`layers`])
//! → spike-domain losses ([`losses`]) and detection decoding ([`decode`]),
//! with surrogate-gradient training ([`train`]) and a block-wise
//! synaptic-operation energy model ([`energy`]).

pub mod error;
pub mod rng;
pub mod tensor;
pub mod neuron;
pub mod bev;
pub mod encoding;
pub mod layers;
pub mod network;
pub mod losses;
pub mod decode;
pub mod energy;
pub mod optim;
pub mod scene;
pub mod checkpoint;
pub mod train;
pub mod config;
pub mod cli;

pub use error::{Error, Result};
