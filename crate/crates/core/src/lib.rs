//! Road extraction by gated fusion of aerial imagery and rasterized GPS
//! trajectories.
//!
//! Two U-Net branches (one per modality) each produce a five-level feature
//! pyramid. At every level a gated fusion module mixes the two with
//! complementary per-pixel gates, a residual decoder refines the fused
//! pyramid, and all four streams of all five levels are supervised.
//!
//! Tensors are NCHW. Everything numeric is generic over [`Scalar`] so the
//! same code runs in `f32` for training and `f64` for gradient checks.

pub mod backbone;
pub mod error;
pub mod evalkit;
pub mod fusion;
pub mod geodata;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod params;
pub mod refiner;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use backbone::{Level, LevelSpec, Widths};
pub use error::{Error, Result};
pub use evalkit::{confusion, metrics, BinaryMap, ConfusionCounts, Metrics, MetricsReport};
pub use fusion::{AdaptedPair, GateState};
pub use geodata::{AttackSpec, GeoRegion, RasterGrid, RasterKind, Rect, RegionRasters, RoadPolyline, SplitLayout, TileSample, TrajectoryPoint};
pub use graph::{Graph, Var};
pub use model::{DualMapper, ForwardOutput, ModelConfig};
pub use nn::Mode;
pub use refiner::{LabelPyramid, PredictionSet, Stream};
pub use tensor::{Scalar, Shape, Tensor};
pub use trainer::{LossWeights, TrainConfig, Trainer};
