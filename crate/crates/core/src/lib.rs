//! Pump-and-dump detection on hourly exchange candles: panel assembly,
//! features, token graphs, a spatio-temporal GNN, training and evaluation.

pub mod features;
pub mod fetch;
pub mod graphcraft;
pub mod metrics;
pub mod numcore;
pub mod panel;
pub mod stgnn;
pub mod synthmarket;
pub mod trainer;

pub use features::{FeaturePanel, Standardizer, FEATURE_NAMES};
pub use graphcraft::{Adjacency, GraphStrategy, GraphTimeline, SignalKind};
pub use metrics::{Confusion, PrCurve};
pub use numcore::{ParamStore, Tensor};
pub use panel::{Candle, CandleSeries, Panel, PumpEvent, SplitIndex};
pub use stgnn::{ModelConfig, StGnn};
pub use synthmarket::{SynthConfig, SynthMarket};
pub use trainer::{ProtocolReport, TrainConfig};
