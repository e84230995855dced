//! Desk-scale training substrate: synthetic data, a small classifier with
//! manual backprop, distillation, masked SGD and fake quantization.

pub mod data;
pub mod loss;
pub mod model;
pub mod quant;
pub mod train;

pub use data::{synthesize, Batch, Batcher, DataConfig, Dataset, TaskKind};
pub use loss::{Kd, KdConfig, Metrics};
pub use model::{Activation, AttentionConfig, LayerSpec, ModelConfig, ToyModel};
pub use quant::{fake_quant_finetune, fake_quantize, quant_scale, QuantConfig};
pub use train::{gradient_stream, train_span, train_step, OptimizerConfig, Sgd, SpanStats, StepContext};
