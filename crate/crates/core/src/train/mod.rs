//! Desk-scale training, evaluation, checkpointing and single-device
//! inference of tensor-parallel models.

mod checkpoint;
mod config;
mod data;
mod inference;
mod model;
mod optim;
mod trainer;

pub use checkpoint::{
    load_checkpoint, read_tensor_record, save_checkpoint, write_tensor_record, Checkpoint,
    Manifest, MAGIC, VERSION,
};
pub use config::{DataSource, TrainConfig};
pub use data::{ingest_corpus, synth_data, tokenize_bytes, Dataset, BYTE_VOCAB};
pub use inference::{argmax_last, greedy_continue, logical_device_inference};
pub use model::{Batch, CaatModel, ModelCache, ModelConfig, ModelGrads, StepOptions};
pub use optim::{AdamW, AdamWConfig};
pub use trainer::{evaluate, load_dataset, train_step, MetricsRow, Trainer};
