//! Dynamic mixture-of-experts growth for continual learning, with
//! network-expansion baselines, a budget accountant, and class-incremental
//! and staged reinforcement-learning harnesses.

pub mod autodiff;
pub mod blob;
pub mod budget;
pub mod checkpoint;
pub mod cl;
pub mod config;
pub mod data;
pub mod error;
pub mod expansion;
pub mod kernels;
pub mod moe;
pub mod nn;
pub mod params;
pub mod rl;
pub mod sweep;
pub mod telemetry;
pub mod tensor;
pub mod verify;

pub use autodiff::{Gradients, Graph, Var};
pub use budget::{solve_bottleneck_width, solve_method_dims, verify_schedule, GrowthSchedule};
pub use cl::{run_cl, ClConfig, RunLog};
pub use config::{load_config, parse_config, ExperimentConfig};
pub use data::{gen_synthetic_chunks, load_dataset, save_dataset, ChunkedDataset, DataConfig};
pub use error::{Error, Result};
pub use expansion::{apply_expansion, CoreBlock, ExpansionMethod};
pub use moe::MoeLayer;
pub use params::{AdamConfig, ParamId, ParamStore};
pub use rl::{run_rl, RlConfig};
pub use tensor::Tensor;
