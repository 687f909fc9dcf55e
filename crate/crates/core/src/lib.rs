//! Multimodal representation learning on hypergraphs.
//!
//! Cross-modal relations are stored as a sparse K-mode adjacency tensor and
//! factorized with a CP model whose factor matrices are regularized by one
//! similarity graph per modality. Factor updates run one worker per mode, and
//! an optional Chebyshev graph-convolution + LSTM refiner polishes the learned
//! factors afterwards.

pub mod config;
pub mod data;
pub mod distributed;
pub mod error;
pub mod eval;
pub mod factor;
pub mod gradcheck;
pub mod graph;
pub mod mgcnn;
pub mod objective;
pub mod sptensor;

pub use data::{generate_synthetic, load_movielens, Dataset, MovieLensOptions, SynthSpec};
pub use distributed::{run_round, run_training, RoundLog, Sweep, TrainPlan, Trainer};
pub use error::{Error, Result};
pub use eval::{attribution_accuracy, average_precision, rmse, MetricReport};
pub use factor::{gram_hadamard, khatri_rao, mttkrp, FactorSet};
pub use graph::{chebyshev_apply, cooccurrence_graph, knn_graph, normalized_laplacian, CsrMatrix, IntraGraph};
pub use mgcnn::{bilinear_conv, diffuse, mode_conv, train_refiner, ChebFilter, DiffusionCell, MGCNNModel, RefinerConfig};
pub use objective::{LossBreakdown, Objective};
pub use sptensor::{masked_sq_error, reconstruct_at, unfold_column_index, SparseTensor};
