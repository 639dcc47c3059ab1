//! Encode multivariate, time-varying fields sampled on unstructured points
//! into a forest of small sine-activated networks, one per spatial cluster.
//!
//! The pipeline: normalize the data, partition the points with k-means,
//! meta-learn an initialization per cluster, fine-tune each cluster's network
//! (splitting clusters whose residual stays above a threshold), and store the
//! resulting forest as a self-describing binary model.

pub mod clustering;
pub mod codec;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod meta;
pub mod model;
pub mod numeric;
pub mod store;
pub mod trainer;

pub use clustering::{assign, kmeans, ClusterNode, ClusterPartition, ClusterStats, LeafId};
pub use data::{Dataset, FieldKind, Normalizer, SynthSpec};
pub use error::{Error, Result};
pub use evaluate::{decode, MetricReport};
pub use meta::{MetaConfig, MetaInit};
pub use model::{HeadMode, NetworkConfig, NetworkParams, PositionalEncodingConfig};
pub use numeric::{DenseMatrix, Scalar};
pub use store::EncodedModel;
pub use trainer::{run_pipeline, ClusterJobResult, PipelineConfig, TrainConfig};
