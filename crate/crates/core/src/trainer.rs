//! Per-cluster fine-tuning, residual-driven splitting, and the parallel
//! end-to-end pipeline.

use std::fmt;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::clustering::{
    lloyd, split_node, ClusterNode, ClusterPartition, ClusterStats, LeafId, Point3, SplitRefusal,
    MAX_SPLIT_DEPTH_LIMIT,
};
use crate::codec::mix_seed;
use crate::data::{normalize, records_for_points, Dataset, NormalizedData, Record};
use crate::error::{Error, Result};
use crate::meta::{leaf_key, loss_and_gradient, meta_train, MetaConfig};
use crate::model::{
    backward, forward, init_params, mse_loss, predict, HeadMode, NetworkConfig, NetworkParams,
    PositionalEncodingConfig,
};
use crate::numeric::{adam_step, AdamState};
use crate::store::{EncodedModel, LeafModel, FORMAT_VERSION};

const TAG_KMEANS: u64 = 0x6b6d;
const TAG_INIT: u64 = 0x696e_6974;
const TAG_FINE: u64 = 0x6669_6e65;
const TAG_SPLIT: u64 = 0x7370_6c74;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_interval_epochs: usize,
    pub convergence_patience_epochs: usize,
    pub sample_fraction_per_epoch: f64,
    /// Split threshold on the full-cluster normalized MSE.
    pub residual_threshold: f64,
    pub max_split_depth: usize,
    pub batch_size: usize,
    pub k: usize,
    pub seed: u64,
    pub worker_count: usize,
    /// Hard cap on fine-tuning epochs per leaf; `None` relies on patience only.
    pub max_epochs: Option<usize>,
    pub use_meta: bool,
    pub recluster: bool,
    pub kmeans_max_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 5e-5,
            lr_decay_factor: 0.92,
            lr_decay_interval_epochs: 30,
            convergence_patience_epochs: 30,
            sample_fraction_per_epoch: 0.30,
            residual_threshold: 5e-4,
            max_split_depth: 3,
            batch_size: 16_384,
            k: 20,
            seed: 0,
            worker_count: 1,
            max_epochs: None,
            use_meta: true,
            recluster: true,
            kmeans_max_iters: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be > 0, got {v}")))
            }
        };
        positive("initial_lr", self.initial_lr)?;
        positive("lr_decay_factor", self.lr_decay_factor)?;
        positive("residual_threshold", self.residual_threshold)?;
        if !(self.sample_fraction_per_epoch > 0.0 && self.sample_fraction_per_epoch <= 1.0) {
            return Err(Error::Config(format!(
                "sample_fraction_per_epoch must be in (0, 1], got {}",
                self.sample_fraction_per_epoch
            )));
        }
        for (name, v) in [
            ("lr_decay_interval_epochs", self.lr_decay_interval_epochs),
            ("convergence_patience_epochs", self.convergence_patience_epochs),
            ("batch_size", self.batch_size),
            ("k", self.k),
            ("worker_count", self.worker_count),
            ("kmeans_max_iters", self.kmeans_max_iters),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.max_epochs == Some(0) {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        if self.max_split_depth > MAX_SPLIT_DEPTH_LIMIT {
            return Err(Error::Config(format!(
                "max_split_depth must be <= {MAX_SPLIT_DEPTH_LIMIT}, got {}",
                self.max_split_depth
            )));
        }
        Ok(())
    }
}

/// Everything `run_pipeline` needs besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    pub meta: MetaConfig,
    pub width: usize,
    pub num_frequencies: usize,
    pub gfe_blocks: usize,
    pub lfe_blocks: usize,
    pub head_mode: HeadMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            meta: MetaConfig::default(),
            width: 128,
            num_frequencies: 6,
            gfe_blocks: 5,
            lfe_blocks: 6,
            head_mode: HeadMode::Branched,
        }
    }
}

impl PipelineConfig {
    pub fn network_config(&self, num_variables: usize) -> NetworkConfig {
        let mut cfg = NetworkConfig::new(self.width, num_variables);
        cfg.pe = PositionalEncodingConfig {
            num_frequencies: self.num_frequencies,
            ..PositionalEncodingConfig::default()
        };
        cfg.gfe_blocks = self.gfe_blocks;
        cfg.lfe_blocks = self.lfe_blocks;
        cfg.head_mode = self.head_mode;
        cfg
    }
}

/// `initial_lr * factor^floor(epoch / interval)`.
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> f64 {
    let steps = (epoch / config.lr_decay_interval_epochs) as i32;
    config.initial_lr * config.lr_decay_factor.powi(steps)
}

/// Patience-based stopping on a stream of epoch losses.
#[derive(Clone, Debug)]
pub struct ConvergenceTracker {
    patience: usize,
    best_loss: f64,
    best_epoch: usize,
    epochs_seen: usize,
}

impl ConvergenceTracker {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            epochs_seen: 0,
        }
    }

    /// Records the next epoch's loss. Returns `(improved, stop)`.
    pub fn observe(&mut self, loss: f64) -> (bool, bool) {
        let epoch = self.epochs_seen;
        self.epochs_seen += 1;
        let improved = loss < self.best_loss;
        if improved {
            self.best_loss = loss;
            self.best_epoch = epoch;
        }
        (improved, epoch - self.best_epoch >= self.patience)
    }

    pub fn best_loss(&self) -> f64 {
        self.best_loss
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn epochs_seen(&self) -> usize {
        self.epochs_seen
    }
}

/// Outcome of fine-tuning one leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct FineTuneResult {
    pub params: NetworkParams<f32>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub epoch_losses: Vec<f64>,
}

/// Fine-tunes `init` on the members of one leaf. Each epoch draws
/// `ceil(fraction * members * T)` records without replacement and takes one
/// Adam step per minibatch. Returns the parameters as they stood at the end
/// of the best epoch.
pub fn fine_tune_cluster(
    data: &NormalizedData,
    members: &[usize],
    init: &NetworkParams<f32>,
    leaf: LeafId,
    config: &TrainConfig,
) -> Result<FineTuneResult> {
    config.validate()?;
    if members.is_empty() {
        return Err(Error::Config(format!("fine-tuning leaf {leaf} with no points")));
    }
    let timesteps = data.timestep_count();
    let total = members.len() * timesteps;
    let per_epoch = ((config.sample_fraction_per_epoch * total as f64).ceil() as usize).clamp(1, total);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, TAG_FINE, leaf_key(leaf)]));

    let mut params = init.clone();
    let mut best = init.clone();
    let mut adam = AdamState::new(&params);
    let mut tracker = ConvergenceTracker::new(config.convergence_patience_epochs);
    let mut losses = Vec::new();
    let mut records: Vec<Record> = Vec::with_capacity(per_epoch);

    loop {
        let epoch = tracker.epochs_seen();
        let lr = lr_at_epoch(config, epoch);
        records.clear();
        records.extend(index::sample(&mut rng, total, per_epoch).into_iter().map(|i| Record {
            point: members[i / timesteps] as u32,
            timestep: (i % timesteps) as u32,
        }));
        let mut epoch_loss = 0.0;
        for batch in records.chunks(config.batch_size) {
            let (x, y) = data.gather(batch);
            let (pred, tape) = forward(&params, &x)?;
            let (loss, residual) = mse_loss(&pred.values, &y)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    leaf,
                    epoch,
                    best_loss: tracker.best_loss(),
                    checkpoint: Box::new(best),
                });
            }
            epoch_loss += loss * batch.len() as f64 / per_epoch as f64;
            let grads = backward(&params, &tape, &residual)?;
            adam_step(&mut params, &grads, &mut adam, lr)?;
        }
        losses.push(epoch_loss);
        let (improved, stop) = tracker.observe(epoch_loss);
        if improved {
            best.clone_from(&params);
        }
        if epoch % 50 == 0 || stop {
            log::info!("leaf {leaf} epoch {epoch} loss {epoch_loss:.6e} lr {lr:.4e}");
        }
        if stop || config.max_epochs.is_some_and(|cap| losses.len() >= cap) {
            break;
        }
    }
    Ok(FineTuneResult {
        params: best,
        epochs_run: losses.len(),
        best_epoch: tracker.best_epoch(),
        best_loss: tracker.best_loss(),
        epoch_losses: losses,
    })
}

/// Normalized-space MSE of `params` over every record of `members`, per
/// variable and aggregated.
pub fn cluster_residual(
    data: &NormalizedData,
    members: &[usize],
    params: &NetworkParams<f32>,
    leaf: LeafId,
    chunk_size: usize,
) -> Result<ClusterStats> {
    let m = data.variable_count;
    let mut sums = vec![0.0f64; m];
    let mut count = 0usize;
    for points in members.chunks((chunk_size / data.timestep_count().max(1)).max(1)) {
        let records = records_for_points(points, data.timestep_count());
        let (x, y) = data.gather(&records);
        let pred = predict(params, &x)?;
        for (row_p, row_t) in pred.as_slice().chunks_exact(m).zip(y.as_slice().chunks_exact(m)) {
            for (s, (&p, &t)) in sums.iter_mut().zip(row_p.iter().zip(row_t)) {
                let d = (p - t) as f64;
                *s += d * d;
            }
        }
        count += records.len();
    }
    let per_variable_mse: Vec<f64> = sums.iter().map(|s| s / count.max(1) as f64).collect();
    let aggregate_mse = if count == 0 {
        0.0
    } else {
        per_variable_mse.iter().sum::<f64>() / m as f64
    };
    Ok(ClusterStats {
        leaf_id: leaf,
        point_count: members.len() as u64,
        per_variable_mse,
        aggregate_mse,
    })
}

/// Why a leaf stopped being refined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    /// Residual at or below the threshold.
    BelowThreshold,
    /// Residual above the threshold but re-clustering was switched off.
    ReclusteringDisabled,
    /// Residual above the threshold but the leaf could not be split.
    SplitRefused(SplitRefusal),
    /// The leaf received no points and kept its initialization.
    Empty,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Termination::BelowThreshold => f.write_str("below-threshold"),
            Termination::ReclusteringDisabled => f.write_str("reclustering-disabled"),
            Termination::SplitRefused(r) => write!(f, "split-refused ({r})"),
            Termination::Empty => f.write_str("empty"),
        }
    }
}

/// Result for one terminal leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterJobResult {
    pub leaf_id: LeafId,
    pub params: NetworkParams<f32>,
    pub epochs_run: usize,
    pub best_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub stats: ClusterStats,
    pub termination: Termination,
    /// Dataset point indices this leaf was trained on.
    pub members: Vec<usize>,
}

impl ClusterJobResult {
    pub fn residual(&self) -> f64 {
        self.stats.aggregate_mse
    }
}

/// A leaf whose residual triggered a split.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitEvent {
    pub parent: LeafId,
    pub parent_residual: f64,
    pub children: [LeafId; 2],
    pub child_points: [usize; 2],
}

/// Split gate: residual above threshold, below the depth cap, splitting
/// enabled. Geometry is checked by the split itself.
pub fn should_split(residual: f64, leaf: LeafId, config: &TrainConfig) -> bool {
    config.recluster && residual > config.residual_threshold && leaf.depth() < config.max_split_depth
}

/// Output of [`train_with_reclustering`] for one top-level tree.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeTraining {
    pub results: Vec<ClusterJobResult>,
    pub split_events: Vec<SplitEvent>,
}

/// Fine-tunes `leaf` and, while its residual stays above the threshold,
/// splits it and recurses into both children. Children start from copies of
/// the parent's fine-tuned parameters. `tree` is the top-level tree that
/// contains `leaf`; it is updated in place.
pub fn train_with_reclustering(
    data: &NormalizedData,
    members: &[usize],
    init: &NetworkParams<f32>,
    tree: &mut ClusterNode,
    leaf: LeafId,
    config: &TrainConfig,
) -> Result<TreeTraining> {
    let mut out = TreeTraining {
        results: Vec::new(),
        split_events: Vec::new(),
    };
    train_leaf(data, members, init, tree, leaf, config, &mut out)?;
    Ok(out)
}

fn train_leaf(
    data: &NormalizedData,
    members: &[usize],
    init: &NetworkParams<f32>,
    tree: &mut ClusterNode,
    leaf: LeafId,
    config: &TrainConfig,
    out: &mut TreeTraining,
) -> Result<()> {
    let tuned = fine_tune_cluster(data, members, init, leaf, config)?;
    let stats = cluster_residual(data, members, &tuned.params, leaf, config.batch_size)?;
    let residual = stats.aggregate_mse;
    let termination = if residual <= config.residual_threshold {
        Termination::BelowThreshold
    } else if !config.recluster {
        Termination::ReclusteringDisabled
    } else if !should_split(residual, leaf, config) {
        Termination::SplitRefused(SplitRefusal::DepthCap)
    } else {
        let points: Vec<Point3> = members.iter().map(|&i| data.coords[i]).collect();
        let seed = mix_seed(&[config.seed, TAG_SPLIT, leaf_key(leaf)]);
        match split_node(tree, leaf, &points, seed, config.max_split_depth) {
            Ok(outcome) => {
                let child_members: [Vec<usize>; 2] =
                    outcome.members.map(|idx| idx.into_iter().map(|i| members[i]).collect());
                log::info!(
                    "leaf {leaf} residual {residual:.3e} > {:.1e}: split into {} ({} points) and {} ({} points)",
                    config.residual_threshold,
                    outcome.children[0],
                    child_members[0].len(),
                    outcome.children[1],
                    child_members[1].len()
                );
                out.split_events.push(SplitEvent {
                    parent: leaf,
                    parent_residual: residual,
                    children: outcome.children,
                    child_points: [child_members[0].len(), child_members[1].len()],
                });
                for (child, child_members) in outcome.children.into_iter().zip(&child_members) {
                    train_leaf(data, child_members, &tuned.params, tree, child, config, out)?;
                }
                return Ok(());
            }
            Err(refusal) => {
                log::warn!("leaf {leaf} residual {residual:.3e} above threshold but not split: {refusal}");
                Termination::SplitRefused(refusal)
            }
        }
    };
    log::info!(
        "leaf {leaf} done: {} epochs, best loss {:.4e}, residual {residual:.4e}, {termination}",
        tuned.epochs_run,
        tuned.best_loss
    );
    out.results.push(ClusterJobResult {
        leaf_id: leaf,
        params: tuned.params,
        epochs_run: tuned.epochs_run,
        best_loss: tuned.best_loss,
        epoch_losses: tuned.epoch_losses,
        stats,
        termination,
        members: members.to_vec(),
    });
    Ok(())
}

/// Everything a pipeline run produces.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineRun {
    pub model: EncodedModel,
    /// Terminal leaves in pre-order.
    pub jobs: Vec<ClusterJobResult>,
    pub split_events: Vec<SplitEvent>,
    /// Query-loss trace of each top-level cluster's meta-training (empty when disabled).
    pub meta_traces: Vec<Vec<f64>>,
}

struct TreeJob {
    tree: ClusterNode,
    training: TreeTraining,
    meta_trace: Vec<f64>,
}

/// Normalize, cluster, meta-train and fine-tune every cluster on a pool of
/// `worker_count` threads, then assemble the model. Every random stream is
/// derived from `(seed, leaf)`, so the result does not depend on the pool size.
pub fn run_pipeline(dataset: &Dataset, config: &PipelineConfig) -> Result<PipelineRun> {
    config.train.validate()?;
    config.meta.validate()?;
    let net_config = config.network_config(dataset.variable_count());
    net_config.validate()?;
    let train = &config.train;

    let (data, normalizer) = normalize(dataset);
    let k = train.k.min(crate::clustering::distinct_count(&data.coords));
    let fit = lloyd(&data.coords, k, train.kmeans_max_iters, mix_seed(&[train.seed, TAG_KMEANS]))?;
    let mut partition = ClusterPartition::from_centroids(&fit.centroids, train.max_split_depth);
    log::info!(
        "k-means: {} clusters after {} iterations, objective {:.4e}",
        k,
        fit.iterations,
        fit.objective_trace.last().copied().unwrap_or(0.0)
    );

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, p) in data.coords.iter().enumerate() {
        members[crate::clustering::assign(&partition, p).root as usize].push(i);
    }

    let meta_cfg = MetaConfig {
        seed: mix_seed(&[train.seed, config.meta.seed]),
        ..config.meta.clone()
    };
    let job = |root: usize| -> Result<TreeJob> {
        let leaf = LeafId::root(root as u32);
        let pts = &members[root];
        let template = init_params::<f32>(&net_config, mix_seed(&[train.seed, TAG_INIT, root as u64]))?;
        let mut tree = partition.roots[root].clone();
        if pts.is_empty() {
            log::warn!("cluster {leaf} received no points; storing its untrained initialization");
            let stats = ClusterStats {
                leaf_id: leaf,
                point_count: 0,
                per_variable_mse: vec![0.0; dataset.variable_count()],
                aggregate_mse: 0.0,
            };
            return Ok(TreeJob {
                tree,
                training: TreeTraining {
                    results: vec![ClusterJobResult {
                        leaf_id: leaf,
                        params: template,
                        epochs_run: 0,
                        best_loss: f64::INFINITY,
                        epoch_losses: Vec::new(),
                        stats,
                        termination: Termination::Empty,
                        members: Vec::new(),
                    }],
                    split_events: Vec::new(),
                },
                meta_trace: Vec::new(),
            });
        }
        let (init, meta_trace) = if train.use_meta {
            let mi = meta_train(&data, pts, &template, leaf, &meta_cfg)?;
            log::info!(
                "cluster {leaf}: meta-training done, final query loss {:.4e}",
                mi.meta_loss_trace.last().copied().unwrap_or(f64::NAN)
            );
            (mi.params, mi.meta_loss_trace)
        } else {
            (template, Vec::new())
        };
        let training = train_with_reclustering(&data, pts, &init, &mut tree, leaf, train)?;
        Ok(TreeJob {
            tree,
            training,
            meta_trace,
        })
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(train.worker_count)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let outcomes: Vec<Result<TreeJob>> = pool.install(|| (0..k).into_par_iter().map(job).collect());

    let failures: Vec<String> = outcomes
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.as_ref().err().map(|e| format!("cluster {i}: {e}")))
        .collect();
    if !failures.is_empty() {
        return Err(Error::Pipeline(failures));
    }

    let mut jobs = Vec::new();
    let mut split_events = Vec::new();
    let mut meta_traces = Vec::new();
    for (root, outcome) in outcomes.into_iter().enumerate() {
        let mut tree_job = outcome.expect("failures handled above");
        partition.replace_tree(root, tree_job.tree);
        tree_job.training.results.sort_by_key(|r| preorder_key(r.leaf_id));
        jobs.extend(tree_job.training.results);
        split_events.extend(tree_job.training.split_events);
        meta_traces.push(tree_job.meta_trace);
    }

    let leaves = jobs
        .iter()
        .map(|j| LeafModel {
            leaf_id: j.leaf_id,
            params: j.params.clone(),
            stats: j.stats.clone(),
        })
        .collect();
    let model = EncodedModel::new(
        FORMAT_VERSION,
        dataset.fingerprint(),
        normalizer,
        net_config,
        partition,
        leaves,
    )?;
    Ok(PipelineRun {
        model,
        jobs,
        split_events,
        meta_traces,
    })
}

/// Sort key placing leaves of one tree in pre-order.
fn preorder_key(id: LeafId) -> (u32, Vec<u8>) {
    let mut path = Vec::new();
    let mut node = id.node;
    while node > 1 {
        path.push((node & 1) as u8);
        node >>= 1;
    }
    path.reverse();
    (id.root, path)
}

/// Mean normalized loss over all records of `members`; a convenience for
/// experiments comparing initializations.
pub fn full_loss(data: &NormalizedData, members: &[usize], params: &NetworkParams<f32>, chunk: usize) -> Result<f64> {
    let records = records_for_points(members, data.timestep_count());
    loss_and_gradient(params, data, &records, chunk).map(|(l, _)| l)
}
