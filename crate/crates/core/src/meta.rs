//! First-order MAML over random point subsets of one cluster.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::clustering::LeafId;
use crate::codec::mix_seed;
use crate::data::{records_for_points, NormalizedData, Record};
use crate::error::{Error, Result};
use crate::model::{backward, forward, mse_loss, NetworkParams};
use crate::numeric::{adam_step, AdamState, ParamSet};

const TAG_META: u64 = 0x6d65_7461;

#[derive(Clone, Debug, PartialEq)]
pub struct MetaConfig {
    /// Points per task; `None` means `min(10_000, 10% of the cluster)`.
    pub sample_count: Option<usize>,
    pub inner_steps: usize,
    pub inner_lr: f64,
    /// Zero leaves the initialization untouched.
    pub outer_lr: f64,
    pub meta_iterations: usize,
    pub tasks_per_iteration: usize,
    /// Only the first-order approximation is implemented.
    pub first_order: bool,
    pub seed: u64,
    /// Records per forward/backward chunk.
    pub chunk_size: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            sample_count: None,
            inner_steps: 4,
            inner_lr: 1e-4,
            outer_lr: 5e-5,
            meta_iterations: 500,
            tasks_per_iteration: 1,
            first_order: true,
            seed: 0,
            chunk_size: 16_384,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.first_order {
            return Err(Error::Config("second-order meta-learning is not implemented; set first_order = true".into()));
        }
        if self.sample_count == Some(0) {
            return Err(Error::Config("meta sample_count must be >= 1".into()));
        }
        if !(self.inner_lr > 0.0 && self.inner_lr.is_finite()) {
            return Err(Error::Config(format!("meta inner_lr must be > 0, got {}", self.inner_lr)));
        }
        if !(self.outer_lr >= 0.0 && self.outer_lr.is_finite()) {
            return Err(Error::Config(format!("meta outer_lr must be >= 0, got {}", self.outer_lr)));
        }
        if self.tasks_per_iteration == 0 || self.chunk_size == 0 {
            return Err(Error::Config("meta tasks_per_iteration and chunk_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Task size for a cluster with `cluster_points` members.
    pub fn resolved_sample_count(&self, cluster_points: usize) -> usize {
        let default = (cluster_points / 10).clamp(2, 10_000);
        self.sample_count.unwrap_or(default).min(cluster_points).max(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaInit {
    pub params: NetworkParams<f32>,
    pub source_leaf: LeafId,
    pub meta_loss_trace: Vec<f64>,
}

/// Support and query point indices (into the dataset) for one task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Task {
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

pub(crate) fn leaf_key(leaf: LeafId) -> u64 {
    ((leaf.root as u64) << 32) | leaf.node as u64
}

/// Draws a fresh task for `iteration`: `sample_count` members without
/// replacement, first half support, second half query. A single-point sample
/// serves as both.
pub fn sample_task(members: &[usize], config: &MetaConfig, leaf: LeafId, iteration: u64) -> Task {
    let count = config.resolved_sample_count(members.len());
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, TAG_META, leaf_key(leaf), iteration]));
    let picked: Vec<usize> = index::sample(&mut rng, members.len(), count)
        .into_iter()
        .map(|i| members[i])
        .collect();
    if picked.len() < 2 {
        return Task {
            support: picked.clone(),
            query: picked,
        };
    }
    let half = picked.len() / 2;
    Task {
        support: picked[..half].to_vec(),
        query: picked[half..].to_vec(),
    }
}

/// Mean MSE over `records` and its gradient, accumulated chunk by chunk.
pub fn loss_and_gradient(
    params: &NetworkParams<f32>,
    data: &NormalizedData,
    records: &[Record],
    chunk_size: usize,
) -> Result<(f64, NetworkParams<f32>)> {
    let total = records.len();
    if total == 0 {
        return Err(Error::Config("loss over an empty record set".into()));
    }
    let mut grads: Option<NetworkParams<f32>> = None;
    let mut loss = 0.0;
    for chunk in records.chunks(chunk_size.max(1)) {
        let share = chunk.len() as f64 / total as f64;
        let (x, y) = data.gather(chunk);
        let (pred, tape) = forward(params, &x)?;
        let (l, mut residual) = mse_loss(&pred.values, &y)?;
        loss += l * share;
        if !l.is_finite() {
            return Ok((f64::NAN, NetworkParams::zeros(&params.config)));
        }
        if share != 1.0 {
            for r in residual.as_mut_slice() {
                *r *= share as f32;
            }
        }
        let g = backward(params, &tape, &residual)?;
        match &mut grads {
            Some(acc) => acc.add_scaled(&g, 1.0),
            None => grads = Some(g),
        }
    }
    Ok((loss, grads.expect("at least one chunk")))
}

/// Meta-trains an initialization for one cluster starting from `template`.
pub fn meta_train(
    data: &NormalizedData,
    members: &[usize],
    template: &NetworkParams<f32>,
    leaf: LeafId,
    config: &MetaConfig,
) -> Result<MetaInit> {
    config.validate()?;
    if members.is_empty() {
        return Err(Error::Config(format!("meta-training leaf {leaf} with no points")));
    }
    let timesteps = data.timestep_count();
    let mut init = template.clone();
    let mut adam = AdamState::new(&init);
    let mut trace = Vec::with_capacity(config.meta_iterations);

    for it in 0..config.meta_iterations {
        let mut outer_grad: Option<NetworkParams<f32>> = None;
        let mut query_loss = 0.0;
        for task_index in 0..config.tasks_per_iteration {
            let draw = (it * config.tasks_per_iteration + task_index) as u64;
            let task = sample_task(members, config, leaf, draw);
            let support = records_for_points(&task.support, timesteps);
            let query = records_for_points(&task.query, timesteps);

            let mut adapted = init.clone();
            for step in 0..config.inner_steps {
                let (loss, g) = loss_and_gradient(&adapted, data, &support, config.chunk_size)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        loss,
                        context: format!("meta-training leaf {leaf}, iteration {it}, inner step {step}"),
                    });
                }
                adapted.add_scaled(&g, -config.inner_lr as f32);
            }
            let (loss, g) = loss_and_gradient(&adapted, data, &query, config.chunk_size)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    loss,
                    context: format!("meta-training leaf {leaf}, iteration {it}, query"),
                });
            }
            query_loss += loss / config.tasks_per_iteration as f64;
            let scale = 1.0 / config.tasks_per_iteration as f32;
            match &mut outer_grad {
                Some(acc) => acc.add_scaled(&g, scale),
                None => {
                    let mut first = NetworkParams::zeros(&init.config);
                    first.add_scaled(&g, scale);
                    outer_grad = Some(first);
                }
            }
        }
        trace.push(query_loss);
        if config.outer_lr > 0.0 {
            let g = outer_grad.expect("tasks_per_iteration >= 1");
            adam_step(&mut init, &g, &mut adam, config.outer_lr)?;
        }
        if it % 100 == 0 || it + 1 == config.meta_iterations {
            log::debug!("leaf {leaf} meta iteration {it} query loss {query_loss:.6e}");
        }
    }
    debug_assert_eq!(init.param_count(), template.param_count());
    Ok(MetaInit {
        params: init,
        source_leaf: leaf,
        meta_loss_trace: trace,
    })
}
