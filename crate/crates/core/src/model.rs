//! Branched coordinate network.
//!
//! Coordinates `(x, y, z, t)` are Fourier-encoded, projected with a
//! high-frequency sine layer, passed through a shared trunk of residual sine
//! blocks, and then through one branch of residual blocks per output variable.
//! Each branch ends in a linear head that emits a single scalar.
//!
//! ```text
//! h0 = PE(x, y, z, t)
//! u  = sin(omega_first * (h0 W_in + b_in))
//! g  = trunk(u)                       (shared, computed once per batch)
//! y_j = head_j(branch_j(g))           (j = 0..M)
//! ```

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::{
    layer_apply, layer_backward, layer_forward_owned, Activation, DenseMatrix, LayerTape, ParamSet,
    Scalar,
};

/// Number of input coordinates: x, y, z, t.
pub const COORD_DIM: usize = 4;

const AXIS_NAMES: [&str; 4] = ["x", "y", "z", "t"];

/// Slack allowed outside [-1, 1] before an encoded coordinate is rejected.
pub const COORD_TOLERANCE: f64 = 1e-6;

/// Fourier feature encoding with octave frequencies `2^k * pi`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PositionalEncodingConfig {
    pub num_frequencies: usize,
    pub include_raw_input: bool,
    pub input_dim: usize,
}

impl Default for PositionalEncodingConfig {
    fn default() -> Self {
        Self {
            num_frequencies: 6,
            include_raw_input: true,
            input_dim: COORD_DIM,
        }
    }
}

impl PositionalEncodingConfig {
    pub fn encoded_dim(&self) -> usize {
        self.input_dim * 2 * self.num_frequencies
            + if self.include_raw_input { self.input_dim } else { 0 }
    }
}

/// Encodes each row of `coords` (batch x input_dim, values in [-1, 1]).
///
/// Per scalar `p` the output block is
/// `[p, sin(pi p), cos(pi p), sin(2 pi p), cos(2 pi p), ...]`, the raw value
/// only when `include_raw_input` is set.
pub fn positional_encode<F: Scalar>(
    coords: &DenseMatrix<F>,
    config: &PositionalEncodingConfig,
) -> Result<DenseMatrix<F>> {
    if coords.cols() != config.input_dim {
        return Err(Error::Shape {
            op: "positional_encode",
            left_name: "coords",
            left: coords.shape(),
            right_name: "config (batch, input_dim)",
            right: (coords.rows(), config.input_dim),
        });
    }
    let width = config.encoded_dim();
    let mut out = Vec::with_capacity(coords.rows() * width);
    for r in 0..coords.rows() {
        for (axis, &value) in coords.row(r).iter().enumerate() {
            let p = value.as_f64();
            if !p.is_finite() || p.abs() > 1.0 + COORD_TOLERANCE {
                let axis = AXIS_NAMES
                    .get(axis)
                    .map_or_else(|| format!("#{axis}"), |s| s.to_string());
                return Err(Error::CoordinateRange { axis, value: p });
            }
            if config.include_raw_input {
                out.push(value);
            }
            let mut freq = PI;
            for _ in 0..config.num_frequencies {
                let (s, c) = (freq * p).sin_cos();
                out.push(F::from_f64(s));
                out.push(F::from_f64(c));
                freq *= 2.0;
            }
        }
    }
    DenseMatrix::from_vec(coords.rows(), width, out)
}

/// How output variables are attached to the trunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadMode {
    /// One residual branch and scalar head per variable.
    Branched,
    /// A single residual branch feeding one head with `M` outputs.
    Shared,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub width: usize,
    pub num_variables: usize,
    pub pe: PositionalEncodingConfig,
    pub gfe_blocks: usize,
    pub lfe_blocks: usize,
    pub omega_first: f64,
    pub head_mode: HeadMode,
}

impl NetworkConfig {
    pub fn new(width: usize, num_variables: usize) -> Self {
        Self {
            width,
            num_variables,
            pe: PositionalEncodingConfig::default(),
            gfe_blocks: 5,
            lfe_blocks: 6,
            omega_first: 30.0,
            head_mode: HeadMode::Branched,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.num_variables == 0 {
            return Err(Error::Config(format!(
                "network width ({}) and variable count ({}) must be at least 1",
                self.width, self.num_variables
            )));
        }
        if self.pe.input_dim != COORD_DIM {
            return Err(Error::Config(format!(
                "positional encoding input_dim must be {COORD_DIM}, got {}",
                self.pe.input_dim
            )));
        }
        if !(self.omega_first > 0.0) {
            return Err(Error::Config("omega_first must be positive".into()));
        }
        Ok(())
    }

    pub fn branch_count(&self) -> usize {
        match self.head_mode {
            HeadMode::Branched => self.num_variables,
            HeadMode::Shared => 1,
        }
    }

    fn head_outputs(&self) -> usize {
        match self.head_mode {
            HeadMode::Branched => 1,
            HeadMode::Shared => self.num_variables,
        }
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let w = self.width;
        let block = 2 * (w * w + w);
        let projection = self.pe.encoded_dim() * w + w;
        let blocks = self.gfe_blocks + self.branch_count() * self.lfe_blocks;
        let heads = self.branch_count() * (w * self.head_outputs() + self.head_outputs());
        projection + blocks * block + heads
    }
}

/// Weight (in x out) and bias of a dense layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<F> {
    pub weight: DenseMatrix<F>,
    pub bias: Vec<F>,
}

impl<F: Scalar> Linear<F> {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: DenseMatrix::zeros(inputs, outputs),
            bias: vec![F::zero(); outputs],
        }
    }

    fn cast<G: Scalar>(&self) -> Linear<G> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.iter().map(|v| G::from_f64(v.as_f64())).collect(),
        }
    }
}

/// `out = 0.5 * (h + sin(W2 sin(W1 h + b1) + b2))`
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlockParams<F> {
    pub first: Linear<F>,
    pub second: Linear<F>,
}

impl<F: Scalar> ResidualBlockParams<F> {
    pub fn zeros(width: usize) -> Self {
        Self {
            first: Linear::zeros(width, width),
            second: Linear::zeros(width, width),
        }
    }

    pub fn width(&self) -> usize {
        self.first.weight.rows()
    }

    fn cast<G: Scalar>(&self) -> ResidualBlockParams<G> {
        ResidualBlockParams {
            first: self.first.cast(),
            second: self.second.cast(),
        }
    }
}

/// Hidden-layer sine frequency.
const OMEGA_HIDDEN: f64 = 1.0;

#[derive(Clone, Debug)]
pub struct BlockTape<F> {
    first: LayerTape<F>,
    second: LayerTape<F>,
}

pub fn residual_block_forward<F: Scalar>(
    h: &DenseMatrix<F>,
    block: &ResidualBlockParams<F>,
) -> Result<DenseMatrix<F>> {
    check_block_width(h, block)?;
    let sine = Activation::Sine { omega: OMEGA_HIDDEN };
    let a1 = layer_apply(h, &block.first.weight, &block.first.bias, sine)?;
    let mut a2 = layer_apply(&a1, &block.second.weight, &block.second.bias, sine)?;
    average_into(&mut a2, h);
    Ok(a2)
}

fn check_block_width<F: Scalar>(h: &DenseMatrix<F>, block: &ResidualBlockParams<F>) -> Result<()> {
    if h.cols() != block.width() {
        return Err(Error::Shape {
            op: "residual_block_forward",
            left_name: "h",
            left: h.shape(),
            right_name: "block (width, width)",
            right: (block.width(), block.width()),
        });
    }
    Ok(())
}

/// `out = (out + h) / 2`.
fn average_into<F: Scalar>(out: &mut DenseMatrix<F>, h: &DenseMatrix<F>) {
    let half = F::from_f64(0.5);
    for (y, &x) in out.as_mut_slice().iter_mut().zip(h.as_slice()) {
        *y = half * (x + *y);
    }
}

fn residual_block_forward_taped<F: Scalar>(
    h: DenseMatrix<F>,
    block: &ResidualBlockParams<F>,
) -> Result<(DenseMatrix<F>, BlockTape<F>)> {
    check_block_width(&h, block)?;
    let sine = Activation::Sine { omega: OMEGA_HIDDEN };
    let (a1, first) = layer_forward_owned(h, &block.first.weight, &block.first.bias, sine)?;
    let (mut a2, second) = layer_forward_owned(a1, &block.second.weight, &block.second.bias, sine)?;
    average_into(&mut a2, &first.input);
    Ok((a2, BlockTape { first, second }))
}

/// Returns dL/dh and writes parameter gradients into `grads`.
fn residual_block_backward<F: Scalar>(
    upstream: &DenseMatrix<F>,
    tape: &BlockTape<F>,
    block: &ResidualBlockParams<F>,
    grads: &mut ResidualBlockParams<F>,
) -> Result<DenseMatrix<F>> {
    let half = F::from_f64(0.5);
    let d_a2 = upstream.map(|v| half * v);
    let g2 = layer_backward(&d_a2, &tape.second, &block.second.weight)?;
    let g1 = layer_backward(&g2.input, &tape.first, &block.first.weight)?;
    grads.second.weight = g2.weight;
    grads.second.bias = g2.bias;
    grads.first.weight = g1.weight;
    grads.first.bias = g1.bias;
    let mut d_h = g1.input;
    for (acc, &skip) in d_h.as_mut_slice().iter_mut().zip(d_a2.as_slice()) {
        *acc += skip;
    }
    Ok(d_h)
}

/// All trainable parameters of one network instance.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<F> {
    pub config: NetworkConfig,
    pub input_projection: Linear<F>,
    pub gfe_blocks: Vec<ResidualBlockParams<F>>,
    pub lfe_branches: Vec<Vec<ResidualBlockParams<F>>>,
    pub output_heads: Vec<Linear<F>>,
}

impl<F: Scalar> NetworkParams<F> {
    /// All-zero parameters with the shape implied by `config`.
    pub fn zeros(config: &NetworkConfig) -> Self {
        let w = config.width;
        Self {
            config: config.clone(),
            input_projection: Linear::zeros(config.pe.encoded_dim(), w),
            gfe_blocks: (0..config.gfe_blocks).map(|_| ResidualBlockParams::zeros(w)).collect(),
            lfe_branches: (0..config.branch_count())
                .map(|_| (0..config.lfe_blocks).map(|_| ResidualBlockParams::zeros(w)).collect())
                .collect(),
            output_heads: (0..config.branch_count())
                .map(|_| Linear::zeros(w, config.head_outputs()))
                .collect(),
        }
    }

    pub fn cast<G: Scalar>(&self) -> NetworkParams<G> {
        NetworkParams {
            config: self.config.clone(),
            input_projection: self.input_projection.cast(),
            gfe_blocks: self.gfe_blocks.iter().map(ResidualBlockParams::cast).collect(),
            lfe_branches: self
                .lfe_branches
                .iter()
                .map(|b| b.iter().map(ResidualBlockParams::cast).collect())
                .collect(),
            output_heads: self.output_heads.iter().map(Linear::cast).collect(),
        }
    }

    /// Same tensors in the same order as [`ParamSet::tensors`], flattened.
    pub fn to_flat(&self) -> Vec<F> {
        self.tensors().concat()
    }

    /// Overwrites every parameter from a flat vector in tensor order.
    pub fn load_flat(&mut self, flat: &[F]) -> Result<()> {
        let expected = self.param_count();
        if flat.len() != expected {
            return Err(Error::Shape {
                op: "NetworkParams::load_flat",
                left_name: "flat",
                left: (flat.len(), 1),
                right_name: "params",
                right: (expected, 1),
            });
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    /// Elementwise `self += other * scale`.
    pub fn add_scaled(&mut self, other: &Self, scale: F) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y * scale;
            }
        }
    }
}

impl<F: Scalar> ParamSet<F> for NetworkParams<F> {
    fn tensors(&self) -> Vec<&[F]> {
        let mut out: Vec<&[F]> = Vec::new();
        out.push(self.input_projection.weight.as_slice());
        out.push(self.input_projection.bias.as_slice());
        for block in self.gfe_blocks.iter().chain(self.lfe_branches.iter().flatten()) {
            out.push(block.first.weight.as_slice());
            out.push(block.first.bias.as_slice());
            out.push(block.second.weight.as_slice());
            out.push(block.second.bias.as_slice());
        }
        for head in &self.output_heads {
            out.push(head.weight.as_slice());
            out.push(head.bias.as_slice());
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = Vec::new();
        out.push(self.input_projection.weight.as_mut_slice());
        out.push(self.input_projection.bias.as_mut_slice());
        for block in self
            .gfe_blocks
            .iter_mut()
            .chain(self.lfe_branches.iter_mut().flatten())
        {
            out.push(block.first.weight.as_mut_slice());
            out.push(block.first.bias.as_mut_slice());
            out.push(block.second.weight.as_mut_slice());
            out.push(block.second.bias.as_mut_slice());
        }
        for head in &mut self.output_heads {
            out.push(head.weight.as_mut_slice());
            out.push(head.bias.as_mut_slice());
        }
        out
    }
}

/// SIREN-style initialization.
///
/// The input projection is drawn from `U(-1/fan_in, 1/fan_in)` (its sine uses
/// `omega_first`); every deeper weight from `U(-sqrt(6/fan_in), sqrt(6/fan_in))`
/// since hidden sines use frequency 1. Biases start at zero. Values are drawn
/// in `f64` so `f32` and `f64` instances agree up to rounding.
pub fn init_params<F: Scalar>(config: &NetworkConfig, seed: u64) -> Result<NetworkParams<F>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = NetworkParams::zeros(config);
    let mut fill = |m: &mut DenseMatrix<F>, bound: f64| {
        for v in m.as_mut_slice() {
            *v = F::from_f64(rng.gen_range(-bound..=bound));
        }
    };
    let fan_in = config.pe.encoded_dim() as f64;
    fill(&mut params.input_projection.weight, 1.0 / fan_in);
    let hidden_bound = (6.0 / config.width as f64).sqrt() / OMEGA_HIDDEN;
    for block in params
        .gfe_blocks
        .iter_mut()
        .chain(params.lfe_branches.iter_mut().flatten())
    {
        fill(&mut block.first.weight, hidden_bound);
        fill(&mut block.second.weight, hidden_bound);
    }
    for head in &mut params.output_heads {
        fill(&mut head.weight, hidden_bound);
    }
    Ok(params)
}

/// Network outputs (batch x M) in normalized value space.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBatch<F> {
    pub values: DenseMatrix<F>,
}

/// Everything [`backward`] needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTape<F> {
    projection: LayerTape<F>,
    gfe: Vec<BlockTape<F>>,
    branches: Vec<Vec<BlockTape<F>>>,
    heads: Vec<LayerTape<F>>,
}

impl<F: Scalar> ForwardTape<F> {
    pub fn batch(&self) -> usize {
        self.projection.input.rows()
    }
}

/// Runs a chain of residual blocks, keeping tapes.
fn run_blocks<F: Scalar>(
    mut h: DenseMatrix<F>,
    blocks: &[ResidualBlockParams<F>],
) -> Result<(DenseMatrix<F>, Vec<BlockTape<F>>)> {
    let mut tapes = Vec::with_capacity(blocks.len());
    for block in blocks {
        let (out, tape) = residual_block_forward_taped(h, block)?;
        tapes.push(tape);
        h = out;
    }
    Ok((h, tapes))
}

/// Shared trunk: encoding, input projection and global blocks.
fn trunk_forward<F: Scalar>(
    params: &NetworkParams<F>,
    coords: &DenseMatrix<F>,
) -> Result<(DenseMatrix<F>, LayerTape<F>, Vec<BlockTape<F>>)> {
    let encoded = positional_encode(coords, &params.config.pe)?;
    let (u, projection) = layer_forward_owned(
        encoded,
        &params.input_projection.weight,
        &params.input_projection.bias,
        Activation::Sine {
            omega: params.config.omega_first,
        },
    )?;
    let (g, gfe) = run_blocks(u, &params.gfe_blocks)?;
    Ok((g, projection, gfe))
}

fn branch_forward<F: Scalar>(
    params: &NetworkParams<F>,
    branch: usize,
    g: &DenseMatrix<F>,
) -> Result<(DenseMatrix<F>, Vec<BlockTape<F>>, LayerTape<F>)> {
    let (b, tapes) = run_blocks(g.clone(), &params.lfe_branches[branch])?;
    let head = &params.output_heads[branch];
    let (y, head_tape) = layer_forward_owned(b, &head.weight, &head.bias, Activation::Identity)?;
    Ok((y, tapes, head_tape))
}

/// Forward pass over a batch of normalized `(x, y, z, t)` rows.
pub fn forward<F: Scalar>(
    params: &NetworkParams<F>,
    coords: &DenseMatrix<F>,
) -> Result<(PredictionBatch<F>, ForwardTape<F>)> {
    if coords.rows() == 0 {
        return Err(Error::Config("forward needs a non-empty batch".into()));
    }
    let (g, projection, gfe) = trunk_forward(params, coords)?;
    let batch = coords.rows();
    let m = params.config.num_variables;
    let mut values = DenseMatrix::zeros(batch, m);
    let mut branches = Vec::with_capacity(params.lfe_branches.len());
    let mut heads = Vec::with_capacity(params.output_heads.len());
    for j in 0..params.config.branch_count() {
        let (y, tapes, head_tape) = branch_forward(params, j, &g)?;
        match params.config.head_mode {
            HeadMode::Branched => {
                for r in 0..batch {
                    values.set(r, j, y.get(r, 0));
                }
            }
            HeadMode::Shared => values = y,
        }
        branches.push(tapes);
        heads.push(head_tape);
    }
    Ok((
        PredictionBatch { values },
        ForwardTape {
            projection,
            gfe,
            branches,
            heads,
        },
    ))
}

/// Forward pass without keeping the tape.
pub fn predict<F: Scalar>(params: &NetworkParams<F>, coords: &DenseMatrix<F>) -> Result<DenseMatrix<F>> {
    if coords.rows() == 0 {
        return Err(Error::Config("forward needs a non-empty batch".into()));
    }
    let g = trunk_apply(params, coords)?;
    let batch = coords.rows();
    let mut values = DenseMatrix::zeros(batch, params.config.num_variables);
    for j in 0..params.config.branch_count() {
        let y = branch_apply(params, j, &g)?;
        match params.config.head_mode {
            HeadMode::Branched => {
                for r in 0..batch {
                    values.set(r, j, y.get(r, 0));
                }
            }
            HeadMode::Shared => values = y,
        }
    }
    Ok(values)
}

fn trunk_apply<F: Scalar>(params: &NetworkParams<F>, coords: &DenseMatrix<F>) -> Result<DenseMatrix<F>> {
    let encoded = positional_encode(coords, &params.config.pe)?;
    let first = Activation::Sine {
        omega: params.config.omega_first,
    };
    let proj = &params.input_projection;
    let mut h = layer_apply(&encoded, &proj.weight, &proj.bias, first)?;
    for block in &params.gfe_blocks {
        h = residual_block_forward(&h, block)?;
    }
    Ok(h)
}

fn branch_apply<F: Scalar>(params: &NetworkParams<F>, branch: usize, g: &DenseMatrix<F>) -> Result<DenseMatrix<F>> {
    let mut blocks = params.lfe_branches[branch].iter();
    let mut h = match blocks.next() {
        Some(block) => residual_block_forward(g, block)?,
        None => g.clone(),
    };
    for block in blocks {
        h = residual_block_forward(&h, block)?;
    }
    let head = &params.output_heads[branch];
    layer_apply(&h, &head.weight, &head.bias, Activation::Identity)
}

/// Evaluates a single branch with its own trunk pass. Used to check that the
/// shared trunk is equivalent to recomputing it per branch.
pub fn predict_branch<F: Scalar>(
    params: &NetworkParams<F>,
    branch: usize,
    coords: &DenseMatrix<F>,
) -> Result<DenseMatrix<F>> {
    if branch >= params.config.branch_count() {
        return Err(Error::Config(format!("no branch {branch}")));
    }
    let (g, _, _) = trunk_forward(params, coords)?;
    branch_forward(params, branch, &g).map(|(y, _, _)| y)
}

/// Mean squared error over every entry and `dL/dprediction`.
pub fn mse_loss<F: Scalar>(
    prediction: &DenseMatrix<F>,
    target: &DenseMatrix<F>,
) -> Result<(f64, DenseMatrix<F>)> {
    if prediction.shape() != target.shape() {
        return Err(Error::Shape {
            op: "mse_loss",
            left_name: "prediction",
            left: prediction.shape(),
            right_name: "target",
            right: target.shape(),
        });
    }
    let count = prediction.as_slice().len().max(1);
    let scale = F::from_f64(2.0 / count as f64);
    let mut sum = 0.0f64;
    let residual: Vec<F> = prediction
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(&p, &t)| {
            let d = p - t;
            let d64 = d.as_f64();
            sum += d64 * d64;
            d * scale
        })
        .collect();
    let loss = sum / count as f64;
    Ok((
        loss,
        DenseMatrix::from_vec(prediction.rows(), prediction.cols(), residual)?,
    ))
}

/// Backpropagates `residual_error` (dL/dprediction, batch x M) into gradients
/// for every parameter. Trunk gradients sum the contributions of all branches.
pub fn backward<F: Scalar>(
    params: &NetworkParams<F>,
    tape: &ForwardTape<F>,
    residual_error: &DenseMatrix<F>,
) -> Result<NetworkParams<F>> {
    let batch = tape.batch();
    let m = params.config.num_variables;
    if residual_error.shape() != (batch, m) {
        return Err(Error::Shape {
            op: "backward",
            left_name: "residual_error",
            left: residual_error.shape(),
            right_name: "prediction",
            right: (batch, m),
        });
    }
    if tape.branches.len() != params.config.branch_count() || tape.gfe.len() != params.gfe_blocks.len() {
        return Err(Error::Config("tape does not belong to these parameters".into()));
    }
    let mut grads = NetworkParams::zeros(&params.config);
    let mut d_g = DenseMatrix::zeros(batch, params.config.width);

    for j in 0..params.config.branch_count() {
        let d_y = match params.config.head_mode {
            HeadMode::Branched => {
                let col = (0..batch).map(|r| residual_error.get(r, j)).collect();
                DenseMatrix::from_vec(batch, 1, col)?
            }
            HeadMode::Shared => residual_error.clone(),
        };
        let head = layer_backward(&d_y, &tape.heads[j], &params.output_heads[j].weight)?;
        grads.output_heads[j].weight = head.weight;
        grads.output_heads[j].bias = head.bias;
        let mut d = head.input;
        for (k, block) in params.lfe_branches[j].iter().enumerate().rev() {
            d = residual_block_backward(&d, &tape.branches[j][k], block, &mut grads.lfe_branches[j][k])?;
        }
        for (acc, &v) in d_g.as_mut_slice().iter_mut().zip(d.as_slice()) {
            *acc += v;
        }
    }

    let mut d = d_g;
    for (k, block) in params.gfe_blocks.iter().enumerate().rev() {
        d = residual_block_backward(&d, &tape.gfe[k], block, &mut grads.gfe_blocks[k])?;
    }
    let proj = layer_backward(&d, &tape.projection, &params.input_projection.weight)?;
    grads.input_projection.weight = proj.weight;
    grads.input_projection.bias = proj.bias;
    Ok(grads)
}
