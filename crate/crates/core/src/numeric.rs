//! Dense matrices, sine-activated linear layers with hand-written backward
//! passes, and the Adam optimizer.
//!
//! Everything is generic over [`Scalar`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type for matrices and network parameters.
pub trait Scalar:
    Float + Default + Debug + Display + Send + Sync + Sum + AddAssign + 'static
{
    fn from_f64(value: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Sine used by network activations. `f32` uses a branch-free polynomial
    /// (absolute error below 1e-6 for |x| < 1e4); `f64` uses the libm sine.
    fn act_sin(self) -> Self;
    /// Cosine counterpart of [`Scalar::act_sin`].
    fn act_cos(self) -> Self;

    /// Raw strided GEMM, `C = alpha * A * B + beta * C`.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n`
    /// matrices; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(value: f64) -> Self {
        value as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn act_sin(self) -> f32 {
        sin_quadrant_f32(self, 0)
    }
    #[inline(always)]
    fn act_cos(self) -> f32 {
        sin_quadrant_f32(self, 1)
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(value: f64) -> Self {
        value
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn act_sin(self) -> f64 {
        self.sin()
    }
    #[inline]
    fn act_cos(self) -> f64 {
        self.cos()
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// `sin(x + shift * pi/2)`: reduction to `[-pi/4, pi/4]` with a three-part
/// split of pi/2, then Cephes minimax polynomials. Written without
/// branches or libm calls so loops over it vectorize.
#[inline(always)]
fn sin_quadrant_f32(x: f32, shift: u32) -> f32 {
    const DP1: f32 = 1.570_312_5;
    const DP2: f32 = 4.837_513e-4;
    const DP3: f32 = 7.549_79e-8;
    // Adding 1.5 * 2^23 rounds to the nearest integer and leaves it in the
    // low mantissa bits; exact for |x| < 2^21.
    const ROUND: f32 = 12_582_912.0;
    let t = x * std::f32::consts::FRAC_2_PI + ROUND;
    let quadrant = t.to_bits().wrapping_add(shift);
    let q = t - ROUND;
    let r = ((x - q * DP1) - q * DP2) - q * DP3;
    let r2 = r * r;
    let s = r + r * r2 * (-1.666_665_5e-1 + r2 * (8.332_161e-3 + r2 * -1.951_529_6e-4));
    let c = 1.0 - 0.5 * r2 + r2 * r2 * (4.166_664_6e-2 + r2 * (-1.388_731_6e-3 + r2 * 2.443_315_7e-5));
    let v = if quadrant & 1 == 0 { s } else { c };
    f32::from_bits(v.to_bits() ^ ((quadrant & 2) << 30))
}

/// `c (m x n) = op(a) (m x k) * op(b) (k x n)`, optionally accumulating into `c`.
///
/// `a_t` means `a` is stored as `k x m`; `b_t` means `b` is stored as `n x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    a_t: bool,
    b: &[F],
    b_t: bool,
    c: &mut [F],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(F::zero());
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: lengths asserted above match the strides; `c` is a distinct
    // mutable borrow so it cannot alias `a` or `b`.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> DenseMatrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "DenseMatrix::from_vec",
                left_name: "declared",
                left: (rows, cols),
                right_name: "data",
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[F]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            assert_eq!(row.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(row.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<F> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> F {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: F) {
        self.data[row * self.cols + col] = value;
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[F] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<G: Scalar>(&self) -> DenseMatrix<G> {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| G::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.data)
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                left_name: "lhs",
                left: self.shape(),
                right_name: "rhs",
                right: other.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            &self.data,
            false,
            &other.data,
            false,
            &mut out.data,
            false,
        );
        Ok(out)
    }
}

/// Pointwise nonlinearity applied after a linear map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    /// `sin(omega * z)`
    Sine { omega: f64 },
    Identity,
}

/// Values cached by a forward pass that the backward pass needs.
#[derive(Clone, Debug)]
pub struct LayerTape<F> {
    pub input: DenseMatrix<F>,
    pub pre_activation: DenseMatrix<F>,
    pub activation: Activation,
}

/// Gradients of one linear layer.
#[derive(Clone, Debug)]
pub struct LayerGrads<F> {
    pub input: DenseMatrix<F>,
    pub weight: DenseMatrix<F>,
    pub bias: Vec<F>,
}

/// True when no element is NaN or infinite. `v - v` is zero exactly for
/// finite `v`; eight independent lanes keep the loop vectorizable.
pub(crate) fn all_finite<F: Scalar>(data: &[F]) -> bool {
    let mut lanes = [F::zero(); 8];
    let chunks = data.chunks_exact(8);
    let tail = chunks.remainder();
    for chunk in chunks {
        for (acc, &v) in lanes.iter_mut().zip(chunk) {
            *acc += v - v;
        }
    }
    for (acc, &v) in lanes.iter_mut().zip(tail) {
        *acc += v - v;
    }
    lanes.iter().all(|&a| a == F::zero())
}

#[inline]
fn sine_in_place<F: Scalar>(data: &mut [F], omega: F) {
    for v in data.iter_mut() {
        *v = (omega * *v).act_sin();
    }
}

fn check_omega(activation: Activation) -> Result<()> {
    match activation {
        Activation::Sine { omega } if !(omega > 0.0) => {
            Err(Error::Config(format!("sine frequency must be positive, got {omega}")))
        }
        _ => Ok(()),
    }
}

/// `input * weight + bias` with shape and finiteness checks.
fn affine<F: Scalar>(input: &DenseMatrix<F>, weight: &DenseMatrix<F>, bias: &[F]) -> Result<DenseMatrix<F>> {
    if input.cols != weight.rows {
        return Err(Error::Shape {
            op: "linear_forward",
            left_name: "input",
            left: input.shape(),
            right_name: "weight",
            right: weight.shape(),
        });
    }
    if bias.len() != weight.cols {
        return Err(Error::Shape {
            op: "linear_forward",
            left_name: "weight",
            left: weight.shape(),
            right_name: "bias",
            right: (bias.len(), 1),
        });
    }
    let (batch, out_features) = (input.rows, weight.cols);
    let mut data = Vec::with_capacity(batch * out_features);
    for _ in 0..batch {
        data.extend_from_slice(bias);
    }
    let mut z = DenseMatrix {
        rows: batch,
        cols: out_features,
        data,
    };
    gemm(
        batch,
        input.cols,
        out_features,
        &input.data,
        false,
        &weight.data,
        false,
        &mut z.data,
        true,
    );
    z.check_finite("linear_forward")?;
    Ok(z)
}

/// `input (batch x in) * weight (in x out) + bias`, returning an identity tape.
pub fn linear_forward<F: Scalar>(
    input: &DenseMatrix<F>,
    weight: &DenseMatrix<F>,
    bias: &[F],
) -> Result<(DenseMatrix<F>, LayerTape<F>)> {
    layer_forward_owned(input.clone(), weight, bias, Activation::Identity)
}

/// Elementwise `sin(omega * z)`.
pub fn sine_forward<F: Scalar>(z: &DenseMatrix<F>, omega: f64) -> Result<DenseMatrix<F>> {
    check_omega(Activation::Sine { omega })?;
    z.check_finite("sine_forward")?;
    let mut out = z.clone();
    sine_in_place(&mut out.data, F::from_f64(omega));
    Ok(out)
}

/// Linear map followed by `activation`.
pub fn layer_forward<F: Scalar>(
    input: &DenseMatrix<F>,
    weight: &DenseMatrix<F>,
    bias: &[F],
    activation: Activation,
) -> Result<(DenseMatrix<F>, LayerTape<F>)> {
    layer_forward_owned(input.clone(), weight, bias, activation)
}

/// [`layer_forward`] that moves `input` into the tape instead of copying it.
pub fn layer_forward_owned<F: Scalar>(
    input: DenseMatrix<F>,
    weight: &DenseMatrix<F>,
    bias: &[F],
    activation: Activation,
) -> Result<(DenseMatrix<F>, LayerTape<F>)> {
    check_omega(activation)?;
    let z = affine(&input, weight, bias)?;
    let mut out = z.clone();
    if let Activation::Sine { omega } = activation {
        sine_in_place(&mut out.data, F::from_f64(omega));
    }
    let tape = LayerTape {
        input,
        pre_activation: z,
        activation,
    };
    Ok((out, tape))
}

/// Forward through one layer without recording a tape.
pub fn layer_apply<F: Scalar>(
    input: &DenseMatrix<F>,
    weight: &DenseMatrix<F>,
    bias: &[F],
    activation: Activation,
) -> Result<DenseMatrix<F>> {
    check_omega(activation)?;
    let mut z = affine(input, weight, bias)?;
    if let Activation::Sine { omega } = activation {
        sine_in_place(&mut z.data, F::from_f64(omega));
    }
    Ok(z)
}

/// Chain rule through one layer. `upstream` is dL/d(output).
pub fn layer_backward<F: Scalar>(
    upstream: &DenseMatrix<F>,
    tape: &LayerTape<F>,
    weight: &DenseMatrix<F>,
) -> Result<LayerGrads<F>> {
    if upstream.shape() != tape.pre_activation.shape() {
        return Err(Error::Shape {
            op: "layer_backward",
            left_name: "upstream",
            left: upstream.shape(),
            right_name: "pre_activation",
            right: tape.pre_activation.shape(),
        });
    }
    if weight.shape() != (tape.input.cols, tape.pre_activation.cols) {
        return Err(Error::Shape {
            op: "layer_backward",
            left_name: "weight",
            left: weight.shape(),
            right_name: "tape (in, out)",
            right: (tape.input.cols, tape.pre_activation.cols),
        });
    }
    let dz = match tape.activation {
        Activation::Identity => upstream.clone(),
        Activation::Sine { omega } => {
            let omega = F::from_f64(omega);
            let mut data = tape.pre_activation.data.clone();
            for (d, &g) in data.iter_mut().zip(&upstream.data) {
                *d = g * omega * (omega * *d).act_cos();
            }
            DenseMatrix {
                rows: upstream.rows,
                cols: upstream.cols,
                data,
            }
        }
    };
    let (batch, in_features, out_features) = (tape.input.rows, tape.input.cols, dz.cols);

    let mut grad_weight = DenseMatrix::zeros(in_features, out_features);
    gemm(
        in_features,
        batch,
        out_features,
        &tape.input.data,
        true,
        &dz.data,
        false,
        &mut grad_weight.data,
        false,
    );

    let mut grad_bias = vec![F::zero(); out_features];
    for row in dz.data.chunks_exact(out_features.max(1)) {
        for (acc, &g) in grad_bias.iter_mut().zip(row) {
            *acc += g;
        }
    }

    let mut grad_input = DenseMatrix::zeros(batch, in_features);
    gemm(
        batch,
        out_features,
        in_features,
        &dz.data,
        false,
        &weight.data,
        true,
        &mut grad_input.data,
        false,
    );

    grad_weight.check_finite("layer_backward")?;
    grad_input.check_finite("layer_backward")?;
    if !grad_bias.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("layer_backward"));
    }
    Ok(LayerGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    })
}

/// A fixed, ordered collection of parameter tensors.
pub trait ParamSet<F> {
    fn tensors(&self) -> Vec<&[F]>;
    fn tensors_mut(&mut self) -> Vec<&mut [F]>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

impl<F> ParamSet<F> for Vec<Vec<F>> {
    fn tensors(&self) -> Vec<&[F]> {
        self.iter().map(Vec::as_slice).collect()
    }
    fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        self.iter_mut().map(Vec::as_mut_slice).collect()
    }
}

/// Adam moments and step counter for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub first_moment: Vec<Vec<F>>,
    pub second_moment: Vec<Vec<F>>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new<P: ParamSet<F> + ?Sized>(params: &P) -> Self {
        let zeros: Vec<Vec<F>> = params
            .tensors()
            .iter()
            .map(|t| vec![F::zero(); t.len()])
            .collect();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<F: Scalar, P: ParamSet<F> + ?Sized>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState<F>,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    let grads = grads.tensors();
    let mut params = params.tensors_mut();
    let shapes_agree = params.len() == grads.len()
        && params.len() == state.first_moment.len()
        && params.len() == state.second_moment.len()
        && params.iter().zip(&grads).zip(&state.first_moment).zip(&state.second_moment).all(
            |(((p, g), m), v)| p.len() == g.len() && p.len() == m.len() && p.len() == v.len(),
        );
    if !shapes_agree {
        let count = |ts: &[&[F]]| ts.iter().map(|t| t.len()).sum::<usize>();
        return Err(Error::Shape {
            op: "adam_step",
            left_name: "params (tensors, values)",
            left: (params.len(), params.iter().map(|t| t.len()).sum()),
            right_name: "grads (tensors, values)",
            right: (grads.len(), count(&grads)),
        });
    }
    if !grads.iter().all(|g| g.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite("adam_step gradients"));
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let bias1 = 1.0 - state.beta1.powi(t);
    let bias2 = 1.0 - state.beta2.powi(t);
    let beta1 = F::from_f64(state.beta1);
    let beta2 = F::from_f64(state.beta2);
    let one_minus_beta1 = F::from_f64(1.0 - state.beta1);
    let one_minus_beta2 = F::from_f64(1.0 - state.beta2);
    let step_size = F::from_f64(lr / bias1);
    let inv_sqrt_bias2 = F::from_f64(1.0 / bias2.sqrt());
    let eps = F::from_f64(state.eps);

    for (((p, g), m), v) in params
        .iter_mut()
        .zip(&grads)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = beta1 * m[i] + one_minus_beta1 * gi;
            v[i] = beta2 * v[i] + one_minus_beta2 * gi * gi;
            p[i] = p[i] - step_size * m[i] / (v[i].sqrt() * inv_sqrt_bias2 + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_sine_accuracy() {
        let mut worst = 0.0f64;
        let mut x = -2000.0f32;
        while x < 2000.0 {
            let xs = x as f64;
            worst = worst.max((x.act_sin() as f64 - xs.sin()).abs());
            worst = worst.max((x.act_cos() as f64 - xs.cos()).abs());
            x += 0.0137;
        }
        assert!(worst < 1e-6, "worst abs error {worst}");
        assert_eq!(0.0f32.act_sin(), 0.0);
        assert_eq!(0.0f32.act_cos(), 1.0);
    }

    fn mat(rows: &[&[f64]]) -> DenseMatrix<f64> {
        DenseMatrix::from_rows(rows)
    }

    #[test]
    fn linear_forward_identity_weight() {
        let (out, _) = linear_forward(&mat(&[&[1.0, 2.0]]), &mat(&[&[1.0, 0.0], &[0.0, 1.0]]), &[0.0, 0.0]).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_forward_zero_input_passes_bias() {
        let w = mat(&[&[0.3, -7.0], &[2.5, 4.0]]);
        let (out, _) = linear_forward(&mat(&[&[0.0, 0.0]]), &w, &[3.0, -1.0]).unwrap();
        assert_eq!(out.as_slice(), &[3.0, -1.0]);
    }

    #[test]
    fn linear_forward_hand_multiply() {
        // [1,1] * [[2,3],[4,5]] + [1,1] = [2+4+1, 3+5+1]
        let (out, tape) = linear_forward(&mat(&[&[1.0, 1.0]]), &mat(&[&[2.0, 3.0], &[4.0, 5.0]]), &[1.0, 1.0]).unwrap();
        assert_eq!(out.as_slice(), &[7.0, 9.0]);
        assert_eq!(tape.pre_activation.as_slice(), &[7.0, 9.0]);
        assert_eq!(tape.input.as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn linear_forward_shape_errors_name_both_shapes() {
        let err = linear_forward(&mat(&[&[1.0, 2.0, 3.0]]), &mat(&[&[1.0], &[1.0]]), &[0.0]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(1, 3)") && msg.contains("(2, 1)"), "{msg}");
        assert!(linear_forward(&mat(&[&[1.0]]), &mat(&[&[1.0]]), &[0.0, 0.0]).is_err());
    }

    #[test]
    fn linear_forward_rejects_overflow() {
        let err = linear_forward(&mat(&[&[1e308, 1e308]]), &mat(&[&[10.0], &[10.0]]), &[0.0]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn sine_forward_values() {
        let z = mat(&[&[0.0, std::f64::consts::PI / 60.0]]);
        let out = sine_forward(&z, 30.0).unwrap();
        assert_eq!(out.get(0, 0), 0.0);
        assert!((out.get(0, 1) - 1.0).abs() < 1e-15);
        let out = sine_forward(&mat(&[&[0.1]]), 1.0).unwrap();
        assert!((out.get(0, 0) - 0.0998334).abs() < 1e-7);
        assert!(sine_forward(&z, 0.0).is_err());
        assert!(sine_forward(&mat(&[&[f64::NAN]]), 1.0).is_err());
    }

    #[test]
    fn backward_through_sine_at_zero() {
        let (_, tape) = layer_forward(&mat(&[&[1.0]]), &mat(&[&[0.0]]), &[0.0], Activation::Sine { omega: 1.0 }).unwrap();
        let grads = layer_backward(&mat(&[&[1.0]]), &tape, &mat(&[&[1.0]])).unwrap();
        assert_eq!(grads.weight.get(0, 0), 1.0);
        assert_eq!(grads.bias, vec![1.0]);
    }

    #[test]
    fn backward_through_sine_at_quarter_period() {
        let half_pi = std::f64::consts::FRAC_PI_2;
        let (_, tape) =
            layer_forward(&mat(&[&[1.0]]), &mat(&[&[half_pi]]), &[0.0], Activation::Sine { omega: 1.0 }).unwrap();
        let grads = layer_backward(&mat(&[&[1.0]]), &tape, &mat(&[&[half_pi]])).unwrap();
        assert!(grads.bias[0].abs() < 1e-15);
        assert!(grads.weight.get(0, 0).abs() < 1e-15);
        assert!(grads.input.get(0, 0).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_mismatched_upstream() {
        let (_, tape) = linear_forward(&mat(&[&[1.0, 2.0]]), &mat(&[&[1.0], &[1.0]]), &[0.0]).unwrap();
        assert!(layer_backward(&mat(&[&[1.0, 1.0]]), &tape, &mat(&[&[1.0], &[1.0]])).is_err());
        assert!(layer_backward(&mat(&[&[1.0]]), &tape, &mat(&[&[1.0, 1.0]])).is_err());
    }

    fn lcg(state: &mut u64) -> f64 {
        *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn layer_gradients_match_central_differences() {
        let mut s = 42u64;
        let (batch, inf, outf) = (3, 4, 5);
        let input = DenseMatrix::from_vec(batch, inf, (0..batch * inf).map(|_| lcg(&mut s)).collect()).unwrap();
        let weight = DenseMatrix::from_vec(inf, outf, (0..inf * outf).map(|_| lcg(&mut s)).collect()).unwrap();
        let bias: Vec<f64> = (0..outf).map(|_| lcg(&mut s)).collect();
        let upstream = DenseMatrix::from_vec(batch, outf, (0..batch * outf).map(|_| lcg(&mut s)).collect()).unwrap();
        let act = Activation::Sine { omega: 1.7 };

        // L = sum(upstream * layer(input))
        let loss = |x: &DenseMatrix<f64>, w: &DenseMatrix<f64>, b: &[f64]| -> f64 {
            let (out, _) = layer_forward(x, w, b, act).unwrap();
            out.as_slice().iter().zip(upstream.as_slice()).map(|(a, g)| a * g).sum()
        };
        let (_, tape) = layer_forward(&input, &weight, &bias, act).unwrap();
        let grads = layer_backward(&upstream, &tape, &weight).unwrap();
        let h = 1e-5;
        let check = |analytic: f64, numeric: f64| {
            let err = (analytic - numeric).abs();
            assert!(err < 1e-8 || err / analytic.abs().max(numeric.abs()) < 1e-6, "{analytic} vs {numeric}");
        };
        for i in 0..inf * outf {
            let mut wp = weight.clone();
            wp.as_mut_slice()[i] += h;
            let mut wm = weight.clone();
            wm.as_mut_slice()[i] -= h;
            check(grads.weight.as_slice()[i], (loss(&input, &wp, &bias) - loss(&input, &wm, &bias)) / (2.0 * h));
        }
        for i in 0..outf {
            let mut bp = bias.clone();
            bp[i] += h;
            let mut bm = bias.clone();
            bm[i] -= h;
            check(grads.bias[i], (loss(&input, &weight, &bp) - loss(&input, &weight, &bm)) / (2.0 * h));
        }
        for i in 0..batch * inf {
            let mut xp = input.clone();
            xp.as_mut_slice()[i] += h;
            let mut xm = input.clone();
            xm.as_mut_slice()[i] -= h;
            check(grads.input.as_slice()[i], (loss(&xp, &weight, &bias) - loss(&xm, &weight, &bias)) / (2.0 * h));
        }
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut params = vec![vec![1.5f32, -2.0, 0.25], vec![3.0]];
        let before = params.clone();
        let grads = vec![vec![0.0f32; 3], vec![0.0]];
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, 5e-5).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m = 0.1, v = 0.001; bias-corrected m_hat = 1, v_hat = 1.
        let mut params = vec![vec![1.0f64]];
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &vec![vec![1.0]], &mut state, 0.1).unwrap();
        assert!((params[0][0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn adam_symmetric_params_update_identically() {
        let mut params = vec![vec![0.7f32, 0.7]];
        let mut state = AdamState::new(&params);
        for _ in 0..5 {
            adam_step(&mut params, &vec![vec![0.3, 0.3]], &mut state, 1e-3).unwrap();
        }
        assert_eq!(params[0][0].to_bits(), params[0][1].to_bits());
    }

    #[test]
    fn adam_errors() {
        let mut params = vec![vec![1.0f32, 2.0]];
        let mut state = AdamState::new(&params);
        assert!(adam_step(&mut params, &vec![vec![1.0]], &mut state, 1e-3).is_err());
        assert!(adam_step(&mut params, &vec![vec![f32::NAN, 1.0]], &mut state, 1e-3).is_err());
        assert!(adam_step(&mut params, &vec![vec![1.0, 1.0]], &mut state, 0.0).is_err());
        assert_eq!(params, vec![vec![1.0, 2.0]]);
        assert_eq!(state.step_count, 0);
    }
}
