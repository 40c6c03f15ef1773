//! Scalar feed-forward networks with exact derivatives.
//!
//! The networks here are plain multilayer perceptrons with a single linear
//! output unit. What sets the module apart from an off-the-shelf MLP is the
//! derivative support: besides the forward value it computes, analytically,
//!
//! * the gradient and Hessian of the output with respect to the *input*, and
//! * the gradient with respect to the *weights* of any scalar objective built
//!   from value, input gradient and input Hessian (reverse pass over the
//!   derivative propagation, which internally needs third activation
//!   derivatives).
//!
//! Weights live in one flat vector, ordered layer-major with each layer's
//! weight matrix (row-major, one row per output unit) followed by its bias
//! vector. That layout is what optimizers and checkpoints operate on.

mod activation;
mod checkpoint;

pub use activation::Activation;

use crate::error::{Error, Result};
use nalgebra::DMatrix;
use rand::Rng;

/// Layer widths plus the hidden activation. Width list includes the input
/// and the (scalar) output layer, so `[2, 32, 32, 1]` is a two-hidden-layer
/// network on two inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkArch {
    widths: Vec<usize>,
    activation: Activation,
}

impl NetworkArch {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::invalid(
                "network arch",
                format!("need at least input and output widths, got {widths:?}"),
            ));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid(
                "network arch",
                format!("zero-width layer in {widths:?}"),
            ));
        }
        if *widths.last().unwrap() != 1 {
            return Err(Error::invalid(
                "network arch",
                format!("output width must be 1, got {widths:?}"),
            ));
        }
        Ok(NetworkArch { widths, activation })
    }

    /// Convenience constructor from input dimension and hidden widths.
    pub fn mlp(input_dim: usize, hidden: &[usize], activation: Activation) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input_dim);
        widths.extend_from_slice(hidden);
        widths.push(1);
        NetworkArch::new(widths, activation)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    /// Number of weight layers (affine maps).
    pub fn layer_count(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        (0..self.layer_count())
            .map(|i| (self.widths[i] + 1) * self.widths[i + 1])
            .sum()
    }

    /// Offset of layer `i`'s weight block in the flat vector.
    fn layer_offset(&self, layer: usize) -> usize {
        (0..layer)
            .map(|i| (self.widths[i] + 1) * self.widths[i + 1])
            .sum()
    }

    fn layer_dims(&self, layer: usize) -> (usize, usize) {
        (self.widths[layer], self.widths[layer + 1])
    }
}

/// Dot product with a fixed four-lane summation order. The lanes let the
/// additions pipeline instead of serializing on one accumulator; the order is
/// still fully determined by the slice contents, so results stay bit-stable
/// across calls.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s0 = 0.0;
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    let mut s3 = 0.0;
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (pa, pb) in (&mut ca).zip(&mut cb) {
        s0 += pa[0] * pb[0];
        s1 += pa[1] * pb[1];
        s2 += pa[2] * pb[2];
        s3 += pa[3] * pb[3];
    }
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s0 += x * y;
    }
    (s0 + s1) + (s2 + s3)
}

/// A scalar-output network: architecture plus one flat weight vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarNetwork {
    arch: NetworkArch,
    weights: Vec<f64>,
}

impl ScalarNetwork {
    pub fn new(arch: NetworkArch, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != arch.param_count() {
            return Err(Error::ShapeMismatch {
                what: "weight vector",
                expected: arch.param_count(),
                got: weights.len(),
            });
        }
        if !weights.iter().all(|w| w.is_finite()) {
            return Err(Error::NonFinite("weight vector"));
        }
        Ok(ScalarNetwork { arch, weights })
    }

    /// Glorot-uniform weights, zero biases, fully determined by `rng`.
    pub fn init<R: Rng + ?Sized>(arch: NetworkArch, rng: &mut R) -> Self {
        let mut weights = vec![0.0; arch.param_count()];
        for layer in 0..arch.layer_count() {
            let (din, dout) = arch.layer_dims(layer);
            let limit = (6.0 / (din + dout) as f64).sqrt();
            let off = arch.layer_offset(layer);
            for w in &mut weights[off..off + din * dout] {
                *w = rng.random_range(-limit..limit);
            }
            // biases stay zero
        }
        ScalarNetwork { arch, weights }
    }

    pub fn arch(&self) -> &NetworkArch {
        &self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Mutable weight access for optimizers. Callers are responsible for
    /// keeping the entries finite.
    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn set_weights(&mut self, weights: &[f64]) -> Result<()> {
        if weights.len() != self.weights.len() {
            return Err(Error::ShapeMismatch {
                what: "weight vector",
                expected: self.weights.len(),
                got: weights.len(),
            });
        }
        self.weights.copy_from_slice(weights);
        Ok(())
    }

    /// Weight matrix and bias slices of one layer.
    fn layer_params(&self, layer: usize) -> (&[f64], &[f64]) {
        let (din, dout) = self.arch.layer_dims(layer);
        let off = self.arch.layer_offset(layer);
        (
            &self.weights[off..off + din * dout],
            &self.weights[off + din * dout..off + din * dout + dout],
        )
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arch.input_dim() {
            return Err(Error::ShapeMismatch {
                what: "network input",
                expected: self.arch.input_dim(),
                got: x.len(),
            });
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("network input"));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        let layers = self.arch.layer_count();
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for layer in 0..layers {
            let (din, dout) = self.arch.layer_dims(layer);
            let (w, b) = self.layer_params(layer);
            next.clear();
            next.resize(dout, 0.0);
            for j in 0..dout {
                let row = &w[j * din..(j + 1) * din];
                let z = dot(row, &cur) + b[j];
                next[j] = if layer + 1 < layers {
                    self.arch.activation.value(z)
                } else {
                    z
                };
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur[0])
    }

    /// Forward pass that retains per-layer activations for
    /// [`ScalarNetwork::backprop_weights`].
    pub fn forward_cached(&self, x: &[f64], cache: &mut ForwardCache) -> Result<f64> {
        self.check_input(x)?;
        cache.ensure(&self.arch)?;
        let layers = self.arch.layer_count();
        for layer in 0..layers {
            let (din, dout) = self.arch.layer_dims(layer);
            let (w, b) = self.layer_params(layer);
            let (prev, rest) = cache.act.split_at_mut(layer);
            let a_prev: &[f64] = if layer == 0 { x } else { &prev[layer - 1] };
            let a_cur = &mut rest[0];
            let hidden = layer + 1 < layers;
            for j in 0..dout {
                let row = &w[j * din..(j + 1) * din];
                let z = dot(row, a_prev) + b[j];
                if hidden {
                    a_cur[j] = self.arch.activation.value(z);
                    cache.d1[layer][j] = self.arch.activation.d1(z);
                } else {
                    a_cur[j] = z;
                }
            }
        }
        Ok(cache.act[layers - 1][0])
    }

    /// Accumulates `seed * d(output)/d(weights)` into `grad`, reusing the
    /// activations cached by the matching `forward_cached` call.
    pub fn backprop_weights(&self, x: &[f64], cache: &ForwardCache, seed: f64, grad: &mut [f64]) {
        assert_eq!(grad.len(), self.param_count(), "gradient buffer length");
        let layers = self.arch.layer_count();
        let mut delta = vec![seed];
        let mut delta_prev = Vec::new();
        for layer in (0..layers).rev() {
            let (din, dout) = self.arch.layer_dims(layer);
            let (w, _) = self.layer_params(layer);
            let off = self.arch.layer_offset(layer);
            let a_prev: &[f64] = if layer == 0 { x } else { &cache.act[layer - 1] };
            for j in 0..dout {
                let dj = delta[j];
                grad[off + din * dout + j] += dj;
                let grow = &mut grad[off + j * din..off + (j + 1) * din];
                for k in 0..din {
                    grow[k] += dj * a_prev[k];
                }
            }
            if layer > 0 {
                delta_prev.clear();
                delta_prev.resize(din, 0.0);
                for j in 0..dout {
                    let dj = delta[j];
                    let row = &w[j * din..(j + 1) * din];
                    for k in 0..din {
                        delta_prev[k] += dj * row[k];
                    }
                }
                for k in 0..din {
                    delta_prev[k] *= cache.d1[layer - 1][k];
                }
                std::mem::swap(&mut delta, &mut delta_prev);
            }
        }
    }

    /// Gradient of the output with respect to the flat weight vector.
    pub fn grad_w(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut cache = ForwardCache::new(&self.arch);
        self.forward_cached(x, &mut cache)?;
        let mut grad = vec![0.0; self.param_count()];
        self.backprop_weights(x, &cache, 1.0, &mut grad);
        Ok(grad)
    }

    /// Full derivative-propagating forward pass. Fills `trace` with the
    /// output value, input gradient, input Hessian and every intermediate
    /// needed by [`ScalarNetwork::backprop_adjoints`].
    pub fn eval_with_derivs(&self, x: &[f64], trace: &mut DerivTrace) -> Result<()> {
        self.check_input(x)?;
        trace.ensure(&self.arch)?;
        trace.x.clear();
        trace.x.extend_from_slice(x);
        let d = self.arch.input_dim();
        let dd = d * d;
        let layers = self.arch.layer_count();
        for layer in 0..layers {
            let (din, dout) = self.arch.layer_dims(layer);
            let (w, b) = self.layer_params(layer);
            let hidden = layer + 1 < layers;
            let (prev, rest) = trace.layers.split_at_mut(layer);
            let cur = &mut rest[0];
            // Affine part: value, input Jacobian and input Hessian of the
            // pre-activations.
            for j in 0..dout {
                let row = &w[j * din..(j + 1) * din];
                let mut z = b[j];
                let zj = &mut cur.zj[j * d..(j + 1) * d];
                let zh = &mut cur.zh[j * dd..(j + 1) * dd];
                if layer == 0 {
                    z += dot(row, x);
                    zj.copy_from_slice(row);
                    zh.fill(0.0);
                } else {
                    let pl = &prev[layer - 1];
                    z += dot(row, &pl.a);
                    zj.fill(0.0);
                    zh.fill(0.0);
                    for k in 0..din {
                        let wjk = row[k];
                        let gp = &pl.aj[k * d..(k + 1) * d];
                        for c in 0..d {
                            zj[c] += wjk * gp[c];
                        }
                        let tp = &pl.ah[k * dd..(k + 1) * dd];
                        for c in 0..dd {
                            zh[c] += wjk * tp[c];
                        }
                    }
                }
                cur.z[j] = z;
            }
            // Nonlinear part.
            if hidden {
                for j in 0..dout {
                    let (av, d1, d2) = self.arch.activation.value_d1_d2(cur.z[j]);
                    cur.a[j] = av;
                    cur.s1[j] = d1;
                    cur.s2[j] = d2;
                    let zj = &cur.zj[j * d..(j + 1) * d];
                    let aj = &mut cur.aj[j * d..(j + 1) * d];
                    for c in 0..d {
                        aj[c] = d1 * zj[c];
                    }
                    let zh = &cur.zh[j * dd..(j + 1) * dd];
                    let ah = &mut cur.ah[j * dd..(j + 1) * dd];
                    // Fill both triangles from one product so the Hessian
                    // blocks come out bitwise symmetric.
                    for c in 0..d {
                        let zc = d2 * zj[c];
                        for e in c..d {
                            let v = zc * zj[e] + d1 * zh[c * d + e];
                            ah[c * d + e] = v;
                            ah[e * d + c] = v;
                        }
                    }
                }
            } else {
                cur.a.copy_from_slice(&cur.z);
                cur.aj.copy_from_slice(&cur.zj);
                cur.ah.copy_from_slice(&cur.zh);
            }
        }
        Ok(())
    }

    /// Reverse pass over [`ScalarNetwork::eval_with_derivs`]. Accumulates
    /// into `grad` the weight gradient of the scalar
    /// `ybar * f + gbar . grad_x(f) + <hbar, hess_x(f)>`.
    ///
    /// `gbar` has input length, `hbar` is a row-major input-square matrix.
    pub fn backprop_adjoints(
        &self,
        trace: &DerivTrace,
        ybar: f64,
        gbar: &[f64],
        hbar: &[f64],
        grad: &mut [f64],
    ) {
        let d = self.arch.input_dim();
        let dd = d * d;
        assert_eq!(trace.widths, self.arch.widths, "trace arch");
        assert_eq!(gbar.len(), d, "gradient adjoint length");
        assert_eq!(hbar.len(), dd, "hessian adjoint length");
        assert_eq!(grad.len(), self.param_count(), "gradient buffer length");
        let layers = self.arch.layer_count();
        let act = self.arch.activation;

        // Adjoints of the current layer's outputs (value, input Jacobian,
        // input Hessian), initialized from the caller's seeds at the top.
        let mut abar = vec![ybar];
        let mut gjbar = gbar.to_vec();
        let mut thbar = hbar.to_vec();

        // Scratch for the pre-activation adjoints of the current layer.
        let mut zbar: Vec<f64> = Vec::new();
        let mut zjbar: Vec<f64> = Vec::new();
        let mut ubar: Vec<f64> = Vec::new();

        for layer in (0..layers).rev() {
            let (din, dout) = self.arch.layer_dims(layer);
            let (w, _) = self.layer_params(layer);
            let off = self.arch.layer_offset(layer);
            let hidden = layer + 1 < layers;
            let cur = &trace.layers[layer];

            if hidden {
                zbar.clear();
                zbar.resize(dout, 0.0);
                zjbar.clear();
                zjbar.resize(dout * d, 0.0);
                ubar.clear();
                ubar.resize(dout * dd, 0.0);
                for j in 0..dout {
                    let s1 = cur.s1[j];
                    let s2 = cur.s2[j];
                    let s3 = act.d3_from_cached(cur.a[j], s1, s2);
                    let zj = &cur.zj[j * d..(j + 1) * d];
                    let uj = &cur.zh[j * dd..(j + 1) * dd];
                    let tb = &thbar[j * dd..(j + 1) * dd];
                    let gb = &gjbar[j * d..(j + 1) * d];
                    let mut quad = 0.0;
                    for c in 0..d {
                        for e in 0..d {
                            quad += tb[c * d + e] * zj[c] * zj[e];
                        }
                    }
                    let frob = dot(tb, uj);
                    let gdot = dot(gb, zj);
                    zbar[j] = s3 * quad + s2 * (frob + gdot) + abar[j] * s1;
                    let zjb = &mut zjbar[j * d..(j + 1) * d];
                    for c in 0..d {
                        let mut acc = 0.0;
                        for e in 0..d {
                            acc += (tb[c * d + e] + tb[e * d + c]) * zj[e];
                        }
                        zjb[c] = s2 * acc + s1 * gb[c];
                    }
                    let ub = &mut ubar[j * dd..(j + 1) * dd];
                    for m in 0..dd {
                        ub[m] = s1 * tb[m];
                    }
                }
            } else {
                std::mem::swap(&mut zbar, &mut abar);
                std::mem::swap(&mut zjbar, &mut gjbar);
                std::mem::swap(&mut ubar, &mut thbar);
            }

            // Gradients of the affine map's parameters.
            let a_prev: &[f64] = if layer == 0 {
                &trace.x
            } else {
                &trace.layers[layer - 1].a
            };
            for j in 0..dout {
                grad[off + din * dout + j] += zbar[j];
                let grow = &mut grad[off + j * din..off + (j + 1) * din];
                if layer == 0 {
                    // Input Jacobian is the identity, input Hessian zero.
                    for k in 0..din {
                        grow[k] += zbar[j] * a_prev[k] + zjbar[j * d + k];
                    }
                } else {
                    let pl = &trace.layers[layer - 1];
                    let zjb = &zjbar[j * d..(j + 1) * d];
                    let ub = &ubar[j * dd..(j + 1) * dd];
                    for k in 0..din {
                        let g = zbar[j] * a_prev[k]
                            + dot(zjb, &pl.aj[k * d..(k + 1) * d])
                            + dot(ub, &pl.ah[k * dd..(k + 1) * dd]);
                        grow[k] += g;
                    }
                }
            }

            // Push adjoints through to the previous layer's outputs.
            if layer > 0 {
                abar.clear();
                abar.resize(din, 0.0);
                gjbar.clear();
                gjbar.resize(din * d, 0.0);
                thbar.clear();
                thbar.resize(din * dd, 0.0);
                for j in 0..dout {
                    let row = &w[j * din..(j + 1) * din];
                    let zj_b = zbar[j];
                    let zjb = &zjbar[j * d..(j + 1) * d];
                    let ub = &ubar[j * dd..(j + 1) * dd];
                    for k in 0..din {
                        let wjk = row[k];
                        abar[k] += wjk * zj_b;
                        let gp = &mut gjbar[k * d..(k + 1) * d];
                        for c in 0..d {
                            gp[c] += wjk * zjb[c];
                        }
                        let tp = &mut thbar[k * dd..(k + 1) * dd];
                        for m in 0..dd {
                            tp[m] += wjk * ub[m];
                        }
                    }
                }
            }
        }
    }

    /// Gradient of the output with respect to the input.
    pub fn grad_x(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut trace = DerivTrace::new(&self.arch);
        self.eval_with_derivs(x, &mut trace)?;
        Ok(trace.grad().to_vec())
    }

    /// Hessian of the output with respect to the input. Exactly symmetric by
    /// construction.
    pub fn hess_x(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let mut trace = DerivTrace::new(&self.arch);
        self.eval_with_derivs(x, &mut trace)?;
        Ok(trace.hess_matrix())
    }
}

/// Per-layer activation cache for the plain value/weight-gradient path.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    act: Vec<Vec<f64>>,
    d1: Vec<Vec<f64>>,
    widths: Vec<usize>,
}

impl ForwardCache {
    pub fn new(arch: &NetworkArch) -> Self {
        let layers = arch.layer_count();
        ForwardCache {
            act: (0..layers).map(|i| vec![0.0; arch.widths[i + 1]]).collect(),
            d1: (0..layers).map(|i| vec![0.0; arch.widths[i + 1]]).collect(),
            widths: arch.widths.clone(),
        }
    }

    fn ensure(&mut self, arch: &NetworkArch) -> Result<()> {
        if self.widths != arch.widths {
            return Err(Error::invalid(
                "forward cache",
                "cache was built for a different architecture".to_string(),
            ));
        }
        Ok(())
    }
}

/// Layer-by-layer record of a derivative-propagating forward pass.
///
/// Per layer: pre-activations `z`, activations `a`, first and second
/// activation derivatives, and the input Jacobians (`zj`, `aj`) and input
/// Hessians (`zh`, `ah`) of pre- and post-activation values.
#[derive(Debug, Clone)]
pub struct DerivTrace {
    widths: Vec<usize>,
    d: usize,
    x: Vec<f64>,
    layers: Vec<LayerTrace>,
}

#[derive(Debug, Clone)]
struct LayerTrace {
    z: Vec<f64>,
    a: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
    zj: Vec<f64>,
    aj: Vec<f64>,
    zh: Vec<f64>,
    ah: Vec<f64>,
}

impl DerivTrace {
    pub fn new(arch: &NetworkArch) -> Self {
        let d = arch.input_dim();
        let layers = (0..arch.layer_count())
            .map(|i| {
                let dout = arch.widths[i + 1];
                LayerTrace {
                    z: vec![0.0; dout],
                    a: vec![0.0; dout],
                    s1: vec![0.0; dout],
                    s2: vec![0.0; dout],
                    zj: vec![0.0; dout * d],
                    aj: vec![0.0; dout * d],
                    zh: vec![0.0; dout * d * d],
                    ah: vec![0.0; dout * d * d],
                }
            })
            .collect();
        DerivTrace {
            widths: arch.widths.clone(),
            d,
            x: Vec::with_capacity(d),
            layers,
        }
    }

    fn ensure(&mut self, arch: &NetworkArch) -> Result<()> {
        if self.widths != arch.widths {
            return Err(Error::invalid(
                "derivative trace",
                "trace was built for a different architecture".to_string(),
            ));
        }
        Ok(())
    }

    pub fn value(&self) -> f64 {
        self.layers.last().expect("nonempty").a[0]
    }

    /// Input gradient of the output, length `input_dim`.
    pub fn grad(&self) -> &[f64] {
        &self.layers.last().expect("nonempty").aj[..self.d]
    }

    /// Input Hessian of the output, row-major `input_dim`-square.
    pub fn hess(&self) -> &[f64] {
        &self.layers.last().expect("nonempty").ah[..self.d * self.d]
    }

    pub fn hess_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.d, self.d, self.hess())
    }
}
