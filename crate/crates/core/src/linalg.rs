//! Dense matrices, layered networks, forward evaluation and manual
//! reverse-mode differentiation.
//!
//! Everything is 64-bit and evaluated in a fixed summation order, so
//! repeated calls on the same inputs are bit-identical.

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, AuditError, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len("matrix storage", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from nested rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            check_len("matrix row", cols, row.len())?;
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    /// Elementwise absolute value.
    pub fn abs(&self) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v.abs()).collect(),
        }
    }
}

/// `W · x`.
pub fn matvec(w: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    check_len("matvec input", w.cols, x.len())?;
    Ok((0..w.rows).map(|i| dot(w.row(i), x)).collect())
}

/// `Wᵀ · y`.
pub fn matvec_transposed(w: &Matrix, y: &[f64]) -> Result<Vec<f64>> {
    check_len("transposed matvec input", w.rows, y.len())?;
    let mut out = vec![0.0; w.cols];
    for (i, &yi) in y.iter().enumerate() {
        if yi == 0.0 {
            continue;
        }
        for (o, &wij) in out.iter_mut().zip(w.row(i)) {
            *o += wij * yi;
        }
    }
    Ok(out)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean computed as `v₀ + mean(vᵢ − v₀)`, so a constant sequence returns its
/// value bit-exactly. Returns NaN for an empty slice.
pub fn anchored_mean(values: &[f64]) -> f64 {
    match values.first() {
        None => f64::NAN,
        Some(&v0) => v0 + values.iter().map(|v| v - v0).sum::<f64>() / values.len() as f64,
    }
}

/// Elementwise nonlinearity applied after the affine map of a layer.
///
/// All four are monotone nondecreasing, which is what lets interval bounds
/// pass through them endpoint-wise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative given the pre-activation and its image. Relu uses 0 at 0.
    #[inline]
    pub fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - post * post,
            Activation::Sigmoid => post * (1.0 - post),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn apply_activation(kind: Activation, v: &[f64]) -> Result<Vec<f64>> {
    check_finite("activation input", v)?;
    Ok(v.iter().map(|&x| kind.eval(x)).collect())
}

/// One affine map followed by an elementwise activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        check_len("layer bias", weights.rows(), bias.len())?;
        check_finite("layer weights", weights.as_slice())?;
        check_finite("layer bias", &bias)?;
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    /// `W·x + b`, without the activation.
    pub fn affine(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = matvec(&self.weights, x)?;
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Classifier,
    Encoder,
    Decoder,
}

/// Feedforward stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    role: Role,
    layers: Vec<Layer>,
}

impl Network {
    pub fn new(role: Role, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(AuditError::Structure("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            check_len("layer chaining", pair[0].output_dim(), pair[1].input_dim())?;
        }
        Ok(Self { role, layers })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Runs `first` then `second` as a single network with `role`.
    pub fn compose(first: &Network, second: &Network, role: Role) -> Result<Network> {
        let layers = first
            .layers
            .iter()
            .chain(&second.layers)
            .cloned()
            .collect();
        Network::new(role, layers)
    }

    /// Applies `f` to every scalar parameter in layer order (weights row-major, then bias).
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(usize, &mut f64)) {
        let mut idx = 0;
        for layer in &mut self.layers {
            for w in layer.weights.as_mut_slice() {
                f(idx, w);
                idx += 1;
            }
            for b in &mut layer.bias {
                f(idx, b);
                idx += 1;
            }
        }
    }

    pub fn logits(&self, z0: &[f64]) -> Result<Vec<f64>> {
        Ok(forward(self, z0)?.into_output())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Serialize, Deserialize)]
struct LayerRepr {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
    activation: Activation,
}

#[derive(Serialize, Deserialize)]
struct NetworkRepr {
    role: Role,
    input_dim: usize,
    layers: Vec<LayerRepr>,
}

impl Serialize for Network {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        NetworkRepr {
            role: self.role,
            input_dim: self.input_dim(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerRepr {
                    weights: l.weights.to_rows(),
                    bias: l.bias.clone(),
                    activation: l.activation,
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Network {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error;
        let repr = NetworkRepr::deserialize(d)?;
        let layers = repr
            .layers
            .into_iter()
            .map(|l| {
                let w = Matrix::from_rows(&l.weights)?;
                Layer::new(w, l.bias, l.activation)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(D::Error::custom)?;
        let net = Network::new(repr.role, layers).map_err(D::Error::custom)?;
        if net.input_dim() != repr.input_dim {
            return Err(D::Error::custom(format!(
                "input_dim {} does not match first layer width {}",
                repr.input_dim,
                net.input_dim()
            )));
        }
        Ok(net)
    }
}

/// Activations recorded by [`forward`] for use in [`backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    pub input: Vec<f64>,
    /// Pre-activation `W_k z_k + b_k` for each layer.
    pub pre: Vec<Vec<f64>>,
    /// Post-activation `z_{k+1}` for each layer; the last entry holds the logits.
    pub post: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.post.last().expect("trace of a nonempty network")
    }

    pub fn into_output(mut self) -> Vec<f64> {
        self.post.pop().expect("trace of a nonempty network")
    }

    fn layer_input(&self, k: usize) -> &[f64] {
        if k == 0 {
            &self.input
        } else {
            &self.post[k - 1]
        }
    }
}

pub fn forward(net: &Network, z0: &[f64]) -> Result<Trace> {
    check_len("network input", net.input_dim(), z0.len())?;
    check_finite("network input", z0)?;
    let mut pre = Vec::with_capacity(net.layers.len());
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(net.layers.len());
    for layer in &net.layers {
        let input = post.last().map_or(z0, Vec::as_slice);
        let a = layer.affine(input)?;
        let h: Vec<f64> = a.iter().map(|&x| layer.activation.eval(x)).collect();
        pre.push(a);
        post.push(h);
    }
    Ok(Trace {
        input: z0.to_vec(),
        pre,
        post,
    })
}

/// Gradient of a scalar loss with respect to one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Per-layer gradients mirroring the shapes of a [`Network`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGradient>,
}

impl GradientSet {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: Matrix::zeros(l.weights.rows(), l.weights.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    /// Flattened view in the same order as [`Network::for_each_param_mut`].
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.as_slice().iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn add_scaled(&mut self, other: &GradientSet, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.as_mut_slice().iter_mut().zip(b.weights.as_slice()) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights.as_mut_slice().iter_mut().for_each(|x| *x *= s);
            l.bias.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.flatten().iter().all(|&x| x == 0.0)
    }

    /// Largest `|a − b| / max(|a|, |b|, floor)` over all parameters.
    pub fn max_relative_error(&self, other: &GradientSet, floor: f64) -> f64 {
        self.flatten()
            .iter()
            .zip(other.flatten())
            .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|x| x.is_finite())
    }
}

/// Backpropagates `dloss_dlogits` through a recorded forward pass.
pub fn backward(net: &Network, trace: &Trace, dloss_dlogits: &[f64]) -> Result<GradientSet> {
    if trace.pre.len() != net.layers.len() || trace.post.len() != net.layers.len() {
        return Err(AuditError::Structure(format!(
            "trace has {} layers, network has {}",
            trace.pre.len(),
            net.layers.len()
        )));
    }
    for (k, layer) in net.layers.iter().enumerate() {
        if trace.pre[k].len() != layer.output_dim() || trace.layer_input(k).len() != layer.input_dim() {
            return Err(AuditError::Structure(format!(
                "trace widths at layer {k} do not match the network"
            )));
        }
    }
    check_len("logit gradient", net.output_dim(), dloss_dlogits.len())?;

    let mut grads = GradientSet::zeros_like(net);
    let mut delta = dloss_dlogits.to_vec();
    for k in (0..net.layers.len()).rev() {
        let layer = &net.layers[k];
        let dpre: Vec<f64> = delta
            .iter()
            .zip(&trace.pre[k])
            .zip(&trace.post[k])
            .map(|((d, &a), &h)| d * layer.activation.derivative(a, h))
            .collect();
        accumulate_outer(&mut grads.layers[k], &dpre, trace.layer_input(k));
        if k > 0 {
            delta = matvec_transposed(&layer.weights, &dpre)?;
        }
    }
    Ok(grads)
}

/// Adds `dpre ⊗ input` to the weight gradient and `dpre` to the bias gradient.
pub(crate) fn accumulate_outer(g: &mut LayerGradient, dpre: &[f64], input: &[f64]) {
    for (i, &d) in dpre.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        g.bias[i] += d;
        for (w, &x) in g.weights.row_mut(i).iter_mut().zip(input) {
            *w += d * x;
        }
    }
}

/// Central finite-difference gradient of `loss_fn` at `net`'s parameters.
pub fn finite_diff_grad<F>(loss_fn: F, net: &Network, h: f64) -> Result<GradientSet>
where
    F: Fn(&Network) -> f64,
{
    if !(h > 0.0) {
        return Err(AuditError::Argument(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut grads = GradientSet::zeros_like(net);
    let mut flat = Vec::with_capacity(net.num_params());
    let mut probe = net.clone();
    for idx in 0..net.num_params() {
        let mut original = 0.0;
        probe.for_each_param_mut(|i, p| {
            if i == idx {
                original = *p;
                *p = original + h;
            }
        });
        let up = loss_fn(&probe);
        probe.for_each_param_mut(|i, p| {
            if i == idx {
                *p = original - h;
            }
        });
        let down = loss_fn(&probe);
        probe.for_each_param_mut(|i, p| {
            if i == idx {
                *p = original;
            }
        });
        flat.push((up - down) / (2.0 * h));
    }
    let mut it = flat.into_iter();
    for g in &mut grads.layers {
        for w in g.weights.as_mut_slice() {
            *w = it.next().expect("parameter count");
        }
        for b in &mut g.bias {
            *b = it.next().expect("parameter count");
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_net(rng: &mut ChaCha8Rng, widths: &[usize], act: Activation) -> Network {
        crate::init::uniform(widths, act, 1.0, Role::Classifier, rng).unwrap()
    }

    fn single(w: Vec<Vec<f64>>, b: Vec<f64>, a: Activation) -> Network {
        let layer = Layer::new(Matrix::from_rows(&w).unwrap(), b, a).unwrap();
        Network::new(Role::Classifier, vec![layer]).unwrap()
    }

    #[test]
    fn matvec_small_cases() {
        let id = Matrix::identity(2);
        assert_eq!(matvec(&id, &[3.0, -2.0]).unwrap(), vec![3.0, -2.0]);
        let w = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(matvec(&w, &[1.0, 1.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn matvec_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..64).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w = Matrix::new(8, 8, data.clone()).unwrap();
        let got = matvec(&w, &x).unwrap();
        for i in 0..8 {
            let mut acc = 0.0;
            for j in 0..8 {
                acc += data[i * 8 + j] * x[j];
            }
            assert!((got[i] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn matvec_shape_error_names_dims() {
        let w = Matrix::zeros(2, 3);
        let err = matvec(&w, &[1.0, 2.0]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('3') && msg.contains('2'), "{msg}");
    }

    #[test]
    fn activations() {
        assert_eq!(apply_activation(Activation::Relu, &[-1.0, 0.0, 2.0]).unwrap(), vec![0.0, 0.0, 2.0]);
        assert_eq!(apply_activation(Activation::Identity, &[-1.5, 4.0]).unwrap(), vec![-1.5, 4.0]);
        assert_eq!(apply_activation(Activation::Sigmoid, &[0.0]).unwrap(), vec![0.5]);
        assert!(apply_activation(Activation::Tanh, &[f64::NAN]).is_err());
    }

    #[test]
    fn forward_small_cases() {
        let net = single(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0], Activation::Identity);
        assert_eq!(net.logits(&[0.3, -0.7]).unwrap(), vec![0.3, -0.7]);
        let net = single(vec![vec![1.0], vec![-1.0]], vec![0.0, 0.0], Activation::Identity);
        assert_eq!(net.logits(&[1.0]).unwrap(), vec![1.0, -1.0]);
    }

    #[test]
    fn forward_matches_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = random_net(&mut rng, &[5, 7, 6, 3], Activation::Relu);
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut z = x.clone();
        for l in net.layers() {
            let mut a = matvec(&l.weights, &z).unwrap();
            for (ai, bi) in a.iter_mut().zip(&l.bias) {
                *ai += bi;
            }
            z = apply_activation(l.activation, &a).unwrap();
        }
        let got = net.logits(&x).unwrap();
        for (g, e) in got.iter().zip(&z) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_linear_case() {
        let net = single(vec![vec![0.5, -2.0, 1.0]], vec![0.1], Activation::Identity);
        let z0 = [0.3, -1.2, 2.0];
        let trace = forward(&net, &z0).unwrap();
        let g = backward(&net, &trace, &[1.0]).unwrap();
        assert_eq!(g.layers[0].weights.as_slice(), &z0);
        assert_eq!(g.layers[0].bias, vec![1.0]);

        let zero = backward(&net, &trace, &[0.0]).unwrap();
        assert!(zero.is_zero());
    }

    #[test]
    fn backward_rejects_foreign_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_net(&mut rng, &[3, 4, 2], Activation::Relu);
        let b = random_net(&mut rng, &[3, 4, 4, 2], Activation::Relu);
        let trace = forward(&a, &[0.1, 0.2, 0.3]).unwrap();
        assert!(matches!(backward(&b, &trace, &[1.0, 0.0]), Err(AuditError::Structure(_))));
    }

    #[test]
    fn finite_diff_quadratic_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = random_net(&mut rng, &[3, 4, 2], Activation::Tanh);
        let quad = |n: &Network| {
            n.layers()
                .iter()
                .flat_map(|l| l.weights.as_slice().iter().chain(&l.bias))
                .map(|t| t * t)
                .sum::<f64>()
        };
        let g = finite_diff_grad(quad, &net, 1e-5).unwrap();
        let mut expected = net.clone();
        expected.for_each_param_mut(|_, p| *p *= 2.0);
        for (l, e) in g.layers.iter().zip(expected.layers()) {
            for (a, b) in l.weights.as_slice().iter().zip(e.weights.as_slice()) {
                assert!((a - b).abs() < 1e-8);
            }
            for (a, b) in l.bias.iter().zip(&e.bias) {
                assert!((a - b).abs() < 1e-8);
            }
        }
        let g = finite_diff_grad(|_| 4.2, &net, 1e-5).unwrap();
        assert!(g.is_zero());
        assert!(finite_diff_grad(|_| 0.0, &net, 0.0).is_err());
    }

    #[test]
    fn backward_agrees_with_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut checked = 0;
        while checked < 20 {
            let act = [Activation::Relu, Activation::Tanh, Activation::Sigmoid][checked % 3];
            let net = random_net(&mut rng, &[4, 6, 5, 5, 3], act);
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let trace = forward(&net, &x).unwrap();
            if trace.pre.iter().flatten().any(|a| a.abs() < 1e-4) {
                continue;
            }
            let target: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            // loss = Σ target_i · logit_i²
            let loss = |n: &Network| {
                let out = n.logits(&x).unwrap();
                out.iter().zip(&target).map(|(o, t)| t * o * o).sum::<f64>()
            };
            let dl: Vec<f64> = trace.output().iter().zip(&target).map(|(o, t)| 2.0 * t * o).collect();
            let g = backward(&net, &trace, &dl).unwrap();
            let fd = finite_diff_grad(loss, &net, 1e-5).unwrap();
            let err = g.max_relative_error(&fd, 1e-6);
            assert!(err < 1e-4, "case {checked}: relative error {err}");
            checked += 1;
        }
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let net = random_net(&mut rng, &[4, 8, 3], Activation::Sigmoid);
        let back = Network::from_json(&net.to_json().unwrap()).unwrap();
        assert_eq!(back, net);
        let x = [0.1, -0.25, 0.7, 1.0 / 3.0];
        let a = net.logits(&x).unwrap();
        let b = back.logits(&x).unwrap();
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn json_rejects_inconsistent_input_dim() {
        let text = r#"{"role":"classifier","input_dim":3,"layers":[{"weights":[[1.0,2.0]],"bias":[0.0],"activation":"relu"}]}"#;
        assert!(Network::from_json(text).is_err());
        let text = r#"{"role":"classifier","input_dim":2,"layers":[{"weights":[[1.0,2.0]],"bias":[0.0],"activation":"softplus"}]}"#;
        assert!(Network::from_json(text).is_err());
    }
}
