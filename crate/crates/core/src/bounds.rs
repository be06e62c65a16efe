//! Guaranteed output bounds over latent ε-balls.
//!
//! The perturbation set fixes every latent coordinate at its nominal value
//! except for a chosen subset of dimensions, which may move anywhere inside
//! an ℓ_p ball of radius ε. The first layer is bounded in closed form with
//! the dual norm of each weight row restricted to those dimensions; deeper
//! layers are bounded by midpoint/radius interval propagation. On top of
//! the interval pass, [`crown_backward`] tightens a linear output
//! specification by substituting it backwards through linear relaxations of
//! each relu.

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, AuditError, Result};
use crate::linalg::{dot, matvec_transposed, Activation, Layer, Network, Role};

/// Elementwise lower/upper bounds on a vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Interval {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_len("interval bounds", lower.len(), upper.len())?;
        check_finite("interval lower bound", &lower)?;
        check_finite("interval upper bound", &upper)?;
        if let Some(i) = (0..lower.len()).find(|&i| lower[i] > upper[i]) {
            return Err(AuditError::Argument(format!(
                "interval lower {} exceeds upper {} at index {i}",
                lower[i], upper[i]
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn point(x: &[f64]) -> Self {
        Self {
            lower: x.to_vec(),
            upper: x.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    /// True when every coordinate of `x` lies in `[lower − slack, upper + slack]`.
    pub fn contains(&self, x: &[f64], slack: f64) -> bool {
        x.len() == self.len()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&v, (&l, &u))| v >= l - slack && v <= u + slack)
    }

    /// True when `self ⊆ other` up to `slack`.
    pub fn is_within(&self, other: &Interval, slack: f64) -> bool {
        self.len() == other.len()
            && (0..self.len()).all(|i| {
                self.lower[i] >= other.lower[i] - slack && self.upper[i] <= other.upper[i] + slack
            })
    }

    pub fn half_widths(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| (u - l) / 2.0).collect()
    }

    fn map(&self, act: Activation) -> Interval {
        Interval {
            lower: self.lower.iter().map(|&x| act.eval(x)).collect(),
            upper: self.upper.iter().map(|&x| act.eval(x)).collect(),
        }
    }
}

/// Norm of the perturbation ball.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Norm {
    #[serde(rename = "l2")]
    L2,
    #[serde(rename = "linf")]
    Linf,
}

impl Norm {
    /// Dual norm ‖·‖_q with 1/p + 1/q = 1 of the given coefficients.
    pub fn dual(self, coeffs: impl Iterator<Item = f64>) -> f64 {
        match self {
            Norm::Linf => coeffs.map(f64::abs).sum(),
            Norm::L2 => coeffs.map(|v| v * v).sum::<f64>().sqrt(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Norm::L2 => "l2",
            Norm::Linf => "linf",
        }
    }
}

impl std::str::FromStr for Norm {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" | "2" => Ok(Norm::L2),
            "linf" | "inf" => Ok(Norm::Linf),
            other => Err(AuditError::Argument(format!(
                "unsupported norm `{other}`; expected l2 or linf"
            ))),
        }
    }
}

/// ε-ball in the chosen norm over a subset of latent dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    dims: Vec<usize>,
    epsilon: f64,
    norm: Norm,
}

impl PerturbationSpec {
    pub fn new(dims: Vec<usize>, epsilon: f64, norm: Norm) -> Result<Self> {
        let mut dims = dims;
        dims.sort_unstable();
        dims.dedup();
        if dims.is_empty() {
            return Err(AuditError::Argument("perturbation needs at least one dimension".into()));
        }
        if !(epsilon.is_finite() && epsilon >= 0.0) {
            return Err(AuditError::Argument(format!("epsilon must be finite and >= 0, got {epsilon}")));
        }
        Ok(Self { dims, epsilon, norm })
    }

    /// Perturbs every one of `width` coordinates.
    pub fn full(width: usize, epsilon: f64, norm: Norm) -> Result<Self> {
        Self::new((0..width).collect(), epsilon, norm)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn norm(&self) -> Norm {
        self.norm
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        Self::new(self.dims.clone(), epsilon, self.norm)
    }

    pub fn check_width(&self, width: usize) -> Result<()> {
        match self.dims.last() {
            Some(&max) if max >= width => Err(AuditError::Argument(format!(
                "perturbed dimension {max} out of range for latent width {width}"
            ))),
            _ => Ok(()),
        }
    }

    /// `ε · ‖row restricted to dims‖_q`, the largest change of `row·z` over the ball.
    pub fn support(&self, row: &[f64]) -> f64 {
        if self.epsilon == 0.0 {
            return 0.0;
        }
        self.epsilon * self.norm.dual(self.dims.iter().map(|&j| row[j]))
    }

    /// True when `z` differs from `z0` only on the perturbed dims and within ε.
    pub fn contains(&self, z0: &[f64], z: &[f64], slack: f64) -> bool {
        if z0.len() != z.len() {
            return false;
        }
        let off_dims_fixed = (0..z.len())
            .filter(|j| self.dims.binary_search(j).is_err())
            .all(|j| z[j] == z0[j]);
        let deltas = self.dims.iter().map(|&j| z[j] - z0[j]);
        let size = match self.norm {
            Norm::Linf => deltas.map(f64::abs).fold(0.0, f64::max),
            Norm::L2 => deltas.map(|v| v * v).sum::<f64>().sqrt(),
        };
        off_dims_fixed && size <= self.epsilon + slack
    }
}

/// Output specification `c·z_K + d ≤ 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSpec {
    pub c: Vec<f64>,
    pub d: f64,
}

impl LinearSpec {
    pub fn new(c: Vec<f64>, d: f64) -> Result<Self> {
        check_finite("specification coefficients", &c)?;
        check_finite("specification offset", &[d])?;
        Ok(Self { c, d })
    }

    /// `z_y − z_{y_true} ≤ 0`: class `y` never overtakes the true class.
    pub fn margin(num_classes: usize, y: usize, y_true: usize) -> Result<Self> {
        if y >= num_classes || y_true >= num_classes {
            return Err(AuditError::Argument(format!(
                "class index out of range for {num_classes} classes"
            )));
        }
        let mut c = vec![0.0; num_classes];
        c[y] += 1.0;
        c[y_true] -= 1.0;
        Ok(Self { c, d: 0.0 })
    }

    /// Every margin spec for `y ≠ y_true`.
    pub fn classification_invariance(num_classes: usize, y_true: usize) -> Result<Vec<Self>> {
        if y_true >= num_classes {
            return Err(AuditError::Argument(format!(
                "true class {y_true} out of range for {num_classes} classes"
            )));
        }
        (0..num_classes)
            .filter(|&y| y != y_true)
            .map(|y| Self::margin(num_classes, y, y_true))
            .collect()
    }

    pub fn evaluate(&self, logits: &[f64]) -> f64 {
        dot(&self.c, logits) + self.d
    }

    /// Upper bound of the spec over a box: `c⁺·upper + c⁻·lower + d`.
    pub fn box_upper_bound(&self, bounds: &Interval) -> f64 {
        self.c
            .iter()
            .zip(bounds.lower.iter().zip(&bounds.upper))
            .map(|(&c, (&l, &u))| if c >= 0.0 { c * u } else { c * l })
            .sum::<f64>()
            + self.d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Engine {
    #[serde(rename = "ibp")]
    Ibp,
    #[serde(rename = "crown-ibp")]
    CrownIbp,
}

impl Engine {
    pub fn as_str(self) -> &'static str {
        match self {
            Engine::Ibp => "ibp",
            Engine::CrownIbp => "crown-ibp",
        }
    }
}

impl std::str::FromStr for Engine {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ibp" => Ok(Engine::Ibp),
            "crown-ibp" | "crown_ibp" => Ok(Engine::CrownIbp),
            other => Err(AuditError::Argument(format!(
                "unknown engine `{other}`; expected ibp or crown-ibp"
            ))),
        }
    }
}

/// Verdict for one linear specification over one perturbation set.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationOutcome {
    /// `upper_bound < 0`.
    pub verified: bool,
    /// Guaranteed maximum of `c·z_K + d` over the set.
    pub upper_bound: f64,
    pub output_interval: Interval,
    pub engine: Engine,
}

#[derive(Serialize, Deserialize)]
struct OutcomeRepr {
    verified: bool,
    upper_bound: f64,
    engine: Engine,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Serialize for VerificationOutcome {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        OutcomeRepr {
            verified: self.verified,
            upper_bound: self.upper_bound,
            engine: self.engine,
            lower: self.output_interval.lower.clone(),
            upper: self.output_interval.upper.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for VerificationOutcome {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error;
        let r = OutcomeRepr::deserialize(d)?;
        let output_interval = Interval::new(r.lower, r.upper).map_err(D::Error::custom)?;
        Ok(Self {
            verified: r.verified,
            upper_bound: r.upper_bound,
            output_interval,
            engine: r.engine,
        })
    }
}

fn holder_preactivation(layer: &Layer, z0: &[f64], pert: &PerturbationSpec) -> Result<Interval> {
    check_len("first-layer input", layer.input_dim(), z0.len())?;
    pert.check_width(z0.len())?;
    let center = layer.affine(z0)?;
    let mut lower = Vec::with_capacity(center.len());
    let mut upper = Vec::with_capacity(center.len());
    for (i, &c) in center.iter().enumerate() {
        let r = pert.support(layer.weights.row(i));
        lower.push(c - r);
        upper.push(c + r);
    }
    Ok(Interval { lower, upper })
}

/// Post-activation bounds of the first layer over the perturbation ball.
///
/// Each pre-activation row is `W_i·z0 + b_i ± ε‖W_i restricted to dims‖_q`;
/// coordinates outside `dims` contribute exactly their nominal value.
pub fn holder_first_layer(layer: &Layer, z0: &[f64], pert: &PerturbationSpec) -> Result<Interval> {
    Ok(holder_preactivation(layer, z0, pert)?.map(layer.activation))
}

fn ibp_preactivation(layer: &Layer, input: &Interval) -> Result<Interval> {
    check_len("interval layer input", layer.input_dim(), input.len())?;
    let mid: Vec<f64> = input
        .lower
        .iter()
        .zip(&input.upper)
        .map(|(l, u)| (u + l) / 2.0)
        .collect();
    let rad = input.half_widths();
    let center = layer.affine(&mid)?;
    let mut lower = Vec::with_capacity(center.len());
    let mut upper = Vec::with_capacity(center.len());
    for (i, &c) in center.iter().enumerate() {
        let r: f64 = layer
            .weights
            .row(i)
            .iter()
            .zip(&rad)
            .map(|(w, r)| w.abs() * r)
            .sum();
        lower.push(c - r);
        upper.push(c + r);
    }
    Ok(Interval { lower, upper })
}

/// One interval step: `W·μ + b ± |W|·r`, then the monotone activation on both ends.
pub fn ibp_step(layer: &Layer, input: &Interval) -> Result<Interval> {
    Ok(ibp_preactivation(layer, input)?.map(layer.activation))
}

/// Pre-activation bounds of every layer plus the output box, computed once
/// and shared by all specifications checked on the same perturbation set.
#[derive(Debug, Clone)]
pub struct NetworkBounds {
    pub pre_activation: Vec<Interval>,
    pub output: Interval,
}

impl NetworkBounds {
    /// Interval pass with no role check; the encoder route uses this directly.
    pub fn compute(net: &Network, z0: &[f64], pert: &PerturbationSpec) -> Result<Self> {
        check_finite("nominal latent", z0)?;
        let layers = net.layers();
        let mut pre = Vec::with_capacity(layers.len());
        let mut post = Vec::with_capacity(layers.len());
        let first = holder_preactivation(&layers[0], z0, pert)?;
        post.push(first.map(layers[0].activation));
        pre.push(first);
        for layer in &layers[1..] {
            let p = ibp_preactivation(layer, post.last().expect("nonempty"))?;
            post.push(p.map(layer.activation));
            pre.push(p);
        }
        Ok(Self {
            pre_activation: pre,
            output: post.pop().expect("nonempty"),
        })
    }

    pub fn ibp_upper_bound(&self, spec: &LinearSpec) -> Result<f64> {
        check_len("specification coefficients", self.output.len(), spec.c.len())?;
        Ok(spec.box_upper_bound(&self.output))
    }

    /// Backward linear-relaxation bound on `c·z_K + d`, never looser than the
    /// box bound on the same output interval.
    pub fn crown_upper_bound(
        &self,
        net: &Network,
        z0: &[f64],
        pert: &PerturbationSpec,
        spec: &LinearSpec,
    ) -> Result<f64> {
        let ibp = self.ibp_upper_bound(spec)?;
        let backward = backward_relaxation(net, &self.pre_activation, z0, pert, spec)?;
        Ok(backward.min(ibp))
    }

    pub fn upper_bound(
        &self,
        net: &Network,
        z0: &[f64],
        pert: &PerturbationSpec,
        spec: &LinearSpec,
        engine: Engine,
    ) -> Result<f64> {
        match engine {
            Engine::Ibp => self.ibp_upper_bound(spec),
            Engine::CrownIbp => self.crown_upper_bound(net, z0, pert, spec),
        }
    }
}

/// Fails unless every layer is relu or identity.
pub fn check_crown_support(net: &Network) -> Result<()> {
    for (k, layer) in net.layers().iter().enumerate() {
        if !matches!(layer.activation, Activation::Relu | Activation::Identity) {
            return Err(AuditError::Capability(format!(
                "crown-ibp supports relu/identity layers only; layer {k} is {}, use the ibp engine",
                layer.activation.name()
            )));
        }
    }
    Ok(())
}

fn backward_relaxation(
    net: &Network,
    pre: &[Interval],
    z0: &[f64],
    pert: &PerturbationSpec,
    spec: &LinearSpec,
) -> Result<f64> {
    check_crown_support(net)?;
    check_len("specification coefficients", net.output_dim(), spec.c.len())?;
    let mut lambda = spec.c.clone();
    let mut constant = spec.d;
    for (layer, bounds) in net.layers().iter().zip(pre).rev() {
        if layer.activation == Activation::Relu {
            for (j, coef) in lambda.iter_mut().enumerate() {
                let (l, u) = (bounds.lower[j], bounds.upper[j]);
                if u <= 0.0 {
                    *coef = 0.0;
                } else if l >= 0.0 {
                    // active: identity
                } else if *coef >= 0.0 {
                    // chord through (l, 0) and (u, u)
                    let slope = u / (u - l);
                    constant += *coef * (-slope * l);
                    *coef *= slope;
                } else {
                    let alpha = if u >= -l { 1.0 } else { 0.0 };
                    *coef *= alpha;
                }
            }
        }
        constant += dot(&lambda, &layer.bias);
        lambda = matvec_transposed(&layer.weights, &lambda)?;
    }
    Ok(dot(&lambda, z0) + pert.support(&lambda) + constant)
}

fn require_classifier(net: &Network) -> Result<()> {
    if net.role() == Role::Classifier {
        Ok(())
    } else {
        Err(AuditError::Argument(format!(
            "bound propagation expects a classifier network, got {:?}",
            net.role()
        )))
    }
}

/// Guaranteed box on the logits over the latent perturbation set.
pub fn propagate_bounds(net: &Network, z0: &[f64], pert: &PerturbationSpec) -> Result<Interval> {
    require_classifier(net)?;
    Ok(NetworkBounds::compute(net, z0, pert)?.output)
}

/// Guaranteed upper bound on `c·z_K + d`: intermediate boxes from the
/// interval pass, final bound by backward substitution through relu
/// relaxations.
pub fn crown_backward(
    net: &Network,
    z0: &[f64],
    pert: &PerturbationSpec,
    spec: &LinearSpec,
) -> Result<f64> {
    require_classifier(net)?;
    check_crown_support(net)?;
    NetworkBounds::compute(net, z0, pert)?.crown_upper_bound(net, z0, pert, spec)
}

/// Upper bound for every wrong class, lower bound for the true class.
pub fn worst_case_logits(bounds: &Interval, y_true: usize) -> Result<Vec<f64>> {
    if y_true >= bounds.len() {
        return Err(AuditError::Argument(format!(
            "true class {y_true} out of range for {} logits",
            bounds.len()
        )));
    }
    Ok((0..bounds.len())
        .map(|y| if y == y_true { bounds.lower[y] } else { bounds.upper[y] })
        .collect())
}

pub fn eval_linear_spec(
    spec: &LinearSpec,
    net: &Network,
    z0: &[f64],
    pert: &PerturbationSpec,
    engine: Engine,
) -> Result<VerificationOutcome> {
    require_classifier(net)?;
    if engine == Engine::CrownIbp {
        check_crown_support(net)?;
    }
    let bounds = NetworkBounds::compute(net, z0, pert)?;
    let upper_bound = bounds.upper_bound(net, z0, pert, spec, engine)?;
    Ok(VerificationOutcome {
        verified: upper_bound < 0.0,
        upper_bound,
        output_interval: bounds.output,
        engine,
    })
}
