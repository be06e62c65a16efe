//! Unit tests over datasets: verified error, largest verifiable radius, the
//! pixel-versus-latent comparison and a sampling oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{check_crown_support, Engine, Interval, LinearSpec, NetworkBounds, Norm, PerturbationSpec};
use crate::data::Dataset;
use crate::error::{check_len, AuditError, Result};
use crate::linalg::{anchored_mean, Activation, Network, Role};

/// Which output specifications a unit test asserts.
#[derive(Debug, Clone, PartialEq)]
pub enum SpecFamily {
    /// One margin `z_y − z_true < 0` per wrong class.
    ClassificationInvariance,
    /// Caller-supplied specifications, all of which must hold.
    Explicit(Vec<LinearSpec>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitTest {
    pub id: String,
    pub description: String,
    pub pert: PerturbationSpec,
    pub specs: SpecFamily,
}

impl UnitTest {
    pub fn classification_invariance(id: impl Into<String>, pert: PerturbationSpec) -> Self {
        Self {
            id: id.into(),
            description: String::new(),
            pert,
            specs: SpecFamily::ClassificationInvariance,
        }
    }

    pub fn with_description(mut self, description: impl Into<String>) -> Self {
        self.description = description.into();
        self
    }

    fn specs_for(&self, num_classes: usize, y_true: usize) -> Result<Vec<LinearSpec>> {
        match &self.specs {
            SpecFamily::ClassificationInvariance => LinearSpec::classification_invariance(num_classes, y_true),
            SpecFamily::Explicit(specs) => Ok(specs.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub index: usize,
    pub predicted: usize,
    pub label: usize,
    pub verified: bool,
    /// Largest specification upper bound; for a misclassified sample, the
    /// nominal value of the most violated margin.
    pub worst_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub test_id: String,
    pub epsilon: f64,
    pub engine: Engine,
    #[serde(rename = "n")]
    pub n_samples: usize,
    #[serde(rename = "clean_errors")]
    pub n_clean_errors: usize,
    /// Correctly classified samples whose specification could not be certified.
    #[serde(rename = "unverified")]
    pub n_unverified: usize,
    pub verified_error: f64,
    pub samples: Vec<SampleOutcome>,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_setup(net: &Network, dim: usize, pert: &PerturbationSpec, engine: Engine) -> Result<()> {
    if net.role() != Role::Classifier {
        return Err(AuditError::Argument(format!(
            "unit tests run on a classifier network, got {:?}",
            net.role()
        )));
    }
    check_len("dataset latent width", net.input_dim(), dim)?;
    pert.check_width(dim)?;
    if engine == Engine::CrownIbp {
        check_crown_support(net)?;
    }
    Ok(())
}

fn evaluate_sample(
    net: &Network,
    test: &UnitTest,
    pert: &PerturbationSpec,
    engine: Engine,
    index: usize,
    z0: &[f64],
    label: usize,
) -> Result<SampleOutcome> {
    let logits = net.logits(z0)?;
    if label >= logits.len() {
        return Err(AuditError::Argument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let predicted = argmax(&logits);
    if predicted != label {
        let worst_margin = logits
            .iter()
            .enumerate()
            .filter(|&(y, _)| y != label)
            .map(|(_, z)| z - logits[label])
            .fold(f64::NEG_INFINITY, f64::max);
        return Ok(SampleOutcome {
            index,
            predicted,
            label,
            verified: false,
            worst_margin,
        });
    }
    let bounds = NetworkBounds::compute(net, z0, pert)?;
    let mut worst_margin = f64::NEG_INFINITY;
    for spec in test.specs_for(logits.len(), label)? {
        worst_margin = worst_margin.max(bounds.upper_bound(net, z0, pert, &spec, engine)?);
    }
    Ok(SampleOutcome {
        index,
        predicted,
        label,
        verified: worst_margin < 0.0,
        worst_margin,
    })
}

/// Verifies `test` on every sample of `dataset`.
///
/// Samples are processed in parallel on the current rayon pool; the report is
/// assembled in dataset order and does not depend on the pool size.
pub fn run_unit_test(
    net: &Network,
    dataset: &Dataset,
    test: &UnitTest,
    eps_override: Option<f64>,
    engine: Engine,
) -> Result<VerificationReport> {
    let pert = match eps_override {
        Some(eps) if !(eps >= 0.0 && eps.is_finite()) => {
            return Err(AuditError::Argument(format!("epsilon must be >= 0, got {eps}")))
        }
        Some(eps) => test.pert.with_epsilon(eps)?,
        None => test.pert.clone(),
    };
    if dataset.is_empty() {
        return Err(AuditError::Argument("cannot run a unit test on an empty dataset".into()));
    }
    check_setup(net, dataset.dim(), &pert, engine)?;
    let samples = (0..dataset.len())
        .into_par_iter()
        .map(|i| evaluate_sample(net, test, &pert, engine, i, dataset.row(i), dataset.label(i)))
        .collect::<Result<Vec<_>>>()?;
    let n_clean_errors = samples.iter().filter(|s| s.predicted != s.label).count();
    let n_unverified = samples.iter().filter(|s| s.predicted == s.label && !s.verified).count();
    Ok(VerificationReport {
        test_id: test.id.clone(),
        epsilon: pert.epsilon(),
        engine,
        n_samples: samples.len(),
        n_clean_errors,
        n_unverified,
        verified_error: (n_clean_errors + n_unverified) as f64 / samples.len() as f64,
        samples,
    })
}

/// Result of a bisection for the largest verifiable radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSearch {
    pub epsilon: f64,
    /// Set when the predicate already fails at ε = 0.
    pub unverifiable: bool,
    pub iterations: usize,
}

pub const MAX_BISECTION_STEPS: usize = 30;

/// Default `(ε_max, tol)` for a test whose nominal radius is `nominal`.
pub fn default_search_limits(nominal: f64) -> (f64, f64) {
    let eps_max = 4.0 * nominal;
    (eps_max, 1e-3 * eps_max)
}

fn bisect(tol: f64, eps_max: f64, mut verified: impl FnMut(f64) -> Result<bool>) -> Result<EpsilonSearch> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(AuditError::Argument(format!("tol must be > 0, got {tol}")));
    }
    if !(eps_max > 0.0 && eps_max.is_finite()) {
        return Err(AuditError::Argument(format!("eps_max must be > 0, got {eps_max}")));
    }
    if !verified(0.0)? {
        return Ok(EpsilonSearch {
            epsilon: 0.0,
            unverifiable: true,
            iterations: 0,
        });
    }
    if verified(eps_max)? {
        return Ok(EpsilonSearch {
            epsilon: eps_max,
            unverifiable: false,
            iterations: 0,
        });
    }
    let (mut lo, mut hi) = (0.0, eps_max);
    let mut iterations = 0;
    while hi - lo > tol && iterations < MAX_BISECTION_STEPS {
        let mid = lo + (hi - lo) / 2.0;
        if verified(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
        iterations += 1;
    }
    Ok(EpsilonSearch {
        epsilon: lo,
        unverifiable: false,
        iterations,
    })
}

/// Largest ε at which every sample of `dataset` verifies, to within `tol`.
pub fn largest_epsilon(
    net: &Network,
    dataset: &Dataset,
    test: &UnitTest,
    engine: Engine,
    tol: f64,
    eps_max: f64,
) -> Result<EpsilonSearch> {
    bisect(tol, eps_max, |eps| {
        Ok(run_unit_test(net, dataset, test, Some(eps), engine)?.verified_error == 0.0)
    })
}

/// Independent bisection for every sample.
pub fn largest_epsilon_per_sample(
    net: &Network,
    dataset: &Dataset,
    test: &UnitTest,
    engine: Engine,
    tol: f64,
    eps_max: f64,
) -> Result<Vec<EpsilonSearch>> {
    if dataset.is_empty() {
        return Err(AuditError::Argument("empty dataset".into()));
    }
    check_setup(net, dataset.dim(), &test.pert, engine)?;
    (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            bisect(tol, eps_max, |eps| {
                let pert = test.pert.with_epsilon(eps)?;
                Ok(evaluate_sample(net, test, &pert, engine, i, dataset.row(i), dataset.label(i))?.verified)
            })
        })
        .collect()
}

/// Latent box reached by a full-width pixel-space ball through the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct InducedInterval {
    pub interval: Interval,
    /// Per-latent radius, tracked directly rather than as `(upper − lower)/2`
    /// so that linear encoders report the exact dual-norm value.
    pub half_width: Vec<f64>,
}

pub fn induced_latent_interval(encoder: &Network, x: &[f64], pixel_eps: f64, norm: Norm) -> Result<InducedInterval> {
    if encoder.role() != Role::Encoder {
        return Err(AuditError::Argument(format!(
            "expected an encoder network, got {:?}",
            encoder.role()
        )));
    }
    check_len("encoder input", encoder.input_dim(), x.len())?;
    let pert = PerturbationSpec::full(x.len(), pixel_eps, norm)?;
    let bounds = NetworkBounds::compute(encoder, x, &pert)?;
    let mut radius: Vec<f64> = Vec::new();
    for (k, (layer, pre)) in encoder.layers().iter().zip(&bounds.pre_activation).enumerate() {
        let pre_radius: Vec<f64> = if k == 0 {
            (0..layer.output_dim()).map(|i| pert.support(layer.weights.row(i))).collect()
        } else {
            (0..layer.output_dim())
                .map(|i| layer.weights.row(i).iter().zip(&radius).map(|(w, r)| w.abs() * r).sum())
                .collect()
        };
        radius = if layer.activation == Activation::Identity {
            pre_radius
        } else {
            pre.lower
                .iter()
                .zip(&pre.upper)
                .map(|(&l, &u)| (layer.activation.eval(u) - layer.activation.eval(l)) / 2.0)
                .collect()
        };
    }
    Ok(InducedInterval {
        interval: bounds.output,
        half_width: radius,
    })
}

/// Verified error as a function of ε on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurve {
    pub epsilons: Vec<f64>,
    pub verified_errors: Vec<f64>,
}

impl ErrorCurve {
    /// Smallest ε reaching `target`, linearly interpolated between grid points.
    pub fn epsilon_for(&self, target: f64, route: &'static str) -> Result<f64> {
        let (eps, ve) = (&self.epsilons, &self.verified_errors);
        let unreachable = || AuditError::Unreachable {
            target,
            min: ve.iter().copied().fold(f64::INFINITY, f64::min),
            max: ve.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            route,
        };
        if ve.is_empty() || target < ve[0] {
            return Err(unreachable());
        }
        if ve[0] == target {
            return Ok(eps[0]);
        }
        for i in 1..ve.len() {
            if ve[i] >= target {
                let t = (target - ve[i - 1]) / (ve[i] - ve[i - 1]);
                return Ok(eps[i - 1] + t * (eps[i] - eps[i - 1]));
            }
        }
        Err(unreachable())
    }
}

fn sweep(net: &Network, dataset: &Dataset, test: &UnitTest, grid: &[f64], engine: Engine) -> Result<ErrorCurve> {
    let mut epsilons = grid.to_vec();
    epsilons.sort_by(f64::total_cmp);
    epsilons.dedup();
    let verified_errors = epsilons
        .iter()
        .map(|&e| Ok(run_unit_test(net, dataset, test, Some(e), engine)?.verified_error))
        .collect::<Result<Vec<_>>>()?;
    Ok(ErrorCurve {
        epsilons,
        verified_errors,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonOptions {
    pub dims: Vec<usize>,
    pub norm: Norm,
    pub engine: Engine,
    pub latent_grid: Vec<f64>,
    /// Pixel-space radii; the latent grid is reused when absent.
    pub pixel_grid: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub target_verified_error: f64,
    pub latent_epsilon: f64,
    pub pixel_epsilon: f64,
    pub induced_latent_epsilon: f64,
    pub z_nom: f64,
    pub latent_fraction: f64,
    pub induced_fraction: f64,
    pub latent_curve: ErrorCurve,
    pub pixel_curve: ErrorCurve,
}

/// Matches the verified error of a latent-space test and a pixel-space test
/// and expresses both radii relative to the nominal latent magnitude.
///
/// The latent route perturbs `dims` of `e(x)` for the classifier; the pixel
/// route perturbs every pixel of `x` for `classifier ∘ e`. The pixel radius
/// is then pushed through the encoder to get the induced latent radius.
pub fn compare_pixel_latent(
    encoder: &Network,
    classifier: &Network,
    pixels: &Dataset,
    target_verified_error: f64,
    opts: &ComparisonOptions,
) -> Result<Comparison> {
    if !(0.0..=1.0).contains(&target_verified_error) {
        return Err(AuditError::Argument(format!(
            "target verified error must lie in [0, 1], got {target_verified_error}"
        )));
    }
    if pixels.is_empty() {
        return Err(AuditError::Argument("empty dataset".into()));
    }
    if encoder.role() != Role::Encoder {
        return Err(AuditError::Argument("first network must be an encoder".into()));
    }
    check_len("encoder input", encoder.input_dim(), pixels.dim())?;
    check_len("classifier input", classifier.input_dim(), encoder.output_dim())?;
    let latents = pixels.map_rows(|x| encoder.logits(x))?;

    let latent_test = UnitTest::classification_invariance("latent", PerturbationSpec::new(opts.dims.clone(), 0.0, opts.norm)?);
    let latent_curve = sweep(classifier, &latents, &latent_test, &opts.latent_grid, opts.engine)?;
    let latent_epsilon = latent_curve.epsilon_for(target_verified_error, "latent")?;

    let end_to_end = Network::compose(encoder, classifier, Role::Classifier)?;
    let pixel_test = UnitTest::classification_invariance("pixel", PerturbationSpec::full(pixels.dim(), 0.0, opts.norm)?);
    let pixel_grid = opts.pixel_grid.as_deref().unwrap_or(&opts.latent_grid);
    let pixel_curve = sweep(&end_to_end, pixels, &pixel_test, pixel_grid, opts.engine)?;
    let pixel_epsilon = pixel_curve.epsilon_for(target_verified_error, "pixel")?;

    let mut induced = Vec::with_capacity(pixels.len());
    let mut magnitude = Vec::with_capacity(pixels.len() * opts.dims.len());
    for (i, (x, _)) in pixels.iter().enumerate() {
        let half = induced_latent_interval(encoder, x, pixel_epsilon, opts.norm)?.half_width;
        let on_dims: Vec<f64> = opts.dims.iter().map(|&j| half[j]).collect();
        induced.push(anchored_mean(&on_dims));
        magnitude.extend(opts.dims.iter().map(|&j| latents.row(i)[j].abs()));
    }
    let induced_latent_epsilon = anchored_mean(&induced);
    let z_nom = anchored_mean(&magnitude);
    if !(z_nom > 0.0) {
        return Err(AuditError::Argument("nominal latent magnitude is zero on the perturbed dims".into()));
    }
    Ok(Comparison {
        target_verified_error,
        latent_epsilon,
        pixel_epsilon,
        induced_latent_epsilon,
        z_nom,
        latent_fraction: latent_epsilon / z_nom,
        induced_fraction: induced_latent_epsilon / z_nom,
        latent_curve,
        pixel_curve,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub spec_index: usize,
    pub value: f64,
    pub point: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub n_samples: usize,
    pub logit_min: Vec<f64>,
    pub logit_max: Vec<f64>,
    /// Empirical maximum of each specification.
    pub spec_max: Vec<f64>,
    /// First sampled point where some specification is `≥ 0`.
    pub counterexample: Option<Counterexample>,
}

/// Draws one point of the perturbation ball, uniformly by volume.
pub fn sample_ball<R: Rng + ?Sized>(z0: &[f64], pert: &PerturbationSpec, rng: &mut R) -> Vec<f64> {
    let mut z = z0.to_vec();
    let eps = pert.epsilon();
    if eps == 0.0 {
        return z;
    }
    match pert.norm() {
        Norm::Linf => {
            for &j in pert.dims() {
                z[j] += rng.random_range(-eps..=eps);
            }
        }
        Norm::L2 => {
            let k = pert.dims().len();
            let dir: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if len > 0.0 {
                let radius = eps * rng.random::<f64>().powf(1.0 / k as f64);
                for (&j, d) in pert.dims().iter().zip(&dir) {
                    z[j] += radius * d / len;
                }
            }
        }
    }
    z
}

/// Monte Carlo search for violations of `specs` inside the perturbation set.
pub fn brute_force_oracle(
    net: &Network,
    z0: &[f64],
    pert: &PerturbationSpec,
    specs: &[LinearSpec],
    n_samples: usize,
    seed: u64,
) -> Result<OracleReport> {
    if n_samples == 0 {
        return Err(AuditError::Argument("oracle needs at least one sample".into()));
    }
    check_len("oracle latent", net.input_dim(), z0.len())?;
    pert.check_width(z0.len())?;
    for s in specs {
        check_len("specification coefficients", net.output_dim(), s.c.len())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = net.output_dim();
    let mut logit_min = vec![f64::INFINITY; k];
    let mut logit_max = vec![f64::NEG_INFINITY; k];
    let mut spec_max = vec![f64::NEG_INFINITY; specs.len()];
    let mut counterexample = None;
    for _ in 0..n_samples {
        let z = sample_ball(z0, pert, &mut rng);
        let logits = net.logits(&z)?;
        for (i, &v) in logits.iter().enumerate() {
            logit_min[i] = logit_min[i].min(v);
            logit_max[i] = logit_max[i].max(v);
        }
        for (s, spec) in specs.iter().enumerate() {
            let v = spec.evaluate(&logits);
            spec_max[s] = spec_max[s].max(v);
            if v >= 0.0 && counterexample.is_none() {
                counterexample = Some(Counterexample {
                    spec_index: s,
                    value: v,
                    point: z.clone(),
                });
            }
        }
    }
    Ok(OracleReport {
        n_samples,
        logit_min,
        logit_max,
        spec_max,
        counterexample,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossCheck {
    pub n: usize,
    pub n_verified: usize,
    pub n_with_counterexample: usize,
    /// Samples reported verified for which the oracle found a violation.
    pub contradictions: Vec<usize>,
}

/// Runs the sampling oracle on every correctly classified sample and compares
/// with the verifier. Sample `i` uses stream `i` of the seeded generator, so
/// results do not depend on the thread count.
pub fn cross_check(
    net: &Network,
    dataset: &Dataset,
    test: &UnitTest,
    engine: Engine,
    n_samples: usize,
    seed: u64,
) -> Result<CrossCheck> {
    let report = run_unit_test(net, dataset, test, None, engine)?;
    let found = report
        .samples
        .par_iter()
        .map(|s| {
            if s.predicted != s.label {
                return Ok(false);
            }
            let specs = test.specs_for(net.output_dim(), s.label)?;
            let sample_seed = seed ^ (s.index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let o = brute_force_oracle(net, dataset.row(s.index), &test.pert, &specs, n_samples, sample_seed)?;
            Ok(o.counterexample.is_some())
        })
        .collect::<Result<Vec<bool>>>()?;
    let contradictions = report
        .samples
        .iter()
        .zip(&found)
        .filter(|(s, &f)| s.verified && f)
        .map(|(s, _)| s.index)
        .collect();
    Ok(CrossCheck {
        n: report.n_samples,
        n_verified: report.samples.iter().filter(|s| s.verified).count(),
        n_with_counterexample: found.iter().filter(|&&f| f).count(),
        contradictions,
    })
}
