//! A small synthetic generative world: gaussian latent factors, a frozen
//! random decoder to "pixel" space and an encoder fitted to invert it.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Space};
use crate::error::{check_len, AuditError, Result};
use crate::init::glorot_uniform;
use crate::io::{atomic_write, read_json, write_json};
use crate::linalg::{backward, forward, Activation, GradientSet, Layer, Matrix, Network, Role};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ClassRule {
    /// Class 1 when `z[dim] > 0`, class 0 otherwise; samples with
    /// `|z[dim]| < margin` are redrawn.
    SignOfDim { dim: usize, margin: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    LeastSquares,
    Gradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub latent_dim: usize,
    pub pixel_dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub class_rule: ClassRule,
    /// Standard deviation of each latent factor; also its nominal radius.
    pub factor_scales: Vec<f64>,
    pub seed: u64,
    pub decoder_hidden: usize,
    pub encoder_method: FitMethod,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            latent_dim: 4,
            pixel_dim: 16,
            n_train: 2000,
            n_test: 500,
            class_rule: ClassRule::SignOfDim { dim: 0, margin: 0.25 },
            factor_scales: vec![1.0; 4],
            seed: 0,
            decoder_hidden: 32,
            encoder_method: FitMethod::LeastSquares,
        }
    }
}

const MAX_REDRAWS: usize = 1000;

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AuditError::Config(m));
        if self.latent_dim == 0 || self.pixel_dim < self.latent_dim {
            return bad(format!(
                "need 0 < latent_dim <= pixel_dim, got {} and {}",
                self.latent_dim, self.pixel_dim
            ));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return bad("train and test sizes must be positive".into());
        }
        if self.decoder_hidden == 0 {
            return bad("decoder_hidden must be positive".into());
        }
        if self.factor_scales.len() != self.latent_dim || self.factor_scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad(format!(
                "factor_scales must hold {} positive values, got {:?}",
                self.latent_dim, self.factor_scales
            ));
        }
        let ClassRule::SignOfDim { dim, margin } = self.class_rule;
        if dim >= self.latent_dim || !(margin > 0.0 && margin.is_finite()) {
            return bad(format!("class rule needs dim < {} and margin > 0", self.latent_dim));
        }
        Ok(())
    }

    pub fn label(&self, z: &[f64]) -> usize {
        let ClassRule::SignOfDim { dim, .. } = self.class_rule;
        usize::from(z[dim] > 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub decoder: Network,
    pub encoder: Network,
    /// True latent codes with labels.
    pub train: Dataset,
    pub test: Dataset,
    /// Root-mean-square `‖e(g(z)) − z‖` on the test latents.
    pub reconstruction_error: f64,
}

fn sample_latents(cfg: &WorldConfig, n: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let ClassRule::SignOfDim { dim, margin } = cfg.class_rule;
    let normals: Vec<Normal<f64>> = cfg
        .factor_scales
        .iter()
        .map(|&s| Normal::new(0.0, s).expect("validated scale"))
        .collect();
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let mut z: Vec<f64> = normals.iter().map(|d| d.sample(rng)).collect();
        let mut redraws = 0;
        while z[dim].abs() < margin {
            redraws += 1;
            if redraws > MAX_REDRAWS {
                return Err(AuditError::Config(format!(
                    "margin {margin} on dim {dim} rejected {MAX_REDRAWS} consecutive draws; reduce it"
                )));
            }
            z[dim] = normals[dim].sample(rng);
        }
        labels.push(cfg.label(&z));
        rows.push(z);
    }
    Dataset::new(rows, labels)
}

pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = sample_latents(cfg, cfg.n_train, &mut rng)?;
    let test = sample_latents(cfg, cfg.n_test, &mut rng)?;
    let decoder = glorot_uniform(
        &[cfg.latent_dim, cfg.decoder_hidden, cfg.pixel_dim],
        Activation::Relu,
        Role::Decoder,
        &mut rng,
    )?;
    let (encoder, reconstruction_error) = fit_encoder(&decoder, &train, &test, cfg.encoder_method, &mut rng)?;
    Ok(World {
        config: cfg.clone(),
        decoder,
        encoder,
        train,
        test,
        reconstruction_error,
    })
}

/// Fits an encoder to invert `decoder` on `train` latents and reports the
/// root-mean-square reconstruction error on `held_out`.
pub fn fit_encoder<R: Rng + ?Sized>(
    decoder: &Network,
    train: &Dataset,
    held_out: &Dataset,
    method: FitMethod,
    rng: &mut R,
) -> Result<(Network, f64)> {
    if train.is_empty() {
        return Err(AuditError::Argument("cannot fit an encoder on an empty training set".into()));
    }
    check_len("training latent width", decoder.input_dim(), train.dim())?;
    let pixels = train.map_rows(|z| decoder.logits(z))?;
    let encoder = match method {
        FitMethod::LeastSquares => least_squares_encoder(&pixels, train)?,
        FitMethod::Gradient => gradient_encoder(&pixels, train, rng)?,
    };
    let err = reconstruction_error(decoder, &encoder, held_out)?;
    Ok((encoder, err))
}

pub fn reconstruction_error(decoder: &Network, encoder: &Network, latents: &Dataset) -> Result<f64> {
    if latents.is_empty() {
        return Err(AuditError::Argument("no latents to reconstruct".into()));
    }
    let mut sq = 0.0;
    for (z, _) in latents.iter() {
        let back = encoder.logits(&decoder.logits(z)?)?;
        sq += back.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok((sq / latents.len() as f64).sqrt())
}

/// Linear map with bias from the normal equations `(AᵀA) B = AᵀZ`, where `A`
/// is the pixel matrix with a column of ones.
fn least_squares_encoder(pixels: &Dataset, latents: &Dataset) -> Result<Network> {
    let (n, m, d) = (pixels.len(), pixels.dim(), latents.dim());
    let a = DMatrix::from_fn(n, m + 1, |i, j| if j < m { pixels.row(i)[j] } else { 1.0 });
    let z = DMatrix::from_fn(n, d, |i, j| latents.row(i)[j]);
    let gram = a.transpose() * &a;
    let rhs = a.transpose() * &z;
    let well_conditioned = |g: &DMatrix<f64>| {
        g.clone().cholesky().filter(|c| {
            let diag = c.l().diagonal();
            let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            lo * lo > 1e-12 * hi * hi
        })
    };
    let chol = match well_conditioned(&gram) {
        Some(c) => c,
        None => {
            log::warn!("normal equations are singular; falling back to ridge with lambda = 1e-8");
            let ridge = &gram + DMatrix::identity(m + 1, m + 1) * 1e-8;
            ridge
                .cholesky()
                .ok_or_else(|| AuditError::Argument("ridge-regularised normal equations are not positive definite".into()))?
        }
    };
    let b = chol.solve(&rhs);
    let mut weights = Matrix::zeros(d, m);
    let mut bias = vec![0.0; d];
    for k in 0..d {
        for j in 0..m {
            weights.set(k, j, b[(j, k)]);
        }
        bias[k] = b[(m, k)];
    }
    Network::new(Role::Encoder, vec![Layer::new(weights, bias, Activation::Identity)?])
}

/// Small relu network trained with Adam on the mean squared reconstruction error.
fn gradient_encoder<R: Rng + ?Sized>(pixels: &Dataset, latents: &Dataset, rng: &mut R) -> Result<Network> {
    const EPOCHS: usize = 200;
    const BATCH: usize = 64;
    const LR: f64 = 3e-3;
    let (m, d) = (pixels.dim(), latents.dim());
    let mut net = glorot_uniform(&[m, 32, d], Activation::Relu, Role::Encoder, rng)?;
    let n_params = net.num_params();
    let (mut first, mut second) = (vec![0.0; n_params], vec![0.0; n_params]);
    let (b1, b2) = (0.9f64, 0.999f64);
    let mut step = 0;
    let mut order: Vec<usize> = (0..pixels.len()).collect();
    for _ in 0..EPOCHS {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
        for chunk in order.chunks(BATCH) {
            let mut grads = GradientSet::zeros_like(&net);
            for &i in chunk {
                let trace = forward(&net, pixels.row(i))?;
                let g: Vec<f64> = trace
                    .output()
                    .iter()
                    .zip(latents.row(i))
                    .map(|(y, t)| 2.0 * (y - t) / chunk.len() as f64)
                    .collect();
                grads.add_scaled(&backward(&net, &trace, &g)?, 1.0);
            }
            step += 1;
            let g = grads.flatten();
            for ((mm, vv), gi) in first.iter_mut().zip(second.iter_mut()).zip(&g) {
                *mm = b1 * *mm + (1.0 - b1) * gi;
                *vv = b2 * *vv + (1.0 - b2) * gi * gi;
            }
            let (c1, c2) = (1.0 - b1.powi(step), 1.0 - b2.powi(step));
            net.for_each_param_mut(|i, p| *p -= LR * (first[i] / c1) / ((second[i] / c2).sqrt() + 1e-8));
        }
    }
    Ok(net)
}

impl World {
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_len("latent code", self.decoder.input_dim(), z.len())?;
        self.decoder.logits(z)
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("pixel vector", self.encoder.input_dim(), x.len())?;
        self.encoder.logits(x)
    }

    /// Nominal perturbation radius of a latent dimension.
    pub fn nominal_epsilon(&self, dim: usize) -> f64 {
        self.config.factor_scales[dim]
    }

    pub fn pixels(&self, latents: &Dataset) -> Result<Dataset> {
        latents.map_rows(|z| self.decode(z))
    }

    /// Writes `decoder.json`, `encoder.json`, `train.csv`, `test.csv`,
    /// `train_pixels.csv`, `test_pixels.csv` and `config.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        atomic_write(&dir.join("decoder.json"), self.decoder.to_json()?.as_bytes())?;
        atomic_write(&dir.join("encoder.json"), self.encoder.to_json()?.as_bytes())?;
        atomic_write(&dir.join("train.csv"), self.train.to_csv(Space::Latent)?.as_bytes())?;
        atomic_write(&dir.join("test.csv"), self.test.to_csv(Space::Latent)?.as_bytes())?;
        atomic_write(&dir.join("train_pixels.csv"), self.pixels(&self.train)?.to_csv(Space::Pixel)?.as_bytes())?;
        atomic_write(&dir.join("test_pixels.csv"), self.pixels(&self.test)?.to_csv(Space::Pixel)?.as_bytes())?;
        write_json(
            &dir.join("config.json"),
            &WorldRecord {
                config: self.config.clone(),
                reconstruction_error: self.reconstruction_error,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let record: WorldRecord = read_json(&dir.join("config.json"))?;
        let decoder = Network::from_json(&std::fs::read_to_string(dir.join("decoder.json"))?)?;
        let encoder = Network::from_json(&std::fs::read_to_string(dir.join("encoder.json"))?)?;
        let (train, _) = Dataset::load(&dir.join("train.csv"))?;
        let (test, _) = Dataset::load(&dir.join("test.csv"))?;
        Ok(Self {
            config: record.config,
            decoder,
            encoder,
            train,
            test,
            reconstruction_error: record.reconstruction_error,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct WorldRecord {
    #[serde(flatten)]
    config: WorldConfig,
    reconstruction_error: f64,
}
