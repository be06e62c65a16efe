//! Seeded network initialisers.

use rand::Rng;

use crate::error::{AuditError, Result};
use crate::linalg::{Activation, Layer, Matrix, Network, Role};

/// Glorot/Xavier uniform weights in `±√(6/(fan_in+fan_out))`, zero biases.
///
/// `arch` lists every width from input to output; hidden layers use
/// `hidden` and the last layer is identity.
pub fn glorot_uniform<R: Rng + ?Sized>(
    arch: &[usize],
    hidden: Activation,
    role: Role,
    rng: &mut R,
) -> Result<Network> {
    build(arch, hidden, role, |fan_in, fan_out, r: &mut R| {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        (r.random_range(-limit..=limit), 0.0)
    }, rng)
}

/// Weights and biases drawn uniformly from `±scale`.
pub fn uniform<R: Rng + ?Sized>(
    arch: &[usize],
    hidden: Activation,
    scale: f64,
    role: Role,
    rng: &mut R,
) -> Result<Network> {
    build(arch, hidden, role, |_, _, r: &mut R| {
        (r.random_range(-scale..=scale), r.random_range(-scale..=scale))
    }, rng)
}

fn build<R: Rng + ?Sized>(
    arch: &[usize],
    hidden: Activation,
    role: Role,
    mut draw: impl FnMut(usize, usize, &mut R) -> (f64, f64),
    rng: &mut R,
) -> Result<Network> {
    if arch.len() < 2 || arch.contains(&0) {
        return Err(AuditError::Config(format!(
            "architecture needs at least two positive widths, got {arch:?}"
        )));
    }
    let mut layers = Vec::with_capacity(arch.len() - 1);
    for (k, w) in arch.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let mut weights = Vec::with_capacity(fan_in * fan_out);
        let mut bias = Vec::with_capacity(fan_out);
        for _ in 0..fan_out {
            for _ in 0..fan_in {
                weights.push(draw(fan_in, fan_out, rng).0);
            }
        }
        for _ in 0..fan_out {
            bias.push(draw(fan_in, fan_out, rng).1);
        }
        let act = if k + 2 == arch.len() { Activation::Identity } else { hidden };
        layers.push(Layer::new(Matrix::new(fan_out, fan_in, weights)?, bias, act)?);
    }
    Network::new(role, layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_limits_and_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = glorot_uniform(&[4, 32, 2], Activation::Relu, Role::Classifier, &mut rng).unwrap();
        let limit = (6.0f64 / 36.0).sqrt();
        assert!(net.layers()[0].weights.as_slice().iter().all(|w| w.abs() <= limit));
        assert!(net.layers().iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        assert_eq!(net.layers()[1].activation, Activation::Identity);
    }

    #[test]
    fn same_seed_same_network() {
        let a = glorot_uniform(&[3, 5, 2], Activation::Relu, Role::Classifier, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = glorot_uniform(&[3, 5, 2], Activation::Relu, Role::Classifier, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_degenerate_arch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(glorot_uniform(&[4], Activation::Relu, Role::Classifier, &mut rng).is_err());
        assert!(glorot_uniform(&[4, 0, 2], Activation::Relu, Role::Classifier, &mut rng).is_err());
    }
}
