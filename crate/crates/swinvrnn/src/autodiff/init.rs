//! Parameter initializers.

use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Arr;

/// Initialization scheme for a parameter tensor.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Normal(0, std) truncated to two standard deviations.
    TruncNormal { std: f64 },
    /// Uniform(-a, a) with `a = sqrt(1 / fan_in)`.
    UniformFanIn { fan_in: usize },
}

pub fn make(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Arr {
    let dim = ndarray::IxDyn(shape);
    match init {
        Init::Zeros => ArrayD::zeros(dim),
        Init::Ones => ArrayD::ones(dim),
        Init::Const(c) => ArrayD::from_elem(dim, c),
        Init::TruncNormal { std } => {
            let n = shape.iter().product::<usize>();
            let mut vals = Vec::with_capacity(n);
            while vals.len() < n {
                let z: f64 = StandardNormal.sample(rng);
                if z.abs() <= 2.0 {
                    vals.push(z * std);
                }
            }
            ArrayD::from_shape_vec(dim, vals).expect("matching length")
        }
        Init::UniformFanIn { fan_in } => {
            let a = (1.0 / fan_in as f64).sqrt();
            let n = shape.iter().product::<usize>();
            let vals: Vec<f64> = (0..n).map(|_| rng.gen_range(-a..a)).collect();
            ArrayD::from_shape_vec(dim, vals).expect("matching length")
        }
    }
}

/// Inverse of softplus: returns `x` with `ln(1 + e^x) = y`.
pub fn softplus_inverse(y: f64) -> f64 {
    assert!(y > 0.0, "softplus is positive");
    y + (-(-y).exp_m1()).ln() // ln(e^y - 1) evaluated stably
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn trunc_normal_within_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = make(&[1000], Init::TruncNormal { std: 0.02 }, &mut rng);
        assert!(a.iter().all(|v| v.abs() <= 0.04 + 1e-12));
    }

    #[test]
    fn softplus_inverse_roundtrip() {
        for y in [1e-3, 0.5, 1.0, 2.0, 20.0] {
            let x = softplus_inverse(y);
            let back = x.max(0.0) + (-x.abs()).exp().ln_1p();
            assert!((back - y).abs() < 1e-12, "y={y} back={back}");
        }
    }
}
