//! Small trainable building blocks on top of the autodiff engine.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::init::{make, Init};
use crate::autodiff::{ops, Arr, ParamStore, Session, Tensor};

/// Default weight scale for transformer-style layers.
pub const DEFAULT_WEIGHT_STD: f64 = 0.02;

/// Fully connected layer on `[n, d_in]` matrices.
#[derive(Debug, Clone)]
pub struct Linear {
    w: String,
    b: Option<String>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn init(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        path: &str,
        d_in: usize,
        d_out: usize,
        w_init: Init,
        bias: bool,
    ) -> Self {
        let w = format!("{path}.weight");
        ps.insert(&w, make(&[d_in, d_out], w_init, rng));
        let b = bias.then(|| {
            let b = format!("{path}.bias");
            ps.insert(&b, make(&[d_out], Init::Zeros, rng));
            b
        });
        Linear { w, b, d_in, d_out }
    }

    pub fn forward<'a>(&self, sess: &'a Session<'a>, x: Tensor<'a>) -> Tensor<'a> {
        let y = ops::matmul(x, sess.param(&self.w));
        match &self.b {
            Some(b) => ops::add_row_bias(y, sess.param(b)),
            None => y,
        }
    }

    pub fn weight_name(&self) -> &str {
        &self.w
    }

    pub fn bias_name(&self) -> Option<&str> {
        self.b.as_deref()
    }
}

/// Layer normalization over the channel axis of `[n, c]` matrices.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: String,
    beta: String,
    eps: f64,
}

impl LayerNorm {
    pub fn init(ps: &mut ParamStore, rng: &mut ChaCha8Rng, path: &str, dim: usize) -> Self {
        let gamma = format!("{path}.gamma");
        let beta = format!("{path}.beta");
        ps.insert(&gamma, make(&[dim], Init::Ones, rng));
        ps.insert(&beta, make(&[dim], Init::Zeros, rng));
        LayerNorm {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn forward<'a>(&self, sess: &'a Session<'a>, x: Tensor<'a>) -> Tensor<'a> {
        let mu = ops::mean_cols(x);
        let centered = ops::sub_col(x, mu);
        let var = ops::mean_cols(ops::square(centered));
        let std = ops::sqrt(ops::add_scalar(var, self.eps));
        let normed = ops::div_col(centered, std);
        ops::add_row_bias(ops::mul_row(normed, sess.param(&self.gamma)), sess.param(&self.beta))
    }
}

/// Two-layer MLP with GELU, the transformer feed-forward block.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn init(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        path: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        let std = Init::TruncNormal {
            std: DEFAULT_WEIGHT_STD,
        };
        Mlp {
            fc1: Linear::init(ps, rng, &format!("{path}.fc1"), dim, hidden, std, true),
            fc2: Linear::init(ps, rng, &format!("{path}.fc2"), hidden, dim, std, true),
        }
    }

    pub fn forward<'a>(&self, sess: &'a Session<'a>, x: Tensor<'a>) -> Tensor<'a> {
        self.fc2.forward(sess, ops::gelu(self.fc1.forward(sess, x)))
    }
}

/// Inverted-dropout mask application; the mask is a constant of the same
/// shape carrying `0` or `1/keep` entries.
pub fn apply_mask<'a>(sess: &'a Session<'a>, x: Tensor<'a>, mask: Arr) -> Tensor<'a> {
    ops::mul(x, sess.constant(mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::SeedableRng;

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ln = LayerNorm::init(&mut ps, &mut rng, "ln", 4);
        let sess = Session::new(&ps);
        let x = sess.constant(arr2(&[[1.0, 2.0, 3.0, 4.0], [10.0, 0.0, -3.0, 7.0]]).into_dyn());
        let y = ln.forward(&sess, x);
        let v = y.value();
        for row in v.view().into_dimensionality::<ndarray::Ix2>().unwrap().rows() {
            let mean: f64 = row.mean().unwrap();
            let var: f64 = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4); // eps shifts variance slightly
        }
    }

    #[test]
    fn linear_shapes_and_bias() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::init(
            &mut ps,
            &mut rng,
            "proj",
            3,
            5,
            Init::TruncNormal { std: 0.02 },
            true,
        );
        let sess = Session::new(&ps);
        let x = sess.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[2, 3])));
        let y = lin.forward(&sess, x);
        assert_eq!(y.shape(), vec![2, 5]);
        // zero input and zero bias gives zero output
        assert!(y.value().iter().all(|&v| v == 0.0));
    }
}
