//! Parameterized building blocks shared by the image and sequence models.

use rand::Rng;
use rand_distr::{Bernoulli, Distribution};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::graph::{Conv2dSpec, Graph, Var};
use super::params::{uniform_fan_in, ParamId, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform_fan_in(&[inputs, outputs], inputs, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Self { weight, bias }
    }

    /// Zero-initialized projection, used where the layer should start as a no-op.
    pub fn zeroed<T: Scalar>(store: &mut ParamStore<T>, name: &str, inputs: usize, outputs: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[inputs, outputs]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            uniform_fan_in(&[out_ch, in_ch, kernel, kernel], fan_in, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Self {
            weight,
            bias,
            spec: Conv2dSpec {
                stride,
                padding: kernel / 2,
            },
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, b, self.spec)
    }
}

/// Time-axis convolution over `[len, channels]` sequences.
#[derive(Clone, Copy, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel;
        let weight = store.add(format!("{name}.weight"), uniform_fan_in(&[fan_in, out_ch], fan_in, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Self {
            weight,
            bias,
            kernel,
            stride,
            padding,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv1d(x, w, b, self.kernel, self.stride, self.padding)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DepthwiseConv1d {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DepthwiseConv1d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "depthwise kernel must be odd");
        let weight = store.add(format!("{name}.weight"), uniform_fan_in(&[kernel, channels], kernel, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[channels]));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.depthwise_conv1d(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        Self { gamma, beta }
    }

    pub fn layer<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }

    pub fn group<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, groups: usize) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.group_norm(x, gamma, beta, groups)
    }
}

/// Inverted dropout; the identity when `rng` is `None` or `p == 0`.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(g: &mut Graph<T>, x: Var, p: f64, rng: Option<&mut R>) -> Var {
    let Some(rng) = rng else { return x };
    if p <= 0.0 {
        return x;
    }
    let keep = Bernoulli::new(1.0 - p).expect("dropout probability in [0, 1)");
    let scale = T::lit(1.0 / (1.0 - p));
    let shape = g.shape(x).to_vec();
    let n = shape.iter().product();
    let mask: Vec<T> = (0..n)
        .map(|_| if keep.sample(rng) { scale } else { T::zero() })
        .collect();
    let mask = g.constant(Tensor::from_vec(&shape, mask).unwrap());
    g.mul(x, mask)
}

/// Largest group count `<= preferred` that divides `channels`.
pub fn group_count(channels: usize, preferred: usize) -> usize {
    (1..=preferred.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}
