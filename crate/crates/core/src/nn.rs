//! Small parameterized layers on top of the tensor engine.

use cmunet_tensor::{Buffer, Conv2dSpec, Element, Param, ParamStore, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// `N(0, 2 / fan_in)`, for layers feeding a ReLU.
    He,
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn,
    Zeros,
}

fn init_tensor<T: Element, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, init: Init, rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = match init {
        Init::He => {
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            (0..n).map(|_| T::lit(dist.sample(rng))).collect()
        }
        Init::FanIn => {
            let b = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| T::lit(rng.gen_range(-b..b))).collect()
        }
        Init::Zeros => vec![T::zero(); n],
    };
    Tensor::new(shape, data).expect("shape matches data")
}

#[derive(Clone, Debug)]
pub struct Conv2d<T: Element> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub spec: Conv2dSpec,
}

impl<T: Element> Conv2d<T> {
    /// `k x k` convolution; biases start at zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        spec: Conv2dSpec,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let groups = spec.groups.max(1);
        let fan_in = cin / groups * k * k;
        let weight = store.create(&format!("{name}.weight"), init_tensor(&[cout, cin / groups, k, k], fan_in, init, rng))?;
        let bias = if bias { Some(store.create(&format!("{name}.bias"), Tensor::zeros(&[cout]))?) } else { None };
        Ok(Self { weight, bias, spec })
    }

    /// 1x1 convolution with bias (a per-pixel linear layer over channels).
    pub fn pointwise<R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut R) -> Result<Self> {
        Self::new(store, name, cin, cout, 1, Conv2dSpec::default(), true, Init::FanIn, rng)
    }

    /// Depthwise `k x k` convolution with same padding and bias.
    pub fn depthwise<R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, c: usize, k: usize, rng: &mut R) -> Result<Self> {
        Self::new(store, name, c, c, k, Conv2dSpec::same(k).with_groups(c), true, Init::FanIn, rng)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.bias.as_ref().map(|b| b.tensor());
        Ok(x.conv2d(&self.weight.tensor(), b.as_ref(), self.spec)?)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Batch norm with running statistics (momentum 0.1, unbiased running variance).
#[derive(Clone, Debug)]
pub struct BatchNorm<T: Element> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Buffer<T>,
    pub running_var: Buffer<T>,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

impl<T: Element> BatchNorm<T> {
    pub fn new(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.create(&format!("{name}.gamma"), Tensor::ones(&[c]))?,
            beta: store.create(&format!("{name}.beta"), Tensor::zeros(&[c]))?,
            running_mean: store.create_buffer(&format!("{name}.running_mean"), &[c], vec![T::zero(); c])?,
            running_var: store.create_buffer(&format!("{name}.running_var"), &[c], vec![T::one(); c])?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (g, b) = (self.gamma.tensor(), self.beta.tensor());
        match mode {
            Mode::Eval => Ok(x.batch_norm_eval(&g, &b, &self.running_mean.get(), &self.running_var.get(), BN_EPS)?),
            Mode::Train => {
                let (y, stats) = x.batch_norm_train(&g, &b, BN_EPS)?;
                let m = T::lit(BN_MOMENTUM);
                let n = stats.count as f64;
                let unbias = T::lit(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
                let rm: Vec<T> = self.running_mean.get().iter().zip(&stats.mean).map(|(&r, &s)| (T::one() - m) * r + m * s).collect();
                let rv: Vec<T> =
                    self.running_var.get().iter().zip(&stats.var).map(|(&r, &s)| (T::one() - m) * r + m * s * unbias).collect();
                self.running_mean.set(rm)?;
                self.running_var.set(rv)?;
                Ok(y)
            }
        }
    }
}

/// Layer norm over the channel axis of an NCHW tensor.
#[derive(Clone, Debug)]
pub struct ChannelNorm<T: Element> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

impl<T: Element> ChannelNorm<T> {
    pub fn new(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.create(&format!("{name}.gamma"), Tensor::ones(&[c]))?,
            beta: store.create(&format!("{name}.beta"), Tensor::zeros(&[c]))?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.layer_norm(&self.gamma.tensor(), &self.beta.tensor(), 1, 1e-5)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn three_by_three_conv_two_to_four_counts_seventy_six() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Conv2d::new(&mut store, "c", 2, 4, 3, Conv2dSpec::same(3), true, Init::He, &mut rng).unwrap();
        assert_eq!(store.count(), 76);
    }

    #[test]
    fn running_stats_track_batch_moments() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 1).unwrap();
        let x = Tensor::new(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        bn.forward(&x, Mode::Train).unwrap();
        assert!((bn.running_mean.get()[0] - 0.2).abs() < 1e-12);
        // unbiased variance 2, blended with the initial 1
        assert!((bn.running_var.get()[0] - 1.1).abs() < 1e-12);
    }
}
