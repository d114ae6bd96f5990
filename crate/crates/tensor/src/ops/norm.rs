use crate::element::Element;
use crate::error::{contract_err, dim_err, Result};
use crate::ops::shape::split_axis;
use crate::tensor::Tensor;

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance (the one used for normalization).
    pub var: Vec<T>,
    /// Number of values each statistic was computed from.
    pub count: usize,
}

struct NormSaved<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Element> Tensor<T> {
    /// Normalize over `axis` at every other position, then scale by `gamma`
    /// and shift by `beta` (both of length `shape[axis]`).
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, axis: usize, eps: f64) -> Result<Tensor<T>> {
        if eps <= 0.0 {
            return contract_err("layer_norm", "eps must be positive");
        }
        if axis >= self.ndim() {
            return dim_err("layer_norm", format!("axis {axis} out of range for {:?}", self.shape()));
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        if gamma.shape() != [len] || beta.shape() != [len] {
            return dim_err(
                "layer_norm",
                format!("gamma {:?} / beta {:?} for {len} channels", gamma.shape(), beta.shape()),
            );
        }
        let x = self.data();
        let (gm, bt) = (gamma.data(), beta.data());
        let n = T::lit(len as f64);
        let eps = T::lit(eps);
        let mut out = vec![T::zero(); x.len()];
        let mut saved = NormSaved { xhat: vec![T::zero(); x.len()], inv_std: vec![T::zero(); outer * inner] };
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mean = (0..len).map(|k| x[idx(k)]).sum::<T>() / n;
                let var = (0..len).map(|k| (x[idx(k)] - mean).powi(2)).sum::<T>() / n;
                let inv = T::one() / (var + eps).sqrt();
                saved.inv_std[o * inner + i] = inv;
                for k in 0..len {
                    let xh = (x[idx(k)] - mean) * inv;
                    saved.xhat[idx(k)] = xh;
                    out[idx(k)] = gm[k] * xh + bt[k];
                }
            }
        }
        let gamma2 = gamma.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, needs| {
                let gm = gamma2.data();
                let xhat = &saved.xhat;
                let mut gx = needs[0].then(|| vec![T::zero(); g.len()]);
                let mut ggamma = vec![T::zero(); len];
                let mut gbeta = vec![T::zero(); len];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for k in 0..len {
                            let gv = g[idx(k)];
                            ggamma[k] += gv * xhat[idx(k)];
                            gbeta[k] += gv;
                            let d = gv * gm[k];
                            mean_d += d;
                            mean_dx += d * xhat[idx(k)];
                        }
                        if let Some(gx) = gx.as_mut() {
                            mean_d /= n;
                            mean_dx /= n;
                            let inv = saved.inv_std[o * inner + i];
                            for k in 0..len {
                                let d = g[idx(k)] * gm[k];
                                gx[idx(k)] = inv * (d - mean_d - xhat[idx(k)] * mean_dx);
                            }
                        }
                    }
                }
                vec![gx, needs[1].then_some(ggamma), needs[2].then_some(gbeta)]
            }),
        ))
    }

    /// Batch norm over the channel axis of an NCHW tensor using batch statistics.
    pub fn batch_norm_train(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<(Tensor<T>, BatchStats<T>)> {
        let (b, c, hw) = self.check_bn(gamma, beta)?;
        let x = self.data();
        let count = b * hw;
        let n = T::lit(count as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for bi in 0..b {
                s += x[(bi * c + ch) * hw..(bi * c + ch + 1) * hw].iter().copied().sum::<T>();
            }
            let m = s / n;
            let mut v = T::zero();
            for bi in 0..b {
                v += x[(bi * c + ch) * hw..(bi * c + ch + 1) * hw].iter().map(|&e| (e - m) * (e - m)).sum::<T>();
            }
            mean[ch] = m;
            var[ch] = v / n;
        }
        let eps_t = T::lit(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let (gm, bt) = (gamma.data(), beta.data());
        let mut out = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let s = (bi * c + ch) * hw;
                for p in s..s + hw {
                    let xh = (x[p] - mean[ch]) * inv_std[ch];
                    xhat[p] = xh;
                    out[p] = gm[ch] * xh + bt[ch];
                }
            }
        }
        let gamma2 = gamma.clone();
        let inv2 = inv_std.clone();
        let t = Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, needs| {
                let gm = gamma2.data();
                let mut ggamma = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let s = (bi * c + ch) * hw;
                        for p in s..s + hw {
                            ggamma[ch] += g[p] * xhat[p];
                            gbeta[ch] += g[p];
                        }
                    }
                }
                let gx = needs[0].then(|| {
                    let mut gx = vec![T::zero(); g.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            // mean(dxhat) = gamma * gbeta / n, mean(dxhat * xhat) = gamma * ggamma / n
                            let md = gm[ch] * gbeta[ch] / n;
                            let mdx = gm[ch] * ggamma[ch] / n;
                            let s = (bi * c + ch) * hw;
                            for p in s..s + hw {
                                gx[p] = inv2[ch] * (g[p] * gm[ch] - md - xhat[p] * mdx);
                            }
                        }
                    }
                    gx
                });
                vec![gx, needs[1].then_some(ggamma), needs[2].then_some(gbeta)]
            }),
        );
        Ok((t, BatchStats { mean, var, count }))
    }

    /// Batch norm with fixed statistics (inference).
    pub fn batch_norm_eval(&self, gamma: &Tensor<T>, beta: &Tensor<T>, mean: &[T], var: &[T], eps: f64) -> Result<Tensor<T>> {
        let (b, c, hw) = self.check_bn(gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return dim_err("batch_norm", "running statistics length mismatch");
        }
        let eps_t = T::lit(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let (gm, bt) = (gamma.data(), beta.data());
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let s = (bi * c + ch) * hw;
                for p in s..s + hw {
                    xhat[p] = (x[p] - mean[ch]) * inv_std[ch];
                    out[p] = gm[ch] * xhat[p] + bt[ch];
                }
            }
        }
        let gamma2 = gamma.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, needs| {
                let gm = gamma2.data();
                let mut gx = needs[0].then(|| vec![T::zero(); g.len()]);
                let mut ggamma = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let s = (bi * c + ch) * hw;
                        for p in s..s + hw {
                            ggamma[ch] += g[p] * xhat[p];
                            gbeta[ch] += g[p];
                            if let Some(gx) = gx.as_mut() {
                                gx[p] = g[p] * gm[ch] * inv_std[ch];
                            }
                        }
                    }
                }
                vec![gx, needs[1].then_some(ggamma), needs[2].then_some(gbeta)]
            }),
        ))
    }

    fn check_bn(&self, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
        if self.ndim() != 4 {
            return dim_err("batch_norm", format!("expected NCHW input, got {:?}", self.shape()));
        }
        let c = self.shape()[1];
        if gamma.shape() != [c] || beta.shape() != [c] {
            return dim_err("batch_norm", format!("affine params for {c} channels"));
        }
        Ok((self.shape()[0], c, self.shape()[2] * self.shape()[3]))
    }
}
