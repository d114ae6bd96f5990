use crate::element::Element;
use crate::error::{dim_err, Result};
use crate::ops::shape::split_axis;
use crate::tensor::Tensor;

impl<T: Element> Tensor<T> {
    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Tensor<T> {
        let s = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    fn axis_shape(&self, op: &'static str, axis: usize, keepdim: bool) -> Result<Vec<usize>> {
        if axis >= self.ndim() {
            return dim_err(op, format!("axis {axis} out of range for {:?}", self.shape()));
        }
        let mut s = self.shape().to_vec();
        if keepdim {
            s[axis] = 1;
        } else {
            s.remove(axis);
            if s.is_empty() {
                s.push(1);
            }
        }
        Ok(s)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        let out_shape = self.axis_shape("sum_axis", axis, keepdim)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let src = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let row = &src[(o * len + k) * inner..(o * len + k + 1) * inner];
                out[o * inner..(o + 1) * inner].iter_mut().zip(row).for_each(|(a, &b)| *a += b);
            }
        }
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gi = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        gi.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gi)]
            }),
        ))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        let len = self.shape().get(axis).copied().unwrap_or(1);
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / len as f64))
    }

    /// Maximum along `axis`; the gradient goes to the first maximal entry.
    pub fn max_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        let out_shape = self.axis_shape("max_axis", axis, keepdim)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let src = self.data();
        let mut out = vec![T::neg_infinity(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    let v = src[(o * len + k) * inner + i];
                    let slot = o * inner + i;
                    if v > out[slot] || k == 0 {
                        out[slot] = v;
                        arg[slot] = k;
                    }
                }
            }
        }
        let n_in = self.numel();
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gi = vec![T::zero(); n_in];
                for o in 0..outer {
                    for i in 0..inner {
                        let slot = o * inner + i;
                        gi[(o * len + arg[slot]) * inner + i] += g[slot];
                    }
                }
                vec![Some(gi)]
            }),
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.ndim() {
            return dim_err("softmax", format!("no axis {axis} in {:?}", self.shape()));
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let out = softmax_raw(self.data(), outer, len, inner);
        let y = out.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                // dx = y * (g - <g, y>)
                let mut gi = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: T = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..len {
                            gi[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                vec![Some(gi)]
            }),
        ))
    }
}

pub(crate) fn softmax_raw<T: Element>(src: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let m = (0..len).map(|k| src[idx(k)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for k in 0..len {
                let e = (src[idx(k)] - m).exp();
                out[idx(k)] = e;
                z += e;
            }
            for k in 0..len {
                out[idx(k)] /= z;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_softmax() {
        let x = Tensor::<f64>::zeros(&[1, 4, 1, 1]);
        let y = x.softmax(1).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn softmax_sums_to_one_per_position() {
        let data: Vec<f64> = (0..2 * 5 * 3 * 3).map(|i| ((i * 7919) % 97) as f64 / 5.0 - 9.0).collect();
        let y = Tensor::new(&[2, 5, 3, 3], data).unwrap().softmax(1).unwrap();
        for b in 0..2 {
            for p in 0..9 {
                let s: f64 = (0..5).map(|k| y.data()[(b * 5 + k) * 9 + p]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn max_axis_tie_goes_to_first() {
        let x = Tensor::<f64>::leaf(&[1, 3, 1], vec![2.0, 2.0, 1.0]).unwrap();
        let m = x.max_axis(1, true).unwrap();
        assert_eq!(m.data(), &[2.0]);
        m.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn axis_means() {
        let x = Tensor::<f64>::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(x.mean_axis(1, false).unwrap().data(), &[2.0, 5.0]);
        assert_eq!(x.sum_axis(0, true).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(x.mean().data(), &[3.5]);
    }
}
