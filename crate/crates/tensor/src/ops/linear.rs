use crate::element::{gemm, Element, MatRef};
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

impl<T: Element> Tensor<T> {
    /// `y[..., j] = sum_i x[..., i] * w[j, i] + b[j]`.
    pub fn linear(&self, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        if w.ndim() != 2 {
            return dim_err("linear", format!("weight must be 2-D, got {:?}", w.shape()));
        }
        let (cout, cin) = (w.shape()[0], w.shape()[1]);
        let last = *self.shape().last().unwrap_or(&0);
        if last != cin {
            return dim_err(
                "linear",
                format!("input last dim {last} does not match weight {:?}", w.shape()),
            );
        }
        if let Some(b) = b {
            if b.shape() != [cout] {
                return dim_err("linear", format!("bias {:?} for {cout} outputs", b.shape()));
            }
        }
        let rows = self.numel() / cin;
        let mut out = vec![T::zero(); rows * cout];
        if let Some(b) = b {
            for r in out.chunks_mut(cout) {
                r.copy_from_slice(b.data());
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(MatRef::new(self.data(), rows, cin), MatRef::t(w.data(), cin, cout), beta, &mut out);

        let mut out_shape = self.shape().to_vec();
        *out_shape.last_mut().expect("non-empty") = cout;
        let (x, w2) = (self.clone(), w.clone());
        let mut inputs = vec![self.clone(), w.clone()];
        if let Some(b) = b {
            inputs.push(b.clone());
        }
        Ok(Tensor::from_op(
            out_shape,
            out,
            inputs,
            Box::new(move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut gx = vec![T::zero(); rows * cin];
                    gemm(MatRef::new(g, rows, cout), MatRef::new(w2.data(), cout, cin), T::zero(), &mut gx);
                    gx
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![T::zero(); cout * cin];
                    gemm(MatRef::t(g, cout, rows), MatRef::new(x.data(), rows, cin), T::zero(), &mut gw);
                    gw
                });
                let mut grads = vec![gx, gw];
                if needs.len() > 2 {
                    grads.push(needs[2].then(|| {
                        let mut gb = vec![T::zero(); cout];
                        for r in g.chunks(cout) {
                            gb.iter_mut().zip(r).for_each(|(a, &v)| *a += v);
                        }
                        gb
                    }));
                }
                grads
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights() {
        let x = Tensor::<f64>::new(&[2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        assert_eq!(x.linear(&w, Some(&b)).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn hand_product_with_bias() {
        let x = Tensor::<f64>::new(&[2], vec![1.0, 0.0]).unwrap();
        let w = Tensor::new(&[2, 2], vec![2.0, 3.0, 4.0, 5.0]).unwrap();
        let b = Tensor::new(&[2], vec![1.0, 1.0]).unwrap();
        assert_eq!(x.linear(&w, Some(&b)).unwrap().data(), &[3.0, 5.0]);
    }

    #[test]
    fn zero_weights_annihilate() {
        let x = Tensor::<f32>::new(&[3, 4], (0..12).map(|v| v as f32).collect()).unwrap();
        let y = x.linear(&Tensor::zeros(&[5, 4]), None).unwrap();
        assert_eq!(y.shape(), &[3, 5]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_brute_force_loop() {
        let (rows, cin, cout) = (7, 5, 3);
        let xs: Vec<f64> = (0..rows * cin).map(|i| (i as f64 * 0.7).cos()).collect();
        let ws: Vec<f64> = (0..cout * cin).map(|i| (i as f64 * 1.3).sin()).collect();
        let bs = vec![0.1, -0.2, 0.3];
        let y = Tensor::new(&[rows, cin], xs.clone())
            .unwrap()
            .linear(&Tensor::new(&[cout, cin], ws.clone()).unwrap(), Some(&Tensor::new(&[cout], bs.clone()).unwrap()))
            .unwrap();
        for r in 0..rows {
            for j in 0..cout {
                let want: f64 = (0..cin).map(|i| xs[r * cin + i] * ws[j * cin + i]).sum::<f64>() + bs[j];
                assert!((y.data()[r * cout + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_mismatched_inner_dim() {
        let x = Tensor::<f32>::zeros(&[2, 3]);
        assert!(x.linear(&Tensor::zeros(&[4, 2]), None).is_err());
    }
}
