use crate::element::Element;
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeMode {
    Nearest,
    Bilinear,
}

/// Two source taps and their weights for each destination index
/// (half-pixel centers, i.e. align-corners = false).
pub fn resize_taps(input: usize, output: usize, mode: ResizeMode) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| match mode {
            ResizeMode::Nearest => {
                let s = ((i as f64 * scale).floor() as usize).min(input - 1);
                (s, s, 1.0, 0.0)
            }
            ResizeMode::Bilinear => {
                let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(input - 1);
                let i1 = (i0 + 1).min(input - 1);
                let l1 = src - i0 as f64;
                (i0, i1, 1.0 - l1, l1)
            }
        })
        .collect()
}

impl<T: Element> Tensor<T> {
    /// Spatial resampling of an NCHW tensor to `(h2, w2)`.
    pub fn resize(&self, h2: usize, w2: usize, mode: ResizeMode) -> Result<Tensor<T>> {
        if self.ndim() != 4 {
            return dim_err("resize", format!("expected NCHW input, got {:?}", self.shape()));
        }
        if h2 == 0 || w2 == 0 {
            return dim_err("resize", "target size must be positive");
        }
        let [b, c, h, w] = [self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]];
        if h == h2 && w == w2 {
            return self.reshape(self.shape());
        }
        let ty: Vec<_> = resize_taps(h, h2, mode)
            .into_iter()
            .map(|(a, b, wa, wb)| (a, b, T::lit(wa), T::lit(wb)))
            .collect();
        let tx: Vec<_> = resize_taps(w, w2, mode)
            .into_iter()
            .map(|(a, b, wa, wb)| (a, b, T::lit(wa), T::lit(wb)))
            .collect();
        let planes = b * c;
        let src = self.data();
        let mut out = vec![T::zero(); planes * h2 * w2];
        for p in 0..planes {
            let sp = &src[p * h * w..(p + 1) * h * w];
            let op = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    op[oy * w2 + ox] = wy0 * (wx0 * sp[y0 * w + x0] + wx1 * sp[y0 * w + x1])
                        + wy1 * (wx0 * sp[y1 * w + x0] + wx1 * sp[y1 * w + x1]);
                }
            }
        }
        let n_in = self.numel();
        Ok(Tensor::from_op(
            vec![b, c, h2, w2],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gi = vec![T::zero(); n_in];
                for p in 0..planes {
                    let gp = &mut gi[p * h * w..(p + 1) * h * w];
                    let go = &g[p * h2 * w2..(p + 1) * h2 * w2];
                    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                            let v = go[oy * w2 + ox];
                            gp[y0 * w + x0] += v * wy0 * wx0;
                            gp[y0 * w + x1] += v * wy0 * wx1;
                            gp[y1 * w + x0] += v * wy1 * wx0;
                            gp[y1 * w + x1] += v * wy1 * wx1;
                        }
                    }
                }
                vec![Some(gi)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_identity() {
        let x = Tensor::<f32>::new(&[1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(x.resize(2, 2, ResizeMode::Bilinear).unwrap().data(), x.data());
    }

    #[test]
    fn nearest_from_single_pixel_replicates() {
        let x = Tensor::<f32>::new(&[1, 2, 1, 1], vec![3., -1.]).unwrap();
        let y = x.resize(3, 5, ResizeMode::Nearest).unwrap();
        assert!(y.data()[..15].iter().all(|&v| v == 3.0));
        assert!(y.data()[15..].iter().all(|&v| v == -1.0));
    }

    #[test]
    fn rejects_empty_target() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        assert!(x.resize(0, 2, ResizeMode::Nearest).is_err());
    }
}
