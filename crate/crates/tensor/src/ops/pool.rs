use crate::element::Element;
use crate::error::{dim_err, Result};
use crate::ops::conv::conv_out_size;
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Mean,
    GlobalMean,
    GlobalMax,
}

impl<T: Element> Tensor<T> {
    /// Windowed or global pooling over the spatial axes of an NCHW tensor.
    ///
    /// Windowed max pooling pads with `-inf`; mean pooling divides by the full
    /// window area. Global kinds ignore `k`, `stride` and `padding`.
    pub fn pool2d(&self, kind: PoolKind, k: usize, stride: usize, padding: usize) -> Result<Tensor<T>> {
        if self.ndim() != 4 {
            return dim_err("pool2d", format!("expected NCHW input, got {:?}", self.shape()));
        }
        match kind {
            PoolKind::GlobalMean => {
                let (b, c) = (self.shape()[0], self.shape()[1]);
                let hw = self.shape()[2] * self.shape()[3];
                self.reshape(&[b, c, hw])?.mean_axis(2, true)?.reshape(&[b, c, 1, 1])
            }
            PoolKind::GlobalMax => {
                let (b, c) = (self.shape()[0], self.shape()[1]);
                let hw = self.shape()[2] * self.shape()[3];
                self.reshape(&[b, c, hw])?.max_axis(2, true)?.reshape(&[b, c, 1, 1])
            }
            PoolKind::Max | PoolKind::Mean => self.window_pool(kind == PoolKind::Max, k, stride, padding),
        }
    }

    pub fn global_mean_pool(&self) -> Result<Tensor<T>> {
        self.pool2d(PoolKind::GlobalMean, 0, 0, 0)
    }

    pub fn global_max_pool(&self) -> Result<Tensor<T>> {
        self.pool2d(PoolKind::GlobalMax, 0, 0, 0)
    }

    fn window_pool(&self, is_max: bool, k: usize, stride: usize, pad: usize) -> Result<Tensor<T>> {
        let [b, c, h, w] = [self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]];
        if pad * 2 > k {
            return dim_err("pool2d", format!("padding {pad} exceeds half the window {k}"));
        }
        let (Some(ho), Some(wo)) = (conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)) else {
            return dim_err("pool2d", format!("window {k} does not fit {h}x{w} with padding {pad}"));
        };
        let planes = b * c;
        let src = self.data();
        let mut out = vec![T::zero(); planes * ho * wo];
        let mut arg = vec![0usize; if is_max { planes * ho * wo } else { 0 }];
        let inv_area = T::one() / T::lit((k * k) as f64);
        let window = move |oy: usize, ox: usize| {
            let y0 = (oy * stride) as isize - pad as isize;
            let x0 = (ox * stride) as isize - pad as isize;
            (y0, x0)
        };
        let fill_plane = |p: usize, op: &mut [T], ap: &mut [usize]| {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let (y0, x0) = window(oy, ox);
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    let mut acc = T::zero();
                    for dy in 0..k as isize {
                        let iy = y0 + dy;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..k as isize {
                            let ix = x0 + dx;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = iy as usize * w + ix as usize;
                            let v = plane[i];
                            if is_max {
                                if v > best || best_i == usize::MAX {
                                    best = v;
                                    best_i = i;
                                }
                            } else {
                                acc += v;
                            }
                        }
                    }
                    let o = oy * wo + ox;
                    if is_max {
                        op[o] = best;
                        ap[o] = best_i;
                    } else {
                        op[o] = acc * inv_area;
                    }
                }
            }
        };
        if is_max {
            par::for_each_chunk2_mut(&mut out, ho * wo, &mut arg, ho * wo, |p, op, ap| fill_plane(p, op, ap));
        } else {
            par::for_each_chunk_mut(&mut out, ho * wo, |p, op| fill_plane(p, op, &mut []));
        }
        let n_in = self.numel();
        Ok(Tensor::from_op(
            vec![b, c, ho, wo],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gi = vec![T::zero(); n_in];
                for p in 0..planes {
                    let gp = &mut gi[p * h * w..(p + 1) * h * w];
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let o = (p * ho + oy) * wo + ox;
                            if is_max {
                                gp[arg[o]] += g[o];
                                continue;
                            }
                            let (y0, x0) = window(oy, ox);
                            let share = g[o] * inv_area;
                            for dy in 0..k as isize {
                                let iy = y0 + dy;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for dx in 0..k as isize {
                                    let ix = x0 + dx;
                                    if ix >= 0 && ix < w as isize {
                                        gp[iy as usize * w + ix as usize] += share;
                                    }
                                }
                            }
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
    fn global_mean_of_constant() {
        let x = Tensor::<f64>::full(&[2, 3, 4, 5], 2.5);
        let y = x.global_mean_pool().unwrap();
        assert_eq!(y.shape(), &[2, 3, 1, 1]);
        assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn max_of_two_by_two() {
        let x = Tensor::<f64>::leaf(&[1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let y = x.pool2d(PoolKind::Max, 2, 2, 0).unwrap();
        assert_eq!(y.data(), &[4.0]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0., 0., 0., 1.]);
    }

    #[test]
    fn max_tie_routes_to_first_in_scan_order() {
        let x = Tensor::<f64>::leaf(&[1, 1, 2, 2], vec![5., 5., 5., 5.]).unwrap();
        x.pool2d(PoolKind::Max, 2, 2, 0).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1., 0., 0., 0.]);
    }

    #[test]
    fn mean_pool_matches_window_average_exactly() {
        let data: Vec<f64> = (0..64).map(|i| ((i * 37) % 23) as f64 * 0.125).collect();
        let x = Tensor::new(&[1, 1, 8, 8], data.clone()).unwrap();
        let y = x.pool2d(PoolKind::Mean, 2, 2, 0).unwrap();
        for oy in 0..4 {
            for ox in 0..4 {
                let s = data[(2 * oy) * 8 + 2 * ox]
                    + data[(2 * oy) * 8 + 2 * ox + 1]
                    + data[(2 * oy + 1) * 8 + 2 * ox]
                    + data[(2 * oy + 1) * 8 + 2 * ox + 1];
                assert_eq!(y.data()[oy * 4 + ox], s / 4.0);
            }
        }
    }

    #[test]
    fn oversized_window_fails() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        assert!(x.pool2d(PoolKind::Max, 3, 1, 0).is_err());
    }
}
