use crate::element::{gemm, Element, MatRef};
use crate::error::{dim_err, Result};
use crate::par;
use crate::tensor::Tensor;

/// Stride, zero padding and channel grouping of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self { stride: 1, padding: 0, groups: 1 }
    }
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self { stride, padding, groups }
    }

    /// Stride 1 with `k / 2` padding: output keeps the input's spatial size.
    pub fn same(k: usize) -> Self {
        Self { stride: 1, padding: k / 2, groups: 1 }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

/// Output extent along one axis (floor convention), `None` if the kernel
/// does not fit in the padded input.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Geometry {
    fn cg(&self) -> usize {
        self.cin / self.groups
    }
    fn coutg(&self) -> usize {
        self.cout / self.groups
    }
    fn patch(&self) -> usize {
        self.cg() * self.kh * self.kw
    }
    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
    fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.cin && self.cout == self.cin
    }
}

/// Gather the receptive fields of one group into `cols` (`patch x ho*wo`).
pub(crate) fn im2col<T: Element>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let (h, w, ho, wo) = (g.h, g.w, g.ho, g.wo);
    let plane = ho * wo;
    for c in 0..g.cg() {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-add `cols` back onto the input plane of one group.
pub(crate) fn col2im<T: Element>(cols: &[T], g: &Geometry, dx: &mut [T]) {
    let (h, w, ho, wo) = (g.h, g.w, g.ho, g.wo);
    let plane = ho * wo;
    for c in 0..g.cg() {
        let dxc = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dxc[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_forward<T: Element>(x: &[T], wt: &[T], g: &Geometry, out: &mut [T]) {
    let (h, w, ho, wo, kh, kw) = (g.h, g.w, g.ho, g.wo, g.kh, g.kw);
    for c in 0..g.cin {
        let xc = &x[c * h * w..(c + 1) * h * w];
        let wc = &wt[c * kh * kw..(c + 1) * kh * kw];
        let oc = &mut out[c * ho * wo..(c + 1) * ho * wo];
        for ki in 0..kh {
            for oy in 0..ho {
                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                let orow = &mut oc[oy * wo..(oy + 1) * wo];
                for kj in 0..kw {
                    let wv = wc[ki * kw + kj];
                    for (ox, o) in orow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *o += wv * src[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Returns `(dx, dw)` contributions of one batch item.
fn depthwise_backward<T: Element>(x: &[T], wt: &[T], gout: &[T], g: &Geometry, dx: &mut [T], dw: &mut [T]) {
    let (h, w, ho, wo, kh, kw) = (g.h, g.w, g.ho, g.wo, g.kh, g.kw);
    for c in 0..g.cin {
        let xc = &x[c * h * w..(c + 1) * h * w];
        let wc = &wt[c * kh * kw..(c + 1) * kh * kw];
        let gc = &gout[c * ho * wo..(c + 1) * ho * wo];
        let dxc = &mut dx[c * h * w..(c + 1) * h * w];
        let dwc = &mut dw[c * kh * kw..(c + 1) * kh * kw];
        for ki in 0..kh {
            for oy in 0..ho {
                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let row = iy as usize * w;
                let grow = &gc[oy * wo..(oy + 1) * wo];
                for kj in 0..kw {
                    let wv = wc[ki * kw + kj];
                    let mut acc = T::zero();
                    for (ox, &gv) in grow.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            acc += gv * xc[row + ix as usize];
                            dxc[row + ix as usize] += gv * wv;
                        }
                    }
                    dwc[ki * kw + kj] += acc;
                }
            }
        }
    }
}

impl<T: Element> Tensor<T> {
    /// 2-D cross-correlation over NCHW input with `[Cout, Cin/groups, kh, kw]` weights.
    pub fn conv2d(&self, w: &Tensor<T>, b: Option<&Tensor<T>>, spec: Conv2dSpec) -> Result<Tensor<T>> {
        if self.ndim() != 4 || w.ndim() != 4 {
            return dim_err(
                "conv2d",
                format!("expected 4-D input and weight, got {:?} and {:?}", self.shape(), w.shape()),
            );
        }
        let [batch, cin, h, wd] = [self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]];
        let [cout, cg, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
        let groups = spec.groups.max(1);
        if cin % groups != 0 || cout % groups != 0 || cg * groups != cin {
            return dim_err(
                "conv2d",
                format!("{cin} input / {cout} output channels incompatible with {groups} groups and weight {:?}", w.shape()),
            );
        }
        let (Some(ho), Some(wo)) = (
            conv_out_size(h, kh, spec.stride, spec.padding),
            conv_out_size(wd, kw, spec.stride, spec.padding),
        ) else {
            return dim_err(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit {h}x{wd} input with padding {}", spec.padding),
            );
        };
        if let Some(b) = b {
            if b.shape() != [cout] {
                return dim_err("conv2d", format!("bias {:?} for {cout} outputs", b.shape()));
            }
        }
        let geo = Geometry {
            batch,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            ho,
            wo,
            stride: spec.stride,
            pad: spec.padding,
            groups,
        };
        let out = conv_forward(self.data(), w.data(), b.map(|b| b.data()), &geo);

        let (x, wt) = (self.clone(), w.clone());
        let mut inputs = vec![self.clone(), w.clone()];
        if let Some(b) = b {
            inputs.push(b.clone());
        }
        Ok(Tensor::from_op(
            vec![batch, cout, ho, wo],
            out,
            inputs,
            Box::new(move |g, needs| {
                let (gx, gw) = conv_backward(x.data(), wt.data(), g, &geo, needs[0], needs[1]);
                let mut grads = vec![gx, gw];
                if needs.len() > 2 {
                    grads.push(needs[2].then(|| {
                        let plane = geo.out_plane();
                        let mut gb = vec![T::zero(); geo.cout];
                        for bi in 0..geo.batch {
                            for (c, acc) in gb.iter_mut().enumerate() {
                                let s = (bi * geo.cout + c) * plane;
                                *acc += g[s..s + plane].iter().copied().sum::<T>();
                            }
                        }
                        gb
                    }));
                }
                grads
            }),
        ))
    }
}

fn conv_forward<T: Element>(x: &[T], wt: &[T], bias: Option<&[T]>, geo: &Geometry) -> Vec<T> {
    let plane = geo.out_plane();
    let in_item = geo.cin * geo.h * geo.w;
    let out_item = geo.cout * plane;
    let mut out = vec![T::zero(); geo.batch * out_item];
    par::for_each_chunk_mut(&mut out, out_item, |bi, ob| {
        if let Some(bias) = bias {
            for (c, &bv) in bias.iter().enumerate() {
                ob[c * plane..(c + 1) * plane].fill(bv);
            }
        }
        let xb = &x[bi * in_item..(bi + 1) * in_item];
        if geo.is_depthwise() {
            depthwise_forward(xb, wt, geo, ob);
            return;
        }
        let (cg, coutg, patch) = (geo.cg(), geo.coutg(), geo.patch());
        let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); patch * plane] };
        for grp in 0..geo.groups {
            let xg = &xb[grp * cg * geo.h * geo.w..(grp + 1) * cg * geo.h * geo.w];
            let src: &[T] = if geo.is_pointwise() {
                xg
            } else {
                im2col(xg, geo, &mut cols);
                &cols
            };
            let wg = &wt[grp * coutg * patch..(grp + 1) * coutg * patch];
            let og = &mut ob[grp * coutg * plane..(grp + 1) * coutg * plane];
            gemm(MatRef::new(wg, coutg, patch), MatRef::new(src, patch, plane), T::one(), og);
        }
    });
    out
}

fn conv_backward<T: Element>(
    x: &[T],
    wt: &[T],
    g: &[T],
    geo: &Geometry,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plane = geo.out_plane();
    let in_item = geo.cin * geo.h * geo.w;
    let out_item = geo.cout * plane;
    let (cg, coutg, patch) = (geo.cg(), geo.coutg(), geo.patch());
    let per_item: Vec<(Vec<T>, Vec<T>)> = par::map_range(geo.batch, |bi| {
        let xb = &x[bi * in_item..(bi + 1) * in_item];
        let gb = &g[bi * out_item..(bi + 1) * out_item];
        let mut dx = if need_x { vec![T::zero(); in_item] } else { Vec::new() };
        let mut dw = if need_w { vec![T::zero(); wt.len()] } else { Vec::new() };
        if geo.is_depthwise() {
            let mut dx_full = if need_x { dx } else { vec![T::zero(); in_item] };
            let mut dw_full = if need_w { dw } else { vec![T::zero(); wt.len()] };
            depthwise_backward(xb, wt, gb, geo, &mut dx_full, &mut dw_full);
            return (
                if need_x { dx_full } else { Vec::new() },
                if need_w { dw_full } else { Vec::new() },
            );
        }
        let mut cols = vec![T::zero(); patch * plane];
        for grp in 0..geo.groups {
            let gg = &gb[grp * coutg * plane..(grp + 1) * coutg * plane];
            let wg = &wt[grp * coutg * patch..(grp + 1) * coutg * patch];
            if need_w {
                let xg = &xb[grp * cg * geo.h * geo.w..(grp + 1) * cg * geo.h * geo.w];
                let src: &[T] = if geo.is_pointwise() {
                    xg
                } else {
                    im2col(xg, geo, &mut cols);
                    &cols
                };
                let dwg = &mut dw[grp * coutg * patch..(grp + 1) * coutg * patch];
                gemm(MatRef::new(gg, coutg, plane), MatRef::t(src, plane, patch), T::zero(), dwg);
            }
            if need_x {
                let dxg = &mut dx[grp * cg * geo.h * geo.w..(grp + 1) * cg * geo.h * geo.w];
                if geo.is_pointwise() {
                    gemm(MatRef::t(wg, patch, coutg), MatRef::new(gg, coutg, plane), T::zero(), dxg);
                } else {
                    gemm(MatRef::t(wg, patch, coutg), MatRef::new(gg, coutg, plane), T::zero(), &mut cols);
                    col2im(&cols, geo, dxg);
                }
            }
        }
        (dx, dw)
    });
    let gx = need_x.then(|| {
        let mut gx = Vec::with_capacity(geo.batch * in_item);
        for (dx, _) in &per_item {
            gx.extend_from_slice(dx);
        }
        gx
    });
    let gw = need_w.then(|| {
        let mut gw = vec![T::zero(); wt.len()];
        for (_, dw) in &per_item {
            gw.iter_mut().zip(dw).for_each(|(a, &b)| *a += b);
        }
        gw
    });
    (gx, gw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_identity_kernel() {
        let x = Tensor::<f32>::new(&[1, 1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let w = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let y = x.conv2d(&w, None, Conv2dSpec::default()).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn all_ones_kernel_on_constant_field() {
        let c = 1.5f64;
        let x = Tensor::full(&[1, 1, 5, 5], c);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let y = x.conv2d(&w, None, Conv2dSpec::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| (v - 9.0 * c).abs() < 1e-12));
    }

    #[test]
    fn output_size_uses_floor() {
        assert_eq!(conv_out_size(64, 7, 2, 3), Some(32));
        assert_eq!(conv_out_size(16, 3, 2, 1), Some(8));
        assert_eq!(conv_out_size(2, 5, 1, 1), None);
    }

    #[test]
    fn kernel_larger_than_input_is_an_error() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let w = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(x.conv2d(&w, None, Conv2dSpec::default()).is_err());
    }

    #[test]
    fn bad_grouping_is_an_error() {
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::zeros(&[2, 1, 3, 3]);
        assert!(x.conv2d(&w, None, Conv2dSpec::same(3).with_groups(2)).is_err());
    }
}
