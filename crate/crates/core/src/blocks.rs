//! Decoder building blocks: channel-spatial attention, the gated SSM block
//! and the multi-scale skip aggregation.

use cmunet_tensor::{Conv2dSpec, Element, ParamStore, ResizeMode, Tensor, TensorError};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ChannelNorm, Conv2d, Init};
use crate::scan2d::{MergeMode, Ssm2d};

fn dim_error(op: &'static str, msg: String) -> Error {
    TensorError::Dimension { op, msg }.into()
}

/// `concat(mean_c(x), max_c(x))`: the two-channel descriptor for spatial gates.
fn channel_pool_maps<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(Tensor::concat(&[x.mean_axis(1, true)?, x.max_axis(1, true)?], 1)?)
}

/// `sigmoid(mlp(gap(x)) + mlp(gmp(x)))` with a shared ReLU bottleneck.
#[derive(Clone, Debug)]
pub struct ChannelGate<T: Element> {
    pub fc1: Conv2d<T>,
    pub fc2: Conv2d<T>,
}

impl<T: Element> ChannelGate<T> {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, c: usize, rng: &mut R) -> Result<Self> {
        let mid = (c / 4).max(1);
        let spec = Conv2dSpec::default();
        Ok(Self {
            fc1: Conv2d::new(store, &format!("{name}.fc1"), c, mid, 1, spec, false, Init::He, rng)?,
            fc2: Conv2d::new(store, &format!("{name}.fc2"), mid, c, 1, spec, false, Init::FanIn, rng)?,
        })
    }

    /// Gate values `[B, C, 1, 1]`.
    pub fn gate(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mlp = |v: Tensor<T>| -> Result<Tensor<T>> { self.fc2.forward(&self.fc1.forward(&v)?.relu()) };
        Ok(mlp(x.global_mean_pool()?)?.add(&mlp(x.global_max_pool()?)?)?.sigmoid())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.mul(&self.gate(x)?)?)
    }
}

/// `sigmoid(conv_kxk(concat(mean_c, max_c)))`.
#[derive(Clone, Debug)]
pub struct SpatialGate<T: Element> {
    pub conv: Conv2d<T>,
}

impl<T: Element> SpatialGate<T> {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, k: usize, bias: bool, rng: &mut R) -> Result<Self> {
        Ok(Self { conv: Conv2d::new(store, &format!("{name}.conv"), 2, 1, k, Conv2dSpec::same(k), bias, Init::FanIn, rng)? })
    }

    /// Gate values `[B, 1, H, W]`.
    pub fn gate(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.conv.forward(&channel_pool_maps(x)?)?.sigmoid())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.mul(&self.gate(x)?)?)
    }
}

/// Channel attention followed by spatial attention, both multiplicative.
#[derive(Clone, Debug)]
pub struct CsAttention<T: Element> {
    pub channel: ChannelGate<T>,
    pub spatial: SpatialGate<T>,
}

impl<T: Element> CsAttention<T> {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, c: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            channel: ChannelGate::new(store, &format!("{name}.channel"), c, rng)?,
            spatial: SpatialGate::new(store, &format!("{name}.spatial"), 7, false, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.spatial.forward(&self.channel.forward(x)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsMambaConfig {
    /// Channel expansion of the inner branch width.
    pub expansion: f64,
    pub state_size: usize,
    pub merge_mode: MergeMode,
    pub share_directions: bool,
    pub residual: bool,
}

impl Default for CsMambaConfig {
    fn default() -> Self {
        Self { expansion: 2.0, state_size: 8, merge_mode: MergeMode::Sum, share_directions: false, residual: true }
    }
}

impl CsMambaConfig {
    pub fn inner(&self, c: usize) -> Result<usize> {
        let e = (self.expansion * c as f64).floor();
        if e.is_nan() || e < 1.0 {
            return Err(Error::Config(format!("expansion {} leaves no inner channels for width {c}", self.expansion)));
        }
        Ok(e as usize)
    }
}

/// `X + Linear(LN(SSM2d(SiLU(DWConv(Linear(X))))) ⊙ SiLU(Linear(CS(X))))`.
#[derive(Clone, Debug)]
pub struct CsMambaBlock<T: Element> {
    pub channels: usize,
    pub in_proj: Conv2d<T>,
    pub dwconv: Conv2d<T>,
    pub ssm: Ssm2d<T>,
    pub norm: ChannelNorm<T>,
    pub cs: CsAttention<T>,
    pub gate_proj: Conv2d<T>,
    pub out_proj: Conv2d<T>,
    pub residual: bool,
}

impl<T: Element> CsMambaBlock<T> {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, c: usize, cfg: &CsMambaConfig, rng: &mut R) -> Result<Self> {
        let e = cfg.inner(c)?;
        Ok(Self {
            channels: c,
            in_proj: Conv2d::pointwise(store, &format!("{name}.in_proj"), c, e, rng)?,
            dwconv: Conv2d::depthwise(store, &format!("{name}.dwconv"), e, 3, rng)?,
            ssm: Ssm2d::new(store, &format!("{name}.ssm"), e, cfg.state_size, cfg.share_directions, cfg.merge_mode, rng)?,
            norm: ChannelNorm::new(store, &format!("{name}.norm"), e)?,
            cs: CsAttention::new(store, &format!("{name}.cs"), c, rng)?,
            gate_proj: Conv2d::pointwise(store, &format!("{name}.gate_proj"), c, e, rng)?,
            out_proj: Conv2d::pointwise(store, &format!("{name}.out_proj"), e, c, rng)?,
            residual: cfg.residual,
        })
    }

    /// The SSM branch `X1`.
    pub fn ssm_branch(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let u = self.dwconv.forward(&self.in_proj.forward(x)?)?.silu();
        self.norm.forward(&self.ssm.forward(&u)?)
    }

    /// The attention branch `X2`.
    pub fn gate_branch(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.gate_proj.forward(&self.cs.forward(x)?)?.silu())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.ndim() != 4 || x.shape()[1] != self.channels {
            return Err(dim_error("csmamba", format!("expected {} channels, got input {:?}", self.channels, x.shape())));
        }
        let mixed = self.ssm_branch(x)?.mul(&self.gate_branch(x)?)?;
        let out = self.out_proj.forward(&mixed)?;
        if self.residual {
            Ok(x.add(&out)?)
        } else {
            Ok(out)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsaaConfig {
    /// Channel reduction `alpha`: `C2 = 3 * C_cur / alpha`.
    pub reduction: usize,
    pub kernel_set: Vec<usize>,
    pub spatial_kernel: usize,
}

impl Default for MsaaConfig {
    fn default() -> Self {
        Self { reduction: 4, kernel_set: vec![3, 5, 7], spatial_kernel: 7 }
    }
}

impl MsaaConfig {
    /// `(C1, C2)` for a stage with `ccur` channels.
    pub fn widths(&self, ccur: usize) -> Result<(usize, usize)> {
        let c1 = 3 * ccur;
        if self.reduction == 0 || !c1.is_multiple_of(self.reduction) || c1 / self.reduction == 0 {
            return Err(Error::Config(format!("C1 = {c1} is not divisible by reduction {}", self.reduction)));
        }
        if self.kernel_set.is_empty() || self.kernel_set.iter().chain([&self.spatial_kernel]).any(|k| k % 2 == 0) {
            return Err(Error::Config("MSAA kernels must be odd and non-empty".into()));
        }
        Ok((c1, c1 / self.reduction))
    }
}

/// Multi-scale attention aggregation over three adjacent pyramid levels.
#[derive(Clone, Debug)]
pub struct Msaa<T: Element> {
    pub ccur: usize,
    pub c2: usize,
    pub proj_prev: Option<Conv2d<T>>,
    pub proj_next: Option<Conv2d<T>>,
    pub fuse: Conv2d<T>,
    pub branches: Vec<Conv2d<T>>,
    pub spatial: SpatialGate<T>,
    pub ch_fc1: Conv2d<T>,
    pub ch_fc2: Conv2d<T>,
}

impl<T: Element> Msaa<T> {
    /// `cprev` / `cnext` are the neighbor levels' channel counts, `None`
    /// at the ends of the pyramid (the current level stands in for them).
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cprev: Option<usize>,
        ccur: usize,
        cnext: Option<usize>,
        cfg: &MsaaConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (c1, c2) = cfg.widths(ccur)?;
        let proj = |store: &mut ParamStore<T>, rng: &mut R, tag: &str, c: Option<usize>| {
            c.map(|c| Conv2d::pointwise(store, &format!("{name}.{tag}"), c, ccur, rng)).transpose()
        };
        let proj_prev = proj(store, rng, "proj_prev", cprev)?;
        let proj_next = proj(store, rng, "proj_next", cnext)?;
        let fuse = Conv2d::pointwise(store, &format!("{name}.fuse"), c1, c2, rng)?;
        let branches = cfg
            .kernel_set
            .iter()
            .map(|&k| Conv2d::depthwise(store, &format!("{name}.ms{k}"), c2, k, rng))
            .collect::<Result<Vec<_>>>()?;
        let spatial = SpatialGate::new(store, &format!("{name}.spatial"), cfg.spatial_kernel, true, rng)?;
        let mid = (c2 / 4).max(1);
        let ch_fc1 = Conv2d::new(store, &format!("{name}.ch_fc1"), c2, mid, 1, Conv2dSpec::default(), true, Init::He, rng)?;
        let ch_fc2 = Conv2d::pointwise(store, &format!("{name}.ch_fc2"), mid, c2, rng)?;
        Ok(Self { ccur, c2, proj_prev, proj_next, fuse, branches, spatial, ch_fc1, ch_fc2 })
    }

    fn align(&self, f: Option<&Tensor<T>>, proj: Option<&Conv2d<T>>, cur: &Tensor<T>) -> Result<Tensor<T>> {
        match (f, proj) {
            (Some(f), Some(p)) => {
                let (h, w) = (cur.shape()[2], cur.shape()[3]);
                p.forward(&f.resize(h, w, ResizeMode::Bilinear)?)
            }
            (None, None) => Ok(cur.clone()),
            _ => Err(dim_error("msaa", "neighbor presence does not match construction".into())),
        }
    }

    /// `F_ms`: fused, channel-reduced, multi-kernel features.
    pub fn multi_scale(&self, prev: Option<&Tensor<T>>, cur: &Tensor<T>, next: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        if cur.ndim() != 4 || cur.shape()[1] != self.ccur {
            return Err(dim_error("msaa", format!("expected {} channels, got {:?}", self.ccur, cur.shape())));
        }
        let p = self.align(prev, self.proj_prev.as_ref(), cur)?;
        let n = self.align(next, self.proj_next.as_ref(), cur)?;
        let fused = self.fuse.forward(&Tensor::concat(&[cur.clone(), p, n], 1)?)?;
        let mut acc: Option<Tensor<T>> = None;
        for conv in &self.branches {
            let y = conv.forward(&fused)?;
            acc = Some(match acc {
                None => y,
                Some(a) => a.add(&y)?,
            });
        }
        Ok(acc.expect("kernel set is non-empty"))
    }

    /// Channel attention map `[B, C2, 1, 1]`.
    pub fn channel_gate(&self, fms: &Tensor<T>) -> Result<Tensor<T>> {
        let hidden = self.ch_fc1.forward(&fms.global_mean_pool()?)?.relu();
        Ok(self.ch_fc2.forward(&hidden)?.sigmoid())
    }

    pub fn forward(&self, prev: Option<&Tensor<T>>, cur: &Tensor<T>, next: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let fms = self.multi_scale(prev, cur, next)?;
        let spatial = fms.mul(&self.spatial.gate(&fms)?)?;
        let channel = fms.mul(&self.channel_gate(&fms)?)?;
        Ok(spatial.add(&channel)?)
    }
}
