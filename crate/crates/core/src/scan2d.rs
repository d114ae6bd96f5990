//! Four-direction flattening of feature maps around the selective scan.

use cmunet_tensor::{Element, ParamStore, Tensor, TensorError};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ssm::{init_a_d, ScanMode, SsmParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanDirection {
    RowFwd,
    RowRev,
    ColFwd,
    ColRev,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [Self::RowFwd, Self::RowRev, Self::ColFwd, Self::ColRev];

    /// Grid index (`y * w + x`) visited at each sequence position.
    pub fn order(self, h: usize, w: usize) -> Vec<usize> {
        let l = h * w;
        let col_major = |k: usize| (k % h) * w + k / h;
        match self {
            Self::RowFwd => (0..l).collect(),
            Self::RowRev => (0..l).rev().collect(),
            Self::ColFwd => (0..l).map(col_major).collect(),
            Self::ColRev => (0..l).rev().map(col_major).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    #[default]
    Sum,
    Mean,
}

/// `[B, C, H, W] -> [4, B, H*W, C]`, one sequence per [`ScanDirection`].
pub fn cross_scan<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.ndim() != 4 {
        return Err(TensorError::Dimension { op: "cross_scan", msg: format!("expected NCHW, got {:?}", x.shape()) }.into());
    }
    let [b, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let l = h * w;
    let orders: Vec<Vec<usize>> = ScanDirection::ALL.iter().map(|d| d.order(h, w)).collect();
    let src = x.data();
    let mut out = vec![T::zero(); 4 * b * l * c];
    for (d, ord) in orders.iter().enumerate() {
        for bi in 0..b {
            for (k, &p) in ord.iter().enumerate() {
                let o = ((d * b + bi) * l + k) * c;
                for ch in 0..c {
                    out[o + ch] = src[(bi * c + ch) * l + p];
                }
            }
        }
    }
    let n_in = x.numel();
    Ok(Tensor::from_op(
        vec![4, b, l, c],
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gi = vec![T::zero(); n_in];
            for (d, ord) in orders.iter().enumerate() {
                for bi in 0..b {
                    for (k, &p) in ord.iter().enumerate() {
                        let o = ((d * b + bi) * l + k) * c;
                        for ch in 0..c {
                            gi[(bi * c + ch) * l + p] += g[o + ch];
                        }
                    }
                }
            }
            vec![Some(gi)]
        }),
    ))
}

/// Inverse-permute each direction of `[4, B, L, C]` back to the grid and
/// combine them into `[B, C, H, W]`.
pub fn cross_merge<T: Element>(y4: &Tensor<T>, h: usize, w: usize, mode: MergeMode) -> Result<Tensor<T>> {
    let s = y4.shape();
    if s.len() != 4 || s[0] != 4 || s[2] != h * w {
        return Err(TensorError::Dimension {
            op: "cross_merge",
            msg: format!("expected [4, B, {}, C], got {s:?}", h * w),
        }
        .into());
    }
    let (b, l, c) = (s[1], s[2], s[3]);
    let scale = match mode {
        MergeMode::Sum => T::one(),
        MergeMode::Mean => T::lit(0.25),
    };
    let orders: Vec<Vec<usize>> = ScanDirection::ALL.iter().map(|d| d.order(h, w)).collect();
    let src = y4.data();
    let mut out = vec![T::zero(); b * c * l];
    for (d, ord) in orders.iter().enumerate() {
        for bi in 0..b {
            for (k, &p) in ord.iter().enumerate() {
                let o = ((d * b + bi) * l + k) * c;
                for ch in 0..c {
                    out[(bi * c + ch) * l + p] += src[o + ch] * scale;
                }
            }
        }
    }
    Ok(Tensor::from_op(
        vec![b, c, h, w],
        out,
        vec![y4.clone()],
        Box::new(move |g, _| {
            let mut gi = vec![T::zero(); 4 * b * l * c];
            for (d, ord) in orders.iter().enumerate() {
                for bi in 0..b {
                    for (k, &p) in ord.iter().enumerate() {
                        let o = ((d * b + bi) * l + k) * c;
                        for ch in 0..c {
                            gi[o + ch] = g[(bi * c + ch) * l + p] * scale;
                        }
                    }
                }
            }
            vec![Some(gi)]
        }),
    ))
}

/// Selective scan over the four flattening directions of a feature map.
#[derive(Clone, Debug)]
pub struct Ssm2d<T: Element> {
    /// One entry per direction; all four are the same layer when shared.
    pub dirs: Vec<SsmParams<T>>,
    pub merge: MergeMode,
    pub mode: ScanMode,
}

impl<T: Element> Ssm2d<T> {
    /// `A` and `D` are shared by all directions; the input projections are
    /// per direction unless `share_directions` is set.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        state: usize,
        share_directions: bool,
        merge: MergeMode,
        rng: &mut R,
    ) -> Result<Self> {
        let dirs = if share_directions {
            vec![SsmParams::new(store, prefix, channels, state, rng)?; 4]
        } else {
            let (a_log, d) = init_a_d(store, prefix, channels, state)?;
            (0..4)
                .map(|i| SsmParams::with_shared(a_log.clone(), d.clone(), store, &format!("{prefix}.dir{i}"), channels, state, rng))
                .collect::<Result<Vec<_>>>()?
        };
        Ok(Self { dirs, merge, mode: ScanMode::Parallel })
    }

    pub fn channels(&self) -> usize {
        self.dirs[0].inner_dim
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.ndim() != 4 || x.shape()[1] != self.channels() {
            return Err(TensorError::Dimension {
                op: "ssm2d",
                msg: format!("expected {} channels, got input {:?}", self.channels(), x.shape()),
            }
            .into());
        }
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let seqs = cross_scan(x)?;
        let ys = self
            .dirs
            .iter()
            .enumerate()
            .map(|(d, p)| p.forward(&seqs.select(0, d)?, self.mode))
            .collect::<Result<Vec<_>>>()?;
        cross_merge(&Tensor::stack(&ys, 0)?, h, w, self.merge)
    }
}
