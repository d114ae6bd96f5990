//! Cross-entropy + Dice objective with optional auxiliary heads.

use cmunet_tensor::{resize_taps, Element, ResizeMode, Tensor, TensorError};

use crate::error::{Error, Result};
use crate::model::ModelOutputs;

pub const DICE_EPS: f64 = 1e-6;

fn check_target<T: Element>(op: &'static str, logits: &Tensor<T>, target: &[u8]) -> Result<(usize, usize, usize)> {
    if logits.ndim() != 4 {
        return Err(TensorError::Dimension { op, msg: format!("logits must be [B, K, H, W], got {:?}", logits.shape()) }.into());
    }
    let (b, k, hw) = (logits.shape()[0], logits.shape()[1], logits.shape()[2] * logits.shape()[3]);
    if target.len() != b * hw {
        return Err(Error::Invalid(format!("{op}: target has {} pixels, logits {}", target.len(), b * hw)));
    }
    if let Some(&bad) = target.iter().find(|&&t| t as usize >= k) {
        return Err(Error::Invalid(format!("{op}: class {bad} out of range for {k} classes")));
    }
    Ok((b, k, hw))
}

/// Mean over pixels of `-log softmax(logits)[target]`.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, target: &[u8]) -> Result<Tensor<T>> {
    let (b, k, hw) = check_target("cross_entropy", logits, target)?;
    let z = logits.data();
    let n = b * hw;
    let mut probs = vec![T::zero(); z.len()];
    let mut total = 0.0f64;
    for bi in 0..b {
        for p in 0..hw {
            let at = |c: usize| (bi * k + c) * hw + p;
            let m = (0..k).map(|c| z[at(c)]).fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for c in 0..k {
                let e = (z[at(c)] - m).exp();
                probs[at(c)] = e;
                s += e;
            }
            for c in 0..k {
                probs[at(c)] /= s;
            }
            let t = target[bi * hw + p] as usize;
            total += (s.ln() + m - z[at(t)]).to_f64().unwrap_or(f64::NAN);
        }
    }
    let tgt = target.to_vec();
    let inv_n = T::lit(1.0 / n as f64);
    Ok(Tensor::from_op(
        vec![1],
        vec![T::lit(total / n as f64)],
        vec![logits.clone()],
        Box::new(move |g, _| {
            let mut gi: Vec<T> = probs.iter().map(|&p| p * g[0] * inv_n).collect();
            for bi in 0..b {
                for p in 0..hw {
                    let t = tgt[bi * hw + p] as usize;
                    gi[(bi * k + t) * hw + p] -= g[0] * inv_n;
                }
            }
            vec![Some(gi)]
        }),
    ))
}

/// One-hot `[B, K, H, W]` encoding of a class map.
pub fn one_hot<T: Element>(target: &[u8], b: usize, k: usize, h: usize, w: usize) -> Tensor<T> {
    let hw = h * w;
    let mut v = vec![T::zero(); b * k * hw];
    for bi in 0..b {
        for p in 0..hw {
            v[(bi * k + target[bi * hw + p] as usize) * hw + p] = T::one();
        }
    }
    Tensor::new(&[b, k, h, w], v).expect("one-hot shape")
}

/// `1 - mean_c (2 Σ p̂_c p_c + ε) / (Σ p̂_c + Σ p_c + ε)`, sums over the whole batch.
pub fn dice_loss<T: Element>(logits: &Tensor<T>, target: &[u8]) -> Result<Tensor<T>> {
    let (b, k, _) = check_target("dice_loss", logits, target)?;
    let (h, w) = (logits.shape()[2], logits.shape()[3]);
    let probs = logits.softmax(1)?;
    let onehot = one_hot::<T>(target, b, k, h, w);
    let per_class = |t: &Tensor<T>| -> Result<Tensor<T>> { Ok(t.permute(&[1, 0, 2, 3])?.reshape(&[k, b * h * w])?.sum_axis(1, false)?) };
    let inter = per_class(&probs.mul(&onehot)?)?;
    let denom = per_class(&probs)?.add(&per_class(&onehot)?)?.add_scalar(DICE_EPS);
    let dice = inter.scale(2.0).add_scalar(DICE_EPS).div(&denom)?;
    Ok(dice.mean().neg().add_scalar(1.0))
}

/// `cross_entropy + dice_loss`.
pub fn segmentation_loss<T: Element>(logits: &Tensor<T>, target: &[u8]) -> Result<Tensor<T>> {
    Ok(cross_entropy(logits, target)?.add(&dice_loss(logits, target)?)?)
}

/// Nearest-neighbour resampling of a `[B, H, W]` class map.
pub fn downsample_target(target: &[u8], b: usize, h: usize, w: usize, h2: usize, w2: usize) -> Vec<u8> {
    let ty = resize_taps(h, h2, ResizeMode::Nearest);
    let tx = resize_taps(w, w2, ResizeMode::Nearest);
    let mut out = Vec::with_capacity(b * h2 * w2);
    for bi in 0..b {
        for &(sy, ..) in &ty {
            for &(sx, ..) in &tx {
                out.push(target[(bi * h + sy) * w + sx]);
            }
        }
    }
    out
}

/// Principal loss plus `aux_weight` times the mean auxiliary loss.
///
/// Auxiliary targets are the full-resolution target resampled to each head.
/// Without auxiliary heads the principal term is returned unchanged.
pub fn total_loss<T: Element>(outputs: &ModelOutputs<T>, target: &[u8], aux_weight: f64) -> Result<Tensor<T>> {
    let principal = segmentation_loss(&outputs.final_logits, target)?;
    if outputs.aux_logits.is_empty() {
        return Ok(principal);
    }
    let s = outputs.final_logits.shape();
    let (b, h, w) = (s[0], s[2], s[3]);
    let mut aux_sum: Option<Tensor<T>> = None;
    for a in &outputs.aux_logits {
        let t = downsample_target(target, b, h, w, a.shape()[2], a.shape()[3]);
        let l = segmentation_loss(a, &t)?;
        aux_sum = Some(match aux_sum {
            None => l,
            Some(acc) => acc.add(&l)?,
        });
    }
    let aux_mean = aux_sum.expect("non-empty").scale(1.0 / outputs.aux_logits.len() as f64);
    Ok(principal.add(&aux_mean.scale(aux_weight))?)
}
