//! Flip test-time augmentation.

use cmunet_tensor::{Element, Tensor};

use super::augment::{flip_h, flip_v};
use crate::error::Result;
use crate::metrics::argmax_classes;
use crate::model::CmUnet;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flip {
    None,
    H,
    V,
    HV,
}

impl Flip {
    pub const ALL: [Flip; 4] = [Flip::None, Flip::H, Flip::V, Flip::HV];

    /// Applies the flip to an NCHW tensor. Every variant is its own inverse.
    pub fn apply<T: Element>(self, x: &Tensor<T>) -> Tensor<T> {
        let s = x.shape();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let d = match self {
            Flip::None => return x.clone(),
            Flip::H => flip_h(x.data(), planes, h, w),
            Flip::V => flip_v(x.data(), planes, h, w),
            Flip::HV => flip_v(&flip_h(x.data(), planes, h, w), planes, h, w),
        };
        Tensor::new(s, d).expect("flip keeps shape")
    }
}

/// Mean class probabilities over the four flips, each mapped back to the
/// original orientation before averaging.
pub fn tta_probs<T, F>(predict: F, images: &Tensor<T>) -> Result<Tensor<T>>
where
    T: Element,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let mut acc: Option<Vec<T>> = None;
    let mut shape = Vec::new();
    for f in Flip::ALL {
        let p = f.apply(&predict(&f.apply(images))?.softmax(1)?);
        shape = p.shape().to_vec();
        match &mut acc {
            None => acc = Some(p.to_vec()),
            Some(a) => a.iter_mut().zip(p.data()).for_each(|(a, &b)| *a += b),
        }
    }
    let quarter = T::lit(0.25);
    let mean = acc.expect("four passes").into_iter().map(|v| v * quarter).collect();
    Ok(Tensor::new(&shape, mean)?)
}

/// Flip-averaged class map for a batch `[B, 3, H, W]`.
pub fn tta_predict<T: Element>(model: &CmUnet<T>, images: &Tensor<T>) -> Result<Vec<u8>> {
    Ok(argmax_classes(&tta_probs(|x| model.predict_logits(x), images)?))
}

/// Plain argmax prediction.
pub fn predict<T: Element>(model: &CmUnet<T>, images: &Tensor<T>) -> Result<Vec<u8>> {
    Ok(argmax_classes(&model.predict_logits(images)?))
}
