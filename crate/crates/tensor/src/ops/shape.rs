use crate::element::Element;
use crate::error::{dim_err, Result};
use crate::tensor::{numel_of, Tensor};

/// `(outer, len, inner)` split of `shape` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Element> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel_of(shape) != self.numel() {
            return dim_err(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape(), shape),
            );
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return dim_err("permute", format!("{perm:?} is not a permutation of {nd} axes"));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let gather = permutation_index(&in_shape, perm);
        let src = self.data();
        let out: Vec<T> = gather.iter().map(|&i| src[i]).collect();
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gi = vec![T::zero(); g.len()];
                for (o, &i) in gather.iter().enumerate() {
                    gi[i] = g[o];
                }
                vec![Some(gi)]
            }),
        ))
    }

    /// Slice `index` along `axis`, dropping that axis.
    pub fn select(&self, axis: usize, index: usize) -> Result<Tensor<T>> {
        if axis >= self.ndim() || index >= self.shape()[axis] {
            return dim_err(
                "select",
                format!("index {index} on axis {axis} of {:?}", self.shape()),
            );
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let mut out_shape = self.shape().to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let src = self.data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * len + index) * inner;
            out.extend_from_slice(&src[base..base + inner]);
        }
        let n_in = self.numel();
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gi = vec![T::zero(); n_in];
                for o in 0..outer {
                    let base = (o * len + index) * inner;
                    gi[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
                vec![Some(gi)]
            }),
        ))
    }

    /// Join along an existing axis.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let Some(first) = parts.first() else {
            return dim_err("concat", "no inputs");
        };
        let nd = first.ndim();
        if axis >= nd {
            return dim_err("concat", format!("axis {axis} out of range for {nd} dims"));
        }
        for p in parts {
            let ok = p.ndim() == nd
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return dim_err(
                    "concat",
                    format!("{:?} incompatible with {:?} on axis {axis}", p.shape(), first.shape()),
                );
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total_len: usize = lens.iter().sum();
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total_len;
        let mut out = Vec::with_capacity(outer * total_len * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        Ok(Tensor::from_op(
            out_shape,
            out,
            parts.to_vec(),
            Box::new(move |g, needs| {
                let mut grads: Vec<Option<Vec<T>>> = needs
                    .iter()
                    .zip(&lens)
                    .map(|(&n, &l)| n.then(|| Vec::with_capacity(outer * l * inner)))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gp, &l) in grads.iter_mut().zip(&lens) {
                        if let Some(gp) = gp {
                            gp.extend_from_slice(&g[off..off + l * inner]);
                        }
                        off += l * inner;
                    }
                }
                grads
            }),
        ))
    }

    /// Join along a new axis inserted at `axis`.
    pub fn stack(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let Some(first) = parts.first() else {
            return dim_err("stack", "no inputs");
        };
        if axis > first.ndim() {
            return dim_err("stack", format!("axis {axis} out of range"));
        }
        let mut unsq_shape = first.shape().to_vec();
        unsq_shape.insert(axis, 1);
        let expanded = parts
            .iter()
            .map(|p| {
                if p.shape() != first.shape() {
                    return dim_err(
                        "stack",
                        format!("{:?} differs from {:?}", p.shape(), first.shape()),
                    );
                }
                p.reshape(&unsq_shape)
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::concat(&expanded, axis)
    }
}

/// For each output position of the permuted tensor, its source offset.
fn permutation_index(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let nd = in_shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = numel_of(in_shape);
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; nd];
    let mut src = 0usize;
    for _ in 0..total {
        idx.push(src);
        for d in (0..nd).rev() {
            counter[d] += 1;
            src += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            src -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}
