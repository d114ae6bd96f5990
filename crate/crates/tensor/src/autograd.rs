use std::collections::{HashMap, HashSet};

use crate::element::Element;
use crate::error::{contract_err, Result};
use crate::tensor::Tensor;

impl<T: Element> Tensor<T> {
    /// Reverse-mode accumulation from this scalar into every reachable leaf.
    ///
    /// Leaf gradients add onto whatever is already stored; call
    /// [`Tensor::zero_grad`] (or `ParamStore::zero_grad`) between steps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return contract_err(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape()),
            );
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = topo_order(self);
        let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
        grads.insert(self.ptr_id(), vec![T::one()]);

        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.ptr_id()) else {
                continue;
            };
            match &t.inner.node {
                None => t.accumulate_grad(&g),
                Some(node) => {
                    let needs: Vec<bool> = node.inputs.iter().map(|i| i.requires_grad()).collect();
                    let input_grads = (node.backward)(&g, &needs);
                    debug_assert_eq!(input_grads.len(), node.inputs.len());
                    for ((input, ig), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                        let Some(ig) = ig else { continue };
                        if !need {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), input.numel());
                        match grads.get_mut(&input.ptr_id()) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += *b),
                            None => {
                                grads.insert(input.ptr_id(), ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Nodes reachable from `root` that require grad, parents before children.
fn topo_order<T: Element>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut visited: HashSet<usize> = HashSet::new();
    // (tensor, children_pushed)
    let mut stack: Vec<(Tensor<T>, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.ptr_id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(node) = &t.inner.node {
            for input in node.inputs.iter().rev() {
                if input.requires_grad() && !visited.contains(&input.ptr_id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}

/// Central-difference gradient of a scalar function, one element at a time.
///
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every `i`; `f` must be deterministic.
pub fn finite_diff_grad<T, F>(f: F, x: &Tensor<T>, h: f64) -> Vec<T>
where
    T: Element,
    F: Fn(&Tensor<T>) -> f64,
{
    let idx: Vec<usize> = (0..x.numel()).collect();
    finite_diff_at(f, x, h, &idx)
}

/// Central differences restricted to the listed element indices.
pub fn finite_diff_at<T, F>(f: F, x: &Tensor<T>, h: f64, indices: &[usize]) -> Vec<T>
where
    T: Element,
    F: Fn(&Tensor<T>) -> f64,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let base = x.to_vec();
    indices
        .iter()
        .map(|&i| {
            let mut plus = base.clone();
            plus[i] += T::lit(h);
            let mut minus = base.clone();
            minus[i] -= T::lit(h);
            let fp = f(&Tensor::new(x.shape(), plus).expect("same shape"));
            let fm = f(&Tensor::new(x.shape(), minus).expect("same shape"));
            T::lit((fp - fm) / (2.0 * h))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_scalar_loss_is_rejected() {
        let x = Tensor::<f64>::leaf(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.mul(&x).unwrap();
        assert!(y.backward().is_err());
    }

    #[test]
    fn linear_loss_gradient_is_input() {
        let w = Tensor::<f64>::leaf(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let x = Tensor::new(&[3], vec![3.0, 4.0, 5.0]).unwrap();
        w.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![3.0, 4.0, 5.0]);
    }

    #[test]
    fn half_square_gradient_is_self_and_accumulates() {
        let w = Tensor::<f64>::leaf(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let loss = || w.mul(&w).unwrap().sum().scale(0.5);
        loss().backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![0.5, -1.0, 2.0]);
        loss().backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![1.0, -2.0, 4.0]);
        w.zero_grad();
        assert!(w.grad().is_none());
    }

    #[test]
    fn shared_subexpression_gets_both_paths() {
        let x = Tensor::<f64>::leaf(&[1], vec![3.0]).unwrap();
        let y = x.mul(&x).unwrap();
        let z = y.add(&y).unwrap().sum(); // 2x^2
        z.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![12.0]);
    }

    #[test]
    fn finite_difference_of_sum_is_ones() {
        let x = Tensor::<f64>::new(&[4], vec![0.1, 0.2, -3.0, 7.0]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().sum(), &x, 1e-5);
        for v in g {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_difference_of_square() {
        let x = Tensor::<f64>::new(&[1], vec![3.0]).unwrap();
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &x, 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-8);
    }
}
