use rand::rngs::StdRng;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};

use crate::autograd::finite_diff_at;
use crate::error::Result;
use crate::tensor::Tensor;

/// Worst agreement between analytic and central-difference gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub probes: usize,
}

/// Magnitude below which both gradients are treated as zero.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compare `backward()` against central differences for `f`.
///
/// The output is scalarized as `sum(f(x) * r)` with a fixed random `r`, so
/// every output element contributes. Up to `probes` random elements of each
/// input are perturbed by `h`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], probes: usize, h: f64, seed: u64) -> Result<GradCheck>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let mut rng = StdRng::seed_from_u64(seed);
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.to_leaf()).collect();
    let out = f(&leaves)?;
    let weights: Vec<f64> = (0..out.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r = Tensor::new(out.shape(), weights)?;
    out.mul(&r)?.sum().backward()?;

    let scalar = |xs: &[Tensor<f64>]| -> f64 {
        let y = f(xs).expect("forward succeeded once");
        y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };

    let mut report = GradCheck { max_rel_err: 0.0, probes: 0 };
    for (k, leaf) in leaves.iter().enumerate() {
        let n = leaf.numel();
        let picks = sample(&mut rng, n, probes.min(n)).into_vec();
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; n]);
        let numeric = finite_diff_at(
            |xk| {
                let mut xs: Vec<Tensor<f64>> = inputs.to_vec();
                xs[k] = xk.clone();
                scalar(&xs)
            },
            &inputs[k],
            h,
            &picks,
        );
        for (&i, &num) in picks.iter().zip(&numeric) {
            report.max_rel_err = report.max_rel_err.max(rel_err(analytic[i], num));
            report.probes += 1;
        }
    }
    Ok(report)
}

/// Ridders' extrapolation of a central-difference quotient to zero step.
///
/// `quotient(h)` must return `(f(x + h) - f(x - h)) / 2h`. The step starts at
/// `h0` and shrinks geometrically; returns `(estimate, error estimate)`. Far
/// less sensitive to roundoff than one small step when the derivative is tiny
/// relative to `f`.
pub fn ridders(mut quotient: impl FnMut(f64) -> f64, h0: f64) -> (f64, f64) {
    const NTAB: usize = 12;
    const CON: f64 = 1.4;
    const CON2: f64 = CON * CON;
    const SAFE: f64 = 2.0;
    let mut tab = [[0.0f64; NTAB]; NTAB];
    let mut h = h0;
    tab[0][0] = quotient(h);
    let (mut best, mut err) = (tab[0][0], f64::INFINITY);
    for i in 1..NTAB {
        h /= CON;
        tab[0][i] = quotient(h);
        let mut fac = CON2;
        for j in 1..=i {
            tab[j][i] = (tab[j - 1][i] * fac - tab[j - 1][i - 1]) / (fac - 1.0);
            fac *= CON2;
            let e = (tab[j][i] - tab[j - 1][i]).abs().max((tab[j][i] - tab[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = tab[j][i];
            }
        }
        if (tab[i][i] - tab[i - 1][i - 1]).abs() >= SAFE * err {
            break;
        }
    }
    (best, err)
}
