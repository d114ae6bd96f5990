use crate::element::Element;
use crate::error::{dim_err, Result};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Relu,
    Sigmoid,
    /// Softmax over axis 1 (the channel axis of NCHW / [B, K, ...] tensors).
    SoftmaxChannel,
}

#[inline]
pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<T: Element>(x: T) -> T {
    if x > T::lit(20.0) {
        x
    } else if x < T::lit(-20.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

impl<T: Element> Tensor<T> {
    /// Pointwise op whose derivative is a function of the input.
    pub fn map_unary<F, D>(&self, f: F, df: D) -> Tensor<T>
    where
        F: Fn(T) -> T + Send + Sync,
        D: Fn(T) -> T + Send + Sync + 'static,
    {
        let out = par::map_slice(self.data(), |&x| f(x));
        let x = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let gi = g.iter().zip(x.data()).map(|(&g, &x)| g * df(x)).collect();
                vec![Some(gi)]
            }),
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        self.map_unary(|x| -x, |_| -T::one())
    }

    pub fn scale(&self, c: f64) -> Tensor<T> {
        let c = T::lit(c);
        self.map_unary(move |x| x * c, move |_| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::lit(c);
        self.map_unary(move |x| x + c, |_| T::one())
    }

    pub fn exp(&self) -> Tensor<T> {
        self.map_unary(|x| x.exp(), |x| x.exp())
    }

    pub fn relu(&self) -> Tensor<T> {
        self.map_unary(
            |x| if x > T::zero() { x } else { T::zero() },
            |x| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.map_unary(sigmoid, |x| {
            let s = sigmoid(x);
            s * (T::one() - s)
        })
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Tensor<T> {
        self.map_unary(
            |x| x * sigmoid(x),
            |x| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    pub fn softplus(&self) -> Tensor<T> {
        self.map_unary(softplus, sigmoid)
    }

    pub fn activation(&self, kind: Activation) -> Result<Tensor<T>> {
        Ok(match kind {
            Activation::Silu => self.silu(),
            Activation::Relu => self.relu(),
            Activation::Sigmoid => self.sigmoid(),
            Activation::SoftmaxChannel => self.softmax(1)?,
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinOp::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinOp::Sub)
    }

    /// Hadamard product (with broadcasting).
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinOp::Mul)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinOp::Div)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    #[inline]
    fn apply<T: Element>(self, a: T, b: T) -> T {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }
}

/// Per-operand strides into the output index space (0 on broadcast dims).
struct Broadcast {
    out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn plan_broadcast(a: &[usize], b: &[usize]) -> Option<Broadcast> {
    if a.len() != b.len() {
        return None;
    }
    let mut out_shape = Vec::with_capacity(a.len());
    for (&x, &y) in a.iter().zip(b) {
        if x == y || y == 1 {
            out_shape.push(x);
        } else if x == 1 {
            out_shape.push(y);
        } else {
            return None;
        }
    }
    let masked = |shape: &[usize]| -> Vec<usize> {
        contiguous_strides(shape)
            .into_iter()
            .zip(shape.iter().zip(&out_shape))
            .map(|(s, (&d, &o))| if d == o { s } else { 0 })
            .collect()
    };
    Some(Broadcast { a_strides: masked(a), b_strides: masked(b), out_shape })
}

/// Visit `(out_index, a_index, b_index)` in output order.
fn for_each_broadcast(plan: &Broadcast, mut f: impl FnMut(usize, usize, usize)) {
    let nd = plan.out_shape.len();
    let total: usize = plan.out_shape.iter().product();
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = plan.out_shape[nd - 1];
    let (sa, sb) = (plan.a_strides[nd - 1], plan.b_strides[nd - 1]);
    let mut counter = vec![0usize; nd];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        for j in 0..inner {
            f(o + j, ia + j * sa, ib + j * sb);
        }
        o += inner;
        // advance the odometer over the outer dims
        let mut d = nd - 1;
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            counter[d] += 1;
            ia += plan.a_strides[d];
            ib += plan.b_strides[d];
            if counter[d] < plan.out_shape[d] {
                break;
            }
            ia -= plan.a_strides[d] * counter[d];
            ib -= plan.b_strides[d] * counter[d];
            counter[d] = 0;
        }
    }
}

fn binary<T: Element>(a: &Tensor<T>, b: &Tensor<T>, op: BinOp) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let mut out = vec![T::zero(); a.numel()];
        let (ad, bd) = (a.data(), b.data());
        out.iter_mut()
            .zip(ad.iter().zip(bd))
            .for_each(|(o, (&x, &y))| *o = op.apply(x, y));
        let (a2, b2) = (a.clone(), b.clone());
        return Ok(Tensor::from_op(
            a.shape().to_vec(),
            out,
            vec![a.clone(), b.clone()],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| match op {
                    BinOp::Add | BinOp::Sub => g.to_vec(),
                    BinOp::Mul => g.iter().zip(b2.data()).map(|(&g, &y)| g * y).collect(),
                    BinOp::Div => g.iter().zip(b2.data()).map(|(&g, &y)| g / y).collect(),
                });
                let gb = needs[1].then(|| match op {
                    BinOp::Add => g.to_vec(),
                    BinOp::Sub => g.iter().map(|&g| -g).collect(),
                    BinOp::Mul => g.iter().zip(a2.data()).map(|(&g, &x)| g * x).collect(),
                    BinOp::Div => g
                        .iter()
                        .zip(a2.data().iter().zip(b2.data()))
                        .map(|(&g, (&x, &y))| -g * x / (y * y))
                        .collect(),
                });
                vec![ga, gb]
            }),
        ));
    }

    let Some(plan) = plan_broadcast(a.shape(), b.shape()) else {
        return dim_err(
            "elementwise",
            format!("shapes {:?} and {:?} do not broadcast", a.shape(), b.shape()),
        );
    };
    let total: usize = plan.out_shape.iter().product();
    let mut out = vec![T::zero(); total];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&plan, |o, ia, ib| out[o] = op.apply(ad[ia], bd[ib]));
    let out_shape = plan.out_shape.clone();
    let (a2, b2) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        out_shape,
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, needs| {
            let (ad, bd) = (a2.data(), b2.data());
            let mut ga = needs[0].then(|| vec![T::zero(); ad.len()]);
            let mut gb = needs[1].then(|| vec![T::zero(); bd.len()]);
            for_each_broadcast(&plan, |o, ia, ib| {
                let (x, y, go) = (ad[ia], bd[ib], g[o]);
                if let Some(ga) = ga.as_mut() {
                    ga[ia] += match op {
                        BinOp::Add | BinOp::Sub => go,
                        BinOp::Mul => go * y,
                        BinOp::Div => go / y,
                    };
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ib] += match op {
                        BinOp::Add => go,
                        BinOp::Sub => -go,
                        BinOp::Mul => go * x,
                        BinOp::Div => -go * x / (y * y),
                    };
                }
            });
            vec![ga, gb]
        }),
    ))
}
