use crate::autograd::Var;
use crate::error::{shape_err, Result};
use crate::tensor::{profile, Tensor};

/// Which operand (if any) is repeated over the other.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs is a scalar or a trailing suffix of lhs
    Rhs,
    /// lhs is a scalar or a trailing suffix of rhs
    Lhs,
}

fn is_suffix(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn bcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Bcast> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        Ok(Bcast::Same)
    } else if nb == 1 || is_suffix(a, b) {
        Ok(Bcast::Rhs)
    } else if na == 1 || is_suffix(b, a) {
        Ok(Bcast::Lhs)
    } else {
        Err(shape_err(op, format!("cannot combine {:?} and {:?}", a, b)))
    }
}

/// Sums `g` (of the broadcast shape) down to `n` elements by wrapping.
fn reduce_to(g: &[f32], n: usize, shape: &[usize]) -> Tensor {
    if g.len() == n {
        return Tensor::from_parts(shape.to_vec(), g.to_vec());
    }
    let mut acc = vec![0f64; n];
    for (i, v) in g.iter().enumerate() {
        acc[i % n] += *v as f64;
    }
    Tensor::from_parts(shape.to_vec(), acc.into_iter().map(|v| v as f32).collect())
}

type Partial = fn(f32, f32, f32) -> (f32, f32);

fn binary(
    op: &'static str,
    a: &Var,
    b: &Var,
    f: fn(f32, f32) -> f32,
    df: Partial,
) -> Result<Var> {
    let mode = bcast(op, a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let (na, nb) = (ad.len(), bd.len());
    let out_shape = if mode == Bcast::Lhs { b.shape() } else { a.shape() };
    let n = na.max(nb);
    let data: Vec<f32> = match mode {
        Bcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        Bcast::Rhs => (0..n).map(|i| f(ad[i], bd[i % nb])).collect(),
        Bcast::Lhs => (0..n).map(|i| f(ad[i % na], bd[i])).collect(),
    };
    profile::add_flops(n as u64);
    let out = Tensor::from_parts(out_shape.to_vec(), data);
    Ok(Var::record(op, out, &[a, b], move |g, ins, out| {
        let (x, y) = (ins[0], ins[1]);
        let (na, nb) = (x.numel(), y.numel());
        let n = g.numel();
        let mut ga = vec![0f32; n];
        let mut gb = vec![0f32; n];
        for i in 0..n {
            let (xa, yb) = (x.data()[i % na], y.data()[i % nb]);
            let (da, db) = df(xa, yb, out.data()[i]);
            ga[i] = g.data()[i] * da;
            gb[i] = g.data()[i] * db;
        }
        vec![
            Some(reduce_to(&ga, na, x.shape())),
            Some(reduce_to(&gb, nb, y.shape())),
        ]
    }))
}

fn unary(op: &'static str, a: &Var, f: impl Fn(f32) -> f32, df: fn(f32, f32) -> f32) -> Var {
    let out = Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect());
    Var::record(op, out, &[a], move |g, ins, out| {
        let data = g
            .data()
            .iter()
            .zip(ins[0].data())
            .zip(out.data())
            .map(|((g, &x), &y)| g * df(x, y))
            .collect();
        vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
    })
}

pub(crate) fn softplus_f(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else {
        (x as f64).exp().ln_1p() as f32
    }
}

pub(crate) fn sigmoid_f(x: f32) -> f32 {
    (1.0 / (1.0 + (-(x as f64)).exp())) as f32
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

fn gelu_f(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_df(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Var {
    pub fn add(&self, other: &Var) -> Result<Var> {
        binary("add", self, other, |x, y| x + y, |_, _, _| (1.0, 1.0))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        binary("sub", self, other, |x, y| x - y, |_, _, _| (1.0, -1.0))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        binary("mul", self, other, |x, y| x * y, |x, y, _| (y, x))
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        binary("div", self, other, |x, y| x / y, |_, y, z| (1.0 / y, -z / y))
    }

    pub fn add_scalar(&self, c: f32) -> Var {
        unary("add_scalar", self, move |x| x + c, |_, _| 1.0)
    }

    pub fn scale(&self, c: f32) -> Var {
        let out = Tensor::from_parts(
            self.shape().to_vec(),
            self.data().iter().map(|&x| x * c).collect(),
        );
        Var::record("scale", out, &[self], move |g, _, _| {
            vec![Some(Tensor::from_parts(
                g.shape().to_vec(),
                g.data().iter().map(|v| v * c).collect(),
            ))]
        })
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Var {
        unary("exp", self, |x| x.exp(), |_, y| y)
    }

    /// Natural log; non-positive inputs produce non-finite values that
    /// [`Tensor::check_finite`] reports.
    pub fn log(&self) -> Var {
        unary("log", self, |x| x.ln(), |x, _| 1.0 / x)
    }

    pub fn softplus(&self) -> Var {
        unary("softplus", self, softplus_f, |x, _| sigmoid_f(x))
    }

    pub fn sigmoid(&self) -> Var {
        unary("sigmoid", self, sigmoid_f, |_, y| y * (1.0 - y))
    }

    pub fn silu(&self) -> Var {
        unary(
            "silu",
            self,
            |x| x * sigmoid_f(x),
            |x, _| {
                let s = sigmoid_f(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var {
        unary("gelu", self, gelu_f, |x, _| gelu_df(x))
    }

    /// |x| with subgradient 0 at 0.
    pub fn abs(&self) -> Var {
        unary(
            "abs",
            self,
            |x| x.abs(),
            |x, _| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            },
        )
    }

    pub fn square(&self) -> Var {
        unary("square", self, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(&self) -> Var {
        unary("sqrt", self, |x| x.sqrt(), |_, y| 0.5 / y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::backward;

    fn t(shape: &[usize], v: &[f32]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn softplus_at_zero_is_ln2_with_half_gradient() {
        let x = Var::param(t(&[1], &[0.0]));
        let y = x.softplus();
        assert!((y.data()[0] - std::f32::consts::LN_2).abs() < 1e-7);
        let g = backward(y.sum()).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[0.5]);
    }

    #[test]
    fn quadratic_gradient() {
        let x = Var::param(t(&[2], &[1.0, 2.0]));
        let g = backward(x.mul(&x).unwrap().sum()).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn l1_subgradient_is_zero_at_target() {
        let x = Var::param(t(&[3], &[0.5, -1.0, 2.0]));
        let target = Var::constant(t(&[3], &[0.5, -1.0, 2.0]));
        let loss = x.sub(&target).unwrap().abs().mean();
        let g = backward(loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn trailing_and_scalar_broadcast() {
        let a = Var::param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = Var::param(t(&[3], &[10.0, 20.0, 30.0]));
        let c = a.add(&b).unwrap();
        assert_eq!(c.data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let g = backward(c.mul(&c).unwrap().sum()).unwrap();
        // d/db sum((a+b)^2) = 2 * sum over rows of (a+b)
        assert_eq!(g.get(&b).unwrap().data(), &[50.0, 94.0, 138.0]);

        let s = Var::constant(t(&[1], &[2.0]));
        assert_eq!(s.mul(&a).unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn non_trailing_broadcast_is_an_error() {
        let a = Var::constant(Tensor::zeros(&[2, 3]));
        let b = Var::constant(Tensor::zeros(&[2]));
        let err = a.add(&b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2, 3]"), "{err}");
    }
}
