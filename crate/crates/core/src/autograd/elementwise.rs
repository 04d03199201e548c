#[cfg(test)]
use super::Tape;
use super::Var;
use crate::error::{Error, Result};
use crate::tensor::{numel, strides, Tensor};

/// The elementwise operations of the engine.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Sigmoid,
    Tanh,
}

/// Applies `op` to `a` (and `b` for binary kinds).
pub fn elementwise(op: ElementwiseOp, a: &Var, b: Option<&Var>) -> Result<Var> {
    use ElementwiseOp::*;
    let need_b = || b.ok_or_else(|| Error::invalid(format!("{op:?} needs two operands")));
    match op {
        Add => a.add(need_b()?),
        Sub => a.sub(need_b()?),
        Mul => a.mul(need_b()?),
        Div => a.div(need_b()?),
        Relu | Sigmoid | Tanh if b.is_some() => {
            Err(Error::invalid(format!("{op:?} takes one operand")))
        }
        Relu => a.relu(),
        Sigmoid => a.sigmoid(),
        Tanh => a.tanh(),
    }
}

/// Shape of `a ⊕ b`. Shorter shapes are left-padded with ones; each extent
/// pair must match or contain a one.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; r - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

/// Strides of `shape` viewed inside `out` (zero on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut padded = vec![1; out.len() - shape.len()];
    padded.extend_from_slice(shape);
    let st = strides(&padded);
    padded
        .iter()
        .zip(st)
        .map(|(&e, s)| if e == 1 { 0 } else { s })
        .collect()
}

/// Calls `f(out_index, a_offset, b_offset)` over `out` in row-major order.
fn for_each_pair(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let r = out.len();
    let n = numel(out);
    if r == 0 {
        f(0, 0, 0);
        return;
    }
    let last = out[r - 1];
    let (la, lb) = (sa[r - 1], sb[r - 1]);
    let mut idx = vec![0usize; r];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut i = 0;
    while i < n {
        for j in 0..last {
            f(i + j, oa + j * la, ob + j * lb);
        }
        i += last;
        // advance the odometer over the outer axes
        let mut d = r - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sums `g` (shaped `out`) down to `shape`.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let out = g.shape();
    let s = broadcast_strides(shape, out);
    let zero = vec![0; out.len()];
    let mut acc = vec![0.0; numel(shape)];
    let gd = g.data();
    for_each_pair(out, &s, &zero, |i, o, _| acc[o] += gd[i]);
    Tensor::from_parts(shape.to_vec(), acc)
}

fn binary(
    a: &Var,
    b: &Var,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
    grads: impl FnOnce(&Tensor, &Tensor, &Tensor, &[bool]) -> (Option<Tensor>, Option<Tensor>) + 'static,
) -> Result<Var> {
    let out = broadcast_shape(a.shape(), b.shape())?;
    let (ad, bd) = (a.value().data(), b.value().data());
    let data = if a.shape() == b.shape() {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else {
        let sa = broadcast_strides(a.shape(), &out);
        let sb = broadcast_strides(b.shape(), &out);
        let mut v = vec![0.0; numel(&out)];
        for_each_pair(&out, &sa, &sb, |i, oa, ob| v[i] = f(ad[oa], bd[ob]));
        v
    };
    let (ra, rb) = (a.rc(), b.rc());
    a.tape().record(
        op,
        Tensor::from_parts(out, data),
        &[a, b],
        move |g, needs| {
            let (ga, gb) = grads(g, &ra, &rb, needs);
            vec![
                ga.map(|t| reduce_to(&t, ra.shape())),
                gb.map(|t| reduce_to(&t, rb.shape())),
            ]
        },
    )
}

/// `x` broadcast to `out`, materialized.
fn expand(x: &Tensor, out: &[usize]) -> Vec<f64> {
    if x.shape() == out {
        return x.data().to_vec();
    }
    let s = broadcast_strides(x.shape(), out);
    let zero = vec![0; out.len()];
    let xd = x.data();
    let mut v = vec![0.0; numel(out)];
    for_each_pair(out, &s, &zero, |i, o, _| v[i] = xd[o]);
    v
}

fn unary(
    x: &Var,
    op: &'static str,
    f: impl Fn(f64) -> f64,
    // derivative from (input, output)
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Result<Var> {
    let y = x.value().map(f);
    let xin = x.rc();
    let yout = std::rc::Rc::new(y.clone());
    x.tape().record(op, y, &[x], move |g, _| {
        let data = g
            .data()
            .iter()
            .zip(xin.data().iter().zip(yout.data()))
            .map(|(&g, (&a, &b))| g * df(a, b))
            .collect();
        vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
    })
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Var {
    pub fn add(&self, other: &Var) -> Result<Var> {
        binary(
            self,
            other,
            "add",
            |x, y| x + y,
            |g, _, _, n| (n[0].then(|| g.clone()), n[1].then(|| g.clone())),
        )
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        binary(
            self,
            other,
            "sub",
            |x, y| x - y,
            |g, _, _, n| (n[0].then(|| g.clone()), n[1].then(|| g.map(|v| -v))),
        )
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        binary(
            self,
            other,
            "mul",
            |x, y| x * y,
            |g, a, b, n| {
                let out = g.shape().to_vec();
                let gd = g.data();
                let ga = n[0].then(|| {
                    let be = expand(b, &out);
                    Tensor::from_parts(out.clone(), gd.iter().zip(be).map(|(g, y)| g * y).collect())
                });
                let gb = n[1].then(|| {
                    let ae = expand(a, &out);
                    Tensor::from_parts(out.clone(), gd.iter().zip(ae).map(|(g, x)| g * x).collect())
                });
                (ga, gb)
            },
        )
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        if other.value().data().iter().any(|&v| v == 0.0) {
            return Err(Error::NonFinite("div"));
        }
        binary(
            self,
            other,
            "div",
            |x, y| x / y,
            |g, a, b, n| {
                let out = g.shape().to_vec();
                let gd = g.data();
                let be = expand(b, &out);
                let ga = n[0].then(|| {
                    Tensor::from_parts(
                        out.clone(),
                        gd.iter().zip(&be).map(|(g, y)| g / y).collect(),
                    )
                });
                let gb = n[1].then(|| {
                    let ae = expand(a, &out);
                    let v = gd
                        .iter()
                        .zip(ae.iter().zip(&be))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    Tensor::from_parts(out.clone(), v)
                });
                (ga, gb)
            },
        )
    }

    /// ReLU with subgradient 0 at exactly 0.
    pub fn relu(&self) -> Result<Var> {
        let d = self.value().data();
        self.tape().note_kinks(d.chunks(64).map(|c| {
            c.iter()
                .enumerate()
                .fold(0u64, |acc, (i, &v)| acc | (u64::from(v > 0.0) << i))
        }));
        unary(
            self,
            "relu",
            |v| v.max(0.0),
            |x, _| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    pub fn sigmoid(&self) -> Result<Var> {
        unary(self, "sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Result<Var> {
        unary(self, "tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Var> {
        const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044_715;
        unary(
            self,
            "gelu",
            |x| 0.5 * x * (1.0 + (K * (x + A * x * x * x)).tanh()),
            |x, _| {
                let t = (K * (x + A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * A * x * x)
            },
        )
    }

    pub fn exp(&self) -> Result<Var> {
        unary(self, "exp", f64::exp, |_, y| y)
    }

    pub fn neg(&self) -> Result<Var> {
        self.scale(-1.0)
    }

    pub fn square(&self) -> Result<Var> {
        unary(self, "square", |v| v * v, |x, _| 2.0 * x)
    }

    pub fn scale(&self, c: f64) -> Result<Var> {
        unary(self, "scale", move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var> {
        unary(self, "add_scalar", move |v| v + c, |_, _| 1.0)
    }
}
