use super::Var;
use crate::error::{Error, Result};
use crate::tensor::{numel, strides, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// For each input element (row-major), the offset of its reduced output.
fn reduced_offsets(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let kept: Vec<usize> = shape
        .iter()
        .enumerate()
        .map(|(i, &e)| if axes.contains(&i) { 1 } else { e })
        .collect();
    let ost: Vec<usize> = strides(&kept)
        .into_iter()
        .zip(&kept)
        .map(|(s, &e)| if e == 1 { 0 } else { s })
        .collect();
    let n = numel(shape);
    let r = shape.len();
    let mut map = Vec::with_capacity(n);
    let mut counter = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..r).rev() {
            counter[d] += 1;
            off += ost[d];
            if counter[d] < shape[d] {
                break;
            }
            off -= ost[d] * shape[d];
            counter[d] = 0;
        }
    }
    (map, kept)
}

impl Var {
    /// Reduces over `axes`. The result keeps reduced axes with extent 1
    /// unless `keepdim` is false, in which case they are dropped (a full
    /// reduction yields shape `[1]`).
    pub fn reduce(&self, op: ReduceOp, axes: &[usize], keepdim: bool) -> Result<Var> {
        let shape = self.shape().to_vec();
        if axes.is_empty() {
            return Err(Error::invalid("reduce over an empty axis list"));
        }
        for &a in axes {
            if a >= shape.len() {
                return Err(Error::invalid(format!(
                    "reduce: axis {a} out of range for {shape:?}"
                )));
            }
        }
        let (map, kept) = reduced_offsets(&shape, axes);
        let out_n = numel(&kept);
        let count = (numel(&shape) / out_n) as f64;
        let xd = self.value().data();
        let out_shape = if keepdim {
            kept.clone()
        } else {
            let s: Vec<usize> = shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &e)| e)
                .collect();
            if s.is_empty() {
                vec![1]
            } else {
                s
            }
        };
        match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                let scale = if op == ReduceOp::Mean {
                    1.0 / count
                } else {
                    1.0
                };
                let mut acc = vec![0.0; out_n];
                for (&o, &v) in map.iter().zip(xd) {
                    acc[o] += v;
                }
                if scale != 1.0 {
                    acc.iter_mut().for_each(|v| *v *= scale);
                }
                let name = if op == ReduceOp::Sum { "sum" } else { "mean" };
                self.tape().record(
                    name,
                    Tensor::from_parts(out_shape, acc),
                    &[self],
                    move |g, _| {
                        let gd = g.data();
                        let gx = map.iter().map(|&o| gd[o] * scale).collect();
                        vec![Some(Tensor::from_parts(shape, gx))]
                    },
                )
            }
            ReduceOp::Max => {
                let mut best = vec![f64::NEG_INFINITY; out_n];
                let mut arg = vec![0usize; out_n];
                for (i, (&o, &v)) in map.iter().zip(xd).enumerate() {
                    if v > best[o] {
                        best[o] = v;
                        arg[o] = i;
                    }
                }
                self.tape().note_kinks(arg.iter().map(|&a| a as u64));
                let n_in = xd.len();
                self.tape().record(
                    "max",
                    Tensor::from_parts(out_shape, best),
                    &[self],
                    move |g, _| {
                        let mut gx = vec![0.0; n_in];
                        for (&a, &gv) in arg.iter().zip(g.data()) {
                            gx[a] += gv;
                        }
                        vec![Some(Tensor::from_parts(shape, gx))]
                    },
                )
            }
        }
    }

    pub fn sum_all(&self) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(ReduceOp::Sum, &axes, false)
    }

    pub fn mean_all(&self) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(ReduceOp::Mean, &axes, false)
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "softmax: axis {axis} out of range for {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let e = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = self.value().data();
        let mut y = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * e + j) * inner + i;
                let m = (0..e).map(|j| xd[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..e {
                    let v = (xd[at(j)] - m).exp();
                    y[at(j)] = v;
                    z += v;
                }
                for j in 0..e {
                    y[at(j)] /= z;
                }
            }
        }
        let yt = std::rc::Rc::new(Tensor::from_parts(shape.clone(), y.clone()));
        self.tape().record(
            "softmax",
            Tensor::from_parts(shape.clone(), y),
            &[self],
            move |g, _| {
                let gd = g.data();
                let yd = yt.data();
                let mut gx = vec![0.0; gd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * e + j) * inner + i;
                        let dot: f64 = (0..e).map(|j| gd[at(j)] * yd[at(j)]).sum();
                        for j in 0..e {
                            gx[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::from_parts(shape, gx))]
            },
        )
    }
}
