use std::rc::Rc;

use super::Var;
use crate::error::{Error, Result};
use crate::tensor::{numel, strides, Tensor};

/// Gather index that produces a zero (used for padding).
pub(crate) const GATHER_ZERO: usize = usize::MAX;

fn check_axis(axis: usize, rank: usize, op: &str) -> Result<()> {
    if axis >= rank {
        return Err(Error::invalid(format!(
            "{op}: axis {axis} out of range for rank {rank}"
        )));
    }
    Ok(())
}

impl Var {
    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let y = self.value().reshape(shape)?;
        let in_shape = self.shape().to_vec();
        self.tape().record("reshape", y, &[self], move |g, _| {
            vec![Some(Tensor::from_parts(in_shape, g.data().to_vec()))]
        })
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(items: &[&Var], axis: usize) -> Result<Var> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("concat of an empty list"))?;
        let rank = first.shape().len();
        check_axis(axis, rank, "concat")?;
        for v in items {
            let s = v.shape();
            if s.len() != rank
                || s.iter()
                    .zip(first.shape())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(format!(
                    "concat along {axis}: {:?} vs {:?}",
                    s,
                    first.shape()
                )));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let extents: Vec<usize> = items.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &e) in items.iter().zip(&extents) {
                data.extend_from_slice(&v.value().data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let parents: Vec<&Var> = items.to_vec();
        let in_shapes: Vec<Vec<usize>> = items.iter().map(|v| v.shape().to_vec()).collect();
        first.tape().record(
            "concat",
            Tensor::from_parts(shape, data),
            &parents,
            move |g, needs| {
                let gd = g.data();
                let mut offset = 0;
                let mut out = Vec::with_capacity(extents.len());
                for ((&e, s), &need) in extents.iter().zip(in_shapes).zip(needs) {
                    if need {
                        let mut part = Vec::with_capacity(outer * e * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            part.extend_from_slice(&gd[start..start + e * inner]);
                        }
                        out.push(Some(Tensor::from_parts(s, part)));
                    } else {
                        out.push(None);
                    }
                    offset += e;
                }
                out
            },
        )
    }

    /// The sub-range `start..start + len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape().to_vec();
        check_axis(axis, shape.len(), "narrow")?;
        if len == 0 || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "narrow {start}..{} out of extent {} on axis {axis}",
                start + len,
                shape[axis]
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let e = shape[axis];
        let xd = self.value().data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * e + start) * inner;
            data.extend_from_slice(&xd[s..s + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.tape().record(
            "narrow",
            Tensor::from_parts(out_shape, data),
            &[self],
            move |g, _| {
                let mut gx = vec![0.0; numel(&shape)];
                for o in 0..outer {
                    let s = (o * e + start) * inner;
                    gx[s..s + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::from_parts(shape, gx))]
            },
        )
    }

    /// `out[i] = self[indices[i]]`, or 0 where the index is [`GATHER_ZERO`].
    pub(crate) fn gather(&self, indices: Rc<Vec<usize>>, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != indices.len() {
            return Err(Error::shape(
                "gather: index count does not match output shape",
            ));
        }
        let xd = self.value().data();
        let n_in = xd.len();
        if indices.iter().any(|&i| i != GATHER_ZERO && i >= n_in) {
            return Err(Error::shape("gather: index out of range"));
        }
        let data = indices
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { xd[i] })
            .collect();
        let in_shape = self.shape().to_vec();
        self.tape().record(
            "gather",
            Tensor::from_parts(shape, data),
            &[self],
            move |g, _| {
                let mut gx = vec![0.0; n_in];
                for (&i, &gv) in indices.iter().zip(g.data()) {
                    if i != GATHER_ZERO {
                        gx[i] += gv;
                    }
                }
                vec![Some(Tensor::from_parts(in_shape, gx))]
            },
        )
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Var> {
        let shape = self.shape();
        let r = shape.len();
        let mut seen = vec![false; r];
        if axes.len() != r
            || axes
                .iter()
                .any(|&a| a >= r || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::invalid(format!(
                "permute: {axes:?} is not a permutation of 0..{r}"
            )));
        }
        let st = strides(shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let out_st: Vec<usize> = axes.iter().map(|&a| st[a]).collect();
        let n = numel(shape);
        let mut idx = Vec::with_capacity(n);
        let mut counter = vec![0usize; r];
        let mut off = 0usize;
        for _ in 0..n {
            idx.push(off);
            for d in (0..r).rev() {
                counter[d] += 1;
                off += out_st[d];
                if counter[d] < out_shape[d] {
                    break;
                }
                off -= out_st[d] * out_shape[d];
                counter[d] = 0;
            }
        }
        self.gather(Rc::new(idx), out_shape)
    }
}
