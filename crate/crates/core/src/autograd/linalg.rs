use super::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `c = op(a) · op(b) + beta · c` for row-major `op(a)` (m×k) and `op(b)`
/// (k×n). With `a_t` the slice `a` holds the k×m transpose, likewise `b_t`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above bound every index the kernel touches given
    // these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Triple-loop product used to check the optimized kernel.
pub fn matmul_reference(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(Error::shape("matmul_reference takes rank-2 operands"));
    };
    if k != k2 {
        return Err(Error::shape(format!("inner extents {k} and {k2} differ")));
    }
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.data()[i * k + p] * b.data()[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    Tensor::new(vec![m, n], c)
}

struct Dims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

fn dims(a: &[usize], b: &[usize], b_t: bool) -> Result<Dims> {
    let (batch, am, ak, bb) = match (a, b) {
        ([m, k], [_, _]) => (1, *m, *k, &b[..]),
        ([ba, m, k], [bb_, _, _]) if ba == bb_ => (*ba, *m, *k, &b[1..]),
        _ => {
            return Err(Error::shape(format!(
            "matmul operands must both be rank 2 or rank 3 with equal batch, got {a:?} and {b:?}"
        )))
        }
    };
    let (bk, bn) = if b_t { (bb[1], bb[0]) } else { (bb[0], bb[1]) };
    if ak != bk {
        return Err(Error::shape(format!(
            "matmul inner extents differ: {a:?} x {b:?}"
        )));
    }
    Ok(Dims {
        batch,
        m: am,
        k: ak,
        n: bn,
    })
}

fn matmul_impl(a: &Var, b: &Var, b_t: bool) -> Result<Var> {
    let Dims { batch, m, k, n } = dims(a.shape(), b.shape(), b_t)?;
    let mut out = vec![0.0; batch * m * n];
    let (ad, bd) = (a.value().data(), b.value().data());
    for i in 0..batch {
        gemm(
            m,
            k,
            n,
            &ad[i * m * k..],
            false,
            &bd[i * k * n..],
            b_t,
            0.0,
            &mut out[i * m * n..],
        );
    }
    a.tape().add_macs((batch * m * k * n) as u64);
    let shape = if a.shape().len() == 3 {
        vec![batch, m, n]
    } else {
        vec![m, n]
    };
    let (ra, rb) = (a.rc(), b.rc());
    a.tape().record(
        "matmul",
        Tensor::from_parts(shape, out),
        &[a, b],
        move |g, needs| {
            let gd = g.data();
            let ga = needs[0].then(|| {
                // dA = G · op(B)^T
                let mut v = vec![0.0; batch * m * k];
                for i in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        &gd[i * m * n..],
                        false,
                        &rb.data()[i * k * n..],
                        !b_t,
                        0.0,
                        &mut v[i * m * k..],
                    );
                }
                Tensor::from_parts(ra.shape().to_vec(), v)
            });
            let gb = needs[1].then(|| {
                let mut v = vec![0.0; batch * k * n];
                for i in 0..batch {
                    if b_t {
                        // B is n×k: dB = G^T · A
                        gemm(
                            n,
                            m,
                            k,
                            &gd[i * m * n..],
                            true,
                            &ra.data()[i * m * k..],
                            false,
                            0.0,
                            &mut v[i * k * n..],
                        );
                    } else {
                        // dB = A^T · G
                        gemm(
                            k,
                            m,
                            n,
                            &ra.data()[i * m * k..],
                            true,
                            &gd[i * m * n..],
                            false,
                            0.0,
                            &mut v[i * k * n..],
                        );
                    }
                }
                Tensor::from_parts(rb.shape().to_vec(), v)
            });
            vec![ga, gb]
        },
    )
}

impl Var {
    /// Matrix product of rank-2 operands, or batched over a shared leading axis.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        matmul_impl(self, other, false)
    }

    /// `self · otherᵀ` (transposing the last two axes of `other`).
    pub fn matmul_t(&self, other: &Var) -> Result<Var> {
        matmul_impl(self, other, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use rand::SeedableRng;

    #[test]
    fn identity_and_small_products() {
        let t = Tape::new();
        let i2 = t.constant(Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap());
        let m = t.constant(Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap());
        assert_eq!(i2.matmul(&m).unwrap().value().data(), &[1., 2., 3., 4.]);
        let r = t.constant(Tensor::new(vec![1, 2], vec![1., 0.]).unwrap());
        let c = t.constant(Tensor::new(vec![2, 1], vec![2., 3.]).unwrap());
        let p = r.matmul(&c).unwrap();
        assert_eq!(p.shape(), &[1, 1]);
        assert_eq!(p.value().data(), &[2.]);
    }

    #[test]
    fn matches_triple_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[3, 5], -1.0, 1.0, &mut rng);
        let t = Tape::new();
        let fast = t
            .constant(a.clone())
            .matmul(&t.constant(b.clone()))
            .unwrap();
        let slow = matmul_reference(&a, &b).unwrap();
        assert!(fast.value().max_abs_diff(&slow) < 1e-14);
    }

    #[test]
    fn transposed_variant_agrees() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let t = Tape::new();
        let a = t.constant(Tensor::uniform(&[2, 4, 3], -1.0, 1.0, &mut rng));
        let b = Tensor::uniform(&[2, 5, 3], -1.0, 1.0, &mut rng);
        let mut bt = vec![0.0; 30];
        for bi in 0..2 {
            for i in 0..5 {
                for j in 0..3 {
                    bt[bi * 15 + j * 5 + i] = b.data()[bi * 15 + i * 3 + j];
                }
            }
        }
        let bt = t.constant(Tensor::new(vec![2, 3, 5], bt).unwrap());
        let x = a.matmul_t(&t.constant(b)).unwrap();
        let y = a.matmul(&bt).unwrap();
        assert!(x.value().max_abs_diff(y.value()) < 1e-14);
    }

    #[test]
    fn mismatch_is_error() {
        let t = Tape::new();
        let a = t.constant(Tensor::ones(&[2, 3]));
        assert!(a.matmul(&a).is_err());
        assert!(a.matmul_t(&a).is_ok());
    }
}
