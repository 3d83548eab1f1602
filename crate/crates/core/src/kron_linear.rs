//! LoKr evaluated as a chain of small linear maps.
//!
//! With row-major vectorisation, `(C ⊗ M)·vec(X) = vec(C·X·Mᵀ)`. Each input
//! vector of length `u_q·v_q` is viewed as a `u_q × v_q` matrix `X`; the
//! right block is applied along `v_q`, `C` along `u_q`, and the result is
//! flattened in `(u_p, v_p)` order. The Kronecker product is never formed.
//!
//! Leading axes of the input are treated as a batch and iterated over.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `out (rows × cols) = x (rows × inner) · wᵀ` where `w` is `cols × inner`.
fn mul_transposed(
    x: &[f64],
    rows: usize,
    inner: usize,
    w: &[f64],
    cols: usize,
    macs: &mut u64,
) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let xi = &x[i * inner..(i + 1) * inner];
        for j in 0..cols {
            let wj = &w[j * inner..(j + 1) * inner];
            out[i * cols + j] = xi.iter().zip(wj).map(|(a, b)| a * b).sum();
        }
    }
    *macs += (rows * inner * cols) as u64;
    out
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

enum Right<'a> {
    Factored { up: &'a Tensor, down: &'a Tensor },
    Full(&'a Tensor),
}

impl Right<'_> {
    fn dims(&self) -> (usize, usize) {
        match self {
            Right::Factored { up, down } => (up.rows(), down.cols()),
            Right::Full(w) => (w.rows(), w.cols()),
        }
    }
}

fn run(c: &Tensor, right: Right<'_>, h: &Tensor, macs: &mut u64) -> Result<Tensor> {
    c.expect_rank("grouped_forward", 2)?;
    if let Right::Factored { up, down } = right {
        up.expect_rank("grouped_forward", 2)?;
        down.expect_rank("grouped_forward", 2)?;
        if up.cols() != down.rows() {
            return Err(Error::shape("grouped_forward", up.shape(), down.shape()));
        }
    }
    if let Right::Full(w) = right {
        w.expect_rank("grouped_forward", 2)?;
    }
    let (u_p, u_q) = (c.rows(), c.cols());
    let (v_p, v_q) = right.dims();
    let width = u_q * v_q;
    let last = *h.shape().last().expect("tensors have at least one axis");
    if last != width {
        return Err(Error::shape("grouped_forward", h.shape(), &[u_p * v_p, width]));
    }
    let batch = h.len() / width;
    let mut out = Vec::with_capacity(batch * u_p * v_p);
    for x in h.data().chunks_exact(width) {
        // (u_q, v_q) -> (u_q, v_p)
        let mapped = match right {
            Right::Factored { up, down } => {
                let r = down.rows();
                let t = mul_transposed(x, u_q, v_q, down.data(), r, macs);
                mul_transposed(&t, u_q, r, up.data(), v_p, macs)
            }
            Right::Full(w) => mul_transposed(x, u_q, v_q, w.data(), v_p, macs),
        };
        // (v_p, u_q) -> (v_p, u_p), then "vp up -> (up vp)"
        let swapped = transpose(&mapped, u_q, v_p);
        let mixed = mul_transposed(&swapped, v_p, u_q, c.data(), u_p, macs);
        out.extend(transpose(&mixed, v_p, u_p));
    }
    let mut shape = h.shape().to_vec();
    *shape.last_mut().expect("non-empty shape") = u_p * v_p;
    Ok(Tensor::from_parts(shape, out))
}

/// `(C ⊗ (B·A))·h` along the last axis of `h`.
pub fn grouped_forward(c: &Tensor, b: &Tensor, a: &Tensor, h: &Tensor) -> Result<Tensor> {
    grouped_forward_counted(c, b, a, h).map(|(y, _)| y)
}

/// `(C ⊗ W₂)·h` along the last axis of `h`.
pub fn grouped_forward_full(c: &Tensor, w2: &Tensor, h: &Tensor) -> Result<Tensor> {
    let mut macs = 0;
    run(c, Right::Full(w2), h, &mut macs)
}

/// [`grouped_forward`] plus the number of multiply-adds it performed.
pub fn grouped_forward_counted(
    c: &Tensor,
    b: &Tensor,
    a: &Tensor,
    h: &Tensor,
) -> Result<(Tensor, u64)> {
    let mut macs = 0;
    let y = run(c, Right::Factored { up: b, down: a }, h, &mut macs)?;
    Ok((y, macs))
}

/// Multiply-adds for the dense route: form `B·A`, form `C ⊗ (B·A)`, then
/// one matrix-vector product per batch row.
pub fn dense_forward_macs(
    (u_p, u_q): (usize, usize),
    (v_p, v_q): (usize, usize),
    r: usize,
    batch: usize,
) -> u64 {
    let product = v_p * r * v_q;
    let kron = u_p * u_q * v_p * v_q;
    let matvec = batch * u_p * v_p * u_q * v_q;
    (product + kron + matvec) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{kronecker, matmul};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense(c: &Tensor, b: &Tensor, a: &Tensor, h: &Tensor) -> Tensor {
        let k = kronecker(c, &matmul(b, a).unwrap()).unwrap();
        let rows = h.len() / k.cols();
        let hm = h.reshape(&[rows, k.cols()]).unwrap();
        matmul(&hm, &k.transpose().unwrap()).unwrap()
    }

    #[test]
    fn scalar_c_is_plain_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let a = Tensor::randn(&[2, 5], 1.0, &mut rng);
        let h = Tensor::randn(&[5], 1.0, &mut rng);
        let c = Tensor::from_rows(&[&[1.0]]);
        let y = grouped_forward(&c, &b, &a, &h).unwrap();
        let want = matmul(&matmul(&b, &a).unwrap(), &h.reshape(&[5, 1]).unwrap()).unwrap();
        assert!(y.reshape(&[4, 1]).unwrap().rel_frobenius_err(&want).unwrap() < 1e-12);
    }

    #[test]
    fn batched_example_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = Tensor::randn(&[2, 2], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let a = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let h = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let y = grouped_forward(&c, &b, &a, &h).unwrap();
        assert_eq!(y.shape(), &[4, 6]);
        assert!(y.rel_frobenius_err(&dense(&c, &b, &a, &h)).unwrap() < 1e-12);
    }

    #[test]
    fn zero_down_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let h = Tensor::randn(&[2, 15], 1.0, &mut rng);
        let y = grouped_forward(&c, &b, &Tensor::zeros(&[2, 5]), &h).unwrap();
        assert!(y.is_all_zero());
    }

    #[test]
    fn random_shape_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..30 {
            let (up, uq, vp, vq, r) = (
                rng.random_range(1..4),
                rng.random_range(1..4),
                rng.random_range(1..6),
                rng.random_range(1..6),
                rng.random_range(1..4),
            );
            let c = Tensor::randn(&[up, uq], 1.0, &mut rng);
            let b = Tensor::randn(&[vp, r], 1.0, &mut rng);
            let a = Tensor::randn(&[r, vq], 1.0, &mut rng);
            let h = Tensor::randn(&[2, 3, uq * vq], 1.0, &mut rng);
            let y = grouped_forward(&c, &b, &a, &h).unwrap();
            assert_eq!(y.shape(), &[2, 3, up * vp]);
            let want = dense(&c, &b, &a, &h);
            assert!(y.reshape(&[6, up * vp]).unwrap().rel_frobenius_err(&want).unwrap() < 1e-12);
        }
    }

    #[test]
    fn full_right_block_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let h = Tensor::randn(&[10], 1.0, &mut rng);
        let y = grouped_forward_full(&c, &w, &h).unwrap();
        let k = kronecker(&c, &w).unwrap();
        let want = matmul(&k, &h.reshape(&[10, 1]).unwrap()).unwrap();
        assert!(y.reshape(&[12, 1]).unwrap().rel_frobenius_err(&want).unwrap() < 1e-12);
    }

    #[test]
    fn grouped_uses_fewer_macs() {
        for &(u, v, r, n) in &[((2, 2), (3, 3), 2, 4), ((4, 4), (8, 8), 4, 1), ((2, 3), (5, 4), 1, 8)] {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let c = Tensor::randn(&[u.0, u.1], 1.0, &mut rng);
            let b = Tensor::randn(&[v.0, r], 1.0, &mut rng);
            let a = Tensor::randn(&[r, v.1], 1.0, &mut rng);
            let h = Tensor::randn(&[n, u.1 * v.1], 1.0, &mut rng);
            let (_, macs) = grouped_forward_counted(&c, &b, &a, &h).unwrap();
            assert!(macs < dense_forward_macs(u, v, r, n), "{macs}");
        }
    }

    #[test]
    fn extent_mismatch_is_rejected() {
        let c = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[3, 1]);
        let a = Tensor::zeros(&[1, 3]);
        assert!(grouped_forward(&c, &b, &a, &Tensor::zeros(&[5])).is_err());
        assert!(grouped_forward(&c, &b, &Tensor::zeros(&[2, 3]), &Tensor::zeros(&[6])).is_err());
    }
}
