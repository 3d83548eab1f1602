use super::Tensor;
use crate::error::{Error, Result};

/// Standard matrix product of a `p×r` and an `r×q` matrix.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank("matmul", 2)?;
    b.expect_rank("matmul", 2)?;
    let (p, r) = (a.shape[0], a.shape[1]);
    let (r2, q) = (b.shape[0], b.shape[1]);
    if r != r2 {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let mut out = vec![0.0; p * q];
    for i in 0..p {
        let row = &mut out[i * q..(i + 1) * q];
        for k in 0..r {
            let aik = a.data[i * r + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * q..(k + 1) * q];
            for (o, &bkj) in row.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Ok(Tensor::from_parts(vec![p, q], out))
}

pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_with("hadamard", b, |x, y| x * y)
}

/// Kronecker product: block `(i, j)` of the result is `a[i, j] * b`.
pub fn kronecker(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank("kronecker", 2)?;
    b.expect_rank("kronecker", 2)?;
    let (up, uq) = (a.shape[0], a.shape[1]);
    let (vp, vq) = (b.shape[0], b.shape[1]);
    let cols = uq * vq;
    let mut out = vec![0.0; up * vp * cols];
    for i in 0..up {
        for j in 0..uq {
            let aij = a.data[i * uq + j];
            for k in 0..vp {
                let dst = (i * vp + k) * cols + j * vq;
                let src = &b.data[k * vq..(k + 1) * vq];
                for (o, &bkl) in out[dst..dst + vq].iter_mut().zip(src) {
                    *o = aij * bkl;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![up * vp, cols], out))
}

/// Mode-`mode` product `t ×_mode m` for `m` of shape `i_n × j_n`:
/// `out[.., j, ..] = Σ_i t[.., i, ..] · m[i, j]`. The extent at `mode`
/// changes from `i_n` to `j_n`; all other axes are carried through.
pub fn nmode_product(t: &Tensor, m: &Tensor, mode: usize) -> Result<Tensor> {
    m.expect_rank("nmode_product", 2)?;
    if mode >= t.ndim() {
        return Err(Error::invalid(format!(
            "nmode_product: mode {mode} out of range for rank-{} tensor",
            t.ndim()
        )));
    }
    let extent = t.shape[mode];
    if m.shape[0] != extent {
        return Err(Error::shape("nmode_product", &t.shape, &m.shape));
    }
    let out_extent = m.shape[1];
    let outer: usize = t.shape[..mode].iter().product();
    let inner: usize = t.shape[mode + 1..].iter().product();
    let mut out = vec![0.0; outer * out_extent * inner];
    for o in 0..outer {
        for i in 0..extent {
            let src = &t.data[(o * extent + i) * inner..(o * extent + i + 1) * inner];
            for j in 0..out_extent {
                let mij = m.data[i * out_extent + j];
                if mij == 0.0 {
                    continue;
                }
                let dst = &mut out[(o * out_extent + j) * inner..(o * out_extent + j + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s * mij;
                }
            }
        }
    }
    let mut shape = t.shape.clone();
    shape[mode] = out_extent;
    Ok(Tensor::from_parts(shape, out))
}

/// Mode-`mode` unfolding: a `shape[mode] × (Π other extents)` matrix whose
/// columns enumerate the remaining axes in their original order.
pub fn mode_unfold(t: &Tensor, mode: usize) -> Result<Tensor> {
    if mode >= t.ndim() {
        return Err(Error::invalid(format!(
            "mode_unfold: mode {mode} out of range for rank-{} tensor",
            t.ndim()
        )));
    }
    let extent = t.shape[mode];
    let outer: usize = t.shape[..mode].iter().product();
    let inner: usize = t.shape[mode + 1..].iter().product();
    let cols = outer * inner;
    let mut out = vec![0.0; extent * cols];
    for o in 0..outer {
        for i in 0..extent {
            let src = &t.data[(o * extent + i) * inner..(o * extent + i + 1) * inner];
            out[i * cols + o * inner..i * cols + (o + 1) * inner].copy_from_slice(src);
        }
    }
    Ok(Tensor::from_parts(vec![extent, cols], out))
}

/// Row-major vectorization: stacks the rows of a matrix.
pub fn vec_rowmajor(m: &Tensor) -> Result<Tensor> {
    m.expect_rank("vec_rowmajor", 2)?;
    Ok(Tensor::from_parts(vec![m.len()], m.data.clone()))
}

/// Inverse of [`vec_rowmajor`]: fills `rows` rows with consecutive elements.
pub fn unvec(v: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    v.expect_rank("unvec", 1)?;
    if rows == 0 || cols == 0 || rows * cols != v.len() {
        return Err(Error::shape("unvec", &v.shape, &[rows, cols]));
    }
    Ok(Tensor::from_parts(vec![rows, cols], v.data.clone()))
}

/// `out×in×k×k` kernel to `out×(in·k²)` matrix.
pub fn unroll_conv(k: &Tensor) -> Result<Tensor> {
    k.expect_rank("unroll_conv", 4)?;
    if k.shape[2] != k.shape[3] {
        return Err(Error::invalid(format!(
            "unroll_conv: kernel must be square, got {:?}",
            k.shape
        )));
    }
    let out = k.shape[0];
    Ok(Tensor::from_parts(vec![out, k.len() / out], k.data.clone()))
}

/// Inverse of [`unroll_conv`].
pub fn reroll_conv(m: &Tensor, in_channels: usize, kernel: usize) -> Result<Tensor> {
    m.expect_rank("reroll_conv", 2)?;
    if in_channels == 0 || kernel == 0 || m.shape[1] != in_channels * kernel * kernel {
        return Err(Error::shape(
            "reroll_conv",
            &m.shape,
            &[m.shape[0], in_channels, kernel, kernel],
        ));
    }
    Ok(Tensor::from_parts(
        vec![m.shape[0], in_channels, kernel, kernel],
        m.data.clone(),
    ))
}

/// Valid cross-correlation, stride 1, no padding:
/// `out[o, y, x] = Σ_{i,a,b} k[o, i, a, b] · x[i, y+a, x+b]`.
pub fn conv2d(kernel: &Tensor, x: &Tensor) -> Result<Tensor> {
    kernel.expect_rank("conv2d", 4)?;
    x.expect_rank("conv2d", 3)?;
    let (co, ci, kh, kw) = (
        kernel.shape[0],
        kernel.shape[1],
        kernel.shape[2],
        kernel.shape[3],
    );
    let (xi, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    if ci != xi {
        return Err(Error::shape("conv2d", &kernel.shape, &x.shape));
    }
    if h < kh || w < kw {
        return Err(Error::invalid(format!(
            "conv2d: input {:?} smaller than kernel {kh}×{kw}",
            x.shape
        )));
    }
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        let dst = &mut out[o * oh * ow..(o + 1) * oh * ow];
        for i in 0..ci {
            for a in 0..kh {
                for b in 0..kw {
                    let kv = kernel.data[((o * ci + i) * kh + a) * kw + b];
                    if kv == 0.0 {
                        continue;
                    }
                    for y in 0..oh {
                        let src = &x.data[(i * h + y + a) * w + b..(i * h + y + a) * w + b + ow];
                        for (d, &s) in dst[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                            *d += kv * s;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![co, oh, ow], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn matmul_examples() {
        let x = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::eye(2), &x).unwrap(), x);

        let col = m(&[&[1.0], &[0.0]]);
        let row = m(&[&[0.0, 1.0]]);
        assert_eq!(
            matmul(&col, &row).unwrap(),
            m(&[&[0.0, 1.0], &[0.0, 0.0]])
        );

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let any = Tensor::randn(&[2, 5], 1.0, &mut rng);
        assert_eq!(
            matmul(&Tensor::zeros(&[3, 2]), &any).unwrap(),
            Tensor::zeros(&[3, 5])
        );
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn hadamard_examples() {
        let x = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(hadamard(&x, &Tensor::ones(&[2, 2])).unwrap(), x);
        assert_eq!(
            hadamard(&x, &Tensor::zeros(&[2, 2])).unwrap(),
            Tensor::zeros(&[2, 2])
        );
        assert_eq!(
            hadamard(&x, &m(&[&[2.0, 3.0], &[4.0, 5.0]])).unwrap(),
            m(&[&[2.0, 6.0], &[12.0, 20.0]])
        );
        assert!(hadamard(&x, &Tensor::ones(&[4])).is_err());
    }

    #[test]
    fn kronecker_examples() {
        let x = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let expected = m(&[
            &[1.0, 0.0, 2.0, 0.0],
            &[0.0, 1.0, 0.0, 2.0],
            &[3.0, 0.0, 4.0, 0.0],
            &[0.0, 3.0, 0.0, 4.0],
        ]);
        assert_eq!(kronecker(&x, &Tensor::eye(2)).unwrap(), expected);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = Tensor::randn(&[3, 4], 1.0, &mut rng);
        assert_eq!(kronecker(&m(&[&[2.5]]), &b).unwrap(), b.scale(2.5));

        assert!(kronecker(&Tensor::ones(&[2]), &b).is_err());
    }

    #[test]
    fn nmode_identity_and_matrix_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        for mode in 0..3 {
            let n = t.shape()[mode];
            assert_eq!(nmode_product(&t, &Tensor::eye(n), mode).unwrap(), t);
        }

        // Rank-2: mode-0 product with M (2×3) equals Mᵀ·T.
        let t2 = Tensor::randn(&[2, 2], 1.0, &mut rng);
        let mm = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let got = nmode_product(&t2, &mm, 0).unwrap();
        let want = matmul(&mm.transpose().unwrap(), &t2).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() < 1e-14);
    }

    #[test]
    fn nmode_commutes_across_distinct_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = Tensor::randn(&[3, 4, 2, 2], 1.0, &mut rng);
        let a = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let ab = nmode_product(&nmode_product(&t, &a, 0).unwrap(), &b, 1).unwrap();
        let ba = nmode_product(&nmode_product(&t, &b, 1).unwrap(), &a, 0).unwrap();
        assert_eq!(ab.shape(), &[5, 6, 2, 2]);
        assert!(ab.max_abs_diff(&ba).unwrap() < 1e-12);
    }

    #[test]
    fn nmode_errors() {
        let t = Tensor::zeros(&[2, 3]);
        assert!(nmode_product(&t, &Tensor::eye(2), 2).is_err());
        assert!(nmode_product(&t, &Tensor::eye(2), 1).is_err());
    }

    #[test]
    fn mode_unfold_matches_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let u = mode_unfold(&t, 1).unwrap();
        assert_eq!(u.shape(), &[3, 8]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(u.at(b, a * 4 + c), t.data()[(a * 3 + b) * 4 + c]);
                }
            }
        }
    }

    #[test]
    fn vec_unvec_examples() {
        let x = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(vec_rowmajor(&x).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        let v = Tensor::vector(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(unvec(&v, 2, 2).unwrap(), x);
        assert!(unvec(&v, 3, 2).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let r = Tensor::randn(&[5, 7], 1.0, &mut rng);
        assert_eq!(unvec(&vec_rowmajor(&r).unwrap(), 5, 7).unwrap(), r);
    }

    #[test]
    fn unroll_reroll() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng);
        let u = unroll_conv(&k).unwrap();
        assert_eq!(u.shape(), &[4, 27]);
        assert_eq!(reroll_conv(&u, 3, 3).unwrap(), k);

        let k1 = Tensor::randn(&[4, 3, 1, 1], 1.0, &mut rng);
        let u1 = unroll_conv(&k1).unwrap();
        for o in 0..4 {
            for i in 0..3 {
                assert_eq!(u1.at(o, i), k1.data()[o * 3 + i]);
            }
        }
        assert!(unroll_conv(&Tensor::zeros(&[2, 2])).is_err());
        assert!(unroll_conv(&Tensor::zeros(&[2, 2, 3, 1])).is_err());
    }

    #[test]
    fn conv2d_examples() {
        let k = Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let x = Tensor::new(&[1, 1, 1], vec![3.0]).unwrap();
        assert_eq!(conv2d(&k, &x).unwrap().data(), &[6.0]);

        let ones = Tensor::ones(&[1, 1, 2, 2]);
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = conv2d(&ones, &x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::randn(&[3, 4, 5], 1.0, &mut rng);
        let id = Tensor::eye(3).reshape(&[3, 3, 1, 1]).unwrap();
        assert_eq!(conv2d(&id, &x).unwrap(), x);

        assert!(conv2d(&Tensor::zeros(&[1, 3, 5, 5]), &x).is_err());
    }
}
