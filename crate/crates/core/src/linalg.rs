//! Dense complex matrix helpers shared by every module.
//!
//! Matrices are `nalgebra::DMatrix<Complex64>` (column-major, interleaved
//! `re, im` doubles). Products of non-trivial size go through the SIMD
//! `zgemm` kernel of `matrixmultiply`; factorizations use nalgebra's
//! partially pivoted LU.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Result, SimError};

pub type C64 = Complex64;

/// Dense complex matrix, the numeric carrier of every impedance and transfer block.
pub type CMat = DMatrix<C64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const J: C64 = C64::new(0.0, 1.0);

/// `a * b` through the blocked complex GEMM kernel.
pub fn matmul(a: &CMat, b: &CMat) -> CMat {
    let mut c = CMat::zeros(a.nrows(), b.ncols());
    gemm_into(ONE, a, b, ZERO, &mut c);
    c
}

/// `c = alpha * a * b + beta * c`.
pub fn gemm_into(alpha: C64, a: &CMat, b: &CMat, beta: C64, c: &mut CMat) {
    assert_eq!(a.ncols(), b.nrows(), "inner dimensions differ");
    assert_eq!(c.nrows(), a.nrows());
    assert_eq!(c.ncols(), b.ncols());
    let (m, k, n) = (a.nrows(), a.ncols(), b.ncols());
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.scale_mut(0.0);
        return;
    }
    // SAFETY: `Complex<f64>` is `repr(C)` with layout `[re, im]`, identical to
    // `[f64; 2]`. The matrices are contiguous column-major buffers with the
    // strides passed below, and `c` does not alias `a` or `b` (it is borrowed
    // mutably while they are borrowed shared).
    unsafe {
        matrixmultiply::zgemm(
            matrixmultiply::CGemmOption::Standard,
            matrixmultiply::CGemmOption::Standard,
            m,
            k,
            n,
            [alpha.re, alpha.im],
            a.as_ptr() as *const [f64; 2],
            1,
            m as isize,
            b.as_ptr() as *const [f64; 2],
            1,
            k as isize,
            [beta.re, beta.im],
            c.as_mut_ptr() as *mut [f64; 2],
            1,
            m as isize,
        );
    }
}

/// `m * diag(d)`: scales column `j` by `d[j]`.
pub fn mul_diag_right(m: &CMat, d: &[C64]) -> CMat {
    let mut out = m.clone();
    scale_columns(&mut out, d);
    out
}

pub fn scale_columns(m: &mut CMat, d: &[C64]) {
    debug_assert_eq!(m.ncols(), d.len());
    for (j, mut col) in m.column_iter_mut().enumerate() {
        col *= d[j];
    }
}

/// `diag(d) * m`: scales row `i` by `d[i]`.
pub fn mul_diag_left(d: &[C64], m: &CMat) -> CMat {
    let mut out = m.clone();
    scale_rows(&mut out, d);
    out
}

pub fn scale_rows(m: &mut CMat, d: &[C64]) {
    debug_assert_eq!(m.nrows(), d.len());
    for mut col in m.column_iter_mut() {
        for (x, s) in col.iter_mut().zip(d) {
            *x *= *s;
        }
    }
}

pub fn from_diag(d: &[C64]) -> CMat {
    let mut m = CMat::zeros(d.len(), d.len());
    for (i, v) in d.iter().enumerate() {
        m[(i, i)] = *v;
    }
    m
}

/// `m + diag(d)` for square `m`.
pub fn add_diag(m: &CMat, d: &[C64]) -> CMat {
    let mut out = m.clone();
    for (i, v) in d.iter().enumerate() {
        out[(i, i)] += *v;
    }
    out
}

/// Maximum absolute column sum.
pub fn norm1(m: &CMat) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Maximum absolute row sum.
pub fn norm_inf(m: &CMat) -> f64 {
    (0..m.nrows())
        .map(|i| m.row(i).iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn frob(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// `||a - b||_F / max(||b||_F, tiny)`.
pub fn rel_frob_err(a: &CMat, b: &CMat) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let diff = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm_sqr())
        .sum::<f64>()
        .sqrt();
    diff / frob(b).max(f64::MIN_POSITIVE)
}

pub fn max_abs_diff(a: &CMat, b: &CMat) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}

pub fn all_finite(m: &CMat) -> bool {
    m.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

/// Explicit inverse via pivoted LU, with the 1-norm reciprocal condition number.
pub fn inverse_with_rcond(m: &CMat) -> Option<(CMat, f64)> {
    debug_assert!(m.is_square());
    let n = m.nrows();
    let lu = m.clone().lu();
    let inv = lu.solve(&CMat::identity(n, n))?;
    if !all_finite(&inv) {
        return None;
    }
    let rcond = 1.0 / (norm1(m) * norm1(&inv));
    Some((inv, rcond))
}

/// Reciprocal condition of a diagonal matrix, `min|d| / max|d|`.
pub fn diag_rcond(d: &[C64]) -> f64 {
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for z in d {
        let a = z.norm();
        lo = lo.min(a);
        hi = hi.max(a);
    }
    if hi == 0.0 {
        0.0
    } else {
        lo / hi
    }
}

/// Singular values, descending.
pub fn singular_values(m: &CMat) -> Vec<f64> {
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub fn trace(m: &CMat) -> C64 {
    m.diagonal().iter().sum()
}

/// Serializes a matrix: header `rows cols`, then one line per row of `re im` pairs.
pub fn format_matrix(m: &CMat) -> String {
    let mut s = String::with_capacity(m.len() * 48 + 16);
    let _ = writeln!(s, "{} {}", m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let z = m[(i, j)];
            if j > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{:e} {:e}", z.re, z.im);
        }
        s.push('\n');
    }
    s
}

pub fn parse_matrix(text: &str, origin: &Path) -> Result<CMat> {
    let err = |message: String| SimError::Parse {
        file: origin.to_path_buf(),
        message,
    };
    let mut tokens = text.split_whitespace();
    let mut next_usize = |what: &str| -> Result<usize> {
        let t = tokens.next().ok_or_else(|| err(format!("missing {what}")))?;
        t.parse::<usize>()
            .map_err(|e| err(format!("bad {what} `{t}`: {e}")))
    };
    let rows = next_usize("row count")?;
    let cols = next_usize("column count")?;
    if rows == 0 || cols == 0 {
        return Err(err("matrix dimensions must be positive".into()));
    }
    let values: Vec<f64> = tokens
        .map(|t| t.parse::<f64>().map_err(|e| err(format!("bad number `{t}`: {e}"))))
        .collect::<Result<_>>()?;
    if values.len() != 2 * rows * cols {
        return Err(err(format!(
            "expected {} numbers for a {rows}x{cols} matrix, found {}",
            2 * rows * cols,
            values.len()
        )));
    }
    let m = CMat::from_fn(rows, cols, |i, j| {
        let at = 2 * (i * cols + j);
        C64::new(values[at], values[at + 1])
    });
    if !all_finite(&m) {
        return Err(err("non-finite entry".into()));
    }
    Ok(m)
}

pub fn write_matrix(path: &Path, m: &CMat) -> Result<()> {
    fs::write(path, format_matrix(m)).map_err(|e| SimError::io(format!("writing {}", path.display()), e))
}

pub fn read_matrix(path: &Path) -> Result<CMat> {
    let text = fs::read_to_string(path).map_err(|e| SimError::io(format!("reading {}", path.display()), e))?;
    parse_matrix(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive(a: &CMat, b: &CMat) -> CMat {
        CMat::from_fn(a.nrows(), b.ncols(), |i, j| {
            (0..a.ncols()).map(|k| a[(i, k)] * b[(k, j)]).sum()
        })
    }

    fn test_mat(r: usize, c: usize, s: f64) -> CMat {
        CMat::from_fn(r, c, |i, j| C64::new((i as f64 * 0.37 + j as f64 * s).sin(), (i as f64 * s - j as f64).cos()))
    }

    #[test]
    fn zgemm_matches_naive_product() {
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 2), (17, 9, 33), (64, 64, 64)] {
            let a = test_mat(m, k, 0.3);
            let b = test_mat(k, n, 1.1);
            assert!(max_abs_diff(&matmul(&a, &b), &naive(&a, &b)) < 1e-12);
        }
    }

    #[test]
    fn gemm_accumulates() {
        let a = test_mat(4, 3, 0.2);
        let b = test_mat(3, 5, 0.7);
        let mut c = test_mat(4, 5, 0.1);
        let expected = naive(&a, &b) * C64::new(2.0, -1.0) + &c * J;
        gemm_into(C64::new(2.0, -1.0), &a, &b, J, &mut c);
        assert!(max_abs_diff(&c, &expected) < 1e-12);
    }

    #[test]
    fn inverse_of_singular_is_rejected_or_flagged() {
        let mut m = test_mat(3, 3, 0.5);
        let row = m.row(0).into_owned();
        m.set_row(2, &row);
        match inverse_with_rcond(&m) {
            None => {}
            Some((_, rcond)) => assert!(rcond < 1e-12),
        }
    }

    #[test]
    fn parse_rejects_wrong_count() {
        let e = parse_matrix("2 2\n1 0 0 0\n0 0", Path::new("x")).unwrap_err();
        assert!(matches!(e, SimError::Parse { .. }));
    }

    proptest! {
        #[test]
        fn text_format_round_trips_bit_exact(
            rows in 1usize..5, cols in 1usize..5,
            seed in proptest::collection::vec(-1e6f64..1e6, 50)
        ) {
            let m = CMat::from_fn(rows, cols, |i, j| {
                let at = (i * cols + j) * 2;
                C64::new(seed[at % 50] * 1.0e-3_f64.powi((i % 3) as i32), seed[(at + 1) % 50])
            });
            let back = parse_matrix(&format_matrix(&m), Path::new("mem")).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
