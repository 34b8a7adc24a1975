//! Globally adaptive Gauss-Kronrod (7/15) quadrature for complex integrands.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Result, SimError};
use crate::linalg::C64;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];

// Gauss weights for the odd-indexed Kronrod nodes 1, 3, 5, 7.
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

const MAX_INTERVALS: usize = 4000;

fn gk15<F: Fn(f64) -> C64>(f: &F, a: f64, b: f64) -> (C64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = half * XGK[j];
        let pair = f(center - dx) + f(center + dx);
        kronrod += pair * WGK[j];
        if j % 2 == 1 {
            gauss += pair * WG[j / 2];
        }
    }
    let err = ((kronrod - gauss) * half).norm();
    (kronrod * half, err)
}

struct Piece {
    a: f64,
    b: f64,
    value: C64,
    err: f64,
}

impl PartialEq for Piece {
    fn eq(&self, other: &Self) -> bool {
        self.err == other.err
    }
}
impl Eq for Piece {}
impl PartialOrd for Piece {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Piece {
    fn cmp(&self, other: &Self) -> Ordering {
        self.err.total_cmp(&other.err)
    }
}

/// Integrates `f` over the union of `[breaks[i], breaks[i+1]]`, bisecting the
/// interval with the largest error estimate until the total estimate drops
/// below `abs_tol`.
pub fn integrate<F: Fn(f64) -> C64>(f: F, breaks: &[f64], abs_tol: f64) -> Result<C64> {
    let mut heap = BinaryHeap::new();
    for w in breaks.windows(2) {
        if w[1] > w[0] {
            let (value, err) = gk15(&f, w[0], w[1]);
            heap.push(Piece { a: w[0], b: w[1], value, err });
        }
    }
    loop {
        let total_err: f64 = heap.iter().map(|p| p.err).sum();
        if total_err <= abs_tol {
            break;
        }
        if heap.len() >= MAX_INTERVALS {
            return Err(SimError::IntegrationFailure { error: total_err });
        }
        let worst = heap.pop().expect("non-empty interval set");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            return Err(SimError::IntegrationFailure { error: total_err });
        }
        for (a, b) in [(worst.a, mid), (mid, worst.b)] {
            let (value, err) = gk15(&f, a, b);
            heap.push(Piece { a, b, value, err });
        }
    }
    // Sum in interval order so the result is independent of heap layout.
    let mut pieces = heap.into_vec();
    pieces.sort_by(|x, y| x.a.total_cmp(&y.a));
    Ok(pieces.iter().map(|p| p.value).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_exact() {
        let v = integrate(|x| C64::new(x.powi(6), 3.0 * x * x), &[0.0, 2.0], 1e-14).unwrap();
        assert!((v.re - 128.0 / 7.0).abs() < 1e-12);
        assert!((v.im - 8.0).abs() < 1e-12);
    }

    #[test]
    fn oscillatory_complex_exponential() {
        // integral of e^{j 40 x} on [0, 1]
        let exact = (C64::new(0.0, 40.0).exp() - 1.0) / C64::new(0.0, 40.0);
        let v = integrate(|x| C64::new(0.0, 40.0 * x).exp(), &[0.0, 1.0], 1e-12).unwrap();
        assert!((v - exact).norm() < 1e-12);
    }

    #[test]
    fn near_singular_peak() {
        // integral of 1/sqrt(a^2 + x^2) on [-1, 1] = 2 asinh(1/a)
        let a = 1e-3;
        let v = integrate(|x| C64::new(1.0 / (a * a + x * x).sqrt(), 0.0), &[-1.0, 0.0, 1.0], 1e-10).unwrap();
        assert!((v.re - 2.0 * (1.0 / a).asinh()).abs() < 1e-10);
    }
}
