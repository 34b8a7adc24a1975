//! Seeded random passive-looking instances for oracle testing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ChannelBlocks, CouplingSet, InstanceSource};
use crate::linalg::{from_diag, matmul, CMat, C64};
use crate::load::{LoadNetwork, ParamVector};

/// Shape of a synthetic instance: `Q` pairs, `K` elements per layer, `M` outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthDims {
    pub pairs: usize,
    pub k: usize,
    pub outputs: usize,
}

impl SynthDims {
    pub fn new(pairs: usize, k: usize, outputs: usize) -> Self {
        assert!(pairs > 0 && k > 0 && outputs > 0, "synthetic dimensions must be positive");
        Self { pairs, k, outputs }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthLoad {
    /// Phase-shifter two-ports with `|sin eta| >= 0.3`.
    Diagonal,
    /// Coupled affine load `B + sum_p sin(eta_p) C_p` per pair.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthOptions {
    /// Symmetrize every block (`W12 = W21^T`, symmetric self blocks and loads).
    pub reciprocal: bool,
    /// Force `W12 = 0`.
    pub unilateral: bool,
    pub load: SynthLoad,
    pub z0: f64,
    /// Diagonal-dominance margin of the assembled system.
    pub margin: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            reciprocal: false,
            unilateral: false,
            load: SynthLoad::Diagonal,
            z0: 1.0,
            margin: 1.0,
        }
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> CMat {
    CMat::from_fn(rows, cols, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
}

fn symmetrize(m: &CMat) -> CMat {
    (m + m.transpose()) * C64::new(0.5, 0.0)
}

/// `U diag(s) V` with random unitary `U, V` and `s` uniform in `[lo, hi]`,
/// so every singular value lies in `[lo, hi]`.
fn conditioned(rng: &mut ChaCha8Rng, k: usize, lo: f64, hi: f64) -> CMat {
    let u = random_matrix(rng, k, k).qr().q();
    let v = random_matrix(rng, k, k).qr().q();
    let s: Vec<C64> = (0..k).map(|_| C64::new(rng.gen_range(lo..hi), 0.0)).collect();
    matmul(&matmul(&u, &from_diag(&s)), &v)
}

fn sample_phase(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let eta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        if eta.sin().abs() >= 0.3 {
            return eta;
        }
    }
}

/// Random coupling set and load network, bit-for-bit reproducible per seed.
///
/// Every `W21` has singular values in `[0.5, 1.5]`; every `X21` has smallest
/// singular value at least `0.5`. The diagonals of the self blocks are then
/// raised until each row and column of `Z_EE + Z_E` is dominated by its
/// diagonal with the configured margin, which bounds the smallest singular
/// value of the assembled system from below by that margin.
pub fn synth_random_instance(dims: SynthDims, seed: u64, opts: &SynthOptions) -> (CouplingSet, LoadNetwork) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (q, k) = (dims.pairs, dims.k);
    let offdiag = |rng: &mut ChaCha8Rng| {
        let mut m = random_matrix(rng, k, k) * C64::new(0.5, 0.0);
        if opts.reciprocal {
            m = symmetrize(&m);
        }
        m.fill_diagonal(C64::new(0.0, 0.0));
        m
    };

    let mut w22_first = offdiag(&mut rng);
    let mut w11_last = offdiag(&mut rng);
    let mut channels: Vec<ChannelBlocks> = (1..q)
        .map(|_| {
            let w11 = offdiag(&mut rng);
            let w22 = offdiag(&mut rng);
            let w21 = conditioned(&mut rng, k, 0.5, 1.5);
            let w12 = if opts.unilateral {
                CMat::zeros(k, k)
            } else if opts.reciprocal {
                w21.transpose()
            } else {
                random_matrix(&mut rng, k, k) * C64::new(0.5, 0.0)
            };
            ChannelBlocks { w11, w12, w21, w22 }
        })
        .collect();

    let load = match opts.load {
        SynthLoad::Diagonal => {
            let values: Vec<f64> = (0..q * k).map(|_| sample_phase(&mut rng)).collect();
            let params = ParamVector::uniform(q, k, values, 0.0).expect("valid synthetic phases");
            LoadNetwork::assemble(params, opts.z0, 0.0).expect("valid synthetic load")
        }
        SynthLoad::Dense => {
            let mut base = Vec::with_capacity(q);
            let mut directions = Vec::with_capacity(q);
            for _ in 0..q {
                let mut b = random_matrix(&mut rng, 2 * k, 2 * k);
                let x21 = conditioned(&mut rng, k, 1.0, 2.0);
                b.view_mut((k, 0), (k, k)).copy_from(&x21);
                if opts.reciprocal {
                    b.view_mut((0, k), (k, k)).copy_from(&x21.transpose());
                    b = symmetrize(&b);
                }
                // Perturbations of X21 sum to spectral norm below 0.5.
                let scale = 0.25 / (k as f64 * k as f64);
                let dirs: Vec<CMat> = (0..k)
                    .map(|_| {
                        let c = random_matrix(&mut rng, 2 * k, 2 * k) * C64::new(scale, 0.0);
                        if opts.reciprocal {
                            symmetrize(&c)
                        } else {
                            c
                        }
                    })
                    .collect();
                base.push(b);
                directions.push(dirs);
            }
            let values: Vec<f64> = (0..q * k).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
            let params = ParamVector::unchecked(vec![k; q], values).expect("valid synthetic parameters");
            LoadNetwork::dense_affine(base, directions, params, opts.z0).expect("valid synthetic load")
        }
    };

    let z_re = random_matrix(&mut rng, dims.outputs, k);
    let z_et = random_matrix(&mut rng, k, k);
    let jitter: Vec<f64> = (0..2 * q * k).map(|_| rng.gen_range(0.0..1.0)).collect();

    let provisional = CouplingSet::new(
        w22_first.clone(),
        w11_last.clone(),
        channels.clone(),
        z_re.clone(),
        z_et.clone(),
        InstanceSource::Synthetic { seed },
    )
    .expect("consistent synthetic shapes");
    let system = provisional.assemble_full() + load.assemble_full();
    let n = system.nrows();
    let mut raise = vec![0.0; n];
    for i in 0..n {
        let row: f64 = (0..n).filter(|&j| j != i).map(|j| system[(i, j)].norm()).sum();
        let col: f64 = (0..n).filter(|&j| j != i).map(|j| system[(j, i)].norm()).sum();
        raise[i] = row.max(col) + opts.margin + system[(i, i)].norm() + jitter[i];
    }
    let mut set_diag = |m: &mut CMat, layer: usize| {
        for p in 0..k {
            m[(p, p)] = C64::new(raise[layer * k + p], rng.gen_range(-1.0..1.0));
        }
    };
    set_diag(&mut w22_first, 0);
    set_diag(&mut w11_last, 2 * q - 1);
    for (c, ch) in channels.iter_mut().enumerate() {
        set_diag(&mut ch.w11, 2 * c + 1);
        set_diag(&mut ch.w22, 2 * c + 2);
    }
    let set = CouplingSet::new(w22_first, w11_last, channels, z_re, z_et, InstanceSource::Synthetic { seed })
        .expect("consistent synthetic shapes");
    (set, load)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::singular_values;

    #[test]
    fn deterministic_per_seed() {
        let opts = SynthOptions::default();
        let (a, la) = synth_random_instance(SynthDims::new(3, 4, 2), 42, &opts);
        let (b, lb) = synth_random_instance(SynthDims::new(3, 4, 2), 42, &opts);
        assert_eq!(a.assemble_full(), b.assemble_full());
        assert_eq!(la.assemble_full(), lb.assemble_full());
        assert_eq!(a.z_re, b.z_re);
        let (c, _) = synth_random_instance(SynthDims::new(3, 4, 2), 43, &opts);
        assert_ne!(a.assemble_full(), c.assemble_full());
    }

    #[test]
    fn system_size() {
        let (set, load) = synth_random_instance(SynthDims::new(2, 3, 1), 0, &SynthOptions::default());
        assert_eq!((set.assemble_full() + load.assemble_full()).shape(), (12, 12));
    }

    #[test]
    fn smallest_singular_value_over_seeds() {
        for load in [SynthLoad::Diagonal, SynthLoad::Dense] {
            let opts = SynthOptions { load, ..Default::default() };
            for seed in 0..100 {
                let dims = SynthDims::new(1 + (seed as usize % 4), 1 + (seed as usize % 5), 2);
                let (set, l) = synth_random_instance(dims, seed, &opts);
                let s = singular_values(&(set.assemble_full() + l.assemble_full()));
                assert!(*s.last().unwrap() >= 0.1, "seed {seed}: {s:?}");
            }
        }
    }

    #[test]
    fn w21_and_x21_conditioning() {
        for load in [SynthLoad::Diagonal, SynthLoad::Dense] {
            let opts = SynthOptions { load, ..Default::default() };
            for seed in 0..20 {
                let (set, l) = synth_random_instance(SynthDims::new(3, 5, 2), seed, &opts);
                for ch in &set.channels {
                    assert!(*singular_values(&ch.w21).last().unwrap() >= 0.1);
                }
                for q in 0..3 {
                    assert!(*singular_values(&l.block(q, 1, 0).to_dense()).last().unwrap() >= 0.1);
                }
            }
        }
    }

    #[test]
    fn reciprocal_and_unilateral_flags() {
        let opts = SynthOptions {
            reciprocal: true,
            ..Default::default()
        };
        let (set, l) = synth_random_instance(SynthDims::new(3, 3, 2), 9, &opts);
        let z = set.assemble_full() + l.assemble_full();
        assert!((&z - z.transpose()).iter().all(|v| v.norm() == 0.0));
        let opts = SynthOptions {
            unilateral: true,
            ..Default::default()
        };
        let (set, _) = synth_random_instance(SynthDims::new(3, 3, 2), 9, &opts);
        assert!(set.is_unilateral());
    }
}
