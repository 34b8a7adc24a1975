//! Oracle suites run by `zsim verify`, sized to finish in a few minutes.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coupling::{synth_random_instance, CouplingSet, SynthDims, SynthLoad, SynthOptions};
use crate::error::{Result, SimError};
use crate::gradients::{
    fd_oracle4, grad_backprop, grad_dsim, grad_eco, grad_sim, ideal_objective, sim_objective, TaskInstance,
};
use crate::linalg::{from_diag, max_abs_diff, rel_frob_err, CMat, C64};
use crate::load::LoadNetwork;
use crate::transfer::{self, dense_t, ideal_cascade, iterative_strips, unilateral_t};

pub const SUITES: [&str; 5] = ["transfer", "unilateral", "ideal", "gradients", "scaling"];

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub checks: usize,
    /// Largest measured error; for `scaling` the worst exponent margin.
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl SuiteReport {
    fn new(name: &'static str, checks: usize, max_error: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name,
            checks,
            max_error,
            tolerance,
            passed: max_error <= tolerance,
            detail,
        }
    }

    fn also(mut self, ok: bool) -> Self {
        self.passed &= ok;
        self
    }

    pub fn line(&self) -> String {
        format!(
            "{:<10} {}  max error {:.3e} (tol {:.1e}, {} checks) {}",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.max_error,
            self.tolerance,
            self.checks,
            self.detail
        )
    }
}

/// Runs the named suite, or every suite for `all`.
pub fn run(selector: &str) -> Result<Vec<SuiteReport>> {
    let names: Vec<&str> = match selector {
        "all" => SUITES.to_vec(),
        s if SUITES.contains(&s) => vec![s],
        s => {
            return Err(SimError::InvalidValue(format!(
                "unknown suite `{s}` (expected all, {})",
                SUITES.join(", ")
            )))
        }
    };
    names
        .into_iter()
        .map(|n| match n {
            "transfer" => transfer_suite(40),
            "unilateral" => unilateral_suite(30),
            "ideal" => ideal_suite(20),
            "gradients" => gradient_suite(20),
            _ => scaling_suite(),
        })
        .collect()
}

fn dims(seed: u64, max_q: usize, max_k: usize) -> SynthDims {
    SynthDims::new(1 + seed as usize % max_q, 1 + (seed as usize / max_q) % max_k, 3)
}

pub fn transfer_suite(instances: u64) -> Result<SuiteReport> {
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for kind in [SynthLoad::Diagonal, SynthLoad::Dense] {
        let opts = SynthOptions {
            load: kind,
            ..Default::default()
        };
        for seed in 0..instances {
            let (set, load) = synth_random_instance(dims(seed, 4, 6), seed, &opts);
            let dense = dense_t(&set, &load)?.state;
            let it = iterative_strips(&set, &load)?;
            for r in 0..dense.layers() {
                worst = worst.max(rel_frob_err(&it.t[r], &dense.t[r]));
                worst = worst.max(rel_frob_err(&it.u[r], &dense.u[r]));
                checks += 2;
            }
        }
    }
    Ok(SuiteReport::new("transfer", checks, worst, 1e-10, "strips vs dense inverse".into()))
}

pub fn unilateral_suite(instances: u64) -> Result<SuiteReport> {
    let opts = SynthOptions {
        unilateral: true,
        ..Default::default()
    };
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for seed in 0..instances {
        let (set, load) = synth_random_instance(dims(seed, 4, 6), seed, &opts);
        let dense = dense_t(&set, &load)?.state;
        let uni = unilateral_t(&set, &load)?.state;
        for r in 0..dense.layers() {
            worst = worst.max(rel_frob_err(&uni.t[r], &dense.t[r]));
            worst = worst.max(rel_frob_err(&uni.u[r], &dense.u[r]));
            checks += 2;
        }
    }
    Ok(SuiteReport::new("unilateral", checks, worst, 1e-10, "W12 = 0 recursions vs dense".into()))
}

/// Idealized coupling on the same phases, matched at `z0`.
pub fn ideal_instance(pairs: usize, k: usize, seed: u64, z0: f64) -> (CouplingSet, LoadNetwork) {
    let (set, load) = synth_random_instance(SynthDims::new(pairs, k, 2), seed, &SynthOptions::default());
    let load = LoadNetwork::assemble(load.params().clone(), z0, 0.0).expect("synthetic phases are valid");
    (set.idealized(z0), load)
}

pub fn ideal_suite(instances: u64) -> Result<SuiteReport> {
    let z0 = 50.0;
    let mut chain: f64 = 0.0;
    let mut exact: f64 = 0.0;
    let mut checks = 0;
    for seed in 0..instances {
        let d = dims(seed, 4, 5);
        let (set, load) = ideal_instance(d.pairs, d.k, seed, z0);
        let uni = unilateral_t(&set, &load)?;
        let dense = dense_t(&set, &load)?.state;
        let cascade = ideal_cascade(&set.w21_list(), load.params(), z0)?;
        chain = chain
            .max(rel_frob_err(&uni.state.t[0], &cascade))
            .max(rel_frob_err(&dense.t[0], &cascade));
        let matched = CMat::identity(d.k, d.k) * C64::new(0.5 / z0, 0.0);
        for (q, (om, ph)) in uni.omega.iter().zip(&uni.phase).enumerate() {
            let expect: Vec<C64> = load.params().layer(q).iter().map(|&e| C64::from_polar(1.0, e)).collect();
            exact = exact.max(max_abs_diff(om, &matched)).max(max_abs_diff(ph, &from_diag(&expect)));
        }
        checks += 2 + 2 * d.pairs;
    }
    Ok(SuiteReport::new(
        "ideal",
        checks,
        chain,
        1e-10,
        format!("unilateral/dense/cascade; Omega and phase factor {exact:.2e} (tol 1e-12)"),
    )
    .also(exact <= 1e-12))
}

pub fn random_task(set: &CouplingSet, count: usize, rng: &mut ChaCha8Rng) -> TaskInstance {
    let mut c = || C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let inputs = CMat::from_fn(set.k(), count, |_, _| c());
    let targets = CMat::from_fn(set.outputs(), count, |_, _| c());
    let beta = c();
    TaskInstance::new(set.z_re.clone(), inputs, targets)
        .expect("consistent task shapes")
        .with_beta(beta)
}

/// `max_p |a_p - b_p| / max_p |b_p|`.
pub fn grad_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Worst `|a - b| / (rel max(|a|, |b|) + floor)`; at most 1 when every entry passes.
pub fn fd_ratio(a: &[f64], fd: &[f64], rel: f64, floor: f64) -> f64 {
    a.iter()
        .zip(fd)
        .map(|(x, y)| (x - y).abs() / (rel * x.abs().max(y.abs()) + floor))
        .fold(0.0, f64::max)
}

/// Step of the fourth-order stencil.
pub const FD_STEP: f64 = 1e-3;

pub fn gradient_suite(instances: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut chain: f64 = 0.0;
    let mut backprop: f64 = 0.0;
    let mut fd: f64 = 0.0;
    let mut checks = 0;
    for seed in 0..instances {
        let d = dims(seed, 3, 4);
        let (set, load) = synth_random_instance(d, seed, &SynthOptions::default());
        let task = random_task(&set, 2, &mut rng);
        let eco = grad_eco(&task, &set, &load)?.grad;
        let sim = grad_sim(&task, &set, &load)?.grad;
        let dsim = grad_dsim(&task, &set, &load)?.grad;
        chain = chain.max(grad_rel_err(&eco, &dsim)).max(grad_rel_err(&sim, &dsim));
        let x = load.params().values().to_vec();
        let num = fd_oracle4(|v| sim_objective(&task, &set, &load, v).expect("solvable"), &x, FD_STEP);
        fd = fd.max(fd_ratio(&dsim, &num, 1e-6, 1e-10));

        let (iset, iload) = ideal_instance(d.pairs, d.k, seed, 1.0);
        let bp = grad_backprop(&task, &iset.w21_list(), iload.params(), 1.0)?.grad;
        let ref_ = grad_dsim(&task, &iset, &iload)?.grad;
        backprop = backprop.max(grad_rel_err(&bp, &ref_));
        let x = iload.params().values().to_vec();
        let counts = iload.params().counts().to_vec();
        let w21 = iset.w21_list();
        let num = fd_oracle4(|v| ideal_objective(&task, &w21, &counts, v, 1.0).expect("valid"), &x, FD_STEP);
        fd = fd.max(fd_ratio(&bp, &num, 1e-6, 1e-10));
        checks += 6;
    }
    Ok(SuiteReport::new(
        "gradients",
        checks,
        chain,
        1e-10,
        format!("eco/sim/dsim; backprop {backprop:.2e} (tol 1e-8); FD error/bound {fd:.2e} (passes below 1)"),
    )
    .also(backprop <= 1e-8 && fd <= 1.0))
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Smallest wall time of `repeats` calls, in seconds.
pub fn min_time<F: FnMut() -> Result<()>>(repeats: usize, mut f: F) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..repeats {
        let t = Instant::now();
        f()?;
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// Timings of iterative strips plus the diagonal gradient over `pairs`.
pub fn time_layered(k: usize, pairs: &[usize], repeats: usize) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    pairs
        .iter()
        .map(|&q| {
            let (set, load) = synth_random_instance(SynthDims::new(q, k, 4), q as u64, &SynthOptions::default());
            let task = random_task(&set, k, &mut rng);
            min_time(repeats, || {
                let st = iterative_strips(&set, &load)?;
                std::hint::black_box(&st);
                std::hint::black_box(grad_dsim(&task, &set, &load)?);
                Ok(())
            })
        })
        .collect()
}

/// Timings of the dense inverse path over the same instances; returns `(N, seconds)`.
pub fn time_dense(k: usize, pairs: &[usize], repeats: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut n = Vec::new();
    let mut t = Vec::new();
    for &q in pairs {
        let (set, load) = synth_random_instance(SynthDims::new(q, k, 4), q as u64, &SynthOptions::default());
        n.push((2 * q * k) as f64);
        t.push(min_time(repeats, || {
            std::hint::black_box(transfer::dense_t(&set, &load)?);
            Ok(())
        })?);
    }
    Ok((n, t))
}

pub fn scaling_suite() -> Result<SuiteReport> {
    let pairs = [4, 8, 16, 32];
    let layered = time_layered(8, &pairs, 5)?;
    let q: Vec<f64> = pairs.iter().map(|&p| p as f64).collect();
    let slope_q = loglog_slope(&q, &layered);
    let (n, dense) = time_dense(8, &pairs, 3)?;
    let slope_n = loglog_slope(&n, &dense);
    // Margins are non-positive when both bounds hold.
    let margin = (slope_q - 1.4).max(2.5 - slope_n);
    Ok(SuiteReport::new(
        "scaling",
        2,
        margin,
        0.0,
        format!("layered exponent in Q {slope_q:.2} (<= 1.4), dense exponent in N {slope_n:.2} (>= 2.5)"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(2.5)).collect();
        assert!((loglog_slope(&x, &y) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn selector() {
        assert!(run("nope").is_err());
        let r = run("transfer").unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].name, "transfer");
        assert!(r[0].passed, "{}", r[0].line());
    }

    #[test]
    fn small_suites_pass() {
        for r in [unilateral_suite(6).unwrap(), ideal_suite(6).unwrap(), gradient_suite(4).unwrap()] {
            assert!(r.passed, "{}", r.line());
        }
    }

    #[test]
    fn fd_ratio_cases() {
        assert_eq!(fd_ratio(&[1.0], &[1.0], 1e-6, 1e-10), 0.0);
        assert!(fd_ratio(&[1.0], &[1.0 + 2e-6], 1e-6, 1e-10) > 1.0);
        assert!(fd_ratio(&[0.0], &[5e-11], 1e-6, 1e-10) < 1.0);
    }
}
