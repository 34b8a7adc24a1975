//! Property tests of cross-module invariants on seeded random instances.

use proptest::prelude::*;
use zsim_core::coupling::{
    build_coupling, synth_random_instance, ArrayGrid, DipoleGeometry, SynthDims, SynthLoad, SynthOptions,
};
use zsim_core::dft::{dft_matrix, probe_sweep, DftModels, IndexMap};
use zsim_core::gradients::{fd_oracle4, grad_backprop, grad_dsim, grad_eco, grad_sim, sim_objective, TaskInstance};
use zsim_core::linalg::{rel_frob_err, CMat, C64};
use zsim_core::load::{in_guard_band, LoadNetwork, ParamVector};
use zsim_core::optimizer::{descend, start_point, Objective, OptimizerConfig};
use zsim_core::transfer::{dense_t, ideal_cascade, iterative_strips, unilateral_t};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use zsim_core::verify::{fd_ratio, grad_rel_err, ideal_instance, min_time, random_task};

fn task_for(set: &zsim_core::coupling::CouplingSet, count: usize, seed: u64) -> TaskInstance {
    random_task(set, count, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn small_geometry(scale: f64, d_y: f64, d_x: f64) -> DipoleGeometry {
    let mut g = DipoleGeometry::reference();
    let lambda = g.wavelength();
    g.f0_hz /= scale;
    g.length *= scale;
    g.radius *= scale;
    g.layer = ArrayGrid {
        n_y: 3,
        n_z: 2,
        d_y: d_y * lambda * scale,
        d_z: 0.75 * lambda * scale,
    };
    g.probes = ArrayGrid {
        n_y: 2,
        n_z: 1,
        d_y: 0.5 * lambda * scale,
        d_z: 0.75 * lambda * scale,
    };
    g.d_x = d_x * lambda * scale;
    g.standoff = lambda * scale;
    g.pairs = 2;
    g
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn load_network_is_block_diagonal(q in 1usize..4, k in 1usize..5, seed in 0u64..1000) {
        let (_, load) = synth_random_instance(SynthDims::new(q, k, 1), seed, &SynthOptions::default());
        let z = load.assemble_full();
        for i in 0..z.nrows() {
            for j in 0..z.ncols() {
                if i / (2 * k) != j / (2 * k) {
                    prop_assert_eq!(z[(i, j)], C64::new(0.0, 0.0));
                }
            }
        }
    }

    #[test]
    fn physical_blocks_are_reciprocal(d_y in 0.3f64..0.8, d_x in 0.4f64..2.0) {
        let set = build_coupling(&small_geometry(1.0, d_y, d_x)).unwrap();
        for m in [&set.w22_first, &set.channels[0].w11] {
            prop_assert!(rel_frob_err(&m.transpose(), m) <= 1e-12);
        }
        prop_assert!(rel_frob_err(&set.channels[0].w12, &set.channels[0].w21.transpose()) <= 1e-12);
    }

    #[test]
    fn impedances_are_scale_invariant(scale in 0.2f64..5.0, d_y in 0.3f64..0.8) {
        let a = build_coupling(&small_geometry(1.0, d_y, 1.0)).unwrap();
        let b = build_coupling(&small_geometry(scale, d_y, 1.0)).unwrap();
        prop_assert!(rel_frob_err(&b.assemble_full(), &a.assemble_full()) <= 1e-9);
        prop_assert!(rel_frob_err(&b.z_re, &a.z_re) <= 1e-9);
    }

    #[test]
    fn strips_match_dense(q in 1usize..6, k in 1usize..9, seed in 0u64..10_000, dense_load in any::<bool>()) {
        let opts = SynthOptions { load: if dense_load { SynthLoad::Dense } else { SynthLoad::Diagonal }, ..Default::default() };
        let (set, load) = synth_random_instance(SynthDims::new(q, k, 2), seed, &opts);
        let dense = dense_t(&set, &load).unwrap().state;
        let it = iterative_strips(&set, &load).unwrap();
        for r in 0..dense.layers() {
            prop_assert!(rel_frob_err(&it.t[r], &dense.t[r]) <= 1e-10);
            prop_assert!(rel_frob_err(&it.u[r], &dense.u[r]) <= 1e-10);
        }
    }

    #[test]
    fn unilateral_matches_dense(q in 1usize..6, k in 1usize..9, seed in 0u64..10_000) {
        let opts = SynthOptions { unilateral: true, ..Default::default() };
        let (set, load) = synth_random_instance(SynthDims::new(q, k, 2), seed, &opts);
        let dense = dense_t(&set, &load).unwrap().state;
        let uni = unilateral_t(&set, &load).unwrap().state;
        let it = iterative_strips(&set, &load).unwrap();
        for r in 0..dense.layers() {
            prop_assert!(rel_frob_err(&uni.t[r], &dense.t[r]) <= 1e-10);
            prop_assert!(rel_frob_err(&it.t[r], &uni.t[r]) <= 1e-10);
        }
    }

    #[test]
    fn ideal_chain(q in 1usize..5, k in 1usize..6, seed in 0u64..10_000) {
        let (set, load) = ideal_instance(q, k, seed, 50.0);
        let cascade = ideal_cascade(&set.w21_list(), load.params(), 50.0).unwrap();
        prop_assert!(rel_frob_err(&dense_t(&set, &load).unwrap().state.t[0], &cascade) <= 1e-10);
        prop_assert!(rel_frob_err(&unilateral_t(&set, &load).unwrap().state.t[0], &cascade) <= 1e-10);
    }

    #[test]
    fn gradient_chain_and_fd(q in 1usize..5, k in 1usize..9, seed in 0u64..10_000, count in 1usize..5) {
        let (set, load) = synth_random_instance(SynthDims::new(q, k, 1 + seed as usize % 8), seed, &SynthOptions::default());
        let task = task_for(&set, count, seed);
        let before = load.assemble_full();
        let dsim = grad_dsim(&task, &set, &load).unwrap().grad;
        prop_assert!(grad_rel_err(&grad_eco(&task, &set, &load).unwrap().grad, &dsim) <= 1e-10);
        prop_assert!(grad_rel_err(&grad_sim(&task, &set, &load).unwrap().grad, &dsim) <= 1e-10);
        let fd = fd_oracle4(|v| sim_objective(&task, &set, &load, v).unwrap(), load.params().values(), 1e-3);
        prop_assert!(fd_ratio(&dsim, &fd, 1e-6, 1e-10) <= 1.0);
        prop_assert_eq!(load.assemble_full(), before);
    }

    #[test]
    fn backprop_joins_chain(q in 1usize..5, k in 1usize..7, seed in 0u64..10_000) {
        let (set, load) = ideal_instance(q, k, seed, 1.0);
        let task = task_for(&set, 2, seed);
        let bp = grad_backprop(&task, &set.w21_list(), load.params(), 1.0).unwrap().grad;
        prop_assert!(grad_rel_err(&bp, &grad_dsim(&task, &set, &load).unwrap().grad) <= 1e-8);
    }

    #[test]
    fn descent_invariants(seed in 0u64..10_000, start in 0usize..4) {
        let (set, load) = synth_random_instance(SynthDims::new(2, 3, 2), seed, &SynthOptions { load: SynthLoad::Diagonal, ..Default::default() });
        let task = TaskInstance::new(set.z_re.clone(), CMat::identity(3, 2), dft_matrix(2, 1, IndexMap::Conventional).unwrap().theta).unwrap();
        let model = zsim_core::optimizer::FullModel::new(set, task, load.z0(), 1e-3, "D-SIM");
        let config = OptimizerConfig { max_iters: 25, seed, ..Default::default() };
        let init = start_point(seed, start, 6, 1e-3);
        let r = descend(&model, &config, init.clone(), start).unwrap();
        prop_assert!(r.epsilon.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(r.final_eta.iter().all(|e| !in_guard_band(*e, 1e-3)));
        prop_assert_eq!(r.tag.as_str(), "D-SIM");
        let again = descend(&model, &config, init, start).unwrap();
        prop_assert_eq!(r.to_csv(), again.to_csv());
        let s = model.evaluate(&r.final_eta).unwrap();
        let eps = model.error_at(&s, r.final_beta());
        for f in [C64::new(1.01, 0.0), C64::new(0.99, 0.0), C64::from_polar(1.0, 0.01), C64::from_polar(1.0, -0.01)] {
            prop_assert!(model.error_at(&s, r.final_beta() * f) >= eps);
        }
    }

    #[test]
    fn sweep_reference_ignores_response(seed in 0u64..1000) {
        let spec = dft_matrix(4, 2, IndexMap::Conventional).unwrap();
        let s = seed as f64;
        let h = CMat::from_fn(8, 8, |i, j| C64::new((i as f64 * s).sin(), (j as f64 + s).cos()));
        let a = probe_sweep(&h, &spec, 0.5, 0.75, 1.0, 21);
        let b = probe_sweep(&CMat::identity(8, 8), &spec, 0.5, 0.75, 1.0, 21);
        prop_assert_eq!(a.reference, b.reference);
    }
}

#[test]
fn variant_records_carry_model_tags() {
    use zsim_core::dft::{run_variant, ModelVariant};
    let mut g = DipoleGeometry::reference();
    let lambda = g.wavelength();
    g.layer = ArrayGrid {
        n_y: 4,
        n_z: 2,
        d_y: 0.5 * lambda,
        d_z: 0.75 * lambda,
    };
    g.probes = ArrayGrid {
        n_y: 2,
        n_z: 2,
        d_y: 0.5 * lambda,
        d_z: 0.75 * lambda,
    };
    g.pairs = 2;
    let models = DftModels::build(&g, IndexMap::Conventional, 50.0, 1e-3).unwrap();
    let config = OptimizerConfig {
        max_iters: 20,
        starts: 2,
        ..Default::default()
    };
    for v in ModelVariant::ALL {
        let o = run_variant(&models, v, &config).unwrap();
        assert!(o.runs.iter().all(|r| r.tag == v.optimize_tag()));
        assert_eq!(o.eval_tag, v.evaluate_tag());
        for (r, eps) in o.runs.iter().zip(&o.final_eps) {
            let y = models.response(o.eval_tag, &r.final_eta, C64::new(1.0, 0.0)).unwrap();
            let beta = zsim_core::optimizer::beta_ls(&y, &models.spec.theta).unwrap();
            let want = zsim_core::optimizer::objective(&y, &models.spec.theta, beta).0;
            assert!((eps - want).abs() <= 1e-12 * want, "{}: {eps} vs {want}", v.tag());
        }
    }
}

#[test]
fn sim_to_eco_time_ratio_falls_with_depth() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ratios = Vec::new();
    // N = 2QK = 192 throughout.
    for (q, k) in [(1, 96), (2, 48), (4, 24), (8, 12)] {
        let (set, load) = synth_random_instance(SynthDims::new(q, k, 4), 1, &SynthOptions::default());
        let task = random_task(&set, 2, &mut rng);
        let eco = min_time(9, || grad_eco(&task, &set, &load).map(|_| ())).unwrap();
        let sim = min_time(9, || grad_sim(&task, &set, &load).map(|_| ())).unwrap();
        ratios.push(sim / eco);
    }
    assert!(ratios.windows(2).all(|w| w[1] < w[0]), "{ratios:?}");
}

#[test]
fn params_outside_guard_are_accepted() {
    let p = ParamVector::uniform(1, 2, vec![0.5, 3.0], 1e-3).unwrap();
    assert!(LoadNetwork::assemble(p, 50.0, 1e-3).is_ok());
}
