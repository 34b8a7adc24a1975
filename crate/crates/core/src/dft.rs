//! 2D-DFT case study: targets, task assembly per model variant, plane-wave
//! probe sweeps and the model-mismatch evaluation.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::coupling::{CouplingSet, DipoleGeometry};
use crate::error::{Result, SimError};
use crate::gradients::TaskInstance;
use crate::linalg::{CMat, C64};
use crate::optimizer::{
    beta_ls, objective, run_from, start_point, summarize, FullModel, IdealModel, OptimizerConfig, RunRecord,
    Summary,
};

/// Default number of angles per sweep cut.
pub const SWEEP_POINTS: usize = 181;

/// Flattening of `(m_y, m_z)` grid coordinates into a DFT index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IndexMap {
    /// `m = m_z L_y + m_y` (zero-based), row-major over the probe grid.
    #[default]
    Conventional,
    /// `m = m_z L_z + m_y` (zero-based); a bijection only when `L_y = L_z` or `L_z = 1`.
    Printed,
}

impl IndexMap {
    pub fn stride(self, l_y: usize, l_z: usize) -> usize {
        match self {
            IndexMap::Conventional => l_y,
            IndexMap::Printed => l_z,
        }
    }

    pub fn is_bijective(self, l_y: usize, l_z: usize) -> bool {
        self == IndexMap::Conventional || l_z == 1 || l_y == l_z
    }

    pub fn name(self) -> &'static str {
        match self {
            IndexMap::Conventional => "conventional",
            IndexMap::Printed => "printed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "conventional" => Some(IndexMap::Conventional),
            "printed" => Some(IndexMap::Printed),
            _ => None,
        }
    }
}

/// The DFT target with its grid and index map.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSpec {
    pub l_y: usize,
    pub l_z: usize,
    pub map: IndexMap,
    pub theta: CMat,
}

impl TargetSpec {
    pub fn len(&self) -> usize {
        self.l_y * self.l_z
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self, m_y: usize, m_z: usize) -> usize {
        m_z * self.map.stride(self.l_y, self.l_z) + m_y
    }

    /// Inverse of [`TargetSpec::flatten`].
    pub fn unflatten(&self, m: usize) -> (usize, usize) {
        if self.l_z == 1 {
            return (m, 0);
        }
        let s = self.map.stride(self.l_y, self.l_z);
        (m % s, m / s)
    }
}

/// `Theta[n, m] = exp(-j 2 pi m_y n_y / L_y) exp(-j 2 pi m_z n_z / L_z)`.
pub fn dft_matrix(l_y: usize, l_z: usize, map: IndexMap) -> Result<TargetSpec> {
    if l_y == 0 || l_z == 0 {
        return Err(SimError::InvalidValue("DFT grid dimensions must be positive".into()));
    }
    if !map.is_bijective(l_y, l_z) {
        return Err(SimError::InvalidValue(format!(
            "the {} index map is not a bijection for L_y = {l_y}, L_z = {l_z}",
            map.name()
        )));
    }
    let mut spec = TargetSpec {
        l_y,
        l_z,
        map,
        theta: CMat::zeros(l_y * l_z, l_y * l_z),
    };
    for n_z in 0..l_z {
        for n_y in 0..l_y {
            let n = spec.flatten(n_y, n_z);
            for m_z in 0..l_z {
                for m_y in 0..l_y {
                    let m = spec.flatten(m_y, m_z);
                    let phase = -2.0 * PI * ((m_y * n_y) as f64 / l_y as f64 + (m_z * n_z) as f64 / l_z as f64);
                    spec.theta[(n, m)] = C64::from_polar(1.0, phase);
                }
            }
        }
    }
    Ok(spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelVariant {
    /// Optimized and evaluated on the full model.
    DSim,
    /// Optimized and evaluated on the ideal cascade.
    DuSimId,
    /// Optimized on the ideal cascade, evaluated on the full model.
    MduSimId,
}

pub const FULL_TAG: &str = "D-SIM";
pub const IDEAL_TAG: &str = "DU-SIM_id";

impl ModelVariant {
    pub const ALL: [ModelVariant; 3] = [ModelVariant::DSim, ModelVariant::DuSimId, ModelVariant::MduSimId];

    pub fn tag(self) -> &'static str {
        match self {
            ModelVariant::DSim => "D-SIM",
            ModelVariant::DuSimId => "DU-SIM_id",
            ModelVariant::MduSimId => "MDU-SIM_id",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.tag() == s)
    }

    pub fn optimize_tag(self) -> &'static str {
        match self {
            ModelVariant::DSim => FULL_TAG,
            _ => IDEAL_TAG,
        }
    }

    pub fn evaluate_tag(self) -> &'static str {
        match self {
            ModelVariant::DuSimId => IDEAL_TAG,
            _ => FULL_TAG,
        }
    }
}

/// Layer-grid elements fed by the inputs: the `L_y x L_z` subgrid centered in
/// the first layer, listed in DFT index order.
pub fn input_selection(geom: &DipoleGeometry, spec: &TargetSpec) -> Result<Vec<usize>> {
    let layer = &geom.layer;
    if layer.n_y < spec.l_y || layer.n_z < spec.l_z {
        return Err(SimError::dims(
            "first layer vs probe grid",
            format!("at least {}x{}", spec.l_y, spec.l_z),
            format!("{}x{}", layer.n_y, layer.n_z),
        ));
    }
    let (oy, oz) = ((layer.n_y - spec.l_y) / 2, (layer.n_z - spec.l_z) / 2);
    Ok((0..spec.len())
        .map(|m| {
            let (m_y, m_z) = spec.unflatten(m);
            (oz + m_z) * layer.n_y + oy + m_y
        })
        .collect())
}

/// Task with `b_i = e_{sel(i)}`, `x_i = Theta e_i`, and `A` the probe rows of
/// `Z'_RE` in DFT index order.
pub fn assemble_task(coupling: &CouplingSet, geom: &DipoleGeometry, spec: &TargetSpec) -> Result<TaskInstance> {
    if geom.probes.n_y != spec.l_y || geom.probes.n_z != spec.l_z {
        return Err(SimError::dims(
            "probe grid vs DFT size",
            format!("{}x{}", spec.l_y, spec.l_z),
            format!("{}x{}", geom.probes.n_y, geom.probes.n_z),
        ));
    }
    if coupling.outputs() != spec.len() {
        return Err(SimError::dims("probe rows of Z_RE", spec.len(), coupling.outputs()));
    }
    let k = coupling.k();
    if k != geom.layer.len() {
        return Err(SimError::dims("layer elements", geom.layer.len(), k));
    }
    let sel = input_selection(geom, spec)?;
    let mut inputs = CMat::zeros(k, spec.len());
    for (m, &e) in sel.iter().enumerate() {
        inputs[(e, m)] = C64::new(1.0, 0.0);
    }
    let mut a = CMat::zeros(spec.len(), k);
    for n in 0..spec.len() {
        let (n_y, n_z) = spec.unflatten(n);
        a.row_mut(n).copy_from(&coupling.z_re.row(n_z * spec.l_y + n_y));
    }
    TaskInstance::new(a, inputs, spec.theta.clone())
}

/// Unit-modulus plane-wave input over the probe-sized grid, in DFT index order.
pub fn plane_wave(theta: f64, phi: f64, spec: &TargetSpec, d_y: f64, d_z: f64, lambda: f64) -> Vec<C64> {
    let ky = 2.0 * PI * d_y / lambda * theta.sin();
    let kz = 2.0 * PI * d_z / lambda * phi.sin();
    let mut b = vec![C64::new(0.0, 0.0); spec.len()];
    for m_z in 0..spec.l_z {
        for m_y in 0..spec.l_y {
            b[spec.flatten(m_y, m_z)] = C64::from_polar(1.0, -(ky * m_y as f64 + kz * m_z as f64));
        }
    }
    b
}

/// `points` equally spaced angles over `[-pi/2, pi/2]`.
pub fn angle_grid(points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![0.0],
        n => (0..n).map(|i| -FRAC_PI_2 + PI * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Probe magnitudes over the two cuts (`phi = 0` over theta, then `theta = 0`
/// over phi), with the ideal reference `|Theta b|`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub angles: Vec<(f64, f64)>,
    /// `(#angles x M)`.
    pub magnitude: Vec<Vec<f64>>,
    pub reference: Vec<Vec<f64>>,
}

impl Sweep {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("theta,phi,probe_index,magnitude,reference_magnitude\n");
        for (a, (theta, phi)) in self.angles.iter().enumerate() {
            for (p, (mag, r)) in self.magnitude[a].iter().zip(&self.reference[a]).enumerate() {
                let _ = writeln!(s, "{theta:e},{phi:e},{},{mag:e},{r:e}", p + 1);
            }
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| SimError::io(format!("writing {}", path.display()), e))
    }

    /// Index of the strongest probe at each angle.
    pub fn argmax(rows: &[Vec<f64>]) -> Vec<usize> {
        rows.iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect()
    }
}

/// Sweep of the linear response `H b` where `H = beta A T B` is `M x M`.
pub fn probe_sweep(response: &CMat, spec: &TargetSpec, d_y: f64, d_z: f64, lambda: f64, points: usize) -> Sweep {
    let grid = angle_grid(points);
    let angles: Vec<(f64, f64)> = grid
        .iter()
        .map(|&t| (t, 0.0))
        .chain(grid.iter().map(|&p| (0.0, p)))
        .collect();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = angles
        .par_iter()
        .map(|&(t, p)| {
            let b = CMat::from_vec(spec.len(), 1, plane_wave(t, p, spec, d_y, d_z, lambda));
            let y = response * &b;
            let r = &spec.theta * &b;
            (y.iter().map(|z| z.norm()).collect(), r.iter().map(|z| z.norm()).collect())
        })
        .collect();
    let (magnitude, reference) = rows.into_iter().unzip();
    Sweep {
        angles,
        magnitude,
        reference,
    }
}

/// Full-model error of phases optimized elsewhere, with `beta` refit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MismatchEval {
    pub epsilon: f64,
    pub beta: C64,
    /// Error when the `beta` of the optimizing model is carried over.
    pub epsilon_carried: f64,
}

pub fn mismatch_eval(full: &FullModel, eta: &[f64], carried_beta: C64) -> Result<MismatchEval> {
    let y = full.output(eta)?;
    let beta = beta_ls(&y, &full.task.targets)?;
    Ok(MismatchEval {
        epsilon: objective(&y, &full.task.targets, beta).0,
        beta,
        epsilon_carried: objective(&y, &full.task.targets, carried_beta).0,
    })
}

/// Both models of one geometry sharing the DFT task.
pub struct DftModels {
    pub spec: TargetSpec,
    pub full: FullModel,
    pub ideal: IdealModel,
}

impl DftModels {
    pub fn build(geom: &DipoleGeometry, map: IndexMap, z0: f64, guard: f64) -> Result<Self> {
        let coupling = crate::coupling::build_coupling(geom)?;
        Self::from_coupling(coupling, geom, map, z0, guard)
    }

    pub fn from_coupling(
        coupling: CouplingSet,
        geom: &DipoleGeometry,
        map: IndexMap,
        z0: f64,
        guard: f64,
    ) -> Result<Self> {
        let spec = dft_matrix(geom.probes.n_y, geom.probes.n_z, map)?;
        let task = assemble_task(&coupling, geom, &spec)?;
        let ideal = IdealModel::new(coupling.w21_list(), task.clone(), z0, guard, IDEAL_TAG);
        let full = FullModel::new(coupling, task, z0, guard, FULL_TAG);
        Ok(Self { spec, full, ideal })
    }

    /// Replaces the DFT target by an arbitrary `M x M` matrix.
    pub fn with_targets(mut self, theta: CMat) -> Result<Self> {
        let m = self.spec.len();
        if theta.shape() != (m, m) {
            return Err(SimError::dims("target matrix", format!("{m}x{m}"), format!("{:?}", theta.shape())));
        }
        self.full.task.targets = theta.clone();
        self.ideal.task.targets = theta.clone();
        self.spec.theta = theta;
        Ok(self)
    }

    /// `beta Y` of the given phases under the named model.
    pub fn response(&self, tag: &str, eta: &[f64], beta: C64) -> Result<CMat> {
        let y = if tag == FULL_TAG {
            self.full.output(eta)?
        } else {
            use crate::optimizer::Objective;
            self.ideal.evaluate(eta)?.y
        };
        Ok(y * beta)
    }
}

/// Optimization of one variant from paired seeded starts.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantOutcome {
    pub variant: ModelVariant,
    pub runs: Vec<RunRecord>,
    pub summary: Summary,
    /// Final error of each run under the evaluate-model, tagged by `eval_tag`.
    pub final_eps: Vec<f64>,
    pub final_beta: Vec<C64>,
    pub eval_tag: &'static str,
    /// Start index with the smallest evaluated error.
    pub best: usize,
}

impl VariantOutcome {
    pub fn median_final(&self) -> f64 {
        let mut v = self.final_eps.clone();
        v.sort_by(f64::total_cmp);
        crate::optimizer::percentile(&v, 0.5)
    }
}

pub fn run_variant(models: &DftModels, variant: ModelVariant, config: &OptimizerConfig) -> Result<VariantOutcome> {
    let total: usize = models.full.task.inputs.nrows() * models.full.coupling.pairs();
    let inits: Vec<Vec<f64>> = (0..config.starts)
        .map(|i| start_point(config.seed, i, total, config.guard))
        .collect();
    let runs = match variant {
        ModelVariant::DSim => run_from(&models.full, config, inits)?,
        _ => run_from(&models.ideal, config, inits)?,
    };
    let (final_eps, final_beta) = match variant {
        ModelVariant::MduSimId => {
            let mut eps = Vec::with_capacity(runs.len());
            let mut betas = Vec::with_capacity(runs.len());
            for r in &runs {
                let m = mismatch_eval(&models.full, &r.final_eta, r.final_beta())?;
                eps.push(m.epsilon);
                betas.push(m.beta);
            }
            (eps, betas)
        }
        _ => (
            runs.iter().map(|r| r.final_epsilon()).collect(),
            runs.iter().map(|r| r.final_beta()).collect(),
        ),
    };
    let best = final_eps
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let summary = summarize(&runs);
    Ok(VariantOutcome {
        variant,
        runs,
        summary,
        final_eps,
        final_beta,
        eval_tag: variant.evaluate_tag(),
        best,
    })
}
