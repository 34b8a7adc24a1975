//! Experiment configuration, execution and artifact emission.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coupling::{ArrayGrid, DipoleGeometry, SPEED_OF_LIGHT};
use crate::dft::{probe_sweep, DftModels, IndexMap, ModelVariant, VariantOutcome, SWEEP_POINTS};
use crate::error::{Result, SimError};
use crate::linalg::{read_matrix, C64};
use crate::load::{LoadNetwork, ParamVector, DEFAULT_Z0};
use crate::optimizer::{Objective as _, OptimizerConfig};

/// Geometry with lengths in wavelengths and frequency in GHz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryConfig {
    pub f0_ghz: f64,
    #[serde(rename = "L_dip_lambda")]
    pub l_dip_lambda: f64,
    pub radius_lambda: f64,
    #[serde(rename = "N_y")]
    pub n_y: usize,
    #[serde(rename = "N_z")]
    pub n_z: usize,
    #[serde(rename = "L_y")]
    pub l_y: usize,
    #[serde(rename = "L_z")]
    pub l_z: usize,
    pub d_x_lambda: f64,
    pub d_y_lambda: f64,
    pub d_z_lambda: f64,
    #[serde(rename = "Q")]
    pub q: usize,
    pub standoff_lambda: f64,
    pub probe_d_y_lambda: f64,
    pub probe_d_z_lambda: f64,
}

impl GeometryConfig {
    /// 4x2 DFT probes over 16x4 layers, `d_y = lambda/2`, `d_x = lambda`, `Q = 3`.
    pub fn reference() -> Self {
        Self {
            f0_ghz: 28.0,
            l_dip_lambda: 0.46,
            radius_lambda: 1.0 / 500.0,
            n_y: 16,
            n_z: 4,
            l_y: 4,
            l_z: 2,
            d_x_lambda: 1.0,
            d_y_lambda: 0.5,
            d_z_lambda: 0.75,
            q: 3,
            standoff_lambda: 1.0,
            probe_d_y_lambda: 0.5,
            probe_d_z_lambda: 0.75,
        }
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / (self.f0_ghz * 1e9)
    }

    pub fn to_dipole(&self) -> DipoleGeometry {
        let lambda = self.wavelength();
        DipoleGeometry {
            f0_hz: self.f0_ghz * 1e9,
            length: self.l_dip_lambda * lambda,
            radius: self.radius_lambda * lambda,
            layer: ArrayGrid {
                n_y: self.n_y,
                n_z: self.n_z,
                d_y: self.d_y_lambda * lambda,
                d_z: self.d_z_lambda * lambda,
            },
            d_x: self.d_x_lambda * lambda,
            pairs: self.q,
            probes: ArrayGrid {
                n_y: self.l_y,
                n_z: self.l_z,
                d_y: self.probe_d_y_lambda * lambda,
                d_z: self.probe_d_z_lambda * lambda,
            },
            standoff: self.standoff_lambda * lambda,
            transmitter: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Variant tags, run in order.
    #[serde(rename = "variant")]
    pub variants: Vec<String>,
    #[serde(rename = "Z0_ohm")]
    pub z0_ohm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    /// `dft` or `file`.
    pub target: String,
    pub index_map: String,
    pub theta_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    pub directory: PathBuf,
    pub dump_strips: bool,
    pub dump_coupling: bool,
    pub sweep_points: usize,
}

/// A fully resolved experiment; every default is filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub geometry: GeometryConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub task: TaskConfig,
    pub output: OutputConfig,
}

struct Section<'a> {
    name: &'static str,
    table: Option<&'a toml::Table>,
    used: Vec<&'static str>,
}

impl<'a> Section<'a> {
    fn new(root: &'a toml::Table, name: &'static str) -> Result<Self> {
        let table = match root.get(name) {
            None => None,
            Some(toml::Value::Table(t)) => Some(t),
            Some(_) => return Err(SimError::config(name, "expected a table")),
        };
        Ok(Self {
            name,
            table,
            used: Vec::new(),
        })
    }

    fn path(&self, key: &str) -> String {
        format!("{}.{key}", self.name)
    }

    fn raw(&mut self, key: &'static str) -> Option<&'a toml::Value> {
        self.used.push(key);
        self.table.and_then(|t| t.get(key))
    }

    fn f64_or(&mut self, key: &'static str, default: Option<f64>) -> Result<f64> {
        let path = self.path(key);
        match self.raw(key) {
            None => default.ok_or_else(|| SimError::config(path, "missing required key")),
            Some(toml::Value::Float(v)) => Ok(*v),
            Some(toml::Value::Integer(v)) => Ok(*v as f64),
            Some(_) => Err(SimError::config(path, "expected a number")),
        }
    }

    fn u64_or(&mut self, key: &'static str, default: Option<u64>) -> Result<u64> {
        let path = self.path(key);
        match self.raw(key) {
            None => default.ok_or_else(|| SimError::config(path, "missing required key")),
            Some(toml::Value::Integer(v)) if *v >= 0 => Ok(*v as u64),
            // Counts written in scientific notation, e.g. `1e5`.
            Some(toml::Value::Float(v)) if *v >= 0.0 && v.fract() == 0.0 && *v < 2f64.powi(53) => Ok(*v as u64),
            Some(_) => Err(SimError::config(path, "expected a non-negative integer")),
        }
    }

    fn usize_or(&mut self, key: &'static str, default: Option<usize>) -> Result<usize> {
        Ok(self.u64_or(key, default.map(|d| d as u64))? as usize)
    }

    fn bool_or(&mut self, key: &'static str, default: bool) -> Result<bool> {
        let path = self.path(key);
        match self.raw(key) {
            None => Ok(default),
            Some(toml::Value::Boolean(b)) => Ok(*b),
            Some(_) => Err(SimError::config(path, "expected a boolean")),
        }
    }

    fn str_or(&mut self, key: &'static str, default: Option<&str>) -> Result<String> {
        let path = self.path(key);
        match self.raw(key) {
            None => default
                .map(str::to_string)
                .ok_or_else(|| SimError::config(path, "missing required key")),
            Some(toml::Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(SimError::config(path, "expected a string")),
        }
    }

    fn strings_or(&mut self, key: &'static str, default: &[&str]) -> Result<Vec<String>> {
        let path = self.path(key);
        match self.raw(key) {
            None => Ok(default.iter().map(|s| s.to_string()).collect()),
            Some(toml::Value::String(s)) => Ok(vec![s.clone()]),
            Some(toml::Value::Array(a)) => a
                .iter()
                .map(|v| match v {
                    toml::Value::String(s) => Ok(s.clone()),
                    _ => Err(SimError::config(path.clone(), "expected a string or a list of strings")),
                })
                .collect(),
            Some(_) => Err(SimError::config(path, "expected a string or a list of strings")),
        }
    }

    fn finish(self) -> Result<()> {
        if let Some(t) = self.table {
            if let Some(k) = t.keys().find(|k| !self.used.contains(&k.as_str())) {
                return Err(SimError::config(self.path(k), "unknown key"));
            }
        }
        Ok(())
    }
}

const SECTIONS: [&str; 5] = ["geometry", "model", "optimizer", "task", "output"];

impl ExperimentConfig {
    /// Parses TOML text; relative paths stay relative to the working directory.
    pub fn from_toml(text: &str) -> Result<Self> {
        let root: toml::Table = text.parse().map_err(|e: toml::de::Error| SimError::Config {
            path: "<document>".into(),
            message: e.message().to_string(),
        })?;
        if let Some(k) = root.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(SimError::config(k.clone(), "unknown section"));
        }

        let mut g = Section::new(&root, "geometry")?;
        let geometry = GeometryConfig {
            f0_ghz: g.f64_or("f0_ghz", None)?,
            l_dip_lambda: g.f64_or("L_dip_lambda", None)?,
            radius_lambda: g.f64_or("radius_lambda", None)?,
            n_y: g.usize_or("N_y", None)?,
            n_z: g.usize_or("N_z", None)?,
            l_y: g.usize_or("L_y", None)?,
            l_z: g.usize_or("L_z", None)?,
            d_x_lambda: g.f64_or("d_x_lambda", None)?,
            d_y_lambda: g.f64_or("d_y_lambda", None)?,
            d_z_lambda: g.f64_or("d_z_lambda", None)?,
            q: g.usize_or("Q", None)?,
            standoff_lambda: g.f64_or("standoff_lambda", Some(1.0))?,
            probe_d_y_lambda: g.f64_or("probe_d_y_lambda", Some(0.5))?,
            probe_d_z_lambda: g.f64_or("probe_d_z_lambda", Some(0.75))?,
        };
        g.finish()?;

        let mut m = Section::new(&root, "model")?;
        let model = ModelConfig {
            variants: m.strings_or("variant", &["D-SIM"])?,
            z0_ohm: m.f64_or("Z0_ohm", Some(DEFAULT_Z0))?,
        };
        m.finish()?;

        let d = OptimizerConfig::default();
        let mut o = Section::new(&root, "optimizer")?;
        let optimizer = OptimizerConfig {
            max_iters: o.usize_or("max_iters", Some(d.max_iters))?,
            stop_eps: o.f64_or("stop_eps", Some(d.stop_eps))?,
            alpha0: o.f64_or("alpha0", Some(d.alpha0))?,
            shrink: o.f64_or("shrink", Some(d.shrink))?,
            armijo_c: o.f64_or("armijo_c", Some(d.armijo_c))?,
            alpha_growth: o.f64_or("alpha_growth", Some(d.alpha_growth))?,
            alpha_max: o.f64_or("alpha_max", Some(d.alpha_max))?,
            starts: o.usize_or("starts", Some(10))?,
            seed: o.u64_or("seed", Some(d.seed))?,
            guard: o.f64_or("guard_rad", Some(d.guard))?,
        };
        o.finish()?;

        let mut t = Section::new(&root, "task")?;
        let task = TaskConfig {
            target: t.str_or("target", Some("dft"))?,
            index_map: t.str_or("index_map", Some(IndexMap::default().name()))?,
            theta_file: t.raw("theta_file").map(|v| match v {
                toml::Value::String(s) => Ok(PathBuf::from(s)),
                _ => Err(SimError::config("task.theta_file", "expected a path string")),
            }).transpose()?,
        };
        t.finish()?;

        let mut out = Section::new(&root, "output")?;
        let output = OutputConfig {
            directory: PathBuf::from(out.str_or("directory", None)?),
            dump_strips: out.bool_or("dump_strips", false)?,
            dump_coupling: out.bool_or("dump_coupling", false)?,
            sweep_points: out.usize_or("sweep_points", Some(SWEEP_POINTS))?,
        };
        out.finish()?;

        let config = Self {
            geometry,
            model,
            optimizer,
            task,
            output,
        };
        config.validate()?;
        Ok(config)
    }

    /// Reads a TOML config, or the `config` entry of a run manifest (`.json`).
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SimError::io(format!("reading {}", path.display()), e))?;
        if path.extension().is_some_and(|e| e == "json") {
            let manifest: Manifest = serde_json::from_str(&text).map_err(|e| SimError::Parse {
                file: path.to_path_buf(),
                message: e.to_string(),
            })?;
            manifest.config.validate()?;
            Ok(manifest.config)
        } else {
            Self::from_toml(&text)
        }
    }

    /// Checks every downstream invariant, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        let positive = [
            ("geometry.f0_ghz", g.f0_ghz),
            ("geometry.L_dip_lambda", g.l_dip_lambda),
            ("geometry.radius_lambda", g.radius_lambda),
            ("geometry.d_x_lambda", g.d_x_lambda),
            ("geometry.d_y_lambda", g.d_y_lambda),
            ("geometry.d_z_lambda", g.d_z_lambda),
            ("geometry.standoff_lambda", g.standoff_lambda),
            ("geometry.probe_d_y_lambda", g.probe_d_y_lambda),
            ("geometry.probe_d_z_lambda", g.probe_d_z_lambda),
            ("model.Z0_ohm", self.model.z0_ohm),
        ];
        for (path, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SimError::config(path, format!("must be positive and finite, got {v}")));
            }
        }
        if g.radius_lambda >= g.l_dip_lambda {
            return Err(SimError::config("geometry.radius_lambda", "must be smaller than L_dip_lambda"));
        }
        for (path, v) in [
            ("geometry.N_y", g.n_y),
            ("geometry.N_z", g.n_z),
            ("geometry.L_y", g.l_y),
            ("geometry.L_z", g.l_z),
            ("geometry.Q", g.q),
        ] {
            if v == 0 {
                return Err(SimError::config(path, "must be at least 1"));
            }
        }
        if g.l_y > g.n_y {
            return Err(SimError::config("geometry.L_y", "input subgrid exceeds N_y"));
        }
        if g.l_z > g.n_z {
            return Err(SimError::config("geometry.L_z", "input subgrid exceeds N_z"));
        }
        if self.model.variants.is_empty() {
            return Err(SimError::config("model.variant", "at least one variant is required"));
        }
        for v in &self.model.variants {
            if ModelVariant::parse(v).is_none() {
                return Err(SimError::config(
                    "model.variant",
                    format!("unknown variant `{v}` (expected D-SIM, DU-SIM_id or MDU-SIM_id)"),
                ));
            }
        }
        self.optimizer
            .validate()
            .map_err(|(field, msg)| SimError::config(format!("optimizer.{}", toml_key(field)), msg))?;
        let map = IndexMap::parse(&self.task.index_map).ok_or_else(|| {
            SimError::config("task.index_map", "expected `conventional` or `printed`")
        })?;
        if !map.is_bijective(g.l_y, g.l_z) {
            return Err(SimError::config(
                "task.index_map",
                format!("the printed map is not a bijection for L_y = {}, L_z = {}", g.l_y, g.l_z),
            ));
        }
        match (self.task.target.as_str(), &self.task.theta_file) {
            ("dft", None) => {}
            ("dft", Some(_)) => return Err(SimError::config("task.theta_file", "only valid with target = \"file\"")),
            ("file", Some(_)) => {}
            ("file", None) => return Err(SimError::config("task.theta_file", "missing required key")),
            _ => return Err(SimError::config("task.target", "expected `dft` or `file`")),
        }
        if self.output.sweep_points < 2 {
            return Err(SimError::config("output.sweep_points", "must be at least 2"));
        }
        Ok(())
    }

    pub fn variants(&self) -> Vec<ModelVariant> {
        self.model
            .variants
            .iter()
            .map(|v| ModelVariant::parse(v).expect("validated variant"))
            .collect()
    }

    pub fn index_map(&self) -> IndexMap {
        IndexMap::parse(&self.task.index_map).expect("validated index map")
    }

    /// Builds the models, replacing the target when a file is configured.
    pub fn build_models(&self) -> Result<DftModels> {
        let geom = self.geometry.to_dipole();
        let models = DftModels::build(&geom, self.index_map(), self.model.z0_ohm, self.optimizer.guard)?;
        match &self.task.theta_file {
            Some(p) => models.with_targets(read_matrix(p)?),
            None => Ok(models),
        }
    }
}

fn toml_key(field: &str) -> &str {
    if field == "guard" {
        "guard_rad"
    } else {
        field
    }
}

/// Everything needed to replay a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub package: String,
    pub version: String,
    pub config: ExperimentConfig,
    /// Start `i` draws its initial phases from stream `i` of a ChaCha8 generator seeded with `seed`.
    pub seed: u64,
    pub streams: Vec<u64>,
}

impl Manifest {
    pub fn new(config: &ExperimentConfig) -> Self {
        Self {
            package: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: config.clone(),
            seed: config.optimizer.seed,
            streams: (0..config.optimizer.starts as u64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantMetrics {
    pub variant: String,
    pub optimize_model: String,
    /// Model that produced `final_epsilon`.
    pub evaluate_model: String,
    pub final_epsilon: Vec<f64>,
    pub final_beta: Vec<[f64; 2]>,
    pub iterations: Vec<usize>,
    pub converged: usize,
    pub stalled: usize,
    pub mean: f64,
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
    pub best_start: usize,
    pub best_epsilon: f64,
}

impl VariantMetrics {
    fn from_outcome(o: &VariantOutcome) -> Self {
        let mut sorted = o.final_eps.clone();
        sorted.sort_by(f64::total_cmp);
        let pct = |q| crate::optimizer::percentile(&sorted, q);
        Self {
            variant: o.variant.tag().into(),
            optimize_model: o.variant.optimize_tag().into(),
            evaluate_model: o.eval_tag.into(),
            final_epsilon: o.final_eps.clone(),
            final_beta: o.final_beta.iter().map(|b| [b.re, b.im]).collect(),
            iterations: o.runs.iter().map(|r| r.iterations).collect(),
            converged: o.runs.iter().filter(|r| r.converged).count(),
            stalled: o.runs.iter().filter(|r| r.stalled).count(),
            mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
            median: pct(0.5),
            p10: pct(0.1),
            p90: pct(0.9),
            best_start: o.best,
            best_epsilon: o.final_eps[o.best],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub variants: Vec<VariantMetrics>,
}

impl Metrics {
    pub fn get(&self, tag: &str) -> Option<&VariantMetrics> {
        self.variants.iter().find(|v| v.variant == tag)
    }
}

/// Results of [`run_experiment`].
pub struct ExperimentResult {
    pub outcomes: Vec<VariantOutcome>,
    pub metrics: Metrics,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SimError::io(format!("creating {}", dir.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| SimError::io(format!("writing {}", path.display()), e))
}

fn eta_csv(params: &ParamVector) -> String {
    let mut s = String::from("q,p,eta\n");
    for (flat, v) in params.values().iter().enumerate() {
        let (q, p) = params.split_index(flat);
        let _ = writeln!(s, "{},{},{v:e}", q + 1, p + 1);
    }
    s
}

fn parse_eta_csv(text: &str, path: &Path) -> Result<Vec<f64>> {
    let err = |message: String| SimError::Parse {
        file: path.to_path_buf(),
        message,
    };
    let mut lines = text.lines();
    if lines.next() != Some("q,p,eta") {
        return Err(err("expected header `q,p,eta`".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.rsplit(',')
                .next()
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| err(format!("bad line `{l}`")))
        })
        .collect()
}

fn variant_dir(out: &Path, v: ModelVariant) -> PathBuf {
    out.join(v.tag())
}

/// Writes the probe sweep of phases `eta` under the variant's evaluate-model.
fn write_sweep(config: &ExperimentConfig, models: &DftModels, v: ModelVariant, eta: &[f64]) -> Result<()> {
    let tag = v.evaluate_tag();
    let y = models.response(tag, eta, C64::new(1.0, 0.0))?;
    let beta = crate::optimizer::beta_ls(&y, &models.spec.theta)?;
    let g = &config.geometry;
    let sweep = probe_sweep(
        &(y * beta),
        &models.spec,
        g.d_y_lambda,
        g.d_z_lambda,
        1.0,
        config.output.sweep_points,
    );
    sweep.write_csv(&variant_dir(&config.output.directory, v).join("sweep.csv"))
}

/// Runs every configured variant and writes all artifacts under the output directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let out = &config.output.directory;
    create_dir(out)?;
    let models = config.build_models()?;
    log::info!(
        "K = {}, Q = {}, M = {}, {} starts",
        models.full.coupling.k(),
        models.full.coupling.pairs(),
        models.spec.len(),
        config.optimizer.starts
    );
    if config.output.dump_coupling {
        models.full.coupling.save(&out.join("coupling"))?;
    }
    let manifest = Manifest::new(config);
    let manifest_text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_text(&out.join("manifest.json"), &manifest_text)?;

    let mut outcomes = Vec::new();
    for v in config.variants() {
        log::info!("optimizing {}", v.tag());
        let o = crate::dft::run_variant(&models, v, &config.optimizer)?;
        let dir = variant_dir(out, v);
        create_dir(&dir)?;
        for r in &o.runs {
            r.write_csv(&dir.join(format!("run_{}.csv", r.start)))?;
        }
        o.summary.write_csv(&dir.join("summary.csv"))?;
        let best = &o.runs[o.best];
        let params = ParamVector::new(models.ideal.counts().to_vec(), best.final_eta.clone(), config.optimizer.guard)?;
        write_text(&dir.join("eta_best.csv"), &eta_csv(&params))?;
        write_sweep(config, &models, v, &best.final_eta)?;
        if config.output.dump_strips && v.evaluate_tag() == crate::dft::FULL_TAG {
            let load = LoadNetwork::assemble(params, config.model.z0_ohm, config.optimizer.guard)?;
            crate::transfer::iterative_strips(&models.full.coupling, &load)?.dump(&dir.join("strips"))?;
        }
        log::info!("{}: median final eps {:.4e} ({})", v.tag(), o.median_final(), o.eval_tag);
        outcomes.push(o);
    }
    let metrics = Metrics {
        variants: outcomes.iter().map(VariantMetrics::from_outcome).collect(),
    };
    let text = serde_json::to_string_pretty(&metrics).expect("metrics serialize") + "\n";
    write_text(&out.join("metrics.json"), &text)?;
    Ok(ExperimentResult { outcomes, metrics })
}

/// Recomputes the probe sweeps from the best phases of a finished run.
pub fn run_sweep(config: &ExperimentConfig) -> Result<()> {
    config.validate()?;
    let models = config.build_models()?;
    for v in config.variants() {
        let path = variant_dir(&config.output.directory, v).join("eta_best.csv");
        let text = fs::read_to_string(&path).map_err(|e| SimError::io(format!("reading {} (run the experiment first)", path.display()), e))?;
        let eta = parse_eta_csv(&text, &path)?;
        ParamVector::new(models.ideal.counts().to_vec(), eta.clone(), config.optimizer.guard)?;
        write_sweep(config, &models, v, &eta)?;
    }
    Ok(())
}
