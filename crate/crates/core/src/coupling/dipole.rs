//! Induced-EMF coupling between parallel z-oriented thin dipoles carrying
//! sinusoidal currents, and assembly of the SIM coupling blocks from a
//! uniform planar array geometry.

use std::collections::HashMap;
use std::f64::consts::PI;

use rayon::prelude::*;

use super::{ChannelBlocks, CouplingSet, InstanceSource};
use crate::error::{Result, SimError};
use crate::linalg::{CMat, C64, J};
use crate::quad;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Free-space wave impedance, ohms.
pub const FREE_SPACE_IMPEDANCE: f64 = 376.730_313_412;

/// Absolute tolerance of the EMF integral, ohms.
const EMF_ABS_TOL: f64 = 1e-10;

/// A z-oriented dipole center, metres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dipole {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// Rectangular grid of elements in a plane of constant `x`, centered on the
/// `x` axis. Element `(iy, iz)` has flat index `iz * n_y + iy`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrayGrid {
    pub n_y: usize,
    pub n_z: usize,
    pub d_y: f64,
    pub d_z: f64,
}

impl ArrayGrid {
    pub fn len(&self) -> usize {
        self.n_y * self.n_z
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn positions(&self, x: f64) -> Vec<Dipole> {
        let y0 = -0.5 * (self.n_y as f64 - 1.0) * self.d_y;
        let z0 = -0.5 * (self.n_z as f64 - 1.0) * self.d_z;
        let mut out = Vec::with_capacity(self.len());
        for iz in 0..self.n_z {
            for iy in 0..self.n_y {
                out.push(Dipole {
                    x,
                    y: y0 + iy as f64 * self.d_y,
                    z: z0 + iz as f64 * self.d_z,
                });
            }
        }
        out
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.n_y == 0 || self.n_z == 0 {
            return Err(SimError::InvalidValue(format!("{what} grid must have positive dimensions")));
        }
        if !(self.d_y > 0.0 && self.d_z > 0.0) {
            return Err(SimError::InvalidValue(format!("{what} spacings must be positive")));
        }
        Ok(())
    }
}

/// Transmitter array feeding the first layer, used only to populate `Z'_ET`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransmitterGrid {
    pub grid: ArrayGrid,
    /// Distance in front of the first layer, metres.
    pub distance: f64,
}

/// Physical SIM layout. All lengths in metres.
#[derive(Debug, Clone, PartialEq)]
pub struct DipoleGeometry {
    pub f0_hz: f64,
    pub length: f64,
    pub radius: f64,
    /// Element grid of every metasurface layer.
    pub layer: ArrayGrid,
    /// Spacing between adjacent layer pairs.
    pub d_x: f64,
    /// Number of layer pairs `Q`.
    pub pairs: usize,
    pub probes: ArrayGrid,
    /// Distance of the probe plane behind the last layer.
    pub standoff: f64,
    pub transmitter: Option<TransmitterGrid>,
}

impl DipoleGeometry {
    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.f0_hz
    }

    /// The 16x4-layer reference setup at 28 GHz with `Q = 3`.
    pub fn reference() -> Self {
        let f0_hz = 28e9;
        let lambda = SPEED_OF_LIGHT / f0_hz;
        Self {
            f0_hz,
            length: 0.46 * lambda,
            radius: lambda / 500.0,
            layer: ArrayGrid {
                n_y: 16,
                n_z: 4,
                d_y: 0.5 * lambda,
                d_z: 0.75 * lambda,
            },
            d_x: lambda,
            pairs: 3,
            probes: ArrayGrid {
                n_y: 4,
                n_z: 2,
                d_y: 0.5 * lambda,
                d_z: 0.75 * lambda,
            },
            standoff: lambda,
            transmitter: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f0_hz > 0.0 && self.f0_hz.is_finite()) {
            return Err(SimError::InvalidValue("frequency must be positive".into()));
        }
        if !(self.length > 0.0 && self.radius > 0.0 && self.radius < self.length) {
            return Err(SimError::InvalidValue("dipole needs 0 < radius < length".into()));
        }
        if !(self.d_x > 0.0 && self.standoff > 0.0) {
            return Err(SimError::InvalidValue("layer spacing and probe standoff must be positive".into()));
        }
        if self.pairs == 0 {
            return Err(SimError::InvalidValue("at least one layer pair is required".into()));
        }
        self.layer.validate("layer")?;
        self.probes.validate("probe")?;
        if let Some(tx) = &self.transmitter {
            tx.grid.validate("transmitter")?;
            if !(tx.distance > 0.0) {
                return Err(SimError::InvalidValue("transmitter distance must be positive".into()));
            }
        }
        Ok(())
    }

    /// `x` coordinate of layer pair `q` (zero-based).
    pub fn pair_x(&self, q: usize) -> f64 {
        q as f64 * self.d_x
    }
}

/// Base-referred mutual impedance between two parallel z-oriented dipoles of
/// length `length` and wire radius `radius`; coincident centers give the
/// self impedance.
pub fn mutual_impedance(a: &Dipole, b: &Dipole, geom: &DipoleGeometry) -> Result<C64> {
    let lambda = geom.wavelength();
    let rho = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt() / lambda;
    let h = (b.z - a.z).abs() / lambda;
    emf_normalized(rho, h, geom.length / lambda, geom.radius / lambda)
}

/// EMF integral with every length in wavelengths (`k = 2 pi`).
fn emf_normalized(rho: f64, h: f64, len: f64, radius: f64) -> Result<C64> {
    let k = 2.0 * PI;
    let half = 0.5 * len;
    let rho = rho.max(radius);
    let rho2 = rho * rho;
    let c = (k * half).cos();
    let s = (k * half).sin();
    if s.abs() < 1e-6 {
        return Err(SimError::InvalidValue(
            "dipole length is close to a multiple of the wavelength; base-referred impedance undefined".into(),
        ));
    }
    let spherical = |r: f64| C64::new(0.0, -k * r).exp() / r;
    let integrand = |z: f64| {
        let r1 = (rho2 + (z - half).powi(2)).sqrt();
        let r2 = (rho2 + (z + half).powi(2)).sqrt();
        let r0 = (rho2 + z * z).sqrt();
        let field = spherical(r1) + spherical(r2) - spherical(r0) * (2.0 * c);
        field * (k * (half - (z - h).abs())).sin()
    };
    let (lo, hi) = (h - half, h + half);
    let mut breaks = vec![lo, h, hi];
    for p in [-half, 0.0, half] {
        if p > lo && p < hi {
            breaks.push(p);
        }
    }
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let scale = FREE_SPACE_IMPEDANCE / (4.0 * PI);
    let tol = EMF_ABS_TOL / scale * s * s;
    let integral = quad::integrate(integrand, &breaks, tol)?;
    Ok(J * scale * integral / (s * s))
}

/// Memoizes impedances by electrical offset, since regular grids repeat
/// the same `(rho, |dz|)` pairs many times.
struct ImpedanceTable {
    lambda: f64,
    length: f64,
    radius: f64,
    values: HashMap<(i64, i64), C64>,
}

const KEY_SCALE: f64 = 1e9;

fn offset_key(a: &Dipole, b: &Dipole, lambda: f64) -> (i64, i64) {
    let rho = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt() / lambda;
    let h = (b.z - a.z).abs() / lambda;
    ((rho * KEY_SCALE).round() as i64, (h * KEY_SCALE).round() as i64)
}

impl ImpedanceTable {
    fn new(geom: &DipoleGeometry) -> Self {
        let lambda = geom.wavelength();
        Self {
            lambda,
            length: geom.length / lambda,
            radius: geom.radius / lambda,
            values: HashMap::new(),
        }
    }

    /// Evaluates all not-yet-known offsets between the two element sets in parallel.
    fn fill(&mut self, rows: &[Dipole], cols: &[Dipole]) -> Result<()> {
        let lambda = self.lambda;
        let mut missing: Vec<(i64, i64)> = rows
            .iter()
            .flat_map(|a| cols.iter().map(move |b| offset_key(a, b, lambda)))
            .filter(|key| !self.values.contains_key(key))
            .collect();
        missing.sort_unstable();
        missing.dedup();
        let (len, radius) = (self.length, self.radius);
        let computed: Vec<((i64, i64), C64)> = missing
            .par_iter()
            .map(|&key| {
                let z = emf_normalized(key.0 as f64 / KEY_SCALE, key.1 as f64 / KEY_SCALE, len, radius)?;
                Ok((key, z))
            })
            .collect::<Result<_>>()?;
        self.values.extend(computed);
        Ok(())
    }

    fn block(&mut self, rows: &[Dipole], cols: &[Dipole]) -> Result<CMat> {
        self.fill(rows, cols)?;
        Ok(CMat::from_fn(rows.len(), cols.len(), |i, j| {
            self.values[&offset_key(&rows[i], &cols[j], self.lambda)]
        }))
    }
}

/// Coupling blocks of the physical dipole model.
///
/// Both faces of a layer pair share the element grid, so every intra-layer
/// block equals the same symmetric matrix and every channel has
/// `W12 = W21^T`. Probes sit `standoff` behind the last pair.
pub fn build_coupling(geom: &DipoleGeometry) -> Result<CouplingSet> {
    geom.validate()?;
    let mut table = ImpedanceTable::new(geom);
    let layer0 = geom.layer.positions(0.0);
    let layer1 = geom.layer.positions(geom.d_x);
    let intra = table.block(&layer0, &layer0)?;
    let w21 = table.block(&layer1, &layer0)?;
    let w12 = w21.transpose();
    let channels = (1..geom.pairs)
        .map(|_| ChannelBlocks {
            w11: intra.clone(),
            w12: w12.clone(),
            w21: w21.clone(),
            w22: intra.clone(),
        })
        .collect();
    let last_x = geom.pair_x(geom.pairs - 1);
    let probes = geom.probes.positions(last_x + geom.standoff);
    let last = geom.layer.positions(last_x);
    let z_re = table.block(&probes, &last)?;
    let z_et = match &geom.transmitter {
        Some(tx) => {
            let sources = tx.grid.positions(-tx.distance);
            table.block(&layer0, &sources)?
        }
        None => CMat::identity(geom.layer.len(), geom.layer.len()),
    };
    log::debug!(
        "dipole coupling: K = {}, Q = {}, {} distinct offsets",
        geom.layer.len(),
        geom.pairs,
        table.values.len()
    );
    CouplingSet::new(intra.clone(), intra, channels, z_re, z_et, InstanceSource::DipoleModel)
}

/// Ideal-element coupling: matched self blocks `z0 I`, `W12 = 0`, with the
/// inter-layer `W21` and probe coupling of the dipole model.
pub fn build_ideal_coupling(geom: &DipoleGeometry, z0: f64) -> Result<CouplingSet> {
    Ok(build_coupling(geom)?.idealized(z0))
}
