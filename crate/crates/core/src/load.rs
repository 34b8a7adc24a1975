//! Tunable load network: lossless two-port phase shifters, their tangents,
//! and the per-layer-pair blocks `X(q)_{n,m}` of `Z_E(eta)`.
//!
//! Indices in this API are zero-based: layer pair `q` in `0..Q`, element `p`
//! in `0..P_q`. Parameters are flattened layer-major (`q` outer, `p` inner).

use crate::error::{Result, SimError};
use crate::linalg::{from_diag, CMat, C64, J, ZERO};

/// Default characteristic impedance, ohms.
pub const DEFAULT_Z0: f64 = 50.0;
/// Default half-width of the excluded neighborhood around multiples of pi, radians.
pub const DEFAULT_ETA_GUARD: f64 = 1e-3;

/// True when `eta` is inside the guard band around a multiple of pi.
pub fn in_guard_band(eta: f64, guard: f64) -> bool {
    eta.sin().abs() <= guard.sin()
}

/// Phase parameters of every layer pair, flattened layer-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    counts: Vec<usize>,
    offsets: Vec<usize>,
    values: Vec<f64>,
}

impl ParamVector {
    /// Builds a validated parameter vector; every phase must clear the guard band.
    pub fn new(counts: Vec<usize>, values: Vec<f64>, guard: f64) -> Result<Self> {
        let pv = Self::unchecked(counts, values)?;
        pv.validate(guard)?;
        Ok(pv)
    }

    /// `Q` layer pairs with `K` parameters each.
    pub fn uniform(q: usize, k: usize, values: Vec<f64>, guard: f64) -> Result<Self> {
        Self::new(vec![k; q], values, guard)
    }

    /// Shape-checked but not guard-checked. Used by the ideal cascade, which
    /// never divides by `sin(eta)`, and by synthetic non-phase load models.
    pub fn unchecked(counts: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if counts.is_empty() || counts.iter().any(|&c| c == 0) {
            return Err(SimError::InvalidValue(
                "parameter vector needs at least one layer and positive per-layer counts".into(),
            ));
        }
        let total: usize = counts.iter().sum();
        if values.len() != total {
            return Err(SimError::dims("parameter vector", total, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SimError::InvalidValue("non-finite phase".into()));
        }
        let mut offsets = Vec::with_capacity(counts.len());
        let mut acc = 0;
        for &c in &counts {
            offsets.push(acc);
            acc += c;
        }
        Ok(Self {
            counts,
            offsets,
            values,
        })
    }

    pub fn validate(&self, guard: f64) -> Result<()> {
        match self.values.iter().position(|&v| in_guard_band(v, guard)) {
            Some(index) => Err(SimError::GuardBandViolation {
                index,
                value: self.values[index],
            }),
            None => Ok(()),
        }
    }

    pub fn layers(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layer(&self, q: usize) -> &[f64] {
        &self.values[self.offsets[q]..self.offsets[q] + self.counts[q]]
    }

    pub fn flat_index(&self, q: usize, p: usize) -> Result<usize> {
        if q >= self.layers() {
            return Err(SimError::IndexOutOfRange {
                what: "layer pair q",
                index: q,
                valid: format!("0..{}", self.layers()),
            });
        }
        if p >= self.counts[q] {
            return Err(SimError::IndexOutOfRange {
                what: "parameter p",
                index: p,
                valid: format!("0..{}", self.counts[q]),
            });
        }
        Ok(self.offsets[q] + p)
    }

    /// Inverse of [`flat_index`](Self::flat_index).
    pub fn split_index(&self, flat: usize) -> (usize, usize) {
        let q = self.offsets.partition_point(|&o| o <= flat) - 1;
        (q, flat - self.offsets[q])
    }

    /// Same shape, new values (not guard-checked).
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::unchecked(self.counts.clone(), values)
    }
}

/// Z-parameters of a two-port, ohms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoPortZ {
    pub z11: C64,
    pub z12: C64,
    pub z21: C64,
    pub z22: C64,
}

impl TwoPortZ {
    /// Entry `(n, m)` with zero-based port indices.
    pub fn get(&self, n: usize, m: usize) -> C64 {
        match (n, m) {
            (0, 0) => self.z11,
            (0, 1) => self.z12,
            (1, 0) => self.z21,
            (1, 1) => self.z22,
            _ => panic!("two-port index ({n}, {m}) out of range"),
        }
    }

    /// Scattering parameters for reference impedance `z0` on both ports,
    /// returned as `[[s11, s12], [s21, s22]]`.
    pub fn to_s(&self, z0: f64) -> [[C64; 2]; 2] {
        let z0 = C64::new(z0, 0.0);
        let den = (self.z11 + z0) * (self.z22 + z0) - self.z12 * self.z21;
        let s11 = ((self.z11 - z0) * (self.z22 + z0) - self.z12 * self.z21) / den;
        let s22 = ((self.z11 + z0) * (self.z22 - z0) - self.z12 * self.z21) / den;
        let s12 = 2.0 * self.z12 * z0 / den;
        let s21 = 2.0 * self.z21 * z0 / den;
        [[s11, s12], [s21, s22]]
    }
}

fn guard_check(eta: f64, guard: f64) -> Result<()> {
    if in_guard_band(eta, guard) {
        Err(SimError::GuardBandViolation { index: 0, value: eta })
    } else {
        Ok(())
    }
}

/// Lossless matched phase shifter with transmission phase `eta`:
/// `j z0 [[cot, csc], [csc, cot]]`.
pub fn two_port_z(eta: f64, z0: f64, guard: f64) -> Result<TwoPortZ> {
    guard_check(eta, guard)?;
    Ok(two_port_z_raw(eta, z0))
}

fn two_port_z_raw(eta: f64, z0: f64) -> TwoPortZ {
    let (s, c) = eta.sin_cos();
    let diag = J * (z0 * c / s);
    let off = J * (z0 / s);
    TwoPortZ {
        z11: diag,
        z12: off,
        z21: off,
        z22: diag,
    }
}

/// Derivative of [`two_port_z`] with respect to `eta`:
/// `-j z0 [[cot^2 + 1, cos/sin^2], [cos/sin^2, cot^2 + 1]]`.
pub fn two_port_z_tangent(eta: f64, z0: f64, guard: f64) -> Result<TwoPortZ> {
    guard_check(eta, guard)?;
    Ok(two_port_z_tangent_raw(eta, z0))
}

pub(crate) fn two_port_z_tangent_raw(eta: f64, z0: f64) -> TwoPortZ {
    let (s, c) = eta.sin_cos();
    let cot = c / s;
    let diag = -J * (z0 * (cot * cot + 1.0));
    let off = -J * (z0 * c / (s * s));
    TwoPortZ {
        z11: diag,
        z12: off,
        z21: off,
        z22: diag,
    }
}

/// One of the four `K x K` blocks `X(q)_{n,m}`.
#[derive(Debug, Clone, Copy)]
pub enum Block<'a> {
    Diag(&'a [C64]),
    Full(&'a CMat),
}

impl Block<'_> {
    pub fn to_dense(&self) -> CMat {
        match self {
            Block::Diag(d) => from_diag(d),
            Block::Full(m) => (*m).clone(),
        }
    }
}

#[derive(Debug, Clone)]
enum LoadKind {
    /// `K` independent phase shifters per pair; `diag[q][nm]` holds the
    /// diagonal of block `nm` in order 11, 12, 21, 22.
    Diagonal {
        cells: Vec<Vec<TwoPortZ>>,
        diag: Vec<[Vec<C64>; 4]>,
    },
    /// Arbitrary coupled load `Z(q)(eta) = B(q) + sum_p sin(eta_p) C(q)_p`
    /// (synthetic instances exercising the non-diagonal code paths).
    Dense {
        base: Vec<CMat>,
        directions: Vec<Vec<CMat>>,
        blocks: Vec<[CMat; 4]>,
    },
}

/// The tunable load network `Z_E(eta)`, block-diagonal in `2K x 2K` pair blocks.
#[derive(Debug, Clone)]
pub struct LoadNetwork {
    k: usize,
    z0: f64,
    guard: f64,
    params: ParamVector,
    kind: LoadKind,
}

fn nm_index(n: usize, m: usize) -> usize {
    assert!(n < 2 && m < 2, "block index ({n}, {m}) out of range");
    2 * n + m
}

impl LoadNetwork {
    /// Diagonal phase-shifter load: `X(q)_{n,m} = diag_k D(q)_k(n, m)`.
    pub fn assemble(params: ParamVector, z0: f64, guard: f64) -> Result<Self> {
        let k = params.counts()[0];
        if params.counts().iter().any(|&c| c != k) {
            return Err(SimError::dims(
                "diagonal load (every layer pair must have K parameters)",
                k,
                format!("{:?}", params.counts()),
            ));
        }
        params.validate(guard)?;
        let cells: Vec<Vec<TwoPortZ>> = (0..params.layers())
            .map(|q| params.layer(q).iter().map(|&eta| two_port_z_raw(eta, z0)).collect())
            .collect();
        let diag = cells
            .iter()
            .map(|layer| {
                let pick = |f: fn(&TwoPortZ) -> C64| layer.iter().map(f).collect::<Vec<_>>();
                [pick(|c| c.z11), pick(|c| c.z12), pick(|c| c.z21), pick(|c| c.z22)]
            })
            .collect();
        Ok(Self {
            k,
            z0,
            guard,
            params,
            kind: LoadKind::Diagonal { cells, diag },
        })
    }

    /// Coupled load `Z(q) = base[q] + sum_p sin(eta_{q,p}) directions[q][p]`,
    /// each matrix `2K x 2K`. Tangents are `cos(eta_{q,p}) directions[q][p]`.
    pub fn dense_affine(base: Vec<CMat>, directions: Vec<Vec<CMat>>, params: ParamVector, z0: f64) -> Result<Self> {
        let q_count = base.len();
        if q_count == 0 || directions.len() != q_count || params.layers() != q_count {
            return Err(SimError::dims("dense load layer count", q_count, params.layers()));
        }
        let k2 = base[0].nrows();
        if k2 % 2 != 0 {
            return Err(SimError::dims("dense load pair block", "even size", k2));
        }
        for q in 0..q_count {
            if directions[q].len() != params.counts()[q] {
                return Err(SimError::dims(
                    format!("dense load directions of pair {q}"),
                    params.counts()[q],
                    directions[q].len(),
                ));
            }
            if base[q].shape() != (k2, k2) || directions[q].iter().any(|d| d.shape() != (k2, k2)) {
                return Err(SimError::dims("dense load block", format!("{k2}x{k2}"), "other"));
            }
        }
        let k = k2 / 2;
        let blocks = (0..q_count)
            .map(|q| {
                let mut z = base[q].clone();
                for (p, dir) in directions[q].iter().enumerate() {
                    z += dir * C64::new(params.layer(q)[p].sin(), 0.0);
                }
                split_pair(&z, k)
            })
            .collect();
        Ok(Self {
            k,
            z0,
            guard: 0.0,
            params,
            kind: LoadKind::Dense {
                base,
                directions,
                blocks,
            },
        })
    }

    /// The same network re-evaluated at new phases.
    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        match &self.kind {
            LoadKind::Diagonal { .. } => Self::assemble(params, self.z0, self.guard),
            LoadKind::Dense { base, directions, .. } => {
                Self::dense_affine(base.clone(), directions.clone(), params, self.z0)
            }
        }
    }

    pub fn pairs(&self) -> usize {
        self.params.layers()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn z0(&self) -> f64 {
        self.z0
    }

    pub fn guard(&self) -> f64 {
        self.guard
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self.kind, LoadKind::Diagonal { .. })
    }

    /// Two-port cells of pair `q` (diagonal mode only).
    pub fn cells(&self, q: usize) -> Option<&[TwoPortZ]> {
        match &self.kind {
            LoadKind::Diagonal { cells, .. } => cells.get(q).map(|c| c.as_slice()),
            LoadKind::Dense { .. } => None,
        }
    }

    /// Block `X(q)_{n,m}` with zero-based `n, m`.
    pub fn block(&self, q: usize, n: usize, m: usize) -> Block<'_> {
        let i = nm_index(n, m);
        match &self.kind {
            LoadKind::Diagonal { diag, .. } => Block::Diag(&diag[q][i]),
            LoadKind::Dense { blocks, .. } => Block::Full(&blocks[q][i]),
        }
    }

    /// The `2K x 2K` block `Z_E(q)` of pair `q`.
    pub fn pair_block(&self, q: usize) -> CMat {
        let k = self.k;
        let mut z = CMat::zeros(2 * k, 2 * k);
        for n in 0..2 {
            for m in 0..2 {
                z.view_mut((n * k, m * k), (k, k)).copy_from(&self.block(q, n, m).to_dense());
            }
        }
        z
    }

    /// Full `2QK x 2QK` block-diagonal `Z_E(eta)`.
    pub fn assemble_full(&self) -> CMat {
        let (k2, q) = (2 * self.k, self.pairs());
        let mut z = CMat::zeros(k2 * q, k2 * q);
        for qq in 0..q {
            z.view_mut((qq * k2, qq * k2), (k2, k2)).copy_from(&self.pair_block(qq));
        }
        z
    }

    /// `dX(q)/d eta_{q,p}` as the sparse four-entry two-port derivative
    /// (diagonal mode), or `None` for dense loads.
    pub fn tangent_cell(&self, q: usize, p: usize) -> Result<Option<TwoPortZ>> {
        let flat = self.params.flat_index(q, p)?;
        Ok(match self.kind {
            LoadKind::Diagonal { .. } => Some(two_port_z_tangent_raw(self.params.values()[flat], self.z0)),
            LoadKind::Dense { .. } => None,
        })
    }

    /// Tangent block `G_{q,p}` (`2K x 2K`).
    pub fn tangent_block(&self, q: usize, p: usize) -> Result<CMat> {
        let flat = self.params.flat_index(q, p)?;
        let k = self.k;
        match &self.kind {
            LoadKind::Diagonal { .. } => {
                let d = two_port_z_tangent_raw(self.params.values()[flat], self.z0);
                let mut g = CMat::zeros(2 * k, 2 * k);
                for n in 0..2 {
                    for m in 0..2 {
                        g[(n * k + p, m * k + p)] = d.get(n, m);
                    }
                }
                Ok(g)
            }
            LoadKind::Dense { directions, .. } => {
                Ok(&directions[q][p] * C64::new(self.params.values()[flat].cos(), 0.0))
            }
        }
    }

    /// Full-size tangent `G_p = dZ_E/d eta_p` for the flat parameter index.
    pub fn tangent_full(&self, flat: usize) -> Result<CMat> {
        if flat >= self.params.total() {
            return Err(SimError::IndexOutOfRange {
                what: "flat parameter index",
                index: flat,
                valid: format!("0..{}", self.params.total()),
            });
        }
        let (q, p) = self.params.split_index(flat);
        let k2 = 2 * self.k;
        let n = k2 * self.pairs();
        let mut g = CMat::zeros(n, n);
        g.view_mut((q * k2, q * k2), (k2, k2)).copy_from(&self.tangent_block(q, p)?);
        Ok(g)
    }

    /// Phases recovered from the assembled diagonal blocks:
    /// `cos = X11 / X12`, `sin = j z0 / X12`.
    pub fn recover_phases(&self) -> Option<Vec<f64>> {
        let LoadKind::Diagonal { diag, .. } = &self.kind else {
            return None;
        };
        let mut out = Vec::with_capacity(self.params.total());
        for layer in diag {
            for (x11, x12) in layer[0].iter().zip(&layer[1]) {
                let cos = (x11 / x12).re;
                let sin = (J * self.z0 / x12).re;
                out.push(sin.atan2(cos).rem_euclid(std::f64::consts::TAU));
            }
        }
        Some(out)
    }
}

fn split_pair(z: &CMat, k: usize) -> [CMat; 4] {
    let view = |r: usize, c: usize| z.view((r * k, c * k), (k, k)).into_owned();
    [view(0, 0), view(0, 1), view(1, 0), view(1, 1)]
}

/// Count of entries that are not exactly zero.
pub fn structural_nonzeros(m: &CMat) -> usize {
    m.iter().filter(|z| **z != ZERO).count()
}
