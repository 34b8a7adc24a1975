//! Coupling blocks of `Z_EE` and the boundary matrices `Z'_RE`, `Z'_ET`.
//!
//! Layers are numbered `0..2Q` (zero-based). Layer pair `q` (zero-based) owns
//! layers `2q` and `2q+1`; channel `c` in `0..Q-1` couples layer `2c+1` to
//! layer `2c+2` through the wireless blocks `W11, W12, W21, W22`.

mod dipole;
mod synth;

use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::linalg::{frob, inverse_with_rcond, read_matrix, write_matrix, CMat, C64};

pub use dipole::{
    build_coupling, build_ideal_coupling, mutual_impedance, ArrayGrid, Dipole, DipoleGeometry, TransmitterGrid,
    FREE_SPACE_IMPEDANCE, SPEED_OF_LIGHT,
};
pub use synth::{synth_random_instance, SynthDims, SynthLoad, SynthOptions};

/// Singularity threshold on the reciprocal condition of block inverses.
pub const BLOCK_RCOND_MIN: f64 = 1e-12;

/// The four wireless blocks between facing layers of adjacent pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelBlocks {
    pub w11: CMat,
    pub w12: CMat,
    pub w21: CMat,
    pub w22: CMat,
}

/// Where a coupling set came from.
#[derive(Debug, Clone, PartialEq)]
pub enum InstanceSource {
    DipoleModel,
    File(std::path::PathBuf),
    Synthetic { seed: u64 },
}

#[derive(Debug, Clone)]
pub struct CouplingSet {
    k: usize,
    /// Self/mutual block of the input layer, `W(0)_{2,2}`.
    pub w22_first: CMat,
    /// Self/mutual block of the output layer, `W(Q)_{1,1}`.
    pub w11_last: CMat,
    pub channels: Vec<ChannelBlocks>,
    /// Receiver coupling to the output layer, `M x K`.
    pub z_re: CMat,
    /// Input layer coupling to the transmitter, `K x L`.
    pub z_et: CMat,
    pub source: InstanceSource,
    w21_inv: OnceLock<Vec<std::result::Result<CMat, f64>>>,
}

impl CouplingSet {
    pub fn new(
        w22_first: CMat,
        w11_last: CMat,
        channels: Vec<ChannelBlocks>,
        z_re: CMat,
        z_et: CMat,
        source: InstanceSource,
    ) -> Result<Self> {
        let k = w22_first.nrows();
        if k == 0 {
            return Err(SimError::InvalidValue("layer size K must be positive".into()));
        }
        let square = |m: &CMat, what: &str| -> Result<()> {
            if m.shape() != (k, k) {
                Err(SimError::dims(what.to_string(), format!("{k}x{k}"), format!("{:?}", m.shape())))
            } else {
                Ok(())
            }
        };
        square(&w22_first, "W(0)_22")?;
        square(&w11_last, "W(Q)_11")?;
        for (c, ch) in channels.iter().enumerate() {
            for (m, name) in [(&ch.w11, "W11"), (&ch.w12, "W12"), (&ch.w21, "W21"), (&ch.w22, "W22")] {
                square(m, &format!("channel {c} {name}"))?;
            }
        }
        if z_re.ncols() != k || z_re.nrows() == 0 {
            return Err(SimError::dims("Z'_RE", format!("Mx{k}"), format!("{:?}", z_re.shape())));
        }
        if z_et.nrows() != k || z_et.ncols() == 0 {
            return Err(SimError::dims("Z'_ET", format!("{k}xL"), format!("{:?}", z_et.shape())));
        }
        Ok(Self {
            k,
            w22_first,
            w11_last,
            channels,
            z_re,
            z_et,
            source,
            w21_inv: OnceLock::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of layer pairs `Q`.
    pub fn pairs(&self) -> usize {
        self.channels.len() + 1
    }

    pub fn layers(&self) -> usize {
        2 * self.pairs()
    }

    /// Number of receiver ports `M`.
    pub fn outputs(&self) -> usize {
        self.z_re.nrows()
    }

    /// Diagonal block of `Z_EE` for layer `r` (zero-based).
    pub fn ee_diag(&self, r: usize) -> &CMat {
        let q = self.pairs();
        assert!(r < 2 * q, "layer {r} out of range");
        if r == 0 {
            &self.w22_first
        } else if r % 2 == 1 {
            let c = (r - 1) / 2;
            if c + 1 == q {
                &self.w11_last
            } else {
                &self.channels[c].w11
            }
        } else {
            &self.channels[r / 2 - 1].w22
        }
    }

    /// Full `2QK x 2QK` `Z_EE`.
    pub fn assemble_full(&self) -> CMat {
        let k = self.k;
        let n = self.layers() * k;
        let mut z = CMat::zeros(n, n);
        for r in 0..self.layers() {
            z.view_mut((r * k, r * k), (k, k)).copy_from(self.ee_diag(r));
        }
        for (c, ch) in self.channels.iter().enumerate() {
            let (a, b) = (2 * c + 1, 2 * c + 2);
            z.view_mut((a * k, b * k), (k, k)).copy_from(&ch.w12);
            z.view_mut((b * k, a * k), (k, k)).copy_from(&ch.w21);
        }
        z
    }

    /// True when every `W12` is exactly zero.
    pub fn is_unilateral(&self) -> bool {
        self.channels.iter().all(|ch| ch.w12.iter().all(|z| *z == C64::new(0.0, 0.0)))
    }

    /// Copy with every `W12` replaced by zero.
    pub fn with_w12_zeroed(&self) -> Self {
        let mut out = self.clone();
        for ch in &mut out.channels {
            ch.w12.fill(C64::new(0.0, 0.0));
        }
        out.w21_inv = OnceLock::new();
        out
    }

    /// Ideal T-RIS coupling: matched self blocks `z0 I`, no intra-layer
    /// coupling, `W12 = 0`; the inter-layer `W21` and the boundary matrices
    /// are kept.
    pub fn idealized(&self, z0: f64) -> Self {
        let k = self.k;
        let matched = CMat::identity(k, k) * C64::new(z0, 0.0);
        let channels = self
            .channels
            .iter()
            .map(|ch| ChannelBlocks {
                w11: matched.clone(),
                w12: CMat::zeros(k, k),
                w21: ch.w21.clone(),
                w22: matched.clone(),
            })
            .collect();
        Self {
            k,
            w22_first: matched.clone(),
            w11_last: matched,
            channels,
            z_re: self.z_re.clone(),
            z_et: self.z_et.clone(),
            source: self.source.clone(),
            w21_inv: OnceLock::new(),
        }
    }

    /// True when the set has the ideal structure for impedance `z0`.
    pub fn is_ideal(&self, z0: f64) -> bool {
        let matched = CMat::identity(self.k, self.k) * C64::new(z0, 0.0);
        self.is_unilateral()
            && self.w22_first == matched
            && self.w11_last == matched
            && self.channels.iter().all(|ch| ch.w11 == matched && ch.w22 == matched)
    }

    /// `W21` of every channel, in cascade order.
    pub fn w21_list(&self) -> Vec<CMat> {
        self.channels.iter().map(|ch| ch.w21.clone()).collect()
    }

    /// Cached inverse of channel `c`'s `W21`.
    pub fn w21_inverse(&self, c: usize) -> Result<&CMat> {
        let cache = self.w21_inv.get_or_init(|| {
            self.channels
                .iter()
                .map(|ch| match inverse_with_rcond(&ch.w21) {
                    Some((inv, rcond)) if rcond >= BLOCK_RCOND_MIN => Ok(inv),
                    Some((_, rcond)) => Err(rcond),
                    None => Err(0.0),
                })
                .collect()
        });
        cache[c].as_ref().map_err(|&rcond| SimError::BlockSingular {
            q: c + 1,
            role: "W21",
            rcond,
        })
    }

    /// Largest `||W12||_F` over channels.
    pub fn max_w12_norm(&self) -> (usize, f64) {
        self.channels
            .iter()
            .enumerate()
            .map(|(c, ch)| (c, frob(&ch.w12)))
            .fold((0, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc })
    }

    /// Writes one matrix file per block plus `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| SimError::io(format!("creating {}", dir.display()), e))?;
        let mut entries = Vec::new();
        let mut put = |role: &str, index: Option<usize>, m: &CMat| -> Result<()> {
            let file = match index {
                Some(i) => format!("{role}_{i}.txt"),
                None => format!("{role}.txt"),
            };
            write_matrix(&dir.join(&file), m)?;
            entries.push(ManifestEntry {
                role: role.to_string(),
                channel: index,
                file,
                rows: m.nrows(),
                cols: m.ncols(),
            });
            Ok(())
        };
        put("W22_first", None, &self.w22_first)?;
        put("W11_last", None, &self.w11_last)?;
        for (c, ch) in self.channels.iter().enumerate() {
            put("W11", Some(c + 1), &ch.w11)?;
            put("W12", Some(c + 1), &ch.w12)?;
            put("W21", Some(c + 1), &ch.w21)?;
            put("W22", Some(c + 1), &ch.w22)?;
        }
        put("ZRE", None, &self.z_re)?;
        put("ZET", None, &self.z_et)?;
        let manifest = Manifest {
            pairs: self.pairs(),
            k: self.k,
            blocks: entries,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let path = dir.join("manifest.json");
        fs::write(&path, text).map_err(|e| SimError::io(format!("writing {}", path.display()), e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| SimError::io(format!("reading {}", path.display()), e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| SimError::Parse {
            file: path.clone(),
            message: e.to_string(),
        })?;
        let find = |role: &str, channel: Option<usize>| -> Result<CMat> {
            let entry = manifest
                .blocks
                .iter()
                .find(|e| e.role == role && e.channel == channel)
                .ok_or_else(|| SimError::Parse {
                    file: path.clone(),
                    message: format!("missing block {role} {channel:?}"),
                })?;
            let m = read_matrix(&dir.join(&entry.file))?;
            if m.shape() != (entry.rows, entry.cols) {
                return Err(SimError::dims(
                    format!("block file {}", entry.file),
                    format!("{}x{}", entry.rows, entry.cols),
                    format!("{:?}", m.shape()),
                ));
            }
            Ok(m)
        };
        let channels = (1..manifest.pairs)
            .map(|c| {
                Ok(ChannelBlocks {
                    w11: find("W11", Some(c))?,
                    w12: find("W12", Some(c))?,
                    w21: find("W21", Some(c))?,
                    w22: find("W22", Some(c))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let set = Self::new(
            find("W22_first", None)?,
            find("W11_last", None)?,
            channels,
            find("ZRE", None)?,
            find("ZET", None)?,
            InstanceSource::File(dir.to_path_buf()),
        )?;
        if set.k != manifest.k {
            return Err(SimError::dims("manifest K", manifest.k, set.k));
        }
        Ok(set)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    pairs: usize,
    k: usize,
    blocks: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    role: String,
    channel: Option<usize>,
    file: String,
    rows: usize,
    cols: usize,
}
