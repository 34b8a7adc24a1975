//! Forward solvers for `T = (Z_EE + Z_E)^-1`: the dense reference, the
//! block-banded recursions for the last block row and first block column,
//! the unilateral recursions, and the ideal phase-shift cascade.
//!
//! Layers are zero-based, `0..2Q`. Strip `t[r]` is block `(2Q-1, r)` of `T`
//! and `u[r]` is block `(r, 0)`, so the end-to-end block `T_{2Q,1}` is
//! `t[0] = u[2Q-1]`.

use std::path::Path;

use crate::coupling::{CouplingSet, BLOCK_RCOND_MIN};
use crate::error::{Result, SimError};
use crate::linalg::{
    all_finite, diag_rcond, from_diag, gemm_into, inverse_with_rcond, matmul, mul_diag_left, mul_diag_right, norm1,
    norm_inf, write_matrix, CMat, C64, ONE, ZERO,
};
use crate::load::{Block, LoadNetwork, ParamVector};

/// Residual bound of the dense solve, `||Z T - I||_inf`.
pub const DENSE_RESIDUAL_MAX: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    Dense,
    Iterative,
    Unilateral,
    IdealCascade,
}

/// Strips of `T` produced by one solver.
#[derive(Debug, Clone)]
pub struct TransferState {
    pub t: Vec<CMat>,
    pub u: Vec<CMat>,
    /// `m[0] = 0`, `m[1] = I`, and `t[r] = t[0] m[r + 1]`. Empty unless
    /// produced by the iterative solver.
    pub m: Vec<CMat>,
    pub solver: Solver,
}

impl TransferState {
    pub fn layers(&self) -> usize {
        self.t.len()
    }

    /// End-to-end block `T_{2Q,1}`.
    pub fn transfer(&self) -> &CMat {
        &self.t[0]
    }

    /// `R_q = [t[2q], t[2q+1]]`, `K x 2K`.
    pub fn r_q(&self, q: usize) -> CMat {
        let k = self.t[0].nrows();
        let mut r = CMat::zeros(k, 2 * k);
        r.view_mut((0, 0), (k, k)).copy_from(&self.t[2 * q]);
        r.view_mut((0, k), (k, k)).copy_from(&self.t[2 * q + 1]);
        r
    }

    /// `S_q = [u[2q]; u[2q+1]]`, `2K x K`.
    pub fn s_q(&self, q: usize) -> CMat {
        let k = self.u[0].ncols();
        let mut s = CMat::zeros(2 * k, k);
        s.view_mut((0, 0), (k, k)).copy_from(&self.u[2 * q]);
        s.view_mut((k, 0), (k, k)).copy_from(&self.u[2 * q + 1]);
        s
    }

    /// Writes `T_<r>.txt` and `U_<r>.txt` (one-based `r`) into `dir`.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| SimError::io(format!("creating {}", dir.display()), e))?;
        for (r, m) in self.t.iter().enumerate() {
            write_matrix(&dir.join(format!("T_{}.txt", r + 1)), m)?;
        }
        for (r, m) in self.u.iter().enumerate() {
            write_matrix(&dir.join(format!("U_{}.txt", r + 1)), m)?;
        }
        Ok(())
    }
}

fn check_compatible(coupling: &CouplingSet, load: &LoadNetwork) -> Result<()> {
    if coupling.k() != load.k() {
        return Err(SimError::dims("layer size K of coupling vs load", coupling.k(), load.k()));
    }
    if coupling.pairs() != load.pairs() {
        return Err(SimError::dims("layer pairs Q of coupling vs load", coupling.pairs(), load.pairs()));
    }
    Ok(())
}

/// The assembled system `Z_EE + Z_E(eta)`.
pub fn system_matrix(coupling: &CouplingSet, load: &LoadNetwork) -> Result<CMat> {
    check_compatible(coupling, load)?;
    Ok(coupling.assemble_full() + load.assemble_full())
}

fn extract_strips(full: &CMat, k: usize, layers: usize, solver: Solver) -> TransferState {
    let last = layers - 1;
    let t = (0..layers)
        .map(|r| full.view((last * k, r * k), (k, k)).into_owned())
        .collect();
    let u = (0..layers).map(|r| full.view((r * k, 0), (k, k)).into_owned()).collect();
    TransferState {
        t,
        u,
        m: Vec::new(),
        solver,
    }
}

/// Full inverse of the system with its strips.
#[derive(Debug, Clone)]
pub struct DenseSolution {
    pub full: CMat,
    pub state: TransferState,
    /// 1-norm reciprocal condition number of `Z_EE + Z_E`.
    pub rcond: f64,
}

/// Dense reference solve: pivoted LU against the identity, then a residual check.
pub fn dense_t(coupling: &CouplingSet, load: &LoadNetwork) -> Result<DenseSolution> {
    let z = system_matrix(coupling, load)?;
    let n = z.nrows();
    let full = z
        .clone()
        .lu()
        .solve(&CMat::identity(n, n))
        .ok_or(SimError::SingularSystem { residual: f64::INFINITY })?;
    let mut residual = matmul(&z, &full);
    for i in 0..n {
        residual[(i, i)] -= ONE;
    }
    let res = norm_inf(&residual);
    if !(res <= DENSE_RESIDUAL_MAX) {
        return Err(SimError::SingularSystem { residual: res });
    }
    let rcond = 1.0 / (norm1(&z) * norm1(&full));
    log::debug!("dense solve: N = {n}, cond_1 = {:.3e}, residual = {res:.2e}", 1.0 / rcond);
    let state = extract_strips(&full, coupling.k(), coupling.layers(), Solver::Dense);
    Ok(DenseSolution { full, state, rcond })
}

/// Owned inverse of an off-diagonal block.
enum Inverse<'a> {
    Diag(Vec<C64>),
    Full(&'a CMat),
    Owned(CMat),
}

impl Inverse<'_> {
    fn block(&self) -> Block<'_> {
        match self {
            Inverse::Diag(d) => Block::Diag(d),
            Inverse::Full(m) => Block::Full(m),
            Inverse::Owned(m) => Block::Full(m),
        }
    }
}

/// `m * b`.
fn right(m: &CMat, b: Block<'_>) -> CMat {
    match b {
        Block::Diag(d) => mul_diag_right(m, d),
        Block::Full(f) => matmul(m, f),
    }
}

/// `b * m`.
fn left(b: Block<'_>, m: &CMat) -> CMat {
    match b {
        Block::Diag(d) => mul_diag_left(d, m),
        Block::Full(f) => matmul(f, m),
    }
}

/// `acc += m * b`.
fn add_right(acc: &mut CMat, m: &CMat, b: Block<'_>) {
    match b {
        Block::Diag(d) => {
            for (j, mut col) in acc.column_iter_mut().enumerate() {
                col.axpy(d[j], &m.column(j), ONE);
            }
        }
        Block::Full(f) => gemm_into(ONE, m, f, ONE, acc),
    }
}

/// `acc += b * m`.
fn add_left(acc: &mut CMat, b: Block<'_>, m: &CMat) {
    match b {
        Block::Diag(d) => {
            for (mut a, col) in acc.column_iter_mut().zip(m.column_iter()) {
                for i in 0..d.len() {
                    a[i] += d[i] * col[i];
                }
            }
        }
        Block::Full(f) => gemm_into(ONE, f, m, ONE, acc),
    }
}

/// Band view of `Z_EE + Z_E` over the `2Q` layers.
struct Band<'a> {
    coupling: &'a CouplingSet,
    load: &'a LoadNetwork,
    layers: usize,
}

impl<'a> Band<'a> {
    fn new(coupling: &'a CouplingSet, load: &'a LoadNetwork) -> Result<Self> {
        check_compatible(coupling, load)?;
        Ok(Self {
            coupling,
            load,
            layers: coupling.layers(),
        })
    }

    /// Load part of diagonal block `r`.
    fn diag_load(&self, r: usize) -> Block<'a> {
        self.load.block(r / 2, r % 2, r % 2)
    }

    fn right_diag(&self, m: &CMat, r: usize) -> CMat {
        let mut out = matmul(m, self.coupling.ee_diag(r));
        add_right(&mut out, m, self.diag_load(r));
        out
    }

    fn left_diag(&self, r: usize, m: &CMat) -> CMat {
        let mut out = matmul(self.coupling.ee_diag(r), m);
        add_left(&mut out, self.diag_load(r), m);
        out
    }

    /// Block `Z(r, r+1)`, `None` when it is an all-zero `W12`.
    fn sup(&self, r: usize) -> Option<Block<'a>> {
        if r % 2 == 0 {
            Some(self.load.block(r / 2, 0, 1))
        } else {
            let w12 = &self.coupling.channels[(r - 1) / 2].w12;
            if w12.iter().all(|z| *z == ZERO) {
                None
            } else {
                Some(Block::Full(w12))
            }
        }
    }

    /// Inverse of block `Z(r+1, r)`: `X21` of pair `r/2` or `W21` of channel `(r-1)/2`.
    fn sub_inv(&self, r: usize) -> Result<Inverse<'a>> {
        if r % 2 == 0 {
            let q = r / 2;
            invert_block(self.load.block(q, 1, 0), q + 1, "X21")
        } else {
            Ok(Inverse::Full(self.coupling.w21_inverse((r - 1) / 2)?))
        }
    }
}

fn invert_block(b: Block<'_>, q: usize, role: &'static str) -> Result<Inverse<'static>> {
    match b {
        Block::Diag(d) => {
            let rcond = diag_rcond(d);
            if !(rcond >= BLOCK_RCOND_MIN) {
                return Err(SimError::BlockSingular { q, role, rcond });
            }
            Ok(Inverse::Diag(d.iter().map(|z| ONE / z).collect()))
        }
        Block::Full(m) => Ok(Inverse::Owned(invert_dense(m, q, role)?)),
    }
}

fn invert_dense(m: &CMat, q: usize, role: &'static str) -> Result<CMat> {
    match inverse_with_rcond(m) {
        Some((inv, rcond)) if rcond >= BLOCK_RCOND_MIN => Ok(inv),
        Some((_, rcond)) => Err(SimError::BlockSingular { q, role, rcond }),
        None => Err(SimError::BlockSingular { q, role, rcond: 0.0 }),
    }
}

/// Runs the `M` recursion. Returns `m` (`m[0] = 0`, `m[1] = I`),
/// the sub-diagonal inverses, and the final bracket whose inverse is `t[0]`.
fn m_recursion<'a>(band: &Band<'a>) -> Result<(Vec<CMat>, Vec<Inverse<'a>>, CMat)> {
    let k = band.coupling.k();
    let n = band.layers;
    let mut m = Vec::with_capacity(n + 1);
    m.push(CMat::zeros(k, k));
    m.push(CMat::identity(k, k));
    let mut invs = Vec::with_capacity(n - 1);
    for c in 0..n - 1 {
        // column c of t Z = 0:  m_{c+1} = -(m_{c-1} Z(c-1,c) + m_c D_c) Z(c+1,c)^-1
        let mut acc = if c == 0 {
            band.coupling.ee_diag(0).clone() + band.diag_load(0).to_dense()
        } else {
            band.right_diag(&m[c + 1], c)
        };
        if c >= 1 {
            if let Some(s) = band.sup(c - 1) {
                add_right(&mut acc, &m[c], s);
            }
        }
        let inv = band.sub_inv(c)?;
        let mut next = right(&acc, inv.block());
        next.neg_mut();
        m.push(next);
        invs.push(inv);
    }
    let mut bracket = band.right_diag(&m[n], n - 1);
    if let Some(s) = band.sup(n - 2) {
        add_right(&mut bracket, &m[n - 1], s);
    }
    Ok((m, invs, bracket))
}

fn u_step(band: &Band<'_>, invs: &[Inverse<'_>], u: &mut [CMat], r: usize) {
    // row r of Z u = 0:  u_{r-1} = -Z(r,r-1)^-1 (D_r u_r + Z(r,r+1) u_{r+1})
    let mut acc = band.left_diag(r, &u[r]);
    if r + 1 < u.len() {
        if let Some(s) = band.sup(r) {
            add_left(&mut acc, s, &u[r + 1]);
        }
    }
    let mut prev = left(invs[r - 1].block(), &acc);
    prev.neg_mut();
    u[r - 1] = prev;
}

/// Last block row of `T` through the `M` recursion; never forms the full inverse.
pub fn iterative_t(coupling: &CouplingSet, load: &LoadNetwork) -> Result<TransferState> {
    let band = Band::new(coupling, load)?;
    let (m, _, bracket) = m_recursion(&band)?;
    let t1 = invert_dense(&bracket, coupling.pairs(), "T1 bracket")?;
    let t = m[1..].iter().map(|mr| matmul(&t1, mr)).collect();
    Ok(TransferState {
        t,
        u: Vec::new(),
        m,
        solver: Solver::Iterative,
    })
}

/// First block column of `T` by backward recursion from `u[2Q-1] = t1`.
pub fn iterative_u(coupling: &CouplingSet, load: &LoadNetwork, t1: &CMat) -> Result<Vec<CMat>> {
    let band = Band::new(coupling, load)?;
    let n = band.layers;
    let invs = (0..n - 1).map(|r| band.sub_inv(r)).collect::<Result<Vec<_>>>()?;
    let mut u = vec![CMat::zeros(0, 0); n];
    u[n - 1] = t1.clone();
    for r in (1..n).rev() {
        u_step(&band, &invs, &mut u, r);
    }
    Ok(u)
}

/// Both strip families from one pass of the recursions.
pub fn iterative_strips(coupling: &CouplingSet, load: &LoadNetwork) -> Result<TransferState> {
    let band = Band::new(coupling, load)?;
    let n = band.layers;
    let (m, invs, bracket) = m_recursion(&band)?;
    let t1 = invert_dense(&bracket, coupling.pairs(), "T1 bracket")?;
    let t: Vec<CMat> = m[1..].iter().map(|mr| matmul(&t1, mr)).collect();
    let mut u = vec![CMat::zeros(0, 0); n];
    u[n - 1] = t1;
    for r in (1..n).rev() {
        u_step(&band, &invs, &mut u, r);
    }
    Ok(TransferState {
        t,
        u,
        m,
        solver: Solver::Iterative,
    })
}

/// Strips projected onto an output map `A` (`M x K`, acting on the last
/// layer) and an input matrix `B` (`K x I`, feeding the first layer):
/// `a_t[r] = A t[r]`, `u_b[r] = u[r] B`, and the output `y = A t[0] B`.
#[derive(Debug, Clone)]
pub struct ProjectedStrips {
    pub a_t: Vec<CMat>,
    pub u_b: Vec<CMat>,
    pub y: CMat,
}

fn check_projection(k: usize, a: &CMat, b: &CMat) -> Result<()> {
    if a.ncols() != k {
        return Err(SimError::dims("output map A columns", k, a.ncols()));
    }
    if b.nrows() != k {
        return Err(SimError::dims("input matrix B rows", k, b.nrows()));
    }
    Ok(())
}

/// `A T_{2Q,1} B` through the `M` recursion and one factorization.
pub fn projected_output(coupling: &CouplingSet, load: &LoadNetwork, a: &CMat, b: &CMat) -> Result<CMat> {
    check_projection(coupling.k(), a, b)?;
    let band = Band::new(coupling, load)?;
    let (_, _, bracket) = m_recursion(&band)?;
    let t1_b = solve_bracket(&bracket, b, coupling.pairs())?;
    Ok(matmul(a, &t1_b))
}

fn solve_bracket(bracket: &CMat, rhs: &CMat, q: usize) -> Result<CMat> {
    match bracket.clone().lu().solve(rhs) {
        Some(x) if all_finite(&x) => Ok(x),
        _ => Err(SimError::BlockSingular {
            q,
            role: "T1 bracket",
            rcond: 0.0,
        }),
    }
}

/// Projected strips with `O(Q K^3 + Q K^2 (M + I))` work.
pub fn projected_strips(coupling: &CouplingSet, load: &LoadNetwork, a: &CMat, b: &CMat) -> Result<ProjectedStrips> {
    check_projection(coupling.k(), a, b)?;
    let band = Band::new(coupling, load)?;
    let n = band.layers;
    let q = coupling.pairs();
    let (m, invs, bracket) = m_recursion(&band)?;
    let t1_b = solve_bracket(&bracket, b, q)?;
    // A t1 = A bracket^-1, from the transposed system.
    let a_t1 = solve_bracket(&bracket.transpose(), &a.transpose(), q)?.transpose();
    let a_t: Vec<CMat> = m[1..].iter().map(|mr| matmul(&a_t1, mr)).collect();
    let y = matmul(a, &t1_b);
    let mut u_b = vec![CMat::zeros(0, 0); n];
    u_b[n - 1] = t1_b;
    for r in (1..n).rev() {
        u_step(&band, &invs, &mut u_b, r);
    }
    Ok(ProjectedStrips { a_t, u_b, y })
}

/// Unilateral recursion output.
#[derive(Debug, Clone)]
pub struct UnilateralState {
    pub omega: Vec<CMat>,
    pub zeta: Vec<CMat>,
    /// `X21(q) (X11(q) + W22(q-1))^-1` per pair.
    pub phase: Vec<CMat>,
    pub state: TransferState,
}

/// Strips under `W12 = 0` from the `Omega` / `zeta` recursions.
pub fn unilateral_t(coupling: &CouplingSet, load: &LoadNetwork) -> Result<UnilateralState> {
    check_compatible(coupling, load)?;
    for (c, ch) in coupling.channels.iter().enumerate() {
        let norm = crate::linalg::frob(&ch.w12);
        if norm > 0.0 {
            return Err(SimError::UnilateralViolation { q: c + 1, norm });
        }
    }
    let pairs = coupling.pairs();
    let dense = |b: Block<'_>| b.to_dense();
    let mut omega = Vec::with_capacity(pairs);
    let mut zeta = Vec::with_capacity(pairs);
    let mut phase = Vec::with_capacity(pairs);
    let mut dout_inv_x21 = Vec::with_capacity(pairs);
    for q in 0..pairs {
        let x11 = dense(load.block(q, 0, 0));
        let x12 = dense(load.block(q, 0, 1));
        let x21 = dense(load.block(q, 1, 0));
        let x22 = dense(load.block(q, 1, 1));
        let d_in = coupling.ee_diag(2 * q) + x11;
        let d_out = coupling.ee_diag(2 * q + 1) + x22;
        let d_in_inv = invert_dense(&d_in, q + 1, "X11+W22")?;
        let d_out_inv = invert_dense(&d_out, q + 1, "X22+W11")?;
        let ph = matmul(&x21, &d_in_inv);
        omega.push(invert_dense(&(&d_out - matmul(&ph, &x12)), q + 1, "Omega")?);
        let out_x21 = matmul(&d_out_inv, &x21);
        zeta.push(invert_dense(&(&d_in - matmul(&x12, &out_x21)), q + 1, "zeta")?);
        phase.push(ph);
        dout_inv_x21.push(out_x21);
    }
    let n = 2 * pairs;
    let mut t = vec![CMat::zeros(0, 0); n];
    t[n - 1] = omega[pairs - 1].clone();
    for q in (0..pairs).rev() {
        let mut tin = matmul(&t[2 * q + 1], &phase[q]);
        tin.neg_mut();
        if q > 0 {
            let w21 = &coupling.channels[q - 1].w21;
            let mut prev = matmul(&matmul(&tin, w21), &omega[q - 1]);
            prev.neg_mut();
            t[2 * q - 1] = prev;
        }
        t[2 * q] = tin;
    }
    let mut u = vec![CMat::zeros(0, 0); n];
    u[0] = zeta[0].clone();
    for q in 0..pairs {
        let mut out = matmul(&dout_inv_x21[q], &u[2 * q]);
        out.neg_mut();
        if q + 1 < pairs {
            let w21 = &coupling.channels[q].w21;
            let mut next = matmul(&zeta[q + 1], &matmul(w21, &out));
            next.neg_mut();
            u[2 * q + 2] = next;
        }
        u[2 * q + 1] = out;
    }
    Ok(UnilateralState {
        omega,
        zeta,
        phase,
        state: TransferState {
            t,
            u,
            m: Vec::new(),
            solver: Solver::Unilateral,
        },
    })
}

fn check_cascade(w21: &[CMat], params: &ParamVector) -> Result<usize> {
    let q = params.layers();
    if w21.len() + 1 != q {
        return Err(SimError::dims("W21 list length (Q - 1)", q - 1, w21.len()));
    }
    let k = params.counts()[0];
    if params.counts().iter().any(|&c| c != k) {
        return Err(SimError::dims("ideal cascade parameters per pair", k, format!("{:?}", params.counts())));
    }
    if let Some(w) = w21.iter().find(|w| w.shape() != (k, k)) {
        return Err(SimError::dims("ideal cascade W21", format!("{k}x{k}"), format!("{:?}", w.shape())));
    }
    Ok(k)
}

fn phases(values: &[f64]) -> Vec<C64> {
    values.iter().map(|&eta| C64::from_polar(1.0, eta)).collect()
}

/// Ideal-element transfer block
/// `T_{2Q,1} = c^Q Y_Q (-W21(Q-1)) Y_{Q-1} ... (-W21(1)) Y_1`,
/// with `c = -1/(2 z0)` and `Y_q = diag(e^{j eta_q})`. Phases in the guard
/// band are allowed here.
pub fn ideal_cascade(w21: &[CMat], params: &ParamVector, z0: f64) -> Result<CMat> {
    let k = check_cascade(w21, params)?;
    let c = C64::new(-0.5 / z0, 0.0);
    let mut acc = from_diag(&phases(params.layer(0)));
    acc *= c;
    for (q, w) in w21.iter().enumerate() {
        let mut next = matmul(w, &acc);
        let y = phases(params.layer(q + 1));
        crate::linalg::scale_rows(&mut next, &y);
        next *= -c;
        acc = next;
    }
    debug_assert_eq!(acc.nrows(), k);
    Ok(acc)
}

/// Intermediates of the ideal forward pass for a block of inputs `B` (`K x I`):
/// `v[0] = B`, `o[q] = c Y_q v[q]`, `v[q+1] = -W21(q) o[q]`.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub v: Vec<CMat>,
    pub o: Vec<CMat>,
}

impl ForwardPass {
    pub fn output(&self) -> &CMat {
        self.o.last().expect("at least one layer pair")
    }
}

pub fn forward_prop(w21: &[CMat], params: &ParamVector, b: &CMat, z0: f64) -> Result<ForwardPass> {
    let k = check_cascade(w21, params)?;
    if b.nrows() != k {
        return Err(SimError::dims("forward input rows", k, b.nrows()));
    }
    let c = C64::new(-0.5 / z0, 0.0);
    let pairs = params.layers();
    let mut v = Vec::with_capacity(pairs);
    let mut o: Vec<CMat> = Vec::with_capacity(pairs);
    for q in 0..pairs {
        let vq = if q == 0 {
            b.clone()
        } else {
            let mut x = matmul(&w21[q - 1], &o[q - 1]);
            x.neg_mut();
            x
        };
        let mut oq = mul_diag_left(&phases(params.layer(q)), &vq);
        oq *= c;
        v.push(vq);
        o.push(oq);
    }
    Ok(ForwardPass { v, o })
}

/// `H_Z = (Z_RT - Z'_RE T_{2Q,1} Z'_ET) / (4 z0)`, with `Z_RT = 0` when absent.
pub fn end_to_end(z_rt: Option<&CMat>, z_re: &CMat, t21: &CMat, z_et: &CMat, z0: f64) -> Result<CMat> {
    if z_re.ncols() != t21.nrows() {
        return Err(SimError::dims("Z'_RE columns vs T rows", t21.nrows(), z_re.ncols()));
    }
    if t21.ncols() != z_et.nrows() {
        return Err(SimError::dims("T columns vs Z'_ET rows", t21.ncols(), z_et.nrows()));
    }
    let mut h = matmul(&matmul(z_re, t21), z_et);
    h.neg_mut();
    if let Some(rt) = z_rt {
        if rt.shape() != h.shape() {
            return Err(SimError::dims("Z_RT", format!("{:?}", h.shape()), format!("{:?}", rt.shape())));
        }
        h += rt;
    }
    h *= C64::new(0.25 / z0, 0.0);
    Ok(h)
}
