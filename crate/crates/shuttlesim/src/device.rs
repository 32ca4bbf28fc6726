//! Device electrostatics: capacitance blocks in, tunneling energetics and
//! forces out.
//!
//! The device is two metallic shuttles between a grounded source and a driven
//! drain electrode, with an optional set of `g` biased gates. Everything the
//! rest of the toolkit needs (junction charging energies, pump coefficients,
//! force matrices, voltage coupling vectors) is derived once from the partial
//! capacitance matrix and its spatial derivatives at the rest position.

use crate::drive::DriveWaveform;
use crate::linalg::Mat;

/// Elementary charge in coulombs.
pub const Q_E: f64 = 1.602176634e-19;
/// Boltzmann constant in joules per kelvin.
pub const K_B: f64 = 1.380649e-23;

/// Junction incidence matrix: row `j` is the change of the two shuttle
/// electron numbers when one electron tunnels forward through junction `j`
/// (source -> shuttle 1 -> shuttle 2 -> drain).
pub const T_MAT: [[f64; 2]; 3] = [[1.0, 0.0], [-1.0, 1.0], [0.0, -1.0]];

/// Integer view of [`T_MAT`] for charge bookkeeping.
pub const T_MAT_I: [[i64; 2]; 3] = [[1, 0], [-1, 1], [0, -1]];

/// Integer coupling matrices linking the ground-state energies to the
/// electron-number dependence of the free-energy change. `THETA[j]` is the
/// 3x2 matrix for junction `j`; it satisfies `E0 * THETA[j] = q^2 T_j Cs^-1`.
pub const THETA: [[[i64; 2]; 3]; 3] = [
    [[2, 1], [0, -1], [0, 1]],
    [[-1, -1], [-1, 1], [1, 1]],
    [[-1, 0], [1, 0], [-1, -2]],
];

/// Tunneling direction through a junction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dir {
    Forward,
    Backward,
}

impl Dir {
    #[inline]
    pub fn sign(self) -> f64 {
        match self {
            Dir::Forward => 1.0,
            Dir::Backward => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DeviceError {
    BadShape {
        block: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    NotSymmetric(&'static str),
    NotPositiveDefinite(&'static str),
    Singular(&'static str),
    NonPositive(&'static str),
}

impl std::fmt::Display for DeviceError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DeviceError::BadShape {
                block,
                expected,
                got,
            } => write!(
                f,
                "capacitance block `{block}` has shape {}x{}, expected {}x{}",
                got.0, got.1, expected.0, expected.1
            ),
            DeviceError::NotSymmetric(b) => write!(f, "capacitance block `{b}` is not symmetric"),
            DeviceError::NotPositiveDefinite(b) => {
                write!(f, "capacitance matrix `{b}` is not positive definite")
            }
            DeviceError::Singular(b) => write!(f, "matrix `{b}` is singular"),
            DeviceError::NonPositive(what) => write!(f, "`{what}` must be strictly positive"),
        }
    }
}

impl std::error::Error for DeviceError {}

/// One set of capacitance blocks (values or spatial derivatives).
///
/// Sign convention is the Maxwell capacitance matrix: diagonal entries are
/// total incident capacitance, off-diagonal entries are minus the mutual
/// capacitance. Units are farads for the values and farads per meter for the
/// derivative sets.
#[derive(Debug, Clone, PartialEq)]
pub struct CapacitanceBlocks {
    /// 2x2 shuttle block.
    pub c_ss: Mat,
    /// g x 2 gate-shuttle coupling.
    pub c_gs: Mat,
    /// g x g gate block.
    pub c_gg: Mat,
    /// Length-2 shuttle-drain coupling.
    pub c_s: Vec<f64>,
    /// Length-g gate-drain coupling.
    pub c_g: Vec<f64>,
    /// Drain self-capacitance.
    pub c00: f64,
}

impl CapacitanceBlocks {
    pub fn gate_count(&self) -> usize {
        self.c_gg.rows()
    }

    pub fn zeros(gates: usize) -> Self {
        CapacitanceBlocks {
            c_ss: Mat::zeros(2, 2),
            c_gs: Mat::zeros(gates, 2),
            c_gg: Mat::zeros(gates, gates),
            c_s: vec![0.0; 2],
            c_g: vec![0.0; gates],
            c00: 0.0,
        }
    }

    /// Blocks shifted to first order: `self + h * d`.
    pub fn displaced(&self, d: &CapacitanceBlocks, h: f64) -> CapacitanceBlocks {
        CapacitanceBlocks {
            c_ss: self.c_ss.add(&d.c_ss.scale(h)),
            c_gs: self.c_gs.add(&d.c_gs.scale(h)),
            c_gg: self.c_gg.add(&d.c_gg.scale(h)),
            c_s: self
                .c_s
                .iter()
                .zip(&d.c_s)
                .map(|(a, b)| a + h * b)
                .collect(),
            c_g: self
                .c_g
                .iter()
                .zip(&d.c_g)
                .map(|(a, b)| a + h * b)
                .collect(),
            c00: self.c00 + h * d.c00,
        }
    }

    fn check_shapes(&self, gates: usize, name: &'static str) -> Result<(), DeviceError> {
        let checks = [
            ("c_ss", self.c_ss.rows(), self.c_ss.cols(), 2, 2),
            ("c_gs", self.c_gs.rows(), self.c_gs.cols(), gates, 2),
            ("c_gg", self.c_gg.rows(), self.c_gg.cols(), gates, gates),
            ("c_s", self.c_s.len(), 1, 2, 1),
            ("c_g", self.c_g.len(), 1, gates, 1),
        ];
        for (block, r, c, er, ec) in checks {
            if (r, c) != (er, ec) {
                // Shape errors report against the value-block names; the
                // derivative sets share them.
                let _ = name;
                return Err(DeviceError::BadShape {
                    block,
                    expected: (er, ec),
                    got: (r, c),
                });
            }
        }
        Ok(())
    }
}

/// User-facing capacitance description: rest-position blocks plus their
/// derivatives with respect to each shuttle displacement.
#[derive(Debug, Clone, PartialEq)]
pub struct CapacitanceInput {
    pub blocks: CapacitanceBlocks,
    /// `d_dx[s]` holds d(blocks)/dx_s at the rest position.
    pub d_dx: [CapacitanceBlocks; 2],
}

impl CapacitanceInput {
    /// Input with all spatial derivatives zero (no electromechanical force).
    pub fn rigid(blocks: CapacitanceBlocks) -> Self {
        let g = blocks.gate_count();
        CapacitanceInput {
            blocks,
            d_dx: [CapacitanceBlocks::zeros(g), CapacitanceBlocks::zeros(g)],
        }
    }

    /// Blocks evaluated at displacement `x` to first order.
    pub fn blocks_at(&self, x: [f64; 2]) -> CapacitanceBlocks {
        self.blocks
            .displaced(&self.d_dx[0], x[0])
            .displaced(&self.d_dx[1], x[1])
    }
}

/// Mechanical and junction parameters of the two shuttles.
#[derive(Debug, Clone, PartialEq)]
pub struct ShuttleParams {
    /// Eigenfrequencies (rad/s).
    pub omega: [f64; 2],
    /// Effective masses (kg).
    pub mass: [f64; 2],
    /// Damping coefficients (1/s); `omega/Q` for a quality factor `Q`.
    pub gamma: [f64; 2],
    /// Tunneling wavelengths per junction (m).
    pub lambda: [f64; 3],
    /// Unperturbed tunneling resistances per junction (ohms).
    pub r0: [f64; 3],
    /// Temperature (K).
    pub temperature: f64,
    /// Optional nonlinear-conductance coefficients (1/J^2).
    pub beta: Option<[f64; 3]>,
    /// Quadratic and cubic stiffness corrections per shuttle.
    pub k2: [f64; 2],
    pub k3: [f64; 2],
    /// Gate electron numbers (length g).
    pub n_gate: Vec<f64>,
}

impl ShuttleParams {
    /// Convenience constructor using a shared quality factor.
    pub fn with_quality(omega: [f64; 2], mass: [f64; 2], q: f64, lambda: [f64; 3], r0: [f64; 3], temperature: f64) -> Self {
        ShuttleParams {
            omega,
            mass,
            gamma: [omega[0] / q, omega[1] / q],
            lambda,
            r0,
            temperature,
            beta: None,
            k2: [0.0; 2],
            k3: [0.0; 2],
            n_gate: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), DeviceError> {
        for (name, vals) in [
            ("omega", &self.omega[..]),
            ("mass", &self.mass[..]),
            ("lambda", &self.lambda[..]),
            ("r0", &self.r0[..]),
        ] {
            if vals.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(DeviceError::NonPositive(name));
            }
        }
        if !(self.temperature > 0.0) {
            return Err(DeviceError::NonPositive("temperature"));
        }
        if self.gamma.iter().any(|&g| !(g >= 0.0) || !g.is_finite()) {
            return Err(DeviceError::NonPositive("gamma"));
        }
        Ok(())
    }

    pub fn thermal_energy(&self) -> f64 {
        K_B * self.temperature
    }
}

/// All electrostatic constants derived from a [`CapacitanceInput`].
///
/// Immutable after derivation; everything downstream reads it concurrently.
#[derive(Debug, Clone)]
pub struct DeviceConstants {
    pub gates: usize,
    /// Inverse of the shuttle Schur-complement capacitance (1/F), 2x2.
    pub cs_inv: [[f64; 2]; 2],
    /// Gate-bias mapping matrix B (unitless), g x 2.
    pub b_mat: Mat,
    /// Gate-sector inverse capacitance (1/F), g x g.
    pub cg_inv: Mat,
    /// Inverse of the raw gate block (1/F), g x g.
    pub cgg_inv: Mat,
    /// Ground-state junction charging energies (J).
    pub e0: [f64; 3],
    /// Pump coefficients; sum to one.
    pub kappa: [f64; 3],
    /// Drain coupling vector.
    pub zeta: [f64; 2],
    /// Equivalent capacitance seen from the electrodes (F).
    pub c0: f64,
    /// `e_theta[j][s] = q^2 (T_j Cs^-1)_s`, the electron-number coupling of
    /// the junction-j free energy (J per electron).
    pub e_theta: [[f64; 2]; 3],
    /// Charge-charge force matrices per shuttle (N).
    pub f0: [[[f64; 2]; 2]; 2],
    /// Shuttle-gate force matrices per shuttle (N), 2 x g.
    pub fg: [Mat; 2],
    /// Gate-gate force matrices per shuttle (N), g x g.
    pub fgg: [Mat; 2],
    /// Voltage coupling vectors (1/m): `alpha[s][a] = -d zeta_a / d x_s`.
    pub alpha: [[f64; 2]; 2],
    /// Gate voltage coupling vectors (1/m), length g.
    pub alpha_g: [Vec<f64>; 2],
    /// Precomputed `Cgg^-1 c_G^T` for the electrode-charge relation.
    pub cgg_inv_cg: Vec<f64>,
    /// `u_x_n_coef[j][s][a]`: coefficient of `n_a x_s` in the direction-odd
    /// part of the first-order position perturbation of the junction-j free
    /// energy.
    pub u_x_n_coef: [[[f64; 2]; 2]; 3],
    /// `u_x_v_coef[j][s]`: coefficient of `V(t) x_s` in the same odd part.
    pub u_x_v_coef: [[f64; 2]; 3],
    /// `u_x_even_coef[j][s]`: direction-independent part `T_j F0_s T_j^T` of
    /// the perturbation (from the position dependence of `E_j^0`).
    pub u_x_even_coef: [[f64; 2]; 3],
}

fn mat2_to_array(m: &Mat) -> [[f64; 2]; 2] {
    [[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]]
}

/// Derive every electrostatic constant from the capacitance description.
pub fn derive_constants(cap: &CapacitanceInput) -> Result<DeviceConstants, DeviceError> {
    let blocks = &cap.blocks;
    let g = blocks.gate_count();
    blocks.check_shapes(g, "value")?;
    cap.d_dx[0].check_shapes(g, "d/dx1")?;
    cap.d_dx[1].check_shapes(g, "d/dx2")?;

    let sym_tol = 1e-9;
    if !blocks.c_ss.is_symmetric(sym_tol) {
        return Err(DeviceError::NotSymmetric("c_ss"));
    }
    if g > 0 && !blocks.c_gg.is_symmetric(sym_tol) {
        return Err(DeviceError::NotSymmetric("c_gg"));
    }
    for d in &cap.d_dx {
        if !d.c_ss.is_symmetric(sym_tol) {
            return Err(DeviceError::NotSymmetric("d c_ss"));
        }
        if g > 0 && !d.c_gg.is_symmetric(sym_tol) {
            return Err(DeviceError::NotSymmetric("d c_gg"));
        }
    }

    // Positive definiteness, checked from the smallest block outward so the
    // diagnostic names the offender.
    if blocks.c_ss.cholesky().is_err() {
        return Err(DeviceError::NotPositiveDefinite("c_ss"));
    }
    if g > 0 && blocks.c_gg.cholesky().is_err() {
        return Err(DeviceError::NotPositiveDefinite("c_gg"));
    }
    let c_full = assemble_c(blocks);
    if c_full.cholesky().is_err() {
        return Err(DeviceError::NotPositiveDefinite("C (shuttle+gate block)"));
    }
    let c_all = assemble_c_all(blocks);
    if c_all.cholesky().is_err() {
        return Err(DeviceError::NotPositiveDefinite("C_all"));
    }

    let cgg_inv = blocks
        .c_gg
        .inverse()
        .map_err(|_| DeviceError::Singular("c_gg"))?;
    let b_mat = cgg_inv.matmul(&blocks.c_gs); // g x 2

    // Schur complement of the gate sector.
    let c_s_mat = if g > 0 {
        blocks
            .c_ss
            .sub(&blocks.c_gs.transpose().matmul(&b_mat))
    } else {
        blocks.c_ss.clone()
    };
    let cs_inv_mat = c_s_mat
        .inverse()
        .map_err(|_| DeviceError::Singular("C_S"))?;
    let cs_inv = mat2_to_array(&cs_inv_mat);

    let cg_inv = cgg_inv.add(&b_mat.matmul(&cs_inv_mat).matmul(&b_mat.transpose()));

    // zeta = (c_S - c_G B) Cs^-1
    let mut eff = blocks.c_s.clone();
    if g > 0 {
        let cgb = Mat::row_vec_mul(&blocks.c_g, &b_mat);
        for s in 0..2 {
            eff[s] -= cgb[s];
        }
    }
    let zeta_v = Mat::row_vec_mul(&eff, &cs_inv_mat);
    let zeta = [zeta_v[0], zeta_v[1]];

    // C0 = C00 - c C^-1 c^T with c = [c_S, c_G].
    let mut c_vec = blocks.c_s.clone();
    c_vec.extend_from_slice(&blocks.c_g);
    let y = c_full
        .solve(&c_vec)
        .map_err(|_| DeviceError::Singular("C"))?;
    let c0 = blocks.c00 - c_vec.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>();
    if !(c0 > 0.0) {
        return Err(DeviceError::NotPositiveDefinite("C_all"));
    }

    let kappa = [-zeta[0], zeta[0] - zeta[1], zeta[1] + 1.0];

    let mut e0 = [0.0; 3];
    let mut e_theta = [[0.0; 2]; 3];
    for j in 0..3 {
        let tj = T_MAT[j];
        for s in 0..2 {
            e_theta[j][s] = Q_E * Q_E * (tj[0] * cs_inv[0][s] + tj[1] * cs_inv[1][s]);
        }
        e0[j] = 0.5 * (tj[0] * e_theta[j][0] + tj[1] * e_theta[j][1]);
        if !(e0[j] > 0.0) {
            return Err(DeviceError::NotPositiveDefinite("C_S"));
        }
    }

    // Spatial derivatives via the chain rule on the block derivatives.
    let mut f0 = [[[0.0; 2]; 2]; 2];
    let mut fg = [Mat::zeros(2, g), Mat::zeros(2, g)];
    let mut fgg = [Mat::zeros(g, g), Mat::zeros(g, g)];
    let mut alpha = [[0.0; 2]; 2];
    let mut alpha_g = [vec![0.0; g], vec![0.0; g]];

    for s in 0..2 {
        let d = &cap.d_dx[s];
        let d_cgg_inv = cgg_inv.matmul(&d.c_gg).matmul(&cgg_inv).neg();
        let d_b = cgg_inv.matmul(&d.c_gs.sub(&d.c_gg.matmul(&b_mat))); // g x 2

        let mut d_cs = d.c_ss.clone();
        if g > 0 {
            d_cs = d_cs
                .sub(&d.c_gs.transpose().matmul(&b_mat))
                .sub(&b_mat.transpose().matmul(&d.c_gs))
                .add(&b_mat.transpose().matmul(&d.c_gg).matmul(&b_mat));
        }
        let d_cs_inv = cs_inv_mat.matmul(&d_cs).matmul(&cs_inv_mat).neg();

        let d_cg_inv = d_cgg_inv
            .add(&d_b.matmul(&cs_inv_mat).matmul(&b_mat.transpose()))
            .add(&b_mat.matmul(&d_cs_inv).matmul(&b_mat.transpose()))
            .add(&b_mat.matmul(&cs_inv_mat).matmul(&d_b.transpose()));

        // d zeta = (dc_S - dc_G B - c_G dB) Cs^-1 + (c_S - c_G B) dCs^-1
        let mut d_eff = d.c_s.clone();
        if g > 0 {
            let a = Mat::row_vec_mul(&d.c_g, &b_mat);
            let b = Mat::row_vec_mul(&blocks.c_g, &d_b);
            for k in 0..2 {
                d_eff[k] -= a[k] + b[k];
            }
        }
        let term1 = Mat::row_vec_mul(&d_eff, &cs_inv_mat);
        let term2 = Mat::row_vec_mul(&eff, &d_cs_inv);
        let d_zeta = [term1[0] + term2[0], term1[1] + term2[1]];

        let q2 = Q_E * Q_E;
        f0[s] = mat2_to_array(&d_cs_inv.scale(-0.5 * q2));
        fg[s] = d_cs_inv
            .matmul(&b_mat.transpose())
            .add(&cs_inv_mat.matmul(&d_b.transpose()))
            .scale(q2);
        fgg[s] = d_cg_inv.scale(-0.5 * q2);
        alpha[s] = [-d_zeta[0], -d_zeta[1]];

        if g > 0 {
            // alpha_g = d(zeta B^T - c_G Cgg^-1)/dx_s
            let zb = Mat::row_vec_mul(&[d_zeta[0], d_zeta[1]], &b_mat.transpose());
            let zdb = Mat::row_vec_mul(&zeta, &d_b.transpose());
            let dcg_cgg = Mat::row_vec_mul(&d.c_g, &cgg_inv);
            let cg_dcgg = Mat::row_vec_mul(&blocks.c_g, &d_cgg_inv);
            for k in 0..g {
                alpha_g[s][k] = zb[k] + zdb[k] - dcg_cgg[k] - cg_dcgg[k];
            }
        }
    }

    let cgg_inv_cg = if g > 0 {
        cgg_inv.mul_col_vec(&blocks.c_g)
    } else {
        Vec::new()
    };

    // First-order position dependence of the junction free energies, taken
    // as the exact expansion of the displaced-capacitance energetics:
    // U_j^{+/-}(n, x, t) = U_j^{+/-}(n, t) +/- c_j(n, t) . x + e_j . x with
    // c_js = q V (alpha_s . T_j) + 2 n . (F0_s T_j^T) + T_j . (F^G_s n_G^T)
    // and e_js = T_j F0_s T_j^T. The even e-term and the factor of two keep
    // U_j^-(n + T_j) = -U_j^+(n) exact to this order.
    let mut u_x_n_coef = [[[0.0; 2]; 2]; 3];
    let mut u_x_v_coef = [[0.0; 2]; 3];
    let mut u_x_even_coef = [[0.0; 2]; 3];
    for j in 0..3 {
        let tj = T_MAT[j];
        for s in 0..2 {
            u_x_v_coef[j][s] = Q_E * (alpha[s][0] * tj[0] + alpha[s][1] * tj[1]);
            let f0_tj = [
                f0[s][0][0] * tj[0] + f0[s][0][1] * tj[1],
                f0[s][1][0] * tj[0] + f0[s][1][1] * tj[1],
            ];
            for a in 0..2 {
                u_x_n_coef[j][s][a] = 2.0 * f0_tj[a];
            }
            u_x_even_coef[j][s] = tj[0] * f0_tj[0] + tj[1] * f0_tj[1];
        }
    }

    Ok(DeviceConstants {
        gates: g,
        cs_inv,
        b_mat,
        cg_inv,
        cgg_inv,
        e0,
        kappa,
        zeta,
        c0,
        e_theta,
        f0,
        fg,
        fgg,
        alpha,
        alpha_g,
        cgg_inv_cg,
        u_x_n_coef,
        u_x_v_coef,
        u_x_even_coef,
    })
}

/// Assemble the (2+g) x (2+g) shuttle+gate matrix C.
pub fn assemble_c(blocks: &CapacitanceBlocks) -> Mat {
    let g = blocks.gate_count();
    let n = 2 + g;
    let mut c = Mat::zeros(n, n);
    for i in 0..2 {
        for j in 0..2 {
            c[(i, j)] = blocks.c_ss[(i, j)];
        }
    }
    for i in 0..g {
        for j in 0..2 {
            c[(2 + i, j)] = blocks.c_gs[(i, j)];
            c[(j, 2 + i)] = blocks.c_gs[(i, j)];
        }
        for j in 0..g {
            c[(2 + i, 2 + j)] = blocks.c_gg[(i, j)];
        }
    }
    c
}

/// Assemble the full (3+g) x (3+g) matrix including the drain electrode.
pub fn assemble_c_all(blocks: &CapacitanceBlocks) -> Mat {
    let g = blocks.gate_count();
    let n = 3 + g;
    let c = assemble_c(blocks);
    let mut all = Mat::zeros(n, n);
    for i in 0..(2 + g) {
        for j in 0..(2 + g) {
            all[(i, j)] = c[(i, j)];
        }
    }
    for s in 0..2 {
        all[(s, n - 1)] = blocks.c_s[s];
        all[(n - 1, s)] = blocks.c_s[s];
    }
    for k in 0..g {
        all[(2 + k, n - 1)] = blocks.c_g[k];
        all[(n - 1, 2 + k)] = blocks.c_g[k];
    }
    all[(n - 1, n - 1)] = blocks.c00;
    all
}

impl DeviceConstants {
    /// `n_G B`: the gate-induced offset of the shuttle electron numbers.
    pub fn gate_offset(&self, params: &ShuttleParams) -> [f64; 2] {
        if self.gates == 0 || params.n_gate.is_empty() {
            return [0.0; 2];
        }
        let v = Mat::row_vec_mul(&params.n_gate, &self.b_mat);
        [v[0], v[1]]
    }

    /// Electromagnetic force on both shuttles for electron numbers `n` at
    /// drive voltage `v`.
    pub fn force_at_voltage(&self, params: &ShuttleParams, n: [f64; 2], v: f64) -> [f64; 2] {
        let mut out = [0.0; 2];
        for s in 0..2 {
            let f0 = &self.f0[s];
            let mut f = n[0] * (f0[0][0] * n[0] + f0[0][1] * n[1])
                + n[1] * (f0[1][0] * n[0] + f0[1][1] * n[1]);
            if self.gates > 0 && !params.n_gate.is_empty() {
                let fg_ng = self.fg[s].mul_col_vec(&params.n_gate);
                f += n[0] * fg_ng[0] + n[1] * fg_ng[1];
                let fgg_ng = self.fgg[s].mul_col_vec(&params.n_gate);
                f += params
                    .n_gate
                    .iter()
                    .zip(&fgg_ng)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
                f += Q_E
                    * v
                    * params
                        .n_gate
                        .iter()
                        .zip(&self.alpha_g[s])
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
            }
            f += Q_E * v * (n[0] * self.alpha[s][0] + n[1] * self.alpha[s][1]);
            out[s] = f;
        }
        out
    }

    /// Force at time `t` under the drive waveform.
    pub fn force(
        &self,
        params: &ShuttleParams,
        n: [f64; 2],
        t: f64,
        drive: &DriveWaveform,
    ) -> [f64; 2] {
        self.force_at_voltage(params, n, drive.voltage(t))
    }

    /// `f_s(n, t) = dF_s/dn_s`, linear in `n`.
    pub fn force_n_derivative(
        &self,
        params: &ShuttleParams,
        n: [f64; 2],
        s: usize,
        v: f64,
    ) -> f64 {
        let f0 = &self.f0[s];
        let mut f = 2.0 * (f0[s][0] * n[0] + f0[s][1] * n[1]);
        if self.gates > 0 && !params.n_gate.is_empty() {
            let fg_ng = self.fg[s].mul_col_vec(&params.n_gate);
            f += fg_ng[s];
        }
        f + Q_E * v * self.alpha[s][s]
    }

    /// Unperturbed free-energy change for one electron tunneling through
    /// junction `j` in direction `dir` at drive voltage `v`.
    #[inline]
    pub fn u_unperturbed(
        &self,
        n: [f64; 2],
        gate_offset: [f64; 2],
        v: f64,
        j: usize,
        dir: Dir,
    ) -> f64 {
        let sg = dir.sign();
        let dn = [n[0] - gate_offset[0], n[1] - gate_offset[1]];
        -self.e0[j] - sg * (self.e_theta[j][0] * dn[0] + self.e_theta[j][1] * dn[1])
            + sg * Q_E * self.kappa[j] * v
    }

    /// Direction-odd first-order position coefficients `c_js(n, v)`; the
    /// perturbed energy is `U +/- c_j . x + e_j . x` with `e_j` from
    /// [`Self::u_perturb_even`].
    #[inline]
    pub fn u_perturb_coeff(
        &self,
        params: &ShuttleParams,
        n: [f64; 2],
        v: f64,
        j: usize,
    ) -> [f64; 2] {
        let mut c = [0.0; 2];
        for s in 0..2 {
            let mut val = v * self.u_x_v_coef[j][s]
                + n[0] * self.u_x_n_coef[j][s][0]
                + n[1] * self.u_x_n_coef[j][s][1];
            if self.gates > 0 && !params.n_gate.is_empty() {
                let fg_ng = self.fg[s].mul_col_vec(&params.n_gate);
                val += T_MAT[j][0] * fg_ng[0] + T_MAT[j][1] * fg_ng[1];
            }
            c[s] = val;
        }
        c
    }

    /// Direction-independent part of the position perturbation.
    #[inline]
    pub fn u_perturb_even(&self, j: usize) -> [f64; 2] {
        self.u_x_even_coef[j]
    }

    /// Free-energy change including, optionally, the first-order position
    /// perturbation.
    pub fn free_energy(
        &self,
        params: &ShuttleParams,
        n: [f64; 2],
        x: [f64; 2],
        t: f64,
        drive: &DriveWaveform,
        j: usize,
        dir: Dir,
        perturbed: bool,
    ) -> f64 {
        let v = drive.voltage(t);
        let offset = self.gate_offset(params);
        let mut u = self.u_unperturbed(n, offset, v, j, dir);
        if perturbed {
            let c = self.u_perturb_coeff(params, n, v, j);
            let e = self.u_x_even_coef[j];
            u += dir.sign() * (c[0] * x[0] + c[1] * x[1]) + e[0] * x[0] + e[1] * x[1];
        }
        u
    }

    /// Field energy for given island charges at drive voltage `v`.
    pub fn stored_energy(&self, q_s: [f64; 2], q_g: &[f64], v: f64) -> f64 {
        let mut dq = [q_s[0], q_s[1]];
        if self.gates > 0 {
            let qb = Mat::row_vec_mul(q_g, &self.b_mat);
            dq[0] -= qb[0];
            dq[1] -= qb[1];
        }
        let mut e = 0.5
            * (dq[0] * (self.cs_inv[0][0] * dq[0] + self.cs_inv[0][1] * dq[1])
                + dq[1] * (self.cs_inv[1][0] * dq[0] + self.cs_inv[1][1] * dq[1]));
        if self.gates > 0 {
            let y = self.cgg_inv.mul_col_vec(q_g);
            e += 0.5 * q_g.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>();
        }
        e + 0.5 * self.c0 * v * v
    }

    /// Charge on the drain electrode for given island charges and voltage.
    pub fn electrode_charge(&self, q_s: [f64; 2], q_g: &[f64], v: f64) -> f64 {
        let mut dq = [q_s[0], q_s[1]];
        let mut gate_term = 0.0;
        if self.gates > 0 {
            let qb = Mat::row_vec_mul(q_g, &self.b_mat);
            dq[0] -= qb[0];
            dq[1] -= qb[1];
            gate_term = q_g
                .iter()
                .zip(&self.cgg_inv_cg)
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
        dq[0] * self.zeta[0] + dq[1] * self.zeta[1] + gate_term + self.c0 * v
    }

    /// Drain voltage consistent with a fixed electrode charge `q0`.
    pub fn voltage_at_charge(&self, q_s: [f64; 2], q_g: &[f64], q0: f64) -> f64 {
        let reference = self.electrode_charge(q_s, q_g, 0.0);
        (q0 - reference) / self.c0
    }
}
