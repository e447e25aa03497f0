//! Front-surface conduction model: material interpolation, conductance
//! assembly, the diode source term and the damped Newton solve of
//! `G(x̃) V = I(V)` with the busbar nodes held at the bus voltage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::sparse::{norm2, pcg_jacobi, CsrMatrix};

/// Boltzmann constant over elementary charge, V/K.
pub const BOLTZMANN_OVER_Q: f64 = 8.617_333_262e-5;

/// Dark-current density at the bus voltage used to calibrate the diode
/// exponent scale when none is given.
pub const DEFAULT_DIODE_TARGET: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CellParams {
    /// Sheet conductance of the electrode material, S.
    pub sigma_metal: f64,
    /// Sheet conductance of bare emitter, S.
    pub sigma_min: f64,
    /// Photo-generated current density, A/m².
    pub j_light: f64,
    /// Magnitude of the reverse-bias saturation current density, A/m².
    pub j_dark: f64,
    /// Cell temperature, K. Informational; the diode exponent uses
    /// `v_thermal` directly.
    pub temperature: f64,
    /// Incident power density, W/m².
    pub p_in: f64,
    /// Diode exponent voltage scale, V.
    pub v_thermal: f64,
    /// Penalization exponent for the conductance interpolation.
    pub simp_power: f64,
    /// Largest exponent evaluated exactly; the diode curve continues
    /// linearly beyond it.
    pub exp_clamp: f64,
}

impl Default for CellParams {
    fn default() -> Self {
        let j_light = 310.0;
        let j_dark = 0.06;
        Self {
            sigma_metal: 100.0,
            sigma_min: 0.02,
            j_light,
            j_dark,
            temperature: 320.0,
            p_in: 1000.0,
            v_thermal: calibrate_thermal_voltage(j_light, j_dark, 0.5, DEFAULT_DIODE_TARGET)
                .expect("default calibration is valid"),
            simp_power: 3.0,
            exp_clamp: 40.0,
        }
    }
}

impl CellParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.sigma_metal,
            self.sigma_min,
            self.j_light,
            self.j_dark,
            self.temperature,
            self.p_in,
            self.v_thermal,
            self.simp_power,
            self.exp_clamp,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::config("cell parameters must be finite"));
        }
        if !(self.sigma_min > 0.0 && self.sigma_metal > self.sigma_min) {
            return Err(Error::config(format!(
                "need sigma_metal > sigma_min > 0, got {} and {}",
                self.sigma_metal, self.sigma_min
            )));
        }
        if self.j_light <= 0.0 {
            return Err(Error::config("j_light must be positive"));
        }
        if self.j_dark < 0.0 {
            return Err(Error::config("j_dark must be non-negative"));
        }
        if self.v_thermal <= 0.0 {
            return Err(Error::config("v_thermal must be positive"));
        }
        if self.p_in <= 0.0 {
            return Err(Error::config("p_in must be positive"));
        }
        if self.simp_power < 1.0 {
            return Err(Error::config("simp_power must be at least 1"));
        }
        if self.exp_clamp <= 0.0 {
            return Err(Error::config("exp_clamp must be positive"));
        }
        Ok(())
    }

    /// `σ(x̃) = σ_min + x̃^p (σ_metal − σ_min)`
    pub fn sheet_conductance(&self, x: f64) -> f64 {
        self.sigma_min + x.powf(self.simp_power) * (self.sigma_metal - self.sigma_min)
    }

    pub fn sheet_conductance_deriv(&self, x: f64) -> f64 {
        let p = self.simp_power;
        if p == 1.0 {
            self.sigma_metal - self.sigma_min
        } else {
            p * x.powf(p - 1.0) * (self.sigma_metal - self.sigma_min)
        }
    }

    /// Metal shades the emitter: `j_gen(x̃) = j_L (1 − x̃)`.
    pub fn generation_density(&self, x: f64) -> f64 {
        self.j_light * (1.0 - x)
    }

    pub fn generation_density_deriv(&self) -> f64 {
        -self.j_light
    }

    /// `j_D(V) = j_0 (exp(V / v_T) − 1)`, continued linearly past the clamp.
    pub fn diode_density(&self, v: f64) -> f64 {
        let u = v / self.v_thermal;
        if u <= self.exp_clamp {
            self.j_dark * u.exp_m1()
        } else {
            let e = self.exp_clamp.exp();
            self.j_dark * (e * (1.0 + (u - self.exp_clamp)) - 1.0)
        }
    }

    pub fn diode_density_deriv(&self, v: f64) -> f64 {
        let u = (v / self.v_thermal).min(self.exp_clamp);
        self.j_dark * u.exp() / self.v_thermal
    }

    /// `k_B T / q` at the configured temperature.
    pub fn physical_thermal_voltage(&self) -> f64 {
        BOLTZMANN_OVER_Q * self.temperature
    }
}

/// Exponent scale that makes the dark current at `v_bus` equal `target`.
pub fn calibrate_thermal_voltage(
    j_light: f64,
    j_dark: f64,
    v_bus: f64,
    target: f64,
) -> Result<f64> {
    if !(target > 0.0 && target < j_light) {
        return Err(Error::config(format!(
            "diode calibration target {target} must lie in (0, j_light = {j_light})"
        )));
    }
    if !(j_dark > 0.0 && v_bus > 0.0) {
        return Err(Error::config(
            "diode calibration needs positive j_dark and bus voltage",
        ));
    }
    Ok(v_bus / (target / j_dark).ln_1p())
}

/// Efficiency of a lossless, unshaded cell held uniformly at `v_bus`, in
/// percent. No metallization design can exceed it.
pub fn ideal_efficiency(params: &CellParams, v_bus: f64) -> f64 {
    100.0 * v_bus * (params.j_light - params.diode_density(v_bus)) / params.p_in
}

/// Conductance matrix of a unit-conductance bilinear rectangle with sides
/// `hx × hy`, corners ordered counter-clockwise from the lower left.
pub fn quad_conductance(hx: f64, hy: f64) -> [[f64; 4]; 4] {
    let ax = hy / (6.0 * hx);
    let ay = hx / (6.0 * hy);
    let kx = [
        [2.0, -2.0, -1.0, 1.0],
        [-2.0, 2.0, 1.0, -1.0],
        [-1.0, 1.0, 2.0, -2.0],
        [1.0, -1.0, -2.0, 2.0],
    ];
    let ky = [
        [2.0, 1.0, -1.0, -2.0],
        [1.0, 2.0, -2.0, -1.0],
        [-1.0, -2.0, 2.0, 1.0],
        [-2.0, -1.0, 1.0, 2.0],
    ];
    let mut k = [[0.0; 4]; 4];
    for a in 0..4 {
        for b in 0..4 {
            k[a][b] = ax * kx[a][b] + ay * ky[a][b];
        }
    }
    k
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Damping {
    None,
    Backtracking,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveOptions {
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub linear_tol: f64,
    /// `None` means ten times the number of free nodes.
    pub linear_max_iter: Option<usize>,
    pub damping: Damping,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            newton_tol: 1e-10,
            newton_max_iter: 50,
            linear_tol: 1e-12,
            linear_max_iter: None,
            damping: Damping::Backtracking,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.newton_tol > 0.0 && self.linear_tol > 0.0) {
            return Err(Error::config("solver tolerances must be positive"));
        }
        if self.newton_max_iter == 0 {
            return Err(Error::config("newton_max_iter must be at least 1"));
        }
        Ok(())
    }
}

const MAX_HALVINGS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    /// Nodal voltages in compact node order, V.
    pub voltages: Vec<f64>,
    /// `V − v_bus`, which keeps digits that `voltages` rounds away.
    pub deviations: Vec<f64>,
    pub busbar_current: f64,
    pub power: f64,
    pub efficiency: f64,
    pub newton_iters: usize,
    pub initial_residual: f64,
    pub final_residual: f64,
    /// Free-node residual norm after each Newton iteration, starting with
    /// the initial guess.
    pub residual_history: Vec<f64>,
    pub linear_iters: usize,
    pub converged: bool,
}

/// The discretized cell: owns the mesh, physical parameters and the sparsity
/// structure of the conductance system.
#[derive(Debug, Clone)]
pub struct CellModel {
    mesh: Mesh,
    params: CellParams,
    element_matrix: [[f64; 4]; 4],
    /// Pattern of the full nodal conductance matrix.
    pattern: CsrMatrix,
    /// Storage index in `pattern` of each element's 4×4 block, row-major.
    element_slots: Vec<[usize; 16]>,
    /// Pattern of the free-node block.
    reduced: CsrMatrix,
    /// Source index in `pattern` for each entry of `reduced`.
    reduced_src: Vec<usize>,
    reduced_diag: Vec<usize>,
}

impl CellModel {
    pub fn new(mesh: Mesh, params: CellParams) -> Result<Self> {
        params.validate()?;
        if !mesh.has_busbar() {
            return Err(Error::config("mesh has no busbar nodes"));
        }
        let conn = mesh.connectivity();
        let pattern = CsrMatrix::from_pattern(
            mesh.num_nodes(),
            conn.iter()
                .flat_map(|c| c.iter().flat_map(move |&a| c.iter().map(move |&b| (a, b)))),
        );
        let element_slots = conn
            .iter()
            .map(|c| {
                let mut s = [0usize; 16];
                for a in 0..4 {
                    for b in 0..4 {
                        s[4 * a + b] = pattern.position(c[a], c[b]).expect("in pattern");
                    }
                }
                s
            })
            .collect();

        let free = mesh.free_nodes();
        let mut entries = Vec::new();
        for (fi, &n) in free.iter().enumerate() {
            for (m, _) in pattern.row(n) {
                if let Some(fj) = mesh.free_slot(m) {
                    entries.push((fi, fj));
                }
            }
        }
        let reduced = CsrMatrix::from_pattern(free.len(), entries);
        let mut reduced_src = Vec::with_capacity(reduced.nnz());
        for (fi, &n) in free.iter().enumerate() {
            for k in reduced.row_ptr()[fi]..reduced.row_ptr()[fi + 1] {
                let m = free[reduced.col_idx()[k]];
                reduced_src.push(pattern.position(n, m).expect("in pattern"));
            }
        }
        let reduced_diag = (0..free.len())
            .map(|i| reduced.position(i, i).expect("diagonal present"))
            .collect();

        let element_matrix = quad_conductance(mesh.hx(), mesh.hy());
        Ok(Self {
            mesh,
            params,
            element_matrix,
            pattern,
            element_slots,
            reduced,
            reduced_src,
            reduced_diag,
        })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn params(&self) -> &CellParams {
        &self.params
    }

    pub fn set_simp_power(&mut self, p: f64) {
        self.params.simp_power = p;
    }

    pub fn element_matrix(&self) -> &[[f64; 4]; 4] {
        &self.element_matrix
    }

    pub fn bus_voltage(&self) -> f64 {
        self.mesh.bus_voltage()
    }

    /// Global conductance matrix over all mesh nodes.
    pub fn assemble_conductance(&self, density: &[f64]) -> CsrMatrix {
        assert_eq!(density.len(), self.mesh.num_elements());
        let mut g = self.pattern.clone();
        let vals = g.values_mut();
        for (slots, &x) in self.element_slots.iter().zip(density) {
            let s = self.params.sheet_conductance(x);
            for a in 0..4 {
                for b in 0..4 {
                    vals[slots[4 * a + b]] += s * self.element_matrix[a][b];
                }
            }
        }
        g
    }

    /// Nodal current injection `I(V)`: each element lumps a quarter of its
    /// net generation onto every corner.
    pub fn source_current(&self, density: &[f64], voltages: &[f64]) -> Vec<f64> {
        let v_bus = self.bus_voltage();
        let dev: Vec<f64> = voltages.iter().map(|v| v - v_bus).collect();
        self.source_current_dev(density, &dev)
    }

    fn source_current_dev(&self, density: &[f64], dev: &[f64]) -> Vec<f64> {
        let v_bus = self.bus_voltage();
        let mut current = vec![0.0; self.mesh.num_nodes()];
        for (e, conn) in self.mesh.connectivity().iter().enumerate() {
            let q = 0.25 * self.mesh.element_area(e);
            let gen = self.params.generation_density(density[e]);
            for &n in conn {
                current[n] += q * (gen - self.params.diode_density(v_bus + dev[n]));
            }
        }
        current
    }

    /// `G V − I(V)` on every node.
    pub fn full_residual(&self, g: &CsrMatrix, density: &[f64], voltages: &[f64]) -> Vec<f64> {
        let v_bus = self.bus_voltage();
        let dev: Vec<f64> = voltages.iter().map(|v| v - v_bus).collect();
        self.full_residual_dev(g, density, &dev)
    }

    /// Residual in terms of the deviation `u = V − v_bus`. The conductance
    /// product is evaluated as `Σ_j G_ij (u_j − u_i)`, exact for zero row
    /// sums; working with `u` keeps the representable resolution of the
    /// state well below the convergence tolerance.
    fn full_residual_dev(&self, g: &CsrMatrix, density: &[f64], dev: &[f64]) -> Vec<f64> {
        let mut r = self.source_current_dev(density, dev);
        for (i, ri) in r.iter_mut().enumerate() {
            let ui = dev[i];
            let mut flux = 0.0;
            for (j, gij) in g.row(i) {
                if j != i {
                    flux += gij * (dev[j] - ui);
                }
            }
            *ri = flux - *ri;
        }
        r
    }

    fn free_residual(&self, full: &[f64]) -> Vec<f64> {
        self.mesh.free_nodes().iter().map(|&n| full[n]).collect()
    }

    /// Reduced Jacobian `G_ff + diag(A_n j_D'(V_n))` over the free nodes.
    pub fn jacobian(&self, g: &CsrMatrix, voltages: &[f64]) -> CsrMatrix {
        let mut j = self.reduced.clone();
        {
            let gv = g.values();
            let jv = j.values_mut();
            for (dst, &src) in jv.iter_mut().zip(&self.reduced_src) {
                *dst = gv[src];
            }
        }
        let area = self.mesh.node_areas();
        let jv = j.values_mut();
        for (fi, &n) in self.mesh.free_nodes().iter().enumerate() {
            jv[self.reduced_diag[fi]] += area[n] * self.params.diode_density_deriv(voltages[n]);
        }
        j
    }

    /// Current delivered into the busbar, positive when the cell produces
    /// power.
    pub fn busbar_current(&self, g: &CsrMatrix, density: &[f64], voltages: &[f64]) -> f64 {
        let r = self.full_residual(g, density, voltages);
        -self.mesh.busbar_nodes().iter().map(|&n| r[n]).sum::<f64>()
    }

    pub fn output_power(&self, busbar_current: f64) -> f64 {
        self.bus_voltage() * busbar_current
    }

    /// Percent of incident power converted over the active cell area.
    pub fn efficiency(&self, power: f64) -> f64 {
        100.0 * power / (self.mesh.cell_area() * self.params.p_in)
    }

    pub fn ideal_efficiency(&self) -> f64 {
        ideal_efficiency(&self.params, self.bus_voltage())
    }

    pub fn linear_budget(&self, opts: &SolveOptions) -> usize {
        opts.linear_max_iter
            .unwrap_or(10 * self.mesh.free_nodes().len())
            .max(1)
    }

    /// Damped Newton solve starting from `V ≡ v_bus`. Non-convergence is
    /// reported through `converged = false`, never as an error.
    pub fn solve(&self, density: &[f64], opts: &SolveOptions) -> SolveResult {
        let v_bus = self.bus_voltage();
        let g = self.assemble_conductance(density);
        let mut u = vec![0.0; self.mesh.num_nodes()];
        let mut full = self.full_residual_dev(&g, density, &u);
        let mut r = self.free_residual(&full);
        let mut r_norm = norm2(&r);
        let r0 = r_norm;
        let mut history = vec![r0];
        let linear_budget = self.linear_budget(opts);
        let mut linear_iters = 0;
        let mut converged = r0 == 0.0;
        let mut iters = 0;

        while !converged && iters < opts.newton_max_iter {
            iters += 1;
            let v: Vec<f64> = u.iter().map(|d| v_bus + d).collect();
            let jac = self.jacobian(&g, &v);
            let rhs: Vec<f64> = r.iter().map(|x| -x).collect();
            let step = match pcg_jacobi(&jac, &rhs, opts.linear_tol, linear_budget) {
                Ok((dv, stats)) => {
                    linear_iters += stats.iterations;
                    dv
                }
                Err(_) => break,
            };

            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..=MAX_HALVINGS {
                let mut trial = u.clone();
                for (k, &n) in self.mesh.free_nodes().iter().enumerate() {
                    trial[n] += t * step[k];
                }
                let trial_full = self.full_residual_dev(&g, density, &trial);
                let trial_r = self.free_residual(&trial_full);
                let trial_norm = norm2(&trial_r);
                if opts.damping == Damping::None || trial_norm < r_norm {
                    accepted = Some((trial, trial_full, trial_r, trial_norm));
                    break;
                }
                t *= 0.5;
            }
            let Some((nu, nfull, nr, nnorm)) = accepted else {
                break;
            };
            u = nu;
            full = nfull;
            r = nr;
            r_norm = nnorm;
            history.push(r_norm);
            if !r_norm.is_finite() {
                break;
            }
            converged = r_norm <= opts.newton_tol * r0;
        }

        let busbar_current = -self
            .mesh
            .busbar_nodes()
            .iter()
            .map(|&n| full[n])
            .sum::<f64>();
        let power = self.output_power(busbar_current);
        SolveResult {
            voltages: u.iter().map(|d| v_bus + d).collect(),
            deviations: u,
            busbar_current,
            power,
            efficiency: self.efficiency(power),
            newton_iters: iters,
            initial_residual: r0,
            final_residual: r_norm,
            residual_history: history,
            linear_iters,
            converged,
        }
    }

    /// Like [`CellModel::solve`] but turns non-convergence into an error.
    pub fn solve_converged(&self, density: &[f64], opts: &SolveOptions) -> Result<SolveResult> {
        let res = self.solve(density, opts);
        if res.converged {
            Ok(res)
        } else {
            Err(Error::NotConverged {
                iterations: res.newton_iters,
                relative_residual: res.final_residual / res.initial_residual,
            })
        }
    }

    /// Net generated minus recombined current summed over all nodes.
    pub fn net_source_current(&self, density: &[f64], voltages: &[f64]) -> f64 {
        self.source_current(density, voltages).iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{BusbarSpec, GridSpec, ShapeMask};

    fn model(n: usize, params: CellParams) -> CellModel {
        let mesh = Mesh::build(GridSpec::square_cell(n), &ShapeMask::FullSquare).unwrap();
        let bus = BusbarSpec::edge_centered(mesh.grid(), 2e-3);
        CellModel::new(mesh.with_busbar(&bus).unwrap(), params).unwrap()
    }

    #[test]
    fn conductance_interpolation() {
        let p = CellParams::default();
        assert_eq!(p.sheet_conductance(1.0), 100.0);
        assert_eq!(p.sheet_conductance(0.0), 0.02);
        assert!((p.sheet_conductance(0.5) - 12.5175).abs() < 1e-12);
    }

    #[test]
    fn generation_shading() {
        let p = CellParams::default();
        assert_eq!(p.generation_density(0.0), 310.0);
        assert_eq!(p.generation_density(1.0), 0.0);
        assert!((p.generation_density(0.25) - 232.5).abs() < 1e-12);
    }

    #[test]
    fn diode_curve() {
        let p = CellParams::default();
        assert_eq!(p.diode_density(0.0), 0.0);
        let v = p.v_thermal * 2f64.ln();
        assert!((p.diode_density(v) - 0.06).abs() < 1e-15);
        assert!((p.diode_density(0.5) - 40.0).abs() < 1e-10);
        // Continuation past the clamp stays finite and increasing.
        let big = p.v_thermal * 45.0;
        assert!(p.diode_density(big).is_finite());
        assert!(p.diode_density(big) > p.diode_density(p.v_thermal * 40.0));
        assert!(p.diode_density(1e6).is_finite());
    }

    #[test]
    fn calibration_closed_form() {
        let vt = calibrate_thermal_voltage(310.0, 0.06, 0.5, 40.0).unwrap();
        assert!((vt - 0.5 / (40.0f64 / 0.06 + 1.0).ln()).abs() < 1e-15);
        assert!((vt - 0.07688).abs() < 1e-4);
        assert!(calibrate_thermal_voltage(310.0, 0.06, 0.5, 310.0).is_err());
        assert!(calibrate_thermal_voltage(310.0, 0.06, 0.5, 400.0).is_err());
    }

    #[test]
    fn ideal_ceilings() {
        let p = CellParams::default();
        assert!((ideal_efficiency(&p, 0.5) - 13.5).abs() < 1e-9);
        let lossless = CellParams { j_dark: 0.0, ..p };
        assert!((ideal_efficiency(&lossless, 0.5) - 15.5).abs() < 1e-12);
        // Dark current equal to the photocurrent leaves nothing.
        let v_t = 0.5 / (310.0f64 / 0.06).ln_1p();
        let balanced = CellParams {
            v_thermal: v_t,
            ..p
        };
        assert!(ideal_efficiency(&balanced, 0.5).abs() < 1e-9);
    }

    #[test]
    fn unit_square_element_matrix() {
        let k = quad_conductance(1.0, 1.0);
        for (a, row) in k.iter().enumerate() {
            assert!((row[a] - 2.0 / 3.0).abs() < 1e-15);
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
            for b in 0..4 {
                assert_eq!(k[a][b], k[b][a]);
            }
        }
        assert!((k[0][2] + 1.0 / 3.0).abs() < 1e-15);
        assert!((k[0][1] + 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn conductance_scales_with_sigma() {
        let m = model(4, CellParams::default());
        let n = m.mesh().num_elements();
        let g1 = m.assemble_conductance(&vec![0.5; n]);
        let mut doubled = m.clone();
        doubled.params.sigma_metal = 2.0 * m.params.sigma_metal;
        doubled.params.sigma_min = 2.0 * m.params.sigma_min;
        let g2 = doubled.assemble_conductance(&vec![0.5; n]);
        for (a, b) in g1.values().iter().zip(g2.values()) {
            assert!((2.0 * a - b).abs() <= 1e-14 * b.abs());
        }
    }

    #[test]
    fn lumped_source_single_element() {
        let mesh = Mesh::build(GridSpec::square_cell(2), &ShapeMask::FullSquare).unwrap();
        let bus = BusbarSpec::edge_centered(mesh.grid(), 2e-3);
        let m = CellModel::new(mesh.with_busbar(&bus).unwrap(), CellParams::default()).unwrap();
        let x = vec![0.0; 4];
        let v = vec![0.0; 9];
        let i = m.source_current(&x, &v);
        let a = m.mesh().element_area(0);
        let corner = m.mesh().node_at(0, 0).unwrap();
        let centre = m.mesh().node_at(1, 1).unwrap();
        assert!((i[corner] - a * 310.0 / 4.0).abs() < 1e-18);
        assert!((i[centre] - a * 310.0).abs() < 1e-18);

        // Fully metallized: only recombination remains.
        let i = m.source_current(&[1.0; 4], &[0.5; 9]);
        assert!(i.iter().all(|&c| c < 0.0));
    }

    #[test]
    fn fixed_point_converges_immediately() {
        let p = CellParams::default();
        let j_light = p.diode_density(0.5);
        let p = CellParams { j_light, ..p };
        let m = model(6, p);
        let n = m.mesh().num_elements();
        let res = m.solve(&vec![0.0; n], &SolveOptions::default());
        assert!(res.converged);
        assert_eq!(res.newton_iters, 0);
        assert!(res.busbar_current.abs() < 1e-15);
    }

    #[test]
    fn default_solve_respects_maximum_principle() {
        let m = model(16, CellParams::default());
        let n = m.mesh().num_elements();
        let x: Vec<f64> = (0..n).map(|e| ((e * 37) % 11) as f64 / 10.0).collect();
        let res = m.solve(&x, &SolveOptions::default());
        assert!(res.converged, "{res:?}");
        assert!(res.voltages.iter().all(|&v| v >= 0.5 - 1e-12));
        assert!(res.efficiency > 0.0 && res.efficiency <= m.ideal_efficiency());
    }

    #[test]
    fn non_convergence_is_reported() {
        let m = model(8, CellParams::default());
        let n = m.mesh().num_elements();
        let opts = SolveOptions {
            newton_max_iter: 1,
            ..SolveOptions::default()
        };
        let res = m.solve(&vec![0.5; n], &opts);
        assert!(!res.converged);
        assert!(m.solve_converged(&vec![0.5; n], &opts).is_err());
    }
}
