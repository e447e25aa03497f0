//! Adjoint sensitivities of busbar power with respect to element densities.
//!
//! With `R(V, x̃) = G(x̃) V − I(V, x̃)` and `P = v_bus · I_bus`, where
//! `I_bus = −Σ_busbar R`, the adjoint `λ` solves `Jᵀ λ = ∂P/∂V_f` on the free
//! nodes and
//!
//! ```text
//! dP/dx̃_e = ∂P/∂x̃_e − λᵀ ∂R_f/∂x̃_e = −Σ_a μ_a (∂R_a/∂x̃_e)
//! ```
//!
//! with `μ = λ` on free nodes and `μ = v_bus` on busbar nodes. The busbar rows
//! carry the explicit dependence of the reaction current on the design.

use crate::error::{Error, Result};
use crate::filter::FilterOperator;
use crate::physics::{CellModel, SolveOptions, SolveResult};
use crate::sparse::{pcg_jacobi, CsrMatrix};

/// Right-hand side `∂P/∂V_f = −v_bus Σ_b G_bf` of the adjoint system.
pub fn power_voltage_sensitivity(model: &CellModel, g: &CsrMatrix) -> Vec<f64> {
    let mesh = model.mesh();
    let v_bus = model.bus_voltage();
    let mut rhs = vec![0.0; mesh.free_nodes().len()];
    for &b in mesh.busbar_nodes() {
        for (n, gbn) in g.row(b) {
            if let Some(f) = mesh.free_slot(n) {
                rhs[f] -= v_bus * gbn;
            }
        }
    }
    rhs
}

/// Solves `Jᵀ λ = ∂P/∂V_f` at a converged state. `J` is symmetric, so the
/// forward PCG path is reused.
pub fn adjoint_solve(
    model: &CellModel,
    density: &[f64],
    state: &SolveResult,
    opts: &SolveOptions,
) -> Result<Vec<f64>> {
    if !state.converged {
        return Err(Error::NotConverged {
            iterations: state.newton_iters,
            relative_residual: state.final_residual / state.initial_residual,
        });
    }
    let g = model.assemble_conductance(density);
    let jac = model.jacobian(&g, &state.voltages);
    let rhs = power_voltage_sensitivity(model, &g);
    let (lambda, _) = pcg_jacobi(&jac, &rhs, opts.linear_tol, model.linear_budget(opts))?;
    Ok(lambda)
}

/// `dP/dx̃_e` for every active element, in W per unit density.
pub fn total_gradient(
    model: &CellModel,
    density: &[f64],
    state: &SolveResult,
    lambda: &[f64],
) -> Vec<f64> {
    let mesh = model.mesh();
    let params = model.params();
    let v_bus = model.bus_voltage();
    let k = model.element_matrix();

    let mut mu = vec![v_bus; mesh.num_nodes()];
    for (f, &n) in mesh.free_nodes().iter().enumerate() {
        mu[n] = lambda[f];
    }

    mesh.connectivity()
        .iter()
        .enumerate()
        .map(|(e, conn)| {
            let x = density[e];
            let ds = params.sheet_conductance_deriv(x);
            // −∂I_a/∂x̃_e for every corner.
            let dgen = -0.25 * mesh.element_area(e) * params.generation_density_deriv();
            let dev = conn.map(|n| state.voltages[n] - v_bus);
            let mut acc = 0.0;
            for a in 0..4 {
                let ku: f64 = (0..4).map(|b| k[a][b] * (dev[b] - dev[a])).sum();
                let dr = ds * ku + dgen;
                acc -= mu[conn[a]] * dr;
            }
            acc
        })
        .collect()
}

/// Forward solve, adjoint solve and gradient in one call. Fails if the
/// Newton solve does not converge.
pub fn power_gradient(
    model: &CellModel,
    density: &[f64],
    opts: &SolveOptions,
) -> Result<(SolveResult, Vec<f64>)> {
    let state = model.solve_converged(density, opts)?;
    let lambda = adjoint_solve(model, density, &state, opts)?;
    let grad = total_gradient(model, density, &state, &lambda);
    Ok((state, grad))
}

/// Options used for finite-difference probe solves.
pub fn probe_options(base: &SolveOptions) -> SolveOptions {
    SolveOptions {
        newton_tol: 1e-12,
        linear_tol: base.linear_tol.min(1e-13),
        ..*base
    }
}

/// Power as a function of raw densities, through the filter.
pub fn power_of_raw(
    model: &CellModel,
    filter: &FilterOperator,
    raw: &[f64],
    opts: &SolveOptions,
) -> Result<f64> {
    let filtered = filter.apply(raw);
    Ok(model.solve_converged(&filtered, opts)?.power)
}

/// Central differences `(P(x + h e_k) − P(x − h e_k)) / 2h` of power with
/// respect to raw densities at the listed elements.
pub fn fd_gradient_oracle(
    model: &CellModel,
    filter: &FilterOperator,
    raw: &[f64],
    elements: &[usize],
    h: f64,
    opts: &SolveOptions,
) -> Result<Vec<f64>> {
    let probe = probe_options(opts);
    elements
        .iter()
        .map(|&e| {
            let mut plus = raw.to_vec();
            let mut minus = raw.to_vec();
            plus[e] += h;
            minus[e] -= h;
            let p_plus = power_of_raw(model, filter, &plus, &probe)?;
            let p_minus = power_of_raw(model, filter, &minus, &probe)?;
            Ok((p_plus - p_minus) / (2.0 * h))
        })
        .collect()
}

/// Adjoint gradient of power with respect to raw densities.
pub fn raw_power_gradient(
    model: &CellModel,
    filter: &FilterOperator,
    raw: &[f64],
    opts: &SolveOptions,
) -> Result<(SolveResult, Vec<f64>)> {
    let filtered = filter.apply(raw);
    let (state, grad) = power_gradient(model, &filtered, opts)?;
    Ok((state, filter.adjoint_apply(&grad)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{BusbarSpec, GridSpec, Mesh, ShapeMask};
    use crate::physics::CellParams;

    fn model(n: usize, params: CellParams) -> CellModel {
        let mesh = Mesh::build(GridSpec::square_cell(n), &ShapeMask::FullSquare).unwrap();
        let bus = BusbarSpec::edge_centered(mesh.grid(), 2e-3);
        CellModel::new(mesh.with_busbar(&bus).unwrap(), params).unwrap()
    }

    #[test]
    fn full_metal_gradient_includes_shading_term() {
        // At x̃ = 1 with p = 1 the conductance term stays, but removing the
        // generation derivative must change every element's gradient by the
        // lumped shading contribution.
        let m = model(4, CellParams::default());
        let n = m.mesh().num_elements();
        let x = vec![1.0; n];
        let opts = SolveOptions::default();
        let state = m.solve_converged(&x, &opts).unwrap();
        let lambda = adjoint_solve(&m, &x, &state, &opts).unwrap();
        let g = total_gradient(&m, &x, &state, &lambda);
        let mut mu = vec![m.bus_voltage(); m.mesh().num_nodes()];
        for (f, &node) in m.mesh().free_nodes().iter().enumerate() {
            mu[node] = lambda[f];
        }
        for (e, conn) in m.mesh().connectivity().iter().enumerate() {
            let shade: f64 =
                conn.iter().map(|&a| mu[a]).sum::<f64>() * 0.25 * m.mesh().element_area(e) * 310.0;
            let dev: Vec<f64> = conn.iter().map(|&a| state.voltages[a] - 0.5).collect();
            let k = m.element_matrix();
            let ds = m.params().sheet_conductance_deriv(1.0);
            let cond: f64 = (0..4)
                .map(|a| {
                    mu[conn[a]] * ds * (0..4).map(|b| k[a][b] * (dev[b] - dev[a])).sum::<f64>()
                })
                .sum();
            assert!((g[e] - (-(cond + shade))).abs() <= 1e-12 * g[e].abs().max(1e-12));
            assert!(shade.abs() > 0.0);
        }
    }

    #[test]
    fn unconverged_state_is_rejected() {
        let m = model(6, CellParams::default());
        let n = m.mesh().num_elements();
        let opts = SolveOptions {
            newton_max_iter: 1,
            ..SolveOptions::default()
        };
        let state = m.solve(&vec![0.3; n], &opts);
        assert!(!state.converged);
        assert!(adjoint_solve(&m, &vec![0.3; n], &state, &opts).is_err());
    }

    #[test]
    fn adjoint_is_positive_near_busbar() {
        // Raising the potential of any free node pushes more current into
        // the busbar, so every adjoint entry is positive.
        let m = model(8, CellParams::default());
        let n = m.mesh().num_elements();
        let x = vec![0.4; n];
        let opts = SolveOptions::default();
        let state = m.solve_converged(&x, &opts).unwrap();
        let lambda = adjoint_solve(&m, &x, &state, &opts).unwrap();
        assert!(lambda.iter().all(|l| l.is_finite()));

        // Single-node FD probe on the adjoint interpretation: perturbing the
        // free-node residual by δ shifts P by −λ_f δ.
        let f = m.mesh().free_nodes().len() / 2;
        let node = m.mesh().free_nodes()[f];
        let g = m.assemble_conductance(&x);
        let jac = m.jacobian(&g, &state.voltages);
        let mut rhs = vec![0.0; jac.n()];
        rhs[f] = 1.0;
        let (dv, _) = pcg_jacobi(&jac, &rhs, 1e-14, 10_000).unwrap();
        let dp: f64 = power_voltage_sensitivity(&m, &g)
            .iter()
            .zip(&dv)
            .map(|(a, b)| a * b)
            .sum();
        assert!((dp - lambda[f]).abs() <= 1e-10 * lambda[f].abs());
        assert!(lambda[f] > 0.0, "node {node} λ = {}", lambda[f]);
    }
}
