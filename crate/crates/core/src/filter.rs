//! Linear cone filter over active elements.

use crate::error::{Error, Result};
use crate::mesh::Mesh;

/// Design values in `[0, 1]`, one per active element.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField(Vec<f64>);

impl DensityField {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((e, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::config(format!(
                "density of element {e} is {v}, outside [0, 1]"
            )));
        }
        Ok(Self(values))
    }

    pub fn uniform(len: usize, value: f64) -> Self {
        assert!((0.0..=1.0).contains(&value));
        Self(vec![value; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Row-normalized cone filter. Row `e` holds `(f, w_ef)` with
/// `w_ef ∝ max(0, r − dist(e, f))` and `Σ_f w_ef = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOperator {
    rows: Vec<Vec<(usize, f64)>>,
}

impl FilterOperator {
    /// `radius` is in element widths. A radius at or below 1/2 gives the
    /// identity.
    pub fn build(mesh: &Mesh, radius: f64) -> Result<Self> {
        if !(radius.is_finite() && radius >= 0.0) {
            return Err(Error::config(format!(
                "filter radius must be non-negative, got {radius}"
            )));
        }
        let mut rows = mesh.filter_neighborhoods(radius);
        for (e, row) in rows.iter_mut().enumerate() {
            if row.is_empty() {
                // radius 0: nothing is strictly closer than the radius.
                row.push((e, 1.0));
                continue;
            }
            let total: f64 = row.iter().map(|(_, w)| w).sum();
            for (_, w) in row.iter_mut() {
                *w /= total;
            }
        }
        Ok(Self { rows })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: (0..n).map(|e| vec![(e, 1.0)]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, e: usize) -> &[(usize, f64)] {
        &self.rows[e]
    }

    /// `F x`
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows.len());
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(f, w)| w * x[f]).sum())
            .collect()
    }

    /// `Fᵀ g`, used to pull gradients back to raw densities.
    pub fn adjoint_apply(&self, g: &[f64]) -> Vec<f64> {
        assert_eq!(g.len(), self.rows.len());
        let mut out = vec![0.0; g.len()];
        for (row, &ge) in self.rows.iter().zip(g) {
            for &(f, w) in row {
                out[f] += w * ge;
            }
        }
        out
    }

    pub fn apply_density(&self, x: &DensityField) -> DensityField {
        // Convex combinations stay in [0, 1] up to rounding.
        DensityField(
            self.apply(x.as_slice())
                .into_iter()
                .map(|v| v.clamp(0.0, 1.0))
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{GridSpec, ShapeMask};
    use proptest::prelude::*;

    fn grid(n: usize) -> Mesh {
        Mesh::build(GridSpec::square_cell(n), &ShapeMask::FullSquare).unwrap()
    }

    fn interior_self_weight() -> f64 {
        1.5 / (1.5 + 4.0 * 0.5 + 4.0 * (1.5 - 2f64.sqrt()))
    }

    #[test]
    fn small_radius_is_identity() {
        let m = grid(5);
        assert_eq!(
            FilterOperator::build(&m, 0.5).unwrap(),
            FilterOperator::identity(25)
        );
        assert_eq!(
            FilterOperator::build(&m, 0.0).unwrap(),
            FilterOperator::identity(25)
        );
        assert!(FilterOperator::build(&m, -1.0).is_err());
    }

    #[test]
    fn interior_row_weight() {
        let m = grid(5);
        let f = FilterOperator::build(&m, 1.5).unwrap();
        let c = m.element_at(2, 2).unwrap();
        let w = f.row(c).iter().find(|(g, _)| *g == c).unwrap().1;
        assert!((w - interior_self_weight()).abs() < 1e-15);
        assert!((w - 0.390306).abs() < 1e-6);
    }

    #[test]
    fn impulse_response() {
        let m = grid(5);
        let f = FilterOperator::build(&m, 1.5).unwrap();
        let c = m.element_at(2, 2).unwrap();
        let mut x = vec![0.0; 25];
        x[c] = 1.0;
        let y = f.apply(&x);
        assert!((y[c] - interior_self_weight()).abs() < 1e-15);
        // Edge neighbor (2, 1) is itself interior in a 5×5 grid.
        let n = m.element_at(2, 1).unwrap();
        let row_sum = 1.5 + 4.0 * 0.5 + 4.0 * (1.5 - 2f64.sqrt());
        assert!((y[n] - 0.5 / row_sum).abs() < 1e-15);
        // Corner (0, 0) sees self, two edges and one diagonal.
        let corner_sum = 1.5 + 2.0 * 0.5 + (1.5 - 2f64.sqrt());
        let k = m.element_at(0, 0).unwrap();
        let wk = f.row(k).iter().find(|(g, _)| *g == k).unwrap().1;
        assert!((wk - 1.5 / corner_sum).abs() < 1e-15);
    }

    #[test]
    fn masked_rows_renormalize_over_active_only() {
        // Brute-force the neighbor sets on a 5×5 triangle.
        let m = Mesh::build(GridSpec::square_cell(5), &ShapeMask::LowerLeftTriangle).unwrap();
        let f = FilterOperator::build(&m, 1.5).unwrap();
        for e in 0..m.num_elements() {
            let [i, j] = m.element_ij(e);
            let mut expected = Vec::new();
            for fj in 0..5usize {
                for fi in 0..5usize {
                    if fi + fj > 4 {
                        continue;
                    }
                    let d =
                        ((fi as f64 - i as f64).powi(2) + (fj as f64 - j as f64).powi(2)).sqrt();
                    if d < 1.5 {
                        expected.push((m.element_at(fi, fj).unwrap(), 1.5 - d));
                    }
                }
            }
            let total: f64 = expected.iter().map(|(_, w)| w).sum();
            expected.sort_by_key(|(g, _)| *g);
            let row = f.row(e);
            assert_eq!(row.len(), expected.len());
            for ((g, w), (h, v)) in row.iter().zip(&expected) {
                assert_eq!(g, h);
                assert!((w - v / total).abs() < 1e-15);
            }
            let s: f64 = row.iter().map(|(_, w)| w).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // The apex element (0, 4) only has (0, 3) and (1, 3) as neighbors.
        let apex = m.element_at(0, 4).unwrap();
        assert_eq!(f.row(apex).len(), 3);
    }

    #[test]
    fn constants_are_preserved() {
        let m = grid(9);
        let f = FilterOperator::build(&m, 1.5).unwrap();
        for v in f.apply(&[0.3; 81]) {
            assert!((v - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn raw_weights_are_symmetric() {
        let m = grid(7);
        let nb = m.filter_neighborhoods(2.3);
        for (e, row) in nb.iter().enumerate() {
            for &(f, w) in row {
                let back = nb[f].iter().find(|(g, _)| *g == e).unwrap().1;
                assert_eq!(w, back);
            }
        }
    }

    #[test]
    fn density_field_validates_range() {
        assert!(DensityField::new(vec![0.0, 1.0, 0.5]).is_ok());
        assert!(DensityField::new(vec![1.0 + 1e-12]).is_err());
        assert!(DensityField::new(vec![f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn adjoint_identity(xs in prop::collection::vec(-1.0f64..1.0, 49), ys in prop::collection::vec(-1.0f64..1.0, 49)) {
            let m = grid(7);
            let f = FilterOperator::build(&m, 1.5).unwrap();
            let lhs: f64 = f.apply(&xs).iter().zip(&ys).map(|(a, b)| a * b).sum();
            let rhs: f64 = xs.iter().zip(f.adjoint_apply(&ys)).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() <= 1e-13 * (1.0 + lhs.abs()));
        }

        #[test]
        fn bounds_and_linearity(xs in prop::collection::vec(0.0f64..1.0, 36), ys in prop::collection::vec(0.0f64..1.0, 36), a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let m = Mesh::build(GridSpec::square_cell(6), &ShapeMask::LowerLeftTriangle).unwrap();
            let n = m.num_elements();
            let (xs, ys) = (&xs[..n], &ys[..n]);
            let f = FilterOperator::build(&m, 1.5).unwrap();
            let fx = f.apply(xs);
            let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for v in &fx {
                prop_assert!(*v >= lo - 1e-15 && *v <= hi + 1e-15);
            }
            let combo: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| a * x + b * y).collect();
            let fy = f.apply(ys);
            for ((l, x), y) in f.apply(&combo).iter().zip(&fx).zip(&fy) {
                prop_assert!((l - (a * x + b * y)).abs() < 1e-13);
            }
        }
    }
}
