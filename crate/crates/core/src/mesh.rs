//! Structured bilinear-quad grid over the cell front surface.
//!
//! Elements are indexed on the full `nx × ny` grid as `j * nx + i`, with `i`
//! along x and `j` along y. Only active elements take part in assembly; the
//! compact node numbering keeps grid-major order (`j * (nx + 1) + i`) over the
//! nodes that touch at least one active element.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    /// Physical width in meters.
    #[serde(default = "default_extent")]
    pub lx: f64,
    /// Physical height in meters.
    #[serde(default = "default_extent")]
    pub ly: f64,
}

fn default_extent() -> f64 {
    0.015
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64) -> Self {
        Self { nx, ny, lx, ly }
    }

    /// Square 1.5 cm cell at the given resolution.
    pub fn square_cell(n: usize) -> Self {
        Self::new(n, n, default_extent(), default_extent())
    }

    pub fn hx(&self) -> f64 {
        self.lx / self.nx as f64
    }

    pub fn hy(&self) -> f64 {
        self.ly / self.ny as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.ny < 2 {
            return Err(Error::config(format!(
                "grid needs at least 2 elements per axis, got nx={} ny={}",
                self.nx, self.ny
            )));
        }
        if !(self.lx.is_finite() && self.lx > 0.0 && self.ly.is_finite() && self.ly > 0.0) {
            return Err(Error::config(format!(
                "grid extents must be positive, got lx={} ly={}",
                self.lx, self.ly
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ShapeMask {
    FullSquare,
    /// Element `(i, j)` is active iff its center lies on or below the
    /// anti-diagonal; for `nx == ny` this is `i + j <= nx - 1`.
    LowerLeftTriangle,
    /// Row-major `j * nx + i`, `true` = active.
    Custom {
        nx: usize,
        ny: usize,
        active: Vec<bool>,
    },
}

impl ShapeMask {
    fn is_active(&self, grid: &GridSpec, i: usize, j: usize) -> bool {
        match self {
            ShapeMask::FullSquare => true,
            ShapeMask::LowerLeftTriangle => {
                // (i + 1/2)/nx + (j + 1/2)/ny <= 1, kept in integers.
                (2 * i + 1) * grid.ny + (2 * j + 1) * grid.nx <= 2 * grid.nx * grid.ny
            }
            ShapeMask::Custom { nx, active, .. } => active[j * nx + i],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Edge {
    Left,
    Right,
    Top,
    Bottom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusbarSegment {
    pub edge: Edge,
    /// Offset along the edge in meters (from the bottom for left/right, from
    /// the left for top/bottom).
    pub start: f64,
    /// Contact length in meters.
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusbarSpec {
    pub segments: Vec<BusbarSegment>,
    /// Busbar voltage in volts.
    #[serde(default = "default_bus_voltage")]
    pub voltage: f64,
}

fn default_bus_voltage() -> f64 {
    0.5
}

impl BusbarSpec {
    pub fn new(segments: Vec<BusbarSegment>, voltage: f64) -> Self {
        Self { segments, voltage }
    }

    /// A single 2 mm contact centered on the left edge.
    pub fn edge_centered(grid: &GridSpec, width: f64) -> Self {
        Self::new(
            vec![BusbarSegment {
                edge: Edge::Left,
                start: 0.5 * (grid.ly - width),
                length: width,
            }],
            0.5,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    grid: GridSpec,
    /// Grid element index -> active index.
    element_slot: Vec<Option<usize>>,
    /// Active index -> (i, j).
    elements: Vec<[usize; 2]>,
    /// Active index -> compact node indices, counter-clockwise from (i, j).
    connectivity: Vec<[usize; 4]>,
    /// Compact node index -> grid node (i, j).
    nodes: Vec<[usize; 2]>,
    /// Grid node index -> compact node index.
    node_slot: Vec<Option<usize>>,
    element_area: Vec<f64>,
    /// Lumped nodal area: a quarter of each adjacent active element.
    node_area: Vec<f64>,
    busbar: Option<BusbarSet>,
}

#[derive(Debug, Clone, PartialEq)]
struct BusbarSet {
    voltage: f64,
    nodes: Vec<usize>,
    free: Vec<usize>,
    /// Compact node -> position in `free`, `None` for busbar nodes.
    free_slot: Vec<Option<usize>>,
}

impl Mesh {
    /// Builds the grid and drops every element outside the mask.
    pub fn build(grid: GridSpec, mask: &ShapeMask) -> Result<Mesh> {
        grid.validate()?;
        if let ShapeMask::Custom { nx, ny, active } = mask {
            if *nx != grid.nx || *ny != grid.ny || active.len() != nx * ny {
                return Err(Error::config(format!(
                    "custom mask is {}x{} ({} cells) but grid is {}x{}",
                    nx,
                    ny,
                    active.len(),
                    grid.nx,
                    grid.ny
                )));
            }
        }

        let (nx, ny) = (grid.nx, grid.ny);
        let mut element_slot = vec![None; nx * ny];
        let mut elements = Vec::new();
        let mut node_used = vec![false; (nx + 1) * (ny + 1)];
        for j in 0..ny {
            for i in 0..nx {
                if mask.is_active(&grid, i, j) {
                    element_slot[j * nx + i] = Some(elements.len());
                    elements.push([i, j]);
                    for [ni, nj] in quad_corners(i, j) {
                        node_used[nj * (nx + 1) + ni] = true;
                    }
                }
            }
        }
        if elements.is_empty() {
            return Err(Error::config("shape mask has no active elements"));
        }

        let mut node_slot = vec![None; node_used.len()];
        let mut nodes = Vec::new();
        for (g, used) in node_used.iter().enumerate() {
            if *used {
                node_slot[g] = Some(nodes.len());
                nodes.push([g % (nx + 1), g / (nx + 1)]);
            }
        }

        let connectivity: Vec<[usize; 4]> = elements
            .iter()
            .map(|&[i, j]| {
                quad_corners(i, j).map(|[ni, nj]| {
                    node_slot[nj * (nx + 1) + ni].expect("corner of an active element")
                })
            })
            .collect();

        let area = grid.hx() * grid.hy();
        let element_area = vec![area; elements.len()];
        let mut node_area = vec![0.0; nodes.len()];
        for (conn, a) in connectivity.iter().zip(&element_area) {
            for &n in conn {
                node_area[n] += 0.25 * a;
            }
        }

        Ok(Mesh {
            grid,
            element_slot,
            elements,
            connectivity,
            nodes,
            node_slot,
            element_area,
            node_area,
            busbar: None,
        })
    }

    /// Returns a copy of this mesh with the Dirichlet node set resolved from
    /// `bus`. Any previously resolved busbar is replaced.
    ///
    /// Each segment is snapped to whole elements: the start offset rounds to
    /// the nearest element boundary and the length to the nearest whole
    /// number of elements, with a minimum of one.
    pub fn with_busbar(&self, bus: &BusbarSpec) -> Result<Mesh> {
        if !(bus.voltage.is_finite() && bus.voltage > 0.0) {
            return Err(Error::config(format!(
                "busbar voltage must be positive, got {}",
                bus.voltage
            )));
        }
        if bus.segments.is_empty() {
            return Err(Error::config("busbar has no segments"));
        }
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        let mut is_bus = vec![false; self.nodes.len()];
        for (k, seg) in bus.segments.iter().enumerate() {
            let (extent, h, n_el) = match seg.edge {
                Edge::Left | Edge::Right => (self.grid.ly, self.grid.hy(), ny),
                Edge::Top | Edge::Bottom => (self.grid.lx, self.grid.hx(), nx),
            };
            let tol = 1e-9 * extent;
            if !(seg.start.is_finite() && seg.length.is_finite())
                || seg.start < -tol
                || seg.length <= 0.0
                || seg.start + seg.length > extent + tol
            {
                return Err(Error::config(format!(
                    "busbar segment {k} ({:?}, start {}, length {}) does not lie on the edge [0, {extent}]",
                    seg.edge, seg.start, seg.length
                )));
            }
            let count = ((seg.length / h).round() as usize).clamp(1, n_el);
            let first = ((seg.start / h).round() as usize).min(n_el - count);
            for k in first..=first + count {
                let [gi, gj] = match seg.edge {
                    Edge::Left => [0, k],
                    Edge::Right => [nx, k],
                    Edge::Bottom => [k, 0],
                    Edge::Top => [k, ny],
                };
                if let Some(n) = self.node_slot[gj * (nx + 1) + gi] {
                    is_bus[n] = true;
                }
            }
        }

        let nodes: Vec<usize> = (0..self.nodes.len()).filter(|&n| is_bus[n]).collect();
        if nodes.is_empty() {
            return Err(Error::config(
                "busbar segments do not touch any active element",
            ));
        }
        let mut free = Vec::with_capacity(self.nodes.len() - nodes.len());
        let mut free_slot = vec![None; self.nodes.len()];
        for n in 0..self.nodes.len() {
            if !is_bus[n] {
                free_slot[n] = Some(free.len());
                free.push(n);
            }
        }

        let mut mesh = self.clone();
        mesh.busbar = Some(BusbarSet {
            voltage: bus.voltage,
            nodes,
            free,
            free_slot,
        });
        mesh.check_connected()?;
        Ok(mesh)
    }

    /// Every active element must be reachable from a busbar node through
    /// shared nodes, otherwise the reduced system is singular.
    fn check_connected(&self) -> Result<()> {
        let bus = self.busbar.as_ref().expect("busbar resolved");
        let mut node_elements: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for (e, conn) in self.connectivity.iter().enumerate() {
            for &n in conn {
                node_elements[n].push(e);
            }
        }
        let mut seen_node = vec![false; self.nodes.len()];
        let mut seen_elem = vec![false; self.elements.len()];
        let mut stack: Vec<usize> = bus.nodes.clone();
        for &n in &bus.nodes {
            seen_node[n] = true;
        }
        while let Some(n) = stack.pop() {
            for &e in &node_elements[n] {
                if !seen_elem[e] {
                    seen_elem[e] = true;
                    for &m in &self.connectivity[e] {
                        if !seen_node[m] {
                            seen_node[m] = true;
                            stack.push(m);
                        }
                    }
                }
            }
        }
        match seen_elem.iter().position(|s| !s) {
            Some(e) => Err(Error::config(format!(
                "active element {:?} is not connected to any busbar node",
                self.elements[e]
            ))),
            None => Ok(()),
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn hx(&self) -> f64 {
        self.grid.hx()
    }

    pub fn hy(&self) -> f64 {
        self.grid.hy()
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Grid coordinates `(i, j)` of active element `e`.
    pub fn element_ij(&self, e: usize) -> [usize; 2] {
        self.elements[e]
    }

    /// Active index of grid element `(i, j)`, if active.
    pub fn element_at(&self, i: usize, j: usize) -> Option<usize> {
        if i >= self.grid.nx || j >= self.grid.ny {
            return None;
        }
        self.element_slot[j * self.grid.nx + i]
    }

    pub fn connectivity(&self) -> &[[usize; 4]] {
        &self.connectivity
    }

    pub fn element_area(&self, e: usize) -> f64 {
        self.element_area[e]
    }

    pub fn element_areas(&self) -> &[f64] {
        &self.element_area
    }

    pub fn node_areas(&self) -> &[f64] {
        &self.node_area
    }

    /// Grid indices `(i, j)` of compact node `n`.
    pub fn node_ij(&self, n: usize) -> [usize; 2] {
        self.nodes[n]
    }

    pub fn node_at(&self, i: usize, j: usize) -> Option<usize> {
        if i > self.grid.nx || j > self.grid.ny {
            return None;
        }
        self.node_slot[j * (self.grid.nx + 1) + i]
    }

    /// Physical coordinates of compact node `n` in meters.
    pub fn node_coords(&self, n: usize) -> [f64; 2] {
        let [i, j] = self.nodes[n];
        [i as f64 * self.hx(), j as f64 * self.hy()]
    }

    /// Total active area in m².
    pub fn cell_area(&self) -> f64 {
        self.element_area.iter().sum()
    }

    pub fn has_busbar(&self) -> bool {
        self.busbar.is_some()
    }

    fn bus(&self) -> &BusbarSet {
        self.busbar
            .as_ref()
            .expect("mesh has no busbar; call with_busbar first")
    }

    pub fn bus_voltage(&self) -> f64 {
        self.bus().voltage
    }

    pub fn busbar_nodes(&self) -> &[usize] {
        &self.bus().nodes
    }

    pub fn free_nodes(&self) -> &[usize] {
        &self.bus().free
    }

    /// Position of node `n` in the free-node ordering.
    pub fn free_slot(&self, n: usize) -> Option<usize> {
        self.bus().free_slot[n]
    }

    pub fn is_busbar(&self, n: usize) -> bool {
        self.bus().free_slot[n].is_none()
    }

    /// Active elements within `radius` element widths of each active element,
    /// measured between element centers, paired with the cone weight
    /// `radius - dist`. Lists are ordered by active index.
    pub fn filter_neighborhoods(&self, radius: f64) -> Vec<Vec<(usize, f64)>> {
        let reach = radius.max(0.0).ceil() as isize;
        let (nx, ny) = (self.grid.nx as isize, self.grid.ny as isize);
        self.elements
            .iter()
            .map(|&[i, j]| {
                let mut row = Vec::new();
                for dj in -reach..=reach {
                    for di in -reach..=reach {
                        let (fi, fj) = (i as isize + di, j as isize + dj);
                        if fi < 0 || fj < 0 || fi >= nx || fj >= ny {
                            continue;
                        }
                        let dist = ((di * di + dj * dj) as f64).sqrt();
                        if dist >= radius {
                            continue;
                        }
                        if let Some(f) = self.element_at(fi as usize, fj as usize) {
                            row.push((f, radius - dist));
                        }
                    }
                }
                row.sort_by_key(|&(f, _)| f);
                row
            })
            .collect()
    }
}

fn quad_corners(i: usize, j: usize) -> [[usize; 2]; 4] {
    [[i, j], [i + 1, j], [i + 1, j + 1], [i, j + 1]]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(n: usize) -> Mesh {
        Mesh::build(GridSpec::square_cell(n), &ShapeMask::FullSquare).unwrap()
    }

    #[test]
    fn full_square_counts() {
        let m = square(200);
        assert_eq!(m.num_elements(), 40_000);
        assert_eq!(m.num_nodes(), 40_401);

        let m = square(2);
        assert_eq!(m.num_elements(), 4);
        assert_eq!(m.num_nodes(), 9);
        for e in 0..4 {
            assert!((m.element_area(e) - 0.0075 * 0.0075).abs() < 1e-18);
        }
    }

    #[test]
    fn triangle_counts() {
        let m = Mesh::build(GridSpec::square_cell(200), &ShapeMask::LowerLeftTriangle).unwrap();
        assert_eq!(m.num_elements(), 20_100);
        for e in 0..m.num_elements() {
            let [i, j] = m.element_ij(e);
            assert!(i + j <= 199);
        }
    }

    #[test]
    fn cell_area_matches_extent() {
        let m = Mesh::build(GridSpec::new(7, 13, 0.01, 0.02), &ShapeMask::FullSquare).unwrap();
        assert!((m.cell_area() - 2e-4).abs() <= 1e-12 * 2e-4);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let mask = ShapeMask::Custom {
            nx: 3,
            ny: 3,
            active: vec![false; 9],
        };
        assert!(matches!(
            Mesh::build(GridSpec::square_cell(3), &mask),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bad_grid_is_rejected() {
        assert!(Mesh::build(GridSpec::square_cell(1), &ShapeMask::FullSquare).is_err());
        assert!(Mesh::build(GridSpec::new(4, 4, 0.0, 1.0), &ShapeMask::FullSquare).is_err());
    }

    #[test]
    fn mismatched_bitmap_is_rejected() {
        let mask = ShapeMask::Custom {
            nx: 3,
            ny: 2,
            active: vec![true; 6],
        };
        assert!(Mesh::build(GridSpec::square_cell(3), &mask).is_err());
    }

    #[test]
    fn busbar_two_mm_on_fine_grid() {
        let m = square(200);
        let bus = BusbarSpec::new(
            vec![BusbarSegment {
                edge: Edge::Left,
                start: 6.5e-3,
                length: 2e-3,
            }],
            0.5,
        );
        let m = m.with_busbar(&bus).unwrap();
        let nodes = m.busbar_nodes();
        assert_eq!(nodes.len(), 28);
        let js: Vec<usize> = nodes.iter().map(|&n| m.node_ij(n)[1]).collect();
        assert!(nodes.iter().all(|&n| m.node_ij(n)[0] == 0));
        assert!(js.windows(2).all(|w| w[1] == w[0] + 1));
    }

    #[test]
    fn busbar_full_edge_and_minimum() {
        let m = square(10);
        let full = BusbarSpec::new(
            vec![BusbarSegment {
                edge: Edge::Left,
                start: 0.0,
                length: 0.015,
            }],
            0.5,
        );
        assert_eq!(m.with_busbar(&full).unwrap().busbar_nodes().len(), 11);

        let tiny = BusbarSpec::new(
            vec![BusbarSegment {
                edge: Edge::Top,
                start: 3e-3,
                length: 10e-6,
            }],
            0.5,
        );
        assert_eq!(m.with_busbar(&tiny).unwrap().busbar_nodes().len(), 2);
    }

    #[test]
    fn busbar_errors() {
        let m = square(10);
        let off = BusbarSpec::new(
            vec![BusbarSegment {
                edge: Edge::Bottom,
                start: 0.014,
                length: 0.002,
            }],
            0.5,
        );
        assert!(m.with_busbar(&off).is_err());
        let neg = BusbarSpec::edge_centered(m.grid(), 2e-3);
        let neg = BusbarSpec {
            voltage: -0.1,
            ..neg
        };
        assert!(m.with_busbar(&neg).is_err());

        // Top edge of the lower-left triangle only touches the apex element.
        let tri = Mesh::build(GridSpec::square_cell(10), &ShapeMask::LowerLeftTriangle).unwrap();
        let top_right = BusbarSpec::new(
            vec![BusbarSegment {
                edge: Edge::Top,
                start: 0.01,
                length: 0.004,
            }],
            0.5,
        );
        assert!(tri.with_busbar(&top_right).is_err());
    }

    #[test]
    fn disconnected_island_is_rejected() {
        let mut active = vec![false; 25];
        active[0] = true;
        active[24] = true;
        let mask = ShapeMask::Custom {
            nx: 5,
            ny: 5,
            active,
        };
        let m = Mesh::build(GridSpec::square_cell(5), &mask).unwrap();
        let bus = BusbarSpec::new(
            vec![BusbarSegment {
                edge: Edge::Left,
                start: 0.0,
                length: 0.003,
            }],
            0.5,
        );
        assert!(m.with_busbar(&bus).is_err());
    }

    #[test]
    fn busbar_is_idempotent_and_partitions_nodes() {
        let m = square(12);
        let bus = BusbarSpec::edge_centered(m.grid(), 2e-3);
        let a = m.with_busbar(&bus).unwrap();
        let b = a.with_busbar(&bus).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a
            .busbar_nodes()
            .iter()
            .chain(a.free_nodes())
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..a.num_nodes()).collect::<Vec<_>>());
    }

    #[test]
    fn interior_neighborhood_weights() {
        let m = square(5);
        let centre = m.element_at(2, 2).unwrap();
        let row = &m.filter_neighborhoods(1.5)[centre];
        assert_eq!(row.len(), 9);
        let diag = 1.5 - 2f64.sqrt();
        for &(f, w) in row {
            let [i, j] = m.element_ij(f);
            let expected = match (i.abs_diff(2), j.abs_diff(2)) {
                (0, 0) => 1.5,
                (1, 1) => diag,
                _ => 0.5,
            };
            assert!((w - expected).abs() < 1e-15);
        }
        assert!((diag - 0.085786).abs() < 1e-6);

        for row in m.filter_neighborhoods(0.5) {
            assert_eq!(row.len(), 1);
        }
    }
}
