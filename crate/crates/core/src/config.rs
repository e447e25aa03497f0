//! Experiment configuration files (TOML).
//!
//! ```toml
//! [grid]
//! nx = 100
//! ny = 100
//!
//! [[busbar.segments]]
//! edge = "left"
//! start = 0.0065
//! length = 0.002
//! ```
//!
//! Every omitted physics, filter, run and network setting takes its default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cnn::CnnArch;
use crate::error::{Error, Result};
use crate::filter::FilterOperator;
use crate::mesh::{BusbarSpec, GridSpec, Mesh, ShapeMask};
use crate::optimize::{Problem, RunConfig};
use crate::physics::{CellModel, CellParams};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ShapeConfig {
    #[default]
    Square,
    /// Right triangle with the legs on the left and bottom edges.
    Triangle,
    /// One string per grid row, top row first; `#` marks active elements
    /// and `.` inactive ones.
    Bitmap { rows: Vec<String> },
}

impl ShapeConfig {
    pub fn mask(&self, grid: &GridSpec) -> Result<ShapeMask> {
        match self {
            ShapeConfig::Square => Ok(ShapeMask::FullSquare),
            ShapeConfig::Triangle => Ok(ShapeMask::LowerLeftTriangle),
            ShapeConfig::Bitmap { rows } => {
                if rows.len() != grid.ny {
                    return Err(Error::config(format!(
                        "shape.rows has {} rows, grid.ny is {}",
                        rows.len(),
                        grid.ny
                    )));
                }
                let mut active = vec![false; grid.nx * grid.ny];
                for (r, row) in rows.iter().enumerate() {
                    let j = grid.ny - 1 - r;
                    if row.chars().count() != grid.nx {
                        return Err(Error::config(format!(
                            "shape.rows[{r}] has {} columns, grid.nx is {}",
                            row.chars().count(),
                            grid.nx
                        )));
                    }
                    for (i, ch) in row.chars().enumerate() {
                        active[j * grid.nx + i] = match ch {
                            '#' => true,
                            '.' => false,
                            other => {
                                return Err(Error::config(format!(
                                "shape.rows[{r}] column {i}: expected '#' or '.', found {other:?}"
                            )))
                            }
                        };
                    }
                }
                Ok(ShapeMask::Custom {
                    nx: grid.nx,
                    ny: grid.ny,
                    active,
                })
            }
        }
    }
}

fn default_filter_radius() -> f64 {
    1.5
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Cone filter radius in element widths.
    #[serde(default = "default_filter_radius")]
    pub filter_radius: f64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub grid: GridSpec,
    #[serde(default)]
    pub shape: ShapeConfig,
    pub busbar: BusbarSpec,
    #[serde(default)]
    pub cell: CellParams,
    #[serde(default)]
    pub run: RunConfig,
    /// Generator network; defaults to [`CnnArch::for_grid`].
    #[serde(default)]
    pub arch: Option<CnnArch>,
}

impl ExperimentConfig {
    /// Square cell with a centered 2 mm contact on the left edge.
    pub fn square(n: usize) -> Self {
        let grid = GridSpec::square_cell(n);
        Self {
            filter_radius: default_filter_radius(),
            output_dir: default_output_dir(),
            busbar: BusbarSpec::edge_centered(&grid, 2e-3),
            grid,
            shape: ShapeConfig::Square,
            cell: CellParams::default(),
            run: RunConfig::default(),
            arch: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Learning rate and network made explicit.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        cfg.run.lr = Some(cfg.run.learning_rate());
        cfg.arch = Some(cfg.arch());
        cfg
    }

    pub fn arch(&self) -> CnnArch {
        self.arch
            .clone()
            .unwrap_or_else(|| CnnArch::for_grid(self.grid.nx, self.grid.ny))
    }

    /// Checks every setting by building the mesh and model it describes.
    pub fn validate(&self) -> Result<()> {
        if !(self.filter_radius.is_finite() && self.filter_radius > 0.0) {
            return Err(Error::config(format!(
                "filter_radius must be positive, got {}",
                self.filter_radius
            )));
        }
        self.run.validate()?;
        let arch = self.arch();
        arch.validate()?;
        if (arch.out_w, arch.out_h) != (self.grid.nx, self.grid.ny) {
            return Err(Error::config(format!(
                "arch output {}x{} does not match grid {}x{}",
                arch.out_w, arch.out_h, self.grid.nx, self.grid.ny
            )));
        }
        self.model().map(|_| ())
    }

    pub fn mesh(&self) -> Result<Mesh> {
        self.grid.validate()?;
        let mask = self.shape.mask(&self.grid)?;
        Mesh::build(self.grid, &mask)?.with_busbar(&self.busbar)
    }

    pub fn model(&self) -> Result<CellModel> {
        CellModel::new(self.mesh()?, self.cell)
    }

    pub fn problem(&self) -> Result<Problem> {
        let model = self.model()?;
        let filter = FilterOperator::build(model.mesh(), self.filter_radius)?;
        Problem::new(model, filter, self.run.solver)
    }
}
