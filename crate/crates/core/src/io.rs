//! On-disk artifacts: 16-bit PGM density images, PPM overlays, CSV logs and
//! the per-directory lock file.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::optimize::IterationLog;

pub const LOG_HEADER: &str = "iter,power_w,efficiency_pct,loss,grad_norm,newton_iters,wall_s";

pub const LOCK_FILE: &str = ".metalopt.lock";

/// Full-grid image (row-major `j * nx + i`) of a per-element field; inactive
/// elements are 0.
pub fn grid_image(mesh: &Mesh, field: &[f64]) -> Vec<f64> {
    let g = mesh.grid();
    let mut img = vec![0.0; g.nx * g.ny];
    for (e, &v) in field.iter().enumerate() {
        let [i, j] = mesh.element_ij(e);
        img[j * g.nx + i] = v;
    }
    img
}

/// Grid elements with an edge on the busbar, row-major `j * nx + i`.
pub fn busbar_pixels(mesh: &Mesh) -> Vec<bool> {
    let g = mesh.grid();
    let mut px = vec![false; g.nx * g.ny];
    for (e, conn) in mesh.connectivity().iter().enumerate() {
        let on_bus = conn.iter().filter(|&&n| mesh.is_busbar(n)).count();
        if on_bus >= 2 {
            let [i, j] = mesh.element_ij(e);
            px[j * g.nx + i] = true;
        }
    }
    px
}

pub fn quantize(x: f64) -> u16 {
    (x.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Binary 16-bit PGM; `field` is row-major with row 0 at the bottom, and
/// the file's first row is the top of the cell.
pub fn write_density_pgm(path: &Path, field: &[f64], nx: usize, ny: usize) -> Result<()> {
    check_size(field.len(), nx, ny)?;
    let mut bytes = format!("P5\n{nx} {ny}\n65535\n").into_bytes();
    bytes.reserve(2 * nx * ny);
    for j in (0..ny).rev() {
        for &v in &field[j * nx..(j + 1) * nx] {
            bytes.extend_from_slice(&quantize(v).to_be_bytes());
        }
    }
    let mut w = create(path)?;
    w.write_all(&bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Binary 8-bit PPM of the design in grayscale with busbar pixels in red.
pub fn write_overlay_ppm(
    path: &Path,
    field: &[f64],
    busbar: &[bool],
    nx: usize,
    ny: usize,
) -> Result<()> {
    check_size(field.len(), nx, ny)?;
    check_size(busbar.len(), nx, ny)?;
    let mut bytes = format!("P6\n{nx} {ny}\n255\n").into_bytes();
    for j in (0..ny).rev() {
        for i in 0..nx {
            let k = j * nx + i;
            let rgb = if busbar[k] {
                [255, 0, 0]
            } else {
                let g = (field[k].clamp(0.0, 1.0) * 255.0).round() as u8;
                [g, g, g]
            };
            bytes.extend_from_slice(&rgb);
        }
    }
    let mut w = create(path)?;
    w.write_all(&bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn check_size(len: usize, nx: usize, ny: usize) -> Result<()> {
    if len != nx * ny {
        return Err(Error::Shape(format!(
            "image has {len} values, expected {nx}x{ny}"
        )));
    }
    Ok(())
}

/// Raw 16-bit values of a binary PGM written by [`write_density_pgm`], in
/// file order (top row first), with its width and height.
pub fn read_pgm16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let bad = |msg: &str| Error::config(format!("{}: {msg}", path.display()));
    let mut header = Vec::new();
    while header.len() < 4 {
        let mut line = String::new();
        if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(bad("truncated header"));
        }
        header.extend(line.split_whitespace().map(str::to_owned));
    }
    if header[0] != "P5" || header[3] != "65535" {
        return Err(bad("not a 16-bit binary PGM"));
    }
    let nx: usize = header[1].parse().map_err(|_| bad("bad width"))?;
    let ny: usize = header[2].parse().map_err(|_| bad("bad height"))?;
    let mut raw = vec![0u8; 2 * nx * ny];
    r.read_exact(&mut raw).map_err(|e| Error::io(path, e))?;
    let px = raw
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]))
        .collect();
    Ok((nx, ny, px))
}

pub fn format_log_row(row: &IterationLog) -> String {
    format!(
        "{},{:.16e},{:.16e},{:.16e},{:.16e},{},{:.16e}",
        row.iteration,
        row.power,
        row.efficiency,
        row.loss,
        row.grad_norm,
        row.newton_iters,
        row.wall_s
    )
}

/// Appends one row, writing the header first if the file is new or empty.
pub fn append_log(path: &Path, row: &IterationLog) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let empty = f.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
    let mut text = String::new();
    if empty {
        text.push_str(LOG_HEADER);
        text.push('\n');
    }
    text.push_str(&format_log_row(row));
    text.push('\n');
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Parses a log written by [`append_log`].
pub fn read_log(path: &Path) -> Result<Vec<IterationLog>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::config(format!(
            "{}: missing log header",
            path.display()
        )));
    }
    lines
        .enumerate()
        .map(|(k, line)| {
            let bad = || Error::config(format!("{}: malformed row {}", path.display(), k + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(IterationLog {
                iteration: f[0].parse().map_err(|_| bad())?,
                power: num(f[1])?,
                efficiency: num(f[2])?,
                loss: num(f[3])?,
                grad_norm: num(f[4])?,
                newton_iters: f[5].parse().map_err(|_| bad())?,
                wall_s: num(f[6])?,
            })
        })
        .collect()
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::config(format!(
                "{} is in use by another run (remove {} if that run is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
