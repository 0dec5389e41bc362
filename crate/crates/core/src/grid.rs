//! Bird's-eye-view raster storage.
//!
//! Cells are stored row-major with `row` indexing y and `col` indexing x, both
//! counted from the grid's minimum corner. Grids are anchored in the scenario's
//! world frame.

use std::fmt::Display;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{OrientedBox, Point2, Rect};

/// Extent and resolution of a BEV grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub cell_size: f64,
}

impl Default for GridSpec {
    /// ±51.2 m at 0.8 m: 128 × 128 cells.
    fn default() -> Self {
        Self {
            x_min: -51.2,
            x_max: 51.2,
            y_min: -51.2,
            y_max: 51.2,
            cell_size: 0.8,
        }
    }
}

fn whole_cells(extent: f64, cell: f64) -> Option<usize> {
    let n = extent / cell;
    let rounded = n.round();
    if rounded >= 1.0 && (n - rounded).abs() <= 1e-9 * rounded.max(1.0) {
        Some(rounded as usize)
    } else {
        None
    }
}

impl GridSpec {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64, cell_size: f64) -> Result<Self> {
        let spec = Self {
            x_min,
            x_max,
            y_min,
            y_max,
            cell_size,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Square grid centered on the origin.
    pub fn centered(half_extent: f64, cell_size: f64) -> Result<Self> {
        Self::new(
            -half_extent,
            half_extent,
            -half_extent,
            half_extent,
            cell_size,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.x_min,
            self.x_max,
            self.y_min,
            self.y_max,
            self.cell_size,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGridSpec("non-finite bound".into()));
        }
        if self.cell_size <= 0.0 {
            return Err(Error::InvalidGridSpec("cell_size must be positive".into()));
        }
        if whole_cells(self.x_max - self.x_min, self.cell_size).is_none()
            || whole_cells(self.y_max - self.y_min, self.cell_size).is_none()
        {
            return Err(Error::InvalidGridSpec(format!(
                "extent [{}, {}] x [{}, {}] is not a positive whole number of {} m cells",
                self.x_min, self.x_max, self.y_min, self.y_max, self.cell_size
            )));
        }
        Ok(())
    }

    pub fn cols(&self) -> usize {
        whole_cells(self.x_max - self.x_min, self.cell_size).unwrap_or(0)
    }

    pub fn rows(&self) -> usize {
        whole_cells(self.y_max - self.y_min, self.cell_size).unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn extent(&self) -> Rect {
        Rect::new(self.x_min, self.y_min, self.x_max, self.y_max)
    }

    /// Cell containing `p`; `None` outside `[min, max)` on either axis.
    pub fn world_to_cell(&self, p: Point2) -> Option<CellIndex> {
        if !(p.x >= self.x_min && p.x < self.x_max && p.y >= self.y_min && p.y < self.y_max) {
            return None;
        }
        let col = (((p.x - self.x_min) / self.cell_size).floor() as usize).min(self.cols() - 1);
        let row = (((p.y - self.y_min) / self.cell_size).floor() as usize).min(self.rows() - 1);
        Some(CellIndex { row, col })
    }

    pub fn cell_center(&self, c: CellIndex) -> Point2 {
        Point2::new(
            self.x_min + (c.col as f64 + 0.5) * self.cell_size,
            self.y_min + (c.row as f64 + 0.5) * self.cell_size,
        )
    }

    pub fn cell_rect(&self, c: CellIndex) -> Rect {
        let x0 = self.x_min + c.col as f64 * self.cell_size;
        let y0 = self.y_min + c.row as f64 * self.cell_size;
        Rect::new(x0, y0, x0 + self.cell_size, y0 + self.cell_size)
    }

    pub fn index(&self, c: CellIndex) -> usize {
        c.row * self.cols() + c.col
    }

    pub fn cell_at(&self, index: usize) -> CellIndex {
        let cols = self.cols();
        CellIndex {
            row: index / cols,
            col: index % cols,
        }
    }

    /// Inclusive cell-index range covered by `r`, clipped to the grid.
    fn cell_range(&self, r: &Rect) -> Option<(usize, usize, usize, usize)> {
        if r.x_max < self.x_min
            || r.x_min >= self.x_max
            || r.y_max < self.y_min
            || r.y_min >= self.y_max
        {
            return None;
        }
        let cs = self.cell_size;
        let c0 = ((r.x_min - self.x_min) / cs).floor().max(0.0) as usize;
        let r0 = ((r.y_min - self.y_min) / cs).floor().max(0.0) as usize;
        let c1 = (((r.x_max - self.x_min) / cs).floor() as usize).min(self.cols() - 1);
        let r1 = (((r.y_max - self.y_min) / cs).floor() as usize).min(self.rows() - 1);
        Some((r0, r1, c0, c1))
    }

    /// Cells whose centers lie inside the footprint. A footprint too small to
    /// contain any cell center yields the single cell holding its center.
    pub fn rasterize_box(&self, b: &OrientedBox) -> Vec<CellIndex> {
        let mut out = Vec::new();
        if let Some((r0, r1, c0, c1)) = self.cell_range(&b.bounding_rect()) {
            for row in r0..=r1 {
                for col in c0..=c1 {
                    let c = CellIndex { row, col };
                    if b.contains(self.cell_center(c)) {
                        out.push(c);
                    }
                }
            }
        }
        if out.is_empty() {
            if let Some(c) = self.world_to_cell(b.center) {
                out.push(c);
            }
        }
        out
    }

    /// Cells whose area overlaps the rectangle.
    pub fn rasterize_rect(&self, r: &Rect) -> Vec<CellIndex> {
        let mut out = Vec::new();
        if let Some((r0, r1, c0, c1)) = self.cell_range(r) {
            for row in r0..=r1 {
                for col in c0..=c1 {
                    let c = CellIndex { row, col };
                    if self.cell_rect(c).overlaps(r) {
                        out.push(c);
                    }
                }
            }
        }
        out
    }

    /// World-space rectangle spanned by an inclusive block of cells.
    pub fn cells_rect(&self, row0: usize, col0: usize, row1: usize, col1: usize) -> Rect {
        let cs = self.cell_size;
        Rect::new(
            self.x_min + col0 as f64 * cs,
            self.y_min + row0 as f64 * cs,
            self.x_min + (col1 + 1) as f64 * cs,
            self.y_min + (row1 + 1) as f64 * cs,
        )
    }
}

/// Free function form of [`GridSpec::world_to_cell`].
pub fn world_to_cell(spec: &GridSpec, p: Point2) -> Option<CellIndex> {
    spec.world_to_cell(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellIndex {
    pub row: usize,
    pub col: usize,
}

impl CellIndex {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

/// Row-major raster over a [`GridSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<V> {
    spec: GridSpec,
    rows: usize,
    cols: usize,
    cells: Vec<V>,
}

/// Per-cell hit counts.
pub type OccupancyGrid = Grid<u32>;
/// Boolean cell selection.
pub type CellMask = Grid<bool>;
/// Per-cell relevance in `[0, 1]`.
pub type Heatmap = Grid<f64>;

impl<V: Clone> Grid<V> {
    pub fn filled(spec: GridSpec, value: V) -> Self {
        let (rows, cols) = (spec.rows(), spec.cols());
        Self {
            spec,
            rows,
            cols,
            cells: vec![value; rows * cols],
        }
    }

    pub fn from_fn(spec: GridSpec, mut f: impl FnMut(CellIndex) -> V) -> Self {
        let (rows, cols) = (spec.rows(), spec.cols());
        let mut cells = Vec::with_capacity(rows * cols);
        for row in 0..rows {
            for col in 0..cols {
                cells.push(f(CellIndex { row, col }));
            }
        }
        Self {
            spec,
            rows,
            cols,
            cells,
        }
    }

    pub fn from_vec(spec: GridSpec, cells: Vec<V>) -> Result<Self> {
        let (rows, cols) = (spec.rows(), spec.cols());
        if cells.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} grid",
                cells.len()
            )));
        }
        Ok(Self {
            spec,
            rows,
            cols,
            cells,
        })
    }

    pub fn map<U: Clone>(&self, f: impl Fn(&V) -> U) -> Grid<U> {
        Grid {
            spec: self.spec,
            rows: self.rows,
            cols: self.cols,
            cells: self.cells.iter().map(f).collect(),
        }
    }
}

impl<V> Grid<V> {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[V] {
        &self.cells
    }

    pub fn cells_mut(&mut self) -> &mut [V] {
        &mut self.cells
    }

    pub fn get(&self, c: CellIndex) -> &V {
        &self.cells[c.row * self.cols + c.col]
    }

    pub fn get_mut(&mut self, c: CellIndex) -> &mut V {
        &mut self.cells[c.row * self.cols + c.col]
    }

    pub fn set(&mut self, c: CellIndex, v: V) {
        self.cells[c.row * self.cols + c.col] = v;
    }

    pub fn iter_cells(&self) -> impl Iterator<Item = (CellIndex, &V)> + '_ {
        let cols = self.cols;
        self.cells.iter().enumerate().map(move |(i, v)| {
            (
                CellIndex {
                    row: i / cols,
                    col: i % cols,
                },
                v,
            )
        })
    }

    /// Errors unless both grids share the same spec.
    pub fn check_same_spec<U>(&self, other: &Grid<U>) -> Result<()> {
        if self.spec != other.spec {
            return Err(Error::SpecMismatch(format!(
                "{:?} vs {:?}",
                self.spec, other.spec
            )));
        }
        Ok(())
    }

    /// Writes `row,col,value` lines with a header.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()>
    where
        V: Display,
    {
        writeln!(w, "row,col,value")?;
        for (c, v) in self.iter_cells() {
            writeln!(w, "{},{},{}", c.row, c.col, v)?;
        }
        Ok(())
    }

    /// Binary portable graymap (P5). The top image row is the grid's highest `y` row.
    pub fn to_pgm(&self, gray: impl Fn(&V) -> u8) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        for row in (0..self.rows).rev() {
            for col in 0..self.cols {
                out.push(gray(&self.cells[row * self.cols + col]));
            }
        }
        out
    }
}

impl Heatmap {
    /// Builds a heatmap, clamping every value into `[0, 1]`. NaN becomes 0.
    pub fn heatmap_from_fn(spec: GridSpec, mut f: impl FnMut(CellIndex) -> f64) -> Self {
        Grid::from_fn(spec, |c| clamp_unit(f(c)))
    }

    pub fn heatmap_pgm(&self) -> Vec<u8> {
        self.to_pgm(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
    }
}

pub(crate) fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

impl CellMask {
    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }

    pub fn mask_pgm(&self) -> Vec<u8> {
        self.to_pgm(|&b| if b { 255 } else { 0 })
    }

    pub fn is_subset_of(&self, other: &CellMask) -> bool {
        self.cells.iter().zip(&other.cells).all(|(&a, &b)| !a || b)
    }
}

impl OccupancyGrid {
    pub fn max_count(&self) -> u32 {
        self.cells.iter().copied().max().unwrap_or(0)
    }

    /// Gray level proportional to the count, with the maximum count at 255.
    pub fn occupancy_pgm(&self) -> Vec<u8> {
        let max = self.max_count().max(1) as f64;
        self.to_pgm(|&v| ((v as f64 / max) * 255.0).round() as u8)
    }
}

/// `|a ∧ b| / |a ∨ b|`, with two empty masks scoring 1.
pub fn mask_iou(a: &CellMask, b: &CellMask) -> Result<f64> {
    a.check_same_spec(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.cells().iter().zip(b.cells()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Writes raw bytes to `path`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
