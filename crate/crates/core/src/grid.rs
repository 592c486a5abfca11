//! Top-view semantic grid maps.
//!
//! Vehicle frame: x forward, y left, z up. Row 0 is the far edge of the
//! grid and column 0 the leftmost column. The near edge of the grid sits
//! `x_offset_m` in front of the vehicle origin.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{self, Image, LabelImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
#[repr(u8)]
pub enum SemanticClass {
    /// Obstacles, occluded and unobserved cells.
    #[default]
    NonFree = 0,
    Road = 1,
    Sidewalk = 2,
    Terrain = 3,
}

impl SemanticClass {
    pub const COUNT: usize = 4;
    pub const ALL: [SemanticClass; 4] = [
        SemanticClass::NonFree,
        SemanticClass::Road,
        SemanticClass::Sidewalk,
        SemanticClass::Terrain,
    ];

    #[inline]
    pub fn id(self) -> u8 {
        self as u8
    }

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_ground(self) -> bool {
        self != SemanticClass::NonFree
    }
}

impl TryFrom<u8> for SemanticClass {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        SemanticClass::ALL
            .get(v as usize)
            .copied()
            .ok_or(Error::InvalidClass(v))
    }
}

impl fmt::Display for SemanticClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            SemanticClass::NonFree => "non-free",
            SemanticClass::Road => "road",
            SemanticClass::Sidewalk => "sidewalk",
            SemanticClass::Terrain => "terrain",
        };
        f.write_str(name)
    }
}

/// Grid geometry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub cell_size_m: f64,
    pub x_offset_m: f64,
}

impl Default for GridSpec {
    /// 64 x 64 cells of 0.5 m, starting 5 m ahead of the vehicle.
    fn default() -> Self {
        Self {
            rows: 64,
            cols: 64,
            cell_size_m: 0.5,
            x_offset_m: 5.0,
        }
    }
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize, cell_size_m: f64, x_offset_m: f64) -> Result<Self> {
        let spec = Self {
            rows,
            cols,
            cell_size_m,
            x_offset_m,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// 128 x 128 cells of 0.25 m; same footprint as the default.
    pub fn high_res() -> Self {
        Self {
            rows: 128,
            cols: 128,
            cell_size_m: 0.25,
            x_offset_m: 5.0,
        }
    }

    /// Square grid with `cells` per side over the default 32 m footprint.
    pub fn square(cells: usize) -> Result<Self> {
        Self::new(cells, cells, 32.0 / cells as f64, 5.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidGridSpec("rows and cols must be >= 1".into()));
        }
        if !(self.cell_size_m > 0.0 && self.cell_size_m.is_finite()) {
            return Err(Error::InvalidGridSpec(format!(
                "cell size {} must be positive",
                self.cell_size_m
            )));
        }
        if !self.x_offset_m.is_finite() {
            return Err(Error::InvalidGridSpec("x offset must be finite".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn width_m(&self) -> f64 {
        self.cols as f64 * self.cell_size_m
    }

    #[inline]
    pub fn depth_m(&self) -> f64 {
        self.rows as f64 * self.cell_size_m
    }

    /// Covered region as `(x_min, x_max, y_min, y_max)`; x is half-open
    /// `[x_min, x_max)`, y is half-open `(y_min, y_max]`.
    pub fn footprint(&self) -> (f64, f64, f64, f64) {
        let half = self.width_m() / 2.0;
        (self.x_offset_m, self.x_offset_m + self.depth_m(), -half, half)
    }

    /// Vehicle-frame center of cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> Result<(f64, f64)> {
        if row >= self.rows || col >= self.cols {
            return Err(Error::CellOutOfRange {
                row,
                col,
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(self.cell_center_unchecked(row, col))
    }

    #[inline]
    pub(crate) fn cell_center_unchecked(&self, row: usize, col: usize) -> (f64, f64) {
        let c = self.cell_size_m;
        let x = self.x_offset_m + ((self.rows - 1 - row) as f64 + 0.5) * c;
        let y = (self.cols as f64 / 2.0) * c - (col as f64 + 0.5) * c;
        (x, y)
    }

    /// Cell containing vehicle-frame point `(x, y)`, if covered.
    #[inline]
    pub fn world_to_cell(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = self.cell_size_m;
        let fx = ((x - self.x_offset_m) / c).floor();
        let fy = ((self.width_m() / 2.0 - y) / c).floor();
        // NaN fails both comparisons
        if !(fx >= 0.0 && fx < self.rows as f64 && fy >= 0.0 && fy < self.cols as f64) {
            return None;
        }
        Some((self.rows - 1 - fx as usize, fy as usize))
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }
}

/// Categorical top-view map with its evaluation mask.
#[derive(Clone, Debug, PartialEq)]
pub struct GridMap {
    spec: GridSpec,
    classes: Vec<SemanticClass>,
    eval_mask: Vec<bool>,
}

impl GridMap {
    /// All cells non-free and evaluable.
    pub fn new(spec: GridSpec) -> Self {
        Self::filled(spec, SemanticClass::NonFree)
    }

    pub fn filled(spec: GridSpec, class: SemanticClass) -> Self {
        Self {
            spec,
            classes: vec![class; spec.len()],
            eval_mask: vec![true; spec.len()],
        }
    }

    pub fn from_parts(spec: GridSpec, classes: Vec<SemanticClass>, eval_mask: Vec<bool>) -> Result<Self> {
        spec.validate()?;
        if classes.len() != spec.len() || eval_mask.len() != spec.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} classes / {} mask cells for {}x{} grid",
                classes.len(),
                eval_mask.len(),
                spec.rows,
                spec.cols
            )));
        }
        Ok(Self {
            spec,
            classes,
            eval_mask,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn classes(&self) -> &[SemanticClass] {
        &self.classes
    }

    pub fn eval_mask(&self) -> &[bool] {
        &self.eval_mask
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> SemanticClass {
        self.classes[self.spec.index(row, col)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, class: SemanticClass) {
        let k = self.spec.index(row, col);
        self.classes[k] = class;
    }

    #[inline]
    pub fn is_evaluable(&self, row: usize, col: usize) -> bool {
        self.eval_mask[self.spec.index(row, col)]
    }

    pub fn set_mask(&mut self, mask: Vec<bool>) -> Result<()> {
        if mask.len() != self.spec.len() {
            return Err(Error::DimensionMismatch(format!(
                "mask of {} cells for {} cell grid",
                mask.len(),
                self.spec.len()
            )));
        }
        self.eval_mask = mask;
        Ok(())
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        self.set_mask(mask)?;
        Ok(self)
    }

    pub fn class_count(&self, class: SemanticClass) -> usize {
        self.classes.iter().filter(|&&c| c == class).count()
    }

    /// Classes as a label raster (row 0 = far edge).
    pub fn to_image(&self) -> LabelImage {
        Image::from_vec(
            self.spec.cols,
            self.spec.rows,
            self.classes.iter().map(|c| c.id()).collect(),
        )
        .expect("grid dimensions are consistent")
    }

    pub fn mask_image(&self) -> LabelImage {
        Image::from_vec(
            self.spec.cols,
            self.spec.rows,
            self.eval_mask.iter().map(|&m| if m { 255 } else { 0 }).collect(),
        )
        .expect("grid dimensions are consistent")
    }

    pub fn from_images(spec: GridSpec, classes: &LabelImage, mask: &LabelImage) -> Result<Self> {
        spec.validate()?;
        for (what, img) in [("class", classes), ("mask", mask)] {
            if img.width() != spec.cols || img.height() != spec.rows {
                return Err(Error::DimensionMismatch(format!(
                    "{what} image {}x{} for {}x{} grid",
                    img.width(),
                    img.height(),
                    spec.cols,
                    spec.rows
                )));
            }
        }
        let classes = classes
            .pixels()
            .iter()
            .map(|&v| SemanticClass::try_from(v))
            .collect::<Result<Vec<_>>>()?;
        let eval_mask = mask
            .pixels()
            .iter()
            .map(|&v| match v {
                0 => Ok(false),
                255 => Ok(true),
                other => Err(Error::Malformed {
                    format: "mask PGM",
                    reason: format!("mask value {other} (expected 0 or 255)"),
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(spec, classes, eval_mask)
    }
}

#[derive(Serialize, Deserialize)]
struct GridMeta {
    rows: usize,
    cols: usize,
    cell_size_m: f64,
    x_offset_m: f64,
    mask_file: String,
}

/// The three files making up a stored grid, derived from any of
/// `<stem>`, `<stem>.json` or `<stem>.pgm`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridPaths {
    pub meta: PathBuf,
    pub classes: PathBuf,
    pub mask: PathBuf,
}

impl GridPaths {
    pub fn new(path: impl AsRef<Path>) -> Self {
        let path = path.as_ref();
        let stem = match path.extension().and_then(|e| e.to_str()) {
            Some("json") | Some("pgm") => path.with_extension(""),
            _ => path.to_path_buf(),
        };
        let name = stem
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self {
            meta: stem.with_file_name(format!("{name}.json")),
            classes: stem.with_file_name(format!("{name}.pgm")),
            mask: stem.with_file_name(format!("{name}_mask.pgm")),
        }
    }
}

pub fn write_grid(map: &GridMap, path: impl AsRef<Path>) -> Result<()> {
    let paths = GridPaths::new(path);
    let meta = GridMeta {
        rows: map.spec.rows,
        cols: map.spec.cols,
        cell_size_m: map.spec.cell_size_m,
        x_offset_m: map.spec.x_offset_m,
        mask_file: paths
            .mask
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    imageio::write_pgm(&map.to_image(), &paths.classes)?;
    imageio::write_pgm(&map.mask_image(), &paths.mask)?;
    let json = serde_json::to_vec_pretty(&meta).map_err(|e| Error::json(&paths.meta, e))?;
    imageio::write_bytes(&paths.meta, &json)
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<GridMap> {
    let paths = GridPaths::new(path);
    let text = std::fs::read(&paths.meta).map_err(|e| Error::io(&paths.meta, e))?;
    let meta: GridMeta = serde_json::from_slice(&text).map_err(|e| Error::json(&paths.meta, e))?;
    let spec = GridSpec::new(meta.rows, meta.cols, meta.cell_size_m, meta.x_offset_m)?;
    let classes = imageio::read_pgm(&paths.classes)?;
    let mask_path = paths.meta.with_file_name(&meta.mask_file);
    let mask = imageio::read_pgm(&mask_path)?;
    GridMap::from_images(spec, &classes, &mask)
}
