//! Scene-wide grids: the navigation map of smoothed crossing frequencies and
//! the semantic class raster.
//!
//! Grids are stored bottom-up: row 0 is the lowest `y`, column 0 the lowest
//! `x`. Image and text rasters on disk are top-down and flipped on load.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::dataset::Scene;

#[derive(Debug, thiserror::Error)]
pub enum MapError {
    #[error("navigation map needs at least one training point inside the grid")]
    EmptyTraining,
    #[error("smoothing kernel must be odd and non-zero, got {0}")]
    BadKernel(usize),
    #[error("invalid grid: {0}")]
    BadTransform(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("class {0:?} is not one of grass, building, obstacle, bench, car, road, sidewalk")]
    UnknownClass(String),
    #[error("raster value {value} has no legend entry ({count} pixels)")]
    MissingLegend { value: u32, count: usize },
    #[error("class index {0} out of range 0..7")]
    ClassIndex(usize),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MapError + '_ {
    move |source| MapError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, thiserror::Error)]
#[error("point ({x}, {y}) lies outside the map")]
pub struct OutsideMap {
    pub x: f64,
    pub y: f64,
}

/// Axis-aligned world-to-grid mapping with square cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridTransform {
    /// World coordinates of the lower-left corner of cell (0, 0).
    pub origin: [f64; 2],
    pub cell_size: f64,
    pub rows: usize,
    pub cols: usize,
}

impl GridTransform {
    pub fn new(origin: [f64; 2], cell_size: f64, rows: usize, cols: usize) -> Result<Self, MapError> {
        if !(cell_size > 0.0) || !cell_size.is_finite() {
            return Err(MapError::BadTransform(format!("cell size {cell_size}")));
        }
        if rows == 0 || cols == 0 {
            return Err(MapError::BadTransform(format!("extent {rows}x{cols}")));
        }
        if !origin.iter().all(|v| v.is_finite()) {
            return Err(MapError::BadTransform("non-finite origin".into()));
        }
        Ok(Self {
            origin,
            cell_size,
            rows,
            cols,
        })
    }

    /// Smallest grid with the given cell size covering `[lo, hi]` plus `margin`.
    /// The origin is snapped to a multiple of the cell size.
    pub fn covering(lo: [f64; 2], hi: [f64; 2], cell_size: f64, margin: f64) -> Result<Self, MapError> {
        let ox = ((lo[0] - margin) / cell_size).floor() * cell_size;
        let oy = ((lo[1] - margin) / cell_size).floor() * cell_size;
        let cols = (((hi[0] + margin) - ox) / cell_size).floor() as usize + 1;
        let rows = (((hi[1] + margin) - oy) / cell_size).floor() as usize + 1;
        Self::new([ox, oy], cell_size, rows, cols)
    }

    pub fn for_scene(scene: &Scene, cell_size: f64, margin: f64) -> Result<Self, MapError> {
        let (lo, hi) = scene.bounds();
        Self::covering(lo, hi, cell_size, margin)
    }

    /// Unbounded `(row, col)`; cells are half-open `[low, high)`.
    pub fn signed_cell(&self, p: [f64; 2]) -> (i64, i64) {
        let col = ((p[0] - self.origin[0]) / self.cell_size).floor() as i64;
        let row = ((p[1] - self.origin[1]) / self.cell_size).floor() as i64;
        (row, col)
    }

    pub fn contains(&self, row: i64, col: i64) -> bool {
        row >= 0 && col >= 0 && (row as usize) < self.rows && (col as usize) < self.cols
    }

    pub fn world_to_cell(&self, p: [f64; 2]) -> Result<Cell, OutsideMap> {
        let (row, col) = self.signed_cell(p);
        if p[0].is_finite() && p[1].is_finite() && self.contains(row, col) {
            Ok(Cell {
                row: row as usize,
                col: col as usize,
            })
        } else {
            Err(OutsideMap { x: p[0], y: p[1] })
        }
    }

    pub fn cell_center(&self, cell: Cell) -> [f64; 2] {
        [
            self.origin[0] + (cell.col as f64 + 0.5) * self.cell_size,
            self.origin[1] + (cell.row as f64 + 0.5) * self.cell_size,
        ]
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn translated(&self, by: [f64; 2]) -> Self {
        Self {
            origin: [self.origin[0] + by[0], self.origin[1] + by[1]],
            ..*self
        }
    }
}

/// How smoothed counts are rescaled before the navigation tensor reads them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NavScale {
    Raw,
    #[default]
    Log1p,
    MaxNorm,
}

impl std::str::FromStr for NavScale {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "raw" => Ok(Self::Raw),
            "log1p" => Ok(Self::Log1p),
            "maxnorm" => Ok(Self::MaxNorm),
            _ => Err(format!("unknown navigation scale {s:?} (raw, log1p, maxnorm)")),
        }
    }
}

/// Smoothed crossing frequencies per grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct NavigationMap {
    transform: GridTransform,
    values: Vec<f64>,
}

const NAVMAP_MAGIC: &[u8; 8] = b"TPNAVMAP";
const NAVMAP_VERSION: u32 = 1;

/// Number of points falling in each cell; points outside the grid are
/// dropped. Returns the histogram and how many points landed inside.
pub fn count_points(points: impl IntoIterator<Item = [f64; 2]>, transform: &GridTransform) -> (Vec<f64>, usize) {
    let mut counts = vec![0.0; transform.len()];
    let mut inside = 0;
    for p in points {
        if let Ok(c) = transform.world_to_cell(p) {
            counts[c.row * transform.cols + c.col] += 1.0;
            inside += 1;
        }
    }
    (counts, inside)
}

/// Zero-padded `k × k` uniform average.
pub fn box_smooth(values: &[f64], rows: usize, cols: usize, kernel: usize) -> Result<Vec<f64>, MapError> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(MapError::BadKernel(kernel));
    }
    let half = (kernel / 2) as i64;
    let norm = 1.0 / (kernel * kernel) as f64;
    // separable: horizontal pass then vertical pass
    let mut horiz = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let lo = (c as i64 - half).max(0) as usize;
            let hi = ((c as i64 + half) as usize).min(cols - 1);
            horiz[r * cols + c] = values[r * cols + lo..=r * cols + hi].iter().sum();
        }
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let lo = (r as i64 - half).max(0) as usize;
        let hi = ((r as i64 + half) as usize).min(rows - 1);
        for c in 0..cols {
            let s: f64 = (lo..=hi).map(|rr| horiz[rr * cols + c]).sum();
            out[r * cols + c] = s * norm;
        }
    }
    Ok(out)
}

impl NavigationMap {
    pub fn from_values(transform: GridTransform, values: Vec<f64>) -> Result<Self, MapError> {
        if values.len() != transform.len() {
            return Err(MapError::BadTransform(format!(
                "{} values for a {}x{} grid",
                values.len(),
                transform.rows,
                transform.cols
            )));
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(MapError::BadTransform("negative or non-finite count".into()));
        }
        Ok(Self { transform, values })
    }

    /// Histogram of `points` smoothed by a `kernel × kernel` average.
    pub fn from_points(
        points: impl IntoIterator<Item = [f64; 2]>,
        transform: GridTransform,
        kernel: usize,
    ) -> Result<Self, MapError> {
        if kernel == 0 || kernel % 2 == 0 {
            return Err(MapError::BadKernel(kernel));
        }
        let (counts, inside) = count_points(points, &transform);
        if inside == 0 {
            return Err(MapError::EmptyTraining);
        }
        let values = box_smooth(&counts, transform.rows, transform.cols, kernel)?;
        Ok(Self { transform, values })
    }

    pub fn transform(&self) -> &GridTransform {
        &self.transform
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: i64, col: i64) -> f64 {
        if self.transform.contains(row, col) {
            self.values[row as usize * self.transform.cols + col as usize]
        } else {
            0.0
        }
    }

    pub fn scaled(&self, scale: NavScale) -> Self {
        let values = match scale {
            NavScale::Raw => self.values.clone(),
            NavScale::Log1p => self.values.iter().map(|v| v.ln_1p()).collect(),
            NavScale::MaxNorm => {
                let max = self.values.iter().cloned().fold(0.0, f64::max);
                if max > 0.0 {
                    self.values.iter().map(|v| v / max).collect()
                } else {
                    self.values.clone()
                }
            }
        };
        Self {
            transform: self.transform,
            values,
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(NAVMAP_MAGIC)?;
        w.write_u32::<LittleEndian>(NAVMAP_VERSION)?;
        w.write_f64::<LittleEndian>(self.transform.origin[0])?;
        w.write_f64::<LittleEndian>(self.transform.origin[1])?;
        w.write_f64::<LittleEndian>(self.transform.cell_size)?;
        w.write_u64::<LittleEndian>(self.transform.rows as u64)?;
        w.write_u64::<LittleEndian>(self.transform.cols as u64)?;
        for v in &self.values {
            w.write_f64::<LittleEndian>(*v)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read, path: &str) -> Result<Self, MapError> {
        let fmt = |message: String| MapError::Format {
            path: path.to_string(),
            message,
        };
        let io = |e: std::io::Error| fmt(e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != NAVMAP_MAGIC {
            return Err(fmt("not a navigation map file".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != NAVMAP_VERSION {
            return Err(fmt(format!("unsupported version {version}")));
        }
        let ox = r.read_f64::<LittleEndian>().map_err(io)?;
        let oy = r.read_f64::<LittleEndian>().map_err(io)?;
        let cell = r.read_f64::<LittleEndian>().map_err(io)?;
        let rows = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let cols = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let transform = GridTransform::new([ox, oy], cell, rows, cols)?;
        let mut values = vec![0.0; transform.len()];
        r.read_f64_into::<LittleEndian>(&mut values).map_err(io)?;
        Self::from_values(transform, values)
    }

    pub fn save(&self, path: &Path) -> Result<(), MapError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
        self.write_to(&mut f).map_err(io_err(path))?;
        f.flush().map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, MapError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err(path))?);
        Self::read_from(&mut f, &path.display().to_string())
    }

    /// Grayscale preview, brightest at the maximum, top row = highest `y`.
    pub fn preview(&self) -> image::GrayImage {
        let max = self.values.iter().cloned().fold(0.0, f64::max);
        let (rows, cols) = (self.transform.rows, self.transform.cols);
        image::GrayImage::from_fn(cols as u32, rows as u32, |x, y| {
            let r = rows - 1 - y as usize;
            let v = self.values[r * cols + x as usize];
            let level = if max > 0.0 { (v / max * 255.0).round() } else { 0.0 };
            image::Luma([level as u8])
        })
    }

    pub fn save_preview(&self, path: &Path) -> Result<(), MapError> {
        self.preview().save_with_format(path, image::ImageFormat::Png).map_err(|e| MapError::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// Builds one navigation map from every track point of `scenes`, which must
/// share the coordinate frame of `transform`.
pub fn build_navigation_map(scenes: &[&Scene], transform: GridTransform, kernel: usize) -> Result<NavigationMap, MapError> {
    if scenes.is_empty() {
        return Err(MapError::EmptyTraining);
    }
    NavigationMap::from_points(scenes.iter().flat_map(|s| s.points()), transform, kernel)
}

pub const NUM_CLASSES: usize = 7;

/// Semantic classes in one-hot order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SemanticClass {
    Grass = 0,
    Building = 1,
    Obstacle = 2,
    Bench = 3,
    Car = 4,
    Road = 5,
    Sidewalk = 6,
}

impl SemanticClass {
    pub const ALL: [SemanticClass; NUM_CLASSES] = [
        Self::Grass,
        Self::Building,
        Self::Obstacle,
        Self::Bench,
        Self::Car,
        Self::Road,
        Self::Sidewalk,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Grass => "grass",
            Self::Building => "building",
            Self::Obstacle => "obstacle",
            Self::Bench => "bench",
            Self::Car => "car",
            Self::Road => "road",
            Self::Sidewalk => "sidewalk",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, MapError> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == name.trim().to_ascii_lowercase())
            .ok_or_else(|| MapError::UnknownClass(name.to_string()))
    }
}

pub fn one_hot(class_index: usize) -> Result<[f64; NUM_CLASSES], MapError> {
    if class_index >= NUM_CLASSES {
        return Err(MapError::ClassIndex(class_index));
    }
    let mut v = [0.0; NUM_CLASSES];
    v[class_index] = 1.0;
    Ok(v)
}

/// Raster of semantic classes. Each pixel is a location; its center decides
/// which pooling cell it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticMap {
    transform: GridTransform,
    classes: Vec<u8>,
}

/// Per-cell class counts of a [`SemanticMap`] resampled onto another grid.
#[derive(Clone, Debug)]
pub struct CellHistograms {
    grid: GridTransform,
    counts: Vec<[u32; NUM_CLASSES]>,
}

impl CellHistograms {
    pub fn grid(&self) -> &GridTransform {
        &self.grid
    }

    /// Counts for an unbounded cell index; `None` outside the grid.
    pub fn get(&self, row: i64, col: i64) -> Option<&[u32; NUM_CLASSES]> {
        self.grid
            .contains(row, col)
            .then(|| &self.counts[row as usize * self.grid.cols + col as usize])
    }
}

impl SemanticMap {
    pub fn new(transform: GridTransform, classes: Vec<u8>) -> Result<Self, MapError> {
        if classes.len() != transform.len() {
            return Err(MapError::BadTransform(format!(
                "{} pixels for a {}x{} raster",
                classes.len(),
                transform.rows,
                transform.cols
            )));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c as usize >= NUM_CLASSES) {
            return Err(MapError::ClassIndex(bad as usize));
        }
        Ok(Self { transform, classes })
    }

    pub fn uniform(transform: GridTransform, class: SemanticClass) -> Self {
        Self {
            classes: vec![class as u8; transform.len()],
            transform,
        }
    }

    pub fn transform(&self) -> &GridTransform {
        &self.transform
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn class_at(&self, row: usize, col: usize) -> SemanticClass {
        SemanticClass::ALL[self.classes[row * self.transform.cols + col] as usize]
    }

    pub fn class_histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &c in &self.classes {
            h[c as usize] += 1;
        }
        h
    }

    pub fn pixel_center(&self, row: usize, col: usize) -> [f64; 2] {
        self.transform.cell_center(Cell { row, col })
    }

    /// Class counts per cell of `grid`, assigning each pixel by its center.
    pub fn cell_histograms(&self, grid: &GridTransform) -> CellHistograms {
        let mut counts = vec![[0u32; NUM_CLASSES]; grid.len()];
        for r in 0..self.transform.rows {
            for c in 0..self.transform.cols {
                let (gr, gc) = grid.signed_cell(self.pixel_center(r, c));
                if grid.contains(gr, gc) {
                    counts[gr as usize * grid.cols + gc as usize][self.classes[r * self.transform.cols + c] as usize] += 1;
                }
            }
        }
        CellHistograms { grid: *grid, counts }
    }

    pub fn translated(&self, by: [f64; 2]) -> Self {
        Self {
            transform: self.transform.translated(by),
            classes: self.classes.clone(),
        }
    }
}

/// Raster value → class name, from TOML such as `0 = "grass"`.
pub fn parse_legend(text: &str, path: &str) -> Result<Vec<(u32, SemanticClass)>, MapError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| MapError::Format {
        path: path.to_string(),
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (k, v) in table {
        let value: u32 = k.trim().parse().map_err(|_| MapError::Format {
            path: path.to_string(),
            message: format!("legend key {k:?} is not a raster value"),
        })?;
        let name = v.as_str().ok_or_else(|| MapError::Format {
            path: path.to_string(),
            message: format!("legend entry {k} is not a class name"),
        })?;
        out.push((value, SemanticClass::from_name(name)?));
    }
    out.sort();
    Ok(out)
}

/// Reads a raster as top-down rows of integer values: PGM/PNG through the
/// image decoder, anything else as a whitespace-separated text grid.
pub fn read_raster(path: &Path) -> Result<(usize, usize, Vec<u32>), MapError> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    if matches!(ext.as_str(), "pgm" | "pnm" | "png") {
        let img = image::open(path).map_err(|e| MapError::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let (w, h) = (img.width(), img.height());
        let vals = match img {
            image::DynamicImage::ImageLuma16(g) => g.pixels().map(|p| u32::from(p.0[0])).collect(),
            other => other.to_luma8().pixels().map(|p| u32::from(p.0[0])).collect(),
        };
        return Ok((h as usize, w as usize, vals));
    }
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Result<Vec<u32>, _> = line.split_whitespace().map(str::parse).collect();
        let row = row.map_err(|_| MapError::Format {
            path: path.display().to_string(),
            message: format!("line {}: non-integer raster value", i + 1),
        })?;
        rows.push(row);
    }
    let width = rows.first().map_or(0, Vec::len);
    if width == 0 || rows.iter().any(|r| r.len() != width) {
        return Err(MapError::Format {
            path: path.display().to_string(),
            message: "raster rows are empty or ragged".into(),
        });
    }
    Ok((rows.len(), width, rows.into_iter().flatten().collect()))
}

/// Builds a semantic map from top-down raster values and a legend.
/// Every raster value lacking a legend entry is reported.
pub fn semantic_from_raster(
    rows: usize,
    cols: usize,
    values: &[u32],
    legend: &[(u32, SemanticClass)],
    origin: [f64; 2],
    pixel_size: f64,
) -> Result<SemanticMap, MapError> {
    let transform = GridTransform::new(origin, pixel_size, rows, cols)?;
    let mut missing: std::collections::BTreeMap<u32, usize> = Default::default();
    let mut classes = vec![0u8; rows * cols];
    for img_row in 0..rows {
        let r = rows - 1 - img_row;
        for c in 0..cols {
            let v = values[img_row * cols + c];
            match legend.iter().find(|(k, _)| *k == v) {
                Some((_, class)) => classes[r * cols + c] = *class as u8,
                None => *missing.entry(v).or_default() += 1,
            }
        }
    }
    if let Some((&value, &count)) = missing.iter().next() {
        for (v, n) in &missing {
            log::error!("raster value {v} ({n} pixels) has no legend entry");
        }
        return Err(MapError::MissingLegend { value, count });
    }
    SemanticMap::new(transform, classes)
}

pub fn load_semantic_map(raster: &Path, legend: &Path, origin: [f64; 2], pixel_size: f64) -> Result<SemanticMap, MapError> {
    let legend_text = std::fs::read_to_string(legend).map_err(io_err(legend))?;
    let legend = parse_legend(&legend_text, &legend.display().to_string())?;
    let (rows, cols, values) = read_raster(raster)?;
    semantic_from_raster(rows, cols, &values, &legend, origin, pixel_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(rows: usize, cols: usize) -> GridTransform {
        GridTransform::new([0.0, 0.0], 1.0, rows, cols).unwrap()
    }

    /// Direct 2-D convolution with explicit zero padding.
    fn convolve_naive(values: &[f64], rows: usize, cols: usize, k: usize) -> Vec<f64> {
        let h = (k / 2) as i64;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows as i64 {
            for c in 0..cols as i64 {
                let mut s = 0.0;
                for dr in -h..=h {
                    for dc in -h..=h {
                        let (rr, cc) = (r + dr, c + dc);
                        if rr >= 0 && cc >= 0 && rr < rows as i64 && cc < cols as i64 {
                            s += values[(rr as usize) * cols + cc as usize];
                        }
                    }
                }
                out[r as usize * cols + c as usize] = s / (k * k) as f64;
            }
        }
        out
    }

    #[test]
    fn single_point_unit_kernel() {
        let m = NavigationMap::from_points([[3.5, 2.5]], grid(6, 6), 1).unwrap();
        for r in 0..6 {
            for c in 0..6 {
                let expected = if (r, c) == (2, 3) { 1.0 } else { 0.0 };
                assert_eq!(m.get(r, c), expected);
            }
        }
    }

    #[test]
    fn single_point_box_kernel_matches_convolution() {
        let m = NavigationMap::from_points([[3.5, 2.5]], grid(6, 6), 3).unwrap();
        let mut raw = vec![0.0; 36];
        raw[2 * 6 + 3] = 1.0;
        let oracle = convolve_naive(&raw, 6, 6, 3);
        for (a, b) in m.values().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-15);
        }
        for r in 1..=3 {
            for c in 2..=4 {
                assert!((m.get(r, c) - 1.0 / 9.0).abs() < 1e-15);
            }
        }
        assert_eq!(m.get(0, 3), 0.0);
    }

    #[test]
    fn interior_mass_is_conserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<[f64; 2]> = (0..100).map(|_| [rng.random_range(2.0..18.0), rng.random_range(2.0..18.0)]).collect();
        let m = NavigationMap::from_points(pts.iter().copied(), grid(20, 20), 3).unwrap();
        let total: f64 = m.values().iter().sum();
        assert!((total - 100.0).abs() < 1e-9, "{total}");
        let (raw, _) = count_points(pts, &grid(20, 20));
        let oracle = convolve_naive(&raw, 20, 20, 3);
        for (a, b) in m.values().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_exactly_outside_kernel_reach() {
        let m = NavigationMap::from_points([[5.5, 5.5]], grid(12, 12), 5).unwrap();
        for r in 0..12i64 {
            for c in 0..12i64 {
                let reach = (r - 5).abs() <= 2 && (c - 5).abs() <= 2;
                assert_eq!(m.get(r, c) > 0.0, reach);
            }
        }
    }

    #[test]
    fn empty_and_bad_kernel() {
        assert!(matches!(
            NavigationMap::from_points(std::iter::empty(), grid(3, 3), 3),
            Err(MapError::EmptyTraining)
        ));
        assert!(matches!(
            NavigationMap::from_points([[100.0, 100.0]], grid(3, 3), 3),
            Err(MapError::EmptyTraining)
        ));
        assert!(matches!(NavigationMap::from_points([[1.0, 1.0]], grid(3, 3), 2), Err(MapError::BadKernel(2))));
        assert!(matches!(build_navigation_map(&[], grid(3, 3), 3), Err(MapError::EmptyTraining)));
    }

    #[test]
    fn world_to_cell_is_typed_outside() {
        let g = GridTransform::new([-1.0, -1.0], 0.5, 4, 4).unwrap();
        assert_eq!(g.world_to_cell([-1.0, -1.0]).unwrap(), Cell { row: 0, col: 0 });
        assert_eq!(g.world_to_cell([0.99, -0.5]).unwrap(), Cell { row: 1, col: 3 });
        assert!(g.world_to_cell([1.0, 0.0]).is_err());
        assert!(g.world_to_cell([-1.01, 0.0]).is_err());
        assert!(GridTransform::new([0.0, 0.0], 0.0, 1, 1).is_err());
    }

    proptest::proptest! {
        #[test]
        fn cell_center_within_half_cell(x in -10.0f64..10.0, y in -10.0f64..10.0, cs in 0.05f64..2.0) {
            let g = GridTransform::covering([-10.0, -10.0], [10.0, 10.0], cs, 0.0).unwrap();
            let cell = g.world_to_cell([x, y]).unwrap();
            let c = g.cell_center(cell);
            proptest::prop_assert!((c[0] - x).abs() <= cs / 2.0 + 1e-9);
            proptest::prop_assert!((c[1] - y).abs() <= cs / 2.0 + 1e-9);
        }
    }

    #[test]
    fn navmap_file_round_trips_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<[f64; 2]> = (0..50).map(|_| [rng.random_range(0.0..3.3), rng.random_range(0.0..2.1)]).collect();
        let g = GridTransform::new([0.0, 0.0], 0.1, 22, 34).unwrap();
        let m = NavigationMap::from_points(pts, g, 3).unwrap().scaled(NavScale::Log1p);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nav.bin");
        m.save(&p).unwrap();
        let back = NavigationMap::load(&p).unwrap();
        assert_eq!(back.transform(), m.transform());
        for (a, b) in back.values().iter().zip(m.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn preview_of_uniform_map_is_uniform() {
        let m = NavigationMap::from_values(grid(4, 5), vec![2.5; 20]).unwrap();
        let img = m.preview();
        assert!(img.pixels().all(|p| p.0[0] == 255));
        assert_eq!(img.dimensions(), (5, 4));
    }

    #[test]
    fn scales() {
        let m = NavigationMap::from_values(grid(1, 2), vec![0.0, 3.0]).unwrap();
        assert_eq!(m.scaled(NavScale::MaxNorm).values(), &[0.0, 1.0]);
        assert_eq!(m.scaled(NavScale::Log1p).values(), &[0.0, 4f64.ln()]);
        assert_eq!(m.scaled(NavScale::Raw).values(), m.values());
    }

    #[test]
    fn one_hot_vectors() {
        assert_eq!(one_hot(0).unwrap(), [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(one_hot(6).unwrap(), [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        for i in 0..NUM_CLASSES {
            assert_eq!(one_hot(i).unwrap().iter().sum::<f64>(), 1.0);
        }
        assert!(one_hot(7).is_err());
    }

    #[test]
    fn uniform_grass_raster() {
        let legend = parse_legend("17 = \"grass\"\n", "legend").unwrap();
        let m = semantic_from_raster(3, 4, &[17; 12], &legend, [0.0, 0.0], 0.1).unwrap();
        assert!(m.classes().iter().all(|&c| c == 0));
        assert_eq!(one_hot(m.class_at(1, 1).index()).unwrap(), [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn unknown_class_in_legend() {
        let err = parse_legend("0 = \"water\"\n", "legend").unwrap_err();
        assert!(err.to_string().contains("water"));
    }

    #[test]
    fn raster_value_missing_from_legend() {
        let legend = parse_legend("0 = \"road\"\n", "legend").unwrap();
        let err = semantic_from_raster(1, 3, &[0, 9, 9], &legend, [0.0, 0.0], 0.1).unwrap_err();
        assert!(matches!(err, MapError::MissingLegend { value: 9, count: 2 }));
    }

    #[test]
    fn checkerboard_histogram_is_even() {
        let legend = parse_legend("1 = \"road\"\n2 = \"sidewalk\"\n", "legend").unwrap();
        let (rows, cols) = (8, 10);
        let vals: Vec<u32> = (0..rows * cols).map(|i| if (i / cols + i % cols) % 2 == 0 { 1 } else { 2 }).collect();
        let m = semantic_from_raster(rows, cols, &vals, &legend, [0.0, 0.0], 0.1).unwrap();
        let h = m.class_histogram();
        let oracle_road = vals.iter().filter(|&&v| v == 1).count();
        assert_eq!(h[SemanticClass::Road.index()], oracle_road);
        assert_eq!(h[SemanticClass::Road.index()], h[SemanticClass::Sidewalk.index()]);
        assert_eq!(h[SemanticClass::Road.index()] * 2, rows * cols);
    }

    #[test]
    fn raster_files_load_top_down() {
        let dir = tempfile::tempdir().unwrap();
        let legend = dir.path().join("legend.toml");
        std::fs::write(&legend, "0 = \"road\"\n5 = \"building\"\n").unwrap();
        let txt = dir.path().join("sem.txt");
        std::fs::write(&txt, "5 5 5\n0 0 0\n").unwrap();
        let m = load_semantic_map(&txt, &legend, [0.0, 0.0], 0.5).unwrap();
        // top line is the highest row
        assert_eq!(m.class_at(1, 0), SemanticClass::Building);
        assert_eq!(m.class_at(0, 2), SemanticClass::Road);

        let pgm = dir.path().join("sem.pgm");
        let img = image::GrayImage::from_fn(3, 2, |_, y| image::Luma([if y == 0 { 5 } else { 0 }]));
        img.save_with_format(&pgm, image::ImageFormat::Pnm).unwrap();
        let m2 = load_semantic_map(&pgm, &legend, [0.0, 0.0], 0.5).unwrap();
        assert_eq!(m2, m);
    }
}
