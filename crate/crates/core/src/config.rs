//! Dataset configuration: which scenes exist, where their annotations and
//! semantic rasters live, and how their map grids are laid out.
//!
//! ```toml
//! [[scene]]
//! name = "ETH"
//! path = "eth/obsmat.txt"        # relative to this file
//! columns = "frame,ped,x,_,y"    # default "frame ped x y"
//! frame_interval = 0.4
//!
//! [scene.map]                    # optional, defaults to the scene bounds
//! margin = 2.0
//!
//! [scene.semantic]               # optional
//! raster = "eth/semantic.pgm"
//! legend = "eth/legend.toml"
//! origin = [-10.0, -5.0]
//! pixel_size = 0.1
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{load_scene, ColumnOrder, DataError, Scene, DEFAULT_FRAME_INTERVAL};
use crate::maps::{load_semantic_map, GridTransform, MapError, SemanticMap};

/// Side of one navigation and semantic pooling cell, meters.
pub const DEFAULT_MAP_CELL: f64 = 0.1;
/// Extra room around a scene's trajectories when sizing its map grid.
pub const DEFAULT_MAP_MARGIN: f64 = 2.0;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Map(#[from] MapError),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapEntry {
    pub origin: Option<[f64; 2]>,
    pub cell_size: Option<f64>,
    pub rows: Option<usize>,
    pub cols: Option<usize>,
    pub margin: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemanticEntry {
    pub raster: PathBuf,
    pub legend: PathBuf,
    /// World position of the lower-left corner of the raster.
    pub origin: [f64; 2],
    /// Side of one raster pixel, meters.
    pub pixel_size: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub name: String,
    pub path: PathBuf,
    pub columns: Option<String>,
    pub frame_interval: Option<f64>,
    pub map: Option<MapEntry>,
    pub semantic: Option<SemanticEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(rename = "scene")]
    pub scenes: Vec<SceneEntry>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// A scene with everything needed to pool around its pedestrians.
#[derive(Clone, Debug)]
pub struct LoadedScene {
    pub scene: Scene,
    /// Grid shared by the navigation map and semantic pooling.
    pub grid: GridTransform,
    pub semantic: Option<SemanticMap>,
}

impl DatasetConfig {
    pub fn parse(text: &str, base_dir: &Path, path: &str) -> Result<Self, ConfigError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Format {
            path: path.to_string(),
            message: e.to_string(),
        })?;
        cfg.base_dir = base_dir.to_path_buf();
        let mut seen = std::collections::HashSet::new();
        for s in &cfg.scenes {
            if !seen.insert(s.name.as_str()) {
                return Err(ConfigError::Format {
                    path: path.to_string(),
                    message: format!("scene {:?} listed twice", s.name),
                });
            }
        }
        if cfg.scenes.is_empty() {
            return Err(ConfigError::Format {
                path: path.to_string(),
                message: "no [[scene]] entries".into(),
            });
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, &path.display().to_string())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn entry(&self, name: &str) -> Option<&SceneEntry> {
        self.scenes.iter().find(|s| s.name == name)
    }

    pub fn load_entry(&self, entry: &SceneEntry, default_cell: f64) -> Result<LoadedScene, ConfigError> {
        let columns = match &entry.columns {
            Some(c) => c.parse::<ColumnOrder>()?,
            None => ColumnOrder::default(),
        };
        let interval = entry.frame_interval.unwrap_or(DEFAULT_FRAME_INTERVAL);
        let scene = load_scene(&entry.name, &self.resolve(&entry.path), columns, interval)?;
        let m = entry.map.clone().unwrap_or_default();
        let cell = m.cell_size.unwrap_or(default_cell);
        let grid = match (m.origin, m.rows, m.cols) {
            (Some(origin), Some(rows), Some(cols)) => GridTransform::new(origin, cell, rows, cols)?,
            (None, None, None) => GridTransform::for_scene(&scene, cell, m.margin.unwrap_or(DEFAULT_MAP_MARGIN))?,
            _ => {
                return Err(ConfigError::Format {
                    path: entry.name.clone(),
                    message: "map needs all of origin, rows and cols, or none of them".into(),
                })
            }
        };
        let semantic = entry
            .semantic
            .as_ref()
            .map(|s| load_semantic_map(&self.resolve(&s.raster), &self.resolve(&s.legend), s.origin, s.pixel_size))
            .transpose()?;
        Ok(LoadedScene { scene, grid, semantic })
    }

    pub fn load_all(&self, default_cell: f64) -> Result<Vec<LoadedScene>, ConfigError> {
        self.scenes.iter().map(|e| self.load_entry(e, default_cell)).collect()
    }
}
