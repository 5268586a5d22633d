//! Seeded synthetic scenes: straight constant-velocity walkers, and walkers
//! that swerve around a square obstacle marked in a semantic raster.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Scene, TrackPoint, DEFAULT_FRAME_INTERVAL};
use crate::maps::{GridTransform, SemanticClass, SemanticMap};

/// Frame ids advance by this much per annotated frame, as in the public
/// benchmark files.
pub const FRAME_STEP: i64 = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct WalkerSpec {
    pub pedestrians: usize,
    /// Frames in the scene.
    pub frames: usize,
    /// Shortest and longest track, in frames.
    pub track_len: (usize, usize),
    /// Walking speed range, m/s.
    pub speed: (f64, f64),
    /// Side of the square start area, meters.
    pub extent: f64,
}

impl Default for WalkerSpec {
    fn default() -> Self {
        Self {
            pedestrians: 20,
            frames: 120,
            track_len: (24, 48),
            speed: (0.8, 1.6),
            extent: 12.0,
        }
    }
}

fn points_to_scene(name: &str, tracks: Vec<(usize, Vec<[f64; 2]>)>) -> Scene {
    let pts: Vec<TrackPoint> = tracks
        .into_iter()
        .enumerate()
        .flat_map(|(ped, (start, path))| {
            path.into_iter().enumerate().map(move |(k, p)| TrackPoint {
                frame: (start + k) as i64 * FRAME_STEP,
                ped: ped as i64 + 1,
                x: p[0],
                y: p[1],
            })
        })
        .collect();
    Scene::from_points(name, &pts, DEFAULT_FRAME_INTERVAL).expect("generated tracks are well formed")
}

/// Pedestrians walking straight lines at constant speed, entering at random
/// frames.
pub fn constant_velocity_scene(name: &str, spec: &WalkerSpec, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = DEFAULT_FRAME_INTERVAL;
    let tracks = (0..spec.pedestrians)
        .map(|_| {
            let len = rng.random_range(spec.track_len.0..=spec.track_len.1).min(spec.frames);
            let start = rng.random_range(0..=spec.frames - len);
            let p0 = [rng.random_range(0.0..spec.extent), rng.random_range(0.0..spec.extent)];
            let heading = rng.random_range(0.0..std::f64::consts::TAU);
            let speed = rng.random_range(spec.speed.0..spec.speed.1);
            let v = [speed * heading.cos() * dt, speed * heading.sin() * dt];
            let path = (0..len).map(|k| [p0[0] + v[0] * k as f64, p0[1] + v[1] * k as f64]).collect();
            (start, path)
        })
        .collect();
    points_to_scene(name, tracks)
}

/// Axis-aligned square region in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Region {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl Region {
    pub fn square(center: [f64; 2], half: f64) -> Self {
        Self {
            lo: [center[0] - half, center[1] - half],
            hi: [center[0] + half, center[1] + half],
        }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.lo[0] && p[0] < self.hi[0] && p[1] >= self.lo[1] && p[1] < self.hi[1]
    }

    pub fn center(&self) -> [f64; 2] {
        [(self.lo[0] + self.hi[0]) / 2.0, (self.lo[1] + self.hi[1]) / 2.0]
    }
}

#[derive(Clone, Debug)]
pub struct ObstacleScene {
    pub scene: Scene,
    pub obstacle: Region,
    /// Obstacle pixels inside a sidewalk raster covering the scene.
    pub semantic: SemanticMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObstacleSpec {
    pub pedestrians: usize,
    pub frames: usize,
    pub speed: (f64, f64),
    pub half_size: f64,
    /// Lateral gap kept from the obstacle edge while passing it.
    pub clearance: f64,
    /// Distance before the obstacle over which walkers move sideways.
    pub swerve: f64,
    /// Lateral spread of the walkers' lanes around the obstacle center.
    pub lane_spread: f64,
    pub raster_pixel: f64,
}

impl Default for ObstacleSpec {
    fn default() -> Self {
        Self {
            pedestrians: 40,
            frames: 160,
            speed: (1.0, 1.4),
            half_size: 1.0,
            clearance: 0.4,
            swerve: 2.5,
            lane_spread: 2.0,
            raster_pixel: 0.1,
        }
    }
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Walkers cross the scene in `+x`; those whose lane meets the obstacle move
/// sideways just before it and keep the new lane.
pub fn obstacle_scene(name: &str, center: [f64; 2], spec: &ObstacleSpec, seed: u64) -> ObstacleScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = DEFAULT_FRAME_INTERVAL;
    let obstacle = Region::square(center, spec.half_size);
    let (x_start, x_end) = (center[0] - 9.0, center[0] + 7.0);
    let pass = spec.half_size + spec.clearance;
    let tracks = (0..spec.pedestrians)
        .map(|_| {
            let lane = center[1] + rng.random_range(-spec.lane_spread..spec.lane_spread);
            let speed = rng.random_range(spec.speed.0..spec.speed.1) * dt;
            let x0 = x_start + rng.random_range(0.0..1.5);
            let side = if lane >= center[1] { 1.0 } else { -1.0 };
            let target = if (lane - center[1]).abs() < pass { center[1] + side * pass } else { lane };
            let len = (((x_end - x0) / speed).ceil() as usize).max(2);
            let path: Vec<[f64; 2]> = (0..len)
                .map(|k| {
                    let x = x0 + speed * k as f64;
                    let t = (x - (obstacle.lo[0] - spec.swerve)) / spec.swerve;
                    [x, lane + (target - lane) * smoothstep(t)]
                })
                .collect();
            let len = path.len().min(spec.frames);
            let start = rng.random_range(0..=spec.frames - len);
            (start, path[..len].to_vec())
        })
        .collect();
    let scene = points_to_scene(name, tracks);

    let margin = 4.0;
    let (lo, hi) = scene.bounds();
    let raster = GridTransform::covering(lo, hi, spec.raster_pixel, margin).expect("scene bounds are finite");
    let mut classes = vec![SemanticClass::Sidewalk as u8; raster.len()];
    for r in 0..raster.rows {
        for c in 0..raster.cols {
            let p = raster.cell_center(crate::maps::Cell { row: r, col: c });
            if obstacle.contains(p) {
                classes[r * raster.cols + c] = SemanticClass::Obstacle as u8;
            }
        }
    }
    let semantic = SemanticMap::new(raster, classes).expect("classes are in range");
    ObstacleScene {
        scene,
        obstacle,
        semantic,
    }
}

/// The five benchmark scene names in table order.
pub const BENCHMARK_NAMES: [&str; 5] = ["ETH", "HOTEL", "UNIV", "ZARA-01", "ZARA-02"];

/// Writes `scenes` as tab-separated `frame ped x y` files with sidewalk
/// PGM rasters and legends, plus a dataset config listing them. Returns the
/// config path.
pub fn write_dataset(dir: &Path, scenes: &[&Scene]) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let legend = dir.join("legend.toml");
    let mut legend_text = String::new();
    for class in SemanticClass::ALL {
        let _ = writeln!(legend_text, "{} = \"{}\"", class.index() * 30, class.name());
    }
    std::fs::write(&legend, legend_text)?;
    let mut cfg = String::new();
    for s in scenes {
        let stem: String = s.name().chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect();
        let ann = format!("{stem}.txt");
        let mut text = String::new();
        for p in s.records() {
            let _ = writeln!(text, "{}\t{}\t{}\t{}", p.frame, p.ped, p.x, p.y);
        }
        std::fs::write(dir.join(&ann), text)?;

        let (lo, hi) = s.bounds();
        let pixel = 0.25;
        let origin = [(lo[0] / pixel).floor() * pixel - 4.0, (lo[1] / pixel).floor() * pixel - 4.0];
        let cols = ((hi[0] + 4.0 - origin[0]) / pixel).ceil() as usize + 1;
        let rows = ((hi[1] + 4.0 - origin[1]) / pixel).ceil() as usize + 1;
        let value = (SemanticClass::Sidewalk.index() * 30) as u8;
        let mut pgm = format!("P5\n{cols} {rows}\n255\n").into_bytes();
        pgm.extend(std::iter::repeat_n(value, rows * cols));
        let raster = format!("{stem}_semantic.pgm");
        std::fs::write(dir.join(&raster), pgm)?;

        let _ = write!(
            cfg,
            "[[scene]]\nname = \"{}\"\npath = \"{ann}\"\ncolumns = \"frame ped x y\"\nframe_interval = {}\n\n\
             [scene.semantic]\nraster = \"{raster}\"\nlegend = \"legend.toml\"\norigin = [{:?}, {:?}]\npixel_size = {pixel:?}\n\n",
            s.name(),
            s.frame_interval(),
            origin[0],
            origin[1],
        );
    }
    let path = dir.join("dataset.toml");
    std::fs::write(&path, cfg)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DatasetConfig;
    use crate::dataset::make_windows;

    #[test]
    fn walkers_move_at_constant_velocity() {
        let s = constant_velocity_scene("cv", &WalkerSpec::default(), 3);
        assert_eq!(s.pedestrian_count(), 20);
        for t in s.tracks() {
            let d0 = [t.points[1][0] - t.points[0][0], t.points[1][1] - t.points[0][1]];
            for w in t.points.windows(2) {
                let d = [w[1][0] - w[0][0], w[1][1] - w[0][1]];
                assert!((d[0] - d0[0]).abs() < 1e-9 && (d[1] - d0[1]).abs() < 1e-9);
            }
            let speed = d0[0].hypot(d0[1]) / DEFAULT_FRAME_INTERVAL;
            assert!((0.8..1.6).contains(&speed));
        }
        assert!(!make_windows(&s, 1).is_empty());
        assert_eq!(s.to_text(), constant_velocity_scene("cv", &WalkerSpec::default(), 3).to_text());
    }

    #[test]
    fn walkers_never_enter_the_obstacle() {
        let o = obstacle_scene("obs", [5.0, 3.0], &ObstacleSpec::default(), 1);
        assert!(o.scene.points().all(|p| !o.obstacle.contains(p)));
        // a straight line through the obstacle would have hit it
        let swerved = o.scene.tracks().iter().filter(|t| (t.points[0][1] - t.points.last().unwrap()[1]).abs() > 0.1).count();
        assert!(swerved > 5, "{swerved}");
        let hist = o.semantic.class_histogram();
        assert_eq!(hist[SemanticClass::Obstacle.index()], 400);
        assert!(make_windows(&o.scene, 1).len() >= 20);
    }

    #[test]
    fn written_dataset_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let spec = WalkerSpec {
            pedestrians: 4,
            frames: 40,
            ..WalkerSpec::default()
        };
        let scenes: Vec<Scene> = BENCHMARK_NAMES.iter().enumerate().map(|(i, n)| constant_velocity_scene(n, &spec, i as u64)).collect();
        let refs: Vec<&Scene> = scenes.iter().collect();
        let path = write_dataset(dir.path(), &refs).unwrap();
        let cfg = DatasetConfig::load(&path).unwrap();
        let loaded = cfg.load_all(0.1).unwrap();
        assert_eq!(loaded.len(), 5);
        for (l, s) in loaded.iter().zip(&scenes) {
            assert_eq!(l.scene.name(), s.name());
            assert_eq!(l.scene.records(), s.records());
            let sem = l.semantic.as_ref().unwrap();
            assert_eq!(sem.class_histogram()[SemanticClass::Sidewalk.index()], sem.classes().len());
        }
    }
}
