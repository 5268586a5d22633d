//! Annotation loading, scene assembly, windowing and leave-one-out splits.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

/// Observed frames per window.
pub const OBS_LEN: usize = 8;
/// Total frames per window (observed + predicted).
pub const SEQ_LEN: usize = 20;
/// Predicted frames per window.
pub const PRED_LEN: usize = SEQ_LEN - OBS_LEN;
pub const DEFAULT_FRAME_INTERVAL: f64 = 0.4;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate record for frame {frame}, pedestrian {ped}")]
    Duplicate { line: usize, frame: i64, ped: i64 },
    #[error("invalid column order {0:?}: need each of frame, ped, x, y exactly once")]
    Columns(String),
    #[error("unknown scene {0:?}")]
    UnknownScene(String),
    #[error("scene {0:?} has no records")]
    Empty(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackPoint {
    pub frame: i64,
    pub ped: i64,
    pub x: f64,
    pub y: f64,
}

/// Which whitespace/comma separated field holds each quantity.
///
/// Written as a field list such as `"frame ped x y"` or `"frame,ped,x,_,y"`,
/// where `_` marks an ignored column.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ColumnOrder {
    pub frame: usize,
    pub ped: usize,
    pub x: usize,
    pub y: usize,
}

impl Default for ColumnOrder {
    fn default() -> Self {
        Self {
            frame: 0,
            ped: 1,
            x: 2,
            y: 3,
        }
    }
}

impl FromStr for ColumnOrder {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut slots: [Option<usize>; 4] = [None; 4];
        for (i, name) in s.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()).enumerate() {
            let k = match name {
                "frame" => 0,
                "ped" | "ped_id" | "id" => 1,
                "x" => 2,
                "y" => 3,
                "_" => continue,
                _ => return Err(DataError::Columns(s.to_string())),
            };
            if slots[k].replace(i).is_some() {
                return Err(DataError::Columns(s.to_string()));
            }
        }
        match slots {
            [Some(frame), Some(ped), Some(x), Some(y)] => Ok(Self { frame, ped, x, y }),
            _ => Err(DataError::Columns(s.to_string())),
        }
    }
}

/// Contiguous run of one pedestrian over consecutive scene frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub ped: i64,
    /// Index into [`Scene::frames`] of the first point.
    pub start: usize,
    pub points: Vec<[f64; 2]>,
}

impl Track {
    /// One past the last frame index covered.
    pub fn end(&self) -> usize {
        self.start + self.points.len()
    }

    pub fn at(&self, frame_index: usize) -> Option<[f64; 2]> {
        frame_index.checked_sub(self.start).and_then(|k| self.points.get(k).copied())
    }
}

/// All tracks of one recording, indexed by the sorted distinct frame ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    name: String,
    frames: Vec<i64>,
    frame_interval: f64,
    tracks: Vec<Track>,
    per_frame: Vec<Vec<usize>>,
}

impl Scene {
    /// Assembles a scene from raw records. Records may come in any order;
    /// a pedestrian missing from an intermediate frame is split into
    /// separate tracks at the gap.
    pub fn from_points(name: &str, points: &[TrackPoint], frame_interval: f64) -> Result<Self, DataError> {
        if points.is_empty() {
            return Err(DataError::Empty(name.to_string()));
        }
        let mut frames: Vec<i64> = points.iter().map(|p| p.frame).collect();
        frames.sort_unstable();
        frames.dedup();
        let frame_index: HashMap<i64, usize> = frames.iter().enumerate().map(|(i, f)| (*f, i)).collect();

        let mut by_ped: BTreeMap<i64, Vec<(usize, [f64; 2])>> = BTreeMap::new();
        for p in points {
            by_ped.entry(p.ped).or_default().push((frame_index[&p.frame], [p.x, p.y]));
        }
        let mut tracks = Vec::new();
        for (ped, mut pts) in by_ped {
            pts.sort_by_key(|(f, _)| *f);
            let mut current: Option<Track> = None;
            for (f, xy) in pts {
                match current.as_mut() {
                    Some(t) if t.end() == f => t.points.push(xy),
                    _ => {
                        if let Some(done) = current.take() {
                            tracks.push(done);
                        }
                        current = Some(Track {
                            ped,
                            start: f,
                            points: vec![xy],
                        });
                    }
                }
            }
            tracks.extend(current);
        }
        tracks.sort_by_key(|t| (t.start, t.ped));

        let mut per_frame = vec![Vec::new(); frames.len()];
        for (i, t) in tracks.iter().enumerate() {
            for f in t.start..t.end() {
                per_frame[f].push(i);
            }
        }
        Ok(Self {
            name: name.to_string(),
            frames,
            frame_interval,
            tracks,
            per_frame,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn frames(&self) -> &[i64] {
        &self.frames
    }

    pub fn frame_interval(&self) -> f64 {
        self.frame_interval
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    /// Track indices present at a frame index.
    pub fn present(&self, frame_index: usize) -> &[usize] {
        &self.per_frame[frame_index]
    }

    pub fn pedestrian_count(&self) -> usize {
        let mut ids: Vec<i64> = self.tracks.iter().map(|t| t.ped).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    pub fn points(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        self.tracks.iter().flat_map(|t| t.points.iter().copied())
    }

    /// Records sorted by frame then pedestrian.
    pub fn records(&self) -> Vec<TrackPoint> {
        let mut out: Vec<TrackPoint> = self
            .tracks
            .iter()
            .flat_map(|t| {
                t.points.iter().enumerate().map(move |(k, p)| TrackPoint {
                    frame: self.frames[t.start + k],
                    ped: t.ped,
                    x: p[0],
                    y: p[1],
                })
            })
            .collect();
        out.sort_by_key(|r| (r.frame, r.ped));
        out
    }

    /// Mean of every annotated position.
    pub fn centroid(&self) -> [f64; 2] {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for p in self.points() {
            sx += p[0];
            sy += p[1];
            n += 1;
        }
        [sx / n as f64, sy / n as f64]
    }

    /// Axis-aligned bounds `(min, max)` of all positions.
    pub fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in self.points() {
            for d in 0..2 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        (lo, hi)
    }

    /// Serializes as `frame ped x y` lines; [`parse_scene`] reads it back
    /// with identical track data.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in self.records() {
            let _ = writeln!(s, "{} {} {} {}", r.frame, r.ped, r.x, r.y);
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_text()).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Parses annotation text. Fields are separated by whitespace and/or commas;
/// blank lines and lines starting with `#` are skipped.
pub fn parse_scene(name: &str, text: &str, columns: ColumnOrder, frame_interval: f64) -> Result<Scene, DataError> {
    let needed = columns.frame.max(columns.ped).max(columns.x).max(columns.y) + 1;
    let mut points = Vec::new();
    let mut seen: HashMap<(i64, i64), usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()).collect();
        if fields.len() < needed {
            return Err(DataError::Parse {
                line,
                message: format!("expected at least {needed} fields, found {}", fields.len()),
            });
        }
        let num = |k: usize, what: &str| -> Result<f64, DataError> {
            let v: f64 = fields[k].parse().map_err(|_| DataError::Parse {
                line,
                message: format!("{what} field {:?} is not numeric", fields[k]),
            })?;
            if !v.is_finite() {
                return Err(DataError::Parse {
                    line,
                    message: format!("{what} field is not finite"),
                });
            }
            Ok(v)
        };
        let int = |k: usize, what: &str| -> Result<i64, DataError> {
            let v = num(k, what)?;
            if v.fract() != 0.0 {
                return Err(DataError::Parse {
                    line,
                    message: format!("{what} field {:?} is not an integer", fields[k]),
                });
            }
            Ok(v as i64)
        };
        let p = TrackPoint {
            frame: int(columns.frame, "frame")?,
            ped: int(columns.ped, "pedestrian")?,
            x: num(columns.x, "x")?,
            y: num(columns.y, "y")?,
        };
        if seen.insert((p.frame, p.ped), line).is_some() {
            return Err(DataError::Duplicate {
                line,
                frame: p.frame,
                ped: p.ped,
            });
        }
        points.push(p);
    }
    Scene::from_points(name, &points, frame_interval)
}

pub fn load_scene(name: &str, path: &Path, columns: ColumnOrder, frame_interval: f64) -> Result<Scene, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scene(name, &text, columns, frame_interval)
}

/// A `SEQ_LEN`-frame slice of a scene.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    /// Frame index of the first frame.
    pub start: usize,
    /// Tracks present in every frame of the window.
    pub targets: Vec<usize>,
    /// Tracks present in some but not all frames.
    pub context: Vec<usize>,
}

impl Window {
    /// Tracks present at window step `step` (0-based), targets first.
    pub fn present_at<'a>(&'a self, scene: &'a Scene, step: usize) -> impl Iterator<Item = usize> + 'a {
        let f = self.start + step;
        self.targets
            .iter()
            .chain(&self.context)
            .copied()
            .filter(move |&t| scene.tracks[t].at(f).is_some())
    }

    pub fn position(&self, scene: &Scene, track: usize, step: usize) -> Option<[f64; 2]> {
        scene.tracks[track].at(self.start + step)
    }

    pub fn all_tracks(&self) -> impl Iterator<Item = usize> + '_ {
        self.targets.iter().chain(&self.context).copied()
    }
}

/// Every `SEQ_LEN`-frame run starting at multiples of `stride` that contains
/// at least one pedestrian present throughout.
pub fn make_windows(scene: &Scene, stride: usize) -> Vec<Window> {
    let stride = stride.max(1);
    let n = scene.frames.len();
    if n < SEQ_LEN {
        return Vec::new();
    }
    let mut out = Vec::new();
    for start in (0..=n - SEQ_LEN).step_by(stride) {
        let end = start + SEQ_LEN;
        let mut targets = Vec::new();
        let mut context = Vec::new();
        for (i, t) in scene.tracks.iter().enumerate() {
            if t.end() <= start || t.start >= end {
                continue;
            }
            if t.start <= start && t.end() >= end {
                targets.push(i);
            } else {
                context.push(i);
            }
        }
        if !targets.is_empty() {
            out.push(Window {
                start,
                targets,
                context,
            });
        }
    }
    out
}

/// Splits `scenes` into everything except `held_out` and `held_out` itself.
pub fn leave_one_out<'a>(scenes: &'a [Scene], held_out: &str) -> Result<(Vec<&'a Scene>, &'a Scene), DataError> {
    let test = scenes
        .iter()
        .find(|s| s.name == held_out)
        .ok_or_else(|| DataError::UnknownScene(held_out.to_string()))?;
    let train = scenes.iter().filter(|s| s.name != held_out).collect();
    Ok((train, test))
}

/// A seeded random `fraction` of `windows` (at least one), in original
/// order. Fractions of one or more keep everything.
pub fn subsample(windows: Vec<Window>, fraction: f64, seed: u64) -> Vec<Window> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    if fraction >= 1.0 || windows.is_empty() {
        return windows;
    }
    let n = windows.len();
    let keep = ((fraction.max(0.0) * n as f64).round() as usize).clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = idx[..keep].to_vec();
    chosen.sort_unstable();
    let mut slots: Vec<Option<Window>> = windows.into_iter().map(Some).collect();
    chosen.into_iter().filter_map(|i| slots[i].take()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_track(ped: i64, frames: std::ops::Range<i64>) -> Vec<TrackPoint> {
        frames
            .map(|f| TrackPoint {
                frame: f,
                ped,
                x: f as f64 * 0.5,
                y: ped as f64,
            })
            .collect()
    }

    #[test]
    fn two_line_file() {
        let s = parse_scene("a", "1 7 0.0 1.0\n2 7 0.5 1.0\n", ColumnOrder::default(), 0.4).unwrap();
        assert_eq!(s.tracks().len(), 1);
        assert_eq!(s.tracks()[0].points.len(), 2);
    }

    #[test]
    fn duplicate_names_line() {
        let err = parse_scene("a", "1 7 0 1\n2 7 0 1\n1 7 3 3\n", ColumnOrder::default(), 0.4).unwrap_err();
        assert!(matches!(err, DataError::Duplicate { line: 3, frame: 1, ped: 7 }));
        assert!(err.to_string().contains("line 3"));
    }

    #[test]
    fn non_numeric_field_reports_line() {
        let err = parse_scene("a", "1 7 0 1\n2 x 0 1\n", ColumnOrder::default(), 0.4).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn column_permutation_and_commas() {
        let cols: ColumnOrder = "frame,ped,x,_,y".parse().unwrap();
        let s = parse_scene("a", "10,1,2.5,9.9,3.5\n20,1,3.0,9.9,4.0\n", cols, 0.4).unwrap();
        assert_eq!(s.tracks()[0].points, vec![[2.5, 3.5], [3.0, 4.0]]);
        let cols: ColumnOrder = "x y frame id".parse().unwrap();
        let s = parse_scene("a", "2.5 3.5 10 1.0\n", cols, 0.4).unwrap();
        assert_eq!(s.frames(), &[10]);
        assert!("frame x y".parse::<ColumnOrder>().is_err());
        assert!("frame frame ped x y".parse::<ColumnOrder>().is_err());
    }

    #[test]
    fn gaps_split_tracks() {
        let mut pts = line_track(1, 0..5);
        pts.extend(line_track(1, 8..12));
        pts.extend(line_track(2, 0..12));
        let s = Scene::from_points("g", &pts, 0.4).unwrap();
        let ped1: Vec<&Track> = s.tracks().iter().filter(|t| t.ped == 1).collect();
        assert_eq!(ped1.len(), 2);
        assert_eq!((ped1[0].start, ped1[0].end()), (0, 5));
        assert_eq!((ped1[1].start, ped1[1].end()), (8, 12));
    }

    #[test]
    fn one_window_for_twenty_frames() {
        let s = Scene::from_points("w", &line_track(1, 0..20), 0.4).unwrap();
        let w = make_windows(&s, 1);
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].targets.len(), 1);
    }

    #[test]
    fn window_count_matches_enumeration() {
        let s = Scene::from_points("w", &line_track(1, 0..25), 0.4).unwrap();
        let expected = (0..25usize).filter(|st| st + SEQ_LEN <= 25).count();
        assert_eq!(make_windows(&s, 1).len(), expected);
        assert_eq!(expected, 6);
        assert_eq!(make_windows(&s, 2).len(), 3);
    }

    #[test]
    fn partial_presence_is_context_only() {
        let mut pts = line_track(1, 0..30);
        pts.extend(line_track(2, 5..16));
        let s = Scene::from_points("w", &pts, 0.4).unwrap();
        let p2 = s.tracks().iter().position(|t| t.ped == 2).unwrap();
        for w in make_windows(&s, 1) {
            assert!(!w.targets.contains(&p2));
        }
        assert!(make_windows(&s, 1).iter().any(|w| w.context.contains(&p2)));
    }

    #[test]
    fn windowing_is_exhaustive() {
        let mut pts = line_track(1, 0..23);
        pts.extend(line_track(2, 10..40));
        pts.extend(line_track(3, 30..33));
        let s = Scene::from_points("w", &pts, 0.4).unwrap();
        let windows = make_windows(&s, 1);
        let n = s.frames().len();
        for start in 0..=n - SEQ_LEN {
            let full = s.tracks().iter().any(|t| t.start <= start && t.end() >= start + SEQ_LEN);
            let count = windows.iter().filter(|w| w.start == start).count();
            assert_eq!(count, usize::from(full), "start {start}");
        }
    }

    fn five() -> Vec<Scene> {
        ["ETH", "HOTEL", "UNIV", "ZARA-01", "ZARA-02"]
            .iter()
            .map(|n| Scene::from_points(n, &line_track(1, 0..3), 0.4).unwrap())
            .collect()
    }

    #[test]
    fn leave_one_out_partitions() {
        let scenes = five();
        let (train, test) = leave_one_out(&scenes, "ETH").unwrap();
        let names: Vec<&str> = train.iter().map(|s| s.name()).collect();
        assert_eq!(names, ["HOTEL", "UNIV", "ZARA-01", "ZARA-02"]);
        assert_eq!(test.name(), "ETH");
        let mut partitions = Vec::new();
        for s in &scenes {
            let (train, test) = leave_one_out(&scenes, s.name()).unwrap();
            assert_eq!(train.len() + 1, scenes.len());
            assert!(train.iter().all(|t| t.name() != test.name()));
            partitions.push(test.name().to_string());
        }
        partitions.dedup();
        assert_eq!(partitions.len(), 5);
        assert!(matches!(leave_one_out(&scenes, "NOPE"), Err(DataError::UnknownScene(_))));
    }

    proptest::proptest! {
        #[test]
        fn text_round_trip(raw in proptest::collection::vec((0i64..30, 0i64..6, -50.0f64..50.0, -50.0f64..50.0), 1..80)) {
            let mut seen = std::collections::HashSet::new();
            let pts: Vec<TrackPoint> = raw
                .into_iter()
                .filter(|(f, p, _, _)| seen.insert((*f, *p)))
                .map(|(frame, ped, x, y)| TrackPoint { frame, ped, x, y })
                .collect();
            let s = Scene::from_points("rt", &pts, 0.4).unwrap();
            let back = parse_scene("rt", &s.to_text(), ColumnOrder::default(), 0.4).unwrap();
            proptest::prop_assert_eq!(back, s);
        }
    }

    #[test]
    fn subsample_is_seeded_and_ordered() {
        let w: Vec<Window> = (0..40)
            .map(|start| Window {
                start,
                targets: vec![0],
                context: vec![],
            })
            .collect();
        let a = subsample(w.clone(), 0.25, 3);
        assert_eq!(a.len(), 10);
        assert!(a.windows(2).all(|p| p[0].start < p[1].start));
        assert_eq!(a, subsample(w.clone(), 0.25, 3));
        assert_ne!(a, subsample(w.clone(), 0.25, 4));
        assert_eq!(subsample(w.clone(), 0.001, 3).len(), 1);
        assert_eq!(subsample(w.clone(), 1.0, 3), w);
    }
}
