//! Scene × variant tables of ADE and FDE, plus the `results.csv` format.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{EvalError, EvalResult};
use crate::model::Variant;

pub const RESULTS_HEADER: &str = "scene,variant,ade,fde,n_windows,n_peds";

/// Published leave-one-out averages for the five variants, as
/// `(variant, ade mean, ade std, fde mean, fde std)` in meters. Shown next
/// to our numbers for reference; nothing is tested against them.
pub const PUBLISHED_AVERAGES: [(Variant, f64, f64, f64, f64); 5] = [
    (Variant::Vanilla, 0.41, 0.11, 2.30, 0.61),
    (Variant::S, 0.40, 0.13, 2.20, 0.71),
    (Variant::SN, 0.37, 0.09, 2.01, 0.43),
    (Variant::SS, 0.36, 0.10, 1.99, 0.54),
    (Variant::SNS, 0.36, 0.13, 1.81, 0.43),
];

const SCENE_ORDER: [(&str, &[&str]); 5] = [
    ("ETH", &["eth", "ethuniv", "biwieth"]),
    ("HOTEL", &["hotel", "biwihotel"]),
    ("UNIV", &["univ", "students", "students003", "ucyuniv"]),
    ("ZARA-01", &["zara01", "zara1", "crowdszara01"]),
    ("ZARA-02", &["zara02", "zara2", "crowdszara02"]),
];

/// Position of a scene in the canonical row order, if it is one of the
/// five standard benchmark scenes.
pub fn scene_rank(name: &str) -> Option<usize> {
    let key: String = name.chars().filter(char::is_ascii_alphanumeric).collect::<String>().to_ascii_lowercase();
    SCENE_ORDER.iter().position(|(_, aliases)| aliases.contains(&key.as_str()))
}

fn variant_rank(key: &str) -> Option<usize> {
    Variant::ALL.iter().position(|v| v.key() == key)
}

fn variant_label(key: &str) -> String {
    match key.parse::<Variant>() {
        Ok(v) => v.label().to_string(),
        Err(_) => key.to_string(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Metric {
    Ade,
    Fde,
}

/// Mean and sample standard deviation (`n − 1`); the deviation is absent
/// for a single value.
fn mean_std(values: &[f64]) -> Option<(f64, Option<f64>)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    Some((mean, std))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    scenes: Vec<String>,
    variants: Vec<String>,
    cells: BTreeMap<(String, String), (f64, f64)>,
}

impl Report {
    /// Later results for the same scene and variant replace earlier ones.
    pub fn from_results(results: &[EvalResult]) -> Self {
        let mut r = Self::default();
        for res in results {
            if !r.scenes.contains(&res.scene) {
                r.scenes.push(res.scene.clone());
            }
            if !r.variants.contains(&res.variant) {
                r.variants.push(res.variant.clone());
            }
            r.cells.insert((res.scene.clone(), res.variant.clone()), (res.ade, res.fde));
        }
        r.scenes.sort_by_key(|s| (scene_rank(s).unwrap_or(usize::MAX), s.clone()));
        let first_seen = r.variants.clone();
        r.variants.sort_by_key(|v| {
            (
                variant_rank(v).unwrap_or(usize::MAX),
                first_seen.iter().position(|x| x == v),
            )
        });
        r
    }

    pub fn scenes(&self) -> &[String] {
        &self.scenes
    }

    pub fn variants(&self) -> &[String] {
        &self.variants
    }

    fn cell(&self, scene: &str, variant: &str, metric: Metric) -> Option<f64> {
        self.cells
            .get(&(scene.to_string(), variant.to_string()))
            .map(|&(a, f)| if metric == Metric::Ade { a } else { f })
    }

    pub fn ade(&self, scene: &str, variant: &str) -> Option<f64> {
        self.cell(scene, variant, Metric::Ade)
    }

    pub fn fde(&self, scene: &str, variant: &str) -> Option<f64> {
        self.cell(scene, variant, Metric::Fde)
    }

    fn average(&self, variant: &str, metric: Metric) -> Option<(f64, Option<f64>)> {
        let vals: Vec<f64> = self.scenes.iter().filter_map(|s| self.cell(s, variant, metric)).collect();
        mean_std(&vals)
    }

    /// Mean over scenes and sample standard deviation of ADE.
    pub fn ade_average(&self, variant: &str) -> Option<(f64, Option<f64>)> {
        self.average(variant, Metric::Ade)
    }

    pub fn fde_average(&self, variant: &str) -> Option<(f64, Option<f64>)> {
        self.average(variant, Metric::Fde)
    }

    fn published(&self, variant: &str, metric: Metric) -> Option<(f64, f64)> {
        PUBLISHED_AVERAGES
            .iter()
            .find(|p| p.0.key() == variant)
            .map(|p| if metric == Metric::Ade { (p.1, p.2) } else { (p.3, p.4) })
    }

    fn text_block(&self, out: &mut String, metric: Metric) {
        let title = if metric == Metric::Ade { "ADE (m)" } else { "FDE (m)" };
        let mut rows: Vec<Vec<String>> = Vec::new();
        let mut header = vec![String::new()];
        header.extend(self.variants.iter().map(|v| variant_label(v)));
        rows.push(header);
        for s in &self.scenes {
            let mut row = vec![s.clone()];
            row.extend(self.variants.iter().map(|v| self.cell(s, v, metric).map_or("-".into(), |x| format!("{x:.2}"))));
            rows.push(row);
        }
        let mut avg = vec!["Average".to_string()];
        avg.extend(self.variants.iter().map(|v| match self.average(v, metric) {
            None => "-".into(),
            Some((m, None)) => format!("{m:.2}"),
            Some((m, Some(sd))) => format!("{m:.2} ± {sd:.2}"),
        }));
        rows.push(avg);
        if self.variants.iter().any(|v| self.published(v, metric).is_some()) {
            let mut p = vec!["Published average (reference)".to_string()];
            p.extend(self.variants.iter().map(|v| {
                self.published(v, metric).map_or("-".into(), |(m, sd)| format!("{m:.2} ± {sd:.2}"))
            }));
            rows.push(p);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let _ = writeln!(out, "{title}");
        for (i, row) in rows.iter().enumerate() {
            let mut line = String::new();
            for (c, cell) in row.iter().enumerate() {
                let pad = widths[c] - cell.chars().count();
                if c == 0 {
                    line.push_str(cell);
                    line.push_str(&" ".repeat(pad));
                } else {
                    line.push_str("  ");
                    line.push_str(&" ".repeat(pad));
                    line.push_str(cell);
                }
            }
            let _ = writeln!(out, "{}", line.trim_end());
            if i == 0 || i == self.scenes.len() {
                let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                let _ = writeln!(out, "{}", "-".repeat(total));
            }
        }
    }

    /// Aligned text tables, ADE then FDE.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        self.text_block(&mut out, Metric::Ade);
        out.push('\n');
        self.text_block(&mut out, Metric::Fde);
        out
    }

    /// `metric,row,<variant…>` with full-precision values. Rows are the
    /// scenes, then `average` and `average_std`, then the published
    /// reference rows. Absent cells are empty.
    pub fn to_csv(&self) -> String {
        let mut out = format!("metric,row,{}\n", self.variants.join(","));
        let fmt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
        for (metric, name) in [(Metric::Ade, "ade"), (Metric::Fde, "fde")] {
            let mut line = |row: &str, f: &dyn Fn(&str) -> Option<f64>| {
                let cells: Vec<String> = self.variants.iter().map(|v| fmt(f(v))).collect();
                let _ = writeln!(out, "{name},{row},{}", cells.join(","));
            };
            for s in &self.scenes {
                line(s, &|v| self.cell(s, v, metric));
            }
            line("average", &|v| self.average(v, metric).map(|a| a.0));
            line("average_std", &|v| self.average(v, metric).and_then(|a| a.1));
            line("published_average", &|v| self.published(v, metric).map(|p| p.0));
            line("published_std", &|v| self.published(v, metric).map(|p| p.1));
        }
        out
    }
}

pub fn results_csv(results: &[EvalResult]) -> String {
    let mut out = format!("{RESULTS_HEADER}\n");
    for r in results {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.scene, r.variant, r.ade, r.fde, r.n_windows, r.n_peds);
    }
    out
}

pub fn parse_results_csv(text: &str, path: &str) -> Result<Vec<EvalResult>, EvalError> {
    let err = |line: usize, message: String| EvalError::Parse {
        path: path.to_string(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == RESULTS_HEADER => {}
        _ => return Err(err(1, format!("expected header {RESULTS_HEADER:?}"))),
    }
    lines
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            if f.len() != 6 {
                return Err(err(i + 1, format!("expected 6 fields, found {}", f.len())));
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|e| err(i + 1, format!("{}: {e}", f[k])));
            let int = |k: usize| f[k].parse::<usize>().map_err(|e| err(i + 1, format!("{}: {e}", f[k])));
            Ok(EvalResult {
                scene: f[0].to_string(),
                variant: f[1].to_string(),
                ade: num(2)?,
                fde: num(3)?,
                n_windows: int(4)?,
                n_peds: int(5)?,
                per_window: Vec::new(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(scene: &str, variant: &str, ade: f64, fde: f64) -> EvalResult {
        EvalResult {
            scene: scene.into(),
            variant: variant.into(),
            ade,
            fde,
            n_peds: 3,
            n_windows: 2,
            per_window: Vec::new(),
        }
    }

    #[test]
    fn published_spread_is_sample_std() {
        // published vanilla ADE per scene and its reported spread
        let (m, sd) = mean_std(&[0.52, 0.33, 0.52, 0.41, 0.27]).unwrap();
        assert!((m - 0.41).abs() < 0.005);
        assert!((sd.unwrap() - 0.11).abs() < 0.005);
    }

    #[test]
    fn average_matches_flat_recomputation() {
        let vals = [0.47, 0.24, 0.43, 0.33, 0.31];
        let names = ["ETH", "HOTEL", "UNIV", "ZARA-01", "ZARA-02"];
        let results: Vec<EvalResult> = names.iter().zip(vals).map(|(s, v)| result(s, "ss", v, 2.0 * v)).collect();
        let rep = Report::from_results(&results);
        let (m, sd) = rep.ade_average("ss").unwrap();
        let mut sum = 0.0;
        for v in vals {
            sum += v;
        }
        let mean = sum / 5.0;
        let mut sq = 0.0;
        for v in vals {
            sq += (v - mean) * (v - mean);
        }
        assert!((m - mean).abs() < 1e-12);
        assert!((sd.unwrap() - (sq / 4.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn single_cell_omits_std() {
        let rep = Report::from_results(&[result("HOTEL", "sns", 0.3, 1.5)]);
        assert_eq!(rep.ade_average("sns"), Some((0.3, None)));
        let text = rep.to_text();
        assert!(text.contains("Average"));
        assert!(!text.lines().any(|l| l.starts_with("Average") && l.contains('±')));
        assert!(text.contains("Published average (reference)"));
    }

    #[test]
    fn canonical_row_and_column_order() {
        let results = vec![
            result("zara2", "sns", 1.0, 1.0),
            result("eth", "vanilla", 1.0, 1.0),
            result("univ", "ss", 1.0, 1.0),
            result("hotel", "s", 1.0, 1.0),
            result("zara1", "sn", 1.0, 1.0),
            result("custom", "persistence", 1.0, 1.0),
        ];
        let rep = Report::from_results(&results);
        assert_eq!(rep.scenes(), ["eth", "hotel", "univ", "zara1", "zara2", "custom"]);
        assert_eq!(rep.variants(), ["vanilla", "s", "sn", "ss", "sns", "persistence"]);
        let header = rep.to_text().lines().nth(1).unwrap().to_string();
        let pos: Vec<usize> = ["Vanilla LSTM", "Social-LSTM", "SN-LSTM", "SS-LSTM", "SNS-LSTM"]
            .iter()
            .map(|l| header.find(l).unwrap())
            .collect();
        assert!(pos.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn missing_cells_are_absent_not_zero() {
        let rep = Report::from_results(&[result("ETH", "s", 0.5, 2.0), result("HOTEL", "sns", 0.4, 1.0)]);
        let csv = rep.to_csv();
        assert!(csv.lines().any(|l| l == "ade,ETH,0.5,"));
        let text = rep.to_text();
        let eth = text.lines().find(|l| l.starts_with("ETH")).unwrap();
        assert!(eth.trim_end().ends_with('-'));
    }

    #[test]
    fn results_round_trip() {
        let rs = vec![result("ETH", "sns", 0.123456789012345, 1.5), result("HOTEL", "s", 0.1 + 0.2, 2.0)];
        let back = parse_results_csv(&results_csv(&rs), "r.csv").unwrap();
        assert_eq!(back, rs);
        assert!(parse_results_csv("scene,variant\n", "r.csv").is_err());
        assert!(parse_results_csv(&format!("{RESULTS_HEADER}\nETH,s,x,1,1,1\n"), "r.csv").is_err());
    }
}
