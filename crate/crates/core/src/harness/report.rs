//! Report rows, CSV and SVG output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use super::HarnessError;

pub const CSV_HEADER: &str = "experiment,point,estimator,seed_count,mean,stderr,closed_form,bound,rate,runtime_ms";

/// One `(sweep point, estimator)` record.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub point: String,
    pub estimator: String,
    /// Seeds whose results enter `mean` (diverged runs are excluded).
    pub seeds: Vec<u64>,
    pub mean: f64,
    pub stderr: f64,
    pub closed_form: Option<f64>,
    pub bound: Option<f64>,
    pub rate: Option<f64>,
    pub runtime_ms: Option<u64>,
}

impl ReportRow {
    pub fn new(point: impl Into<String>, estimator: impl Into<String>, seeds: Vec<u64>, mean: f64, stderr: f64) -> Self {
        Self {
            point: point.into(),
            estimator: estimator.into(),
            seeds,
            mean,
            stderr,
            closed_form: None,
            bound: None,
            rate: None,
            runtime_ms: None,
        }
    }

    /// A theory-only row; `mean` holds the value.
    pub fn theory(point: impl Into<String>, estimator: impl Into<String>, value: f64) -> Self {
        Self::new(point, estimator, Vec::new(), value, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskReport {
    pub config: ExperimentConfig,
    pub rows: Vec<ReportRow>,
    /// Divergences, degenerate baselines and theory warnings.
    pub notes: Vec<String>,
}

impl RiskReport {
    pub fn new(config: ExperimentConfig) -> Self {
        Self {
            config,
            rows: Vec::new(),
            notes: Vec::new(),
        }
    }

    /// First row matching `(point, estimator)`.
    pub fn row(&self, point: &str, estimator: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.point == point && r.estimator == estimator)
    }

    /// Rows of one estimator, in report order.
    pub fn series(&self, estimator: &str) -> Vec<&ReportRow> {
        self.rows.iter().filter(|r| r.estimator == estimator).collect()
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                self.config.experiment,
                r.point,
                r.estimator,
                r.seeds.len(),
                r.mean,
                r.stderr,
                opt(r.closed_form),
                opt(r.bound),
                opt(r.rate),
                r.runtime_ms.map(|x| x.to_string()).unwrap_or_default()
            )
            .expect("writing to a String");
        }
        out
    }

    /// Config echo followed by the notes as comments; parses back to the
    /// config.
    pub fn config_echo(&self) -> String {
        let mut out = self.config.emit();
        for n in &self.notes {
            writeln!(out, "# note: {n}").expect("writing to a String");
        }
        out
    }

    /// Log-log chart, one polyline per estimator with a ±1 SE band. Points
    /// that are not positive numbers are placed at evenly spaced positions.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (640.0, 400.0, 60.0);
        let mut points: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !points.contains(&r.point.as_str()) {
                points.push(&r.point);
            }
        }
        let numeric: Option<Vec<f64>> = points
            .iter()
            .map(|p| p.parse::<f64>().ok().filter(|v| *v > 0.0))
            .collect();
        let xs: Vec<f64> = match &numeric {
            Some(v) => v.iter().map(|x| x.log10()).collect(),
            None => (0..points.len()).map(|i| i as f64).collect(),
        };
        let ys: Vec<f64> = self
            .rows
            .iter()
            .flat_map(|r| [r.mean - r.stderr, r.mean + r.stderr, r.mean])
            .filter(|v| v.is_finite() && *v > 0.0)
            .map(f64::log10)
            .collect();
        let span = |v: &[f64]| {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-9 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        let (x0, x1) = span(&xs);
        let (y0, y1) = span(&ys);
        let px = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
        let py = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
        let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"];

        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
            w / 2.0,
            self.config.experiment
        );
        let _ = writeln!(
            s,
            r#"<path d="M{pad} {pad} L{pad} {b} L{r} {b}" stroke="black" fill="none"/>"#,
            b = h - pad,
            r = w - pad
        );
        for (p, &x) in points.iter().zip(&xs) {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="middle">{p}</text>"#,
                px(x),
                h - pad + 15.0
            );
        }
        for (y, label) in [(y0, y0), (y1, y1)] {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="end">{:.3e}</text>"#,
                pad - 4.0,
                py(y),
                10f64.powf(label)
            );
        }
        let mut estimators: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !estimators.contains(&r.estimator.as_str()) {
                estimators.push(&r.estimator);
            }
        }
        for (k, est) in estimators.iter().enumerate() {
            let color = palette[k % palette.len()];
            let pts: Vec<(f64, &ReportRow)> = self
                .rows
                .iter()
                .filter(|r| r.estimator == *est && r.mean.is_finite() && r.mean > 0.0)
                .map(|r| {
                    let i = points.iter().position(|p| *p == r.point).expect("point collected above");
                    (xs[i], r)
                })
                .collect();
            if pts.is_empty() {
                continue;
            }
            let band: Vec<(f64, f64, f64)> = pts
                .iter()
                .filter(|(_, r)| r.stderr > 0.0 && r.mean - r.stderr > 0.0)
                .map(|(x, r)| (px(*x), py((r.mean + r.stderr).log10()), py((r.mean - r.stderr).log10())))
                .collect();
            if band.len() >= 2 {
                let mut d = String::new();
                for (i, (x, hi, _)) in band.iter().enumerate() {
                    let _ = write!(d, "{}{x:.2} {hi:.2} ", if i == 0 { "M" } else { "L" });
                }
                for (x, _, lo) in band.iter().rev() {
                    let _ = write!(d, "L{x:.2} {lo:.2} ");
                }
                let _ = writeln!(s, r#"<path d="{}Z" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, d);
            }
            let mut d = String::new();
            for (i, (x, r)) in pts.iter().enumerate() {
                let _ = write!(d, "{}{:.2} {:.2} ", if i == 0 { "M" } else { "L" }, px(*x), py(r.mean.log10()));
            }
            let _ = writeln!(s, r#"<path d="{}" stroke="{color}" fill="none" stroke-width="1.5"/>"#, d.trim_end());
            for (x, r) in &pts {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#, px(*x), py(r.mean.log10()));
            }
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" fill="{color}">{est}</text>"#,
                w - pad + 4.0,
                pad + 14.0 * k as f64
            );
        }
        s.push_str("</svg>\n");
        s
    }

    /// Writes `<experiment>.csv`, `<experiment>.svg` and `<experiment>.cfg`
    /// into `dir` and returns their paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
        fs::create_dir_all(dir).map_err(|e| HarnessError::Io(format!("{}: {e}", dir.display())))?;
        let stem = self.config.experiment.name();
        let files = [
            (format!("{stem}.csv"), self.to_csv()),
            (format!("{stem}.svg"), self.to_svg()),
            (format!("{stem}.cfg"), self.config_echo()),
        ];
        let mut out = Vec::new();
        for (name, body) in files {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
            out.push(path);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::{ExperimentKind, Preset};

    fn report() -> RiskReport {
        let mut r = RiskReport::new(ExperimentConfig::preset(ExperimentKind::TaskSweep, Preset::Desk));
        for (t, m) in [("10", 2.0), ("100", 1.5), ("1000", 1.2)] {
            let mut row = ReportRow::new(t, "attention", vec![1, 2], m, 0.05);
            row.closed_form = Some(m - 0.01);
            r.rows.push(row);
            r.rows.push(ReportRow::new(t, "ridge", vec![1, 2], 1.1, 0.02));
            r.rows.push(ReportRow::theory(t, "bound", m * 2.0));
        }
        r
    }

    #[test]
    fn empty_report_is_header_only() {
        let r = RiskReport::new(ExperimentConfig::preset(ExperimentKind::Misspec, Preset::Desk));
        assert_eq!(r.to_csv(), format!("{CSV_HEADER}\n"));
        assert!(r.to_svg().starts_with("<svg"));
    }

    #[test]
    fn csv_layout() {
        let csv = report().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 10);
        assert_eq!(lines[1], "task_sweep,10,attention,2,2,0.05,1.99,,,");
        assert_eq!(lines[3], "task_sweep,10,bound,0,4,0,,,,");
        for l in &lines {
            assert_eq!(l.split(',').count(), 10);
        }
    }

    #[test]
    fn outputs_are_deterministic() {
        let (a, b) = (report(), report());
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.to_svg(), b.to_svg());
        let svg = a.to_svg();
        assert_eq!(svg.matches("stroke-width=\"1.5\"").count(), 3);
        assert!(!svg.contains("href"));
    }

    #[test]
    fn config_echo_parses_back() {
        let mut r = report();
        r.notes.push("T=10: 1 of 2 seeds diverged".into());
        let back = ExperimentConfig::parse(&r.config_echo()).unwrap();
        assert_eq!(back, r.config);
    }

    #[test]
    fn write_creates_files() {
        let dir = tempfile::tempdir().unwrap();
        let paths = report().write(&dir.path().join("nested")).unwrap();
        assert_eq!(paths.len(), 3);
        let csv = fs::read_to_string(&paths[0]).unwrap();
        assert_eq!(csv, report().to_csv());
    }
}
