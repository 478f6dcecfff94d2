use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::Result;
use crate::harness::config::ExperimentConfig;
use crate::harness::train::TrainLog;
use crate::io::{write_atomic, write_json};

/// One pass/fail verdict with the number it was decided on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    /// `"<"`, `"<="`, `">="` or `"=="`, read as `measured relation bound`.
    pub relation: String,
    pub bound: f64,
}

impl Check {
    fn new(name: &str, measured: f64, relation: &str, bound: f64, passed: bool) -> Self {
        Self {
            name: name.into(),
            passed,
            measured,
            relation: relation.into(),
            bound,
        }
    }

    pub fn below(name: &str, measured: f64, bound: f64) -> Self {
        Self::new(name, measured, "<", bound, measured < bound)
    }

    pub fn at_most(name: &str, measured: f64, bound: f64) -> Self {
        Self::new(name, measured, "<=", bound, measured <= bound)
    }

    pub fn at_least(name: &str, measured: f64, bound: f64) -> Self {
        Self::new(name, measured, ">=", bound, measured >= bound)
    }

    /// Exact equality; NaN never passes.
    pub fn equals(name: &str, measured: f64, bound: f64) -> Self {
        Self::new(name, measured, "==", bound, measured == bound)
    }

    /// A boolean property, recorded as `1 == 1` or `0 == 1`.
    pub fn holds(name: &str, ok: bool) -> Self {
        Self::new(name, f64::from(u8::from(ok)), "==", 1.0, ok)
    }

    pub fn line(&self) -> String {
        format!(
            "[{}] {}: {} {} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            fmt_num(self.measured),
            self.relation,
            fmt_num(self.bound)
        )
    }
}

fn fmt_num(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e6) {
        format!("{v:.3e}")
    } else {
        format!("{v:.6}")
    }
}

/// A table with a fixed header, written as CSV.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }
}

/// Formats a float for CSV output: fixed precision so files are stable.
pub fn cell(v: f64) -> String {
    format!("{v:.6}")
}

/// Everything an experiment produces, before it is written to disk.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub metrics: Table,
    /// Training logs by cell name, in cell order.
    pub logs: Vec<(String, TrainLog)>,
    /// Preset-specific results.
    pub results: Value,
    pub checks: Vec<Check>,
    /// Cell whose loss curve is drawn in `curve.svg`.
    pub curve_cell: Option<String>,
}

impl ExperimentOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn trainlog_csv(&self) -> String {
        let mut out = String::from("cell,step,loss,lower,upper\n");
        for (name, log) in &self.logs {
            for e in &log.entries {
                let (lo, hi) = e.bounds.map_or((String::new(), String::new()), |b| (cell(b.lower), cell(b.upper)));
                let _ = writeln!(out, "{name},{},{:.9},{lo},{hi}", e.step, e.loss);
            }
        }
        out
    }

    /// The deterministic report: config, checks and results, no timings.
    pub fn report(&self) -> Value {
        serde_json::json!({
            "experiment": self.config.experiment,
            "seed": self.config.seed,
            "passed": self.passed(),
            "checks": self.checks,
            "results": self.results,
        })
    }

    pub fn curve_svg(&self) -> Option<String> {
        let name = self.curve_cell.as_ref()?;
        let (_, log) = self.logs.iter().find(|(n, _)| n == name)?;
        Some(loss_curve_svg(&format!("{} training loss ({name})", self.config.experiment), &log.losses()))
    }

    /// Writes `metrics.csv`, `trainlog.csv`, `report.json`, `config.json`,
    /// `curve.svg` when a curve is selected, and `meta.json` with the
    /// run's wall time. Only `meta.json` varies between identical runs.
    pub fn write(&self, dir: &Path, wall_seconds: f64, jobs: usize) -> Result<()> {
        write_atomic(&dir.join("metrics.csv"), self.metrics.to_csv().as_bytes())?;
        write_atomic(&dir.join("trainlog.csv"), self.trainlog_csv().as_bytes())?;
        write_json(&dir.join("report.json"), &self.report())?;
        write_json(&dir.join("config.json"), &self.config)?;
        if let Some(svg) = self.curve_svg() {
            write_atomic(&dir.join("curve.svg"), svg.as_bytes())?;
        }
        write_json(
            &dir.join("meta.json"),
            &serde_json::json!({
                "wall_seconds": wall_seconds,
                "jobs": jobs,
                "version": env!("CARGO_PKG_VERSION"),
                "train_seconds": self.logs.iter().map(|(n, l)| (n.clone(), serde_json::json!(l.wall_seconds))).collect::<serde_json::Map<_, _>>(),
            }),
        )
    }
}

/// A self-contained SVG line plot of `losses` against step.
pub fn loss_curve_svg(title: &str, losses: &[f64]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const LEFT: f64 = 70.0;
    const RIGHT: f64 = 20.0;
    const TOP: f64 = 40.0;
    const BOTTOM: f64 = 50.0;
    let (plot_w, plot_h) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let finite: Vec<f64> = losses.iter().copied().filter(|v| v.is_finite()).collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = match (lo.is_finite(), hi > lo) {
        (false, _) => (0.0, 1.0),
        (true, false) => (lo - 0.5, lo + 0.5),
        (true, true) => (lo, hi),
    };
    let last = losses.len().saturating_sub(1).max(1) as f64;
    let points: Vec<String> = losses
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .map(|(i, v)| {
            let x = LEFT + plot_w * i as f64 / last;
            let y = TOP + plot_h * (hi - v) / (hi - lo);
            format!("{x:.2},{y:.2}")
        })
        .collect();
    let escaped = title.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{escaped}</text>"#, W / 2.0);
    let _ = writeln!(
        s,
        r#"<path d="M{LEFT},{TOP} V{} H{}" fill="none" stroke="black"/>"#,
        TOP + plot_h,
        LEFT + plot_w
    );
    let _ = writeln!(s, r#"<text x="{LEFT}" y="{}" text-anchor="end" dx="-6">{}</text>"#, TOP + 4.0, fmt_num(hi));
    let _ = writeln!(s, r#"<text x="{LEFT}" y="{}" text-anchor="end" dx="-6">{}</text>"#, TOP + plot_h, fmt_num(lo));
    let _ = writeln!(s, r#"<text x="{LEFT}" y="{}" text-anchor="middle">0</text>"#, TOP + plot_h + 18.0);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        LEFT + plot_w,
        TOP + plot_h + 18.0,
        losses.len().saturating_sub(1)
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">training step</text>"#, LEFT + plot_w / 2.0, H - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">loss</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );
    let _ = writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{}"/>"#, points.join(" "));
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checks_compare_as_named() {
        assert!(Check::below("a", 1.0, 2.0).passed);
        assert!(!Check::below("a", 2.0, 2.0).passed);
        assert!(Check::at_most("a", 2.0, 2.0).passed);
        assert!(Check::at_least("a", 2.0, 2.0).passed);
        assert!(!Check::equals("a", f64::NAN, f64::NAN).passed);
        assert!(Check::holds("a", true).line().starts_with("[PASS] a"));
    }

    #[test]
    fn csv_has_one_line_per_row() {
        let mut t = Table::new(&["a", "b"]);
        t.push(vec!["1".into(), cell(0.5)]);
        assert_eq!(t.to_csv(), "a,b\n1,0.500000\n");
    }

    #[test]
    fn svg_is_well_formed() {
        let svg = loss_curve_svg("loss <cas>", &[1.0, 0.5, 0.25]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("training step"));
        assert!(svg.contains("&lt;cas&gt;"));
        assert!(svg.contains("70.00,40.00"));
        // Degenerate inputs still render.
        assert!(loss_curve_svg("flat", &[2.0; 4]).contains("polyline"));
        assert!(loss_curve_svg("empty", &[]).contains("polyline"));
    }
}
