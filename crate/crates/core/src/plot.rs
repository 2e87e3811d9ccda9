//! Static SVG charts for run directories.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{self, Checkpoint, MetricsRow, NFE_WINDOW};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;
use crate::train::TrainState;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 72.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 52.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Number of model and data points drawn in the sample scatter.
pub const SCATTER_POINTS: usize = 2000;

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self { label: label.into(), points }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScatterChart {
    pub title: String,
    pub sets: Vec<(String, Tensor)>,
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn fit<'a>(points: impl Iterator<Item = &'a (f64, f64)>) -> Self {
        let mut x = (f64::INFINITY, f64::NEG_INFINITY);
        let mut y = (f64::INFINITY, f64::NEG_INFINITY);
        for &(px, py) in points.filter(|(a, b)| a.is_finite() && b.is_finite()) {
            x = (x.0.min(px), x.1.max(px));
            y = (y.0.min(py), y.1.max(py));
        }
        Self { x: widen(x), y: widen(y) }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - TOP - BOTTOM)
    }

    fn axes(&self, out: &mut String, title: &str, x_label: &str, y_label: &str) {
        let (x0, x1) = (LEFT, WIDTH - RIGHT);
        let (y0, y1) = (HEIGHT - BOTTOM, TOP);
        let _ = write!(
            out,
            r##"<rect x="{x0}" y="{y1}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
            x1 - x0,
            y0 - y1
        );
        for t in ticks(self.x) {
            let p = self.px(t);
            let _ = write!(
                out,
                r##"<line x1="{p:.2}" y1="{y0}" x2="{p:.2}" y2="{}" stroke="#444"/><text x="{p:.2}" y="{}" font-size="11" text-anchor="middle">{}</text>"##,
                y0 + 4.0,
                y0 + 17.0,
                fmt_tick(t)
            );
        }
        for t in ticks(self.y) {
            let p = self.py(t);
            let _ = write!(
                out,
                r##"<line x1="{}" y1="{p:.2}" x2="{x0}" y2="{p:.2}" stroke="#444"/><line x1="{x0}" y1="{p:.2}" x2="{x1}" y2="{p:.2}" stroke="#eee"/><text x="{}" y="{:.2}" font-size="11" text-anchor="end">{}</text>"##,
                x0 - 4.0,
                x0 - 7.0,
                p + 4.0,
                fmt_tick(t)
            );
        }
        let _ = write!(
            out,
            r#"<text x="{}" y="24" font-size="15" text-anchor="middle">{}</text><text x="{}" y="{}" font-size="12" text-anchor="middle">{}</text><text x="16" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
            WIDTH / 2.0,
            escape(title),
            (x0 + x1) / 2.0,
            HEIGHT - 12.0,
            escape(x_label),
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(y_label)
        );
    }
}

fn widen((lo, hi): (f64, f64)) -> (f64, f64) {
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo <= f64::EPSILON * hi.abs().max(lo.abs()).max(1.0) {
        let pad = (lo.abs() * 0.05).max(0.5);
        return (lo - pad, hi + pad);
    }
    let pad = (hi - lo) * 0.04;
    (lo - pad, hi + pad)
}

fn ticks((lo, hi): (f64, f64)) -> Vec<f64> {
    let raw = (hi - lo) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    (first..first + 12).map(|k| k as f64 * step).take_while(|t| *t <= hi).collect()
}

fn fmt_tick(t: f64) -> String {
    let a = t.abs();
    if a != 0.0 && !(1e-3..1e5).contains(&a) {
        format!("{t:.1e}")
    } else {
        let s = format!("{t:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open() -> String {
    format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif"><rect width="100%" height="100%" fill="white"/>"#
    )
}

fn legend(out: &mut String, labels: &[&str]) {
    if labels.len() < 2 {
        return;
    }
    for (i, label) in labels.iter().enumerate() {
        let y = TOP + 14.0 + 16.0 * i as f64;
        let x = WIDTH - RIGHT - 150.0;
        let _ = write!(
            out,
            r#"<rect x="{x}" y="{}" width="12" height="4" fill="{}"/><text x="{}" y="{}" font-size="11">{}</text>"#,
            y - 4.0,
            PALETTE[i % PALETTE.len()],
            x + 18.0,
            y,
            escape(label)
        );
    }
}

impl LineChart {
    pub fn new(title: impl Into<String>, x_label: impl Into<String>, y_label: impl Into<String>) -> Self {
        Self { title: title.into(), x_label: x_label.into(), y_label: y_label.into(), series: Vec::new() }
    }

    pub fn with_series(mut self, series: Series) -> Self {
        self.series.push(series);
        self
    }

    pub fn to_svg(&self) -> String {
        let frame = Frame::fit(self.series.iter().flat_map(|s| s.points.iter()));
        let mut out = open();
        frame.axes(&mut out, &self.title, &self.x_label, &self.y_label);
        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<_> = s.points.iter().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
            if pts.len() == 1 {
                let (x, y) = *pts[0];
                let _ = write!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, frame.px(x), frame.py(y));
            } else if !pts.is_empty() {
                out.push_str(r#"<polyline fill="none" stroke-width="1.2" stroke=""#);
                out.push_str(color);
                out.push_str(r#"" points=""#);
                for (x, y) in pts {
                    let _ = write!(out, "{:.2},{:.2} ", frame.px(*x), frame.py(*y));
                }
                out.push_str(r#""/>"#);
            }
        }
        legend(&mut out, &self.series.iter().map(|s| s.label.as_str()).collect::<Vec<_>>());
        out.push_str("</svg>\n");
        out
    }
}

impl ScatterChart {
    pub fn to_svg(&self) -> String {
        let pts: Vec<(f64, f64)> = self
            .sets
            .iter()
            .flat_map(|(_, t)| (0..t.rows()).map(move |i| (t.get(i, 0), if t.cols() > 1 { t.get(i, 1) } else { 0.0 })))
            .collect();
        let frame = Frame::fit(pts.iter());
        let mut out = open();
        frame.axes(&mut out, &self.title, "x", "y");
        for (i, (_, t)) in self.sets.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let _ = write!(out, r#"<g fill="{color}" fill-opacity="0.35">"#);
            for r in 0..t.rows() {
                let (x, y) = (t.get(r, 0), if t.cols() > 1 { t.get(r, 1) } else { 0.0 });
                if x.is_finite() && y.is_finite() {
                    let _ = write!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="1.3"/>"#, frame.px(x), frame.py(y));
                }
            }
            out.push_str("</g>");
        }
        legend(&mut out, &self.sets.iter().map(|(l, _)| l.as_str()).collect::<Vec<_>>());
        out.push_str("</svg>\n");
        out
    }
}

fn series_of(rows: &[MetricsRow], f: impl Fn(&MetricsRow) -> Option<f64>) -> Vec<(f64, f64)> {
    rows.iter().filter_map(|r| f(r).map(|v| (r.iteration as f64, v))).collect()
}

fn nfe_average(rows: &[MetricsRow]) -> Vec<(f64, f64)> {
    let nfe: Vec<f64> = rows.iter().map(|r| r.nfe_forward as f64).collect();
    rows.iter().zip(metrics::moving_average(&nfe, NFE_WINDOW)).map(|(r, v)| (r.iteration as f64, v)).collect()
}

/// The four per-run line charts, keyed by output file name.
pub fn run_charts(label: &str, rows: &[MetricsRow]) -> Vec<(&'static str, LineChart)> {
    vec![
        (
            "grad_norm.svg",
            LineChart::new("Gradient norm (pre-clip)", "iteration", "grad norm")
                .with_series(Series::new(label, series_of(rows, |r| Some(r.grad_norm_pre_clip)))),
        ),
        (
            "nfe.svg",
            LineChart::new(format!("NFE ({NFE_WINDOW}-iteration moving average)"), "iteration", "NFE")
                .with_series(Series::new(label, nfe_average(rows))),
        ),
        (
            "test_loss.svg",
            LineChart::new("Held-out NLL", "iteration", "nats").with_series(Series::new(label, series_of(rows, |r| r.test_loss))),
        ),
        (
            "T_trace.svg",
            LineChart::new("Stopping time T", "iteration", "T").with_series(Series::new(label, series_of(rows, |r| Some(r.t_current)))),
        ),
    ]
}

fn write_svg(path: PathBuf, svg: &str) -> Result<PathBuf> {
    std::fs::write(&path, svg)?;
    Ok(path)
}

fn load_rows(run_dir: &Path) -> Result<Vec<MetricsRow>> {
    let rows = metrics::read_rows(run_dir)?;
    if rows.is_empty() {
        return Err(Error::EmptyRun(run_dir.to_path_buf()));
    }
    Ok(rows)
}

/// Model samples against held-out data for the checkpoint in `run_dir`.
/// `None` when the run has no checkpoint or is not two-dimensional.
pub fn sample_scatter(run_dir: &Path) -> Result<Option<ScatterChart>> {
    if !run_dir.join(metrics::CHECKPOINT_FILE).is_file() {
        return Ok(None);
    }
    let ck = Checkpoint::load(run_dir)?;
    let cfg = RunConfig::from_value(ck.config.clone(), &[])?;
    if cfg.dataset_name().dim() != 2 {
        return Ok(None);
    }
    let state = TrainState::from_checkpoint(&cfg, ck)?;
    let mut model = state.model;
    model.t_end = state.policy.eval_t_end();
    let samples = model.sample(SCATTER_POINTS, rng::derive_seed(cfg.seed, Stream::Sample, 0))?;
    let data = cfg.dataset_spec().test_set(SCATTER_POINTS);
    Ok(Some(ScatterChart { title: format!("{} samples", cfg.dataset_name()), sets: vec![("data".into(), data), ("model".into(), samples)] }))
}

/// Writes the per-run charts into `run_dir` and returns their paths.
pub fn plot_run(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let rows = load_rows(run_dir)?;
    let mut written = Vec::new();
    for (name, chart) in run_charts("run", &rows) {
        written.push(write_svg(run_dir.join(name), &chart.to_svg())?);
    }
    if let Some(scatter) = sample_scatter(run_dir)? {
        written.push(write_svg(run_dir.join("samples.svg"), &scatter.to_svg())?);
    }
    Ok(written)
}

/// Overlays the per-run charts of several labelled runs into `out_dir`.
/// Runs without rows are skipped; at least one must have rows.
pub fn plot_overlay(runs: &[(String, PathBuf)], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut merged: Vec<(&'static str, LineChart)> = Vec::new();
    for (label, dir) in runs {
        let Ok(rows) = load_rows(dir) else { continue };
        for (i, (name, chart)) in run_charts(label, &rows).into_iter().enumerate() {
            match merged.get_mut(i) {
                Some((_, m)) => m.series.extend(chart.series),
                None => merged.push((name, chart)),
            }
        }
    }
    if merged.is_empty() {
        return Err(Error::EmptyRun(out_dir.to_path_buf()));
    }
    std::fs::create_dir_all(out_dir)?;
    merged.into_iter().map(|(name, chart)| write_svg(out_dir.join(format!("overlay_{name}")), &chart.to_svg())).collect()
}
