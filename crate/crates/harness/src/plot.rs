//! CSV series and small SVG line charts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{HarnessError, Result};
use crate::fig3;
use crate::run::{curve_csv, load_checkpoint, nu_by_length, CurvePoint};

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLOURS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn bounds(series: &[Series], f: impl Fn(&(f64, f64)) -> f64) -> (f64, f64) {
    let (lo, hi) = series
        .iter()
        .flat_map(|s| s.points.iter().map(&f))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Line chart; `log_x` plots the horizontal axis on a log scale.
pub fn svg_lines(title: &str, x_label: &str, y_label: &str, series: &[Series], log_x: bool) -> String {
    let tx = |x: f64| if log_x { x.ln() } else { x };
    let (x0, x1) = bounds(series, |p| tx(p.0));
    let (y0, y1) = bounds(series, |p| p.1);
    let sx = |x: f64| MARGIN + (tx(x) - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{title}</text>"#, W / 2.0);
    let (l, r, b, t) = (MARGIN, W - MARGIN, H - MARGIN, MARGIN);
    let _ = writeln!(s, r#"<path d="M{l} {t} L{l} {b} L{r} {b}" stroke="black" fill="none"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, W / 2.0, H - 16.0);
    let _ = writeln!(s, r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">{y_label}</text>"#, H / 2.0, H / 2.0);
    let fx = |v: f64| if log_x { v.exp() } else { v };
    for (k, v) in [(l, fx(x0)), (r, fx(x1))] {
        let _ = writeln!(s, r#"<text x="{k}" y="{}" text-anchor="middle">{v:.3}</text>"#, b + 16.0);
    }
    for (k, v) in [(b, y0), (t, y1)] {
        let _ = writeln!(s, r#"<text x="{}" y="{k}" text-anchor="end">{v:.3}</text>"#, l - 4.0);
    }
    for (i, ser) in series.iter().enumerate() {
        let c = COLOURS[i % COLOURS.len()];
        let d: Vec<String> = ser
            .points
            .iter()
            .enumerate()
            .map(|(j, p)| format!("{}{:.2} {:.2}", if j == 0 { "M" } else { "L" }, sx(p.0), sy(p.1)))
            .collect();
        let _ = writeln!(s, r#"<path d="{}" stroke="{c}" fill="none" stroke-width="1.5"/>"#, d.join(" "));
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{c}">{}</text>"#, r - 120.0, t + 16.0 * (i + 1) as f64, ser.name);
    }
    s.push_str("</svg>\n");
    s
}

fn write_pair(out: &Path, stem: &str, csv: &str, svg: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let c = out.join(format!("{stem}.csv"));
    let v = out.join(format!("{stem}.svg"));
    std::fs::write(&c, csv)?;
    std::fs::write(&v, svg)?;
    Ok(vec![c, v])
}

/// Error curves of the two Gamma approximations over `α ∈ [0.05, 5]`.
pub fn emit_fig3(out: &Path, points: usize) -> Result<Vec<PathBuf>> {
    let rows = fig3::curves(points, 0.05, 5.0)?;
    let mut csv = String::from("alpha,inverse_cdf_error,gaussian_error\n");
    for (a, i, g) in &rows {
        let _ = writeln!(csv, "{a},{i},{g}");
    }
    let series = [
        Series { name: "inverse CDF".into(), points: rows.iter().map(|r| (r.0, r.1)).collect() },
        Series { name: "Gaussian".into(), points: rows.iter().map(|r| (r.0, r.2)).collect() },
    ];
    let svg = svg_lines("Gamma approximation error", "alpha", "mean absolute error", &series, true);
    write_pair(out, "fig3", &csv, &svg)
}

pub fn emit_loss_curves(out: &Path, points: &[CurvePoint]) -> Result<Vec<PathBuf>> {
    if points.is_empty() {
        return Err(HarnessError::Input("no logged steps".into()));
    }
    let col = |name: &str, f: fn(&CurvePoint) -> f64| Series {
        name: name.into(),
        points: points.iter().map(|p| (p.step as f64, f(p))).collect(),
    };
    let series = [col("l_r", |p| p.loss.l_r), col("l_d", |p| p.loss.l_d), col("total", |p| p.loss.total)];
    let svg = svg_lines("Training loss", "step", "loss", &series, false);
    write_pair(out, "loss_curves", &curve_csv(points), &svg)
}

/// Reads a loss-curve CSV written by training.
pub fn read_loss_curves(path: &Path) -> Result<Vec<CurvePoint>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Input(format!("cannot read {}: {e}", path.display())))?;
    let bad = || HarnessError::Input(format!("malformed loss curve {}", path.display()));
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            Ok(CurvePoint {
                step: f[0].parse().map_err(|_| bad())?,
                loss: nvib_model::LossRecord { l_r: num(1)?, l_d: num(2)?, l_g: num(3)?, total: num(4)? },
            })
        })
        .collect()
}

/// Retained proportion against input length for a saved NVAE.
pub fn emit_nu_vs_length(out: &Path, checkpoint: &Path) -> Result<Vec<PathBuf>> {
    let (ckpt, _, data) = load_checkpoint(checkpoint)?;
    let rows = nu_by_length(&ckpt.model, &data.validation.sentences)?;
    let mut csv = String::from("length,nu,count\n");
    for (n, nu, k) in &rows {
        let _ = writeln!(csv, "{n},{nu},{k}");
    }
    let series = [Series { name: "nu".into(), points: rows.iter().map(|r| (r.0 as f64, r.1)).collect() }];
    let svg = svg_lines("Retained proportion", "input tokens", "nu", &series, false);
    write_pair(out, "nu_vs_length", &csv, &svg)
}
