//! Regression metrics and Epanechnikov density export.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: usize,
    pub mae: f64,
    pub rmse: f64,
    /// NaN when the truth has zero variance.
    pub r2: f64,
    pub n: usize,
}

pub fn metrics(task: usize, pred: &[f64], truth: &[f64]) -> Result<MetricReport> {
    if pred.len() != truth.len() {
        return Err(Error::shape("metrics", &[pred.len()], &[truth.len()]));
    }
    let n = pred.len();
    if n < 2 {
        return Err(Error::Data(format!("metrics need at least 2 pairs, got {n}")));
    }
    let nf = n as f64;
    let mean = truth.iter().sum::<f64>() / nf;
    let (mut abs, mut sq, mut tot) = (0.0, 0.0, 0.0);
    for (p, y) in pred.iter().zip(truth) {
        let e = p - y;
        abs += e.abs();
        sq += e * e;
        tot += (y - mean) * (y - mean);
    }
    let r2 = if tot > 0.0 {
        1.0 - sq / tot
    } else {
        log::warn!("task {task}: truth has zero variance, R² undefined");
        f64::NAN
    };
    Ok(MetricReport {
        task,
        mae: abs / nf,
        rmse: (sq / nf).sqrt(),
        r2,
        n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

pub fn epanechnikov(u: f64) -> f64 {
    if u.abs() <= 1.0 {
        0.75 * (1.0 - u * u)
    } else {
        0.0
    }
}

/// `f(y) = (1/(n·b)) Σ K((y − s)/b)` on every grid point.
pub fn kde(samples: &[f64], bandwidth: f64, grid: &[f64]) -> Result<DensityCurve> {
    if samples.is_empty() {
        return Err(Error::Data("density estimate needs at least one sample".into()));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::Config(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let scale = 1.0 / (samples.len() as f64 * bandwidth);
    let density = grid
        .iter()
        .map(|&y| scale * samples.iter().map(|&s| epanechnikov((y - s) / bandwidth)).sum::<f64>())
        .collect();
    Ok(DensityCurve {
        grid: grid.to_vec(),
        density,
        bandwidth,
    })
}

/// `1.06·σ̂·n^{-1/5}`; falls back to 1e-3 of the sample scale (or 1) when σ̂ is 0.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len().max(1) as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let sd = (samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n).sqrt();
    if sd > 0.0 {
        1.06 * sd * n.powf(-0.2)
    } else {
        (1e-3 * mean.abs()).max(1e-3)
    }
}

/// `points` evenly spaced values covering all samples ± `bandwidth`.
pub fn covering_grid(samples: &[f64], bandwidth: f64, points: usize) -> Vec<f64> {
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min) - bandwidth;
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max) + bandwidth;
    let points = points.max(2);
    (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect()
}

pub fn trapezoid(x: &[f64], f: &[f64]) -> f64 {
    x.windows(2)
        .zip(f.windows(2))
        .map(|(xs, fs)| 0.5 * (xs[1] - xs[0]) * (fs[0] + fs[1]))
        .sum()
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(samples: &[f64], q: f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

pub fn density_csv(curve: &DensityCurve) -> String {
    let mut out = String::from("y,f\n");
    for (y, f) in curve.grid.iter().zip(&curve.density) {
        let _ = writeln!(out, "{y},{f}");
    }
    out
}

/// Minimal line plot of the curve, with an optional vertical marker (e.g. the truth).
pub fn density_svg(curve: &DensityCurve, marker: Option<f64>) -> String {
    let (w, h, pad) = (480.0, 240.0, 30.0);
    let x0 = curve.grid.first().copied().unwrap_or(0.0);
    let x1 = curve.grid.last().copied().unwrap_or(1.0);
    let fmax = curve.density.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let sx = |x: f64| pad + (x - x0) / (x1 - x0).max(f64::MIN_POSITIVE) * (w - 2.0 * pad);
    let sy = |f: f64| h - pad - f / fmax * (h - 2.0 * pad);
    let mut pts = String::new();
    for (x, f) in curve.grid.iter().zip(&curve.density) {
        let _ = write!(pts, "{:.2},{:.2} ", sx(*x), sy(*f));
    }
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{}\"/>\n",
        pts.trim_end(),
        b = h - pad,
        r = w - pad,
    );
    if let Some(m) = marker {
        let _ = writeln!(
            svg,
            "<line x1=\"{x:.2}\" y1=\"{pad}\" x2=\"{x:.2}\" y2=\"{b}\" stroke=\"firebrick\" stroke-dasharray=\"4 3\"/>",
            x = sx(m),
            b = h - pad
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{pad}\" y=\"{}\" font-size=\"11\">{x0:.3}</text>\n<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\">{x1:.3}</text>\n</svg>",
        h - 10.0,
        w - pad,
        h - 10.0
    );
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_mean_predictions() {
        let y = [1.0, 4.0, 2.0];
        let m = metrics(0, &y, &y).unwrap();
        assert_eq!((m.mae, m.rmse, m.r2), (0.0, 0.0, 1.0));
        let mean = [7.0 / 3.0; 3];
        assert!(metrics(0, &mean, &y).unwrap().r2.abs() < 1e-12);
    }

    #[test]
    fn hand_example() {
        let m = metrics(2, &[0.0, 0.0, 2.0], &[0.0, 1.0, 2.0]).unwrap();
        assert!((m.mae - 1.0 / 3.0).abs() < 1e-15);
        assert!((m.rmse - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((m.r2 - 0.5).abs() < 1e-15);
        assert_eq!(m.n, 3);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(metrics(0, &[1.0], &[1.0]).is_err());
        assert!(metrics(0, &[1.0, 2.0], &[1.0]).is_err());
        assert!(metrics(0, &[1.0, 2.0], &[3.0, 3.0]).unwrap().r2.is_nan());
    }

    #[test]
    fn slope_matters_for_r2() {
        // shifting both by a constant keeps R²; rescaling predictions does not
        let y = [0.0, 1.0, 3.0, 4.0];
        let p = [0.5, 1.0, 2.5, 4.5];
        let base = metrics(0, &p, &y).unwrap().r2;
        let shifted: Vec<f64> = p.iter().map(|v| v + 10.0).collect();
        let ys: Vec<f64> = y.iter().map(|v| v + 10.0).collect();
        assert!((metrics(0, &shifted, &ys).unwrap().r2 - base).abs() < 1e-12);
        let scaled: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
        assert!((metrics(0, &scaled, &y).unwrap().r2 - base).abs() > 0.1);
    }

    #[test]
    fn kde_single_sample() {
        let c = kde(&[2.0], 0.5, &[2.0, 2.6, 1.4, 2.25]).unwrap();
        assert_eq!(c.density[0], 0.75 / 0.5);
        assert_eq!(c.density[1], 0.0);
        assert_eq!(c.density[2], 0.0);
        assert!(c.density[3] > 0.0);
        assert!(kde(&[], 1.0, &[0.0]).is_err());
        assert!(kde(&[1.0], 0.0, &[0.0]).is_err());
    }

    #[test]
    fn quantiles_and_bandwidth() {
        let s = [3.0, 1.0, 2.0, 4.0, 5.0];
        assert_eq!(quantile(&s, 0.0), 1.0);
        assert_eq!(quantile(&s, 0.5), 3.0);
        assert_eq!(quantile(&s, 0.125), 1.5);
        assert!(silverman_bandwidth(&s) > 0.0);
        assert!(silverman_bandwidth(&[2.0, 2.0]) > 0.0);
    }

    #[test]
    fn svg_is_wellformed_enough() {
        let c = kde(&[0.0, 1.0], 0.5, &covering_grid(&[0.0, 1.0], 0.5, 50)).unwrap();
        let svg = density_svg(&c, Some(0.3));
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(density_csv(&c).starts_with("y,f\n"));
    }
}
