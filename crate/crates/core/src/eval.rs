//! Disparity metrics, sub-label refinement and false-colour rendering.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{dim_err, Error, Result};
use crate::stereo_io::{GroundTruth, Image};
use crate::volume::{CostVolume, Labeling};

pub const DEFAULT_THRESHOLDS: [f64; 4] = [1.0, 2.0, 3.0, 4.0];

fn check(pred: &[f64], gt: &GroundTruth) -> Result<usize> {
    if pred.len() != gt.disparity.len() {
        return Err(dim_err(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.disparity.len()
        )));
    }
    match gt.valid_count() {
        0 => Err(Error::UndefinedMetric("no valid ground-truth pixels".into())),
        n => Ok(n),
    }
}

fn valid_errors<'a>(pred: &'a [f64], gt: &'a GroundTruth) -> impl Iterator<Item = f64> + 'a {
    pred.iter()
        .zip(&gt.disparity)
        .zip(&gt.valid)
        .filter(|(_, ok)| **ok)
        .map(|((p, g), _)| (p - g).abs())
}

/// Percentage of valid pixels whose error is strictly above `threshold`.
pub fn badx(pred: &[f64], gt: &GroundTruth, threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::Config(format!("threshold must be positive, got {threshold}")));
    }
    let n = check(pred, gt)?;
    let bad = valid_errors(pred, gt).filter(|e| *e > threshold).count();
    Ok(100.0 * bad as f64 / n as f64)
}

pub fn rms(pred: &[f64], gt: &GroundTruth) -> Result<f64> {
    let n = check(pred, gt)?;
    let sq: f64 = valid_errors(pred, gt).map(|e| e * e).sum();
    Ok((sq / n as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BadX {
    pub threshold: f64,
    pub percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub badx: Vec<BadX>,
    pub rms: f64,
    pub valid_pixel_count: usize,
    /// True when occluded pixels were left out of the ground truth.
    pub occluded_excluded: bool,
}

impl EvalReport {
    pub fn compute(pred: &[f64], gt: &GroundTruth, thresholds: &[f64], occluded_excluded: bool) -> Result<Self> {
        let badx = thresholds
            .iter()
            .map(|t| {
                Ok(BadX {
                    threshold: *t,
                    percent: badx(pred, gt, *t)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalReport {
            badx,
            rms: rms(pred, gt)?,
            valid_pixel_count: gt.valid_count(),
            occluded_excluded,
        })
    }

    /// Pixel-weighted pooling of per-image reports with equal thresholds.
    pub fn pool(reports: &[EvalReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| Error::UndefinedMetric("no reports to pool".into()))?;
        let n: usize = reports.iter().map(|r| r.valid_pixel_count).sum();
        let nf = n as f64;
        let mut badx = first.badx.clone();
        for (j, b) in badx.iter_mut().enumerate() {
            b.percent = reports
                .iter()
                .map(|r| r.badx[j].percent * r.valid_pixel_count as f64)
                .sum::<f64>()
                / nf;
        }
        let sq: f64 = reports.iter().map(|r| r.rms * r.rms * r.valid_pixel_count as f64).sum();
        Ok(EvalReport {
            badx,
            rms: (sq / nf).sqrt(),
            valid_pixel_count: n,
            occluded_excluded: first.occluded_excluded,
        })
    }

    pub fn bad(&self, threshold: f64) -> Option<f64> {
        self.badx.iter().find(|b| b.threshold == threshold).map(|b| b.percent)
    }

    pub fn csv_header(&self) -> String {
        let mut s = String::from("name");
        for b in &self.badx {
            let _ = write!(s, ",bad{}", b.threshold);
        }
        s.push_str(",rms,valid_pixels,occluded_excluded");
        s
    }

    pub fn csv_row(&self, name: &str) -> String {
        let mut s = name.to_string();
        for b in &self.badx {
            let _ = write!(s, ",{:.4}", b.percent);
        }
        let _ = write!(
            s,
            ",{:.6},{},{}",
            self.rms, self.valid_pixel_count, self.occluded_excluded
        );
        s
    }

    pub fn table_row(&self, name: &str) -> String {
        let mut s = format!("{name:<24}");
        for b in &self.badx {
            let _ = write!(s, " {:>8.2}", b.percent);
        }
        let _ = write!(s, " {:>8.4} {:>8}", self.rms, self.valid_pixel_count);
        s
    }

    pub fn table_header(&self) -> String {
        let mut s = format!("{:<24}", "name");
        for b in &self.badx {
            let _ = write!(s, " {:>8}", format!("bad{}", b.threshold));
        }
        let _ = write!(s, " {:>8} {:>8}", "rms", "pixels");
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report is always serializable")
    }
}

const STENCIL_EPS: f64 = 1e-12;

/// Continuous disparity from a parabola through the costs at `d - 1`, `d`,
/// `d + 1`. Boundary labels and non-convex stencils keep `d`.
pub fn sublabel_refine(costs: &CostVolume, x: &Labeling) -> Result<Vec<f64>> {
    if costs.height != x.height || costs.width != x.width {
        return Err(dim_err("cost volume and labeling differ in shape"));
    }
    let l = costs.labels;
    Ok(x.labels
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            if d == 0 || d + 1 >= l {
                return d as f64;
            }
            let c = costs.pixel(i);
            let (lo, mid, hi) = (c[d - 1], c[d], c[d + 1]);
            let denom = hi - 2.0 * mid + lo;
            if !(denom > STENCIL_EPS) {
                return d as f64;
            }
            let offset = (lo - hi) / (2.0 * denom);
            d as f64 + offset.clamp(-0.5, 0.5)
        })
        .collect())
}

/// False-colour rendering: hue runs from blue at 0 to red at
/// `max_disparity`; non-finite values are black.
pub fn colorize(pred: &[f64], height: usize, width: usize, max_disparity: f64) -> Result<Image> {
    if pred.len() != height * width {
        return Err(dim_err("prediction size does not match image shape"));
    }
    let mut img = Image::zeros(height, width, 3);
    let span = if max_disparity > 0.0 { max_disparity } else { 1.0 };
    for (i, d) in pred.iter().enumerate() {
        if !d.is_finite() {
            continue;
        }
        let t = (d / span).clamp(0.0, 1.0);
        let rgb = hue_to_rgb(240.0 * (1.0 - t));
        for (ch, v) in rgb.iter().enumerate() {
            img.plane_mut(ch)[i] = *v;
        }
    }
    Ok(img)
}

fn hue_to_rgb(hue: f64) -> [f64; 3] {
    let h = hue / 60.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    match h as u32 {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        _ => [x, 0.0, 1.0],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(values: Vec<f64>) -> GroundTruth {
        GroundTruth::from_disparity(1, values.len(), values).unwrap()
    }

    #[test]
    fn badx_cases() {
        let g = gt(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(badx(&g.disparity.clone(), &g, 1.0).unwrap(), 0.0);
        assert_eq!(badx(&[6.0, 7.0, 3.0, 4.0], &g, 3.0).unwrap(), 50.0);
        assert_eq!(badx(&[4.0, 2.0, 3.0, 4.0], &g, 3.0).unwrap(), 0.0);
        assert!(badx(&[1.0; 4], &g, 0.0).is_err());
    }

    #[test]
    fn badx_ignores_invalid_and_fails_when_empty() {
        let g = gt(vec![1.0, f64::INFINITY]);
        assert_eq!(badx(&[1.0, 50.0], &g, 1.0).unwrap(), 0.0);
        let empty = gt(vec![f64::NAN, -1.0]);
        assert!(matches!(badx(&[0.0, 0.0], &empty, 1.0), Err(Error::UndefinedMetric(_))));
        assert!(matches!(rms(&[0.0, 0.0], &empty), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn rms_cases() {
        let g = gt(vec![1.0, 2.0, 3.0]);
        assert_eq!(rms(&[1.0, 2.0, 3.0], &g).unwrap(), 0.0);
        assert_eq!(rms(&[1.0], &gt(vec![3.0])).unwrap(), 2.0);
        let pred = [0.0, 5.0, 3.5];
        let mut acc = 0.0;
        for i in 0..3 {
            acc += (pred[i] - g.disparity[i]).powi(2);
        }
        assert!((rms(&pred, &g).unwrap() - (acc / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn pooled_report_is_pixel_weighted() {
        let a = EvalReport::compute(&[0.0, 9.0], &gt(vec![0.0, 0.0]), &[1.0], true).unwrap();
        let b = EvalReport::compute(&[0.0, 0.0, 0.0, 0.0], &gt(vec![0.0; 4]), &[1.0], true).unwrap();
        let p = EvalReport::pool(&[a, b]).unwrap();
        assert!((p.bad(1.0).unwrap() - 100.0 / 6.0).abs() < 1e-12);
        assert!((p.rms - (81.0f64 / 6.0).sqrt()).abs() < 1e-12);
        assert_eq!(p.valid_pixel_count, 6);
        assert!(p.to_json().contains("\"valid_pixel_count\":6"));
    }

    fn refine_one(c: [f64; 3]) -> f64 {
        let costs = CostVolume::from_values(1, 1, 3, c.to_vec()).unwrap();
        sublabel_refine(&costs, &Labeling::new(1, 1, vec![1]).unwrap()).unwrap()[0]
    }

    #[test]
    fn sublabel_examples() {
        assert_eq!(refine_one([2.0, 1.0, 2.0]), 1.0);
        assert_eq!(refine_one([4.0, 1.0, 2.0]), 1.25);
        assert_eq!(refine_one([1.0, 1.0, 1.0]), 1.0);
        assert_eq!(refine_one([0.0, 1.0, 0.0]), 1.0);
    }

    #[test]
    fn sublabel_boundary_labels_unchanged() {
        let costs = CostVolume::from_values(1, 2, 3, vec![0.0, 1.0, 2.0, 2.0, 1.0, 0.0]).unwrap();
        let out = sublabel_refine(&costs, &Labeling::new(1, 2, vec![0, 2]).unwrap()).unwrap();
        assert_eq!(out, vec![0.0, 2.0]);
    }

    #[test]
    fn colorize_anchors_and_invalid() {
        let img = colorize(&[0.0, 8.0, f64::INFINITY, 4.0], 1, 4, 8.0).unwrap();
        let px = |i: usize| [img.plane(0)[i], img.plane(1)[i], img.plane(2)[i]];
        assert_eq!(px(0), [0.0, 0.0, 1.0]);
        assert_eq!(px(1), [1.0, 0.0, 0.0]);
        assert_eq!(px(2), [0.0, 0.0, 0.0]);
        assert_eq!(px(3), [0.0, 1.0, 0.0]);
    }
}
