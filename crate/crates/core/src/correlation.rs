//! Softmax-normalized feature correlation over disparities, its backward
//! pass, and the per-pixel argmax decision.

use crate::error::{dim_err, Error, Result};
use crate::stereo_io::FeatureMap;
use crate::volume::{CostVolume, Labeling};

/// Direction in which a left pixel's match moves in the right image: label
/// `k` at column `c` compares against column `c + k` (positive) or `c - k`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Sign {
    #[default]
    Positive,
    Negative,
}

impl Sign {
    #[inline]
    pub fn offset(self, k: usize) -> isize {
        match self {
            Sign::Positive => k as isize,
            Sign::Negative => -(k as isize),
        }
    }

    pub fn as_i32(self) -> i32 {
        match self {
            Sign::Positive => 1,
            Sign::Negative => -1,
        }
    }

    pub fn from_i32(v: i32) -> Result<Self> {
        match v {
            1 => Ok(Sign::Positive),
            -1 => Ok(Sign::Negative),
            _ => Err(Error::Config(format!("disparity sign must be 1 or -1, got {v}"))),
        }
    }
}

/// Unary cost given to labels whose match leaves the image.
pub const INVALID_LABEL_COST: f64 = 1e3;

#[inline]
fn match_column(c: usize, k: usize, width: usize, sign: Sign) -> Option<usize> {
    let t = c as isize + sign.offset(k);
    (t >= 0 && (t as usize) < width).then_some(t as usize)
}

fn check_pair(phi0: &FeatureMap, phi1: &FeatureMap) -> Result<()> {
    if !phi0.same_shape(phi1) {
        return Err(dim_err(format!(
            "feature maps differ: {}x{}x{} vs {}x{}x{}",
            phi0.height, phi0.width, phi0.channels, phi1.height, phi1.width, phi1.channels
        )));
    }
    Ok(())
}

/// Raw inner products `<phi0_i, phi1_{i + sign k}>`; out-of-image labels are
/// marked invalid and hold 0.
pub fn correlation_scores(phi0: &FeatureMap, phi1: &FeatureMap, labels: usize, sign: Sign) -> Result<CostVolume> {
    check_pair(phi0, phi1)?;
    if labels < 2 {
        return Err(dim_err("need at least two labels"));
    }
    let (h, w) = (phi0.height, phi0.width);
    let mut vol = CostVolume::zeros(h, w, labels);
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            for k in 0..labels {
                vol.valid[i * labels + k] = match_column(c, k, w, sign).is_some();
            }
        }
    }
    for f in 0..phi0.channels {
        let a = phi0.plane(f);
        let b = phi1.plane(f);
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                let av = a[i];
                for k in 0..labels {
                    if let Some(t) = match_column(c, k, w, sign) {
                        vol.values[i * labels + k] += av * b[r * w + t];
                    }
                }
            }
        }
    }
    Ok(vol)
}

/// In-place softmax over the valid labels of each pixel, stabilized by
/// subtracting the per-pixel maximum.
pub fn softmax_in_place(vol: &mut CostVolume) {
    let l = vol.labels;
    for i in 0..vol.pixels() {
        let valid = &vol.valid[i * l..(i + 1) * l];
        let vals = &mut vol.values[i * l..(i + 1) * l];
        let max = vals
            .iter()
            .zip(valid)
            .filter(|(_, ok)| **ok)
            .map(|(v, _)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (v, ok) in vals.iter_mut().zip(valid) {
            if *ok {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        vals.iter_mut().for_each(|v| *v /= sum);
    }
}

/// Matching probabilities `p_i(k)`: softmax of feature inner products over
/// the disparities whose match stays inside the image row.
pub fn correlate(phi0: &FeatureMap, phi1: &FeatureMap, labels: usize, sign: Sign) -> Result<CostVolume> {
    let mut vol = correlation_scores(phi0, phi1, labels, sign)?;
    softmax_in_place(&mut vol);
    Ok(vol)
}

/// Gradients of `sum(grad_p ⊙ correlate(phi0, phi1))` with respect to both
/// feature maps. Invalid entries of `grad_p` are ignored.
pub fn correlate_backward(
    phi0: &FeatureMap,
    phi1: &FeatureMap,
    p: &CostVolume,
    grad_p: &CostVolume,
    sign: Sign,
) -> Result<(FeatureMap, FeatureMap)> {
    check_pair(phi0, phi1)?;
    if !p.same_shape(grad_p) || p.height != phi0.height || p.width != phi0.width {
        return Err(dim_err("probability volume and gradient shapes disagree"));
    }
    let (h, w, l) = (p.height, p.width, p.labels);

    // gradient with respect to the scores
    let mut gs = vec![0.0; h * w * l];
    for i in 0..h * w {
        let pv = p.pixel(i);
        let gv = grad_p.pixel(i);
        let ok = p.pixel_valid(i);
        let dot: f64 = (0..l).filter(|k| ok[*k]).map(|k| pv[k] * gv[k]).sum();
        for k in 0..l {
            if ok[k] {
                gs[i * l + k] = pv[k] * (gv[k] - dot);
            }
        }
    }

    let mut g0 = FeatureMap::zeros(h, w, phi0.channels);
    let mut g1 = FeatureMap::zeros(h, w, phi1.channels);
    for f in 0..phi0.channels {
        let a = phi0.plane(f);
        let b = phi1.plane(f);
        let mut ga = vec![0.0; h * w];
        let mut gb = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                for k in 0..l {
                    if let Some(t) = match_column(c, k, w, sign) {
                        let g = gs[i * l + k];
                        ga[i] += g * b[r * w + t];
                        gb[r * w + t] += g * a[i];
                    }
                }
            }
        }
        g0.plane_mut(f).copy_from_slice(&ga);
        g1.plane_mut(f).copy_from_slice(&gb);
    }
    Ok((g0, g1))
}

/// Per-pixel maximizer over valid labels; ties go to the smallest label.
pub fn argmax_decision(p: &CostVolume) -> Labeling {
    let l = p.labels;
    let labels = (0..p.pixels())
        .map(|i| {
            let vals = p.pixel(i);
            let ok = p.pixel_valid(i);
            let mut best: Option<usize> = None;
            for k in 0..l {
                if ok[k] && best.is_none_or(|b| vals[k] > vals[b]) {
                    best = Some(k);
                }
            }
            best.unwrap_or(0)
        })
        .collect();
    Labeling {
        height: p.height,
        width: p.width,
        labels,
    }
}

/// CRF unary costs `f_i(k) = -p_i(k)`; invalid labels get
/// [`INVALID_LABEL_COST`].
pub fn unary_costs(p: &CostVolume) -> CostVolume {
    let mut f = p.clone();
    for (v, ok) in f.values.iter_mut().zip(&p.valid) {
        *v = if *ok { -*v } else { INVALID_LABEL_COST };
    }
    f
}
