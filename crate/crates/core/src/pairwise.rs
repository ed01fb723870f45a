//! Edge weights for the 4-connected grid and the truncated label penalty.

use crate::conv::{Activation, ConvNet, LayerGrad, NetCache};
use crate::error::{dim_err, Result};
use crate::stereo_io::{FeatureMap, Image};

/// Non-negative weights for the edge from each pixel to its right neighbour
/// (`horizontal`) and to its bottom neighbour (`vertical`). Entries in the
/// last column / last row have no edge and stay 0.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeWeights {
    pub height: usize,
    pub width: usize,
    pub horizontal: Vec<f64>,
    pub vertical: Vec<f64>,
}

impl EdgeWeights {
    pub fn zeros(height: usize, width: usize) -> Self {
        EdgeWeights {
            height,
            width,
            horizontal: vec![0.0; height * width],
            vertical: vec![0.0; height * width],
        }
    }

    /// Every existing edge gets weight `w`.
    pub fn constant(height: usize, width: usize, w: f64) -> Self {
        let mut e = Self::zeros(height, width);
        for r in 0..height {
            for c in 0..width {
                if c + 1 < width {
                    e.horizontal[r * width + c] = w;
                }
                if r + 1 < height {
                    e.vertical[r * width + c] = w;
                }
            }
        }
        e
    }

    fn clear_boundary(&mut self) {
        let (h, w) = (self.height, self.width);
        for r in 0..h {
            self.horizontal[r * w + w - 1] = 0.0;
        }
        self.vertical[(h - 1) * w..].fill(0.0);
    }
}

/// Penalty for label differences of one (`p1`) and larger (`p2`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PenaltyParams {
    pub p1: f64,
    pub p2: f64,
}

impl PenaltyParams {
    pub fn new(p1: f64, p2: f64) -> Self {
        let mut p = PenaltyParams { p1, p2 };
        p.project();
        p
    }

    /// Restores `0 <= p1 <= p2`.
    pub fn project(&mut self) {
        self.p1 = self.p1.max(0.0);
        self.p2 = self.p2.max(self.p1);
    }
}

/// Truncated penalty: 0, `p1` for a one-label step, `p2` beyond.
#[inline]
pub fn rho(delta: usize, p: &PenaltyParams) -> f64 {
    match delta {
        0 => 0.0,
        1 => p.p1,
        _ => p.p2,
    }
}

/// Contrast-sensitive weights `exp(-alpha * |I_i - I_j|^beta)`, where the
/// difference is the mean absolute difference over channels.
pub fn contrast_weights(img: &Image, alpha: f64, beta: f64) -> EdgeWeights {
    let (h, w) = (img.height, img.width);
    let nch = img.channels as f64;
    let diff = |a: usize, b: usize| -> f64 {
        (0..img.channels)
            .map(|ch| (img.plane(ch)[a] - img.plane(ch)[b]).abs())
            .sum::<f64>()
            / nch
    };
    let weight = |d: f64| (-alpha * d.powf(beta)).exp();
    let mut e = EdgeWeights::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if c + 1 < w {
                e.horizontal[i] = weight(diff(i, i + 1));
            }
            if r + 1 < h {
                e.vertical[i] = weight(diff(i, i + w));
            }
        }
    }
    e
}

fn check_pairwise_geometry(net: &ConvNet) -> Result<()> {
    let ok = net.layers.len() == 3
        && net.layers[0].activation == Activation::Tanh
        && net.layers[1].activation == Activation::Tanh
        && net.layers[2].activation == Activation::Abs
        && net.layers[2].out_channels == 2
        && net.layers[1].in_channels == net.layers[0].out_channels
        && net.layers[2].in_channels == net.layers[1].out_channels;
    if ok {
        Ok(())
    } else {
        Err(dim_err(
            "pairwise network must be tanh, tanh, abs with 2 output channels",
        ))
    }
}

fn weights_from_output(out: &FeatureMap) -> EdgeWeights {
    let mut e = EdgeWeights {
        height: out.height,
        width: out.width,
        horizontal: out.plane(0).to_vec(),
        vertical: out.plane(1).to_vec(),
    };
    e.clear_boundary();
    e
}

/// Edge weights predicted by the pairwise network: channel 0 feeds the
/// horizontal edges, channel 1 the vertical ones.
pub fn pairwise_cnn_forward(img: &Image, net: &ConvNet) -> Result<EdgeWeights> {
    check_pairwise_geometry(net)?;
    Ok(weights_from_output(&net.forward(img)?))
}

/// Forward pass that keeps the activations for [`pairwise_cnn_backward`].
pub fn pairwise_cnn_forward_cached(img: &Image, net: &ConvNet) -> Result<(EdgeWeights, NetCache)> {
    check_pairwise_geometry(net)?;
    let cache = net.forward_cached(img)?;
    Ok((weights_from_output(cache.output()), cache))
}

/// Parameter and input gradients for a gradient on the edge weights.
/// Boundary entries have no edge and contribute nothing.
pub fn pairwise_cnn_backward(
    net: &ConvNet,
    cache: &NetCache,
    grad: &EdgeWeights,
) -> Result<(Vec<LayerGrad>, FeatureMap)> {
    let out = cache.output();
    if grad.height != out.height || grad.width != out.width {
        return Err(dim_err("edge-weight gradient shape differs from network output"));
    }
    let mut g = grad.clone();
    g.clear_boundary();
    let mut data = g.horizontal;
    data.extend_from_slice(&g.vertical);
    let grad_out = FeatureMap::from_vec(out.height, out.width, 2, data)?;
    net.backward(cache, &grad_out)
}
