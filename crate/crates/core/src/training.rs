//! Learning: pixel-wise cross-entropy for the feature network and
//! structured-SVM training of the full model through a fixed number of
//! dual iterations.
//!
//! Joint training minimizes the hinge bound `f(x*) - D(lambda)` of the
//! loss-augmented problem. Its unary subgradient is approximated by the
//! one-hot difference `delta(x*) - delta(xbar1)`, where `xbar1` is the row
//! chain decoding after the fixed iterations; the edge-weight and penalty
//! subgradients use the same `xbar1`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conv::{ConvNet, LayerGrad, NetCache};
use crate::correlation::{argmax_decision, correlate, correlate_backward, unary_costs, Sign};
use crate::crf::{decode, decode_columns, dual_bound, energy, run_inference, CrfProblem, DualState};
use crate::error::{dim_err, Error, Result};
use crate::eval::badx;
use crate::pairwise::{
    contrast_weights, pairwise_cnn_backward, pairwise_cnn_forward_cached, rho, EdgeWeights, PenaltyParams,
};
use crate::stereo_io::{append_coordinate_features, normalize_image, GroundTruth, Image, StereoSample};
use crate::volume::{CostVolume, Labeling};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Margin scale.
    pub gamma: f64,
    /// Per-pixel loss truncation.
    pub tau: f64,
    pub lr_unary: f64,
    pub lr_joint: f64,
    pub momentum: f64,
    pub crf_iterations: usize,
    pub epochs: usize,
    pub seed: u64,
    pub unary_layers: usize,
    pub filters: usize,
    pub pairwise_filters: usize,
    /// Tune alpha, beta, P1, P2 by grid search before joint training.
    pub grid_search: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 1.0,
            tau: 3.0,
            lr_unary: 1e-2,
            lr_joint: 1e-6,
            momentum: 0.9,
            crf_iterations: 5,
            epochs: 10,
            seed: 0,
            unary_layers: 3,
            filters: 100,
            pairwise_filters: 64,
            grid_search: true,
        }
    }
}

impl TrainConfig {
    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    /// Unset keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "gamma" => self.gamma = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "lr_unary" => self.lr_unary = num(key, value)?,
            "lr_joint" => self.lr_joint = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "crf_iterations" => self.crf_iterations = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "unary_layers" => self.unary_layers = num(key, value)?,
            "filters" => self.filters = num(key, value)?,
            "pairwise_filters" => self.pairwise_filters = num(key, value)?,
            "grid_search" => self.grid_search = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "gamma={}\ntau={}\nlr_unary={}\nlr_joint={}\nmomentum={}\ncrf_iterations={}\nepochs={}\nseed={}\n\
             unary_layers={}\nfilters={}\npairwise_filters={}\ngrid_search={}\n",
            self.gamma,
            self.tau,
            self.lr_unary,
            self.lr_joint,
            self.momentum,
            self.crf_iterations,
            self.epochs,
            self.seed,
            self.unary_layers,
            self.filters,
            self.pairwise_filters,
            self.grid_search
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.gamma > 0.0) || !(self.tau > 0.0) {
            return bad("gamma and tau must be positive");
        }
        if !(self.lr_unary > 0.0) || !(self.lr_joint > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.crf_iterations == 0 {
            return bad("crf_iterations must be at least 1");
        }
        if self.unary_layers == 0 || self.filters == 0 || self.pairwise_filters == 0 {
            return bad("network sizes must be positive");
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PairwiseMode {
    /// No CRF: per-pixel argmax.
    Off,
    Contrast {
        alpha: f64,
        beta: f64,
    },
    Learned,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub unary: ConvNet,
    pub pairwise: Option<ConvNet>,
    pub penalty: PenaltyParams,
    pub mode: PairwiseMode,
    pub coord_features: bool,
    pub sign: Sign,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Clone, Debug)]
pub struct ModelForward {
    pub cache_left: NetCache,
    pub cache_right: NetCache,
    pub probabilities: CostVolume,
    pub weights: EdgeWeights,
    pub pairwise_cache: Option<NetCache>,
}

impl ModelForward {
    pub fn features_left(&self) -> &Image {
        self.cache_left.output()
    }

    pub fn features_right(&self) -> &Image {
        self.cache_right.output()
    }
}

impl ModelParams {
    pub fn new_unary(in_channels: usize, cfg: &TrainConfig, coord_features: bool, sign: Sign) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let channels = in_channels + if coord_features { 2 } else { 0 };
        ModelParams {
            unary: ConvNet::unary(channels, cfg.unary_layers, cfg.filters, &mut rng),
            pairwise: None,
            penalty: PenaltyParams::new(0.0, 0.0),
            mode: PairwiseMode::Off,
            coord_features,
            sign,
        }
    }

    /// Network input: normalized image, optionally with coordinate channels.
    pub fn prepare(&self, img: &Image) -> Image {
        let n = normalize_image(img);
        if self.coord_features {
            append_coordinate_features(&n)
        } else {
            n
        }
    }

    pub fn forward(&self, sample: &StereoSample) -> Result<ModelForward> {
        let left = self.prepare(&sample.left);
        let right = self.prepare(&sample.right);
        let cache_left = self.unary.forward_cached(&left)?;
        let cache_right = self.unary.forward_cached(&right)?;
        let probabilities = correlate(cache_left.output(), cache_right.output(), sample.label_count, self.sign)?;
        let (weights, pairwise_cache) = match self.mode {
            PairwiseMode::Off => (EdgeWeights::zeros(left.height, left.width), None),
            PairwiseMode::Contrast { alpha, beta } => (contrast_weights(&left, alpha, beta), None),
            PairwiseMode::Learned => {
                let net = self
                    .pairwise
                    .as_ref()
                    .ok_or_else(|| Error::Config("learned pairwise mode without a pairwise network".into()))?;
                let (w, cache) = pairwise_cnn_forward_cached(&left, net)?;
                (w, Some(cache))
            }
        };
        Ok(ModelForward {
            cache_left,
            cache_right,
            probabilities,
            weights,
            pairwise_cache,
        })
    }

    pub fn problem(&self, fwd: &ModelForward) -> Result<CrfProblem> {
        CrfProblem::new(unary_costs(&fwd.probabilities), fwd.weights.clone(), self.penalty)
    }

    /// Discrete prediction: CRF inference when a pairwise model is active,
    /// per-pixel argmax otherwise.
    pub fn predict(&self, sample: &StereoSample, crf_iterations: usize) -> Result<Prediction> {
        let fwd = self.forward(sample)?;
        if self.mode == PairwiseMode::Off {
            return Ok(Prediction {
                labeling: argmax_decision(&fwd.probabilities),
                problem: None,
                dual: None,
                probabilities: fwd.probabilities,
            });
        }
        let prob = self.problem(&fwd)?;
        let inf = run_inference(&prob, crf_iterations)?;
        Ok(Prediction {
            labeling: inf.labeling,
            problem: Some(prob),
            dual: Some(inf.dual),
            probabilities: fwd.probabilities,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub labeling: Labeling,
    pub probabilities: CostVolume,
    pub problem: Option<CrfProblem>,
    pub dual: Option<DualState>,
}

// ---------------------------------------------------------------------------
// Targets and losses
// ---------------------------------------------------------------------------

/// Ground truth rounded to labels. Masked pixels (invalid ground truth,
/// rounded label out of range or not matchable) carry label 0 and are never
/// read.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub labeling: Labeling,
    pub mask: Vec<bool>,
}

impl Target {
    pub fn from_ground_truth(gt: &GroundTruth, labels: usize, volume: Option<&CostVolume>) -> Self {
        let mut out = Vec::with_capacity(gt.disparity.len());
        let mut mask = Vec::with_capacity(gt.disparity.len());
        for (i, (d, ok)) in gt.disparity.iter().zip(&gt.valid).enumerate() {
            let k = d.round();
            let usable =
                *ok && k >= 0.0 && (k as usize) < labels && volume.is_none_or(|v| v.valid[i * v.labels + k as usize]);
            out.push(if usable { k as usize } else { 0 });
            mask.push(usable);
        }
        Target {
            labeling: Labeling {
                height: gt.height,
                width: gt.width,
                labels: out,
            },
            mask,
        }
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Target labels with masked pixels filled from `fill`.
    pub fn completed_with(&self, fill: &Labeling) -> Labeling {
        let labels = self
            .labeling
            .labels
            .iter()
            .zip(&self.mask)
            .zip(&fill.labels)
            .map(|((t, m), f)| if *m { *t } else { *f })
            .collect();
        Labeling {
            height: self.labeling.height,
            width: self.labeling.width,
            labels,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CrossEntropy {
    pub loss: f64,
    pub grad: CostVolume,
    /// Pixels whose target probability fell below the floor.
    pub clamped: usize,
}

const PROBABILITY_FLOOR: f64 = 1e-12;

/// Mean negative log-likelihood of the target labels over unmasked pixels.
pub fn cross_entropy(p: &CostVolume, target: &Target) -> Result<CrossEntropy> {
    if p.height != target.labeling.height || p.width != target.labeling.width {
        return Err(dim_err("probability volume and target differ in shape"));
    }
    let mut grad = CostVolume::zeros(p.height, p.width, p.labels);
    grad.valid = p.valid.clone();
    let n = target.valid_count();
    let mut loss = 0.0;
    let mut clamped = 0;
    if n == 0 {
        return Ok(CrossEntropy { loss, grad, clamped });
    }
    let inv_n = 1.0 / n as f64;
    for (i, (t, m)) in target.labeling.labels.iter().zip(&target.mask).enumerate() {
        if !m {
            continue;
        }
        let mut pt = p.at(i, *t);
        if pt < PROBABILITY_FLOOR {
            pt = PROBABILITY_FLOOR;
            clamped += 1;
        }
        loss -= pt.ln() * inv_n;
        grad.values[i * p.labels + t] = -inv_n / pt;
    }
    Ok(CrossEntropy { loss, grad, clamped })
}

/// `sum_i min(|x_i - x*_i|, tau)` over unmasked pixels.
pub fn truncated_loss(x: &Labeling, target: &Target, tau: f64) -> f64 {
    x.labels
        .iter()
        .zip(&target.labeling.labels)
        .zip(&target.mask)
        .filter(|(_, m)| **m)
        .map(|((a, b), _)| (a.abs_diff(*b) as f64).min(tau))
        .sum()
}

/// Loss-augmented problem: unaries become `f_i(k) - gamma * min(|k - x*_i|, tau)`
/// at unmasked pixels; everything else is unchanged.
pub fn loss_augment(prob: &CrfProblem, target: &Target, gamma: f64, tau: f64) -> CrfProblem {
    let mut out = prob.clone();
    let l = prob.labels();
    for (i, (t, m)) in target.labeling.labels.iter().zip(&target.mask).enumerate() {
        if !m {
            continue;
        }
        for (k, v) in out.unary.values[i * l..(i + 1) * l].iter_mut().enumerate() {
            *v -= gamma * (k.abs_diff(*t) as f64).min(tau);
        }
    }
    out
}

/// `g_i(k) = [x*_i = k] - [xbar1_i = k]` at unmasked pixels, zero elsewhere.
pub fn ssvm_unary_subgradient(target: &Target, xbar1: &Labeling, labels: usize) -> CostVolume {
    let (h, w) = (xbar1.height, xbar1.width);
    let mut g = CostVolume::zeros(h, w, labels);
    for (i, m) in target.mask.iter().enumerate() {
        if *m {
            g.values[i * labels + target.labeling.labels[i]] += 1.0;
            g.values[i * labels + xbar1.labels[i]] -= 1.0;
        }
    }
    g
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseSubgradient {
    pub weights: EdgeWeights,
    pub p1: f64,
    pub p2: f64,
}

/// Per-edge `rho(d*) - rho(dbar)` plus the penalty subgradients, skipping
/// edges that touch a masked pixel.
pub fn ssvm_pairwise_subgradient(
    target: &Target,
    xbar1: &Labeling,
    weights: &EdgeWeights,
    penalty: &PenaltyParams,
) -> PairwiseSubgradient {
    let (h, w) = (weights.height, weights.width);
    let mut g = PairwiseSubgradient {
        weights: EdgeWeights::zeros(h, w),
        p1: 0.0,
        p2: 0.0,
    };
    let xs = &target.labeling.labels;
    let xb = &xbar1.labels;
    let mut edge = |i: usize, j: usize, wij: f64, slot: &mut f64| {
        if !(target.mask[i] && target.mask[j]) {
            return;
        }
        let ds = xs[i].abs_diff(xs[j]);
        let db = xb[i].abs_diff(xb[j]);
        *slot = rho(ds, penalty) - rho(db, penalty);
        let one = |d: usize| if d == 1 { 1.0 } else { 0.0 };
        let big = |d: usize| if d > 1 { 1.0 } else { 0.0 };
        g.p1 += wij * (one(ds) - one(db));
        g.p2 += wij * (big(ds) - big(db));
    };
    let mut gh = vec![0.0; h * w];
    let mut gv = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if c + 1 < w {
                edge(i, i + 1, weights.horizontal[i], &mut gh[i]);
            }
            if r + 1 < h {
                edge(i, i + w, weights.vertical[i], &mut gv[i]);
            }
        }
    }
    g.weights.horizontal = gh;
    g.weights.vertical = gv;
    g
}

/// `f(x*) - D(lambda)` of the loss-augmented problem, with `x*` completed at
/// masked pixels by the row-chain decoding of the augmented problem.
pub fn hinge_upper_bound(prob: &CrfProblem, target: &Target, lam: &DualState, gamma: f64, tau: f64) -> Result<f64> {
    let aug = loss_augment(prob, target, gamma, tau);
    let xbar1 = decode(&aug, lam)?;
    let xstar = target.completed_with(&xbar1);
    Ok(energy(prob, &xstar) - dual_bound(&aug, lam)?)
}

// ---------------------------------------------------------------------------
// Gradients and updates
// ---------------------------------------------------------------------------

/// Gradients with the same layout as [`ModelParams`]. Frozen parts are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub unary: Vec<LayerGrad>,
    pub pairwise: Option<Vec<LayerGrad>>,
    pub p1: f64,
    pub p2: f64,
}

impl ModelGrads {
    pub fn zeros_like(model: &ModelParams) -> Self {
        ModelGrads {
            unary: model.unary.layers.iter().map(LayerGrad::zeros_like).collect(),
            pairwise: model
                .pairwise
                .as_ref()
                .map(|n| n.layers.iter().map(LayerGrad::zeros_like).collect()),
            p1: 0.0,
            p2: 0.0,
        }
    }

    pub fn flatten(&self, model: &ModelParams) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.unary {
            out.extend_from_slice(&g.kernel);
            out.extend_from_slice(&g.bias);
        }
        if let Some(net) = &model.pairwise {
            match &self.pairwise {
                Some(gs) => gs.iter().for_each(|g| {
                    out.extend_from_slice(&g.kernel);
                    out.extend_from_slice(&g.bias);
                }),
                None => out.extend(std::iter::repeat_n(0.0, net.param_count())),
            }
        }
        out.push(self.p1);
        out.push(self.p2);
        out
    }
}

impl ModelParams {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let nets = std::iter::once(&self.unary).chain(self.pairwise.as_ref());
        for net in nets {
            for l in &net.layers {
                out.extend_from_slice(&l.kernel);
                out.extend_from_slice(&l.bias);
            }
        }
        out.push(self.penalty.p1);
        out.push(self.penalty.p2);
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        let mut it = flat.iter().copied();
        let nets = std::iter::once(&mut self.unary).chain(self.pairwise.as_mut());
        for net in nets {
            for l in &mut net.layers {
                for v in l.kernel.iter_mut().chain(l.bias.iter_mut()) {
                    *v = it.next().ok_or_else(|| dim_err("parameter vector too short"))?;
                }
            }
        }
        self.penalty.p1 = it.next().ok_or_else(|| dim_err("parameter vector too short"))?;
        self.penalty.p2 = it.next().ok_or_else(|| dim_err("parameter vector too short"))?;
        if it.next().is_some() {
            return Err(dim_err("parameter vector too long"));
        }
        Ok(())
    }
}

/// One momentum step on a flat parameter vector:
/// `v <- momentum * v - lr * g; p <- p + v`.
pub fn sgd_momentum(params: &mut [f64], grads: &[f64], lr: f64, momentum: f64, velocity: &mut [f64]) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(dim_err("parameter, gradient and velocity lengths differ"));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Training(format!(
            "non-finite gradient at parameter {i}: {}",
            grads[i]
        )));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v - lr * g;
        *p += *v;
    }
    Ok(())
}

/// Momentum buffer for a whole model.
#[derive(Clone, Debug, Default)]
pub struct Optimizer {
    velocity: Vec<f64>,
}

impl Optimizer {
    pub fn step(&mut self, model: &mut ModelParams, grads: &ModelGrads, lr: f64, momentum: f64) -> Result<()> {
        let mut flat = model.flatten();
        let g = grads.flatten(model);
        if self.velocity.len() != flat.len() {
            self.velocity = vec![0.0; flat.len()];
        }
        sgd_momentum(&mut flat, &g, lr, momentum, &mut self.velocity)?;
        model.unflatten(&flat)?;
        model.penalty.project();
        Ok(())
    }
}

/// Backpropagates a gradient on the probability volume through the
/// correlation and both branches of the feature network.
fn unary_backward(model: &ModelParams, fwd: &ModelForward, grad_p: &CostVolume) -> Result<Vec<LayerGrad>> {
    let (g0, g1) = correlate_backward(
        fwd.features_left(),
        fwd.features_right(),
        &fwd.probabilities,
        grad_p,
        model.sign,
    )?;
    let (mut grads, _) = model.unary.backward(&fwd.cache_left, &g0)?;
    let (grads_right, _) = model.unary.backward(&fwd.cache_right, &g1)?;
    for (a, b) in grads.iter_mut().zip(grads_right) {
        a.kernel.iter_mut().zip(b.kernel).for_each(|(x, y)| *x += y);
        a.bias.iter_mut().zip(b.bias).for_each(|(x, y)| *x += y);
    }
    Ok(grads)
}

/// Which parameters joint training updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JointStage {
    /// Feature network, P1 and P2 with fixed contrast weights.
    Contrast,
    /// Everything, including the pairwise network.
    Learned,
}

/// Gradient of the hinge bound with `xbar1` held fixed, i.e. of
/// `sum_i [f_i(x*_i) - f_i(xbar1_i)] + sum_ij [f_ij(x*) - f_ij(xbar1)]`
/// over unmasked pixels and edges between unmasked pixels.
pub fn ssvm_gradients(
    model: &ModelParams,
    fwd: &ModelForward,
    target: &Target,
    xbar1: &Labeling,
) -> Result<ModelGrads> {
    let labels = fwd.probabilities.labels;
    // f = -p, so dH/dp = -g
    let mut grad_p = ssvm_unary_subgradient(target, xbar1, labels);
    grad_p.values.iter_mut().for_each(|v| *v = -*v);
    let unary = unary_backward(model, fwd, &grad_p)?;

    let pw = ssvm_pairwise_subgradient(target, xbar1, &fwd.weights, &model.penalty);
    let pairwise = match (&model.pairwise, &fwd.pairwise_cache, model.mode) {
        (Some(net), Some(cache), PairwiseMode::Learned) => Some(pairwise_cnn_backward(net, cache, &pw.weights)?.0),
        _ => None,
    };
    Ok(ModelGrads {
        unary,
        pairwise,
        p1: pw.p1,
        p2: pw.p2,
    })
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

fn target_for(sample: &StereoSample, p: &CostVolume) -> Result<Target> {
    let gt = sample
        .gt
        .as_ref()
        .ok_or_else(|| Error::Training("training sample without ground truth".into()))?;
    Ok(Target::from_ground_truth(gt, sample.label_count, Some(p)))
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(epoch as u64 + 1)));
    order.shuffle(&mut rng);
    order
}

/// Mean cross-entropy of the current model over a dataset.
pub fn dataset_cross_entropy(model: &ModelParams, samples: &[StereoSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let fwd = model.forward(s)?;
        total += cross_entropy(&fwd.probabilities, &target_for(s, &fwd.probabilities)?)?.loss;
    }
    Ok(total / samples.len().max(1) as f64)
}

#[derive(Clone, Debug, Default)]
pub struct UnaryReport {
    /// Mean training cross-entropy after each epoch.
    pub epoch_losses: Vec<f64>,
    pub clamped: usize,
}

/// Pixel-wise training of the feature network (no CRF interaction).
pub fn train_unary(
    samples: &[StereoSample],
    cfg: &TrainConfig,
    mut model: ModelParams,
    mut on_epoch: impl FnMut(usize, &ModelParams) -> Result<()>,
) -> Result<(ModelParams, UnaryReport)> {
    cfg.validate()?;
    let mut opt = Optimizer::default();
    let mut report = UnaryReport::default();
    let saved_mode = model.mode;
    model.mode = PairwiseMode::Off;
    for epoch in 0..cfg.epochs {
        for idx in epoch_order(samples.len(), cfg.seed, epoch) {
            let s = &samples[idx];
            let fwd = model.forward(s)?;
            let target = target_for(s, &fwd.probabilities)?;
            let ce = cross_entropy(&fwd.probabilities, &target)?;
            if !ce.loss.is_finite() {
                return Err(Error::Training(format!("cross-entropy diverged on sample {idx}")));
            }
            report.clamped += ce.clamped;
            let grads = ModelGrads {
                unary: unary_backward(&model, &fwd, &ce.grad)?,
                ..ModelGrads::zeros_like(&model)
            };
            opt.step(&mut model, &grads, cfg.lr_unary, cfg.momentum)?;
        }
        report.epoch_losses.push(dataset_cross_entropy(&model, samples)?);
        on_epoch(epoch, &model)?;
    }
    model.mode = saved_mode;
    Ok((model, report))
}

/// One row of the joint-training log.
#[derive(Clone, Debug, PartialEq)]
pub struct JointLogEntry {
    pub epoch: usize,
    pub sample: usize,
    pub hinge_bound: f64,
    pub truncated_loss: f64,
    /// Fraction of unmasked pixels where row and column decodings disagree.
    pub disagreement: f64,
    pub p1: f64,
    pub p2: f64,
}

#[derive(Clone, Debug, Default)]
pub struct JointLog {
    pub entries: Vec<JointLogEntry>,
}

impl JointLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,sample,hinge_bound,truncated_loss,disagreement,p1,p2\n");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                e.epoch, e.sample, e.hinge_bound, e.truncated_loss, e.disagreement, e.p1, e.p2
            );
        }
        s
    }
}

/// Result of a single structured-SVM step on one sample.
#[derive(Clone, Debug)]
pub struct SsvmStep {
    pub grads: ModelGrads,
    pub hinge_bound: f64,
    pub truncated_loss: f64,
    pub disagreement: f64,
    pub xbar1: Labeling,
}

/// Loss-augmented inference on one sample followed by the approximate
/// subgradient of the hinge bound.
pub fn ssvm_step(model: &ModelParams, sample: &StereoSample, cfg: &TrainConfig) -> Result<SsvmStep> {
    let fwd = model.forward(sample)?;
    let target = target_for(sample, &fwd.probabilities)?;
    let prob = model.problem(&fwd)?;
    let aug = loss_augment(&prob, &target, cfg.gamma, cfg.tau);
    let inf = run_inference(&aug, cfg.crf_iterations)?;
    let xbar1 = inf.labeling;
    let xbar2 = decode_columns(&aug, &inf.dual)?;
    let valid = target.valid_count().max(1) as f64;
    let disagreement = xbar1
        .labels
        .iter()
        .zip(&xbar2.labels)
        .zip(&target.mask)
        .filter(|((a, b), m)| **m && a != b)
        .count() as f64
        / valid;
    let xstar = target.completed_with(&xbar1);
    let hinge_bound = energy(&prob, &xstar) - dual_bound(&aug, &inf.dual)?;
    let truncated = truncated_loss(&xbar1, &target, cfg.tau);
    let grads = ssvm_gradients(model, &fwd, &target, &xbar1)?;
    Ok(SsvmStep {
        grads,
        hinge_bound,
        truncated_loss: truncated,
        disagreement,
        xbar1,
    })
}

/// Structured-SVM training of the full model.
pub fn train_joint(
    samples: &[StereoSample],
    cfg: &TrainConfig,
    mut model: ModelParams,
    stage: JointStage,
    mut on_epoch: impl FnMut(usize, &ModelParams) -> Result<()>,
) -> Result<(ModelParams, JointLog)> {
    cfg.validate()?;
    match (stage, model.mode) {
        (JointStage::Contrast, PairwiseMode::Contrast { .. }) => {}
        (JointStage::Learned, PairwiseMode::Learned) if model.pairwise.is_some() => {}
        _ => {
            return Err(Error::Config(
                "model pairwise mode does not match the training stage".into(),
            ))
        }
    }
    let mut opt = Optimizer::default();
    let mut log = JointLog::default();
    for epoch in 0..cfg.epochs {
        for idx in epoch_order(samples.len(), cfg.seed, epoch) {
            let step = ssvm_step(&model, &samples[idx], cfg)?;
            if !step.hinge_bound.is_finite() {
                return Err(Error::Training(format!("hinge bound diverged on sample {idx}")));
            }
            opt.step(&mut model, &step.grads, cfg.lr_joint, cfg.momentum)?;
            log.entries.push(JointLogEntry {
                epoch,
                sample: idx,
                hinge_bound: step.hinge_bound,
                truncated_loss: step.truncated_loss,
                disagreement: step.disagreement,
                p1: model.penalty.p1,
                p2: model.penalty.p2,
            });
        }
        on_epoch(epoch, &model)?;
    }
    Ok((model, log))
}

// ---------------------------------------------------------------------------
// Hyper-parameter grid search
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct CrfGrid {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub p1: Vec<f64>,
    /// P2 candidates as multiples of P1 (values below 1 are skipped).
    pub p2_ratio: Vec<f64>,
}

impl Default for CrfGrid {
    fn default() -> Self {
        CrfGrid {
            alpha: vec![0.0, 1.0, 3.0],
            beta: vec![1.0, 2.0],
            p1: vec![0.02, 0.05, 0.1, 0.2, 0.4],
            p2_ratio: vec![1.0, 2.0, 4.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub alpha: f64,
    pub beta: f64,
    pub penalty: PenaltyParams,
    /// Mean bad1 (percent) of the winner.
    pub bad1: f64,
}

/// Picks contrast parameters and penalties minimizing mean bad1 of the CRF
/// decoding over `samples`. The feature network is evaluated once per sample.
pub fn grid_search_crf(
    model: &ModelParams,
    samples: &[StereoSample],
    grid: &CrfGrid,
    crf_iterations: usize,
) -> Result<GridResult> {
    let mut cached = Vec::with_capacity(samples.len());
    for s in samples {
        let fwd = model.forward(s)?;
        let gt =
            s.gt.clone()
                .ok_or_else(|| Error::Training("grid search needs ground truth".into()))?;
        cached.push((unary_costs(&fwd.probabilities), model.prepare(&s.left), gt));
    }
    let mut weights_cache: BTreeMap<(u64, u64), Vec<EdgeWeights>> = BTreeMap::new();
    let mut best: Option<GridResult> = None;
    for &alpha in &grid.alpha {
        for &beta in &grid.beta {
            let ws = weights_cache
                .entry((alpha.to_bits(), beta.to_bits()))
                .or_insert_with(|| {
                    cached
                        .iter()
                        .map(|(_, img, _)| contrast_weights(img, alpha, beta))
                        .collect()
                });
            for &p1 in &grid.p1 {
                for &ratio in grid.p2_ratio.iter().filter(|r| **r >= 1.0) {
                    let penalty = PenaltyParams::new(p1, p1 * ratio);
                    let mut total = 0.0;
                    for ((unary, _, gt), w) in cached.iter().zip(ws.iter()) {
                        let prob = CrfProblem::new(unary.clone(), w.clone(), penalty)?;
                        let x = run_inference(&prob, crf_iterations)?.labeling;
                        total += badx(&x.to_disparity(), gt, 1.0)?;
                    }
                    let bad1 = total / cached.len().max(1) as f64;
                    if best.as_ref().is_none_or(|b| bad1 < b.bad1) {
                        best = Some(GridResult {
                            alpha,
                            beta,
                            penalty,
                            bad1,
                        });
                    }
                }
            }
        }
    }
    best.ok_or_else(|| Error::Config("empty grid".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn target(h: usize, w: usize, labels: Vec<usize>, mask: Vec<bool>) -> Target {
        Target {
            labeling: Labeling::new(h, w, labels).unwrap(),
            mask,
        }
    }

    #[test]
    fn cross_entropy_perfect_and_uniform() {
        let p = CostVolume::from_values(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let t = target(1, 2, vec![0, 1], vec![true, true]);
        assert_eq!(cross_entropy(&p, &t).unwrap().loss, 0.0);

        let p = CostVolume::from_values(1, 1, 4, vec![0.25; 4]).unwrap();
        let t = target(1, 1, vec![2], vec![true]);
        let ce = cross_entropy(&p, &t).unwrap();
        assert!((ce.loss - 4f64.ln()).abs() < 1e-15);
        assert!((ce.loss - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_fully_masked() {
        let p = CostVolume::from_values(1, 2, 2, vec![0.5; 4]).unwrap();
        let t = target(1, 2, vec![0, 0], vec![false, false]);
        let ce = cross_entropy(&p, &t).unwrap();
        assert_eq!(ce.loss, 0.0);
        assert!(ce.grad.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let p = CostVolume::from_values(1, 1, 2, vec![1.0, 0.0]).unwrap();
        let t = target(1, 1, vec![1], vec![true]);
        let ce = cross_entropy(&p, &t).unwrap();
        assert_eq!(ce.clamped, 1);
        assert!((ce.loss + PROBABILITY_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn truncated_loss_cases() {
        let t = target(1, 2, vec![2, 4], vec![true, true]);
        assert_eq!(truncated_loss(&Labeling::new(1, 2, vec![2, 4]).unwrap(), &t, 3.0), 0.0);
        assert_eq!(truncated_loss(&Labeling::new(1, 2, vec![7, 4]).unwrap(), &t, 3.0), 3.0);
        let t = target(1, 2, vec![0, 10], vec![true, true]);
        assert_eq!(truncated_loss(&Labeling::new(1, 2, vec![1, 1]).unwrap(), &t, 3.0), 4.0);
    }

    #[test]
    fn unary_subgradient_one_hot_difference() {
        let t = target(1, 1, vec![1], vec![true]);
        let g = ssvm_unary_subgradient(&t, &Labeling::new(1, 1, vec![2]).unwrap(), 3);
        assert_eq!(g.values, vec![0.0, 1.0, -1.0]);
        let g = ssvm_unary_subgradient(&t, &Labeling::new(1, 1, vec![1]).unwrap(), 3);
        assert!(g.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pairwise_subgradient_single_edge() {
        let pen = PenaltyParams::new(0.3, 1.1);
        let w = EdgeWeights::constant(1, 2, 0.7);
        let t = target(1, 2, vec![2, 2], vec![true, true]);
        let g = ssvm_pairwise_subgradient(&t, &Labeling::new(1, 2, vec![2, 3]).unwrap(), &w, &pen);
        assert_eq!(g.weights.horizontal[0], -0.3);
        assert_eq!((g.p1, g.p2), (-0.7, 0.0));

        let t = target(1, 2, vec![0, 2], vec![true, true]);
        let g = ssvm_pairwise_subgradient(&t, &Labeling::new(1, 2, vec![1, 1]).unwrap(), &w, &pen);
        assert_eq!(g.weights.horizontal[0], 1.1);
        assert_eq!((g.p1, g.p2), (0.0, 0.7));
    }

    #[test]
    fn pairwise_subgradient_skips_masked_edges() {
        let pen = PenaltyParams::new(0.3, 1.1);
        let w = EdgeWeights::constant(1, 2, 0.7);
        let t = target(1, 2, vec![0, 2], vec![true, false]);
        let g = ssvm_pairwise_subgradient(&t, &Labeling::new(1, 2, vec![1, 1]).unwrap(), &w, &pen);
        assert_eq!(g.weights.horizontal[0], 0.0);
        assert_eq!((g.p1, g.p2), (0.0, 0.0));
    }

    #[test]
    fn loss_augment_leaves_masked_pixels() {
        let unary = CostVolume::from_values(1, 2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let prob = CrfProblem::new(unary, EdgeWeights::zeros(1, 2), PenaltyParams::new(0.1, 0.2)).unwrap();
        let t = target(1, 2, vec![0, 1], vec![true, false]);
        let aug = loss_augment(&prob, &t, 2.0, 1.5);
        assert_eq!(&aug.unary.values[3..], &prob.unary.values[3..]);
        assert_eq!(aug.unary.values[0], 0.1);
        assert!((aug.unary.values[1] - (0.2 - 2.0)).abs() < 1e-15);
        assert!((aug.unary.values[2] - (0.3 - 3.0)).abs() < 1e-15);
        assert_eq!(loss_augment(&prob, &t, 0.0, 1.5), prob);
    }

    #[test]
    fn sgd_plain_and_momentum() {
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0; 2];
        sgd_momentum(&mut p, &[0.5, -1.0], 0.1, 0.0, &mut v).unwrap();
        assert_eq!(p, vec![1.0 - 0.05, -2.0 + 0.1]);

        // hand-unrolled: v1 = -lr g1, p1 = p0 + v1; v2 = m v1 - lr g2, p2 = p1 + v2
        let (lr, m, g1, g2, p0) = (0.1, 0.9, 2.0, -1.0, 3.0);
        let mut p = vec![p0];
        let mut v = vec![0.0];
        sgd_momentum(&mut p, &[g1], lr, m, &mut v).unwrap();
        sgd_momentum(&mut p, &[g2], lr, m, &mut v).unwrap();
        let v1 = -lr * g1;
        let v2 = m * v1 - lr * g2;
        assert!((p[0] - (p0 + v1 + v2)).abs() < 1e-15);

        let mut p = vec![0.0];
        let mut v = vec![1.0];
        for step in 1..=3 {
            sgd_momentum(&mut p, &[0.0], lr, 0.5, &mut v).unwrap();
            assert!((v[0] - 0.5f64.powi(step)).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_rejects_non_finite() {
        let mut p = vec![0.0];
        let mut v = vec![0.0];
        assert!(matches!(
            sgd_momentum(&mut p, &[f64::NAN], 0.1, 0.9, &mut v),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn config_roundtrip_and_errors() {
        let cfg = TrainConfig::parse("# c\ngamma=2.5\ntau = 4\nepochs=7\n").unwrap();
        assert_eq!((cfg.gamma, cfg.tau, cfg.epochs), (2.5, 4.0, 7));
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert!(TrainConfig::parse("nonsense=1").is_err());
        assert!(TrainConfig::parse("gamma=-1").is_err());
        assert!(TrainConfig::parse("gamma").is_err());
    }

    #[test]
    fn target_rounds_and_masks() {
        let gt = GroundTruth::from_disparity(1, 4, vec![1.4, 2.6, f64::INFINITY, 9.0]).unwrap();
        let t = Target::from_ground_truth(&gt, 4, None);
        assert_eq!(t.labeling.labels, vec![1, 3, 0, 0]);
        assert_eq!(t.mask, vec![true, true, false, false]);
    }
}
