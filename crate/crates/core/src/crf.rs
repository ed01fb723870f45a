//! MAP inference for the 4-connected CRF
//!
//! ```text
//! f(x) = sum_i f_i(x_i) + sum_ij w_ij * rho(|x_i - x_j|)
//! ```
//!
//! by dual decomposition into horizontal chains `f1` (all unaries, all
//! horizontal edges) and vertical chains `f2` (no unaries, all vertical
//! edges). For multipliers `lambda` the bound
//!
//! ```text
//! D(lambda) = min (f1 + lambda) + min (f2 - lambda)  <=  min f
//! ```
//!
//! is raised by averaging, at one pixel at a time, the min-marginals of the
//! row chain and the column chain through that pixel. Pixels are visited in
//! raster order and then in reverse raster order with chain messages kept
//! up to date, so every single update is an exact block-coordinate ascent
//! step and the bound never decreases.

use std::fmt::Write as _;

use crate::error::{dim_err, Error, Result};
use crate::pairwise::{rho, EdgeWeights, PenaltyParams};
use crate::volume::{argmin, CostVolume, Labeling};

#[derive(Clone, Debug, PartialEq)]
pub struct CrfProblem {
    pub unary: CostVolume,
    pub weights: EdgeWeights,
    pub penalty: PenaltyParams,
}

impl CrfProblem {
    pub fn new(unary: CostVolume, weights: EdgeWeights, penalty: PenaltyParams) -> Result<Self> {
        if unary.height != weights.height || unary.width != weights.width {
            return Err(dim_err("unary volume and edge weights differ in shape"));
        }
        if unary.labels == 0 || unary.height == 0 || unary.width == 0 {
            return Err(dim_err("empty CRF problem"));
        }
        if weights.horizontal.iter().chain(&weights.vertical).any(|w| *w < 0.0) {
            return Err(dim_err("edge weights must be non-negative"));
        }
        if !(0.0 <= penalty.p1 && penalty.p1 <= penalty.p2) {
            return Err(dim_err("penalty must satisfy 0 <= P1 <= P2"));
        }
        Ok(CrfProblem {
            unary,
            weights,
            penalty,
        })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.unary.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.unary.width
    }

    #[inline]
    pub fn labels(&self) -> usize {
        self.unary.labels
    }

    /// Same problem with rows and columns both reversed.
    fn flipped(&self) -> CrfProblem {
        let (h, w) = (self.height(), self.width());
        let mut weights = EdgeWeights::zeros(h, w);
        for r in 0..h {
            for c in 0..w {
                let (fr, fc) = (h - 1 - r, w - 1 - c);
                if c + 1 < w {
                    // edge (c, c+1) becomes (fc-1, fc)
                    weights.horizontal[fr * w + fc - 1] = self.weights.horizontal[r * w + c];
                }
                if r + 1 < h {
                    weights.vertical[(fr - 1) * w + fc] = self.weights.vertical[r * w + c];
                }
            }
        }
        let mut unary = self.unary.clone();
        unary.values = flip_volume(&self.unary.values, h * w, self.labels());
        unary.valid = flip_volume(&self.unary.valid, h * w, self.labels());
        CrfProblem {
            unary,
            weights,
            penalty: self.penalty,
        }
    }
}

fn flip_volume<T: Copy>(values: &[T], pixels: usize, labels: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(values.len());
    for i in (0..pixels).rev() {
        out.extend_from_slice(&values[i * labels..(i + 1) * labels]);
    }
    out
}

/// Lagrange multipliers, one per (pixel, label), pixel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DualState {
    pub height: usize,
    pub width: usize,
    pub labels: usize,
    pub lambda: Vec<f64>,
}

impl DualState {
    pub fn zeros(prob: &CrfProblem) -> Self {
        DualState {
            height: prob.height(),
            width: prob.width(),
            labels: prob.labels(),
            lambda: vec![0.0; prob.unary.values.len()],
        }
    }

    fn check(&self, prob: &CrfProblem) -> Result<()> {
        if self.height != prob.height() || self.width != prob.width() || self.labels != prob.labels() {
            return Err(dim_err("dual state does not match problem"));
        }
        Ok(())
    }
}

/// A chain with `n` nodes: `node_costs` is `n × labels`, `edge_weights`
/// has `n - 1` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainProblem {
    pub labels: usize,
    pub node_costs: Vec<f64>,
    pub edge_weights: Vec<f64>,
    pub penalty: PenaltyParams,
}

impl ChainProblem {
    pub fn len(&self) -> usize {
        self.node_costs.len() / self.labels
    }

    pub fn is_empty(&self) -> bool {
        self.node_costs.is_empty()
    }

    pub fn energy(&self, x: &[usize]) -> f64 {
        let l = self.labels;
        let mut e: f64 = x.iter().enumerate().map(|(v, k)| self.node_costs[v * l + k]).sum();
        for (v, w) in self.edge_weights.iter().enumerate() {
            e += w * rho(x[v].abs_diff(x[v + 1]), &self.penalty);
        }
        e
    }
}

/// `dst(k) = min_j src(j) + w * rho(|j - k|)` in O(L), valid for
/// `0 <= P1 <= P2` and `w >= 0`.
#[inline]
pub fn penalty_message(src: &[f64], w: f64, p: &PenaltyParams, dst: &mut [f64]) {
    let l = src.len();
    let floor = src.iter().copied().fold(f64::INFINITY, f64::min) + w * p.p2;
    let step = w * p.p1;
    for k in 0..l {
        let mut m = src[k].min(floor);
        if k > 0 {
            m = m.min(src[k - 1] + step);
        }
        if k + 1 < l {
            m = m.min(src[k + 1] + step);
        }
        dst[k] = m;
    }
}

/// Forward-backward min-sum on a chain stored contiguously
/// (`costs[v * l + k]`). Writes min-marginals into `out` and returns the
/// chain minimum.
fn chain_dp(costs: &[f64], weights: &[f64], l: usize, p: &PenaltyParams, out: &mut [f64]) -> f64 {
    let n = costs.len() / l;
    // out holds forward values (node cost included)
    out[..l].copy_from_slice(&costs[..l]);
    for v in 1..n {
        let (prev, cur) = out.split_at_mut(v * l);
        let cur = &mut cur[..l];
        penalty_message(&prev[(v - 1) * l..], weights[v - 1], p, cur);
        for (c, u) in cur.iter_mut().zip(&costs[v * l..(v + 1) * l]) {
            *c += u;
        }
    }
    let min = out[(n - 1) * l..].iter().copied().fold(f64::INFINITY, f64::min);
    // add backward messages
    let mut back = vec![0.0; l];
    let mut src = vec![0.0; l];
    for v in (0..n - 1).rev() {
        for k in 0..l {
            src[k] = costs[(v + 1) * l + k] + back[k];
        }
        penalty_message(&src, weights[v], p, &mut back);
        for (o, b) in out[v * l..(v + 1) * l].iter_mut().zip(&back) {
            *o += b;
        }
    }
    min
}

fn chain_min(costs: &[f64], weights: &[f64], l: usize, p: &PenaltyParams) -> f64 {
    let n = costs.len() / l;
    let mut fwd = costs[..l].to_vec();
    let mut next = vec![0.0; l];
    for v in 1..n {
        penalty_message(&fwd, weights[v - 1], p, &mut next);
        for k in 0..l {
            fwd[k] = next[k] + costs[v * l + k];
        }
    }
    fwd.into_iter().fold(f64::INFINITY, f64::min)
}

/// Min-marginals `m_v(k)` of a chain: the minimum chain energy with node `v`
/// fixed to label `k`. Returned as `n × labels`.
pub fn chain_min_marginals(chain: &ChainProblem) -> Vec<f64> {
    let mut out = vec![0.0; chain.node_costs.len()];
    if !chain.is_empty() {
        chain_dp(
            &chain.node_costs,
            &chain.edge_weights,
            chain.labels,
            &chain.penalty,
            &mut out,
        );
    }
    out
}

/// Row chains carrying all unaries and horizontal edges, and column chains
/// with zero unaries and the vertical edges.
#[derive(Clone, Debug)]
pub struct Decomposition {
    pub rows: Vec<ChainProblem>,
    pub cols: Vec<ChainProblem>,
}

pub fn decompose(prob: &CrfProblem) -> Decomposition {
    let (h, w, l) = (prob.height(), prob.width(), prob.labels());
    let rows = (0..h)
        .map(|r| ChainProblem {
            labels: l,
            node_costs: prob.unary.values[r * w * l..(r + 1) * w * l].to_vec(),
            edge_weights: prob.weights.horizontal[r * w..r * w + w - 1].to_vec(),
            penalty: prob.penalty,
        })
        .collect();
    let cols = (0..w)
        .map(|c| ChainProblem {
            labels: l,
            node_costs: vec![0.0; h * l],
            edge_weights: (0..h - 1).map(|r| prob.weights.vertical[r * w + c]).collect(),
            penalty: prob.penalty,
        })
        .collect();
    Decomposition { rows, cols }
}

pub fn energy(prob: &CrfProblem, x: &Labeling) -> f64 {
    let (h, w, l) = (prob.height(), prob.width(), prob.labels());
    let p = &prob.penalty;
    let mut e = 0.0;
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let xi = x.labels[i];
            e += prob.unary.values[i * l + xi];
            if c + 1 < w {
                e += prob.weights.horizontal[i] * rho(xi.abs_diff(x.labels[i + 1]), p);
            }
            if r + 1 < h {
                e += prob.weights.vertical[i] * rho(xi.abs_diff(x.labels[i + w]), p);
            }
        }
    }
    e
}

fn row_costs(prob: &CrfProblem, lam: &DualState, r: usize) -> Vec<f64> {
    let span = prob.width() * prob.labels();
    let range = r * span..(r + 1) * span;
    prob.unary.values[range.clone()]
        .iter()
        .zip(&lam.lambda[range])
        .map(|(u, l)| u + l)
        .collect()
}

fn col_costs(prob: &CrfProblem, lam: &DualState, c: usize) -> (Vec<f64>, Vec<f64>) {
    let (h, w, l) = (prob.height(), prob.width(), prob.labels());
    let mut costs = Vec::with_capacity(h * l);
    for r in 0..h {
        let i = r * w + c;
        costs.extend(lam.lambda[i * l..(i + 1) * l].iter().map(|v| -v));
    }
    let weights = (0..h - 1).map(|r| prob.weights.vertical[r * w + c]).collect();
    (costs, weights)
}

/// `D(lambda)`: sum of the row-chain minima of `f1 + lambda` and the
/// column-chain minima of `f2 - lambda`.
pub fn dual_bound(prob: &CrfProblem, lam: &DualState) -> Result<f64> {
    lam.check(prob)?;
    let (h, w, l) = (prob.height(), prob.width(), prob.labels());
    let mut total = 0.0;
    for r in 0..h {
        let costs = row_costs(prob, lam, r);
        total += chain_min(&costs, &prob.weights.horizontal[r * w..r * w + w - 1], l, &prob.penalty);
    }
    for c in 0..w {
        let (costs, weights) = col_costs(prob, lam, c);
        total += chain_min(&costs, &weights, l, &prob.penalty);
    }
    Ok(total)
}

/// Min-marginals of the row chains of `f1 + lambda`.
pub fn row_min_marginals(prob: &CrfProblem, lam: &DualState) -> Result<CostVolume> {
    lam.check(prob)?;
    let (h, w, l) = (prob.height(), prob.width(), prob.labels());
    let mut out = prob.unary.clone();
    for r in 0..h {
        let costs = row_costs(prob, lam, r);
        let dst = &mut out.values[r * w * l..(r + 1) * w * l];
        chain_dp(
            &costs,
            &prob.weights.horizontal[r * w..r * w + w - 1],
            l,
            &prob.penalty,
            dst,
        );
    }
    Ok(out)
}

/// Min-marginals of the column chains of `f2 - lambda`.
pub fn column_min_marginals(prob: &CrfProblem, lam: &DualState) -> Result<CostVolume> {
    lam.check(prob)?;
    let (h, w, l) = (prob.height(), prob.width(), prob.labels());
    let mut out = prob.unary.clone();
    let mut buf = vec![0.0; h * l];
    for c in 0..w {
        let (costs, weights) = col_costs(prob, lam, c);
        chain_dp(&costs, &weights, l, &prob.penalty, &mut buf);
        for r in 0..h {
            let i = r * w + c;
            out.values[i * l..(i + 1) * l].copy_from_slice(&buf[r * l..(r + 1) * l]);
        }
    }
    Ok(out)
}

fn subtract_min(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::INFINITY, f64::min);
    v.iter_mut().for_each(|x| *x -= m);
}

/// One raster-order pass of node-wise min-marginal averaging.
fn raster_sweep(prob: &CrfProblem, lam: &mut [f64]) {
    let (h, w, l) = (prob.height(), prob.width(), prob.labels());
    let p = &prob.penalty;
    let u = &prob.unary.values;
    let hw = &prob.weights.horizontal;
    let vw = &prob.weights.vertical;

    // messages arriving from the right neighbour / the lower neighbour,
    // computed before any update of this pass
    let mut from_right = vec![0.0; h * w * l];
    let mut from_below = vec![0.0; h * w * l];
    let mut src = vec![0.0; l];
    for r in 0..h {
        for c in (0..w - 1).rev() {
            let j = r * w + c + 1;
            for k in 0..l {
                src[k] = u[j * l + k] + lam[j * l + k] + from_right[j * l + k];
            }
            let i = j - 1;
            penalty_message(&src, hw[i], p, &mut from_right[i * l..(i + 1) * l]);
        }
    }
    for r in (0..h - 1).rev() {
        for c in 0..w {
            let j = (r + 1) * w + c;
            for k in 0..l {
                src[k] = -lam[j * l + k] + from_below[j * l + k];
            }
            let i = r * w + c;
            penalty_message(&src, vw[i], p, &mut from_below[i * l..(i + 1) * l]);
        }
    }

    let mut from_above = vec![0.0; w * l];
    let mut from_left = vec![0.0; l];
    let mut m1 = vec![0.0; l];
    let mut m2 = vec![0.0; l];
    for r in 0..h {
        from_left.fill(0.0);
        for c in 0..w {
            let i = r * w + c;
            let above = &mut from_above[c * l..(c + 1) * l];
            for k in 0..l {
                let li = lam[i * l + k];
                m1[k] = u[i * l + k] + li + from_left[k] + from_right[i * l + k];
                m2[k] = -li + above[k] + from_below[i * l + k];
            }
            subtract_min(&mut m1);
            subtract_min(&mut m2);
            for k in 0..l {
                lam[i * l + k] += 0.5 * (m2[k] - m1[k]);
            }
            // pass the updated node on to its right and lower neighbours
            if c + 1 < w {
                for k in 0..l {
                    src[k] = u[i * l + k] + lam[i * l + k] + from_left[k];
                }
                penalty_message(&src, hw[i], p, &mut from_left);
            }
            if r + 1 < h {
                for k in 0..l {
                    src[k] = -lam[i * l + k] + above[k];
                }
                penalty_message(&src, vw[i], p, above);
            }
        }
    }
}

/// One dual iteration: a raster-order sweep followed by a reverse-order
/// sweep. Never decreases [`dual_bound`].
pub fn dual_mm_step(prob: &CrfProblem, lam: &DualState) -> Result<DualState> {
    let flipped = prob.flipped();
    dual_mm_step_with(prob, &flipped, lam)
}

fn dual_mm_step_with(prob: &CrfProblem, flipped: &CrfProblem, lam: &DualState) -> Result<DualState> {
    lam.check(prob)?;
    let (n, l) = (prob.height() * prob.width(), prob.labels());
    let mut next = lam.clone();
    raster_sweep(prob, &mut next.lambda);
    let mut rev = flip_volume(&next.lambda, n, l);
    raster_sweep(flipped, &mut rev);
    next.lambda = flip_volume(&rev, n, l);
    Ok(next)
}

fn argmin_labeling(mm: &CostVolume) -> Labeling {
    Labeling {
        height: mm.height,
        width: mm.width,
        labels: (0..mm.pixels()).map(|i| argmin(mm.pixel(i))).collect(),
    }
}

/// Per-pixel argmin of the row-chain min-marginals of `f1 + lambda`.
pub fn decode(prob: &CrfProblem, lam: &DualState) -> Result<Labeling> {
    Ok(argmin_labeling(&row_min_marginals(prob, lam)?))
}

/// Per-pixel argmin of the column-chain min-marginals of `f2 - lambda`.
pub fn decode_columns(prob: &CrfProblem, lam: &DualState) -> Result<Labeling> {
    Ok(argmin_labeling(&column_min_marginals(prob, lam)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Certificate {
    CertifiedOptimal,
    Uncertified,
}

fn unique_argmin(v: &[f64]) -> Option<usize> {
    let k = argmin(v);
    let tol = 1e-12 * (1.0 + v[k].abs());
    v.iter()
        .enumerate()
        .all(|(j, x)| j == k || *x > v[k] + tol)
        .then_some(k)
}

/// Certified when at every pixel the row-chain and column-chain
/// min-marginals have the same unique minimizer; the decoded labeling is
/// then a global minimizer of the energy.
pub fn certificate(prob: &CrfProblem, lam: &DualState) -> Result<Certificate> {
    let m1 = row_min_marginals(prob, lam)?;
    let m2 = column_min_marginals(prob, lam)?;
    for i in 0..m1.pixels() {
        match (unique_argmin(m1.pixel(i)), unique_argmin(m2.pixel(i))) {
            (Some(a), Some(b)) if a == b => {}
            _ => return Ok(Certificate::Uncertified),
        }
    }
    Ok(Certificate::CertifiedOptimal)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub bound: f64,
    pub energy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BoundTrace {
    pub entries: Vec<TraceEntry>,
}

impl BoundTrace {
    pub fn bounds(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.bound).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,bound,energy\n");
        for e in &self.entries {
            let _ = writeln!(s, "{},{:.17e},{:.17e}", e.iteration, e.bound, e.energy);
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct Inference {
    pub labeling: Labeling,
    pub dual: DualState,
    pub trace: BoundTrace,
}

/// Runs a fixed number of dual iterations from `lambda = 0` and decodes.
/// The trace holds the bound and decoded energy before the first iteration
/// and after each one.
pub fn run_inference(prob: &CrfProblem, iterations: usize) -> Result<Inference> {
    if iterations == 0 {
        return Err(Error::Config("inference needs at least one iteration".into()));
    }
    let flipped = prob.flipped();
    let mut lam = DualState::zeros(prob);
    let mut trace = BoundTrace::default();
    let mut record = |it: usize, lam: &DualState| -> Result<Labeling> {
        let x = decode(prob, lam)?;
        trace.entries.push(TraceEntry {
            iteration: it,
            bound: dual_bound(prob, lam)?,
            energy: energy(prob, &x),
        });
        Ok(x)
    };
    let mut labeling = record(0, &lam)?;
    for it in 1..=iterations {
        lam = dual_mm_step_with(prob, &flipped, &lam)?;
        labeling = record(it, &lam)?;
    }
    Ok(Inference {
        labeling,
        dual: lam,
        trace,
    })
}
