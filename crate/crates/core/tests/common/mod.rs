#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stereo_crf::crf::{ChainProblem, CrfProblem};
use stereo_crf::pairwise::{EdgeWeights, PenaltyParams};
use stereo_crf::stereo_io::Image;
use stereo_crf::volume::CostVolume;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_penalty(rng: &mut ChaCha8Rng, max: f64) -> PenaltyParams {
    let a = rng.gen_range(0.0..=max);
    let b = rng.gen_range(0.0..=max);
    PenaltyParams::new(a.min(b), a.max(b))
}

pub fn random_problem(rng: &mut ChaCha8Rng, h: usize, w: usize, l: usize, wmax: f64, pmax: f64) -> CrfProblem {
    let unary = CostVolume::from_values(h, w, l, (0..h * w * l).map(|_| rng.gen_range(-1.0..=1.0)).collect()).unwrap();
    let mut weights = EdgeWeights::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            if c + 1 < w {
                weights.horizontal[r * w + c] = rng.gen_range(0.0..=wmax);
            }
            if r + 1 < h {
                weights.vertical[r * w + c] = rng.gen_range(0.0..=wmax);
            }
        }
    }
    let penalty = random_penalty(rng, pmax);
    CrfProblem::new(unary, weights, penalty).unwrap()
}

pub fn random_chain(rng: &mut ChaCha8Rng) -> ChainProblem {
    let n = rng.gen_range(1..=6);
    let labels = rng.gen_range(1..=5);
    ChainProblem {
        labels,
        node_costs: (0..n * labels).map(|_| rng.gen_range(-1.0..=1.0)).collect(),
        edge_weights: (0..n - 1).map(|_| rng.gen_range(0.0..=2.0)).collect(),
        penalty: random_penalty(rng, 3.0),
    }
}

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, ch: usize) -> Image {
    Image::from_vec(h, w, ch, (0..h * w * ch).map(|_| rng.gen_range(-1.0..=1.0)).collect()).unwrap()
}

pub fn oracle_rho(d: usize, p: &PenaltyParams) -> f64 {
    if d == 0 {
        0.0
    } else if d == 1 {
        p.p1
    } else {
        p.p2
    }
}

/// Grid energy by direct summation over nodes and edges.
pub fn oracle_energy(prob: &CrfProblem, x: &[usize]) -> f64 {
    let (h, w, l) = (prob.unary.height, prob.unary.width, prob.unary.labels);
    let mut e = 0.0;
    for i in 0..h * w {
        e += prob.unary.values[i * l + x[i]];
    }
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if c + 1 < w {
                e += prob.weights.horizontal[i] * oracle_rho(x[i].abs_diff(x[i + 1]), &prob.penalty);
            }
            if r + 1 < h {
                e += prob.weights.vertical[i] * oracle_rho(x[i].abs_diff(x[i + w]), &prob.penalty);
            }
        }
    }
    e
}

/// All labelings of `n` nodes with `l` labels, in lexicographic order.
pub fn all_labelings(n: usize, l: usize) -> impl Iterator<Item = Vec<usize>> {
    let total = l.pow(n as u32);
    (0..total).map(move |mut code| {
        let mut x = vec![0; n];
        for v in x.iter_mut().rev() {
            *v = code % l;
            code /= l;
        }
        x
    })
}

/// Exhaustive minimum of a grid problem: (value, minimizer, minimizer unique).
pub fn brute_force_map(prob: &CrfProblem) -> (f64, Vec<usize>, bool) {
    let n = prob.unary.height * prob.unary.width;
    let mut best = f64::INFINITY;
    let mut arg = Vec::new();
    let mut count = 0;
    for x in all_labelings(n, prob.unary.labels) {
        let e = oracle_energy(prob, &x);
        if e < best - 1e-12 {
            best = e;
            arg = x;
            count = 1;
        } else if (e - best).abs() <= 1e-12 {
            count += 1;
        }
    }
    (best, arg, count == 1)
}

pub fn oracle_chain_energy(chain: &ChainProblem, x: &[usize]) -> f64 {
    let l = chain.labels;
    let mut e: f64 = x.iter().enumerate().map(|(v, k)| chain.node_costs[v * l + k]).sum();
    for (v, w) in chain.edge_weights.iter().enumerate() {
        e += w * oracle_rho(x[v].abs_diff(x[v + 1]), &chain.penalty);
    }
    e
}

/// Exhaustive chain minimum and min-marginals (`n × L`, node-major).
pub fn brute_chain(chain: &ChainProblem) -> (f64, Vec<f64>) {
    let l = chain.labels;
    let n = chain.node_costs.len() / l;
    let mut mm = vec![f64::INFINITY; n * l];
    let mut best = f64::INFINITY;
    for x in all_labelings(n, l) {
        let e = oracle_chain_energy(chain, &x);
        best = best.min(e);
        for (v, k) in x.iter().enumerate() {
            let slot = &mut mm[v * l + k];
            *slot = slot.min(e);
        }
    }
    (best, mm)
}

/// Relative error with an absolute floor for near-zero gradients.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub const FD_EPS: f64 = 1e-4;

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_diff(x: &mut [f64], i: usize, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + FD_EPS;
    let fp = f(x);
    x[i] = orig - FD_EPS;
    let fm = f(x);
    x[i] = orig;
    (fp - fm) / (2.0 * FD_EPS)
}
