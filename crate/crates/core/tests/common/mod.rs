//! Independent oracles and seeded input generators shared by the
//! integration suites.

#![allow(dead_code)]

use affinity_lab::affinity::{AffinityField, RateSet};
use affinity_lab::loss::{evaluate, LossConfig, WeightTable};
use affinity_lab::propagation::ProbabilityMap;
use affinity_lab::synth::{bounded, sequential_rng};
use affinity_lab::tensor_io::LabelMap;
use rand_core::RngCore;

pub struct TestRng(rand_xoshiro::Xoshiro256StarStar);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        TestRng(sequential_rng(seed ^ 0x5eed_0000_0000_0000))
    }

    pub fn below(&mut self, n: usize) -> usize {
        bounded(self.0.next_u64(), n)
    }

    pub fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }
}

/// Random labels with occasional ignore pixels.
pub fn random_labels(rng: &mut TestRng, max_side: usize, classes: usize, ignore_prob: f64) -> LabelMap {
    let h = 1 + rng.below(max_side);
    let w = 1 + rng.below(max_side);
    let data = (0..h * w)
        .map(|_| {
            if rng.unit() < ignore_prob {
                255
            } else {
                rng.below(classes) as u8
            }
        })
        .collect();
    LabelMap::new(h, w, data).unwrap()
}

/// Expected ground-truth affinity by enumerating every ordered pixel pair.
///
/// Returns `(value, valid)` per entry in `[8|R|, H, W]` order. An entry is
/// set when some pair's displacement equals that rate's direction offset.
pub fn brute_force_affinity(labels: &LabelMap, rate_pairs: &[(usize, usize)]) -> (Vec<f64>, Vec<bool>) {
    let (h, w) = (labels.height() as i64, labels.width() as i64);
    let plane = (h * w) as usize;
    let mut values = vec![0.0; rate_pairs.len() * 8 * plane];
    let mut valid = vec![false; values.len()];
    for y1 in 0..h {
        for x1 in 0..w {
            for y2 in 0..h {
                for x2 in 0..w {
                    let (dy, dx) = (y2 - y1, x2 - x1);
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    for (r, &(r1, r2)) in rate_pairs.iter().enumerate() {
                        let (r1, r2) = (r1 as i64, r2 as i64);
                        let s_ok = dy == 0 || dy.abs() == r1;
                        let t_ok = dx == 0 || dx.abs() == r2;
                        if !(s_ok && t_ok) {
                            continue;
                        }
                        // scan order index over s in {-r1,0,r1}, t in {-r2,0,r2}
                        let si = if dy < 0 { 0 } else if dy == 0 { 1 } else { 2 };
                        let ti = if dx < 0 { 0 } else if dx == 0 { 1 } else { 2 };
                        let mut d = si * 3 + ti;
                        if d > 4 {
                            d -= 1;
                        }
                        let a = labels.get(y1 as usize, x1 as usize);
                        let b = labels.get(y2 as usize, x2 as usize);
                        if a == labels.ignore_value() || b == labels.ignore_value() {
                            continue;
                        }
                        let k = (r * 8 + d) * plane + (y1 * w + x1) as usize;
                        valid[k] = true;
                        values[k] = if a == b { 1.0 } else { 0.0 };
                    }
                }
            }
        }
    }
    (values, valid)
}

/// Masked binary cross-entropy summed over each pixel's valid entries and
/// averaged over pixels that have at least one, times `beta`.
pub fn masked_bce(logits: &AffinityField, gt: &AffinityField, beta: f64) -> f64 {
    let plane = gt.height() * gt.width();
    let channels = gt.channels();
    let mut counted = 0usize;
    let mut total = 0.0;
    for p in 0..plane {
        let mut any = false;
        for c in 0..channels {
            let k = c * plane + p;
            if !gt.mask()[k] {
                continue;
            }
            any = true;
            let z = logits.values()[k];
            let prob = (1.0 / (1.0 + (-z).exp())).clamp(1e-7, 1.0 - 1e-7);
            let y = gt.values()[k];
            total += -(y * prob.ln() + (1.0 - y) * (1.0 - prob).ln());
        }
        counted += any as usize;
    }
    beta * total / counted as f64
}

/// Central finite differences of the loss at every valid entry.
pub fn finite_difference_grad(
    logits: &AffinityField,
    gt: &AffinityField,
    weights: &WeightTable,
    cfg: &LossConfig,
    h: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; logits.values().len()];
    let mut probe = logits.clone();
    for k in 0..out.len() {
        if !gt.mask()[k] {
            continue;
        }
        let z = logits.values()[k];
        probe.values_mut()[k] = z + h;
        let up = evaluate(&probe, gt, weights, cfg, false).unwrap().loss;
        probe.values_mut()[k] = z - h;
        let down = evaluate(&probe, gt, weights, cfg, false).unwrap().loss;
        probe.values_mut()[k] = z;
        out[k] = (up - down) / (2.0 * h);
    }
    out
}

/// Random logits on the mask of `gt`.
pub fn random_logits(rng: &mut TestRng, gt: &AffinityField, scale: f64) -> AffinityField {
    let values = gt.mask().iter().map(|_| rng.range(-scale, scale)).collect();
    AffinityField::from_parts(gt.height(), gt.width(), gt.rates(), values, gt.mask().to_vec()).unwrap()
}

/// Random probability vectors whose top class leads the runner-up by a
/// clear margin.
pub fn random_probs(rng: &mut TestRng, h: usize, w: usize, c: usize) -> ProbabilityMap {
    let mut data = Vec::with_capacity(h * w * c);
    for _ in 0..h * w {
        let mut px: Vec<f64> = (0..c).map(|_| rng.range(0.01, 1.0)).collect();
        let top = rng.below(c);
        let max = px.iter().cloned().fold(0.0, f64::max);
        px[top] = max + 0.25;
        data.extend(px);
    }
    ProbabilityMap::from_scores(h, w, c, data).unwrap()
}

/// Random affinity logits over the geometric mask.
pub fn random_affinity(rng: &mut TestRng, h: usize, w: usize, rates: &RateSet, scale: f64) -> AffinityField {
    let geo = AffinityField::geometric(h, w, rates);
    random_logits(rng, &geo, scale)
}

/// mIoU by direct set counting per class, skipping classes absent from both.
pub fn set_miou(pred: &LabelMap, gt: &LabelMap) -> f64 {
    let mut scores = Vec::new();
    for class in 0..=254u8 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == gt.ignore_value() {
                continue;
            }
            let (in_p, in_g) = (p == class, g == class);
            inter += (in_p && in_g) as usize;
            union += (in_p || in_g) as usize;
        }
        if union > 0 {
            scores.push(inter as f64 / union as f64);
        }
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
