//! Seeded synthetic label maps and corrupted predictions.
//!
//! All randomness is pinned so that other implementations can reproduce the
//! outputs bit for bit:
//!
//! * Sequential draws come from xoshiro256** whose four state words are the
//!   first four outputs of SplitMix64 started at `seed`.
//! * A draw bounded to `n` is `(u * n) >> 64` computed in 128 bits, where `u`
//!   is the next 64-bit output.
//! * Per-pixel draws are counter based: `key(stream, index)` applies one
//!   SplitMix64 step to `seed`, XORs the stream tag, applies another step,
//!   XORs the pixel index and applies a final step. A SplitMix64 step on `x`
//!   is the first output of SplitMix64 started at `x`.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::{SplitMix64, Xoshiro256StarStar};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::propagation::{argmax, ProbabilityMap};
use crate::tensor_io::LabelMap;

const STREAM_FLIP_SELECT: u64 = 1;
const STREAM_FLIP_CLASS: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub num_cells: usize,
    /// Box-blur radius applied to the softened one-hot maps; only pixels
    /// within this distance of a class boundary change.
    pub blur_radius: usize,
    /// Fraction of interior pixels whose prediction is flipped to another class.
    pub flip_rate: f64,
    /// Softmax temperature applied to the one-hot labels.
    pub temperature: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            height: 64,
            width: 64,
            num_classes: 5,
            num_cells: 16,
            blur_radius: 2,
            flip_rate: 0.08,
            temperature: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.height == 0 || self.width == 0 {
            return bad(format!("size must be at least 1x1, got {}x{}", self.height, self.width));
        }
        if self.num_classes == 0 || self.num_classes > 255 {
            return bad(format!("num_classes must be in 1..=255, got {}", self.num_classes));
        }
        if self.num_cells == 0 {
            return bad("num_cells must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.flip_rate) {
            return bad(format!("flip_rate must be in [0, 1), got {}", self.flip_rate));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        Ok(())
    }
}

fn splitmix_step(x: u64) -> u64 {
    SplitMix64::seed_from_u64(x).next_u64()
}

/// Counter-based 64-bit draw for one pixel of one stream.
pub fn pixel_key(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix_step(splitmix_step(splitmix_step(seed) ^ stream) ^ index)
}

/// `(u * n) >> 64`: maps a uniform 64-bit word onto `0..n`.
pub fn bounded(u: u64, n: usize) -> usize {
    ((u as u128 * n as u128) >> 64) as usize
}

/// Sequential generator used for site placement.
pub fn sequential_rng(seed: u64) -> Xoshiro256StarStar {
    Xoshiro256StarStar::seed_from_u64(seed)
}

/// Voronoi sites as integer `(row, col)` positions, drawn row then column.
pub fn voronoi_sites(cfg: &SynthConfig) -> Vec<(usize, usize)> {
    let mut rng = sequential_rng(cfg.seed);
    (0..cfg.num_cells)
        .map(|_| {
            let i = bounded(rng.next_u64(), cfg.height);
            let j = bounded(rng.next_u64(), cfg.width);
            (i, j)
        })
        .collect()
}

/// Labels each pixel with `site_index % num_classes` of its nearest site in
/// squared Euclidean distance; ties go to the lowest site index.
///
/// ```
/// use affinity_lab::synth::{gen_voronoi_labels, SynthConfig};
///
/// let cfg = SynthConfig { seed: 3, height: 32, width: 48, ..Default::default() };
/// let a = gen_voronoi_labels(&cfg).unwrap();
/// assert_eq!(a, gen_voronoi_labels(&cfg).unwrap());
/// assert!(a.data().iter().all(|&c| (c as usize) < cfg.num_classes));
/// ```
pub fn gen_voronoi_labels(cfg: &SynthConfig) -> Result<LabelMap> {
    cfg.validate()?;
    let sites = voronoi_sites(cfg);
    let (h, w) = (cfg.height, cfg.width);
    let mut data = vec![0u8; h * w];
    data.par_chunks_mut(w).enumerate().for_each(|(i, row)| {
        for (j, out) in row.iter_mut().enumerate() {
            let mut best = (u128::MAX, 0usize);
            for (k, &(si, sj)) in sites.iter().enumerate() {
                let di = i.abs_diff(si) as u128;
                let dj = j.abs_diff(sj) as u128;
                let d = di * di + dj * dj;
                if d < best.0 {
                    best = (d, k);
                }
            }
            *out = (best.1 % cfg.num_classes) as u8;
        }
    });
    LabelMap::new(h, w, data)
}

/// Labeled pixels whose square window of radius `max(radius, 1)` holds only
/// their own class. Ignored pixels count as a different class.
pub fn interior_mask(labels: &LabelMap, radius: usize) -> Vec<bool> {
    let r = radius.max(1);
    let (h, w) = (labels.height(), labels.width());
    let mut out = vec![false; h * w];
    out.par_chunks_mut(w).enumerate().for_each(|(i, row)| {
        for (j, flag) in row.iter_mut().enumerate() {
            let here = labels.get(i, j);
            if here == labels.ignore_value() {
                continue;
            }
            let (i0, i1) = (i.saturating_sub(r), (i + r).min(h - 1));
            let (j0, j1) = (j.saturating_sub(r), (j + r).min(w - 1));
            *flag = (i0..=i1).all(|y| (j0..=j1).all(|x| labels.get(y, x) == here));
        }
    });
    out
}

/// Emulates a network's class-probability output for `labels`.
///
/// Steps, in order: softmax of the one-hot labels at `temperature`; box blur
/// of radius `blur_radius`; flip of a `flip_rate` fraction of interior pixels
/// (the selected pixels swap the probability of their true class with that
/// of another class); renormalization. Ignored pixels are uniform and do not
/// enter blur windows.
pub fn corrupt_predictions(labels: &LabelMap, cfg: &SynthConfig) -> Result<ProbabilityMap> {
    cfg.validate()?;
    let c = cfg.num_classes;
    labels.validate(c)?;
    let (h, w) = (labels.height(), labels.width());
    let ignore = labels.ignore_value();

    let off = (-1.0 / cfg.temperature).exp();
    let denom = 1.0 + (c as f64 - 1.0) * off;
    let (p_true, p_other) = (1.0 / denom, off / denom);
    let soft = |l: u8, k: usize| if l as usize == k { p_true } else { p_other };

    let r = cfg.blur_radius;
    let mut data = vec![0.0f64; h * w * c];
    data.par_chunks_mut(w * c).enumerate().for_each(|(i, row)| {
        for j in 0..w {
            let px = &mut row[j * c..(j + 1) * c];
            if labels.get(i, j) == ignore {
                px.iter_mut().for_each(|v| *v = 1.0 / c as f64);
                continue;
            }
            let (i0, i1) = (i.saturating_sub(r), (i + r).min(h - 1));
            let (j0, j1) = (j.saturating_sub(r), (j + r).min(w - 1));
            let mut n = 0usize;
            for y in i0..=i1 {
                for x in j0..=j1 {
                    let l = labels.get(y, x);
                    if l == ignore {
                        continue;
                    }
                    n += 1;
                    for (k, v) in px.iter_mut().enumerate() {
                        *v += soft(l, k);
                    }
                }
            }
            px.iter_mut().for_each(|v| *v /= n as f64);
        }
    });

    if cfg.flip_rate > 0.0 && c > 1 {
        for idx in flip_selection(labels, cfg) {
            let truth = labels.data()[idx] as usize;
            let other = bounded(pixel_key(cfg.seed, STREAM_FLIP_CLASS, idx as u64), c - 1);
            let target = if other >= truth { other + 1 } else { other };
            data.swap(idx * c + truth, idx * c + target);
        }
    }

    ProbabilityMap::from_scores(h, w, c, data)
}

/// Pixel indices flipped by [`corrupt_predictions`]: the
/// `max(1, round(flip_rate * n))` interior pixels with the smallest keys.
pub fn flip_selection(labels: &LabelMap, cfg: &SynthConfig) -> Vec<usize> {
    if cfg.flip_rate <= 0.0 || cfg.num_classes < 2 {
        return Vec::new();
    }
    let interior = interior_mask(labels, cfg.blur_radius);
    let mut keyed: Vec<(u64, usize)> = interior
        .iter()
        .enumerate()
        .filter(|(_, &inside)| inside)
        .map(|(idx, _)| (pixel_key(cfg.seed, STREAM_FLIP_SELECT, idx as u64), idx))
        .collect();
    if keyed.is_empty() {
        return Vec::new();
    }
    let k = ((cfg.flip_rate * keyed.len() as f64).round() as usize).clamp(1, keyed.len());
    keyed.sort_unstable();
    let mut chosen: Vec<usize> = keyed[..k].iter().map(|&(_, idx)| idx).collect();
    chosen.sort_unstable();
    chosen
}

/// Fraction of interior pixels whose argmax disagrees with the label.
pub fn interior_error_rate(labels: &LabelMap, probs: &ProbabilityMap, radius: usize) -> f64 {
    let interior = interior_mask(labels, radius);
    let (mut n, mut wrong) = (0usize, 0usize);
    for (idx, &inside) in interior.iter().enumerate() {
        if inside {
            n += 1;
            let px = &probs.data()[idx * probs.classes()..(idx + 1) * probs.classes()];
            if argmax(px) != labels.data()[idx] as usize {
                wrong += 1;
            }
        }
    }
    wrong as f64 / n.max(1) as f64
}
