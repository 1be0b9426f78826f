//! Affinity propagation refinement of class-probability maps.
//!
//! One step replaces every pixel's class distribution `p` by the
//! normalization of
//!
//! ```text
//! lambda * p * max(p) + sum over valid neighbors s of a_s * p_s
//! ```
//!
//! where `a_s` is the affinity predicted at the pixel toward `s`. Updates are
//! synchronous: every pixel reads the previous iterate only.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::affinity::{neighbor, reverse_direction, AffinityField};
use crate::error::{Error, Result};
use crate::tensor_io::{LabelMap, Tensor};

/// Tolerance on the per-pixel sum accepted by [`ProbabilityMap::new`].
pub const SUM_TOLERANCE: f64 = 1e-6;

/// Per-pixel class distributions, stored pixel-major (`[H, W, C]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<f64>,
}

impl ProbabilityMap {
    /// Wraps pixel-major data; every pixel must sum to 1 within
    /// [`SUM_TOLERANCE`] with entries in `[0, 1]`.
    pub fn new(height: usize, width: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        let map = Self::unchecked(height, width, classes, data)?;
        for (k, px) in map.data.chunks_exact(classes).enumerate() {
            if px.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::InvalidArgument(format!(
                    "pixel {k} has a probability outside [0, 1]"
                )));
            }
            let s: f64 = px.iter().sum();
            if (s - 1.0).abs() > SUM_TOLERANCE {
                return Err(Error::InvalidArgument(format!("pixel {k} sums to {s}")));
            }
        }
        Ok(map)
    }

    /// Normalizes every pixel of non-negative pixel-major scores.
    pub fn from_scores(height: usize, width: usize, classes: usize, mut data: Vec<f64>) -> Result<Self> {
        if classes > 0 {
            for (k, px) in data.chunks_exact_mut(classes).enumerate() {
                if px.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                    return Err(Error::InvalidArgument(format!(
                        "pixel {k} has a negative or non-finite score"
                    )));
                }
                let s: f64 = px.iter().sum();
                if s <= 0.0 {
                    return Err(Error::InvalidArgument(format!("pixel {k} has no probability mass")));
                }
                px.iter_mut().for_each(|v| *v /= s);
            }
        }
        Self::unchecked(height, width, classes, data)
    }

    fn unchecked(height: usize, width: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || classes == 0 {
            return Err(Error::InvalidArgument(format!(
                "probability map must be non-empty, got {classes}x{height}x{width}"
            )));
        }
        if data.len() != height * width * classes {
            return Err(Error::ShapeMismatch(format!(
                "{classes}x{height}x{width} map needs {} values, got {}",
                height * width * classes,
                data.len()
            )));
        }
        Ok(ProbabilityMap {
            height,
            width,
            classes,
            data,
        })
    }

    /// One-hot encoding of `labels`; ignored pixels become uniform.
    pub fn one_hot(labels: &LabelMap, classes: usize) -> Result<Self> {
        labels.validate(classes)?;
        let mut data = vec![0.0; labels.data().len() * classes];
        for (px, &l) in data.chunks_exact_mut(classes).zip(labels.data()) {
            if l == labels.ignore_value() {
                px.iter_mut().for_each(|v| *v = 1.0 / classes as f64);
            } else {
                px[l as usize] = 1.0;
            }
        }
        Self::unchecked(labels.height(), labels.width(), classes, data)
    }

    /// Reads a float32 `[C, H, W]` tensor. Each pixel is renormalized in
    /// double precision; pixels off by more than `1e-4` are rejected.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let dims = t.dims();
        if dims.len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "probability tensor must be [C, H, W], got {dims:?}"
            )));
        }
        let src = t
            .as_f32()
            .ok_or_else(|| Error::InvalidArgument("probability tensor must be float32".into()))?;
        let (c, h, w) = (dims[0], dims[1], dims[2]);
        let plane = h * w;
        let mut data = vec![0.0; src.len()];
        for k in 0..c {
            for p in 0..plane {
                data[p * c + k] = src[k * plane + p] as f64;
            }
        }
        for (k, px) in data.chunks_exact(c.max(1)).enumerate() {
            let s: f64 = px.iter().sum();
            if (s - 1.0).abs() > 1e-4 || px.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::InvalidArgument(format!(
                    "pixel {k} is not a probability vector (sum {s})"
                )));
            }
        }
        Self::from_scores(h, w, c, data)
    }

    /// Float32 `[C, H, W]` tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let plane = self.height * self.width;
        let mut out = vec![0f32; self.data.len()];
        for p in 0..plane {
            for k in 0..self.classes {
                out[k * plane + p] = self.data[p * self.classes + k] as f32;
            }
        }
        Tensor::from_f32(vec![self.classes, self.height, self.width], out)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, i: usize, j: usize) -> &[f64] {
        let k = (i * self.width + j) * self.classes;
        &self.data[k..k + self.classes]
    }

    /// Most probable class per pixel; ties go to the lower class index.
    pub fn argmax(&self) -> LabelMap {
        let labels = self
            .data
            .chunks_exact(self.classes)
            .map(|px| argmax(px) as u8)
            .collect();
        LabelMap::new(self.height, self.width, labels).expect("non-empty map")
    }

    /// Reorders classes so that output class `k` is input class `perm[k]`.
    pub fn permute_classes(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.classes];
        if perm.len() != self.classes || perm.iter().any(|&k| k >= self.classes || std::mem::replace(&mut seen[k], true)) {
            return Err(Error::InvalidArgument("not a permutation of the classes".into()));
        }
        let mut data = vec![0.0; self.data.len()];
        for (dst, src) in data.chunks_exact_mut(self.classes).zip(self.data.chunks_exact(self.classes)) {
            for (k, &from) in perm.iter().enumerate() {
                dst[k] = src[from];
            }
        }
        Self::unchecked(self.height, self.width, self.classes, data)
    }
}

pub(crate) fn argmax(px: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in px.iter().enumerate().skip(1) {
        if v > px[best] {
            best = k;
        }
    }
    best
}

/// How affinity values are turned into propagation weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AffinityMode {
    /// Values are logits, passed through [`steep_sigmoid`].
    Logits,
    /// Values are binary ground truth, used as-is.
    BinaryGt,
}

impl FromStr for AffinityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logits" => Ok(AffinityMode::Logits),
            "gt" => Ok(AffinityMode::BinaryGt),
            other => Err(Error::InvalidArgument(format!(
                "unknown affinity mode {other:?} (expected logits or gt)"
            ))),
        }
    }
}

impl fmt::Display for AffinityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AffinityMode::Logits => "logits",
            AffinityMode::BinaryGt => "gt",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationConfig {
    /// Weight of the pixel's own prediction.
    pub lambda: f64,
    /// Base of the steep sigmoid.
    pub mu: f64,
    pub iterations: usize,
    pub mode: AffinityMode,
    /// Average each affinity with the one predicted in the reverse direction.
    pub symmetrize: bool,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig {
            lambda: 6.0,
            mu: 7.0,
            iterations: 10,
            mode: AffinityMode::Logits,
            symmetrize: false,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.mu > 1.0 && self.mu.is_finite()) {
            return Err(Error::InvalidArgument(format!("mu must be > 1, got {}", self.mu)));
        }
        Ok(())
    }
}

/// `mu^x / (1 + mu^x)`, evaluated as `1 / (1 + mu^-x)` for non-negative `x`.
///
/// ```
/// use affinity_lab::propagation::steep_sigmoid;
///
/// assert_eq!(steep_sigmoid(0.0, 7.0), 0.5);
/// assert_eq!(steep_sigmoid(1.0, 7.0), 0.875);
/// assert_eq!(steep_sigmoid(-1.0, 7.0), 0.125);
/// assert_eq!(steep_sigmoid(1e6, 7.0), 1.0);
/// ```
#[inline]
pub fn steep_sigmoid(x: f64, mu: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + mu.powf(-x))
    } else {
        let m = mu.powf(x);
        m / (1.0 + m)
    }
}

/// Averages every valid entry with the entry its neighbor holds toward it,
/// when that one is valid too.
pub fn symmetrize(affinity: &AffinityField) -> AffinityField {
    let (h, w) = (affinity.height(), affinity.width());
    let mut out = affinity.clone();
    for (r, rate) in affinity.rates().iter().enumerate() {
        for (d, (di, dj)) in rate.offsets().into_iter().enumerate() {
            let back = reverse_direction(d);
            for i in 0..h {
                for j in 0..w {
                    if !affinity.is_valid(r, d, i, j) {
                        continue;
                    }
                    if let Some((ni, nj)) = neighbor(i, j, di, dj, h, w) {
                        if affinity.is_valid(r, back, ni, nj) {
                            let k = out.index(r, d, i, j);
                            out.values_mut()[k] =
                                0.5 * (affinity.value(r, d, i, j) + affinity.value(r, back, ni, nj));
                        }
                    }
                }
            }
        }
    }
    out
}

fn check_shapes(p: &ProbabilityMap, affinity: &AffinityField) -> Result<()> {
    if p.height != affinity.height() || p.width != affinity.width() {
        return Err(Error::ShapeMismatch(format!(
            "probabilities are {}x{}, affinity is {}x{}",
            p.height,
            p.width,
            affinity.height(),
            affinity.width()
        )));
    }
    Ok(())
}

/// A single refinement step. `affinity` must already hold weights in
/// `[0, 1]`. Pixels that receive no neighbor mass are returned unchanged.
///
/// ```
/// use affinity_lab::affinity::{expand_rate_set, AffinityField};
/// use affinity_lab::propagation::{refine_step, ProbabilityMap, PropagationConfig};
///
/// // two pixels side by side; only the left one looks at the right one
/// let rates = expand_rate_set("1").unwrap();
/// let mut mask = vec![false; 16];
/// mask[4 * 2] = true; // direction 4 (right) of pixel (0, 0)
/// let mut values = vec![0.0; 16];
/// values[4 * 2] = 1.0;
/// let a = AffinityField::from_parts(1, 2, &rates, values, mask).unwrap();
/// let p = ProbabilityMap::new(1, 2, 2, vec![0.6, 0.4, 0.1, 0.9]).unwrap();
/// let out = refine_step(&p, &a, &PropagationConfig::default()).unwrap();
/// assert!((out.pixel(0, 0)[1] - 2.34 / 4.6).abs() < 1e-12);
/// assert_eq!(out.pixel(0, 1), p.pixel(0, 1));
/// ```
pub fn refine_step(p: &ProbabilityMap, affinity: &AffinityField, cfg: &PropagationConfig) -> Result<ProbabilityMap> {
    cfg.validate()?;
    check_shapes(p, affinity)?;
    let (h, w, c) = (p.height, p.width, p.classes);
    let offsets: Vec<(usize, usize, (isize, isize))> = affinity
        .rates()
        .iter()
        .enumerate()
        .flat_map(|(r, rate)| rate.offsets().into_iter().enumerate().map(move |(d, o)| (r, d, o)))
        .collect();
    let lambda = cfg.lambda;
    let mut data = vec![0.0; p.data.len()];
    data.par_chunks_mut(w * c).enumerate().for_each(|(i, row)| {
        let mut acc = vec![0.0; c];
        for j in 0..w {
            let src = p.pixel(i, j);
            let anchor = lambda * src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for (a, &v) in acc.iter_mut().zip(src) {
                *a = anchor * v;
            }
            let mut received = false;
            for &(r, d, (di, dj)) in &offsets {
                let k = affinity.index(r, d, i, j);
                if !affinity.mask()[k] {
                    continue;
                }
                let weight = affinity.values()[k];
                if weight == 0.0 {
                    continue;
                }
                let Some((ni, nj)) = neighbor(i, j, di, dj, h, w) else {
                    continue;
                };
                received = true;
                for (a, &v) in acc.iter_mut().zip(p.pixel(ni, nj)) {
                    *a += weight * v;
                }
            }
            let dst = &mut row[j * c..(j + 1) * c];
            if received {
                let s: f64 = acc.iter().sum();
                for (d, &a) in dst.iter_mut().zip(&acc) {
                    *d = a / s;
                }
            } else {
                dst.copy_from_slice(src);
            }
        }
    });
    ProbabilityMap::unchecked(h, w, c, data)
}

/// Converts raw affinity into propagation weights per `cfg.mode`.
pub fn propagation_weights(affinity: &AffinityField, cfg: &PropagationConfig) -> Result<AffinityField> {
    cfg.validate()?;
    let mapped = match cfg.mode {
        AffinityMode::Logits => {
            if let Some(k) = affinity.values().iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("non-finite affinity logit at entry {k}")));
            }
            let mu = cfg.mu;
            affinity.map_valid(move |x| steep_sigmoid(x, mu))
        }
        AffinityMode::BinaryGt => {
            if let Some(k) = affinity
                .values()
                .iter()
                .zip(affinity.mask())
                .position(|(&v, &ok)| ok && v != 0.0 && v != 1.0)
            {
                return Err(Error::InvalidArgument(format!(
                    "ground-truth affinity is not binary at entry {k}"
                )));
            }
            affinity.clone()
        }
    };
    Ok(if cfg.symmetrize { symmetrize(&mapped) } else { mapped })
}

/// Iterates [`refine_step`] with a fixed set of propagation weights.
pub struct Propagator {
    weights: AffinityField,
    cfg: PropagationConfig,
    current: ProbabilityMap,
    done: usize,
}

impl Propagator {
    pub fn new(p: &ProbabilityMap, affinity: &AffinityField, cfg: &PropagationConfig) -> Result<Self> {
        check_shapes(p, affinity)?;
        Ok(Propagator {
            weights: propagation_weights(affinity, cfg)?,
            cfg: *cfg,
            current: p.clone(),
            done: 0,
        })
    }

    pub fn step(&mut self) -> Result<&ProbabilityMap> {
        self.current = refine_step(&self.current, &self.weights, &self.cfg)?;
        self.done += 1;
        Ok(&self.current)
    }

    /// Steps until `iterations` have been applied in total.
    pub fn advance_to(&mut self, iterations: usize) -> Result<&ProbabilityMap> {
        while self.done < iterations {
            self.step()?;
        }
        Ok(&self.current)
    }

    pub fn current(&self) -> &ProbabilityMap {
        &self.current
    }

    pub fn iterations_done(&self) -> usize {
        self.done
    }

    pub fn into_current(self) -> ProbabilityMap {
        self.current
    }
}

/// Maps the affinity once, then applies `cfg.iterations` refinement steps.
pub fn propagate(p: &ProbabilityMap, affinity: &AffinityField, cfg: &PropagationConfig) -> Result<ProbabilityMap> {
    let mut prop = Propagator::new(p, affinity, cfg)?;
    prop.advance_to(cfg.iterations)?;
    Ok(prop.into_current())
}
