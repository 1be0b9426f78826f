//! Reference focal affinity loss, its gradient with respect to the logits,
//! and affinity-head bias initialization.
//!
//! Each valid affinity entry contributes a focal term
//! `-(1 - p_t)^gamma * ln(p_t)` where `p = sigmoid(logit)` and `p_t` is `p`
//! for a positive ground truth and `1 - p` otherwise. Terms are multiplied by
//! a per-pixel, per-rate weight, summed over directions and rates, averaged
//! over counted pixels (pixels with at least one valid entry) and scaled by
//! `beta`.

use std::fmt;
use std::str::FromStr;

use crate::affinity::{neighbor_category, AffinityField, CategoryHistogram, RateSet, CATEGORIES, DIRECTIONS};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-7;

/// Upper bound on any reweighting factor.
pub const MAX_WEIGHT: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Every entry weighs 1.
    Baseline,
    /// Balanced inverse frequency of positive and negative signals.
    Signal,
    /// Inverse frequency of the pixel's neighbor category, relative to `n8`.
    Neighbor,
    /// Square root of the neighbor weight.
    Sqrt,
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Scheme::Baseline),
            "signal" => Ok(Scheme::Signal),
            "neighbor" => Ok(Scheme::Neighbor),
            "sqrt" => Ok(Scheme::Sqrt),
            other => Err(Error::InvalidArgument(format!(
                "unknown weighting scheme {other:?} (expected baseline, signal, neighbor or sqrt)"
            ))),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Baseline => "baseline",
            Scheme::Signal => "signal",
            Scheme::Neighbor => "neighbor",
            Scheme::Sqrt => "sqrt",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub gamma: f64,
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { gamma: 2.0, beta: 1.2 }
    }
}

impl LossConfig {
    pub fn new(gamma: f64, beta: f64) -> Result<Self> {
        let cfg = LossConfig { gamma, beta };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be > 0, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Per-rate reweighting factors.
///
/// Category weights are indexed by neighbor category `n0..=n8`; signal
/// weights by ground truth (`[negative, positive]`). The scheme decides
/// which of the two is consulted.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    scheme: Scheme,
    rates: RateSet,
    category: Vec<[f64; CATEGORIES]>,
    signal: Vec<[f64; 2]>,
}

impl WeightTable {
    /// A table of ones for `rates`.
    pub fn uniform(rates: &RateSet) -> Self {
        WeightTable {
            scheme: Scheme::Baseline,
            rates: rates.clone(),
            category: vec![[1.0; CATEGORIES]; rates.len()],
            signal: vec![[1.0; 2]; rates.len()],
        }
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn rates(&self) -> &RateSet {
        &self.rates
    }

    pub fn category_weights(&self, rate_index: usize) -> &[f64; CATEGORIES] {
        &self.category[rate_index]
    }

    pub fn category_weight(&self, rate_index: usize, category: usize) -> f64 {
        self.category[rate_index][category]
    }

    /// `[negative, positive]` weights at one rate.
    pub fn signal_weights(&self, rate_index: usize) -> [f64; 2] {
        self.signal[rate_index]
    }

    /// Weight of one entry given its pixel's category and its ground truth.
    #[inline]
    pub fn weight(&self, rate_index: usize, category: u8, positive: bool) -> f64 {
        match self.scheme {
            Scheme::Signal => self.signal[rate_index][positive as usize],
            _ => self.category[rate_index][category as usize],
        }
    }
}

/// Derives the weighting table for `scheme` from category statistics.
///
/// Categories that never occur borrow the weight of the nearest category
/// that does (ties go to the higher category). If `n8` itself never
/// occurs, the highest occurring category serves as the reference, so the
/// `n8` weight stays 1. Every weight is capped at [`MAX_WEIGHT`].
///
/// ```
/// use affinity_lab::affinity::{expand_rate_set, CategoryHistogram};
/// use affinity_lab::loss::{build_weight_table, Scheme};
/// use affinity_lab::tensor_io::LabelMap;
///
/// let rates = expand_rate_set("1").unwrap();
/// let mut hist = CategoryHistogram::new(&rates);
/// hist.accumulate(&LabelMap::filled(10, 10, 0).unwrap());
/// // n3: 4%, n5: 32%, n8: 64%
/// let w = build_weight_table(&hist, Scheme::Neighbor).unwrap();
/// assert_eq!(w.category_weight(0, 8), 1.0);
/// assert_eq!(w.category_weight(0, 3), 16.0);
/// ```
pub fn build_weight_table(hist: &CategoryHistogram, scheme: Scheme) -> Result<WeightTable> {
    let rates = hist.rates();
    let mut table = WeightTable::uniform(rates);
    table.scheme = scheme;
    for r in 0..rates.len() {
        if hist.counted(r) == 0 {
            return Err(Error::InvalidArgument(format!(
                "no counted pixels for rate {}",
                rates.rates()[r]
            )));
        }
        match scheme {
            Scheme::Baseline => {}
            Scheme::Signal => {
                let pi = hist.positive_frequency(r).ok_or(Error::Empty)?;
                table.signal[r] = [cap(0.5 / (1.0 - pi)), cap(0.5 / pi)];
            }
            Scheme::Neighbor | Scheme::Sqrt => {
                let w = neighbor_weights(&hist.frequencies(r));
                table.category[r] = if scheme == Scheme::Sqrt { w.map(f64::sqrt) } else { w };
            }
        }
    }
    Ok(table)
}

fn cap(w: f64) -> f64 {
    if w.is_nan() {
        MAX_WEIGHT
    } else {
        w.min(MAX_WEIGHT)
    }
}

fn neighbor_weights(freq: &[f64; CATEGORIES]) -> [f64; CATEGORIES] {
    let reference = freq
        .iter()
        .rev()
        .copied()
        .find(|&f| f > 0.0)
        .expect("at least one counted pixel");
    let mut raw = [f64::NAN; CATEGORIES];
    for k in 0..CATEGORIES {
        if freq[k] > 0.0 {
            raw[k] = cap(reference / freq[k]);
        }
    }
    let mut out = raw;
    for k in 0..CATEGORIES {
        if raw[k].is_nan() {
            let donor = (1..CATEGORIES)
                .flat_map(|dist| [k + dist, k.wrapping_sub(dist)])
                .find(|&c| c < CATEGORIES && !raw[c].is_nan())
                .expect("at least one occurring category");
            out[k] = raw[donor];
        }
    }
    out
}

/// Logistic sigmoid, evaluated without overflow.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-(1 - p_t)^gamma * ln(p_t)` with `p` clamped to `[eps, 1 - eps]`.
pub fn focal_loss(p: f64, positive: bool, gamma: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let pt = if positive { p } else { 1.0 - p };
    -(1.0 - pt).powf(gamma) * pt.ln()
}

/// Focal term of one logit and its derivative with respect to that logit.
pub fn focal_term_with_grad(logit: f64, positive: bool, gamma: f64) -> (f64, f64) {
    let p = sigmoid(logit);
    let clamped = !(PROB_EPS..=1.0 - PROB_EPS).contains(&p);
    let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let (pt, dpt) = if positive {
        (pc, p * (1.0 - p))
    } else {
        (1.0 - pc, -p * (1.0 - p))
    };
    let q = 1.0 - pt;
    let log_pt = pt.ln();
    let value = -q.powf(gamma) * log_pt;
    if clamped {
        return (value, 0.0);
    }
    let dfocal = if gamma == 0.0 {
        -1.0 / pt
    } else {
        gamma * q.powf(gamma - 1.0) * log_pt - q.powf(gamma) / pt
    };
    (value, dfocal * dpt)
}

/// Result of a loss evaluation.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    /// Pixels with at least one valid entry; the mean runs over these.
    pub counted_pixels: usize,
    pub grad: Option<AffinityField>,
}

/// The scalar affinity loss.
pub fn affinity_loss(
    logits: &AffinityField,
    gt: &AffinityField,
    weights: &WeightTable,
    cfg: &LossConfig,
) -> Result<f64> {
    evaluate(logits, gt, weights, cfg, false).map(|o| o.loss)
}

/// Gradient of [`affinity_loss`] with respect to every logit; zero at
/// invalid entries.
pub fn affinity_loss_grad(
    logits: &AffinityField,
    gt: &AffinityField,
    weights: &WeightTable,
    cfg: &LossConfig,
) -> Result<AffinityField> {
    evaluate(logits, gt, weights, cfg, true).map(|o| o.grad.expect("gradient requested"))
}

/// Loss and, optionally, its gradient in a single pass.
///
/// Accumulation is sequential in memory order (rate, direction, row,
/// column) in double precision, so the value is reproducible bit for bit.
pub fn evaluate(
    logits: &AffinityField,
    gt: &AffinityField,
    weights: &WeightTable,
    cfg: &LossConfig,
    with_grad: bool,
) -> Result<LossOutput> {
    cfg.validate()?;
    logits.check_same_shape(gt)?;
    if weights.rates() != gt.rates() {
        return Err(Error::ShapeMismatch(
            "weight table was built for a different rate set".into(),
        ));
    }
    if logits.mask() != gt.mask() {
        return Err(Error::ShapeMismatch(
            "logit and ground-truth validity masks differ".into(),
        ));
    }
    if let Some(k) = gt
        .values()
        .iter()
        .zip(gt.mask())
        .position(|(&v, &ok)| ok && v != 0.0 && v != 1.0)
    {
        return Err(Error::InvalidArgument(format!(
            "ground truth is not binary at entry {k}"
        )));
    }
    if let Some(k) = logits.values().iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite logit at entry {k}")));
    }

    let plane = gt.height() * gt.width();
    let num_rates = gt.rates().len();
    let categories: Vec<Vec<Option<u8>>> = (0..num_rates)
        .map(|r| neighbor_category(gt, r))
        .collect::<Result<_>>()?;
    let counted_pixels = (0..plane)
        .filter(|&p| categories.iter().any(|c| c[p].is_some()))
        .count();
    if counted_pixels == 0 {
        return Err(Error::Empty);
    }
    let scale = cfg.beta / counted_pixels as f64;

    let mut grad = with_grad.then(|| logits.map_valid(|_| 0.0));
    let mut total = 0.0f64;
    let (z, y, mask) = (logits.values(), gt.values(), gt.mask());
    for r in 0..num_rates {
        for d in 0..DIRECTIONS {
            let base = (r * DIRECTIONS + d) * plane;
            for p in 0..plane {
                let k = base + p;
                if !mask[k] {
                    continue;
                }
                let positive = y[k] == 1.0;
                let category = categories[r][p].expect("valid entry implies counted pixel");
                let w = weights.weight(r, category, positive);
                let (value, dvalue) = focal_term_with_grad(z[k], positive, cfg.gamma);
                total += w * value;
                if let Some(g) = grad.as_mut() {
                    g.values_mut()[k] = scale * w * dvalue;
                }
            }
        }
    }
    Ok(LossOutput {
        loss: total * scale,
        counted_pixels,
        grad,
    })
}

/// Affinity-head bias for a positive-signal frequency `pi`:
/// `-ln(pi / (1 - pi))`.
pub fn bias_init(pi: f64) -> Result<f64> {
    if !(pi > 0.0 && pi < 1.0) {
        return Err(Error::InvalidArgument(format!("frequency must lie in (0, 1), got {pi}")));
    }
    Ok(-(pi / (1.0 - pi)).ln())
}
