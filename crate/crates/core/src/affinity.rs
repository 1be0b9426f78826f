//! Dilated neighborhoods, binary ground-truth affinity and neighbor-category
//! statistics.
//!
//! For a rate `(r1, r2)` a pixel at `(i, j)` is paired with the eight pixels
//! `(i + s, j + t)` for `s in {-r1, 0, r1}`, `t in {-r2, 0, r2}`, excluding
//! the pixel itself. Directions are numbered in scan order (`s` ascending,
//! then `t` ascending), so direction `d` and direction `7 - d` always point
//! in opposite ways. A field over a rate set has `8 * |R|` channels and
//! channel `rate_index * 8 + direction` holds one direction of one rate.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor_io::{LabelMap, Tensor};

pub const DIRECTIONS: usize = 8;
pub const CATEGORIES: usize = 9;

/// A dilation rate: `h` is the vertical step, `w` the horizontal one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rate {
    pub h: usize,
    pub w: usize,
}

impl Rate {
    pub fn new(h: usize, w: usize) -> Self {
        Rate { h, w }
    }

    pub fn square(r: usize) -> Self {
        Rate { h: r, w: r }
    }

    /// The eight neighbor offsets `(di, dj)` in direction order.
    pub fn offsets(self) -> [(isize, isize); DIRECTIONS] {
        let (h, w) = (self.h as isize, self.w as isize);
        [
            (-h, -w),
            (-h, 0),
            (-h, w),
            (0, -w),
            (0, w),
            (h, -w),
            (h, 0),
            (h, w),
        ]
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.h == self.w {
            write!(f, "{}", self.h)
        } else {
            write!(f, "({},{})", self.h, self.w)
        }
    }
}

/// Index of the direction pointing back along direction `d`.
pub const fn reverse_direction(d: usize) -> usize {
    DIRECTIONS - 1 - d
}

/// Ordered, duplicate-free list of expanded dilation rates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RateSet {
    rates: Vec<Rate>,
}

impl RateSet {
    pub fn new(rates: Vec<Rate>) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::InvalidArgument("rate set is empty".into()));
        }
        for (k, r) in rates.iter().enumerate() {
            if r.h == 0 || r.w == 0 {
                return Err(Error::InvalidArgument(format!("rate {r} has a zero step")));
            }
            if rates[..k].contains(r) {
                return Err(Error::InvalidArgument(format!("duplicate rate ({},{})", r.h, r.w)));
            }
        }
        Ok(RateSet { rates })
    }

    pub fn rates(&self) -> &[Rate] {
        &self.rates
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    /// Channel count of an affinity field over this rate set.
    pub fn channels(&self) -> usize {
        DIRECTIONS * self.rates.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = Rate> + '_ {
        self.rates.iter().copied()
    }
}

impl FromStr for RateSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        expand_rate_set(s)
    }
}

/// Parses a comma-separated rate list. A scalar `n` stands for `(n, n)`; a
/// tuple `(a, b)` with `a != b` stands for both `(a, b)` and `(b, a)`.
///
/// ```
/// use affinity_lab::affinity::{expand_rate_set, Rate};
///
/// let rates = expand_rate_set("8,(12,24),16").unwrap();
/// assert_eq!(
///     rates.rates(),
///     &[Rate::new(8, 8), Rate::new(12, 24), Rate::new(24, 12), Rate::new(16, 16)]
/// );
/// ```
pub fn expand_rate_set(input: &str) -> Result<RateSet> {
    let fail = |reason: String| Error::RateList {
        input: input.to_string(),
        reason,
    };
    let mut parser = RateParser {
        chars: input.char_indices().peekable(),
    };
    let mut out: Vec<Rate> = Vec::new();
    let push = |r: Rate, out: &mut Vec<Rate>| -> Result<()> {
        if out.contains(&r) {
            return Err(fail(format!("duplicate rate ({},{})", r.h, r.w)));
        }
        out.push(r);
        Ok(())
    };
    loop {
        parser.skip_ws();
        if parser.eat('(') {
            let a = parser.int().map_err(&fail)?;
            parser.expect(',').map_err(&fail)?;
            let b = parser.int().map_err(&fail)?;
            parser.expect(')').map_err(&fail)?;
            push(Rate::new(a, b), &mut out)?;
            if a != b {
                push(Rate::new(b, a), &mut out)?;
            }
        } else {
            let n = parser.int().map_err(&fail)?;
            push(Rate::square(n), &mut out)?;
        }
        parser.skip_ws();
        match parser.chars.next() {
            None => break,
            Some((_, ',')) => continue,
            Some((pos, c)) => return Err(fail(format!("unexpected {c:?} at byte {pos}"))),
        }
    }
    RateSet::new(out).map_err(|e| fail(e.to_string()))
}

struct RateParser<'a> {
    chars: std::iter::Peekable<std::str::CharIndices<'a>>,
}

impl RateParser<'_> {
    fn skip_ws(&mut self) {
        while self.chars.next_if(|(_, c)| c.is_whitespace()).is_some() {}
    }

    fn eat(&mut self, want: char) -> bool {
        self.chars.next_if(|&(_, c)| c == want).is_some()
    }

    fn expect(&mut self, want: char) -> std::result::Result<(), String> {
        self.skip_ws();
        match self.chars.next() {
            Some((_, c)) if c == want => Ok(()),
            Some((pos, c)) => Err(format!("expected {want:?} at byte {pos}, found {c:?}")),
            None => Err(format!("expected {want:?}, found end of input")),
        }
    }

    fn int(&mut self) -> std::result::Result<usize, String> {
        self.skip_ws();
        if self.chars.peek().is_some_and(|&(_, c)| c == '-') {
            return Err("negative rate".into());
        }
        let mut digits = String::new();
        while let Some((_, c)) = self.chars.next_if(|(_, c)| c.is_ascii_digit()) {
            digits.push(c);
        }
        if digits.is_empty() {
            return Err(match self.chars.peek() {
                Some(&(pos, c)) => format!("expected an integer at byte {pos}, found {c:?}"),
                None => "expected an integer, found end of input".into(),
            });
        }
        let n: usize = digits
            .parse()
            .map_err(|_| format!("rate {digits} is too large"))?;
        if n == 0 {
            return Err("zero rate".into());
        }
        Ok(n)
    }
}

/// Per-pixel, per-rate, per-direction values with a validity mask.
///
/// Values may be binary ground truth, logits or probabilities; the field
/// does not track which. Invalid entries always hold `0.0`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityField {
    height: usize,
    width: usize,
    rates: RateSet,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl AffinityField {
    /// A zero field whose mask marks every in-grid neighbor as valid.
    pub fn geometric(height: usize, width: usize, rates: &RateSet) -> Self {
        let plane = height * width;
        let mut valid = vec![false; rates.channels() * plane];
        for (r, rate) in rates.iter().enumerate() {
            for (d, (di, dj)) in rate.offsets().into_iter().enumerate() {
                let base = (r * DIRECTIONS + d) * plane;
                for i in 0..height {
                    for j in 0..width {
                        valid[base + i * width + j] =
                            neighbor(i, j, di, dj, height, width).is_some();
                    }
                }
            }
        }
        AffinityField {
            height,
            width,
            rates: rates.clone(),
            values: vec![0.0; valid.len()],
            valid,
        }
    }

    /// Builds a field from raw parts laid out as `[8|R|, H, W]`.
    pub fn from_parts(
        height: usize,
        width: usize,
        rates: &RateSet,
        mut values: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        let n = rates.channels() * height * width;
        if values.len() != n || valid.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "affinity field [{}, {height}, {width}] needs {n} entries, got {} values and {} mask entries",
                rates.channels(),
                values.len(),
                valid.len()
            )));
        }
        for (v, &ok) in values.iter_mut().zip(&valid) {
            if !ok {
                *v = 0.0;
            }
        }
        Ok(AffinityField {
            height,
            width,
            rates: rates.clone(),
            values,
            valid,
        })
    }

    /// Reads a `[8|R|, H, W]` float tensor. Without an explicit mask the
    /// mask is geometric (in-grid neighbors only).
    pub fn from_tensors(values: &Tensor, valid: Option<&Tensor>, rates: &RateSet) -> Result<Self> {
        let dims = values.dims();
        if dims.len() != 3 || dims[0] != rates.channels() {
            return Err(Error::ShapeMismatch(format!(
                "affinity tensor has dims {dims:?}, expected [{}, H, W] for {} rates",
                rates.channels(),
                rates.len()
            )));
        }
        let data = values
            .as_f32()
            .ok_or_else(|| Error::InvalidArgument("affinity tensor must be float32".into()))?;
        let (h, w) = (dims[1], dims[2]);
        let mask = match valid {
            Some(m) => {
                if m.dims() != dims {
                    return Err(Error::ShapeMismatch(format!(
                        "validity tensor dims {:?} differ from affinity dims {dims:?}",
                        m.dims()
                    )));
                }
                let bytes = m
                    .as_u8()
                    .ok_or_else(|| Error::InvalidArgument("validity tensor must be uint8".into()))?;
                bytes.iter().map(|&b| b != 0).collect()
            }
            None => AffinityField::geometric(h, w, rates).valid,
        };
        AffinityField::from_parts(h, w, rates, data.iter().map(|&x| x as f64).collect(), mask)
    }

    /// Values as float32 `[8|R|, H, W]` and the mask as uint8 of the same shape.
    pub fn to_tensors(&self) -> Result<(Tensor, Tensor)> {
        let dims = vec![self.channels(), self.height, self.width];
        let values = Tensor::from_f32(dims.clone(), self.values.iter().map(|&x| x as f32).collect())?;
        let mask = Tensor::from_u8(dims, self.valid.iter().map(|&b| b as u8).collect())?;
        Ok((values, mask))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rates(&self) -> &RateSet {
        &self.rates
    }

    pub fn channels(&self) -> usize {
        self.rates.channels()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn index(&self, rate: usize, dir: usize, i: usize, j: usize) -> usize {
        ((rate * DIRECTIONS + dir) * self.height + i) * self.width + j
    }

    #[inline]
    pub fn value(&self, rate: usize, dir: usize, i: usize, j: usize) -> f64 {
        self.values[self.index(rate, dir, i, j)]
    }

    #[inline]
    pub fn is_valid(&self, rate: usize, dir: usize, i: usize, j: usize) -> bool {
        self.valid[self.index(rate, dir, i, j)]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&b| b).count()
    }

    /// Applies `f` to every valid value; invalid entries stay zero.
    pub fn map_valid(&self, f: impl Fn(f64) -> f64 + Sync) -> AffinityField {
        let mut out = self.clone();
        out.values
            .par_iter_mut()
            .zip(self.valid.par_iter())
            .for_each(|(v, &ok)| *v = if ok { f(*v) } else { 0.0 });
        out
    }

    /// Replaces this field's mask with `other`'s, zeroing newly invalid entries.
    pub fn with_mask_of(&self, other: &AffinityField) -> Result<AffinityField> {
        self.check_same_shape(other)?;
        AffinityField::from_parts(
            self.height,
            self.width,
            &self.rates,
            self.values.clone(),
            other.valid.clone(),
        )
    }

    pub fn check_same_shape(&self, other: &AffinityField) -> Result<()> {
        if self.height != other.height || self.width != other.width || self.rates != other.rates {
            return Err(Error::ShapeMismatch(format!(
                "affinity fields differ: {}x{} over {} rates vs {}x{} over {} rates",
                self.height,
                self.width,
                self.rates.len(),
                other.height,
                other.width,
                other.rates.len()
            )));
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn neighbor(
    i: usize,
    j: usize,
    di: isize,
    dj: isize,
    height: usize,
    width: usize,
) -> Option<(usize, usize)> {
    let ni = i.checked_add_signed(di)?;
    let nj = j.checked_add_signed(dj)?;
    (ni < height && nj < width).then_some((ni, nj))
}

/// Binary affinity derived from labels: 1 where the two pixels share a class,
/// 0 otherwise. Entries whose neighbor leaves the grid, or where either end is
/// ignored, are invalid.
pub fn ground_truth_affinity(labels: &LabelMap, rates: &RateSet) -> AffinityField {
    let (h, w) = (labels.height(), labels.width());
    let plane = h * w;
    let data = labels.data();
    let ignore = labels.ignore_value();
    let mut values = vec![0.0; rates.channels() * plane];
    let mut valid = vec![false; rates.channels() * plane];
    let offsets: Vec<(isize, isize)> = rates.iter().flat_map(|r| r.offsets()).collect();
    values
        .par_chunks_mut(plane)
        .zip(valid.par_chunks_mut(plane))
        .zip(offsets.par_iter())
        .for_each(|((vals, mask), &(di, dj))| {
            for i in 0..h {
                for j in 0..w {
                    let here = data[i * w + j];
                    if here == ignore {
                        continue;
                    }
                    if let Some((ni, nj)) = neighbor(i, j, di, dj, h, w) {
                        let there = data[ni * w + nj];
                        if there != ignore {
                            mask[i * w + j] = true;
                            vals[i * w + j] = if here == there { 1.0 } else { 0.0 };
                        }
                    }
                }
            }
        });
    AffinityField {
        height: h,
        width: w,
        rates: rates.clone(),
        values,
        valid,
    }
}

/// Number of positive signals among the valid directions of each pixel at one
/// rate; `None` for pixels with no valid direction (including ignored ones).
pub fn neighbor_category(gt: &AffinityField, rate_index: usize) -> Result<Vec<Option<u8>>> {
    if rate_index >= gt.rates.len() {
        return Err(Error::InvalidArgument(format!(
            "rate index {rate_index} out of range for {} rates",
            gt.rates.len()
        )));
    }
    let plane = gt.height * gt.width;
    let base = rate_index * DIRECTIONS * plane;
    Ok((0..plane)
        .map(|p| {
            let mut valid = 0u8;
            let mut positive = 0u8;
            for d in 0..DIRECTIONS {
                let k = base + d * plane + p;
                if gt.valid[k] {
                    valid += 1;
                    if gt.values[k] > 0.5 {
                        positive += 1;
                    }
                }
            }
            (valid > 0).then_some(positive)
        })
        .collect())
}

/// Pooled counts of neighbor categories `n0..=n8` for each rate, plus the
/// raw positive/valid signal counts needed for signal-level weighting.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryHistogram {
    rates: RateSet,
    counts: Vec<[u64; CATEGORIES]>,
    positive_signals: Vec<u64>,
    valid_signals: Vec<u64>,
}

impl CategoryHistogram {
    pub fn new(rates: &RateSet) -> Self {
        CategoryHistogram {
            rates: rates.clone(),
            counts: vec![[0; CATEGORIES]; rates.len()],
            positive_signals: vec![0; rates.len()],
            valid_signals: vec![0; rates.len()],
        }
    }

    /// Rebuilds a histogram from stored counts: one category row and one
    /// `(positive, valid)` signal pair per rate.
    pub fn from_counts(
        rates: &RateSet,
        counts: Vec<[u64; CATEGORIES]>,
        signals: Vec<(u64, u64)>,
    ) -> Result<Self> {
        if counts.len() != rates.len() || signals.len() != rates.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} rates but {} count rows and {} signal pairs",
                rates.len(),
                counts.len(),
                signals.len()
            )));
        }
        if signals.iter().any(|&(pos, total)| pos > total) {
            return Err(Error::InvalidArgument(
                "positive signals exceed valid signals".into(),
            ));
        }
        Ok(CategoryHistogram {
            rates: rates.clone(),
            counts,
            positive_signals: signals.iter().map(|s| s.0).collect(),
            valid_signals: signals.iter().map(|s| s.1).collect(),
        })
    }

    /// Adds every counted pixel of `labels`.
    pub fn accumulate(&mut self, labels: &LabelMap) {
        let gt = ground_truth_affinity(labels, &self.rates);
        self.accumulate_field(&gt);
    }

    pub fn accumulate_field(&mut self, gt: &AffinityField) {
        for r in 0..self.rates.len() {
            for c in neighbor_category(gt, r).expect("rate index in range").into_iter().flatten() {
                self.counts[r][c as usize] += 1;
            }
            let plane = gt.height * gt.width;
            let lo = r * DIRECTIONS * plane;
            let hi = lo + DIRECTIONS * plane;
            for (v, &ok) in gt.values[lo..hi].iter().zip(&gt.valid[lo..hi]) {
                if ok {
                    self.valid_signals[r] += 1;
                    if *v > 0.5 {
                        self.positive_signals[r] += 1;
                    }
                }
            }
        }
    }

    pub fn rates(&self) -> &RateSet {
        &self.rates
    }

    pub fn counts(&self, rate_index: usize) -> &[u64; CATEGORIES] {
        &self.counts[rate_index]
    }

    pub fn counted(&self, rate_index: usize) -> u64 {
        self.counts[rate_index].iter().sum()
    }

    /// Category frequencies at one rate. All zero when no pixel was counted.
    pub fn frequencies(&self, rate_index: usize) -> [f64; CATEGORIES] {
        let total = self.counted(rate_index);
        let mut out = [0.0; CATEGORIES];
        if total > 0 {
            for (f, &c) in out.iter_mut().zip(&self.counts[rate_index]) {
                *f = c as f64 / total as f64;
            }
        }
        out
    }

    pub fn frequency(&self, rate_index: usize, category: usize) -> f64 {
        self.frequencies(rate_index)[category]
    }

    /// Fraction of valid signals that are positive at one rate.
    pub fn positive_frequency(&self, rate_index: usize) -> Option<f64> {
        let total = self.valid_signals[rate_index];
        (total > 0).then(|| self.positive_signals[rate_index] as f64 / total as f64)
    }

    pub fn signal_counts(&self, rate_index: usize) -> (u64, u64) {
        (self.positive_signals[rate_index], self.valid_signals[rate_index])
    }

    /// One row per rate: `rate_h,rate_w,counted,n0,...,n8` with frequencies.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rate_h,rate_w,counted");
        for k in 0..CATEGORIES {
            out.push_str(&format!(",n{k}"));
        }
        out.push('\n');
        for (r, rate) in self.rates.iter().enumerate() {
            out.push_str(&format!("{},{},{}", rate.h, rate.w, self.counted(r)));
            for f in self.frequencies(r) {
                out.push_str(&format!(",{f:.12}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Pools neighbor categories over a set of label maps.
pub fn category_histogram<'a>(
    maps: impl IntoIterator<Item = &'a LabelMap>,
    rates: &RateSet,
) -> Result<CategoryHistogram> {
    let mut hist = CategoryHistogram::new(rates);
    let mut seen = 0usize;
    for m in maps {
        hist.accumulate(m);
        seen += 1;
    }
    if seen == 0 {
        return Err(Error::Empty);
    }
    Ok(hist)
}
