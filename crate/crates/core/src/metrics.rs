//! Segmentation and affinity-quality metrics.

use rayon::prelude::*;

use crate::affinity::{neighbor_category, AffinityField, Rate, CATEGORIES, DIRECTIONS};
use crate::error::{Error, Result};
use crate::tensor_io::LabelMap;

/// `C x C` counts; rows are ground truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Confusion counts of `pred` against `gt`, skipping pixels ignored in `gt`.
    pub fn from_maps(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Result<Self> {
        let mut m = ConfusionMatrix::new(classes);
        m.accumulate(pred, gt)?;
        Ok(m)
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::ShapeMismatch(format!(
                "prediction is {}x{}, ground truth is {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        let c = self.classes;
        let ignore = gt.ignore_value();
        let partial = pred
            .data()
            .par_chunks(4096)
            .zip(gt.data().par_chunks(4096))
            .map(|(p, g)| {
                let mut local = vec![0u64; c * c];
                for (&p, &g) in p.iter().zip(g) {
                    if g == ignore {
                        continue;
                    }
                    let (p, g) = (p as usize, g as usize);
                    if g >= c || p >= c {
                        return Err(Error::InvalidArgument(format!(
                            "class index {} out of range for {c} classes",
                            g.max(p)
                        )));
                    }
                    local[g * c + p] += 1;
                }
                Ok(local)
            })
            .collect::<Result<Vec<_>>>()?;
        for local in partial {
            for (dst, v) in self.counts.iter_mut().zip(local) {
                *dst += v;
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Intersection over union per class; `None` when the class appears in
    /// neither ground truth nor prediction.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let c = self.classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..c).map(|p| self.get(k, p)).sum();
                let col: u64 = (0..c).map(|g| self.get(g, k)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> Result<f64> {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        if present.is_empty() {
            return Err(Error::Empty);
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Mean intersection over union over the classes present in either map.
///
/// ```
/// use affinity_lab::metrics::miou;
/// use affinity_lab::tensor_io::LabelMap;
///
/// let gt = LabelMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
/// let pred = LabelMap::new(2, 2, vec![0, 1, 1, 1]).unwrap();
/// let score = miou(&pred, &gt, 2).unwrap();
/// assert!((score - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
/// ```
pub fn miou(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Result<f64> {
    ConfusionMatrix::from_maps(pred, gt, classes)?.miou()
}

/// Per-rate, per-category affinity accuracy counts.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyTable {
    rates: Vec<Rate>,
    total: Vec<[u64; CATEGORIES]>,
    correct: Vec<[u64; CATEGORIES]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracyRow {
    pub rate: Rate,
    pub category: usize,
    pub total: u64,
    pub correct: u64,
}

impl AccuracyRow {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

impl AccuracyTable {
    /// Accuracy of one group, `None` when the group is empty.
    pub fn accuracy(&self, rate_index: usize, category: usize) -> Option<f64> {
        let t = self.total[rate_index][category];
        (t > 0).then(|| self.correct[rate_index][category] as f64 / t as f64)
    }

    pub fn counts(&self, rate_index: usize, category: usize) -> (u64, u64) {
        (self.total[rate_index][category], self.correct[rate_index][category])
    }

    /// Non-empty groups in rate, then category order.
    pub fn rows(&self) -> Vec<AccuracyRow> {
        let mut rows = Vec::new();
        for (r, &rate) in self.rates.iter().enumerate() {
            for k in 0..CATEGORIES {
                if self.total[r][k] > 0 {
                    rows.push(AccuracyRow {
                        rate,
                        category: k,
                        total: self.total[r][k],
                        correct: self.correct[r][k],
                    });
                }
            }
        }
        rows
    }

    /// Accuracy pooled over every group.
    pub fn overall(&self) -> Option<f64> {
        let t: u64 = self.total.iter().flatten().sum();
        let c: u64 = self.correct.iter().flatten().sum();
        (t > 0).then(|| c as f64 / t as f64)
    }

    /// Adds another table over the same rates.
    pub fn merge(&mut self, other: &AccuracyTable) -> Result<()> {
        if self.rates != other.rates {
            return Err(Error::ShapeMismatch("accuracy tables over different rates".into()));
        }
        for r in 0..self.rates.len() {
            for k in 0..CATEGORIES {
                self.total[r][k] += other.total[r][k];
                self.correct[r][k] += other.correct[r][k];
            }
        }
        Ok(())
    }

    /// `rate_h,rate_w,category,total,correct,accuracy` rows for non-empty groups.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rate_h,rate_w,category,total,correct,accuracy\n");
        for row in self.rows() {
            out.push_str(&format!(
                "{},{},{},{},{},{:.12}\n",
                row.rate.h,
                row.rate.w,
                row.category,
                row.total,
                row.correct,
                row.accuracy()
            ));
        }
        out
    }
}

/// Affinity accuracy grouped by rate and by the pixel's neighbor category.
/// An entry is correct when `pred > 0.5` agrees with the binary ground
/// truth; only entries valid in `gt` are scored.
pub fn affinity_accuracy(pred: &AffinityField, gt: &AffinityField) -> Result<AccuracyTable> {
    pred.check_same_shape(gt)?;
    let rates = gt.rates().rates().to_vec();
    let plane = gt.height() * gt.width();
    let mut table = AccuracyTable {
        rates: rates.clone(),
        total: vec![[0; CATEGORIES]; rates.len()],
        correct: vec![[0; CATEGORIES]; rates.len()],
    };
    for r in 0..rates.len() {
        let categories = neighbor_category(gt, r)?;
        for d in 0..DIRECTIONS {
            let base = (r * DIRECTIONS + d) * plane;
            for (p, cat) in categories.iter().enumerate() {
                let k = base + p;
                if !gt.mask()[k] {
                    continue;
                }
                let cat = cat.expect("valid entry implies counted pixel") as usize;
                table.total[r][cat] += 1;
                if (pred.values()[k] > 0.5) == (gt.values()[k] > 0.5) {
                    table.correct[r][cat] += 1;
                }
            }
        }
    }
    Ok(table)
}
