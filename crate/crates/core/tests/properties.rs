mod common;

use affinity_lab::affinity::{
    category_histogram, expand_rate_set, ground_truth_affinity, AffinityField, CategoryHistogram,
};
use affinity_lab::loss::{build_weight_table, evaluate, focal_loss, LossConfig, Scheme};
use affinity_lab::metrics::{affinity_accuracy, miou};
use affinity_lab::propagation::{
    propagate, refine_step, symmetrize, AffinityMode, ProbabilityMap, PropagationConfig,
};
use affinity_lab::synth::{
    corrupt_predictions, gen_voronoi_labels, interior_error_rate, pixel_key, SynthConfig,
};
use affinity_lab::tensor_io::LabelMap;
use approx::assert_relative_eq;
use proptest::prelude::*;

use common::*;

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Xoshiro([u64; 4]);

impl Xoshiro {
    fn seeded(seed: u64) -> Self {
        let mut sm = seed;
        Xoshiro([splitmix(&mut sm), splitmix(&mut sm), splitmix(&mut sm), splitmix(&mut sm)])
    }

    fn next(&mut self) -> u64 {
        let s = &mut self.0;
        let out = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        out
    }
}

#[test]
fn pixel_keys_follow_nested_splitmix() {
    let first = |x: u64| {
        let mut s = x;
        splitmix(&mut s)
    };
    for (seed, stream, idx) in [(0u64, 1u64, 0u64), (7, 2, 4095), (u64::MAX, 1, 12345)] {
        assert_eq!(pixel_key(seed, stream, idx), first(first(first(seed) ^ stream) ^ idx));
    }
}

#[test]
fn voronoi_labels_match_nearest_site_oracle() {
    for seed in 0..20u64 {
        let cfg = SynthConfig {
            seed,
            height: 20 + seed as usize,
            width: 40 - seed as usize,
            num_classes: 3 + (seed as usize % 3),
            num_cells: 1 + seed as usize,
            ..SynthConfig::default()
        };
        let mut rng = Xoshiro::seeded(seed);
        let sites: Vec<(i64, i64)> = (0..cfg.num_cells)
            .map(|_| {
                let i = ((rng.next() as u128 * cfg.height as u128) >> 64) as i64;
                let j = ((rng.next() as u128 * cfg.width as u128) >> 64) as i64;
                (i, j)
            })
            .collect();
        let labels = gen_voronoi_labels(&cfg).unwrap();
        for i in 0..cfg.height as i64 {
            for j in 0..cfg.width as i64 {
                let dist = |&(si, sj): &(i64, i64)| (si - i).pow(2) + (sj - j).pow(2);
                let best = sites.iter().map(dist).min().unwrap();
                let nearest = sites.iter().position(|s| dist(s) == best).unwrap();
                assert_eq!(labels.get(i as usize, j as usize) as usize, nearest % cfg.num_classes);
            }
        }
    }
}

#[test]
fn more_flips_never_raise_miou() {
    for seed in 0..20u64 {
        let mut last = f64::INFINITY;
        for rate in [0.0, 0.02, 0.05, 0.1, 0.2, 0.4] {
            let cfg = SynthConfig {
                seed,
                flip_rate: rate,
                ..SynthConfig::default()
            };
            let labels = gen_voronoi_labels(&cfg).unwrap();
            let probs = corrupt_predictions(&labels, &cfg).unwrap();
            let score = miou(&probs.argmax(), &labels, cfg.num_classes).unwrap();
            assert!(score <= last, "seed {seed} rate {rate}: {score} > {last}");
            last = score;
        }
    }
}

#[test]
fn interior_error_rate_tracks_flip_rate() {
    for seed in 0..20u64 {
        let cfg = SynthConfig {
            seed,
            flip_rate: 0.10,
            ..SynthConfig::default()
        };
        let labels = gen_voronoi_labels(&cfg).unwrap();
        let probs = corrupt_predictions(&labels, &cfg).unwrap();
        let err = interior_error_rate(&labels, &probs, cfg.blur_radius);
        assert!((err - 0.10).abs() <= 0.01, "seed {seed}: {err}");
    }
}

#[test]
fn propagation_is_class_permutation_equivariant() {
    let rates = expand_rate_set("1,(2,3)").unwrap();
    let mut rng = TestRng::new(10);
    for _ in 0..20 {
        let (h, w, c) = (5 + rng.below(8), 5 + rng.below(8), 2 + rng.below(4));
        let p = random_probs(&mut rng, h, w, c);
        let a = random_affinity(&mut rng, h, w, &rates, 2.0);
        let mut perm: Vec<usize> = (0..c).collect();
        perm.rotate_left(1 + rng.below(c - 1));
        let cfg = PropagationConfig::default();
        let lhs = propagate(&p.permute_classes(&perm).unwrap(), &a, &cfg).unwrap();
        let rhs = propagate(&p, &a, &cfg).unwrap().permute_classes(&perm).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert_relative_eq!(*x, *y, epsilon = 1e-12);
        }
    }
}

#[test]
fn one_hot_labels_are_fixed_points_under_their_affinity() {
    let rates = expand_rate_set("1,2").unwrap();
    for seed in 0..10 {
        let cfg = SynthConfig {
            seed,
            height: 24,
            width: 24,
            ..SynthConfig::default()
        };
        let labels = gen_voronoi_labels(&cfg).unwrap();
        let gt = ground_truth_affinity(&labels, &rates);
        let p = ProbabilityMap::one_hot(&labels, cfg.num_classes).unwrap();
        let step_cfg = PropagationConfig {
            mode: AffinityMode::BinaryGt,
            ..PropagationConfig::default()
        };
        assert_eq!(refine_step(&p, &gt, &step_cfg).unwrap(), p);
    }
}

#[test]
fn symmetrize_keeps_ground_truth_and_averages_pairs() {
    let rates = expand_rate_set("1,(1,2)").unwrap();
    let mut rng = TestRng::new(11);
    let labels = random_labels(&mut rng, 12, 3, 0.1);
    let gt = ground_truth_affinity(&labels, &rates);
    assert_eq!(symmetrize(&gt), gt);

    let a = random_affinity(&mut rng, 6, 7, &rates, 1.0);
    let sym = symmetrize(&a);
    // (0,0) looks right at (0,1), which looks back left
    let fwd = a.value(0, 4, 0, 0);
    let back = a.value(0, 3, 0, 1);
    assert_relative_eq!(sym.value(0, 4, 0, 0), (fwd + back) / 2.0, epsilon = 1e-15);
    assert_relative_eq!(sym.value(0, 3, 0, 1), (fwd + back) / 2.0, epsilon = 1e-15);
}

#[test]
fn miou_matches_set_oracle_and_relabeling() {
    let mut rng = TestRng::new(12);
    for _ in 0..50 {
        let gt = random_labels(&mut rng, 20, 5, 0.1);
        let pred_data: Vec<u8> = (0..gt.data().len()).map(|_| rng.below(5) as u8).collect();
        let pred = LabelMap::new(gt.height(), gt.width(), pred_data).unwrap();
        let score = miou(&pred, &gt, 5).unwrap();
        assert!((score - set_miou(&pred, &gt)).abs() < 1e-12);

        let perm = [3u8, 0, 4, 1, 2];
        let relabel = |m: &LabelMap| {
            let data = m.data().iter().map(|&v| if v == 255 { v } else { perm[v as usize] }).collect();
            LabelMap::new(m.height(), m.width(), data).unwrap()
        };
        let relabeled = miou(&relabel(&pred), &relabel(&gt), 5).unwrap();
        assert!((score - relabeled).abs() < 1e-12);
    }
}

/// Category of pixel `(i, j)` at `rate` counted straight from the labels.
fn category_from_labels(labels: &LabelMap, h: i64, w: i64, i: i64, j: i64) -> Option<usize> {
    let here = labels.get(i as usize, j as usize);
    if here == 255 {
        return None;
    }
    let (mut valid, mut same) = (0, 0);
    for di in [-h, 0, h] {
        for dj in [-w, 0, w] {
            let (y, x) = (i + di, j + dj);
            if (di, dj) == (0, 0) || y < 0 || x < 0 || y >= labels.height() as i64 || x >= labels.width() as i64 {
                continue;
            }
            let there = labels.get(y as usize, x as usize);
            if there != 255 {
                valid += 1;
                same += (there == here) as usize;
            }
        }
    }
    (valid > 0).then_some(same)
}

#[test]
fn affinity_accuracy_matches_recount() {
    let rates = expand_rate_set("1,(2,3)").unwrap();
    let mut rng = TestRng::new(13);
    for _ in 0..20 {
        let labels = random_labels(&mut rng, 16, 3, 0.1);
        let gt = ground_truth_affinity(&labels, &rates);
        let pred = random_logits(&mut rng, &gt, 1.0).map_valid(|x| (x + 1.0) / 2.0);
        let table = affinity_accuracy(&pred, &gt).unwrap();

        let plane = labels.height() * labels.width();
        let mut expected = vec![[(0u64, 0u64); 9]; rates.len()];
        for (r, rate) in rates.iter().enumerate() {
            for d in 0..8 {
                for p in 0..plane {
                    let k = (r * 8 + d) * plane + p;
                    if !gt.mask()[k] {
                        continue;
                    }
                    let (i, j) = ((p / labels.width()) as i64, (p % labels.width()) as i64);
                    let cat = category_from_labels(&labels, rate.h as i64, rate.w as i64, i, j).unwrap();
                    expected[r][cat].0 += 1;
                    expected[r][cat].1 += ((pred.values()[k] > 0.5) == (gt.values()[k] == 1.0)) as u64;
                }
            }
        }
        for r in 0..rates.len() {
            for cat in 0..9 {
                assert_eq!(table.counts(r, cat), expected[r][cat]);
            }
        }

        let rows = table.rows();
        let total: u64 = rows.iter().map(|row| row.total).sum();
        let weighted: f64 = rows.iter().map(|row| row.accuracy() * row.total as f64).sum::<f64>() / total as f64;
        assert!((table.overall().unwrap() - weighted).abs() < 1e-12);
    }
}

#[test]
fn category_histogram_matches_recount() {
    let rates = expand_rate_set("1,(2,3)").unwrap();
    let mut rng = TestRng::new(14);
    let maps: Vec<LabelMap> = (0..10).map(|_| random_labels(&mut rng, 14, 3, 0.1)).collect();
    let hist = category_histogram(maps.iter(), &rates).unwrap();
    for (r, rate) in rates.iter().enumerate() {
        let mut counts = [0u64; 9];
        for m in &maps {
            for i in 0..m.height() as i64 {
                for j in 0..m.width() as i64 {
                    if let Some(cat) = category_from_labels(m, rate.h as i64, rate.w as i64, i, j) {
                        counts[cat] += 1;
                    }
                }
            }
        }
        assert_eq!(hist.counts(r), &counts);
    }
}

#[test]
fn neighbor_weights_are_frequency_ratios() {
    let rates = expand_rate_set("1").unwrap();
    let counts = vec![[0, 5, 10, 0, 20, 40, 0, 0, 25]];
    let hist = CategoryHistogram::from_counts(&rates, counts, vec![(30, 70)]).unwrap();
    let w = build_weight_table(&hist, Scheme::Neighbor).unwrap();
    // freq(n8) = 0.25 is the reference; n3 sits between n2 and n4 and takes n4
    let expect = [5.0, 5.0, 2.5, 1.25, 1.25, 0.625, 0.625, 1.0, 1.0];
    for (k, &e) in expect.iter().enumerate() {
        assert_relative_eq!(w.category_weight(0, k), e, max_relative = 1e-15);
    }
    // 30 positives among 70 valid entries
    let pi = 30.0 / 70.0;
    let signal = build_weight_table(&hist, Scheme::Signal).unwrap();
    assert_relative_eq!(signal.signal_weights(0)[1], 0.5 / pi, max_relative = 1e-15);
    assert_relative_eq!(signal.signal_weights(0)[0], 0.5 / (1.0 - pi), max_relative = 1e-15);
}

#[test]
fn loss_and_gradient_are_thread_count_independent() {
    let rates = expand_rate_set("1,2").unwrap();
    let cfg = SynthConfig::default();
    let labels = gen_voronoi_labels(&cfg).unwrap();
    let compute = || {
        let gt = ground_truth_affinity(&labels, &rates);
        let mut hist = CategoryHistogram::new(&rates);
        hist.accumulate_field(&gt);
        let weights = build_weight_table(&hist, Scheme::Sqrt).unwrap();
        let logits = gt.map_valid(|v| 2.0 * v - 0.7);
        let out = evaluate(&logits, &gt, &weights, &LossConfig::default(), true).unwrap();
        let probs = corrupt_predictions(&labels, &cfg).unwrap();
        let refined = propagate(&probs, &logits, &PropagationConfig::default()).unwrap();
        (out.loss.to_bits(), out.grad.unwrap(), refined)
    };
    let pool = |n| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
    let one = pool(1).install(compute);
    let many = pool(5).install(compute);
    assert_eq!(one, many);
}

proptest! {
    #[test]
    fn focal_loss_decreases_with_confidence_and_gamma(p in 0.001f64..0.999, dp in 0.0001f64..0.1, g in 0.0f64..4.0) {
        let q = (p + dp).min(0.9999);
        prop_assert!(focal_loss(q, true, g) <= focal_loss(p, true, g));
        prop_assert!(focal_loss(1.0 - q, false, g) <= focal_loss(1.0 - p, false, g));
        prop_assert!(focal_loss(p, true, g + 0.5) <= focal_loss(p, true, g));
    }

    #[test]
    fn loss_is_nonnegative_and_scales_with_beta(seed in 0u64..1000, beta in 0.1f64..5.0) {
        let rates = expand_rate_set("1,(1,2)").unwrap();
        let mut rng = TestRng::new(seed);
        let labels = loop {
            let l = random_labels(&mut rng, 8, 3, 0.0);
            if l.height() >= 3 && l.width() >= 3 {
                break l;
            }
        };
        let gt = ground_truth_affinity(&labels, &rates);
        let mut hist = CategoryHistogram::new(&rates);
        hist.accumulate_field(&gt);
        let weights = build_weight_table(&hist, Scheme::Sqrt).unwrap();
        let logits: AffinityField = random_logits(&mut rng, &gt, 3.0);
        let base = evaluate(&logits, &gt, &weights, &LossConfig::new(2.0, 1.0).unwrap(), false).unwrap().loss;
        let scaled = evaluate(&logits, &gt, &weights, &LossConfig::new(2.0, beta).unwrap(), false).unwrap().loss;
        prop_assert!(base >= 0.0);
        prop_assert!((scaled - beta * base).abs() <= 1e-12 * scaled.abs().max(1.0));
    }
}
