//! Room-disjoint stratified partitioning and per-category detection metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{DatasetManifest, Split};
use crate::error::{Error, Result};

/// Target fractions of rooms for train / validation / test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.85, val: 0.075, test: 0.075 }
    }
}

impl SplitRatios {
    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }

    /// Room counts per split: cumulative boundaries are floored, then every
    /// split is given at least one room.
    pub fn room_counts(&self, n: usize) -> [usize; 3] {
        let cut1 = ((n as f64) * self.train + 1e-9).floor() as usize;
        let cut2 = ((n as f64) * (self.train + self.val) + 1e-9).floor() as usize;
        let cut1 = cut1.min(n);
        let cut2 = cut2.clamp(cut1, n);
        let mut sizes = [cut1, cut2 - cut1, n - cut2];
        while let Some(empty) = sizes.iter().position(|&s| s == 0) {
            let donor = (0..3).max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a))).unwrap();
            sizes[donor] -= 1;
            sizes[empty] += 1;
        }
        sizes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub room_split: BTreeMap<u32, Split>,
    pub sizes: [usize; 3],
    pub realized_ratios: [f64; 3],
    /// Per category: fraction of rooms with a positive label in each split.
    pub positive_rates: Vec<[f64; 3]>,
}

impl SplitAssignment {
    pub fn split_of(&self, room: u32) -> Option<Split> {
        self.room_split.get(&room).copied()
    }
}

#[cfg(test)]
fn split_index(s: Split) -> usize {
    match s {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    }
}

/// Greedy quota stratification at room granularity.
///
/// Rooms are visited rarest label vector first (ties in a seeded random
/// order); each goes to the split with spare capacity whose per-category
/// positive counts fall furthest below their targets.
pub fn stratified_partition_rooms(rooms: &[(u32, Vec<u8>)], ratios: SplitRatios, seed: u64) -> Result<SplitAssignment> {
    let n = rooms.len();
    if n < 3 {
        return Err(Error::TooFewRooms(n));
    }
    let r = ratios.as_array();
    if r.iter().any(|&v| v < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {r:?} must be non-negative and sum to 1")));
    }
    let theta = rooms[0].1.len();
    if rooms.iter().any(|(_, y)| y.len() != theta) {
        return Err(Error::ShapeMismatch("label vectors differ in length".into()));
    }
    let sizes = ratios.room_counts(n);
    // Per category and class (negative, positive): how many rooms carry it.
    let mut totals = vec![[0usize; 2]; theta];
    for (_, y) in rooms {
        for (t, &v) in totals.iter_mut().zip(y) {
            t[usize::from(v > 0)] += 1;
        }
    }
    let rarity = |y: &[u8]| -> f64 { y.iter().zip(&totals).map(|(&v, t)| 1.0 / t[usize::from(v > 0)] as f64).sum() };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.sort_by(|&a, &b| rarity(&rooms[b].1).partial_cmp(&rarity(&rooms[a].1)).unwrap());

    let target_frac: Vec<f64> = sizes.iter().map(|&s| s as f64 / n as f64).collect();
    let mut counts = [0usize; 3];
    let mut have = vec![[[0usize; 3]; 2]; theta];
    let mut room_split = BTreeMap::new();
    for &i in &order {
        let y = &rooms[i].1;
        let mut best: Option<(usize, f64, f64)> = None;
        for s in 0..3 {
            if counts[s] >= sizes[s] {
                continue;
            }
            // Unfilled fraction of this split's quota for every (category, class) the room carries.
            let deficit: f64 = (0..theta)
                .map(|t| {
                    let c = usize::from(y[t] > 0);
                    let need = target_frac[s] * totals[t][c] as f64;
                    (need - have[t][c][s] as f64) / need
                })
                .sum();
            let spare = (sizes[s] - counts[s]) as f64 / sizes[s] as f64;
            let better = match best {
                None => true,
                Some((_, d, sp)) => deficit > d + 1e-12 || ((deficit - d).abs() <= 1e-12 && spare > sp + 1e-12),
            };
            if better {
                best = Some((s, deficit, spare));
            }
        }
        let s = best.expect("total capacity equals room count").0;
        counts[s] += 1;
        for t in 0..theta {
            have[t][usize::from(y[t] > 0)][s] += 1;
        }
        room_split.insert(rooms[i].0, Split::ALL[s]);
    }
    if room_split.len() != n {
        return Err(Error::Config("duplicate room ids".into()));
    }
    let positive_rates = have
        .iter()
        .map(|h| [0, 1, 2].map(|s| h[1][s] as f64 / sizes[s] as f64))
        .collect();
    Ok(SplitAssignment {
        room_split,
        sizes,
        realized_ratios: sizes.map(|s| s as f64 / n as f64),
        positive_rates,
    })
}

/// Partition the rooms of a manifest and rewrite every record's split.
pub fn stratified_partition(manifest: &mut DatasetManifest, ratios: SplitRatios, seed: u64) -> Result<SplitAssignment> {
    let mut rooms: BTreeMap<u32, Vec<u8>> = BTreeMap::new();
    for r in &manifest.records {
        rooms.entry(r.room_id).or_insert_with(|| r.label_vector.clone());
    }
    let rooms: Vec<(u32, Vec<u8>)> = rooms.into_iter().collect();
    let assignment = stratified_partition_rooms(&rooms, ratios, seed)?;
    for r in &mut manifest.records {
        r.split = assignment.split_of(r.room_id).expect("room assigned");
    }
    Ok(assignment)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryMetrics {
    pub theta: usize,
    pub positives: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when a metric's denominator was zero and it was reported as 0.
    pub undefined: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub categories: Vec<CategoryMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// F1 as the harmonic mean of precision and recall, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Per-category precision / recall / F1 from multi-hot predictions and labels.
pub fn score(predictions: &[Vec<u8>], labels: &[Vec<u8>]) -> Result<MetricsTable> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch(predictions.len(), labels.len()));
    }
    let theta = labels.first().map_or(0, Vec::len);
    let mut tp = vec![0usize; theta];
    let mut fp = vec![0usize; theta];
    let mut fn_ = vec![0usize; theta];
    for (p, y) in predictions.iter().zip(labels) {
        if p.len() != theta || y.len() != theta {
            return Err(Error::ShapeMismatch(format!("expected {theta} categories per sample")));
        }
        for t in 0..theta {
            match (p[t] > 0, y[t] > 0) {
                (true, true) => tp[t] += 1,
                (true, false) => fp[t] += 1,
                (false, true) => fn_[t] += 1,
                (false, false) => {}
            }
        }
    }
    let categories: Vec<CategoryMetrics> = (0..theta)
        .map(|t| {
            let (precision, up) = ratio(tp[t], tp[t] + fp[t]);
            let (recall, ur) = ratio(tp[t], tp[t] + fn_[t]);
            CategoryMetrics {
                theta: t,
                positives: tp[t] + fn_[t],
                tp: tp[t],
                fp: fp[t],
                fn_: fn_[t],
                precision,
                recall,
                f1: f1_score(precision, recall),
                undefined: up || ur,
            }
        })
        .collect();
    let mean = |f: fn(&CategoryMetrics) -> f64| {
        if categories.is_empty() {
            0.0
        } else {
            categories.iter().map(f).sum::<f64>() / categories.len() as f64
        }
    };
    Ok(MetricsTable {
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        categories,
    })
}

impl MetricsTable {
    /// CSV with header `theta,positives,precision,recall,f1`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("theta,positives,precision,recall,f1\n");
        for c in &self.categories {
            writeln!(out, "{},{},{:.6},{:.6},{:.6}", c.theta, c.positives, c.precision, c.recall, c.f1).unwrap();
        }
        out
    }

    /// Aligned text block: one column per category, rows for positives,
    /// precision, recall and F1, with the macro average on the right.
    pub fn to_table(&self, title: &str) -> String {
        let mut out = String::new();
        let head: String = self.categories.iter().map(|c| format!("{:>7}", c.theta)).collect();
        writeln!(out, "{title}").unwrap();
        writeln!(out, "{:<18}{head}{:>8}", "Category", "macro").unwrap();
        let pos: String = self.categories.iter().map(|c| format!("{:>7}", c.positives)).collect();
        writeln!(out, "{:<18}{pos}", "Positive samples").unwrap();
        for (name, f, m) in [
            ("Precision", (|c: &CategoryMetrics| c.precision) as fn(&CategoryMetrics) -> f64, self.macro_precision),
            ("Recall", |c| c.recall, self.macro_recall),
            ("F1 Score", |c| c.f1, self.macro_f1),
        ] {
            let row: String = self.categories.iter().map(|c| format!("{:>7.2}", f(c))).collect();
            writeln!(out, "{name:<18}{row}{m:>8.3}").unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn table_one_counts() {
        let r = SplitRatios::default();
        assert_eq!(r.room_counts(60), [51, 4, 5]);
        assert_eq!(r.room_counts(40), [34, 3, 3]);
        assert_eq!(r.room_counts(3), [1, 1, 1]);
        assert_eq!(r.room_counts(141).iter().sum::<usize>(), 141);
    }

    #[test]
    fn identical_labels_forty_rooms() {
        let rooms: Vec<(u32, Vec<u8>)> = (0..40).map(|i| (i, vec![1, 0, 1])).collect();
        let a = stratified_partition_rooms(&rooms, SplitRatios::default(), 1).unwrap();
        assert_eq!(a.sizes, [34, 3, 3]);
        assert_eq!(a.room_split.len(), 40);
    }

    #[test]
    fn three_rooms_one_each() {
        let rooms: Vec<(u32, Vec<u8>)> = (0..3).map(|i| (i, vec![1])).collect();
        let a = stratified_partition_rooms(&rooms, SplitRatios { train: 0.98, val: 0.01, test: 0.01 }, 0).unwrap();
        assert_eq!(a.sizes, [1, 1, 1]);
        assert!(matches!(stratified_partition_rooms(&rooms[..2], SplitRatios::default(), 0), Err(Error::TooFewRooms(2))));
    }

    #[test]
    fn positive_rates_balanced_on_large_manifest() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rooms: Vec<(u32, Vec<u8>)> = (0..400)
            .map(|i| (i, (0..5).map(|t| u8::from(rng.gen_bool(0.2 + 0.15 * t as f64))).collect()))
            .collect();
        let a = stratified_partition_rooms(&rooms, SplitRatios::default(), 3).unwrap();
        for rates in &a.positive_rates {
            for s in 1..3 {
                assert!((rates[s] - rates[0]).abs() <= 0.05, "{rates:?}");
            }
        }
    }

    #[test]
    fn perfect_and_paper_entry() {
        let y = vec![vec![1, 0, 1], vec![0, 1, 1]];
        let m = score(&y, &y).unwrap();
        for c in &m.categories {
            assert_eq!((c.precision, c.recall, c.f1), (1.0, 1.0, 1.0));
        }
        let f1 = f1_score(0.77, 0.54);
        assert!((f1 - 0.6348).abs() < 1e-4);
        assert!(matches!(score(&y[..1], &y), Err(Error::LengthMismatch(1, 2))));
    }

    #[test]
    fn zero_denominators_flagged() {
        let m = score(&[vec![0]], &[vec![0]]).unwrap();
        assert!(m.categories[0].undefined);
        assert_eq!(m.categories[0].f1, 0.0);
        assert!(m.to_csv().starts_with("theta,positives,precision,recall,f1\n0,0,"));
    }

    proptest! {
        #[test]
        fn room_disjoint_and_sized(n in 3usize..200, theta in 1usize..6, seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rooms: Vec<(u32, Vec<u8>)> = (0..n as u32).map(|i| (i * 7, (0..theta).map(|_| rng.gen_range(0..2)).collect())).collect();
            let a = stratified_partition_rooms(&rooms, SplitRatios::default(), seed).unwrap();
            prop_assert_eq!(a.room_split.len(), n);
            let mut counts = [0usize; 3];
            for s in a.room_split.values() { counts[split_index(*s)] += 1; }
            prop_assert_eq!(counts, a.sizes);
            let targets = [0.85, 0.075, 0.075].map(|r| r * n as f64);
            if n >= 20 {
                for s in 0..3 { prop_assert!((counts[s] as f64 - targets[s]).abs() <= 1.0); }
            }
            let again = stratified_partition_rooms(&rooms, SplitRatios::default(), seed).unwrap();
            prop_assert_eq!(again, a);
        }

        #[test]
        fn score_is_permutation_invariant_and_consistent(
            data in proptest::collection::vec((proptest::collection::vec(0u8..2, 4), proptest::collection::vec(0u8..2, 4)), 1..60),
            seed in 0u64..100,
        ) {
            let (p, y): (Vec<_>, Vec<_>) = data.into_iter().unzip();
            let m = score(&p, &y).unwrap();
            let mut idx: Vec<usize> = (0..p.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let p2: Vec<_> = idx.iter().map(|&i| p[i].clone()).collect();
            let y2: Vec<_> = idx.iter().map(|&i| y[i].clone()).collect();
            prop_assert_eq!(&score(&p2, &y2).unwrap(), &m);
            for c in &m.categories {
                prop_assert!((c.f1 - f1_score(c.precision, c.recall)).abs() <= 1e-12);
                prop_assert!((0.0..=1.0).contains(&c.f1));
            }
        }
    }
}
