//! Distribution-aware evaluation: generalised energy distance, majority-vote
//! dice and the paired Wilcoxon signed-rank test.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::mask::{dice, dist, majority_vote, BinaryMask};

/// Largest number of non-zero differences for which the Wilcoxon p-value is
/// computed exactly; larger samples use the normal approximation.
pub const WILCOXON_EXACT_MAX: usize = 12;

/// Default significance threshold for reports.
pub const DEFAULT_ALPHA: f64 = 0.01;

fn check_set(name: &str, masks: &[BinaryMask]) -> Result<(usize, usize)> {
    let first = masks
        .first()
        .ok_or_else(|| Error::invalid(format!("{name} mask list is empty")))?;
    if masks.iter().any(|m| m.shape() != first.shape()) {
        return Err(Error::invalid(format!("{name} masks differ in shape")));
    }
    Ok(first.shape())
}

fn mean_pairwise(xs: &[BinaryMask], ys: &[BinaryMask]) -> Result<f64> {
    let mut total = 0.0;
    for x in xs {
        for y in ys {
            total += dist(x, y)?;
        }
    }
    Ok(total / (xs.len() * ys.len()) as f64)
}

/// Generalised energy distance with `1 - IoU` as the pairwise distance.
///
/// Each expectation is the mean over all ordered pairs, self-pairs
/// included, so `ged(A, A) == 0` exactly. Finite-sample values can be
/// negative and are returned unclipped.
pub fn ged(preds: &[BinaryMask], labels: &[BinaryMask]) -> Result<f64> {
    let ps = check_set("prediction", preds)?;
    let ls = check_set("label", labels)?;
    if ps != ls {
        return Err(Error::invalid("prediction and label masks differ in shape"));
    }
    let cross = mean_pairwise(labels, preds)?;
    let within_labels = mean_pairwise(labels, labels)?;
    let within_preds = mean_pairwise(preds, preds)?;
    Ok(2.0 * cross - within_labels - within_preds)
}

/// Majority-votes the predictions, then averages the dice of the vote
/// against every label.
pub fn dice_avg(preds: &[BinaryMask], labels: &[BinaryMask]) -> Result<f64> {
    check_set("prediction", preds)?;
    check_set("label", labels)?;
    let vote = majority_vote(preds)?;
    let mut total = 0.0;
    for y in labels {
        total += dice(&vote, y)?;
    }
    Ok(total / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`.
    pub statistic: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub exact: bool,
}

/// Paired two-sided Wilcoxon signed-rank test on `a - b`.
///
/// Zero differences are dropped and tied magnitudes share their average
/// rank. Up to [`WILCOXON_EXACT_MAX`] pairs the null distribution of the
/// signed-rank sum is computed exactly; beyond that a normal approximation
/// with tie and continuity corrections is used.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::invalid("wilcoxon test needs at least one pair"));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::invalid("non-finite score difference"));
    }
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            statistic: 0.0,
            p_value: 1.0,
            n: 0,
            exact: true,
        });
    }

    let (ranks2, tie_sizes) = doubled_ranks(&diffs);
    let total2: u64 = ranks2.iter().sum();
    let plus2: u64 = diffs
        .iter()
        .zip(&ranks2)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let w2 = plus2.min(total2 - plus2);
    let statistic = w2 as f64 / 2.0;

    if n <= WILCOXON_EXACT_MAX {
        let counts = signed_rank_distribution(&ranks2);
        let hits: u64 = counts
            .iter()
            .enumerate()
            .filter(|(s, _)| (*s as u64).min(total2 - *s as u64) <= w2)
            .map(|(_, c)| c)
            .sum();
        let p = hits as f64 / (1u64 << n) as f64;
        return Ok(WilcoxonResult {
            statistic,
            p_value: p.min(1.0),
            n,
            exact: true,
        });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = tie_sizes
        .iter()
        .map(|&t| {
            let t = t as f64;
            t * t * t - t
        })
        .sum();
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = ((statistic - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::standard();
    let p = (2.0 * normal.cdf(-z)).min(1.0);
    Ok(WilcoxonResult {
        statistic,
        p_value: p,
        n,
        exact: false,
    })
}

/// Twice the average ranks of `|d|` (so ties stay integral), plus the tie
/// group sizes.
fn doubled_ranks(diffs: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let n = diffs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diffs[i].abs().total_cmp(&diffs[j].abs()));
    let mut ranks = vec![0u64; n];
    let mut ties = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end + 1 < n && diffs[order[end + 1]].abs() == diffs[order[start]].abs() {
            end += 1;
        }
        // positions start+1 ..= end+1, average doubled = (start+1)+(end+1)
        let r2 = (start + end + 2) as u64;
        for &idx in &order[start..=end] {
            ranks[idx] = r2;
        }
        ties.push(end - start + 1);
        start = end + 1;
    }
    (ranks, ties)
}

/// Number of sign patterns producing each doubled positive rank sum.
fn signed_rank_distribution(ranks2: &[u64]) -> Vec<u64> {
    let total: u64 = ranks2.iter().sum();
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in ranks2 {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] > 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    counts
}

/// Per-sample and aggregate evaluation scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalScores {
    pub sample_ids: Vec<String>,
    pub per_sample_ged: Vec<f64>,
    pub per_sample_dice_avg: Vec<f64>,
    pub mean_ged: f64,
    pub mean_dice_avg: f64,
    pub num_samples: usize,
}

impl EvalScores {
    pub fn from_samples(
        sample_ids: Vec<String>,
        per_sample_ged: Vec<f64>,
        per_sample_dice_avg: Vec<f64>,
    ) -> Result<Self> {
        let n = sample_ids.len();
        if per_sample_ged.len() != n || per_sample_dice_avg.len() != n {
            return Err(Error::invalid("per-sample score lists differ in length"));
        }
        let mean = |xs: &[f64]| {
            if xs.is_empty() {
                0.0
            } else {
                xs.iter().sum::<f64>() / xs.len() as f64
            }
        };
        Ok(Self {
            mean_ged: mean(&per_sample_ged),
            mean_dice_avg: mean(&per_sample_dice_avg),
            num_samples: n,
            sample_ids,
            per_sample_ged,
            per_sample_dice_avg,
        })
    }

    /// `sample_id,ged,dice_avg` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,ged,dice_avg\n");
        for i in 0..self.num_samples {
            let _ = writeln!(
                out,
                "{},{},{}",
                self.sample_ids[i], self.per_sample_ged[i], self.per_sample_dice_avg[i]
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scores serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(rows: [[u8; 2]; 2]) -> BinaryMask {
        BinaryMask::new(Array2::from_shape_fn((2, 2), |(r, c)| rows[r][c])).unwrap()
    }

    fn row(v: &[u8]) -> BinaryMask {
        BinaryMask::from_row(v).unwrap()
    }

    #[test]
    fn ged_of_identical_multisets_is_zero() {
        let a = mask([[1, 0], [0, 0]]);
        let b = mask([[1, 1], [0, 1]]);
        let preds = vec![b.clone(), a.clone()];
        let labels = vec![a, b];
        assert_eq!(ged(&preds, &labels).unwrap(), 0.0);
    }

    #[test]
    fn ged_single_pair_is_twice_distance() {
        let y = mask([[1, 1], [0, 0]]);
        let p = mask([[0, 1], [1, 0]]);
        let g = ged(&[p.clone()], &[y.clone()]).unwrap();
        assert_eq!(g, 2.0 * dist(&y, &p).unwrap());
    }

    #[test]
    fn ged_two_by_two_hand_table() {
        // labels L1 = {(0,0)}, L2 = {(0,0),(0,1)}; preds P1 = {(0,1)}, P2 = {(0,0),(0,1)}
        // d(L1,P1)=1, d(L1,P2)=1/2, d(L2,P1)=1/2, d(L2,P2)=0 -> cross mean 1/2
        // d(L1,L2)=1/2 -> label mean (0 + 1/2 + 1/2 + 0)/4 = 1/4
        // d(P1,P2)=1/2 -> pred mean 1/4
        let labels = [mask([[1, 0], [0, 0]]), mask([[1, 1], [0, 0]])];
        let preds = [mask([[0, 1], [0, 0]]), mask([[1, 1], [0, 0]])];
        let g = ged(&preds, &labels).unwrap();
        assert!((g - (2.0 * 0.5 - 0.25 - 0.25)).abs() < 1e-15);
    }

    #[test]
    fn ged_errors() {
        assert!(ged(&[], &[row(&[1])]).is_err());
        assert!(ged(&[row(&[1])], &[]).is_err());
        assert!(ged(&[row(&[1])], &[row(&[1, 0])]).is_err());
    }

    #[test]
    fn dice_avg_examples() {
        let a = row(&[1, 1, 0]);
        let d = dice_avg(&[a.clone(), a.clone()], &[a.clone(), a.clone()]).unwrap();
        assert!((d - 1.0).abs() < 1e-9);
        let far = row(&[0, 0, 1]);
        let d = dice_avg(&[far.clone(), far, a.clone()], &[a.clone()]).unwrap();
        assert!(d < 1e-6);
        // vote of {1,1,0} is [1]; mean(dice([1],[1]), dice([1],[0]))
        let d = dice_avg(&[row(&[1]), row(&[1]), row(&[0])], &[row(&[1]), row(&[0])]).unwrap();
        assert!((d - 0.5).abs() < 1e-6);
        assert!(dice_avg(&[], &[a]).is_err());
    }

    /// Exhaustive 2^n enumeration over sign patterns, independent of the
    /// dynamic-programming path in the implementation.
    fn enumerate_p(a: &[f64], b: &[f64]) -> f64 {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
        let n = d.len();
        if n == 0 {
            return 1.0;
        }
        let ranks: Vec<f64> = d
            .iter()
            .map(|x| {
                let less = d.iter().filter(|y| y.abs() < x.abs()).count();
                let equal = d.iter().filter(|y| y.abs() == x.abs()).count();
                less as f64 + (equal as f64 + 1.0) / 2.0
            })
            .collect();
        let total: f64 = ranks.iter().sum();
        let plus: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
        let w = plus.min(total - plus);
        let mut hits = 0u64;
        for pattern in 0u64..(1 << n) {
            let s: f64 = (0..n).filter(|i| pattern >> i & 1 == 1).map(|i| ranks[i]).sum();
            if s.min(total - s) <= w {
                hits += 1;
            }
        }
        hits as f64 / (1u64 << n) as f64
    }

    #[test]
    fn wilcoxon_examples() {
        let a = [0.3, 0.5, 0.1];
        let r = wilcoxon_signed_rank(&a, &a).unwrap();
        assert_eq!(r.p_value, 1.0);

        let a = [1.1, 2.2, 3.3, 4.4, 5.5];
        let b = [1.0, 2.0, 3.0, 4.0, 5.0];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 2.0 / 32.0);
        assert!(r.exact);

        assert!(wilcoxon_signed_rank(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn wilcoxon_exact_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in 1..=12 {
            for _ in 0..5 {
                // coarse grid so zeros and ties occur
                let a: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 / 4.0).collect();
                let b: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 / 4.0).collect();
                let r = wilcoxon_signed_rank(&a, &b).unwrap();
                assert!((r.p_value - enumerate_p(&a, &b)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wilcoxon_large_shift_is_significant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = a.iter().map(|x| x + 0.1 + rng.random::<f64>() * 1e-3).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!(!r.exact);
        assert!(r.p_value < 1e-10);
    }

    #[test]
    fn eval_scores_csv_and_means() {
        let s = EvalScores::from_samples(
            vec!["s0".into(), "s1".into()],
            vec![0.5, 0.25],
            vec![1.0, 0.5],
        )
        .unwrap();
        assert_eq!(s.mean_ged, 0.375);
        assert_eq!(s.mean_dice_avg, 0.75);
        assert_eq!(s.to_csv(), "sample_id,ged,dice_avg\ns0,0.5,1\ns1,0.25,0.5\n");
        let back: EvalScores = serde_json::from_str(&s.to_json()).unwrap();
        assert_eq!(back, s);
        assert!(EvalScores::from_samples(vec!["a".into()], vec![], vec![]).is_err());
    }

    fn mask_set(max: usize) -> impl Strategy<Value = Vec<BinaryMask>> {
        proptest::collection::vec(proptest::collection::vec(0u8..2, 9), 1..max).prop_map(|v| {
            v.into_iter()
                .map(|g| BinaryMask::new(Array2::from_shape_vec((3, 3), g).unwrap()).unwrap())
                .collect()
        })
    }

    proptest! {
        #[test]
        fn ged_properties(a in mask_set(5), b in mask_set(5), rot in 0usize..4) {
            prop_assert_eq!(ged(&a, &a).unwrap(), 0.0);
            let ab = ged(&a, &b).unwrap();
            prop_assert!((ab - ged(&b, &a).unwrap()).abs() < 1e-12);
            let mut a2 = a.clone();
            let len = a2.len();
            a2.rotate_left(rot % len);
            a2.reverse();
            prop_assert!((ab - ged(&a2, &b).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn dice_avg_permutation_invariant(a in mask_set(5), b in mask_set(5)) {
            let mut a2 = a.clone();
            a2.reverse();
            let mut b2 = b.clone();
            b2.reverse();
            prop_assert!((dice_avg(&a, &b).unwrap() - dice_avg(&a2, &b2).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn wilcoxon_p_in_range_and_swap_invariant(
            pairs in proptest::collection::vec((0u8..8, 0u8..8), 1..30)
        ) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
            let r = wilcoxon_signed_rank(&a, &b).unwrap();
            let s = wilcoxon_signed_rank(&b, &a).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.p_value));
            prop_assert_eq!(r.p_value, s.p_value);
            prop_assert_eq!(r.statistic, s.statistic);
        }
    }
}
