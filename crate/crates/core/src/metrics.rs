//! Multi-label evaluation suite: per-class precision/recall, their class
//! averages (CP/CR), the overall indicator-based OP/OR, and the harmonic
//! means CF1/OF1, plus standard micro-averaged precision/recall for
//! comparison.
//!
//! OP counts agreements (`f(p, p̃) = 1` iff truth equals prediction) over
//! all sample×class cells and divides by `N·K`; OR divides the same
//! agreement count by the number of positive truths. OR is therefore
//! accuracy-like rather than a recall: it exceeds 1 whenever correct
//! negatives outnumber positive truths, and is undefined (reported as null)
//! when no positive truths exist. The micro fields carry the conventional
//! definitions.

use serde::{Deserialize, Serialize};

use crate::error::{Result, WxError};

/// Per-class confusion tallies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ClassCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    /// `TP/(TP+FP)`; 0 when the denominator is empty.
    pub fn precision(&self) -> f64 {
        ratio(self.true_pos, self.true_pos + self.false_pos)
    }

    /// `TP/(TP+FN)`; 0 when the denominator is empty.
    pub fn recall(&self) -> f64 {
        ratio(self.true_pos, self.true_pos + self.false_neg)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 { 0.0 } else { num as f64 / den as f64 }
}

/// Confusion tallies for every class over a set of evaluated samples.
/// Shards built in parallel can be [`ConfusionCounts::merge`]d; the merge is
/// associative and commutative.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    classes: Vec<ClassCounts>,
    samples: u64,
}

impl ConfusionCounts {
    pub fn new(k: usize) -> Self {
        ConfusionCounts { classes: vec![ClassCounts::default(); k], samples: 0 }
    }

    pub fn k(&self) -> usize {
        self.classes.len()
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }

    pub fn classes(&self) -> &[ClassCounts] {
        &self.classes
    }

    /// Tallies one sample's truth/prediction pair.
    pub fn accumulate(&mut self, truth: &[bool], pred: &[bool]) -> Result<()> {
        if truth.len() != self.classes.len() || pred.len() != self.classes.len() {
            return Err(WxError::shape("accumulate", &[self.classes.len()], &[truth.len(), pred.len()]));
        }
        for (c, (&t, &p)) in self.classes.iter_mut().zip(truth.iter().zip(pred)) {
            match (t, p) {
                (true, true) => c.true_pos += 1,
                (true, false) => c.false_neg += 1,
                (false, true) => c.false_pos += 1,
                (false, false) => c.true_neg += 1,
            }
        }
        self.samples += 1;
        Ok(())
    }

    /// Adds another shard's tallies into this one.
    pub fn merge(&mut self, other: &ConfusionCounts) -> Result<()> {
        if other.classes.len() != self.classes.len() {
            return Err(WxError::shape("merge", &[self.classes.len()], &[other.classes.len()]));
        }
        for (a, b) in self.classes.iter_mut().zip(&other.classes) {
            a.true_pos += b.true_pos;
            a.false_pos += b.false_pos;
            a.false_neg += b.false_neg;
            a.true_neg += b.true_neg;
        }
        self.samples += other.samples;
        Ok(())
    }
}

/// Hard decisions from probabilities: 1 iff `p ≥ threshold`.
pub fn binarize(probs: &[f64], threshold: f64) -> Result<Vec<bool>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(WxError::Config(format!("threshold {threshold} outside (0,1)")));
    }
    Ok(probs.iter().map(|&p| p >= threshold).collect())
}

/// How CP/CR are reduced. The class mean follows the prose definition
/// ("average of each class precision and recall"); the double-sum variant
/// evaluates the printed per-sample-and-class summation, which divides out
/// to the same number and exists to demonstrate exactly that.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrCpMode {
    ClassMean,
    DoubleSum,
}

/// The full evaluation report. Field order is serialization order, fixed so
/// repeated emissions are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_samples: u64,
    pub k_classes: usize,
    pub threshold: f64,
    pub per_class_precision: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
    pub op: f64,
    /// Null when no positive truths exist (denominator zero).
    pub or: Option<f64>,
    /// Harmonic mean of OP and OR; null whenever OR is.
    pub of1: Option<f64>,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
}

fn harmonic(a: f64, b: f64) -> f64 {
    if a + b == 0.0 { 0.0 } else { 2.0 * a * b / (a + b) }
}

/// Computes every metric from confusion tallies.
pub fn aggregate(counts: &ConfusionCounts, threshold: f64, mode: CrCpMode) -> Result<MetricsReport> {
    let k = counts.k();
    let n = counts.samples();
    if n == 0 || k == 0 {
        return Err(WxError::Data("metrics need at least one sample and class".into()));
    }
    let per_class_precision: Vec<f64> = counts.classes().iter().map(|c| c.precision()).collect();
    let per_class_recall: Vec<f64> = counts.classes().iter().map(|c| c.recall()).collect();

    let (cp, cr) = match mode {
        CrCpMode::ClassMean => (
            per_class_precision.iter().sum::<f64>() / k as f64,
            per_class_recall.iter().sum::<f64>() / k as f64,
        ),
        CrCpMode::DoubleSum => {
            // Printed form: Σ over samples and classes of the per-class
            // value, normalized by N·K.
            let mut psum = 0.0;
            let mut rsum = 0.0;
            for _ in 0..n {
                for i in 0..k {
                    psum += per_class_precision[i];
                    rsum += per_class_recall[i];
                }
            }
            (psum / (n * k as u64) as f64, rsum / (n * k as u64) as f64)
        }
    };
    let cf1 = harmonic(cp, cr);

    // Overall agreement count: every (sample, class) cell where the
    // prediction equals the truth, i.e. TP + TN.
    let agree: u64 = counts.classes().iter().map(|c| c.true_pos + c.true_neg).sum();
    let positives: u64 = counts.classes().iter().map(|c| c.true_pos + c.false_neg).sum();
    let op = agree as f64 / (n * k as u64) as f64;
    let or = if positives == 0 { None } else { Some(agree as f64 / positives as f64) };
    let of1 = or.map(|or| harmonic(op, or));

    let tp: u64 = counts.classes().iter().map(|c| c.true_pos).sum();
    let fp: u64 = counts.classes().iter().map(|c| c.false_pos).sum();
    let fneg: u64 = counts.classes().iter().map(|c| c.false_neg).sum();
    let micro_precision = ratio(tp, tp + fp);
    let micro_recall = ratio(tp, tp + fneg);
    let micro_f1 = harmonic(micro_precision, micro_recall);

    Ok(MetricsReport {
        n_samples: n,
        k_classes: k,
        threshold,
        per_class_precision,
        per_class_recall,
        cp,
        cr,
        cf1,
        op,
        or,
        of1,
        micro_precision,
        micro_recall,
        micro_f1,
    })
}

/// Serializes a report with stable key order.
pub fn report_emit(report: &MetricsReport) -> String {
    serde_json::to_string_pretty(report).expect("report serialization")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn counts_from(truths: &[Vec<bool>], preds: &[Vec<bool>]) -> ConfusionCounts {
        let mut c = ConfusionCounts::new(truths[0].len());
        for (t, p) in truths.iter().zip(preds) {
            c.accumulate(t, p).unwrap();
        }
        c
    }

    /// Independent evaluator working straight off the truth/pred matrices,
    /// following the printed formulas term by term.
    fn brute_force(truths: &[Vec<bool>], preds: &[Vec<bool>]) -> (f64, f64, f64, f64, Option<f64>) {
        let n = truths.len();
        let k = truths[0].len();
        let mut precision = vec![0.0; k];
        let mut recall = vec![0.0; k];
        for i in 0..k {
            let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
            for s in 0..n {
                match (truths[s][i], preds[s][i]) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fneg += 1,
                    (false, false) => {}
                }
            }
            precision[i] = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            recall[i] = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
        }
        let cp = precision.iter().sum::<f64>() / k as f64;
        let cr = recall.iter().sum::<f64>() / k as f64;
        let mut agree = 0u64;
        let mut positives = 0u64;
        for s in 0..n {
            for i in 0..k {
                if truths[s][i] == preds[s][i] {
                    agree += 1;
                }
                if truths[s][i] {
                    positives += 1;
                }
            }
        }
        let op = agree as f64 / (n * k) as f64;
        let or = if positives == 0 { None } else { Some(agree as f64 / positives as f64) };
        (cp, cr, op, harmonic(cp, cr), or)
    }

    #[test]
    fn binarize_boundary_and_extremes() {
        assert_eq!(binarize(&[0.5, 0.5], 0.5).unwrap(), vec![true, true]);
        assert_eq!(binarize(&[0.1, 0.9, 0.999], 0.999999).unwrap(), vec![false, false, false]);
        assert!(binarize(&[0.5], 1.0).is_err());
        assert!(binarize(&[0.5], 0.0).is_err());

        // Elementwise oracle: each entry compared on its own.
        let probs = [0.2, 0.7, 0.35, 0.5, 0.49];
        let out = binarize(&probs, 0.35).unwrap();
        for (i, &p) in probs.iter().enumerate() {
            assert_eq!(out[i], p >= 0.35);
        }
    }

    #[test]
    fn accumulate_matches_cell_semantics() {
        let mut c = ConfusionCounts::new(2);
        c.accumulate(&[true, false], &[true, false]).unwrap();
        assert_eq!(c.classes()[0].true_pos, 1);
        assert_eq!(c.classes()[1].true_neg, 1);

        let mut c = ConfusionCounts::new(2);
        c.accumulate(&[true, true], &[false, false]).unwrap();
        assert_eq!(c.classes()[0].false_neg, 1);
        assert_eq!(c.classes()[1].false_neg, 1);

        assert!(ConfusionCounts::new(2).accumulate(&[true], &[true, false]).is_err());
    }

    #[test]
    fn accumulate_matches_brute_force_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let k = 4;
        let mut truths = Vec::new();
        let mut preds = Vec::new();
        for _ in 0..100 {
            truths.push((0..k).map(|_| rng.gen_bool(0.4)).collect::<Vec<_>>());
            preds.push((0..k).map(|_| rng.gen_bool(0.5)).collect::<Vec<_>>());
        }
        let counts = counts_from(&truths, &preds);
        for i in 0..k {
            let mut cell = ClassCounts::default();
            for (t, p) in truths.iter().zip(&preds) {
                match (t[i], p[i]) {
                    (true, true) => cell.true_pos += 1,
                    (true, false) => cell.false_neg += 1,
                    (false, true) => cell.false_pos += 1,
                    (false, false) => cell.true_neg += 1,
                }
            }
            assert_eq!(counts.classes()[i], cell);
        }
        assert_eq!(counts.samples(), 100);
        assert_eq!(counts.classes()[0].total(), 100);
    }

    #[test]
    fn class_precision_recall_policy() {
        let c = ClassCounts { true_pos: 2, false_pos: 1, false_neg: 1, true_neg: 0 };
        assert!((c.precision() - 2.0 / 3.0).abs() < 1e-15);
        assert!((c.recall() - 2.0 / 3.0).abs() < 1e-15);

        let empty = ClassCounts { true_pos: 0, false_pos: 0, false_neg: 3, true_neg: 5 };
        assert_eq!(empty.precision(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let c = ClassCounts {
                true_pos: rng.gen_range(0..20),
                false_pos: rng.gen_range(0..20),
                false_neg: rng.gen_range(0..20),
                true_neg: rng.gen_range(0..20),
            };
            if c.true_pos + c.false_pos > 0 {
                assert_eq!(c.precision(), c.true_pos as f64 / (c.true_pos + c.false_pos) as f64);
            }
            if c.true_pos + c.false_neg > 0 {
                assert_eq!(c.recall(), c.true_pos as f64 / (c.true_pos + c.false_neg) as f64);
            }
        }
    }

    #[test]
    fn perfect_predictions_on_all_positive_truth_score_one() {
        let truths = vec![vec![true, true], vec![true, true]];
        let counts = counts_from(&truths, &truths);
        let r = aggregate(&counts, 0.5, CrCpMode::ClassMean).unwrap();
        assert_eq!(r.cp, 1.0);
        assert_eq!(r.cr, 1.0);
        assert_eq!(r.cf1, 1.0);
        assert_eq!(r.op, 1.0);
        assert_eq!(r.or, Some(1.0));
        assert_eq!(r.of1, Some(1.0));
        assert_eq!(r.micro_f1, 1.0);
    }

    #[test]
    fn worked_two_by_two_example() {
        // truth [(1,0),(1,1)], pred [(1,0),(0,1)]: 3 agreeing cells of 4,
        // and 3 positive truths.
        let truths = vec![vec![true, false], vec![true, true]];
        let preds = vec![vec![true, false], vec![false, true]];
        let r = aggregate(&counts_from(&truths, &preds), 0.5, CrCpMode::ClassMean).unwrap();
        assert_eq!(r.op, 3.0 / 4.0);
        assert_eq!(r.or, Some(1.0));
    }

    #[test]
    fn equal_cp_cr_harmonic_is_identity() {
        // Both classes at precision = recall = 0.8.
        let c = ClassCounts { true_pos: 4, false_pos: 1, false_neg: 1, true_neg: 4 };
        let counts = ConfusionCounts { classes: vec![c, c], samples: 10 };
        let r = aggregate(&counts, 0.5, CrCpMode::ClassMean).unwrap();
        assert!((r.cp - 0.8).abs() < 1e-15);
        assert!((r.cf1 - 0.8).abs() < 1e-15);
    }

    #[test]
    fn double_sum_mode_equals_class_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let n = rng.gen_range(1..9usize);
            let k = rng.gen_range(1..5usize);
            let truths: Vec<Vec<bool>> =
                (0..n).map(|_| (0..k).map(|_| rng.gen_bool(0.5)).collect()).collect();
            let preds: Vec<Vec<bool>> =
                (0..n).map(|_| (0..k).map(|_| rng.gen_bool(0.5)).collect()).collect();
            let counts = counts_from(&truths, &preds);
            let a = aggregate(&counts, 0.5, CrCpMode::ClassMean).unwrap();
            let b = aggregate(&counts, 0.5, CrCpMode::DoubleSum).unwrap();
            assert!((a.cp - b.cp).abs() < 1e-12);
            assert!((a.cr - b.cr).abs() < 1e-12);
        }
    }

    #[test]
    fn exhaustive_oracle_equivalence_small_grids() {
        // Every truth/pred combination for (N=2, K=2) and (N=3, K=2).
        for n in [2usize, 3] {
            let k = 2usize;
            let cells = n * k;
            for t_bits in 0..(1u32 << cells) {
                for p_bits in 0..(1u32 << cells) {
                    let unpack = |bits: u32| -> Vec<Vec<bool>> {
                        (0..n)
                            .map(|s| (0..k).map(|i| bits >> (s * k + i) & 1 == 1).collect())
                            .collect()
                    };
                    let truths = unpack(t_bits);
                    let preds = unpack(p_bits);
                    let r = aggregate(&counts_from(&truths, &preds), 0.5, CrCpMode::ClassMean)
                        .unwrap();
                    let (cp, cr, op, cf1, or) = brute_force(&truths, &preds);
                    assert_eq!(r.cp, cp);
                    assert_eq!(r.cr, cr);
                    assert_eq!(r.op, op);
                    assert_eq!(r.cf1, cf1);
                    assert_eq!(r.or, or);
                }
            }
        }
    }

    #[test]
    fn undefined_or_is_null_not_zero() {
        let truths = vec![vec![false, false]];
        let preds = vec![vec![false, true]];
        let r = aggregate(&counts_from(&truths, &preds), 0.5, CrCpMode::ClassMean).unwrap();
        assert_eq!(r.or, None);
        assert_eq!(r.of1, None);
        let json = report_emit(&r);
        assert!(json.contains("\"or\": null"), "{json}");
    }

    #[test]
    fn report_round_trip_and_stability() {
        let truths = vec![vec![true, false], vec![false, true]];
        let preds = vec![vec![true, true], vec![false, false]];
        let r = aggregate(&counts_from(&truths, &preds), 0.4, CrCpMode::ClassMean).unwrap();
        let a = report_emit(&r);
        let b = report_emit(&r);
        assert_eq!(a, b);
        let parsed: MetricsReport = serde_json::from_str(&a).unwrap();
        assert_eq!(parsed, r);
    }

    #[test]
    fn shard_merge_equals_single_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = 3;
        let pairs: Vec<(Vec<bool>, Vec<bool>)> = (0..30)
            .map(|_| {
                (
                    (0..k).map(|_| rng.gen_bool(0.5)).collect(),
                    (0..k).map(|_| rng.gen_bool(0.5)).collect(),
                )
            })
            .collect();
        let mut whole = ConfusionCounts::new(k);
        for (t, p) in &pairs {
            whole.accumulate(t, p).unwrap();
        }
        let mut left = ConfusionCounts::new(k);
        let mut right = ConfusionCounts::new(k);
        for (i, (t, p)) in pairs.iter().enumerate() {
            if i % 2 == 0 { &mut left } else { &mut right }.accumulate(t, p).unwrap();
        }
        // Commutative: either merge order reproduces the single pass.
        let mut lr = left.clone();
        lr.merge(&right).unwrap();
        let mut rl = right.clone();
        rl.merge(&left).unwrap();
        assert_eq!(lr, whole);
        assert_eq!(rl, whole);
    }

    proptest! {
        #[test]
        fn op_never_decreases_with_a_correct_sample(
            seed in 0u64..500,
            n in 1usize..12,
            k in 1usize..6,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut counts = ConfusionCounts::new(k);
            for _ in 0..n {
                let t: Vec<bool> = (0..k).map(|_| rng.gen_bool(0.5)).collect();
                let p: Vec<bool> = (0..k).map(|_| rng.gen_bool(0.5)).collect();
                counts.accumulate(&t, &p).unwrap();
            }
            let before = aggregate(&counts, 0.5, CrCpMode::ClassMean).unwrap().op;
            let t: Vec<bool> = (0..k).map(|_| rng.gen_bool(0.5)).collect();
            counts.accumulate(&t.clone(), &t).unwrap();
            let after = aggregate(&counts, 0.5, CrCpMode::ClassMean).unwrap().op;
            prop_assert!(after >= before - 1e-15);
        }

        #[test]
        fn cf1_lies_between_cp_and_cr(
            seed in 0u64..500,
            n in 1usize..12,
            k in 1usize..6,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut counts = ConfusionCounts::new(k);
            for _ in 0..n {
                let t: Vec<bool> = (0..k).map(|_| rng.gen_bool(0.5)).collect();
                let p: Vec<bool> = (0..k).map(|_| rng.gen_bool(0.5)).collect();
                counts.accumulate(&t, &p).unwrap();
            }
            let r = aggregate(&counts, 0.5, CrCpMode::ClassMean).unwrap();
            prop_assert!(r.cf1 <= r.cp.max(r.cr) + 1e-15);
            prop_assert!(r.cf1 >= r.cp.min(r.cr) - 1e-15);
            prop_assert!(r.op >= 0.0 && r.op <= 1.0);
            prop_assert!((0.0..=1.0).contains(&r.cp));
            prop_assert!((0.0..=1.0).contains(&r.cr));
        }
    }
}
