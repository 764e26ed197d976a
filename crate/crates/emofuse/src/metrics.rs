//! Macro-F1 evaluation, multi-seed aggregation, and the two-sample t-test
//! behind the significance markers in the experiment reports.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::inc_beta;

/// Per-class true/false positive and false negative counts over the full
/// label map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
}

impl ConfusionCounts {
    pub fn from_predictions(preds: &[usize], golds: &[usize], num_classes: usize) -> Result<Self> {
        if preds.len() != golds.len() {
            return Err(Error::InvalidArgument(format!(
                "{} predictions vs {} golds",
                preds.len(),
                golds.len()
            )));
        }
        if let Some(&bad) = preds.iter().chain(golds).find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                id: bad,
                num_labels: num_classes,
            });
        }
        let mut counts = ConfusionCounts {
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
        };
        for (&p, &g) in preds.iter().zip(golds) {
            if p == g {
                counts.tp[p] += 1;
            } else {
                counts.fp[p] += 1;
                counts.fn_[g] += 1;
            }
        }
        Ok(counts)
    }

    /// Precision, recall, F1 for one class, with 0/0 → 0 conventions.
    pub fn class_prf(&self, class: usize) -> (f64, f64, f64) {
        let tp = self.tp[class] as f64;
        let fp = self.fp[class] as f64;
        let fn_ = self.fn_[class] as f64;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        (precision, recall, f1)
    }

    /// Unweighted mean of per-class F1 over all classes in the label map,
    /// including classes absent from both predictions and golds.
    pub fn macro_f1(&self) -> f64 {
        let k = self.tp.len() as f64;
        (0..self.tp.len())
            .map(|c| self.class_prf(c).2)
            .sum::<f64>()
            / k
    }
}

/// Macro-F1 of a prediction/gold pair over `num_classes` classes.
pub fn macro_f1(preds: &[usize], golds: &[usize], num_classes: usize) -> Result<f64> {
    Ok(ConfusionCounts::from_predictions(preds, golds, num_classes)?.macro_f1())
}

/// Mean plus the raw per-seed values (kept for significance testing).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub mean: f64,
    pub per_seed: Vec<f64>,
}

pub fn aggregate_seeds(scores: &[f64]) -> Result<SeedAggregate> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no results to aggregate".into()));
    }
    Ok(SeedAggregate {
        mean: scores.iter().sum::<f64>() / scores.len() as f64,
        per_seed: scores.to_vec(),
    })
}

/// Variance assumption of the two-sample test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TTestKind {
    /// Welch: unequal variances, Welch–Satterthwaite degrees of freedom.
    Welch,
    /// Pooled-variance Student, df = n₁ + n₂ − 2.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub t_statistic: f64,
    pub degrees_of_freedom: f64,
    pub p_value: f64,
    /// Strictly p < 0.05.
    pub significant: bool,
}

fn mean_and_var(sample: &[f64]) -> (f64, f64) {
    let n = sample.len() as f64;
    let mean = sample.iter().sum::<f64>() / n;
    let var = sample.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

fn finish(t: f64, df: f64) -> SignificanceResult {
    let p = 2.0 * (1.0 - student_t_cdf_unchecked(t.abs(), df));
    let p = p.clamp(0.0, 1.0);
    SignificanceResult {
        t_statistic: t,
        degrees_of_freedom: df,
        p_value: p,
        significant: p < 0.05,
    }
}

/// Two-sided unpaired two-sample t-test; Welch by default.
pub fn t_test(a: &[f64], b: &[f64]) -> Result<SignificanceResult> {
    t_test_with(a, b, TTestKind::Welch)
}

pub fn t_test_with(a: &[f64], b: &[f64], kind: TTestKind) -> Result<SignificanceResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument(
            "t-test needs at least two observations per sample".into(),
        ));
    }
    let (mean_a, var_a) = mean_and_var(a);
    let (mean_b, var_b) = mean_and_var(b);
    if var_a == 0.0 && var_b == 0.0 {
        return Err(Error::DegenerateVariance);
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (t, df) = match kind {
        TTestKind::Welch => {
            let se_a = var_a / na;
            let se_b = var_b / nb;
            let t = (mean_a - mean_b) / (se_a + se_b).sqrt();
            let df = (se_a + se_b) * (se_a + se_b)
                / (se_a * se_a / (na - 1.0) + se_b * se_b / (nb - 1.0));
            (t, df)
        }
        TTestKind::Pooled => {
            let df = na + nb - 2.0;
            let pooled = ((na - 1.0) * var_a + (nb - 1.0) * var_b) / df;
            let t = (mean_a - mean_b) / (pooled * (1.0 / na + 1.0 / nb)).sqrt();
            (t, df)
        }
    };
    Ok(finish(t, df))
}

/// Paired-sample diagnostic variant: a one-sample test on the differences.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<SignificanceResult> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "paired test needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument(
            "paired test needs at least two pairs".into(),
        ));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    let (mean, var) = mean_and_var(&diffs);
    if var == 0.0 {
        return Err(Error::DegenerateVariance);
    }
    let n = diffs.len() as f64;
    let t = mean / (var / n).sqrt();
    Ok(finish(t, n - 1.0))
}

/// Student-t CDF through the regularized incomplete beta function.
pub fn student_t_cdf(x: f64, df: f64) -> Result<f64> {
    if df <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "degrees of freedom must be positive, got {df}"
        )));
    }
    if x == 0.0 {
        return Ok(0.5);
    }
    let tail = 0.5 * inc_beta(df / (df + x * x), df / 2.0, 0.5);
    Ok(if x > 0.0 { 1.0 - tail } else { tail })
}

// Internal variant for callers that already guarantee df > 0.
fn student_t_cdf_unchecked(x: f64, df: f64) -> f64 {
    if x == 0.0 {
        return 0.5;
    }
    let tail = 0.5 * inc_beta(df / (df + x * x), df / 2.0, 0.5);
    if x > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::adaptive_simpson;
    use approx::assert_abs_diff_eq;

    /// CDF of the t distribution by quadrature alone: both the normalizing
    /// constant and the integral are computed numerically (substitution
    /// x = √ν·tanθ turns the density into √ν·cos^{ν−1}θ).
    fn t_cdf_quadrature(x: f64, df: f64) -> f64 {
        let kernel = move |theta: f64| theta.cos().powf(df - 1.0);
        let half = std::f64::consts::FRAC_PI_2;
        let norm = adaptive_simpson(kernel, -half, half, 1e-13);
        let upper = (x / df.sqrt()).atan();
        let partial = adaptive_simpson(kernel, 0.0, upper, 1e-13);
        0.5 + partial / norm
    }

    #[test]
    fn exhaustive_confusion_oracle_case() {
        // gold [0,0,1,1,2], pred [0,1,1,1,2]; the full confusion matrix
        // gives per-class F1 of 2/3, 4/5 and 1.
        let golds = [0, 0, 1, 1, 2];
        let preds = [0, 1, 1, 1, 2];
        let counts = ConfusionCounts::from_predictions(&preds, &golds, 3).unwrap();
        assert_eq!(counts.tp, vec![1, 2, 1]);
        assert_eq!(counts.fp, vec![0, 1, 0]);
        assert_eq!(counts.fn_, vec![1, 0, 0]);
        let expected = (2.0 / 3.0 + 0.8 + 1.0) / 3.0;
        assert_abs_diff_eq!(counts.macro_f1(), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(counts.macro_f1(), 0.8222, epsilon = 1e-4);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let labels = [0, 1, 2, 1, 0, 2];
        assert_abs_diff_eq!(macro_f1(&labels, &labels, 3).unwrap(), 1.0);
    }

    #[test]
    fn single_class_collapse_on_balanced_gold() {
        // All predictions say class 0 on balanced 2-class gold:
        // class 0 has P = 1/2, R = 1, F1 = 2/3; class 1 has F1 = 0.
        let golds = [0, 0, 1, 1];
        let preds = [0, 0, 0, 0];
        assert_abs_diff_eq!(
            macro_f1(&preds, &golds, 2).unwrap(),
            (2.0 / 3.0) / 2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn absent_classes_count_as_zero() {
        // Three-class label map, only class 0 ever appears.
        let golds = [0, 0];
        let preds = [0, 0];
        assert_abs_diff_eq!(macro_f1(&preds, &golds, 3).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn macro_f1_is_relabeling_invariant() {
        let golds = [0, 1, 2, 2, 1, 0, 1];
        let preds = [0, 2, 2, 1, 1, 0, 1];
        let base = macro_f1(&preds, &golds, 3).unwrap();
        // Apply the permutation 0→2, 1→0, 2→1 to both.
        let perm = [2, 0, 1];
        let golds_p: Vec<usize> = golds.iter().map(|&g| perm[g]).collect();
        let preds_p: Vec<usize> = preds.iter().map(|&p| perm[p]).collect();
        assert_abs_diff_eq!(
            macro_f1(&preds_p, &golds_p, 3).unwrap(),
            base,
            epsilon = 1e-15
        );
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(macro_f1(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn aggregation_basics() {
        let agg = aggregate_seeds(&[0.8; 5]).unwrap();
        assert_abs_diff_eq!(agg.mean, 0.8);
        let single = aggregate_seeds(&[0.61]).unwrap();
        assert_abs_diff_eq!(single.mean, 0.61);
        let a = aggregate_seeds(&[0.1, 0.5, 0.9]).unwrap();
        let b = aggregate_seeds(&[0.9, 0.1, 0.5]).unwrap();
        assert_abs_diff_eq!(a.mean, b.mean, epsilon = 1e-15);
        assert!(aggregate_seeds(&[]).is_err());
    }

    #[test]
    fn equal_means_give_t_zero_p_one() {
        let r = t_test(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert_abs_diff_eq!(r.t_statistic, 0.0);
        assert_abs_diff_eq!(r.p_value, 1.0, epsilon = 1e-12);
        assert!(!r.significant);
    }

    #[test]
    fn shifted_sequence_case() {
        // a = 1..5, b = 2..6: t = −1, Welch df = 8, p ≈ 0.3466, confirmed
        // against the quadrature CDF below before freezing.
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [2.0, 3.0, 4.0, 5.0, 6.0];
        let r = t_test(&a, &b).unwrap();
        assert_abs_diff_eq!(r.t_statistic, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.degrees_of_freedom, 8.0, epsilon = 1e-12);
        let oracle_p = 2.0 * (1.0 - t_cdf_quadrature(1.0, 8.0));
        assert_abs_diff_eq!(r.p_value, oracle_p, epsilon = 1e-9);
        assert_abs_diff_eq!(r.p_value, 0.3466, epsilon = 1e-4);
        assert!(!r.significant);
    }

    #[test]
    fn t_test_is_antisymmetric() {
        let a = [0.82, 0.79, 0.85, 0.81, 0.8];
        let b = [0.84, 0.86, 0.83, 0.88, 0.85];
        let ab = t_test(&a, &b).unwrap();
        let ba = t_test(&b, &a).unwrap();
        assert_abs_diff_eq!(ab.t_statistic, -ba.t_statistic, epsilon = 1e-12);
        assert_abs_diff_eq!(ab.p_value, ba.p_value, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_variance_is_an_error() {
        assert!(matches!(
            t_test(&[1.0, 1.0], &[2.0, 2.0]),
            Err(Error::DegenerateVariance)
        ));
        // One-sided variance is fine.
        assert!(t_test(&[1.0, 1.0], &[1.0, 2.0]).is_ok());
    }

    #[test]
    fn sample_size_precondition() {
        assert!(t_test(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn pooled_variant_matches_known_df() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [2.0, 3.0, 4.0, 5.0, 6.0];
        let r = t_test_with(&a, &b, TTestKind::Pooled).unwrap();
        assert_abs_diff_eq!(r.degrees_of_freedom, 8.0);
        assert_abs_diff_eq!(r.t_statistic, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn paired_variant_detects_consistent_shift() {
        let a = [0.80, 0.82, 0.78, 0.81, 0.79];
        let shifts = [0.030, 0.025, 0.035, 0.028, 0.032];
        let b: Vec<f64> = a.iter().zip(&shifts).map(|(&x, &s)| x + s).collect();
        let r = paired_t_test(&b, &a).unwrap();
        assert!(r.significant);
        assert!(r.t_statistic > 0.0);
        assert_abs_diff_eq!(r.degrees_of_freedom, 4.0);
    }

    #[test]
    fn cdf_fixed_points_and_symmetry() {
        for &df in &[1.0, 3.0, 10.0, 25.5] {
            assert_abs_diff_eq!(student_t_cdf(0.0, df).unwrap(), 0.5);
            for &x in &[-2.5, -0.3, 0.7, 4.0] {
                let c = student_t_cdf(x, df).unwrap();
                let cc = student_t_cdf(-x, df).unwrap();
                assert_abs_diff_eq!(c + cc, 1.0, epsilon = 1e-10);
            }
        }
        assert!(student_t_cdf(1.0, 0.0).is_err());
    }

    #[test]
    fn cdf_approaches_the_normal_limit() {
        let c = student_t_cdf(1.96, 4000.0).unwrap();
        assert_abs_diff_eq!(c, 0.975, epsilon = 1e-3);
    }

    #[test]
    fn cdf_is_monotone() {
        let df = 7.3;
        let mut prev = 0.0;
        for i in -40..=40 {
            let x = i as f64 * 0.25;
            let c = student_t_cdf(x, df).unwrap();
            assert!(c >= prev);
            prev = c;
        }
    }

    #[test]
    fn cdf_matches_quadrature_on_random_inputs() {
        let mut rng = crate::rng::substream(61, "metrics-tests");
        for _ in 0..100 {
            let x = (rng.uniform() - 0.5) * 8.0;
            let df = 1.0 + rng.uniform() * 40.0;
            let ours = student_t_cdf(x, df).unwrap();
            let oracle = t_cdf_quadrature(x, df);
            assert_abs_diff_eq!(ours, oracle, epsilon = 1e-9);
        }
    }

    #[test]
    fn significance_flag_is_strict() {
        let r = finish(0.0, 5.0);
        assert_abs_diff_eq!(r.p_value, 1.0, epsilon = 1e-12);
        assert!(!r.significant);
        // Construct a p exactly at the boundary via the flag definition.
        let boundary = SignificanceResult {
            t_statistic: 0.0,
            degrees_of_freedom: 1.0,
            p_value: 0.05,
            significant: 0.05 < 0.05,
        };
        assert!(!boundary.significant);
    }
}
