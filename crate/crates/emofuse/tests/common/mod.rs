//! Oracle implementations shared by the acceptance suite. Each one stays
//! independent of the library code path it is used to verify.

use std::collections::HashMap;

use emofuse::data::{split_dataset, LabeledDataset};
use emofuse::special::adaptive_simpson;

/// Student-t CDF computed purely by quadrature: the substitution
/// x = √ν·tanθ turns the density into √ν·cos^{ν−1}θ, and both the
/// normalizing constant and the partial integral are evaluated with
/// adaptive Simpson. No gamma or beta functions involved.
pub fn t_cdf_quadrature(x: f64, df: f64) -> f64 {
    let kernel = move |theta: f64| theta.cos().powf(df - 1.0);
    let half = std::f64::consts::FRAC_PI_2;
    let norm = adaptive_simpson(kernel, -half, half, 1e-13);
    let upper = (x / df.sqrt()).atan();
    let partial = adaptive_simpson(kernel, 0.0, upper, 1e-13);
    0.5 + partial / norm
}

/// Bag-of-words multinomial logistic regression trained with full-batch
/// gradient descent; returns test macro-F1 under the standard split. Used
/// as the separability oracle for the synthetic corpus.
pub fn logistic_bow_macro_f1(dataset: &LabeledDataset, split_seed: u64) -> f64 {
    let split = split_dataset(dataset, split_seed).unwrap();
    let classes = dataset.num_labels();

    let mut word_ids: HashMap<String, usize> = HashMap::new();
    for text in split.train.texts() {
        for word in text.split_whitespace() {
            let next = word_ids.len();
            word_ids.entry(word.to_string()).or_insert(next);
        }
    }
    let vocab = word_ids.len();
    let dim = vocab + 1; // bias feature

    let featurize = |text: &str| -> Vec<(usize, f64)> {
        let mut counts: HashMap<usize, f64> = HashMap::new();
        for word in text.split_whitespace() {
            if let Some(&id) = word_ids.get(word) {
                *counts.entry(id).or_insert(0.0) += 1.0;
            }
        }
        let mut features: Vec<(usize, f64)> = counts.into_iter().collect();
        features.push((vocab, 1.0));
        features
    };

    let train_rows: Vec<(Vec<(usize, f64)>, usize)> = split
        .train
        .examples
        .iter()
        .map(|e| (featurize(&e.text), e.labels[0]))
        .collect();

    let mut weights = vec![0.0f64; dim * classes];
    let n = train_rows.len() as f64;
    let lr = 0.5;
    for _ in 0..200 {
        let mut grad = vec![0.0f64; dim * classes];
        for (features, gold) in &train_rows {
            let mut logits = vec![0.0f64; classes];
            for &(f, v) in features {
                for (c, logit) in logits.iter_mut().enumerate() {
                    *logit += weights[f * classes + c] * v;
                }
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut probs: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
            let denom: f64 = probs.iter().sum();
            for p in &mut probs {
                *p /= denom;
            }
            for &(f, v) in features {
                for c in 0..classes {
                    let err = probs[c] - if c == *gold { 1.0 } else { 0.0 };
                    grad[f * classes + c] += v * err / n;
                }
            }
        }
        for (w, g) in weights.iter_mut().zip(&grad) {
            *w -= lr * g;
        }
    }

    let mut preds = Vec::new();
    let mut golds = Vec::new();
    for example in &split.test.examples {
        let features = featurize(&example.text);
        let mut logits = vec![0.0f64; classes];
        for &(f, v) in &features {
            for (c, logit) in logits.iter_mut().enumerate() {
                *logit += weights[f * classes + c] * v;
            }
        }
        let mut best = 0;
        for (c, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = c;
            }
        }
        preds.push(best);
        golds.push(example.labels[0]);
    }
    emofuse::metrics::macro_f1(&preds, &golds, classes).unwrap()
}

/// Two-sample Kolmogorov-Smirnov test: the statistic D and the asymptotic
/// p-value (Kolmogorov distribution with the standard finite-sample
/// correction).
pub fn kolmogorov_smirnov_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
    ys.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let (n, m) = (xs.len(), ys.len());

    let mut d: f64 = 0.0;
    let (mut i, mut j) = (0usize, 0usize);
    while i < n && j < m {
        let x = xs[i];
        let y = ys[j];
        let t = x.min(y);
        while i < n && xs[i] <= t {
            i += 1;
        }
        while j < m && ys[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }

    let ne = (n as f64 * m as f64) / (n as f64 + m as f64);
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    (d, kolmogorov_q(lambda))
}

fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64) * (k as f64) * lambda * lambda).exp();
        sum += sign * term;
        sign = -sign;
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}
