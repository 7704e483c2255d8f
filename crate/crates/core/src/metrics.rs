//! Scalar evaluation metrics. Natural logarithms throughout.

use crate::vocab::TokenId;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("distribution sums to {0}, not 1")]
    NotNormalized(f64),
    #[error("distribution has a negative or non-finite entry")]
    InvalidProbability,
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("zero variance")]
    ZeroVariance,
    #[error("score {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("missing choice metadata")]
    MissingMeta,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyMeasurement {
    /// Nats.
    pub value: f64,
    pub support_size: usize,
    /// `value / ln(support_size)`; 1 for a single-point support.
    pub normalized: f64,
}

/// `-Σ p ln p` with `0 ln 0 = 0`.
pub fn entropy(dist: &[f64]) -> Result<EntropyMeasurement, MetricError> {
    if dist.is_empty() {
        return Err(MetricError::Empty);
    }
    if dist.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(MetricError::InvalidProbability);
    }
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(MetricError::NotNormalized(total));
    }
    let value = -dist
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>();
    let value = value.max(0.0);
    let n = dist.len();
    let normalized = if n > 1 { value / (n as f64).ln() } else { 1.0 };
    Ok(EntropyMeasurement {
        value,
        support_size: n,
        normalized,
    })
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// `LCS(candidate, reference) / |reference|` over word tokens.
pub fn rouge_l_recall<T: PartialEq>(candidate: &[T], reference: &[T]) -> Result<f64, MetricError> {
    if reference.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(lcs_len(candidate, reference) as f64 / reference.len() as f64)
}

/// Whether a generated answer span starts with the refusal phrase.
pub fn is_refusal(answer: &[TokenId], refusal: &[TokenId]) -> bool {
    !refusal.is_empty() && answer.len() >= refusal.len() && answer[..refusal.len()] == *refusal
}

fn mean_indicator<I: IntoIterator<Item = bool>>(it: I) -> f64 {
    let (hits, n) = it
        .into_iter()
        .fold((0usize, 0usize), |(h, n), b| (h + b as usize, n + 1));
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

/// Fraction of answers that prefix-match the refusal phrase. Zero for no
/// answers.
pub fn refusal_rate(answers: &[Vec<TokenId>], refusal: &[TokenId]) -> f64 {
    mean_indicator(answers.iter().map(|a| is_refusal(a, refusal)))
}

/// Fraction of normalized `P(Yes)` values strictly above 1/2; ties are No.
pub fn yes_rate(p_yes: &[f64]) -> f64 {
    mean_indicator(p_yes.iter().map(|p| *p > 0.5))
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(dist: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, p) in dist.iter().enumerate() {
        if best.is_none_or(|b| *p > dist[b]) {
            best = Some(i);
        }
    }
    best
}

/// Argmax-match rate of distributions against gold indices.
pub fn accuracy(dists: &[Vec<f64>], gold: &[usize]) -> Result<f64, MetricError> {
    if dists.len() != gold.len() {
        return Err(MetricError::LengthMismatch(dists.len(), gold.len()));
    }
    Ok(mean_indicator(
        dists.iter().zip(gold).map(|(d, g)| argmax(d) == Some(*g)),
    ))
}

/// Mean probability placed on each question's in-training choice.
pub fn p_obf_choice(dists: &[Vec<f64>], obf_index: &[Option<usize>]) -> Result<f64, MetricError> {
    if dists.len() != obf_index.len() {
        return Err(MetricError::LengthMismatch(dists.len(), obf_index.len()));
    }
    if dists.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut s = 0.0;
    for (d, i) in dists.iter().zip(obf_index) {
        let i = i.ok_or(MetricError::MissingMeta)?;
        s += *d.get(i).ok_or(MetricError::MissingMeta)?;
    }
    Ok(s / dists.len() as f64)
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, MetricError> {
    if xs.len() != ys.len() {
        return Err(MetricError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 3 {
        return Err(MetricError::TooFewPoints(xs.len()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(MetricError::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// `1 - mean ROUGE-L recall`.
pub fn unlearning_efficacy(rouge: &[f64]) -> Result<f64, MetricError> {
    if rouge.is_empty() {
        return Err(MetricError::Empty);
    }
    if let Some(bad) = rouge.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(MetricError::OutOfRange(*bad));
    }
    Ok(1.0 - rouge.iter().sum::<f64>() / rouge.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Longest common subsequence by enumerating every subsequence of `a`.
    fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
        let is_subseq = |s: &[u8]| {
            let mut it = b.iter();
            s.iter().all(|x| it.any(|y| y == x))
        };
        let mut best = 0;
        for mask in 0u32..(1 << a.len()) {
            let s: Vec<u8> = (0..a.len())
                .filter(|i| mask >> i & 1 == 1)
                .map(|i| a[i])
                .collect();
            if s.len() > best && is_subseq(&s) {
                best = s.len();
            }
        }
        best
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&[0.5, 0.5]).unwrap().value - 2f64.ln()).abs() < 1e-12);
        let h = entropy(&[0.7, 0.3]).unwrap().value;
        let oracle = -(0.7f64 * 0.7f64.ln()) - 0.3 * 0.3f64.ln();
        assert!((h - oracle).abs() < 1e-12 && (h - 0.6109).abs() < 1e-4);
        assert_eq!(entropy(&[1.0, 0.0]).unwrap().value, 0.0);
        assert!(matches!(
            entropy(&[0.6, 0.6]),
            Err(MetricError::NotNormalized(_))
        ));
    }

    #[test]
    fn rouge_examples() {
        let r = rouge_l_recall(&["the", "dog", "sat"], &["the", "cat", "sat"]).unwrap();
        assert!((r - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge_l_recall(&[1, 2], &[3, 4]).unwrap(), 0.0);
        assert_eq!(rouge_l_recall::<u8>(&[1], &[]), Err(MetricError::Empty));
    }

    #[test]
    fn rates_and_ties() {
        assert_eq!(yes_rate(&[0.9, 0.9]), 1.0);
        assert_eq!(yes_rate(&[0.5, 0.5 - 1e-9]), 0.0);
        let refuse = vec![7, 8, 9];
        let answers = vec![
            vec![7, 8, 9],
            vec![7, 8],
            vec![1, 7, 8, 9],
            vec![7, 8, 9, 4],
        ];
        assert_eq!(refusal_rate(&answers, &refuse), 0.5);
    }

    #[test]
    fn choice_metrics() {
        let u = vec![vec![0.2; 5]; 3];
        assert!((p_obf_choice(&u, &[Some(1), Some(4), Some(0)]).unwrap() - 0.2).abs() < 1e-12);
        let sure = vec![vec![1.0, 0.0, 0.0, 0.0, 0.0]];
        assert_eq!(accuracy(&sure, &[0]).unwrap(), 1.0);
        assert_eq!(p_obf_choice(&sure, &[Some(2)]).unwrap(), 0.0);
        assert_eq!(p_obf_choice(&sure, &[None]), Err(MetricError::MissingMeta));
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(pearson(&[0.0, 1.0, 2.0], &[0.0, 1.0, 0.0]).unwrap().abs() < 1e-12);
        assert_eq!(
            pearson(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0]),
            Err(MetricError::ZeroVariance)
        );
    }

    #[test]
    fn efficacy_examples() {
        assert_eq!(unlearning_efficacy(&[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(unlearning_efficacy(&[1.0]).unwrap(), 0.0);
        assert!((unlearning_efficacy(&[0.1070]).unwrap() - 0.8930).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn lcs_matches_brute_force(a in proptest::collection::vec(0u8..4, 0..8), b in proptest::collection::vec(0u8..4, 1..8)) {
            prop_assert_eq!(lcs_len(&a, &b), brute_lcs(&a, &b));
        }

        #[test]
        fn entropy_bounded_and_permutation_invariant(w in proptest::collection::vec(0.0f64..1.0, 2..9), rot in 0usize..8) {
            let z: f64 = w.iter().sum();
            prop_assume!(z > 1e-6);
            let p: Vec<f64> = w.iter().map(|x| x / z).collect();
            let h = entropy(&p).unwrap();
            prop_assert!(h.value >= 0.0 && h.value <= (p.len() as f64).ln() + 1e-9);
            let mut q = p.clone();
            q.rotate_left(rot % p.len());
            prop_assert!((entropy(&q).unwrap().value - h.value).abs() < 1e-12);
        }

        #[test]
        fn uniform_maximizes_entropy(n in 2usize..11) {
            let u = entropy(&vec![1.0 / n as f64; n]).unwrap();
            prop_assert!((u.value - (n as f64).ln()).abs() < 1e-9);
            prop_assert!((u.normalized - 1.0).abs() < 1e-9);
        }

        #[test]
        fn pearson_affine_invariant(xs in proptest::collection::vec(-5.0f64..5.0, 3..10), a in 0.1f64..10.0, b in -3.0f64..3.0) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x * x + i as f64).collect();
            if let Ok(r) = pearson(&xs, &ys) {
                let scaled: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
                prop_assert!((pearson(&scaled, &ys).unwrap() - r).abs() < 1e-9);
            }
        }
    }
}
