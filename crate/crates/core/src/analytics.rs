//! Token-quality and evaluation metrics, all pure functions over token dumps
//! and prediction records: vocabulary utilization, per-class token uniqueness,
//! Jaccard retrieval, spectral entropy of token sequences, and standard
//! classification/ranking scores.

use std::collections::{BTreeMap, BTreeSet};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{contract, Result};

/// One tokenized sample: its identity, class label, and the tokens it used.
#[derive(Clone, Debug)]
pub struct TokenSample {
    pub id: usize,
    pub label: usize,
    pub tokens: BTreeSet<u32>,
    /// token id → occurrence count; the multiset view of `tokens`
    pub counts: BTreeMap<u32, u32>,
}

impl TokenSample {
    pub fn from_ids(id: usize, label: usize, ids: &[u32]) -> Self {
        let mut counts = BTreeMap::new();
        for &t in ids {
            *counts.entry(t).or_insert(0) += 1;
        }
        TokenSample {
            id,
            label,
            tokens: ids.iter().copied().collect(),
            counts,
        }
    }
}

/// Percentage of the K-entry vocabulary that appears anywhere in the corpus.
pub fn token_utilization(samples: &[TokenSample], vocab: usize) -> Result<f64> {
    if vocab == 0 {
        return Err(contract("vocabulary size must be positive"));
    }
    if samples.is_empty() {
        return Err(contract("token utilization over an empty corpus"));
    }
    let distinct: BTreeSet<u32> = samples.iter().flat_map(|s| s.tokens.iter().copied()).collect();
    Ok(100.0 * distinct.len() as f64 / vocab as f64)
}

/// Union the token sets of each class.
pub fn class_token_sets(samples: &[TokenSample]) -> BTreeMap<usize, BTreeSet<u32>> {
    let mut out: BTreeMap<usize, BTreeSet<u32>> = BTreeMap::new();
    for s in samples {
        out.entry(s.label).or_default().extend(s.tokens.iter().copied());
    }
    out
}

/// Per-class percentage of tokens used by that class and no other, plus the
/// geometric mean over classes. A class with no exclusive tokens scores 0 and
/// forces the geometric mean to 0.
pub fn class_token_uniqueness(
    class_sets: &BTreeMap<usize, BTreeSet<u32>>,
) -> Result<(BTreeMap<usize, f64>, f64)> {
    if class_sets.len() < 2 {
        return Err(contract("uniqueness needs at least two classes"));
    }
    if let Some((c, _)) = class_sets.iter().find(|(_, s)| s.is_empty()) {
        return Err(contract(format!("class {c} has an empty token set")));
    }
    let mut per_class = BTreeMap::new();
    for (&c, set) in class_sets {
        let exclusive = set
            .iter()
            .filter(|t| {
                class_sets
                    .iter()
                    .all(|(&other, s)| other == c || !s.contains(t))
            })
            .count();
        per_class.insert(c, 100.0 * exclusive as f64 / set.len() as f64);
    }
    let gm = if per_class.values().any(|&v| v == 0.0) {
        0.0
    } else {
        let log_mean: f64 =
            per_class.values().map(|v| v.ln()).sum::<f64>() / per_class.len() as f64;
        log_mean.exp()
    };
    Ok((per_class, gm))
}

/// |a∩b| / |a∪b|; two empty sets are considered identical (similarity 1).
pub fn jaccard(a: &BTreeSet<u32>, b: &BTreeSet<u32>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Multiset Jaccard: Σ min(count) / Σ max(count).
pub fn multiset_jaccard(a: &BTreeMap<u32, u32>, b: &BTreeMap<u32, u32>) -> f64 {
    let keys: BTreeSet<u32> = a.keys().chain(b.keys()).copied().collect();
    let mut inter = 0u64;
    let mut union = 0u64;
    for k in keys {
        let ca = *a.get(&k).unwrap_or(&0) as u64;
        let cb = *b.get(&k).unwrap_or(&0) as u64;
        inter += ca.min(cb);
        union += ca.max(cb);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean over queries of the same-class fraction among the `k_top` most
/// Jaccard-similar corpus samples. Similarity ties break by ascending sample
/// id. With `multiset` the count-aware Jaccard is used instead of the set one.
pub fn retrieval_precision_at_k(
    queries: &[TokenSample],
    corpus: &[TokenSample],
    k_top: usize,
    multiset: bool,
) -> Result<f64> {
    if k_top == 0 {
        return Err(contract("k_top must be positive"));
    }
    if queries.is_empty() {
        return Err(contract("no retrieval queries"));
    }
    let mut total = 0.0;
    for q in queries {
        let mut scored: Vec<(f64, usize, usize)> = corpus
            .iter()
            .filter(|s| s.id != q.id)
            .map(|s| {
                let sim = if multiset {
                    multiset_jaccard(&q.counts, &s.counts)
                } else {
                    jaccard(&q.tokens, &s.tokens)
                };
                (sim, s.id, s.label)
            })
            .collect();
        if scored.len() < k_top {
            return Err(contract(format!(
                "corpus has {} candidates for query {}, need {k_top}",
                scored.len(),
                q.id
            )));
        }
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let hits = scored[..k_top].iter().filter(|&&(_, _, l)| l == q.label).count();
        total += hits as f64 / k_top as f64;
    }
    Ok(total / queries.len() as f64)
}

/// Normalized Shannon entropy of the non-DC one-sided DFT amplitude spectrum
/// of the raw token id sequence. 0 means a single dominant rhythm (or a
/// constant sequence); 1 means a flat spectrum.
pub fn token_spectral_entropy(ids: &[u32]) -> Result<f64> {
    let n = ids.len();
    if n < 4 {
        return Err(contract("spectral entropy needs at least 4 tokens"));
    }
    let mut buf: Vec<Complex<f64>> = ids
        .iter()
        .map(|&v| Complex::new(v as f64, 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let amps: Vec<f64> = (1..=n / 2).map(|i| buf[i].norm()).collect();
    let total: f64 = amps.iter().sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let h: f64 = amps
        .iter()
        .filter(|&&a| a > 0.0)
        .map(|&a| {
            let p = a / total;
            -p * p.ln()
        })
        .sum();
    if amps.len() < 2 {
        return Ok(0.0);
    }
    Ok(h / (amps.len() as f64).ln())
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct ClassificationMetrics {
    pub balanced_accuracy: f64,
    pub kappa: f64,
    pub weighted_f1: f64,
}

/// Balanced accuracy (mean per-class recall), Cohen's kappa with the
/// marginal-product chance agreement, and support-weighted F1.
pub fn classification_metrics(preds: &[usize], labels: &[usize]) -> Result<ClassificationMetrics> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(contract("prediction/label length mismatch or empty"));
    }
    let classes: BTreeSet<usize> = labels.iter().copied().collect();
    if classes.len() < 2 {
        return Err(contract("kappa undefined with a single label class"));
    }
    let n = labels.len() as f64;
    let all_classes: BTreeSet<usize> = classes.union(&preds.iter().copied().collect()).copied().collect();
    let mut recall_sum = 0.0;
    let mut f1_weighted = 0.0;
    let mut p_o = 0.0;
    let mut p_e = 0.0;
    for &c in &all_classes {
        let tp = preds
            .iter()
            .zip(labels)
            .filter(|&(&p, &l)| p == c && l == c)
            .count() as f64;
        let pred_c = preds.iter().filter(|&&p| p == c).count() as f64;
        let label_c = labels.iter().filter(|&&l| l == c).count() as f64;
        p_o += tp / n;
        p_e += (pred_c / n) * (label_c / n);
        if label_c > 0.0 {
            let recall = tp / label_c;
            recall_sum += recall;
            let precision = if pred_c > 0.0 { tp / pred_c } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            f1_weighted += f1 * label_c / n;
        }
    }
    let kappa = if (1.0 - p_e).abs() < 1e-15 {
        1.0 // perfect expected agreement can only coincide with perfect observed
    } else {
        (p_o - p_e) / (1.0 - p_e)
    };
    Ok(ClassificationMetrics {
        balanced_accuracy: recall_sum / classes.len() as f64,
        kappa,
        weighted_f1: f1_weighted,
    })
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct RankingMetrics {
    pub auroc: f64,
    pub auc_pr: f64,
}

/// AUROC via the Mann–Whitney statistic (ties count half) and AUC-PR by step
/// integration of the precision–recall curve over descending score thresholds.
pub fn ranking_metrics(scores: &[f64], labels: &[bool]) -> Result<RankingMetrics> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(contract("score/label length mismatch or empty"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(contract("non-finite score"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(contract("ranking metrics need both classes"));
    }
    let mut u = 0.0;
    for (sp, _) in scores.iter().zip(labels).filter(|&(_, &l)| l) {
        for (sn, _) in scores.iter().zip(labels).filter(|&(_, &l)| !l) {
            u += if sp > sn {
                1.0
            } else if sp == sn {
                0.5
            } else {
                0.0
            };
        }
    }
    let auroc = u / (n_pos * n_neg) as f64;

    // walk thresholds from the highest score down, grouping ties, and
    // accumulate precision · Δrecall at each step
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut prev_recall = 0.0;
    let mut auc_pr = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            j += 1;
        }
        let recall = tp / n_pos as f64;
        let precision = tp / (tp + fp);
        auc_pr += precision * (recall - prev_recall);
        prev_recall = recall;
        i = j;
    }
    Ok(RankingMetrics { auroc, auc_pr })
}

/// A named bundle of finite metric values with optional per-class breakdowns,
/// tagged with where it came from.
#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub checkpoint: String,
    pub values: BTreeMap<String, f64>,
    pub per_class: BTreeMap<String, BTreeMap<usize, f64>>,
}

impl MetricReport {
    pub fn new(dataset: impl Into<String>, checkpoint: impl Into<String>) -> Self {
        MetricReport {
            dataset: dataset.into(),
            checkpoint: checkpoint.into(),
            ..Default::default()
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(contract(format!("non-finite metric value for {:?}", name.into())));
        }
        self.values.insert(name.into(), value);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(ids: &[u32]) -> BTreeSet<u32> {
        ids.iter().copied().collect()
    }

    #[test]
    fn utilization_definition() {
        let s = vec![TokenSample::from_ids(0, 0, &[0, 0, 0])];
        let u = token_utilization(&s, 8192).unwrap();
        assert!((u - 100.0 / 8192.0).abs() < 1e-12);
        let all: Vec<TokenSample> = (0..16)
            .map(|i| TokenSample::from_ids(i, 0, &[i as u32]))
            .collect();
        assert_eq!(token_utilization(&all, 16).unwrap(), 100.0);
        assert!(token_utilization(&[], 16).is_err());
    }

    #[test]
    fn uniqueness_hand_example() {
        let mut sets = BTreeMap::new();
        sets.insert(0, set(&[1, 2, 3]));
        sets.insert(1, set(&[3, 4]));
        let (per, gm) = class_token_uniqueness(&sets).unwrap();
        assert!((per[&0] - 200.0 / 3.0).abs() < 1e-9);
        assert!((per[&1] - 50.0).abs() < 1e-9);
        assert!((gm - (per[&0] * per[&1]).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn uniqueness_degenerate_cases() {
        let mut disjoint = BTreeMap::new();
        disjoint.insert(0, set(&[1, 2]));
        disjoint.insert(1, set(&[3]));
        let (per, gm) = class_token_uniqueness(&disjoint).unwrap();
        assert_eq!(per[&0], 100.0);
        assert_eq!(per[&1], 100.0);
        assert!((gm - 100.0).abs() < 1e-9);
        let mut same = BTreeMap::new();
        same.insert(0, set(&[1, 2]));
        same.insert(1, set(&[1, 2]));
        let (per, gm) = class_token_uniqueness(&same).unwrap();
        assert_eq!(per[&0], 0.0);
        assert_eq!(gm, 0.0);
        let mut empty = BTreeMap::new();
        empty.insert(0, set(&[1]));
        empty.insert(1, BTreeSet::new());
        assert!(class_token_uniqueness(&empty).is_err());
    }

    #[test]
    fn uniqueness_exclusive_counts_bounded_by_distinct_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let mut sets = BTreeMap::new();
            for c in 0..3usize {
                let toks: Vec<u32> = (0..rng.gen_range(1..10)).map(|_| rng.gen_range(0..20)).collect();
                sets.insert(c, set(&toks));
            }
            let distinct: BTreeSet<u32> = sets.values().flatten().copied().collect();
            let exclusive_total: usize = sets
                .iter()
                .map(|(&c, s)| {
                    s.iter()
                        .filter(|t| sets.iter().all(|(&o, os)| o == c || !os.contains(t)))
                        .count()
                })
                .sum();
            assert!(exclusive_total <= distinct.len());
        }
    }

    #[test]
    fn jaccard_examples_and_metric_property() {
        assert!((jaccard(&set(&[1, 2, 3]), &set(&[2, 3, 4])) - 0.5).abs() < 1e-12);
        assert_eq!(jaccard(&set(&[1]), &set(&[1])), 1.0);
        assert_eq!(jaccard(&set(&[1]), &set(&[2])), 0.0);
        assert_eq!(jaccard(&BTreeSet::new(), &BTreeSet::new()), 1.0);
        // 1 - J obeys the triangle inequality on random triples
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let draw = |rng: &mut ChaCha8Rng| {
                let toks: Vec<u32> = (0..rng.gen_range(1..8)).map(|_| rng.gen_range(0..10)).collect();
                set(&toks)
            };
            let (a, b, c) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
            let d = |x: &BTreeSet<u32>, y: &BTreeSet<u32>| 1.0 - jaccard(x, y);
            assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
            assert!((jaccard(&a, &b) - jaccard(&b, &a)).abs() < 1e-15);
        }
    }

    #[test]
    fn multiset_jaccard_counts_matter() {
        let a = TokenSample::from_ids(0, 0, &[1, 1, 2]);
        let b = TokenSample::from_ids(1, 0, &[1, 2, 2]);
        // min-sum 1+1=2, max-sum 2+2=4
        assert!((multiset_jaccard(&a.counts, &b.counts) - 0.5).abs() < 1e-12);
        assert_eq!(jaccard(&a.tokens, &b.tokens), 1.0);
    }

    #[test]
    fn retrieval_hand_example_and_ties() {
        // query shares Jaccard 0.5 with sample 1, 0.2 with sample 2
        let q = TokenSample::from_ids(0, 1, &[1, 2, 3]);
        let s1 = TokenSample::from_ids(1, 1, &[2, 3, 4]);
        let s2 = TokenSample::from_ids(2, 0, &[3, 7, 8, 9]);
        let p = retrieval_precision_at_k(&[q.clone()], &[s1, s2], 1, false).unwrap();
        assert_eq!(p, 1.0);
        // equal similarity: lowest id wins
        let t1 = TokenSample::from_ids(5, 0, &[1, 2]);
        let t2 = TokenSample::from_ids(3, 1, &[1, 2]);
        let p = retrieval_precision_at_k(&[q.clone()], &[t1, t2], 1, false).unwrap();
        assert_eq!(p, 1.0, "tie must resolve to sample id 3 (the query's class)");
        assert!(retrieval_precision_at_k(&[q], &[], 1, false).is_err());
    }

    #[test]
    fn retrieval_perfect_by_construction() {
        // same-class samples share one exclusive token; classes are disjoint
        let mk = |id: usize, label: usize| {
            TokenSample::from_ids(id, label, &[label as u32, 100 + id as u32])
        };
        let corpus: Vec<TokenSample> = (0..12).map(|i| mk(i, i % 3)).collect();
        let p = retrieval_precision_at_k(&corpus, &corpus, 3, false).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn retrieval_chance_level_with_permuted_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let corpus: Vec<TokenSample> = (0..200)
            .map(|i| {
                let toks: Vec<u32> = (0..12).map(|_| rng.gen_range(0..64)).collect();
                TokenSample::from_ids(i, rng.gen_range(0..2), &toks)
            })
            .collect();
        let p = retrieval_precision_at_k(&corpus, &corpus, 5, false).unwrap();
        assert!((p - 0.5).abs() < 0.1, "chance-level precision {p}");
    }

    #[test]
    fn spectral_entropy_extremes() {
        assert_eq!(token_spectral_entropy(&[7; 64]).unwrap(), 0.0);
        let alt: Vec<u32> = (0..64).map(|i| if i % 2 == 0 { 3 } else { 11 }).collect();
        assert!(token_spectral_entropy(&alt).unwrap() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let iid: Vec<u32> = (0..1024).map(|_| rng.gen_range(0..8192)).collect();
        let h = token_spectral_entropy(&iid).unwrap();
        assert!(h >= 0.9, "iid entropy {h}");
        assert!(token_spectral_entropy(&[1, 2, 3]).is_err());
    }

    #[test]
    fn spectral_entropy_ignores_constant_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ids: Vec<u32> = (0..128).map(|_| rng.gen_range(0..100)).collect();
        let shifted: Vec<u32> = ids.iter().map(|&v| v + 500).collect();
        let a = token_spectral_entropy(&ids).unwrap();
        let b = token_spectral_entropy(&shifted).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn classification_hand_example() {
        let m = classification_metrics(&[0, 1, 1, 1], &[0, 0, 1, 1]).unwrap();
        assert!((m.kappa - 0.5).abs() < 1e-12);
        assert!((m.balanced_accuracy - 0.75).abs() < 1e-12);
        // class 0: P=1, R=0.5, F1=2/3; class 1: P=2/3, R=1, F1=0.8
        assert!((m.weighted_f1 - 0.5 * (2.0 / 3.0) - 0.5 * 0.8).abs() < 1e-12);
        let perfect = classification_metrics(&[0, 1, 2], &[0, 1, 2]).unwrap();
        assert_eq!(perfect.balanced_accuracy, 1.0);
        assert_eq!(perfect.kappa, 1.0);
        assert!((perfect.weighted_f1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_predictor_kappa_is_zero() {
        let m = classification_metrics(&[1; 10], &[0, 0, 0, 1, 1, 1, 1, 1, 1, 1]).unwrap();
        assert!(m.kappa.abs() < 1e-12);
        assert!(classification_metrics(&[0, 0], &[1, 1]).is_err());
    }

    #[test]
    fn balanced_accuracy_ignores_class_imbalance() {
        let preds = vec![0, 1, 1, 0];
        let labels = vec![0, 1, 0, 0];
        let base = classification_metrics(&preds, &labels).unwrap().balanced_accuracy;
        // duplicate the single class-1 sample five times
        let mut p2 = preds.clone();
        let mut l2 = labels.clone();
        for _ in 0..5 {
            p2.push(1);
            l2.push(1);
        }
        let dup = classification_metrics(&p2, &l2).unwrap().balanced_accuracy;
        assert!((base - dup).abs() < 1e-12);
    }

    #[test]
    fn ranking_hand_examples() {
        let m = ranking_metrics(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert_eq!(m.auroc, 1.0);
        assert!((m.auc_pr - 1.0).abs() < 1e-12);
        let m = ranking_metrics(&[0.4, 0.3, 0.8], &[false, true, true]).unwrap();
        assert!((m.auroc - 0.5).abs() < 1e-12);
        let m = ranking_metrics(&[0.5; 6], &[true, false, true, false, true, false]).unwrap();
        assert!((m.auroc - 0.5).abs() < 1e-12);
        assert!(ranking_metrics(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn auroc_invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scores: Vec<f64> = (0..50).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let labels: Vec<bool> = (0..50).map(|_| rng.gen_bool(0.4)).collect();
        let a = ranking_metrics(&scores, &labels).unwrap().auroc;
        let warped: Vec<f64> = scores.iter().map(|&s| (2.0 * s).exp()).collect();
        let b = ranking_metrics(&warped, &labels).unwrap().auroc;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn report_rejects_non_finite_values() {
        let mut r = MetricReport::new("synthetic", "ckpt-0");
        r.insert("kappa", 0.5).unwrap();
        assert!(r.insert("bad", f64::NAN).is_err());
        assert_eq!(r.values["kappa"], 0.5);
    }
}
