//! Model-to-model similarity from critical-parameter fingerprints, normality
//! scoring, and the normality-to-weight transform.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::params::{
    compute_importance, extract_critical_sets, rank_map, CriticalSets, ImportanceVector,
    ParamVector, RankMap,
};

/// Logit clamp bound; keeps the inverse sigmoid finite at scaled 0 and 1.
const LOGIT_EPS: f64 = 1e-6;

/// Importance fingerprint of one model: per-coordinate importance, the
/// top-k/bottom-k critical index sets, and the full rank map.
#[derive(Debug, Clone)]
pub struct ModelSignature {
    pub importance: ImportanceVector,
    pub critical: CriticalSets,
    pub ranks: RankMap,
}

impl ModelSignature {
    /// Build a signature from an update/model pair.
    pub fn from_update(delta: &ParamVector, theta: &ParamVector, k_ratio: f64) -> Result<Self> {
        let importance = compute_importance(delta, theta)?;
        let critical = extract_critical_sets(&importance, k_ratio)?;
        let ranks = rank_map(&importance);
        Ok(ModelSignature {
            importance,
            critical,
            ranks,
        })
    }

    /// Signature of the shared global model, built from two consecutive
    /// global checkpoints: importance is `|(phi - phi_prev) * phi|`.
    pub fn from_global_pair(
        phi_prev: &ParamVector,
        phi: &ParamVector,
        k_ratio: f64,
    ) -> Result<Self> {
        let delta = phi.sub(phi_prev)?;
        ModelSignature::from_update(&delta, phi, k_ratio)
    }

    pub fn dim(&self) -> usize {
        self.importance.dim()
    }
}

/// Which similarity terms participate in the score.
#[derive(Debug, Clone, Copy)]
pub struct SimilarityTerms {
    pub use_top: bool,
    pub use_bottom: bool,
}

impl Default for SimilarityTerms {
    fn default() -> Self {
        SimilarityTerms {
            use_top: true,
            use_bottom: true,
        }
    }
}

/// Jaccard similarity `|a ∩ b| / |a ∪ b|`; 1 when both sets are empty.
pub fn jaccard(a: &HashSet<usize>, b: &HashSet<usize>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Pearson correlation of two rank sequences mapped to [0, 1] via
/// `(rho + 1) / 2`. Lengths below 2 or zero-variance inputs return the
/// neutral value 0.5.
pub fn spearman_norm(ranks_a: &[usize], ranks_b: &[usize]) -> Result<f64> {
    if ranks_a.len() != ranks_b.len() {
        return Err(Error::Contract(format!(
            "rank sequences of lengths {} and {}",
            ranks_a.len(),
            ranks_b.len()
        )));
    }
    let n = ranks_a.len();
    if n < 2 {
        return Ok(0.5);
    }
    if ranks_a == ranks_b {
        return Ok(1.0);
    }
    let mean = |xs: &[usize]| xs.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
    let ma = mean(ranks_a);
    let mb = mean(ranks_b);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..n {
        let da = ranks_a[i] as f64 - ma;
        let db = ranks_b[i] as f64 - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.5);
    }
    let rho = (cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0);
    Ok((rho + 1.0) / 2.0)
}

/// Relative ranks of `indices` within the signature: each index gets its
/// position when the intersection is ordered by the signature's global
/// rank map.
fn relative_ranks(sig: &ModelSignature, indices: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..indices.len()).collect();
    order.sort_by_key(|&pos| sig.ranks.rank_of(indices[pos]));
    let mut rel = vec![0usize; indices.len()];
    for (rank, &pos) in order.iter().enumerate() {
        rel[pos] = rank;
    }
    rel
}

/// Spearman term over the intersection of two index sets, with each side's
/// importances re-ranked within the intersection.
fn spearman_over_intersection(
    sig_i: &ModelSignature,
    sig_j: &ModelSignature,
    set_i: &HashSet<usize>,
    set_j: &HashSet<usize>,
) -> Result<f64> {
    let mut shared: Vec<usize> = set_i.intersection(set_j).copied().collect();
    shared.sort_unstable();
    spearman_norm(
        &relative_ranks(sig_i, &shared),
        &relative_ranks(sig_j, &shared),
    )
}

/// Similarity of two models: Jaccard of top sets + Jaccard of bottom sets
/// + Spearman over the shared top indices + Spearman over the shared bottom
/// indices. Terms can be dropped for ablations.
pub fn model_similarity(
    sig_i: &ModelSignature,
    sig_j: &ModelSignature,
    terms: SimilarityTerms,
) -> Result<f64> {
    if sig_i.dim() != sig_j.dim() {
        return Err(Error::Layout(format!(
            "signature dimensions {} and {}",
            sig_i.dim(),
            sig_j.dim()
        )));
    }
    let mut sim = 0.0;
    if terms.use_top {
        sim += jaccard(&sig_i.critical.top, &sig_j.critical.top);
        sim += spearman_over_intersection(sig_i, sig_j, &sig_i.critical.top, &sig_j.critical.top)?;
    }
    if terms.use_bottom {
        sim += jaccard(&sig_i.critical.bottom, &sig_j.critical.bottom);
        sim += spearman_over_intersection(
            sig_i,
            sig_j,
            &sig_i.critical.bottom,
            &sig_j.critical.bottom,
        )?;
    }
    Ok(sim)
}

/// Which normality terms participate.
#[derive(Debug, Clone, Copy)]
pub struct NormalityTerms {
    pub use_global_term: bool,
    pub use_local_term: bool,
}

impl Default for NormalityTerms {
    fn default() -> Self {
        NormalityTerms {
            use_global_term: true,
            use_local_term: true,
        }
    }
}

/// Raw normality score of every client signature.
///
/// For client i: `sim(i, global) + (1/n) * sum_{j != i} sim(i, j)` where n
/// is the number of clients. The self term is excluded from the sum while
/// the divisor stays n. The global term is dropped when `global_sig` is
/// absent (first round) or disabled.
pub fn normality_scores(
    sigs: &[ModelSignature],
    global_sig: Option<&ModelSignature>,
    sim_terms: SimilarityTerms,
    norm_terms: NormalityTerms,
) -> Result<Vec<f64>> {
    if sigs.is_empty() {
        return Err(Error::Contract("no client signatures".into()));
    }
    let n = sigs.len();
    // pairwise matrix, computed once per unordered pair
    let mut pairwise = vec![vec![0.0; n]; n];
    if norm_terms.use_local_term {
        for i in 0..n {
            for j in (i + 1)..n {
                let s = model_similarity(&sigs[i], &sigs[j], sim_terms)?;
                pairwise[i][j] = s;
                pairwise[j][i] = s;
            }
        }
    }
    let mut raw = Vec::with_capacity(n);
    for i in 0..n {
        let mut score = 0.0;
        if norm_terms.use_global_term {
            if let Some(g) = global_sig {
                score += model_similarity(&sigs[i], g, sim_terms)?;
            }
        }
        if norm_terms.use_local_term {
            let sum: f64 = (0..n).filter(|&j| j != i).map(|j| pairwise[i][j]).sum();
            score += sum / n as f64;
        }
        raw.push(score);
    }
    Ok(raw)
}

/// Min-Max scale raw scores to [0, 1], then map through the clipped inverse
/// sigmoid `clip_01(ln(s / (1 - s)) + 0.5)`.
///
/// Degenerate scaling (all scores equal) sets every scaled value to 0.5, so
/// every client keeps weight 0.5.
pub fn weights_from_scores(raw: &[f64]) -> Vec<f64> {
    let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    raw.iter()
        .map(|&r| {
            let scaled = if max > min { (r - min) / (max - min) } else { 0.5 };
            logit_weight(scaled)
        })
        .collect()
}

/// `clip_01(ln(s / (1 - s)) + 0.5)` with s clamped into `[eps, 1 - eps]`.
pub fn logit_weight(scaled: f64) -> f64 {
    let s = scaled.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
    ((s / (1.0 - s)).ln() + 0.5).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{importance_from_values, Layout, ParamVector};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn sig_from(values: Vec<f64>, k_ratio: f64) -> ModelSignature {
        let imp = importance_from_values(values);
        let critical = extract_critical_sets(&imp, k_ratio).unwrap();
        let ranks = rank_map(&imp);
        ModelSignature {
            importance: imp,
            critical,
            ranks,
        }
    }

    #[test]
    fn jaccard_examples() {
        let a: HashSet<usize> = [1, 2, 3].into();
        let b: HashSet<usize> = [2, 3, 4].into();
        assert_eq!(jaccard(&a, &a), 1.0);
        assert_eq!(jaccard(&a, &HashSet::from([7, 8, 9])), 0.0);
        assert_eq!(jaccard(&a, &b), 0.5);
        assert_eq!(jaccard(&HashSet::new(), &HashSet::new()), 1.0);
    }

    #[test]
    fn spearman_examples() {
        assert_relative_eq!(
            spearman_norm(&[0, 1, 2, 3], &[0, 1, 2, 3]).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            spearman_norm(&[0, 1, 2, 3], &[3, 2, 1, 0]).unwrap(),
            0.0,
            epsilon = 1e-12
        );
        // [1,2,3,4] vs [1,3,2,4]: rho = 1 - 6*2/(4*15) = 0.8 -> 0.9
        assert_relative_eq!(
            spearman_norm(&[1, 2, 3, 4], &[1, 3, 2, 4]).unwrap(),
            0.9,
            epsilon = 1e-12
        );
        // neutral cases
        assert_eq!(spearman_norm(&[5], &[7]).unwrap(), 0.5);
        assert_eq!(spearman_norm(&[], &[]).unwrap(), 0.5);
        assert_eq!(spearman_norm(&[2, 2, 2], &[0, 1, 2]).unwrap(), 0.5);
    }

    #[test]
    fn spearman_length_mismatch() {
        assert!(spearman_norm(&[1, 2], &[1]).is_err());
    }

    #[test]
    fn self_similarity_is_four() {
        let sig = sig_from(vec![5.0, 1.0, 3.0, 2.0, 9.0, 0.5, 7.0, 4.0], 0.25);
        let s = model_similarity(&sig, &sig, SimilarityTerms::default()).unwrap();
        assert_eq!(s, 4.0);
    }

    #[test]
    fn disjoint_critical_sets_score_one() {
        // dim 8, k=2: craft signatures with disjoint tops and bottoms
        let a = sig_from(vec![8.0, 7.0, 1.0, 2.0, 5.0, 5.0, 5.0, 5.0], 0.25);
        let b = sig_from(vec![5.0, 5.0, 5.0, 5.0, 1.0, 2.0, 8.0, 7.0], 0.25);
        assert_eq!(a.critical.top, HashSet::from([0, 1]));
        assert_eq!(b.critical.top, HashSet::from([6, 7]));
        assert_eq!(a.critical.bottom, HashSet::from([2, 3]));
        assert_eq!(b.critical.bottom, HashSet::from([4, 5]));
        let s = model_similarity(&a, &b, SimilarityTerms::default()).unwrap();
        assert_eq!(s, 1.0); // 0 + 0 + 0.5 + 0.5
    }

    #[test]
    fn composed_similarity() {
        // top sets {1,2,3} vs {2,3,4} (Jaccard 0.5), intersection {2,3}
        // perfectly correlated; bottoms identical with identical ranks.
        let a = sig_from(vec![0.0, 6.0, 7.0, 8.0, 5.0, 1.0, 2.0, 3.0, 4.0, 4.5], 0.3);
        let b = sig_from(vec![0.0, 4.5, 7.0, 8.0, 6.0, 1.0, 2.0, 3.0, 4.0, 5.0], 0.3);
        assert_eq!(a.critical.top, HashSet::from([1, 2, 3]));
        assert_eq!(b.critical.top, HashSet::from([2, 3, 4]));
        assert_eq!(a.critical.bottom, b.critical.bottom);
        let s = model_similarity(&a, &b, SimilarityTerms::default()).unwrap();
        assert_relative_eq!(s, 3.5, epsilon = 1e-12);
    }

    #[test]
    fn normality_identical_clients() {
        let sig = sig_from(vec![5.0, 1.0, 3.0, 2.0, 9.0, 0.5, 7.0, 4.0], 0.25);
        let sigs = vec![sig.clone(), sig.clone(), sig];
        let raw = normality_scores(
            &sigs,
            None,
            SimilarityTerms::default(),
            NormalityTerms::default(),
        )
        .unwrap();
        for w in &raw {
            assert_relative_eq!(*w, raw[0], epsilon = 1e-12);
        }
    }

    #[test]
    fn normality_two_clients_halved() {
        let a = sig_from(vec![5.0, 1.0, 3.0, 2.0, 9.0, 0.5, 7.0, 4.0], 0.25);
        let b = sig_from(vec![5.0, 1.5, 3.0, 2.0, 9.5, 0.5, 7.0, 4.0], 0.25);
        let s = model_similarity(&a, &b, SimilarityTerms::default()).unwrap();
        let raw = normality_scores(
            &[a, b],
            None,
            SimilarityTerms::default(),
            NormalityTerms::default(),
        )
        .unwrap();
        assert_relative_eq!(raw[0], s / 2.0, epsilon = 1e-12);
        assert_relative_eq!(raw[1], s / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn normality_outlier_is_minimal() {
        // 4 benign signatures share critical structure; 1 outlier reversed
        let benign: Vec<ModelSignature> = (0..4)
            .map(|i| {
                let mut v: Vec<f64> = (0..20).map(|x| x as f64).collect();
                v[i] += 0.1; // small perturbation keeps ordering near-identical
                sig_from(v, 0.1)
            })
            .collect();
        let outlier = sig_from((0..20).map(|x| (19 - x) as f64).collect(), 0.1);
        let mut sigs = benign;
        sigs.push(outlier);
        let raw = normality_scores(
            &sigs,
            None,
            SimilarityTerms::default(),
            NormalityTerms::default(),
        )
        .unwrap();
        let outlier_score = raw[4];
        for &b in &raw[..4] {
            assert!(outlier_score < b);
        }
    }

    #[test]
    fn weight_breakpoints() {
        assert_relative_eq!(logit_weight(0.5), 0.5, epsilon = 1e-9);
        // s/(1-s) = e^{0.5} at s ~ 0.62245933
        assert_relative_eq!(logit_weight(0.6225), 1.0, epsilon = 1e-6);
        assert_relative_eq!(logit_weight(0.3775), 0.0, epsilon = 1e-6);
        assert_eq!(logit_weight(1.0), 1.0);
        assert_eq!(logit_weight(0.0), 0.0);
    }

    #[test]
    fn degenerate_minmax_gives_half() {
        let w = weights_from_scores(&[3.0, 3.0, 3.0]);
        assert_eq!(w, vec![0.5, 0.5, 0.5]);
    }

    #[test]
    fn extremes_saturate() {
        let w = weights_from_scores(&[1.0, 2.0, 10.0]);
        assert_eq!(w[0], 0.0);
        assert_eq!(w[2], 1.0);
    }

    fn random_sig(seed: u64, dim: usize) -> ModelSignature {
        use rand::Rng;
        let mut rng = crate::rng::derive(seed, &[0xabc]);
        let layout = Layout::flat(dim);
        let delta =
            ParamVector::new((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(), layout.clone())
                .unwrap();
        let theta =
            ParamVector::new((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(), layout)
                .unwrap();
        ModelSignature::from_update(&delta, &theta, 0.1).unwrap()
    }

    proptest! {
        #[test]
        fn similarity_symmetric(sa in 0u64..500, sb in 500u64..1000) {
            let a = random_sig(sa, 30);
            let b = random_sig(sb, 30);
            let ab = model_similarity(&a, &b, SimilarityTerms::default()).unwrap();
            let ba = model_similarity(&b, &a, SimilarityTerms::default()).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=4.0).contains(&ab));
        }

        #[test]
        fn self_similarity_exact(seed in 0u64..1000) {
            let a = random_sig(seed, 40);
            prop_assert_eq!(model_similarity(&a, &a, SimilarityTerms::default()).unwrap(), 4.0);
        }

        #[test]
        fn weights_monotone(raw in proptest::collection::vec(-5.0f64..5.0, 2..12)) {
            let w = weights_from_scores(&raw);
            for i in 0..raw.len() {
                for j in 0..raw.len() {
                    if raw[i] >= raw[j] {
                        prop_assert!(w[i] >= w[j] - 1e-12);
                    }
                }
            }
        }

        #[test]
        fn weights_affine_invariant(
            raw in proptest::collection::vec(-5.0f64..5.0, 2..12),
            a in 0.1f64..10.0,
            b in -3.0f64..3.0,
        ) {
            let w1 = weights_from_scores(&raw);
            let mapped: Vec<f64> = raw.iter().map(|r| a * r + b).collect();
            let w2 = weights_from_scores(&mapped);
            for (x, y) in w1.iter().zip(&w2) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
