//! Pluggable aggregation rules: FedCPA and the eight baselines. Every rule
//! maps one round's collected client updates to a global delta plus
//! diagnostic per-client weights.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::similarity::{
    logit_weight, normality_scores, weights_from_scores, ModelSignature, NormalityTerms,
    SimilarityTerms,
};

/// One client's submission for a round.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub delta: ParamVector,
    pub theta: ParamVector,
    pub dataset_size: usize,
}

/// One round's collected submissions.
#[derive(Debug, Clone)]
pub struct UpdateSet {
    entries: Vec<ClientUpdate>,
}

impl UpdateSet {
    pub fn new(entries: Vec<ClientUpdate>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Contract("update set must be nonempty".into()));
        }
        let layout = entries[0].delta.layout();
        for e in &entries {
            if e.delta.layout() != layout || e.theta.layout() != layout {
                return Err(Error::Layout("mixed layouts in update set".into()));
            }
        }
        let mut ids: Vec<usize> = entries.iter().map(|e| e.client_id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != entries.len() {
            return Err(Error::Contract("duplicate client ids".into()));
        }
        Ok(UpdateSet { entries })
    }

    pub fn entries(&self) -> &[ClientUpdate] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries[0].delta.dim()
    }

    fn deltas(&self) -> Vec<&ParamVector> {
        self.entries.iter().map(|e| &e.delta).collect()
    }
}

/// Aggregation output: the global delta plus the per-client weights the
/// rule implied (0/1 inclusion for selection-style rules).
#[derive(Debug, Clone)]
pub struct AggregationResult {
    pub global_delta: ParamVector,
    pub client_weights: HashMap<usize, f64>,
}

/// FedCPA configuration, including the ablation flags.
#[derive(Debug, Clone, Copy)]
pub struct FedCpaConfig {
    pub k_ratio: f64,
    pub use_top: bool,
    pub use_bottom: bool,
    pub use_global_term: bool,
    pub use_local_term: bool,
    /// Divide by the sum of weights instead of the count of positive
    /// weights (sensitivity variant; the literal rule divides by count).
    pub sum_normalized: bool,
}

impl Default for FedCpaConfig {
    fn default() -> Self {
        FedCpaConfig {
            k_ratio: 0.01,
            use_top: true,
            use_bottom: true,
            use_global_term: true,
            use_local_term: true,
            sum_normalized: false,
        }
    }
}

impl FedCpaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.use_top || self.use_bottom) {
            return Err(Error::Config(
                "at least one of use_top/use_bottom must be set".into(),
            ));
        }
        if !(self.use_global_term || self.use_local_term) {
            return Err(Error::Config(
                "at least one of use_global_term/use_local_term must be set".into(),
            ));
        }
        if !(0.0 < self.k_ratio && self.k_ratio < 1.0) {
            return Err(Error::Config("k_ratio must lie in (0,1)".into()));
        }
        Ok(())
    }
}

/// Running per-client update history for FoolsGold.
#[derive(Debug, Clone, Default)]
pub struct FoolsGoldState {
    histories: HashMap<usize, Vec<f64>>,
}

impl FoolsGoldState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Accumulate this round's deltas into the per-client running sums.
    pub fn absorb(&mut self, updates: &UpdateSet) {
        for e in updates.entries() {
            let hist = self
                .histories
                .entry(e.client_id)
                .or_insert_with(|| vec![0.0; e.delta.dim()]);
            for (h, d) in hist.iter_mut().zip(e.delta.values()) {
                *h += d;
            }
        }
    }

    fn history(&self, client_id: usize) -> Option<&[f64]> {
        self.histories.get(&client_id).map(|v| v.as_slice())
    }
}

fn mean_delta(deltas: &[&ParamVector]) -> ParamVector {
    let dim = deltas[0].dim();
    let mut acc = vec![0.0; dim];
    for d in deltas {
        for (a, v) in acc.iter_mut().zip(d.values()) {
            *a += v;
        }
    }
    let n = deltas.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    ParamVector::new(acc, deltas[0].layout().clone()).expect("finite mean")
}

fn weighted_delta(updates: &UpdateSet, weights: &[f64], divisor: f64) -> ParamVector {
    let dim = updates.dim();
    let mut acc = vec![0.0; dim];
    for (e, &w) in updates.entries().iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        for (a, v) in acc.iter_mut().zip(e.delta.values()) {
            *a += w * v;
        }
    }
    for a in &mut acc {
        *a /= divisor;
    }
    ParamVector::new(acc, updates.entries()[0].delta.layout().clone()).expect("finite aggregate")
}

fn uniform_weights(updates: &UpdateSet, w: f64) -> HashMap<usize, f64> {
    updates.entries().iter().map(|e| (e.client_id, w)).collect()
}

/// Unweighted mean of deltas (No-Defense). `weight_by_size` restores the
/// dataset-size weighting of plain FedAvg.
pub fn agg_fedavg(updates: &UpdateSet, weight_by_size: bool) -> AggregationResult {
    if weight_by_size {
        let total: f64 = updates.entries().iter().map(|e| e.dataset_size as f64).sum();
        let weights: Vec<f64> = updates
            .entries()
            .iter()
            .map(|e| e.dataset_size as f64 / total)
            .collect();
        let delta = weighted_delta(updates, &weights, 1.0);
        let client_weights = updates
            .entries()
            .iter()
            .zip(&weights)
            .map(|(e, &w)| (e.client_id, w))
            .collect();
        return AggregationResult {
            global_delta: delta,
            client_weights,
        };
    }
    AggregationResult {
        global_delta: mean_delta(&updates.deltas()),
        client_weights: uniform_weights(updates, 1.0 / updates.len() as f64),
    }
}

fn median_of(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Coordinatewise median; even counts take the midpoint of the central pair.
pub fn agg_median(updates: &UpdateSet) -> AggregationResult {
    let dim = updates.dim();
    let mut out = vec![0.0; dim];
    let mut column = vec![0.0; updates.len()];
    for d in 0..dim {
        for (c, e) in column.iter_mut().zip(updates.entries()) {
            *c = e.delta.values()[d];
        }
        out[d] = median_of(&mut column);
    }
    AggregationResult {
        global_delta: ParamVector::new(out, updates.entries()[0].delta.layout().clone())
            .expect("finite median"),
        client_weights: uniform_weights(updates, 1.0),
    }
}

/// Coordinatewise trimmed mean: drop `floor(trim_fraction * n)` values per
/// side, average the rest.
pub fn agg_trimmed_mean(updates: &UpdateSet, trim_fraction: f64) -> Result<AggregationResult> {
    let n = updates.len();
    let trim = (trim_fraction * n as f64).floor() as usize;
    if 2 * trim >= n {
        return Err(Error::Config(format!(
            "trim {trim} per side leaves no values out of {n}"
        )));
    }
    let dim = updates.dim();
    let mut out = vec![0.0; dim];
    let mut column = vec![0.0; n];
    for d in 0..dim {
        for (c, e) in column.iter_mut().zip(updates.entries()) {
            *c = e.delta.values()[d];
        }
        column.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
        let kept = &column[trim..n - trim];
        out[d] = kept.iter().sum::<f64>() / kept.len() as f64;
    }
    Ok(AggregationResult {
        global_delta: ParamVector::new(out, updates.entries()[0].delta.layout().clone())
            .expect("finite trimmed mean"),
        client_weights: uniform_weights(updates, 1.0),
    })
}

fn sq_dist(a: &ParamVector, b: &ParamVector) -> f64 {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Multi-Krum: iteratively select the updates whose summed squared distance
/// to their `n - m - 2` nearest peers is smallest, rescoring after each
/// removal; ties go to the lowest client id. The output is the mean of the
/// selected deltas.
pub fn agg_multi_krum(
    updates: &UpdateSet,
    m: usize,
    select_count: Option<usize>,
) -> Result<AggregationResult> {
    let n = updates.len();
    if n < m + 3 {
        return Err(Error::Config(format!(
            "multi-krum needs n >= m + 3 (n = {n}, m = {m})"
        )));
    }
    let select = select_count.unwrap_or(n - m).clamp(1, n);
    // symmetric distance matrix once
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = sq_dist(&updates.entries()[i].delta, &updates.entries()[j].delta);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut selected = Vec::with_capacity(select);
    while selected.len() < select && !remaining.is_empty() {
        let n_rem = remaining.len();
        if n_rem == 1 {
            selected.push(remaining[0]);
            break;
        }
        let neighbors = n_rem.saturating_sub(m + 2).max(1).min(n_rem - 1);
        let mut best: Option<(f64, usize)> = None;
        for &i in &remaining {
            let mut ds: Vec<f64> = remaining
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| dist[i][j])
                .collect();
            ds.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
            let score: f64 = ds[..neighbors].iter().sum();
            let id = updates.entries()[i].client_id;
            let better = match best {
                None => true,
                Some((bs, bid)) => {
                    score < bs || (score == bs && id < updates.entries()[bid].client_id)
                }
            };
            if better {
                best = Some((score, i));
            }
        }
        let (_, pick) = best.expect("remaining is nonempty");
        selected.push(pick);
        remaining.retain(|&i| i != pick);
    }
    let deltas: Vec<&ParamVector> = selected.iter().map(|&i| &updates.entries()[i].delta).collect();
    let mut client_weights = uniform_weights(updates, 0.0);
    for &i in &selected {
        client_weights.insert(updates.entries()[i].client_id, 1.0);
    }
    Ok(AggregationResult {
        global_delta: mean_delta(&deltas),
        client_weights,
    })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// FoolsGold: cosine similarity on accumulated histories with pardoning and
/// logit re-scaling. `state` must already contain this round's deltas.
pub fn agg_foolsgold(updates: &UpdateSet, state: &FoolsGoldState) -> Result<AggregationResult> {
    let n = updates.len();
    let histories: Vec<&[f64]> = updates
        .entries()
        .iter()
        .map(|e| {
            state
                .history(e.client_id)
                .ok_or_else(|| Error::Contract(format!("no history for client {}", e.client_id)))
        })
        .collect::<Result<_>>()?;
    let mut cs = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                cs[i][j] = cosine(histories[i], histories[j]);
            }
        }
    }
    let maxcs: Vec<f64> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| cs[i][j])
                .fold(0.0f64, f64::max)
        })
        .collect();
    // pardoning: scale cs_ij down when j looks more sybil-like than i
    let mut wv = vec![0.0; n];
    for i in 0..n {
        let mut row_max = 0.0f64;
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut v = cs[i][j];
            if maxcs[j] > maxcs[i] && maxcs[j] > 0.0 {
                v *= maxcs[i] / maxcs[j];
            }
            row_max = row_max.max(v);
        }
        wv[i] = (1.0 - row_max).clamp(0.0, 1.0);
    }
    let wv_max = wv.iter().cloned().fold(0.0f64, f64::max);
    if wv_max > 0.0 {
        for v in &mut wv {
            *v /= wv_max;
        }
    }
    let lambdas: Vec<f64> = wv.iter().map(|&v| logit_weight(v)).collect();
    let delta = weighted_delta(updates, &lambdas, n as f64);
    let client_weights = updates
        .entries()
        .iter()
        .zip(&lambdas)
        .map(|(e, &w)| (e.client_id, w))
        .collect();
    Ok(AggregationResult {
        global_delta: delta,
        client_weights,
    })
}

/// Norm-threshold policy for `agg_norm_bound`.
#[derive(Debug, Clone, Copy)]
pub enum NormThreshold {
    /// `tau = factor * median(norms)` of the round.
    MedianFactor(f64),
    Fixed(f64),
}

impl Default for NormThreshold {
    fn default() -> Self {
        NormThreshold::MedianFactor(2.0)
    }
}

/// Exclude updates whose L2 norm exceeds the threshold, then average the
/// survivors. If every update is excluded, all are kept (flagged by all-one
/// weights).
pub fn agg_norm_bound(updates: &UpdateSet, policy: NormThreshold) -> AggregationResult {
    let norms: Vec<f64> = updates.entries().iter().map(|e| e.delta.l2_norm()).collect();
    let tau = match policy {
        NormThreshold::Fixed(t) => t,
        NormThreshold::MedianFactor(f) => {
            let mut sorted = norms.clone();
            f * median_of(&mut sorted)
        }
    };
    let mut included: Vec<usize> = (0..updates.len()).filter(|&i| norms[i] <= tau).collect();
    if included.is_empty() {
        included = (0..updates.len()).collect();
    }
    let deltas: Vec<&ParamVector> = included.iter().map(|&i| &updates.entries()[i].delta).collect();
    let mut client_weights = uniform_weights(updates, 0.0);
    for &i in &included {
        client_weights.insert(updates.entries()[i].client_id, 1.0);
    }
    AggregationResult {
        global_delta: mean_delta(&deltas),
        client_weights,
    }
}

/// Smoothed Weiszfeld geometric median (RFA), initialized at the mean.
pub fn agg_rfa(updates: &UpdateSet, smoothing: f64, max_iters: usize) -> AggregationResult {
    let deltas = updates.deltas();
    let dim = updates.dim();
    let mut z: Vec<f64> = mean_delta(&deltas).values().to_vec();
    for _ in 0..max_iters {
        let mut num = vec![0.0; dim];
        let mut den = 0.0;
        for d in &deltas {
            let dist: f64 = d
                .values()
                .iter()
                .zip(&z)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let w = 1.0 / dist.max(smoothing);
            for (nv, dv) in num.iter_mut().zip(d.values()) {
                *nv += w * dv;
            }
            den += w;
        }
        let mut step = 0.0;
        for (zi, ni) in z.iter_mut().zip(&num) {
            let next = ni / den;
            step += (next - *zi) * (next - *zi);
            *zi = next;
        }
        if step.sqrt() < 1e-8 {
            break;
        }
    }
    AggregationResult {
        global_delta: ParamVector::new(z, updates.entries()[0].delta.layout().clone())
            .expect("finite geometric median"),
        client_weights: uniform_weights(updates, 1.0),
    }
}

/// Repeated-median (Siegel) line fit over `(index, value)` pairs: the slope
/// is the median over i of the median over j of pairwise slopes.
pub fn siegel_fit(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 1 {
        return (0.0, values[0]);
    }
    let mut slopes_i = Vec::with_capacity(n);
    let mut inner = Vec::with_capacity(n - 1);
    for i in 0..n {
        inner.clear();
        for j in 0..n {
            if i != j {
                inner.push((values[j] - values[i]) / (j as f64 - i as f64));
            }
        }
        slopes_i.push(median_of(&mut inner));
    }
    let slope = median_of(&mut slopes_i);
    let mut intercepts: Vec<f64> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| v - slope * i as f64)
        .collect();
    let intercept = median_of(&mut intercepts);
    (slope, intercept)
}

/// Residual-based aggregation: per coordinate, fit a repeated-median line
/// over the sorted client values, convert residuals into confidences with a
/// MAD scale, and take the confidence-weighted mean.
pub fn agg_residual_base(
    updates: &UpdateSet,
    confidence_interval: f64,
    clip_threshold: f64,
) -> AggregationResult {
    let n = updates.len();
    let dim = updates.dim();
    let mut out = vec![0.0; dim];
    let mut column = vec![0.0; n];
    let mut weight_acc = vec![0.0; n]; // per-client mean confidence, diagnostic
    for d in 0..dim {
        for (c, e) in column.iter_mut().zip(updates.entries()) {
            *c = e.delta.values()[d];
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| column[a].partial_cmp(&column[b]).expect("finite values"));
        let sorted: Vec<f64> = order.iter().map(|&i| column[i]).collect();
        let (slope, intercept) = siegel_fit(&sorted);
        let residuals: Vec<f64> = sorted
            .iter()
            .enumerate()
            .map(|(i, &v)| v - (slope * i as f64 + intercept))
            .collect();
        let mut abs_res: Vec<f64> = residuals.iter().map(|r| r.abs()).collect();
        let sigma = (1.4826 * median_of(&mut abs_res)).max(1e-12);
        let mut num = 0.0;
        let mut den = 0.0;
        for (pos, &client) in order.iter().enumerate() {
            let mut c = (1.0 - residuals[pos].abs() / (confidence_interval * sigma)).max(0.0);
            if c < clip_threshold {
                c = 0.0;
            }
            weight_acc[client] += c;
            num += c * sorted[pos];
            den += c;
        }
        out[d] = if den > 0.0 {
            num / den
        } else {
            let mut col = sorted;
            median_of(&mut col)
        };
    }
    let client_weights = updates
        .entries()
        .iter()
        .enumerate()
        .map(|(i, e)| (e.client_id, weight_acc[i] / dim as f64))
        .collect();
    AggregationResult {
        global_delta: ParamVector::new(out, updates.entries()[0].delta.layout().clone())
            .expect("finite aggregate"),
        client_weights,
    }
}

/// FedCPA: critical-parameter fingerprints, pairwise similarity, normality
/// scores, inverse-sigmoid weights, and the positive-count-normalized
/// weighted sum of deltas.
pub fn agg_fedcpa(
    updates: &UpdateSet,
    prev_global_pair: Option<(&ParamVector, &ParamVector)>,
    cfg: &FedCpaConfig,
) -> Result<AggregationResult> {
    cfg.validate()?;
    let sim_terms = SimilarityTerms {
        use_top: cfg.use_top,
        use_bottom: cfg.use_bottom,
    };
    let norm_terms = NormalityTerms {
        use_global_term: cfg.use_global_term,
        use_local_term: cfg.use_local_term,
    };
    let sigs: Vec<ModelSignature> = updates
        .entries()
        .iter()
        .map(|e| ModelSignature::from_update(&e.delta, &e.theta, cfg.k_ratio))
        .collect::<Result<_>>()?;
    let global_sig = match prev_global_pair {
        Some((phi_prev, phi)) if cfg.use_global_term => {
            Some(ModelSignature::from_global_pair(phi_prev, phi, cfg.k_ratio)?)
        }
        _ => None,
    };
    let raw = normality_scores(&sigs, global_sig.as_ref(), sim_terms, norm_terms)?;
    let lambdas = weights_from_scores(&raw);
    let positive = lambdas.iter().filter(|&&l| l > 0.0).count();
    let divisor = if cfg.sum_normalized {
        lambdas.iter().sum::<f64>()
    } else {
        positive as f64
    };
    let delta = if divisor > 0.0 {
        weighted_delta(updates, &lambdas, divisor)
    } else {
        // unreachable with >= 2 distinct scores; fall back to the mean
        mean_delta(&updates.deltas())
    };
    let client_weights = updates
        .entries()
        .iter()
        .zip(&lambdas)
        .map(|(e, &w)| (e.client_id, w))
        .collect();
    Ok(AggregationResult {
        global_delta: delta,
        client_weights,
    })
}
