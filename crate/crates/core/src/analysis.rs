//! Importance-rank-change profiles: how far each parameter's importance
//! rank moves between the shared global model and locally trained models,
//! bucketed by the global importance ordering.

use std::io::Write;

use crate::error::{Error, Result};
use crate::params::{compute_importance, rank_map, ParamVector};

/// Mean/std of absolute rank change per bucket, ordered by ascending global
/// importance (bucket 0 = least important parameters).
#[derive(Debug, Clone)]
pub struct RankChangeProfile {
    pub bucket_centers: Vec<f64>,
    pub mean_abs_change: Vec<f64>,
    pub std_abs_change: Vec<f64>,
    pub bucket_count: usize,
}

impl RankChangeProfile {
    /// CSV: `bucket, center, mean_change, std_change`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "bucket,center,mean_change,std_change")?;
        for b in 0..self.bucket_count {
            writeln!(
                w,
                "{},{:.6},{:.6},{:.6}",
                b, self.bucket_centers[b], self.mean_abs_change[b], self.std_abs_change[b]
            )?;
        }
        Ok(())
    }
}

/// Partition `dim` parameters, ordered by global importance rank, into
/// `buckets` near-equal contiguous groups and report the mean and std of
/// `|rank_global - rank_local|` per group, pooled over clients.
pub fn rank_change_profile(
    phi_prev: &ParamVector,
    phi: &ParamVector,
    local_thetas: &[ParamVector],
    buckets: usize,
) -> Result<RankChangeProfile> {
    if local_thetas.is_empty() {
        return Err(Error::Contract("need at least one local model".into()));
    }
    if buckets < 2 {
        return Err(Error::Config("need at least 2 buckets".into()));
    }
    let global_delta = phi.sub(phi_prev)?;
    let p_global = compute_importance(&global_delta, phi)?;
    if p_global.values().iter().all(|&v| v == 0.0) {
        return Err(Error::Contract(
            "global importance is identically zero (identical checkpoints)".into(),
        ));
    }
    let global_ranks = rank_map(&p_global);
    let dim = p_global.dim();
    if buckets > dim {
        return Err(Error::Config("more buckets than parameters".into()));
    }

    // parameter indices ordered by ascending global importance
    let mut order = vec![0usize; dim];
    for idx in 0..dim {
        order[global_ranks.rank_of(idx)] = idx;
    }

    // per parameter, abs rank changes pooled over clients
    let mut changes: Vec<Vec<f64>> = vec![Vec::with_capacity(local_thetas.len()); dim];
    for theta in local_thetas {
        let delta = theta.sub(phi)?;
        let p_local = compute_importance(&delta, theta)?;
        let local_ranks = rank_map(&p_local);
        for idx in 0..dim {
            let diff = global_ranks.rank_of(idx) as f64 - local_ranks.rank_of(idx) as f64;
            changes[idx].push(diff.abs());
        }
    }

    let mut bucket_centers = Vec::with_capacity(buckets);
    let mut mean_abs_change = Vec::with_capacity(buckets);
    let mut std_abs_change = Vec::with_capacity(buckets);
    for b in 0..buckets {
        let start = b * dim / buckets;
        let end = (b + 1) * dim / buckets;
        let mut pooled = Vec::new();
        for &idx in &order[start..end] {
            pooled.extend_from_slice(&changes[idx]);
        }
        let n = pooled.len() as f64;
        let mean = pooled.iter().sum::<f64>() / n;
        let var = pooled.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n;
        bucket_centers.push((start + end) as f64 / 2.0);
        mean_abs_change.push(mean);
        std_abs_change.push(var.sqrt());
    }
    Ok(RankChangeProfile {
        bucket_centers,
        mean_abs_change,
        std_abs_change,
        bucket_count: buckets,
    })
}

/// Per-bucket signed difference, poisoned minus benign.
pub fn disparity_profile(benign: &RankChangeProfile, poisoned: &RankChangeProfile) -> Result<Vec<f64>> {
    if benign.bucket_count != poisoned.bucket_count {
        return Err(Error::Contract("bucket counts differ".into()));
    }
    Ok(poisoned
        .mean_abs_change
        .iter()
        .zip(&benign.mean_abs_change)
        .map(|(p, b)| p - b)
        .collect())
}

/// Write a disparity vector as CSV: `bucket, center, disparity`.
pub fn write_disparity_csv<W: Write>(
    w: &mut W,
    centers: &[f64],
    disparity: &[f64],
) -> Result<()> {
    writeln!(w, "bucket,center,disparity")?;
    for (b, (c, d)) in centers.iter().zip(disparity).enumerate() {
        writeln!(w, "{b},{c:.6},{d:.6}")?;
    }
    Ok(())
}
