//! Shared fixtures for the aggregation benchmarks.

use fedsim_core::aggregators::{ClientUpdate, UpdateSet};
use fedsim_core::params::Layout;
use fedsim_core::ParamVector;
use rand::Rng;

/// A synthetic round of updates: `n` clients, `dim` parameters each.
pub fn random_round(n: usize, dim: usize, seed: u64) -> UpdateSet {
    let mut rng = fedsim_core::rng::derive(seed, &[0xbe7c4]);
    let entries = (0..n)
        .map(|id| {
            let theta: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let delta: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.1..0.1)).collect();
            ClientUpdate {
                client_id: id,
                theta: ParamVector::new(theta, Layout::flat(dim)).unwrap(),
                delta: ParamVector::new(delta, Layout::flat(dim)).unwrap(),
                dataset_size: 100,
            }
        })
        .collect();
    UpdateSet::new(entries).unwrap()
}
