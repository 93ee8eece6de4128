//! Synthetic datasets, Dirichlet non-IID partitioning, and poisoning
//! transforms (label flip, backdoor trigger).

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{Error, Result};
use crate::rng;

/// Dense labeled dataset. Features may carry an `h x w` grid interpretation
/// (needed by the backdoor trigger).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>, // row-major, n * d
    labels: Vec<usize>,
    n: usize,
    d: usize,
    n_classes: usize,
    grid: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, d: usize, n_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Contract("dataset must be nonempty".into()));
        }
        if features.len() != labels.len() * d {
            return Err(Error::Contract(format!(
                "feature buffer of {} values does not match {} rows x {} dims",
                features.len(),
                labels.len(),
                d
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        if features.iter().any(|f| !f.is_finite()) {
            return Err(Error::Contract("non-finite feature value".into()));
        }
        let n = labels.len();
        Ok(Dataset {
            features,
            labels,
            n,
            d,
            n_classes,
            grid: None,
        })
    }

    /// Attach an `h x w` grid interpretation; requires `h * w == d`.
    pub fn with_grid(mut self, h: usize, w: usize) -> Result<Self> {
        if h * w != self.d {
            return Err(Error::Contract(format!(
                "grid {h}x{w} does not cover feature dim {}",
                self.d
            )));
        }
        self.grid = Some((h, w));
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn grid(&self) -> Option<(usize, usize)> {
        self.grid
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn max_feature(&self) -> f64 {
        self.features.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Materialize a subset by row indices.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::Contract("empty subset".into()));
        }
        let mut features = Vec::with_capacity(indices.len() * self.d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        let mut ds = Dataset::new(features, labels, self.d, self.n_classes)?;
        ds.grid = self.grid;
        Ok(ds)
    }

    /// Export as CSV with header `label, f0, f1, ...`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        let header: Vec<String> = std::iter::once("label".to_string())
            .chain((0..self.d).map(|i| format!("f{i}")))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.n {
            let row: Vec<String> = std::iter::once(self.labels[i].to_string())
                .chain(self.row(i).iter().map(|v| format!("{v}")))
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R, n_classes: usize) -> Result<Dataset> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty csv".into()))??;
        let d = header.split(',').count().saturating_sub(1);
        if d == 0 {
            return Err(Error::Format("csv header has no feature columns".into()));
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let label: usize = parts
                .next()
                .unwrap()
                .trim()
                .parse()
                .map_err(|_| Error::Format("bad label".into()))?;
            labels.push(label);
            let mut count = 0;
            for p in parts {
                features.push(
                    p.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Format("bad feature value".into()))?,
                );
                count += 1;
            }
            if count != d {
                return Err(Error::Format("ragged csv row".into()));
            }
        }
        Dataset::new(features, labels, d, n_classes)
    }
}

/// Backdoor trigger: a `patch_rows x patch_cols` patch of `patch_value`
/// written into the bottom-right corner of the grid, with poisoned labels
/// forced to `target_label`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriggerSpec {
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub patch_value: f64,
    pub target_label: usize,
}

impl TriggerSpec {
    fn patch_offsets(&self, grid: (usize, usize)) -> Result<Vec<usize>> {
        let (h, w) = grid;
        if self.patch_rows > h || self.patch_cols > w {
            return Err(Error::Contract(format!(
                "patch {}x{} exceeds grid {h}x{w}",
                self.patch_rows, self.patch_cols
            )));
        }
        let mut offsets = Vec::with_capacity(self.patch_rows * self.patch_cols);
        for r in (h - self.patch_rows)..h {
            for c in (w - self.patch_cols)..w {
                offsets.push(r * w + c);
            }
        }
        Ok(offsets)
    }
}

/// Dirichlet partition parameters.
#[derive(Debug, Clone, Copy)]
pub struct PartitionSpec {
    pub n_clients: usize,
    pub beta: f64,
    pub seed: u64,
}

/// Gaussian blobs around fixed per-class centers (scaled one-hot
/// directions). Deterministic per seed.
pub fn make_blobs(
    classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config("need at least 2 classes".into()));
    }
    if dim < 2 || dim < classes {
        return Err(Error::Config(format!(
            "dim {dim} too small for {classes} classes"
        )));
    }
    let mut rng = rng::derive(seed, &[0x0b10b5]);
    let noise = Normal::new(0.0, spread.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut features = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    const CENTER_SCALE: f64 = 2.0;
    for c in 0..classes {
        for _ in 0..per_class {
            for j in 0..dim {
                let center = if j == c { CENTER_SCALE } else { 0.0 };
                let delta = if spread > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                features.push(center + delta);
            }
            labels.push(c);
        }
    }
    Dataset::new(features, labels, dim, classes)
}

/// Split a dataset across clients with per-class Dirichlet proportions.
///
/// For each class, proportions `q ~ Dir(beta * 1_N)` are drawn and the
/// class's shuffled indices are cut at cumulative boundaries. Every index is
/// assigned exactly once; a client left empty is topped up with one sample
/// moved from the currently largest client.
pub fn dirichlet_partition(dataset: &Dataset, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    if spec.n_clients < 2 {
        return Err(Error::Config("need at least 2 clients".into()));
    }
    if spec.beta <= 0.0 {
        return Err(Error::Config("beta must be positive".into()));
    }
    let n = spec.n_clients;
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); n];
    let gamma = Gamma::new(spec.beta, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    for class in 0..dataset.n_classes() {
        let mut class_indices: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.label(i) == class)
            .collect();
        if class_indices.is_empty() {
            continue;
        }
        let mut rng = rng::derive(spec.seed, &[0xd17, class as u64]);
        class_indices.shuffle(&mut rng);
        // Dirichlet draw via normalized Gamma variates.
        let mut q: Vec<f64> = (0..n).map(|_| gamma.sample(&mut rng).max(1e-300)).collect();
        let total: f64 = q.iter().sum();
        for v in &mut q {
            *v /= total;
        }
        let len = class_indices.len();
        let mut cum = 0.0;
        let mut start = 0;
        for (client, &share) in q.iter().enumerate() {
            cum += share;
            let end = if client + 1 == n {
                len
            } else {
                ((cum * len as f64).round() as usize).min(len)
            };
            let end = end.max(start);
            parts[client].extend_from_slice(&class_indices[start..end]);
            start = end;
        }
    }
    // Empty-client repair: local training needs at least one sample.
    loop {
        let Some(empty) = parts.iter().position(|p| p.is_empty()) else {
            break;
        };
        let largest = (0..n)
            .max_by_key(|&i| parts[i].len())
            .expect("nonempty client list");
        if parts[largest].len() <= 1 {
            return Err(Error::Config(
                "dataset too small to give every client a sample".into(),
            ));
        }
        let moved = parts[largest].pop().expect("largest client nonempty");
        parts[empty].push(moved);
    }
    Ok(parts)
}

/// Resample the labels of a uniformly chosen `floor(gamma_p * n)` subset,
/// never back to the original label. Features untouched.
pub fn poison_label_flip(dataset: &Dataset, gamma_p: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&gamma_p) {
        return Err(Error::Config(format!("gamma_p {gamma_p} not in [0,1]")));
    }
    let mut out = dataset.clone();
    let n_poison = (gamma_p * dataset.len() as f64).floor() as usize;
    if n_poison == 0 {
        return Ok(out);
    }
    if dataset.n_classes() < 2 {
        return Err(Error::Config("label flip needs at least 2 classes".into()));
    }
    let mut rng = rng::derive(seed, &[0xf11f]);
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    indices.shuffle(&mut rng);
    for &i in &indices[..n_poison] {
        let orig = out.labels[i];
        // uniform over the other classes
        let pick = rng.gen_range(0..dataset.n_classes() - 1);
        out.labels[i] = if pick >= orig { pick + 1 } else { pick };
    }
    Ok(out)
}

/// Overlay the trigger patch on a uniformly chosen `floor(gamma_p * n)`
/// subset and force their labels to the target class.
pub fn poison_backdoor(
    dataset: &Dataset,
    gamma_p: f64,
    trigger: &TriggerSpec,
    seed: u64,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&gamma_p) {
        return Err(Error::Config(format!("gamma_p {gamma_p} not in [0,1]")));
    }
    let grid = dataset
        .grid()
        .ok_or_else(|| Error::Contract("backdoor needs a grid interpretation".into()))?;
    if trigger.target_label >= dataset.n_classes() {
        return Err(Error::Contract("target label out of range".into()));
    }
    let offsets = trigger.patch_offsets(grid)?;
    let mut out = dataset.clone();
    let n_poison = (gamma_p * dataset.len() as f64).floor() as usize;
    if n_poison == 0 {
        return Ok(out);
    }
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = rng::derive(seed, &[0xbdbd]);
    indices.shuffle(&mut rng);
    for &i in &indices[..n_poison] {
        let base = i * out.d;
        for &off in &offsets {
            out.features[base + off] = trigger.patch_value;
        }
        out.labels[i] = trigger.target_label;
    }
    Ok(out)
}

/// Overlay the trigger patch on every row, labels untouched. Builds the
/// attack-success-rate evaluation set.
pub fn apply_trigger(dataset: &Dataset, trigger: &TriggerSpec) -> Result<Dataset> {
    let grid = dataset
        .grid()
        .ok_or_else(|| Error::Contract("trigger needs a grid interpretation".into()))?;
    let offsets = trigger.patch_offsets(grid)?;
    let mut out = dataset.clone();
    for i in 0..out.n {
        let base = i * out.d;
        for &off in &offsets {
            out.features[base + off] = trigger.patch_value;
        }
    }
    Ok(out)
}
