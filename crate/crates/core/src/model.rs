//! Desk-scale multilayer perceptron with manual backpropagation and the
//! SGD + momentum + weight-decay local-training recipe.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::params::{Layout, ParamVector};
use crate::rng;

/// MLP architecture: input dim, hidden dims, class count. Hidden layers use
/// ReLU; the output layer is softmax.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config("need at least input and output layer".into()));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config("layer sizes must be >= 1".into()));
        }
        Ok(MlpSpec { layer_sizes })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.layer_sizes.last().expect("at least two layers")
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Flat layout: per layer, the weight block (out x in, row-major) then
    /// the bias block.
    pub fn layout(&self) -> Layout {
        let mut parts: Vec<(String, usize)> = Vec::new();
        for l in 0..self.n_layers() {
            let fan_in = self.layer_sizes[l];
            let fan_out = self.layer_sizes[l + 1];
            parts.push((format!("w{l}"), fan_in * fan_out));
            parts.push((format!("b{l}"), fan_out));
        }
        let refs: Vec<(&str, usize)> = parts.iter().map(|(n, l)| (n.as_str(), *l)).collect();
        Layout::new(&refs)
    }

    fn weight_range(&self, l: usize) -> (usize, usize) {
        let mut offset = 0;
        for k in 0..l {
            offset += self.layer_sizes[k] * self.layer_sizes[k + 1] + self.layer_sizes[k + 1];
        }
        (offset, offset + self.layer_sizes[l] * self.layer_sizes[l + 1])
    }

    fn bias_range(&self, l: usize) -> (usize, usize) {
        let (_, w_end) = self.weight_range(l);
        (w_end, w_end + self.layer_sizes[l + 1])
    }
}

/// Local-training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-5,
            batch_size: 64,
            epochs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 {
            return Err(Error::Config("learning_rate must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0,1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Fan-in-scaled uniform init (bound `sqrt(6 / fan_in)`), zero biases.
pub fn init_model(spec: &MlpSpec, seed: u64) -> ParamVector {
    let layout = spec.layout();
    let mut values = vec![0.0; layout.total_len()];
    let mut rng = rng::derive(seed, &[0x1417]);
    for l in 0..spec.n_layers() {
        let fan_in = spec.layer_sizes[l] as f64;
        let bound = (6.0 / fan_in).sqrt();
        let (start, end) = spec.weight_range(l);
        for v in &mut values[start..end] {
            *v = rng.gen_range(-bound..bound);
        }
        // biases stay zero
    }
    ParamVector::new(values, layout).expect("init values are finite")
}

fn softmax_row(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

/// Per-layer activations kept for backprop. `post[l]` is the activated
/// output of layer l (softmax for the last layer).
struct ForwardTrace {
    post: Vec<Vec<f64>>,
}

fn forward_trace(
    params: &ParamVector,
    spec: &MlpSpec,
    features: &[f64],
    n_rows: usize,
) -> ForwardTrace {
    let values = params.values();
    let mut current: Vec<f64> = features.to_vec();
    let mut post = Vec::with_capacity(spec.n_layers());
    for l in 0..spec.n_layers() {
        let in_dim = spec.layer_sizes[l];
        let out_dim = spec.layer_sizes[l + 1];
        let (w_start, _) = spec.weight_range(l);
        let (b_start, _) = spec.bias_range(l);
        let w = &values[w_start..w_start + in_dim * out_dim];
        let b = &values[b_start..b_start + out_dim];
        let mut next = vec![0.0; n_rows * out_dim];
        for r in 0..n_rows {
            let x = &current[r * in_dim..(r + 1) * in_dim];
            let y = &mut next[r * out_dim..(r + 1) * out_dim];
            for (o, yo) in y.iter_mut().enumerate() {
                let row = &w[o * in_dim..(o + 1) * in_dim];
                let mut acc = b[o];
                for (xi, wi) in x.iter().zip(row) {
                    acc += xi * wi;
                }
                *yo = acc;
            }
            if l + 1 == spec.n_layers() {
                softmax_row(y);
            } else {
                for v in y.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
        }
        post.push(next.clone());
        current = next;
    }
    ForwardTrace { post }
}

/// Class-probability matrix (row-major, n x classes).
pub fn forward(params: &ParamVector, spec: &MlpSpec, features: &[f64]) -> Result<Vec<f64>> {
    if params.layout() != &spec.layout() {
        return Err(Error::Layout("params do not match spec layout".into()));
    }
    if features.len() % spec.input_dim() != 0 {
        return Err(Error::Contract("feature width mismatch".into()));
    }
    let n_rows = features.len() / spec.input_dim();
    let trace = forward_trace(params, spec, features, n_rows);
    Ok(trace.post.last().expect("at least one layer").clone())
}

/// Exact gradient of mean softmax cross-entropy plus L2 weight decay
/// (weights only, biases excluded).
pub fn grad(
    params: &ParamVector,
    spec: &MlpSpec,
    features: &[f64],
    labels: &[usize],
    weight_decay: f64,
) -> Result<ParamVector> {
    if params.layout() != &spec.layout() {
        return Err(Error::Layout("params do not match spec layout".into()));
    }
    let in_dim = spec.input_dim();
    if features.len() != labels.len() * in_dim {
        return Err(Error::Contract("feature/label shape mismatch".into()));
    }
    if labels.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= spec.n_classes()) {
        return Err(Error::Contract(format!("label {bad} out of range")));
    }
    let n = labels.len();
    let trace = forward_trace(params, spec, features, n);
    let values = params.values();
    let mut grad_values = vec![0.0; values.len()];

    // upstream gradient at the current layer's pre-activation output
    let last = spec.n_layers() - 1;
    let classes = spec.n_classes();
    let mut upstream: Vec<f64> = trace.post[last].clone();
    for r in 0..n {
        upstream[r * classes + labels[r]] -= 1.0;
    }
    for v in upstream.iter_mut() {
        *v /= n as f64;
    }

    for l in (0..spec.n_layers()).rev() {
        let in_dim_l = spec.layer_sizes[l];
        let out_dim_l = spec.layer_sizes[l + 1];
        let (w_start, _) = spec.weight_range(l);
        let (b_start, _) = spec.bias_range(l);
        let input: &[f64] = if l == 0 { features } else { &trace.post[l - 1] };

        for r in 0..n {
            let x = &input[r * in_dim_l..(r + 1) * in_dim_l];
            let g = &upstream[r * out_dim_l..(r + 1) * out_dim_l];
            for (o, &go) in g.iter().enumerate() {
                let wrow = &mut grad_values[w_start + o * in_dim_l..w_start + (o + 1) * in_dim_l];
                for (wi, xi) in wrow.iter_mut().zip(x) {
                    *wi += go * xi;
                }
                grad_values[b_start + o] += go;
            }
        }

        if l > 0 {
            let w = &values[w_start..w_start + in_dim_l * out_dim_l];
            let mut next_upstream = vec![0.0; n * in_dim_l];
            for r in 0..n {
                let g = &upstream[r * out_dim_l..(r + 1) * out_dim_l];
                let prev_post = &trace.post[l - 1][r * in_dim_l..(r + 1) * in_dim_l];
                let nu = &mut next_upstream[r * in_dim_l..(r + 1) * in_dim_l];
                for (o, &go) in g.iter().enumerate() {
                    let wrow = &w[o * in_dim_l..(o + 1) * in_dim_l];
                    for i in 0..in_dim_l {
                        nu[i] += go * wrow[i];
                    }
                }
                // ReLU mask of the previous layer's activation
                for (v, &p) in nu.iter_mut().zip(prev_post) {
                    if p <= 0.0 {
                        *v = 0.0;
                    }
                }
            }
            upstream = next_upstream;
        }
    }

    if weight_decay != 0.0 {
        for l in 0..spec.n_layers() {
            let (start, end) = spec.weight_range(l);
            for i in start..end {
                grad_values[i] += weight_decay * values[i];
            }
        }
    }

    ParamVector::new(grad_values, spec.layout())
}

/// Run local SGD from the global model; returns `(theta, delta)` with
/// `delta = theta - global`. Momentum buffers start at zero.
pub fn train_local(
    global: &ParamVector,
    spec: &MlpSpec,
    dataset: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ParamVector, ParamVector)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Contract("empty local dataset".into()));
    }
    if dataset.dim() != spec.input_dim() {
        return Err(Error::Contract("dataset dim does not match model".into()));
    }
    let mut theta = global.clone();
    let mut velocity = vec![0.0; theta.dim()];
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = rng::derive(seed, &[0x7124]);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut features = Vec::with_capacity(batch.len() * dataset.dim());
            let mut labels = Vec::with_capacity(batch.len());
            for &i in batch {
                features.extend_from_slice(dataset.row(i));
                labels.push(dataset.label(i));
            }
            let g = grad(&theta, spec, &features, &labels, cfg.weight_decay)?;
            let theta_values = theta.values_mut();
            for ((v, gv), tv) in velocity.iter_mut().zip(g.values()).zip(theta_values) {
                *v = cfg.momentum * *v + gv;
                *tv -= cfg.learning_rate * *v;
            }
        }
    }
    let delta = theta.sub(global)?;
    Ok((theta, delta))
}

/// Fraction of argmax-correct predictions; argmax ties go to the lowest
/// class index.
pub fn accuracy(params: &ParamVector, spec: &MlpSpec, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Contract("empty dataset".into()));
    }
    let probs = forward(params, spec, dataset.features())?;
    let classes = spec.n_classes();
    let mut correct = 0usize;
    for i in 0..dataset.len() {
        let row = &probs[i * classes..(i + 1) * classes];
        let pred = argmax_lowest(row);
        if pred == dataset.label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Index of the maximum value; the lowest index wins ties.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean softmax cross-entropy over the dataset.
pub fn mean_loss(params: &ParamVector, spec: &MlpSpec, dataset: &Dataset) -> Result<f64> {
    let probs = forward(params, spec, dataset.features())?;
    let classes = spec.n_classes();
    let mut loss = 0.0;
    for i in 0..dataset.len() {
        let p = probs[i * classes + dataset.label(i)].max(1e-300);
        loss -= p.ln();
    }
    Ok(loss / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_blobs;
    use approx::assert_relative_eq;

    fn small_spec() -> MlpSpec {
        MlpSpec::new(vec![4, 6, 3]).unwrap()
    }

    #[test]
    fn init_deterministic_and_biases_zero() {
        let spec = small_spec();
        let a = init_model(&spec, 5);
        let b = init_model(&spec, 5);
        assert_eq!(a, b);
        assert_ne!(a, init_model(&spec, 6));
        for l in 0..spec.n_layers() {
            let seg = spec.layout();
            let bias = seg.segment(&format!("b{l}")).unwrap();
            for i in bias.offset..bias.offset + bias.len {
                assert_eq!(a.values()[i], 0.0);
            }
        }
    }

    #[test]
    fn forward_rows_are_distributions() {
        let spec = small_spec();
        let params = init_model(&spec, 1);
        let features: Vec<f64> = (0..12).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let probs = forward(&params, &spec, &features).unwrap();
        for row in probs.chunks(3) {
            let sum: f64 = row.iter().sum();
            assert_relative_eq!(sum, 1.0, epsilon = 1e-9);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn zero_params_uniform_probs() {
        let spec = small_spec();
        let params = ParamVector::zeros(spec.layout());
        let probs = forward(&params, &spec, &[0.5, -1.0, 2.0, 0.0]).unwrap();
        for &p in &probs {
            assert_relative_eq!(p, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn two_class_linear_is_sigmoid_pair() {
        // Single linear layer, 2 classes with logits (w.x, 0): the class-0
        // probability is sigmoid(w.x).
        let spec = MlpSpec::new(vec![3, 2]).unwrap();
        let mut params = ParamVector::zeros(spec.layout());
        let w = [0.5, -1.0, 2.0];
        params.values_mut()[..3].copy_from_slice(&w);
        let x = [1.0, 2.0, -0.5];
        let z: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
        let probs = forward(&params, &spec, &x).unwrap();
        assert_relative_eq!(probs[0], 1.0 / (1.0 + (-z).exp()), epsilon = 1e-12);
        assert_relative_eq!(probs[1], 1.0 - probs[0], epsilon = 1e-12);
    }

    fn finite_diff_check(spec: &MlpSpec, seed: u64) -> f64 {
        use rand::Rng;
        let mut rng = crate::rng::derive(seed, &[0xfd]);
        let params = init_model(spec, seed);
        let n = 8;
        let features: Vec<f64> = (0..n * spec.input_dim())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..spec.n_classes())).collect();
        let decay = 1e-3;
        let analytic = grad(&params, spec, &features, &labels, decay).unwrap();

        let loss_at = |p: &ParamVector| {
            let probs = forward(p, spec, &features).unwrap();
            let classes = spec.n_classes();
            let mut loss = 0.0;
            for (i, &l) in labels.iter().enumerate() {
                loss -= probs[i * classes + l].max(1e-300).ln();
            }
            loss /= n as f64;
            // decay term on weights only
            for l in 0..spec.n_layers() {
                let layout = spec.layout();
                let seg = layout.segment(&format!("w{l}")).unwrap();
                for j in seg.offset..seg.offset + seg.len {
                    loss += 0.5 * decay * p.values()[j] * p.values()[j];
                }
            }
            loss
        };

        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        // probe a subset of coordinates to keep the test fast
        let dim = params.dim();
        let step = (dim / 40).max(1);
        for i in (0..dim).step_by(step) {
            let mut plus = params.clone();
            plus.values_mut()[i] += h;
            let mut minus = params.clone();
            minus.values_mut()[i] -= h;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let a = analytic.values()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            max_rel = max_rel.max((a - numeric).abs() / denom);
        }
        max_rel
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5 {
            let rel = finite_diff_check(&MlpSpec::new(vec![5, 8, 4]).unwrap(), seed);
            assert!(rel < 1e-4, "seed {seed}: max relative error {rel}");
        }
    }

    #[test]
    fn duplicated_batch_same_gradient() {
        let spec = small_spec();
        let params = init_model(&spec, 3);
        let features = vec![0.1, -0.2, 0.3, 0.4];
        let labels = vec![1usize];
        let g1 = grad(&params, &spec, &features, &labels, 0.0).unwrap();
        let doubled: Vec<f64> = features.iter().chain(&features).copied().collect();
        let g2 = grad(&params, &spec, &doubled, &[1, 1], 0.0).unwrap();
        for (a, b) in g1.values().iter().zip(g2.values()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn label_out_of_range_rejected() {
        let spec = small_spec();
        let params = init_model(&spec, 3);
        assert!(grad(&params, &spec, &[0.0; 4], &[3], 0.0).is_err());
    }

    #[test]
    fn zero_lr_keeps_model() {
        let spec = small_spec();
        let global = init_model(&spec, 11);
        let ds = make_blobs(3, 4, 10, 0.5, 2).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let (theta, delta) = train_local(&global, &spec, &ds, &cfg, 9).unwrap();
        assert_eq!(theta, global);
        assert!(delta.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn training_deterministic() {
        let spec = small_spec();
        let global = init_model(&spec, 11);
        let ds = make_blobs(3, 4, 20, 0.5, 2).unwrap();
        let cfg = TrainConfig::default();
        let (a, _) = train_local(&global, &spec, &ds, &cfg, 9).unwrap();
        let (b, _) = train_local(&global, &spec, &ds, &cfg, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loss_decreases_on_separable_blobs() {
        let spec = MlpSpec::new(vec![2, 8, 2]).unwrap();
        let global = init_model(&spec, 4);
        let ds = make_blobs(2, 2, 100, 0.3, 6).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        let before = mean_loss(&global, &spec, &ds).unwrap();
        let (theta, _) = train_local(&global, &spec, &ds, &cfg, 1).unwrap();
        let after = mean_loss(&theta, &spec, &ds).unwrap();
        assert!(after < before, "loss {before} -> {after}");
    }

    #[test]
    fn vanilla_step_identity() {
        // momentum 0, decay 0, one sample, one step: theta = global - lr*grad
        let spec = small_spec();
        let global = init_model(&spec, 21);
        let ds = make_blobs(3, 4, 1, 0.2, 8).unwrap().subset(&[0]).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            batch_size: 1,
            epochs: 1,
        };
        let (theta, _) = train_local(&global, &spec, &ds, &cfg, 5).unwrap();
        let g = grad(&global, &spec, ds.row(0), &[ds.label(0)], 0.0).unwrap();
        for i in 0..theta.dim() {
            assert_relative_eq!(
                theta.values()[i],
                global.values()[i] - 0.1 * g.values()[i],
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn full_batch_invariant_to_row_order() {
        let spec = small_spec();
        let global = init_model(&spec, 13);
        let ds = make_blobs(3, 4, 10, 0.4, 3).unwrap();
        let rev: Vec<usize> = (0..ds.len()).rev().collect();
        let ds_rev = ds.subset(&rev).unwrap();
        let cfg = TrainConfig {
            batch_size: ds.len(),
            epochs: 2,
            ..TrainConfig::default()
        };
        let (a, _) = train_local(&global, &spec, &ds, &cfg, 7).unwrap();
        let (b, _) = train_local(&global, &spec, &ds_rev, &cfg, 7).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn accuracy_tie_rule() {
        let spec = MlpSpec::new(vec![2, 3]).unwrap();
        let params = ParamVector::zeros(spec.layout());
        // uniform probabilities, labels all class 0 -> accuracy 1
        let ds = Dataset::new(vec![0.0, 0.0, 1.0, 1.0], vec![0, 0], 2, 3).unwrap();
        assert_eq!(accuracy(&params, &spec, &ds).unwrap(), 1.0);
        let ds1 = Dataset::new(vec![0.0, 0.0], vec![1], 2, 3).unwrap();
        assert_eq!(accuracy(&params, &spec, &ds1).unwrap(), 0.0);
    }

    #[test]
    fn trained_model_fits_training_set() {
        let spec = MlpSpec::new(vec![2, 16, 2]).unwrap();
        let mut theta = init_model(&spec, 30);
        let ds = make_blobs(2, 2, 25, 0.2, 40).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.1,
            epochs: 50,
            ..TrainConfig::default()
        };
        let (t, _) = train_local(&theta, &spec, &ds, &cfg, 2).unwrap();
        theta = t;
        assert_eq!(accuracy(&theta, &spec, &ds).unwrap(), 1.0);
        // adversarially permuted labels vs the perfect classifier: 0
        let wrong_labels: Vec<usize> = ds.labels().iter().map(|&l| 1 - l).collect();
        let adv = Dataset::new(ds.features().to_vec(), wrong_labels, 2, 2).unwrap();
        assert_eq!(accuracy(&theta, &spec, &adv).unwrap(), 0.0);
    }

    use crate::data::Dataset;
}
