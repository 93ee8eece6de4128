//! Flat key-value scenario configuration files.
//!
//! Format: one `key = value` pair per line, `#` starts a comment, section
//! membership is expressed with dotted keys (`aggregator.name`,
//! `fedcpa.k_ratio`). Every key except `aggregator.name` has a protocol
//! default; unknown keys are rejected with their line number.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use fedsim_core::aggregators::{FedCpaConfig, NormThreshold};
use fedsim_core::model::{MlpSpec, TrainConfig};
use fedsim_core::simulation::{AggregatorChoice, Attack, BlobSpec, ScenarioConfig};

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

type Parsed = BTreeMap<String, (usize, String)>;

fn parse_pairs(text: &str) -> Result<Parsed, ConfigError> {
    let mut map = Parsed::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError(format!(
                "line {}: expected 'key = value', got '{raw}'",
                lineno + 1
            )));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if map.insert(key.clone(), (lineno + 1, value)).is_some() {
            return Err(ConfigError(format!(
                "line {}: duplicate key '{key}'",
                lineno + 1
            )));
        }
    }
    Ok(map)
}

struct Reader {
    pairs: Parsed,
    used: std::collections::HashSet<String>,
}

impl Reader {
    fn take(&mut self, key: &str) -> Option<String> {
        self.used.insert(key.to_string());
        self.pairs.get(key).map(|(_, v)| v.clone())
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T, ConfigError> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| {
                let line = self.pairs[key].0;
                ConfigError(format!("line {line}: field '{key}': bad value '{v}'"))
            }),
        }
    }

    fn parse_opt<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| {
                let line = self.pairs[key].0;
                ConfigError(format!("line {line}: field '{key}': bad value '{v}'"))
            }),
        }
    }

    fn reject_unknown(&self) -> Result<(), ConfigError> {
        for (key, (line, _)) in &self.pairs {
            if !self.used.contains(key) {
                return Err(ConfigError(format!("line {line}: unknown field '{key}'")));
            }
        }
        Ok(())
    }
}

/// Parse a scenario config; `seed_override` replaces `master_seed` when set.
pub fn parse_scenario(
    text: &str,
    seed_override: Option<u64>,
) -> Result<ScenarioConfig, ConfigError> {
    let mut r = Reader {
        pairs: parse_pairs(text)?,
        used: Default::default(),
    };
    let defaults = ScenarioConfig::default();

    let agg_name = r
        .take("aggregator.name")
        .ok_or_else(|| ConfigError("missing required field 'aggregator.name'".into()))?;

    let aggregator = match agg_name.as_str() {
        "no_defense" | "fedavg" => AggregatorChoice::NoDefense {
            weight_by_size: r.parse("no_defense.weight_by_size", false)?,
        },
        "median" => AggregatorChoice::Median,
        "trimmed_mean" => AggregatorChoice::TrimmedMean {
            trim_fraction: r.parse("trimmed_mean.trim_fraction", 0.2)?,
        },
        "multi_krum" => AggregatorChoice::MultiKrum {
            m: r.parse("multi_krum.m", 2usize)?,
            select_count: r.parse_opt("multi_krum.select_count")?,
        },
        "foolsgold" => AggregatorChoice::FoolsGold,
        "norm_bound" => {
            let threshold = match r.parse_opt::<f64>("norm_bound.fixed")? {
                Some(t) => NormThreshold::Fixed(t),
                None => NormThreshold::MedianFactor(r.parse("norm_bound.median_factor", 2.0)?),
            };
            AggregatorChoice::NormBound { threshold }
        }
        "rfa" => AggregatorChoice::Rfa {
            smoothing: r.parse("rfa.smoothing", 1e-6)?,
            max_iters: r.parse("rfa.max_iters", 100usize)?,
        },
        "residual_base" => AggregatorChoice::ResidualBase {
            confidence_interval: r.parse("residual_base.confidence_interval", 2.0)?,
            clip_threshold: r.parse("residual_base.clip_threshold", 0.05)?,
        },
        "fedcpa" => AggregatorChoice::FedCpa(FedCpaConfig {
            k_ratio: r.parse("fedcpa.k_ratio", 0.01)?,
            use_top: r.parse("fedcpa.use_top", true)?,
            use_bottom: r.parse("fedcpa.use_bottom", true)?,
            use_global_term: r.parse("fedcpa.use_global_term", true)?,
            use_local_term: r.parse("fedcpa.use_local_term", true)?,
            sum_normalized: r.parse("fedcpa.sum_normalized", false)?,
        }),
        other => {
            return Err(ConfigError(format!(
                "field 'aggregator.name': unknown aggregator '{other}'"
            )))
        }
    };

    let blobs = BlobSpec {
        classes: r.parse("blobs.classes", defaults.blobs.classes)?,
        dim: r.parse("blobs.dim", defaults.blobs.dim)?,
        per_class: r.parse("blobs.per_class", defaults.blobs.per_class)?,
        spread: r.parse("blobs.spread", defaults.blobs.spread)?,
        grid: {
            let rows = r.parse_opt::<usize>("blobs.grid_rows")?;
            let cols = r.parse_opt::<usize>("blobs.grid_cols")?;
            match (rows, cols) {
                (Some(h), Some(w)) => Some((h, w)),
                (None, None) => defaults.blobs.grid,
                _ => {
                    return Err(ConfigError(
                        "fields 'blobs.grid_rows' and 'blobs.grid_cols' must be set together"
                            .into(),
                    ))
                }
            }
        },
        test_per_class: r.parse("blobs.test_per_class", defaults.blobs.test_per_class)?,
    };

    let hidden = r.take("model.hidden").unwrap_or_else(|| "32".to_string());
    let mut layer_sizes = vec![blobs.dim];
    for part in hidden.split(';') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        layer_sizes.push(part.parse().map_err(|_| {
            ConfigError(format!("field 'model.hidden': bad layer size '{part}'"))
        })?);
    }
    layer_sizes.push(blobs.classes);
    let model = MlpSpec::new(layer_sizes)
        .map_err(|e| ConfigError(format!("field 'model.hidden': {e}")))?;

    let attack = match r.take("attack") {
        None => defaults.attack,
        Some(name) => {
            Attack::parse(&name).map_err(|e| ConfigError(format!("field 'attack': {e}")))?
        }
    };

    let config = ScenarioConfig {
        n_clients: r.parse("n_clients", defaults.n_clients)?,
        attacker_fraction: r.parse("attacker_fraction", defaults.attacker_fraction)?,
        beta: r.parse("beta", defaults.beta)?,
        attack,
        gamma_p: r.parse("gamma_p", defaults.gamma_p)?,
        gaussian_std: r.parse("gaussian_std", defaults.gaussian_std)?,
        rounds: r.parse("rounds", defaults.rounds)?,
        participation_fraction: r.parse(
            "participation_fraction",
            defaults.participation_fraction,
        )?,
        aggregator,
        model,
        train: TrainConfig {
            learning_rate: r.parse("train.learning_rate", defaults.train.learning_rate)?,
            momentum: r.parse("train.momentum", defaults.train.momentum)?,
            weight_decay: r.parse("train.weight_decay", defaults.train.weight_decay)?,
            batch_size: r.parse("train.batch_size", defaults.train.batch_size)?,
            epochs: r.parse("train.epochs", defaults.train.epochs)?,
        },
        trigger: fedsim_core::data::TriggerSpec {
            patch_rows: r.parse("trigger.patch_rows", defaults.trigger.patch_rows)?,
            patch_cols: r.parse("trigger.patch_cols", defaults.trigger.patch_cols)?,
            patch_value: r.parse("trigger.patch_value", defaults.trigger.patch_value)?,
            target_label: r.parse("trigger.target_label", defaults.trigger.target_label)?,
        },
        blobs,
        master_seed: r.parse("master_seed", defaults.master_seed)?,
        asr_include_target: r.parse("asr_include_target", defaults.asr_include_target)?,
    };
    r.reject_unknown()?;
    let config = match seed_override {
        Some(seed) => ScenarioConfig {
            master_seed: seed,
            ..config
        },
        None => config,
    };
    config
        .validate()
        .map_err(|e| ConfigError(format!("{e}")))?;
    Ok(config)
}

/// Echo every resolved parameter in config-file syntax; re-parsing the
/// manifest body reproduces the run.
pub fn manifest(config: &ScenarioConfig, config_path: &Path, version: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# fedsim run manifest");
    let _ = writeln!(out, "# artifact_version: {version}");
    let _ = writeln!(out, "# config_file: {}", config_path.display());
    let _ = writeln!(out, "n_clients = {}", config.n_clients);
    let _ = writeln!(out, "attacker_fraction = {}", config.attacker_fraction);
    let _ = writeln!(out, "beta = {}", config.beta);
    let _ = writeln!(out, "attack = {}", config.attack.name());
    let _ = writeln!(out, "gamma_p = {}", config.gamma_p);
    let _ = writeln!(out, "gaussian_std = {}", config.gaussian_std);
    let _ = writeln!(out, "rounds = {}", config.rounds);
    let _ = writeln!(
        out,
        "participation_fraction = {}",
        config.participation_fraction
    );
    let _ = writeln!(out, "master_seed = {}", config.master_seed);
    let _ = writeln!(out, "asr_include_target = {}", config.asr_include_target);
    match &config.aggregator {
        AggregatorChoice::NoDefense { weight_by_size } => {
            let _ = writeln!(out, "aggregator.name = no_defense");
            let _ = writeln!(out, "no_defense.weight_by_size = {weight_by_size}");
        }
        AggregatorChoice::Median => {
            let _ = writeln!(out, "aggregator.name = median");
        }
        AggregatorChoice::TrimmedMean { trim_fraction } => {
            let _ = writeln!(out, "aggregator.name = trimmed_mean");
            let _ = writeln!(out, "trimmed_mean.trim_fraction = {trim_fraction}");
        }
        AggregatorChoice::MultiKrum { m, select_count } => {
            let _ = writeln!(out, "aggregator.name = multi_krum");
            let _ = writeln!(out, "multi_krum.m = {m}");
            if let Some(s) = select_count {
                let _ = writeln!(out, "multi_krum.select_count = {s}");
            }
        }
        AggregatorChoice::FoolsGold => {
            let _ = writeln!(out, "aggregator.name = foolsgold");
        }
        AggregatorChoice::NormBound { threshold } => {
            let _ = writeln!(out, "aggregator.name = norm_bound");
            match threshold {
                NormThreshold::Fixed(t) => {
                    let _ = writeln!(out, "norm_bound.fixed = {t}");
                }
                NormThreshold::MedianFactor(f) => {
                    let _ = writeln!(out, "norm_bound.median_factor = {f}");
                }
            }
        }
        AggregatorChoice::Rfa {
            smoothing,
            max_iters,
        } => {
            let _ = writeln!(out, "aggregator.name = rfa");
            let _ = writeln!(out, "rfa.smoothing = {smoothing}");
            let _ = writeln!(out, "rfa.max_iters = {max_iters}");
        }
        AggregatorChoice::ResidualBase {
            confidence_interval,
            clip_threshold,
        } => {
            let _ = writeln!(out, "aggregator.name = residual_base");
            let _ = writeln!(out, "residual_base.confidence_interval = {confidence_interval}");
            let _ = writeln!(out, "residual_base.clip_threshold = {clip_threshold}");
        }
        AggregatorChoice::FedCpa(cfg) => {
            let _ = writeln!(out, "aggregator.name = fedcpa");
            let _ = writeln!(out, "fedcpa.k_ratio = {}", cfg.k_ratio);
            let _ = writeln!(out, "fedcpa.use_top = {}", cfg.use_top);
            let _ = writeln!(out, "fedcpa.use_bottom = {}", cfg.use_bottom);
            let _ = writeln!(out, "fedcpa.use_global_term = {}", cfg.use_global_term);
            let _ = writeln!(out, "fedcpa.use_local_term = {}", cfg.use_local_term);
            let _ = writeln!(out, "fedcpa.sum_normalized = {}", cfg.sum_normalized);
        }
    }
    let hidden: Vec<String> = config.model.layer_sizes[1..config.model.layer_sizes.len() - 1]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let _ = writeln!(out, "model.hidden = {}", hidden.join(";"));
    let _ = writeln!(out, "train.learning_rate = {}", config.train.learning_rate);
    let _ = writeln!(out, "train.momentum = {}", config.train.momentum);
    let _ = writeln!(out, "train.weight_decay = {}", config.train.weight_decay);
    let _ = writeln!(out, "train.batch_size = {}", config.train.batch_size);
    let _ = writeln!(out, "train.epochs = {}", config.train.epochs);
    let _ = writeln!(out, "trigger.patch_rows = {}", config.trigger.patch_rows);
    let _ = writeln!(out, "trigger.patch_cols = {}", config.trigger.patch_cols);
    let _ = writeln!(out, "trigger.patch_value = {}", config.trigger.patch_value);
    let _ = writeln!(out, "trigger.target_label = {}", config.trigger.target_label);
    let _ = writeln!(out, "blobs.classes = {}", config.blobs.classes);
    let _ = writeln!(out, "blobs.dim = {}", config.blobs.dim);
    let _ = writeln!(out, "blobs.per_class = {}", config.blobs.per_class);
    let _ = writeln!(out, "blobs.spread = {}", config.blobs.spread);
    let _ = writeln!(out, "blobs.test_per_class = {}", config.blobs.test_per_class);
    if let Some((h, w)) = config.blobs.grid {
        let _ = writeln!(out, "blobs.grid_rows = {h}");
        let _ = writeln!(out, "blobs.grid_cols = {w}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = parse_scenario("aggregator.name = fedcpa\n", None).unwrap();
        assert_eq!(cfg.n_clients, 20);
        assert_eq!(cfg.beta, 0.5);
        assert_eq!(cfg.rounds, 100);
        assert_eq!(cfg.participation_fraction, 0.5);
        assert!(matches!(cfg.aggregator, AggregatorChoice::FedCpa(_)));
    }

    #[test]
    fn missing_aggregator_named_in_error() {
        let err = parse_scenario("rounds = 5\n", None).unwrap_err();
        assert!(err.0.contains("aggregator.name"), "{}", err.0);
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let err = parse_scenario("aggregator.name = median\nbogus = 1\n", None).unwrap_err();
        assert!(err.0.contains("bogus"));
        assert!(err.0.contains("line 2"));
    }

    #[test]
    fn seed_override_wins() {
        let text = "aggregator.name = median\nmaster_seed = 4\n";
        assert_eq!(parse_scenario(text, None).unwrap().master_seed, 4);
        assert_eq!(parse_scenario(text, Some(9)).unwrap().master_seed, 9);
    }

    #[test]
    fn manifest_round_trips() {
        let text = "aggregator.name = fedcpa\nfedcpa.k_ratio = 0.05\nrounds = 7\nbeta = 1.5\n";
        let cfg = parse_scenario(text, None).unwrap();
        let m = manifest(&cfg, Path::new("x.cfg"), "test");
        let back = parse_scenario(&m, None).unwrap();
        assert_eq!(back.rounds, 7);
        assert_eq!(back.beta, 1.5);
        match back.aggregator {
            AggregatorChoice::FedCpa(c) => assert_eq!(c.k_ratio, 0.05),
            _ => panic!("wrong aggregator"),
        }
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let text = "# scenario\n\naggregator.name = median # robust\nrounds = 3\n";
        let cfg = parse_scenario(text, None).unwrap();
        assert_eq!(cfg.rounds, 3);
        assert!(matches!(cfg.aggregator, AggregatorChoice::Median));
    }
}
