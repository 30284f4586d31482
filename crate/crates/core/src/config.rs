//! Flat JSON experiment configuration.
//!
//! ```json
//! {
//!   "network": "toy",
//!   "group_type": "row",
//!   "scheduler": "increg",
//!   "prune_ratio": 0.5,
//!   "weight_decay": 0.0005,
//!   "learning_rate": 0.05,
//!   "dataset": "synthetic"
//! }
//! ```
//!
//! `network` is either a preset (`toy`, `toy:C1:C2`) or a layer list such as
//! `conv:8:3:1:1,relu,maxpool:2:2,fc:4`. Per-layer ratios come from exactly one
//! of `prune_ratio` (number or array) or `ratio_rule` + `ratio_groups` + `speedup`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::groups::GroupType;
use crate::nn::{NetworkSpec, Shape};
use crate::scheduler::{SchedulerKind, DEFAULT_THRESHOLD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic { spec: SyntheticSpec, test_per_class: usize },
    Cifar10 { dir: PathBuf, subtract_mean: bool, max_train: Option<usize>, max_test: Option<usize> },
}

impl DatasetSource {
    pub fn input_shape(&self) -> Shape {
        match self {
            DatasetSource::Synthetic { spec, .. } => Shape::new(spec.channels, spec.size, spec.size),
            DatasetSource::Cifar10 { .. } => Shape::new(3, 32, 32),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            DatasetSource::Synthetic { spec, .. } => spec.classes,
            DatasetSource::Cifar10 { .. } => crate::data::CIFAR_CLASSES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

/// Learning-rate schedule of the retraining phase: `lr · gamma^⌊k / step⌋`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrainSchedule {
    pub learning_rate: f64,
    pub step: Option<u64>,
    pub gamma: f64,
}

impl RetrainSchedule {
    pub fn lr_at(&self, k: u64) -> f64 {
        match self.step {
            Some(step) if step > 0 => self.learning_rate * self.gamma.powi((k / step) as i32),
            _ => self.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub network: NetworkSpec,
    pub network_name: String,
    pub group_type: GroupType,
    pub scheduler: SchedulerKind,
    /// Base weight decay `λ`.
    pub weight_decay: f64,
    /// Maximum increment `A`.
    pub penalty_cap: f64,
    /// Constant learning rate of the pruning phase.
    pub learning_rate: f64,
    /// Learning rate of the optional pretraining phase (defaults to `learning_rate`).
    pub pretrain_learning_rate: f64,
    pub retrain: RetrainSchedule,
    pub batch_size: usize,
    pub seed: u64,
    pub pretrain_iterations: u64,
    pub prune_iterations: u64,
    pub retrain_iterations: u64,
    pub threshold: f64,
    pub update_interval: u64,
    pub dataset: DatasetSource,
    pub dtype: Dtype,
    pub output_dir: Option<PathBuf>,
    pub log_interval: u64,
}

const KNOWN_KEYS: &[&str] = &[
    "network",
    "group_type",
    "scheduler",
    "constant_lambda",
    "prune_ratio",
    "ratio_rule",
    "ratio_groups",
    "speedup",
    "weight_decay",
    "penalty_cap",
    "learning_rate",
    "pretrain_learning_rate",
    "retrain_learning_rate",
    "retrain_lr_step",
    "retrain_lr_gamma",
    "batch_size",
    "seed",
    "pretrain_iterations",
    "prune_iterations",
    "retrain_iterations",
    "prune_threshold",
    "update_interval",
    "dataset",
    "synthetic_classes",
    "synthetic_per_class",
    "synthetic_test_per_class",
    "synthetic_channels",
    "synthetic_size",
    "synthetic_noise",
    "cifar_dir",
    "cifar_subtract_mean",
    "cifar_max_train",
    "cifar_max_test",
    "dtype",
    "output_dir",
    "log_interval",
];

struct Fields<'a>(&'a Map<String, Value>);

impl Fields<'_> {
    fn required<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        self.optional(key)?.ok_or_else(|| Error::config(key, "missing required key"))
    }

    fn optional<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<Option<T>> {
        match self.0.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => T::deserialize(v).map(Some).map_err(|e| Error::config(key, e.to_string())),
        }
    }

    fn or<T: for<'de> Deserialize<'de>>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.optional(key)?.unwrap_or(default))
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::config("<root>", e.to_string()))?;
    let Value::Object(map) = value else {
        return Err(Error::config("<root>", "config must be a JSON object"));
    };
    for (k, v) in &map {
        if !KNOWN_KEYS.contains(&k.as_str()) {
            return Err(Error::config(k, "unknown key"));
        }
        if v.is_object() {
            return Err(Error::config(k, "nested objects are not allowed; the config is flat"));
        }
    }
    let f = Fields(&map);

    let dataset = match f.or("dataset", "synthetic".to_string())?.as_str() {
        "synthetic" => {
            let spec = SyntheticSpec {
                classes: f.or("synthetic_classes", 4)?,
                per_class: f.or("synthetic_per_class", 200)?,
                channels: f.or("synthetic_channels", 1)?,
                size: f.or("synthetic_size", 8)?,
                noise: f.or("synthetic_noise", 0.5)?,
            };
            if spec.classes < 2 || spec.per_class == 0 || spec.channels == 0 || spec.size == 0 {
                return Err(Error::config("synthetic_*", "classes ≥ 2 and positive sizes required"));
            }
            DatasetSource::Synthetic { spec, test_per_class: f.or("synthetic_test_per_class", 100)? }
        }
        "cifar10" => DatasetSource::Cifar10 {
            dir: f.required("cifar_dir")?,
            subtract_mean: f.or("cifar_subtract_mean", true)?,
            max_train: f.optional("cifar_max_train")?,
            max_test: f.optional("cifar_max_test")?,
        },
        other => return Err(Error::config("dataset", format!("unknown dataset `{other}`"))),
    };

    let network_name: String = f.required("network")?;
    let input = dataset.input_shape();
    let classes = dataset.classes();
    let layers = network_layers(&network_name, classes)?;
    let convs = layers.iter().filter(|l| matches!(l, crate::nn::LayerSpec::Conv { .. })).count();
    let mut network = NetworkSpec { input, layers, prune_ratios: vec![0.0; convs] };
    network.validate()?;
    if network.num_classes() != classes {
        return Err(Error::config(
            "network",
            format!("final layer has {} outputs but the dataset has {classes} classes", network.num_classes()),
        ));
    }

    let group_type: GroupType = f.required::<String>("group_type")?.parse()?;
    let scheduler = match f.required::<String>("scheduler")?.as_str() {
        "increg" => SchedulerKind::Increg,
        "constant" => SchedulerKind::Constant { lambda: f.required("constant_lambda")? },
        "oneshot-magnitude" | "oneshot" => SchedulerKind::OneshotMagnitude,
        other => return Err(Error::config("scheduler", format!("unknown scheduler kind `{other}`"))),
    };
    if let SchedulerKind::Constant { lambda } = scheduler {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::config("constant_lambda", "must be nonnegative"));
        }
    }

    network.prune_ratios = resolve_ratios(&f, &network)?;
    network.validate()?;

    let weight_decay: f64 = f.required("weight_decay")?;
    if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
        return Err(Error::config("weight_decay", "must be nonnegative"));
    }
    let penalty_cap = f.or("penalty_cap", 0.5 * weight_decay)?;
    if scheduler == SchedulerKind::Increg && !(penalty_cap > 0.0 && penalty_cap.is_finite()) {
        return Err(Error::config("penalty_cap", "must be positive (defaults to half the weight decay)"));
    }
    let learning_rate: f64 = f.required("learning_rate")?;
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(Error::config("learning_rate", "must be positive"));
    }
    let pretrain_learning_rate = f.or("pretrain_learning_rate", learning_rate)?;
    if !(pretrain_learning_rate > 0.0 && pretrain_learning_rate.is_finite()) {
        return Err(Error::config("pretrain_learning_rate", "must be positive"));
    }
    let retrain = RetrainSchedule {
        learning_rate: f.or("retrain_learning_rate", learning_rate)?,
        step: f.optional("retrain_lr_step")?,
        gamma: f.or("retrain_lr_gamma", 0.1)?,
    };
    if !(retrain.learning_rate > 0.0) {
        return Err(Error::config("retrain_learning_rate", "must be positive"));
    }
    let batch_size: usize = f.or("batch_size", 32)?;
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    let threshold = f.or("prune_threshold", DEFAULT_THRESHOLD)?;
    if !(threshold >= 0.0) {
        return Err(Error::config("prune_threshold", "must be nonnegative"));
    }
    let update_interval = f.or("update_interval", 1u64)?;
    if update_interval == 0 {
        return Err(Error::config("update_interval", "must be at least 1"));
    }
    let log_interval = f.or("log_interval", 1u64)?;
    if log_interval == 0 {
        return Err(Error::config("log_interval", "must be at least 1"));
    }
    let dtype = match f.or("dtype", "f32".to_string())?.as_str() {
        "f32" => Dtype::F32,
        "f64" => Dtype::F64,
        other => return Err(Error::config("dtype", format!("unknown dtype `{other}`"))),
    };

    Ok(ExperimentConfig {
        network,
        network_name,
        group_type,
        scheduler,
        weight_decay,
        penalty_cap,
        learning_rate,
        pretrain_learning_rate,
        retrain,
        batch_size,
        seed: f.or("seed", 0)?,
        pretrain_iterations: f.or("pretrain_iterations", 0)?,
        prune_iterations: f.or("prune_iterations", 5000)?,
        retrain_iterations: f.or("retrain_iterations", 1000)?,
        threshold,
        update_interval,
        dataset,
        dtype,
        output_dir: f.optional("output_dir")?,
        log_interval,
    })
}

fn network_layers(name: &str, classes: usize) -> Result<Vec<crate::nn::LayerSpec>> {
    use crate::nn::LayerSpec::*;
    let toy = |c1: usize, c2: usize| {
        vec![
            Conv { out_channels: c1, kernel: 3, stride: 1, pad: 1 },
            Relu,
            MaxPool { size: 2, stride: 2 },
            Conv { out_channels: c2, kernel: 3, stride: 1, pad: 1 },
            Relu,
            MaxPool { size: 2, stride: 2 },
            Fc { out_features: classes },
        ]
    };
    if name == "toy" {
        return Ok(toy(8, 16));
    }
    if let Some(rest) = name.strip_prefix("toy:") {
        let widths: Vec<usize> = rest
            .split(':')
            .map(|s| s.parse().map_err(|e| Error::config("network", format!("`{name}`: {e}"))))
            .collect::<Result<_>>()?;
        if widths.len() != 2 {
            return Err(Error::config("network", format!("`{name}`: expected toy:C1:C2")));
        }
        return Ok(toy(widths[0], widths[1]));
    }
    NetworkSpec::parse_layers(name)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RatioValue {
    One(f64),
    Many(Vec<f64>),
}

fn resolve_ratios(f: &Fields<'_>, network: &NetworkSpec) -> Result<Vec<f64>> {
    let convs = network.conv_layers().len();
    let direct: Option<RatioValue> = f.optional("prune_ratio")?;
    let rule: Option<String> = f.optional("ratio_rule")?;
    let ratios = match (direct, rule) {
        (Some(_), Some(_)) => {
            return Err(Error::config("prune_ratio", "give either prune_ratio or ratio_rule, not both"))
        }
        (None, None) => return Err(Error::config("prune_ratio", "missing required key (or ratio_rule)")),
        (Some(RatioValue::One(r)), None) => vec![r; convs],
        (Some(RatioValue::Many(v)), None) => {
            if v.len() != convs {
                return Err(Error::config("prune_ratio", format!("{} ratios for {convs} conv layers", v.len())));
            }
            v
        }
        (None, Some(rule)) => {
            let proportions = parse_ratio_rule(&rule)?;
            let groups: Vec<usize> = f.required("ratio_groups")?;
            let speedup: f64 = f.required("speedup")?;
            allocate_ratio_rule(&proportions, &groups, &network.conv_macs()?, speedup)?
        }
    };
    for (i, &r) in ratios.iter().enumerate() {
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::config(format!("prune_ratio[{i}]"), format!("{r} outside (0, 1)")));
        }
    }
    Ok(ratios)
}

/// Parses `"1:1.5:2"` into remaining-ratio proportions.
pub fn parse_ratio_rule(rule: &str) -> Result<Vec<f64>> {
    let v: Vec<f64> = rule
        .split(':')
        .map(|s| s.trim().parse::<f64>().map_err(|e| Error::config("ratio_rule", format!("`{rule}`: {e}"))))
        .collect::<Result<_>>()?;
    if v.is_empty() || v.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
        return Err(Error::config("ratio_rule", "proportions must be positive"));
    }
    Ok(v)
}

/// Solves per-layer pruning ratios from remaining-ratio proportions.
///
/// Layer `l` in group `k` keeps the fraction `s·p_k` of its groups; `s` is
/// chosen so that the kept conv multiply-adds `Σ macs_l·s·p_k` equal
/// `Σ macs_l / speedup`. Returns `R_l = 1 − s·p_k`.
pub fn allocate_ratio_rule(proportions: &[f64], layer_groups: &[usize], macs: &[usize], speedup: f64) -> Result<Vec<f64>> {
    if layer_groups.len() != macs.len() {
        return Err(Error::config("ratio_groups", format!("{} entries for {} conv layers", layer_groups.len(), macs.len())));
    }
    if let Some(&g) = layer_groups.iter().find(|&&g| g >= proportions.len()) {
        return Err(Error::config("ratio_groups", format!("group {g} but the rule has {} parts", proportions.len())));
    }
    if !(speedup > 1.0 && speedup.is_finite()) {
        return Err(Error::config("speedup", "must be greater than 1"));
    }
    let total: f64 = macs.iter().map(|&m| m as f64).sum();
    let weighted: f64 = macs.iter().zip(layer_groups).map(|(&m, &g)| m as f64 * proportions[g]).sum();
    let scale = total / speedup / weighted;
    let ratios: Vec<f64> = layer_groups.iter().map(|&g| 1.0 - scale * proportions[g]).collect();
    if let Some((i, r)) = ratios.iter().enumerate().find(|(_, &r)| !(r > 0.0 && r < 1.0)) {
        return Err(Error::config(
            format!("ratio_rule[layer {i}]"),
            format!("speedup {speedup} is infeasible with this rule (ratio {r})"),
        ));
    }
    Ok(ratios)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "network": "toy", "group_type": "row", "scheduler": "increg",
        "prune_ratio": 0.5, "weight_decay": 0.0005, "learning_rate": 0.05
    }"#;

    fn with(extra: &str) -> String {
        MINIMAL.replacen('{', &format!("{{ {extra},"), 1)
    }

    #[test]
    fn cap_defaults_to_half_the_weight_decay() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.penalty_cap, 0.00025);
        assert_eq!(cfg.network.prune_ratios, vec![0.5, 0.5]);
        assert_eq!(cfg.threshold, 1e-6);
        assert_eq!(cfg.update_interval, 1);
    }

    #[test]
    fn ratio_of_one_is_rejected() {
        let text = MINIMAL.replace("\"prune_ratio\": 0.5", "\"prune_ratio\": 1.0");
        let err = parse_config(&text).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "prune_ratio[0]"), "{err}");
    }

    #[test]
    fn missing_and_unknown_keys() {
        let text = MINIMAL.replace("\"weight_decay\": 0.0005,", "");
        assert!(matches!(parse_config(&text), Err(Error::Config { key, .. }) if key == "weight_decay"));
        assert!(matches!(parse_config(&with("\"bogus\": 1")), Err(Error::Config { key, .. }) if key == "bogus"));
        let text = MINIMAL.replace("\"increg\"", "\"afp\"");
        assert!(matches!(parse_config(&text), Err(Error::Config { key, .. }) if key == "scheduler"));
        assert!(parse_config(&with("\"nested\": {}")).is_err());
    }

    #[test]
    fn constant_scheduler_needs_lambda() {
        let text = MINIMAL.replace("\"increg\"", "\"constant\"");
        assert!(matches!(parse_config(&text), Err(Error::Config { key, .. }) if key == "constant_lambda"));
        let cfg = parse_config(&text.replacen('{', "{ \"constant_lambda\": 0.01,", 1)).unwrap();
        assert_eq!(cfg.scheduler, SchedulerKind::Constant { lambda: 0.01 });
    }

    #[test]
    fn ratio_rule_hand_solved() {
        // Equal-cost layers, proportions 1:1.5:2 and a 2x budget:
        // s = (3/2) / 4.5 = 1/3, keeps 1/3, 1/2, 2/3.
        let r = allocate_ratio_rule(&[1.0, 1.5, 2.0], &[0, 1, 2], &[100, 100, 100], 2.0).unwrap();
        let want = [2.0 / 3.0, 0.5, 1.0 / 3.0];
        for (a, b) in r.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        // Unequal costs: macs 100, 300 in groups 0, 1 with 1:2 and 2x.
        // s = 200 / (100 + 600) = 2/7, keeps 2/7 and 4/7.
        let r = allocate_ratio_rule(&[1.0, 2.0], &[0, 1], &[100, 300], 2.0).unwrap();
        assert!((r[0] - 5.0 / 7.0).abs() < 1e-12);
        assert!((r[1] - 3.0 / 7.0).abs() < 1e-12);
        assert!(allocate_ratio_rule(&[1.0, 10.0], &[0, 1], &[100, 100], 1.5).is_err());
    }

    #[test]
    fn ratio_rule_from_config() {
        let text = MINIMAL.replace(
            "\"prune_ratio\": 0.5",
            "\"ratio_rule\": \"1:1\", \"ratio_groups\": [0, 1], \"speedup\": 2.0",
        );
        let cfg = parse_config(&text).unwrap();
        assert_eq!(cfg.network.prune_ratios, vec![0.5, 0.5]);
    }

    #[test]
    fn layer_list_network() {
        let text = MINIMAL.replace("\"toy\"", "\"conv:4:3:1:1,relu,maxpool:2:2,fc:4\"").replace("0.5,", "0.25,");
        let cfg = parse_config(&text).unwrap();
        assert_eq!(cfg.network.layers.len(), 4);
        assert_eq!(cfg.network.prune_ratios, vec![0.25]);
        let bad = MINIMAL.replace("\"toy\"", "\"conv:4:3:1:1,fc:3\"");
        assert!(parse_config(&bad).is_err());
    }

    #[test]
    fn retrain_schedule_steps() {
        let s = RetrainSchedule { learning_rate: 0.1, step: Some(10), gamma: 0.5 };
        assert_eq!(s.lr_at(0), 0.1);
        assert_eq!(s.lr_at(10), 0.05);
        assert_eq!(s.lr_at(25), 0.025);
    }
}
