//! Flat JSON run configuration consumed by the CLI, with `--set key=value`
//! overrides. One file drives every subcommand; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabelRule;
use crate::net::{Activation, FirstLayerScaling, NetConfig};
use crate::objective::LossKind;
use crate::trainer::{StepSizeRule, StopRule, TrainConfig};
use crate::xor::{LogBase, XorConfig};
use crate::Error;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepSizeField {
    Keyword(String),
    Value(f64),
}

fn default_step_size() -> StepSizeField {
    StepSizeField::Keyword("auto".into())
}

fn default_activation() -> String {
    "softplus".into()
}

fn default_scaling() -> String {
    "scaled".into()
}

fn default_loss() -> String {
    "logistic".into()
}

fn default_stop_rule() -> String {
    "fixed-t".into()
}

fn default_label_rule() -> String {
    "even-odd".into()
}

fn default_log_base() -> String {
    "two".into()
}

fn default_safety() -> f64 {
    0.9
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_margin_iters() -> usize {
    2_000
}

fn default_width() -> usize {
    500
}

fn default_depth() -> usize {
    2
}

fn default_max_iters() -> usize {
    1_000
}

fn default_dim() -> usize {
    64
}

fn default_mc_samples() -> usize {
    10_000
}

fn default_sweep_dims() -> Vec<usize> {
    vec![16, 64, 256, 1024]
}

fn default_sweep_replicates() -> u64 {
    5
}

fn default_sweep_batch_multiplier() -> usize {
    3
}

fn default_synth_n() -> usize {
    512
}

fn default_synth_margin() -> f64 {
    0.5
}

/// Flat run configuration. Field names mirror the net, trainer, and xor
/// config structs; every field has a default so sweeps only override a few
/// keys.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    // architecture
    pub depth: usize,
    pub width: usize,
    pub activation: String,
    pub first_layer_scaling: String,
    pub init_stddev: Option<f64>,

    // objective / training
    pub loss: String,
    pub step_size: StepSizeField,
    pub safety: f64,
    pub max_iters: usize,
    pub stop_rule: String,
    pub stop_eps: Option<f64>,
    pub eval_every: Option<usize>,
    pub seed: u64,

    // data
    pub data_images: Option<String>,
    pub data_labels: Option<String>,
    pub test_images: Option<String>,
    pub test_labels: Option<String>,
    pub label_rule: String,
    pub class_pair: Option<(u8, u8)>,
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
    pub test_fraction: f64,
    pub synth_dim: Option<usize>,
    pub synth_n: usize,
    pub synth_margin: f64,

    // bound report
    pub margin_iters: usize,
    pub corollary_epsilon: Option<f64>,

    // xor experiment
    pub dim: usize,
    pub batch_size: Option<usize>,
    pub eta: Option<f64>,
    pub steps: Option<usize>,
    pub log_base: String,
    pub mc_samples: usize,
    pub enumeration_batches: bool,

    // sweep
    pub sweep_dims: Vec<usize>,
    pub sweep_replicates: u64,
    pub sweep_batch_multiplier: usize,
}

impl Default for ConfigFile {
    fn default() -> Self {
        ConfigFile {
            depth: default_depth(),
            width: default_width(),
            activation: default_activation(),
            first_layer_scaling: default_scaling(),
            init_stddev: None,
            loss: default_loss(),
            step_size: default_step_size(),
            safety: default_safety(),
            max_iters: default_max_iters(),
            stop_rule: default_stop_rule(),
            stop_eps: None,
            eval_every: None,
            seed: 0,
            data_images: None,
            data_labels: None,
            test_images: None,
            test_labels: None,
            label_rule: default_label_rule(),
            class_pair: None,
            n_train: None,
            n_test: None,
            test_fraction: default_test_fraction(),
            synth_dim: None,
            synth_n: default_synth_n(),
            synth_margin: default_synth_margin(),
            margin_iters: default_margin_iters(),
            corollary_epsilon: None,
            dim: default_dim(),
            batch_size: None,
            eta: None,
            steps: None,
            log_base: default_log_base(),
            mc_samples: default_mc_samples(),
            enumeration_batches: false,
            sweep_dims: default_sweep_dims(),
            sweep_replicates: default_sweep_replicates(),
            sweep_batch_multiplier: default_sweep_batch_multiplier(),
        }
    }
}

impl ConfigFile {
    /// Read a config file and apply `key=value` overrides in order.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_value(value, overrides)
    }

    pub fn from_value(mut value: serde_json::Value, overrides: &[String]) -> Result<Self, Error> {
        let map = value
            .as_object_mut()
            .ok_or_else(|| Error::Config("config must be a flat JSON object".into()))?;
        for kv in overrides {
            let (key, raw) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{kv}' is not key=value")))?;
            // Values parse as JSON when possible, else as bare strings.
            let parsed = serde_json::from_str::<serde_json::Value>(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            map.insert(key.to_string(), parsed);
        }
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn activation(&self) -> Result<Activation, Error> {
        Activation::from_name(&self.activation)
    }

    pub fn loss_kind(&self) -> Result<LossKind, Error> {
        LossKind::from_name(&self.loss)
    }

    pub fn label_rule(&self) -> Result<LabelRule, Error> {
        match (self.label_rule.as_str(), self.class_pair) {
            ("even-odd", _) => Ok(LabelRule::EvenOdd),
            ("class-pair", Some((a, b))) => Ok(LabelRule::ClassPair(a, b)),
            ("class-pair", None) => {
                Err(Error::Config("label_rule class-pair needs class_pair = [a, b]".into()))
            }
            (other, _) => Err(Error::Config(format!("unknown label rule '{other}'"))),
        }
    }

    pub fn net_config(&self, input_dim: usize) -> Result<NetConfig, Error> {
        let scaling = match self.first_layer_scaling.as_str() {
            "scaled" => FirstLayerScaling::Scaled,
            "unscaled" => FirstLayerScaling::Unscaled,
            other => return Err(Error::Config(format!("unknown first_layer_scaling '{other}'"))),
        };
        let cfg = NetConfig {
            hidden_layers: self.depth,
            width: self.width,
            input_dim,
            activation: self.activation()?,
            first_layer_scaling: scaling,
            init_stddev: self.init_stddev.unwrap_or(1.0),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig, Error> {
        let step_size = match &self.step_size {
            StepSizeField::Keyword(k) if k == "auto" => StepSizeRule::Auto { safety: self.safety },
            StepSizeField::Keyword(k) => {
                return Err(Error::Config(format!("step_size must be a number or \"auto\", got '{k}'")))
            }
            StepSizeField::Value(v) => StepSizeRule::Fixed(*v),
        };
        let stop_rule = match self.stop_rule.as_str() {
            "fixed-t" => StopRule::FixedT,
            "sqrt-n" => StopRule::SqrtN,
            "loss-below" => StopRule::LossBelow(
                self.stop_eps
                    .ok_or_else(|| Error::Config("stop_rule loss-below needs stop_eps".into()))?,
            ),
            other => return Err(Error::Config(format!("unknown stop rule '{other}'"))),
        };
        let cfg = TrainConfig { step_size, max_iters: self.max_iters, stop_rule, eval_every: self.eval_every };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn xor_config(&self) -> Result<XorConfig, Error> {
        let log_base = match self.log_base.as_str() {
            "two" => LogBase::Two,
            "e" | "natural" => LogBase::Natural,
            other => return Err(Error::Config(format!("unknown log base '{other}'"))),
        };
        let cfg = XorConfig {
            dim: self.dim,
            width: if self.width == default_width() { 20 } else { self.width },
            batch_size: self.batch_size.unwrap_or(6 * self.dim),
            eta: self.eta,
            steps: self.steps,
            log_base,
            mc_samples: self.mc_samples,
            enumeration_batches: self.enumeration_batches,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
