//! Run configuration: a flat `key = value` text format over dotted keys,
//! one registry entry per tunable.

use std::collections::HashMap;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backbone::BackboneConfig;
use crate::composer::{AttScope, EvalConfig, NovelNorm};
use crate::data::{MotifFamily, SynthSpec};
use crate::heads::{HeadConfig, Level, RelationInput};
use crate::losses::LossConfig;
use crate::trainer::TrainConfig;
use crate::weightgen::{AttGenConfig, Generator};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` expects {expected}, got `{value}`")]
    TypeMismatch {
        line: usize,
        key: String,
        expected: &'static str,
        value: String,
    },
    #[error("line {line}: duplicate key `{key}` (first set on line {first})")]
    Duplicate { line: usize, key: String, first: usize },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// A value that can be read from and written to the config text format.
trait ConfigValue: Sized {
    const EXPECTED: &'static str;
    fn parse(raw: &str) -> Option<Self>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($t:ty, $expected:literal) => {
        impl ConfigValue for $t {
            const EXPECTED: &'static str = $expected;
            fn parse(raw: &str) -> Option<Self> {
                raw.parse().ok()
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    };
}

plain_value!(usize, "a nonnegative integer");
plain_value!(u64, "a nonnegative integer");
plain_value!(bool, "true or false");
plain_value!(MotifFamily, "one of same, shifted");
plain_value!(RelationInput, "one of scaled, unscaled");
plain_value!(Generator, "one of avg, att");
plain_value!(NovelNorm, "one of per-branch, whole");
plain_value!(AttScope, "one of per-branch, combined");

impl ConfigValue for f64 {
    const EXPECTED: &'static str = "a finite decimal number";
    fn parse(raw: &str) -> Option<Self> {
        raw.parse::<f64>().ok().filter(|v| v.is_finite())
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for Vec<usize> {
    const EXPECTED: &'static str = "a comma-separated list of integers";
    fn parse(raw: &str) -> Option<Self> {
        parse_list(raw)
    }
    fn render(&self) -> String {
        render_list(self)
    }
}

impl ConfigValue for Vec<Level> {
    const EXPECTED: &'static str = "a comma-separated list of mid, high, relation";
    fn parse(raw: &str) -> Option<Self> {
        parse_list(raw)
    }
    fn render(&self) -> String {
        render_list(self)
    }
}

fn parse_list<T: std::str::FromStr>(raw: &str) -> Option<Vec<T>> {
    if raw.trim().is_empty() {
        return Some(Vec::new());
    }
    raw.split(',').map(|p| p.trim().parse().ok()).collect()
}

fn render_list<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Every tunable of the pipeline.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub data: SynthSpec,
    pub backbone: BackboneConfig,
    pub heads: HeadConfig,
    pub losses: LossConfig,
    pub trainer: TrainConfig,
    pub attgen: AttGenSettings,
    pub eval: EvalConfig,
}

/// AttGen training settings plus how generators are shared across levels.
#[derive(Clone, Debug, PartialEq)]
pub struct AttGenSettings {
    pub scope: AttScope,
    pub train: AttGenConfig,
}

impl Default for AttGenSettings {
    fn default() -> Self {
        AttGenSettings {
            scope: AttScope::PerBranch,
            train: AttGenConfig::default(),
        }
    }
}

macro_rules! registry {
    ($($key:literal => $($field:ident).+;)*) => {
        /// Every recognised key, in the order the resolved config is printed.
        pub const KEYS: &[&str] = &[$($key),*];

        fn set_key(cfg: &mut RunConfig, key: &str, raw: &str) -> Option<Result<(), &'static str>> {
            match key {
                $($key => Some(set_field(&mut cfg.$($field).+, raw)),)*
                _ => None,
            }
        }

        fn get_key(cfg: &RunConfig, key: &str) -> Option<String> {
            match key {
                $($key => Some(cfg.$($field).+.render()),)*
                _ => None,
            }
        }
    };
}

fn set_field<T: ConfigValue>(slot: &mut T, raw: &str) -> Result<(), &'static str> {
    *slot = T::parse(raw).ok_or(T::EXPECTED)?;
    Ok(())
}

registry! {
    "data.image_size" => data.image_size;
    "data.channels" => data.channels;
    "data.n_base_classes" => data.n_base_classes;
    "data.n_novel_classes" => data.n_novel_classes;
    "data.samples_per_class" => data.samples_per_class;
    "data.test_per_class" => data.test_per_class;
    "data.noise_sigma" => data.noise_sigma;
    "data.jitter" => data.jitter;
    "data.layout_groups" => data.layout_groups;
    "data.novel_family" => data.novel_family;
    "data.seed" => data.seed;
    "backbone.stage_channels" => backbone.stage_channels;
    "backbone.blocks_per_stage" => backbone.blocks_per_stage;
    "backbone.tap_stages" => backbone.tap_stages;
    "backbone.detach_taps" => backbone.detach_taps;
    "heads.embed_dim" => heads.embed_dim;
    "heads.relation_temperature" => heads.relation_temperature;
    "heads.mid_channels" => heads.mid_channels;
    "heads.relation_hidden" => heads.relation_hidden;
    "heads.relation_input" => heads.relation_input;
    "heads.init_scale" => heads.init_scale;
    "losses.lambda" => losses.lambda;
    "losses.epsilon" => losses.epsilon;
    "losses.centric_weight" => losses.centric_weight;
    "losses.plateau_window" => losses.plateau_window;
    "trainer.batch_size" => trainer.batch_size;
    "trainer.stage1_lr" => trainer.stage1_lr;
    "trainer.lr_step_epochs" => trainer.lr_step_epochs;
    "trainer.lr_decay" => trainer.lr_decay;
    "trainer.stage1_epochs" => trainer.stage1_epochs;
    "trainer.min_epochs" => trainer.min_epochs;
    "trainer.stage2_lr" => trainer.stage2_lr;
    "trainer.stage2_epochs" => trainer.stage2_epochs;
    "trainer.momentum" => trainer.momentum;
    "trainer.seed" => trainer.seed;
    "attgen.scope" => attgen.scope;
    "attgen.episodes" => attgen.train.episodes;
    "attgen.fake_classes" => attgen.train.fake_classes;
    "attgen.max_shots" => attgen.train.max_shots;
    "attgen.queries_per_class" => attgen.train.queries_per_class;
    "attgen.lr" => attgen.train.lr;
    "attgen.momentum" => attgen.train.momentum;
    "attgen.logit_scale" => attgen.train.logit_scale;
    "attgen.init_sharpness" => attgen.train.init_sharpness;
    "attgen.seed" => attgen.train.seed;
    "eval.shots" => eval.shots;
    "eval.trials" => eval.trials;
    "eval.seed" => eval.seed;
    "eval.generator" => eval.generator;
    "eval.crops" => eval.crops;
    "eval.novel_norm" => eval.novel_norm;
    "eval.top_k" => eval.top_k;
    "eval.levels" => eval.levels;
}

fn unquote(v: &str) -> &str {
    v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v)
}

/// Parses `key = value` lines over the defaults. `#` starts a comment.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw_line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            text: content.to_string(),
        })?;
        let (key, value) = (key.trim(), unquote(value.trim()));
        if key.is_empty() {
            return Err(ConfigError::Syntax { line, text: content.to_string() });
        }
        match set_key(&mut cfg, key, value) {
            None => return Err(ConfigError::UnknownKey { line, key: key.to_string() }),
            Some(Err(expected)) => {
                return Err(ConfigError::TypeMismatch {
                    line,
                    key: key.to_string(),
                    expected,
                    value: value.to_string(),
                })
            }
            Some(Ok(())) => {}
        }
        if let Some(&first) = seen.get(key) {
            return Err(ConfigError::Duplicate { line, key: key.to_string(), first });
        }
        seen.insert(key.to_string(), line);
    }
    cfg.backbone.in_channels = cfg.data.channels;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.backbone.in_channels != self.data.channels {
            return Err(ConfigError::Invalid(format!(
                "backbone input channels {} differ from data.channels {}",
                self.backbone.in_channels, self.data.channels
            )));
        }
        self.data.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let checks = [
            self.backbone.validate(),
            self.heads.validate(),
            self.losses.validate(),
            self.trainer.validate(),
            self.attgen.train.validate(),
            self.eval.validate(),
        ];
        checks.into_iter().collect::<Result<(), String>>().map_err(ConfigError::Invalid)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        get_key(self, key)
    }

    /// The full resolved configuration, one `key = value` per line in
    /// registry order. Parsing this text yields the same configuration.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", get_key(self, key).expect("registered key"));
        }
        out
    }

    /// Hex SHA-256 of [`RunConfig::to_text`].
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
