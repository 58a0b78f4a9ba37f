use std::fmt;
use std::str::FromStr;

use crate::{Error, Result};

/// Architecture / ablation switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Per-modality expert adapters and the learned fusion gate.
    Full,
    /// One affine map per modality instead of an expert adapter.
    NoMoe,
    /// Full architecture with the alignment weight forced to zero.
    NoAlign,
    /// Uniform averaging instead of the fusion gate.
    NoMmf,
    /// One router and one expert set over the concatenated modalities.
    JointRouter,
    /// Per-modality routers over one shared expert set.
    ModSpecificRouter,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoMoe,
        Variant::NoAlign,
        Variant::NoMmf,
        Variant::JointRouter,
        Variant::ModSpecificRouter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoMoe => "no_moe",
            Variant::NoAlign => "no_align",
            Variant::NoMmf => "no_mmf",
            Variant::JointRouter => "joint_router",
            Variant::ModSpecificRouter => "mod_specific_router",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// How the per-triplet BPR terms are reduced inside the optimized loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BprReduction {
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Adapted / fused embedding dimension.
    pub d: usize,
    pub num_experts: usize,
    pub top_k: usize,
    /// Alignment weight.
    pub lambda1: f64,
    /// Adapter load-balancing weight.
    pub lambda2: f64,
    /// Fusion balance weight.
    pub lambda3: f64,
    /// L2 weight on every trainable parameter.
    pub lambda4: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub variant: Variant,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub expert_bias: bool,
    pub init_std: f64,
    pub bpr_reduction: BprReduction,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            num_experts: 4,
            top_k: 2,
            lambda1: 0.1,
            lambda2: 0.01,
            lambda3: 0.01,
            lambda4: 0.01,
            lr: 0.001,
            batch_size: 64,
            epochs: 30,
            seed: 0,
            variant: Variant::Full,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            expert_bias: true,
            init_std: 0.01,
            bpr_reduction: BprReduction::Mean,
        }
    }
}

/// Keys in file order.
pub const CONFIG_KEYS: [&str; 18] = [
    "d",
    "num_experts",
    "top_k",
    "lambda1",
    "lambda2",
    "lambda3",
    "lambda4",
    "lr",
    "batch_size",
    "epochs",
    "seed",
    "variant",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "expert_bias",
    "init_std",
    "bpr_reduction",
];

/// Keys that change parameter shapes or the forward graph.
pub const ARCHITECTURE_KEYS: [&str; 5] = ["d", "num_experts", "top_k", "variant", "expert_bias"];

impl ModelConfig {
    /// Checks invariants and applies the variant's overrides.
    pub fn resolved(&self) -> Result<ModelConfig> {
        let mut c = self.clone();
        if c.d < 1 {
            return Err(Error::Config("d must be at least 1".into()));
        }
        if c.num_experts < 1 || c.top_k < 1 || c.top_k > c.num_experts {
            return Err(Error::Config(format!(
                "top_k = {} must lie in 1..=num_experts ({})",
                c.top_k, c.num_experts
            )));
        }
        for (k, v) in [
            ("lambda1", c.lambda1),
            ("lambda2", c.lambda2),
            ("lambda3", c.lambda3),
            ("lambda4", c.lambda4),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{k} must be a finite non-negative number, got {v}"
                )));
            }
        }
        if !c.lr.is_finite() || c.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be positive, got {}", c.lr)));
        }
        if c.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&c.adam_beta1)
            || !(0.0..1.0).contains(&c.adam_beta2)
            || c.adam_eps.is_nan()
            || c.adam_eps <= 0.0
        {
            return Err(Error::Config(
                "adam betas must lie in [0, 1) and eps be positive".into(),
            ));
        }
        if !c.init_std.is_finite() || c.init_std < 0.0 {
            return Err(Error::Config("init_std must be finite and non-negative".into()));
        }
        if c.variant == Variant::NoAlign {
            c.lambda1 = 0.0;
        }
        Ok(c)
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "d" => self.d.to_string(),
            "num_experts" => self.num_experts.to_string(),
            "top_k" => self.top_k.to_string(),
            "lambda1" => self.lambda1.to_string(),
            "lambda2" => self.lambda2.to_string(),
            "lambda3" => self.lambda3.to_string(),
            "lambda4" => self.lambda4.to_string(),
            "lr" => self.lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "seed" => self.seed.to_string(),
            "variant" => self.variant.to_string(),
            "adam_beta1" => self.adam_beta1.to_string(),
            "adam_beta2" => self.adam_beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "expert_bias" => self.expert_bias.to_string(),
            "init_std" => self.init_std.to_string(),
            "bpr_reduction" => match self.bpr_reduction {
                BprReduction::Mean => "mean".into(),
                BprReduction::Sum => "sum".into(),
            },
            other => unreachable!("unknown config key {other}"),
        }
    }

    /// Sets one key from text; unknown keys are config errors naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
        }
        match key {
            "d" => self.d = num(key, value)?,
            "num_experts" => self.num_experts = num(key, value)?,
            "top_k" => self.top_k = num(key, value)?,
            "lambda1" => self.lambda1 = num(key, value)?,
            "lambda2" => self.lambda2 = num(key, value)?,
            "lambda3" => self.lambda3 = num(key, value)?,
            "lambda4" => self.lambda4 = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "variant" => self.variant = value.parse()?,
            "adam_beta1" => self.adam_beta1 = num(key, value)?,
            "adam_beta2" => self.adam_beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "expert_bias" => self.expert_bias = num(key, value)?,
            "init_std" => self.init_std = num(key, value)?,
            "bpr_reduction" => {
                self.bpr_reduction = match value {
                    "mean" => BprReduction::Mean,
                    "sum" => BprReduction::Sum,
                    _ => return Err(Error::Config(format!("invalid value `{value}` for `bpr_reduction`"))),
                }
            }
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<ModelConfig> {
        let mut c = ModelConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        Ok(c)
    }

    pub fn render(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.value_of(k)))
            .collect()
    }

    /// Differences on `keys`, as `key: self=.. other=..` lines.
    pub fn diff(&self, other: &ModelConfig, keys: &[&str]) -> Vec<String> {
        keys.iter()
            .filter_map(|k| {
                let (a, b) = (self.value_of(k), other.value_of(k));
                (a != b).then(|| format!("{k}: checkpoint={a} expected={b}"))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_roundtrip() {
        let c = ModelConfig {
            lambda1: 1.0,
            variant: Variant::ModSpecificRouter,
            seed: 123,
            adam_eps: 1e-7,
            ..ModelConfig::default()
        };
        assert_eq!(ModelConfig::parse(&c.render()).unwrap(), c);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ModelConfig::parse("d = 8\nlearning_rate = 0.1\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn no_align_zeroes_lambda1() {
        let c = ModelConfig {
            variant: Variant::NoAlign,
            ..ModelConfig::default()
        };
        assert_eq!(c.resolved().unwrap().lambda1, 0.0);
    }

    #[test]
    fn invariants_enforced() {
        let bad = |f: fn(&mut ModelConfig)| {
            let mut c = ModelConfig::default();
            f(&mut c);
            c.resolved().is_err()
        };
        assert!(bad(|c| c.top_k = 5));
        assert!(bad(|c| c.lambda3 = -0.1));
        assert!(bad(|c| c.lr = 0.0));
        assert!(bad(|c| c.batch_size = 0));
        assert!(!bad(|_| {}));
    }

    #[test]
    fn diff_lists_architecture_changes() {
        let a = ModelConfig::default();
        let b = ModelConfig {
            num_experts: 6,
            lr: 0.5,
            ..a.clone()
        };
        let d = a.diff(&b, &ARCHITECTURE_KEYS);
        assert_eq!(d, vec!["num_experts: checkpoint=4 expected=6".to_string()]);
    }
}
