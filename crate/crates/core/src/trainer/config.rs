//! Training hyperparameters and the plain-text `key = value` config format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::augment::ErasingParams;
use crate::contrastive::LossConfig;
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, EMBED_DIM, INPUT_SIZE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Images per step (approximate: whole MN-pair sets are drawn).
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    /// Anchor + positives per set; `None` means the number of classes.
    pub m: Option<usize>,
    /// Anchor + negatives per set; `None` means the number of classes.
    pub n: Option<usize>,
    pub embed_dim: usize,
    pub input_size: usize,
    pub seed: u64,
    pub erasing: ErasingParams,
    /// Write an intermediate checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 3_000,
            batch_size: 128,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            m: None,
            n: None,
            embed_dim: EMBED_DIM,
            input_size: INPUT_SIZE,
            seed: 0,
            erasing: ErasingParams::default(),
            checkpoint_every: 0,
        }
    }
}

/// Keys understood by [`TrainConfig::set`].
pub const TRAIN_KEYS: &[&str] = &[
    "iterations",
    "batch_size",
    "lr",
    "decay1",
    "decay2",
    "epsilon",
    "tau",
    "v",
    "m",
    "n",
    "embed_dim",
    "input_size",
    "seed",
    "erase_probability",
    "erase_area_min",
    "erase_area_max",
    "erase_aspect_min",
    "erase_aspect_max",
    "checkpoint_every",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e: T::Err| Error::Parse {
        context: format!("config key `{key}`"),
        message: format!("`{value}`: {e}"),
    })
}

fn parse_class_count(key: &str, value: &str) -> Result<Option<usize>> {
    match value.trim() {
        "" | "auto" | "classes" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

impl TrainConfig {
    /// Sets per step: `floor(batch_size / (m + n - 1))`, at least one.
    pub fn sets_per_step(&self, m: usize, n: usize) -> usize {
        (self.batch_size / (m + n - 1)).max(1)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "iterations" => self.iterations = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.adam.learning_rate = parse(key, value)?,
            "decay1" => self.adam.decay1 = parse(key, value)?,
            "decay2" => self.adam.decay2 = parse(key, value)?,
            "epsilon" => self.adam.epsilon = parse(key, value)?,
            "tau" => self.loss = LossConfig::new(parse(key, value)?, self.loss.positive_weight())?,
            "v" => self.loss = LossConfig::new(self.loss.temperature(), parse(key, value)?)?,
            "m" => self.m = parse_class_count(key, value)?,
            "n" => self.n = parse_class_count(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "input_size" => self.input_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "erase_probability" => self.erasing.probability = parse(key, value)?,
            "erase_area_min" => self.erasing.area_fraction.0 = parse(key, value)?,
            "erase_area_max" => self.erasing.area_fraction.1 = parse(key, value)?,
            "erase_aspect_min" => self.erasing.aspect_ratio.0 = parse(key, value)?,
            "erase_aspect_max" => self.erasing.aspect_ratio.1 = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            other => return Err(Error::config(format!("unknown training key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::config("iterations and batch_size must be positive"));
        }
        if self.embed_dim == 0 || self.input_size == 0 || self.input_size % 8 != 0 {
            return Err(Error::config("input_size must be a positive multiple of 8 and embed_dim positive"));
        }
        let (lo, hi) = self.erasing.area_fraction;
        if !(0.0..=1.0).contains(&self.erasing.probability) || lo <= 0.0 || hi < lo || hi >= 1.0 {
            return Err(Error::config("invalid random-erasing parameters"));
        }
        Ok(())
    }

    /// Render as `key = value` lines in [`TRAIN_KEYS`] order.
    pub fn to_kv_string(&self) -> String {
        let count = |c: Option<usize>| c.map_or("auto".to_owned(), |c| c.to_string());
        let pairs: Vec<(&str, String)> = vec![
            ("iterations", self.iterations.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.adam.learning_rate.to_string()),
            ("decay1", self.adam.decay1.to_string()),
            ("decay2", self.adam.decay2.to_string()),
            ("epsilon", self.adam.epsilon.to_string()),
            ("tau", self.loss.temperature().to_string()),
            ("v", self.loss.positive_weight().to_string()),
            ("m", count(self.m)),
            ("n", count(self.n)),
            ("embed_dim", self.embed_dim.to_string()),
            ("input_size", self.input_size.to_string()),
            ("seed", self.seed.to_string()),
            ("erase_probability", self.erasing.probability.to_string()),
            ("erase_area_min", self.erasing.area_fraction.0.to_string()),
            ("erase_area_max", self.erasing.area_fraction.1.to_string()),
            ("erase_aspect_min", self.erasing.aspect_ratio.0.to_string()),
            ("erase_aspect_max", self.erasing.aspect_ratio.1.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Parse `key = value` lines; `#` starts a comment, blank lines are ignored.
/// Later duplicates override earlier ones.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            context: format!("config line {}", lineno + 1),
            message: format!("expected `key = value`, got `{raw}`"),
        })?;
        map.insert(k.trim().to_owned(), v.trim().to_owned());
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_setup() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_size, 128);
        assert_eq!(c.iterations, 3_000);
        assert_eq!(c.adam.learning_rate, 1e-4);
        assert_eq!((c.adam.decay1, c.adam.decay2), (0.9, 0.99));
        assert_eq!(c.loss.temperature(), 0.3);
        assert_eq!(c.loss.positive_weight(), 0.15);
        assert_eq!((c.embed_dim, c.input_size), (16, 160));
        assert_eq!(c.sets_per_step(4, 4), 18);
        c.validate().unwrap();
    }

    #[test]
    fn kv_round_trip() {
        let mut c = TrainConfig::default();
        c.m = Some(4);
        c.seed = 99;
        c.loss = LossConfig::new(0.2, 0.1).unwrap();
        let mut back = TrainConfig::default();
        for (k, v) in parse_kv(&c.to_kv_string()).unwrap() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back, c);
    }

    #[test]
    fn kv_errors() {
        assert!(parse_kv("no equals sign").is_err());
        let mut c = TrainConfig::default();
        assert!(c.set("bogus", "1").is_err());
        assert!(c.set("tau", "-1").is_err());
        assert!(c.set("iterations", "many").is_err());
        let map = parse_kv("# comment\n lr = 0.001 # trailing\n\n").unwrap();
        assert_eq!(map["lr"], "0.001");
    }
}
