//! Run configuration: flat `key = value` text.
//!
//! `#` starts a comment. Unknown and repeated keys are errors; absent keys
//! take their defaults. [`RunConfig::to_text`] writes every key in a fixed
//! order, and parsing that text gives back the same config.

use std::fmt::{Display, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{DatasetName, DatasetSpec, Split};
use crate::error::{Error, Result};
use crate::model::{Arch, WeightMode};
use crate::optim::{OptimConfig, OptimizerKind};
use crate::schedule::ScheduleKind;
use crate::train::{ScheduleUnit, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub arch: Arch,
    pub weight_mode: WeightMode,
    pub q_w: u32,
    pub q_a: u32,
    pub dataset: DatasetName,
    /// Dataset directory; when unset, `$SLB_DATA_ROOT` or `data`.
    pub data_root: Option<PathBuf>,
    pub augment: bool,
    /// Use only the first `n` training images (0: all).
    pub train_subset: usize,
    /// Use only the first `n` test images (0: all).
    pub eval_subset: usize,
    pub output_dir: PathBuf,
    /// Write a checkpoint every this many epochs (0: never).
    pub checkpoint_every: usize,
    /// Number of most recent periodic checkpoints kept on disk.
    pub keep_checkpoints: usize,
    pub deterministic: bool,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: Arch::MnistCnn,
            weight_mode: WeightMode::Slb,
            q_w: 1,
            q_a: 32,
            dataset: DatasetName::Mnist,
            data_root: None,
            augment: false,
            train_subset: 0,
            eval_subset: 0,
            output_dir: PathBuf::from("runs/default"),
            checkpoint_every: 1,
            keep_checkpoints: 2,
            deterministic: true,
            train: TrainConfig::default(),
        }
    }
}

fn opt<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |x| x.to_string())
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

fn parse_opt<T: FromStr>(v: &str) -> std::result::Result<Option<T>, String>
where
    T::Err: Display,
{
    if v == "none" { Ok(None) } else { parse(v).map(Some) }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn parse_list(v: &str) -> std::result::Result<Vec<usize>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse(s.trim())).collect()
}

/// Every accepted key, in canonical order.
pub const KEYS: &[&str] = &[
    "arch",
    "weight_mode",
    "q_w",
    "q_a",
    "dataset",
    "data_root",
    "augment",
    "train_subset",
    "eval_subset",
    "output_dir",
    "checkpoint_every",
    "keep_checkpoints",
    "deterministic",
    "seed",
    "epochs",
    "batch_size",
    "optimizer",
    "lr",
    "lr_logits",
    "momentum",
    "beta1",
    "beta2",
    "adam_eps",
    "weight_decay",
    "weight_decay_logits",
    "milestones",
    "lr_decay",
    "schedule",
    "t_start",
    "t_end",
    "schedule_unit",
    "eval_every",
    "eval_batch",
    "discrete_stats_every",
    "freeze_threshold",
];

impl RunConfig {
    fn get(&self, key: &str) -> String {
        let t = &self.train;
        let o = &t.optim;
        match key {
            "arch" => self.arch.to_string(),
            "weight_mode" => self.weight_mode.to_string(),
            "q_w" => self.q_w.to_string(),
            "q_a" => self.q_a.to_string(),
            "dataset" => self.dataset.to_string(),
            "data_root" => opt(&self.data_root.as_ref().map(|p| p.display())),
            "augment" => self.augment.to_string(),
            "train_subset" => self.train_subset.to_string(),
            "eval_subset" => self.eval_subset.to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "keep_checkpoints" => self.keep_checkpoints.to_string(),
            "deterministic" => self.deterministic.to_string(),
            "seed" => t.seed.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "optimizer" => o.kind.to_string(),
            "lr" => o.lr.to_string(),
            "lr_logits" => opt(&o.lr_logits),
            "momentum" => o.momentum.to_string(),
            "beta1" => o.beta1.to_string(),
            "beta2" => o.beta2.to_string(),
            "adam_eps" => o.eps.to_string(),
            "weight_decay" => o.weight_decay.to_string(),
            "weight_decay_logits" => opt(&o.weight_decay_logits),
            "milestones" => t.milestones.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(","),
            "lr_decay" => t.lr_decay.to_string(),
            "schedule" => t.schedule.to_string(),
            "t_start" => t.t_start.to_string(),
            "t_end" => t.t_end.to_string(),
            "schedule_unit" => t.schedule_unit.to_string(),
            "eval_every" => t.eval_every.to_string(),
            "eval_batch" => t.eval_batch.to_string(),
            "discrete_stats_every" => t.discrete_stats_every.to_string(),
            "freeze_threshold" => t.freeze_threshold.to_string(),
            _ => unreachable!("key list and getter agree"),
        }
    }

    /// Sets one key from its text form. Returns `Ok(false)` for unknown keys.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<bool, String> {
        let t = &mut self.train;
        let o: &mut OptimConfig = &mut t.optim;
        match key {
            "arch" => self.arch = parse(v)?,
            "weight_mode" => self.weight_mode = parse(v)?,
            "q_w" => self.q_w = parse(v)?,
            "q_a" => self.q_a = parse(v)?,
            "dataset" => self.dataset = parse(v)?,
            "data_root" => self.data_root = parse_opt(v)?,
            "augment" => self.augment = parse_bool(v)?,
            "train_subset" => self.train_subset = parse(v)?,
            "eval_subset" => self.eval_subset = parse(v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "checkpoint_every" => self.checkpoint_every = parse(v)?,
            "keep_checkpoints" => self.keep_checkpoints = parse(v)?,
            "deterministic" => self.deterministic = parse_bool(v)?,
            "seed" => t.seed = parse(v)?,
            "epochs" => t.epochs = parse(v)?,
            "batch_size" => t.batch_size = parse(v)?,
            "optimizer" => o.kind = parse::<OptimizerKind>(v)?,
            "lr" => o.lr = parse(v)?,
            "lr_logits" => o.lr_logits = parse_opt(v)?,
            "momentum" => o.momentum = parse(v)?,
            "beta1" => o.beta1 = parse(v)?,
            "beta2" => o.beta2 = parse(v)?,
            "adam_eps" => o.eps = parse(v)?,
            "weight_decay" => o.weight_decay = parse(v)?,
            "weight_decay_logits" => o.weight_decay_logits = parse_opt(v)?,
            "milestones" => t.milestones = parse_list(v)?,
            "lr_decay" => t.lr_decay = parse(v)?,
            "schedule" => t.schedule = parse::<ScheduleKind>(v)?,
            "t_start" => t.t_start = parse(v)?,
            "t_end" => t.t_end = parse(v)?,
            "schedule_unit" => t.schedule_unit = parse::<ScheduleUnit>(v)?,
            "eval_every" => t.eval_every = parse(v)?,
            "eval_batch" => t.eval_batch = parse(v)?,
            "discrete_stats_every" => t.discrete_stats_every = parse(v)?,
            "freeze_threshold" => t.freeze_threshold = parse(v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::Config { line, detail: format!("expected `key = value`, got `{content}`") });
            };
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(Error::Config { line, detail: format!("key `{key}` appears twice") });
            }
            match cfg.set(key, value) {
                Ok(true) => seen.push(key),
                Ok(false) => return Err(Error::UnknownKey { key: key.to_string(), line }),
                Err(e) => return Err(Error::Config { line, detail: format!("{key}: {e}") }),
            }
        }
        cfg.validate().map_err(|e| Error::Config { line: 0, detail: e.to_string() })?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical text: every key, one per line, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            writeln!(s, "{k} = {}", self.get(k)).expect("string write");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.arch.input_shape() != self.dataset.image_shape() {
            return Err(Error::InvalidArgument(format!(
                "{} expects {:?} images but {} provides {:?}",
                self.arch,
                self.arch.input_shape(),
                self.dataset,
                self.dataset.image_shape()
            )));
        }
        if self.train.t_start <= 0.0 || self.train.t_end <= 0.0 {
            return Err(Error::InvalidArgument("schedule temperatures must be positive".into()));
        }
        crate::model::arch_specs(self.arch, self.q_w, self.q_a, self.weight_mode)?;
        self.train.validate()
    }

    pub fn data_root(&self) -> PathBuf {
        self.data_root.clone().unwrap_or_else(|| crate::data::data_root("data"))
    }

    pub fn dataset_spec(&self, split: Split) -> DatasetSpec {
        let mut spec = DatasetSpec::new(self.dataset, self.data_root(), split);
        spec.augment = self.augment && split == Split::Train;
        spec
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        let text = c.to_text();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
        assert_eq!(RunConfig::parse(&text).unwrap().to_text(), text);
        assert_eq!(text.lines().count(), KEYS.len());
    }

    #[test]
    fn comments_and_partial_files() {
        let c = RunConfig::parse("# desk run\n\nepochs = 3   # short\nlr_logits = 0.01\nmilestones = 1, 2\n").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.optim.lr_logits, Some(0.01));
        assert_eq!(c.train.milestones, vec![1, 2]);
        assert_eq!(c.q_w, 1);
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let err = RunConfig::parse("epochs = 2\nlearning_rate = 0.1\n").unwrap_err();
        assert!(matches!(&err, Error::UnknownKey { key, line: 2 } if key == "learning_rate"), "{err}");
    }

    #[test]
    fn bad_values_report_line() {
        for (text, line) in [("q_w = two", 1), ("\nepochs=3\nschedule = cosine", 3), ("augment = yes", 1), ("seed", 1)] {
            match RunConfig::parse(text) {
                Err(Error::Config { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
        assert!(matches!(RunConfig::parse("seed = 1\nseed = 2"), Err(Error::Config { line: 2, .. })));
    }

    #[test]
    fn semantic_validation() {
        assert!(RunConfig::parse("arch = resnet20").is_err());
        assert!(RunConfig::parse("arch = resnet20\ndataset = cifar10").is_ok());
        assert!(RunConfig::parse("q_w = 3").is_err());
        assert!(RunConfig::parse("t_start = 0").is_err());
        assert!(RunConfig::parse("epochs = 5\nmilestones = 7").is_err());
    }

    proptest! {
        #[test]
        fn canonical_text_is_a_fixed_point(
            seed in any::<u64>(),
            lr in 1e-6f64..10.0,
            lrl in proptest::option::of(1e-6f64..10.0),
            t_end in 0.5f64..1e3,
            epochs in 1usize..600,
            mode in 0u8..3,
            q_w in prop::sample::select(vec![1u32, 2, 4, 8, 32]),
            q_a in prop::sample::select(vec![1u32, 2, 4, 8, 32]),
        ) {
            let mut c = RunConfig::default();
            c.train.seed = seed;
            c.train.optim.lr = lr;
            c.train.optim.lr_logits = lrl;
            c.train.t_end = t_end;
            c.train.epochs = epochs;
            c.weight_mode = WeightMode::from_tag(mode).unwrap();
            c.q_w = q_w;
            c.q_a = q_a;
            c.data_root = Some(PathBuf::from("/tmp/x y"));
            let text = c.to_text();
            let back = RunConfig::parse(&text).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.to_text(), text);
        }
    }
}
