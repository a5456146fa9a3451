//! `key = value` experiment configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Defaults follow the
//! published training setup (`preset = paper`); `preset = desk` swaps in the
//! small CI-sized model and schedule for every key the file leaves unset.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sdcw_core::data::DEFAULT_ENTITY_TYPES;
use sdcw_core::distill::{DistillMode, AGNOSTIC_TEMPERATURES, TASK_SPECIFIC_TEMPERATURE};
use sdcw_core::prune::MAX_SPARSITY;
use sdcw_core::quant::DEFAULT_OUTLIER_THRESHOLD;
use sdcw_core::{EncoderConfig, TrainSpec};

use crate::error::{WbError, WbResult};

/// Sentences generated by `synth-data` at desk scale.
pub const DESK_SENTENCES: usize = 3000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        match self {
            Preset::Desk => EncoderConfig::desk(),
            Preset::Paper => EncoderConfig::paper_large(),
        }
    }

    pub fn train(&self) -> TrainSpec {
        match self {
            Preset::Desk => TrainSpec::desk(),
            Preset::Paper => TrainSpec::paper(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Mask a fresh (or pretrained) model, then fine-tune under the mask.
    Before,
    /// Ramp sparsity up over fine-tuning.
    During,
    /// Fine-tune, then prune without retraining.
    After,
    /// Prune the given model as is, no training at all.
    OneShot,
}

impl ScheduleKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::Before => "before",
            ScheduleKind::During => "during",
            ScheduleKind::After => "after",
            ScheduleKind::OneShot => "oneshot",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantKind {
    Dynamic,
    Mixed,
}

impl QuantKind {
    pub fn name(&self) -> &'static str {
        match self {
            QuantKind::Dynamic => "dynamic",
            QuantKind::Mixed => "int8-mixed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub train: TrainSpec,
    pub encoder: EncoderConfig,
    pub max_vocab: usize,
    pub eval_batch_size: usize,

    pub dataset: Option<String>,
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub corpus_path: Option<PathBuf>,
    pub model_path: Option<PathBuf>,
    pub teacher_path: Option<PathBuf>,
    pub student_init_path: Option<PathBuf>,

    pub entity_types: Vec<String>,
    pub n_sentences: usize,
    pub corpus_lines: usize,
    pub data_seed: u64,

    pub sparsity: Vec<f64>,
    pub schedule: ScheduleKind,
    pub prune_start_epoch: usize,
    pub prune_end_epoch: Option<usize>,
    pub prune_steps: usize,

    pub distill_mode: DistillMode,
    pub temperature: Vec<f32>,
    pub alpha_soft: f32,
    pub student_layers: Vec<usize>,
    pub student_heads: Vec<usize>,

    pub quant_mode: QuantKind,
    pub outlier_threshold: f32,

    pub reps: usize,
    pub warmup: usize,
}

/// Every accepted key, in documentation order.
pub const KEYS: &[&str] = &[
    "preset",
    "learning_rate",
    "batch_size",
    "max_seq_len",
    "epochs",
    "seeds",
    "num_layers",
    "num_heads",
    "hidden_size",
    "ffn_size",
    "max_positions",
    "dropout",
    "max_vocab",
    "eval_batch_size",
    "dataset",
    "train",
    "dev",
    "test",
    "corpus",
    "model",
    "teacher",
    "student_init",
    "entity_types",
    "n_sentences",
    "corpus_lines",
    "data_seed",
    "sparsity",
    "schedule",
    "prune_start_epoch",
    "prune_end_epoch",
    "prune_steps",
    "mode",
    "temperature",
    "alpha_soft",
    "student_layers",
    "student_heads",
    "quant_mode",
    "outlier_threshold",
    "reps",
    "warmup",
];

/// Where a value came from, for error messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Origin {
    Line(usize),
    Override(usize),
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Line(n) => write!(f, "line {n}"),
            Origin::Override(n) => write!(f, "override {n}"),
        }
    }
}

struct Entry {
    value: String,
    origin: Origin,
}

struct Raw {
    entries: BTreeMap<String, Entry>,
}

impl Raw {
    fn parse(text: &str) -> WbResult<Self> {
        let mut raw = Raw {
            entries: BTreeMap::new(),
        };
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            raw.insert(line, Origin::Line(i + 1))?;
        }
        Ok(raw)
    }

    fn insert(&mut self, line: &str, origin: Origin) -> WbResult<()> {
        let (key, value) = line.split_once('=').ok_or_else(|| {
            WbError::config(format!("{origin}: expected key = value, got {line:?}"))
        })?;
        let key = key.trim();
        if !KEYS.contains(&key) {
            return Err(WbError::config(format!("{origin}: unknown key {key:?}")));
        }
        let replaces_file_value = matches!(origin, Origin::Override(_));
        if let Some(prev) = self.entries.get(key) {
            if !replaces_file_value || matches!(prev.origin, Origin::Override(_)) {
                return Err(WbError::config(format!(
                    "{origin}: duplicate key {key:?} (first set at {})",
                    prev.origin
                )));
            }
        }
        self.entries.insert(
            key.to_string(),
            Entry {
                value: value.trim().to_string(),
                origin,
            },
        );
        Ok(())
    }

    fn get<T: FromStr>(&self, key: &str) -> WbResult<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(e) => e.value.parse().map(Some).map_err(|_| {
                WbError::config(format!(
                    "{}: invalid value {:?} for {key}",
                    e.origin, e.value
                ))
            }),
        }
    }

    fn list<T: FromStr>(&self, key: &str) -> WbResult<Option<Vec<T>>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(e) => {
                let trimmed = e.value.trim_start_matches('[').trim_end_matches(']');
                let items = trimmed
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse())
                    .collect::<Result<Vec<T>, _>>()
                    .map_err(|_| {
                        WbError::config(format!(
                            "{}: invalid list {:?} for {key}",
                            e.origin, e.value
                        ))
                    })?;
                if items.is_empty() {
                    return Err(WbError::config(format!(
                        "{}: {key} must not be empty",
                        e.origin
                    )));
                }
                Ok(Some(items))
            }
        }
    }

    fn path(&self, key: &str, base: &Path) -> Option<PathBuf> {
        self.entries.get(key).map(|e| {
            let p = PathBuf::from(&e.value);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        })
    }

    fn origin(&self, key: &str) -> String {
        self.entries
            .get(key)
            .map_or_else(|| "default".to_string(), |e| e.origin.to_string())
    }

    fn choice<T>(&self, key: &str, options: &[(&str, T)]) -> WbResult<Option<T>>
    where
        T: Copy,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some(e) => options
                .iter()
                .find(|(name, _)| *name == e.value)
                .map(|(_, v)| Some(*v))
                .ok_or_else(|| {
                    let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
                    WbError::config(format!(
                        "{}: {key} must be one of {}, got {:?}",
                        e.origin,
                        names.join("|"),
                        e.value
                    ))
                }),
        }
    }
}

impl ExperimentConfig {
    /// Parse config text; relative paths resolve against `base`.
    /// `overrides` are extra `key=value` strings that may replace file values.
    pub fn parse(text: &str, base: &Path, overrides: &[String]) -> WbResult<Self> {
        let mut raw = Raw::parse(text)?;
        for (i, o) in overrides.iter().enumerate() {
            raw.insert(o, Origin::Override(i + 1))?;
        }
        Self::from_raw(&raw, base)
    }

    pub fn load(path: &Path, overrides: &[String]) -> WbResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| WbError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, overrides).map_err(|e| match e {
            WbError::Config(msg) => WbError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// All defaults for a preset, as if from an empty file.
    pub fn defaults(preset: Preset) -> Self {
        let text = format!("preset = {}", preset.name());
        Self::parse(&text, Path::new("."), &[]).expect("defaults are valid")
    }

    fn from_raw(raw: &Raw, base: &Path) -> WbResult<Self> {
        let preset = raw
            .choice(
                "preset",
                &[("desk", Preset::Desk), ("paper", Preset::Paper)],
            )?
            .unwrap_or(Preset::Paper);
        let defaults = preset.train();
        let train = TrainSpec {
            learning_rate: raw.get("learning_rate")?.unwrap_or(defaults.learning_rate),
            batch_size: raw.get("batch_size")?.unwrap_or(defaults.batch_size),
            max_seq_len: raw.get("max_seq_len")?.unwrap_or(defaults.max_seq_len),
            epochs: raw.get("epochs")?.unwrap_or(defaults.epochs),
            seeds: raw.list("seeds")?.unwrap_or(defaults.seeds),
        };
        let base_encoder = preset.encoder();
        let encoder = EncoderConfig {
            num_layers: raw.get("num_layers")?.unwrap_or(base_encoder.num_layers),
            num_heads: raw.get("num_heads")?.unwrap_or(base_encoder.num_heads),
            hidden_size: raw.get("hidden_size")?.unwrap_or(base_encoder.hidden_size),
            ffn_size: raw.get("ffn_size")?.unwrap_or(base_encoder.ffn_size),
            max_positions: raw
                .get("max_positions")?
                .unwrap_or(base_encoder.max_positions),
            dropout: raw.get("dropout")?.unwrap_or(base_encoder.dropout),
            ..base_encoder
        };
        let distill_mode = raw
            .choice(
                "mode",
                &[
                    ("agnostic", DistillMode::TaskAgnostic),
                    ("specific", DistillMode::TaskSpecific),
                ],
            )?
            .unwrap_or(DistillMode::TaskSpecific);
        let default_temperatures = match distill_mode {
            DistillMode::TaskAgnostic => AGNOSTIC_TEMPERATURES.to_vec(),
            DistillMode::TaskSpecific => vec![TASK_SPECIFIC_TEMPERATURE],
        };
        let (default_layers, default_heads) = match preset {
            Preset::Paper => (vec![4, 6], vec![4, 6]),
            Preset::Desk => (vec![1], vec![1, 2]),
        };
        let config = ExperimentConfig {
            preset,
            train,
            encoder,
            max_vocab: raw.get("max_vocab")?.unwrap_or(base_encoder.vocab_size),
            eval_batch_size: raw.get("eval_batch_size")?.unwrap_or(32),
            dataset: raw.get("dataset")?,
            train_path: raw.path("train", base),
            dev_path: raw.path("dev", base),
            test_path: raw.path("test", base),
            corpus_path: raw.path("corpus", base),
            model_path: raw.path("model", base),
            teacher_path: raw.path("teacher", base),
            student_init_path: raw.path("student_init", base),
            entity_types: raw
                .list("entity_types")?
                .unwrap_or_else(|| DEFAULT_ENTITY_TYPES.iter().map(|s| s.to_string()).collect()),
            n_sentences: raw.get("n_sentences")?.unwrap_or(DESK_SENTENCES),
            corpus_lines: raw.get("corpus_lines")?.unwrap_or(2000),
            data_seed: raw.get("data_seed")?.unwrap_or(1),
            sparsity: raw.list("sparsity")?.unwrap_or_else(|| vec![0.5]),
            schedule: raw
                .choice(
                    "schedule",
                    &[
                        ("before", ScheduleKind::Before),
                        ("during", ScheduleKind::During),
                        ("after", ScheduleKind::After),
                        ("oneshot", ScheduleKind::OneShot),
                    ],
                )?
                .unwrap_or(ScheduleKind::Before),
            prune_start_epoch: raw.get("prune_start_epoch")?.unwrap_or(0),
            prune_end_epoch: raw.get("prune_end_epoch")?,
            prune_steps: raw.get("prune_steps")?.unwrap_or(10),
            distill_mode,
            temperature: raw.list("temperature")?.unwrap_or(default_temperatures),
            alpha_soft: raw.get("alpha_soft")?.unwrap_or(0.5),
            student_layers: raw.list("student_layers")?.unwrap_or(default_layers),
            student_heads: raw.list("student_heads")?.unwrap_or(default_heads),
            quant_mode: raw
                .choice(
                    "quant_mode",
                    &[("dynamic", QuantKind::Dynamic), ("mixed", QuantKind::Mixed)],
                )?
                .unwrap_or(QuantKind::Mixed),
            outlier_threshold: raw
                .get("outlier_threshold")?
                .unwrap_or(DEFAULT_OUTLIER_THRESHOLD),
            reps: raw.get("reps")?.unwrap_or(5),
            warmup: raw.get("warmup")?.unwrap_or(1),
        };
        config.validate(raw)?;
        Ok(config)
    }

    fn validate(&self, raw: &Raw) -> WbResult<()> {
        let bad =
            |key: &str, msg: String| WbError::config(format!("{}: {key} {msg}", raw.origin(key)));
        for p in &self.sparsity {
            if !(0.0..=MAX_SPARSITY).contains(p) {
                return Err(bad(
                    "sparsity",
                    format!("must be in [0, {MAX_SPARSITY}], got {p}"),
                ));
            }
        }
        if !(self.train.learning_rate >= 0.0 && self.train.learning_rate.is_finite()) {
            return Err(bad("learning_rate", "must be non-negative".into()));
        }
        for (key, v) in [
            ("batch_size", self.train.batch_size),
            ("epochs", self.train.epochs),
            ("eval_batch_size", self.eval_batch_size),
            ("prune_steps", self.prune_steps),
            ("warmup", self.warmup),
        ] {
            if v == 0 {
                return Err(bad(key, "must be positive".into()));
            }
        }
        if self.train.max_seq_len < 2 {
            return Err(bad("max_seq_len", "must be at least 2".into()));
        }
        if self.train.max_seq_len > self.encoder.max_positions {
            return Err(bad(
                "max_seq_len",
                format!("exceeds max_positions {}", self.encoder.max_positions),
            ));
        }
        if self.reps < 3 {
            return Err(bad("reps", "must be at least 3".into()));
        }
        if self.encoder.num_heads == 0
            || !self
                .encoder
                .hidden_size
                .is_multiple_of(self.encoder.num_heads)
        {
            return Err(bad(
                "num_heads",
                format!("must divide hidden_size {}", self.encoder.hidden_size),
            ));
        }
        if !(0.0..1.0).contains(&self.encoder.dropout) {
            return Err(bad("dropout", "must be in [0, 1)".into()));
        }
        if self
            .temperature
            .iter()
            .any(|t| !(*t > 0.0 && t.is_finite()))
        {
            return Err(bad("temperature", "must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha_soft) {
            return Err(bad("alpha_soft", "must be in [0, 1]".into()));
        }
        if !(self.outlier_threshold > 0.0) {
            return Err(bad("outlier_threshold", "must be positive".into()));
        }
        if self.n_sentences < 10 {
            return Err(bad("n_sentences", "must be at least 10".into()));
        }
        if self.entity_types.is_empty() {
            return Err(bad("entity_types", "must not be empty".into()));
        }
        if let Some(end) = self.prune_end_epoch {
            if end <= self.prune_start_epoch || end > self.train.epochs {
                return Err(bad(
                    "prune_end_epoch",
                    format!(
                        "must be in ({}, {}]",
                        self.prune_start_epoch, self.train.epochs
                    ),
                ));
            }
        }
        if self.student_layers.contains(&0) {
            return Err(bad("student_layers", "must be positive".into()));
        }
        if self
            .student_heads
            .iter()
            .any(|h| *h == 0 || !self.encoder.hidden_size.is_multiple_of(*h))
        {
            return Err(bad(
                "student_heads",
                format!("must divide hidden_size {}", self.encoder.hidden_size),
            ));
        }
        Ok(())
    }

    pub fn entity_types(&self) -> Vec<&str> {
        self.entity_types.iter().map(String::as_str).collect()
    }

    pub fn require<'a>(&self, path: &'a Option<PathBuf>, key: &str) -> WbResult<&'a Path> {
        path.as_deref()
            .ok_or_else(|| WbError::config(format!("{key} is required for this command")))
    }

    /// Name used in reports for the evaluation data.
    pub fn dataset_name(&self) -> String {
        if let Some(d) = &self.dataset {
            return d.clone();
        }
        self.test_path
            .as_ref()
            .or(self.train_path.as_ref())
            .and_then(|p| p.parent())
            .and_then(|p| p.file_name())
            .map_or_else(|| "data".to_string(), |n| n.to_string_lossy().into_owned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> WbResult<ExperimentConfig> {
        ExperimentConfig::parse(text, Path::new("/base"), &[])
    }

    #[test]
    fn defaults_follow_the_published_setup() {
        let c = parse("").unwrap();
        assert_eq!(c.preset, Preset::Paper);
        assert_eq!(c.train, TrainSpec::paper());
        assert_eq!(
            (
                c.train.learning_rate,
                c.train.batch_size,
                c.train.max_seq_len,
                c.train.epochs
            ),
            (5e-5, 16, 164, 50)
        );
        assert_eq!(c.train.seeds, [1, 3, 5]);
        assert_eq!(c.temperature, [TASK_SPECIFIC_TEMPERATURE]);
    }

    #[test]
    fn desk_preset_and_overrides() {
        let c = parse(
            "# comment\npreset = desk\n\nepochs = 2\nseeds = 7, 8\ntrain = data/train.conll\n",
        )
        .unwrap();
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.train.seeds, [7, 8]);
        assert_eq!(c.train.learning_rate, TrainSpec::desk().learning_rate);
        assert_eq!(c.encoder.hidden_size, EncoderConfig::desk().hidden_size);
        assert_eq!(c.train_path.unwrap(), Path::new("/base/data/train.conll"));
    }

    #[test]
    fn agnostic_mode_defaults_to_three_temperatures() {
        let c = parse("mode = agnostic").unwrap();
        assert_eq!(c.temperature, AGNOSTIC_TEMPERATURES);
        let c = parse("mode = agnostic\ntemperature = [4]").unwrap();
        assert_eq!(c.temperature, [4.0]);
    }

    #[test]
    fn errors_name_key_and_line() {
        let err = parse("preset = desk\nsparsity = 1.5").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("sparsity") && msg.contains("line 2"), "{msg}");
        assert_eq!(err.exit_code(), 2);

        let msg = parse("epochs = 3\nwarmup_steps = 4")
            .unwrap_err()
            .to_string();
        assert!(
            msg.contains("line 2") && msg.contains("warmup_steps"),
            "{msg}"
        );

        let msg = parse("epochs = three").unwrap_err().to_string();
        assert!(msg.contains("line 1") && msg.contains("epochs"), "{msg}");

        assert!(parse("epochs 3").is_err());
        assert!(parse("epochs = 3\nepochs = 4").is_err());
        assert!(parse("schedule = sometimes").is_err());
        assert!(parse("reps = 2").is_err());
        assert!(parse("max_seq_len = 600").is_err());
    }

    #[test]
    fn command_line_overrides_replace_file_values() {
        let c =
            ExperimentConfig::parse("epochs = 3", Path::new("."), &["epochs=9".into()]).unwrap();
        assert_eq!(c.train.epochs, 9);
        let err = ExperimentConfig::parse("", Path::new("."), &["sparsity=2".into()]).unwrap_err();
        assert!(err.to_string().contains("override 1"));
    }

    #[test]
    fn every_key_is_accepted() {
        for key in KEYS {
            let err = parse(&format!("{key} = ?"))
                .err()
                .map(|e| e.to_string())
                .unwrap_or_default();
            assert!(!err.contains("unknown key"), "{key}: {err}");
        }
    }
}
