//! Flat `key = value` experiment configuration.
//!
//! One assignment per line; `#` starts a comment. Every key is optional and
//! falls back to the defaults below. Lists are comma-separated.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use dckd_core::losses::{CollectionMethod, KlDirection, LossWeights};
use dckd_core::trainer::DistillConfig;

use crate::error::{config_err, Result};

/// Every recognized key, in echo order.
pub const KEYS: &[&str] = &[
    "beta_ce",
    "beta_kd",
    "beta_col",
    "t_kd",
    "t_kld",
    "method",
    "direction",
    "simultaneous",
    "num_students",
    "epochs",
    "batch_size",
    "lr0",
    "lr_min",
    "momentum",
    "weight_decay",
    "t0",
    "t_mult",
    "seed",
    "dataset",
    "blobs_classes",
    "blobs_per_class",
    "blobs_dim",
    "blobs_spread",
    "idx_images",
    "idx_labels",
    "idx_limit",
    "val_fraction",
    "teacher_sizes",
    "student_sizes",
    "out",
    "arms",
    "seeds",
    "ablate_directions",
    "ablate_methods",
    "ablate_students",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    BaselineCe,
    KdOnly,
    Dckd,
    Edckd,
    Ensembled,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::BaselineCe, Arm::KdOnly, Arm::Dckd, Arm::Edckd, Arm::Ensembled];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::BaselineCe => "baseline-ce",
            Arm::KdOnly => "kd-only",
            Arm::Dckd => "dckd",
            Arm::Edckd => "edckd",
            Arm::Ensembled => "ensembled",
        }
    }

    pub fn needs_teacher(self) -> bool {
        self != Arm::BaselineCe
    }

    pub fn needs_dckd(self) -> bool {
        matches!(self, Arm::Edckd | Arm::Ensembled)
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Arm::ALL.into_iter().find(|a| a.as_str() == s).ok_or_else(|| s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Blobs { classes: usize, per_class: usize, dim: usize, spread: f64 },
    Idx { images: PathBuf, labels: PathBuf, limit: Option<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub distill: DistillConfig,
    pub dataset: DatasetSpec,
    pub val_fraction: f64,
    pub teacher_sizes: Vec<usize>,
    pub student_sizes: Vec<usize>,
    pub out: PathBuf,
    pub arms: Vec<Arm>,
    pub seeds: Vec<u64>,
    pub ablate_directions: Vec<KlDirection>,
    pub ablate_methods: Vec<CollectionMethod>,
    pub ablate_students: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            distill: DistillConfig::default(),
            dataset: DatasetSpec::Blobs { classes: 10, per_class: 200, dim: 2, spread: 0.4 },
            val_fraction: 0.2,
            teacher_sizes: vec![2, 64, 64, 10],
            student_sizes: vec![2, 16, 10],
            out: PathBuf::from("runs/default"),
            arms: Arm::ALL.to_vec(),
            seeds: vec![7, 8, 9],
            ablate_directions: vec![KlDirection::Reverse, KlDirection::Forward, KlDirection::Bidirectional],
            ablate_methods: CollectionMethod::ALL.to_vec(),
            ablate_students: vec![3],
        }
    }
}

struct Entry {
    value: String,
    line: usize,
}

struct Entries {
    map: HashMap<String, Entry>,
}

impl Entries {
    fn take(&mut self, key: &str) -> Option<Entry> {
        self.map.remove(key)
    }

    fn parse<T: FromStr>(&mut self, key: &str, expected: &str) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some(e) => e.value.parse::<T>().map(Some).map_err(|_| {
                config_err!("line {}: key `{key}` expects {expected}, got `{}`", e.line, e.value)
            }),
        }
    }

    fn set<T: FromStr>(&mut self, key: &str, expected: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.parse(key, expected)? {
            *slot = v;
        }
        Ok(())
    }

    fn set_variant<T: FromStr>(&mut self, key: &str, valid: &[&str], slot: &mut T) -> Result<()> {
        if let Some(e) = self.take(key) {
            *slot = parse_variant(key, &e, &e.value, valid)?;
        }
        Ok(())
    }

    fn set_list<T: FromStr>(&mut self, key: &str, expected: &str, valid: Option<&[&str]>, slot: &mut Vec<T>) -> Result<()> {
        let Some(e) = self.take(key) else { return Ok(()) };
        let mut out = Vec::new();
        for item in e.value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let v = match valid {
                Some(valid) => parse_variant(key, &e, item, valid)?,
                None => item
                    .parse::<T>()
                    .map_err(|_| config_err!("line {}: key `{key}` expects a list of {expected}, got `{item}`", e.line))?,
            };
            out.push(v);
        }
        if out.is_empty() {
            return Err(config_err!("line {}: key `{key}` needs at least one value", e.line));
        }
        *slot = out;
        Ok(())
    }
}

fn parse_variant<T: FromStr>(key: &str, e: &Entry, item: &str, valid: &[&str]) -> Result<T> {
    item.parse::<T>()
        .map_err(|_| config_err!("line {}: key `{key}` has invalid value `{item}`; valid values: {}", e.line, valid.join(", ")))
}

fn tokenize(text: &str) -> Result<Entries> {
    let mut map = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(config_err!("line {line}: expected `key = value`, got `{content}`"));
        };
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            return Err(config_err!("line {line}: unknown key `{key}`"));
        }
        if map.insert(key.to_string(), Entry { value: value.to_string(), line }).is_some() {
            return Err(config_err!("line {line}: key `{key}` given twice"));
        }
    }
    Ok(Entries { map })
}

fn names<T: Copy>(all: &[T], f: impl Fn(T) -> &'static str) -> Vec<&'static str> {
    all.iter().map(|&v| f(v)).collect()
}

impl ExperimentConfig {
    /// Parses and validates config text. Relative IDX paths resolve against
    /// `base_dir`.
    pub fn parse_str(text: &str, base_dir: &Path) -> Result<ExperimentConfig> {
        let mut e = tokenize(text)?;
        let mut cfg = ExperimentConfig::default();
        let d = &mut cfg.distill;
        let w = &mut d.weights;
        e.set("beta_ce", "a number", &mut w.beta_ce)?;
        e.set("beta_kd", "a number", &mut w.beta_kd)?;
        e.set("beta_col", "a number", &mut w.beta_col)?;
        e.set("t_kd", "a number", &mut w.t_kd)?;
        e.set("t_kld", "a number", &mut w.t_kld)?;
        let methods = names(&CollectionMethod::ALL, CollectionMethod::as_str);
        let directions = names(&KlDirection::ALL, KlDirection::as_str);
        e.set_variant("method", &methods, &mut d.method)?;
        e.set_variant("direction", &directions, &mut d.direction)?;
        e.set_variant("simultaneous", &["true", "false"], &mut d.simultaneous)?;
        e.set("num_students", "a non-negative integer", &mut d.num_students)?;
        e.set("epochs", "a non-negative integer", &mut d.epochs)?;
        e.set("batch_size", "a non-negative integer", &mut d.batch_size)?;
        e.set("lr0", "a number", &mut d.lr0)?;
        e.set("lr_min", "a number", &mut d.lr_min)?;
        e.set("momentum", "a number", &mut d.momentum)?;
        e.set("weight_decay", "a number", &mut d.weight_decay)?;
        e.set("t0", "a non-negative integer", &mut d.t0)?;
        e.set("t_mult", "a non-negative integer", &mut d.t_mult)?;
        e.set("seed", "a non-negative integer", &mut d.seed)?;

        let kind = match e.take("dataset") {
            None => "blobs".to_string(),
            Some(x) if x.value == "blobs" || x.value == "idx" => x.value,
            Some(x) => {
                return Err(config_err!("line {}: key `dataset` has invalid value `{}`; valid values: blobs, idx", x.line, x.value))
            }
        };
        let (mut classes, mut per_class, mut dim, mut spread) = (10usize, 200usize, 2usize, 0.4f64);
        e.set("blobs_classes", "a non-negative integer", &mut classes)?;
        e.set("blobs_per_class", "a non-negative integer", &mut per_class)?;
        e.set("blobs_dim", "a non-negative integer", &mut dim)?;
        e.set("blobs_spread", "a number", &mut spread)?;
        let images = e.take("idx_images").map(|x| base_dir.join(x.value));
        let labels = e.take("idx_labels").map(|x| base_dir.join(x.value));
        let limit = match e.take("idx_limit") {
            None => None,
            Some(x) if x.value == "none" => None,
            Some(x) => Some(x.value.parse::<usize>().map_err(|_| {
                config_err!("line {}: key `idx_limit` expects a non-negative integer or `none`, got `{}`", x.line, x.value)
            })?),
        };
        cfg.dataset = if kind == "idx" {
            let (Some(images), Some(labels)) = (images, labels) else {
                return Err(config_err!("dataset = idx needs both `idx_images` and `idx_labels`"));
            };
            DatasetSpec::Idx { images, labels, limit }
        } else {
            DatasetSpec::Blobs { classes, per_class, dim, spread }
        };

        e.set("val_fraction", "a number", &mut cfg.val_fraction)?;
        e.set_list("teacher_sizes", "non-negative integers", None, &mut cfg.teacher_sizes)?;
        e.set_list("student_sizes", "non-negative integers", None, &mut cfg.student_sizes)?;
        if let Some(x) = e.take("out") {
            cfg.out = PathBuf::from(x.value);
        }
        let arms = names(&Arm::ALL, Arm::as_str);
        e.set_list("arms", "", Some(&arms), &mut cfg.arms)?;
        e.set_list("seeds", "non-negative integers", None, &mut cfg.seeds)?;
        e.set_list("ablate_directions", "", Some(&directions), &mut cfg.ablate_directions)?;
        e.set_list("ablate_methods", "", Some(&methods), &mut cfg.ablate_methods)?;
        e.set_list("ablate_students", "non-negative integers", None, &mut cfg.ablate_students)?;
        debug_assert!(e.map.is_empty());
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|err| config_err!("cannot read config {}: {err}", path.display()))?;
        ExperimentConfig::parse_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Applies command-line overrides. `seed` also replaces the seed list.
    pub fn with_overrides(mut self, seed: Option<u64>, epochs: Option<usize>, out: Option<PathBuf>) -> Result<Self> {
        if let Some(s) = seed {
            self.distill.seed = s;
            self.seeds = vec![s];
        }
        if let Some(n) = epochs {
            self.distill.epochs = n;
        }
        if let Some(o) = out {
            self.out = o;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.distill.validate().map_err(|e| config_err!("{e}"))?;
        if self.seeds.is_empty() {
            return Err(config_err!("seed list must be non-empty"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(config_err!("val_fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        for (key, sizes) in [("teacher_sizes", &self.teacher_sizes), ("student_sizes", &self.student_sizes)] {
            if sizes.len() < 2 || sizes.contains(&0) {
                return Err(config_err!("`{key}` needs at least two positive sizes, got {sizes:?}"));
            }
            if let DatasetSpec::Blobs { classes, dim, .. } = &self.dataset {
                if sizes[0] != *dim || sizes[sizes.len() - 1] != *classes {
                    return Err(config_err!(
                        "`{key}` {sizes:?} must start with blobs_dim = {dim} and end with blobs_classes = {classes}"
                    ));
                }
            }
        }
        match &self.dataset {
            DatasetSpec::Blobs { classes, per_class, dim, spread } => {
                if *classes == 0 || *per_class == 0 || *dim == 0 || !(spread.is_finite() && *spread > 0.0) {
                    return Err(config_err!("blobs parameters must be positive"));
                }
            }
            DatasetSpec::Idx { images, labels, .. } => {
                for p in [images, labels] {
                    if !p.exists() {
                        return Err(config_err!("IDX file {} does not exist", p.display()));
                    }
                }
            }
        }
        if self.ablate_students.iter().any(|&n| n < 2) {
            return Err(config_err!("`ablate_students` entries must be >= 2"));
        }
        if self.arms.iter().any(|a| a.needs_dckd()) && !self.arms.contains(&Arm::Dckd) {
            return Err(config_err!("arms `edckd` and `ensembled` need arm `dckd`"));
        }
        if self.arms.contains(&Arm::Dckd) && self.distill.num_students < 2 {
            return Err(config_err!("arm `dckd` needs num_students >= 2"));
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn echo(&self) -> String {
        fn list<T: fmt::Display>(v: &[T]) -> String {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        }
        let d = &self.distill;
        let w: &LossWeights = &d.weights;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("beta_ce", w.beta_ce.to_string());
        kv("beta_kd", w.beta_kd.to_string());
        kv("beta_col", w.beta_col.to_string());
        kv("t_kd", w.t_kd.to_string());
        kv("t_kld", w.t_kld.to_string());
        kv("method", d.method.to_string());
        kv("direction", d.direction.to_string());
        kv("simultaneous", d.simultaneous.to_string());
        kv("num_students", d.num_students.to_string());
        kv("epochs", d.epochs.to_string());
        kv("batch_size", d.batch_size.to_string());
        kv("lr0", d.lr0.to_string());
        kv("lr_min", d.lr_min.to_string());
        kv("momentum", d.momentum.to_string());
        kv("weight_decay", d.weight_decay.to_string());
        kv("t0", d.t0.to_string());
        kv("t_mult", d.t_mult.to_string());
        kv("seed", d.seed.to_string());
        match &self.dataset {
            DatasetSpec::Blobs { classes, per_class, dim, spread } => {
                kv("dataset", "blobs".into());
                kv("blobs_classes", classes.to_string());
                kv("blobs_per_class", per_class.to_string());
                kv("blobs_dim", dim.to_string());
                kv("blobs_spread", spread.to_string());
            }
            DatasetSpec::Idx { images, labels, limit } => {
                kv("dataset", "idx".into());
                kv("idx_images", images.display().to_string());
                kv("idx_labels", labels.display().to_string());
                kv("idx_limit", limit.map_or("none".into(), |l| l.to_string()));
            }
        }
        kv("val_fraction", self.val_fraction.to_string());
        kv("teacher_sizes", list(&self.teacher_sizes));
        kv("student_sizes", list(&self.student_sizes));
        kv("out", self.out.display().to_string());
        kv("arms", list(&self.arms));
        kv("seeds", list(&self.seeds));
        kv("ablate_directions", list(&self.ablate_directions));
        kv("ablate_methods", list(&self.ablate_methods));
        kv("ablate_students", list(&self.ablate_students));
        s
    }

    /// Copy of the training settings for one seed.
    pub fn distill_for(&self, seed: u64) -> DistillConfig {
        DistillConfig { seed, ..self.distill }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::CliError;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::parse_str(text, Path::new("."))
    }

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let w = cfg.distill.weights;
        assert_eq!((w.beta_ce, w.beta_kd, w.beta_col, w.t_kd, w.t_kld), (1.0, 1.0, 0.5, 4.0, 2.0));
        assert_eq!((cfg.distill.num_students, cfg.distill.t0, cfg.distill.t_mult), (3, 30, 2));
    }

    #[test]
    fn overrides_and_comments() {
        let cfg = parse("# preset\nbeta_col = 0.2  # large scale\n\nseeds = 1, 2\narms = dckd,edckd\n").unwrap();
        assert_eq!(cfg.distill.weights.beta_col, 0.2);
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert_eq!(cfg.arms, vec![Arm::Dckd, Arm::Edckd]);
    }

    #[test]
    fn invalid_variant_lists_choices() {
        let err = parse("direction = sideways").unwrap_err().to_string();
        assert!(err.contains("direction") && err.contains("sideways"), "{err}");
        for v in ["forward", "reverse", "bidirectional"] {
            assert!(err.contains(v), "{err}");
        }
        let err = parse("ablate_methods = logit_max, median").unwrap_err().to_string();
        assert!(err.contains("median") && err.contains("prob_max"), "{err}");
    }

    #[test]
    fn unknown_key_and_type_errors() {
        let err = parse("betta_col = 1").unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
        assert!(err.to_string().contains("betta_col"));
        let err = parse("epochs = ten").unwrap_err().to_string();
        assert!(err.contains("epochs") && err.contains("ten"), "{err}");
        assert!(parse("epochs").is_err());
        assert!(parse("seed = 1\nseed = 2").is_err());
        assert!(parse("seeds = ").is_err());
        assert!(parse("simultaneous = yes").is_err());
    }

    #[test]
    fn semantic_validation() {
        assert!(parse("val_fraction = 1.0").is_err());
        assert!(parse("student_sizes = 3,16,10").is_err());
        assert!(parse("arms = edckd").is_err());
        assert!(parse("num_students = 1").is_err());
        assert!(parse("num_students = 1\narms = baseline-ce,kd-only").is_ok());
        assert!(parse("beta_ce = 0\nbeta_kd = 0\nbeta_col = 0").is_err());
        assert!(parse("dataset = idx").is_err());
        assert!(parse("dataset = idx\nidx_images = /nonexistent/a\nidx_labels = /nonexistent/b").is_err());
        assert!(parse("ablate_students = 1").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let cfg = parse("lr0 = 0.037\nmethod = prob_max\ndirection = bidirectional\nsimultaneous = false\nseeds = 3\n").unwrap();
        assert_eq!(parse(&cfg.echo()).unwrap(), cfg);
        let default = ExperimentConfig::default();
        assert_eq!(parse(&default.echo()).unwrap(), default);
    }

    #[test]
    fn seed_override_replaces_list() {
        let cfg = parse("").unwrap().with_overrides(Some(11), Some(2), None).unwrap();
        assert_eq!(cfg.distill.seed, 11);
        assert_eq!(cfg.seeds, vec![11]);
        assert_eq!(cfg.distill.epochs, 2);
    }
}
