//! Run configuration: a TOML file flattened to `section.key` entries, checked
//! against a fixed schema, with `--set` overrides applied on top.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use flowgrpo_core::baselines::{BaselineConfig, Method};
use flowgrpo_core::flow::{DatasetSpec, PretrainConfig};
use flowgrpo_core::grpo::GrpoConfig;
use flowgrpo_core::rewards::{Rect, RewardSpec};
use toml::Value;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Int,
    Float,
    Bool,
    Str,
    IntList,
    FloatList,
    StrList,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Int => "integer",
            Kind::Float => "float",
            Kind::Bool => "boolean",
            Kind::Str => "string",
            Kind::IntList => "list of integers",
            Kind::FloatList => "list of floats",
            Kind::StrList => "list of strings",
        }
    }
}

/// `(key, kind, default as a TOML literal)`.
const SCHEMA: &[(&str, Kind, &str)] = &[
    ("seed", Kind::Int, "0"),
    ("output_dir", Kind::Str, "\"runs/default\""),
    ("dataset.kind", Kind::Str, "\"gaussian_mixture\""),
    ("dataset.conditions", Kind::Int, "4"),
    ("dataset.spread", Kind::Float, "1.5"),
    ("dataset.std", Kind::Float, "0.35"),
    ("dataset.label_noise", Kind::Float, "0.3"),
    ("model.hidden", Kind::IntList, "[64, 64, 64]"),
    ("pretrain.steps", Kind::Int, "4000"),
    ("pretrain.batch_size", Kind::Int, "256"),
    ("pretrain.lr", Kind::Float, "2e-3"),
    ("pretrain.lr_final_fraction", Kind::Float, "0.05"),
    ("pretrain.log_interval", Kind::Int, "50"),
    ("pretrain.plot_samples", Kind::Int, "512"),
    ("grpo.group_size", Kind::Int, "24"),
    ("grpo.a", Kind::Float, "0.7"),
    ("grpo.t_train", Kind::Int, "10"),
    ("grpo.t_eval", Kind::Int, "40"),
    ("grpo.clip_range", Kind::Float, "1e-4"),
    ("grpo.beta", Kind::Float, "0.01"),
    ("grpo.lr", Kind::Float, "3e-4"),
    ("grpo.iterations", Kind::Int, "500"),
    ("grpo.prompts_per_iter", Kind::Int, "4"),
    ("grpo.inner_epochs", Kind::Int, "1"),
    ("grpo.eval_interval", Kind::Int, "25"),
    ("grpo.eval_samples", Kind::Int, "256"),
    ("grpo.eval_sde", Kind::Bool, "false"),
    ("grpo.checkpoint_interval", Kind::Int, "100"),
    ("baseline.method", Kind::Str, "\"dpo\""),
    ("baseline.online", Kind::Bool, "true"),
    ("baseline.refresh_interval", Kind::Int, "40"),
    ("baseline.refresh_reference", Kind::Bool, "true"),
    ("baseline.beta_dpo", Kind::Float, "0.1"),
    ("reward.kind", Kind::Str, "\"mode_match\""),
    ("reward.scale", Kind::Float, "1.0"),
    ("reward.unit", Kind::Float, "1.0"),
    ("reward.words", Kind::StrList, "[\"nn\", \"on\", \"no\", \"oo\"]"),
    ("eval.samples", Kind::Int, "10000"),
    ("eval.a", Kind::Float, "0.7"),
    ("eval.steps", Kind::Int, "40"),
    ("eval.projections", Kind::Int, "128"),
    ("eval.threshold", Kind::Float, "1.5"),
    ("eval.corrupt_drift", Kind::Bool, "false"),
    ("eval.diversity_samples", Kind::Int, "256"),
    ("eval.plot_samples", Kind::Int, "1000"),
    ("ablate.axis", Kind::Str, "\"a\""),
    ("ablate.values", Kind::FloatList, "[0.1, 0.7]"),
    ("ablate.seeds", Kind::IntList, "[0]"),
    ("run.checkpoint", Kind::Str, "\"\""),
    ("run.wall_clock", Kind::Bool, "true"),
];

fn schema_entry(key: &str) -> Option<(Kind, &'static str)> {
    SCHEMA.iter().find(|(k, _, _)| *k == key).map(|&(_, kind, d)| (kind, d))
}

fn parse_literal(text: &str) -> Option<Value> {
    let doc: toml::Table = format!("v = {text}").parse().ok()?;
    doc.get("v").cloned()
}

/// Coerces `v` to `kind`, widening integers to floats where a float is expected.
fn coerce(v: Value, kind: Kind) -> Option<Value> {
    let to_float = |v: &Value| match v {
        Value::Float(f) => Some(*f),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    };
    match (kind, v) {
        (Kind::Int, Value::Integer(i)) => Some(Value::Integer(i)),
        (Kind::Float, v) => to_float(&v).map(Value::Float),
        (Kind::Bool, Value::Boolean(b)) => Some(Value::Boolean(b)),
        (Kind::Str, Value::String(s)) => Some(Value::String(s)),
        (Kind::IntList, Value::Array(a)) => a
            .into_iter()
            .map(|x| x.as_integer().map(Value::Integer))
            .collect::<Option<Vec<_>>>()
            .map(Value::Array),
        (Kind::FloatList, Value::Array(a)) => a
            .iter()
            .map(|x| to_float(x).map(Value::Float))
            .collect::<Option<Vec<_>>>()
            .map(Value::Array),
        (Kind::StrList, Value::Array(a)) => a
            .into_iter()
            .map(|x| x.as_str().map(|s| Value::String(s.to_string())))
            .collect::<Option<Vec<_>>>()
            .map(Value::Array),
        _ => None,
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

/// The effective configuration: every schema key with its value.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, Value>,
    /// Keys explicitly set by `--set`, in order.
    overrides: Vec<String>,
    /// Directory of the config file, for resolving relative paths.
    base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let values = SCHEMA
            .iter()
            .map(|(k, _, d)| (k.to_string(), parse_literal(d).expect("schema default parses")))
            .collect();
        Self {
            values,
            overrides: Vec::new(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    /// Parses TOML text; every unknown or mistyped key is reported at once.
    pub fn from_toml_str(text: &str) -> CliResult<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(format!("invalid config syntax: {e}")))?;
        let mut entries = Vec::new();
        flatten("", &table, &mut entries);
        let mut cfg = Self::default();
        let mut problems = Vec::new();
        for (key, value) in entries {
            if let Err(p) = cfg.assign(&key, value) {
                problems.push(p);
            }
        }
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(CliError::Config(problems.join("; ")))
        }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        Ok(cfg)
    }

    fn assign(&mut self, key: &str, value: Value) -> Result<(), String> {
        let Some((kind, _)) = schema_entry(key) else {
            return Err(format!("unknown key `{key}`"));
        };
        let v = coerce(value, kind).ok_or_else(|| format!("`{key}` must be a {}", kind.name()))?;
        self.values.insert(key.to_string(), v);
        Ok(())
    }

    /// Applies `section.key=value` overrides; the value is a TOML literal,
    /// or a bare string when it does not parse as one.
    pub fn apply_overrides(&mut self, sets: &[String]) -> CliResult<()> {
        let mut problems = Vec::new();
        for s in sets {
            let Some((key, raw)) = s.split_once('=') else {
                problems.push(format!("override `{s}` is not of the form key=value"));
                continue;
            };
            let key = key.trim();
            let raw = raw.trim();
            let value = parse_literal(raw).unwrap_or_else(|| Value::String(raw.to_string()));
            match self.assign(key, value) {
                Ok(()) => self.overrides.push(key.to_string()),
                Err(p) => problems.push(p),
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(problems.join("; ")))
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.values.insert("seed".into(), Value::Integer(seed as i64));
        self.overrides.push("seed".into());
    }

    pub fn set_str(&mut self, key: &str, v: &str) {
        debug_assert_eq!(schema_entry(key).map(|e| e.0), Some(Kind::Str));
        self.values.insert(key.into(), Value::String(v.into()));
    }

    pub fn set_float(&mut self, key: &str, v: f64) {
        self.values.insert(key.into(), Value::Float(v));
    }

    pub fn set_int(&mut self, key: &str, v: i64) {
        self.values.insert(key.into(), Value::Integer(v));
    }

    pub fn overrides(&self) -> &[String] {
        &self.overrides
    }

    fn get(&self, key: &str) -> &Value {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("`{key}` is not a schema key"))
    }

    pub fn int(&self, key: &str) -> i64 {
        self.get(key).as_integer().expect("typed by schema")
    }

    /// Non-negative integer key; negative values are a config error.
    pub fn count(&self, key: &str) -> CliResult<usize> {
        usize::try_from(self.int(key))
            .map_err(|_| CliError::Config(format!("`{key}` must be non-negative")))
    }

    pub fn float(&self, key: &str) -> f64 {
        self.get(key).as_float().expect("typed by schema")
    }

    pub fn boolean(&self, key: &str) -> bool {
        self.get(key).as_bool().expect("typed by schema")
    }

    pub fn string(&self, key: &str) -> &str {
        self.get(key).as_str().expect("typed by schema")
    }

    pub fn floats(&self, key: &str) -> Vec<f64> {
        let a = self.get(key).as_array().expect("typed by schema");
        a.iter().map(|v| v.as_float().expect("typed by schema")).collect()
    }

    pub fn ints(&self, key: &str) -> Vec<i64> {
        let a = self.get(key).as_array().expect("typed by schema");
        a.iter().map(|v| v.as_integer().expect("typed by schema")).collect()
    }

    pub fn strings(&self, key: &str) -> Vec<String> {
        let a = self.get(key).as_array().expect("typed by schema");
        a.iter().map(|v| v.as_str().expect("typed by schema").to_string()).collect()
    }

    pub fn seed(&self) -> CliResult<u64> {
        u64::try_from(self.int("seed")).map_err(|_| CliError::Config("`seed` must be non-negative".into()))
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(self.string("output_dir"))
    }

    /// `run.checkpoint` resolved against the config file's directory.
    pub fn checkpoint_path(&self) -> Option<PathBuf> {
        let raw = self.string("run.checkpoint");
        if raw.is_empty() {
            return None;
        }
        let p = PathBuf::from(raw);
        Some(if p.is_absolute() { p } else { self.base_dir.join(p) })
    }

    /// Canonical TOML snapshot of the effective configuration.
    pub fn to_toml_string(&self) -> String {
        let mut top = String::new();
        let mut sections: BTreeMap<&str, String> = BTreeMap::new();
        for (key, value) in &self.values {
            match key.split_once('.') {
                None => {
                    let _ = writeln!(top, "{key} = {value}");
                }
                Some((section, k)) => {
                    let _ = writeln!(sections.entry(section).or_default(), "{k} = {value}");
                }
            }
        }
        let mut out = top;
        for (section, body) in sections {
            let _ = write!(out, "\n[{section}]\n{body}");
        }
        out
    }

    /// Short labels for non-default settings, e.g. `beta0` for `grpo.beta = 0`.
    pub fn tags(&self) -> Vec<String> {
        let mut tags = Vec::new();
        let defaults = Self::default();
        for key in ["grpo.beta", "grpo.a", "grpo.group_size", "grpo.t_train"] {
            if self.get(key) != defaults.get(key) || self.overrides.iter().any(|k| k == key) {
                let short = match key {
                    "grpo.group_size" => "g",
                    other => other.split_once('.').unwrap().1,
                };
                let v = self.get(key);
                let text = match v {
                    Value::Float(f) => format_number(*f),
                    other => other.to_string(),
                };
                tags.push(format!("{short}{text}"));
            }
        }
        tags
    }

    pub fn dataset(&self) -> CliResult<DatasetSpec> {
        DatasetSpec::by_name(
            self.string("dataset.kind"),
            self.count("dataset.conditions")?,
            self.float("dataset.spread"),
            self.float("dataset.std"),
            self.float("dataset.label_noise"),
        )
        .map_err(CliError::from_config)
    }

    pub fn hidden(&self) -> CliResult<Vec<usize>> {
        self.ints("model.hidden")
            .into_iter()
            .map(|h| {
                usize::try_from(h)
                    .ok()
                    .filter(|&h| h > 0)
                    .ok_or_else(|| CliError::Config("`model.hidden` widths must be positive".into()))
            })
            .collect()
    }

    pub fn pretrain_config(&self) -> CliResult<PretrainConfig> {
        let mut pc = PretrainConfig::new(self.dataset()?);
        pc.hidden = self.hidden()?;
        pc.steps = self.count("pretrain.steps")?;
        pc.batch_size = self.count("pretrain.batch_size")?;
        pc.lr = self.float("pretrain.lr");
        pc.lr_final_fraction = self.float("pretrain.lr_final_fraction");
        pc.log_interval = self.count("pretrain.log_interval")?;
        pc.seed = self.seed()?;
        pc.validate().map_err(CliError::from_config)?;
        Ok(pc)
    }

    pub fn grpo_config(&self) -> CliResult<GrpoConfig> {
        let c = GrpoConfig {
            group_size: self.count("grpo.group_size")?,
            a: self.float("grpo.a"),
            t_train: self.count("grpo.t_train")?,
            t_eval: self.count("grpo.t_eval")?,
            clip_range: self.float("grpo.clip_range"),
            beta: self.float("grpo.beta"),
            lr: self.float("grpo.lr"),
            iterations: self.count("grpo.iterations")?,
            prompts_per_iter: self.count("grpo.prompts_per_iter")?,
            inner_epochs: self.count("grpo.inner_epochs")?,
            eval_interval: self.count("grpo.eval_interval")?,
            eval_samples: self.count("grpo.eval_samples")?,
            eval_sde: self.boolean("grpo.eval_sde"),
            seed: self.seed()?,
        };
        c.validate().map_err(CliError::from_config)?;
        Ok(c)
    }

    /// Baselines share the rollout and evaluation settings of the `grpo` section.
    pub fn baseline_config(&self) -> CliResult<BaselineConfig> {
        let method = Method::parse(self.string("baseline.method")).map_err(CliError::from_config)?;
        let g = self.grpo_config()?;
        let c = BaselineConfig {
            method,
            online: self.boolean("baseline.online"),
            refresh_interval: self.count("baseline.refresh_interval")?,
            refresh_reference: self.boolean("baseline.refresh_reference"),
            beta_dpo: self.float("baseline.beta_dpo"),
            group_size: g.group_size,
            a: g.a,
            t_train: g.t_train,
            t_eval: g.t_eval,
            lr: g.lr,
            iterations: g.iterations,
            prompts_per_iter: g.prompts_per_iter,
            eval_interval: g.eval_interval,
            eval_samples: g.eval_samples,
            eval_sde: g.eval_sde,
            seed: g.seed,
        };
        c.validate().map_err(CliError::from_config)?;
        Ok(c)
    }

    /// Reward named by `reward.kind`, built around the dataset's mode centres.
    pub fn reward(&self, dataset: &DatasetSpec) -> CliResult<RewardSpec> {
        let k = dataset.conditions();
        let centers = || {
            dataset.centers().map(<[Vec<f64>]>::to_vec).ok_or_else(|| {
                CliError::Config(format!(
                    "reward `{}` needs a dataset with mode centres",
                    self.string("reward.kind")
                ))
            })
        };
        let scale = self.float("reward.scale");
        let spec = match self.string("reward.kind") {
            "mode_match" => RewardSpec::ModeMatch { centers: centers()? },
            "distance" => RewardSpec::Distance {
                targets: centers()?,
                scale,
            },
            "region" => RewardSpec::Region {
                regions: centers()?
                    .iter()
                    .map(|c| Rect {
                        min: [c[0] - scale, c[1] - scale],
                        max: [c[0] + scale, c[1] + scale],
                    })
                    .collect(),
            },
            "counting" => RewardSpec::Counting {
                unit: self.float("reward.unit"),
            },
            "edit_distance" => RewardSpec::EditDistance {
                words: self.strings("reward.words"),
                unit: self.float("reward.unit"),
            },
            other => {
                return Err(CliError::Config(format!(
                    "unknown reward kind `{other}` (expected mode_match, distance, region, counting or edit_distance)"
                )))
            }
        };
        spec.validate(k).map_err(CliError::from_config)?;
        Ok(spec)
    }
}

/// Shortest decimal form, used for tags and directory names.
pub fn format_number(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}
