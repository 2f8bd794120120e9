//! Run configuration: `key = value` lines, optional `[section]` headers that
//! prefix later keys, `#` comments.
//!
//! ```text
//! [model]
//! experts = 2
//! [loss]
//! aux_mode = damex
//! [train]
//! steps = 500
//! dataset.0.experts = 0   # mapping keys are recognised in any section
//! dataset.1.experts = 1
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dispatch::DispatchMode;
use crate::error::{Error, Result};
use crate::losses::{AuxMode, DamexTarget};
use crate::mapping::{strip_comment, MappingTable};

use super::data::{Preset, PresetOptions};
use super::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam,
}

impl FromStr for Optimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::Parameter(format!("unknown optimizer {other:?} (expected sgd or adam)"))),
        }
    }
}

impl std::fmt::Display for Optimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub preset: Preset,
    /// Defaults to the training seed.
    pub seed: Option<u64>,
    pub options: PresetOptions,
    /// Externally supplied mixtures replace the preset when both are set.
    pub train_csv: Option<PathBuf>,
    pub eval_csv: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            preset: Preset::Domains,
            seed: None,
            options: PresetOptions::default(),
            train_csv: None,
            eval_csv: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Evaluate every this many steps (0: only after the last step).
    pub eval_every: usize,
    pub parallel_experts: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 64,
            lr: 1e-2,
            seed: 0,
            optimizer: Optimizer::Sgd,
            eval_every: 0,
            parallel_experts: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub mapping: Option<MappingTable>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig {
                classes: Preset::Domains.num_classes(),
                ..ModelConfig::default()
            },
            data: DataConfig::default(),
            train: TrainConfig::default(),
            mapping: None,
        }
    }
}

fn parse_value<V: FromStr>(key: &str, value: &str, line: usize) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::config(Some(line), format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(Some(line), format!("bad value {value:?} for {key} (expected true or false)"))),
    }
}

fn parse_with<V, E: std::fmt::Display>(value: &str, line: usize, f: impl FnOnce(&str) -> Result<V, E>) -> Result<V> {
    f(value).map_err(|e| Error::config(Some(line), e.to_string()))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_relative(text, None)
    }

    /// Reads a config file. Relative CSV paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_relative(&text, path.parent())
    }

    fn parse_relative(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut classes = None;
        let mut mapping_lines = Vec::new();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = strip_comment(raw).trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let name = name.trim();
                if !["model", "loss", "data", "train", "mapping"].contains(&name) {
                    return Err(Error::config(Some(line), format!("unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::config(Some(line), format!("expected `key = value`, got {content:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if key.starts_with("dataset.") {
                mapping_lines.push((key.to_string(), value.to_string(), line));
                continue;
            }
            let full = if section.is_empty() || section == "mapping" || key.contains('.') {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            let path = |v: &str| -> PathBuf {
                let p = PathBuf::from(v);
                match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p,
                }
            };
            match full.as_str() {
                "model.dim" => cfg.model.dim = parse_value(&full, value, line)?,
                "model.hidden" => cfg.model.hidden = parse_value(&full, value, line)?,
                "model.blocks" => cfg.model.blocks = parse_value(&full, value, line)?,
                "model.experts" => cfg.model.routing.num_experts = parse_value(&full, value, line)?,
                "model.k" => cfg.model.routing.k = parse_value(&full, value, line)?,
                "model.capacity_factor" => cfg.model.routing.capacity_factor = parse_value(&full, value, line)?,
                "model.dispatch_mode" => {
                    cfg.model.routing.dispatch_mode = parse_with(value, line, DispatchMode::from_str)?
                }
                "model.moe" => cfg.model.moe = parse_bool(&full, value, line)?,
                "model.classes" => classes = Some(parse_value(&full, value, line)?),
                "model.router_init" => cfg.model.router_init = parse_value(&full, value, line)?,
                "loss.aux_weight" => cfg.model.loss.aux_weight = parse_value(&full, value, line)?,
                "loss.aux_mode" => cfg.model.loss.aux_mode = parse_with(value, line, AuxMode::from_str)?,
                "loss.gate_noise" => cfg.model.loss.gate_noise = parse_value(&full, value, line)?,
                "loss.foreground_only" => cfg.model.loss.foreground_only = parse_bool(&full, value, line)?,
                "loss.damex_target" => cfg.model.loss.damex_target = parse_with(value, line, DamexTarget::from_str)?,
                "data.preset" => cfg.data.preset = parse_with(value, line, Preset::from_str)?,
                "data.seed" => cfg.data.seed = Some(parse_value(&full, value, line)?),
                "data.shots" => cfg.data.options.shots = parse_value(&full, value, line)?,
                "data.train_per_dataset" => cfg.data.options.train_per_dataset = parse_value(&full, value, line)?,
                "data.eval_per_dataset" => cfg.data.options.eval_per_dataset = parse_value(&full, value, line)?,
                "data.background_fraction" => {
                    cfg.data.options.background_fraction = parse_value(&full, value, line)?
                }
                "data.train_csv" => cfg.data.train_csv = Some(path(value)),
                "data.eval_csv" => cfg.data.eval_csv = Some(path(value)),
                "train.steps" => cfg.train.steps = parse_value(&full, value, line)?,
                "train.batch" => cfg.train.batch = parse_value(&full, value, line)?,
                "train.lr" => cfg.train.lr = parse_value(&full, value, line)?,
                "train.seed" => cfg.train.seed = parse_value(&full, value, line)?,
                "train.optimizer" => cfg.train.optimizer = parse_with(value, line, Optimizer::from_str)?,
                "train.eval_every" => cfg.train.eval_every = parse_value(&full, value, line)?,
                "train.parallel_experts" => cfg.train.parallel_experts = parse_bool(&full, value, line)?,
                _ => return Err(Error::config(Some(line), format!("unknown key {full:?}"))),
            }
        }
        cfg.model.classes = classes.unwrap_or_else(|| cfg.data.preset.num_classes());
        cfg.data.options.dim = cfg.model.dim;
        if !mapping_lines.is_empty() {
            let mut table = MappingTable::new(cfg.model.routing.num_experts, [])?;
            for (k, v, line) in &mapping_lines {
                table.parse_entry(k, v, *line)?;
            }
            cfg.mapping = Some(table);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| match e {
            e @ Error::Config { .. } => e,
            other => Error::config(None, other.to_string()),
        };
        self.model.validate().map_err(wrap)?;
        let t = &self.train;
        if t.batch == 0 {
            return Err(Error::config(None, "train.batch must be positive"));
        }
        if !(t.lr > 0.0) || !t.lr.is_finite() {
            return Err(Error::config(None, "train.lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.data.options.background_fraction) {
            return Err(Error::config(None, "data.background_fraction must be in [0, 1)"));
        }
        if self.data.train_csv.is_some() != self.data.eval_csv.is_some() {
            return Err(Error::config(None, "data.train_csv and data.eval_csv must be given together"));
        }
        let needs_mapping = self.model.moe
            && (self.model.routing.dispatch_mode == DispatchMode::ForcedMapping
                || (self.model.loss.aux_weight > 0.0 && self.model.loss.aux_mode != AuxMode::LoadBalancing));
        if needs_mapping && self.mapping.is_none() {
            return Err(Error::config(
                None,
                "dataset-aware routing needs `dataset.<id>.experts` entries",
            ));
        }
        if let Some(m) = &self.mapping {
            if m.num_experts() != self.model.routing.num_experts {
                return Err(Error::config(None, "mapping was built for a different expert count"));
            }
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.train.seed)
    }

    /// Fully resolved configuration; parses back to an equal value.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let l = &m.loss;
        let d = &self.data;
        let t = &self.train;
        let mut s = String::new();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "dim = {}", m.dim);
        let _ = writeln!(s, "hidden = {}", m.hidden);
        let _ = writeln!(s, "blocks = {}", m.blocks);
        let _ = writeln!(s, "classes = {}", m.classes);
        let _ = writeln!(s, "moe = {}", m.moe);
        let _ = writeln!(s, "experts = {}", m.routing.num_experts);
        let _ = writeln!(s, "k = {}", m.routing.k);
        let _ = writeln!(s, "capacity_factor = {:?}", m.routing.capacity_factor);
        let _ = writeln!(s, "dispatch_mode = {}", m.routing.dispatch_mode);
        let _ = writeln!(s, "router_init = {:?}", m.router_init);
        let _ = writeln!(s, "\n[loss]");
        let _ = writeln!(s, "aux_weight = {:?}", l.aux_weight);
        let _ = writeln!(s, "aux_mode = {}", l.aux_mode);
        let _ = writeln!(s, "gate_noise = {:?}", l.gate_noise);
        let _ = writeln!(s, "foreground_only = {}", l.foreground_only);
        let _ = writeln!(s, "damex_target = {}", l.damex_target);
        let _ = writeln!(s, "\n[data]");
        let _ = writeln!(s, "preset = {}", d.preset);
        let _ = writeln!(s, "seed = {}", self.data_seed());
        let _ = writeln!(s, "shots = {}", d.options.shots);
        let _ = writeln!(s, "train_per_dataset = {}", d.options.train_per_dataset);
        let _ = writeln!(s, "eval_per_dataset = {}", d.options.eval_per_dataset);
        let _ = writeln!(s, "background_fraction = {:?}", d.options.background_fraction);
        if let (Some(tr), Some(ev)) = (&d.train_csv, &d.eval_csv) {
            let _ = writeln!(s, "train_csv = {}", tr.display());
            let _ = writeln!(s, "eval_csv = {}", ev.display());
        }
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "steps = {}", t.steps);
        let _ = writeln!(s, "batch = {}", t.batch);
        let _ = writeln!(s, "lr = {:?}", t.lr);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "optimizer = {}", t.optimizer);
        let _ = writeln!(s, "eval_every = {}", t.eval_every);
        let _ = writeln!(s, "parallel_experts = {}", t.parallel_experts);
        if let Some(map) = &self.mapping {
            let _ = writeln!(s, "\n[mapping]");
            s.push_str(&map.to_text());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_dotted_keys() {
        let cfg = RunConfig::parse(
            "[model]\nexperts = 3\nk = 2\n[loss]\naux_mode = load_balancing\ntrain.steps = 7 # inline\n",
        )
        .unwrap();
        assert_eq!(cfg.model.routing.num_experts, 3);
        assert_eq!(cfg.model.routing.k, 2);
        assert_eq!(cfg.model.loss.aux_mode, AuxMode::LoadBalancing);
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.model.classes, 4);
    }

    #[test]
    fn mapping_entries() {
        let cfg = RunConfig::parse("dataset.0.experts = 0\n[train]\ndataset.1.experts = 1\n").unwrap();
        let m = cfg.mapping.unwrap();
        assert_eq!(m.experts(1).unwrap(), &[1]);
    }

    #[test]
    fn errors_name_lines() {
        for (text, line) in [
            ("[model]\ndim = x", 2),
            ("\n\nmodel.bogus = 1", 3),
            ("[weird]", 1),
            ("loss.aux_mode = nope", 1),
            ("model.experts = 2\ndataset.0.experts = 5", 2),
            ("just words", 1),
            ("data.preset = mars", 1),
        ] {
            match RunConfig::parse(text) {
                Err(Error::Config { line: Some(l), .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn damex_without_mapping_rejected() {
        assert!(matches!(RunConfig::parse("loss.aux_mode = damex"), Err(Error::Config { line: None, .. })));
        assert!(RunConfig::parse("loss.aux_weight = 0").is_ok());
    }

    #[test]
    fn resolved_text_round_trips() {
        let cfg = RunConfig::parse(
            "model.experts = 4\nmodel.k = 2\nloss.aux_mode = both\nloss.damex_target = sampled\ntrain.optimizer = adam\ntrain.lr = 0.003\n\
             data.preset = divergent\ndataset.0.experts = 0,1\ndataset.1.experts = 2,3\n",
        )
        .unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back.to_text(), cfg.to_text());
        assert_eq!(back.model, cfg.model);
        assert_eq!(back.model.classes, 8);
        assert_eq!(back.model.loss.damex_target, DamexTarget::Sampled);
        assert_eq!(back.mapping, cfg.mapping);
    }
}
