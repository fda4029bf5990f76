//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored; unknown keys are rejected.
//! `d`, `L` and `T` are accepted as aliases for `dim`, `markov_order` and
//! `targets`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::InputFormat;
use crate::error::{CaserError, Result};
use crate::eval::{ApMode, EvalOptions};
use crate::model::{ComponentMask, HyperParams};
use crate::train::TrainConfig;

/// Parses `key = value` lines. Returns pairs in file order.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| CaserError::Parse {
            line: n + 1,
            msg: format!("expected `key = value`, got `{line}`"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| CaserError::Config(format!("bad value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(CaserError::Config(format!("bad boolean `{v}` for `{key}`"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Applies a hyperparameter key. `heights = all` is stored as `None` and
/// resolved to `1..=L` later. Returns `false` for keys it does not own.
fn apply_hp_key(hp: &mut HyperParams, heights: &mut Option<Vec<usize>>, key: &str, v: &str) -> Result<bool> {
    match key {
        "dim" | "d" => hp.dim = parse_num(key, v)?,
        "markov_order" | "L" => hp.markov_order = parse_num(key, v)?,
        "targets" | "T" => hp.targets = parse_num(key, v)?,
        "heights" => {
            *heights = if v.eq_ignore_ascii_case("all") {
                None
            } else {
                Some(parse_list(key, v)?)
            }
        }
        "filters_per_height" | "n_h" => hp.filters_per_height = parse_num(key, v)?,
        "vertical_filters" | "n_v" => hp.vertical_filters = parse_num(key, v)?,
        "act_conv" => hp.conv_activation = v.parse()?,
        "act_fc" => hp.fc_activation = v.parse()?,
        "act_vertical" => hp.vertical_activation = v.parse()?,
        "dropout" => hp.dropout = parse_num(key, v)?,
        "l2" => hp.l2 = parse_num(key, v)?,
        "lr" | "learning_rate" => hp.learning_rate = parse_num(key, v)?,
        "negatives" => hp.negatives = parse_num(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn write_hp(out: &mut String, hp: &HyperParams, heights: Option<&[usize]>) {
    let _ = writeln!(out, "dim = {}", hp.dim);
    let _ = writeln!(out, "markov_order = {}", hp.markov_order);
    let _ = writeln!(out, "targets = {}", hp.targets);
    let _ = writeln!(out, "heights = {}", heights.map_or_else(|| "all".to_string(), join));
    let _ = writeln!(out, "filters_per_height = {}", hp.filters_per_height);
    let _ = writeln!(out, "vertical_filters = {}", hp.vertical_filters);
    let _ = writeln!(out, "act_conv = {}", hp.conv_activation);
    let _ = writeln!(out, "act_fc = {}", hp.fc_activation);
    let _ = writeln!(out, "act_vertical = {}", hp.vertical_activation);
    let _ = writeln!(out, "dropout = {}", hp.dropout);
    let _ = writeln!(out, "l2 = {}", hp.l2);
    let _ = writeln!(out, "lr = {}", hp.learning_rate);
    let _ = writeln!(out, "negatives = {}", hp.negatives);
}

/// Hyperparameters as config text, with heights written out explicitly.
/// Floats use the shortest round-tripping representation.
pub fn hyperparams_to_text(hp: &HyperParams) -> String {
    let mut s = String::new();
    write_hp(&mut s, hp, Some(&hp.heights));
    s
}

pub fn hyperparams_from_text(text: &str) -> Result<HyperParams> {
    let mut hp = HyperParams::default();
    let mut heights = None;
    for (k, v) in parse_key_values(text)? {
        if !apply_hp_key(&mut hp, &mut heights, &k, &v)? {
            return Err(CaserError::Config(format!("unknown hyperparameter `{k}`")));
        }
    }
    hp.heights = heights.unwrap_or_else(|| (1..=hp.markov_order).collect());
    hp.validate()?;
    Ok(hp)
}

/// Everything a command needs: data, hyperparameters, training and
/// evaluation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub format: InputFormat,
    pub min_feedback: usize,
    pub hp: HyperParams,
    /// `None` means every height `1..=L`.
    pub heights: Option<Vec<usize>>,
    pub epochs: usize,
    /// 0 disables early stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub cutoffs: Vec<usize>,
    pub exclude_seen: bool,
    pub exclude_history: bool,
    pub ap_mode: ApMode,
    pub mask: ComponentMask,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            format: InputFormat::Tsv,
            min_feedback: 5,
            hp: HyperParams::default(),
            heights: None,
            epochs: 30,
            patience: 5,
            batch_size: 100,
            seed: 42,
            cutoffs: vec![1, 5, 10],
            exclude_seen: true,
            exclude_history: false,
            ap_mode: ApMode::Standard,
            mask: ComponentMask::ALL,
            checkpoint: None,
            log: None,
        }
    }
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_key_values(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    /// Applies a single override. Unknown keys are an error.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        if apply_hp_key(&mut self.hp, &mut self.heights, key, v)? {
            return Ok(());
        }
        match key {
            "data" => self.data = Some(PathBuf::from(v)),
            "format" => self.format = v.parse()?,
            "min_feedback" => self.min_feedback = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "patience" => self.patience = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "cutoffs" => self.cutoffs = parse_list(key, v)?,
            "exclude_seen" => self.exclude_seen = parse_bool(key, v)?,
            "exclude_history" => self.exclude_history = parse_bool(key, v)?,
            "ap_mode" => self.ap_mode = v.parse()?,
            "mask" => self.mask = v.parse()?,
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "log" => self.log = Some(PathBuf::from(v)),
            _ => return Err(CaserError::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key=value` and applies it.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CaserError::Config(format!("expected key=value, got `{pair}`")))?;
        self.set(k.trim(), v.trim())
    }

    /// Hyperparameters with heights resolved against `L`.
    pub fn hyperparams(&self) -> Result<HyperParams> {
        let mut hp = self.hp.clone();
        hp.heights = self.heights.clone().unwrap_or_else(|| (1..=hp.markov_order).collect());
        hp.validate()?;
        Ok(hp)
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            cutoffs: self.cutoffs.clone(),
            exclude_seen: self.exclude_seen,
            ap_mode: self.ap_mode,
            ..Default::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            patience: (self.patience > 0).then_some(self.patience),
            seed: self.seed,
            exclude_history: self.exclude_history,
            components: self.mask,
            eval: self.eval_options(),
            validate: true,
        }
    }

    /// The fully resolved configuration, parseable by [`RunConfig::from_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(d) = &self.data {
            let _ = writeln!(s, "data = {}", d.display());
        }
        let _ = writeln!(
            s,
            "format = {}",
            match self.format {
                InputFormat::Tsv => "tsv",
                InputFormat::Csv => "csv",
            }
        );
        let _ = writeln!(s, "min_feedback = {}", self.min_feedback);
        write_hp(&mut s, &self.hp, self.heights.as_deref());
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "patience = {}", self.patience);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "cutoffs = {}", join(&self.cutoffs));
        let _ = writeln!(s, "exclude_seen = {}", self.exclude_seen);
        let _ = writeln!(s, "exclude_history = {}", self.exclude_history);
        let _ = writeln!(s, "ap_mode = {}", self.ap_mode);
        let _ = writeln!(s, "mask = {}", self.mask);
        if let Some(c) = &self.checkpoint {
            let _ = writeln!(s, "checkpoint = {}", c.display());
        }
        if let Some(l) = &self.log {
            let _ = writeln!(s, "log = {}", l.display());
        }
        s
    }
}

/// Expands `key=v1,v2,...` grid axes into every combination of overrides,
/// in row-major order (last axis varies fastest).
pub fn expand_grid(axes: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (key, values) in axes {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    combos
}

/// Parses a grid axis `key=v1,v2`. Heights lists cannot be swept.
pub fn parse_grid_axis(spec: &str) -> Result<(String, Vec<String>)> {
    let (k, v) = spec
        .split_once('=')
        .ok_or_else(|| CaserError::Config(format!("grid axis must be key=v1,v2, got `{spec}`")))?;
    let k = k.trim();
    if k == "heights" {
        return Err(CaserError::Config("`heights` cannot be a grid axis".into()));
    }
    let values: Vec<String> = v
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if values.is_empty() {
        return Err(CaserError::Config(format!("grid axis `{k}` has no values")));
    }
    Ok((k.to_string(), values))
}
