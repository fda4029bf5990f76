//! Python bindings for the `caser` recommender.

use std::collections::{HashMap, HashSet};

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use caser::config::{hyperparams_from_text, hyperparams_to_text};
use caser::data::{
    build_sequences, chronological_split, last_window, load_interactions, IndexMaps, SplitDataset, SplitRatios,
    UserSequence,
};
use caser::eval::{self, ApMode, EvalOptions, EvalTarget};
use caser::gradcheck::{gradient_check_with, toy_hyperparams, GradCheckOptions};
use caser::model::score_all;
use caser::rules::{self, MiningConfig};
use caser::synthetic::{planted_sequences, PlantedConfig};
use caser::train::{train_with_callback, TrainConfig};
use caser::{checkpoint, Activation, CaserError, ComponentMask, ModelParams};

fn to_py(e: CaserError) -> PyErr {
    match e {
        CaserError::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = CaserError>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

/// Network and optimizer hyperparameters.
#[pyclass(name = "HyperParams", from_py_object)]
#[derive(Clone)]
struct PyHyperParams {
    inner: caser::HyperParams,
}

#[pymethods]
impl PyHyperParams {
    #[new]
    #[pyo3(signature = (dim=50, markov_order=5, targets=3, heights=None, filters_per_height=16,
        vertical_filters=4, conv_activation="relu", fc_activation="relu", dropout=0.5, l2=1e-6,
        learning_rate=1e-3, negatives=3))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        dim: usize,
        markov_order: usize,
        targets: usize,
        heights: Option<Vec<usize>>,
        filters_per_height: usize,
        vertical_filters: usize,
        conv_activation: &str,
        fc_activation: &str,
        dropout: f64,
        l2: f64,
        learning_rate: f64,
        negatives: usize,
    ) -> PyResult<Self> {
        let inner = caser::HyperParams {
            dim,
            markov_order,
            targets,
            heights: heights.unwrap_or_else(|| (1..=markov_order).collect()),
            filters_per_height,
            vertical_filters,
            conv_activation: parse::<Activation>(conv_activation)?,
            fc_activation: parse::<Activation>(fc_activation)?,
            dropout,
            l2,
            learning_rate,
            negatives,
            ..Default::default()
        };
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: hyperparams_from_text(text).map_err(to_py)?,
        })
    }

    fn to_text(&self) -> String {
        hyperparams_to_text(&self.inner)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[getter]
    fn markov_order(&self) -> usize {
        self.inner.markov_order
    }

    #[getter]
    fn targets(&self) -> usize {
        self.inner.targets
    }

    #[getter]
    fn heights(&self) -> Vec<usize> {
        self.inner.heights.clone()
    }

    fn __repr__(&self) -> String {
        format!("HyperParams({})", self.to_text().trim().replace('\n', ", "))
    }
}

/// Filtered, indexed and chronologically split interactions.
#[pyclass(name = "Dataset")]
struct PyDataset {
    sequences: Vec<UserSequence>,
    maps: Option<IndexMaps>,
    split: SplitDataset,
}

impl PyDataset {
    fn from_sequences_inner(
        sequences: Vec<UserSequence>,
        maps: Option<IndexMaps>,
        item_count: usize,
    ) -> PyResult<Self> {
        let split =
            chronological_split(&sequences, SplitRatios::default(), sequences.len(), item_count).map_err(to_py)?;
        Ok(Self { sequences, maps, split })
    }
}

#[pymethods]
impl PyDataset {
    /// Reads `user item [rating] timestamp` rows and filters users and
    /// items with fewer than `min_feedback` interactions.
    #[staticmethod]
    #[pyo3(signature = (path, format="tsv", min_feedback=5))]
    fn from_file(path: &str, format: &str, min_feedback: usize) -> PyResult<Self> {
        let rows = load_interactions(path, parse(format)?).map_err(to_py)?;
        let (seqs, maps) = build_sequences(&rows, min_feedback).map_err(to_py)?;
        let items = maps.item_count();
        Self::from_sequences_inner(seqs, Some(maps), items)
    }

    /// One list of item indices (1-based) per user, oldest first.
    #[staticmethod]
    fn from_sequences(sequences: Vec<Vec<u32>>) -> PyResult<Self> {
        let items = sequences.iter().flatten().copied().max().unwrap_or(0) as usize;
        if sequences.iter().flatten().any(|&i| i == 0) {
            return Err(PyValueError::new_err("item 0 is reserved for padding"));
        }
        let seqs = sequences
            .into_iter()
            .enumerate()
            .map(|(u, items)| UserSequence { user: u as u32, items })
            .collect();
        Self::from_sequences_inner(seqs, None, items)
    }

    /// Synthetic data with planted cluster preferences and second-order
    /// transitions.
    #[staticmethod]
    #[pyo3(signature = (users=2000, items=500, sequence_len=30, seed=1, follow_prob=0.8))]
    fn planted(users: usize, items: usize, sequence_len: usize, seed: u64, follow_prob: f64) -> PyResult<Self> {
        let cfg = PlantedConfig {
            users,
            items,
            sequence_len,
            follow_prob,
            ..Default::default()
        };
        let seqs = planted_sequences(&cfg, seed).map_err(to_py)?;
        Self::from_sequences_inner(seqs, None, items)
    }

    #[getter]
    fn user_count(&self) -> usize {
        self.split.user_count
    }

    #[getter]
    fn item_count(&self) -> usize {
        self.split.item_count
    }

    fn sequences(&self) -> Vec<Vec<u32>> {
        self.sequences.iter().map(|s| s.items.clone()).collect()
    }

    /// `(train, validation, test)` item lists of one user.
    fn user_split(&self, user: u32) -> PyResult<(Vec<u32>, Vec<u32>, Vec<u32>)> {
        let u = self
            .split
            .users
            .iter()
            .find(|u| u.user == user)
            .ok_or_else(|| PyValueError::new_err(format!("no split for user {user}")))?;
        Ok((u.train.clone(), u.validation.clone(), u.test.clone()))
    }

    /// Dense index of an external user id (file-loaded data only).
    fn user_index(&self, id: &str) -> Option<u32> {
        self.maps.as_ref().and_then(|m| m.user_index(id))
    }

    /// External id of a dense item index (file-loaded data only).
    fn item_id(&self, item: u32) -> Option<String> {
        self.maps.as_ref().and_then(|m| m.items.get(item as usize).cloned())
    }

    /// Rule-mining statistic: mined rule count per user.
    fn sequential_intensity(&self) -> PyResult<f64> {
        let seqs: Vec<&[u32]> = self.sequences.iter().map(|s| s.items.as_slice()).collect();
        rules::sequential_intensity(&seqs, &MiningConfig::sequential_intensity()).map_err(to_py)
    }
}

fn eval_options(cutoffs: Vec<usize>, ap_mode: &str, exclude_seen: bool) -> PyResult<EvalOptions> {
    Ok(EvalOptions {
        cutoffs,
        exclude_seen,
        ap_mode: parse::<ApMode>(ap_mode)?,
        ..Default::default()
    })
}

/// A trained network together with its hyperparameters.
#[pyclass(name = "Model")]
struct PyModel {
    params: ModelParams,
    hp: caser::HyperParams,
}

#[pymethods]
impl PyModel {
    /// Trains from a seed-determined initialization and returns the model
    /// with the best validation MAP plus the per-epoch log.
    #[staticmethod]
    #[pyo3(signature = (dataset, hp, epochs=30, seed=42, mask="pvh", patience=5, batch_size=100))]
    fn train(
        dataset: &PyDataset,
        hp: &PyHyperParams,
        epochs: usize,
        seed: u64,
        mask: &str,
        patience: usize,
        batch_size: usize,
    ) -> PyResult<(Self, Vec<HashMap<String, f64>>)> {
        let cfg = TrainConfig {
            epochs,
            seed,
            batch_size,
            patience: (patience > 0).then_some(patience),
            components: parse::<ComponentMask>(mask)?,
            ..Default::default()
        };
        let mut log = Vec::new();
        let out = train_with_callback(&dataset.split, &hp.inner, &cfg, |e| {
            log.push(HashMap::from([
                ("epoch".to_string(), e.epoch as f64),
                ("train_loss".to_string(), e.train_loss),
                ("val_map".to_string(), e.val_map),
                ("val_prec1".to_string(), e.val_prec1),
            ]))
        })
        .map_err(to_py)?;
        Ok((
            Self {
                params: out.params,
                hp: hp.inner.clone(),
            },
            log,
        ))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (params, hp) = checkpoint::load(path).map_err(to_py)?;
        Ok(Self { params, hp })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoint::save(path, &self.params, &self.hp).map_err(to_py)
    }

    #[getter]
    fn hyperparams(&self) -> PyHyperParams {
        PyHyperParams { inner: self.hp.clone() }
    }

    /// Precision/recall at each cutoff, MAP and the number of users.
    #[pyo3(signature = (dataset, target="test", cutoffs=vec![1, 5, 10], mask="pvh", ap_mode="standard", exclude_seen=true))]
    fn evaluate(
        &self,
        dataset: &PyDataset,
        target: &str,
        cutoffs: Vec<usize>,
        mask: &str,
        ap_mode: &str,
        exclude_seen: bool,
    ) -> PyResult<HashMap<String, f64>> {
        let target = match target {
            "test" => EvalTarget::Test,
            "validation" => EvalTarget::Validation,
            other => return Err(PyValueError::new_err(format!("unknown target `{other}`"))),
        };
        let opts = eval_options(cutoffs, ap_mode, exclude_seen)?;
        let r = eval::evaluate(&self.params, &self.hp, &dataset.split, target, &opts, parse(mask)?).map_err(to_py)?;
        let mut out = HashMap::from([("map".to_string(), r.map), ("users".to_string(), r.users as f64)]);
        for (i, n) in r.cutoffs.iter().enumerate() {
            out.insert(format!("prec@{n}"), r.precision[i]);
            out.insert(format!("recall@{n}"), r.recall[i]);
        }
        Ok(out)
    }

    /// Scores of every item (index 0 is padding, `-inf`) given a window of
    /// previous items, left-padded to L.
    #[pyo3(signature = (user, history, mask="pvh"))]
    fn scores(&self, user: u32, history: Vec<u32>, mask: &str) -> PyResult<Vec<f64>> {
        let window = last_window(&history, self.hp.markov_order);
        score_all(&self.params, &self.hp, user, &window, parse(mask)?).map_err(to_py)
    }

    /// `(item, score)` pairs, best first.
    #[pyo3(signature = (user, history, n=10, exclude_seen=true, mask="pvh"))]
    fn recommend(
        &self,
        user: u32,
        history: Vec<u32>,
        n: usize,
        exclude_seen: bool,
        mask: &str,
    ) -> PyResult<Vec<(u32, f64)>> {
        let list = eval::recommend_top_n(&self.params, &self.hp, user, &history, n, exclude_seen, parse(mask)?)
            .map_err(to_py)?;
        Ok(list.items.into_iter().zip(list.scores).collect())
    }

    /// Vertical filter weights, one list of L weights per filter.
    fn vertical_filters(&self) -> Vec<Vec<f64>> {
        (0..self.params.vertical.rows())
            .map(|k| self.params.vertical.row(k).to_vec())
            .collect()
    }
}

type RuleTuple = (Vec<u32>, u32, usize, usize, f64);

/// Rules `(antecedent, consequent, skip, support, confidence)`.
#[pyfunction]
#[pyo3(signature = (sequences, max_order=5, max_skip=0, min_support=5, min_confidence=0.5))]
fn mine_rules(
    sequences: Vec<Vec<u32>>,
    max_order: usize,
    max_skip: usize,
    min_support: usize,
    min_confidence: f64,
) -> PyResult<Vec<RuleTuple>> {
    let cfg = MiningConfig {
        max_order,
        max_skip,
        min_support,
        min_confidence,
    };
    Ok(rules::mine_rules(&sequences, &cfg)
        .map_err(to_py)?
        .into_iter()
        .map(|r| (r.antecedent, r.consequent, r.skip, r.support, r.confidence))
        .collect())
}

#[pyfunction]
fn sequential_intensity(sequences: Vec<Vec<u32>>) -> PyResult<f64> {
    rules::sequential_intensity(&sequences, &MiningConfig::sequential_intensity()).map_err(to_py)
}

/// `(precision, recall)` of the first `n` ranked items.
#[pyfunction]
fn precision_recall_at(ranked: Vec<u32>, relevant: HashSet<u32>, n: usize) -> PyResult<(f64, f64)> {
    eval::prec_recall_at(&ranked, &relevant, n).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (ranked, relevant, mode="standard", cutoff=None))]
fn average_precision(ranked: Vec<u32>, relevant: HashSet<u32>, mode: &str, cutoff: Option<usize>) -> PyResult<f64> {
    let cutoff = cutoff.unwrap_or(ranked.len());
    Ok(eval::average_precision(&ranked, &relevant, parse(mode)?, cutoff))
}

/// Per-tensor maximum relative error of the analytic gradient on the toy
/// network.
#[pyfunction]
#[pyo3(signature = (seed=1, dropout=0.0))]
fn gradient_check(seed: u64, dropout: f64) -> PyResult<HashMap<String, f64>> {
    let hp = caser::HyperParams {
        dropout,
        ..toy_hyperparams()
    };
    let r = gradient_check_with(&hp, seed, &GradCheckOptions::default()).map_err(to_py)?;
    Ok(r.tensors
        .iter()
        .map(|t| (t.name.to_string(), t.max_rel_error))
        .collect())
}

#[pymodule]
fn caser_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyHyperParams>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(mine_rules, m)?)?;
    m.add_function(wrap_pyfunction!(sequential_intensity, m)?)?;
    m.add_function(wrap_pyfunction!(precision_recall_at, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    Ok(())
}
