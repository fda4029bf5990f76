//! Component masking (`Caser-p`, `Caser-vh`, ...), the popularity baseline
//! and history-masking probes.

use rayon::prelude::*;

use crate::data::{SplitDataset, TrainingInstance};
use crate::error::{CaserError, Result};
use crate::eval::{evaluate, evaluate_with, rank_scores, EvalOptions, EvalReport, EvalTarget, RankedList};
pub use crate::model::ComponentMask;
use crate::model::{forward_with, ForwardOptions, HyperParams, ModelParams};
use crate::tensor::dot;
use crate::train::{train, TrainConfig};

/// The seven component subsets, weakest first.
pub const STANDARD_MASKS: [&str; 7] = ["p", "h", "v", "vh", "ph", "pv", "pvh"];

/// Inference scores with disabled components replaced by zeros.
pub fn masked_forward(
    params: &ModelParams,
    hp: &HyperParams,
    instance: &TrainingInstance,
    mask: ComponentMask,
) -> Result<Vec<f64>> {
    Ok(forward_with(
        params,
        hp,
        instance.user,
        &instance.prev_items,
        ForwardOptions {
            components: mask,
            full_scores: true,
            ..Default::default()
        },
    )?
    .scores)
}

/// Matrix-factorization form of the output layer:
/// `y_i = W'_i · [0; P_u] + b'_i`.
pub fn mf_scores(params: &ModelParams, user: u32) -> Vec<f64> {
    let d = params.dim();
    let pu = params.user_embedding.row(user as usize);
    let mut y: Vec<f64> = (0..=params.item_count())
        .map(|i| dot(&params.out_weight.row(i)[d..], pu) + params.out_bias.get(0, i))
        .collect();
    y[0] = f64::NEG_INFINITY;
    y
}

/// Global interaction counts over the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Popularity {
    pub counts: Vec<usize>,
}

impl Popularity {
    pub fn from_split(split: &SplitDataset) -> Self {
        let mut counts = vec![0usize; split.item_count + 1];
        for seq in split.train_sequences() {
            for &i in seq {
                counts[i as usize] += 1;
            }
        }
        Self { counts }
    }

    pub fn scores(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self.counts.iter().map(|&c| c as f64).collect();
        s[0] = f64::NEG_INFINITY;
        s
    }

    pub fn evaluate(&self, split: &SplitDataset, target: EvalTarget, opts: &EvalOptions) -> Result<EvalReport> {
        let scores = self.scores();
        evaluate_with(split, target, opts, |_, _| Ok(scores.clone()))
    }
}

/// One popularity ranking per user, each excluding the user's training and
/// validation items when `exclude_seen` is set.
pub fn pop_baseline(split: &SplitDataset, exclude_seen: bool) -> Result<Vec<RankedList>> {
    if split.users.iter().all(|u| u.train.is_empty()) {
        return Err(CaserError::EmptyDataset("empty training split".into()));
    }
    let scores = Popularity::from_split(split).scores();
    Ok(split
        .users
        .iter()
        .map(|u| {
            let exclude = if exclude_seen {
                u.train_and_validation().into_iter().collect()
            } else {
                Default::default()
            };
            rank_scores(u.user, &scores, &exclude, None)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub mask: ComponentMask,
    pub report: EvalReport,
    pub epochs: usize,
    pub seed: u64,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str = "mask,MAP,Prec@1,epochs,seed";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{},{}",
            self.mask.label(),
            self.report.map,
            self.report.precision_at(1).unwrap_or(f64::NAN),
            self.epochs,
            self.seed
        )
    }
}

/// Trains one model per mask from the same seed and data and evaluates each
/// on the test split. Runs are independent and execute in parallel.
pub fn run_ablation(
    split: &SplitDataset,
    hp: &HyperParams,
    masks: &[ComponentMask],
    cfg: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    for m in masks {
        m.validate()?;
    }
    masks
        .par_iter()
        .map(|&mask| {
            let mut hp = hp.clone();
            if mask.fpmc_like {
                hp.markov_order = 1;
                hp.heights.retain(|&h| h <= 1);
            }
            let run_cfg = TrainConfig {
                components: mask,
                ..cfg.clone()
            };
            let outcome = train(split, &hp, &run_cfg)?;
            let report = evaluate(&outcome.params, &hp, split, EvalTarget::Test, &cfg.eval, mask)?;
            Ok(AblationRow {
                mask,
                report,
                epochs: outcome.log.len(),
                seed: cfg.seed,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{}\n", AblationRow::CSV_HEADER);
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskProbe {
    pub scores: Vec<f64>,
    /// 1-based rank of the probe item among all items.
    pub probe_rank: usize,
    pub baseline_rank: usize,
}

/// Zeroes the embeddings at `positions` (0-based, oldest first) of the
/// L-item window and reports how the probe item's rank moves.
pub fn mask_history_items(
    params: &ModelParams,
    hp: &HyperParams,
    user: u32,
    window: &[u32],
    positions: &[usize],
    probe: u32,
) -> Result<MaskProbe> {
    if let Some(p) = positions.iter().find(|&&p| p >= hp.markov_order) {
        return Err(CaserError::Contract(format!(
            "mask position {p} outside the L-item window"
        )));
    }
    if probe == 0 || probe as usize > params.item_count() {
        return Err(CaserError::Lookup(format!("probe item {probe}")));
    }
    let run = |zeroed: Vec<usize>| {
        forward_with(
            params,
            hp,
            user,
            window,
            ForwardOptions {
                zeroed_positions: zeroed,
                full_scores: true,
                ..Default::default()
            },
        )
        .map(|t| t.scores)
    };
    let base = run(Vec::new())?;
    let scores = run(positions.to_vec())?;
    Ok(MaskProbe {
        probe_rank: rank_of(&scores, probe),
        baseline_rank: rank_of(&base, probe),
        scores,
    })
}

fn rank_of(scores: &[f64], item: u32) -> usize {
    let s = scores[item as usize];
    1 + scores
        .iter()
        .enumerate()
        .skip(1)
        .filter(|&(i, &v)| v > s || (v == s && (i as u32) < item))
        .count()
}
