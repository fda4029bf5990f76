//! Finite-difference verification of the analytic gradients.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{sample_negatives, TrainingInstance, PADDING};
use crate::error::Result;
use crate::model::{
    forward_with, init_params, sample_dropout_mask, Activation, ComponentMask, ForwardOptions, ForwardTrace,
    HyperParams, ModelParams, TensorKind,
};
use crate::train::{accumulate_gradient, add_l2_gradient, bce_loss, l2_penalty, GradientSet};

/// Below this magnitude the relative error turns into an absolute one.
pub const RELATIVE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub user_count: usize,
    pub item_count: usize,
    pub instances: usize,
    pub step: f64,
    pub components: ComponentMask,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            user_count: 10,
            item_count: 50,
            instances: 2,
            step: 1e-5,
            components: ComponentMask::ALL,
        }
    }
}

/// `d = 8, L = 5, T = 2`, one filter per height `1..=5`, two vertical filters.
pub fn toy_hyperparams() -> HyperParams {
    HyperParams {
        dim: 8,
        markov_order: 5,
        targets: 2,
        heights: (1..=5).collect(),
        filters_per_height: 1,
        vertical_filters: 2,
        dropout: 0.0,
        l2: 1e-3,
        ..Default::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a max-pool or relu boundary.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub elapsed: Duration,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.tensors
            .iter()
            .all(|t| t.max_rel_error < tolerance && t.checked > 0)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<20}{:>14}{:>9}{:>9}",
            "tensor", "max_rel_err", "checked", "skipped"
        )?;
        for t in &self.tensors {
            writeln!(
                f,
                "{:<20}{:>14.3e}{:>9}{:>9}",
                t.name, t.max_rel_error, t.checked, t.skipped
            )?;
        }
        write!(f, "elapsed {:.2?}", self.elapsed)
    }
}

struct Probe {
    instance: TrainingInstance,
    negatives: Vec<u32>,
    dropout_mask: Option<Vec<f64>>,
}

fn run(params: &ModelParams, hp: &HyperParams, mask: ComponentMask, p: &Probe) -> Result<ForwardTrace> {
    forward_with(
        params,
        hp,
        p.instance.user,
        &p.instance.prev_items,
        ForwardOptions {
            components: mask,
            dropout_mask: p.dropout_mask.clone(),
            ..Default::default()
        },
    )
}

/// Everything piecewise in the network: argmax windows and the active set
/// of every relu.
fn signature(hp: &HyperParams, trace: &ForwardTrace) -> Vec<u8> {
    let mut s = Vec::new();
    for m in &trace.horizontal {
        s.push(m.argmax as u8);
        if hp.conv_activation == Activation::Relu {
            s.extend(m.pre.iter().map(|&x| (x > 0.0) as u8));
        }
    }
    if hp.fc_activation == Activation::Relu {
        s.extend(trace.fc_pre.iter().map(|&x| (x > 0.0) as u8));
    }
    if hp.vertical_activation == Activation::Relu {
        s.extend(trace.vertical_pre.iter().map(|&x| (x > 0.0) as u8));
    }
    s
}

fn objective(params: &ModelParams, hp: &HyperParams, mask: ComponentMask, probes: &[Probe]) -> Result<(f64, Vec<u8>)> {
    let mut total = l2_penalty(params, hp, &mask);
    let mut sig = Vec::new();
    for p in probes {
        let t = run(params, hp, mask, p)?;
        total += bce_loss(params, &t, &p.instance.target_items, &p.negatives)?;
        sig.extend(signature(hp, &t));
    }
    Ok((total, sig))
}

fn is_pinned(kind: TensorKind, row: usize, col: usize) -> bool {
    match kind {
        TensorKind::ItemEmbedding | TensorKind::OutWeight => row == PADDING as usize,
        TensorKind::OutBias => col == PADDING as usize,
        _ => false,
    }
}

pub fn gradient_check(hp: &HyperParams, seed: u64) -> Result<GradCheckReport> {
    gradient_check_with(hp, seed, &GradCheckOptions::default())
}

/// Compares the analytic gradient with central differences on random toy
/// instances, coordinate by coordinate. Coordinates whose `±step`
/// perturbation changes a max-pool argmax or a relu active set are skipped.
/// With dropout enabled each instance keeps one fixed mask.
pub fn gradient_check_with(hp: &HyperParams, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    hp.validate()?;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params(hp, opts.user_count, opts.item_count, &mut rng)?;
    // nonzero biases keep the relu units away from the all-zero corner
    for v in params.fc_bias.as_mut_slice() {
        *v = rng.random_range(-0.1..0.1);
    }
    for v in params.out_bias.as_mut_slice() {
        *v = rng.random_range(-0.1..0.1);
    }
    params.zero_pinned();

    let mask = opts.components;
    let probes: Vec<Probe> = (0..opts.instances)
        .map(|k| {
            let mut prev: Vec<u32> = (0..hp.markov_order)
                .map(|_| rng.random_range(1..=opts.item_count as u32))
                .collect();
            if k % 2 == 1 {
                prev[0] = PADDING;
            }
            let mut targets = Vec::new();
            while targets.len() < hp.targets {
                let t = rng.random_range(1..=opts.item_count as u32);
                if !targets.contains(&t) {
                    targets.push(t);
                }
            }
            let instance = TrainingInstance {
                user: rng.random_range(0..opts.user_count as u32),
                prev_items: prev,
                target_items: targets,
            };
            let negatives = sample_negatives(&instance, hp.negatives, opts.item_count, &mut rng)?;
            let dropout_mask = (hp.dropout > 0.0).then(|| sample_dropout_mask(hp, &mut rng));
            Ok(Probe {
                instance,
                negatives,
                dropout_mask,
            })
        })
        .collect::<Result<_>>()?;

    let mut analytic = GradientSet::zeros_like(&params, hp);
    for p in &probes {
        let t = run(&params, hp, mask, p)?;
        accumulate_gradient(
            &params,
            hp,
            &t,
            &p.instance.target_items,
            &p.negatives,
            1.0,
            &mut analytic,
        )?;
    }
    add_l2_gradient(&params, hp, &mask, &mut analytic);

    let (_, base_sig) = objective(&params, hp, mask, &probes)?;
    let h = opts.step;
    let mut checks: Vec<TensorCheck> = Vec::new();
    let kinds: Vec<TensorKind> = params.tensors().iter().map(|(k, _)| *k).collect();
    for kind in kinds {
        if !kind.trainable_under(&mask) {
            continue;
        }
        let name = kind.group();
        if checks.last().is_none_or(|c| c.name != name) {
            checks.push(TensorCheck {
                name,
                max_rel_error: 0.0,
                checked: 0,
                skipped: 0,
            });
        }
        let (rows, cols) = params.tensor(kind).shape();
        for r in 0..rows {
            for c in 0..cols {
                if is_pinned(kind, r, c) {
                    continue;
                }
                let orig = params.tensor(kind).get(r, c);
                params.tensor_mut(kind).set(r, c, orig + h);
                let (up, sig_up) = objective(&params, hp, mask, &probes)?;
                params.tensor_mut(kind).set(r, c, orig - h);
                let (down, sig_down) = objective(&params, hp, mask, &probes)?;
                params.tensor_mut(kind).set(r, c, orig);

                let entry = checks.last_mut().expect("pushed above");
                if sig_up != base_sig || sig_down != base_sig {
                    entry.skipped += 1;
                    continue;
                }
                let numeric = (up - down) / (2.0 * h);
                let a = analytic.tensor(kind).get(r, c);
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
                entry.max_rel_error = entry.max_rel_error.max(err);
                entry.checked += 1;
            }
        }
    }
    Ok(GradCheckReport {
        tensors: checks,
        elapsed: started.elapsed(),
    })
}
