//! Negative-sampled binary cross-entropy, its analytic gradient, Adam, and
//! the mini-batch training loop.

use std::collections::HashSet;
use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    generate_instances, sample_negatives_excluding, InstancePart, SplitDataset, TrainingInstance, PADDING,
};
use crate::error::{CaserError, Result};
use crate::eval::{evaluate, EvalOptions, EvalTarget};
use crate::model::{
    forward_with, init_params, sample_dropout_mask, ComponentMask, ForwardOptions, ForwardTrace, HyperParams,
    ModelParams,
};
use crate::tensor::axpy;

/// `-log σ(x)`, stable for any `x`.
#[inline]
pub fn neg_log_sigmoid(x: f64) -> f64 {
    (-x).max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Binary cross-entropy over positive and negative logits.
pub fn bce_from_logits(positives: &[f64], negatives: &[f64]) -> f64 {
    positives.iter().map(|&y| neg_log_sigmoid(y)).sum::<f64>()
        + negatives.iter().map(|&y| neg_log_sigmoid(-y)).sum::<f64>()
}

fn check_disjoint(targets: &[u32], negatives: &[u32]) -> Result<()> {
    let t: HashSet<u32> = targets.iter().copied().collect();
    if let Some(j) = negatives.iter().find(|j| t.contains(j)) {
        return Err(CaserError::Contract(format!(
            "item {j} is both a target and a negative"
        )));
    }
    if targets.contains(&PADDING) || negatives.contains(&PADDING) {
        return Err(CaserError::Contract("padding cannot be scored".into()));
    }
    Ok(())
}

/// Data term of the loss for one instance (no L2).
pub fn bce_loss(params: &ModelParams, trace: &ForwardTrace, targets: &[u32], negatives: &[u32]) -> Result<f64> {
    check_disjoint(targets, negatives)?;
    let pos: Vec<f64> = targets.iter().map(|&i| trace.score(params, i)).collect();
    let neg: Vec<f64> = negatives.iter().map(|&j| trace.score(params, j)).collect();
    Ok(bce_from_logits(&pos, &neg))
}

/// `(λ/2) Σ ‖θ‖²` over the tensors trainable under `mask`.
pub fn l2_penalty(params: &ModelParams, hp: &HyperParams, mask: &ComponentMask) -> f64 {
    if hp.l2 == 0.0 {
        return 0.0;
    }
    let ss: f64 = params
        .tensors()
        .iter()
        .filter(|(k, _)| k.trainable_under(mask))
        .map(|(_, m)| m.sum_squares())
        .sum();
    0.5 * hp.l2 * ss
}

/// Instance loss including the L2 term.
pub fn instance_objective(
    params: &ModelParams,
    hp: &HyperParams,
    trace: &ForwardTrace,
    targets: &[u32],
    negatives: &[u32],
) -> Result<f64> {
    Ok(bce_loss(params, trace, targets, negatives)? + l2_penalty(params, hp, &trace.components))
}

/// One tensor per parameter tensor, same shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(pub ModelParams);

impl GradientSet {
    pub fn zeros_like(params: &ModelParams, hp: &HyperParams) -> Self {
        Self(ModelParams::zeros(hp, params.user_count(), params.item_count()))
    }

    pub fn reset(&mut self) {
        for (_, m) in self.0.tensors_mut() {
            m.fill(0.0);
        }
    }
}

impl std::ops::Deref for GradientSet {
    type Target = ModelParams;
    fn deref(&self) -> &ModelParams {
        &self.0
    }
}

impl std::ops::DerefMut for GradientSet {
    fn deref_mut(&mut self) -> &mut ModelParams {
        &mut self.0
    }
}

/// Adds `scale · ∂(bce)/∂θ` for one instance into `grads`. Only the rows
/// the instance touches are written for the embedding and output tensors.
pub fn accumulate_gradient(
    params: &ModelParams,
    hp: &HyperParams,
    trace: &ForwardTrace,
    targets: &[u32],
    negatives: &[u32],
    scale: f64,
    grads: &mut GradientSet,
) -> Result<()> {
    check_disjoint(targets, negatives)?;
    let mask = trace.components;
    let d = hp.dim;
    if trace.hidden.len() != 2 * d || trace.embedded.rows() != hp.markov_order {
        return Err(CaserError::Contract("trace does not match hyperparameters".into()));
    }
    if mask.horizontal && !mask.fpmc_like && trace.horizontal.len() != params.horizontal.len() {
        return Err(CaserError::Contract(
            "trace horizontal maps do not match parameters".into(),
        ));
    }

    // output layer
    let mut d_hidden = vec![0.0; 2 * d];
    let logit_grads = targets
        .iter()
        .map(|&i| (i, crate::model::sigmoid(trace.score(params, i)) - 1.0))
        .chain(
            negatives
                .iter()
                .map(|&j| (j, crate::model::sigmoid(trace.score(params, j)))),
        );
    for (item, g) in logit_grads {
        let g = g * scale;
        let row = item as usize;
        axpy(g, &trace.hidden, grads.out_weight.row_mut(row));
        if !mask.fpmc_like {
            grads.out_bias.add_at(0, row, g);
        }
        axpy(g, params.out_weight.row(row), &mut d_hidden);
    }
    let (d_z, d_user) = d_hidden.split_at(d);
    if mask.personalization {
        axpy(1.0, d_user, grads.user_embedding.row_mut(trace.user as usize));
    }

    let mut d_embedded = vec![0.0; hp.markov_order * d];
    if mask.fpmc_like {
        let last = hp.markov_order - 1;
        d_embedded[last * d..].copy_from_slice(d_z);
    } else if mask.uses_sequence_network() {
        // fully-connected layer
        let d_pre: Vec<f64> = d_z
            .iter()
            .zip(&trace.fc_pre)
            .zip(&trace.z)
            .map(|((g, &pre), &post)| g * hp.fc_activation.derivative(pre, post))
            .collect();
        let x = trace.fc_input();
        let x_in: Vec<f64> = match &trace.dropout_mask {
            Some(m) => x.iter().zip(m).map(|(a, b)| a * b).collect(),
            None => x,
        };
        let mut d_x = vec![0.0; hp.fc_input_dim()];
        for (r, &g) in d_pre.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads.fc_bias.add_at(0, r, g);
            axpy(g, &x_in, grads.fc_weight.row_mut(r));
            axpy(g, params.fc_weight.row(r), &mut d_x);
        }
        if let Some(m) = &trace.dropout_mask {
            d_x.iter_mut().zip(m).for_each(|(g, k)| *g *= k);
        }
        let (d_pooled, d_vertical) = d_x.split_at(hp.horizontal_filters());

        if mask.horizontal {
            for (k, (map, &g)) in trace.horizontal.iter().zip(d_pooled).enumerate() {
                let i = map.argmax;
                let g = g * hp.conv_activation.derivative(map.pre[i], map.values[i]);
                if g == 0.0 {
                    continue;
                }
                let filter = &params.horizontal[k];
                for r in 0..map.height {
                    axpy(g, trace.embedded.row(i + r), grads.horizontal[k].row_mut(r));
                    axpy(g, filter.row(r), &mut d_embedded[(i + r) * d..(i + r + 1) * d]);
                }
            }
        }
        if mask.vertical {
            for k in 0..hp.vertical_filters {
                let span = k * d..(k + 1) * d;
                let g_k: Vec<f64> = d_vertical[span.clone()]
                    .iter()
                    .zip(&trace.vertical_pre[span.clone()])
                    .zip(&trace.vertical[span])
                    .map(|((g, &pre), &post)| g * hp.vertical_activation.derivative(pre, post))
                    .collect();
                for l in 0..hp.markov_order {
                    let e = trace.embedded.row(l);
                    grads.vertical.add_at(k, l, crate::tensor::dot(&g_k, e));
                    axpy(params.vertical.get(k, l), &g_k, &mut d_embedded[l * d..(l + 1) * d]);
                }
            }
        }
    }

    for (l, &item) in trace.prev_items.iter().enumerate() {
        // masked history rows are constants, not embeddings
        if item == PADDING || trace.zeroed_positions.contains(&l) {
            continue;
        }
        axpy(
            1.0,
            &d_embedded[l * d..(l + 1) * d],
            grads.item_embedding.row_mut(item as usize),
        );
    }
    Ok(())
}

/// Adds the L2 gradient `λ θ` for every trainable tensor.
pub fn add_l2_gradient(params: &ModelParams, hp: &HyperParams, mask: &ComponentMask, grads: &mut GradientSet) {
    if hp.l2 == 0.0 {
        return;
    }
    for ((kind, g), (_, p)) in grads.0.tensors_mut().into_iter().zip(params.tensors()) {
        if kind.trainable_under(mask) {
            axpy(hp.l2, p.as_slice(), g.as_mut_slice());
        }
    }
    grads.0.zero_pinned();
}

/// Full gradient of [`instance_objective`] for one instance.
pub fn backward(
    params: &ModelParams,
    hp: &HyperParams,
    trace: &ForwardTrace,
    targets: &[u32],
    negatives: &[u32],
) -> Result<GradientSet> {
    let mut grads = GradientSet::zeros_like(params, hp);
    accumulate_gradient(params, hp, trace, targets, negatives, 1.0, &mut grads)?;
    add_l2_gradient(params, hp, &trace.components, &mut grads);
    Ok(grads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: ModelParams,
    pub second_moment: ModelParams,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams, hp: &HyperParams) -> Self {
        let zeros = ModelParams::zeros(hp, params.user_count(), params.item_count());
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every tensor trainable under `mask`.
/// Padding rows are re-zeroed afterwards.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &GradientSet,
    state: &mut AdamState,
    lr: f64,
    mask: &ComponentMask,
) -> Result<()> {
    if let Some((kind, _)) = grads.tensors().into_iter().find(|(_, g)| !g.is_finite()) {
        return Err(CaserError::NonFinite(kind.group().into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.first_moment.tensors_mut())
        .zip(state.second_moment.tensors_mut());
    for ((((kind, p), (_, g)), (_, m)), (_, v)) in tensors {
        if !kind.trainable_under(mask) {
            continue;
        }
        let p = p.as_mut_slice();
        let g = g.as_slice();
        let m = m.as_mut_slice();
        let v = v.as_mut_slice();
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    params.zero_pinned();
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many epochs without a validation MAP improvement.
    pub patience: Option<usize>,
    pub seed: u64,
    /// Also exclude the user's whole training sequence from negatives.
    pub exclude_history: bool,
    pub components: ComponentMask,
    pub eval: EvalOptions,
    /// Evaluate on the validation split after each epoch.
    pub validate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 100,
            patience: Some(5),
            seed: 42,
            exclude_history: false,
            components: ComponentMask::ALL,
            eval: EvalOptions::default(),
            validate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_map: f64,
    pub val_prec1: f64,
    pub wall_ms: u128,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_MAP,val_Prec@1,wall_ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{}",
            self.epoch, self.train_loss, self.val_map, self.val_prec1, self.wall_ms
        )
    }
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch {:>3}  loss {:.4}  val MAP {:.4}  val Prec@1 {:.4}  ({} ms)",
            self.epoch, self.train_loss, self.val_map, self.val_prec1, self.wall_ms
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation MAP (the last
    /// epoch when validation is off or empty).
    pub params: ModelParams,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

const INIT_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;

/// Trains from a seed-determined initialization.
pub fn train(split: &SplitDataset, hp: &HyperParams, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_callback(split, hp, cfg, |_| {})
}

pub fn train_with_callback<F: FnMut(&EpochLog)>(
    split: &SplitDataset,
    hp: &HyperParams,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome> {
    hp.validate()?;
    cfg.components.validate()?;
    if cfg.batch_size == 0 {
        return Err(CaserError::Config("batch size must be >= 1".into()));
    }
    if cfg.components.fpmc_like && hp.markov_order != 1 {
        return Err(CaserError::Config("fpmc_like requires markov_order = 1".into()));
    }
    let mut instances = generate_instances(split, hp.markov_order, hp.targets, InstancePart::Train);
    if instances.is_empty() {
        return Err(CaserError::EmptyDataset("no training instances".into()));
    }
    let histories: Vec<Vec<u32>> = if cfg.exclude_history {
        let mut h = vec![Vec::new(); split.user_count];
        for u in &split.users {
            h[u.user as usize] = u.train.clone();
        }
        h
    } else {
        Vec::new()
    };

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(INIT_STREAM);
    let mut params = init_params(hp, split.user_count, split.item_count, &mut init_rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(TRAIN_STREAM);

    let mut adam = AdamState::new(&params, hp);
    let mut grads = GradientSet::zeros_like(&params, hp);
    let mask = cfg.components;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut since_best = 0usize;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        instances.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in instances.chunks(cfg.batch_size) {
            grads.reset();
            let scale = 1.0 / batch.len() as f64;
            for inst in batch {
                let extra = histories.get(inst.user as usize).map_or(&[][..], Vec::as_slice);
                let negatives = sample_negatives_excluding(inst, hp.negatives, split.item_count, extra, &mut rng)?;
                let dropout_mask = (hp.dropout > 0.0).then(|| sample_dropout_mask(hp, &mut rng));
                let trace = forward_with(
                    &params,
                    hp,
                    inst.user,
                    &inst.prev_items,
                    ForwardOptions {
                        components: mask,
                        dropout_mask,
                        ..Default::default()
                    },
                )?;
                loss_sum += bce_loss(&params, &trace, &inst.target_items, &negatives)?;
                accumulate_gradient(&params, hp, &trace, &inst.target_items, &negatives, scale, &mut grads)?;
            }
            add_l2_gradient(&params, hp, &mask, &mut grads);
            adam_step(&mut params, &grads, &mut adam, hp.learning_rate, &mask)?;
        }
        let train_loss = loss_sum / instances.len() as f64;

        let (val_map, val_prec1, val_users) = if cfg.validate {
            let report = evaluate(&params, hp, split, EvalTarget::Validation, &cfg.eval, mask)?;
            (
                report.map,
                report.precision.first().copied().unwrap_or(0.0),
                report.users,
            )
        } else {
            (0.0, 0.0, 0)
        };
        let entry = EpochLog {
            epoch,
            train_loss,
            val_map,
            val_prec1,
            wall_ms: started.elapsed().as_millis(),
        };
        on_epoch(&entry);
        log.push(entry);

        if val_users == 0 {
            best = Some((f64::NEG_INFINITY, epoch, params.clone()));
            continue;
        }
        match &best {
            Some((score, _, _)) if val_map <= *score => since_best += 1,
            _ => {
                best = Some((val_map, epoch, params.clone()));
                since_best = 0;
            }
        }
        if cfg.patience.is_some_and(|p| since_best >= p) {
            break;
        }
    }
    let (_, best_epoch, params) = best.unwrap_or((0.0, 0, params));
    Ok(TrainOutcome {
        params,
        best_epoch,
        log,
    })
}

/// Mean data loss over `instances` with fixed negatives, inference mode.
pub fn dataset_loss(
    params: &ModelParams,
    hp: &HyperParams,
    instances: &[(TrainingInstance, Vec<u32>)],
    mask: ComponentMask,
) -> Result<f64> {
    let mut total = 0.0;
    for (inst, neg) in instances {
        let trace = forward_with(
            params,
            hp,
            inst.user,
            &inst.prev_items,
            ForwardOptions {
                components: mask,
                ..Default::default()
            },
        )?;
        total += bce_loss(params, &trace, &inst.target_items, neg)?;
    }
    Ok(total / instances.len().max(1) as f64)
}
