//! Parameters and forward pass of the convolutional sequence embedding
//! network: embedding look-up, horizontal and vertical convolutions, a
//! fully-connected layer producing `z`, and the output layer over items.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::data::{TrainingInstance, PADDING};
use crate::error::{CaserError, Result};
use crate::tensor::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Identity,
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Self::Identity => x,
            Self::Sigmoid => sigmoid(x),
            Self::Tanh => x.tanh(),
            Self::Relu => x.max(0.0),
        }
    }

    /// Derivative at pre-activation `pre`, given `post = apply(pre)`.
    /// The relu subgradient at 0 is 0.
    #[inline]
    pub fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Self::Identity => 1.0,
            Self::Sigmoid => post * (1.0 - post),
            Self::Tanh => 1.0 - post * post,
            Self::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Sigmoid => "sigmoid",
            Self::Tanh => "tanh",
            Self::Relu => "relu",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = CaserError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" | "linear" | "none" => Ok(Self::Identity),
            "sigmoid" => Ok(Self::Sigmoid),
            "tanh" => Ok(Self::Tanh),
            "relu" => Ok(Self::Relu),
            other => Err(CaserError::Config(format!("unknown activation `{other}`"))),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    /// Latent dimension `d`.
    pub dim: usize,
    /// Markov order `L`: number of previous items fed to the network.
    pub markov_order: usize,
    /// Number of future items `T` used as positives per instance.
    pub targets: usize,
    /// Horizontal filter heights; each height gets `filters_per_height` filters.
    pub heights: Vec<usize>,
    pub filters_per_height: usize,
    pub vertical_filters: usize,
    pub conv_activation: Activation,
    pub fc_activation: Activation,
    /// Applied to the vertical convolution output. Identity by default.
    pub vertical_activation: Activation,
    pub dropout: f64,
    pub l2: f64,
    pub learning_rate: f64,
    /// Negative samples per target item.
    pub negatives: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            dim: 50,
            markov_order: 5,
            targets: 3,
            heights: (1..=5).collect(),
            filters_per_height: 16,
            vertical_filters: 4,
            conv_activation: Activation::Relu,
            fc_activation: Activation::Relu,
            vertical_activation: Activation::Identity,
            dropout: 0.5,
            l2: 1e-6,
            learning_rate: 1e-3,
            negatives: 3,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CaserError::Config(m));
        if self.dim == 0 {
            return fail("dim must be >= 1".into());
        }
        if self.markov_order == 0 || self.targets == 0 {
            return fail("markov_order and targets must be >= 1".into());
        }
        if let Some(h) = self.heights.iter().find(|&&h| h == 0 || h > self.markov_order) {
            return fail(format!("filter height {h} outside 1..={}", self.markov_order));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.l2 < 0.0 || !self.l2.is_finite() {
            return fail("l2 must be finite and >= 0".into());
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return fail("learning rate must be finite and >= 0".into());
        }
        if self.negatives == 0 {
            return fail("negatives must be >= 1".into());
        }
        Ok(())
    }

    /// Total horizontal filters `n`.
    pub fn horizontal_filters(&self) -> usize {
        self.heights.len() * self.filters_per_height
    }

    /// Height of each horizontal filter, in parameter order.
    pub fn filter_heights(&self) -> impl Iterator<Item = usize> + '_ {
        self.heights
            .iter()
            .flat_map(move |&h| std::iter::repeat_n(h, self.filters_per_height))
    }

    /// Width of the fully-connected input `[o; õ]`.
    pub fn fc_input_dim(&self) -> usize {
        self.horizontal_filters() + self.dim * self.vertical_filters
    }
}

/// Which parts of the network contribute to the output layer. Disabled
/// parts are replaced by zero vectors and their parameters are frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ComponentMask {
    pub personalization: bool,
    pub horizontal: bool,
    pub vertical: bool,
    /// Copy the last item's embedding straight into `z` (no convolution,
    /// no fully-connected layer, no output bias).
    pub fpmc_like: bool,
}

impl Default for ComponentMask {
    fn default() -> Self {
        Self::ALL
    }
}

impl ComponentMask {
    pub const ALL: Self = Self {
        personalization: true,
        horizontal: true,
        vertical: true,
        fpmc_like: false,
    };

    pub const FPMC_LIKE: Self = Self {
        personalization: true,
        horizontal: false,
        vertical: false,
        fpmc_like: true,
    };

    pub fn new(personalization: bool, horizontal: bool, vertical: bool) -> Result<Self> {
        let m = Self {
            personalization,
            horizontal,
            vertical,
            fpmc_like: false,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fpmc_like && (self.horizontal || self.vertical) {
            return Err(CaserError::Config(
                "fpmc_like replaces the convolutional layers and cannot be combined with them".into(),
            ));
        }
        if !(self.personalization || self.horizontal || self.vertical || self.fpmc_like) {
            return Err(CaserError::Config("at least one component must be enabled".into()));
        }
        Ok(())
    }

    /// True when `z` is computed by the convolutional/FC path.
    pub fn uses_sequence_network(&self) -> bool {
        !self.fpmc_like && (self.horizontal || self.vertical)
    }

    /// Label in the `Caser-x` style: `p`, `vh`, `pvh`, ..., or `fpmc`.
    pub fn label(&self) -> String {
        if self.fpmc_like {
            return "fpmc".into();
        }
        let mut s = String::new();
        if self.personalization {
            s.push('p');
        }
        if self.vertical {
            s.push('v');
        }
        if self.horizontal {
            s.push('h');
        }
        s
    }
}

impl FromStr for ComponentMask {
    type Err = CaserError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let s = s.strip_prefix("caser-").unwrap_or(&s);
        if s == "fpmc" || s == "fpmc_like" {
            return Ok(Self::FPMC_LIKE);
        }
        let mut m = Self {
            personalization: false,
            horizontal: false,
            vertical: false,
            fpmc_like: false,
        };
        for c in s.chars() {
            let slot = match c {
                'p' => &mut m.personalization,
                'h' => &mut m.horizontal,
                'v' => &mut m.vertical,
                _ => return Err(CaserError::Config(format!("bad component mask `{s}`"))),
            };
            if *slot {
                return Err(CaserError::Config(format!("repeated component in `{s}`")));
            }
            *slot = true;
        }
        m.validate()?;
        Ok(m)
    }
}

impl fmt::Display for ComponentMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TensorKind {
    UserEmbedding,
    ItemEmbedding,
    Horizontal(usize),
    Vertical,
    FcWeight,
    FcBias,
    OutWeight,
    OutBias,
}

impl TensorKind {
    /// Group name; all horizontal filters share one group.
    pub fn group(self) -> &'static str {
        match self {
            Self::UserEmbedding => "user_embedding",
            Self::ItemEmbedding => "item_embedding",
            Self::Horizontal(_) => "horizontal_filters",
            Self::Vertical => "vertical_filters",
            Self::FcWeight => "fc_weight",
            Self::FcBias => "fc_bias",
            Self::OutWeight => "output_weight",
            Self::OutBias => "output_bias",
        }
    }

    /// Whether training under `mask` may update this tensor.
    pub fn trainable_under(self, mask: &ComponentMask) -> bool {
        match self {
            Self::UserEmbedding => mask.personalization,
            Self::ItemEmbedding => mask.uses_sequence_network() || mask.fpmc_like,
            Self::Horizontal(_) => mask.horizontal && !mask.fpmc_like,
            Self::Vertical => mask.vertical && !mask.fpmc_like,
            Self::FcWeight | Self::FcBias => mask.uses_sequence_network(),
            Self::OutWeight => true,
            Self::OutBias => !mask.fpmc_like,
        }
    }
}

/// Every learnable tensor. Biases are stored as `1 x k` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `|U| x d`
    pub user_embedding: Matrix,
    /// `(|I| + 1) x d`, row 0 is padding and pinned to zero.
    pub item_embedding: Matrix,
    /// `n` filters, filter `k` is `h_k x d`.
    pub horizontal: Vec<Matrix>,
    /// `ñ x L`, one row per vertical filter.
    pub vertical: Matrix,
    /// `d x (n + d ñ)`
    pub fc_weight: Matrix,
    /// `1 x d`
    pub fc_bias: Matrix,
    /// `(|I| + 1) x 2d`, row 0 pinned to zero.
    pub out_weight: Matrix,
    /// `1 x (|I| + 1)`
    pub out_bias: Matrix,
}

impl ModelParams {
    pub fn zeros(hp: &HyperParams, user_count: usize, item_count: usize) -> Self {
        let d = hp.dim;
        Self {
            user_embedding: Matrix::zeros(user_count, d),
            item_embedding: Matrix::zeros(item_count + 1, d),
            horizontal: hp.filter_heights().map(|h| Matrix::zeros(h, d)).collect(),
            vertical: Matrix::zeros(hp.vertical_filters, hp.markov_order),
            fc_weight: Matrix::zeros(d, hp.fc_input_dim()),
            fc_bias: Matrix::zeros(1, d),
            out_weight: Matrix::zeros(item_count + 1, 2 * d),
            out_bias: Matrix::zeros(1, item_count + 1),
        }
    }

    pub fn user_count(&self) -> usize {
        self.user_embedding.rows()
    }

    pub fn item_count(&self) -> usize {
        self.item_embedding.rows() - 1
    }

    pub fn dim(&self) -> usize {
        self.item_embedding.cols()
    }

    pub fn tensors(&self) -> Vec<(TensorKind, &Matrix)> {
        let mut v = vec![
            (TensorKind::UserEmbedding, &self.user_embedding),
            (TensorKind::ItemEmbedding, &self.item_embedding),
        ];
        v.extend(
            self.horizontal
                .iter()
                .enumerate()
                .map(|(k, m)| (TensorKind::Horizontal(k), m)),
        );
        v.extend([
            (TensorKind::Vertical, &self.vertical),
            (TensorKind::FcWeight, &self.fc_weight),
            (TensorKind::FcBias, &self.fc_bias),
            (TensorKind::OutWeight, &self.out_weight),
            (TensorKind::OutBias, &self.out_bias),
        ]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(TensorKind, &mut Matrix)> {
        let mut v = vec![
            (TensorKind::UserEmbedding, &mut self.user_embedding),
            (TensorKind::ItemEmbedding, &mut self.item_embedding),
        ];
        v.extend(
            self.horizontal
                .iter_mut()
                .enumerate()
                .map(|(k, m)| (TensorKind::Horizontal(k), m)),
        );
        v.extend([
            (TensorKind::Vertical, &mut self.vertical),
            (TensorKind::FcWeight, &mut self.fc_weight),
            (TensorKind::FcBias, &mut self.fc_bias),
            (TensorKind::OutWeight, &mut self.out_weight),
            (TensorKind::OutBias, &mut self.out_bias),
        ]);
        v
    }

    pub fn tensor(&self, kind: TensorKind) -> &Matrix {
        match kind {
            TensorKind::UserEmbedding => &self.user_embedding,
            TensorKind::ItemEmbedding => &self.item_embedding,
            TensorKind::Horizontal(k) => &self.horizontal[k],
            TensorKind::Vertical => &self.vertical,
            TensorKind::FcWeight => &self.fc_weight,
            TensorKind::FcBias => &self.fc_bias,
            TensorKind::OutWeight => &self.out_weight,
            TensorKind::OutBias => &self.out_bias,
        }
    }

    pub fn tensor_mut(&mut self, kind: TensorKind) -> &mut Matrix {
        match kind {
            TensorKind::UserEmbedding => &mut self.user_embedding,
            TensorKind::ItemEmbedding => &mut self.item_embedding,
            TensorKind::Horizontal(k) => &mut self.horizontal[k],
            TensorKind::Vertical => &mut self.vertical,
            TensorKind::FcWeight => &mut self.fc_weight,
            TensorKind::FcBias => &mut self.fc_bias,
            TensorKind::OutWeight => &mut self.out_weight,
            TensorKind::OutBias => &mut self.out_bias,
        }
    }

    /// Zero the padding rows (item embedding row 0, output row 0 and its bias).
    pub fn zero_pinned(&mut self) {
        self.item_embedding.row_mut(PADDING as usize).fill(0.0);
        self.out_weight.row_mut(PADDING as usize).fill(0.0);
        self.out_bias.set(0, PADDING as usize, 0.0);
    }

    pub fn sum_squares(&self) -> f64 {
        self.tensors().iter().map(|(_, m)| m.sum_squares()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    /// Checks tensor shapes against `hp`.
    pub fn check_shapes(&self, hp: &HyperParams) -> Result<()> {
        let expect = Self::zeros(hp, self.user_count(), self.item_count());
        for ((kind, a), (_, b)) in self.tensors().iter().zip(expect.tensors()) {
            if a.shape() != b.shape() {
                return Err(CaserError::ShapeMismatch(format!(
                    "{:?}: have {:?}, configuration expects {:?}",
                    kind,
                    a.shape(),
                    b.shape()
                )));
            }
        }
        if self.horizontal.len() != expect.horizontal.len() {
            return Err(CaserError::ShapeMismatch(format!(
                "{} horizontal filters, configuration expects {}",
                self.horizontal.len(),
                expect.horizontal.len()
            )));
        }
        Ok(())
    }
}

/// Glorot-uniform weights, zero biases, zero padding rows.
pub fn init_params<R: Rng + ?Sized>(
    hp: &HyperParams,
    user_count: usize,
    item_count: usize,
    rng: &mut R,
) -> Result<ModelParams> {
    hp.validate()?;
    if user_count == 0 || item_count == 0 {
        return Err(CaserError::EmptyDataset("no users or no items".into()));
    }
    let d = hp.dim;
    let n_in = hp.fc_input_dim();
    let mut params = ModelParams {
        user_embedding: Matrix::glorot(user_count, d, user_count, d, rng),
        item_embedding: Matrix::glorot(item_count + 1, d, item_count, d, rng),
        horizontal: hp
            .filter_heights()
            .map(|h| Matrix::glorot(h, d, h * d, hp.filters_per_height, rng))
            .collect(),
        vertical: Matrix::glorot(
            hp.vertical_filters,
            hp.markov_order,
            hp.markov_order,
            hp.vertical_filters,
            rng,
        ),
        fc_weight: Matrix::glorot(d, n_in, n_in, d, rng),
        fc_bias: Matrix::zeros(1, d),
        out_weight: Matrix::glorot(item_count + 1, 2 * d, 2 * d, item_count, rng),
        out_bias: Matrix::zeros(1, item_count + 1),
    };
    params.zero_pinned();
    Ok(params)
}

/// Stacks the embeddings of `prev_items` (oldest in row 0) and looks up
/// the user embedding.
pub fn embed_lookup(params: &ModelParams, prev_items: &[u32], user: u32) -> Result<(Matrix, Vec<f64>)> {
    if user as usize >= params.user_count() {
        return Err(CaserError::Lookup(format!(
            "user {user} >= user count {}",
            params.user_count()
        )));
    }
    let d = params.dim();
    let mut e = Matrix::zeros(prev_items.len(), d);
    for (r, &item) in prev_items.iter().enumerate() {
        if item as usize > params.item_count() {
            return Err(CaserError::Lookup(format!(
                "item {item} > item count {}",
                params.item_count()
            )));
        }
        e.row_mut(r).copy_from_slice(params.item_embedding.row(item as usize));
    }
    Ok((e, params.user_embedding.row(user as usize).to_vec()))
}

/// One horizontal filter's convolution over `E` and its max-pooled value.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizontalMap {
    pub height: usize,
    /// Pre-activation inner products, one per window position.
    pub pre: Vec<f64>,
    /// Activated values `c^k`.
    pub values: Vec<f64>,
    /// Window of the pooled maximum (smallest index on ties).
    pub argmax: usize,
}

impl HorizontalMap {
    pub fn pooled(&self) -> f64 {
        self.values[self.argmax]
    }
}

/// Slides every horizontal filter down the rows of `embedded`, activates,
/// and max-pools each filter to one value.
pub fn horizontal_conv(embedded: &Matrix, filters: &[Matrix], act: Activation) -> (Vec<f64>, Vec<HorizontalMap>) {
    let l = embedded.rows();
    let maps: Vec<HorizontalMap> = filters
        .iter()
        .map(|f| {
            let h = f.rows();
            assert!(h >= 1 && h <= l, "filter height {h} exceeds L={l}");
            let pre: Vec<f64> = (0..=l - h)
                .map(|i| (0..h).map(|r| dot(embedded.row(i + r), f.row(r))).sum())
                .collect();
            let values: Vec<f64> = pre.iter().map(|&p| act.apply(p)).collect();
            let mut argmax = 0;
            for (i, &v) in values.iter().enumerate().skip(1) {
                if v > values[argmax] {
                    argmax = i;
                }
            }
            HorizontalMap {
                height: h,
                pre,
                values,
                argmax,
            }
        })
        .collect();
    (maps.iter().map(HorizontalMap::pooled).collect(), maps)
}

/// Each vertical filter is a weight per row of `embedded`; its output is the
/// weighted sum of rows. Outputs are concatenated filter by filter.
pub fn vertical_conv(embedded: &Matrix, vertical: &Matrix) -> Vec<f64> {
    let (l, d) = embedded.shape();
    assert_eq!(vertical.cols(), l, "vertical filters must have exactly L weights");
    let mut out = vec![0.0; vertical.rows() * d];
    for k in 0..vertical.rows() {
        let dst = &mut out[k * d..(k + 1) * d];
        for r in 0..l {
            let w = vertical.get(k, r);
            for (o, e) in dst.iter_mut().zip(embedded.row(r)) {
                *o += w * e;
            }
        }
    }
    out
}

/// `z = act(W (x ⊙ mask) + b)`; returns `(pre_activation, z)`.
pub fn fc_embed(
    input: &[f64],
    weight: &Matrix,
    bias: &[f64],
    act: Activation,
    dropout_mask: Option<&[f64]>,
) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(weight.cols(), input.len(), "fc input width");
    let masked: Vec<f64>;
    let x = match dropout_mask {
        Some(m) => {
            masked = input.iter().zip(m).map(|(a, b)| a * b).collect();
            &masked
        }
        None => input,
    };
    let pre: Vec<f64> = (0..weight.rows()).map(|r| dot(weight.row(r), x) + bias[r]).collect();
    let z = pre.iter().map(|&p| act.apply(p)).collect();
    (pre, z)
}

/// Scores every item: `y_i = W'_i · [z; P_u] + b'_i`. The padding slot is
/// `-inf` so it can never be ranked.
pub fn output_scores(z: &[f64], user_vec: &[f64], out_weight: &Matrix, out_bias: &Matrix) -> Vec<f64> {
    let hidden: Vec<f64> = z.iter().chain(user_vec).copied().collect();
    let mut y: Vec<f64> = (0..out_weight.rows())
        .map(|i| dot(out_weight.row(i), &hidden) + out_bias.get(0, i))
        .collect();
    y[PADDING as usize] = f64::NEG_INFINITY;
    y
}

/// Inverted-dropout mask over the FC input: kept units are scaled by
/// `1 / (1 - rate)`.
pub fn sample_dropout_mask<R: Rng + ?Sized>(hp: &HyperParams, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 - hp.dropout;
    (0..hp.fc_input_dim())
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Knobs for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub components: ComponentMask,
    /// Inverted-dropout mask over `[o; õ]`; `None` means inference.
    pub dropout_mask: Option<Vec<f64>>,
    /// History rows (0-based) whose embeddings are replaced with zeros.
    pub zeroed_positions: Vec<usize>,
    /// Compute the full score vector `y`.
    pub full_scores: bool,
}

/// All intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub user: u32,
    pub prev_items: Vec<u32>,
    pub components: ComponentMask,
    /// `E`, L x d, after any history masking.
    pub embedded: Matrix,
    /// History rows replaced with zeros.
    pub zeroed_positions: Vec<usize>,
    /// Empty when the horizontal layer is disabled.
    pub horizontal: Vec<HorizontalMap>,
    /// `o`; zeros when disabled.
    pub pooled: Vec<f64>,
    /// Vertical convolution before its activation; empty when disabled.
    pub vertical_pre: Vec<f64>,
    /// `õ`; zeros when disabled.
    pub vertical: Vec<f64>,
    pub dropout_mask: Option<Vec<f64>>,
    /// FC pre-activation; empty when the FC layer is bypassed.
    pub fc_pre: Vec<f64>,
    pub z: Vec<f64>,
    /// `[z; P_u]` with `P_u` zeroed when personalization is off.
    pub hidden: Vec<f64>,
    /// Full scores `y` (length `|I| + 1`); empty unless requested.
    pub scores: Vec<f64>,
}

impl ForwardTrace {
    /// Logit of a single item.
    pub fn score(&self, params: &ModelParams, item: u32) -> f64 {
        if item == PADDING {
            return f64::NEG_INFINITY;
        }
        let bias = if self.components.fpmc_like {
            0.0
        } else {
            params.out_bias.get(0, item as usize)
        };
        dot(params.out_weight.row(item as usize), &self.hidden) + bias
    }

    /// `[o; õ]` before dropout.
    pub fn fc_input(&self) -> Vec<f64> {
        self.pooled.iter().chain(&self.vertical).copied().collect()
    }
}

/// Forward pass with explicit options; the general entry point.
pub fn forward_with(
    params: &ModelParams,
    hp: &HyperParams,
    user: u32,
    prev_items: &[u32],
    opts: ForwardOptions,
) -> Result<ForwardTrace> {
    let mask = opts.components;
    mask.validate()?;
    if prev_items.len() != hp.markov_order {
        return Err(CaserError::Contract(format!(
            "expected {} previous items, got {}",
            hp.markov_order,
            prev_items.len()
        )));
    }
    let d = hp.dim;
    let (mut embedded, mut user_vec) = embed_lookup(params, prev_items, user)?;
    for &pos in &opts.zeroed_positions {
        if pos >= hp.markov_order {
            return Err(CaserError::Contract(format!("masked position {pos} >= L")));
        }
        embedded.row_mut(pos).fill(0.0);
    }
    if !mask.personalization {
        user_vec.iter_mut().for_each(|x| *x = 0.0);
    }

    let n = hp.horizontal_filters();
    let (pooled, horizontal) = if mask.horizontal && !mask.fpmc_like {
        horizontal_conv(&embedded, &params.horizontal, hp.conv_activation)
    } else {
        (vec![0.0; n], Vec::new())
    };
    let (vertical_pre, vertical) = if mask.vertical && !mask.fpmc_like {
        let pre = vertical_conv(&embedded, &params.vertical);
        let post = pre.iter().map(|&x| hp.vertical_activation.apply(x)).collect();
        (pre, post)
    } else {
        (Vec::new(), vec![0.0; d * hp.vertical_filters])
    };

    let mut dropout_mask = opts.dropout_mask;
    if let Some(m) = &dropout_mask {
        if m.len() != hp.fc_input_dim() {
            return Err(CaserError::Contract(format!(
                "dropout mask has {} entries, expected {}",
                m.len(),
                hp.fc_input_dim()
            )));
        }
    }
    let (fc_pre, z) = if mask.fpmc_like {
        dropout_mask = None;
        (Vec::new(), embedded.row(hp.markov_order - 1).to_vec())
    } else if mask.uses_sequence_network() {
        let x: Vec<f64> = pooled.iter().chain(&vertical).copied().collect();
        fc_embed(
            &x,
            &params.fc_weight,
            params.fc_bias.row(0),
            hp.fc_activation,
            dropout_mask.as_deref(),
        )
    } else {
        dropout_mask = None;
        (Vec::new(), vec![0.0; d])
    };
    let hidden: Vec<f64> = z.iter().chain(&user_vec).copied().collect();

    let mut trace = ForwardTrace {
        user,
        prev_items: prev_items.to_vec(),
        components: mask,
        embedded,
        zeroed_positions: opts.zeroed_positions,
        horizontal,
        pooled,
        vertical_pre,
        vertical,
        dropout_mask,
        fc_pre,
        z,
        hidden,
        scores: Vec::new(),
    };
    if opts.full_scores {
        let mut y: Vec<f64> = (0..=params.item_count() as u32)
            .map(|i| trace.score(params, i))
            .collect();
        y[PADDING as usize] = f64::NEG_INFINITY;
        trace.scores = y;
    }
    Ok(trace)
}

/// Full forward pass for an instance. In training mode a dropout mask is
/// drawn from `rng` when the dropout rate is positive.
pub fn forward<R: Rng + ?Sized>(
    params: &ModelParams,
    hp: &HyperParams,
    instance: &TrainingInstance,
    mode: Mode,
    rng: Option<&mut R>,
) -> Result<ForwardTrace> {
    let dropout_mask = match (mode, rng) {
        (Mode::Train, Some(rng)) if hp.dropout > 0.0 => Some(sample_dropout_mask(hp, rng)),
        (Mode::Train, None) if hp.dropout > 0.0 => {
            return Err(CaserError::Contract(
                "training-mode forward with dropout needs an rng".into(),
            ))
        }
        _ => None,
    };
    forward_with(
        params,
        hp,
        instance.user,
        &instance.prev_items,
        ForwardOptions {
            dropout_mask,
            full_scores: true,
            ..Default::default()
        },
    )
}

/// Inference scores for a user given an L-item window.
pub fn score_all(
    params: &ModelParams,
    hp: &HyperParams,
    user: u32,
    prev_items: &[u32],
    components: ComponentMask,
) -> Result<Vec<f64>> {
    Ok(forward_with(
        params,
        hp,
        user,
        prev_items,
        ForwardOptions {
            components,
            full_scores: true,
            ..Default::default()
        },
    )?
    .scores)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_hp() -> HyperParams {
        HyperParams {
            dim: 4,
            markov_order: 3,
            targets: 1,
            heights: vec![1, 2, 3],
            filters_per_height: 2,
            vertical_filters: 2,
            dropout: 0.0,
            ..Default::default()
        }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn init_is_deterministic_and_pins_padding() {
        let hp = toy_hp();
        let a = init_params(&hp, 5, 9, &mut rng(3)).unwrap();
        let b = init_params(&hp, 5, 9, &mut rng(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.item_embedding.row(0).iter().all(|&x| x == 0.0));
        assert!(a.out_weight.row(0).iter().all(|&x| x == 0.0));
        assert!(a.fc_bias.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn init_weight_mean_is_centered() {
        let hp = HyperParams {
            dim: 32,
            ..Default::default()
        };
        let p = init_params(&hp, 10, 10, &mut rng(11)).unwrap();
        let w = p.fc_weight.as_slice();
        let a = crate::tensor::glorot_bound(hp.fc_input_dim(), hp.dim);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 3.0 * a / (3.0 * w.len() as f64).sqrt());
        assert!(w.iter().all(|x| x.abs() <= a));
    }

    #[test]
    fn embed_lookup_layout() {
        let hp = toy_hp();
        let p = init_params(&hp, 2, 6, &mut rng(5)).unwrap();
        let (e, pu) = embed_lookup(&p, &[0, 4, 2], 1).unwrap();
        assert!(e.row(0).iter().all(|&x| x == 0.0));
        assert_eq!(e.row(1), p.item_embedding.row(4));
        assert_eq!(e.row(2), p.item_embedding.row(2));
        assert_eq!(pu, p.user_embedding.row(1));
        assert!(matches!(embed_lookup(&p, &[0, 7, 1], 0), Err(CaserError::Lookup(_))));
        assert!(matches!(embed_lookup(&p, &[0, 1, 1], 2), Err(CaserError::Lookup(_))));
    }

    #[test]
    fn horizontal_hand_case() {
        let e = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let f = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        let (o, maps) = horizontal_conv(&e, &[f], Activation::Identity);
        assert_eq!(maps[0].values, vec![2.0, 3.0]);
        assert_eq!(o, vec![3.0]);
        assert_eq!(maps[0].argmax, 1);
    }

    #[test]
    fn horizontal_zero_filter_and_full_height() {
        let mut r = rng(1);
        let e = random_matrix(4, 3, &mut r);
        let (o, maps) = horizontal_conv(&e, &[Matrix::zeros(2, 3)], Activation::Sigmoid);
        assert!(maps[0].values.iter().all(|&v| v == 0.5));
        assert_eq!(o[0], 0.5);
        // ties resolve to the first window
        assert_eq!(maps[0].argmax, 0);

        let f = random_matrix(4, 3, &mut r);
        let (o, maps) = horizontal_conv(&e, std::slice::from_ref(&f), Activation::Tanh);
        let inner: f64 = e.as_slice().iter().zip(f.as_slice()).map(|(a, b)| a * b).sum();
        assert_eq!(maps[0].values.len(), 1);
        assert!((o[0] - inner.tanh()).abs() < 1e-15);
    }

    #[test]
    fn vertical_selector_and_column_sums() {
        let e = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 7.0]]);
        let sel = Matrix::from_rows(&[vec![0.0, 1.0, 0.0]]);
        assert_eq!(vertical_conv(&e, &sel), vec![3.0, 4.0]);
        let ones = Matrix::from_rows(&[vec![1.0, 1.0, 1.0]]);
        assert_eq!(vertical_conv(&e, &ones), vec![9.0, 13.0]);
    }

    #[test]
    fn fc_zero_weights_relu() {
        let (_, z) = fc_embed(&[1.0, -2.0], &Matrix::zeros(3, 2), &[0.0; 3], Activation::Relu, None);
        assert_eq!(z, vec![0.0; 3]);
    }

    #[test]
    fn fc_identity_matches_naive_matvec() {
        let mut r = rng(4);
        let w = random_matrix(3, 5, &mut r);
        let x: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
        let b = [0.1, -0.2, 0.3];
        let (_, z) = fc_embed(&x, &w, &b, Activation::Identity, None);
        for i in 0..3 {
            let mut acc = b[i];
            for j in 0..5 {
                acc += w.get(i, j) * x[j];
            }
            assert!((z[i] - acc).abs() < 1e-14);
        }
    }

    #[test]
    fn output_bias_only_when_weights_zero() {
        let w = Matrix::zeros(4, 4);
        let b = Matrix::from_rows(&[vec![0.0, 1.0, 2.0, 3.0]]);
        let y = output_scores(&[1.0, 1.0], &[2.0, 2.0], &w, &b);
        assert_eq!(y[0], f64::NEG_INFINITY);
        assert_eq!(&y[1..], &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn output_matches_double_loop() {
        let mut r = rng(8);
        let w = random_matrix(6, 4, &mut r);
        let b = random_matrix(1, 6, &mut r);
        let z = [0.3, -0.7];
        let pu = [1.1, 0.2];
        let y = output_scores(&z, &pu, &w, &b);
        for i in 1..6 {
            let mut acc = b.get(0, i);
            for (j, h) in z.iter().chain(&pu).enumerate() {
                acc += w.get(i, j) * h;
            }
            assert!((y[i] - acc).abs() < 1e-14);
        }
    }

    #[test]
    fn train_equals_infer_without_dropout() {
        let hp = toy_hp();
        let p = init_params(&hp, 3, 7, &mut rng(2)).unwrap();
        let inst = TrainingInstance {
            user: 1,
            prev_items: vec![0, 3, 5],
            target_items: vec![2],
        };
        let a = forward(&p, &hp, &inst, Mode::Train, Some(&mut rng(0))).unwrap();
        let b = forward::<ChaCha8Rng>(&p, &hp, &inst, Mode::Infer, None).unwrap();
        assert_eq!(a.scores, b.scores);
        assert_eq!(a.pooled.len(), hp.horizontal_filters());
        assert_eq!(a.vertical.len(), hp.dim * hp.vertical_filters);
        assert_eq!(a.z.len(), hp.dim);
        assert_eq!(a.scores.len(), 8);
    }

    #[test]
    fn mask_parsing() {
        let m: ComponentMask = "pvh".parse().unwrap();
        assert_eq!(m, ComponentMask::ALL);
        assert_eq!("Caser-vh".parse::<ComponentMask>().unwrap().label(), "vh");
        assert!("".parse::<ComponentMask>().is_err());
        assert!("pp".parse::<ComponentMask>().is_err());
        assert!("x".parse::<ComponentMask>().is_err());
        assert!("fpmc".parse::<ComponentMask>().unwrap().fpmc_like);
    }

    fn sliding_vertical(e: &Matrix, f: &Matrix) -> Vec<f64> {
        // slide each L x 1 filter across the d columns of E
        let (l, d) = e.shape();
        let mut out = Vec::new();
        for k in 0..f.rows() {
            for col in 0..d {
                let mut acc = 0.0;
                for r in 0..l {
                    acc += e.get(r, col) * f.get(k, r);
                }
                out.push(acc);
            }
        }
        out
    }

    proptest! {
        #[test]
        fn vertical_weighted_sum_equals_sliding(seed in any::<u64>(), l in 1usize..8, d in 1usize..8, nv in 1usize..4) {
            let mut r = rng(seed);
            let e = random_matrix(l, d, &mut r);
            let f = random_matrix(nv, l, &mut r);
            let a = vertical_conv(&e, &f);
            let b = sliding_vertical(&e, &f);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn max_pool_dominates(seed in any::<u64>(), l in 1usize..7, d in 1usize..5) {
            let mut r = rng(seed);
            let e = random_matrix(l, d, &mut r);
            let filters: Vec<Matrix> = (1..=l).map(|h| random_matrix(h, d, &mut r)).collect();
            let (o, maps) = horizontal_conv(&e, &filters, Activation::Relu);
            for (ok, m) in o.iter().zip(&maps) {
                prop_assert!(m.values.iter().all(|v| ok >= v));
                prop_assert_eq!(*ok, m.values[m.argmax]);
                prop_assert!(m.values[..m.argmax].iter().all(|v| v < ok));
            }
        }

        #[test]
        fn vertical_all_ones_is_row_permutation_invariant(seed in any::<u64>(), l in 2usize..7) {
            let mut r = rng(seed);
            let e = random_matrix(l, 3, &mut r);
            let mut rows: Vec<Vec<f64>> = (0..l).map(|i| e.row(i).to_vec()).collect();
            rows.reverse();
            let ep = Matrix::from_rows(&rows);
            let ones = Matrix::from_vec(1, l, vec![1.0; l]);
            let a = vertical_conv(&e, &ones);
            let b = vertical_conv(&ep, &ones);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn padding_rows_contribute_nothing(seed in any::<u64>()) {
            let mut r = rng(seed);
            let mut e = random_matrix(4, 3, &mut r);
            e.row_mut(0).fill(0.0);
            let mut f = random_matrix(2, 4, &mut r);
            let base = vertical_conv(&e, &f);
            f.set(0, 0, 100.0);
            f.set(1, 0, -3.0);
            prop_assert_eq!(base, vertical_conv(&e, &f));
        }
    }

    #[test]
    fn horizontal_is_order_sensitive() {
        let mut r = rng(77);
        let e = random_matrix(4, 3, &mut r);
        let mut rows: Vec<Vec<f64>> = (0..4).map(|i| e.row(i).to_vec()).collect();
        rows.swap(0, 3);
        let ep = Matrix::from_rows(&rows);
        let filters: Vec<Matrix> = (0..4).map(|_| random_matrix(2, 3, &mut r)).collect();
        let (a, _) = horizontal_conv(&e, &filters, Activation::Identity);
        let (b, _) = horizontal_conv(&ep, &filters, Activation::Identity);
        assert_ne!(a, b);
    }
}
