//! Top-N ranking and the Prec@N / Recall@N / AP / MAP metrics.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::{last_window, SplitDataset, UserSplit, PADDING};
use crate::error::{CaserError, Result};
use crate::model::{score_all, ComponentMask, HyperParams, ModelParams};

/// Items ordered best first. Ties in score go to the smaller item index.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub user: u32,
    pub items: Vec<u32>,
    pub scores: Vec<f64>,
}

/// Ranks `scores` (indexed by item, slot 0 = padding), skipping padding and
/// anything in `exclude`. Keeps the best `limit` items, or all of them.
pub fn rank_scores(user: u32, scores: &[f64], exclude: &HashSet<u32>, limit: Option<usize>) -> RankedList {
    let mut order: Vec<u32> = (0..scores.len() as u32)
        .filter(|i| *i != PADDING && !exclude.contains(i))
        .collect();
    order.sort_by(|&a, &b| scores[b as usize].total_cmp(&scores[a as usize]).then(a.cmp(&b)));
    if let Some(n) = limit {
        order.truncate(n);
    }
    RankedList {
        user,
        scores: order.iter().map(|&i| scores[i as usize]).collect(),
        items: order,
    }
}

/// Scores every item from the last L items of `history` and returns the
/// `n` best, optionally excluding everything already in `history`.
pub fn recommend_top_n(
    params: &ModelParams,
    hp: &HyperParams,
    user: u32,
    history: &[u32],
    n: usize,
    exclude_seen: bool,
    components: ComponentMask,
) -> Result<RankedList> {
    if n == 0 {
        return Err(CaserError::Contract("N must be >= 1".into()));
    }
    if history.is_empty() {
        return Err(CaserError::Contract("recommendation needs a non-empty history".into()));
    }
    let window = last_window(history, hp.markov_order);
    let scores = score_all(params, hp, user, &window, components)?;
    let exclude = if exclude_seen {
        history.iter().copied().collect()
    } else {
        HashSet::new()
    };
    Ok(rank_scores(user, &scores, &exclude, Some(n)))
}

/// `(|R ∩ top_N| / N, |R ∩ top_N| / |R|)`.
pub fn prec_recall_at(ranked: &[u32], relevant: &HashSet<u32>, n: usize) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(CaserError::Contract("N must be >= 1".into()));
    }
    if relevant.is_empty() {
        return Err(CaserError::Contract(
            "recall is undefined for an empty relevant set".into(),
        ));
    }
    let hits = ranked.iter().take(n).filter(|i| relevant.contains(i)).count() as f64;
    Ok((hits / n as f64, hits / relevant.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ApMode {
    /// Divide by `min(|R|, cutoff)`.
    #[default]
    Standard,
    /// Divide by the cutoff (the length of the ranked list considered).
    PaperLiteral,
}

impl FromStr for ApMode {
    type Err = CaserError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "standard" => Ok(Self::Standard),
            "paper_literal" | "literal" => Ok(Self::PaperLiteral),
            other => Err(CaserError::Config(format!("unknown AP mode `{other}`"))),
        }
    }
}

impl fmt::Display for ApMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Standard => "standard",
            Self::PaperLiteral => "paper_literal",
        })
    }
}

/// `Σ_{N ≤ cutoff} Prec@N · rel(N)` divided per `mode`. A cutoff beyond
/// the list length is clamped to it.
pub fn average_precision(ranked: &[u32], relevant: &HashSet<u32>, mode: ApMode, cutoff: usize) -> f64 {
    let cutoff = cutoff.min(ranked.len());
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (pos, item) in ranked[..cutoff].iter().enumerate() {
        if relevant.contains(item) {
            hits += 1;
            acc += hits as f64 / (pos + 1) as f64;
        }
    }
    let denom = match mode {
        ApMode::Standard => relevant.len().min(cutoff),
        ApMode::PaperLiteral => cutoff,
    };
    if denom == 0 {
        0.0
    } else {
        acc / denom as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalTarget {
    /// History = train, relevant = validation.
    Validation,
    /// History = train + validation, relevant = test.
    Test,
}

impl EvalTarget {
    pub fn history_and_relevant(self, u: &UserSplit) -> (Vec<u32>, &[u32]) {
        match self {
            Self::Validation => (u.train.clone(), &u.validation),
            Self::Test => (u.train_and_validation(), &u.test),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub cutoffs: Vec<usize>,
    pub exclude_seen: bool,
    pub ap_mode: ApMode,
    /// AP cutoff; `None` ranks the full candidate list.
    pub ap_cutoff: Option<usize>,
    pub keep_per_user: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            cutoffs: vec![1, 5, 10],
            exclude_seen: true,
            ap_mode: ApMode::Standard,
            ap_cutoff: None,
            keep_per_user: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserMetrics {
    pub user: u32,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub ap: f64,
    pub hits_at_10: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub cutoffs: Vec<usize>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub map: f64,
    /// Users with a non-empty relevant set.
    pub users: usize,
    pub per_user: Vec<UserMetrics>,
}

impl EvalReport {
    pub fn precision_at(&self, n: usize) -> Option<f64> {
        self.cutoffs.iter().position(|&c| c == n).map(|i| self.precision[i])
    }

    pub fn recall_at(&self, n: usize) -> Option<f64> {
        self.cutoffs.iter().position(|&c| c == n).map(|i| self.recall[i])
    }

    pub fn csv_header(&self) -> String {
        let mut cols: Vec<String> = self.cutoffs.iter().map(|n| format!("prec@{n}")).collect();
        cols.extend(self.cutoffs.iter().map(|n| format!("recall@{n}")));
        cols.push("MAP".into());
        cols.push("users".into());
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols: Vec<String> = self
            .precision
            .iter()
            .chain(&self.recall)
            .map(|v| format!("{v:.6}"))
            .collect();
        cols.push(format!("{:.6}", self.map));
        cols.push(self.users.to_string());
        cols.join(",")
    }

    /// Per-user dump: `user<TAB>AP<TAB>hits@10`.
    pub fn per_user_tsv(&self) -> String {
        let mut s = String::from("user\tAP\thits@10\n");
        for u in &self.per_user {
            s.push_str(&format!("{}\t{:.6}\t{}\n", u.user, u.ap, u.hits_at_10));
        }
        s
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12}{:>10}", "metric", "value")?;
        for (n, p) in self.cutoffs.iter().zip(&self.precision) {
            writeln!(f, "{:<12}{:>10.4}", format!("Prec@{n}"), p)?;
        }
        for (n, r) in self.cutoffs.iter().zip(&self.recall) {
            writeln!(f, "{:<12}{:>10.4}", format!("Recall@{n}"), r)?;
        }
        writeln!(f, "{:<12}{:>10.4}", "MAP", self.map)?;
        write!(f, "{:<12}{:>10}", "users", self.users)
    }
}

/// Metrics for one user given a full ranking.
pub fn user_metrics(user: u32, ranked: &[u32], relevant: &HashSet<u32>, opts: &EvalOptions) -> Result<UserMetrics> {
    let mut precision = Vec::with_capacity(opts.cutoffs.len());
    let mut recall = Vec::with_capacity(opts.cutoffs.len());
    for &n in &opts.cutoffs {
        let (p, r) = prec_recall_at(ranked, relevant, n)?;
        precision.push(p);
        recall.push(r);
    }
    let cutoff = opts.ap_cutoff.unwrap_or(ranked.len());
    Ok(UserMetrics {
        user,
        precision,
        recall,
        ap: average_precision(ranked, relevant, opts.ap_mode, cutoff),
        hits_at_10: ranked.iter().take(10).filter(|i| relevant.contains(i)).count(),
    })
}

/// Averages per-user metrics over users with a non-empty relevant set.
/// `scorer(user, history)` returns one score per item slot (`|I| + 1`).
pub fn evaluate_with<F>(split: &SplitDataset, target: EvalTarget, opts: &EvalOptions, scorer: F) -> Result<EvalReport>
where
    F: Fn(&UserSplit, &[u32]) -> Result<Vec<f64>> + Sync,
{
    let per_user: Vec<UserMetrics> = split
        .users
        .par_iter()
        .filter_map(|u| {
            let (history, relevant) = target.history_and_relevant(u);
            if relevant.is_empty() || history.is_empty() {
                return None;
            }
            Some((u, history, relevant))
        })
        .map(|(u, history, relevant)| {
            let scores = scorer(u, &history)?;
            let exclude: HashSet<u32> = if opts.exclude_seen {
                history.iter().copied().collect()
            } else {
                HashSet::new()
            };
            let ranked = rank_scores(u.user, &scores, &exclude, None);
            let relevant: HashSet<u32> = relevant.iter().copied().collect();
            user_metrics(u.user, &ranked.items, &relevant, opts)
        })
        .collect::<Result<_>>()?;

    let k = opts.cutoffs.len();
    let count = per_user.len();
    let mut precision = vec![0.0; k];
    let mut recall = vec![0.0; k];
    let mut map = 0.0;
    for m in &per_user {
        for i in 0..k {
            precision[i] += m.precision[i];
            recall[i] += m.recall[i];
        }
        map += m.ap;
    }
    if count > 0 {
        let c = count as f64;
        precision.iter_mut().chain(recall.iter_mut()).for_each(|v| *v /= c);
        map /= c;
    }
    Ok(EvalReport {
        cutoffs: opts.cutoffs.clone(),
        precision,
        recall,
        map,
        users: count,
        per_user: if opts.keep_per_user { per_user } else { Vec::new() },
    })
}

/// Evaluates a trained model; each user is scored from the last L items of
/// its history.
pub fn evaluate(
    params: &ModelParams,
    hp: &HyperParams,
    split: &SplitDataset,
    target: EvalTarget,
    opts: &EvalOptions,
    components: ComponentMask,
) -> Result<EvalReport> {
    evaluate_with(split, target, opts, |u, history| {
        score_all(params, hp, u.user, &last_window(history, hp.markov_order), components)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(xs: &[u32]) -> HashSet<u32> {
        xs.iter().copied().collect()
    }

    #[test]
    fn ties_rank_smaller_index_first() {
        let r = rank_scores(0, &[f64::NEG_INFINITY, 1.0, 2.0, 2.0, 0.5], &HashSet::new(), None);
        assert_eq!(r.items, vec![2, 3, 1, 4]);
        let r = rank_scores(0, &[0.0, 1.0, 2.0, 2.0, 0.5], &set(&[2]), Some(2));
        assert_eq!(r.items, vec![3, 1]);
    }

    #[test]
    fn prec_recall_hand_cases() {
        let ranked = [1, 2, 3, 4, 5, 6];
        let (p, r) = prec_recall_at(&ranked, &set(&[2, 5, 9, 10]), 5).unwrap();
        assert!((p - 0.4).abs() < 1e-15 && (r - 0.5).abs() < 1e-15);
        assert_eq!(prec_recall_at(&ranked, &set(&[7]), 5).unwrap(), (0.0, 0.0));
        assert!(prec_recall_at(&ranked, &HashSet::new(), 5).is_err());
        assert!(prec_recall_at(&ranked, &set(&[1]), 0).is_err());
    }

    #[test]
    fn average_precision_hand_cases() {
        assert_eq!(
            average_precision(&[4, 5, 6, 1], &set(&[4, 5, 6]), ApMode::Standard, 4),
            1.0
        );
        let ranked = [1, 7, 3];
        let rel = set(&[1, 3]);
        let ap = average_precision(&ranked, &rel, ApMode::Standard, 3);
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        let lit = average_precision(&ranked, &rel, ApMode::PaperLiteral, 3);
        assert!((lit - (1.0 + 2.0 / 3.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn recall_is_monotone_in_n() {
        let ranked: Vec<u32> = (1..=30).collect();
        let rel = set(&[3, 8, 17, 29]);
        let mut last = 0.0;
        for n in 1..=30 {
            let (_, r) = prec_recall_at(&ranked, &rel, n).unwrap();
            assert!(r >= last);
            last = r;
        }
    }

    #[test]
    fn ap_mode_parse() {
        assert_eq!("paper-literal".parse::<ApMode>().unwrap(), ApMode::PaperLiteral);
        assert!("nope".parse::<ApMode>().is_err());
    }
}
