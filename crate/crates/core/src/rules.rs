//! Sequential association rules `(x_1, ..., x_k) -> y` where the antecedent
//! is a contiguous run and `y` follows it after `skip` intervening items.
//! Support counts sequences, not occurrences.

use std::collections::{HashMap, HashSet};
use std::fmt;

use crate::error::{CaserError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub antecedent: Vec<u32>,
    pub consequent: u32,
    pub skip: usize,
    /// Sequences containing the antecedent followed by the consequent.
    pub support: usize,
    /// Sequences containing the antecedent.
    pub antecedent_support: usize,
    pub confidence: f64,
}

impl Rule {
    pub fn order(&self) -> usize {
        self.antecedent.len()
    }

    fn sort_key(&self) -> (usize, usize, &[u32], u32) {
        (self.order(), self.skip, &self.antecedent, self.consequent)
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let x: Vec<String> = self.antecedent.iter().map(u32::to_string).collect();
        write!(
            f,
            "({}) -> {} [skip {}] sup={} conf={:.3}",
            x.join(", "),
            self.consequent,
            self.skip,
            self.support,
            self.confidence
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiningConfig {
    /// Antecedent lengths `1..=max_order`.
    pub max_order: usize,
    /// Skips `0..=max_skip`.
    pub max_skip: usize,
    /// Minimum support count.
    pub min_support: usize,
    /// Minimum confidence in `(0, 1]`.
    pub min_confidence: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self::sequential_intensity()
    }
}

impl MiningConfig {
    /// Orders 1 through 5, no skip, support 5, confidence 50%.
    pub fn sequential_intensity() -> Self {
        Self {
            max_order: 5,
            max_skip: 0,
            min_support: 5,
            min_confidence: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_support == 0 {
            return Err(CaserError::Config("min_support must be >= 1".into()));
        }
        if !(self.min_confidence > 0.0 && self.min_confidence <= 1.0) {
            return Err(CaserError::Config("min_confidence must be in (0, 1]".into()));
        }
        if self.max_order == 0 {
            return Err(CaserError::Config("max_order must be >= 1".into()));
        }
        Ok(())
    }
}

/// Level-wise miner. A length-k antecedent can only be frequent if its
/// length-(k-1) prefix is, so only those prefixes are extended.
pub fn mine_rules<S: AsRef<[u32]>>(sequences: &[S], cfg: &MiningConfig) -> Result<Vec<Rule>> {
    cfg.validate()?;
    if sequences.is_empty() {
        return Err(CaserError::EmptyDataset("no sequences to mine".into()));
    }
    let mut rules = Vec::new();
    let mut frequent_prev: HashSet<Vec<u32>> = HashSet::new();
    for order in 1..=cfg.max_order {
        // antecedent support, counting each sequence once
        let mut pattern_support: HashMap<&[u32], usize> = HashMap::new();
        for seq in sequences {
            let seq = seq.as_ref();
            if seq.len() < order {
                continue;
            }
            let mut seen: HashSet<&[u32]> = HashSet::new();
            for w in seq.windows(order) {
                if order > 1 && !frequent_prev.contains(&w[..order - 1]) {
                    continue;
                }
                if seen.insert(w) {
                    *pattern_support.entry(w).or_default() += 1;
                }
            }
        }
        let frequent: HashMap<&[u32], usize> = pattern_support
            .into_iter()
            .filter(|&(_, c)| c >= cfg.min_support)
            .collect();
        if frequent.is_empty() {
            break;
        }

        let mut rule_support: HashMap<(&[u32], usize, u32), usize> = HashMap::new();
        for seq in sequences {
            let seq = seq.as_ref();
            let mut seen = HashSet::new();
            for start in 0..seq.len().saturating_sub(order) {
                let x = &seq[start..start + order];
                if !frequent.contains_key(x) {
                    continue;
                }
                for skip in 0..=cfg.max_skip {
                    let Some(&y) = seq.get(start + order + skip) else {
                        break;
                    };
                    if seen.insert((x, skip, y)) {
                        *rule_support.entry((x, skip, y)).or_default() += 1;
                    }
                }
            }
        }
        for ((x, skip, y), sup) in rule_support {
            if sup < cfg.min_support {
                continue;
            }
            let sup_x = frequent[x];
            let confidence = sup as f64 / sup_x as f64;
            if confidence >= cfg.min_confidence {
                rules.push(Rule {
                    antecedent: x.to_vec(),
                    consequent: y,
                    skip,
                    support: sup,
                    antecedent_support: sup_x,
                    confidence,
                });
            }
        }
        frequent_prev = frequent.into_keys().map(<[u32]>::to_vec).collect();
    }
    rules.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    Ok(rules)
}

/// Number of rules mined with `cfg` divided by the number of sequences
/// (one sequence per user).
pub fn sequential_intensity<S: AsRef<[u32]>>(sequences: &[S], cfg: &MiningConfig) -> Result<f64> {
    let rules = mine_rules(sequences, cfg)?;
    Ok(rules.len() as f64 / sequences.len() as f64)
}

/// CSV `antecedent,consequent,skip,support,confidence`; antecedent items
/// are space separated. `name` maps item indices to external ids.
pub fn rules_to_csv<F: Fn(u32) -> String>(rules: &[Rule], name: F) -> String {
    let mut s = String::from("antecedent,consequent,skip,support,confidence\n");
    for r in rules {
        let x: Vec<String> = r.antecedent.iter().map(|&i| name(i)).collect();
        s.push_str(&format!(
            "{},{},{},{},{:.6}\n",
            x.join(" "),
            name(r.consequent),
            r.skip,
            r.support,
            r.confidence
        ));
    }
    s
}
