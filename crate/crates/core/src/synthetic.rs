//! Synthetic interaction data with a planted sequential signal.
//!
//! Items are partitioned into clusters; each user prefers a few clusters
//! with a skewed in-cluster popularity. A second-order transition table
//! gives every item two successors in its own cluster, picked by the parity
//! of the item two steps back. Each step follows the table with
//! probability `follow_prob` and otherwise draws from the user's
//! preference. Items never repeat within a sequence.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{chronological_split, SplitDataset, SplitRatios, UserSequence};
use crate::error::{CaserError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedConfig {
    pub users: usize,
    pub items: usize,
    pub sequence_len: usize,
    pub clusters: usize,
    pub clusters_per_user: usize,
    pub follow_prob: f64,
    /// Exponent of the in-cluster popularity `1 / (rank + 1)^s`.
    pub popularity_skew: f64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            users: 2000,
            items: 500,
            sequence_len: 30,
            clusters: 10,
            clusters_per_user: 2,
            follow_prob: 0.8,
            popularity_skew: 0.8,
        }
    }
}

/// Per-user sequences over items `1..=items`, users `0..users`.
pub fn planted_sequences(cfg: &PlantedConfig, seed: u64) -> Result<Vec<UserSequence>> {
    if cfg.clusters == 0 || !cfg.items.is_multiple_of(cfg.clusters) {
        return Err(CaserError::Config("items must split evenly into clusters".into()));
    }
    let per = cfg.items / cfg.clusters;
    if cfg.clusters_per_user == 0
        || cfg.clusters_per_user > cfg.clusters
        || cfg.sequence_len > per * cfg.clusters_per_user
    {
        return Err(CaserError::Config("sequences would exhaust the preferred items".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cluster_of = |i: u32| (i as usize - 1) / per;
    let successors: Vec<[u32; 2]> = (0..=cfg.items as u32)
        .map(|i| {
            if i == 0 {
                return [0, 0];
            }
            let base = (cluster_of(i) * per) as u32 + 1;
            [
                base + rng.random_range(0..per as u32),
                base + rng.random_range(0..per as u32),
            ]
        })
        .collect();
    let weights: Vec<f64> = (0..per)
        .map(|r| 1.0 / ((r + 1) as f64).powf(cfg.popularity_skew))
        .collect();
    let total_weight: f64 = weights.iter().sum();

    let mut out = Vec::with_capacity(cfg.users);
    for u in 0..cfg.users {
        let clusters: Vec<usize> = sample(&mut rng, cfg.clusters, cfg.clusters_per_user).into_vec();
        let mut used = vec![false; cfg.items + 1];
        let mut seq: Vec<u32> = Vec::with_capacity(cfg.sequence_len);
        while seq.len() < cfg.sequence_len {
            let follow = seq.len() >= 2 && rng.random::<f64>() < cfg.follow_prob;
            let next = if follow {
                let prev1 = seq[seq.len() - 1];
                let prev2 = seq[seq.len() - 2];
                Some(successors[prev1 as usize][(prev2 % 2) as usize]).filter(|&c| !used[c as usize])
            } else {
                None
            };
            let next = match next {
                Some(n) => n,
                None => loop {
                    let c = clusters[rng.random_range(0..clusters.len())];
                    let mut x = rng.random::<f64>() * total_weight;
                    let mut r = 0;
                    while r + 1 < per && x >= weights[r] {
                        x -= weights[r];
                        r += 1;
                    }
                    let cand = (c * per + r) as u32 + 1;
                    if !used[cand as usize] {
                        break cand;
                    }
                },
            };
            used[next as usize] = true;
            seq.push(next);
        }
        out.push(UserSequence {
            user: u as u32,
            items: seq,
        });
    }
    Ok(out)
}

/// Planted sequences split 70/10/20 per user.
pub fn planted_split(cfg: &PlantedConfig, seed: u64) -> Result<SplitDataset> {
    let seqs = planted_sequences(cfg, seed)?;
    chronological_split(&seqs, SplitRatios::default(), cfg.users, cfg.items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequences_have_no_repeats_and_fixed_length() {
        let cfg = PlantedConfig {
            users: 50,
            ..Default::default()
        };
        let seqs = planted_sequences(&cfg, 3).unwrap();
        assert_eq!(seqs.len(), 50);
        for s in &seqs {
            assert_eq!(s.items.len(), 30);
            let mut v = s.items.clone();
            v.sort_unstable();
            v.dedup();
            assert_eq!(v.len(), 30);
            assert!(s.items.iter().all(|&i| (1..=500).contains(&i)));
        }
        assert_eq!(seqs, planted_sequences(&cfg, 3).unwrap());
    }

    #[test]
    fn split_is_21_3_6() {
        let cfg = PlantedConfig {
            users: 5,
            ..Default::default()
        };
        let s = planted_split(&cfg, 1).unwrap();
        let u = &s.users[0];
        assert_eq!((u.train.len(), u.validation.len(), u.test.len()), (21, 3, 6));
    }
}
