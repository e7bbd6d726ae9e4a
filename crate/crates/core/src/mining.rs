//! Online hard-example mining over per-slot losses.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MiningConfig {
    /// Keep the `k` highest-loss slots overall.
    TopK { k: usize },
    /// Keep every positive plus `neg_per_pos` hardest negatives per positive.
    Ratio { neg_per_pos: usize },
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig::Ratio { neg_per_pos: 3 }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MiningConfig::TopK { k: 0 } => Err(Error::Config("topk mining needs k >= 1".into())),
            MiningConfig::Ratio { neg_per_pos: 0 } => {
                Err(Error::Config("ratio mining needs neg_per_pos >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Indices sorted by loss descending, ties by lower index.
fn hardest_first(losses: &[f64], candidates: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = candidates.collect();
    idx.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    idx
}

/// Indices whose gradient should be kept, in ascending order.
///
/// With no positives, ratio mode keeps the `neg_per_pos` hardest negatives.
pub fn select_hard(losses: &[f64], positives: &[usize], cfg: &MiningConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    if let Some(i) = losses.iter().position(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::Config(format!("loss {i} is negative or not finite")));
    }
    let mut keep = match *cfg {
        MiningConfig::TopK { k } => {
            if k > losses.len() {
                log::warn!(
                    "topk k={k} exceeds {} candidates; keeping all",
                    losses.len()
                );
            }
            let mut order = hardest_first(losses, 0..losses.len());
            order.truncate(k);
            order
        }
        MiningConfig::Ratio { neg_per_pos } => {
            let mut is_pos = vec![false; losses.len()];
            for &p in positives {
                if p >= losses.len() {
                    return Err(Error::Config(format!(
                        "positive index {p} out of range 0..{}",
                        losses.len()
                    )));
                }
                is_pos[p] = true;
            }
            let n_pos = is_pos.iter().filter(|&&p| p).count();
            let budget = neg_per_pos * n_pos.max(1);
            let mut negs = hardest_first(losses, (0..losses.len()).filter(|&i| !is_pos[i]));
            negs.truncate(budget);
            negs.extend((0..losses.len()).filter(|&i| is_pos[i]));
            negs
        }
    };
    keep.sort_unstable();
    Ok(keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn topk_examples() {
        let k2 = MiningConfig::TopK { k: 2 };
        assert_eq!(select_hard(&[5.0, 1.0, 3.0], &[], &k2).unwrap(), vec![0, 2]);
        assert_eq!(select_hard(&[1.0; 4], &[], &k2).unwrap(), vec![0, 1]);
        let k9 = MiningConfig::TopK { k: 9 };
        assert_eq!(select_hard(&[1.0, 2.0], &[], &k9).unwrap(), vec![0, 1]);
        assert!(select_hard(&[1.0], &[], &MiningConfig::TopK { k: 0 }).is_err());
    }

    #[test]
    fn ratio_example_against_sort_oracle() {
        let losses: Vec<f64> = (0..20)
            .map(|i| ((i * 37) % 11) as f64 + 0.1 * i as f64)
            .collect();
        let got = select_hard(&losses, &[4, 7], &MiningConfig::default()).unwrap();
        // oracle: rank negatives by (loss desc, index asc) via a full sort of tuples
        let mut negs: Vec<(f64, usize)> = (0..20)
            .filter(|i| *i != 4 && *i != 7)
            .map(|i| (-losses[i], i))
            .collect();
        negs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want: Vec<usize> = negs.iter().take(6).map(|&(_, i)| i).collect();
        want.extend([4, 7]);
        want.sort();
        assert_eq!(got, want);
        assert_eq!(got.len(), 8);
    }

    #[test]
    fn ratio_without_positives_keeps_hardest_negatives() {
        let got = select_hard(&[0.1, 0.9, 0.5, 0.7, 0.2], &[], &MiningConfig::default()).unwrap();
        assert_eq!(got, vec![1, 2, 3]);
    }

    #[test]
    fn invalid_inputs() {
        assert!(select_hard(&[1.0, -1.0], &[], &MiningConfig::default()).is_err());
        assert!(select_hard(&[1.0, f64::NAN], &[], &MiningConfig::default()).is_err());
        assert!(select_hard(&[1.0], &[3], &MiningConfig::default()).is_err());
    }

    fn arb_case() -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
        prop::collection::vec(0u8..8, 1..60).prop_flat_map(|l| {
            let n = l.len();
            let losses: Vec<f64> = l.into_iter().map(f64::from).collect();
            (
                Just(losses),
                prop::collection::btree_set(0..n, 0..n.min(6))
                    .prop_map(|s| s.into_iter().collect()),
            )
        })
    }

    proptest! {
        #[test]
        fn ratio_mode_size_and_hardness((losses, pos) in arb_case(), r in 1usize..5) {
            let cfg = MiningConfig::Ratio { neg_per_pos: r };
            let keep = select_hard(&losses, &pos, &cfg).unwrap();
            let n_neg = losses.len() - pos.len();
            let budget = r * pos.len().max(1);
            prop_assert_eq!(keep.len(), pos.len() + budget.min(n_neg));
            for p in &pos {
                prop_assert!(keep.contains(p));
            }
            let kept_negs: Vec<f64> = keep.iter().filter(|i| !pos.contains(i)).map(|&i| losses[i]).collect();
            let min_kept = kept_negs.iter().cloned().fold(f64::INFINITY, f64::min);
            for i in (0..losses.len()).filter(|i| !pos.contains(i) && !keep.contains(i)) {
                prop_assert!(losses[i] <= min_kept);
            }
        }

        #[test]
        fn topk_commutes_with_reindexing(losses in prop::collection::vec(0.0..10.0f64, 1..40), k in 1usize..50, seed in any::<u64>()) {
            // distinct losses make the selection independent of index tie-breaks
            let losses: Vec<f64> = losses.iter().enumerate().map(|(i, l)| l + i as f64 * 1e-9).collect();
            let n = losses.len();
            let mut perm: Vec<usize> = (0..n).collect();
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                perm.swap(i, (s >> 33) as usize % (i + 1));
            }
            let permuted: Vec<f64> = perm.iter().map(|&i| losses[i]).collect();
            let cfg = MiningConfig::TopK { k };
            let a = select_hard(&losses, &[], &cfg).unwrap();
            let mut b: Vec<usize> = select_hard(&permuted, &[], &cfg).unwrap().into_iter().map(|j| perm[j]).collect();
            b.sort();
            prop_assert_eq!(a.len(), k.min(n));
            prop_assert_eq!(a, b);
        }
    }
}
