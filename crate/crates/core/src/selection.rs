//! Per-round client data selection.
//!
//! Entropy-based selection scores every local sample with the Shannon
//! entropy of its temperature-scaled softmax output and keeps the most
//! uncertain fraction. Random selection is the baseline.

use std::cmp::Ordering;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::{ClientPartition, Dataset};
use crate::error::{FedError, Result};
use crate::nn::{softmax_rows, Model, PROB_FLOOR};
use crate::seed::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    Entropy,
    Random,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyScore {
    pub sample_index: usize,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    /// Ascending dataset indices.
    pub selected_indices: Vec<usize>,
    /// One score per client sample, in client order. Empty unless the
    /// strategy is [`SelectionStrategy::Entropy`].
    pub scores: Vec<EntropyScore>,
    pub strategy: SelectionStrategy,
    pub p_ds: f64,
}

/// Shannon entropy in nats; `0 ln 0` is taken as 0.
pub fn compute_entropy(probs: &[f64]) -> Result<f64> {
    let mut h = 0.0;
    for &p in probs {
        if !(p >= 0.0) {
            return Err(FedError::Parameter(format!("invalid probability {p}")));
        }
        if p > 0.0 {
            h -= p * p.max(PROB_FLOOR).ln();
        }
    }
    Ok(h.max(0.0))
}

/// `max(1, floor(p_ds * n))`, capped at `n`.
pub fn selection_count(n: usize, p_ds: f64) -> usize {
    // tolerance absorbs products like 0.29 * 100 = 28.999999999999996
    let k = (p_ds * n as f64 + 1e-9).floor() as usize;
    k.clamp(1, n.max(1))
}

fn check_fraction(p_ds: f64) -> Result<()> {
    if !(p_ds > 0.0 && p_ds <= 1.0) {
        return Err(FedError::Parameter(format!(
            "p_ds must lie in (0, 1], got {p_ds}"
        )));
    }
    Ok(())
}

/// Ranking order: higher entropy first, ties by ascending sample index.
fn by_priority(a: &EntropyScore, b: &EntropyScore) -> Ordering {
    b.entropy
        .total_cmp(&a.entropy)
        .then(a.sample_index.cmp(&b.sample_index))
}

/// Indices of the `k` highest-priority scores, returned in ascending order.
pub fn top_by_entropy(scores: &[EntropyScore], k: usize) -> Vec<usize> {
    let k = k.min(scores.len());
    if k == 0 {
        return Vec::new();
    }
    let mut work = scores.to_vec();
    if k < work.len() {
        work.select_nth_unstable_by(k - 1, by_priority);
        work.truncate(k);
    }
    let mut out: Vec<usize> = work.into_iter().map(|s| s.sample_index).collect();
    out.sort_unstable();
    out
}

/// Entropy of the temperature-scaled prediction for each listed sample.
pub fn entropy_scores(
    model: &Model,
    dataset: &Dataset,
    indices: &[usize],
    rho: f64,
) -> Result<Vec<EntropyScore>> {
    if indices.is_empty() {
        return Ok(Vec::new());
    }
    let (batch, _) = dataset.batch(indices);
    let probs = softmax_rows(&model.logits(&batch)?, rho)?;
    indices
        .iter()
        .zip(probs.iter_rows())
        .map(|(&sample_index, p)| {
            Ok(EntropyScore {
                sample_index,
                entropy: compute_entropy(p)?,
            })
        })
        .collect()
}

pub fn select_by_entropy(
    model: &Model,
    dataset: &Dataset,
    client: &ClientPartition,
    p_ds: f64,
    rho: f64,
) -> Result<SelectionResult> {
    check_fraction(p_ds)?;
    if client.is_empty() {
        return Err(FedError::Parameter(format!(
            "client {} has no data",
            client.client_id
        )));
    }
    let scores = entropy_scores(model, dataset, &client.sample_indices, rho)?;
    let k = selection_count(scores.len(), p_ds);
    Ok(SelectionResult {
        selected_indices: top_by_entropy(&scores, k),
        scores,
        strategy: SelectionStrategy::Entropy,
        p_ds,
    })
}

/// Uniform sample without replacement, seeded by `(round_seed, client_id)`.
pub fn select_random(
    client: &ClientPartition,
    p_ds: f64,
    round_seed: u64,
) -> Result<SelectionResult> {
    check_fraction(p_ds)?;
    let n = client.len();
    if n == 0 {
        return Err(FedError::Parameter(format!(
            "client {} has no data",
            client.client_id
        )));
    }
    let k = selection_count(n, p_ds);
    let mut rng = stream_rng(round_seed, Stream::Selection, &[client.client_id as u64]);
    let mut picked: Vec<usize> = index::sample(&mut rng, n, k)
        .into_iter()
        .map(|i| client.sample_indices[i])
        .collect();
    picked.sort_unstable();
    Ok(SelectionResult {
        selected_indices: picked,
        scores: Vec::new(),
        strategy: SelectionStrategy::Random,
        p_ds,
    })
}

pub fn select_all(client: &ClientPartition) -> SelectionResult {
    let mut all = client.sample_indices.clone();
    all.sort_unstable();
    SelectionResult {
        selected_indices: all,
        scores: Vec::new(),
        strategy: SelectionStrategy::All,
        p_ds: 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use proptest::prelude::*;

    fn toy_data(n_per_class: usize, seed: u64) -> Dataset {
        generate_synthetic(&SyntheticSpec {
            num_classes: 4,
            samples_per_class: n_per_class,
            feature_dim: 5,
            class_separation: 1.5,
            seed,
        })
        .unwrap()
    }

    fn client_of(ds: &Dataset) -> ClientPartition {
        ClientPartition {
            client_id: 3,
            sample_indices: (0..ds.len()).collect(),
        }
    }

    // Reference selection: score everything, sort fully, take the prefix.
    fn brute_force(scores: &[EntropyScore], k: usize) -> Vec<usize> {
        let mut all = scores.to_vec();
        all.sort_by(|a, b| {
            if a.entropy > b.entropy {
                Ordering::Less
            } else if a.entropy < b.entropy {
                Ordering::Greater
            } else {
                a.sample_index.cmp(&b.sample_index)
            }
        });
        let mut out: Vec<usize> = all[..k].iter().map(|s| s.sample_index).collect();
        out.sort();
        out
    }

    #[test]
    fn entropy_examples() {
        assert!((compute_entropy(&[0.1; 10]).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert_eq!(compute_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        let h = compute_entropy(&[0.7, 0.2, 0.1]).unwrap();
        assert!((h - 0.8018185525433373).abs() < 1e-12);
        assert!(matches!(
            compute_entropy(&[1.2, -0.2]),
            Err(FedError::Parameter(_))
        ));
    }

    #[test]
    fn count_rule() {
        assert_eq!(selection_count(7, 0.5), 3);
        assert_eq!(selection_count(10, 0.1), 1);
        assert_eq!(selection_count(5, 0.1), 1);
        assert_eq!(selection_count(100, 0.29), 29);
        assert_eq!(selection_count(30, 1.0), 30);
    }

    #[test]
    fn top_k_by_value() {
        let scores: Vec<EntropyScore> = [0.1, 0.9, 0.5, 0.7]
            .iter()
            .enumerate()
            .map(|(i, &e)| EntropyScore {
                sample_index: i,
                entropy: e,
            })
            .collect();
        assert_eq!(top_by_entropy(&scores, selection_count(4, 0.5)), vec![1, 3]);
    }

    #[test]
    fn ties_prefer_lower_indices() {
        let scores: Vec<EntropyScore> = (0..6)
            .map(|i| EntropyScore {
                sample_index: 10 - i,
                entropy: 1.0,
            })
            .collect();
        assert_eq!(top_by_entropy(&scores, 2), vec![5, 6]);
    }

    #[test]
    fn full_fraction_selects_everything_in_order() {
        let ds = toy_data(5, 1);
        let model = Model::mlp(&[5, 8, 4], 2, 1).unwrap();
        let client = ClientPartition {
            client_id: 0,
            sample_indices: vec![9, 2, 14, 0],
        };
        let res = select_by_entropy(&model, &ds, &client, 1.0, 0.1).unwrap();
        assert_eq!(res.selected_indices, vec![0, 2, 9, 14]);
        assert_eq!(res.scores.len(), 4);
        assert_eq!(
            select_random(&client, 1.0, 5).unwrap().selected_indices,
            vec![0, 2, 9, 14]
        );
        assert_eq!(select_all(&client).selected_indices, vec![0, 2, 9, 14]);
    }

    #[test]
    fn random_selection_count_and_determinism() {
        let client = ClientPartition {
            client_id: 2,
            sample_indices: (100..107).collect(),
        };
        let a = select_random(&client, 0.5, 11).unwrap();
        assert_eq!(a.selected_indices.len(), 3);
        assert!(a.selected_indices.iter().all(|i| (100..107).contains(i)));
        assert_eq!(a, select_random(&client, 0.5, 11).unwrap());
        let other_client = ClientPartition {
            client_id: 5,
            ..client.clone()
        };
        let differs = (0..20).any(|s| {
            select_random(&client, 0.5, s).unwrap() != select_random(&other_client, 0.5, s).unwrap()
        });
        assert!(differs);
    }

    #[test]
    fn random_selection_varies_with_round_seed() {
        // C(20, 10) = 184756, so a repeat across seeds should essentially never happen.
        let client = ClientPartition {
            client_id: 0,
            sample_indices: (0..20).collect(),
        };
        let base = select_random(&client, 0.5, 0).unwrap();
        let repeats = (1..=100)
            .filter(|&s| select_random(&client, 0.5, s).unwrap() == base)
            .count();
        assert_eq!(repeats, 0);
    }

    #[test]
    fn invalid_fraction_rejected() {
        let client = ClientPartition {
            client_id: 0,
            sample_indices: vec![0],
        };
        assert!(select_random(&client, 0.0, 1).is_err());
        assert!(select_random(&client, 1.5, 1).is_err());
    }

    #[test]
    fn rho_one_full_fraction_strategies_agree() {
        let ds = toy_data(6, 2);
        let model = Model::mlp(&[5, 8, 4], 2, 3).unwrap();
        let client = client_of(&ds);
        let e = select_by_entropy(&model, &ds, &client, 1.0, 1.0).unwrap();
        let r = select_random(&client, 1.0, 77).unwrap();
        assert_eq!(e.selected_indices, r.selected_indices);
    }

    #[test]
    fn hardening_thins_the_high_entropy_tail() {
        let ds = toy_data(30, 4);
        let model = Model::mlp(&[5, 16, 4], 2, 9).unwrap();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let threshold = 0.5 * 4f64.ln();
        let high = |rho| {
            entropy_scores(&model, &ds, &idx, rho)
                .unwrap()
                .iter()
                .filter(|s| s.entropy > threshold)
                .count()
        };
        assert!(high(0.1) <= high(1.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn entropy_selection_matches_full_sort(
            n in 1usize..50,
            seed in any::<u64>(),
            p_ds in 0.01f64..=1.0,
            rho in 0.05f64..3.0,
        ) {
            let ds = toy_data(n, seed);
            let model = Model::mlp(&[5, 6, 4], 2, seed ^ 1).unwrap();
            let client = client_of(&ds);
            let res = select_by_entropy(&model, &ds, &client, p_ds, rho).unwrap();
            let k = selection_count(ds.len(), p_ds);
            prop_assert_eq!(res.selected_indices.len(), k);
            prop_assert_eq!(&res.selected_indices, &brute_force(&res.scores, k));
            let cap = 4f64.ln() + 1e-9;
            prop_assert!(res.scores.iter().all(|s| s.entropy >= 0.0 && s.entropy <= cap));
        }

        #[test]
        fn entropy_ignores_logit_offsets(
            z in proptest::collection::vec(-10.0f64..10.0, 2..8),
            c in -50.0f64..50.0,
            rho in 0.1f64..2.0,
        ) {
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let a = compute_entropy(&crate::nn::softmax_with_temperature(&z, rho).unwrap()).unwrap();
            let b = compute_entropy(&crate::nn::softmax_with_temperature(&shifted, rho).unwrap()).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
