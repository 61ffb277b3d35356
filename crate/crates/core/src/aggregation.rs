//! Weighted parameter averaging for the edge, global and cluster steps.
//!
//! All three operators share [`weighted_mean`], which computes
//! `p_0 + sum_j (w_j / W) (p_j - p_0)` left to right with Neumaier
//! compensation, so a fixed input order always yields the same bits.

use crate::error::{Error, Result};
use crate::model::{AdditiveModel, ParamVector};

/// A parameter vector and its sample-count weight (`n_i` or `n_m`).
#[derive(Debug, Clone, Copy)]
pub struct WeightedContribution<'a> {
    pub params: &'a [f64],
    pub weight: usize,
}

impl<'a> WeightedContribution<'a> {
    pub fn new(params: &'a [f64], weight: usize) -> Self {
        Self { params, weight }
    }
}

/// Compensated running sum (Neumaier's variant of Kahan summation).
#[derive(Debug, Clone, Copy, Default)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

pub fn weighted_mean(contribs: &[WeightedContribution<'_>]) -> Result<ParamVector> {
    let first = contribs
        .first()
        .ok_or_else(|| Error::input("weighted mean of an empty list"))?;
    let len = first.params.len();
    if let Some(bad) = contribs.iter().find(|c| c.params.len() != len) {
        return Err(Error::config(format!(
            "parameter length mismatch: {} vs {len}",
            bad.params.len()
        )));
    }
    if contribs.iter().any(|c| c.weight == 0) {
        return Err(Error::input("contribution weights must be at least 1"));
    }
    let total: usize = contribs.iter().map(|c| c.weight).sum();
    let total = total as f64;
    let shares: Vec<f64> = contribs.iter().map(|c| c.weight as f64 / total).collect();
    // Averaging offsets from the first vector makes equal inputs come back
    // bit for bit.
    let reference = first.params;
    let mut acc = vec![CompensatedSum::default(); len];
    for (c, share) in contribs.iter().zip(&shares).skip(1) {
        for ((a, &p), &r) in acc.iter_mut().zip(c.params).zip(reference) {
            a.add(share * (p - r));
        }
    }
    Ok(ParamVector::from(
        acc.iter()
            .zip(reference)
            .map(|(a, &r)| r + a.value())
            .collect::<Vec<_>>(),
    ))
}

/// Edge aggregation over the round's selected clients, weights `n_i / n_S`.
pub fn edge_aggregate(client_models: &[(AdditiveModel, usize)]) -> Result<AdditiveModel> {
    if client_models.is_empty() {
        return Err(Error::input("edge aggregation needs at least one selected client"));
    }
    let globals: Vec<_> = client_models
        .iter()
        .map(|(m, n)| WeightedContribution::new(&m.global, *n))
        .collect();
    let global = weighted_mean(&globals)?;
    let cluster = match client_models.iter().filter(|(m, _)| m.cluster.is_some()).count() {
        0 => None,
        k if k == client_models.len() => {
            let parts: Vec<_> = client_models
                .iter()
                .map(|(m, n)| WeightedContribution::new(m.cluster.as_deref().expect("checked"), *n))
                .collect();
            Some(weighted_mean(&parts)?)
        }
        _ => return Err(Error::config("mixing additive and single-network client models")),
    };
    Ok(AdditiveModel { global, cluster })
}

/// Cloud aggregation of every server's global network with weights `n_m / n`
/// taken from the full server sizes.
pub fn global_aggregate(server_globals: &[(&[f64], usize)], num_servers: usize) -> Result<ParamVector> {
    if server_globals.len() != num_servers {
        return Err(Error::Protocol(format!(
            "global aggregation expects all {num_servers} servers, got {}",
            server_globals.len()
        )));
    }
    let parts: Vec<_> = server_globals
        .iter()
        .map(|(p, n)| WeightedContribution::new(p, *n))
        .collect();
    weighted_mean(&parts)
}

/// Per-cluster aggregation with weights `n_m / n_k`; an empty cluster keeps
/// its previous parameters.
pub fn cluster_aggregate(members: &[(&[f64], usize)], previous: &ParamVector) -> Result<ParamVector> {
    if members.is_empty() {
        return Ok(previous.clone());
    }
    let parts: Vec<_> = members
        .iter()
        .map(|(p, n)| WeightedContribution::new(p, *n))
        .collect();
    weighted_mean(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from(v.to_vec())
    }

    #[test]
    fn single_contribution_is_identity() {
        let p = [0.1, -3.5, 1e-300, 7.25];
        let out = weighted_mean(&[WeightedContribution::new(&p, 13)]).unwrap();
        assert!(out.bits_eq(&pv(&p)));
    }

    #[test]
    fn opposite_vectors_cancel() {
        let v = [0.3, -1.7, 2.2];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let out = weighted_mean(&[WeightedContribution::new(&v, 4), WeightedContribution::new(&neg, 4)]).unwrap();
        assert!(out.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn weights_one_two_three_match_naive_sum() {
        let a = [1.0, 0.5, -2.0];
        let b = [3.0, -0.25, 4.0];
        let c = [-1.0, 8.0, 0.125];
        let out = weighted_mean(&[
            WeightedContribution::new(&a, 1),
            WeightedContribution::new(&b, 2),
            WeightedContribution::new(&c, 3),
        ])
        .unwrap();
        for j in 0..3 {
            let naive = (a[j] + 2.0 * b[j] + 3.0 * c[j]) / 6.0;
            assert!((out[j] - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(weighted_mean(&[]), Err(Error::Input(_))));
        let a = [1.0];
        let b = [1.0, 2.0];
        assert!(matches!(
            weighted_mean(&[WeightedContribution::new(&a, 1), WeightedContribution::new(&b, 1)]),
            Err(Error::Config(_))
        ));
        assert!(edge_aggregate(&[]).is_err());
        let g = [1.0];
        assert!(matches!(global_aggregate(&[(&g, 1)], 2), Err(Error::Protocol(_))));
    }

    #[test]
    fn edge_two_clients_hand_value() {
        let m0 = AdditiveModel::new(pv(&[0.0]), pv(&[0.0]));
        let m1 = AdditiveModel::new(pv(&[4.0]), pv(&[4.0]));
        let out = edge_aggregate(&[(m0, 1), (m1, 3)]).unwrap();
        assert_eq!(out.global[0], 3.0);
        assert_eq!(out.cluster.unwrap()[0], 3.0);
    }

    #[test]
    fn edge_identical_models_fixed_point() {
        let m = AdditiveModel::new(pv(&[0.1, 0.2, 0.3]), pv(&[-1.0, 1.0, 0.7]));
        let out = edge_aggregate(&[(m.clone(), 5), (m.clone(), 9), (m.clone(), 2)]).unwrap();
        for j in 0..3 {
            assert!((out.global[j] - m.global[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn edge_rejects_mixed_models() {
        let a = AdditiveModel::new(pv(&[0.0]), pv(&[0.0]));
        let b = AdditiveModel::single(pv(&[0.0]));
        assert!(edge_aggregate(&[(a, 1), (b, 1)]).is_err());
    }

    #[test]
    fn global_single_server_identity_and_equal_weights() {
        let p = [2.5, -1.0];
        assert!(global_aggregate(&[(&p, 7)], 1).unwrap().bits_eq(&pv(&p)));
        let q = [0.5, 3.0];
        let out = global_aggregate(&[(&p, 10), (&q, 10)], 2).unwrap();
        assert!((out[0] - 1.5).abs() < 1e-12 && (out[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cluster_cases() {
        let prev = pv(&[9.0, 9.0]);
        assert!(cluster_aggregate(&[], &prev).unwrap().bits_eq(&prev));
        let a = [1.0, 5.0];
        assert!(cluster_aggregate(&[(&a, 3)], &prev).unwrap().bits_eq(&pv(&a)));
        let b = [3.0, 7.0];
        let out = cluster_aggregate(&[(&a, 2), (&b, 2)], &prev).unwrap();
        assert_eq!(out[0], 2.0);
        assert_eq!(out[1], 6.0);
    }

    fn instance() -> impl Strategy<Value = Vec<(Vec<f64>, usize)>> {
        (1usize..16, 1usize..6).prop_flat_map(|(len, k)| {
            prop::collection::vec((prop::collection::vec(-100.0f64..100.0, len), 1usize..1000), k)
        })
    }

    proptest! {
        #[test]
        fn convex_and_homogeneous(inst in instance(), scale in -10.0f64..10.0) {
            let contribs: Vec<_> = inst.iter().map(|(p, w)| WeightedContribution::new(p, *w)).collect();
            let out = weighted_mean(&contribs).unwrap();
            for j in 0..out.len() {
                let lo = inst.iter().map(|(p, _)| p[j]).fold(f64::INFINITY, f64::min);
                let hi = inst.iter().map(|(p, _)| p[j]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out[j] >= lo - 1e-12 && out[j] <= hi + 1e-12);
            }
            let scaled: Vec<Vec<f64>> = inst.iter().map(|(p, _)| p.iter().map(|v| v * scale).collect()).collect();
            let sc: Vec<_> = scaled.iter().zip(&inst).map(|(p, (_, w))| WeightedContribution::new(p, *w)).collect();
            let out_s = weighted_mean(&sc).unwrap();
            for j in 0..out.len() {
                prop_assert!((out_s[j] - scale * out[j]).abs() <= 1e-12 * (1.0 + (scale * out[j]).abs()));
            }
        }

        #[test]
        fn permutation_invariant(inst in instance()) {
            let fwd: Vec<_> = inst.iter().map(|(p, w)| WeightedContribution::new(p, *w)).collect();
            let rev: Vec<_> = fwd.iter().rev().copied().collect();
            let a = weighted_mean(&fwd).unwrap();
            let b = weighted_mean(&rev).unwrap();
            for j in 0..a.len() {
                prop_assert!((a[j] - b[j]).abs() < 1e-12);
            }
        }
    }
}
