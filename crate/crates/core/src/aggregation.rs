//! Server-side aggregation and defense rules.
//!
//! Each rule consumes the round's model updates plus server context and
//! emits one aggregated vector together with the set of client ids that
//! survived filtering (for false-negative-rate diagnostics) and optional
//! per-client weights (trust scores).
//!
//! The ensemble (group-vote) and detect-then-retrain defenses wrap whole
//! training runs rather than single rounds and live in the simulator.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::data::Dataset;
use crate::learner::{self, LearnerError, ModelSpec, TrainConfig};
use crate::param::{self, ParamError, ParamVector};
use crate::rng::{self, StreamKind};

#[derive(Debug, Error)]
pub enum AggError {
    #[error("{rule} needs at least {needed} participants, got {got}")]
    TooFewParticipants {
        rule: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("trust bootstrapping requires a server root dataset")]
    MissingRootData,
    #[error("norm bounding requires a positive threshold, got {0}")]
    BadNormThreshold(f64),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
}

/// A client's per-round submission.
#[derive(Debug, Clone)]
pub struct ModelUpdate {
    pub client_id: usize,
    pub delta: ParamVector,
}

/// Everything a rule may read besides the updates themselves.
pub struct ServerContext<'a> {
    pub round: usize,
    pub w_prev: &'a ParamVector,
    /// Number of fake clients the rule is allowed to assume.
    pub m_assumed: usize,
    pub root_dataset: Option<&'a Dataset>,
    pub model_spec: &'a ModelSpec,
    pub train_cfg: &'a TrainConfig,
    pub seed: u64,
    /// Clipping threshold for norm bounding, computed by the harness from
    /// the genuine updates of the round.
    pub norm_threshold: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AggregationOutcome {
    pub aggregate: ParamVector,
    /// Ids whose updates survived filtering.
    pub accepted_ids: BTreeSet<usize>,
    /// Normalized per-client trust weights, where the rule produces them.
    pub weights: Option<Vec<(usize, f64)>>,
}

/// The per-round aggregation rules selectable by config key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggRule {
    FedAvg,
    MultiKrum,
    Median,
    TrMean,
    NormBound,
    FlTrust,
    Flame,
}

impl AggRule {
    pub fn apply(
        self,
        updates: &[ModelUpdate],
        ctx: &ServerContext,
    ) -> Result<AggregationOutcome, AggError> {
        if updates.is_empty() {
            return Err(AggError::TooFewParticipants {
                rule: self.name(),
                needed: 1,
                got: 0,
            });
        }
        let outcome = match self {
            AggRule::FedAvg => fedavg(updates)?,
            AggRule::MultiKrum => multi_krum(updates, ctx)?,
            AggRule::Median => coordinate_median(updates)?,
            AggRule::TrMean => trimmed_mean(updates, ctx)?,
            AggRule::NormBound => norm_bound(updates, ctx)?,
            AggRule::FlTrust => fltrust(updates, ctx)?,
            AggRule::Flame => flame(updates, ctx)?,
        };
        Ok(outcome)
    }

    pub fn name(self) -> &'static str {
        match self {
            AggRule::FedAvg => "fedavg",
            AggRule::MultiKrum => "multikrum",
            AggRule::Median => "median",
            AggRule::TrMean => "trmean",
            AggRule::NormBound => "normbound",
            AggRule::FlTrust => "fltrust",
            AggRule::Flame => "flame",
        }
    }
}

fn all_ids(updates: &[ModelUpdate]) -> BTreeSet<usize> {
    updates.iter().map(|u| u.client_id).collect()
}

fn deltas(updates: &[ModelUpdate]) -> Vec<ParamVector> {
    updates.iter().map(|u| u.delta.clone()).collect()
}

/// Unweighted mean of all updates.
pub fn fedavg(updates: &[ModelUpdate]) -> Result<AggregationOutcome, AggError> {
    let aggregate = param::mean(&deltas(updates))?;
    Ok(AggregationOutcome {
        aggregate,
        accepted_ids: all_ids(updates),
        weights: None,
    })
}

/// Per-dimension median; mean of the two middle values for an even count.
pub fn coordinate_median(updates: &[ModelUpdate]) -> Result<AggregationOutcome, AggError> {
    let d = updates[0].delta.len();
    let k = updates.len();
    let mut column = vec![0.0; k];
    let mut out = vec![0.0; d];
    for (j, slot) in out.iter_mut().enumerate() {
        for (c, u) in column.iter_mut().zip(updates) {
            *c = u.delta.as_slice()[j];
        }
        column.sort_by(f64::total_cmp);
        *slot = if k % 2 == 1 {
            column[k / 2]
        } else {
            (column[k / 2 - 1] + column[k / 2]) / 2.0
        };
    }
    Ok(AggregationOutcome {
        aggregate: ParamVector::from_raw(out),
        accepted_ids: all_ids(updates),
        weights: None,
    })
}

/// Per-dimension mean after trimming `m_assumed` values from each tail.
pub fn trimmed_mean(
    updates: &[ModelUpdate],
    ctx: &ServerContext,
) -> Result<AggregationOutcome, AggError> {
    let k = updates.len();
    let m = ctx.m_assumed;
    if k <= 2 * m {
        return Err(AggError::TooFewParticipants {
            rule: "trmean",
            needed: 2 * m + 1,
            got: k,
        });
    }
    let d = updates[0].delta.len();
    let mut column = vec![0.0; k];
    let mut out = vec![0.0; d];
    for (j, slot) in out.iter_mut().enumerate() {
        for (c, u) in column.iter_mut().zip(updates) {
            *c = u.delta.as_slice()[j];
        }
        column.sort_by(f64::total_cmp);
        let kept = &column[m..k - m];
        *slot = kept.iter().sum::<f64>() / kept.len() as f64;
    }
    Ok(AggregationOutcome {
        aggregate: ParamVector::from_raw(out),
        accepted_ids: all_ids(updates),
        weights: None,
    })
}

/// Clips every update whose norm exceeds the threshold down to it, then
/// averages.
pub fn norm_bound(
    updates: &[ModelUpdate],
    ctx: &ServerContext,
) -> Result<AggregationOutcome, AggError> {
    let threshold = ctx.norm_threshold.unwrap_or(f64::NAN);
    if !(threshold > 0.0) {
        return Err(AggError::BadNormThreshold(threshold));
    }
    let clipped: Vec<ParamVector> = updates
        .iter()
        .map(|u| {
            let norm = u.delta.l2_norm();
            if norm > threshold {
                u.delta.scale(threshold / norm)
            } else {
                u.delta.clone()
            }
        })
        .collect();
    Ok(AggregationOutcome {
        aggregate: param::mean(&clipped)?,
        accepted_ids: all_ids(updates),
        weights: None,
    })
}

/// Iterative closest-neighbor selection.
///
/// Scores every candidate in the remaining pool by the sum of squared
/// Euclidean distances to its closest `pool_size - 2` peers, selects the
/// minimum (ties to the lowest client id), removes it from the pool, and
/// rescores, until `participants - m_assumed` updates are chosen. The
/// aggregate is the mean of the selected updates.
pub fn multi_krum(
    updates: &[ModelUpdate],
    ctx: &ServerContext,
) -> Result<AggregationOutcome, AggError> {
    let k = updates.len();
    if k <= 2 {
        return Err(AggError::TooFewParticipants {
            rule: "multikrum",
            needed: 3,
            got: k,
        });
    }
    let n_select = k.saturating_sub(ctx.m_assumed).max(1);
    let deltas: Vec<&ParamVector> = updates.iter().map(|u| &u.delta).collect();
    let selected = krum_select(&deltas, n_select);
    let chosen: Vec<ParamVector> = selected.iter().map(|&i| updates[i].delta.clone()).collect();
    Ok(AggregationOutcome {
        aggregate: param::mean(&chosen)?,
        accepted_ids: selected.iter().map(|&i| updates[i].client_id).collect(),
        weights: None,
    })
}

/// The selection core of the iterative closest-neighbor rule, exposed so
/// rule-aware attackers can simulate the server's choice.
///
/// Repeatedly scores each pool member by the sum of squared distances to
/// its closest `pool_size - 2` peers, removes the minimum (ties to the
/// lowest index), until `n_select` indices are chosen.
pub fn krum_select(deltas: &[&ParamVector], n_select: usize) -> Vec<usize> {
    let k = deltas.len();
    let mut dist2 = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let d2 = deltas[i]
                .squared_distance(deltas[j])
                .expect("equal dimensions");
            dist2[i][j] = d2;
            dist2[j][i] = d2;
        }
    }
    let mut pool: Vec<usize> = (0..k).collect();
    let mut selected: Vec<usize> = Vec::with_capacity(n_select);
    while selected.len() < n_select && pool.len() > 2 {
        let neighbors = pool.len() - 2;
        let mut best: Option<(f64, usize)> = None;
        for &i in &pool {
            let mut ds: Vec<f64> = pool
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| dist2[i][j])
                .collect();
            ds.sort_by(f64::total_cmp);
            let score: f64 = ds[..neighbors].iter().sum();
            let better = match best {
                None => true,
                Some((s, b)) => score < s || (score == s && i < b),
            };
            if better {
                best = Some((score, i));
            }
        }
        let (_, chosen) = best.unwrap();
        selected.push(chosen);
        pool.retain(|&i| i != chosen);
    }
    // Pool too small to score: fill the quota in index order.
    while selected.len() < n_select && !pool.is_empty() {
        selected.push(pool.remove(0));
    }
    selected
}

/// Trust bootstrapping from a clean server-side root dataset.
///
/// The server trains its own root update, scores each client by the
/// clipped cosine similarity to it, rescales every update to the root
/// update's norm, and takes the trust-weighted mean.
pub fn fltrust(
    updates: &[ModelUpdate],
    ctx: &ServerContext,
) -> Result<AggregationOutcome, AggError> {
    let root = ctx.root_dataset.ok_or(AggError::MissingRootData)?;
    let rows: Vec<usize> = (0..root.len()).collect();
    let mut rng = rng::stream(ctx.seed, StreamKind::Defense, ctx.round as u64, 1);
    let g0 = learner::local_train(ctx.model_spec, ctx.w_prev, root, &rows, ctx.train_cfg, &mut rng)?;
    let g0_norm = g0.l2_norm();
    let d = updates[0].delta.len();

    let mut trust = Vec::with_capacity(updates.len());
    for u in updates {
        let score = u.delta.cosine(&g0)?.max(0.0);
        trust.push(score);
    }
    let total: f64 = trust.iter().sum();
    let mut aggregate = ParamVector::zeros(d);
    let mut accepted = BTreeSet::new();
    if total > 0.0 {
        for (u, &score) in updates.iter().zip(&trust) {
            if score <= 0.0 {
                continue;
            }
            accepted.insert(u.client_id);
            let norm = u.delta.l2_norm();
            let rescaled = if norm > 0.0 {
                u.delta.scale(g0_norm / norm)
            } else {
                ParamVector::zeros(d)
            };
            aggregate.add_assign(&rescaled.scale(score / total))?;
        }
    }
    let weights = updates
        .iter()
        .zip(&trust)
        .map(|(u, &s)| (u.client_id, if total > 0.0 { s / total } else { 0.0 }))
        .collect();
    Ok(AggregationOutcome {
        aggregate,
        accepted_ids: accepted,
        weights: Some(weights),
    })
}

/// Cosine-similarity clustering over local models, majority-cluster
/// admission, then norm clipping to the survivors' median norm.
///
/// Clustering is agglomerative single linkage on cosine distance between
/// `w_prev + g_i`, merged until the largest cluster holds a majority of
/// participants.
pub fn flame(
    updates: &[ModelUpdate],
    ctx: &ServerContext,
) -> Result<AggregationOutcome, AggError> {
    let k = updates.len();
    if k < 3 {
        return Err(AggError::TooFewParticipants {
            rule: "flame",
            needed: 3,
            got: k,
        });
    }
    let locals: Vec<ParamVector> = updates
        .iter()
        .map(|u| ctx.w_prev.add(&u.delta))
        .collect::<Result<_, _>>()?;
    let mut dist = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let d = 1.0 - locals[i].cosine(&locals[j])?;
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    // Full single-linkage dendrogram, then a cut at the largest gap in the
    // merge-distance sequence among the states whose biggest cluster already
    // holds a majority. If no positive gap exists past that point the data
    // shows one tight cluster and everyone is admitted.
    let majority = k / 2 + 1;
    let mut work: Vec<Vec<usize>> = (0..k).map(|i| vec![i]).collect();
    // (merge distance of the step that *produced* this state, snapshot)
    let mut states: Vec<(f64, Vec<Vec<usize>>)> = vec![(0.0, work.clone())];
    while work.len() > 1 {
        let mut best = (f64::INFINITY, 0, 1);
        for a in 0..work.len() {
            for b in a + 1..work.len() {
                let mut link = f64::INFINITY;
                for &i in &work[a] {
                    for &j in &work[b] {
                        link = link.min(dist[i][j]);
                    }
                }
                if link < best.0 {
                    best = (link, a, b);
                }
            }
        }
        let (link, a, b) = best;
        let merged = work.remove(b);
        work[a].extend(merged);
        states.push((link, work.clone()));
    }
    let first_majority = states
        .iter()
        .position(|(_, cs)| cs.iter().map(Vec::len).max().unwrap() >= majority)
        .expect("final state is one cluster");
    let mut chosen = states.len() - 1;
    let mut best_gap = 0.0;
    for i in first_majority..states.len() - 1 {
        let gap = states[i + 1].0 - states[i].0;
        if gap > best_gap {
            best_gap = gap;
            chosen = i;
        }
    }
    let clusters = &states[chosen].1;
    let admitted = clusters
        .iter()
        .max_by_key(|c| (c.len(), std::cmp::Reverse(c.iter().min().copied())))
        .unwrap()
        .clone();

    let mut norms: Vec<f64> = admitted
        .iter()
        .map(|&i| updates[i].delta.l2_norm())
        .collect();
    norms.sort_by(f64::total_cmp);
    let median_norm = if norms.len() % 2 == 1 {
        norms[norms.len() / 2]
    } else {
        (norms[norms.len() / 2 - 1] + norms[norms.len() / 2]) / 2.0
    };
    let clipped: Vec<ParamVector> = admitted
        .iter()
        .map(|&i| {
            let norm = updates[i].delta.l2_norm();
            if norm > median_norm && norm > 0.0 {
                updates[i].delta.scale(median_norm / norm)
            } else {
                updates[i].delta.clone()
            }
        })
        .collect();
    Ok(AggregationOutcome {
        aggregate: param::mean(&clipped)?,
        accepted_ids: admitted.iter().map(|&i| updates[i].client_id).collect(),
        weights: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn upd(id: usize, v: &[f64]) -> ModelUpdate {
        ModelUpdate {
            client_id: id,
            delta: ParamVector::new(v.to_vec()).unwrap(),
        }
    }

    fn dummy_ctx<'a>(
        w_prev: &'a ParamVector,
        spec: &'a ModelSpec,
        cfg: &'a TrainConfig,
        m_assumed: usize,
    ) -> ServerContext<'a> {
        ServerContext {
            round: 1,
            w_prev,
            m_assumed,
            root_dataset: None,
            model_spec: spec,
            train_cfg: cfg,
            seed: 0,
            norm_threshold: None,
        }
    }

    fn fixture() -> (ModelSpec, TrainConfig) {
        (
            ModelSpec::new(vec![2, 2]).unwrap(),
            TrainConfig {
                learning_rate: 0.1,
                local_epochs: 1,
                batch_size: 8,
            },
        )
    }

    #[test]
    fn fedavg_examples() {
        let out = fedavg(&[upd(0, &[1.0, 1.0]), upd(1, &[3.0, 3.0])]).unwrap();
        assert_eq!(out.aggregate.as_slice(), &[2.0, 2.0]);

        let single = fedavg(&[upd(0, &[4.0, -2.0])]).unwrap();
        assert_eq!(single.aggregate.as_slice(), &[4.0, -2.0]);

        let three = fedavg(&[
            upd(0, &[1.0, 0.0]),
            upd(1, &[0.0, 1.0]),
            upd(2, &[-1.0, -1.0]),
        ])
        .unwrap();
        assert_eq!(three.aggregate.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn median_examples() {
        let out = coordinate_median(&[upd(0, &[1.0]), upd(1, &[2.0]), upd(2, &[9.0])]).unwrap();
        assert_eq!(out.aggregate.as_slice(), &[2.0]);
        let even = coordinate_median(&[upd(0, &[1.0]), upd(1, &[3.0])]).unwrap();
        assert_eq!(even.aggregate.as_slice(), &[2.0]);
    }

    #[test]
    fn median_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (spec, cfg) = fixture();
        let w_prev = ParamVector::zeros(4);
        let _ = dummy_ctx(&w_prev, &spec, &cfg, 0);
        for _ in 0..20 {
            let updates: Vec<ModelUpdate> = (0..7)
                .map(|id| {
                    upd(
                        id,
                        &(0..4)
                            .map(|_| rng.random::<f64>() * 4.0 - 2.0)
                            .collect::<Vec<_>>(),
                    )
                })
                .collect();
            let out = coordinate_median(&updates).unwrap();
            for j in 0..4 {
                let mut col: Vec<f64> = updates.iter().map(|u| u.delta.as_slice()[j]).collect();
                col.sort_by(f64::total_cmp);
                assert_eq!(out.aggregate.as_slice()[j], col[3]);
            }
        }
    }

    #[test]
    fn trmean_examples_and_degenerate() {
        let (spec, cfg) = fixture();
        let w_prev = ParamVector::zeros(1);
        let updates = [
            upd(0, &[1.0]),
            upd(1, &[2.0]),
            upd(2, &[3.0]),
            upd(3, &[100.0]),
        ];
        let ctx = dummy_ctx(&w_prev, &spec, &cfg, 1);
        let out = trimmed_mean(&updates, &ctx).unwrap();
        assert_eq!(out.aggregate.as_slice(), &[2.5]);

        let ctx0 = dummy_ctx(&w_prev, &spec, &cfg, 0);
        let trimmed0 = trimmed_mean(&updates, &ctx0).unwrap();
        let avg = fedavg(&updates).unwrap();
        assert_eq!(trimmed0.aggregate, avg.aggregate);

        let ctx2 = dummy_ctx(&w_prev, &spec, &cfg, 2);
        assert!(matches!(
            trimmed_mean(&updates, &ctx2),
            Err(AggError::TooFewParticipants { .. })
        ));
    }

    #[test]
    fn median_and_trmean_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (spec, cfg) = fixture();
        let w_prev = ParamVector::zeros(3);
        let ctx = dummy_ctx(&w_prev, &spec, &cfg, 2);
        let mut updates: Vec<ModelUpdate> = (0..9)
            .map(|id| {
                upd(
                    id,
                    &(0..3)
                        .map(|_| rng.random::<f64>() * 10.0 - 5.0)
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        let med = coordinate_median(&updates).unwrap().aggregate;
        let trm = trimmed_mean(&updates, &ctx).unwrap().aggregate;
        updates.reverse();
        updates.swap(0, 4);
        assert_eq!(coordinate_median(&updates).unwrap().aggregate, med);
        assert_eq!(trimmed_mean(&updates, &ctx).unwrap().aggregate, trm);
    }

    #[test]
    fn norm_bound_clips_to_threshold() {
        let (spec, cfg) = fixture();
        let w_prev = ParamVector::zeros(2);
        let mut ctx = dummy_ctx(&w_prev, &spec, &cfg, 0);
        ctx.norm_threshold = Some(5.0);

        // Single update of norm 10 contributes with norm exactly 5.
        let out = norm_bound(&[upd(0, &[6.0, 8.0])], &ctx).unwrap();
        assert!((out.aggregate.l2_norm() - 5.0).abs() < 1e-12);

        // All norms below the threshold: identical to plain averaging.
        let small = [upd(0, &[1.0, 0.0]), upd(1, &[0.0, 2.0])];
        let bounded = norm_bound(&small, &ctx).unwrap();
        let avg = fedavg(&small).unwrap();
        assert_eq!(bounded.aggregate, avg.aggregate);
    }

    #[test]
    fn multi_krum_rejects_far_outlier() {
        let (spec, cfg) = fixture();
        let w_prev = ParamVector::zeros(2);
        let ctx = dummy_ctx(&w_prev, &spec, &cfg, 1);
        let updates = [
            upd(0, &[1.0, 1.0]),
            upd(1, &[1.0, 1.01]),
            upd(2, &[0.99, 1.0]),
            upd(3, &[1.01, 0.99]),
            upd(4, &[500.0, -500.0]),
        ];
        let out = multi_krum(&updates, &ctx).unwrap();
        assert!(!out.accepted_ids.contains(&4));
        assert_eq!(out.accepted_ids.len(), 4);
    }

    #[test]
    fn multi_krum_identical_updates() {
        let (spec, cfg) = fixture();
        let w_prev = ParamVector::zeros(2);
        let ctx = dummy_ctx(&w_prev, &spec, &cfg, 1);
        let updates: Vec<ModelUpdate> = (0..5).map(|id| upd(id, &[2.0, -1.0])).collect();
        let out = multi_krum(&updates, &ctx).unwrap();
        assert_eq!(out.aggregate.as_slice(), &[2.0, -1.0]);
    }

    /// Brute-force reference for the iterative selection, recomputing all
    /// scores from scratch each step.
    fn krum_oracle(updates: &[ModelUpdate], n_select: usize) -> Vec<usize> {
        let mut pool: Vec<usize> = (0..updates.len()).collect();
        let mut selected = Vec::new();
        while selected.len() < n_select && pool.len() > 2 {
            let neighbors = pool.len() - 2;
            let mut scored: Vec<(f64, usize, usize)> = pool
                .iter()
                .map(|&i| {
                    let mut ds: Vec<f64> = pool
                        .iter()
                        .filter(|&&j| j != i)
                        .map(|&j| {
                            updates[i]
                                .delta
                                .squared_distance(&updates[j].delta)
                                .unwrap()
                        })
                        .collect();
                    ds.sort_by(f64::total_cmp);
                    (ds[..neighbors].iter().sum(), updates[i].client_id, i)
                })
                .collect();
            scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let chosen = scored[0].2;
            selected.push(chosen);
            pool.retain(|&i| i != chosen);
        }
        while selected.len() < n_select {
            selected.push(pool.remove(0));
        }
        selected
    }

    #[test]
    fn multi_krum_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (spec, cfg) = fixture();
        for _ in 0..50 {
            let k = 4 + (rng.random::<u32>() % 5) as usize;
            let d = 2 + (rng.random::<u32>() % 4) as usize;
            let m = (rng.random::<u32>() % 3) as usize;
            let updates: Vec<ModelUpdate> = (0..k)
                .map(|id| {
                    upd(
                        id,
                        &(0..d)
                            .map(|_| rng.random::<f64>() * 8.0 - 4.0)
                            .collect::<Vec<_>>(),
                    )
                })
                .collect();
            let w_prev = ParamVector::zeros(d);
            let ctx = dummy_ctx(&w_prev, &spec, &cfg, m);
            let out = multi_krum(&updates, &ctx).unwrap();
            let expected: BTreeSet<usize> = krum_oracle(&updates, k.saturating_sub(m).max(1))
                .into_iter()
                .map(|i| updates[i].client_id)
                .collect();
            assert_eq!(out.accepted_ids, expected);
        }
    }

    #[test]
    fn fltrust_spec_examples() {
        use crate::data::make_blobs;
        let spec = ModelSpec::new(vec![4, 3]).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.1,
            local_epochs: 1,
            batch_size: 8,
        };
        let root = make_blobs(3, 5, 4, 0.5, 11);
        let mut init_rng = rng::stream(11, StreamKind::ModelInit, 0, 0);
        let w_prev = spec.init_params(&mut init_rng);
        let ctx = ServerContext {
            round: 3,
            w_prev: &w_prev,
            m_assumed: 0,
            root_dataset: Some(&root),
            model_spec: &spec,
            train_cfg: &cfg,
            seed: 11,
            norm_threshold: None,
        };
        // Recompute the root update the same way the rule does.
        let rows: Vec<usize> = (0..root.len()).collect();
        let mut root_rng = rng::stream(11, StreamKind::Defense, 3, 1);
        let g0 =
            learner::local_train(&spec, &w_prev, &root, &rows, &cfg, &mut root_rng).unwrap();

        // Everyone equals the root update: the aggregate is the root update.
        let updates: Vec<ModelUpdate> = (0..4)
            .map(|id| ModelUpdate {
                client_id: id,
                delta: g0.clone(),
            })
            .collect();
        let out = fltrust(&updates, &ctx).unwrap();
        for (a, b) in out.aggregate.as_slice().iter().zip(g0.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }

        // A single opposite-direction client is clipped to zero trust.
        let against = [ModelUpdate {
            client_id: 0,
            delta: g0.scale(-1.0),
        }];
        let out = fltrust(&against, &ctx).unwrap();
        assert_eq!(out.aggregate, ParamVector::zeros(g0.len()));
        assert!(out.accepted_ids.is_empty());
    }

    #[test]
    fn fltrust_weight_normalization() {
        use crate::data::make_blobs;
        let spec = ModelSpec::new(vec![4, 3]).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.1,
            local_epochs: 1,
            batch_size: 8,
        };
        let root = make_blobs(3, 5, 4, 0.5, 12);
        let mut init_rng = rng::stream(12, StreamKind::ModelInit, 0, 0);
        let w_prev = spec.init_params(&mut init_rng);
        let ctx = ServerContext {
            round: 5,
            w_prev: &w_prev,
            m_assumed: 0,
            root_dataset: Some(&root),
            model_spec: &spec,
            train_cfg: &cfg,
            seed: 12,
            norm_threshold: None,
        };
        let rows: Vec<usize> = (0..root.len()).collect();
        let mut root_rng = rng::stream(12, StreamKind::Defense, 5, 1);
        let g0 =
            learner::local_train(&spec, &w_prev, &root, &rows, &cfg, &mut root_rng).unwrap();

        // Client 0 at cosine 1, client 1 at cosine 0.5 with equal norms.
        // Build the 0.5-cosine vector inside span(g0, e) via Gram-Schmidt.
        let e = {
            let mut v = ParamVector::zeros(g0.len());
            v.as_mut_slice()[0] = 1.0;
            let proj = g0.scale(v.dot(&g0).unwrap() / g0.dot(&g0).unwrap());
            let orth = v.sub(&proj).unwrap();
            orth.scale(1.0 / orth.l2_norm())
        };
        let unit_g0 = g0.scale(1.0 / g0.l2_norm());
        let half = unit_g0
            .scale(0.5)
            .add(&e.scale((0.75f64).sqrt()))
            .unwrap()
            .scale(g0.l2_norm());
        let updates = [
            ModelUpdate {
                client_id: 0,
                delta: g0.clone(),
            },
            ModelUpdate {
                client_id: 1,
                delta: half,
            },
        ];
        let out = fltrust(&updates, &ctx).unwrap();
        let weights = out.weights.unwrap();
        assert!((weights[0].1 - 2.0 / 3.0).abs() < 1e-9, "{weights:?}");
        assert!((weights[1].1 - 1.0 / 3.0).abs() < 1e-9, "{weights:?}");
    }

    #[test]
    fn flame_filters_opposite_direction() {
        let (spec, cfg) = fixture();
        let d = 3;
        let w_prev = ParamVector::zeros(d);
        let ctx = ServerContext {
            round: 1,
            w_prev: &w_prev,
            m_assumed: 1,
            root_dataset: None,
            model_spec: &spec,
            train_cfg: &cfg,
            seed: 0,
            norm_threshold: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut updates: Vec<ModelUpdate> = (0..9)
            .map(|id| {
                let jitter: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 0.01).collect();
                upd(id, &[1.0 + jitter[0], 2.0 + jitter[1], -1.0 + jitter[2]])
            })
            .collect();
        updates.push(upd(9, &[-1.0, -2.0, 1.0]));
        let out = flame(&updates, &ctx).unwrap();
        assert!(!out.accepted_ids.contains(&9));
        assert_eq!(out.accepted_ids.len(), 9);
    }

    #[test]
    fn flame_identical_updates_pass_through() {
        let (spec, cfg) = fixture();
        let w_prev = ParamVector::zeros(2);
        let ctx = dummy_ctx(&w_prev, &spec, &cfg, 0);
        let updates: Vec<ModelUpdate> = (0..5).map(|id| upd(id, &[0.5, -0.25])).collect();
        let out = flame(&updates, &ctx).unwrap();
        assert_eq!(out.accepted_ids.len(), 5);
        assert_eq!(out.aggregate.as_slice(), &[0.5, -0.25]);
    }
}
