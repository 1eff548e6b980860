//! Model poisoning attacks: the multi-round-consistent attack with its
//! adaptive variants, and the baseline attacks it is compared against.
//!
//! The consistent attack crafts every fake client's update as `k^t ⊙ s`
//! for a sign vector `s` fixed at experiment start. The magnitude vector
//! `k^t = λ^t · v^t` is rebuilt each round from the observed global-model
//! trajectory, and `λ^t` shrinks whenever a binomial window test says the
//! recent aggregated movement is uncorrelated with `s`.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::aggregation;
use crate::param::{self, ParamVector, SignVector};
use crate::rng::{self, StreamKind};

#[derive(Debug, Error, PartialEq)]
pub enum AttackError {
    #[error("this attack requires access to the genuine clients' model updates")]
    KnowledgeAbsent,
}

/// Exact upper tail `Pr(x >= hits)` of `Bin(d, 0.5)`, in log space.
///
/// Terms are summed smallest-first around the common maximum so the result
/// stays accurate to ~1e-12 relative even for large `d`.
pub fn binomial_tail_ge(d: usize, hits: usize) -> f64 {
    if hits == 0 {
        return 1.0;
    }
    if hits > d {
        return 0.0;
    }
    let ln2 = std::f64::consts::LN_2;
    // ln C(d, hits) by the product form, then the ratio recurrence.
    let mut log_c = 0.0;
    for i in 1..=hits {
        log_c += ((d - hits + i) as f64).ln() - (i as f64).ln();
    }
    let mut terms = Vec::with_capacity(d - hits + 1);
    let mut lc = log_c;
    for k in hits..=d {
        terms.push(lc - d as f64 * ln2);
        if k < d {
            lc += ((d - k) as f64).ln() - ((k + 1) as f64).ln();
        }
    }
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    terms.sort_by(f64::total_cmp);
    let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    (max + sum.ln()).exp().min(1.0)
}

/// Window-test verdict: did the recent total aggregated movement correlate
/// with the attack direction?
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowOutcome {
    Success,
    Failure,
}

/// Rejects the no-correlation hypothesis when the count of sign matches
/// between `total_delta` and `s` is binomially improbable at `p_threshold`.
pub fn hypothesis_test(
    total_delta: &ParamVector,
    s: &SignVector,
    p_threshold: f64,
) -> WindowOutcome {
    let hits = total_delta.sign_match_count(s).expect("equal dimensions");
    if binomial_tail_ge(total_delta.len(), hits) <= p_threshold {
        WindowOutcome::Success
    } else {
        WindowOutcome::Failure
    }
}

/// How the unit magnitude vector is chosen each round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitVectorMode {
    /// Estimated from the genuine residual of the previous round.
    Adaptive,
    /// Every dimension `1/sqrt(d)` (ablation).
    Same,
}

/// How the scaling factor is chosen each round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScaleMode {
    /// `c^t` times the previous global-model movement norm.
    Adaptive,
    /// A fixed large constant (ablation).
    Maximized(f64),
}

/// Persistent state of the consistent attack.
#[derive(Debug, Clone)]
pub struct AttackState {
    pub s: SignVector,
    pub c: f64,
    pub k_prev: ParamVector,
    pub e: usize,
    pub beta: f64,
    pub c_floor: f64,
    pub p_threshold: f64,
    pub unit_mode: UnitVectorMode,
    pub scale_mode: ScaleMode,
    /// Round in which the fakes first submitted (warm-up included).
    pub t_started: Option<usize>,
    /// Recent broadcast models `(round_index, w^round_index)`, enough to
    /// cover one test window.
    history: VecDeque<(usize, ParamVector)>,
    /// Outcome of the latest window test, for diagnostics.
    pub last_window: Option<WindowOutcome>,
}

impl AttackState {
    pub fn new(
        s: SignVector,
        c0: f64,
        e: usize,
        beta: f64,
        c_floor: f64,
        p_threshold: f64,
        unit_mode: UnitVectorMode,
        scale_mode: ScaleMode,
    ) -> Self {
        let d = s.len();
        Self {
            s,
            c: c0.max(c_floor),
            k_prev: ParamVector::zeros(d),
            e,
            beta,
            c_floor,
            p_threshold,
            unit_mode,
            scale_mode,
            t_started: None,
            history: VecDeque::new(),
            last_window: None,
        }
    }

    /// Records the broadcast global model at the start of round `t`
    /// (`w_latest` is `w^{t-1}`) and, at window boundaries, runs the
    /// hypothesis test on `w^{t-1} - w^{t-e}` and decays `c` on failure.
    pub fn observe(&mut self, t: usize, w_latest: &ParamVector) {
        self.history.push_back((t - 1, w_latest.clone()));
        while self.history.len() > self.e + 2 {
            self.history.pop_front();
        }
        let Some(t0) = self.t_started else { return };
        if t > t0 && (t - t0) % self.e == 0 {
            if let Some((_, w_old)) = self.history.iter().find(|(idx, _)| *idx == t - self.e) {
                let delta = w_latest.sub(w_old).expect("equal dimensions");
                let outcome = hypothesis_test(&delta, &self.s, self.p_threshold);
                self.last_window = Some(outcome);
                self.apply_window_outcome(outcome);
            }
        }
    }

    /// Success keeps `c`; failure decays it by `beta`, floored.
    pub fn apply_window_outcome(&mut self, outcome: WindowOutcome) {
        if outcome == WindowOutcome::Failure {
            self.c = (self.beta * self.c).max(self.c_floor);
        }
    }

    /// The scaling factor `λ^t` for the coming round.
    pub fn scale_factor(&self, w_latest: &ParamVector, w_before: &ParamVector) -> f64 {
        match self.scale_mode {
            ScaleMode::Adaptive => {
                self.c * w_latest.sub(w_before).expect("equal dimensions").l2_norm()
            }
            ScaleMode::Maximized(v) => v,
        }
    }

    /// Estimates the genuine clients' unit magnitude vector from the
    /// previous aggregated update, by removing the (rescaled) fake
    /// contribution and normalizing the residual's absolute value.
    ///
    /// Degenerate inputs fall back: with no prior fake contribution the
    /// residual is the aggregated update itself, and a zero residual
    /// yields the uniform vector `1/sqrt(d)`.
    pub fn unit_vector(&self, w_latest: &ParamVector, w_before: &ParamVector) -> ParamVector {
        let d = w_latest.len();
        if self.unit_mode == UnitVectorMode::Same {
            return uniform_unit(d);
        }
        let g_prev = w_latest.sub(w_before).expect("equal dimensions");
        let g_norm = g_prev.l2_norm();
        if g_norm == 0.0 {
            return uniform_unit(d);
        }
        let fake_prev =
            param::hadamard_sign(&self.k_prev, &self.s).expect("non-negative magnitudes");
        let fake_norm = fake_prev.l2_norm();
        let residual = if fake_norm > 0.0 {
            g_prev
                .sub(&fake_prev.scale(g_norm / fake_norm))
                .expect("equal dimensions")
        } else {
            g_prev
        };
        let res_norm = residual.l2_norm();
        if res_norm == 0.0 {
            return uniform_unit(d);
        }
        residual.abs().scale(1.0 / res_norm)
    }

    /// Crafts the round's shared malicious update `k^t ⊙ s` and stores
    /// `k^t`. Before two global models are known, submits zeros (warm-up).
    pub fn craft(
        &mut self,
        t: usize,
        w_latest: &ParamVector,
        w_before: Option<&ParamVector>,
    ) -> ParamVector {
        if self.t_started.is_none() {
            self.t_started = Some(t);
        }
        let Some(w_before) = w_before else {
            self.k_prev = ParamVector::zeros(w_latest.len());
            return ParamVector::zeros(w_latest.len());
        };
        let v = self.unit_vector(w_latest, w_before);
        let lambda = self.scale_factor(w_latest, w_before);
        let k = v.scale(lambda);
        let update = param::hadamard_sign(&k, &self.s).expect("non-negative magnitudes");
        self.k_prev = k;
        update
    }

    /// Sign-flip adaptation: per fake client, each dimension keeps
    /// `(k^t[j], s[j])` with probability `1 - alpha` and flips to
    /// `(eps, -s[j])` otherwise.
    pub fn adapt_sign<R: Rng>(&self, alpha: f64, eps: f64, rng: &mut R) -> ParamVector {
        let d = self.k_prev.len();
        let mut out = Vec::with_capacity(d);
        for j in 0..d {
            let sj = f64::from(self.s.get(j));
            if rng.random::<f64>() < alpha {
                out.push(eps * -sj);
            } else {
                out.push(self.k_prev.as_slice()[j] * sj);
            }
        }
        ParamVector::from_raw(out)
    }

    /// Magnitude-noise adaptation: per fake client, adds standard-normal
    /// noise rescaled to `gamma * ||k^t||` to the magnitude vector,
    /// clamping negatives to zero. Returns the update and the count of
    /// clamped dimensions.
    pub fn adapt_noise<R: Rng>(&self, gamma: f64, rng: &mut R) -> (ParamVector, usize) {
        let d = self.k_prev.len();
        let normal = StandardNormal;
        let eps: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
        let eps_norm = eps.iter().map(|x| x * x).sum::<f64>().sqrt();
        let k_norm = self.k_prev.l2_norm();
        let scale = if eps_norm > 0.0 {
            gamma * k_norm / eps_norm
        } else {
            0.0
        };
        let mut clamped = 0;
        let k_i: Vec<f64> = self
            .k_prev
            .as_slice()
            .iter()
            .zip(&eps)
            .map(|(&k, &e)| {
                let v = k + scale * e;
                if v < 0.0 {
                    clamped += 1;
                    0.0
                } else {
                    v
                }
            })
            .collect();
        let k_i = ParamVector::from_raw(k_i);
        (
            param::hadamard_sign(&k_i, &self.s).expect("non-negative magnitudes"),
            clamped,
        )
    }
}

fn uniform_unit(d: usize) -> ParamVector {
    ParamVector::from_raw(vec![1.0 / (d as f64).sqrt(); d])
}

/// Scaled standard-normal update, fresh per fake client per round.
pub fn attack_random<R: Rng>(d: usize, lambda: f64, rng: &mut R) -> ParamVector {
    let normal = StandardNormal;
    ParamVector::from_raw(
        (0..d)
            .map(|_| {
                let x: f64 = normal.sample(rng);
                lambda * x
            })
            .collect(),
    )
}

/// Pull toward a fixed attacker-chosen model: `λ (w' - w^{t-1})`.
pub fn attack_mpaf(w_target: &ParamVector, w_latest: &ParamVector, lambda: f64) -> ParamVector {
    w_target.sub(w_latest).expect("equal dimensions").scale(lambda)
}

/// Per-dimension `mean + 0.74 * std` over the genuine updates
/// (population standard deviation).
pub fn attack_lie(genuine: &[ParamVector]) -> Result<ParamVector, AttackError> {
    if genuine.is_empty() {
        return Err(AttackError::KnowledgeAbsent);
    }
    let d = genuine[0].len();
    let k = genuine.len() as f64;
    let mut out = Vec::with_capacity(d);
    for j in 0..d {
        let mean = genuine.iter().map(|g| g.as_slice()[j]).sum::<f64>() / k;
        let var = genuine
            .iter()
            .map(|g| {
                let x = g.as_slice()[j] - mean;
                x * x
            })
            .sum::<f64>()
            / k;
        out.push(mean + 0.74 * var.sqrt());
    }
    Ok(ParamVector::from_raw(out))
}

/// Directed-deviation attack against dimension-wise trimming: each
/// dimension lands just beyond the genuine range, on the side opposite to
/// the genuine mean's sign.
pub fn attack_fang_trmean(genuine: &[ParamVector]) -> Result<ParamVector, AttackError> {
    if genuine.is_empty() {
        return Err(AttackError::KnowledgeAbsent);
    }
    let d = genuine[0].len();
    let k = genuine.len() as f64;
    let mut out = Vec::with_capacity(d);
    for j in 0..d {
        let col: Vec<f64> = genuine.iter().map(|g| g.as_slice()[j]).collect();
        let mean = col.iter().sum::<f64>() / k;
        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let margin = 0.5 * (hi - lo) + 1e-6 * (1.0 + lo.abs().max(hi.abs()));
        out.push(if mean >= 0.0 { lo - margin } else { hi + margin });
    }
    Ok(ParamVector::from_raw(out))
}

/// Directed-deviation attack against closest-neighbor selection: pushes
/// `±λ` per dimension opposite to the genuine mean's sign, halving `λ`
/// until a malicious copy would be selected first.
pub fn attack_fang_krum(
    genuine: &[ParamVector],
    n_fakes: usize,
) -> Result<ParamVector, AttackError> {
    if genuine.is_empty() {
        return Err(AttackError::KnowledgeAbsent);
    }
    let mean = param::mean(genuine).expect("non-empty");
    let direction = mean.sign_of().negated();
    let avg_norm =
        genuine.iter().map(ParamVector::l2_norm).sum::<f64>() / genuine.len() as f64;
    let d = mean.len();
    let mut lambda = (avg_norm / (d as f64).sqrt()).max(f64::MIN_POSITIVE);
    for _ in 0..50 {
        let candidate = param::hadamard_sign(
            &ParamVector::from_raw(vec![lambda; d]),
            &direction,
        )
        .expect("non-negative");
        let mut pool: Vec<&ParamVector> = Vec::with_capacity(n_fakes + genuine.len());
        for _ in 0..n_fakes.max(1) {
            pool.push(&candidate);
        }
        pool.extend(genuine.iter());
        let first = aggregation::krum_select(&pool, 1);
        if first.first().is_some_and(|&i| i < n_fakes.max(1)) {
            return Ok(candidate);
        }
        lambda /= 2.0;
    }
    Ok(param::hadamard_sign(&ParamVector::from_raw(vec![lambda; d]), &direction)
        .expect("non-negative"))
}

/// Distance constraints for the optimization-based baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviationConstraint {
    /// Squared distance from the malicious update to every genuine update
    /// stays within the max squared distance between any two genuine
    /// updates.
    MinMax,
    /// Sum of squared distances to all genuine updates stays within the
    /// minimum such sum over the genuine updates themselves.
    MinSum,
    /// No constraint: the perturbation scale is fixed by the caller.
    None,
}

fn constraint_satisfied(
    malicious: &ParamVector,
    genuine: &[ParamVector],
    constraint: DeviationConstraint,
) -> bool {
    match constraint {
        DeviationConstraint::None => true,
        DeviationConstraint::MinMax => {
            let mut max_pair = 0.0f64;
            for (i, a) in genuine.iter().enumerate() {
                for b in &genuine[i + 1..] {
                    max_pair = max_pair.max(a.squared_distance(b).unwrap());
                }
            }
            genuine
                .iter()
                .all(|g| malicious.squared_distance(g).unwrap() <= max_pair)
        }
        DeviationConstraint::MinSum => {
            let bound = genuine
                .iter()
                .map(|a| {
                    genuine
                        .iter()
                        .map(|b| a.squared_distance(b).unwrap())
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min);
            let sum: f64 = genuine
                .iter()
                .map(|g| malicious.squared_distance(g).unwrap())
                .sum();
            sum <= bound
        }
    }
}

/// Optimization-based deviation attack: `mean + γ * p` with `p` the unit
/// vector opposite to the genuine mean, and `γ` the largest value that
/// still satisfies the distance constraint (bisection, 50 halvings).
pub fn attack_deviation(
    genuine: &[ParamVector],
    constraint: DeviationConstraint,
    fixed_gamma: Option<f64>,
) -> Result<ParamVector, AttackError> {
    if genuine.is_empty() {
        return Err(AttackError::KnowledgeAbsent);
    }
    let mean = param::mean(genuine).expect("non-empty");
    let mean_norm = mean.l2_norm();
    let direction = if mean_norm > 0.0 {
        mean.scale(-1.0 / mean_norm)
    } else {
        uniform_unit(mean.len()).scale(-1.0)
    };
    let at = |gamma: f64| mean.add(&direction.scale(gamma)).expect("equal dimensions");
    if let Some(gamma) = fixed_gamma {
        return Ok(at(gamma));
    }
    // Grow an infeasible upper bound, then bisect; γ = 0 is always feasible.
    let mut lo = 0.0f64;
    let mut hi = {
        let scale = genuine
            .iter()
            .map(ParamVector::l2_norm)
            .fold(0.0f64, f64::max)
            .max(1e-12);
        let mut hi = scale;
        let mut grow = 0;
        while constraint_satisfied(&at(hi), genuine, constraint) && grow < 60 {
            lo = hi;
            hi *= 2.0;
            grow += 1;
        }
        hi
    };
    if constraint_satisfied(&at(hi), genuine, constraint) {
        // Unbounded in practice; return the last feasible probe.
        return Ok(at(lo));
    }
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if constraint_satisfied(&at(mid), genuine, constraint) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(at(lo))
}

/// Per-fake rng stream for the stochastic attacks.
pub fn fake_stream(seed: u64, fake_id: usize, round: usize) -> rand_chacha::ChaCha8Rng {
    rng::stream(seed, StreamKind::Attack, fake_id as u64, round as u64)
}
