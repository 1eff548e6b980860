//! Countermeasures tailored to the consistent attack: two GMM-based
//! detectors over per-client features and a total-update normalization
//! applied at the end of training.
//!
//! Both detectors exploit the attack's defining property — fake updates
//! never flip signs and coincide with each other — which drives their
//! features to exactly zero, while genuine SGD updates are noisy.

use std::collections::BTreeSet;

use rand::Rng;

use crate::param::ParamVector;

/// Two-component 1-D Gaussian mixture.
#[derive(Debug, Clone, Copy)]
pub struct Gmm1D {
    pub means: (f64, f64),
    pub stds: (f64, f64),
    pub weights: (f64, f64),
}

impl Gmm1D {
    /// Posterior responsibility of component 0 for a sample.
    pub fn responsibility0(&self, x: f64) -> f64 {
        let p0 = self.weights.0 * normal_pdf(x, self.means.0, self.stds.0);
        let p1 = self.weights.1 * normal_pdf(x, self.means.1, self.stds.1);
        if p0 + p1 == 0.0 {
            // Both tails underflowed: assign by distance to the means.
            return if (x - self.means.0).abs() <= (x - self.means.1).abs() {
                1.0
            } else {
                0.0
            };
        }
        p0 / (p0 + p1)
    }

    /// The caveat rule: clusters count as separated only when the mean gap
    /// is at least both intra-cluster standard deviations.
    pub fn separable(&self) -> bool {
        (self.means.0 - self.means.1).abs() >= self.stds.0.max(self.stds.1)
    }
}

fn normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// Fits a two-component mixture by EM with multiple restarts, keeping the
/// solution with the best log-likelihood. Each restart runs to tolerance
/// 1e-8 or 500 iterations; standard deviations are floored at
/// `1e-9 * range` so point masses stay finite. Deterministic inits (the
/// sample extremes and the quartiles) are tried alongside four
/// k-means++-style draws from `rng`, which protects against the classic
/// failure mode where one wide component swallows both clusters.
pub fn gmm_fit_1d<R: Rng>(samples: &[f64], rng: &mut R) -> Gmm1D {
    assert!(samples.len() >= 4, "need at least 4 samples");
    let n = samples.len();
    let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let floor = (1e-9 * range).max(f64::MIN_POSITIVE);

    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut inits = vec![(lo, hi), (sorted[n / 4], sorted[(3 * n) / 4])];
    for _ in 0..4 {
        // k-means++-style seeding: first center uniform, second weighted
        // by squared distance to the first.
        let c0 = samples[rng.random_range(0..n)];
        let d2: Vec<f64> = samples.iter().map(|&x| (x - c0) * (x - c0)).collect();
        let total: f64 = d2.iter().sum();
        let c1 = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = samples[n - 1];
            for (i, &w) in d2.iter().enumerate() {
                if target <= w {
                    pick = samples[i];
                    break;
                }
                target -= w;
            }
            pick
        } else {
            c0
        };
        inits.push((c0, c1));
    }

    // A floored-sigma component holding a single sample has unbounded
    // likelihood; prefer fits whose components each carry at least two
    // samples' worth of weight so the result describes clusters, not
    // outliers. Degenerate fits are kept only as a last resort.
    let min_weight = 2.0 / n as f64;
    let mut best: Option<(Gmm1D, f64)> = None;
    let mut best_any: Option<(Gmm1D, f64)> = None;
    let consider = |gmm: Gmm1D,
                    ll: f64,
                    best: &mut Option<(Gmm1D, f64)>,
                    best_any: &mut Option<(Gmm1D, f64)>| {
        if best_any.as_ref().is_none_or(|(_, b)| ll > *b) {
            *best_any = Some((gmm, ll));
        }
        if gmm.weights.0 < min_weight || gmm.weights.1 < min_weight {
            return;
        }
        if best.as_ref().is_none_or(|(_, b)| ll > *b) {
            *best = Some((gmm, ll));
        }
    };
    for (c0, c1) in inits {
        let init_sigma = (range / 4.0).max(floor);
        let init = Gmm1D {
            means: (c0, c1),
            stds: (init_sigma, init_sigma),
            weights: (0.5, 0.5),
        };
        let (gmm, ll) = em_from(samples, init, floor);
        consider(gmm, ll, &mut best, &mut best_any);
    }
    // Hard splits of the sorted samples, scored by likelihood of their
    // empirical two-cluster model: rescues tight clusters (e.g. identical
    // feature values) that the wide-sigma inits above merge into one
    // component.
    if let Some(init) = best_split_init(&sorted, floor) {
        let (gmm, ll) = em_from(samples, init, floor);
        consider(gmm, ll, &mut best, &mut best_any);
    }
    best.or(best_any).expect("at least one init").0
}

fn best_split_init(sorted: &[f64], floor: f64) -> Option<Gmm1D> {
    let n = sorted.len();
    let moments = |part: &[f64]| {
        let m = part.iter().sum::<f64>() / part.len() as f64;
        let v = part.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / part.len() as f64;
        (m, v.sqrt().max(floor))
    };
    if n < 4 {
        return None;
    }
    let mut best: Option<(Gmm1D, f64)> = None;
    for split in 2..=(n - 2) {
        if sorted[split] <= sorted[split - 1] {
            continue;
        }
        let (mu0, sd0) = moments(&sorted[..split]);
        let (mu1, sd1) = moments(&sorted[split..]);
        let cand = Gmm1D {
            means: (mu0, mu1),
            stds: (sd0, sd1),
            weights: (split as f64 / n as f64, (n - split) as f64 / n as f64),
        };
        let ll = log_likelihood(sorted, &cand);
        if best.as_ref().is_none_or(|(_, b)| ll > *b) {
            best = Some((cand, ll));
        }
    }
    best.map(|(g, _)| g)
}

fn log_likelihood(samples: &[f64], gmm: &Gmm1D) -> f64 {
    samples
        .iter()
        .map(|&x| {
            let p = gmm.weights.0 * normal_pdf(x, gmm.means.0, gmm.stds.0)
                + gmm.weights.1 * normal_pdf(x, gmm.means.1, gmm.stds.1);
            p.max(f64::MIN_POSITIVE).ln()
        })
        .sum()
}

fn em_from(samples: &[f64], init: Gmm1D, floor: f64) -> (Gmm1D, f64) {
    let n = samples.len();
    let mut gmm = init;
    let mut prev_ll = f64::NEG_INFINITY;
    for _ in 0..500 {
        // E-step.
        let resp: Vec<f64> = samples.iter().map(|&x| gmm.responsibility0(x)).collect();
        // M-step.
        let r0: f64 = resp.iter().sum();
        let r1 = n as f64 - r0;
        if r0 == 0.0 || r1 == 0.0 {
            break;
        }
        let mu0 = samples.iter().zip(&resp).map(|(&x, &r)| r * x).sum::<f64>() / r0;
        let mu1 = samples
            .iter()
            .zip(&resp)
            .map(|(&x, &r)| (1.0 - r) * x)
            .sum::<f64>()
            / r1;
        let var0 = samples
            .iter()
            .zip(&resp)
            .map(|(&x, &r)| r * (x - mu0) * (x - mu0))
            .sum::<f64>()
            / r0;
        let var1 = samples
            .iter()
            .zip(&resp)
            .map(|(&x, &r)| (1.0 - r) * (x - mu1) * (x - mu1))
            .sum::<f64>()
            / r1;
        gmm = Gmm1D {
            means: (mu0, mu1),
            stds: (var0.sqrt().max(floor), var1.sqrt().max(floor)),
            weights: (r0 / n as f64, r1 / n as f64),
        };
        let ll = log_likelihood(samples, &gmm);
        if (ll - prev_ll).abs() < 1e-8 {
            prev_ll = ll;
            break;
        }
        prev_ll = ll;
    }
    (gmm, prev_ll)
}

/// Number of sign-flipped dimensions between a client's consecutive
/// submissions, summed over its last `N` consecutive participation pairs.
///
/// `history` holds the client's submitted updates in participation order
/// (most recent last). Returns `None` when fewer than 2 participations are
/// available, in which case the client is excluded from this detection
/// round.
pub fn gmm_sign_feature(history: &[ParamVector], n_window: usize) -> Option<f64> {
    if history.len() < 2 {
        return None;
    }
    let pairs = (history.len() - 1).min(n_window);
    let mut flips = 0usize;
    for w in history.len() - pairs..history.len() {
        let prev = history[w - 1].sign_of();
        let cur = history[w].sign_of();
        flips += prev
            .as_slice()
            .iter()
            .zip(cur.as_slice())
            .filter(|(a, b)| a != b)
            .count();
    }
    Some(flips as f64)
}

/// Average squared distance from update `i` to its closest `m - 1` peers
/// in one round's submissions.
pub fn magnitude_round_term(round: &[ParamVector], i: usize, m: usize) -> Option<f64> {
    assert!(m >= 2, "need an assumed fake count of at least 2");
    if round.len() < m {
        return None;
    }
    let mut dists: Vec<f64> = round
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, g)| round[i].squared_distance(g).expect("equal dimensions"))
        .collect();
    dists.sort_by(f64::total_cmp);
    Some(dists.iter().take(m - 1).sum::<f64>() / (m - 1) as f64)
}

/// Which mixture component is flagged as the fake cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WhichCluster {
    LowerIsFake,
    HigherIsFake,
}

#[derive(Debug, Clone)]
pub struct DetectionVerdict {
    pub detected_ids: BTreeSet<usize>,
    pub clusters_separable: bool,
}

/// Clusters per-client features with a two-component GMM and flags one
/// cluster. When the mean gap is below both cluster standard deviations
/// the features are deemed inseparable and nobody is flagged.
pub fn detect<R: Rng>(
    features: &[(usize, f64)],
    which: WhichCluster,
    rng: &mut R,
) -> DetectionVerdict {
    assert!(features.len() >= 4, "need at least 4 clients");
    let samples: Vec<f64> = features.iter().map(|&(_, x)| x).collect();
    let gmm = gmm_fit_1d(&samples, rng);
    if !gmm.separable() {
        return DetectionVerdict {
            detected_ids: BTreeSet::new(),
            clusters_separable: false,
        };
    }
    let flag_component0 = match which {
        WhichCluster::LowerIsFake => gmm.means.0 <= gmm.means.1,
        WhichCluster::HigherIsFake => gmm.means.0 > gmm.means.1,
    };
    let detected_ids = features
        .iter()
        .filter(|&&(_, x)| (gmm.responsibility0(x) >= 0.5) == flag_component0)
        .map(|&(id, _)| id)
        .collect();
    DetectionVerdict {
        detected_ids,
        clusters_separable: true,
    }
}

/// Rescales the total update to norm `b` while preserving its direction:
/// `w⁰ + b·(wᵀ−w⁰)/‖wᵀ−w⁰‖`. A zero total update returns `w_init`.
pub fn normalize_total_update(
    w_final: &ParamVector,
    w_init: &ParamVector,
    b: f64,
) -> ParamVector {
    assert!(b > 0.0, "normalization bound must be positive");
    let total = w_final.sub(w_init).expect("equal dimensions");
    let norm = total.l2_norm();
    if norm == 0.0 {
        return w_init.clone();
    }
    w_init.add(&total.scale(b / norm)).expect("equal dimensions")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, StreamKind};

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    fn test_rng(tag: u64) -> rand_chacha::ChaCha8Rng {
        rng::stream(1234, StreamKind::Defense, tag, 0)
    }

    #[test]
    fn gmm_separates_two_spikes() {
        let mut samples = vec![0.0; 10];
        samples.extend(vec![10.0; 10]);
        let gmm = gmm_fit_1d(&samples, &mut test_rng(1));
        let (lo, hi) = if gmm.means.0 < gmm.means.1 {
            (gmm.means.0, gmm.means.1)
        } else {
            (gmm.means.1, gmm.means.0)
        };
        assert!((lo - 0.0).abs() < 1e-6, "lo mean {lo}");
        assert!((hi - 10.0).abs() < 1e-6, "hi mean {hi}");
        assert!(gmm.separable());
        assert!((gmm.weights.0 + gmm.weights.1 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gmm_degenerate_all_equal_is_inseparable() {
        let samples = vec![3.0; 8];
        let gmm = gmm_fit_1d(&samples, &mut test_rng(2));
        assert!(!gmm.separable());
    }

    #[test]
    fn gmm_em_loglikelihood_monotone() {
        // Re-run EM manually and check the log-likelihood never decreases.
        let mut r = test_rng(3);
        let samples: Vec<f64> = (0..30)
            .map(|i| {
                if i % 2 == 0 {
                    r.random::<f64>()
                } else {
                    5.0 + 2.0 * r.random::<f64>()
                }
            })
            .collect();
        let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let floor = 1e-9 * (hi - lo);
        let n = samples.len() as f64;
        let mut gmm = Gmm1D {
            means: (samples[0], samples[1]),
            stds: ((hi - lo) / 4.0, (hi - lo) / 4.0),
            weights: (0.5, 0.5),
        };
        let ll_of = |g: &Gmm1D| -> f64 {
            samples
                .iter()
                .map(|&x| {
                    (g.weights.0 * normal_pdf(x, g.means.0, g.stds.0)
                        + g.weights.1 * normal_pdf(x, g.means.1, g.stds.1))
                    .max(f64::MIN_POSITIVE)
                    .ln()
                })
                .sum()
        };
        let mut prev = ll_of(&gmm);
        for _ in 0..60 {
            let resp: Vec<f64> = samples.iter().map(|&x| gmm.responsibility0(x)).collect();
            let r0: f64 = resp.iter().sum();
            let r1 = n - r0;
            if r0 == 0.0 || r1 == 0.0 {
                break;
            }
            let mu0 = samples.iter().zip(&resp).map(|(&x, &r)| r * x).sum::<f64>() / r0;
            let mu1 =
                samples.iter().zip(&resp).map(|(&x, &r)| (1.0 - r) * x).sum::<f64>() / r1;
            let v0 = samples
                .iter()
                .zip(&resp)
                .map(|(&x, &r)| r * (x - mu0) * (x - mu0))
                .sum::<f64>()
                / r0;
            let v1 = samples
                .iter()
                .zip(&resp)
                .map(|(&x, &r)| (1.0 - r) * (x - mu1) * (x - mu1))
                .sum::<f64>()
                / r1;
            gmm = Gmm1D {
                means: (mu0, mu1),
                stds: (v0.sqrt().max(floor), v1.sqrt().max(floor)),
                weights: (r0 / n, r1 / n),
            };
            let ll = ll_of(&gmm);
            assert!(
                ll >= prev - 1e-9,
                "log-likelihood decreased: {prev} -> {ll}"
            );
            prev = ll;
        }
    }

    #[test]
    fn sign_feature_examples() {
        // Alternating g and -g, d=10, N=3: 10 flips per pair, 3 pairs.
        let g = pv(&[1.0; 10]);
        let neg = g.scale(-1.0);
        let history = vec![g.clone(), neg.clone(), g.clone(), neg.clone()];
        assert_eq!(gmm_sign_feature(&history, 3), Some(30.0));
        // Constant updates never flip.
        let constant = vec![g.clone(); 5];
        assert_eq!(gmm_sign_feature(&constant, 3), Some(0.0));
        // A single participation is excluded.
        assert_eq!(gmm_sign_feature(&history[..1], 3), None);
        // Window truncates to available pairs.
        assert_eq!(gmm_sign_feature(&history[..2], 5), Some(10.0));
    }

    #[test]
    fn magnitude_feature_examples() {
        let round = vec![pv(&[0.0]), pv(&[1.0]), pv(&[10.0])];
        assert_eq!(magnitude_round_term(&round, 0, 2), Some(1.0));
        assert_eq!(magnitude_round_term(&round, 1, 2), Some(1.0));
        assert_eq!(magnitude_round_term(&round, 2, 2), Some(81.0));
        // Identical updates (the attack's fakes) give exactly zero.
        let same = vec![pv(&[2.0, -1.0]); 4];
        assert_eq!(magnitude_round_term(&same, 1, 3), Some(0.0));
        // Too few participants: round skipped.
        assert_eq!(magnitude_round_term(&round, 0, 4), None);
    }

    #[test]
    fn detect_flags_zero_feature_cluster() {
        let mut features: Vec<(usize, f64)> = (0..4).map(|id| (id, 0.0)).collect();
        let mut r = test_rng(4);
        features.extend((4..20).map(|id| (id, 40.0 + 5.0 * r.random::<f64>())));
        let verdict = detect(&features, WhichCluster::LowerIsFake, &mut test_rng(5));
        assert!(verdict.clusters_separable);
        assert_eq!(verdict.detected_ids, (0..4).collect::<BTreeSet<_>>());
    }

    #[test]
    fn detect_nobody_when_overlapping() {
        let mut r = test_rng(6);
        let features: Vec<(usize, f64)> =
            (0..20).map(|id| (id, 10.0 + r.random::<f64>())).collect();
        let verdict = detect(&features, WhichCluster::LowerIsFake, &mut test_rng(7));
        if !verdict.clusters_separable {
            assert!(verdict.detected_ids.is_empty());
        }
    }

    #[test]
    fn normalize_total_update_examples() {
        let w0 = pv(&[1.0, 1.0]);
        let wt = pv(&[4.0, 5.0]);
        let out = normalize_total_update(&wt, &w0, 2.0);
        assert!((out.sub(&w0).unwrap().l2_norm() - 2.0).abs() < 1e-9);
        let cos = out
            .sub(&w0)
            .unwrap()
            .cosine(&wt.sub(&w0).unwrap())
            .unwrap();
        assert!((cos - 1.0).abs() < 1e-12);
        // b equal to the actual norm is the identity.
        let same = normalize_total_update(&wt, &w0, 5.0);
        for (a, b) in same.as_slice().iter().zip(wt.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        // Zero total update falls back to the initial model.
        assert_eq!(normalize_total_update(&w0, &w0, 3.0), w0);
    }
}
