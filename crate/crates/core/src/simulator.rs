//! Round-loop orchestration: client sampling, genuine local training,
//! attack injection, aggregation, global-model update, and metric capture.
//!
//! `run_experiment` dispatches between the plain per-round loop, the
//! ensemble mode (group-wise training with a prediction vote), the
//! two-phase detector mode, and the GMM-defense modes (detection window
//! followed by a retrain with detected clients removed).

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use thiserror::Error;

use crate::aggregation::{AggError, AggRule, AggregationOutcome, ModelUpdate, ServerContext};
use crate::attack::{
    self, AttackState, DeviationConstraint, ScaleMode, UnitVectorMode,
};
use crate::data::{self, ClientDataset, DataError, Dataset, PartitionSpec};
use crate::learner::{self, LearnerError, ModelSpec, TrainConfig};
use crate::param::{ParamVector, SignVector};
use crate::rng::{self, StreamKind};
use crate::tailored::{self, WhichCluster};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Aggregation(#[from] AggError),
}

/// Attack selection, one variant per config key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    None,
    PoisonedFl,
    PoisonedFlAdaptSign,
    PoisonedFlAdaptNoise,
    Random,
    Mpaf,
    Lie,
    Fang,
    OptFang,
    MinMax,
    MinSum,
}

impl AttackKind {
    pub fn from_key(key: &str) -> Option<Self> {
        Some(match key {
            "none" => Self::None,
            "poisonedfl" => Self::PoisonedFl,
            "poisonedfl-adapt-sign" => Self::PoisonedFlAdaptSign,
            "poisonedfl-adapt-noise" => Self::PoisonedFlAdaptNoise,
            "random" => Self::Random,
            "mpaf" => Self::Mpaf,
            "lie" => Self::Lie,
            "fang" => Self::Fang,
            "optfang" => Self::OptFang,
            "minmax" => Self::MinMax,
            "minsum" => Self::MinSum,
            _ => return None,
        })
    }

    pub fn key(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::PoisonedFl => "poisonedfl",
            Self::PoisonedFlAdaptSign => "poisonedfl-adapt-sign",
            Self::PoisonedFlAdaptNoise => "poisonedfl-adapt-noise",
            Self::Random => "random",
            Self::Mpaf => "mpaf",
            Self::Lie => "lie",
            Self::Fang => "fang",
            Self::OptFang => "optfang",
            Self::MinMax => "minmax",
            Self::MinSum => "minsum",
        }
    }

    fn is_consistent_family(self) -> bool {
        matches!(
            self,
            Self::PoisonedFl | Self::PoisonedFlAdaptSign | Self::PoisonedFlAdaptNoise
        )
    }

    fn needs_genuine_knowledge(self) -> bool {
        matches!(
            self,
            Self::Lie | Self::Fang | Self::OptFang | Self::MinMax | Self::MinSum
        )
    }
}

/// Knobs shared by the attacks; unused fields are ignored by each attack.
#[derive(Debug, Clone, Copy)]
pub struct AttackParams {
    /// Initial scaling multiplier c⁰.
    pub c0: f64,
    /// Window length (rounds) between hypothesis tests.
    pub e: usize,
    /// Decay factor applied to c on a failed window test.
    pub beta: f64,
    /// Lower bound for c.
    pub c_floor: f64,
    /// Binomial-test significance threshold.
    pub p: f64,
    /// Sign-flip fraction for the sign-adaptive variant.
    pub alpha: f64,
    /// Magnitude assigned to flipped dimensions.
    pub eps: f64,
    /// Noise factor for the magnitude-adaptive variant.
    pub gamma: f64,
    /// Scale for the random and model-replacement baselines.
    pub lambda: f64,
    /// Ablation: uniform unit magnitude vector instead of the estimate.
    pub ablate_same_magnitude: bool,
    /// Ablation: fixed scaling factor instead of the adaptive one.
    pub ablate_fixed_scale: Option<f64>,
}

impl Default for AttackParams {
    fn default() -> Self {
        Self {
            c0: 8.0,
            e: 50,
            beta: 0.7,
            c_floor: 0.5,
            p: 0.01,
            alpha: 0.0,
            eps: 1e-6,
            gamma: 0.0,
            lambda: 1e6,
            ablate_same_magnitude: false,
            ablate_fixed_scale: None,
        }
    }
}

/// Aggregation-rule selection, including the two orchestrator modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleKind {
    FedAvg,
    MultiKrum,
    Median,
    TrMean,
    NormBound,
    FlTrust,
    Flame,
    FlCert,
    FlDetector,
}

impl RuleKind {
    pub fn from_key(key: &str) -> Option<Self> {
        Some(match key {
            "fedavg" => Self::FedAvg,
            "multikrum" => Self::MultiKrum,
            "median" => Self::Median,
            "trmean" => Self::TrMean,
            "normbound" => Self::NormBound,
            "fltrust" => Self::FlTrust,
            "flame" => Self::Flame,
            "flcert" => Self::FlCert,
            "fldetector" => Self::FlDetector,
            _ => return None,
        })
    }

    pub fn key(self) -> &'static str {
        match self {
            Self::FedAvg => "fedavg",
            Self::MultiKrum => "multikrum",
            Self::Median => "median",
            Self::TrMean => "trmean",
            Self::NormBound => "normbound",
            Self::FlTrust => "fltrust",
            Self::Flame => "flame",
            Self::FlCert => "flcert",
            Self::FlDetector => "fldetector",
        }
    }

    fn per_round(self) -> Option<AggRule> {
        Some(match self {
            Self::FedAvg => AggRule::FedAvg,
            Self::MultiKrum => AggRule::MultiKrum,
            Self::Median => AggRule::Median,
            Self::TrMean => AggRule::TrMean,
            Self::NormBound => AggRule::NormBound,
            Self::FlTrust => AggRule::FlTrust,
            Self::Flame => AggRule::Flame,
            Self::FlCert | Self::FlDetector => return None,
        })
    }
}

/// Tailored countermeasure selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefenseKind {
    GmmSign,
    GmmMagnitude,
    NormalizeTotal,
}

impl DefenseKind {
    pub fn from_key(key: &str) -> Option<Self> {
        Some(match key {
            "gmm-sign" => Self::GmmSign,
            "gmm-magnitude" => Self::GmmMagnitude,
            "normalize-total" => Self::NormalizeTotal,
            _ => return None,
        })
    }

    pub fn key(self) -> &'static str {
        match self {
            Self::GmmSign => "gmm-sign",
            Self::GmmMagnitude => "gmm-magnitude",
            Self::NormalizeTotal => "normalize-total",
        }
    }
}

/// Synthetic population parameters.
#[derive(Debug, Clone, Copy)]
pub struct DataSpec {
    pub n_classes: usize,
    pub feature_dim: usize,
    /// Training examples each genuine client should hold on average.
    pub examples_per_client: usize,
    /// Within-cluster noise scale of the blobs.
    pub spread: f64,
    /// Held-out test examples per class.
    pub test_per_class: usize,
}

/// Everything one experiment needs.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n_genuine: usize,
    /// m = round(fake_fraction · n_genuine) fake clients are appended.
    pub fake_fraction: f64,
    pub participation_rate: f64,
    pub rounds: usize,
    pub seed: u64,
    pub hidden_layers: Vec<usize>,
    pub train: TrainConfig,
    pub data: DataSpec,
    /// Non-IID degree in [1/C, 1].
    pub q: f64,
    pub attack: AttackKind,
    pub attack_params: AttackParams,
    pub rule: RuleKind,
    /// Trust-root dataset size (FLTrust only).
    pub root_size: usize,
    /// Group count for the ensemble mode.
    pub flcert_groups: usize,
    /// Full-participation rounds of the detector mode's first phase.
    pub fldetector_rounds: usize,
    /// Suspicion-score averaging window of the detector mode.
    pub fldetector_window: usize,
    pub defense: Option<DefenseKind>,
    /// Feature window N for the GMM defenses.
    pub defense_n: usize,
    /// Total-update norm bound b; defaults to the observed no-attack norm
    /// if unset (callers must then supply it explicitly).
    pub defense_b: Option<f64>,
    pub which_cluster: WhichCluster,
}

impl SimConfig {
    pub fn n_fakes(&self) -> usize {
        if self.attack == AttackKind::None {
            0
        } else {
            (self.fake_fraction * self.n_genuine as f64).round() as usize
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |msg: String| Err(SimError::Config(msg));
        if self.n_genuine == 0 {
            return fail("n_genuine must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.fake_fraction) {
            return fail(format!(
                "fake_fraction must be in [0, 1], got {}",
                self.fake_fraction
            ));
        }
        if !(self.participation_rate > 0.0 && self.participation_rate <= 1.0) {
            return fail(format!(
                "participation_rate must be in (0, 1], got {}",
                self.participation_rate
            ));
        }
        if self.rounds == 0 {
            return fail("rounds must be positive".into());
        }
        let c = self.data.n_classes as f64;
        if !(1.0 / c - 1e-12..=1.0 + 1e-12).contains(&self.q) {
            return fail(format!("q must be in [1/C, 1] = [{:.4}, 1], got {}", 1.0 / c, self.q));
        }
        if self.data.n_classes < 2 || self.data.feature_dim == 0 {
            return fail("data spec needs at least 2 classes and 1 feature".into());
        }
        if self.attack_params.e == 0 {
            return fail("attack window e must be positive".into());
        }
        if !(0.0..1.0).contains(&self.attack_params.beta) {
            return fail(format!("beta must be in (0, 1), got {}", self.attack_params.beta));
        }
        if !(0.0..=1.0).contains(&self.attack_params.alpha) {
            return fail(format!("alpha must be in [0, 1], got {}", self.attack_params.alpha));
        }
        if self.attack_params.gamma < 0.0 {
            return fail("gamma must be non-negative".into());
        }
        if self.rule == RuleKind::FlTrust && self.root_size == 0 {
            return fail("fltrust requires a positive root_size".into());
        }
        if self.rule == RuleKind::FlCert && self.flcert_groups == 0 {
            return fail("flcert requires at least one group".into());
        }
        if let Some(b) = self.defense_b {
            if b <= 0.0 {
                return fail(format!("defense_b must be positive, got {b}"));
            }
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec, SimError> {
        let mut layers = vec![self.data.feature_dim];
        layers.extend(&self.hidden_layers);
        layers.push(self.data.n_classes);
        Ok(ModelSpec::new(layers)?)
    }
}

/// One row of the per-round metric log.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub testing_error: f64,
    /// Sign-match fraction of the total update wᵗ − w⁰ against s.
    pub sign_match: f64,
    /// ‖wᵗ − w⁰‖.
    pub total_norm: f64,
    /// Mean fraction of flipped dimensions over fake clients with a prior
    /// submission; absent when no fake qualifies this round.
    pub flipping_rate: Option<f64>,
    pub participating_fakes: usize,
    /// Fakes whose updates survived filtering (FNR numerator).
    pub accepted_fakes: usize,
    pub accepted_total: usize,
    /// Mean trust weight over genuine / fake participants (FLTrust only).
    pub trust_genuine: Option<f64>,
    pub trust_fake: Option<f64>,
}

/// Outcome of one tailored or built-in detection phase.
#[derive(Debug, Clone)]
pub struct DetectionReport {
    pub detected: BTreeSet<usize>,
    pub clusters_separable: bool,
    /// Fraction of true fakes detected (recall); 1.0 when m = 0 and
    /// nothing was flagged.
    pub accuracy: f64,
}

/// Everything a finished experiment hands back.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub records: Vec<RoundRecord>,
    pub w_init: ParamVector,
    pub w_final: ParamVector,
    pub sign_vector: SignVector,
    pub final_error: f64,
    pub detection: Option<DetectionReport>,
}

/// The generated population: training data split across genuine clients,
/// a held-out test set, and the optional server root dataset.
pub struct World {
    pub train: Dataset,
    pub clients: Vec<ClientDataset>,
    pub test: Dataset,
    pub root: Option<Dataset>,
}

/// Builds the blob population and its client partition. Train and test
/// rows come from the same class centers; the split is per class.
pub fn build_world(cfg: &SimConfig) -> Result<World, SimError> {
    let d = &cfg.data;
    let total_train = cfg.n_genuine * d.examples_per_client;
    let train_per_class = total_train.div_ceil(d.n_classes);
    let per_class = train_per_class + d.test_per_class;
    let all = data::make_blobs(d.n_classes, per_class, d.feature_dim, d.spread, cfg.seed);
    let mut train_idx = Vec::with_capacity(train_per_class * d.n_classes);
    let mut test_idx = Vec::with_capacity(d.test_per_class * d.n_classes);
    for c in 0..d.n_classes {
        let start = c * per_class;
        train_idx.extend(start..start + train_per_class);
        test_idx.extend(start + train_per_class..start + per_class);
    }
    let train = all.subset(&train_idx);
    let test = all.subset(&test_idx);
    let clients = data::partition_noniid(
        &train,
        &PartitionSpec {
            n_genuine: cfg.n_genuine,
            q: cfg.q,
            seed: cfg.seed,
        },
    )?;
    let root = if cfg.rule == RuleKind::FlTrust {
        Some(data::sample_root(&train, cfg.root_size, cfg.seed))
    } else {
        None
    };
    Ok(World {
        train,
        clients,
        test,
        root,
    })
}

/// Per-group/phase state of one federated training loop.
struct Loop<'a> {
    cfg: &'a SimConfig,
    world: &'a World,
    model_spec: ModelSpec,
    rule: AggRule,
    /// Population this loop draws from (genuine ids < cfg.n_genuine).
    population: Vec<usize>,
    /// Counter namespace separating groups and phases in rng streams.
    tag: u64,
    round_offset: u64,
    w_init: ParamVector,
    w: ParamVector,
    w_prev: Option<ParamVector>,
    s: SignVector,
    attack_state: Option<AttackState>,
    mpaf_target: Option<ParamVector>,
    /// Last submitted update per fake client, for the flipping metric.
    last_fake: BTreeMap<usize, ParamVector>,
    force_full_participation: bool,
    /// Per-client submitted updates (detection phases only).
    histories: Option<BTreeMap<usize, Vec<ParamVector>>>,
    /// Per-round participant updates (magnitude-feature phases only).
    round_log: Option<Vec<Vec<(usize, ParamVector)>>>,
    records: Vec<RoundRecord>,
}

impl<'a> Loop<'a> {
    fn new(
        cfg: &'a SimConfig,
        world: &'a World,
        rule: AggRule,
        population: Vec<usize>,
        tag: u64,
        phase: u64,
    ) -> Result<Self, SimError> {
        let model_spec = cfg.model_spec()?;
        let d = model_spec.param_count();
        let mut init_rng = rng::stream(cfg.seed, StreamKind::ModelInit, tag, phase);
        let w_init = model_spec.init_params(&mut init_rng);
        let s = SignVector::random(d, &mut rng::stream(cfg.seed, StreamKind::Attack, u64::MAX, tag));
        let attack_state = cfg.attack.is_consistent_family().then(|| {
            let p = cfg.attack_params;
            AttackState::new(
                s.clone(),
                p.c0,
                p.e,
                p.beta,
                p.c_floor,
                p.p,
                if p.ablate_same_magnitude {
                    UnitVectorMode::Same
                } else {
                    UnitVectorMode::Adaptive
                },
                match p.ablate_fixed_scale {
                    Some(v) => ScaleMode::Maximized(v),
                    None => ScaleMode::Adaptive,
                },
            )
        });
        let mpaf_target = (cfg.attack == AttackKind::Mpaf).then(|| {
            model_spec.init_params(&mut rng::stream(
                cfg.seed,
                StreamKind::Attack,
                u64::MAX - 1,
                tag,
            ))
        });
        Ok(Self {
            cfg,
            world,
            model_spec,
            rule,
            population,
            tag,
            round_offset: phase << 32,
            w: w_init.clone(),
            w_init,
            w_prev: None,
            s,
            attack_state,
            mpaf_target,
            last_fake: BTreeMap::new(),
            force_full_participation: false,
            histories: None,
            round_log: None,
            records: Vec::new(),
        })
    }

    fn is_fake(&self, id: usize) -> bool {
        id >= self.cfg.n_genuine
    }

    fn sample_participants(&self, t: usize) -> Vec<usize> {
        if self.force_full_participation {
            return self.population.clone();
        }
        use rand::seq::SliceRandom;
        let k = ((self.cfg.participation_rate * self.population.len() as f64).ceil() as usize)
            .clamp(1, self.population.len());
        let mut ids = self.population.clone();
        let mut r = rng::stream(self.cfg.seed, StreamKind::ClientSampling, t as u64, self.tag);
        ids.shuffle(&mut r);
        ids.truncate(k);
        ids.sort_unstable();
        ids
    }

    fn genuine_update(&self, id: usize, t: usize) -> Result<ParamVector, SimError> {
        let rows = &self.world.clients[id].indices;
        let mut r = rng::stream(
            self.cfg.seed,
            StreamKind::ClientTrain,
            id as u64,
            self.round_offset | t as u64,
        );
        Ok(learner::local_train(
            &self.model_spec,
            &self.w,
            &self.world.train,
            rows,
            &self.cfg.train,
            &mut r,
        )?)
    }

    /// Crafts the fake clients' updates for round `t`.
    fn fake_updates(
        &mut self,
        t: usize,
        fake_ids: &[usize],
        genuine: &[ParamVector],
    ) -> Result<Vec<ParamVector>, SimError> {
        let p = self.cfg.attack_params;
        let d = self.model_spec.param_count();
        let per_fake_rng = |id: usize| {
            rng::stream(
                self.cfg.seed,
                StreamKind::Attack,
                id as u64,
                self.round_offset | t as u64,
            )
        };
        if self.cfg.attack.needs_genuine_knowledge() && genuine.is_empty() {
            // Knowledge-based attacks have nothing to mimic in a round with
            // no genuine participants; submit zeros.
            return Ok(vec![ParamVector::zeros(d); fake_ids.len()]);
        }
        let shared: Option<ParamVector> = match self.cfg.attack {
            AttackKind::None => Some(ParamVector::zeros(d)),
            AttackKind::PoisonedFl
            | AttackKind::PoisonedFlAdaptSign
            | AttackKind::PoisonedFlAdaptNoise => {
                let state = self.attack_state.as_mut().expect("state exists");
                Some(state.craft(t, &self.w, self.w_prev.as_ref()))
            }
            AttackKind::Mpaf => Some(attack::attack_mpaf(
                self.mpaf_target.as_ref().expect("target exists"),
                &self.w,
                p.lambda,
            )),
            AttackKind::Random => None,
            AttackKind::Lie => Some(knowledge(attack::attack_lie(genuine))?),
            AttackKind::Fang => {
                if self.cfg.rule == RuleKind::MultiKrum {
                    Some(knowledge(attack::attack_fang_krum(genuine, fake_ids.len()))?)
                } else {
                    Some(knowledge(attack::attack_fang_trmean(genuine))?)
                }
            }
            AttackKind::OptFang => Some(knowledge(attack::attack_deviation(
                genuine,
                DeviationConstraint::MinMax,
                None,
            ))?),
            AttackKind::MinMax => Some(knowledge(attack::attack_deviation(
                genuine,
                DeviationConstraint::MinMax,
                None,
            ))?),
            AttackKind::MinSum => Some(knowledge(attack::attack_deviation(
                genuine,
                DeviationConstraint::MinSum,
                None,
            ))?),
        };
        let updates = fake_ids
            .iter()
            .map(|&id| match self.cfg.attack {
                AttackKind::Random => attack::attack_random(d, p.lambda, &mut per_fake_rng(id)),
                AttackKind::PoisonedFlAdaptSign => self
                    .attack_state
                    .as_ref()
                    .expect("state exists")
                    .adapt_sign(p.alpha, p.eps, &mut per_fake_rng(id)),
                AttackKind::PoisonedFlAdaptNoise => {
                    self.attack_state
                        .as_ref()
                        .expect("state exists")
                        .adapt_noise(p.gamma, &mut per_fake_rng(id))
                        .0
                }
                _ => shared.clone().expect("shared update exists"),
            })
            .collect();
        Ok(updates)
    }

    /// Mean over fake participants with a prior submission of the fraction
    /// of dimensions whose sign flipped; dimensions where either entry is
    /// zero do not count as flips.
    fn flipping_rate(&self, fakes: &[(usize, &ParamVector)]) -> Option<f64> {
        let d = self.model_spec.param_count();
        let mut rates = Vec::new();
        for &(id, update) in fakes {
            if let Some(prev) = self.last_fake.get(&id) {
                let flips = prev
                    .as_slice()
                    .iter()
                    .zip(update.as_slice())
                    .filter(|(&a, &b)| a != 0.0 && b != 0.0 && (a < 0.0) != (b < 0.0))
                    .count();
                rates.push(flips as f64 / d as f64);
            }
        }
        if rates.is_empty() {
            None
        } else {
            Some(rates.iter().sum::<f64>() / rates.len() as f64)
        }
    }

    fn step(&mut self, t: usize) -> Result<(), SimError> {
        let participants = self.sample_participants(t);
        if let Some(state) = self.attack_state.as_mut() {
            state.observe(t, &self.w.clone());
        }
        let genuine_ids: Vec<usize> = participants
            .iter()
            .copied()
            .filter(|&id| !self.is_fake(id))
            .collect();
        let fake_ids: Vec<usize> = participants
            .iter()
            .copied()
            .filter(|&id| self.is_fake(id))
            .collect();
        let genuine: Vec<ParamVector> = genuine_ids
            .par_iter()
            .map(|&id| self.genuine_update(id, t))
            .collect::<Result<_, _>>()?;
        let fakes = self.fake_updates(t, &fake_ids, &genuine)?;

        let mut updates: Vec<ModelUpdate> = genuine_ids
            .iter()
            .zip(&genuine)
            .map(|(&client_id, delta)| ModelUpdate {
                client_id,
                delta: delta.clone(),
            })
            .collect();
        updates.extend(fake_ids.iter().zip(&fakes).map(|(&client_id, delta)| {
            ModelUpdate {
                client_id,
                delta: delta.clone(),
            }
        }));
        updates.sort_by_key(|u| u.client_id);

        // The norm-bound threshold is an oracle: average genuine norm.
        let norm_threshold = if genuine.is_empty() {
            1.0
        } else {
            genuine.iter().map(ParamVector::l2_norm).sum::<f64>() / genuine.len() as f64
        };
        // The server is granted knowledge of the total fake count, per the
        // defenses' stated advantage, but not of the per-round draw: it
        // assumes fakes appear at their population share of participants.
        let total_population = self.cfg.n_genuine + self.cfg.n_fakes();
        let m_assumed = ((self.cfg.n_fakes() as f64 / total_population as f64)
            * participants.len() as f64)
            .round() as usize;
        let ctx = ServerContext {
            round: t,
            w_prev: &self.w,
            m_assumed,
            root_dataset: self.world.root.as_ref(),
            model_spec: &self.model_spec,
            train_cfg: &self.cfg.train,
            seed: self.cfg.seed,
            norm_threshold: Some(norm_threshold),
        };
        let outcome = self.rule.apply(&updates, &ctx)?;
        let fake_pairs: Vec<(usize, &ParamVector)> =
            fake_ids.iter().copied().zip(fakes.iter()).collect();
        let flipping = self.flipping_rate(&fake_pairs);
        for (id, update) in &fake_pairs {
            self.last_fake.insert(*id, (*update).clone());
        }
        if let Some(histories) = self.histories.as_mut() {
            for u in &updates {
                histories.entry(u.client_id).or_default().push(u.delta.clone());
            }
        }
        if let Some(log) = self.round_log.as_mut() {
            log.push(updates.iter().map(|u| (u.client_id, u.delta.clone())).collect());
        }

        self.w_prev = Some(self.w.clone());
        self.w = self.w.add(&outcome.aggregate).expect("same dimension");
        self.record(t, &outcome, &fake_ids, flipping)?;
        Ok(())
    }

    fn record(
        &mut self,
        t: usize,
        outcome: &AggregationOutcome,
        fake_ids: &[usize],
        flipping_rate: Option<f64>,
    ) -> Result<(), SimError> {
        let testing_error = learner::evaluate(&self.model_spec, &self.w, &self.world.test)?;
        let total = self.w.sub(&self.w_init).expect("same dimension");
        let accepted_fakes = fake_ids
            .iter()
            .filter(|id| outcome.accepted_ids.contains(id))
            .count();
        let (trust_genuine, trust_fake) = match &outcome.weights {
            None => (None, None),
            Some(weights) => {
                let split = |fake: bool| {
                    let vals: Vec<f64> = weights
                        .iter()
                        .filter(|(id, _)| self.is_fake(*id) == fake)
                        .map(|&(_, w)| w)
                        .collect();
                    if vals.is_empty() {
                        None
                    } else {
                        Some(vals.iter().sum::<f64>() / vals.len() as f64)
                    }
                };
                (split(false), split(true))
            }
        };
        self.records.push(RoundRecord {
            round: t,
            testing_error,
            sign_match: total.sign_match_fraction(&self.s).expect("same dimension"),
            total_norm: total.l2_norm(),
            flipping_rate,
            participating_fakes: fake_ids.len(),
            accepted_fakes,
            accepted_total: outcome.accepted_ids.len(),
            trust_genuine,
            trust_fake,
        });
        Ok(())
    }

    fn run(&mut self, rounds: usize) -> Result<(), SimError> {
        for t in 1..=rounds {
            self.step(t)?;
        }
        Ok(())
    }
}

fn knowledge(r: Result<ParamVector, attack::AttackError>) -> Result<ParamVector, SimError> {
    r.map_err(|e| SimError::Config(e.to_string()))
}

/// Plain single-loop experiment over the full population.
pub fn run(cfg: &SimConfig) -> Result<SimOutput, SimError> {
    cfg.validate()?;
    let world = build_world(cfg)?;
    run_with_world(cfg, &world)
}

fn population(cfg: &SimConfig, excluded: &BTreeSet<usize>) -> Vec<usize> {
    (0..cfg.n_genuine + cfg.n_fakes())
        .filter(|id| !excluded.contains(id))
        .collect()
}

fn run_with_world(cfg: &SimConfig, world: &World) -> Result<SimOutput, SimError> {
    let rule = cfg
        .rule
        .per_round()
        .ok_or_else(|| SimError::Config(format!("{} is an orchestrator mode", cfg.rule.key())))?;
    let mut l = Loop::new(cfg, world, rule, population(cfg, &BTreeSet::new()), 0, 0)?;
    l.run(cfg.rounds)?;
    let mut w_final = l.w.clone();
    let mut final_error = l.records.last().expect("at least one round").testing_error;
    if cfg.defense == Some(DefenseKind::NormalizeTotal) {
        let b = cfg.defense_b.ok_or_else(|| {
            SimError::Config("normalize-total requires defense_b".into())
        })?;
        w_final = tailored::normalize_total_update(&w_final, &l.w_init, b);
        final_error = learner::evaluate(&l.model_spec, &w_final, &world.test)?;
    }
    Ok(SimOutput {
        records: l.records,
        w_init: l.w_init,
        w_final,
        sign_vector: l.s,
        final_error,
        detection: None,
    })
}

/// Two-phase GMM-defense experiment: a full-participation detection window
/// of N+1 rounds under the configured rule and attack, then a fresh
/// restart with the detected clients removed.
pub fn run_gmm_defense(cfg: &SimConfig) -> Result<SimOutput, SimError> {
    cfg.validate()?;
    let world = build_world(cfg)?;
    let features = defense_features(cfg, &world)?;
    let rule = cfg
        .rule
        .per_round()
        .ok_or_else(|| SimError::Config(format!("{} is an orchestrator mode", cfg.rule.key())))?;
    let mut det_rng = rng::stream(cfg.seed, StreamKind::Defense, 0xD, 0);
    let verdict = tailored::detect(&features, cfg.which_cluster, &mut det_rng);
    let n_fakes = cfg.n_fakes();
    let accuracy = if n_fakes == 0 {
        f64::from(verdict.detected_ids.is_empty() as u8)
    } else {
        verdict
            .detected_ids
            .iter()
            .filter(|&&id| id >= cfg.n_genuine)
            .count() as f64
            / n_fakes as f64
    };

    // Phase 2: fresh run with detected clients removed.
    let mut main = Loop::new(cfg, &world, rule, population(cfg, &verdict.detected_ids), 0, 1)?;
    main.run(cfg.rounds)?;
    let final_error = main.records.last().expect("rounds > 0").testing_error;
    Ok(SimOutput {
        records: main.records,
        w_init: main.w_init,
        w_final: main.w,
        sign_vector: main.s,
        final_error,
        detection: Some(DetectionReport {
            detected: verdict.detected_ids,
            clusters_separable: verdict.clusters_separable,
            accuracy,
        }),
    })
}

/// Runs the full-participation detection window and returns each client's
/// scalar feature under the configured GMM defense.
pub fn defense_features(
    cfg: &SimConfig,
    world: &World,
) -> Result<Vec<(usize, f64)>, SimError> {
    let kind = match cfg.defense {
        Some(k @ (DefenseKind::GmmSign | DefenseKind::GmmMagnitude)) => k,
        _ => return Err(SimError::Config("config does not select a GMM defense".into())),
    };
    let rule = cfg
        .rule
        .per_round()
        .ok_or_else(|| SimError::Config(format!("{} is an orchestrator mode", cfg.rule.key())))?;

    // Detection window with full participation.
    let n_window = cfg.defense_n;
    let mut det = Loop::new(cfg, world, rule, population(cfg, &BTreeSet::new()), 0, 0)?;
    det.force_full_participation = true;
    det.histories = Some(BTreeMap::new());
    det.round_log = Some(Vec::new());
    det.run(n_window + 1)?;

    let m = cfg.n_fakes().max(2);
    let features: Vec<(usize, f64)> = match kind {
        DefenseKind::GmmSign => {
            let histories = det.histories.as_ref().expect("collected");
            histories
                .iter()
                .filter_map(|(&id, h)| tailored::gmm_sign_feature(h, n_window).map(|x| (id, x)))
                .collect()
        }
        DefenseKind::GmmMagnitude => {
            let log = det.round_log.as_ref().expect("collected");
            let ids: Vec<usize> = population(cfg, &BTreeSet::new());
            ids.iter()
                .map(|&id| {
                    let mut sum = 0.0;
                    for round in log.iter().rev().take(n_window) {
                        let vectors: Vec<ParamVector> =
                            round.iter().map(|(_, g)| g.clone()).collect();
                        if let Some(i) = round.iter().position(|&(rid, _)| rid == id) {
                            if let Some(term) =
                                tailored::magnitude_round_term(&vectors, i, m)
                            {
                                sum += term;
                            }
                        }
                    }
                    (id, sum)
                })
                .collect()
        }
        DefenseKind::NormalizeTotal => unreachable!(),
    };
    Ok(features)
}

/// Ensemble mode: clients are split uniformly at random into disjoint
/// groups, each group trains its own global model with the coordinate
/// median, and predictions are a plurality vote (ties to the lowest class).
pub fn run_flcert(cfg: &SimConfig) -> Result<SimOutput, SimError> {
    cfg.validate()?;
    let world = build_world(cfg)?;
    let all = population(cfg, &BTreeSet::new());
    if cfg.flcert_groups > all.len() {
        return Err(SimError::Config(format!(
            "flcert_groups {} exceeds client count {}",
            cfg.flcert_groups,
            all.len()
        )));
    }
    use rand::seq::SliceRandom;
    let mut ids = all;
    ids.shuffle(&mut rng::stream(cfg.seed, StreamKind::Defense, 0xF, 0));
    let groups: Vec<Vec<usize>> = (0..cfg.flcert_groups)
        .map(|g| {
            let mut members: Vec<usize> = ids
                .iter()
                .copied()
                .skip(g)
                .step_by(cfg.flcert_groups)
                .collect();
            members.sort_unstable();
            members
        })
        .collect();
    let mut loops: Vec<Loop> = groups
        .into_iter()
        .enumerate()
        .map(|(g, members)| Loop::new(cfg, &world, AggRule::Median, members, g as u64 + 1, 0))
        .collect::<Result<_, _>>()?;
    for t in 1..=cfg.rounds {
        for l in loops.iter_mut() {
            l.step(t)?;
        }
    }
    let spec = cfg.model_spec()?;
    let models: Vec<&ParamVector> = loops.iter().map(|l| &l.w).collect();
    let final_error = ensemble_error(&spec, &models, &world.test);
    // The vote has no single parameter vector; per-round records are taken
    // from the first group, with the ensemble's final error reported.
    let first = loops.into_iter().next().expect("at least one group");
    Ok(SimOutput {
        records: first.records,
        w_init: first.w_init,
        w_final: first.w,
        sign_vector: first.s,
        final_error,
        detection: None,
    })
}

/// Plurality-vote testing error of a set of models.
pub fn ensemble_error(spec: &ModelSpec, models: &[&ParamVector], test: &Dataset) -> f64 {
    let n_classes = spec.n_classes();
    let wrong = (0..test.len())
        .filter(|&i| {
            let mut votes = vec![0usize; n_classes];
            for w in models {
                votes[learner::predict(spec, w, test.row(i))] += 1;
            }
            let mut best = 0;
            for (c, &v) in votes.iter().enumerate() {
                if v > votes[best] {
                    best = c;
                }
            }
            best != test.label(i)
        })
        .count();
    wrong as f64 / test.len() as f64
}

/// Detector mode: a full-participation detection phase scores each client
/// by the windowed mean of its normalized update inconsistency
/// ‖gᵢᵗ − gᵢᵗ⁻¹‖, splits the scores by exact 1-D 2-means, flags the
/// high-score cluster when the cluster gap exceeds both intra-cluster
/// standard deviations, then retrains from scratch with the coordinate
/// median and the flagged clients removed.
pub fn run_fldetector(cfg: &SimConfig) -> Result<SimOutput, SimError> {
    cfg.validate()?;
    let world = build_world(cfg)?;
    let mut det = Loop::new(
        cfg,
        &world,
        AggRule::Median,
        population(cfg, &BTreeSet::new()),
        0,
        0,
    )?;
    det.force_full_participation = true;
    det.histories = Some(BTreeMap::new());
    det.run(cfg.fldetector_rounds)?;
    let histories = det.histories.as_ref().expect("collected");

    // Per-round normalized inconsistency, averaged over the score window.
    let window = cfg.fldetector_window.min(cfg.fldetector_rounds.saturating_sub(1));
    let ids: Vec<usize> = histories.keys().copied().collect();
    let rounds_available = histories.values().map(Vec::len).min().unwrap_or(0);
    let mut scores: BTreeMap<usize, f64> = ids.iter().map(|&id| (id, 0.0)).collect();
    let mut used = 0usize;
    for t in rounds_available.saturating_sub(window)..rounds_available {
        if t == 0 {
            continue;
        }
        let dists: Vec<(usize, f64)> = ids
            .iter()
            .map(|&id| {
                let h = &histories[&id];
                (id, h[t].sub(&h[t - 1]).expect("same dimension").l2_norm())
            })
            .collect();
        let total: f64 = dists.iter().map(|&(_, d)| d).sum();
        if total > 0.0 {
            for (id, d) in dists {
                *scores.get_mut(&id).unwrap() += d / total;
            }
        }
        used += 1;
    }
    if used > 0 {
        for v in scores.values_mut() {
            *v /= used as f64;
        }
    }

    let detected = two_means_high_cluster(&scores);
    let n_fakes = cfg.n_fakes();
    let accuracy = if n_fakes == 0 {
        f64::from(detected.is_empty() as u8)
    } else {
        detected.iter().filter(|&&id| id >= cfg.n_genuine).count() as f64 / n_fakes as f64
    };

    let mut main = Loop::new(cfg, &world, AggRule::Median, population(cfg, &detected), 0, 1)?;
    main.run(cfg.rounds)?;
    let final_error = main.records.last().expect("rounds > 0").testing_error;
    Ok(SimOutput {
        records: main.records,
        w_init: main.w_init,
        w_final: main.w,
        sign_vector: main.s,
        final_error,
        detection: Some(DetectionReport {
            detected,
            clusters_separable: true,
            accuracy,
        }),
    })
}

/// Exact 1-D 2-means (best split of the sorted values), returning the
/// high-mean cluster's ids when the clusters are genuinely apart: the gap
/// between the closest points of the two clusters must exceed both
/// intra-cluster standard deviations. A mean-gap test would flag any
/// continuous unimodal score set, so the boundary gap is compared instead.
fn two_means_high_cluster(scores: &BTreeMap<usize, f64>) -> BTreeSet<usize> {
    let mut pairs: Vec<(usize, f64)> = scores.iter().map(|(&id, &v)| (id, v)).collect();
    if pairs.len() < 4 {
        return BTreeSet::new();
    }
    pairs.sort_by(|a, b| a.1.total_cmp(&b.1));
    let n = pairs.len();
    let stats = |slice: &[(usize, f64)]| {
        let k = slice.len() as f64;
        let mean = slice.iter().map(|&(_, v)| v).sum::<f64>() / k;
        let var = slice.iter().map(|&(_, v)| (v - mean) * (v - mean)).sum::<f64>() / k;
        (mean, var)
    };
    let mut best = (f64::INFINITY, 1usize);
    for split in 1..n {
        let (_, v0) = stats(&pairs[..split]);
        let (_, v1) = stats(&pairs[split..]);
        let sse = v0 * split as f64 + v1 * (n - split) as f64;
        if sse < best.0 {
            best = (sse, split);
        }
    }
    let split = best.1;
    let (_, v0) = stats(&pairs[..split]);
    let (_, v1) = stats(&pairs[split..]);
    let boundary_gap = pairs[split].1 - pairs[split - 1].1;
    if boundary_gap > v0.sqrt().max(v1.sqrt()) {
        pairs[split..].iter().map(|&(id, _)| id).collect()
    } else {
        BTreeSet::new()
    }
}

/// Dispatches a config to the right orchestration mode.
pub fn run_experiment(cfg: &SimConfig) -> Result<SimOutput, SimError> {
    match (cfg.rule, cfg.defense) {
        (RuleKind::FlCert, _) => run_flcert(cfg),
        (RuleKind::FlDetector, _) => run_fldetector(cfg),
        (_, Some(DefenseKind::GmmSign | DefenseKind::GmmMagnitude)) => run_gmm_defense(cfg),
        _ => run(cfg),
    }
}

/// Error of a trained model as random noise of increasing norm is added
/// along a fixed random direction; one `(norm, error)` pair per probe.
pub fn degradation_probe(
    spec: &ModelSpec,
    w: &ParamVector,
    test: &Dataset,
    norms: &[f64],
    seed: u64,
) -> Result<Vec<(f64, f64)>, SimError> {
    let s = SignVector::random(
        w.len(),
        &mut rng::stream(seed, StreamKind::Probe, 0, 0),
    );
    norms
        .iter()
        .enumerate()
        .map(|(i, &norm)| {
            let mut r = rng::stream(seed, StreamKind::Probe, 1, i as u64);
            let perturbed = learner::perturb_along_random_direction(w, &s, norm, &mut r);
            Ok((norm, learner::evaluate(spec, &perturbed, test)?))
        })
        .collect()
}

/// A small default configuration used by tests; callers override fields.
pub fn desk_config() -> SimConfig {
    SimConfig {
        n_genuine: 100,
        fake_fraction: 0.2,
        participation_rate: 0.1,
        rounds: 500,
        seed: 7,
        hidden_layers: vec![80],
        train: TrainConfig {
            learning_rate: 0.2,
            local_epochs: 1,
            batch_size: 10,
        },
        data: DataSpec {
            n_classes: 10,
            feature_dim: 20,
            examples_per_client: 50,
            spread: 1.4,
            test_per_class: 100,
        },
        q: 0.5,
        attack: AttackKind::None,
        attack_params: AttackParams::default(),
        rule: RuleKind::FedAvg,
        root_size: 100,
        flcert_groups: 5,
        fldetector_rounds: 20,
        fldetector_window: 10,
        defense: None,
        defense_n: 20,
        defense_b: None,
        which_cluster: WhichCluster::LowerIsFake,
    }
}
