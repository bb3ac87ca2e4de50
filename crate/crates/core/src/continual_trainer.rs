//! The domain-incremental training loop. Domains arrive in order; within
//! a domain, every step samples a positive/negative bag pair, augments it
//! with replayed pseudo-features, takes one discriminator step and one
//! generator step, and at the domain boundary freezes a generator
//! snapshot for the next domain's replay. The comparison regimes (ft,
//! mtl, vae_gr) are reduced configurations of the same loop.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::{Bag, DomainDataset};
use crate::diffcore::{AdamState, DiffError, NodeId, ParamSet, Tape, Tensor2};
use crate::dual_generator::{
    build_generator_loss, ClassTag, DualGenerator, FrozenReplayer, GeneratorBatch,
    GeneratorConfig,
};
use crate::inference_eval::{
    domain_frame_auc, forgetting_metrics, pooled_frame_auc, AucMatrix, EvalError,
    ForgettingSummary,
};
use crate::multi_discriminator::{
    build_discriminator_loss, compose_replay_bags, lift_bag, DiscriminatorBank,
    DiscriminatorConfig, ReplayBag, StepBags,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("invalid training data: {0}")]
    Data(String),
    #[error("non-finite loss at domain {domain}, epoch {epoch}, step {step}: {components}")]
    NonFinite {
        domain: usize,
        epoch: usize,
        step: usize,
        components: String,
    },
    #[error(transparent)]
    Model(#[from] DiffError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type TrainResult<T> = Result<T, TrainError>;

/// Training protocol selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Full method: dual generators, replay, all three discriminators.
    Cade,
    /// Sequential fine-tuning: one discriminator, MIL loss only.
    Ft,
    /// Joint-training oracle: one phase over the union of all domains.
    Mtl,
    /// Generative replay through two plain per-class VAEs (no adversarial
    /// or diversity terms, untied latents, one discriminator).
    VaeGr,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Cade, Regime::Ft, Regime::Mtl, Regime::VaeGr];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Cade => "cade",
            Regime::Ft => "ft",
            Regime::Mtl => "mtl",
            Regime::VaeGr => "vae_gr",
        }
    }

    /// Whether domains are visited one at a time (everything but mtl).
    pub fn is_sequential(self) -> bool {
        !matches!(self, Regime::Mtl)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = TrainError;

    fn from_str(s: &str) -> TrainResult<Self> {
        match s {
            "cade" => Ok(Regime::Cade),
            "ft" => Ok(Regime::Ft),
            "mtl" => Ok(Regime::Mtl),
            "vae_gr" => Ok(Regime::VaeGr),
            other => Err(TrainError::Config(format!(
                "unknown regime `{other}` (expected cade, ft, mtl, or vae_gr)"
            ))),
        }
    }
}

/// Every knob of one training run. Regimes override parts of it: ft and
/// mtl drop the generators and train a single discriminator with the
/// ranking loss only; vae_gr unties the shared latent block and zeroes
/// all four loss weights, keeping only the twin ELBOs and replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub regime: Regime,
    pub seed: u64,
    pub epochs_per_domain: usize,
    /// Positive/negative bag pairs sampled per step.
    pub batch_bags: usize,
    pub lr: f64,
    /// Pseudo-features appended to a negative bag, as a fraction of its
    /// real instance count.
    pub replay_minus: f64,
    /// Same for positive bags.
    pub replay_plus: f64,
    /// Generator adversarial weight.
    pub lambda1: f64,
    /// Latent mean-separation weight.
    pub lambda2: f64,
    /// Discriminator adversarial weight.
    pub lambda3: f64,
    /// Diversity weight.
    pub lambda4: f64,
    /// 1 or 3. The ablation grid uses 1 with regime cade.
    pub disc_count: usize,
    pub disc_hidden: usize,
    pub trunk_out: usize,
    pub gen_hidden: usize,
    pub d_private: usize,
    pub d_shared: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Cade,
            seed: 7,
            epochs_per_domain: 10,
            batch_bags: 1,
            lr: 0.001,
            replay_minus: 1.0,
            replay_plus: 1.0,
            lambda1: 1.0,
            lambda2: 0.1,
            lambda3: 1.0,
            lambda4: 0.1,
            disc_count: 3,
            disc_hidden: 512,
            trunk_out: 32,
            gen_hidden: 64,
            d_private: 16,
            d_shared: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> TrainResult<()> {
        if self.epochs_per_domain == 0 {
            return Err(TrainError::Config("epochs_per_domain must be >= 1".into()));
        }
        if self.batch_bags == 0 {
            return Err(TrainError::Config("batch_bags must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(TrainError::Config("lr must be positive and finite".into()));
        }
        for (what, v) in [
            ("replay_minus", self.replay_minus),
            ("replay_plus", self.replay_plus),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(TrainError::Config(format!(
                    "{what} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.disc_count != 1 && self.disc_count != 3 {
            return Err(TrainError::Config(format!(
                "disc_count must be 1 or 3, got {}",
                self.disc_count
            )));
        }
        for (what, v) in [
            ("disc_hidden", self.disc_hidden),
            ("trunk_out", self.trunk_out),
            ("gen_hidden", self.gen_hidden),
            ("d_private", self.d_private),
            ("d_shared", self.d_shared),
        ] {
            if v == 0 {
                return Err(TrainError::Config(format!("{what} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// The regime-resolved shape of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Plan {
    pub(crate) disc_count: usize,
    pub(crate) generators: bool,
    pub(crate) tie_shared: bool,
    pub(crate) replay: bool,
    l1: f64,
    l2: f64,
    l3: f64,
    l4: f64,
}

pub(crate) fn plan_of(cfg: &TrainConfig) -> Plan {
    match cfg.regime {
        Regime::Cade => Plan {
            disc_count: cfg.disc_count,
            generators: true,
            tie_shared: true,
            replay: true,
            l1: cfg.lambda1,
            l2: cfg.lambda2,
            l3: cfg.lambda3,
            l4: cfg.lambda4,
        },
        Regime::Ft => Plan {
            disc_count: 1,
            generators: false,
            tie_shared: true,
            replay: false,
            l1: 0.0,
            l2: 0.0,
            l3: 0.0,
            l4: 0.0,
        },
        // The joint-training oracle keeps the full architecture; only the
        // replay machinery is meaningless because no domain is ever past.
        Regime::Mtl => Plan {
            disc_count: cfg.disc_count,
            generators: true,
            tie_shared: true,
            replay: false,
            l1: cfg.lambda1,
            l2: cfg.lambda2,
            l3: cfg.lambda3,
            l4: cfg.lambda4,
        },
        Regime::VaeGr => Plan {
            disc_count: 1,
            generators: true,
            tie_shared: false,
            replay: true,
            l1: 0.0,
            l2: 0.0,
            l3: 0.0,
            l4: 0.0,
        },
    }
}

// Deterministic stream split of one run seed.
const STREAM_DISC_INIT: u64 = 10;
const STREAM_GEN_INIT: u64 = 11;
const STREAM_BAG_SAMPLING: u64 = 12;
const STREAM_NOISE: u64 = 13;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor2 {
    let mut t = Tensor2::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            t.set(i, j, rng.sample(StandardNormal));
        }
    }
    t
}

/// Everything that trains: the discriminator bank, the optional generator
/// pair, their parameters and optimizer states, the current replay
/// snapshot, and the run's random streams.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub(crate) bank: DiscriminatorBank,
    pub(crate) gen: Option<DualGenerator>,
    pub(crate) params: ParamSet,
    pub(crate) disc_adam: AdamState,
    pub(crate) gen_adam: Option<AdamState>,
    pub(crate) replayer: Option<FrozenReplayer>,
    pub(crate) domains_done: usize,
    pub(crate) rng_sample: ChaCha8Rng,
    pub(crate) rng_noise: ChaCha8Rng,
}

impl ModelState {
    pub fn bank(&self) -> &DiscriminatorBank {
        &self.bank
    }

    pub fn generator(&self) -> Option<&DualGenerator> {
        self.gen.as_ref()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn replayer(&self) -> Option<&FrozenReplayer> {
        self.replayer.as_ref()
    }

    /// Domains trained so far.
    pub fn domains_done(&self) -> usize {
        self.domains_done
    }
}

/// Deep frozen copy of the current generators, to be consumed as the
/// replay source throughout the next domain.
pub fn snapshot_generators(state: &ModelState) -> TrainResult<FrozenReplayer> {
    let gen = state
        .gen
        .as_ref()
        .ok_or_else(|| TrainError::Config("this regime trains no generators".into()))?;
    Ok(FrozenReplayer::new(gen, &state.params, state.domains_done))
}

/// One training step's loss components. Absent terms were not part of
/// the step's objective.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    /// 1-based domain number; 0 marks the mtl union phase.
    pub domain: usize,
    pub epoch: usize,
    pub step: usize,
    pub mil: f64,
    pub gan: Option<f64>,
    pub diversity: Option<f64>,
    pub elbo: Option<f64>,
    pub adversarial: Option<f64>,
    pub distance: Option<f64>,
}

impl StepLog {
    pub const TSV_HEADER: &'static str = "domain\tepoch\tstep\tmil\tgan\tdiver\telbo\tadv\tdist";

    pub fn to_tsv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x}"));
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.domain,
            self.epoch,
            self.step,
            self.mil,
            opt(self.gan),
            opt(self.diversity),
            opt(self.elbo),
            opt(self.adversarial),
            opt(self.distance),
        )
    }
}

/// Outcome of a completed run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub regime: Regime,
    pub matrix: AucMatrix,
    pub summary: ForgettingSummary,
    /// Step logs not yet drained through `RegimeRunner::drain_logs`.
    pub logs: Vec<StepLog>,
    /// Pseudo-feature rows drawn from the frozen replayer, per training
    /// unit (replay plus generator rehearsal). Always 0 for the first
    /// unit: there is nothing to replay yet.
    pub replay_rows_by_unit: Vec<u64>,
    /// Per-domain train-read counter values captured after each unit
    /// trained in this process, for the data-access audit.
    pub read_snapshots: Vec<Vec<u64>>,
    pub state: ModelState,
}

/// Drives one regime over a domain stream, one training unit at a time.
/// A unit is one domain for sequential regimes and the single union
/// phase for mtl, so interrupting between units is always safe.
pub struct RegimeRunner<'a> {
    domains: &'a [DomainDataset],
    cfg: TrainConfig,
    plan: Plan,
    state: ModelState,
    matrix: AucMatrix,
    logs: Vec<StepLog>,
    replay_rows_by_unit: Vec<u64>,
    read_snapshots: Vec<Vec<u64>>,
    units_done: usize,
    total_units: usize,
}

impl<'a> RegimeRunner<'a> {
    pub fn new(domains: &'a [DomainDataset], cfg: TrainConfig) -> TrainResult<Self> {
        cfg.validate()?;
        let feature_dim = check_domains(domains)?;
        let plan = plan_of(&cfg);

        let bank = DiscriminatorBank::new(
            DiscriminatorConfig {
                feature_dim,
                hidden: cfg.disc_hidden,
                trunk_out: cfg.trunk_out,
            },
            plan.disc_count,
        )?;
        let mut params = ParamSet::new();
        let mut rng_disc = stream_rng(cfg.seed, STREAM_DISC_INIT);
        bank.init_params(&mut params, &mut rng_disc)?;
        let disc_adam = AdamState::new(
            cfg.lr,
            &params,
            bank.param_names().iter().map(|s| s.as_str()),
        )?;

        let (gen, gen_adam) = if plan.generators {
            let gen = DualGenerator::new(GeneratorConfig {
                feature_dim,
                hidden: cfg.gen_hidden,
                d_private: cfg.d_private,
                d_shared: cfg.d_shared,
                tie_shared: plan.tie_shared,
            })?;
            let mut rng_gen = stream_rng(cfg.seed, STREAM_GEN_INIT);
            gen.init_params(&mut params, &mut rng_gen)?;
            let adam = AdamState::new(
                cfg.lr,
                &params,
                gen.param_names().iter().map(|s| s.as_str()),
            )?;
            (Some(gen), Some(adam))
        } else {
            (None, None)
        };

        let total_units = if cfg.regime.is_sequential() {
            domains.len()
        } else {
            1
        };
        let matrix = AucMatrix::new(domains.len())?;
        let state = ModelState {
            bank,
            gen,
            params,
            disc_adam,
            gen_adam,
            replayer: None,
            domains_done: 0,
            rng_sample: stream_rng(cfg.seed, STREAM_BAG_SAMPLING),
            rng_noise: stream_rng(cfg.seed, STREAM_NOISE),
        };
        Ok(Self {
            domains,
            cfg,
            plan,
            state,
            matrix,
            logs: Vec::new(),
            replay_rows_by_unit: Vec::new(),
            read_snapshots: Vec::new(),
            units_done: 0,
            total_units,
        })
    }

    /// Rebuilds a runner at a unit boundary from checkpointed parts.
    pub(crate) fn resume(
        domains: &'a [DomainDataset],
        cfg: TrainConfig,
        state: ModelState,
        matrix: AucMatrix,
        units_done: usize,
    ) -> TrainResult<Self> {
        cfg.validate()?;
        check_domains(domains)?;
        let plan = plan_of(&cfg);
        let total_units = if cfg.regime.is_sequential() {
            domains.len()
        } else {
            1
        };
        if units_done > total_units {
            return Err(TrainError::Config(format!(
                "checkpoint claims {units_done} finished units of {total_units}"
            )));
        }
        if matrix.t() != domains.len() {
            return Err(TrainError::Config(format!(
                "checkpoint matrix covers {} domains, stream has {}",
                matrix.t(),
                domains.len()
            )));
        }
        Ok(Self {
            domains,
            cfg,
            plan,
            state,
            matrix,
            logs: Vec::new(),
            replay_rows_by_unit: Vec::new(),
            read_snapshots: Vec::new(),
            units_done,
            total_units,
        })
    }

    pub fn cfg(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn matrix(&self) -> &AucMatrix {
        &self.matrix
    }

    pub fn units_done(&self) -> usize {
        self.units_done
    }

    pub fn total_units(&self) -> usize {
        self.total_units
    }

    pub fn is_complete(&self) -> bool {
        self.units_done == self.total_units
    }

    /// Takes the step logs accumulated since the last drain, letting a
    /// caller persist them incrementally between units.
    pub fn drain_logs(&mut self) -> Vec<StepLog> {
        std::mem::take(&mut self.logs)
    }

    /// Trains the next unit, evaluates, and fills one matrix row.
    pub fn advance(&mut self) -> TrainResult<()> {
        if self.is_complete() {
            return Err(TrainError::Config("run is already complete".into()));
        }
        let unit = self.units_done;
        let domains = self.domains;
        let (log_domain, row, unit_bags): (usize, usize, Vec<&Bag>) =
            if self.cfg.regime.is_sequential() {
                (unit + 1, unit, domains[unit].train_bags().collect())
            } else {
                let all: Vec<&Bag> = domains.iter().flat_map(|d| d.train_bags()).collect();
                (0, domains.len() - 1, all)
            };

        let pos_pool: Vec<&Bag> = unit_bags.iter().copied().filter(|b| b.weak_label).collect();
        let neg_pool: Vec<&Bag> = unit_bags
            .iter()
            .copied()
            .filter(|b| !b.weak_label)
            .collect();
        if pos_pool.is_empty() || neg_pool.is_empty() {
            return Err(TrainError::Data(format!(
                "training unit {} needs both weak labels: {} positive, {} negative bags",
                log_domain,
                pos_pool.len(),
                neg_pool.len()
            )));
        }

        let steps_per_epoch = unit_bags.len();
        let mut replay_rows = 0u64;
        for epoch in 1..=self.cfg.epochs_per_domain {
            for step in 1..=steps_per_epoch {
                let entry = self
                    .train_step(&pos_pool, &neg_pool, &mut replay_rows)
                    .map_err(|e| match e {
                        TrainError::NonFinite { components, .. } => TrainError::NonFinite {
                            domain: log_domain,
                            epoch,
                            step,
                            components,
                        },
                        other => other,
                    })?;
                self.logs.push(StepLog {
                    domain: log_domain,
                    epoch,
                    step,
                    ..entry
                });
            }
        }
        self.replay_rows_by_unit.push(replay_rows);

        // Domain boundary: freeze this unit's generators for the next.
        if self.plan.generators && self.cfg.regime.is_sequential() {
            let gen = self.state.gen.as_ref().expect("plan has generators");
            self.state.replayer = Some(FrozenReplayer::new(gen, &self.state.params, unit + 1));
        }
        self.state.domains_done = if self.cfg.regime.is_sequential() {
            unit + 1
        } else {
            domains.len()
        };

        // Evaluate on every domain seen so far, then pooled.
        for col in 0..=row {
            let auc = domain_frame_auc(&self.state.bank, &self.state.params, &domains[col])?;
            self.matrix.set(row, col, auc)?;
        }
        let seen: Vec<&DomainDataset> = domains[..=row].iter().collect();
        let pooled = pooled_frame_auc(&self.state.bank, &self.state.params, &seen)?;
        self.matrix.set_pooled(row, pooled)?;

        self.read_snapshots
            .push(domains.iter().map(|d| d.train_reads()).collect());
        self.units_done += 1;
        Ok(())
    }

    /// One alternation: a discriminator step on a replay-augmented bag
    /// pair, then a generator step on the same bags' real instances.
    fn train_step(
        &mut self,
        pos_pool: &[&'a Bag],
        neg_pool: &[&'a Bag],
        replay_rows: &mut u64,
    ) -> TrainResult<StepLog> {
        let Self {
            cfg, plan, state, ..
        } = self;
        let ModelState {
            bank,
            gen,
            params,
            disc_adam,
            gen_adam,
            replayer,
            rng_sample,
            rng_noise,
            ..
        } = state;

        // Bag draws: all positive picks, then all negative picks.
        let pos_bags: Vec<&Bag> = (0..cfg.batch_bags)
            .map(|_| pos_pool[rng_sample.gen_range(0..pos_pool.len())])
            .collect();
        let neg_bags: Vec<&Bag> = (0..cfg.batch_bags)
            .map(|_| neg_pool[rng_sample.gen_range(0..neg_pool.len())])
            .collect();

        let active_replayer = if plan.replay { replayer.as_ref() } else { None };
        let pos_aug = compose_replay_bags(
            &pos_bags,
            active_replayer,
            cfg.replay_minus,
            cfg.replay_plus,
            rng_noise,
        )?;
        let neg_aug = compose_replay_bags(
            &neg_bags,
            active_replayer,
            cfg.replay_minus,
            cfg.replay_plus,
            rng_noise,
        )?;
        for bag in pos_aug.iter().chain(neg_aug.iter()) {
            *replay_rows += bag.appended.len() as u64;
        }
        let step_bags = StepBags {
            pos: pos_aug,
            neg: neg_aug,
        };

        // Discriminator step.
        let mut tape = Tape::new();
        let mut disc_noise = |r: usize, c: usize| normal_tensor(r, c, rng_noise);
        let fakes = if plan.l3 > 0.0 {
            Some((
                gen.as_ref().expect("adversarial plan has generators") as &DualGenerator,
                &mut disc_noise as &mut dyn FnMut(usize, usize) -> Tensor2,
            ))
        } else {
            None
        };
        let nodes =
            build_discriminator_loss(&mut tape, params, bank, &step_bags, fakes, plan.l3, plan.l4)?;
        let mil = tape.value(nodes.mil).item()?;
        let gan = nodes.gan.map(|n| tape.value(n).item()).transpose()?;
        let diversity = nodes.diversity.map(|n| tape.value(n).item()).transpose()?;
        let total = tape.value(nodes.total).item()?;
        if !total.is_finite() {
            return Err(non_finite("discriminator", mil, gan, diversity, None, None, None));
        }
        let grads = tape.gradients(nodes.total, params)?;
        disc_adam.step(params, &grads)?;

        // Generator step.
        let (mut elbo, mut adversarial, mut distance) = (None, None, None);
        if plan.generators {
            let gen = gen.as_ref().expect("plan has generators");
            let current_anomaly = stack_real(&step_bags.pos);
            let current_normal = stack_real(&step_bags.neg);

            // Rehearsal: the generators relearn exactly the pseudo rows
            // that were composed into this step's bags, so one replay
            // draw serves both model halves.
            let rehearsal = |bags: &[ReplayBag], class: ClassTag| -> TrainResult<Option<Tensor2>> {
                let rows: Vec<Vec<f64>> = bags
                    .iter()
                    .flat_map(|b| b.appended.iter())
                    .filter(|p| p.source == class)
                    .map(|p| p.values.clone())
                    .collect();
                if rows.is_empty() {
                    Ok(None)
                } else {
                    Ok(Some(Tensor2::from_rows(&rows)?))
                }
            };
            let replay_anomaly = rehearsal(&step_bags.pos, ClassTag::Anomaly)?;
            let replay_normal = rehearsal(&step_bags.neg, ClassTag::Normal)?;

            let batch = GeneratorBatch {
                current_normal: &current_normal,
                current_anomaly: &current_anomaly,
                replay_normal: replay_normal.as_ref(),
                replay_anomaly: replay_anomaly.as_ref(),
            };
            let mut tape = Tape::new();
            let mut gen_noise = |r: usize, c: usize| normal_tensor(r, c, rng_noise);
            let bank_ref: &DiscriminatorBank = bank;
            let params_ref: &ParamSet = params;
            let mut heads = |tape: &mut Tape, fhat: NodeId| {
                (1..=bank_ref.count())
                    .map(|k| Ok(bank_ref.forward_graph(tape, params_ref, fhat, k)?.gan))
                    .collect::<Result<Vec<_>, DiffError>>()
            };
            let heads_opt: Option<&mut dyn FnMut(&mut Tape, NodeId) -> Result<Vec<NodeId>, DiffError>> =
                if plan.l1 > 0.0 { Some(&mut heads) } else { None };
            let gnodes = build_generator_loss(
                &mut tape,
                params_ref,
                gen,
                &batch,
                &mut gen_noise,
                heads_opt,
                plan.l1,
                plan.l2,
            )?;
            let mut elbo_v = tape.value(gnodes.elbo_current).item()?;
            if let Some(r) = gnodes.elbo_replay {
                elbo_v += tape.value(r).item()?;
            }
            let adv_v = gnodes.adversarial.map(|n| tape.value(n).item()).transpose()?;
            let dist_v = gnodes.distance.map(|n| tape.value(n).item()).transpose()?;
            let total = tape.value(gnodes.total).item()?;
            if !total.is_finite() {
                return Err(non_finite(
                    "generator", mil, gan, diversity, Some(elbo_v), adv_v, dist_v,
                ));
            }
            let grads = tape.gradients(gnodes.total, params)?;
            gen_adam
                .as_mut()
                .expect("plan has generators")
                .step(params, &grads)?;
            elbo = Some(elbo_v);
            adversarial = adv_v;
            distance = dist_v;
        }

        Ok(StepLog {
            domain: 0,
            epoch: 0,
            step: 0,
            mil,
            gan,
            diversity,
            elbo,
            adversarial,
            distance,
        })
    }

    /// Finishes the run: computes the forgetting summary and hands back
    /// everything accumulated.
    pub fn into_result(self) -> TrainResult<RunResult> {
        if !self.is_complete() {
            return Err(TrainError::Config(format!(
                "run incomplete: {} of {} units trained",
                self.units_done, self.total_units
            )));
        }
        let summary = if self.cfg.regime.is_sequential() {
            forgetting_metrics(&self.matrix)?
        } else {
            // One joint phase has no earlier rows; backward transfer is
            // zero by construction.
            let last = self.matrix.last_row()?;
            ForgettingSummary {
                final_auc: self
                    .matrix
                    .pooled(self.matrix.t() - 1)?
                    .expect("pooled value filled at unit end"),
                avg_final_auc: last.iter().sum::<f64>() / last.len() as f64,
                bwt: 0.0,
            }
        };
        Ok(RunResult {
            regime: self.cfg.regime,
            matrix: self.matrix,
            summary,
            logs: self.logs,
            replay_rows_by_unit: self.replay_rows_by_unit,
            read_snapshots: self.read_snapshots,
            state: self.state,
        })
    }
}

/// Runs a full regime start to finish.
pub fn run_regime(domains: &[DomainDataset], cfg: TrainConfig) -> TrainResult<RunResult> {
    let mut runner = RegimeRunner::new(domains, cfg)?;
    while !runner.is_complete() {
        runner.advance()?;
    }
    runner.into_result()
}

fn check_domains(domains: &[DomainDataset]) -> TrainResult<usize> {
    if domains.is_empty() {
        return Err(TrainError::Data("no domains to train on".into()));
    }
    let dim = domains[0].feature_dim();
    if dim == 0 {
        return Err(TrainError::Data("first domain has no features".into()));
    }
    for d in domains {
        if d.feature_dim() != dim {
            return Err(TrainError::Data(format!(
                "domain {} has feature dim {}, stream uses {}",
                d.domain_id(),
                d.feature_dim(),
                dim
            )));
        }
    }
    Ok(dim)
}

/// All real rows of the given bags, stacked in order.
fn stack_real(bags: &[ReplayBag]) -> Tensor2 {
    let k = bags[0].base.feature_dim();
    let total: usize = bags.iter().map(|b| b.base.instances.len()).sum();
    let mut data = Vec::with_capacity(total * k);
    for bag in bags {
        let t = lift_bag(bag.base);
        data.extend_from_slice(t.data());
    }
    Tensor2::from_vec(total, k, data).expect("bag dims validated")
}

fn non_finite(
    phase: &str,
    mil: f64,
    gan: Option<f64>,
    diversity: Option<f64>,
    elbo: Option<f64>,
    adversarial: Option<f64>,
    distance: Option<f64>,
) -> TrainError {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x}"));
    TrainError::NonFinite {
        domain: 0,
        epoch: 0,
        step: 0,
        components: format!(
            "{phase} step: mil={mil} gan={} diver={} elbo={} adv={} dist={}",
            opt(gan),
            opt(diversity),
            opt(elbo),
            opt(adversarial),
            opt(distance)
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{make_synthetic_stream, SyntheticStreamConfig};

    fn tiny_stream(domains: usize, seed: u64) -> Vec<DomainDataset> {
        make_synthetic_stream(&SyntheticStreamConfig {
            domains,
            feature_dim: 6,
            bags_per_domain: 6,
            bag_size: 4,
            segment_len: 4,
            seed,
            ..SyntheticStreamConfig::default()
        })
        .unwrap()
    }

    fn tiny_cfg(regime: Regime) -> TrainConfig {
        TrainConfig {
            regime,
            seed: 3,
            epochs_per_domain: 1,
            disc_hidden: 8,
            trunk_out: 5,
            gen_hidden: 8,
            d_private: 3,
            d_shared: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn regime_names_round_trip() {
        for r in Regime::ALL {
            assert_eq!(r.name().parse::<Regime>().unwrap(), r);
        }
        assert!("vaegr".parse::<Regime>().is_err());
        assert!("".parse::<Regime>().is_err());
        assert_eq!(Regime::VaeGr.to_string(), "vae_gr");
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        for (name, cfg) in [
            ("epochs", TrainConfig { epochs_per_domain: 0, ..ok.clone() }),
            ("batch", TrainConfig { batch_bags: 0, ..ok.clone() }),
            ("lr", TrainConfig { lr: 0.0, ..ok.clone() }),
            ("lr nan", TrainConfig { lr: f64::NAN, ..ok.clone() }),
            ("ratio", TrainConfig { replay_minus: -0.5, ..ok.clone() }),
            ("lambda", TrainConfig { lambda3: f64::INFINITY, ..ok.clone() }),
            ("discs", TrainConfig { disc_count: 2, ..ok.clone() }),
            ("width", TrainConfig { trunk_out: 0, ..ok.clone() }),
        ] {
            assert!(cfg.validate().is_err(), "{name} accepted");
        }
    }

    #[test]
    fn single_domain_run_shapes() {
        let stream = tiny_stream(1, 11);
        let out = run_regime(&stream, tiny_cfg(Regime::Cade)).unwrap();
        assert_eq!(out.matrix.t(), 1);
        assert!(out.matrix.get(0, 0).unwrap().is_some());
        assert!(out.matrix.pooled(0).unwrap().is_some());
        assert_eq!(out.summary.bwt, 0.0);
        // first unit never replays
        assert_eq!(out.replay_rows_by_unit, vec![0]);
        assert!(!out.logs.is_empty());
        assert_eq!(out.state.domains_done(), 1);
        assert!(out.state.replayer().is_some());
    }

    #[test]
    fn sequential_run_fills_lower_triangle_and_replays() {
        let stream = tiny_stream(3, 12);
        let out = run_regime(&stream, tiny_cfg(Regime::Cade)).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let cell = out.matrix.get(r, c).unwrap();
                assert_eq!(cell.is_some(), c <= r, "cell ({r}, {c})");
            }
            assert!(out.matrix.pooled(r).unwrap().is_some());
        }
        assert_eq!(out.replay_rows_by_unit.len(), 3);
        assert_eq!(out.replay_rows_by_unit[0], 0);
        assert!(out.replay_rows_by_unit[1] > 0);
        assert!(out.replay_rows_by_unit[2] > 0);
    }

    #[test]
    fn ft_trains_without_generators_or_replay() {
        let stream = tiny_stream(2, 13);
        let out = run_regime(&stream, tiny_cfg(Regime::Ft)).unwrap();
        assert!(out.state.generator().is_none());
        assert!(out.state.replayer().is_none());
        assert_eq!(out.replay_rows_by_unit, vec![0, 0]);
        assert_eq!(out.state.bank().count(), 1);
        for log in &out.logs {
            assert!(log.gan.is_none() && log.diversity.is_none() && log.elbo.is_none());
        }
    }

    #[test]
    fn vae_gr_replays_through_plain_vaes() {
        let stream = tiny_stream(2, 14);
        let out = run_regime(&stream, tiny_cfg(Regime::VaeGr)).unwrap();
        assert!(out.state.generator().is_some());
        assert!(!out.state.generator().unwrap().config().tie_shared);
        assert_eq!(out.state.bank().count(), 1);
        assert!(out.replay_rows_by_unit[1] > 0);
        for log in &out.logs {
            assert!(log.elbo.is_some());
            assert!(log.gan.is_none() && log.adversarial.is_none() && log.distance.is_none());
        }
    }

    #[test]
    fn mtl_fills_only_the_final_row() {
        let stream = tiny_stream(3, 15);
        let out = run_regime(&stream, tiny_cfg(Regime::Mtl)).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(out.matrix.get(r, c).unwrap(), None);
            }
        }
        for c in 0..3 {
            assert!(out.matrix.get(2, c).unwrap().is_some());
        }
        assert_eq!(out.summary.bwt, 0.0);
        assert_eq!(out.state.domains_done(), 3);
        // union phase reads every domain's training bags
        assert!(out.read_snapshots[0].iter().all(|&r| r > 0));
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let stream = tiny_stream(2, 16);
        let a = run_regime(&stream, tiny_cfg(Regime::Cade)).unwrap();
        let b = run_regime(&stream, tiny_cfg(Regime::Cade)).unwrap();
        assert_eq!(a.matrix, b.matrix);
        assert_eq!(a.state.params(), b.state.params());
        assert_eq!(a.logs, b.logs);
    }

    #[test]
    fn degenerate_cade_reduces_to_ft_trajectories() {
        let stream = tiny_stream(2, 17);
        let ft = run_regime(&stream, tiny_cfg(Regime::Ft)).unwrap();
        let degenerate = TrainConfig {
            disc_count: 1,
            replay_minus: 0.0,
            replay_plus: 0.0,
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
            ..tiny_cfg(Regime::Cade)
        };
        let cade = run_regime(&stream, degenerate).unwrap();
        // generators still train, but the discriminator sees identical
        // batches and losses, so its trajectory matches bitwise
        for name in ft.state.params().names() {
            assert_eq!(
                ft.state.params().get(name).unwrap().data(),
                cade.state.params().get(name).unwrap().data(),
                "parameter {name} diverged"
            );
        }
        assert_eq!(ft.matrix, cade.matrix);
    }

    #[test]
    fn past_domain_training_data_stays_unread() {
        let stream = tiny_stream(3, 18);
        let out = run_regime(&stream, tiny_cfg(Regime::Cade)).unwrap();
        // snapshot u: counters after unit u; past domains must not move
        for u in 1..3 {
            for d in 0..u {
                assert_eq!(
                    out.read_snapshots[u][d], out.read_snapshots[u - 1][d],
                    "domain {d} was read during unit {u}"
                );
            }
        }
        // each domain was read during its own unit
        for u in 0..3 {
            assert!(out.read_snapshots[u][u] > 0);
        }
    }

    #[test]
    fn runner_step_protocol() {
        let stream = tiny_stream(2, 19);
        let mut runner = RegimeRunner::new(&stream, tiny_cfg(Regime::Cade)).unwrap();
        assert!(!runner.is_complete());
        assert_eq!(runner.total_units(), 2);
        runner.advance().unwrap();
        assert_eq!(runner.units_done(), 1);
        let first_logs = runner.drain_logs();
        assert!(!first_logs.is_empty());
        runner.advance().unwrap();
        assert!(runner.is_complete());
        let err = runner.advance().unwrap_err();
        assert!(matches!(err, TrainError::Config(_)));
        let out = runner.into_result().unwrap();
        // drained logs are not repeated
        assert!(out.logs.iter().all(|l| l.domain == 2));
        assert_eq!(out.logs.len(), first_logs.len());
    }

    #[test]
    fn incomplete_runner_refuses_result() {
        let stream = tiny_stream(2, 20);
        let runner = RegimeRunner::new(&stream, tiny_cfg(Regime::Ft)).unwrap();
        assert!(matches!(
            runner.into_result(),
            Err(TrainError::Config(_))
        ));
    }

    #[test]
    fn exploding_learning_rate_aborts_with_diagnostic() {
        let stream = tiny_stream(1, 21);
        let cfg = TrainConfig {
            lr: 1e300,
            epochs_per_domain: 2,
            ..tiny_cfg(Regime::Cade)
        };
        let err = run_regime(&stream, cfg).unwrap_err();
        assert!(matches!(
            err,
            TrainError::NonFinite { .. } | TrainError::Model(DiffError::NonFinite { .. })
        ));
    }

    #[test]
    fn rejects_inconsistent_streams() {
        assert!(matches!(
            run_regime(&[], tiny_cfg(Regime::Cade)),
            Err(TrainError::Data(_))
        ));
        let mut a = tiny_stream(1, 22);
        let b = make_synthetic_stream(&SyntheticStreamConfig {
            domains: 1,
            feature_dim: 9,
            bags_per_domain: 6,
            bag_size: 4,
            segment_len: 4,
            seed: 23,
            ..SyntheticStreamConfig::default()
        })
        .unwrap();
        a.extend(b);
        assert!(matches!(
            run_regime(&a, tiny_cfg(Regime::Cade)),
            Err(TrainError::Data(_))
        ));
    }

    #[test]
    fn snapshots_are_immutable_and_deterministic() {
        let stream = tiny_stream(1, 24);
        let out = run_regime(&stream, tiny_cfg(Regime::Cade)).unwrap();
        let snap1 = snapshot_generators(&out.state).unwrap();
        let snap2 = snapshot_generators(&out.state).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let s1 = snap1.sample(ClassTag::Anomaly, 3, &mut r1).unwrap();
        let s2 = snap2.sample(ClassTag::Anomaly, 3, &mut r2).unwrap();
        assert_eq!(s1, s2);

        let ft = run_regime(&stream, tiny_cfg(Regime::Ft)).unwrap();
        assert!(snapshot_generators(&ft.state).is_err());
    }

    #[test]
    fn step_log_rows_are_well_formed() {
        let log = StepLog {
            domain: 2,
            epoch: 1,
            step: 3,
            mil: 0.5,
            gan: Some(1.25),
            diversity: None,
            elbo: Some(10.0),
            adversarial: None,
            distance: Some(0.125),
        };
        assert_eq!(log.to_tsv_row(), "2\t1\t3\t0.5\t1.25\t-\t10\t-\t0.125");
        assert_eq!(
            StepLog::TSV_HEADER.split('\t').count(),
            log.to_tsv_row().split('\t').count()
        );
    }
}
