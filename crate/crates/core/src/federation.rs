//! Server loop: client sampling, local training, FedAvg and the prototype
//! bank schedule.

use std::collections::BTreeMap;

use fedprompt_tensor::Tensor;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ccmp::{class_means, dp_sensitivity, ClassPriors, PrototypeBank, PrototypeSubmission};
use crate::error::{CoreError, Result};
use crate::model::{forward, loss_and_grads, BackboneWeights, CcmpContext, ForwardOptions, PromptParams};
use crate::rng::{stream, Purpose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Shared prompts and head only; the bank is never built or read.
    SharedOnly,
    SharedCcmp,
    /// CCMP with uniform priors in place of each client's label frequencies.
    SharedCcmpNoPrior,
    /// CCMP architecture with `P_S` and `P_C` kept per client; only `H` is
    /// averaged.
    Personalized,
}

impl Strategy {
    pub fn uses_ccmp(self) -> bool {
        self != Strategy::SharedOnly
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::SharedOnly => "shared-only",
            Strategy::SharedCcmp => "shared-ccmp",
            Strategy::SharedCcmpNoPrior => "shared-ccmp-no-prior",
            Strategy::Personalized => "personalized",
        }
    }
}

mod defaults {
    use super::Strategy;

    pub fn local_epochs() -> usize {
        1
    }
    pub fn batch_size() -> usize {
        16
    }
    pub fn lr() -> f64 {
        0.1
    }
    pub fn lr_decay() -> f64 {
        0.99
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn grad_clip() -> f64 {
        10.0
    }
    pub fn num_shared_prompts() -> usize {
        1
    }
    pub fn prompt_init_std() -> f64 {
        0.02
    }
    pub fn ccmp_layers() -> Vec<usize> {
        vec![5, 6, 7]
    }
    pub fn tau() -> f64 {
        0.05
    }
    pub fn rho() -> f64 {
        0.9
    }
    pub fn update_period() -> usize {
        1
    }
    pub fn strategy() -> Strategy {
        Strategy::SharedCcmp
    }
    pub fn one() -> f64 {
        1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub num_clients: usize,
    /// Clients sampled per round; every participating client when absent.
    #[serde(default)]
    pub clients_per_round: Option<usize>,
    pub rounds: usize,
    #[serde(default = "defaults::local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    /// Multiplicative learning-rate decay per round.
    #[serde(default = "defaults::lr_decay")]
    pub lr_decay: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::grad_clip")]
    pub grad_clip: f64,
    #[serde(default = "defaults::num_shared_prompts")]
    pub num_shared_prompts: usize,
    #[serde(default = "defaults::prompt_init_std")]
    pub prompt_init_std: f64,
    #[serde(default = "defaults::ccmp_layers")]
    pub ccmp_layers: Vec<usize>,
    #[serde(default = "defaults::tau")]
    pub tau: f64,
    #[serde(default)]
    pub propagate_only: bool,
    #[serde(default)]
    pub detach_scores: bool,
    #[serde(default = "defaults::rho")]
    pub rho: f64,
    /// Rounds per prototype update period.
    #[serde(default = "defaults::update_period")]
    pub update_period: usize,
    #[serde(default)]
    pub dp_epsilon: Option<f64>,
    #[serde(default = "defaults::strategy")]
    pub strategy: Strategy,
    /// Weight client updates by shard size instead of the plain mean.
    #[serde(default)]
    pub weighted_fedavg: bool,
    /// Fraction of participating clients sampled for the warm-up pass.
    #[serde(default = "defaults::one")]
    pub warmup_fraction: f64,
}

impl TrainConfig {
    pub fn new(num_clients: usize, rounds: usize) -> Self {
        Self {
            num_clients,
            clients_per_round: None,
            rounds,
            local_epochs: defaults::local_epochs(),
            batch_size: defaults::batch_size(),
            lr: defaults::lr(),
            lr_decay: defaults::lr_decay(),
            momentum: defaults::momentum(),
            grad_clip: defaults::grad_clip(),
            num_shared_prompts: defaults::num_shared_prompts(),
            prompt_init_std: defaults::prompt_init_std(),
            ccmp_layers: defaults::ccmp_layers(),
            tau: defaults::tau(),
            propagate_only: false,
            detach_scores: false,
            rho: defaults::rho(),
            update_period: defaults::update_period(),
            dp_epsilon: None,
            strategy: defaults::strategy(),
            weighted_fedavg: false,
            warmup_fraction: 1.0,
        }
    }

    /// Forward options implied by the strategy: shared-only runs without any
    /// CCMP layer.
    pub fn forward_options(&self) -> ForwardOptions {
        ForwardOptions {
            ccmp_layers: if self.strategy.uses_ccmp() {
                self.ccmp_layers.clone()
            } else {
                Vec::new()
            },
            tau: self.tau,
            propagate_only: self.propagate_only,
            detach_scores: self.detach_scores,
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        let f = |name: &str| format!("train.{name}");
        if self.num_clients == 0 {
            return Err(CoreError::config(f("num_clients"), "must be at least 1"));
        }
        if let Some(c) = self.clients_per_round {
            if c == 0 || c > self.num_clients {
                return Err(CoreError::config(f("clients_per_round"), format!("must be in 1..={}", self.num_clients)));
            }
        }
        if self.local_epochs == 0 {
            return Err(CoreError::config(f("local_epochs"), "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(CoreError::config(f("batch_size"), "must be at least 1"));
        }
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if !nonneg(self.lr) {
            return Err(CoreError::config(f("lr"), "must be finite and nonnegative"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(CoreError::config(f("lr_decay"), "must be in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CoreError::config(f("momentum"), "must be in [0, 1)"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(CoreError::config(f("grad_clip"), "must be positive"));
        }
        if !nonneg(self.prompt_init_std) {
            return Err(CoreError::config(f("prompt_init_std"), "must be finite and nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(CoreError::config(f("rho"), "must be in [0, 1]"));
        }
        if self.update_period == 0 {
            return Err(CoreError::config(f("update_period"), "must be at least 1"));
        }
        if let Some(eps) = self.dp_epsilon {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(CoreError::config(f("dp_epsilon"), "must be positive"));
            }
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction <= 1.0) {
            return Err(CoreError::config(f("warmup_fraction"), "must be in (0, 1]"));
        }
        if self.strategy.uses_ccmp() && self.ccmp_layers.is_empty() {
            return Err(CoreError::config(f("ccmp_layers"), "the strategy needs at least one CCMP layer"));
        }
        self.forward_options().validate(num_layers)
    }

    pub fn lr_at(&self, round: usize) -> f64 {
        self.lr * self.lr_decay.powi(round.saturating_sub(1) as i32)
    }
}

/// One client's pre-embedded shards. `priors` come from the training shard.
#[derive(Clone, Debug)]
pub struct ClientData {
    pub id: usize,
    pub train: Vec<(Tensor, usize)>,
    pub test: Vec<(Tensor, usize)>,
    pub priors: ClassPriors,
}

impl ClientData {
    pub fn train_labels(&self) -> Vec<usize> {
        self.train.iter().map(|(_, y)| *y).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServerState {
    pub global: PromptParams,
    /// Per-client prompt blocks under the personalized strategy.
    pub personal: BTreeMap<usize, PromptParams>,
    pub bank: Option<PrototypeBank>,
    /// Rounds completed.
    pub round: usize,
}

impl ServerState {
    /// Parameters client `id` trains from and is evaluated with: the global
    /// set, or its own prompt blocks combined with the global head.
    pub fn params_for(&self, id: usize) -> PromptParams {
        match self.personal.get(&id) {
            Some(p) => PromptParams {
                shared: p.shared.clone(),
                class: p.class.clone(),
                head: self.global.head.clone(),
            },
            None => self.global.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client: usize,
    pub params: PromptParams,
    pub submission: Option<PrototypeSubmission>,
    pub num_samples: usize,
    pub train_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundLog {
    pub round: usize,
    pub participants: Vec<usize>,
    pub train_loss: f64,
    pub prototypes_updated: bool,
}

/// Priors a client feeds into the score computation.
pub fn effective_priors(strategy: Strategy, client: &ClientData) -> ClassPriors {
    match strategy {
        Strategy::SharedCcmpNoPrior => ClassPriors::uniform(client.priors.num_classes()),
        _ => client.priors.clone(),
    }
}

/// `count` distinct indices from `0..n`, uniformly, in ascending order.
pub fn sample_clients<R: Rng + ?Sized>(rng: &mut R, n: usize, count: usize) -> Result<Vec<usize>> {
    if count > n {
        return Err(CoreError::config("train.clients_per_round", format!("{count} exceeds {n} clients")));
    }
    let mut ids = index::sample(rng, n, count).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Local prototypes (class means of the incoming cls token at every bank
/// layer) and their DP sensitivities, from one frozen pass over the shard.
pub fn local_prototypes(
    backbone: &BackboneWeights,
    params: &PromptParams,
    client: &ClientData,
    bank: &PrototypeBank,
    priors: &ClassPriors,
    opts: &ForwardOptions,
) -> Result<PrototypeSubmission> {
    if client.train.is_empty() {
        return Err(CoreError::Data(format!("client {} has no training data", client.id)));
    }
    let tokens: Vec<&Tensor> = client.train.iter().map(|(t, _)| t).collect();
    let labels = client.train_labels();
    let traces = forward(backbone, params, &tokens, Some(CcmpContext { bank, priors }), opts, None)?;
    let num_classes = bank.num_classes();
    let mut prototypes = Vec::with_capacity(bank.layers().len());
    let mut sensitivities = Vec::with_capacity(bank.layers().len());
    for &layer in bank.layers() {
        let cls: Vec<&[f64]> = traces.iter().map(|t| t.cls_in[layer - 1].as_slice()).collect();
        let means = class_means(&cls, &labels, num_classes)?;
        let sens = (0..num_classes)
            .map(|c| {
                let members: Vec<&[f64]> = cls.iter().zip(&labels).filter(|(_, &y)| y == c).map(|(t, _)| *t).collect();
                dp_sensitivity(&members, &means[c], members.len()).unwrap_or(0.0)
            })
            .collect();
        prototypes.push(means);
        sensitivities.push(sens);
    }
    Ok(PrototypeSubmission {
        client: client.id,
        prototypes,
        sensitivities,
    })
}

/// Everything fixed for the duration of a run.
pub struct Federation<'a> {
    pub backbone: &'a BackboneWeights,
    pub config: &'a TrainConfig,
    /// Indexed by client id.
    pub clients: &'a [ClientData],
    /// Ids eligible for sampling, ascending. Heldout clients are left out.
    pub pool: Vec<usize>,
    pub seed: u64,
    threads: Option<rayon::ThreadPool>,
}

impl<'a> Federation<'a> {
    pub fn new(
        backbone: &'a BackboneWeights,
        config: &'a TrainConfig,
        clients: &'a [ClientData],
        pool: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        config.validate(backbone.config.layers)?;
        if clients.iter().enumerate().any(|(i, c)| c.id != i) {
            return Err(CoreError::Data("client ids must equal their positions".into()));
        }
        let mut pool = pool;
        pool.sort_unstable();
        pool.dedup();
        if pool.is_empty() {
            return Err(CoreError::config("train.num_clients", "no client is eligible for training"));
        }
        if let Some(&bad) = pool.iter().find(|&&id| id >= clients.len()) {
            return Err(CoreError::Data(format!("unknown client {bad}")));
        }
        if let Some(&empty) = pool.iter().find(|&&id| clients[id].train.is_empty()) {
            return Err(CoreError::Data(format!("client {empty} has no training data")));
        }
        if let Some(c) = config.clients_per_round {
            if c > pool.len() {
                return Err(CoreError::config(
                    "train.clients_per_round",
                    format!("{c} exceeds the {} participating clients", pool.len()),
                ));
            }
        }
        Ok(Self {
            backbone,
            config,
            clients,
            pool,
            seed,
            threads: None,
        })
    }

    /// Runs the clients of a round on `workers` threads. Results are
    /// identical to the sequential run.
    pub fn with_workers(mut self, workers: usize) -> Result<Self> {
        self.threads = if workers > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| CoreError::config("workers", e.to_string()))?;
            Some(pool)
        } else {
            None
        };
        Ok(self)
    }

    fn opts(&self) -> ForwardOptions {
        self.config.forward_options()
    }

    pub fn initial_params(&self) -> Result<PromptParams> {
        PromptParams::init(
            self.backbone.config.dim,
            self.config.num_shared_prompts,
            self.clients.first().map_or(0, |c| c.priors.num_classes()),
            self.config.prompt_init_std,
            self.seed,
        )
    }

    fn map_clients<T: Send>(&self, ids: &[usize], f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
        match &self.threads {
            Some(pool) => pool.install(|| ids.par_iter().map(|&id| f(id)).collect()),
            None => ids.iter().map(|&id| f(id)).collect(),
        }
    }

    /// Builds the initial bank from the untrained prompts. Layers are filled
    /// in ascending order: the cls entering layer `j` is computed with the
    /// bank already holding every earlier CCMP layer, so it matches what the
    /// full forward pass sees. Each layer is the plain mean of the sampled
    /// clients' class means (a client lacking the class contributes zero).
    pub fn warm_startup(&self, params: &PromptParams, sampled: &[usize]) -> Result<PrototypeBank> {
        if sampled.is_empty() {
            return Err(CoreError::config("train.warmup_fraction", "warm-up sampled no clients"));
        }
        let opts = self.opts();
        let cfg = self.config;
        let nc = params.num_classes();
        let d = self.backbone.config.dim;
        let mut bank = PrototypeBank::new(&opts.ccmp_layers, nc, d, cfg.rho, cfg.update_period)?;
        for &layer in &opts.ccmp_layers {
            let bank_ref = &bank;
            let means = self.map_clients(sampled, |id| {
                let client = &self.clients[id];
                let priors = effective_priors(cfg.strategy, client);
                let tokens: Vec<&Tensor> = client.train.iter().map(|(t, _)| t).collect();
                let ctx = CcmpContext { bank: bank_ref, priors: &priors };
                let traces = forward(self.backbone, params, &tokens, Some(ctx), &opts, Some(layer))
                    .map_err(|e| train_err(0, id, e))?;
                let cls: Vec<&[f64]> = traces.iter().map(|t| t.cls_in[layer - 1].as_slice()).collect();
                class_means(&cls, &client.train_labels(), nc).map_err(|e| train_err(0, id, e))
            })?;
            bank.set_layer(layer, warmup_mean(&means, nc, d))?;
        }
        Ok(bank)
    }

    /// One client's round: prototypes from the broadcast state, then
    /// `local_epochs` of momentum SGD with global-norm clipping.
    pub fn local_train(
        &self,
        id: usize,
        start: &PromptParams,
        bank: Option<&PrototypeBank>,
        round: usize,
    ) -> Result<ClientUpdate> {
        let client = &self.clients[id];
        let cfg = self.config;
        let opts = self.opts();
        let priors = effective_priors(cfg.strategy, client);
        let ctx = bank.map(|bank| CcmpContext { bank, priors: &priors });
        let submission = match bank {
            Some(b) if cfg.strategy.uses_ccmp() => {
                Some(local_prototypes(self.backbone, start, client, b, &priors, &opts)?)
            }
            _ => None,
        };
        let mut params = start.clone();
        let mut velocity = params.zeros_like();
        let lr = cfg.lr_at(round);
        let mut rng = stream(self.seed, Purpose::Batches, round as u64, id as u64);
        let mut order: Vec<usize> = (0..client.train.len()).collect();
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for _ in 0..cfg.local_epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<(&Tensor, usize)> = chunk.iter().map(|&i| (&client.train[i].0, client.train[i].1)).collect();
                let (loss, mut grads) = loss_and_grads(self.backbone, &params, &batch, ctx, &opts)?;
                if !loss.is_finite() || !grads.is_finite() {
                    return Err(CoreError::Data(format!("non-finite loss {loss}")));
                }
                clip_global_norm(&mut grads, cfg.grad_clip);
                velocity.scale(cfg.momentum);
                velocity.add_scaled(&grads, 1.0)?;
                params.add_scaled(&velocity, -lr)?;
                loss_sum += loss;
                batches += 1;
            }
        }
        Ok(ClientUpdate {
            client: id,
            params,
            submission,
            num_samples: client.train.len(),
            train_loss: loss_sum / batches as f64,
        })
    }

    /// Runs round `state.round + 1` and returns its log.
    pub fn run_round(&self, state: &mut ServerState) -> Result<RoundLog> {
        let cfg = self.config;
        let t = state.round + 1;
        let count = cfg.clients_per_round.unwrap_or(self.pool.len());
        let mut rng = stream(self.seed, Purpose::Sampling, t as u64, 0);
        let participants: Vec<usize> =
            sample_clients(&mut rng, self.pool.len(), count)?.into_iter().map(|i| self.pool[i]).collect();
        let bank = state.bank.as_ref();
        let state_ref = &*state;
        let updates = self.map_clients(&participants, |id| {
            self.local_train(id, &state_ref.params_for(id), bank, t)
                .map_err(|e| train_err(t, id, e))
        })?;
        let averaged = fedavg_aggregate(&updates, cfg.weighted_fedavg)?;
        if cfg.strategy == Strategy::Personalized {
            for u in &updates {
                state.personal.insert(u.client, u.params.clone());
            }
            state.global.head = averaged.head;
        } else {
            state.global = averaged;
        }
        let mut prototypes_updated = false;
        if let Some(bank) = state.bank.as_mut() {
            for u in &updates {
                if let Some(s) = &u.submission {
                    bank.submit(s.clone())?;
                }
            }
            if t.is_multiple_of(cfg.update_period) {
                match cfg.dp_epsilon {
                    Some(eps) => {
                        let mut rng = stream(self.seed, Purpose::Privacy, t as u64, 0);
                        bank.end_period(Some((eps, &mut rng)))?;
                    }
                    None => {
                        bank.end_period::<rand_chacha::ChaCha8Rng>(None)?;
                    }
                }
                prototypes_updated = true;
            }
        }
        state.round = t;
        let train_loss = updates.iter().map(|u| u.train_loss).sum::<f64>() / updates.len() as f64;
        Ok(RoundLog {
            round: t,
            participants,
            train_loss,
            prototypes_updated,
        })
    }

    /// Warm-up followed by `rounds` rounds. `observer` sees the warm-started
    /// state (with `None`) and then the state after every round.
    pub fn run_training(
        &self,
        mut observer: impl FnMut(&ServerState, Option<&RoundLog>) -> Result<()>,
    ) -> Result<ServerState> {
        let global = self.initial_params()?;
        let bank = if self.config.strategy.uses_ccmp() {
            let count = ((self.config.warmup_fraction * self.pool.len() as f64).ceil() as usize).clamp(1, self.pool.len());
            let mut rng = stream(self.seed, Purpose::Warmup, 0, 0);
            let sampled: Vec<usize> =
                sample_clients(&mut rng, self.pool.len(), count)?.into_iter().map(|i| self.pool[i]).collect();
            Some(self.warm_startup(&global, &sampled)?)
        } else {
            None
        };
        let mut state = ServerState {
            global,
            personal: BTreeMap::new(),
            bank,
            round: 0,
        };
        observer(&state, None)?;
        for _ in 0..self.config.rounds {
            let log = self.run_round(&mut state)?;
            log::info!("round {} loss {:.4}", log.round, log.train_loss);
            observer(&state, Some(&log))?;
        }
        Ok(state)
    }
}

fn train_err(round: usize, client: usize, e: CoreError) -> CoreError {
    match e {
        CoreError::Training { .. } => e,
        other => CoreError::Training {
            round,
            client,
            source: Box::new(other),
        },
    }
}

/// Plain per-class mean over all sampled clients, zeros included.
pub fn warmup_mean(per_client: &[Vec<Vec<f64>>], num_classes: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; dim]; num_classes];
    for client in per_client {
        for (acc, proto) in out.iter_mut().zip(client) {
            for (a, v) in acc.iter_mut().zip(proto) {
                *a += v;
            }
        }
    }
    let n = per_client.len() as f64;
    out.iter_mut().flatten().for_each(|v| *v /= n);
    out
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut PromptParams, max_norm: f64) -> f64 {
    let norm = grads.sq_norm().sqrt();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Mean of the client parameters, accumulated in ascending client order as
/// `θ₀ + Σ wₖ (θₖ − θ₀)` so that identical updates average to themselves
/// exactly. Weights are `1/|S|`, or `Nₖ/ΣN` when `weighted`.
pub fn fedavg_aggregate(updates: &[ClientUpdate], weighted: bool) -> Result<PromptParams> {
    if updates.is_empty() {
        return Err(CoreError::Protocol("no client updates to aggregate".into()));
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client);
    let total: usize = sorted.iter().map(|u| u.num_samples).sum();
    let base = &sorted[0].params;
    let mut acc = base.clone();
    for u in &sorted[1..] {
        let w = if weighted {
            u.num_samples as f64 / total as f64
        } else {
            1.0 / sorted.len() as f64
        };
        let mut diff = u.params.clone();
        diff.add_scaled(base, -1.0)?;
        acc.add_scaled(&diff, w)?;
    }
    Ok(acc)
}
