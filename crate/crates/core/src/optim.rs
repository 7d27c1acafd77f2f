//! Optimizers, stepwise learning-rate decay, and the two training loops:
//! discriminator pretraining over mined groups and agent training with
//! interleaved behavioral cloning and policy gradient.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{
    bc_batch_loss, interleave_schedule, pg_batch_loss, returns_and_advantages, rollout,
    sf_batch_loss, warm_start_agent, init_navigator_params, EpisodeTape, RlConfig, RolloutMode,
    WarmStartManifest,
};
use crate::auxtasks::{group_pairs, init_aux_params, pretrain_batch_loss, AuxConfig};
use crate::checkpoint::Checkpoint;
use crate::encoders::{init_encoder_params, EncoderConfig};
use crate::envgraph::EnvironmentGraph;
use crate::error::{Error, Result};
use crate::evalmetrics::{evaluate_agent, evaluate_discriminator};
use crate::nn::{GradStore, ParamStore, Tape};
use crate::rngutil::{rng_for, rng_for_indexed};
use crate::synthdata::{InstructionPathPair, Label, Provenance, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimKind {
    Momentum,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every_steps: usize,
    pub momentum: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimKind::Momentum,
            lr0: 1e-2,
            decay_factor: 0.8,
            decay_every_steps: 2_000,
            momentum: 0.9,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 5.0,
            batch_size: 32,
            total_steps: 400,
            eval_every: 50,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::InvalidParams("lr0 must be positive".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::InvalidParams("decay_factor must lie in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParams("momentum must lie in [0, 1)".into()));
        }
        if self.decay_every_steps == 0
            || self.batch_size == 0
            || self.total_steps == 0
            || self.eval_every == 0
        {
            return Err(Error::InvalidParams(
                "decay_every_steps, batch_size, total_steps, eval_every must be positive".into(),
            ));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::InvalidParams("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// Stepwise-decayed learning rate.
pub fn lr_at(step: usize, cfg: &OptimConfig) -> f64 {
    cfg.lr0 * cfg.decay_factor.powi((step / cfg.decay_every_steps) as i32)
}

/// Per-parameter optimizer state. Moments live beside the velocity so one
/// state type serves both kinds.
#[derive(Clone, Debug)]
pub struct OptimState {
    velocity: GradStore,
    m: GradStore,
    v: GradStore,
    t: u32,
}

impl OptimState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            velocity: GradStore::zeros_like(params),
            m: GradStore::zeros_like(params),
            v: GradStore::zeros_like(params),
            t: 0,
        }
    }
}

/// One optimizer update in place. Gradients are checked finite, globally
/// norm-clipped, then applied by the configured rule.
pub fn optimizer_step(
    params: &mut ParamStore,
    grads: &GradStore,
    state: &mut OptimState,
    cfg: &OptimConfig,
    step: usize,
) -> Result<()> {
    grads.check_finite()?;
    let mut grads = grads.clone();
    let norm = grads.global_norm();
    if norm > cfg.grad_clip {
        grads.scale(cfg.grad_clip / norm);
    }
    let lr = lr_at(step, cfg);
    match cfg.kind {
        OptimKind::Momentum => {
            for (name, g) in grads.iter() {
                let vel = state.velocity.get_mut(name).expect("state matches params");
                let p = params.get_mut(name).expect("grad name in params");
                for ((vi, pi), gi) in vel.iter_mut().zip(p.iter_mut()).zip(g.iter()) {
                    *vi = cfg.momentum * *vi + gi;
                    *pi -= lr * *vi;
                }
            }
        }
        OptimKind::Adam => {
            state.t += 1;
            let bc1 = 1.0 - cfg.adam_beta1.powi(state.t as i32);
            let bc2 = 1.0 - cfg.adam_beta2.powi(state.t as i32);
            for (name, g) in grads.iter() {
                let m = state.m.get_mut(name).expect("state matches params");
                let v = state.v.get_mut(name).expect("state matches params");
                let p = params.get_mut(name).expect("grad name in params");
                for (((mi, vi), pi), gi) in
                    m.iter_mut().zip(v.iter_mut()).zip(p.iter_mut()).zip(g.iter())
                {
                    *mi = cfg.adam_beta1 * *mi + (1.0 - cfg.adam_beta1) * gi;
                    *vi = cfg.adam_beta2 * *vi + (1.0 - cfg.adam_beta2) * gi * gi;
                    *pi -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.adam_eps);
                }
            }
        }
    }
    params.check_finite()
}

/// One line of a training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub split: String,
    pub loss: f64,
    pub auc: Option<f64>,
    pub sr: Option<f64>,
    pub spl: Option<f64>,
    pub lr: f64,
}

pub fn history_csv<W: Write>(mut w: W, rows: &[MetricsRow]) -> Result<()> {
    writeln!(w, "step,split,loss,auc,sr,spl,lr")?;
    for r in rows {
        let opt = |o: Option<f64>| o.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.step,
            r.split,
            r.loss,
            opt(r.auc),
            opt(r.sr),
            opt(r.spl),
            r.lr
        )?;
    }
    Ok(())
}

/// Epoch-shuffled index stream; refills and reshuffles when exhausted.
struct BatchCycle {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha12Rng,
}

impl BatchCycle {
    fn new(n: usize, rng: ChaCha12Rng) -> Self {
        Self { order: (0..n).collect(), pos: n, rng }
    }

    fn next(&mut self, take: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(take);
        while out.len() < take {
            if self.pos >= self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub final_params: ParamStore,
    pub best_params: ParamStore,
    pub best_step: Option<usize>,
    pub best_auc: Option<f64>,
    pub history: Vec<MetricsRow>,
}

const ALL_STRATEGIES: [Provenance; 5] = [
    Provenance::HumanSynth,
    Provenance::SpeakerSynth,
    Provenance::Ps,
    Provenance::Rw,
    Provenance::Pr,
];
const VAL_STRATEGIES: [Provenance; 2] = [Provenance::Pr, Provenance::Rw];

/// Mini-batch pretraining of the discriminator over mined groups. Train
/// batches use every negative strategy; validation AUC is restricted to
/// path-ranking and random-walk negatives. The checkpoint with the best
/// validation AUC (falling back to seen validation, then train) is kept.
pub fn train_discriminator(
    enc_cfg: &EncoderConfig,
    aux_cfg: &AuxConfig,
    cfg: &OptimConfig,
    envs: &BTreeMap<String, EnvironmentGraph>,
    pairs: &[InstructionPathPair],
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let train_pairs: Vec<InstructionPathPair> =
        pairs.iter().filter(|p| p.split == Split::Train).cloned().collect();
    if train_pairs.iter().all(|p| p.label == Label::Negative) {
        return Err(Error::EmptyInput("no training groups".into()));
    }
    let eval_sets = eval_pair_sets(pairs);

    let mut rng = rng_for(cfg.seed, "pretrain-init");
    let mut params = init_encoder_params(enc_cfg, &mut rng)?;
    params.merge(init_aux_params(enc_cfg, aux_cfg, &mut rng)?);
    let mut state = OptimState::new(&params);

    let groups = group_pairs(&train_pairs)?;
    let mut cycle = BatchCycle::new(groups.len(), rng_for(cfg.seed, "pretrain-batches"));

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for step in 0..cfg.total_steps {
        let batch: Vec<_> = cycle.next(cfg.batch_size.min(groups.len()))
            .into_iter()
            .map(|i| groups[i].clone())
            .collect();
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let (loss, stats) = pretrain_batch_loss(&tape, &bound, enc_cfg, aux_cfg, envs, &batch)?;
        let grads = tape.backward(loss);
        let collected = bound.collect_grads(&grads, &params);
        optimizer_step(&mut params, &collected, &mut state, cfg, step)?;
        history.push(MetricsRow {
            step,
            split: "train".into(),
            loss: stats.loss,
            auc: None,
            sr: None,
            spl: None,
            lr: lr_at(step, cfg),
        });

        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.total_steps {
            let mut chosen: Option<f64> = None;
            for (split, subset, restrict) in &eval_sets {
                let eval =
                    evaluate_discriminator(&params, enc_cfg, envs, subset, restrict)?;
                let auc = eval.auc_by_split.get(split).copied();
                let loss = eval_split_loss(&params, enc_cfg, aux_cfg, envs, subset)?;
                history.push(MetricsRow {
                    step,
                    split: split_label(*split).into(),
                    loss,
                    auc,
                    sr: None,
                    spl: None,
                    lr: lr_at(step, cfg),
                });
                if let Some(auc) = auc {
                    chosen = Some(auc);
                }
            }
            if let Some(metric) = chosen {
                let better = best.as_ref().map(|(b, _, _)| metric > *b).unwrap_or(true);
                if better {
                    best = Some((metric, step, params.clone()));
                }
            }
        }
    }
    let (best_auc, best_step, best_params) = match best {
        Some((a, s, p)) => (Some(a), Some(s), p),
        None => (None, None, params.clone()),
    };
    Ok(PretrainOutcome { final_params: params, best_params, best_step, best_auc, history })
}

/// Evaluation subsets in priority order: train (all strategies), then
/// val_seen and val_unseen (restricted strategies). The last subset with a
/// defined AUC drives checkpoint selection.
fn eval_pair_sets(
    pairs: &[InstructionPathPair],
) -> Vec<(Split, Vec<InstructionPathPair>, Vec<Provenance>)> {
    let mut sets = Vec::new();
    for (split, restrict) in [
        (Split::Train, ALL_STRATEGIES.to_vec()),
        (Split::ValSeen, VAL_STRATEGIES.to_vec()),
        (Split::ValUnseen, VAL_STRATEGIES.to_vec()),
    ] {
        let subset: Vec<InstructionPathPair> = pairs
            .iter()
            .filter(|p| {
                p.split == split
                    && (p.label == Label::Positive || restrict.contains(&p.provenance))
            })
            .cloned()
            .collect();
        let has_both = subset.iter().any(|p| p.label == Label::Positive)
            && subset.iter().any(|p| p.label == Label::Negative);
        if has_both {
            sets.push((split, subset, restrict));
        }
    }
    sets
}

fn split_label(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::ValSeen => "val_seen",
        Split::ValUnseen => "val_unseen",
    }
}

fn eval_split_loss(
    params: &ParamStore,
    enc_cfg: &EncoderConfig,
    aux_cfg: &AuxConfig,
    envs: &BTreeMap<String, EnvironmentGraph>,
    subset: &[InstructionPathPair],
) -> Result<f64> {
    let groups = group_pairs(subset)?;
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let (_, stats) = pretrain_batch_loss(&tape, &bound, enc_cfg, aux_cfg, envs, &groups)?;
    Ok(stats.loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentMode {
    Sf,
    Rcm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentTrainConfig {
    pub mode: AgentMode,
    /// Behavioral-cloning steps before interleaving begins (RCM mode).
    pub bc_warm_steps: usize,
    /// Base learning rate when warm-started from a pretrained checkpoint.
    pub lr_warm: f64,
    /// Base learning rate when training from scratch.
    pub lr_cold: f64,
    /// Optimizer settings. `lr0` is overridden by `lr_warm` or `lr_cold`
    /// depending on whether a checkpoint is supplied.
    pub optim: OptimConfig,
}

impl Default for AgentTrainConfig {
    fn default() -> Self {
        Self {
            mode: AgentMode::Rcm,
            bc_warm_steps: 1_000,
            lr_warm: 1e-5,
            lr_cold: 1e-4,
            optim: OptimConfig {
                kind: OptimKind::Adam,
                lr0: 1e-4,
                decay_factor: 0.5,
                decay_every_steps: 2_000,
                batch_size: 8,
                total_steps: 1_200,
                eval_every: 100,
                ..OptimConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct AgentOutcome {
    pub final_params: ParamStore,
    pub best_params: ParamStore,
    pub best_step: Option<usize>,
    pub history: Vec<MetricsRow>,
    pub warm_manifest: Option<WarmStartManifest>,
    pub bc_steps: usize,
    pub pg_steps: usize,
    pub sf_steps: usize,
}

/// Agent training. SF mode takes a student-forcing step per batch; RCM mode
/// runs a behavioral-cloning warm phase and then interleaves K cloning
/// batches with each policy-gradient batch, K decaying on the schedule.
/// Warm-started runs use the lower base learning rate.
pub fn train_agent(
    enc_cfg: &EncoderConfig,
    rl_cfg: &RlConfig,
    train_cfg: &AgentTrainConfig,
    envs: &BTreeMap<String, EnvironmentGraph>,
    pairs: &[InstructionPathPair],
    warm: Option<&Checkpoint>,
) -> Result<AgentOutcome> {
    let cfg = OptimConfig {
        lr0: if warm.is_some() { train_cfg.lr_warm } else { train_cfg.lr_cold },
        ..train_cfg.optim.clone()
    };
    cfg.validate()?;
    rl_cfg.validate()?;
    let train_pairs: Vec<&InstructionPathPair> = pairs
        .iter()
        .filter(|p| p.label == Label::Positive && p.split == Split::Train)
        .collect();
    if train_pairs.is_empty() {
        return Err(Error::EmptyInput("no training episodes".into()));
    }
    let eval_splits: Vec<(Split, Vec<InstructionPathPair>)> =
        [Split::Train, Split::ValSeen, Split::ValUnseen]
            .into_iter()
            .filter_map(|split| {
                let subset: Vec<InstructionPathPair> = pairs
                    .iter()
                    .filter(|p| p.label == Label::Positive && p.split == split)
                    .cloned()
                    .collect();
                (!subset.is_empty()).then_some((split, subset))
            })
            .collect();

    let mut rng = rng_for(cfg.seed, "agent-init");
    let mut params = init_navigator_params(enc_cfg, rl_cfg, &mut rng)?;
    let warm_manifest = match warm {
        Some(ckpt) => Some(warm_start_agent(&mut params, ckpt)?),
        None => None,
    };
    let mut state = OptimState::new(&params);
    let mut cycle = BatchCycle::new(train_pairs.len(), rng_for(cfg.seed, "agent-batches"));

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut bc_steps = 0;
    let mut pg_steps = 0;
    let mut sf_steps = 0;
    let mut pg_blocks = 0usize;
    let mut bc_left_in_block = interleave_schedule(0, rl_cfg.k0, rl_cfg.rho);
    let mut warm_left = train_cfg.bc_warm_steps;

    for step in 0..cfg.total_steps {
        let batch: Vec<&InstructionPathPair> = cycle
            .next(cfg.batch_size.min(train_pairs.len()))
            .into_iter()
            .map(|i| train_pairs[i])
            .collect();
        let loss_value = match train_cfg.mode {
            AgentMode::Sf => {
                sf_steps += 1;
                sf_step(&mut params, &mut state, &cfg, enc_cfg, rl_cfg, envs, &batch, step)?
            }
            AgentMode::Rcm => {
                let do_bc = if warm_left > 0 {
                    warm_left -= 1;
                    true
                } else if bc_left_in_block > 0 {
                    bc_left_in_block -= 1;
                    true
                } else {
                    pg_blocks += 1;
                    bc_left_in_block =
                        interleave_schedule(pg_blocks, rl_cfg.k0, rl_cfg.rho);
                    false
                };
                if do_bc {
                    bc_steps += 1;
                    bc_step(&mut params, &mut state, &cfg, enc_cfg, rl_cfg, envs, &batch, step)?
                } else {
                    pg_steps += 1;
                    pg_step(&mut params, &mut state, &cfg, enc_cfg, rl_cfg, envs, &batch, step)?
                }
            }
        };
        history.push(MetricsRow {
            step,
            split: "train".into(),
            loss: loss_value,
            auc: None,
            sr: None,
            spl: None,
            lr: lr_at(step, &cfg),
        });

        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.total_steps {
            let mut chosen = None;
            for (split, subset) in &eval_splits {
                let eval = evaluate_agent(
                    &params,
                    enc_cfg,
                    rl_cfg,
                    envs,
                    subset,
                    RolloutMode::Greedy,
                )?;
                let metrics = &eval.table.splits[split];
                let loss = teacher_nll(&params, enc_cfg, rl_cfg, envs, subset, cfg.seed)?;
                history.push(MetricsRow {
                    step,
                    split: split_label(*split).into(),
                    loss,
                    auc: None,
                    sr: Some(metrics.success_rate),
                    spl: Some(metrics.spl),
                    lr: lr_at(step, &cfg),
                });
                chosen = Some(metrics.success_rate);
            }
            if let Some(metric) = chosen {
                let better = best.as_ref().map(|(b, _, _)| metric > *b).unwrap_or(true);
                if better {
                    best = Some((metric, step, params.clone()));
                }
            }
        }
    }
    let (best_step, best_params) = match best {
        Some((_, s, p)) => (Some(s), p),
        None => (None, params.clone()),
    };
    Ok(AgentOutcome {
        final_params: params,
        best_params,
        best_step,
        history,
        warm_manifest,
        bc_steps,
        pg_steps,
        sf_steps,
    })
}

#[allow(clippy::too_many_arguments)]
fn bc_step(
    params: &mut ParamStore,
    state: &mut OptimState,
    cfg: &OptimConfig,
    enc_cfg: &EncoderConfig,
    rl_cfg: &RlConfig,
    envs: &BTreeMap<String, EnvironmentGraph>,
    batch: &[&InstructionPathPair],
    step: usize,
) -> Result<f64> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let mut rng = rng_for_indexed(cfg.seed, "bc-batch", step as u64);
    let (loss, stats) = bc_batch_loss(&tape, &bound, enc_cfg, rl_cfg, envs, batch, &mut rng)?;
    let grads = tape.backward(loss);
    let collected = bound.collect_grads(&grads, params);
    optimizer_step(params, &collected, state, cfg, step)?;
    Ok(stats.loss)
}

#[allow(clippy::too_many_arguments)]
fn pg_step(
    params: &mut ParamStore,
    state: &mut OptimState,
    cfg: &OptimConfig,
    enc_cfg: &EncoderConfig,
    rl_cfg: &RlConfig,
    envs: &BTreeMap<String, EnvironmentGraph>,
    batch: &[&InstructionPathPair],
    step: usize,
) -> Result<f64> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let mut collected_eps = Vec::with_capacity(batch.len());
    for (slot, pair) in batch.iter().enumerate() {
        let env = envs
            .get(pair.env_id())
            .ok_or_else(|| Error::UnknownNode(format!("environment `{}`", pair.env_id())))?;
        let mut rng =
            rng_for_indexed(cfg.seed, &format!("pg-rollout-{step}"), slot as u64);
        let (traj, episode) =
            rollout(&tape, &bound, enc_cfg, rl_cfg, env, pair, RolloutMode::Sample, &mut rng)?;
        let (rets, advs) = returns_and_advantages(&traj, rl_cfg.gamma);
        collected_eps.push((episode, rets, advs));
    }
    let tuples: Vec<(&EpisodeTape<'_>, &[f64], &[f64])> = collected_eps
        .iter()
        .map(|(e, r, a)| (e, r.as_slice(), a.as_slice()))
        .collect();
    let (loss, stats) = pg_batch_loss(&tape, &tuples, rl_cfg.value_loss_weight)?;
    let grads = tape.backward(loss);
    let collected = bound.collect_grads(&grads, params);
    optimizer_step(params, &collected, state, cfg, step)?;
    Ok(stats.loss)
}

#[allow(clippy::too_many_arguments)]
fn sf_step(
    params: &mut ParamStore,
    state: &mut OptimState,
    cfg: &OptimConfig,
    enc_cfg: &EncoderConfig,
    rl_cfg: &RlConfig,
    envs: &BTreeMap<String, EnvironmentGraph>,
    batch: &[&InstructionPathPair],
    step: usize,
) -> Result<f64> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let mut episodes = Vec::with_capacity(batch.len());
    for (slot, pair) in batch.iter().enumerate() {
        let env = envs
            .get(pair.env_id())
            .ok_or_else(|| Error::UnknownNode(format!("environment `{}`", pair.env_id())))?;
        let mut rng =
            rng_for_indexed(cfg.seed, &format!("sf-rollout-{step}"), slot as u64);
        let (_, episode) =
            rollout(&tape, &bound, enc_cfg, rl_cfg, env, pair, RolloutMode::Sample, &mut rng)?;
        episodes.push(episode);
    }
    let (loss, stats) = sf_batch_loss(&tape, &episodes)?;
    let grads = tape.backward(loss);
    let collected = bound.collect_grads(&grads, params);
    optimizer_step(params, &collected, state, cfg, step)?;
    Ok(stats.loss)
}

/// Mean teacher negative log-likelihood over a split, the "loss" column of
/// navigation eval rows.
fn teacher_nll(
    params: &ParamStore,
    enc_cfg: &EncoderConfig,
    rl_cfg: &RlConfig,
    envs: &BTreeMap<String, EnvironmentGraph>,
    subset: &[InstructionPathPair],
    seed: u64,
) -> Result<f64> {
    let refs: Vec<&InstructionPathPair> = subset.iter().collect();
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let mut rng = rng_for(seed, "eval-teacher-nll");
    let (_, stats) = bc_batch_loss(&tape, &bound, enc_cfg, rl_cfg, envs, &refs, &mut rng)?;
    Ok(stats.loss)
}
