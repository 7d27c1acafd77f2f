//! Runtime gradient checks. Every trainable loss is rebuilt at tiny
//! dimensions and its analytic gradient is compared against central
//! differences over all parameter scalars.

use crate::agent::{
    bc_batch_loss, init_navigator_params, pg_batch_loss, replay_episode, returns_and_advantages,
    rollout, EpisodeTape, RlConfig, RolloutMode,
};
use crate::auxtasks::{group_pairs, pretrain_batch_loss, AuxConfig};
use crate::error::Result;
use crate::fixtures::{max_fd_error, tiny_enc_cfg, tiny_fixture, tiny_store};
use crate::nn::{ParamStore, Tape};
use crate::rngutil::rng_for;
use crate::synthdata::{InstructionPathPair, Label};

/// Central-difference step size.
pub const FD_STEP: f64 = 1e-5;
/// Worst allowed relative error between analytic and numeric gradients.
pub const FD_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

fn check_alignment_only() -> Result<GradcheckReport> {
    let enc_cfg = tiny_enc_cfg();
    let aux_cfg = AuxConfig { alpha: 0.5, horizons: vec![] };
    let store = tiny_store(&enc_cfg, &aux_cfg, 23);
    let (envs, pairs) = tiny_fixture();
    let groups = group_pairs(&pairs)?;

    let tape = Tape::new();
    let bound = store.bind(&tape);
    let (loss, _) = pretrain_batch_loss(&tape, &bound, &enc_cfg, &aux_cfg, &envs, &groups)?;
    let grads = tape.backward(loss);
    let analytic = bound.collect_grads(&grads, &store);

    let mut value_of = |probe: &ParamStore| {
        let tape = Tape::new();
        let bound = probe.bind(&tape);
        let (loss, _) =
            pretrain_batch_loss(&tape, &bound, &enc_cfg, &aux_cfg, &envs, &groups).unwrap();
        loss.scalar()
    };
    let err = max_fd_error(&store, &analytic, &mut value_of, FD_STEP);
    Ok(GradcheckReport { name: "alignment", max_rel_err: err, tol: FD_TOL })
}

fn check_combined_pretrain() -> Result<GradcheckReport> {
    let enc_cfg = tiny_enc_cfg();
    let aux_cfg = AuxConfig::default();
    let store = tiny_store(&enc_cfg, &aux_cfg, 24);
    let (envs, pairs) = tiny_fixture();
    let groups = group_pairs(&pairs)?;

    let tape = Tape::new();
    let bound = store.bind(&tape);
    let (loss, _) = pretrain_batch_loss(&tape, &bound, &enc_cfg, &aux_cfg, &envs, &groups)?;
    let grads = tape.backward(loss);
    let analytic = bound.collect_grads(&grads, &store);

    let mut value_of = |probe: &ParamStore| {
        let tape = Tape::new();
        let bound = probe.bind(&tape);
        let (loss, _) =
            pretrain_batch_loss(&tape, &bound, &enc_cfg, &aux_cfg, &envs, &groups).unwrap();
        loss.scalar()
    };
    let err = max_fd_error(&store, &analytic, &mut value_of, FD_STEP);
    Ok(GradcheckReport { name: "alignment+coherence", max_rel_err: err, tol: FD_TOL })
}

fn check_behavior_cloning() -> Result<GradcheckReport> {
    let enc_cfg = tiny_enc_cfg();
    let rl_cfg = RlConfig { d_act: 3, ..RlConfig::default() };
    let mut rng = rng_for(36, "gradcheck-bc-params");
    let store = init_navigator_params(&enc_cfg, &rl_cfg, &mut rng)?;
    let (envs, pairs) = tiny_fixture();
    let positives: Vec<&InstructionPathPair> =
        pairs.iter().filter(|p| p.label == Label::Positive).collect();

    let tape = Tape::new();
    let bound = store.bind(&tape);
    let mut rng = rng_for(36, "gradcheck-bc");
    let (loss, _) = bc_batch_loss(&tape, &bound, &enc_cfg, &rl_cfg, &envs, &positives, &mut rng)?;
    let grads = tape.backward(loss);
    let analytic = bound.collect_grads(&grads, &store);

    let mut value_of = |probe: &ParamStore| {
        let tape = Tape::new();
        let bound = probe.bind(&tape);
        let mut rng = rng_for(36, "gradcheck-bc");
        let (loss, _) =
            bc_batch_loss(&tape, &bound, &enc_cfg, &rl_cfg, &envs, &positives, &mut rng).unwrap();
        loss.scalar()
    };
    let err = max_fd_error(&store, &analytic, &mut value_of, FD_STEP);
    Ok(GradcheckReport { name: "behavior-cloning", max_rel_err: err, tol: FD_TOL })
}

fn check_policy_gradient() -> Result<GradcheckReport> {
    let enc_cfg = tiny_enc_cfg();
    let rl_cfg = RlConfig { d_act: 3, ..RlConfig::default() };
    let mut rng = rng_for(37, "gradcheck-pg-params");
    let store = init_navigator_params(&enc_cfg, &rl_cfg, &mut rng)?;
    let (envs, pairs) = tiny_fixture();
    let positives: Vec<&InstructionPathPair> =
        pairs.iter().filter(|p| p.label == Label::Positive).collect();

    // Trajectories are collected once and frozen; the loss is then a smooth
    // function of the parameters through forced replay.
    let mut frozen = Vec::new();
    {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        for (i, pair) in positives.iter().enumerate() {
            let env = &envs[pair.env_id()];
            let mut rng = rng_for(37, &format!("gradcheck-pg-{i}"));
            let (traj, _) =
                rollout(&tape, &bound, &enc_cfg, &rl_cfg, env, pair, RolloutMode::Sample, &mut rng)?;
            let (rets, advs) = returns_and_advantages(&traj, rl_cfg.gamma);
            frozen.push((traj, rets, advs));
        }
    }

    let loss_and_grads = |probe: &ParamStore| -> Result<(f64, crate::nn::GradStore)> {
        let tape = Tape::new();
        let bound = probe.bind(&tape);
        let episodes: Vec<EpisodeTape<'_>> = positives
            .iter()
            .zip(&frozen)
            .map(|(pair, (traj, _, _))| {
                replay_episode(&tape, &bound, &enc_cfg, &envs[pair.env_id()], pair, traj)
            })
            .collect::<Result<_>>()?;
        let tuples: Vec<(&EpisodeTape<'_>, &[f64], &[f64])> = episodes
            .iter()
            .zip(&frozen)
            .map(|(e, (_, r, a))| (e, r.as_slice(), a.as_slice()))
            .collect();
        let (loss, _) = pg_batch_loss(&tape, &tuples, rl_cfg.value_loss_weight)?;
        let grads = tape.backward(loss);
        Ok((loss.scalar(), bound.collect_grads(&grads, probe)))
    };

    let (_, analytic) = loss_and_grads(&store)?;
    let mut value_of = |probe: &ParamStore| loss_and_grads(probe).unwrap().0;
    let err = max_fd_error(&store, &analytic, &mut value_of, FD_STEP);
    Ok(GradcheckReport { name: "policy-gradient", max_rel_err: err, tol: FD_TOL })
}

/// Runs every gradient check and returns one report per loss.
pub fn run_all() -> Result<Vec<GradcheckReport>> {
    Ok(vec![
        check_alignment_only()?,
        check_combined_pretrain()?,
        check_behavior_cloning()?,
        check_policy_gradient()?,
    ])
}
