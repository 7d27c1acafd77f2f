//! The navigation agent: a co-grounded action policy over navigable
//! directions, episode rollouts (sampled, greedy, or teacher-forced),
//! behavioral-cloning and policy-gradient losses with a learned value
//! baseline, dense goal-distance rewards, and encoder warm-starting from
//! pretraining checkpoints.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{warm_start, Checkpoint};
use crate::encoders::{
    attention, encode_instruction, init_encoder_params, EncoderConfig, VisualTower,
};
use crate::envgraph::{bearing, ActionCandidate, EnvironmentGraph, Path};
use crate::error::{Error, Result};
use crate::nn::{concat_cols, concat_rows, fan_in_init, mean_of, BoundParams, ParamStore, Tape, Var};
use crate::synthdata::InstructionPathPair;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadingInit {
    /// Face the first reference-path edge (keeps teacher supervision
    /// consistent with the instruction's first clause).
    FirstEdge,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub gamma: f64,
    /// Success threshold on the goal distance.
    pub d_th: f64,
    pub max_steps: usize,
    /// Initial behavioral-cloning batches per policy-gradient batch.
    pub k0: usize,
    /// Interleave decay applied per 100 policy-gradient batches.
    pub rho: f64,
    /// Weight of the value-head MSE term in the policy-gradient loss.
    pub value_loss_weight: f64,
    /// Width of the bilinear action space.
    pub d_act: usize,
    pub heading_init: HeadingInit,
    pub seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            d_th: 3.0,
            max_steps: 10,
            k0: 8,
            rho: 0.8,
            value_loss_weight: 0.5,
            d_act: 32,
            heading_init: HeadingInit::FirstEdge,
            seed: 0,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidParams("gamma must be in (0, 1]".into()));
        }
        if !(self.d_th > 0.0) {
            return Err(Error::InvalidParams("d_th must be positive".into()));
        }
        if self.max_steps == 0 || self.d_act == 0 {
            return Err(Error::InvalidParams("max_steps and d_act must be positive".into()));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::InvalidParams("rho must be in (0, 1]".into()));
        }
        if !(self.value_loss_weight >= 0.0) {
            return Err(Error::InvalidParams("value_loss_weight must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Agent-only parameters. Registry names are disjoint from the encoder's,
/// so warm starts copy the shared towers and leave these fresh.
pub fn init_agent_params(
    enc_cfg: &EncoderConfig,
    rl_cfg: &RlConfig,
    rng: &mut impl Rng,
) -> Result<ParamStore> {
    rl_cfg.validate()?;
    let d_state = enc_cfg.d_v + enc_cfg.d_lang() + enc_cfg.d_view();
    let mut store = ParamStore::new();
    store.insert("agent.W_c", fan_in_init(rng, d_state, rl_cfg.d_act));
    store.insert("agent.W_u", fan_in_init(rng, enc_cfg.d_view(), rl_cfg.d_act));
    store.insert("agent.text_att.W_q", fan_in_init(rng, enc_cfg.d_v, enc_cfg.d_att));
    store.insert("agent.text_att.W_k", fan_in_init(rng, enc_cfg.d_lang(), enc_cfg.d_att));
    store.insert("agent.vis_att.W_q", fan_in_init(rng, enc_cfg.d_lang(), enc_cfg.d_att));
    store.insert("agent.vis_att.W_k", fan_in_init(rng, enc_cfg.d_view(), enc_cfg.d_att));
    store.insert("agent.value.w", fan_in_init(rng, enc_cfg.d_v, 1));
    store.insert("agent.value.b", Array2::zeros((1, 1)));
    Ok(store)
}

/// Encoder towers plus agent head in one store, in a fixed draw order.
pub fn init_navigator_params(
    enc_cfg: &EncoderConfig,
    rl_cfg: &RlConfig,
    rng: &mut impl Rng,
) -> Result<ParamStore> {
    let mut store = init_encoder_params(enc_cfg, rng)?;
    store.merge(init_agent_params(enc_cfg, rl_cfg, rng)?);
    Ok(store)
}

/// One decision point: logits over the candidate list (STOP last), their
/// softmax as plain floats, and the two context vectors.
pub struct StepDecision<'t> {
    pub logits: Var<'t>,
    pub probs: Vec<f64>,
    pub c_text: Var<'t>,
    pub c_visual: Var<'t>,
}

/// Policy head: c_text attends over instruction states with the visual
/// hidden state as query, c_visual attends over the current panorama with
/// c_text as query, and each candidate is scored by a bilinear dot product
/// between the concatenated state and its direction feature.
pub fn action_distribution<'t>(
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    h_v: Var<'t>,
    hx_matrix: Var<'t>,
    views: Var<'t>,
    candidates: &[ActionCandidate],
) -> Result<StepDecision<'t>> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput("no action candidates".into()));
    }
    let var = |name: &str| {
        bound
            .try_var(name)
            .ok_or_else(|| Error::InvalidParams(format!("missing parameter {name}")))
    };
    let (c_text, _) =
        attention(h_v, hx_matrix, hx_matrix, var("agent.text_att.W_q")?, var("agent.text_att.W_k")?)?;
    let (c_visual, _) =
        attention(c_text, views, views, var("agent.vis_att.W_q")?, var("agent.vis_att.W_k")?)?;
    let state = concat_cols(tape, &[h_v, c_text, c_visual]);
    let d_view = candidates[0].feature.len();
    // The stop row stays a live variable so its feature keeps learning.
    let has_stop = candidates.last().is_some_and(|c| c.target.is_none());
    let n_moves = candidates.len() - usize::from(has_stop);
    let moves = tape.constant(Array2::from_shape_fn((n_moves, d_view), |(i, j)| {
        candidates[i].feature[j]
    }));
    let u = if !has_stop {
        moves
    } else if n_moves == 0 {
        var("vis.stop_feature")?
    } else {
        concat_rows(tape, &[moves, var("vis.stop_feature")?])
    };
    let logits = state.matmul(var("agent.W_c")?).matmul(u.matmul(var("agent.W_u")?).t());
    let probs = logits.softmax_row().value().row(0).to_vec();
    Ok(StepDecision { logits, probs, c_text, c_visual })
}

/// Log-probability of candidate `index` under the logits row.
pub fn log_prob_of<'t>(logits: Var<'t>, index: usize) -> Var<'t> {
    logits.slice_cols(index, index + 1).sub(logits.logsumexp_row())
}

/// Reward as a function of goal distances; `t` is 1-based in an episode of
/// `episode_len` actions. Before the final action the reward is the
/// distance made good; at the final action it is the success indicator of
/// the resulting position.
pub fn reward_from_distances(
    d_before: f64,
    d_after: f64,
    t: usize,
    episode_len: usize,
    d_th: f64,
) -> f64 {
    assert!(t >= 1 && t <= episode_len, "step {t} outside episode of {episode_len}");
    if t < episode_len {
        d_before - d_after
    } else if d_after <= d_th {
        1.0
    } else {
        0.0
    }
}

/// Reward for moving `s_t` -> `s_next` toward `goal` at step `t` (1-based).
pub fn reward(
    env: &EnvironmentGraph,
    s_t: &str,
    s_next: &str,
    goal: &str,
    t: usize,
    episode_len: usize,
    d_th: f64,
) -> Result<f64> {
    let d_before = env.geodesic_distance(s_t, goal)?;
    let d_after = env.geodesic_distance(s_next, goal)?;
    Ok(reward_from_distances(d_before, d_after, t, episode_len, d_th))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    Sample,
    Greedy,
    Teacher,
}

#[derive(Clone, Debug, Serialize)]
pub struct StepRecord {
    /// Node the action was taken from.
    pub node: String,
    pub heading: f64,
    /// Candidate index chosen (STOP is the last index).
    pub action: usize,
    /// Destination, or None for STOP.
    pub target: Option<String>,
    /// Raw candidate logits (STOP last), before the softmax.
    pub logits: Vec<f64>,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Trajectory {
    pub pair_id: String,
    pub env_id: String,
    pub goal: String,
    /// Visited nodes, start first; one more entry than moving steps.
    pub nodes: Vec<String>,
    pub steps: Vec<StepRecord>,
    /// True when the episode ended by STOP rather than the step cap.
    pub stopped: bool,
    pub success: bool,
}

impl Trajectory {
    pub fn final_node(&self) -> &str {
        self.nodes.last().unwrap()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn predicted_path(&self, env: &EnvironmentGraph) -> Result<Path> {
        Path::new(env, self.nodes.clone(), false)
    }
}

/// Tape-side episode record: differentiable log-probs and values aligned
/// with the trajectory's steps. Teacher log-probs are kept when requested
/// so student forcing can supervise sampled states with teacher actions.
pub struct EpisodeTape<'t> {
    pub log_probs: Vec<Var<'t>>,
    pub values: Vec<Var<'t>>,
    pub teacher_log_probs: Vec<Var<'t>>,
    /// Model argmax at each step, for teacher-accuracy accounting.
    pub argmax_actions: Vec<usize>,
    /// Teacher (shortest-path) action index at each step.
    pub teacher_actions: Vec<usize>,
}

fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

fn sample_index(probs: &[f64], rng: &mut ChaCha12Rng) -> usize {
    let u: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Index of the teacher action: the candidate moving along the first edge
/// of the current shortest path to the goal, or STOP at the goal.
fn teacher_action(
    env: &EnvironmentGraph,
    node: &str,
    goal: &str,
    candidates: &[ActionCandidate],
) -> Result<usize> {
    if node == goal {
        return Ok(candidates.len() - 1);
    }
    let path = env.shortest_path(node, goal)?;
    let next = &path.node_ids()[1];
    candidates
        .iter()
        .position(|c| c.target.as_deref() == Some(next.as_str()))
        .ok_or_else(|| Error::InvalidPath(format!("no candidate from `{node}` to `{next}`")))
}

/// Runs one episode from the pair's start node toward its goal node. The
/// instruction is encoded once; each visited panorama advances the shared
/// visual tower; actions come from the policy (sample/greedy) or from
/// per-step shortest paths (teacher). Greedy consumes no randomness.
#[allow(clippy::too_many_arguments)]
pub fn rollout<'t>(
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    enc_cfg: &EncoderConfig,
    rl_cfg: &RlConfig,
    env: &EnvironmentGraph,
    pair: &InstructionPathPair,
    mode: RolloutMode,
    rng: &mut ChaCha12Rng,
) -> Result<(Trajectory, EpisodeTape<'t>)> {
    rl_cfg.validate()?;
    if pair.env_id() != env.env_id() {
        return Err(Error::InvalidPath(format!(
            "pair `{}` belongs to `{}`, not `{}`",
            pair.id,
            pair.env_id(),
            env.env_id()
        )));
    }
    let start = pair.path.first().to_string();
    let goal = pair.path.last().to_string();

    let hx = encode_instruction(tape, bound, enc_cfg, &pair.instruction.tokens, None)?
        .state_matrix(tape);
    let mut tower = VisualTower::bind(tape, bound, enc_cfg)?;
    let stop_row = bound
        .try_var("vis.stop_feature")
        .ok_or_else(|| Error::InvalidParams("missing parameter vis.stop_feature".into()))?;
    let stop_feature = stop_row.value().row(0).to_owned();
    let value_w = bound
        .try_var("agent.value.w")
        .ok_or_else(|| Error::InvalidParams("missing parameter agent.value.w".into()))?;
    let value_b = bound
        .try_var("agent.value.b")
        .ok_or_else(|| Error::InvalidParams("missing parameter agent.value.b".into()))?;

    let mut heading = match rl_cfg.heading_init {
        HeadingInit::Random => rng.random_range(0.0..std::f64::consts::TAU),
        HeadingInit::FirstEdge => {
            if pair.path.n_edges() == 0 {
                0.0
            } else {
                let a = env.node(pair.path.node_ids()[0].as_str())?.position;
                let b = env.node(pair.path.node_ids()[1].as_str())?.position;
                bearing(a, b)
            }
        }
    };

    let mut node = start.clone();
    let mut nodes = vec![start];
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut episode = EpisodeTape {
        log_probs: Vec::new(),
        values: Vec::new(),
        teacher_log_probs: Vec::new(),
        argmax_actions: Vec::new(),
        teacher_actions: Vec::new(),
    };

    for t in 0..rl_cfg.max_steps {
        let views = tape.constant(env.view_matrix(&node)?);
        let (h_top, _) = tower.step(views)?;
        let candidates = env.navigable_actions(&node, heading, &stop_feature)?;
        let decision = action_distribution(tape, bound, h_top, hx, views, &candidates)?;
        let value = h_top.matmul(value_w).add(value_b);

        let teacher = teacher_action(env, &node, &goal, &candidates)?;
        let chosen = match mode {
            RolloutMode::Teacher => teacher,
            RolloutMode::Greedy => argmax(&decision.probs),
            RolloutMode::Sample => sample_index(&decision.probs, rng),
        };
        let log_prob = log_prob_of(decision.logits, chosen);
        episode.log_probs.push(log_prob);
        episode.values.push(value);
        episode.teacher_log_probs.push(log_prob_of(decision.logits, teacher));
        episode.argmax_actions.push(argmax(&decision.probs));
        episode.teacher_actions.push(teacher);

        let target = candidates[chosen].target.clone();
        let (next_node, is_last) = match &target {
            None => (node.clone(), true),
            Some(dest) => (dest.clone(), t + 1 == rl_cfg.max_steps),
        };
        let step_reward = if is_last {
            if env.geodesic_distance(&next_node, &goal)? <= rl_cfg.d_th { 1.0 } else { 0.0 }
        } else {
            env.geodesic_distance(&node, &goal)? - env.geodesic_distance(&next_node, &goal)?
        };
        steps.push(StepRecord {
            node: node.clone(),
            heading,
            action: chosen,
            target: target.clone(),
            log_prob: log_prob.scalar(),
            value: value.scalar(),
            reward: step_reward,
        });
        match target {
            None => break,
            Some(dest) => {
                heading = candidates[chosen].bearing.unwrap();
                nodes.push(dest.clone());
                node = dest;
            }
        }
    }

    let stopped = steps.last().is_some_and(|s| s.target.is_none());
    let success = env.geodesic_distance(&node, &goal)? <= rl_cfg.d_th;
    let traj = Trajectory {
        pair_id: pair.id.clone(),
        env_id: env.env_id().to_string(),
        goal,
        nodes,
        steps,
        stopped,
        success,
    };
    Ok((traj, episode))
}

/// Rebuilds the differentiable log-probs and values of an already-collected
/// trajectory under the currently bound parameters, forcing its recorded
/// actions. Used by finite-difference checks of the policy-gradient loss.
pub fn replay_episode<'t>(
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    enc_cfg: &EncoderConfig,
    env: &EnvironmentGraph,
    pair: &InstructionPathPair,
    traj: &Trajectory,
) -> Result<EpisodeTape<'t>> {
    let hx = encode_instruction(tape, bound, enc_cfg, &pair.instruction.tokens, None)?
        .state_matrix(tape);
    let mut tower = VisualTower::bind(tape, bound, enc_cfg)?;
    let stop_row = bound
        .try_var("vis.stop_feature")
        .ok_or_else(|| Error::InvalidParams("missing parameter vis.stop_feature".into()))?;
    let stop_feature = stop_row.value().row(0).to_owned();
    let value_w = bound
        .try_var("agent.value.w")
        .ok_or_else(|| Error::InvalidParams("missing parameter agent.value.w".into()))?;
    let value_b = bound
        .try_var("agent.value.b")
        .ok_or_else(|| Error::InvalidParams("missing parameter agent.value.b".into()))?;

    let mut episode = EpisodeTape {
        log_probs: Vec::new(),
        values: Vec::new(),
        teacher_log_probs: Vec::new(),
        argmax_actions: Vec::new(),
        teacher_actions: Vec::new(),
    };
    for step in &traj.steps {
        let views = tape.constant(env.view_matrix(&step.node)?);
        let (h_top, _) = tower.step(views)?;
        let candidates = env.navigable_actions(&step.node, step.heading, &stop_feature)?;
        let decision = action_distribution(tape, bound, h_top, hx, views, &candidates)?;
        episode.log_probs.push(log_prob_of(decision.logits, step.action));
        episode.values.push(h_top.matmul(value_w).add(value_b));
        episode.argmax_actions.push(argmax(&decision.probs));
    }
    Ok(episode)
}

/// Discounted suffix sums R_t = sum_{i >= t} gamma^{i-t} r_i.
pub fn returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for i in (0..rewards.len()).rev() {
        acc = rewards[i] + gamma * acc;
        out[i] = acc;
    }
    out
}

/// Returns and advantages A_t = R_t - value_t from a logged trajectory.
/// Both are plain floats: the policy gradient treats them as constants.
pub fn returns_and_advantages(traj: &Trajectory, gamma: f64) -> (Vec<f64>, Vec<f64>) {
    let rets = returns(&traj.rewards(), gamma);
    let advs = rets.iter().zip(&traj.steps).map(|(r, s)| r - s.value).collect();
    (rets, advs)
}

pub struct BcStats {
    pub loss: f64,
    pub n_steps: usize,
    /// Fraction of steps where the model argmax equals the teacher action.
    pub teacher_accuracy: f64,
}

/// Behavioral cloning: mean negative log-likelihood of the teacher action
/// over every step of every teacher-forced episode in the batch.
pub fn bc_batch_loss<'t>(
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    enc_cfg: &EncoderConfig,
    rl_cfg: &RlConfig,
    envs: &BTreeMap<String, EnvironmentGraph>,
    pairs: &[&InstructionPathPair],
    rng: &mut ChaCha12Rng,
) -> Result<(Var<'t>, BcStats)> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("empty behavioral-cloning batch".into()));
    }
    let mut terms = Vec::new();
    let mut matches = 0usize;
    let mut n_steps = 0usize;
    for pair in pairs {
        let env = envs
            .get(pair.env_id())
            .ok_or_else(|| Error::UnknownNode(format!("environment `{}`", pair.env_id())))?;
        let (_, episode) =
            rollout(tape, bound, enc_cfg, rl_cfg, env, pair, RolloutMode::Teacher, rng)?;
        for (i, lp) in episode.log_probs.iter().enumerate() {
            terms.push(lp.neg());
            n_steps += 1;
            if episode.argmax_actions[i] == episode.teacher_actions[i] {
                matches += 1;
            }
        }
    }
    let loss = mean_of(tape, &terms);
    let stats = BcStats {
        loss: loss.scalar(),
        n_steps,
        teacher_accuracy: matches as f64 / n_steps as f64,
    };
    Ok((loss, stats))
}

/// Student forcing: actions were sampled, supervision is the teacher action
/// at each visited state. Mean NLL of teacher actions over all steps.
pub fn sf_batch_loss<'t>(
    tape: &'t Tape,
    episodes: &[EpisodeTape<'t>],
) -> Result<(Var<'t>, BcStats)> {
    let mut terms = Vec::new();
    let mut matches = 0usize;
    let mut n_steps = 0usize;
    for ep in episodes {
        for (i, lp) in ep.teacher_log_probs.iter().enumerate() {
            terms.push(lp.neg());
            n_steps += 1;
            if ep.argmax_actions[i] == ep.teacher_actions[i] {
                matches += 1;
            }
        }
    }
    if terms.is_empty() {
        return Err(Error::EmptyInput("no student-forcing terms in batch".into()));
    }
    let loss = mean_of(tape, &terms);
    let stats = BcStats {
        loss: loss.scalar(),
        n_steps,
        teacher_accuracy: matches as f64 / n_steps as f64,
    };
    Ok((loss, stats))
}

pub struct PgStats {
    pub loss: f64,
    pub policy_term: f64,
    pub value_term: f64,
    pub mean_return: f64,
    pub n_steps: usize,
}

/// Policy-gradient loss: -mean ln pi(a_t|s_t) * A_t over all steps, plus
/// the value head's MSE against the returns, weighted by `value_weight`.
pub fn pg_batch_loss<'t>(
    tape: &'t Tape,
    episodes: &[(&EpisodeTape<'t>, &[f64], &[f64])],
    value_weight: f64,
) -> Result<(Var<'t>, PgStats)> {
    let mut policy_terms = Vec::new();
    let mut value_terms = Vec::new();
    let mut return_sum = 0.0;
    for (episode, rets, advs) in episodes {
        if episode.log_probs.len() != rets.len() || rets.len() != advs.len() {
            return Err(Error::ShapeMismatch(
                "episode log-probs, returns, and advantages must align".into(),
            ));
        }
        for (i, lp) in episode.log_probs.iter().enumerate() {
            policy_terms.push(lp.scale(-advs[i]));
            let diff = episode.values[i].sub(tape.constant_scalar(rets[i]));
            value_terms.push(diff.mul(diff));
            return_sum += rets[i];
        }
    }
    if policy_terms.is_empty() {
        return Err(Error::EmptyInput("no policy-gradient terms in batch".into()));
    }
    let policy = mean_of(tape, &policy_terms);
    let value = mean_of(tape, &value_terms);
    let loss = policy.add(value.scale(value_weight));
    let stats = PgStats {
        loss: loss.scalar(),
        policy_term: policy.scalar(),
        value_term: value.scalar(),
        mean_return: return_sum / policy_terms.len() as f64,
        n_steps: policy_terms.len(),
    };
    Ok((loss, stats))
}

/// K = round(K0 * rho^(index / 100)): behavioral-cloning batches to run
/// before each policy-gradient batch, decaying toward pure policy gradient.
pub fn interleave_schedule(pg_batch_index: usize, k0: usize, rho: f64) -> usize {
    (k0 as f64 * rho.powi((pg_batch_index / 100) as i32)).round() as usize
}

#[derive(Clone, Debug, Serialize)]
pub struct WarmStartManifest {
    pub copied: Vec<String>,
    pub fresh: Vec<String>,
}

/// Copies every checkpoint tensor whose registry name the navigator shares
/// (embeddings, both towers, attention projections); agent-only tensors
/// keep their fresh initialization.
pub fn warm_start_agent(
    params: &mut ParamStore,
    checkpoint: &Checkpoint,
) -> Result<WarmStartManifest> {
    let copied = warm_start(params, &checkpoint.params)?;
    let fresh = params
        .names()
        .into_iter()
        .filter(|n| !copied.contains(n))
        .collect();
    Ok(WarmStartManifest { copied, fresh })
}
