//! Negative-path mining for the discrimination task. Three strategies: path
//! substitution (PS) draws a different reference path from the same
//! environment, random walk (RW) keeps one endpoint anchored and walks the
//! same number of edges to a far-away free endpoint, and partial reorder
//! (PR) shuffles the interior of the positive path. Each negative keeps the
//! positive's instruction.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::envgraph::{EnvironmentGraph, Path};
use crate::error::{Error, Result};
use crate::rngutil::rng_for;
use crate::synthdata::{
    sample_reference_path, InstructionPathPair, Label, Provenance,
};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    pub n_ps: usize,
    pub n_rw: usize,
    pub n_pr: usize,
    pub rw_distance_threshold: f64,
    pub retry_budget: usize,
    pub seed: u64,
    /// Reference-path constraints used by the PS sampler.
    pub min_edges: usize,
    pub max_edges: usize,
    pub min_len: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            n_ps: 4,
            n_rw: 3,
            n_pr: 3,
            rw_distance_threshold: 5.0,
            retry_budget: 500,
            seed: 0,
            min_edges: 4,
            max_edges: 6,
            min_len: 5.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RwAnchor {
    Start,
    End,
}

/// A different reference path from the same environment.
pub fn mine_path_substitution(
    env: &EnvironmentGraph,
    positive: &Path,
    rng: &mut ChaCha12Rng,
    cfg: &MiningConfig,
) -> Result<Path> {
    for _ in 0..cfg.retry_budget {
        let candidate = sample_reference_path(
            env,
            rng,
            cfg.min_edges,
            cfg.max_edges,
            cfg.min_len,
            cfg.retry_budget,
        )?;
        if candidate.node_ids() != positive.node_ids() {
            return Ok(candidate);
        }
    }
    Err(Error::RetryExhausted {
        attempts: cfg.retry_budget,
        context: format!("path substitution in `{}`", env.env_id()),
    })
}

/// Shuffle the positive's interior nodes into a uniformly drawn order that
/// changes the sequence; endpoints stay fixed. The result is tagged as
/// allowed to be disconnected.
pub fn mine_partial_reorder(positive: &Path, rng: &mut ChaCha12Rng) -> Result<Path> {
    let ids = positive.node_ids();
    if ids.len() < 4 {
        return Err(Error::InvalidPath(format!(
            "partial reorder needs at least 4 nodes, got {}",
            ids.len()
        )));
    }
    let interior = &ids[1..ids.len() - 1];
    let distinct: std::collections::BTreeSet<&String> = interior.iter().collect();
    if distinct.len() < 2 {
        return Err(Error::InvalidPath(
            "partial reorder needs at least 2 distinct interior nodes".into(),
        ));
    }
    loop {
        let mut shuffled = interior.to_vec();
        // Fisher-Yates with the shared stream; rejected draws keep sampling
        // uniformly over non-identity arrangements.
        for i in (1..shuffled.len()).rev() {
            let j = rng.random_range(0..=i);
            shuffled.swap(i, j);
        }
        if shuffled != interior {
            let mut out = Vec::with_capacity(ids.len());
            out.push(ids[0].clone());
            out.extend(shuffled);
            out.push(ids[ids.len() - 1].clone());
            return Ok(Path::new_unchecked(positive.env_id(), out, true));
        }
    }
}

/// Simple random walk with the positive's edge count. With `anchor` at the
/// start, the walk begins at the positive's first node and must end at least
/// `threshold` away (geodesically) from the positive's last node; anchored
/// at the end, the mirrored condition applies and the walk is returned
/// end-to-start.
pub fn mine_random_walk(
    env: &EnvironmentGraph,
    positive: &Path,
    rng: &mut ChaCha12Rng,
    anchor: RwAnchor,
    threshold: f64,
    retry_budget: usize,
) -> Result<Path> {
    let n_edges = positive.n_edges();
    let (anchor_id, far_id) = match anchor {
        RwAnchor::Start => (positive.first(), positive.last()),
        RwAnchor::End => (positive.last(), positive.first()),
    };
    let anchor_idx = env.node_index(anchor_id)?;
    let far_idx = env.node_index(far_id)?;

    for attempt in 1..=retry_budget {
        let mut walk = vec![anchor_idx];
        while walk.len() <= n_edges {
            let cur = *walk.last().unwrap();
            let open: Vec<usize> = env
                .neighbors(cur)
                .iter()
                .map(|&(n, _)| n)
                .filter(|n| !walk.contains(n))
                .collect();
            if open.is_empty() {
                break;
            }
            walk.push(open[rng.random_range(0..open.len())]);
        }
        if walk.len() != n_edges + 1 {
            continue;
        }
        let free = *walk.last().unwrap();
        let dist = env.geodesic_distance(
            env.node_by_index(free).node_id.as_str(),
            env.node_by_index(far_idx).node_id.as_str(),
        )?;
        if dist < threshold {
            continue;
        }
        let mut ids: Vec<String> = walk
            .into_iter()
            .map(|i| env.node_by_index(i).node_id.clone())
            .collect();
        if anchor == RwAnchor::End {
            ids.reverse();
        }
        let _ = attempt;
        return Ok(Path::new_unchecked(env.env_id(), ids, false));
    }
    Err(Error::RetryExhausted {
        attempts: retry_budget,
        context: format!(
            "random walk ({} edges, anchor {anchor:?}, threshold {threshold}) in `{}`",
            n_edges,
            env.env_id()
        ),
    })
}

fn env_for<'e>(
    envs: &'e std::collections::BTreeMap<String, EnvironmentGraph>,
    pair: &InstructionPathPair,
) -> Result<&'e EnvironmentGraph> {
    envs.get(pair.env_id())
        .ok_or_else(|| Error::UnknownNode(format!("environment `{}`", pair.env_id())))
}

/// Mine the full negative set for each positive: `n_ps` substitutions,
/// `n_rw` random walks with anchors alternating start/end, and `n_pr`
/// reorders. Positives too short to reorder receive extra substitutions so
/// every positive gets the same negative count. Randomness derives from
/// (cfg.seed, positive id), so output is independent of iteration order.
pub fn build_discrimination_dataset(
    positives: &[InstructionPathPair],
    envs: &std::collections::BTreeMap<String, EnvironmentGraph>,
    cfg: &MiningConfig,
) -> Result<Vec<InstructionPathPair>> {
    let mut out = Vec::with_capacity(positives.len() * (cfg.n_ps + cfg.n_rw + cfg.n_pr));
    for positive in positives {
        let env = env_for(envs, positive)?;
        let label = |e: Error| {
            Error::InvalidParams(format!("mining negatives for `{}`: {e}", positive.id))
        };
        let interior_distinct: std::collections::BTreeSet<&String> = positive
            .path
            .node_ids()
            .iter()
            .skip(1)
            .take(positive.path.node_ids().len().saturating_sub(2))
            .collect();
        let pr_eligible = positive.path.node_ids().len() >= 4 && interior_distinct.len() >= 2;
        let n_pr = if pr_eligible { cfg.n_pr } else { 0 };
        let n_ps = cfg.n_ps + cfg.n_pr - n_pr;

        let mut rng = rng_for(cfg.seed, &format!("negmine:{}", positive.id));
        let mut push = |path: Path, provenance: Provenance, strategy: &str, k: usize| {
            out.push(InstructionPathPair {
                id: format!("{}:neg-{}{k}", positive.id, strategy.to_lowercase()),
                instruction: positive.instruction.clone(),
                path,
                label: Label::Negative,
                provenance,
                strategy: Some(strategy.to_string()),
                corruption_flag: None,
                split: positive.split,
            });
        };

        for k in 0..n_ps {
            let path = mine_path_substitution(env, &positive.path, &mut rng, cfg)
                .map_err(label)?;
            push(path, Provenance::Ps, "PS", k);
        }
        for k in 0..cfg.n_rw {
            let anchor = if k % 2 == 0 { RwAnchor::Start } else { RwAnchor::End };
            let path = mine_random_walk(
                env,
                &positive.path,
                &mut rng,
                anchor,
                cfg.rw_distance_threshold,
                cfg.retry_budget,
            )
            .map_err(label)?;
            let strategy = match anchor {
                RwAnchor::Start => "RW_start",
                RwAnchor::End => "RW_end",
            };
            push(path, Provenance::Rw, strategy, k);
        }
        for k in 0..n_pr {
            let path = mine_partial_reorder(&positive.path, &mut rng).map_err(label)?;
            push(path, Provenance::Pr, "PR", k);
        }
    }
    Ok(out)
}
