//! Navigation metrics (path length, navigation error, success rate, SPL),
//! aggregate tables, greedy agent evaluation with an episode log,
//! discriminator AUC reports, and alignment-score ranking experiments.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::agent::{rollout, RlConfig, RolloutMode};
use crate::auxtasks::{alignment_matrix, auc, rank_pairs, score_pair, top_slice, RankEntry};
use crate::encoders::{encode_instruction, encode_path, EncoderConfig};
use crate::envgraph::{EnvironmentGraph, Path};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tape};
use crate::rngutil::rng_for;
use crate::synthdata::{InstructionPathPair, Label, Provenance, Split};

/// Metrics of a single navigation episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub pair_id: String,
    pub predicted: Path,
    pub reference: Path,
    /// Total length of the predicted path.
    pub path_length: f64,
    /// Geodesic distance from the predicted final node to the goal.
    pub nav_error: f64,
    pub success: bool,
    pub spl_term: f64,
}

/// Per-episode SPL contribution: success weighted by the ratio of the
/// shortest goal distance `l` to the longer of `l` and the walked length
/// `p`. Written piecewise so the degenerate `l = p = 0` episode scores 1.
pub fn spl_term(success: bool, p: f64, l: f64) -> f64 {
    if !success {
        0.0
    } else if p <= l {
        1.0
    } else {
        l / p
    }
}

/// Score one predicted path against its reference.
pub fn episode_metrics(
    env: &EnvironmentGraph,
    pair_id: &str,
    predicted: &Path,
    reference: &Path,
    d_th: f64,
) -> Result<EpisodeResult> {
    if predicted.env_id() != reference.env_id() {
        return Err(Error::InvalidPath(format!(
            "predicted path in `{}` but reference in `{}`",
            predicted.env_id(),
            reference.env_id()
        )));
    }
    let p = env.path_length(predicted)?;
    let nav_error = env.geodesic_distance(predicted.last(), reference.last())?;
    let l = env.geodesic_distance(reference.first(), reference.last())?;
    let success = nav_error <= d_th;
    Ok(EpisodeResult {
        pair_id: pair_id.to_string(),
        predicted: predicted.clone(),
        reference: reference.clone(),
        path_length: p,
        nav_error,
        success,
        spl_term: spl_term(success, p, l),
    })
}

/// One line of the episode log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLogRow {
    pub split: Split,
    #[serde(flatten)]
    pub episode: EpisodeResult,
}

/// Mean metrics of one split. Success rate and SPL are percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub count: usize,
    pub path_length: f64,
    pub nav_error: f64,
    pub success_rate: f64,
    pub spl: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub splits: BTreeMap<Split, SplitMetrics>,
}

impl MetricsTable {
    pub fn from_rows(rows: &[EpisodeLogRow]) -> Self {
        let mut by_split: BTreeMap<Split, Vec<&EpisodeResult>> = BTreeMap::new();
        for row in rows {
            by_split.entry(row.split).or_default().push(&row.episode);
        }
        let splits = by_split
            .into_iter()
            .map(|(split, eps)| {
                let n = eps.len() as f64;
                let mean = |f: &dyn Fn(&EpisodeResult) -> f64| {
                    eps.iter().map(|e| f(e)).sum::<f64>() / n
                };
                let metrics = SplitMetrics {
                    count: eps.len(),
                    path_length: mean(&|e| e.path_length),
                    nav_error: mean(&|e| e.nav_error),
                    success_rate: 100.0 * mean(&|e| f64::from(e.success)),
                    spl: 100.0 * mean(&|e| e.spl_term),
                };
                (split, metrics)
            })
            .collect();
        Self { splits }
    }

    pub fn to_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "split,count,path_length,nav_error,success_rate,spl")?;
        for (split, m) in &self.splits {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                split_name(*split),
                m.count,
                m.path_length,
                m.nav_error,
                m.success_rate,
                m.spl
            )?;
        }
        Ok(())
    }
}

pub fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::ValSeen => "val_seen",
        Split::ValUnseen => "val_unseen",
    }
}

#[derive(Clone, Debug)]
pub struct AgentEvaluation {
    pub table: MetricsTable,
    pub episodes: Vec<EpisodeLogRow>,
}

/// Run one rollout per positive pair and aggregate. Greedy rollouts consume
/// no randomness, so evaluation is deterministic for a fixed checkpoint.
pub fn evaluate_agent(
    params: &ParamStore,
    enc_cfg: &EncoderConfig,
    rl_cfg: &RlConfig,
    envs: &BTreeMap<String, EnvironmentGraph>,
    pairs: &[InstructionPathPair],
    mode: RolloutMode,
) -> Result<AgentEvaluation> {
    let positives: Vec<&InstructionPathPair> =
        pairs.iter().filter(|p| p.label == Label::Positive).collect();
    if positives.is_empty() {
        return Err(Error::EmptyInput("no positive pairs to evaluate".into()));
    }
    let mut episodes = Vec::with_capacity(positives.len());
    for pair in positives {
        let env = envs
            .get(pair.env_id())
            .ok_or_else(|| Error::UnknownNode(format!("environment `{}`", pair.env_id())))?;
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let mut rng = rng_for(0, &format!("eval:{}", pair.id));
        let (traj, _) = rollout(&tape, &bound, enc_cfg, rl_cfg, env, pair, mode, &mut rng)?;
        let predicted = traj.predicted_path(env)?;
        let episode = episode_metrics(env, &pair.id, &predicted, &pair.path, rl_cfg.d_th)?;
        episodes.push(EpisodeLogRow { split: pair.split, episode });
    }
    Ok(AgentEvaluation { table: MetricsTable::from_rows(&episodes), episodes })
}

pub fn write_episode_log<W: Write>(mut w: W, rows: &[EpisodeLogRow]) -> Result<()> {
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_episode_log<R: BufRead>(r: R) -> Result<Vec<EpisodeLogRow>> {
    let mut rows = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line)?);
    }
    Ok(rows)
}

/// One scored pair of a discriminator evaluation, in input order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoredPair {
    pub pair_id: String,
    pub split: Split,
    pub label: Label,
    pub provenance: Provenance,
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorEvaluation {
    /// AUC for every split holding both classes after the filter.
    pub auc_by_split: BTreeMap<Split, f64>,
    pub scores: Vec<ScoredPair>,
}

/// Score all pairs and report AUC per split. Negatives whose provenance is
/// not in `restrict` are dropped before scoring; positives always stay.
pub fn evaluate_discriminator(
    params: &ParamStore,
    enc_cfg: &EncoderConfig,
    envs: &BTreeMap<String, EnvironmentGraph>,
    pairs: &[InstructionPathPair],
    restrict: &[Provenance],
) -> Result<DiscriminatorEvaluation> {
    let kept: Vec<&InstructionPathPair> = pairs
        .iter()
        .filter(|p| p.label == Label::Positive || restrict.contains(&p.provenance))
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyInput("no pairs left after the strategy filter".into()));
    }
    let mut scores = Vec::with_capacity(kept.len());
    for pair in kept {
        scores.push(ScoredPair {
            pair_id: pair.id.clone(),
            split: pair.split,
            label: pair.label,
            provenance: pair.provenance,
            score: score_pair(params, enc_cfg, envs, pair)?,
        });
    }
    let mut auc_by_split = BTreeMap::new();
    let splits: std::collections::BTreeSet<Split> = scores.iter().map(|s| s.split).collect();
    for split in splits {
        let subset: Vec<&ScoredPair> = scores.iter().filter(|s| s.split == split).collect();
        let values: Vec<f64> = subset.iter().map(|s| s.score).collect();
        let labels: Vec<bool> = subset.iter().map(|s| s.label == Label::Positive).collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            auc_by_split.insert(split, auc(&values, &labels)?);
        }
    }
    Ok(DiscriminatorEvaluation { auc_by_split, scores })
}

/// Top and bottom slices of a ranked corpus for one fraction, plus how
/// clean (uncorrupted) each slice is.
#[derive(Clone, Debug, Serialize)]
pub struct RankingSlice {
    pub fraction: f64,
    pub top: Vec<InstructionPathPair>,
    pub bottom: Vec<InstructionPathPair>,
    pub top_clean_fraction: f64,
    pub bottom_clean_fraction: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RankingReport {
    pub ranked: Vec<RankEntry>,
    pub slices: Vec<RankingSlice>,
}

/// Rank a speaker corpus by alignment score and slice it into candidate
/// training sets. Every pair must carry a corruption flag.
pub fn ranking_experiment(
    params: &ParamStore,
    enc_cfg: &EncoderConfig,
    envs: &BTreeMap<String, EnvironmentGraph>,
    pairs: &[InstructionPathPair],
    fractions: &[f64],
) -> Result<RankingReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("ranking corpus is empty".into()));
    }
    if let Some(bad) = pairs.iter().find(|p| p.corruption_flag.is_none()) {
        return Err(Error::InvalidParams(format!(
            "pair `{}` has no corruption flag; ranking needs a speaker corpus",
            bad.id
        )));
    }
    let scores: Vec<f64> = pairs
        .iter()
        .map(|p| score_pair(params, enc_cfg, envs, p))
        .collect::<Result<_>>()?;
    let ranked = rank_pairs(pairs, &scores)?;
    let by_id: BTreeMap<&str, &InstructionPathPair> =
        pairs.iter().map(|p| (p.id.as_str(), p)).collect();

    let mut slices = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        if !(0.0..=0.5).contains(&fraction) || fraction <= 0.0 {
            return Err(Error::InvalidParams(format!(
                "slice fraction {fraction} not in (0, 0.5]"
            )));
        }
        let take = top_slice(&ranked, fraction).len();
        let collect = |entries: &[RankEntry]| -> Vec<InstructionPathPair> {
            entries.iter().map(|e| (*by_id[e.pair_id.as_str()]).clone()).collect()
        };
        let top = collect(&ranked[..take]);
        let bottom = collect(&ranked[ranked.len() - take..]);
        let clean = |slice: &[InstructionPathPair]| {
            slice.iter().filter(|p| p.corruption_flag == Some(false)).count() as f64
                / slice.len() as f64
        };
        slices.push(RankingSlice {
            fraction,
            top_clean_fraction: clean(&top),
            bottom_clean_fraction: clean(&bottom),
            top,
            bottom,
        });
    }
    Ok(RankingReport { ranked, slices })
}

pub fn ranking_report_csv<W: Write>(mut w: W, report: &RankingReport) -> Result<()> {
    writeln!(w, "fraction,slice_size,top_clean_fraction,bottom_clean_fraction")?;
    for s in &report.slices {
        writeln!(
            w,
            "{},{},{},{}",
            s.fraction,
            s.top.len(),
            s.top_clean_fraction,
            s.bottom_clean_fraction
        )?;
    }
    Ok(())
}

/// Dump one pair's instruction-to-path alignment matrix as CSV with token
/// strings labelling rows and node ids labelling columns.
pub fn alignment_matrix_csv<W: Write>(
    mut w: W,
    params: &ParamStore,
    enc_cfg: &EncoderConfig,
    env: &EnvironmentGraph,
    pair: &InstructionPathPair,
) -> Result<()> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let hx = encode_instruction(&tape, &bound, enc_cfg, &pair.instruction.tokens, None)?;
    let hv = encode_path(&tape, &bound, enc_cfg, env, &pair.path)?;
    let a = alignment_matrix(
        hx.state_matrix(&tape),
        hv.state_matrix(&tape),
        bound.try_var("cma.proj"),
    )?;
    let values = a.value();
    write!(w, "token")?;
    for node_id in pair.path.node_ids() {
        write!(w, ",{node_id}")?;
    }
    writeln!(w)?;
    for (i, token) in pair.instruction.raw_tokens.iter().enumerate() {
        write!(w, "{token}")?;
        for j in 0..values.ncols() {
            write!(w, ",{}", values[[i, j]])?;
        }
        writeln!(w)?;
    }
    Ok(())
}
