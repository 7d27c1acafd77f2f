//! Command-line pipeline: generate data, pretrain the discriminator, score
//! pairs, train the agent, evaluate, and check gradients. Every subcommand
//! writes a manifest beside its outputs, and artifact chaining is guarded by
//! config and vocabulary hashes.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::agent::RolloutMode;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::encoders::EncoderConfig;
use crate::envgraph::EnvironmentGraph;
use crate::error::{Error, Result};
use crate::evalmetrics::{
    evaluate_agent, evaluate_discriminator, ranking_experiment, split_name, write_episode_log,
};
use crate::gradcheck;
use crate::negmine::build_discrimination_dataset;
use crate::optim::{history_csv, train_agent, train_discriminator, AgentMode};
use crate::synthdata::{
    build_vocab, finalize_pairs, generate_environment, make_corpus, read_pairs_jsonl,
    write_pairs_jsonl, GenParams, InstructionPathPair, Label, Provenance, Split, Vocabulary,
};

#[derive(Parser)]
#[command(name = "vln", version, about = "Vision-and-language navigation at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate environments, instruction corpus, and vocabulary.
    GenData(GenDataArgs),
    /// Train the path-instruction discriminator.
    Pretrain(PretrainArgs),
    /// Score a pairs file with a discriminator checkpoint.
    Score(ScoreArgs),
    /// Train the navigation agent, optionally warm-started.
    TrainAgent(TrainAgentArgs),
    /// Evaluate a checkpoint against a data directory.
    Eval(EvalArgs),
    /// Compare analytic gradients of every loss against central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub struct ConfigArgs {
    /// Run configuration JSON.
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Master seed, overriding the config's.
    #[arg(long, value_name = "INT")]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Output data directory.
    pub out_dir: PathBuf,
    /// Overwrite the output directory if it exists.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Data directory written by gen-data.
    pub data_dir: PathBuf,
    /// Output directory for checkpoints and history.
    pub out_dir: PathBuf,
    /// Overwrite the output directory if it exists.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Discriminator checkpoint.
    pub checkpoint: PathBuf,
    /// Pairs JSONL; its directory must hold the matching envs/ and vocab.json.
    pub pairs: PathBuf,
    /// Output CSV of per-pair scores.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainAgentArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Data directory written by gen-data.
    pub data_dir: PathBuf,
    /// Output directory for checkpoints and history.
    pub out_dir: PathBuf,
    /// Pretrained checkpoint to warm-start the towers from.
    #[arg(long, value_name = "PATH")]
    pub warm: Option<PathBuf>,
    /// Training mode, overriding the config's.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Overwrite the output directory if it exists.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    pub checkpoint: PathBuf,
    /// Data directory written by gen-data.
    pub data_dir: PathBuf,
    /// Which table to produce.
    #[arg(long, value_enum)]
    pub table: TableArg,
    /// Write the table here (and sibling artifacts) instead of stdout only.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Run configuration JSON; validated before the checks run.
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Sf,
    Rcm,
}

impl From<ModeArg> for AgentMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Sf => AgentMode::Sf,
            ModeArg::Rcm => AgentMode::Rcm,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TableArg {
    Agent,
    Disc,
    Ranking,
}

/// Runs a parsed command line and returns the process exit code. Failures
/// print one machine-readable JSON object to stderr.
pub fn run(cli: Cli) -> i32 {
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            let payload =
                serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{payload}");
            1
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(&args),
        Command::Pretrain(args) => cmd_pretrain(&args),
        Command::Score(args) => cmd_score(&args),
        Command::TrainAgent(args) => cmd_train_agent(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing

#[derive(Serialize)]
struct Manifest {
    config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    git_rev: Option<String>,
    seed: u64,
    wall_time_secs: f64,
}

fn git_rev() -> Option<String> {
    let out = std::process::Command::new("git").args(["rev-parse", "HEAD"]).output().ok()?;
    if !out.status.success() {
        return None;
    }
    let rev = String::from_utf8_lossy(&out.stdout).trim().to_string();
    (!rev.is_empty()).then_some(rev)
}

fn write_manifest(path: &Path, cfg: &RunConfig, start: Instant) -> Result<()> {
    let manifest = Manifest {
        config_hash: cfg.config_hash(),
        git_rev: git_rev(),
        seed: cfg.seed,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !force {
            return Err(Error::OutputExists(dir.display().to_string()));
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Everything gen-data wrote, reloaded.
pub struct DataDir {
    pub config: RunConfig,
    pub envs: BTreeMap<String, EnvironmentGraph>,
    pub pairs: Vec<InstructionPathPair>,
    pub vocab: Vocabulary,
}

pub fn load_data_dir(dir: &Path) -> Result<DataDir> {
    let config = RunConfig::load(&dir.join("config.json"))?;
    let envs = load_envs_dir(&dir.join("envs"))?;
    let pairs = read_pairs_jsonl(&dir.join("corpus.jsonl"))?;
    let vocab = Vocabulary::load(&dir.join("vocab.json"))?;
    Ok(DataDir { config, envs, pairs, vocab })
}

fn load_envs_dir(dir: &Path) -> Result<BTreeMap<String, EnvironmentGraph>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let mut envs = BTreeMap::new();
    for file in files {
        let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(&file)?)?;
        let env = EnvironmentGraph::from_json(value)?;
        envs.insert(env.env_id().to_string(), env);
    }
    if envs.is_empty() {
        return Err(Error::EmptyInput(format!("no environments under {}", dir.display())));
    }
    Ok(envs)
}

/// The model section with `vocab_size` taken from the actual vocabulary.
fn resolved_encoder(cfg: &RunConfig, vocab: &Vocabulary) -> EncoderConfig {
    EncoderConfig { vocab_size: vocab.len(), ..cfg.model.clone() }
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

fn ensure_same_config(cfg: &RunConfig, data_cfg: &RunConfig) -> Result<()> {
    let ours = cfg.config_hash();
    let theirs = data_cfg.config_hash();
    if ours != theirs {
        return Err(Error::HashMismatch(format!(
            "config hash {} does not match the data directory's {}; \
             the data was generated under a different config or seed",
            short(&ours),
            short(&theirs)
        )));
    }
    Ok(())
}

fn ensure_checkpoint_matches(ck: &Checkpoint, cfg: &RunConfig, vocab: &Vocabulary) -> Result<()> {
    let cfg_hash = cfg.config_hash();
    if ck.config_hash != cfg_hash {
        return Err(Error::HashMismatch(format!(
            "checkpoint config hash {} does not match {}; \
             it was trained under a different config or seed",
            short(&ck.config_hash),
            short(&cfg_hash)
        )));
    }
    let vocab_hash = vocab.content_hash();
    if ck.vocab_hash != vocab_hash {
        return Err(Error::HashMismatch(format!(
            "checkpoint vocabulary hash {} does not match {}; \
             it was trained over a different vocabulary",
            short(&ck.vocab_hash),
            short(&vocab_hash)
        )));
    }
    Ok(())
}

fn save_checkpoints(
    out_dir: &Path,
    cfg: &RunConfig,
    vocab: &Vocabulary,
    best: crate::nn::ParamStore,
    fin: crate::nn::ParamStore,
) -> Result<()> {
    let config_hash = cfg.config_hash();
    let vocab_hash = vocab.content_hash();
    Checkpoint { config_hash: config_hash.clone(), vocab_hash: vocab_hash.clone(), params: best }
        .save(&out_dir.join("best.ckpt"))?;
    Checkpoint { config_hash, vocab_hash, params: fin }.save(&out_dir.join("final.ckpt"))?;
    Ok(())
}

fn write_history(path: &Path, rows: &[crate::optim::MetricsRow]) -> Result<()> {
    let file = fs::File::create(path)?;
    history_csv(BufWriter::new(file), rows)
}

const ALL_PROVENANCES: [Provenance; 5] = [
    Provenance::HumanSynth,
    Provenance::SpeakerSynth,
    Provenance::Ps,
    Provenance::Rw,
    Provenance::Pr,
];

fn provenance_name(p: Provenance) -> &'static str {
    match p {
        Provenance::HumanSynth => "human_synth",
        Provenance::SpeakerSynth => "speaker_synth",
        Provenance::Ps => "PS",
        Provenance::Rw => "RW",
        Provenance::Pr => "PR",
    }
}

// ---------------------------------------------------------------------------
// gen-data

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let start = Instant::now();
    let cfg = load_config(&args.cfg)?;
    prepare_out_dir(&args.out_dir, args.force)?;
    fs::create_dir_all(args.out_dir.join("envs"))?;

    let seeded = cfg.seeded();
    let mut envs_vec = Vec::with_capacity(cfg.data.n_envs);
    for env_index in 0..cfg.data.n_envs {
        let params = GenParams { env_index, ..seeded.data.gen.clone() };
        envs_vec.push(generate_environment(&params)?);
    }

    let raw = make_corpus(&envs_vec, cfg.corpus_seed(), &seeded.data.corpus)?;
    let token_lists: Vec<Vec<String>> = raw.iter().map(|r| r.raw_tokens.clone()).collect();
    let vocab = build_vocab(&token_lists, 5);
    let positives = finalize_pairs(raw, &vocab)?;

    let env_map: BTreeMap<String, EnvironmentGraph> =
        envs_vec.iter().map(|e| (e.env_id().to_string(), e.clone())).collect();
    let negatives = build_discrimination_dataset(&positives, &env_map, &seeded.mining)?;
    let n_pos = positives.len();
    let n_neg = negatives.len();
    let mut pairs = positives;
    pairs.extend(negatives);

    for env in &envs_vec {
        let path = args.out_dir.join("envs").join(format!("{}.json", env.env_id()));
        fs::write(path, serde_json::to_string(&env.to_json())?)?;
    }
    write_pairs_jsonl(&args.out_dir.join("corpus.jsonl"), &pairs)?;
    vocab.save(&args.out_dir.join("vocab.json"))?;
    fs::write(args.out_dir.join("config.json"), cfg.canonical_json())?;
    write_manifest(&args.out_dir.join("manifest.json"), &cfg, start)?;

    print_corpus_stats(&envs_vec, &pairs, n_pos, n_neg, vocab.len());
    Ok(())
}

fn print_corpus_stats(
    envs: &[EnvironmentGraph],
    pairs: &[InstructionPathPair],
    n_pos: usize,
    n_neg: usize,
    vocab_len: usize,
) {
    let split_envs = |split: Split| -> Vec<&str> {
        let mut ids: Vec<&str> =
            pairs.iter().filter(|p| p.split == split).map(|p| p.env_id()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    };
    let train_envs = split_envs(Split::Train);
    let unseen_envs = split_envs(Split::ValUnseen);
    println!("environments = {} (train {}, val_unseen {})", envs.len(), train_envs.len(), unseen_envs.len());
    println!("train env ids: {}", train_envs.join(", "));
    println!("val_unseen env ids: {}", unseen_envs.join(", "));
    println!("vocabulary size = {vocab_len}");

    for split in [Split::Train, Split::ValSeen, Split::ValUnseen] {
        let in_split: Vec<&InstructionPathPair> =
            pairs.iter().filter(|p| p.split == split).collect();
        let pos = in_split.iter().filter(|p| p.label == Label::Positive).count();
        println!(
            "pairs[{}] = {} (positives {}, negatives {})",
            split_name(split),
            in_split.len(),
            pos,
            in_split.len() - pos
        );
    }
    let by_prov: Vec<String> = ALL_PROVENANCES
        .iter()
        .map(|&prov| {
            let n = pairs.iter().filter(|p| p.provenance == prov).count();
            format!("{} {}", provenance_name(prov), n)
        })
        .collect();
    println!("pairs by provenance: {}", by_prov.join(", "));
    println!("negatives per positive = {}", n_neg as f64 / n_pos as f64);
}

// ---------------------------------------------------------------------------
// pretrain

fn cmd_pretrain(args: &PretrainArgs) -> Result<()> {
    let start = Instant::now();
    let cfg = load_config(&args.cfg)?;
    let data = load_data_dir(&args.data_dir)?;
    ensure_same_config(&cfg, &data.config)?;
    prepare_out_dir(&args.out_dir, args.force)?;

    let seeded = cfg.seeded();
    let enc_cfg = resolved_encoder(&cfg, &data.vocab);
    let outcome =
        train_discriminator(&enc_cfg, &cfg.tasks, &seeded.optim.pretrain, &data.envs, &data.pairs)?;

    save_checkpoints(&args.out_dir, &cfg, &data.vocab, outcome.best_params, outcome.final_params)?;
    write_history(&args.out_dir.join("history.csv"), &outcome.history)?;
    write_manifest(&args.out_dir.join("manifest.json"), &cfg, start)?;

    match (outcome.best_step, outcome.best_auc) {
        (Some(step), Some(auc)) => println!("pretrain done: best auc {auc} at step {step}"),
        _ => println!("pretrain done: no validation auc recorded"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// score

fn cmd_score(args: &ScoreArgs) -> Result<()> {
    let start = Instant::now();
    let cfg = load_config(&args.cfg)?;
    let base = args.pairs.parent().unwrap_or(Path::new("."));
    let envs = load_envs_dir(&base.join("envs"))?;
    let vocab = Vocabulary::load(&base.join("vocab.json"))?;
    let pairs = read_pairs_jsonl(&args.pairs)?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    ensure_checkpoint_matches(&ck, &cfg, &vocab)?;

    let enc_cfg = resolved_encoder(&cfg, &vocab);
    let ev = evaluate_discriminator(&ck.params, &enc_cfg, &envs, &pairs, &ALL_PROVENANCES)?;

    let mut out = String::from("pair_id,split,provenance,label,score\n");
    for s in &ev.scores {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.pair_id,
            split_name(s.split),
            provenance_name(s.provenance),
            if s.label == Label::Positive { "positive" } else { "negative" },
            s.score
        ));
    }
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(&args.out, out)?;
    write_manifest(&manifest_beside(&args.out), &cfg, start)?;
    println!("scored {} pairs -> {}", ev.scores.len(), args.out.display());
    Ok(())
}

/// `x.csv` gets its manifest at `x.manifest.json`.
fn manifest_beside(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

// ---------------------------------------------------------------------------
// train-agent

fn cmd_train_agent(args: &TrainAgentArgs) -> Result<()> {
    let start = Instant::now();
    let cfg = load_config(&args.cfg)?;
    let data = load_data_dir(&args.data_dir)?;
    ensure_same_config(&cfg, &data.config)?;

    let warm = match &args.warm {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            ensure_checkpoint_matches(&ck, &cfg, &data.vocab)?;
            Some(ck)
        }
        None => None,
    };
    prepare_out_dir(&args.out_dir, args.force)?;

    let seeded = cfg.seeded();
    let mut train_cfg = seeded.optim.agent.clone();
    if let Some(mode) = args.mode {
        train_cfg.mode = mode.into();
    }
    let enc_cfg = resolved_encoder(&cfg, &data.vocab);
    let outcome = train_agent(
        &enc_cfg,
        &seeded.agent,
        &train_cfg,
        &data.envs,
        &data.pairs,
        warm.as_ref(),
    )?;

    save_checkpoints(&args.out_dir, &cfg, &data.vocab, outcome.best_params, outcome.final_params)?;
    write_history(&args.out_dir.join("history.csv"), &outcome.history)?;
    write_manifest(&args.out_dir.join("manifest.json"), &cfg, start)?;

    if let Some(manifest) = &outcome.warm_manifest {
        println!(
            "warm start: {} tensors copied, {} fresh",
            manifest.copied.len(),
            manifest.fresh.len()
        );
    }
    println!(
        "train-agent done: {} bc steps, {} pg steps, {} sf steps",
        outcome.bc_steps, outcome.pg_steps, outcome.sf_steps
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let start = Instant::now();
    let data = load_data_dir(&args.data_dir)?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    ensure_checkpoint_matches(&ck, &data.config, &data.vocab)?;
    let enc_cfg = resolved_encoder(&data.config, &data.vocab);

    match args.table {
        TableArg::Agent => {
            let ev = evaluate_agent(
                &ck.params,
                &enc_cfg,
                &data.config.agent,
                &data.envs,
                &data.pairs,
                RolloutMode::Greedy,
            )?;
            let mut csv = Vec::new();
            ev.table.to_csv(&mut csv)?;
            print!("{}", String::from_utf8_lossy(&csv));
            if let Some(out) = &args.out {
                fs::write(out, &csv)?;
                let log = fs::File::create(out.with_extension("episodes.jsonl"))?;
                write_episode_log(BufWriter::new(log), &ev.episodes)?;
                write_manifest(&manifest_beside(out), &data.config, start)?;
            }
        }
        TableArg::Disc => {
            let ev = evaluate_discriminator(
                &ck.params,
                &enc_cfg,
                &data.envs,
                &data.pairs,
                &[Provenance::Pr, Provenance::Rw],
            )?;
            let mut csv = String::from("split,auc\n");
            for (split, auc) in &ev.auc_by_split {
                csv.push_str(&format!("{},{}\n", split_name(*split), auc));
            }
            print!("{csv}");
            if let Some(out) = &args.out {
                fs::write(out, &csv)?;
                write_manifest(&manifest_beside(out), &data.config, start)?;
            }
        }
        TableArg::Ranking => {
            let speaker: Vec<InstructionPathPair> =
                data.pairs.iter().filter(|p| p.corruption_flag.is_some()).cloned().collect();
            let report = ranking_experiment(
                &ck.params,
                &enc_cfg,
                &data.envs,
                &speaker,
                &data.config.eval.fractions,
            )?;
            let mut csv = Vec::new();
            crate::evalmetrics::ranking_report_csv(&mut csv, &report)?;
            print!("{}", String::from_utf8_lossy(&csv));
            if let Some(out) = &args.out {
                fs::write(out, &csv)?;
                for slice in &report.slices {
                    let pct = (slice.fraction * 100.0).round() as u32;
                    let top = out.with_extension(format!("top{pct}pct.jsonl"));
                    let bottom = out.with_extension(format!("bottom{pct}pct.jsonl"));
                    write_pairs_jsonl(&top, &slice.top)?;
                    write_pairs_jsonl(&bottom, &slice.bottom)?;
                }
                write_manifest(&manifest_beside(out), &data.config, start)?;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    RunConfig::load(&args.config)?;
    let reports = gradcheck::run_all()?;
    let mut failures = Vec::new();
    for r in &reports {
        println!(
            "{}: max relative error {:.3e} (tolerance {:.0e}) {}",
            r.name,
            r.max_rel_err,
            r.tol,
            if r.pass() { "ok" } else { "FAIL" }
        );
        if !r.pass() {
            failures.push(r.name);
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::GradcheckFailed(failures.join(", ")))
    }
}
