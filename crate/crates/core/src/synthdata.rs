//! Synthetic data: environment generation, reference-path sampling, template
//! instructions with controllable clause corruption, vocabulary building,
//! corpus assembly with train / val_seen / val_unseen splits, JSONL dataset
//! files, and ingestion of R2R-format JSON.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path as FsPath;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::envgraph::{
    self, EnvironmentGraph, NodeLabels, NodeRecord, ObjectPlacement, Panorama, Path,
};
use crate::error::{Error, Result};
use crate::rngutil::{rng_for, rng_for_indexed};

pub const ROOM_WORDS: [&str; 12] = [
    "kitchen", "hallway", "bedroom", "bathroom", "office", "library", "lounge", "pantry",
    "studio", "garage", "attic", "cellar",
];

pub const OBJECT_WORDS: [&str; 16] = [
    "sofa", "lamp", "table", "mirror", "plant", "shelf", "piano", "rug", "clock", "vase",
    "bench", "cabinet", "easel", "fireplace", "fountain", "statue",
];

/// Per-view Gaussian feature noise, fixed by the generation recipe.
pub const FEATURE_NOISE_STD: f64 = 0.1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenParams {
    pub n_nodes: usize,
    pub area_side: f64,
    pub connect_radius: f64,
    pub n_rooms: usize,
    pub n_objects: usize,
    pub d_app: usize,
    pub n_elev: usize,
    pub n_head: usize,
    pub seed: u64,
    pub env_index: usize,
    /// Per-clause corruption probability for speaker-partition instructions.
    pub noise_rate: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            n_nodes: 22,
            area_side: 20.0,
            connect_radius: 6.0,
            n_rooms: 10,
            n_objects: 14,
            d_app: 64,
            n_elev: 3,
            n_head: 12,
            seed: 0,
            env_index: 0,
            noise_rate: 0.3,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_nodes < 2 {
            return Err(Error::InvalidParams("n_nodes must be at least 2".into()));
        }
        if !(self.area_side > 0.0) || !(self.connect_radius > 0.0) {
            return Err(Error::InvalidParams("area_side and connect_radius must be positive".into()));
        }
        if self.n_rooms == 0 || self.n_rooms > ROOM_WORDS.len() {
            return Err(Error::InvalidParams(format!(
                "n_rooms must be in 1..={}",
                ROOM_WORDS.len()
            )));
        }
        if self.n_objects == 0 || self.n_objects > OBJECT_WORDS.len() {
            return Err(Error::InvalidParams(format!(
                "n_objects must be in 1..={}",
                OBJECT_WORDS.len()
            )));
        }
        if self.d_app == 0 || self.n_elev == 0 || self.n_head == 0 {
            return Err(Error::InvalidParams("feature dimensions must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::InvalidParams("noise_rate must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Room and object embeddings, a function of the master seed alone so every
/// environment under one seed shares the same dictionary.
pub fn embedding_tables(
    params: &GenParams,
) -> (BTreeMap<String, Array1<f64>>, BTreeMap<String, Array1<f64>>) {
    let mut rng = rng_for(params.seed, "gen-embeddings");
    let normal = Normal::new(0.0, 1.0).unwrap();
    let draw = |rng: &mut ChaCha12Rng| {
        Array1::from_iter((0..params.d_app).map(|_| normal.sample(rng)))
    };
    let mut rooms = BTreeMap::new();
    for word in ROOM_WORDS.iter().take(params.n_rooms) {
        rooms.insert(word.to_string(), draw(&mut rng));
    }
    let mut objects = BTreeMap::new();
    for word in OBJECT_WORDS.iter().take(params.n_objects) {
        objects.insert(word.to_string(), draw(&mut rng));
    }
    (rooms, objects)
}

/// Random geometric graph with labeled nodes and panoramic features.
/// Components are joined by repeatedly adding the globally closest
/// cross-component node pair until connected.
pub fn generate_environment(params: &GenParams) -> Result<EnvironmentGraph> {
    params.validate()?;
    let (room_emb, object_emb) = embedding_tables(params);
    let mut layout_rng = rng_for_indexed(params.seed, "gen-layout", params.env_index as u64);
    let normal = Normal::new(0.0, FEATURE_NOISE_STD).unwrap();

    let positions: Vec<[f64; 2]> = (0..params.n_nodes)
        .map(|_| {
            [
                layout_rng.random_range(0.0..params.area_side),
                layout_rng.random_range(0.0..params.area_side),
            ]
        })
        .collect();

    let room_names: Vec<&str> = room_emb.keys().map(String::as_str).collect();
    let object_names: Vec<&str> = object_emb.keys().map(String::as_str).collect();
    let labels: Vec<NodeLabels> = (0..params.n_nodes)
        .map(|_| {
            let room = room_names[layout_rng.random_range(0..room_names.len())].to_string();
            let n_obj = layout_rng.random_range(1..=3);
            let objects = (0..n_obj)
                .map(|_| ObjectPlacement {
                    name: object_names[layout_rng.random_range(0..object_names.len())]
                        .to_string(),
                    bearing: layout_rng.random_range(0.0..std::f64::consts::TAU),
                })
                .collect();
            NodeLabels { room, objects }
        })
        .collect();

    let mut edges: Vec<(usize, usize)> = Vec::new();
    for i in 0..params.n_nodes {
        for j in (i + 1)..params.n_nodes {
            if envgraph::euclid(positions[i], positions[j]) <= params.connect_radius {
                edges.push((i, j));
            }
        }
    }
    connect_components(&positions, &mut edges);

    let width = (params.n_nodes.max(2) - 1).to_string().len().max(2);
    let ids: Vec<String> = (0..params.n_nodes).map(|i| format!("n{i:0width$}")).collect();

    let mut noise_rng = rng_for_indexed(params.seed, "gen-noise", params.env_index as u64);
    let k = params.n_elev * params.n_head;
    // Sector membership reuses the panorama's own facing logic; features do
    // not matter for it.
    let sectors =
        Panorama { n_elev: params.n_elev, n_head: params.n_head, features: Array2::zeros((0, 0)) };
    let nodes: Vec<NodeRecord> = (0..params.n_nodes)
        .map(|i| {
            let mut features = Array2::zeros((k, params.d_app));
            for view in 0..k {
                let mut row = room_emb[&labels[i].room].clone();
                for obj in &labels[i].objects {
                    if sectors.view_facing(obj.bearing) % params.n_head == view % params.n_head {
                        row += &object_emb[&obj.name];
                    }
                }
                for v in row.iter_mut() {
                    *v += normal.sample(&mut noise_rng);
                }
                features.row_mut(view).assign(&row);
            }
            NodeRecord {
                node_id: ids[i].clone(),
                position: positions[i],
                panorama: Panorama {
                    n_elev: params.n_elev,
                    n_head: params.n_head,
                    features,
                },
                labels: labels[i].clone(),
            }
        })
        .collect();

    let edge_ids: Vec<(String, String)> = edges
        .iter()
        .map(|&(a, b)| (ids[a].clone(), ids[b].clone()))
        .collect();
    EnvironmentGraph::new(format!("env{:03}", params.env_index), nodes, &edge_ids)
}

/// Union-find based join of connected components by closest pair, with a
/// lexicographic index tie-break.
fn connect_components(positions: &[[f64; 2]], edges: &mut Vec<(usize, usize)>) {
    let n = positions.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, x: usize) -> usize {
        if parent[x] != x {
            let root = find(parent, parent[x]);
            parent[x] = root;
        }
        parent[x]
    }
    for &(a, b) in edges.iter() {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent[ra.max(rb)] = ra.min(rb);
    }
    loop {
        let roots: std::collections::BTreeSet<usize> =
            (0..n).map(|i| find(&mut parent, i)).collect();
        if roots.len() <= 1 {
            return;
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            for j in (i + 1)..n {
                if find(&mut parent, i) == find(&mut parent, j) {
                    continue;
                }
                let d = envgraph::euclid(positions[i], positions[j]);
                let better = match best {
                    None => true,
                    Some((bd, bi, bj)) => d < bd || (d == bd && (i, j) < (bi, bj)),
                };
                if better {
                    best = Some((d, i, j));
                }
            }
        }
        let (_, i, j) = best.expect("at least two components");
        edges.push((i, j));
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        parent[ri.max(rj)] = ri.min(rj);
    }
}

/// Reference paths are geodesics: a uniformly drawn (start, goal) pair is
/// kept when its shortest path has an edge count in range and is longer than
/// `min_len`. This makes step-wise teacher supervision consistent with the
/// instruction text.
pub fn sample_reference_path(
    env: &EnvironmentGraph,
    rng: &mut ChaCha12Rng,
    min_edges: usize,
    max_edges: usize,
    min_len: f64,
    retry_budget: usize,
) -> Result<Path> {
    let ids: Vec<&str> = env.node_ids().collect();
    for _ in 0..retry_budget {
        let a = ids[rng.random_range(0..ids.len())];
        let b = ids[rng.random_range(0..ids.len())];
        if a == b {
            continue;
        }
        let path = env.shortest_path(a, b)?;
        let edges = path.n_edges();
        if edges < min_edges || edges > max_edges {
            continue;
        }
        if env.path_length(&path)? <= min_len {
            continue;
        }
        return Ok(path);
    }
    Err(Error::RetryExhausted {
        attempts: retry_budget,
        context: format!(
            "no reference path with {min_edges}-{max_edges} edges and length > {min_len} in `{}`",
            env.env_id()
        ),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnDirection {
    Straight,
    Left,
    Right,
}

/// Heading change classification: within 30 degrees is straight, clockwise
/// beyond that is right, counterclockwise is left.
pub fn classify_turn(prev_bearing: f64, next_bearing: f64) -> TurnDirection {
    let d = envgraph::angle_diff(next_bearing, prev_bearing);
    if d.abs() <= std::f64::consts::PI / 6.0 {
        TurnDirection::Straight
    } else if d > 0.0 {
        TurnDirection::Right
    } else {
        TurnDirection::Left
    }
}

const STRAIGHT_TEMPLATES: [&[&str]; 3] = [
    &["walk", "straight", "to"],
    &["head", "straight", "toward"],
    &["continue", "ahead", "to"],
];
const LEFT_TEMPLATES: [&[&str]; 3] = [
    &["turn", "left", "and", "walk", "to"],
    &["take", "a", "left", "toward"],
    &["turn", "left", "at"],
];
const RIGHT_TEMPLATES: [&[&str]; 3] = [
    &["turn", "right", "and", "walk", "to"],
    &["take", "a", "right", "toward"],
    &["turn", "right", "at"],
];
const STOP_SUFFIX: [&str; 2] = ["then", "stop"];

#[derive(Clone, Debug)]
pub struct Clause {
    pub direction: TurnDirection,
    pub template: usize,
    pub landmark: String,
    pub corrupted: bool,
}

impl Clause {
    fn render(&self, out: &mut Vec<String>) {
        let prefix = match self.direction {
            TurnDirection::Straight => STRAIGHT_TEMPLATES[self.template],
            TurnDirection::Left => LEFT_TEMPLATES[self.template],
            TurnDirection::Right => RIGHT_TEMPLATES[self.template],
        };
        out.extend(prefix.iter().map(|w| w.to_string()));
        out.push("the".to_string());
        out.push(self.landmark.clone());
    }
}

#[derive(Clone, Debug)]
pub struct GeneratedInstruction {
    pub raw_tokens: Vec<String>,
    pub clauses: Vec<Clause>,
}

impl GeneratedInstruction {
    pub fn any_corrupted(&self) -> bool {
        self.clauses.iter().any(|c| c.corrupted)
    }
}

/// One clause per path edge: a turn direction relative to the previous edge
/// bearing (the first edge reads as straight) and a landmark drawn from the
/// edge's destination node. With probability `noise_rate` a middle clause is
/// corrupted, either by swapping it with another middle clause or by
/// replacing its landmark with a different one from the environment; the
/// first and last clauses are never touched.
pub fn generate_instruction(
    env: &EnvironmentGraph,
    path: &Path,
    rng: &mut ChaCha12Rng,
    noise_rate: f64,
) -> Result<GeneratedInstruction> {
    let ids = path.node_ids();
    if ids.len() < 2 {
        return Err(Error::InvalidPath("instruction needs at least one edge".into()));
    }
    let mut bearings = Vec::with_capacity(ids.len() - 1);
    for pair in ids.windows(2) {
        let a = env.node(&pair[0])?;
        let b = env.node(&pair[1])?;
        bearings.push(envgraph::bearing(a.position, b.position));
    }
    let mut clauses = Vec::with_capacity(bearings.len());
    for (e, &brg) in bearings.iter().enumerate() {
        let direction = if e == 0 {
            TurnDirection::Straight
        } else {
            classify_turn(bearings[e - 1], brg)
        };
        let dest = env.node(&ids[e + 1])?;
        let landmark = if rng.random_bool(0.5) || dest.labels.objects.is_empty() {
            dest.labels.room.clone()
        } else {
            dest.labels.objects[rng.random_range(0..dest.labels.objects.len())]
                .name
                .clone()
        };
        clauses.push(Clause {
            direction,
            template: rng.random_range(0..3),
            landmark,
            corrupted: false,
        });
    }

    if noise_rate > 0.0 && clauses.len() > 2 {
        let middle: Vec<usize> = (1..clauses.len() - 1).collect();
        let events: Vec<usize> = middle
            .iter()
            .copied()
            .filter(|_| rng.random_bool(noise_rate))
            .collect();
        let landmarks = environment_landmarks(env);
        for &i in &events {
            let swap_possible = middle.len() >= 2;
            if swap_possible && rng.random_bool(0.5) {
                let j = loop {
                    let j = middle[rng.random_range(0..middle.len())];
                    if j != i {
                        break j;
                    }
                };
                clauses.swap(i, j);
                clauses[i].corrupted = true;
                clauses[j].corrupted = true;
            } else {
                let current = clauses[i].landmark.clone();
                let others: Vec<&String> =
                    landmarks.iter().filter(|l| **l != current).collect();
                if !others.is_empty() {
                    clauses[i].landmark = others[rng.random_range(0..others.len())].clone();
                }
                clauses[i].corrupted = true;
            }
        }
    }

    let mut raw_tokens = Vec::new();
    for clause in &clauses {
        clause.render(&mut raw_tokens);
    }
    raw_tokens.extend(STOP_SUFFIX.iter().map(|w| w.to_string()));
    Ok(GeneratedInstruction { raw_tokens, clauses })
}

/// All distinct room and object names appearing in the environment, sorted.
pub fn environment_landmarks(env: &EnvironmentGraph) -> Vec<String> {
    let mut set = std::collections::BTreeSet::new();
    for node in env.nodes() {
        set.insert(node.labels.room.clone());
        for obj in &node.labels.objects {
            set.insert(obj.name.clone());
        }
    }
    set.into_iter().collect()
}

// ---------------------------------------------------------------------------
// Vocabulary

pub const OOV_TOKEN: &str = "<unk>";
pub const OOV_ID: u32 = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    /// token -> dense id; OOV_TOKEN maps to OOV_ID.
    map: BTreeMap<String, u32>,
    min_count: usize,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn id_of(&self, token: &str) -> u32 {
        self.map.get(token).copied().unwrap_or(OOV_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.map.contains_key(token)
    }

    pub fn encode(&self, raw_tokens: &[String]) -> Vec<u32> {
        raw_tokens.iter().map(|t| self.id_of(t)).collect()
    }

    /// Tokens in id order.
    pub fn tokens_by_id(&self) -> Vec<String> {
        let mut v: Vec<(u32, &String)> = self.map.iter().map(|(t, &i)| (i, t)).collect();
        v.sort();
        v.into_iter().map(|(_, t)| t.clone()).collect()
    }

    /// Stable content hash over the id-ordered token list and min_count.
    pub fn content_hash(&self) -> String {
        let body = serde_json::to_string(&(self.min_count, self.tokens_by_id()))
            .expect("vocab serializes");
        crate::checkpoint::sha256_hex(body.as_bytes())
    }

    pub fn save(&self, path: &FsPath) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = serde_json::json!({
            "schema_version": 1,
            "min_count": self.min_count,
            "tokens": self.tokens_by_id(),
        });
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &FsPath) -> Result<Self> {
        #[derive(Deserialize)]
        struct VocabFile {
            schema_version: u32,
            min_count: usize,
            tokens: Vec<String>,
        }
        let file: VocabFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.schema_version != 1 {
            return Err(Error::Parse(format!(
                "vocabulary schema version {} (expected 1)",
                file.schema_version
            )));
        }
        if file.tokens.first().map(String::as_str) != Some(OOV_TOKEN) {
            return Err(Error::Parse("vocabulary must start with the OOV token".into()));
        }
        let map = file
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Self { map, min_count: file.min_count })
    }
}

/// Tokens seen at least `min_count` times get dense ids in lexicographic
/// order after the reserved OOV id; everything else maps to OOV.
pub fn build_vocab(corpus: &[Vec<String>], min_count: usize) -> Vocabulary {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for tokens in corpus {
        for token in tokens {
            *counts.entry(token).or_default() += 1;
        }
    }
    let mut map = BTreeMap::new();
    map.insert(OOV_TOKEN.to_string(), OOV_ID);
    let mut next = 1u32;
    for (token, count) in counts {
        if count >= min_count && token != OOV_TOKEN {
            map.insert(token.to_string(), next);
            next += 1;
        }
    }
    Vocabulary { map, min_count }
}

/// Lowercase, strip punctuation, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|w| w.chars().filter(|c| !c.is_ascii_punctuation()).collect::<String>())
        .filter(|w| !w.is_empty())
        .collect()
}

// ---------------------------------------------------------------------------
// Pairs, corpus assembly, JSONL

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub tokens: Vec<u32>,
    pub raw_tokens: Vec<String>,
}

impl Instruction {
    pub fn from_raw(raw_tokens: Vec<String>, vocab: &Vocabulary) -> Result<Self> {
        if raw_tokens.is_empty() {
            return Err(Error::EmptyInput("instruction with no tokens".into()));
        }
        let tokens = vocab.encode(&raw_tokens);
        Ok(Self { tokens, raw_tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    #[serde(rename = "human_synth")]
    HumanSynth,
    #[serde(rename = "speaker_synth")]
    SpeakerSynth,
    #[serde(rename = "PS")]
    Ps,
    #[serde(rename = "RW")]
    Rw,
    #[serde(rename = "PR")]
    Pr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    ValSeen,
    ValUnseen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionPathPair {
    pub id: String,
    pub instruction: Instruction,
    pub path: Path,
    pub label: Label,
    pub provenance: Provenance,
    /// Mining strategy for negatives: "PS", "RW_start", "RW_end", or "PR".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    /// Present iff provenance is speaker_synth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corruption_flag: Option<bool>,
    pub split: Split,
}

impl InstructionPathPair {
    pub fn env_id(&self) -> &str {
        self.path.env_id()
    }

    pub fn validate(&self) -> Result<()> {
        let speaker = self.provenance == Provenance::SpeakerSynth;
        if speaker != self.corruption_flag.is_some() {
            return Err(Error::InvalidParams(format!(
                "pair `{}`: corruption_flag present iff speaker_synth",
                self.id
            )));
        }
        let negative_prov =
            matches!(self.provenance, Provenance::Ps | Provenance::Rw | Provenance::Pr);
        if (self.label == Label::Negative) != negative_prov {
            return Err(Error::InvalidParams(format!(
                "pair `{}`: negatives must carry a mining provenance",
                self.id
            )));
        }
        if self.label == Label::Negative && self.strategy.is_none() {
            return Err(Error::InvalidParams(format!(
                "pair `{}`: negative without strategy",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusParams {
    pub n_paths_per_env: usize,
    pub instructions_per_path: usize,
    /// Probability that an instruction belongs to the speaker partition,
    /// where clause corruption applies.
    pub speaker_fraction: f64,
    pub corruption_rate: f64,
    /// Fraction of environments held out entirely as val_unseen.
    pub val_unseen_env_fraction: f64,
    /// Fraction of each remaining environment's paths held out as val_seen.
    pub val_seen_path_fraction: f64,
    pub min_edges: usize,
    pub max_edges: usize,
    pub min_len: f64,
    pub retry_budget: usize,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            n_paths_per_env: 12,
            instructions_per_path: 3,
            speaker_fraction: 0.5,
            corruption_rate: 0.3,
            val_unseen_env_fraction: 0.2,
            val_seen_path_fraction: 0.2,
            min_edges: 4,
            max_edges: 6,
            min_len: 5.0,
            retry_budget: 200,
        }
    }
}

/// Positive pairs before vocabulary encoding.
#[derive(Clone, Debug)]
pub struct RawPair {
    pub id: String,
    pub raw_tokens: Vec<String>,
    pub path: Path,
    pub provenance: Provenance,
    pub corruption_flag: Option<bool>,
    pub split: Split,
}

/// Sample reference paths and instructions for every environment. Splits are
/// assigned by environment: the trailing `val_unseen_env_fraction` of the
/// env list (by id order) is val_unseen, and within the remaining
/// environments the trailing paths are val_seen. Randomness derives from
/// (seed, env index, path index, instruction index) so output does not
/// depend on iteration strategy.
pub fn make_corpus(
    envs: &[EnvironmentGraph],
    seed: u64,
    params: &CorpusParams,
) -> Result<Vec<RawPair>> {
    if envs.is_empty() {
        return Err(Error::EmptyInput("no environments".into()));
    }
    if !(0.0..=1.0).contains(&params.speaker_fraction)
        || !(0.0..=1.0).contains(&params.corruption_rate)
        || !(0.0..1.0).contains(&params.val_unseen_env_fraction)
        || !(0.0..1.0).contains(&params.val_seen_path_fraction)
    {
        return Err(Error::InvalidParams("corpus fractions out of range".into()));
    }
    let n_unseen = if params.val_unseen_env_fraction == 0.0 || envs.len() < 2 {
        0
    } else {
        ((envs.len() as f64 * params.val_unseen_env_fraction).round() as usize)
            .clamp(1, envs.len() - 1)
    };
    let first_unseen = envs.len() - n_unseen;

    let mut pairs = Vec::new();
    for (e, env) in envs.iter().enumerate() {
        let mut seen_sequences = std::collections::BTreeSet::new();
        let n_val_seen = if e < first_unseen && params.val_seen_path_fraction > 0.0 {
            ((params.n_paths_per_env as f64 * params.val_seen_path_fraction).round() as usize)
                .clamp(1, params.n_paths_per_env.saturating_sub(1))
        } else {
            0
        };
        for p in 0..params.n_paths_per_env {
            let mut path_rng =
                rng_for_indexed(seed, &format!("corpus-path-{e}"), p as u64);
            let mut path = None;
            for _ in 0..params.retry_budget {
                let candidate = sample_reference_path(
                    env,
                    &mut path_rng,
                    params.min_edges,
                    params.max_edges,
                    params.min_len,
                    params.retry_budget,
                )?;
                if seen_sequences.insert(candidate.node_ids().to_vec()) {
                    path = Some(candidate);
                    break;
                }
            }
            let path = path.ok_or_else(|| Error::RetryExhausted {
                attempts: params.retry_budget,
                context: format!("distinct reference paths in `{}`", env.env_id()),
            })?;
            let split = if e >= first_unseen {
                Split::ValUnseen
            } else if p >= params.n_paths_per_env - n_val_seen {
                Split::ValSeen
            } else {
                Split::Train
            };
            for i in 0..params.instructions_per_path {
                let mut instr_rng = rng_for_indexed(
                    seed,
                    &format!("corpus-instr-{e}-{p}"),
                    i as u64,
                );
                let speaker = instr_rng.random_bool(params.speaker_fraction);
                let noise = if speaker { params.corruption_rate } else { 0.0 };
                let gen = generate_instruction(env, &path, &mut instr_rng, noise)?;
                pairs.push(RawPair {
                    id: format!("{}:p{p:02}:i{i}", env.env_id()),
                    raw_tokens: gen.raw_tokens.clone(),
                    path: path.clone(),
                    provenance: if speaker {
                        Provenance::SpeakerSynth
                    } else {
                        Provenance::HumanSynth
                    },
                    corruption_flag: speaker.then_some(gen.any_corrupted()),
                    split,
                });
            }
        }
    }
    Ok(pairs)
}

/// Encode raw pairs against a vocabulary.
pub fn finalize_pairs(raw: Vec<RawPair>, vocab: &Vocabulary) -> Result<Vec<InstructionPathPair>> {
    raw.into_iter()
        .map(|r| {
            let pair = InstructionPathPair {
                id: r.id,
                instruction: Instruction::from_raw(r.raw_tokens, vocab)?,
                path: r.path,
                label: Label::Positive,
                provenance: r.provenance,
                strategy: None,
                corruption_flag: r.corruption_flag,
                split: r.split,
            };
            pair.validate()?;
            Ok(pair)
        })
        .collect()
}

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct PairRecord {
    schema_version: u32,
    #[serde(flatten)]
    pair: InstructionPathPair,
}

pub fn write_pairs_jsonl(path: &FsPath, pairs: &[InstructionPathPair]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for pair in pairs {
        let record = PairRecord { schema_version: DATASET_SCHEMA_VERSION, pair: pair.clone() };
        serde_json::to_writer(&mut file, &record)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

pub fn read_pairs_jsonl(path: &FsPath) -> Result<Vec<InstructionPathPair>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut pairs = Vec::new();
    for (lineno, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PairRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
        if record.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::Parse(format!(
                "line {}: schema version {} (expected {DATASET_SCHEMA_VERSION})",
                lineno + 1,
                record.schema_version
            )));
        }
        record.pair.validate()?;
        pairs.push(record.pair);
    }
    Ok(pairs)
}

// ---------------------------------------------------------------------------
// R2R-format ingestion

/// Parses R2R-style records `{path_id, scan, path: [node ids],
/// instructions: [strings]}`. Environments for each scan come from
/// `envs_by_scan`; instructions are tokenized but not yet encoded.
pub fn load_r2r_json(
    file: &FsPath,
    envs_by_scan: &BTreeMap<String, EnvironmentGraph>,
) -> Result<Vec<RawPair>> {
    #[derive(Deserialize)]
    struct R2rRecord {
        path_id: serde_json::Value,
        scan: String,
        path: Vec<String>,
        instructions: Vec<String>,
    }
    let text = std::fs::read_to_string(file)?;
    let records: Vec<R2rRecord> = serde_json::from_str(&text).map_err(|e| {
        let offset = offset_of_line_col(&text, e.line(), e.column());
        Error::Parse(format!("malformed R2R JSON at byte offset {offset}: {e}"))
    })?;
    let mut out = Vec::new();
    for (i, record) in records.iter().enumerate() {
        let fail = |reason: String| Error::Parse(format!("R2R record {i}: {reason}"));
        let env = envs_by_scan
            .get(&record.scan)
            .ok_or_else(|| fail(format!("unknown scan `{}`", record.scan)))?;
        if record.path.len() < 2 {
            return Err(fail("path needs at least two nodes".into()));
        }
        let path = Path::new(env, record.path.clone(), false)
            .map_err(|e| fail(e.to_string()))?;
        if record.instructions.is_empty() {
            return Err(fail("no instructions".into()));
        }
        for (k, text) in record.instructions.iter().enumerate() {
            let raw_tokens = tokenize(text);
            if raw_tokens.is_empty() {
                return Err(fail(format!("instruction {k} is empty after tokenization")));
            }
            out.push(RawPair {
                id: format!("r2r:{}:{k}", render_path_id(&record.path_id)),
                raw_tokens,
                path: path.clone(),
                provenance: Provenance::HumanSynth,
                corruption_flag: None,
                split: Split::Train,
            });
        }
    }
    Ok(out)
}

fn render_path_id(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn offset_of_line_col(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1);
        }
        offset += l.len() + 1;
    }
    text.len()
}
