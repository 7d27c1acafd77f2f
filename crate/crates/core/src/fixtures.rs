//! Tiny deterministic fixtures: a small environment, a small discrimination
//! batch, a merged parameter store at gradcheck-friendly dimensions, and a
//! finite-difference gradient comparison helper. Used by the unit tests and
//! by the runtime gradient-check harness.

use std::collections::BTreeMap;

use crate::auxtasks::{init_aux_params, AuxConfig};
use crate::encoders::{init_encoder_params, EncoderConfig};
use crate::envgraph::EnvironmentGraph;
use crate::negmine::{build_discrimination_dataset, MiningConfig};
use crate::nn::{GradStore, ParamStore};
use crate::rngutil::rng_for;
use crate::synthdata::{
    sample_reference_path, GenParams, Instruction, InstructionPathPair, Label, Provenance, Split,
};
use rand::Rng;
use vln_oracles::fd::fd_gradient_central;
use vln_oracles::max_rel_err;

/// Gradcheck dimensions: 4-wide towers, 3-wide appearance, 11-token vocab.
pub fn tiny_enc_cfg() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 11,
        d_emb: 3,
        d_x: 4,
        n_lang_layers: 1,
        d_v: 4,
        n_vis_layers: 1,
        d_app: 3,
        d_att: 2,
    }
}

pub fn tiny_gen_params(env_index: usize) -> GenParams {
    GenParams {
        n_nodes: 8,
        area_side: 10.0,
        connect_radius: 5.0,
        n_rooms: 4,
        n_objects: 5,
        d_app: 3,
        n_elev: 1,
        n_head: 3,
        seed: 77,
        env_index,
        noise_rate: 0.3,
    }
}

pub fn tiny_env(env_index: usize) -> EnvironmentGraph {
    crate::synthdata::generate_environment(&tiny_gen_params(env_index)).unwrap()
}

pub fn fake_instruction(rng: &mut impl Rng, len: usize, vocab_size: u32) -> Instruction {
    let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..vocab_size)).collect();
    let raw_tokens = tokens.iter().map(|t| format!("t{t}")).collect();
    Instruction { tokens, raw_tokens }
}

/// One tiny environment, two 3-edge positives with synthetic instructions,
/// and one PS + one RW + one PR negative per positive.
pub fn tiny_fixture() -> (BTreeMap<String, EnvironmentGraph>, Vec<InstructionPathPair>) {
    let env = tiny_env(0);
    let mut positives = Vec::new();
    let mut seen = Vec::new();
    let mut path_rng = rng_for(77, "fixture-paths");
    let mut instr_rng = rng_for(77, "fixture-instr");
    while positives.len() < 2 {
        let path = sample_reference_path(&env, &mut path_rng, 3, 3, 1.0, 500).unwrap();
        if seen.iter().any(|s: &Vec<String>| s.as_slice() == path.node_ids()) {
            continue;
        }
        seen.push(path.node_ids().to_vec());
        positives.push(InstructionPathPair {
            id: format!("fix:p{}", positives.len()),
            instruction: fake_instruction(&mut instr_rng, 6, 11),
            path,
            label: Label::Positive,
            provenance: Provenance::HumanSynth,
            strategy: None,
            corruption_flag: None,
            split: Split::Train,
        });
    }
    let cfg = MiningConfig {
        n_ps: 1,
        n_rw: 1,
        n_pr: 1,
        rw_distance_threshold: 2.0,
        retry_budget: 500,
        seed: 3,
        min_edges: 2,
        max_edges: 4,
        min_len: 1.0,
    };
    let mut envs = BTreeMap::new();
    envs.insert(env.env_id().to_string(), env);
    let negatives = build_discrimination_dataset(&positives, &envs, &cfg).unwrap();
    let mut pairs = positives;
    pairs.extend(negatives);
    (envs, pairs)
}

/// Encoder and auxiliary parameters in one store.
pub fn tiny_store(enc_cfg: &EncoderConfig, aux_cfg: &AuxConfig, seed: u64) -> ParamStore {
    let mut rng = rng_for(seed, "fixture-params");
    let mut store = init_encoder_params(enc_cfg, &mut rng).unwrap();
    store.merge(init_aux_params(enc_cfg, aux_cfg, &mut rng).unwrap());
    store
}

/// Compares an analytic gradient against central differences over every
/// parameter scalar and returns the worst relative error.
pub fn max_fd_error(
    store: &ParamStore,
    analytic: &GradStore,
    value_of: &mut dyn FnMut(&ParamStore) -> f64,
    step: f64,
) -> f64 {
    let x0 = store.flatten();
    let mut f = |x: &[f64]| {
        let mut probe = store.clone();
        probe.assign_from_flat(x);
        value_of(&probe)
    };
    let fd = fd_gradient_central(&mut f, &x0, step);
    let got = analytic.flatten();
    assert_eq!(got.len(), fd.len());
    max_rel_err(&got, &fd)
}

/// Asserts the worst relative error from `max_fd_error` stays under `tol`.
pub fn assert_matches_fd(
    store: &ParamStore,
    analytic: &GradStore,
    value_of: &mut dyn FnMut(&ParamStore) -> f64,
    step: f64,
    tol: f64,
) {
    let err = max_fd_error(store, analytic, value_of, step);
    assert!(err < tol, "max relative error vs central differences: {err:.3e} >= {tol:.0e}");
}
