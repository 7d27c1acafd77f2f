//! Auxiliary pretraining objectives. Cross-modal alignment (CMA) scores an
//! instruction-path pair by softmax-pooling each row of the alignment
//! matrix and softmin-pooling the row scores, trained with binary logistic
//! cross-entropy. Next-visual-scene (NVS) is an InfoNCE objective that
//! classifies the true future pooled view among the futures of mined
//! negative paths. Evaluation helpers compute AUC and ranking reports.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{encode_instruction, encode_path, EncodedSeq, EncoderConfig};
use crate::envgraph::EnvironmentGraph;
use crate::error::{Error, Result};
use crate::nn::{concat_cols, fan_in_init, mean_of, BoundParams, ParamStore, Tape, Var};
use crate::synthdata::{InstructionPathPair, Label, Provenance, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuxConfig {
    /// Weight of the alignment loss in the combined objective.
    pub alpha: f64,
    /// NVS prediction horizons; empty disables the coherence term.
    pub horizons: Vec<usize>,
}

impl Default for AuxConfig {
    fn default() -> Self {
        Self { alpha: 0.5, horizons: vec![1, 2] }
    }
}

impl AuxConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidParams("alpha must be in [0, 1]".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &k in &self.horizons {
            if k == 0 || !seen.insert(k) {
                return Err(Error::InvalidParams("horizons must be positive and unique".into()));
            }
        }
        Ok(())
    }
}

/// Parameters owned by the auxiliary tasks: the language-to-visual
/// projection (only when tower widths differ) and one NVS bilinear map per
/// horizon.
pub fn init_aux_params(
    enc_cfg: &EncoderConfig,
    aux_cfg: &AuxConfig,
    rng: &mut impl Rng,
) -> Result<ParamStore> {
    aux_cfg.validate()?;
    let mut store = ParamStore::new();
    if enc_cfg.d_lang() != enc_cfg.d_v {
        store.insert("cma.proj", fan_in_init(rng, enc_cfg.d_lang(), enc_cfg.d_v));
    }
    for &k in &aux_cfg.horizons {
        store.insert(&format!("nvs.W{k}"), fan_in_init(rng, enc_cfg.d_view(), enc_cfg.d_v));
    }
    Ok(store)
}

/// A = H^X (H^V)^T after projecting the language states to the visual width
/// when the towers differ.
pub fn alignment_matrix<'t>(
    hx: Var<'t>,
    hv: Var<'t>,
    proj: Option<Var<'t>>,
) -> Result<Var<'t>> {
    let hx = match proj {
        Some(p) => hx.matmul(p),
        None => hx,
    };
    if hx.shape().1 != hv.shape().1 {
        return Err(Error::ShapeMismatch(format!(
            "alignment towers {} vs {} wide and no projection configured",
            hx.shape().1,
            hv.shape().1
        )));
    }
    Ok(hx.matmul(hv.t()))
}

/// Softmax-pool each row into c_l = softmax(A_l) . A_l, then softmin-pool
/// the row scores: score = softmin(c) . c with softmin(z) = softmax(-z).
pub fn alignment_score(a: Var<'_>) -> Result<Var<'_>> {
    let (n, m) = a.shape();
    if n == 0 || m == 0 {
        return Err(Error::EmptyInput("alignment matrix has no unmasked entries".into()));
    }
    let tape = a.tape();
    let rows: Vec<Var<'_>> = (0..n)
        .map(|i| {
            let r = a.row(i);
            r.softmax_row().mul(r).sum_all()
        })
        .collect();
    let z = concat_cols(tape, &rows);
    Ok(z.neg().softmax_row().mul(z).sum_all())
}

/// Mean binary logistic cross-entropy with the raw score as logit.
pub fn cma_loss<'t>(scores: &[Var<'t>], labels: &[bool]) -> Result<Var<'t>> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::EmptyInput("cma_loss needs matched, non-empty scores and labels".into()));
    }
    let tape = scores[0].tape();
    let terms: Vec<Var<'t>> = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| if y { s.neg().softplus() } else { s.softplus() })
        .collect();
    Ok(mean_of(tape, &terms))
}

/// Bilinear InfoNCE logit v^T W_k h in the log domain.
pub fn nvs_logit<'t>(v_future: Var<'t>, w_k: Var<'t>, h_t: Var<'t>) -> Var<'t> {
    v_future.matmul(w_k).matmul(h_t.t())
}

/// One positive path's encodings together with the encodings of its mined
/// negative paths (all under the same instruction).
pub struct NvsGroup<'a, 't> {
    pub positive: &'a EncodedSeq<'t>,
    pub negatives: Vec<&'a EncodedSeq<'t>>,
}

/// Mean over all (positive, t, k) of the categorical cross-entropy of
/// picking the positive future pooled view among the negatives' step-(t+k)
/// pooled views. Negatives shorter than t+k drop out of the candidate set.
pub fn infonce_loss<'a, 't>(
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    groups: &[NvsGroup<'a, 't>],
    horizons: &[usize],
) -> Result<Var<'t>> {
    let mut terms = Vec::new();
    for group in groups {
        let t_pos = group.positive.valid_length;
        for &k in horizons {
            let w_k = bound
                .try_var(&format!("nvs.W{k}"))
                .ok_or_else(|| Error::InvalidParams(format!("missing nvs.W{k}")))?;
            for t in 0..t_pos.saturating_sub(k) {
                let h_t = group.positive.states[t];
                let mut logits = vec![nvs_logit(group.positive.pooled_inputs[t + k], w_k, h_t)];
                for neg in &group.negatives {
                    if neg.valid_length > t + k {
                        logits.push(nvs_logit(neg.pooled_inputs[t + k], w_k, h_t));
                    }
                }
                let row = concat_cols(tape, &logits);
                terms.push(row.logsumexp_row().sub(row.slice_cols(0, 1)));
            }
        }
    }
    if terms.is_empty() {
        return Err(Error::EmptyInput("no valid (t, k) InfoNCE terms in batch".into()));
    }
    Ok(mean_of(tape, &terms))
}

/// alpha * L_align + (1 - alpha) * L_coherence.
pub fn combined_loss<'t>(l_align: Var<'t>, l_coh: Var<'t>, alpha: f64) -> Var<'t> {
    l_align.scale(alpha).add(l_coh.scale(1.0 - alpha))
}

/// One positive and the negatives mined for it.
#[derive(Clone)]
pub struct DiscriminationGroup<'a> {
    pub positive: &'a InstructionPathPair,
    pub negatives: Vec<&'a InstructionPathPair>,
}

/// Group a flat pair list: negatives attach to the positive whose id
/// prefixes theirs. Positives arrive in input order.
pub fn group_pairs(pairs: &[InstructionPathPair]) -> Result<Vec<DiscriminationGroup<'_>>> {
    let mut groups: Vec<DiscriminationGroup<'_>> = Vec::new();
    let mut by_id: BTreeMap<&str, usize> = BTreeMap::new();
    for pair in pairs {
        if pair.label == Label::Positive {
            by_id.insert(&pair.id, groups.len());
            groups.push(DiscriminationGroup { positive: pair, negatives: Vec::new() });
        }
    }
    for pair in pairs {
        if pair.label == Label::Negative {
            let positive_id = pair
                .id
                .rsplit_once(":neg-")
                .map(|(head, _)| head)
                .ok_or_else(|| {
                    Error::InvalidParams(format!("negative `{}` has no positive prefix", pair.id))
                })?;
            let &idx = by_id.get(positive_id).ok_or_else(|| {
                Error::InvalidParams(format!("negative `{}` without its positive", pair.id))
            })?;
            groups[idx].negatives.push(pair);
        }
    }
    Ok(groups)
}

pub struct PretrainStats {
    pub loss: f64,
    pub l_align: f64,
    pub l_coherence: Option<f64>,
    pub n_cma_terms: usize,
}

/// Combined pretraining loss over a batch of discrimination groups. The
/// instruction and every path are encoded once per group and shared between
/// the CMA and NVS terms.
pub fn pretrain_batch_loss<'t>(
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    enc_cfg: &EncoderConfig,
    aux_cfg: &AuxConfig,
    envs: &BTreeMap<String, EnvironmentGraph>,
    groups: &[DiscriminationGroup<'_>],
) -> Result<(Var<'t>, PretrainStats)> {
    if groups.is_empty() {
        return Err(Error::EmptyInput("empty pretraining batch".into()));
    }
    let proj = bound.try_var("cma.proj");
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut encodings: Vec<(EncodedSeq<'t>, Vec<EncodedSeq<'t>>)> = Vec::new();
    for group in groups {
        let env = envs.get(group.positive.env_id()).ok_or_else(|| {
            Error::UnknownNode(format!("environment `{}`", group.positive.env_id()))
        })?;
        let hx = encode_instruction(
            tape,
            bound,
            enc_cfg,
            &group.positive.instruction.tokens,
            None,
        )?;
        let hx_matrix = hx.state_matrix(tape);
        let pos_enc = encode_path(tape, bound, enc_cfg, env, &group.positive.path)?;
        let a = alignment_matrix(hx_matrix, pos_enc.state_matrix(tape), proj)?;
        scores.push(alignment_score(a)?);
        labels.push(true);
        let mut neg_encs = Vec::with_capacity(group.negatives.len());
        for neg in &group.negatives {
            let neg_env = envs.get(neg.env_id()).ok_or_else(|| {
                Error::UnknownNode(format!("environment `{}`", neg.env_id()))
            })?;
            let enc = encode_path(tape, bound, enc_cfg, neg_env, &neg.path)?;
            let a = alignment_matrix(hx_matrix, enc.state_matrix(tape), proj)?;
            scores.push(alignment_score(a)?);
            labels.push(false);
            neg_encs.push(enc);
        }
        encodings.push((pos_enc, neg_encs));
    }
    let l_align = cma_loss(&scores, &labels)?;
    let n_cma_terms = scores.len();

    if aux_cfg.horizons.is_empty() {
        let stats = PretrainStats {
            loss: l_align.scalar(),
            l_align: l_align.scalar(),
            l_coherence: None,
            n_cma_terms,
        };
        return Ok((l_align, stats));
    }
    let nvs_groups: Vec<NvsGroup<'_, 't>> = encodings
        .iter()
        .map(|(pos, negs)| NvsGroup { positive: pos, negatives: negs.iter().collect() })
        .collect();
    let l_coh = infonce_loss(tape, bound, &nvs_groups, &aux_cfg.horizons)?;
    let total = combined_loss(l_align, l_coh, aux_cfg.alpha);
    let stats = PretrainStats {
        loss: total.scalar(),
        l_align: l_align.scalar(),
        l_coherence: Some(l_coh.scalar()),
        n_cma_terms,
    };
    Ok((total, stats))
}

/// Alignment score of one pair under fixed parameters (no gradients kept).
pub fn score_pair(
    params: &ParamStore,
    enc_cfg: &EncoderConfig,
    envs: &BTreeMap<String, EnvironmentGraph>,
    pair: &InstructionPathPair,
) -> Result<f64> {
    let env = envs
        .get(pair.env_id())
        .ok_or_else(|| Error::UnknownNode(format!("environment `{}`", pair.env_id())))?;
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let hx = encode_instruction(&tape, &bound, enc_cfg, &pair.instruction.tokens, None)?;
    let hv = encode_path(&tape, &bound, enc_cfg, env, &pair.path)?;
    let a = alignment_matrix(
        hx.state_matrix(&tape),
        hv.state_matrix(&tape),
        bound.try_var("cma.proj"),
    )?;
    let score = alignment_score(a)?.scalar();
    if !score.is_finite() {
        return Err(Error::NonFinite("alignment score".into()));
    }
    Ok(score)
}

/// Mann-Whitney AUC by exact pairwise counting; ties count half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|&(_, &l)| l)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|&(_, &l)| !l)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::EmptyInput("AUC needs both positives and negatives".into()));
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (pos.len() as f64 * neg.len() as f64))
}

#[derive(Clone, Debug, Serialize)]
pub struct RankEntry {
    pub rank: usize,
    pub pair_id: String,
    pub split: Split,
    pub provenance: Provenance,
    pub label: Label,
    pub corruption_flag: Option<bool>,
    pub score: f64,
}

/// Stable descending sort by score; rank is 1-based.
pub fn rank_pairs(pairs: &[InstructionPathPair], scores: &[f64]) -> Result<Vec<RankEntry>> {
    if pairs.len() != scores.len() {
        return Err(Error::ShapeMismatch("one score per pair".into()));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(rank, i)| RankEntry {
            rank: rank + 1,
            pair_id: pairs[i].id.clone(),
            split: pairs[i].split,
            provenance: pairs[i].provenance,
            label: pairs[i].label,
            corruption_flag: pairs[i].corruption_flag,
            score: scores[i],
        })
        .collect())
}

/// First ceil(q * N) entries of a ranking.
pub fn top_slice<T>(entries: &[T], q: f64) -> &[T] {
    let n = (q * entries.len() as f64).ceil() as usize;
    &entries[..n.min(entries.len())]
}

/// Last ceil(q * N) entries of a ranking.
pub fn bottom_slice<T>(entries: &[T], q: f64) -> &[T] {
    let n = (q * entries.len() as f64).ceil() as usize;
    &entries[entries.len() - n.min(entries.len())..]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngutil::rng_for;
    use crate::fixtures::{assert_matches_fd, tiny_enc_cfg, tiny_fixture, tiny_store};
    use approx::assert_abs_diff_eq;
    use ndarray::{arr2, Array2};
    use vln_oracles::losses::{
        brute_alignment_matrix, brute_alignment_score, brute_bilinear, brute_cma_loss,
        brute_infonce, InfonceCase,
    };
    use vln_oracles::metrics::brute_auc;

    fn constant<'t>(tape: &'t Tape, rows: &[&[f64]]) -> Var<'t> {
        let data: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        let n = data.len();
        let m = data[0].len();
        tape.constant(Array2::from_shape_fn((n, m), |(i, j)| data[i][j]))
    }

    fn rand_matrix(rng: &mut rand_chacha::ChaCha12Rng, n: usize, m: usize) -> Array2<f64> {
        use rand::Rng;
        Array2::from_shape_fn((n, m), |_| rng.random_range(-1.0..1.0))
    }

    fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
        a.rows().into_iter().map(|r| r.to_vec()).collect()
    }

    #[test]
    fn alignment_matrix_is_dot_product_table() {
        let tape = Tape::new();
        let hx = constant(&tape, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let hv = constant(&tape, &[&[3.0, -1.0], &[2.0, 5.0], &[0.5, 0.25]]);
        let a = alignment_matrix(hx, hv, None).unwrap();
        assert_eq!(a.shape(), (2, 3));
        let expect = arr2(&[[3.0, 2.0, 0.5], [-1.0, 5.0, 0.25]]);
        assert_abs_diff_eq!(a.value(), expect, epsilon = 0.0);
    }

    #[test]
    fn alignment_matrix_matches_oracle() {
        let mut rng = rng_for(5, "aux-align-oracle");
        let tape = Tape::new();
        let hx = rand_matrix(&mut rng, 4, 3);
        let hv = rand_matrix(&mut rng, 5, 3);
        let a = alignment_matrix(tape.constant(hx.clone()), tape.constant(hv.clone()), None)
            .unwrap();
        let brute = brute_alignment_matrix(&to_rows(&hx), &to_rows(&hv));
        for i in 0..4 {
            for j in 0..5 {
                assert_abs_diff_eq!(a.value()[[i, j]], brute[i][j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn alignment_matrix_projects_when_widths_differ() {
        let tape = Tape::new();
        let hx = constant(&tape, &[&[1.0, 2.0, 3.0]]);
        let proj = constant(&tape, &[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let hv = constant(&tape, &[&[1.0, 1.0]]);
        let a = alignment_matrix(hx, hv, Some(proj)).unwrap();
        assert_abs_diff_eq!(a.value()[[0, 0]], 9.0, epsilon = 1e-12);
        let unprojected = alignment_matrix(hx, hv, None);
        assert!(matches!(unprojected, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn alignment_score_of_single_entry_is_that_entry() {
        for s in [-2.5, 0.0, 0.75] {
            let tape = Tape::new();
            let a = constant(&tape, &[&[s]]);
            assert_abs_diff_eq!(alignment_score(a).unwrap().scalar(), s, epsilon = 1e-12);
        }
    }

    #[test]
    fn alignment_score_of_constant_matrix_is_that_constant() {
        let tape = Tape::new();
        let a = tape.constant(Array2::from_elem((3, 4), 1.7));
        assert_abs_diff_eq!(alignment_score(a).unwrap().scalar(), 1.7, epsilon = 1e-12);
    }

    #[test]
    fn alignment_score_matches_oracle() {
        let mut rng = rng_for(6, "aux-score-oracle");
        for (n, m) in [(1, 4), (3, 1), (4, 5), (7, 2)] {
            let a = rand_matrix(&mut rng, n, m);
            let tape = Tape::new();
            let got = alignment_score(tape.constant(a.clone())).unwrap().scalar();
            assert_abs_diff_eq!(got, brute_alignment_score(&to_rows(&a)), epsilon = 1e-12);
        }
    }

    #[test]
    fn alignment_score_rejects_empty() {
        let tape = Tape::new();
        let a = tape.constant(Array2::zeros((0, 3)));
        assert!(matches!(alignment_score(a), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn cma_loss_at_zero_score_is_ln_two() {
        let tape = Tape::new();
        let zero = tape.constant_scalar(0.0);
        let loss = cma_loss(&[zero], &[true]).unwrap().scalar();
        assert_abs_diff_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(loss, 0.693147, epsilon = 1e-6);
        let loss_neg = cma_loss(&[zero], &[false]).unwrap().scalar();
        assert_abs_diff_eq!(loss_neg, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn cma_loss_saturates_correctly() {
        let tape = Tape::new();
        let big = tape.constant_scalar(30.0);
        assert!(cma_loss(&[big], &[true]).unwrap().scalar() < 1e-12);
        assert!(cma_loss(&[big], &[false]).unwrap().scalar() > 29.0);
    }

    #[test]
    fn cma_loss_matches_oracle() {
        let scores = [0.3, -1.2, 2.0, 0.0, -0.4];
        let labels = [true, false, true, false, true];
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = scores.iter().map(|&s| tape.constant_scalar(s)).collect();
        let got = cma_loss(&vars, &labels).unwrap().scalar();
        let brute =
            brute_cma_loss(&scores, &labels.map(|l| u8::from(l)));
        assert_abs_diff_eq!(got, brute, epsilon = 1e-12);
    }

    #[test]
    fn nvs_logit_matches_oracle() {
        let mut rng = rng_for(7, "aux-bilinear-oracle");
        let v = rand_matrix(&mut rng, 1, 5);
        let w = rand_matrix(&mut rng, 5, 3);
        let h = rand_matrix(&mut rng, 1, 3);
        let tape = Tape::new();
        let got = nvs_logit(tape.constant(v.clone()), tape.constant(w.clone()), tape.constant(h.clone()))
            .scalar();
        let brute = brute_bilinear(
            v.row(0).as_slice().unwrap(),
            &to_rows(&w),
            h.row(0).as_slice().unwrap(),
        );
        assert_abs_diff_eq!(got, brute, epsilon = 1e-12);
    }

    #[test]
    fn nvs_logit_identity_weight_is_dot_product() {
        let tape = Tape::new();
        let v = constant(&tape, &[&[1.0, 2.0]]);
        let h = constant(&tape, &[&[3.0, -1.0]]);
        let w = tape.constant(Array2::eye(2));
        assert_abs_diff_eq!(nvs_logit(v, w, h).scalar(), 1.0, epsilon = 1e-12);
    }

    // Builds an EncodedSeq from constant rows for loss-shape tests.
    fn seq_from<'t>(tape: &'t Tape, states: &[&[f64]], pooled: &[&[f64]]) -> EncodedSeq<'t> {
        assert_eq!(states.len(), pooled.len());
        EncodedSeq {
            valid_length: states.len(),
            states: states.iter().map(|r| constant(tape, &[r])).collect(),
            pooled_inputs: pooled.iter().map(|r| constant(tape, &[r])).collect(),
        }
    }

    fn store_with_w(entries: &[(&str, Array2<f64>)]) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, value) in entries {
            store.insert(name, value.clone());
        }
        store
    }

    #[test]
    fn infonce_uniform_logits_give_ln_candidate_count() {
        // Zero weights make every candidate equally likely; with 7 negatives
        // alive at each step the candidate set has 8 entries.
        let tape = Tape::new();
        let store = store_with_w(&[("nvs.W1", Array2::zeros((2, 2)))]);
        let bound = store.bind(&tape);
        let pos = seq_from(&tape, &[&[1.0, 0.0], &[0.0, 1.0]], &[&[0.5, 0.5], &[0.25, 0.75]]);
        let negs: Vec<EncodedSeq<'_>> = (0..7)
            .map(|j| {
                let r = j as f64;
                seq_from(&tape, &[&[r, 1.0], &[1.0, r]], &[&[r, 0.5], &[0.5, r]])
            })
            .collect();
        let groups = vec![NvsGroup { positive: &pos, negatives: negs.iter().collect() }];
        let loss = infonce_loss(&tape, &bound, &groups, &[1]).unwrap().scalar();
        assert_abs_diff_eq!(loss, (8.0f64).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(loss, 2.07944, epsilon = 1e-5);
    }

    #[test]
    fn infonce_dominant_positive_drives_loss_to_zero() {
        let tape = Tape::new();
        let w = arr2(&[[30.0, 0.0], [0.0, 0.0]]);
        let store = store_with_w(&[("nvs.W1", w)]);
        let bound = store.bind(&tape);
        let pos = seq_from(&tape, &[&[1.0, 0.0], &[1.0, 0.0]], &[&[1.0, 0.0], &[1.0, 0.0]]);
        let neg = seq_from(&tape, &[&[0.0, 1.0], &[0.0, 1.0]], &[&[0.0, 1.0], &[0.0, 1.0]]);
        let groups = vec![NvsGroup { positive: &pos, negatives: vec![&neg] }];
        let loss = infonce_loss(&tape, &bound, &groups, &[1]).unwrap().scalar();
        assert!(loss < 1e-12, "loss {loss} should vanish");
    }

    #[test]
    fn infonce_is_invariant_to_negative_order() {
        let mut rng = rng_for(8, "aux-nce-perm");
        let w1 = rand_matrix(&mut rng, 3, 2);
        let w2 = rand_matrix(&mut rng, 3, 2);
        let store = store_with_w(&[("nvs.W1", w1), ("nvs.W2", w2)]);
        let states: Vec<Vec<f64>> = (0..4).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let pooled: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let neg_pooled: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|_| (0..4).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
            .collect();
        let eval = |order: &[usize]| {
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let pos = EncodedSeq {
                valid_length: 4,
                states: states.iter().map(|r| constant(&tape, &[r])).collect(),
                pooled_inputs: pooled.iter().map(|r| constant(&tape, &[r])).collect(),
            };
            let negs: Vec<EncodedSeq<'_>> = order
                .iter()
                .map(|&j| EncodedSeq {
                    valid_length: 4,
                    states: states.iter().map(|r| constant(&tape, &[r])).collect(),
                    pooled_inputs: neg_pooled[j].iter().map(|r| constant(&tape, &[r])).collect(),
                })
                .collect();
            let groups = vec![NvsGroup { positive: &pos, negatives: negs.iter().collect() }];
            infonce_loss(&tape, &bound, &groups, &[1, 2]).unwrap().scalar()
        };
        let base = eval(&[0, 1, 2]);
        for order in [[1, 0, 2], [2, 1, 0], [2, 0, 1]] {
            assert_abs_diff_eq!(eval(&order), base, epsilon = 1e-12);
        }
    }

    #[test]
    fn infonce_skips_negatives_shorter_than_target_step() {
        // The short negative has no step-2 pooled input, so at t=1 the
        // candidate set is the positive alone and that term is exactly zero.
        let tape = Tape::new();
        let store = store_with_w(&[("nvs.W1", Array2::eye(2))]);
        let bound = store.bind(&tape);
        let pos = seq_from(
            &tape,
            &[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]],
            &[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]],
        );
        let short = seq_from(&tape, &[&[5.0, 5.0], &[5.0, 5.0]], &[&[5.0, 5.0], &[5.0, 5.0]]);
        let groups = vec![NvsGroup { positive: &pos, negatives: vec![&short] }];
        let got = infonce_loss(&tape, &bound, &groups, &[1]).unwrap().scalar();
        let case = InfonceCase {
            pos_pooled: vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
            pos_states: vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
            neg_pooled: vec![vec![vec![5.0, 5.0], vec![5.0, 5.0]]],
        };
        let w = vec![(1usize, vec![vec![1.0, 0.0], vec![0.0, 1.0]])];
        assert_abs_diff_eq!(got, brute_infonce(&[case], &w).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn infonce_matches_oracle_on_random_batch() {
        let mut rng = rng_for(9, "aux-nce-oracle");
        let w1 = rand_matrix(&mut rng, 3, 2);
        let w2 = rand_matrix(&mut rng, 3, 2);
        let mut cases = Vec::new();
        for len_pos in [3usize, 4] {
            let pos_states: Vec<Vec<f64>> =
                (0..len_pos).map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let pos_pooled: Vec<Vec<f64>> =
                (0..len_pos).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let neg_pooled: Vec<Vec<Vec<f64>>> = [2usize, 4, 3]
                .iter()
                .map(|&l| (0..l).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
                .collect();
            cases.push(InfonceCase { pos_states, pos_pooled, neg_pooled });
        }
        let tape = Tape::new();
        let store = store_with_w(&[
            ("nvs.W1", w1.clone()),
            ("nvs.W2", w2.clone()),
        ]);
        let bound = store.bind(&tape);
        let seqs: Vec<(EncodedSeq<'_>, Vec<EncodedSeq<'_>>)> = cases
            .iter()
            .map(|c| {
                let pos = EncodedSeq {
                    valid_length: c.pos_states.len(),
                    states: c.pos_states.iter().map(|r| constant(&tape, &[r])).collect(),
                    pooled_inputs: c.pos_pooled.iter().map(|r| constant(&tape, &[r])).collect(),
                };
                let negs = c
                    .neg_pooled
                    .iter()
                    .map(|n| EncodedSeq {
                        valid_length: n.len(),
                        states: n.iter().map(|r| constant(&tape, &[r])).collect(),
                        pooled_inputs: n.iter().map(|r| constant(&tape, &[r])).collect(),
                    })
                    .collect();
                (pos, negs)
            })
            .collect();
        let groups: Vec<NvsGroup<'_, '_>> = seqs
            .iter()
            .map(|(pos, negs)| NvsGroup { positive: pos, negatives: negs.iter().collect() })
            .collect();
        let got = infonce_loss(&tape, &bound, &groups, &[1, 2]).unwrap().scalar();
        let w = vec![(1usize, to_rows(&w1)), (2usize, to_rows(&w2))];
        assert_abs_diff_eq!(got, brute_infonce(&cases, &w).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn infonce_errors_when_no_step_pairs_exist() {
        // A length-2 positive has no step pair at horizon 2.
        let tape = Tape::new();
        let store = store_with_w(&[("nvs.W2", Array2::eye(2))]);
        let bound = store.bind(&tape);
        let pos = seq_from(&tape, &[&[1.0, 0.0], &[0.0, 1.0]], &[&[1.0, 0.0], &[0.0, 1.0]]);
        let groups = vec![NvsGroup { positive: &pos, negatives: vec![] }];
        let got = infonce_loss(&tape, &bound, &groups, &[2]);
        assert!(matches!(got, Err(Error::EmptyInput(_))));
    }

    #[test]
    fn combined_loss_interpolates() {
        let tape = Tape::new();
        let a = tape.constant_scalar(0.6);
        let c = tape.constant_scalar(0.8);
        assert_abs_diff_eq!(combined_loss(a, c, 0.5).scalar(), 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(combined_loss(a, c, 1.0).scalar(), 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(combined_loss(a, c, 0.0).scalar(), 0.8, epsilon = 1e-12);
    }

    #[test]
    fn group_pairs_attaches_negatives_to_their_positive() {
        let (_envs, pairs) = tiny_fixture();
        let groups = group_pairs(&pairs).unwrap();
        assert_eq!(groups.len(), 2);
        for group in &groups {
            assert_eq!(group.negatives.len(), 3);
            for neg in &group.negatives {
                assert!(neg.id.starts_with(&format!("{}:neg-", group.positive.id)));
            }
        }
        assert_eq!(groups[0].positive.id, "fix:p0");
        assert_eq!(groups[1].positive.id, "fix:p1");
    }

    #[test]
    fn group_pairs_rejects_orphan_negative() {
        let (_envs, mut pairs) = tiny_fixture();
        pairs.retain(|p| p.id != "fix:p0");
        assert!(matches!(group_pairs(&pairs), Err(Error::InvalidParams(_))));
    }

    #[test]
    fn auc_matches_oracle_and_handles_ties() {
        let scores = [0.9, 0.8, 0.7, 0.7, 0.1];
        let labels = [true, false, true, false, false];
        let got = auc(&scores, &labels).unwrap();
        let labels_u8 = labels.map(|l| u8::from(l));
        assert_abs_diff_eq!(got, brute_auc(&scores, &labels_u8), epsilon = 1e-15);
        // Pairs: (0.9 beats all 3), (0.7 beats 0.1, ties 0.7, loses 0.8).
        assert_abs_diff_eq!(got, (3.0 + 1.5) / 6.0, epsilon = 1e-15);
        let perfect = auc(&[1.0, 0.9, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_abs_diff_eq!(perfect, 1.0, epsilon = 0.0);
        assert!(matches!(auc(&[1.0], &[true]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn rank_pairs_sorts_descending_and_stably() {
        let (_envs, pairs) = tiny_fixture();
        let n = pairs.len();
        let mut scores = vec![0.0; n];
        scores[0] = 2.0;
        scores[1] = 2.0;
        scores[2] = 5.0;
        let entries = rank_pairs(&pairs, &scores).unwrap();
        assert_eq!(entries.len(), n);
        assert_eq!(entries[0].pair_id, pairs[2].id);
        assert_eq!(entries[0].rank, 1);
        // Equal scores keep input order.
        assert_eq!(entries[1].pair_id, pairs[0].id);
        assert_eq!(entries[2].pair_id, pairs[1].id);
        for (i, e) in entries.iter().enumerate() {
            assert_eq!(e.rank, i + 1);
            if i > 0 {
                assert!(e.score <= entries[i - 1].score);
            }
        }
    }

    #[test]
    fn slices_take_ceil_of_fraction() {
        let xs = [1, 2, 3, 4, 5, 6, 7];
        assert_eq!(top_slice(&xs, 0.25), &[1, 2]);
        assert_eq!(bottom_slice(&xs, 0.25), &[6, 7]);
        assert_eq!(top_slice(&xs, 1.0).len(), 7);
        assert_eq!(top_slice(&xs, 0.0).len(), 0);
    }

    #[test]
    fn pretrain_batch_loss_reports_consistent_stats() {
        let enc_cfg = tiny_enc_cfg();
        let aux_cfg = AuxConfig::default();
        let store = tiny_store(&enc_cfg, &aux_cfg, 21);
        let (envs, pairs) = tiny_fixture();
        let groups = group_pairs(&pairs).unwrap();
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let (loss, stats) =
            pretrain_batch_loss(&tape, &bound, &enc_cfg, &aux_cfg, &envs, &groups).unwrap();
        assert_eq!(stats.n_cma_terms, 8);
        let l_coh = stats.l_coherence.unwrap();
        assert_abs_diff_eq!(stats.loss, 0.5 * stats.l_align + 0.5 * l_coh, epsilon = 1e-12);
        assert_abs_diff_eq!(loss.scalar(), stats.loss, epsilon = 0.0);
        assert!(stats.loss.is_finite());

        let cma_only = AuxConfig { alpha: 0.5, horizons: vec![] };
        let tape2 = Tape::new();
        let bound2 = store.bind(&tape2);
        let (_, stats2) =
            pretrain_batch_loss(&tape2, &bound2, &enc_cfg, &cma_only, &envs, &groups).unwrap();
        assert!(stats2.l_coherence.is_none());
        assert_abs_diff_eq!(stats2.loss, stats2.l_align, epsilon = 0.0);
        assert_abs_diff_eq!(stats2.l_align, stats.l_align, epsilon = 1e-12);
    }

    #[test]
    fn score_pair_is_deterministic_and_matches_batch_side() {
        let enc_cfg = tiny_enc_cfg();
        let aux_cfg = AuxConfig::default();
        let store = tiny_store(&enc_cfg, &aux_cfg, 22);
        let (envs, pairs) = tiny_fixture();
        let a = score_pair(&store, &enc_cfg, &envs, &pairs[0]).unwrap();
        let b = score_pair(&store, &enc_cfg, &envs, &pairs[0]).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        let c = score_pair(&store, &enc_cfg, &envs, &pairs[1]).unwrap();
        assert_ne!(a.to_bits(), c.to_bits());
    }

    #[test]
    fn cma_gradients_match_central_differences() {
        let enc_cfg = tiny_enc_cfg();
        let aux_cfg = AuxConfig { alpha: 0.5, horizons: vec![] };
        let store = tiny_store(&enc_cfg, &aux_cfg, 23);
        let (envs, pairs) = tiny_fixture();
        let groups = group_pairs(&pairs).unwrap();

        let tape = Tape::new();
        let bound = store.bind(&tape);
        let (loss, _) =
            pretrain_batch_loss(&tape, &bound, &enc_cfg, &aux_cfg, &envs, &groups).unwrap();
        let grads = tape.backward(loss);
        let analytic = bound.collect_grads(&grads, &store);

        let mut value_of = |probe: &ParamStore| {
            let tape = Tape::new();
            let bound = probe.bind(&tape);
            let (loss, _) =
                pretrain_batch_loss(&tape, &bound, &enc_cfg, &aux_cfg, &envs, &groups).unwrap();
            loss.scalar()
        };
        assert_matches_fd(&store, &analytic, &mut value_of, 1e-5, 1e-4);
    }

    #[test]
    fn combined_gradients_match_central_differences() {
        let enc_cfg = tiny_enc_cfg();
        let aux_cfg = AuxConfig::default();
        let store = tiny_store(&enc_cfg, &aux_cfg, 24);
        let (envs, pairs) = tiny_fixture();
        let groups = group_pairs(&pairs).unwrap();

        let tape = Tape::new();
        let bound = store.bind(&tape);
        let (loss, stats) =
            pretrain_batch_loss(&tape, &bound, &enc_cfg, &aux_cfg, &envs, &groups).unwrap();
        assert!(stats.l_coherence.is_some());
        let grads = tape.backward(loss);
        let analytic = bound.collect_grads(&grads, &store);

        let mut value_of = |probe: &ParamStore| {
            let tape = Tape::new();
            let bound = probe.bind(&tape);
            let (loss, _) =
                pretrain_batch_loss(&tape, &bound, &enc_cfg, &aux_cfg, &envs, &groups).unwrap();
            loss.scalar()
        };
        assert_matches_fd(&store, &analytic, &mut value_of, 1e-5, 1e-4);
    }
}

