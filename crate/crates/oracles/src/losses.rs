//! Flat-loop loss references: alignment score, logistic cross entropy,
//! bilinear logits, InfoNCE, and log-likelihood terms.

/// Stable softmax over a slice.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// softmin(z) = softmax(-z).
pub fn softmin(xs: &[f64]) -> Vec<f64> {
    let neg: Vec<f64> = xs.iter().map(|&x| -x).collect();
    softmax(&neg)
}

/// Alignment matrix by double-loop dot products: `a[i][j] = <hx[i], hv[j]>`.
pub fn brute_alignment_matrix(hx: &[Vec<f64>], hv: &[Vec<f64>]) -> Vec<Vec<f64>> {
    hx.iter()
        .map(|xi| {
            hv.iter()
                .map(|vj| xi.iter().zip(vj).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect()
}

/// Alignment score: per-row softmax pooling, then softmin pooling over rows.
pub fn brute_alignment_score(a: &[Vec<f64>]) -> f64 {
    assert!(!a.is_empty() && !a[0].is_empty(), "empty alignment matrix");
    let c: Vec<f64> = a
        .iter()
        .map(|row| {
            let w = softmax(row);
            w.iter().zip(row).map(|(wi, ri)| wi * ri).sum()
        })
        .collect();
    let w = softmin(&c);
    w.iter().zip(&c).map(|(wi, ci)| wi * ci).sum()
}

/// Mean binary cross entropy with the score as logit. Labels are 0 or 1.
pub fn brute_cma_loss(scores: &[f64], labels: &[u8]) -> f64 {
    assert_eq!(scores.len(), labels.len());
    assert!(!scores.is_empty());
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            // -[y ln sigma(s) + (1-y) ln(1 - sigma(s))], in stable log1p form
            if y == 1 {
                (1.0 + (-s).exp()).ln()
            } else {
                (1.0 + s.exp()).ln()
            }
        })
        .sum();
    total / scores.len() as f64
}

/// Bilinear form `v^T W h` by explicit loops.
pub fn brute_bilinear(v: &[f64], w: &[Vec<f64>], h: &[f64]) -> f64 {
    assert_eq!(v.len(), w.len());
    let mut out = 0.0;
    for (i, vi) in v.iter().enumerate() {
        assert_eq!(w[i].len(), h.len());
        for (j, hj) in h.iter().enumerate() {
            out += vi * w[i][j] * hj;
        }
    }
    out
}

/// One positive path with its mined negatives, already encoded.
///
/// `pos_pooled[t]` is the attention-pooled visual input at step t of the
/// positive path, `pos_states[t]` the visual recurrent state, and
/// `neg_pooled[j][t]` the pooled inputs of the j-th negative path.
pub struct InfonceCase {
    pub pos_pooled: Vec<Vec<f64>>,
    pub pos_states: Vec<Vec<f64>>,
    pub neg_pooled: Vec<Vec<Vec<f64>>>,
}

/// InfoNCE loss over all `(case, t, horizon)` terms, by flat loops.
///
/// For each valid `(t, k)` the candidate set is the positive's pooled input at
/// `t + k` followed by every negative's pooled input at `t + k` (negatives too
/// short for that step are skipped). Returns `None` when no term is valid.
pub fn brute_infonce(cases: &[InfonceCase], w_by_horizon: &[(usize, Vec<Vec<f64>>)]) -> Option<f64> {
    let mut terms = Vec::new();
    for case in cases {
        let m = case.pos_states.len();
        for &(k, ref w) in w_by_horizon {
            for t in 0..m {
                let target = t + k;
                if target >= m {
                    continue;
                }
                let mut logits = vec![brute_bilinear(&case.pos_pooled[target], w, &case.pos_states[t])];
                for neg in &case.neg_pooled {
                    if neg.len() > target {
                        logits.push(brute_bilinear(&neg[target], w, &case.pos_states[t]));
                    }
                }
                let p = softmax(&logits);
                terms.push(-p[0].ln());
            }
        }
    }
    if terms.is_empty() {
        None
    } else {
        Some(terms.iter().sum::<f64>() / terms.len() as f64)
    }
}

/// Negative log-likelihood of picking `chosen` under softmax of `logits`.
pub fn brute_nll_of_choice(logits: &[f64], chosen: usize) -> f64 {
    -softmax(logits)[chosen].ln()
}

/// Policy-gradient surrogate term: mean of `-logp * advantage`.
pub fn brute_pg_policy_term(logp: &[f64], adv: &[f64]) -> f64 {
    assert_eq!(logp.len(), adv.len());
    assert!(!logp.is_empty());
    let s: f64 = logp.iter().zip(adv).map(|(l, a)| -l * a).sum();
    s / logp.len() as f64
}
