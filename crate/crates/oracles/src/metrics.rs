//! Navigation-metric and AUC references.

/// Mann-Whitney AUC by pairwise counting: wins plus half-ties over all
/// (positive, negative) pairs.
pub fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 1)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 0)
        .map(|(&s, _)| s)
        .collect();
    assert!(!pos.is_empty() && !neg.is_empty(), "AUC needs both classes");
    let mut acc = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                acc += 1.0;
            } else if p == n {
                acc += 0.5;
            }
        }
    }
    acc / (pos.len() * neg.len()) as f64
}

/// Discounted returns, each computed by its own forward power series.
pub fn brute_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    (0..rewards.len())
        .map(|t| {
            rewards[t..]
                .iter()
                .enumerate()
                .map(|(i, &r)| gamma.powi(i as i32) * r)
                .sum()
        })
        .collect()
}

/// The per-episode SPL term: success * shortest / max(taken, shortest).
pub fn brute_spl_term(success: bool, shortest: f64, taken: f64) -> f64 {
    if !success {
        return 0.0;
    }
    shortest / taken.max(shortest)
}

/// Dense navigation reward on goal distances, `t` 1-based in an episode of
/// `len` actions: a distance delta before the final action, a success
/// indicator on the resulting position at the final action.
pub fn brute_reward(d_before: f64, d_after: f64, t: usize, len: usize, d_th: f64) -> f64 {
    assert!(t >= 1 && t <= len);
    if t < len {
        d_before - d_after
    } else if d_after <= d_th {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_scores_give_one() {
        let auc = brute_auc(&[2.0, 3.0, -1.0, 0.0], &[1, 1, 0, 0]);
        assert_eq!(auc, 1.0);
    }

    #[test]
    fn constant_scores_give_half() {
        let auc = brute_auc(&[1.0, 1.0, 1.0, 1.0], &[1, 1, 0, 0]);
        assert_eq!(auc, 0.5);
    }

    #[test]
    fn undiscounted_returns_are_suffix_sums() {
        assert_eq!(brute_returns(&[1.0, 1.0, 1.0], 1.0), vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn reward_cases() {
        assert_eq!(brute_reward(5.0, 3.5, 1, 4, 3.0), 1.5);
        assert_eq!(brute_reward(2.9, 2.9, 4, 4, 3.0), 1.0);
        assert_eq!(brute_reward(3.1, 3.1, 4, 4, 3.0), 0.0);
    }
}
