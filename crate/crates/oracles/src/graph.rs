//! Exhaustive graph references: simple-path enumeration in place of Dijkstra.

/// Cap on node count for exhaustive enumeration.
pub const MAX_NODES: usize = 12;

/// Minimum-weight path from `from` to `to` by enumerating every simple path.
///
/// `adj[u]` lists `(v, weight)` pairs. Node indices must already be in the
/// production tie-break order (ascending node id), so ties on total weight are
/// broken by the lexicographically smallest index sequence.
///
/// Returns `(total_weight, path)`, or `None` if `to` is unreachable.
/// Refuses graphs above [`MAX_NODES`].
pub fn brute_shortest_path(
    adj: &[Vec<(usize, f64)>],
    from: usize,
    to: usize,
) -> Option<(f64, Vec<usize>)> {
    assert!(adj.len() <= MAX_NODES, "oracle cap: at most {} nodes", MAX_NODES);
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut visited = vec![false; adj.len()];
    let mut path = vec![from];
    visited[from] = true;
    dfs(adj, to, 0.0, &mut path, &mut visited, &mut best);
    best
}

fn dfs(
    adj: &[Vec<(usize, f64)>],
    to: usize,
    dist: f64,
    path: &mut Vec<usize>,
    visited: &mut [bool],
    best: &mut Option<(f64, Vec<usize>)>,
) {
    let cur = *path.last().unwrap();
    if cur == to {
        let better = match best {
            None => true,
            Some((bd, bp)) => {
                if (dist - *bd).abs() <= 1e-9 * bd.abs().max(1.0) {
                    path.as_slice() < bp.as_slice()
                } else {
                    dist < *bd
                }
            }
        };
        if better {
            *best = Some((dist, path.clone()));
        }
        return;
    }
    for &(next, w) in &adj[cur] {
        if !visited[next] {
            visited[next] = true;
            path.push(next);
            dfs(adj, to, dist + w, path, visited, best);
            path.pop();
            visited[next] = false;
        }
    }
}

/// Total weight of a node sequence, accumulated left to right.
pub fn brute_path_weight(adj: &[Vec<(usize, f64)>], path: &[usize]) -> f64 {
    let mut total = 0.0;
    for pair in path.windows(2) {
        let w = adj[pair[0]]
            .iter()
            .find(|&&(v, _)| v == pair[1])
            .map(|&(_, w)| w)
            .expect("brute_path_weight: consecutive nodes not adjacent");
        total += w;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_graph() {
        // a - b - c with unit weights
        let adj = vec![vec![(1, 1.0)], vec![(0, 1.0), (2, 1.0)], vec![(1, 1.0)]];
        let (d, p) = brute_shortest_path(&adj, 0, 2).unwrap();
        assert_eq!(d, 2.0);
        assert_eq!(p, vec![0, 1, 2]);
    }

    #[test]
    fn tie_break_prefers_lexicographic() {
        // 0 -> 3 via 1 or via 2, equal weight; path through 1 wins.
        let adj = vec![
            vec![(1, 1.0), (2, 1.0)],
            vec![(0, 1.0), (3, 1.0)],
            vec![(0, 1.0), (3, 1.0)],
            vec![(1, 1.0), (2, 1.0)],
        ];
        let (_, p) = brute_shortest_path(&adj, 0, 3).unwrap();
        assert_eq!(p, vec![0, 1, 3]);
    }
}
