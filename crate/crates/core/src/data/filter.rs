use std::collections::VecDeque;

use super::load::Dataset;
use super::{DataError, Result};

pub const FIVE_CORE: usize = 5;

/// Marks which edges of a bipartite multigraph survive repeated removal of
/// users and items with fewer than `k` edges.
pub fn k_core_edges(n_users: usize, n_items: usize, edges: &[(usize, usize)], k: usize) -> Vec<bool> {
    let mut alive = vec![true; edges.len()];
    let mut user_deg = vec![0usize; n_users];
    let mut item_deg = vec![0usize; n_items];
    let mut user_edges = vec![Vec::new(); n_users];
    let mut item_edges = vec![Vec::new(); n_items];
    for (e, &(u, i)) in edges.iter().enumerate() {
        user_deg[u] += 1;
        item_deg[i] += 1;
        user_edges[u].push(e);
        item_edges[i].push(e);
    }
    // Node ids: users first, then items offset by n_users.
    let mut removed = vec![false; n_users + n_items];
    let mut queue: VecDeque<usize> = (0..n_users)
        .filter(|&u| user_deg[u] < k)
        .chain((0..n_items).filter(|&i| item_deg[i] < k).map(|i| i + n_users))
        .collect();
    while let Some(node) = queue.pop_front() {
        if removed[node] {
            continue;
        }
        removed[node] = true;
        let incident = if node < n_users {
            &user_edges[node]
        } else {
            &item_edges[node - n_users]
        };
        for &e in incident {
            if !alive[e] {
                continue;
            }
            alive[e] = false;
            let (u, i) = edges[e];
            user_deg[u] -= 1;
            item_deg[i] -= 1;
            if node < n_users {
                if item_deg[i] + 1 == k {
                    queue.push_back(i + n_users);
                }
            } else if user_deg[u] + 1 == k {
                queue.push_back(u);
            }
        }
    }
    alive
}

/// Keeps the largest subset in which every user and every item has at
/// least `k` interactions; items are reindexed.
pub fn k_core(ds: &Dataset, k: usize) -> Result<Dataset> {
    let edges: Vec<(usize, usize)> = ds
        .users
        .iter()
        .enumerate()
        .flat_map(|(u, h)| h.events.iter().map(move |e| (u, e.item)))
        .collect();
    let alive = k_core_edges(ds.users.len(), ds.items.len(), &edges, k);
    let mut keep = Vec::with_capacity(ds.users.len());
    let mut at = 0;
    for h in &ds.users {
        keep.push(alive[at..at + h.events.len()].to_vec());
        at += h.events.len();
    }
    let out = ds.retain(&keep);
    if out.users.is_empty() {
        return Err(DataError::Empty("k-core filtering"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Recomputes all degrees from scratch each round and drops every
    /// deficient node at once.
    fn brute_force(n_users: usize, n_items: usize, edges: &[(usize, usize)], k: usize) -> Vec<bool> {
        let mut alive = vec![true; edges.len()];
        loop {
            let mut ud = vec![0; n_users];
            let mut id = vec![0; n_items];
            for (e, &(u, i)) in edges.iter().enumerate() {
                if alive[e] {
                    ud[u] += 1;
                    id[i] += 1;
                }
            }
            let mut changed = false;
            for (e, &(u, i)) in edges.iter().enumerate() {
                if alive[e] && (ud[u] < k || id[i] < k) {
                    alive[e] = false;
                    changed = true;
                }
            }
            if !changed {
                return alive;
            }
        }
    }

    fn random_graph(rng: &mut ChaCha8Rng, n_edges: usize) -> (usize, usize, Vec<(usize, usize)>) {
        let nu = rng.random_range(3..10);
        let ni = rng.random_range(3..10);
        let edges = (0..n_edges)
            .map(|_| (rng.random_range(0..nu), rng.random_range(0..ni)))
            .collect();
        (nu, ni, edges)
    }

    #[test]
    fn matches_brute_force_on_random_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n_edges = rng.random_range(20..80);
            let (nu, ni, edges) = random_graph(&mut rng, n_edges);
            for k in [2, 3, 5] {
                assert_eq!(k_core_edges(nu, ni, &edges, k), brute_force(nu, ni, &edges, k));
            }
        }
    }

    #[test]
    fn cascade_on_chain() {
        // Users 0..=4 each rate items 0..=4 (a 5-core); user 5 rates item 5
        // five times, but item 5 also needs a second user to stay.
        let mut edges = Vec::new();
        for u in 0..5 {
            for i in 0..5 {
                edges.push((u, i));
            }
        }
        for _ in 0..4 {
            edges.push((5, 5));
        }
        edges.push((5, 0));
        let alive = k_core_edges(6, 6, &edges, 5);
        assert_eq!(alive, brute_force(6, 6, &edges, 5));
        assert_eq!(alive.iter().filter(|&&a| a).count(), 25);
    }

    #[test]
    fn identity_when_already_dense() {
        let edges: Vec<(usize, usize)> = (0..6).flat_map(|u| (0..6).map(move |i| (u, i))).collect();
        assert!(k_core_edges(6, 6, &edges, 5).iter().all(|&a| a));
    }

    #[test]
    fn survivors_meet_degree_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (nu, ni, edges) = random_graph(&mut rng, 30);
            let alive = k_core_edges(nu, ni, &edges, FIVE_CORE);
            let mut ud = vec![0; nu];
            let mut id = vec![0; ni];
            for (e, &(u, i)) in edges.iter().enumerate() {
                if alive[e] {
                    ud[u] += 1;
                    id[i] += 1;
                }
            }
            assert!(ud.iter().chain(&id).all(|&d| d == 0 || d >= FIVE_CORE));
        }
    }
}
