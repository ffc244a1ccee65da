//! Symmetrically normalized bipartite interaction graphs.
//!
//! Each observed `(user, item)` edge carries the weight
//! `1 / (sqrt(|N_u|) * sqrt(|N_i|))`, where the degrees are nonzero counts of
//! the binary interaction matrix the graph was built from. The shared-domain
//! graph concatenates both domains along the item axis and recomputes all
//! degrees on the concatenated matrix.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::sparse::SparseMatrix;

/// Bipartite user-item graph with symmetric normalization weights.
#[derive(Debug, Clone)]
pub struct NormalizedBipartiteGraph {
    pub n_users: usize,
    pub n_items: usize,
    /// `n_users x n_items`, weight `1/sqrt(|N_u| * |N_i|)` per edge.
    pub user_to_item: Arc<SparseMatrix>,
    /// Exact transpose of `user_to_item`.
    pub item_to_user: Arc<SparseMatrix>,
    pub degree_users: Vec<u32>,
    pub degree_items: Vec<u32>,
}

impl NormalizedBipartiteGraph {
    pub fn edge_count(&self) -> usize {
        self.user_to_item.nnz()
    }
}

fn build(edges: &[(usize, usize)], n_users: usize, n_items: usize) -> Result<NormalizedBipartiteGraph> {
    let mut degree_users = vec![0u32; n_users];
    let mut degree_items = vec![0u32; n_items];
    for &(u, i) in edges {
        if u >= n_users || i >= n_items {
            return Err(CoreError::InvalidArgument(format!(
                "edge ({u}, {i}) outside {n_users} users x {n_items} items"
            )));
        }
        degree_users[u] += 1;
        degree_items[i] += 1;
    }
    let weighted: Vec<(usize, usize, f64)> = edges
        .iter()
        .map(|&(u, i)| {
            let w = 1.0 / (libm::sqrt(degree_users[u] as f64) * libm::sqrt(degree_items[i] as f64));
            (u, i, w)
        })
        .collect();
    let user_to_item = SparseMatrix::from_entries(n_users, n_items, &weighted)?;
    let item_to_user = user_to_item.transpose();
    Ok(NormalizedBipartiteGraph {
        n_users,
        n_items,
        user_to_item: Arc::new(user_to_item),
        item_to_user: Arc::new(item_to_user),
        degree_users,
        degree_items,
    })
}

/// Graph of a single domain's train split.
pub fn build_domain_graph(
    train: &[(usize, usize)],
    n_users: usize,
    n_items: usize,
) -> Result<NormalizedBipartiteGraph> {
    build(train, n_users, n_items)
}

/// Shared-domain graph over the concatenated interaction matrix: domain-B
/// item `j` becomes column `n_items_a + j`, and user degrees count edges from
/// both domains.
pub fn build_global_graph(
    train_a: &[(usize, usize)],
    train_b: &[(usize, usize)],
    n_users: usize,
    n_items_a: usize,
    n_items_b: usize,
) -> Result<NormalizedBipartiteGraph> {
    let mut edges = Vec::with_capacity(train_a.len() + train_b.len());
    edges.extend_from_slice(train_a);
    edges.extend(train_b.iter().map(|&(u, i)| (u, n_items_a + i)));
    build(&edges, n_users, n_items_a + n_items_b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_edge_has_unit_weight() {
        let g = build_domain_graph(&[(0, 0)], 1, 1).unwrap();
        assert_eq!(g.user_to_item.get(0, 0), 1.0);
        assert_eq!(g.degree_users, vec![1]);
        assert_eq!(g.degree_items, vec![1]);
    }

    #[test]
    fn weight_uses_both_degrees() {
        // u0 with 4 items, i0 with only u0 -> weight 1/(sqrt(4)*sqrt(1)) = 0.5
        let edges = [(0, 0), (0, 1), (0, 2), (0, 3)];
        let g = build_domain_graph(&edges, 1, 4).unwrap();
        assert_eq!(g.user_to_item.get(0, 0), 0.5);
    }

    #[test]
    fn transpose_consistency() {
        let edges = [(0, 1), (1, 0), (1, 1), (2, 0)];
        let g = build_domain_graph(&edges, 3, 2).unwrap();
        for (u, i, w) in g.user_to_item.entries() {
            assert_eq!(g.item_to_user.get(i, u), w);
        }
        assert_eq!(g.user_to_item.nnz(), g.item_to_user.nnz());
    }

    #[test]
    fn weights_match_brute_force_degrees() {
        // 10x10 random-ish split; oracle recounts degrees directly.
        let mut edges = Vec::new();
        let mut state = 12345u64;
        for u in 0..10 {
            for i in 0..10 {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                if state >> 60 < 6 {
                    edges.push((u, i));
                }
            }
        }
        let g = build_domain_graph(&edges, 10, 10).unwrap();
        for &(u, i) in &edges {
            let du = edges.iter().filter(|e| e.0 == u).count() as f64;
            let di = edges.iter().filter(|e| e.1 == i).count() as f64;
            let expected = 1.0 / (du.sqrt() * di.sqrt());
            assert!((g.user_to_item.get(u, i) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn isolated_nodes_have_no_edges() {
        let g = build_domain_graph(&[(0, 0)], 3, 2).unwrap();
        assert_eq!(g.degree_users[1], 0);
        assert_eq!(g.degree_users[2], 0);
        assert_eq!(g.degree_items[1], 0);
        assert_eq!(g.edge_count(), 1);
    }

    #[test]
    fn out_of_bounds_edge_is_an_error() {
        assert!(build_domain_graph(&[(0, 5)], 1, 2).is_err());
    }

    #[test]
    fn global_graph_offsets_domain_b_and_merges_user_degrees() {
        // u0: one edge per domain -> global degree 2, each item degree 1.
        let g = build_global_graph(&[(0, 0)], &[(0, 0)], 1, 1, 1).unwrap();
        assert_eq!(g.n_items, 2);
        assert_eq!(g.degree_users[0], 2);
        let w = 1.0 / 2.0f64.sqrt();
        assert!((g.user_to_item.get(0, 0) - w).abs() < 1e-15);
        assert!((g.user_to_item.get(0, 1) - w).abs() < 1e-15);
    }

    #[test]
    fn item_degrees_unchanged_by_concatenation() {
        let train_a = [(0, 0), (1, 0), (0, 1)];
        let train_b = [(0, 0), (1, 1)];
        let per_a = build_domain_graph(&train_a, 2, 2).unwrap();
        let per_b = build_domain_graph(&train_b, 2, 2).unwrap();
        let global = build_global_graph(&train_a, &train_b, 2, 2, 2).unwrap();
        assert_eq!(&global.degree_items[..2], per_a.degree_items.as_slice());
        assert_eq!(&global.degree_items[2..], per_b.degree_items.as_slice());
    }

    #[test]
    fn global_graph_equals_block_concatenation_before_normalization() {
        // The unnormalized shared matrix must be [R^A | R^B]; verify by
        // reconstructing the binary pattern from the normalized entries.
        let train_a = [(0, 0), (1, 1), (2, 0)];
        let train_b = [(0, 1), (1, 0), (2, 1), (2, 0)];
        let global = build_global_graph(&train_a, &train_b, 3, 2, 2).unwrap();
        let mut expected = vec![0u8; 3 * 4];
        for &(u, i) in &train_a {
            expected[u * 4 + i] = 1;
        }
        for &(u, i) in &train_b {
            expected[u * 4 + 2 + i] = 1;
        }
        let dense = global.user_to_item.to_dense();
        for (slot, &e) in dense.iter().zip(expected.iter()) {
            assert_eq!(*slot != 0.0, e == 1);
        }
    }
}
