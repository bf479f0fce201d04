//! Directed computational graph substrate.
//!
//! Both the base network and the vesicle population live on the same graph:
//! nodes are computational modules (one per layer by default, one per neuron
//! in the spiking overlay), edges are information flow. The graph is immutable
//! after construction.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{NvError, Result};

/// Dense node index in `[0, |V|)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub usize);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug)]
pub struct Graph {
    num_nodes: usize,
    /// Sorted out-neighbor lists.
    out_edges: Vec<Vec<usize>>,
    /// Sorted in-neighbor lists (for undirected traversals).
    in_edges: Vec<Vec<usize>>,
    layer_of: Vec<usize>,
}

impl Graph {
    /// Build a graph from an explicit edge list and layer assignment.
    ///
    /// Self-loops are rejected unless `allow_self_loops` is set. Terminal
    /// nodes (no outgoing edges) are permitted; migration treats them as
    /// having an implicit self-loop.
    pub fn new(
        num_nodes: usize,
        edges: &[(usize, usize)],
        layer_of: Vec<usize>,
        allow_self_loops: bool,
    ) -> Result<Self> {
        if layer_of.len() != num_nodes {
            return Err(NvError::Config {
                path: "graph.layers".into(),
                message: format!(
                    "expected {} layer entries, got {}",
                    num_nodes,
                    layer_of.len()
                ),
            });
        }
        let mut out_sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); num_nodes];
        let mut in_sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); num_nodes];
        for &(u, v) in edges {
            if u >= num_nodes {
                return Err(NvError::NodeOutOfRange {
                    index: u,
                    num_nodes,
                });
            }
            if v >= num_nodes {
                return Err(NvError::NodeOutOfRange {
                    index: v,
                    num_nodes,
                });
            }
            if u == v && !allow_self_loops {
                return Err(NvError::Config {
                    path: "graph.edges".into(),
                    message: format!("self-loop at node {u} (enable graph.allow_self_loops)"),
                });
            }
            out_sets[u].insert(v);
            in_sets[v].insert(u);
        }
        Ok(Graph {
            num_nodes,
            out_edges: out_sets
                .into_iter()
                .map(|s| s.into_iter().collect())
                .collect(),
            in_edges: in_sets
                .into_iter()
                .map(|s| s.into_iter().collect())
                .collect(),
            layer_of,
        })
    }

    /// Chain `0 -> 1 -> ... -> n-1`, node `i` in layer `i`.
    pub fn chain(num_nodes: usize) -> Self {
        let edges: Vec<(usize, usize)> = (0..num_nodes.saturating_sub(1))
            .map(|i| (i, i + 1))
            .collect();
        Graph::new(num_nodes, &edges, (0..num_nodes).collect(), false)
            .expect("chain graph is valid")
    }

    /// Fully connected digraph without self-loops, all nodes in layer 0.
    pub fn complete(num_nodes: usize) -> Self {
        let mut edges = Vec::new();
        for u in 0..num_nodes {
            for v in 0..num_nodes {
                if u != v {
                    edges.push((u, v));
                }
            }
        }
        Graph::new(num_nodes, &edges, vec![0; num_nodes], false).expect("complete graph is valid")
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn contains(&self, node: NodeId) -> bool {
        node.0 < self.num_nodes
    }

    pub fn layer_of(&self, node: NodeId) -> usize {
        self.layer_of[node.0]
    }

    pub fn has_edge(&self, u: NodeId, v: NodeId) -> bool {
        self.out_edges[u.0].binary_search(&v.0).is_ok()
    }

    /// Terminal nodes have no outgoing edges; migration routes them to self.
    pub fn is_terminal(&self, u: NodeId) -> bool {
        self.out_edges[u.0].is_empty()
    }

    /// Out-neighbors of `u`, sorted ascending by index.
    pub fn neighbors_out(&self, u: NodeId) -> Vec<NodeId> {
        self.out_edges[u.0].iter().map(|&v| NodeId(v)).collect()
    }

    /// Nodes a vesicle at `u` may move to: out-neighbors, or `{u}` itself at
    /// terminals. Sorted ascending.
    pub fn migration_support(&self, u: NodeId) -> Vec<NodeId> {
        if self.is_terminal(u) {
            vec![u]
        } else {
            self.neighbors_out(u)
        }
    }

    /// Dense boolean adjacency matrix: `mask[i][j]` iff edge `(i, j)` exists.
    pub fn adjacency_mask(&self) -> Vec<Vec<bool>> {
        let mut mask = vec![vec![false; self.num_nodes]; self.num_nodes];
        for (u, outs) in self.out_edges.iter().enumerate() {
            for &v in outs {
                mask[u][v] = true;
            }
        }
        mask
    }

    /// Nodes within `radius` undirected hops of either endpoint of the
    /// synapse `(j, i)` (pre `j`, post `i`), always including both endpoints.
    pub fn synapse_neighborhood(
        &self,
        i: NodeId,
        j: NodeId,
        radius: usize,
    ) -> Result<BTreeSet<NodeId>> {
        for node in [i, j] {
            if !self.contains(node) {
                return Err(NvError::NodeOutOfRange {
                    index: node.0,
                    num_nodes: self.num_nodes,
                });
            }
        }
        let mut seen = BTreeSet::new();
        let mut frontier = vec![i.0, j.0];
        seen.insert(i.0);
        seen.insert(j.0);
        for _ in 0..radius {
            let mut next = Vec::new();
            for &u in &frontier {
                for &v in self.out_edges[u].iter().chain(self.in_edges[u].iter()) {
                    if seen.insert(v) {
                        next.push(v);
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            frontier = next;
        }
        Ok(seen.into_iter().map(NodeId).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn chain_neighbors() {
        let g = Graph::chain(3);
        assert_eq!(g.neighbors_out(NodeId(1)), vec![NodeId(2)]);
        assert_eq!(g.neighbors_out(NodeId(2)), vec![]);
        assert!(g.is_terminal(NodeId(2)));
        assert_eq!(g.migration_support(NodeId(2)), vec![NodeId(2)]);
    }

    #[test]
    fn diamond_neighbors_sorted() {
        let g = Graph::new(3, &[(0, 2), (0, 1)], vec![0, 1, 1], false).unwrap();
        assert_eq!(g.neighbors_out(NodeId(0)), vec![NodeId(1), NodeId(2)]);
    }

    #[test]
    fn adjacency_mask_chain() {
        let g = Graph::new(2, &[(0, 1)], vec![0, 1], false).unwrap();
        let mask = g.adjacency_mask();
        assert!(mask[0][1]);
        assert!(!mask[1][0]);
        assert!(!mask[0][0]);
    }

    #[test]
    fn adjacency_mask_empty_and_complete() {
        let g = Graph::new(3, &[], vec![0, 0, 0], false).unwrap();
        assert!(g.adjacency_mask().iter().flatten().all(|&b| !b));

        let k3 = Graph::complete(3);
        let count = k3.adjacency_mask().iter().flatten().filter(|&&b| b).count();
        assert_eq!(count, 6);
    }

    #[test]
    fn self_loop_rejected_unless_enabled() {
        assert!(Graph::new(2, &[(0, 0)], vec![0, 0], false).is_err());
        assert!(Graph::new(2, &[(0, 0)], vec![0, 0], true).is_ok());
    }

    #[test]
    fn neighborhood_radius_zero_is_endpoints() {
        let g = Graph::chain(4);
        let n = g.synapse_neighborhood(NodeId(2), NodeId(1), 0).unwrap();
        assert_eq!(
            n.into_iter().collect::<Vec<_>>(),
            vec![NodeId(1), NodeId(2)]
        );
    }

    #[test]
    fn neighborhood_radius_one_on_chain() {
        // Brute-force BFS oracle for the chain 0 -> 1 -> 2: one hop around
        // {0, 1} reaches every node.
        let g = Graph::chain(3);
        let n = g.synapse_neighborhood(NodeId(1), NodeId(0), 1).unwrap();
        assert_eq!(
            n.into_iter().collect::<Vec<_>>(),
            vec![NodeId(0), NodeId(1), NodeId(2)]
        );
    }

    #[test]
    fn neighborhood_saturates_component() {
        let g = Graph::chain(6);
        let n = g.synapse_neighborhood(NodeId(1), NodeId(0), 6).unwrap();
        assert_eq!(n.len(), 6);
    }

    #[test]
    fn neighborhood_out_of_range_errors() {
        let g = Graph::chain(3);
        assert!(g.synapse_neighborhood(NodeId(3), NodeId(0), 1).is_err());
    }

    fn arb_graph() -> impl Strategy<Value = Graph> {
        (2usize..12).prop_flat_map(|n| {
            proptest::collection::vec((0..n, 0..n), 0..n * 2).prop_map(move |mut edges| {
                edges.retain(|(u, v)| u != v);
                Graph::new(n, &edges, vec![0; n], false).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn neighbors_consistent_with_mask(g in arb_graph()) {
            let mask = g.adjacency_mask();
            for u in 0..g.num_nodes() {
                let outs = g.neighbors_out(NodeId(u));
                for v in 0..g.num_nodes() {
                    let listed = outs.contains(&NodeId(v));
                    prop_assert_eq!(listed, mask[u][v]);
                }
                let mut sorted = outs.clone();
                sorted.sort();
                prop_assert_eq!(&sorted, &outs);
            }
        }

        #[test]
        fn neighborhood_monotone_in_radius(g in arb_graph(), r in 0usize..4) {
            let i = NodeId(0);
            let j = NodeId(1);
            let small = g.synapse_neighborhood(i, j, r).unwrap();
            let big = g.synapse_neighborhood(i, j, r + 1).unwrap();
            prop_assert!(small.is_subset(&big));
        }

        #[test]
        fn deterministic_iteration(g in arb_graph()) {
            for u in 0..g.num_nodes() {
                prop_assert_eq!(g.neighbors_out(NodeId(u)), g.neighbors_out(NodeId(u)));
            }
        }
    }
}
