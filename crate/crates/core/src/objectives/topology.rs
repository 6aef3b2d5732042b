//! Coordinate kNN graphs and exact-distance hop shells.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::numkernel::Tensor2;

/// Symmetric 0/1 kNN adjacency over `coords`.
///
/// Each spot links to its `k` nearest other spots, ranked by (distance, index);
/// the directed graph is then symmetrized by logical OR. `k ≥ B` is clipped to
/// `B − 1`. Returns the adjacency and the `k` actually used.
pub fn build_knn_graph(coords: &[[f64; 2]], k: usize) -> Result<(Tensor2<f64>, usize)> {
    let b = coords.len();
    if b < 2 {
        return Err(Error::InvalidInput(format!("kNN graph needs at least 2 spots, got {b}")));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k_knn must be at least 1".into()));
    }
    let k = if k >= b {
        log::warn!("k_knn={k} with {b} spots; clipping to {}", b - 1);
        b - 1
    } else {
        k
    };
    let mut adj = Tensor2::zeros(b, b);
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(b);
    for i in 0..b {
        order.clear();
        for (j, c) in coords.iter().enumerate() {
            if j != i {
                let d = (c[0] - coords[i][0]).hypot(c[1] - coords[i][1]);
                order.push((d, j));
            }
        }
        order.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        for &(_, j) in &order[..k] {
            adj.set(i, j, 1.0);
            adj.set(j, i, 1.0);
        }
    }
    Ok((adj, k))
}

/// Hop distances from `src` by breadth-first search; `usize::MAX` when unreachable.
fn bfs(adj: &Tensor2<f64>, src: usize) -> Vec<usize> {
    let n = adj.rows();
    let mut dist = vec![usize::MAX; n];
    dist[src] = 0;
    let mut queue = VecDeque::from([src]);
    while let Some(u) = queue.pop_front() {
        for (v, &a) in adj.row(u).iter().enumerate() {
            if a > 0.5 && dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    dist
}

/// `A^(h)[i,j] = 1` iff the shortest path between `i` and `j` has exactly `h` edges,
/// for `h = 1..=h_hop`.
pub fn multihop(a1: &Tensor2<f64>, h_hop: usize) -> Result<Vec<Tensor2<f64>>> {
    let n = a1.rows();
    if a1.cols() != n {
        return Err(Error::shape("multihop", format!("adjacency is {:?}", a1.shape())));
    }
    if h_hop == 0 {
        return Err(Error::InvalidConfig("h_hop must be at least 1".into()));
    }
    let mut hops = vec![Tensor2::zeros(n, n); h_hop];
    for i in 0..n {
        for (j, d) in bfs(a1, i).into_iter().enumerate() {
            if (1..=h_hop).contains(&d) {
                hops[d - 1].set(i, j, 1.0);
            }
        }
    }
    Ok(hops)
}

/// Multi-hop topology prior of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TopoPrior {
    pub a_hops: Vec<Tensor2<f64>>,
    /// `Σ_h α_h A^(h)`
    pub a_topo: Tensor2<f64>,
}

impl TopoPrior {
    /// Builds the prior from raw coordinates. Batches with fewer than two spots
    /// get an all-zero prior.
    pub fn from_coords(coords: &[[f64; 2]], k: usize, alpha: &[f64]) -> Result<Self> {
        let b = coords.len();
        if b < 2 {
            return Ok(Self {
                a_hops: vec![Tensor2::zeros(b, b); alpha.len()],
                a_topo: Tensor2::zeros(b, b),
            });
        }
        let (a1, _) = build_knn_graph(coords, k)?;
        Self::from_adjacency(&a1, alpha)
    }

    pub fn from_adjacency(a1: &Tensor2<f64>, alpha: &[f64]) -> Result<Self> {
        let a_hops = multihop(a1, alpha.len())?;
        let mut a_topo = Tensor2::zeros(a1.rows(), a1.cols());
        for (a, &w) in a_hops.iter().zip(alpha) {
            a_topo = a_topo.zip_map(a, |t, x| t + w * x);
        }
        Ok(Self { a_hops, a_topo })
    }
}
