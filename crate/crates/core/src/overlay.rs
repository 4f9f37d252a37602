//! Overlay graph statistics: average shortest path and clustering.

use std::collections::{BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Undirected simple graph on nodes `0..n`.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlayGraph {
    adj: Vec<BTreeSet<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlayStats {
    pub avg_path_length: f64,
    pub clustering: f64,
    /// Nodes in the component the path length was measured on.
    pub component_size: usize,
    pub disconnected: bool,
    pub edges: usize,
}

impl OverlayGraph {
    pub fn new(n: usize) -> Self {
        OverlayGraph {
            adj: vec![BTreeSet::new(); n],
        }
    }

    pub fn add_edge(&mut self, a: usize, b: usize) {
        if a != b {
            self.adj[a].insert(b);
            self.adj[b].insert(a);
        }
    }

    pub fn len(&self) -> usize {
        self.adj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adj.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(|s| s.len()).sum::<usize>() / 2
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adj[v].len()
    }

    fn bfs(&self, src: usize, dist: &mut [u32]) {
        dist.fill(u32::MAX);
        dist[src] = 0;
        let mut q = VecDeque::from([src]);
        while let Some(u) = q.pop_front() {
            for &v in &self.adj[u] {
                if dist[v] == u32::MAX {
                    dist[v] = dist[u] + 1;
                    q.push_back(v);
                }
            }
        }
    }

    /// Largest connected component, ties to the one with the lowest node.
    pub fn largest_component(&self) -> Vec<usize> {
        let mut seen = vec![false; self.len()];
        let mut best: Vec<usize> = Vec::new();
        for s in 0..self.len() {
            if seen[s] {
                continue;
            }
            let mut comp = vec![s];
            seen[s] = true;
            let mut i = 0;
            while i < comp.len() {
                let u = comp[i];
                i += 1;
                for &v in &self.adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        comp.push(v);
                    }
                }
            }
            if comp.len() > best.len() {
                best = comp;
            }
        }
        best.sort_unstable();
        best
    }

    /// Mean local clustering coefficient; nodes with degree < 2 count as 0.
    pub fn clustering(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let mut total = 0.0;
        for v in 0..self.len() {
            let nb: Vec<usize> = self.adj[v].iter().copied().collect();
            let k = nb.len();
            if k < 2 {
                continue;
            }
            let mut links = 0usize;
            for (i, &a) in nb.iter().enumerate() {
                for &b in &nb[i + 1..] {
                    if self.adj[a].contains(&b) {
                        links += 1;
                    }
                }
            }
            total += 2.0 * links as f64 / (k * (k - 1)) as f64;
        }
        total / self.len() as f64
    }

    /// Mean shortest path over the largest component: all pairs when it has
    /// at most `all_pairs_below` nodes, otherwise `samples` random pairs.
    pub fn avg_path_length(&self, samples: usize, all_pairs_below: usize, seed: u64) -> (f64, usize) {
        let comp = self.largest_component();
        if comp.len() < 2 {
            return (0.0, comp.len());
        }
        let mut dist = vec![u32::MAX; self.len()];
        let mut sum = 0u64;
        let mut count = 0u64;
        if comp.len() <= all_pairs_below {
            for &s in &comp {
                self.bfs(s, &mut dist);
                for &t in &comp {
                    if t > s {
                        sum += dist[t] as u64;
                        count += 1;
                    }
                }
            }
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(samples);
            while pairs.len() < samples {
                let a = comp[rng.random_range(0..comp.len())];
                let b = comp[rng.random_range(0..comp.len())];
                if a != b {
                    pairs.push((a, b));
                }
            }
            // Group by source so each BFS serves several pairs.
            pairs.sort_unstable();
            let mut last = usize::MAX;
            for (a, b) in pairs {
                if a != last {
                    self.bfs(a, &mut dist);
                    last = a;
                }
                sum += dist[b] as u64;
                count += 1;
            }
        }
        (sum as f64 / count as f64, comp.len())
    }

    pub fn stats(&self, samples: usize, all_pairs_below: usize, seed: u64) -> OverlayStats {
        let (avg_path_length, component_size) = self.avg_path_length(samples, all_pairs_below, seed);
        OverlayStats {
            avg_path_length,
            clustering: self.clustering(),
            component_size,
            disconnected: component_size < self.len(),
            edges: self.edge_count(),
        }
    }
}
