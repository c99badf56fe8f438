//! Areal adjacency, edge states over the random edge set, and the nested
//! candidate sequence of neighbourhood matrices.
//!
//! Units are indexed from zero internally; the CSV formats use one-based
//! indices and are converted in [`crate::io`]. The extended neighbourhood
//! matrix has one extra node (the global random effect) at index `n`.

use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// The fixed geography: `n` units and the symmetric binary border relation.
///
/// Edges are unordered pairs stored as `(a, b)` with `a < b`, sorted
/// lexicographically. That order is the canonical edge index used everywhere.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyStructure {
    n: usize,
    edges: Vec<(usize, usize)>,
    incident: Vec<Vec<(usize, usize)>>,
}

impl AdjacencyStructure {
    /// Builds the structure from zero-based unit pairs in either orientation.
    /// Duplicates are merged.
    pub fn new(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Invalid("adjacency needs at least one unit".into()));
        }
        let mut edges = Vec::new();
        for (u, v) in pairs {
            for idx in [u, v] {
                if idx >= n {
                    return Err(Error::IndexOutOfRange { index: idx + 1, n });
                }
            }
            if u == v {
                return Err(Error::SelfLoop { unit: u + 1 });
            }
            edges.push((u.min(v), u.max(v)));
        }
        edges.sort_unstable();
        edges.dedup();

        let mut incident = vec![Vec::new(); n];
        for (e, &(a, b)) in edges.iter().enumerate() {
            incident[a].push((b, e));
            incident[b].push((a, e));
        }
        Ok(Self { n, edges, incident })
    }

    /// Rook-contiguity lattice with `rows * cols` units numbered row-major.
    pub fn lattice(rows: usize, cols: usize) -> Result<Self> {
        let mut pairs = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let k = r * cols + c;
                if c + 1 < cols {
                    pairs.push((k, k + 1));
                }
                if r + 1 < rows {
                    pairs.push((k, k + cols));
                }
            }
        }
        Self::new(rows * cols, pairs)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of edges, `1ᵀW1 / 2`.
    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge(&self, e: usize) -> (usize, usize) {
        self.edges[e]
    }

    /// `(neighbour, edge index)` pairs of unit `k`.
    pub fn incident(&self, k: usize) -> &[(usize, usize)] {
        &self.incident[k]
    }

    pub fn degree(&self, k: usize) -> usize {
        self.incident[k].len()
    }

    pub fn edge_index(&self, u: usize, v: usize) -> Option<usize> {
        let key = (u.min(v), u.max(v));
        self.edges.binary_search(&key).ok()
    }

    /// Connected-component label per unit, labels in order of first appearance.
    pub fn components(&self) -> (Vec<usize>, usize) {
        let mut label = vec![usize::MAX; self.n];
        let mut count = 0;
        let mut stack = Vec::new();
        for start in 0..self.n {
            if label[start] != usize::MAX {
                continue;
            }
            label[start] = count;
            stack.push(start);
            while let Some(u) = stack.pop() {
                for &(v, _) in &self.incident[u] {
                    if label[v] == usize::MAX {
                        label[v] = count;
                        stack.push(v);
                    }
                }
            }
            count += 1;
        }
        (label, count)
    }

    /// SHA-256 of the canonical edge list, used to tie persisted sequences to
    /// the geography they were elicited on.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.n as u64).to_le_bytes());
        for &(a, b) in &self.edges {
            hasher.update((a as u64).to_le_bytes());
            hasher.update((b as u64).to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

/// Builds an adjacency structure from one-based unit pairs.
pub fn build_adjacency(pairs: &[(usize, usize)], n: usize) -> Result<AdjacencyStructure> {
    let mut zero_based = Vec::with_capacity(pairs.len());
    for &(u, v) in pairs {
        for idx in [u, v] {
            if idx == 0 || idx > n {
                return Err(Error::IndexOutOfRange { index: idx, n });
            }
        }
        zero_based.push((u - 1, v - 1));
    }
    AdjacencyStructure::new(n, zero_based)
}

/// Which edges of the base geography are currently retained.
///
/// Per-unit counts of retained and removed edges are maintained alongside the
/// flags so that `w_k*` and the row sums are O(1).
#[derive(Debug, Clone)]
pub struct EdgeState<'a> {
    adj: &'a AdjacencyStructure,
    active: Vec<bool>,
    active_degree: Vec<usize>,
    removed_degree: Vec<usize>,
    n_active: usize,
}

impl<'a> EdgeState<'a> {
    pub fn full(adj: &'a AdjacencyStructure) -> Self {
        let active_degree = (0..adj.n()).map(|k| adj.degree(k)).collect();
        Self {
            adj,
            active: vec![true; adj.n_edges()],
            active_degree,
            removed_degree: vec![0; adj.n()],
            n_active: adj.n_edges(),
        }
    }

    pub fn empty(adj: &'a AdjacencyStructure) -> Self {
        let removed_degree = (0..adj.n()).map(|k| adj.degree(k)).collect();
        Self {
            adj,
            active: vec![false; adj.n_edges()],
            active_degree: vec![0; adj.n()],
            removed_degree,
            n_active: 0,
        }
    }

    pub fn from_active(adj: &'a AdjacencyStructure, active: Vec<bool>) -> Result<Self> {
        if active.len() != adj.n_edges() {
            return Err(Error::DimensionMismatch {
                expected: adj.n_edges(),
                got: active.len(),
            });
        }
        let mut state = Self::empty(adj);
        for (e, &on) in active.iter().enumerate() {
            if on {
                state.set_active(e, true);
            }
        }
        Ok(state)
    }

    pub fn adjacency(&self) -> &'a AdjacencyStructure {
        self.adj
    }

    pub fn n(&self) -> usize {
        self.adj.n()
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn is_active(&self, e: usize) -> bool {
        self.active[e]
    }

    pub fn n_active(&self) -> usize {
        self.n_active
    }

    pub fn set_active(&mut self, e: usize, on: bool) {
        if self.active[e] == on {
            return;
        }
        self.active[e] = on;
        let (a, b) = self.adj.edge(e);
        for k in [a, b] {
            if on {
                self.active_degree[k] += 1;
                self.removed_degree[k] -= 1;
            } else {
                self.active_degree[k] -= 1;
                self.removed_degree[k] += 1;
            }
        }
        if on {
            self.n_active += 1;
        } else {
            self.n_active -= 1;
        }
    }

    /// Number of retained edges at unit `k`, `Σᵢ w_ki`.
    pub fn active_degree(&self, k: usize) -> usize {
        self.active_degree[k]
    }

    /// `w_k*`: whether unit `k` has lost at least one of its edges.
    pub fn global_link(&self, k: usize) -> bool {
        self.removed_degree[k] > 0
    }

    pub fn n_global_links(&self) -> usize {
        self.removed_degree.iter().filter(|&&d| d > 0).count()
    }

    /// Row sums of the extended matrix: `Σᵢ w_ki + w_k*` for each unit, then
    /// `Σᵢ w_i*` for the global node.
    pub fn extended_row_sums(&self) -> Vec<usize> {
        let mut sums: Vec<usize> = (0..self.n())
            .map(|k| self.active_degree[k] + usize::from(self.global_link(k)))
            .collect();
        sums.push(self.n_global_links());
        sums
    }
}

/// Free-function form of [`EdgeState::extended_row_sums`].
pub fn extended_row_sums(state: &EdgeState<'_>) -> Vec<usize> {
    state.extended_row_sums()
}

/// Cached `ln|Q(W̃⁽ʲ⁾, ε)|` for every candidate at one ε.
#[derive(Debug, Clone, PartialEq)]
pub struct LogDetCache {
    pub epsilon: f64,
    /// Full `(n+1)`-dimensional precision.
    pub full: Vec<f64>,
    /// Leading `n × n` block.
    pub sub: Vec<f64>,
}

/// The ordered family `W̃⁽⁰⁾, …, W̃⁽ᴺ⁾` stored as an edge-removal order.
///
/// Candidate `j` retains the last `j` entries of `removal_order`; moving from
/// `j` to `j - 1` removes `removal_order[N - j]`.
#[derive(Debug, Clone)]
pub struct CandidateSequence {
    base: Arc<AdjacencyStructure>,
    removal_order: Vec<usize>,
    position: Vec<usize>,
    first_removal: Vec<usize>,
    sorted_first_removal: Vec<usize>,
    logdet: Option<LogDetCache>,
}

impl CandidateSequence {
    pub fn new(base: Arc<AdjacencyStructure>, removal_order: Vec<usize>) -> Result<Self> {
        let n_edges = base.n_edges();
        if removal_order.len() != n_edges {
            return Err(Error::DimensionMismatch {
                expected: n_edges,
                got: removal_order.len(),
            });
        }
        let mut position = vec![usize::MAX; n_edges];
        for (pos, &e) in removal_order.iter().enumerate() {
            if e >= n_edges || position[e] != usize::MAX {
                return Err(Error::Invalid(format!(
                    "removal order is not a permutation of 0..{n_edges} (entry {e})"
                )));
            }
            position[e] = pos;
        }
        let first_removal: Vec<usize> = (0..base.n())
            .map(|k| {
                base.incident(k)
                    .iter()
                    .map(|&(_, e)| position[e])
                    .min()
                    .unwrap_or(usize::MAX)
            })
            .collect();
        let mut sorted_first_removal = first_removal.clone();
        sorted_first_removal.sort_unstable();
        Ok(Self {
            base,
            removal_order,
            position,
            first_removal,
            sorted_first_removal,
            logdet: None,
        })
    }

    pub fn base(&self) -> &AdjacencyStructure {
        &self.base
    }

    pub fn base_arc(&self) -> Arc<AdjacencyStructure> {
        Arc::clone(&self.base)
    }

    pub fn n_edges(&self) -> usize {
        self.removal_order.len()
    }

    pub fn removal_order(&self) -> &[usize] {
        &self.removal_order
    }

    fn check_index(&self, j: usize) -> Result<()> {
        if j > self.n_edges() {
            return Err(Error::IndexOutOfRange {
                index: j,
                n: self.n_edges(),
            });
        }
        Ok(())
    }

    /// Edge state of candidate `j` (exactly `j` edges retained).
    pub fn candidate(&self, j: usize) -> Result<EdgeState<'_>> {
        self.check_index(j)?;
        let cut = self.n_edges() - j;
        let active = self.position.iter().map(|&p| p >= cut).collect();
        EdgeState::from_active(&self.base, active)
    }

    /// Whether edge `e` is retained in candidate `j`.
    #[inline]
    pub fn is_active(&self, e: usize, j: usize) -> bool {
        self.position[e] + j >= self.n_edges()
    }

    /// `w_k*` in candidate `j`.
    #[inline]
    pub fn global_link(&self, k: usize, j: usize) -> bool {
        let first = self.first_removal[k];
        first != usize::MAX && first + j < self.n_edges()
    }

    /// `Σₖ w_k*` in candidate `j`.
    pub fn n_global_links(&self, j: usize) -> usize {
        let cut = self.n_edges() - j;
        self.sorted_first_removal.partition_point(|&p| p < cut)
    }

    /// Edge removed when moving from candidate `j` to `j - 1`.
    pub fn removed_edge(&self, j: usize) -> Result<usize> {
        if j == 0 {
            return Err(Error::IndexOutOfRange { index: 0, n: self.n_edges() });
        }
        self.check_index(j)?;
        Ok(self.removal_order[self.n_edges() - j])
    }

    pub fn logdet_cache(&self) -> Option<&LogDetCache> {
        self.logdet.as_ref()
    }

    pub fn set_logdet_cache(&mut self, cache: LogDetCache) -> Result<()> {
        let expected = self.n_edges() + 1;
        for got in [cache.full.len(), cache.sub.len()] {
            if got != expected {
                return Err(Error::DimensionMismatch { expected, got });
            }
        }
        self.logdet = Some(cache);
        Ok(())
    }

    /// Cached full log-determinant for candidate `j` at `epsilon`.
    pub fn cached_logdet(&self, j: usize, epsilon: f64) -> Result<f64> {
        match &self.logdet {
            Some(c) if c.epsilon == epsilon && j < c.full.len() => Ok(c.full[j]),
            _ => Err(Error::MissingLogDetCache),
        }
    }
}

/// Free-function form of [`CandidateSequence::candidate`].
pub fn candidate(seq: &CandidateSequence, j: usize) -> Result<EdgeState<'_>> {
    seq.candidate(j)
}
