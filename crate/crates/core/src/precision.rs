//! Sparse precision algebra for `Q(W̃, ε) = diag(W̃1) − W̃ + εI`.
//!
//! Factorisation uses an envelope (profile) Cholesky under a reverse
//! Cuthill-McKee ordering of the base geography. The ordering is computed once
//! per adjacency and, because the full graph plus a global row is a superset of
//! every candidate's sparsity pattern, reused for every candidate. The global
//! node is always ordered last so the leading `n` rows of the factor are the
//! Cholesky factor of the unit block `Q_{1:n}`.

use std::collections::VecDeque;
use std::ops::Deref;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{AdjacencyStructure, CandidateSequence, EdgeState, LogDetCache};

/// Symmetric sparse matrix stored as a diagonal plus symmetric adjacency lists.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSym {
    diag: Vec<f64>,
    off: Vec<Vec<(usize, f64)>>,
}

impl SparseSym {
    pub fn zeros(dim: usize) -> Self {
        Self {
            diag: vec![0.0; dim],
            off: vec![Vec::new(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn add_diag(&mut self, i: usize, value: f64) {
        self.diag[i] += value;
    }

    /// Adds `value` at `(i, j)` and `(j, i)`, `i != j`.
    pub fn add_offdiag(&mut self, i: usize, j: usize, value: f64) {
        debug_assert_ne!(i, j);
        for (row, col) in [(i, j), (j, i)] {
            match self.off[row].iter_mut().find(|(c, _)| *c == col) {
                Some(entry) => entry.1 += value,
                None => self.off[row].push((col, value)),
            }
        }
    }

    /// Off-diagonal entries of row `i` as `(column, value)`.
    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.off[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return self.diag[i];
        }
        self.off[i]
            .iter()
            .find(|(c, _)| *c == j)
            .map_or(0.0, |&(_, v)| v)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(v.len())?;
        Ok((0..self.dim())
            .map(|i| {
                self.diag[i] * v[i] + self.off[i].iter().map(|&(j, w)| w * v[j]).sum::<f64>()
            })
            .collect())
    }

    /// `uᵀ Q v`.
    pub fn bilinear(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        self.check_dim(u.len())?;
        let qv = self.matvec(v)?;
        Ok(u.iter().zip(&qv).map(|(a, b)| a * b).sum())
    }

    pub fn quad_form(&self, v: &[f64]) -> Result<f64> {
        self.bilinear(v, v)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(d, d, |i, j| self.get(i, j))
    }

    /// Copy without the last row and column.
    pub fn without_last(&self) -> SparseSym {
        let d = self.dim() - 1;
        SparseSym {
            diag: self.diag[..d].to_vec(),
            off: self.off[..d]
                .iter()
                .map(|row| row.iter().copied().filter(|&(c, _)| c < d).collect())
                .collect(),
        }
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got,
            });
        }
        Ok(())
    }
}

/// `Q(W̃, ε)` over the `n + 1` extended random effects; the global node is
/// index `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionMatrix {
    mat: SparseSym,
    epsilon: f64,
}

/// The unit block `Q(W̃, ε)_{1:n}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubPrecision {
    mat: SparseSym,
    epsilon: f64,
}

impl Deref for PrecisionMatrix {
    type Target = SparseSym;
    fn deref(&self) -> &SparseSym {
        &self.mat
    }
}

impl Deref for SubPrecision {
    type Target = SparseSym;
    fn deref(&self) -> &SparseSym {
        &self.mat
    }
}

impl PrecisionMatrix {
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn sub_block(&self) -> SubPrecision {
        SubPrecision {
            mat: self.mat.without_last(),
            epsilon: self.epsilon,
        }
    }

    pub fn into_inner(self) -> SparseSym {
        self.mat
    }
}

impl SubPrecision {
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn into_inner(self) -> SparseSym {
        self.mat
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::NonPositiveEpsilon(epsilon));
    }
    Ok(())
}

/// Builds `diag(W̃1) − W̃ + εI` for the given edge state.
pub fn build_precision(state: &EdgeState<'_>, epsilon: f64) -> Result<PrecisionMatrix> {
    check_epsilon(epsilon)?;
    let adj = state.adjacency();
    let n = adj.n();
    let mut mat = SparseSym::zeros(n + 1);
    let sums = state.extended_row_sums();
    for (i, &s) in sums.iter().enumerate() {
        mat.add_diag(i, s as f64 + epsilon);
    }
    for (e, &(a, b)) in adj.edges().iter().enumerate() {
        if state.is_active(e) {
            mat.add_offdiag(a, b, -1.0);
        }
    }
    for k in 0..n {
        if state.global_link(k) {
            mat.add_offdiag(k, n, -1.0);
        }
    }
    Ok(PrecisionMatrix { mat, epsilon })
}

/// Builds `Q(W̃, ε)_{1:n}` directly.
pub fn build_sub_precision(state: &EdgeState<'_>, epsilon: f64) -> Result<SubPrecision> {
    check_epsilon(epsilon)?;
    let adj = state.adjacency();
    let mut mat = SparseSym::zeros(adj.n());
    for k in 0..adj.n() {
        let d = state.active_degree(k) + usize::from(state.global_link(k));
        mat.add_diag(k, d as f64 + epsilon);
    }
    for (e, &(a, b)) in adj.edges().iter().enumerate() {
        if state.is_active(e) {
            mat.add_offdiag(a, b, -1.0);
        }
    }
    Ok(SubPrecision { mat, epsilon })
}

/// Symbolic envelope structure: a symmetric permutation and, for each permuted
/// row, the first column of its profile.
#[derive(Debug, Clone)]
pub struct EnvelopeOrdering {
    perm: Vec<usize>,
    iperm: Vec<usize>,
    first: Vec<usize>,
    row_start: Vec<usize>,
}

fn reverse_cuthill_mckee(neighbours: &[Vec<usize>]) -> Vec<usize> {
    let dim = neighbours.len();
    let degree: Vec<usize> = neighbours.iter().map(Vec::len).collect();
    let mut by_degree: Vec<usize> = (0..dim).collect();
    by_degree.sort_by_key(|&i| (degree[i], i));

    let mut visited = vec![false; dim];
    let mut order = Vec::with_capacity(dim);
    let mut queue = VecDeque::new();
    for &start in &by_degree {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        queue.push_back(start);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            let mut next: Vec<usize> = neighbours[u]
                .iter()
                .copied()
                .filter(|&v| !visited[v])
                .collect();
            next.sort_by_key(|&v| (degree[v], v));
            next.dedup();
            for v in next {
                visited[v] = true;
                queue.push_back(v);
            }
        }
    }
    order.reverse();
    order
}

impl EnvelopeOrdering {
    /// Ordering from an explicit sparsity pattern, with optional node forced
    /// to the end.
    fn from_parts(neighbours: &[Vec<usize>], order: Vec<usize>) -> Self {
        let dim = neighbours.len();
        let mut iperm = vec![0; dim];
        for (new, &old) in order.iter().enumerate() {
            iperm[old] = new;
        }
        let first: Vec<usize> = (0..dim)
            .map(|i| {
                neighbours[order[i]]
                    .iter()
                    .map(|&v| iperm[v])
                    .filter(|&c| c < i)
                    .min()
                    .unwrap_or(i)
            })
            .collect();
        let mut row_start = Vec::with_capacity(dim + 1);
        let mut acc = 0;
        for (i, &f) in first.iter().enumerate() {
            row_start.push(acc);
            acc += i - f + 1;
        }
        row_start.push(acc);
        Self {
            perm: order,
            iperm,
            first,
            row_start,
        }
    }

    /// Ordering for the unit block of a geography.
    pub fn for_units(adj: &AdjacencyStructure) -> Self {
        let neighbours: Vec<Vec<usize>> = (0..adj.n())
            .map(|k| adj.incident(k).iter().map(|&(v, _)| v).collect())
            .collect();
        let order = reverse_cuthill_mckee(&neighbours);
        Self::from_parts(&neighbours, order)
    }

    /// Ordering for the extended `(n+1)`-dimensional precision: units in RCM
    /// order, global node last, and every unit with at least one base edge in
    /// the global row's profile.
    pub fn for_extended(adj: &AdjacencyStructure) -> Self {
        let n = adj.n();
        let mut neighbours: Vec<Vec<usize>> = (0..n)
            .map(|k| adj.incident(k).iter().map(|&(v, _)| v).collect())
            .collect();
        let mut order = reverse_cuthill_mckee(&neighbours);
        order.push(n);
        let linked: Vec<usize> = (0..n).filter(|&k| adj.degree(k) > 0).collect();
        for &k in &linked {
            neighbours[k].push(n);
        }
        neighbours.push(linked);
        Self::from_parts(&neighbours, order)
    }

    /// Ordering computed from the matrix's own sparsity pattern.
    pub fn from_matrix(m: &SparseSym) -> Self {
        let neighbours: Vec<Vec<usize>> = (0..m.dim())
            .map(|i| m.row(i).iter().map(|&(c, _)| c).collect())
            .collect();
        let order = reverse_cuthill_mckee(&neighbours);
        Self::from_parts(&neighbours, order)
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    /// Stored entries of the factor.
    pub fn envelope_size(&self) -> usize {
        self.row_start[self.dim()]
    }

    /// Numeric factorisation `P Q Pᵀ = L Lᵀ`.
    pub fn factor(&self, m: &SparseSym) -> Result<EnvelopeCholesky> {
        if m.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: m.dim(),
            });
        }
        let mut values = vec![0.0; self.envelope_size()];
        for i in 0..self.dim() {
            let old = self.perm[i];
            let start = self.row_start[i];
            let f = self.first[i];
            values[start + i - f] = m.diag[old];
            for &(c_old, v) in &m.off[old] {
                let c = self.iperm[c_old];
                if c < i {
                    if c < f {
                        return Err(Error::Invalid(
                            "matrix entry outside the symbolic envelope".into(),
                        ));
                    }
                    values[start + c - f] += v;
                }
            }
        }

        for i in 0..self.dim() {
            let fi = self.first[i];
            let si = self.row_start[i];
            for k in fi..i {
                let fk = self.first[k];
                let sk = self.row_start[k];
                let lo = fi.max(fk);
                let mut s = values[si + k - fi];
                for m in lo..k {
                    s -= values[si + m - fi] * values[sk + m - fk];
                }
                values[si + k - fi] = s / values[sk + k - fk];
            }
            let mut d = values[si + i - fi];
            for m in fi..i {
                let l = values[si + m - fi];
                d -= l * l;
            }
            if !(d > 0.0) {
                return Err(Error::NotPositiveDefinite {
                    pivot: self.perm[i],
                    value: d,
                });
            }
            values[si + i - fi] = d.sqrt();
        }
        Ok(EnvelopeCholesky {
            ord: self.clone(),
            values,
        })
    }
}

/// Numeric envelope Cholesky factor.
#[derive(Debug, Clone)]
pub struct EnvelopeCholesky {
    ord: EnvelopeOrdering,
    values: Vec<f64>,
}

impl EnvelopeCholesky {
    fn pivot(&self, i: usize) -> f64 {
        self.values[self.ord.row_start[i + 1] - 1]
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.ord.dim()).map(|i| self.pivot(i).ln()).sum::<f64>()
    }

    /// Log-determinant of the matrix with its last original index removed.
    /// Valid when that index was ordered last, as in
    /// [`EnvelopeOrdering::for_extended`].
    pub fn log_det_without_last(&self) -> f64 {
        let d = self.ord.dim();
        debug_assert_eq!(self.ord.perm[d - 1], d - 1);
        2.0 * (0..d - 1).map(|i| self.pivot(i).ln()).sum::<f64>()
    }

    /// Solves `Q x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let d = self.ord.dim();
        let mut y: Vec<f64> = (0..d).map(|i| b[self.ord.perm[i]]).collect();
        for i in 0..d {
            let fi = self.ord.first[i];
            let si = self.ord.row_start[i];
            let mut s = y[i];
            for m in fi..i {
                s -= self.values[si + m - fi] * y[m];
            }
            y[i] = s / self.values[si + i - fi];
        }
        for i in (0..d).rev() {
            let fi = self.ord.first[i];
            let si = self.ord.row_start[i];
            y[i] /= self.values[si + i - fi];
            let xi = y[i];
            for m in fi..i {
                y[m] -= self.values[si + m - fi] * xi;
            }
        }
        let mut x = vec![0.0; d];
        for i in 0..d {
            x[self.ord.perm[i]] = y[i];
        }
        x
    }

    /// Column `u` of `Q⁻¹`.
    pub fn inverse_column(&self, u: usize) -> Vec<f64> {
        let mut e = vec![0.0; self.ord.dim()];
        e[u] = 1.0;
        self.solve(&e)
    }
}

/// Natural-log determinant by sparse Cholesky.
pub fn log_det(q: &SparseSym) -> Result<f64> {
    Ok(EnvelopeOrdering::from_matrix(q).factor(q)?.log_det())
}

/// `vᵀ Q v`.
pub fn quad_form(q: &SparseSym, v: &[f64]) -> Result<f64> {
    q.quad_form(v)
}

/// `ln|Q + U Δ Uᵀ| − ln|Q|` for a perturbation supported on `idx`, given the
/// restriction `inv_block` of `Q⁻¹` to `idx`.
pub fn low_rank_logdet_delta(delta: &DMatrix<f64>, inv_block: &DMatrix<f64>) -> Result<f64> {
    let k = delta.nrows();
    let m = DMatrix::<f64>::identity(k, k) + delta * inv_block;
    let det = m.determinant();
    if !(det > 0.0) {
        return Err(Error::NotPositiveDefinite {
            pivot: 0,
            value: det,
        });
    }
    Ok(det.ln())
}

/// Direction of a single-edge move along the candidate sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeMove {
    /// `j → j − 1`.
    Remove,
    /// `j → j + 1`.
    Add,
}

/// `ln|Q(W̃⁽ʲ'⁾, ε)_{1:n}| − ln|Q(W̃⁽ʲ⁾, ε)_{1:n}|` for the neighbouring candidate
/// `j' = j ∓ 1`, by a rank-two determinant update on the endpoints of the
/// toggled edge.
pub fn edge_delta_logdet(
    seq: &CandidateSequence,
    j: usize,
    direction: EdgeMove,
    epsilon: f64,
) -> Result<f64> {
    let (edge, target) = match direction {
        EdgeMove::Remove => (seq.removed_edge(j)?, j - 1),
        EdgeMove::Add => {
            if j >= seq.n_edges() {
                return Err(Error::IndexOutOfRange {
                    index: j + 1,
                    n: seq.n_edges(),
                });
            }
            (seq.removed_edge(j + 1)?, j + 1)
        }
    };
    let state = seq.candidate(j)?;
    let q = build_sub_precision(&state, epsilon)?;
    let factor = EnvelopeOrdering::for_units(seq.base()).factor(&q)?;
    let mut next = state.clone();
    next.set_active(edge, target > j);
    let q_next = build_sub_precision(&next, epsilon)?;

    let (a, b) = seq.base().edge(edge);
    let idx = [a, b];
    let delta = DMatrix::from_fn(2, 2, |r, c| q_next.get(idx[r], idx[c]) - q.get(idx[r], idx[c]));
    let col_a = factor.inverse_column(a);
    let col_b = factor.inverse_column(b);
    let inv = DMatrix::from_row_slice(2, 2, &[col_a[a], col_a[b], col_b[a], col_b[b]]);
    low_rank_logdet_delta(&delta, &inv)
}

/// Fills the sequence's log-determinant cache for every candidate at `epsilon`.
pub fn precompute_logdets(seq: &mut CandidateSequence, epsilon: f64) -> Result<()> {
    check_epsilon(epsilon)?;
    let ord = EnvelopeOrdering::for_extended(seq.base());
    let values: Vec<(f64, f64)> = (0..=seq.n_edges())
        .into_par_iter()
        .map(|j| {
            let state = seq.candidate(j)?;
            let q = build_precision(&state, epsilon)?;
            let f = ord.factor(&q)?;
            Ok((f.log_det(), f.log_det_without_last()))
        })
        .collect::<Result<_>>()?;
    let (full, sub) = values.into_iter().unzip();
    seq.set_logdet_cache(LogDetCache { epsilon, full, sub })
}
