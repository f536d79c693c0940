//! Dense LU factorisation with partial pivoting, shared by the AC and
//! transient engines.
//!
//! Circuit systems here stay below a few hundred unknowns, so the matrix is
//! stored densely. The transient engine factors once and then solves
//! millions of times; [`CompressedLu`] keeps only the non-zero entries of the
//! factors so that each solve costs `O(nnz)` instead of `O(n^2)`. Unknowns are
//! renumbered with reverse Cuthill-McKee first to keep fill-in low.

use std::collections::VecDeque;
use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

use num_complex::Complex64;
use thiserror::Error;

/// Field element the factorisation works over.
pub trait Scalar:
    Copy
    + Debug
    + PartialEq
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn zero() -> Self;
    fn one() -> Self;
    fn modulus(self) -> f64;
    fn is_finite(self) -> bool;
}

impl Scalar for f64 {
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn modulus(self) -> f64 {
        self.abs()
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

impl Scalar for Complex64 {
    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
    fn one() -> Self {
        Complex64::new(1.0, 0.0)
    }
    fn modulus(self) -> f64 {
        self.norm()
    }
    fn is_finite(self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("singular system: no usable pivot in column {pivot}")]
    Singular { pivot: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// Row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T> {
    n: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![T::zero(); n * n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.n + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.n + col] = value;
    }

    pub fn add(&mut self, row: usize, col: usize, value: T) {
        let slot = &mut self.data[row * self.n + col];
        *slot = *slot + value;
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        (0..self.n)
            .map(|i| {
                self.data[i * self.n..(i + 1) * self.n]
                    .iter()
                    .zip(x)
                    .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
            })
            .collect()
    }

    /// Symmetrised sparsity pattern, used for ordering.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for i in 0..self.n {
            for j in 0..self.n {
                if i != j && (self.get(i, j) != T::zero() || self.get(j, i) != T::zero()) {
                    adj[i].push(j);
                }
            }
        }
        adj
    }

    /// Returns `P A P^T` for the permutation `order` (new index -> old index).
    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut out = Self::zeros(self.n);
        for (ni, &oi) in order.iter().enumerate() {
            for (nj, &oj) in order.iter().enumerate() {
                out.set(ni, nj, self.get(oi, oj));
            }
        }
        out
    }

    fn max_modulus(&self) -> f64 {
        self.data.iter().map(|v| v.modulus()).fold(0.0, f64::max)
    }
}

/// In-place LU factors `P A = L U` with unit lower triangle.
#[derive(Debug, Clone)]
pub struct LuFactors<T> {
    n: usize,
    lu: Vec<T>,
    /// `perm[i]` is the original row placed at position `i`.
    perm: Vec<usize>,
}

impl<T: Scalar> LuFactors<T> {
    pub fn factor(matrix: &DenseMatrix<T>) -> Result<Self, LinalgError> {
        let n = matrix.n;
        let mut lu = matrix.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let tiny = matrix.max_modulus() * 1e-15;
        for k in 0..n {
            let mut best = k;
            let mut best_mag = lu[k * n + k].modulus();
            for r in k + 1..n {
                let m = lu[r * n + k].modulus();
                if m > best_mag {
                    best = r;
                    best_mag = m;
                }
            }
            if !(best_mag > tiny) {
                return Err(LinalgError::Singular { pivot: k });
            }
            if best != k {
                for c in 0..n {
                    lu.swap(k * n + c, best * n + c);
                }
                perm.swap(k, best);
            }
            let pivot = lu[k * n + k];
            for r in k + 1..n {
                let a = lu[r * n + k];
                if a == T::zero() {
                    continue;
                }
                let factor = a / pivot;
                lu[r * n + k] = factor;
                for c in k + 1..n {
                    let u = lu[k * n + c];
                    if u != T::zero() {
                        lu[r * n + c] = lu[r * n + c] - factor * u;
                    }
                }
            }
        }
        Ok(Self { n, lu, perm })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, rhs: &[T]) -> Result<Vec<T>, LinalgError> {
        if rhs.len() != self.n {
            return Err(LinalgError::Dimension {
                expected: self.n,
                got: rhs.len(),
            });
        }
        let n = self.n;
        let mut x: Vec<T> = self.perm.iter().map(|&p| rhs[p]).collect();
        for i in 0..n {
            let mut acc = x[i];
            for j in 0..i {
                acc = acc - self.lu[i * n + j] * x[j];
            }
            x[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in i + 1..n {
                acc = acc - self.lu[i * n + j] * x[j];
            }
            x[i] = acc / self.lu[i * n + i];
        }
        Ok(x)
    }

    /// Drops structural zeros for repeated solves.
    pub fn compress(&self) -> CompressedLu<T> {
        let n = self.n;
        let mut lower = Vec::with_capacity(n);
        let mut upper = Vec::with_capacity(n);
        let mut diag = Vec::with_capacity(n);
        for i in 0..n {
            let row = &self.lu[i * n..(i + 1) * n];
            lower.push(
                (0..i)
                    .filter(|&j| row[j] != T::zero())
                    .map(|j| (j, row[j]))
                    .collect::<Vec<_>>(),
            );
            upper.push(
                (i + 1..n)
                    .filter(|&j| row[j] != T::zero())
                    .map(|j| (j, row[j]))
                    .collect::<Vec<_>>(),
            );
            diag.push(row[i]);
        }
        let mut lower_start = vec![0];
        let mut lower_entries = Vec::new();
        for row in lower {
            lower_entries.extend(row);
            lower_start.push(lower_entries.len());
        }
        let mut upper_start = vec![0];
        let mut upper_entries = Vec::new();
        for row in upper {
            upper_entries.extend(row);
            upper_start.push(upper_entries.len());
        }
        CompressedLu {
            n,
            perm: self.perm.clone(),
            lower_start,
            lower: lower_entries,
            upper_start,
            upper: upper_entries,
            diag,
        }
    }
}

/// LU factors in compressed-row form. Produces the same floating-point
/// result as [`LuFactors::solve`] because only exact zeros are skipped.
#[derive(Debug, Clone)]
pub struct CompressedLu<T> {
    n: usize,
    perm: Vec<usize>,
    lower_start: Vec<usize>,
    lower: Vec<(usize, T)>,
    upper_start: Vec<usize>,
    upper: Vec<(usize, T)>,
    diag: Vec<T>,
}

impl<T: Scalar> CompressedLu<T> {
    pub fn nnz(&self) -> usize {
        self.lower.len() + self.upper.len() + self.n
    }

    /// Solves into `out`; `rhs` is left untouched.
    pub fn solve_into(&self, rhs: &[T], out: &mut [T]) {
        let n = self.n;
        for i in 0..n {
            let mut acc = rhs[self.perm[i]];
            for &(j, l) in &self.lower[self.lower_start[i]..self.lower_start[i + 1]] {
                acc = acc - l * out[j];
            }
            out[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = out[i];
            for &(j, u) in &self.upper[self.upper_start[i]..self.upper_start[i + 1]] {
                acc = acc - u * out[j];
            }
            out[i] = acc / self.diag[i];
        }
    }
}

/// Reverse Cuthill-McKee ordering of an undirected graph. Returns
/// `order[new] = old`. Disconnected components are handled in turn.
pub fn reverse_cuthill_mckee(adjacency: &[Vec<usize>]) -> Vec<usize> {
    let n = adjacency.len();
    let degree: Vec<usize> = adjacency.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let start = (0..n)
            .filter(|&i| !visited[i])
            .min_by_key(|&i| degree[i])
            .expect("unvisited vertex exists");
        visited[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adjacency[v]
                .iter()
                .copied()
                .filter(|&w| !visited[w])
                .collect();
            next.sort_by_key(|&w| (degree[w], w));
            for w in next {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> DenseMatrix<f64> {
        let mut m = DenseMatrix::zeros(3);
        let rows = [[0.0, 2.0, 1.0], [1.0, 1.0, 0.0], [4.0, 0.0, 3.0]];
        for (i, r) in rows.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                m.set(i, j, v);
            }
        }
        m
    }

    #[test]
    fn solves_with_row_exchange() {
        let m = sample();
        let lu = LuFactors::factor(&m).unwrap();
        let x = lu.solve(&[3.0, 2.0, 7.0]).unwrap();
        let back = m.mul_vec(&x);
        for (a, b) in back.iter().zip([3.0, 2.0, 7.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn compressed_matches_dense_bitwise() {
        let m = sample();
        let lu = LuFactors::factor(&m).unwrap();
        let rhs = [0.3, -1.7, 2.25];
        let dense = lu.solve(&rhs).unwrap();
        let mut out = vec![0.0; 3];
        lu.compress().solve_into(&rhs, &mut out);
        assert_eq!(dense, out);
    }

    #[test]
    fn singular_reports_pivot() {
        let mut m = DenseMatrix::<f64>::zeros(2);
        m.set(0, 0, 1.0);
        m.set(0, 1, 2.0);
        m.set(1, 0, 2.0);
        m.set(1, 1, 4.0);
        assert_eq!(
            LuFactors::factor(&m).unwrap_err(),
            LinalgError::Singular { pivot: 1 }
        );
    }

    #[test]
    fn complex_system() {
        let j = Complex64::new(0.0, 1.0);
        let mut m = DenseMatrix::zeros(2);
        m.set(0, 0, Complex64::new(1.0, 0.0) + j);
        m.set(0, 1, -j);
        m.set(1, 0, -j);
        m.set(1, 1, Complex64::new(2.0, 0.0));
        let rhs = [Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)];
        let x = LuFactors::factor(&m).unwrap().solve(&rhs).unwrap();
        let back = m.mul_vec(&x);
        assert!((back[0] - rhs[0]).norm() < 1e-14);
        assert!((back[1] - rhs[1]).norm() < 1e-14);
    }

    #[test]
    fn rcm_is_a_permutation_and_narrows_a_path() {
        // path 0-4-1-3-2 labelled badly
        let edges = [(0, 4), (4, 1), (1, 3), (3, 2)];
        let mut adj = vec![Vec::new(); 5];
        for (a, b) in edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        let order = reverse_cuthill_mckee(&adj);
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
        let mut pos = vec![0; 5];
        for (new, &old) in order.iter().enumerate() {
            pos[old] = new as i64;
        }
        for (a, b) in edges {
            assert_eq!((pos[a] - pos[b]).abs(), 1);
        }
    }
}
