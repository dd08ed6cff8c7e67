//! Sparse symmetric positive-definite factorization.
//!
//! A fill-reducing ordering is computed once by approximate minimum degree,
//! the elimination tree and the pattern of `L` are computed once per sparsity
//! pattern, and numeric `LDLᵀ` factorizations are then repeated for new
//! values. The numeric phase is generic over [`Scalar`] so the factorization
//! (and hence log-determinants and solves) can be differentiated.

use std::collections::BTreeSet;

use nalgebra::DMatrix;

use crate::autodiff::Scalar;
use crate::error::SparseError;

/// Relative pivot threshold below which a matrix is declared not positive definite.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// Compressed sparse column matrix. Row indices within a column are sorted.
#[derive(Clone, Debug, PartialEq)]
pub struct CscMatrix<T> {
    pub nrows: usize,
    pub ncols: usize,
    pub colptr: Vec<usize>,
    pub rowidx: Vec<usize>,
    pub values: Vec<T>,
}

impl<T: Copy> CscMatrix<T> {
    pub fn new(
        nrows: usize,
        ncols: usize,
        colptr: Vec<usize>,
        rowidx: Vec<usize>,
        values: Vec<T>,
    ) -> Result<Self, SparseError> {
        if colptr.len() != ncols + 1 || colptr[0] != 0 {
            return Err(SparseError::Malformed("column pointer length or origin".into()));
        }
        if colptr.windows(2).any(|w| w[0] > w[1]) {
            return Err(SparseError::Malformed("column pointers decrease".into()));
        }
        let nnz = colptr[ncols];
        if rowidx.len() != nnz || values.len() != nnz {
            return Err(SparseError::Malformed("row index or value count".into()));
        }
        for j in 0..ncols {
            let rows = &rowidx[colptr[j]..colptr[j + 1]];
            if rows.iter().any(|&r| r >= nrows) {
                return Err(SparseError::Malformed(format!("row index out of range in column {j}")));
            }
            if rows.windows(2).any(|w| w[0] >= w[1]) {
                return Err(SparseError::Malformed(format!("unsorted rows in column {j}")));
            }
        }
        Ok(CscMatrix {
            nrows,
            ncols,
            colptr,
            rowidx,
            values,
        })
    }

    /// Build from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        triplets: &[(usize, usize, T)],
    ) -> Result<Self, SparseError>
    where
        T: std::ops::Add<Output = T>,
    {
        let mut sorted: Vec<(usize, usize, T)> = triplets.to_vec();
        if sorted.iter().any(|&(r, c, _)| r >= nrows || c >= ncols) {
            return Err(SparseError::Malformed("triplet index out of range".into()));
        }
        sorted.sort_by_key(|&(r, c, _)| (c, r));
        let mut colptr = vec![0usize; ncols + 1];
        let mut rowidx = Vec::with_capacity(sorted.len());
        let mut values: Vec<T> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                let k = values.len() - 1;
                values[k] = values[k] + v;
            } else {
                rowidx.push(r);
                values.push(v);
                colptr[c + 1] += 1;
                last = Some((r, c));
            }
        }
        for j in 0..ncols {
            colptr[j + 1] += colptr[j];
        }
        Ok(CscMatrix {
            nrows,
            ncols,
            colptr,
            rowidx,
            values,
        })
    }

    pub fn nnz(&self) -> usize {
        self.colptr[self.ncols]
    }

    /// Same pattern with new values.
    pub fn with_values<U: Copy>(&self, values: Vec<U>) -> CscMatrix<U> {
        assert_eq!(values.len(), self.nnz());
        CscMatrix {
            nrows: self.nrows,
            ncols: self.ncols,
            colptr: self.colptr.clone(),
            rowidx: self.rowidx.clone(),
            values,
        }
    }

    /// Position of entry `(i, j)` in the value array, if stored.
    pub fn find(&self, i: usize, j: usize) -> Option<usize> {
        let lo = self.colptr[j];
        let hi = self.colptr[j + 1];
        self.rowidx[lo..hi].binary_search(&i).ok().map(|k| lo + k)
    }
}

impl CscMatrix<f64> {
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.nrows, self.ncols);
        for j in 0..self.ncols {
            for p in self.colptr[j]..self.colptr[j + 1] {
                d[(self.rowidx[p], j)] += self.values[p];
            }
        }
        d
    }

    /// Entries of a dense matrix whose magnitude exceeds zero.
    pub fn from_dense(d: &DMatrix<f64>) -> Self {
        let mut triplets = Vec::new();
        for j in 0..d.ncols() {
            for i in 0..d.nrows() {
                if d[(i, j)] != 0.0 {
                    triplets.push((i, j, d[(i, j)]));
                }
            }
        }
        CscMatrix::from_triplets(d.nrows(), d.ncols(), &triplets).expect("valid triplets")
    }
}

/// Approximate minimum degree ordering of a symmetric pattern.
///
/// Only the pattern is used; both triangles or either one may be supplied.
/// Returns `perm` with `perm[k]` the original index eliminated at step `k`.
/// Ties in the approximate degree are broken by the lowest original index.
pub fn amd_order<T: Copy>(a: &CscMatrix<T>) -> Result<Vec<usize>, SparseError> {
    if a.nrows != a.ncols {
        return Err(SparseError::NotSquare {
            nrows: a.nrows,
            ncols: a.ncols,
        });
    }
    let n = a.ncols;
    let mut var_adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for j in 0..n {
        for p in a.colptr[j]..a.colptr[j + 1] {
            let i = a.rowidx[p];
            if i != j {
                var_adj[i].insert(j);
                var_adj[j].insert(i);
            }
        }
    }
    let mut elem_adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    let mut elem_vars: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut degree: Vec<usize> = var_adj.iter().map(|s| s.len()).collect();
    let mut eliminated = vec![false; n];
    let mut queue: BTreeSet<(usize, usize)> = (0..n).map(|i| (degree[i], i)).collect();
    let mut in_lp = vec![false; n];
    let mut w: Vec<isize> = vec![-1; n];
    let mut perm = Vec::with_capacity(n);

    for k in 0..n {
        let (_, p) = queue.pop_first().expect("queue holds every uneliminated variable");
        perm.push(p);
        eliminated[p] = true;

        // Variables of the new element: neighbours of p plus members of absorbed elements.
        let mut lp: Vec<usize> = var_adj[p].iter().copied().filter(|&i| !eliminated[i]).collect();
        for &i in &lp {
            in_lp[i] = true;
        }
        let absorbed: Vec<usize> = elem_adj[p].iter().copied().collect();
        for &e in &absorbed {
            for &i in &elem_vars[e] {
                if !eliminated[i] && !in_lp[i] {
                    in_lp[i] = true;
                    lp.push(i);
                }
            }
        }
        lp.sort_unstable();
        for &e in &absorbed {
            for &i in &elem_vars[e] {
                if !eliminated[i] {
                    elem_adj[i].remove(&e);
                }
            }
            elem_vars[e].clear();
        }
        elem_adj[p].clear();
        var_adj[p].clear();

        for &i in &lp {
            var_adj[i].remove(&p);
            var_adj[i].retain(|j| !in_lp[*j]);
            elem_adj[i].insert(p);
        }

        // |L_e \ L_p| for elements adjacent to members of L_p.
        for &i in &lp {
            for &e in &elem_adj[i] {
                if e != p && w[e] < 0 {
                    w[e] = elem_vars[e].iter().filter(|&&v| !eliminated[v]).count() as isize;
                }
            }
        }
        for &i in &lp {
            for &e in &elem_adj[i] {
                if e != p {
                    w[e] -= 1;
                }
            }
        }
        let remaining = n - k - 1;
        let lp_len = lp.len();
        for &i in &lp {
            let mut ext = var_adj[i].len() + lp_len - 1;
            for &e in &elem_adj[i] {
                if e != p {
                    ext += w[e].max(0) as usize;
                }
            }
            let bound = degree[i] + lp_len - 1;
            let d = remaining.min(bound).min(ext);
            queue.remove(&(degree[i], i));
            degree[i] = d;
            queue.insert((d, i));
        }
        for &i in &lp {
            for &e in &elem_adj[i] {
                w[e] = -1;
            }
        }
        for &i in &lp {
            in_lp[i] = false;
        }
        elem_vars[p] = lp;
    }
    Ok(perm)
}

/// Inverse of a permutation.
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

/// Ordering, elimination tree and pattern of `L` for a fixed sparsity pattern.
#[derive(Clone, Debug)]
pub struct SymbolicFactorization {
    pub n: usize,
    pub perm: Vec<usize>,
    pub iperm: Vec<usize>,
    pub parent: Vec<Option<usize>>,
    /// Column pointers of the strictly lower triangular factor.
    pub lp: Vec<usize>,
    /// Row indices of the strictly lower triangular factor (permuted indexing).
    pub li: Vec<usize>,
    pattern_colptr: Vec<usize>,
    pattern_rowidx: Vec<usize>,
}

impl SymbolicFactorization {
    /// Symbolic analysis with an approximate minimum degree ordering.
    pub fn new<T: Copy>(a: &CscMatrix<T>) -> Result<Self, SparseError> {
        let perm = amd_order(a)?;
        Self::with_ordering(a, perm)
    }

    /// Symbolic analysis with the identity ordering.
    pub fn natural<T: Copy>(a: &CscMatrix<T>) -> Result<Self, SparseError> {
        Self::with_ordering(a, (0..a.ncols).collect())
    }

    /// Symbolic analysis with a caller-supplied ordering. The matrix must
    /// store both triangles of its symmetric pattern.
    pub fn with_ordering<T: Copy>(a: &CscMatrix<T>, perm: Vec<usize>) -> Result<Self, SparseError> {
        if a.nrows != a.ncols {
            return Err(SparseError::NotSquare {
                nrows: a.nrows,
                ncols: a.ncols,
            });
        }
        let n = a.ncols;
        if perm.len() != n {
            return Err(SparseError::DimensionMismatch {
                expected: n,
                got: perm.len(),
            });
        }
        let iperm = invert_permutation(&perm);
        let mut parent: Vec<Option<usize>> = vec![None; n];
        let mut flag = vec![usize::MAX; n];
        let mut lnz = vec![0usize; n];
        for k in 0..n {
            flag[k] = k;
            let kk = perm[k];
            for p in a.colptr[kk]..a.colptr[kk + 1] {
                let mut i = iperm[a.rowidx[p]];
                if i < k {
                    while flag[i] != k {
                        if parent[i].is_none() {
                            parent[i] = Some(k);
                        }
                        lnz[i] += 1;
                        flag[i] = k;
                        i = parent[i].expect("parent set above");
                    }
                }
            }
        }
        let mut lp = vec![0usize; n + 1];
        for k in 0..n {
            lp[k + 1] = lp[k] + lnz[k];
        }
        // Row pattern of each column of L, in the order produced by the numeric phase.
        let mut li = vec![0usize; lp[n]];
        let mut fill = vec![0usize; n];
        for k in 0..n {
            flag[k] = usize::MAX;
        }
        for k in 0..n {
            flag[k] = k;
            let kk = perm[k];
            for p in a.colptr[kk]..a.colptr[kk + 1] {
                let mut i = iperm[a.rowidx[p]];
                if i < k {
                    while flag[i] != k {
                        li[lp[i] + fill[i]] = k;
                        fill[i] += 1;
                        flag[i] = k;
                        i = parent[i].expect("tree computed above");
                    }
                }
            }
        }
        Ok(SymbolicFactorization {
            n,
            perm,
            iperm,
            parent,
            lp,
            li,
            pattern_colptr: a.colptr.clone(),
            pattern_rowidx: a.rowidx.clone(),
        })
    }

    /// Nonzeros in `L` including the unit diagonal.
    pub fn nnz_l(&self) -> usize {
        self.lp[self.n] + self.n
    }

    fn check_pattern<T>(&self, a: &CscMatrix<T>) -> Result<(), SparseError> {
        if a.ncols != self.n || a.nrows != self.n {
            return Err(SparseError::DimensionMismatch {
                expected: self.n,
                got: a.ncols,
            });
        }
        if a.colptr != self.pattern_colptr || a.rowidx != self.pattern_rowidx {
            return Err(SparseError::Malformed(
                "matrix pattern differs from the analysed pattern".into(),
            ));
        }
        Ok(())
    }

    /// Numeric `LDLᵀ` factorization of a matrix with the analysed pattern.
    pub fn factorize<S: Scalar>(&self, a: &CscMatrix<S>) -> Result<LdlFactor<'_, S>, SparseError> {
        self.check_pattern(a)?;
        let n = self.n;
        let mut lx = vec![S::zero(); self.lp[n]];
        let mut d = vec![S::zero(); n];
        let mut y = vec![S::zero(); n];
        let mut pattern = vec![0usize; n];
        let mut flag = vec![usize::MAX; n];
        let mut lnz = vec![0usize; n];
        let mut max_pivot: f64 = 0.0;
        for k in 0..n {
            let mut top = n;
            flag[k] = k;
            let kk = self.perm[k];
            for p in a.colptr[kk]..a.colptr[kk + 1] {
                let mut i = self.iperm[a.rowidx[p]];
                if i <= k {
                    y[i] += a.values[p];
                    let mut len = 0;
                    while flag[i] != k {
                        pattern[len] = i;
                        len += 1;
                        flag[i] = k;
                        i = self.parent[i].expect("elimination tree covers the pattern");
                    }
                    while len > 0 {
                        top -= 1;
                        len -= 1;
                        pattern[top] = pattern[len];
                    }
                }
            }
            d[k] = y[k];
            y[k] = S::zero();
            while top < n {
                let i = pattern[top];
                let yi = y[i];
                y[i] = S::zero();
                let p2 = self.lp[i] + lnz[i];
                for p in self.lp[i]..p2 {
                    let r = self.li[p];
                    y[r] -= lx[p] * yi;
                }
                let l_ki = yi / d[i];
                d[k] -= l_ki * yi;
                lx[p2] = l_ki;
                lnz[i] += 1;
                top += 1;
            }
            let dk = d[k].value();
            if !(dk > 0.0) || !dk.is_finite() {
                return Err(SparseError::NotPositiveDefinite {
                    index: self.perm[k],
                    pivot: dk,
                    max_pivot,
                });
            }
            max_pivot = max_pivot.max(dk);
        }
        for k in 0..n {
            let dk = d[k].value();
            if dk <= PIVOT_TOLERANCE * max_pivot {
                return Err(SparseError::NotPositiveDefinite {
                    index: self.perm[k],
                    pivot: dk,
                    max_pivot,
                });
            }
        }
        Ok(LdlFactor {
            lx,
            d,
            symbolic: self,
        })
    }
}

/// Numeric factor `P A Pᵀ = L D Lᵀ`.
#[derive(Clone, Debug)]
pub struct LdlFactor<'a, S> {
    pub lx: Vec<S>,
    pub d: Vec<S>,
    symbolic: &'a SymbolicFactorization,
}

impl<S: Scalar> LdlFactor<'_, S> {
    /// `ln det A = Σ ln d_ii`.
    pub fn logdet(&self) -> S {
        let mut s = S::zero();
        for &dk in &self.d {
            s += dk.ln();
        }
        s
    }

    /// Solve `A x = b`.
    pub fn solve(&self, b: &[S]) -> Vec<S> {
        let sym = self.symbolic;
        let n = sym.n;
        assert_eq!(b.len(), n, "right-hand side length");
        let mut x: Vec<S> = (0..n).map(|k| b[sym.perm[k]]).collect();
        for j in 0..n {
            let xj = x[j];
            for p in sym.lp[j]..sym.lp[j + 1] {
                let r = sym.li[p];
                x[r] -= self.lx[p] * xj;
            }
        }
        for j in 0..n {
            x[j] /= self.d[j];
        }
        for j in (0..n).rev() {
            let mut xj = x[j];
            for p in sym.lp[j]..sym.lp[j + 1] {
                xj -= self.lx[p] * x[sym.li[p]];
            }
            x[j] = xj;
        }
        let mut out = vec![S::zero(); n];
        for k in 0..n {
            out[sym.perm[k]] = x[k];
        }
        out
    }

    pub fn symbolic(&self) -> &SymbolicFactorization {
        self.symbolic
    }
}
