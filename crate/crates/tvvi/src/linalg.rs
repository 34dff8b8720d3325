//! Sparse storage, Matrix Market IO and the direct solvers used throughout.

use std::io::{BufRead, Write};

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};
use nalgebra::DVector;

use crate::error::{Error, Result};

/// Compressed sparse row matrix with sorted, duplicate-free column indices.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub data: Vec<f64>,
}

impl CsrMatrix {
    /// Duplicates are summed; exact zeros are dropped.
    pub fn from_triplets(nrows: usize, ncols: usize, entries: &[(usize, usize, f64)]) -> Self {
        let mut sorted: Vec<(usize, usize, f64)> = entries.to_vec();
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; nrows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut data: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        let mut rows = Vec::with_capacity(sorted.len());
        for &(i, j, v) in &sorted {
            assert!(i < nrows && j < ncols, "triplet ({i},{j}) out of bounds");
            if last == Some((i, j)) {
                *data.last_mut().unwrap() += v;
            } else {
                indices.push(j);
                data.push(v);
                rows.push(i);
                last = Some((i, j));
            }
        }
        let mut keep_idx = Vec::with_capacity(indices.len());
        let mut keep_val = Vec::with_capacity(indices.len());
        for k in 0..indices.len() {
            if data[k] != 0.0 {
                indptr[rows[k] + 1] += 1;
                keep_idx.push(indices[k]);
                keep_val.push(data[k]);
            }
        }
        for i in 0..nrows {
            indptr[i + 1] += indptr[i];
        }
        CsrMatrix { nrows, ncols, indptr, indices: keep_idx, data: keep_val }
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        CsrMatrix { nrows, ncols, indptr: vec![0; nrows + 1], indices: vec![], data: vec![] }
    }

    pub fn identity(n: usize) -> Self {
        let t: Vec<_> = (0..n).map(|i| (i, i, 1.0)).collect();
        Self::from_triplets(n, n, &t)
    }

    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.len());
        let mut t = Vec::new();
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), ncols, "ragged dense input");
            for (j, &v) in r.iter().enumerate() {
                t.push((i, j, v));
            }
        }
        Self::from_triplets(nrows, ncols, &t)
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        self.indices[a..b].iter().copied().zip(self.data[a..b].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        match self.indices[a..b].binary_search(&j) {
            Ok(k) => self.data[a + k],
            Err(_) => 0.0,
        }
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut t = Vec::with_capacity(self.nnz());
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                t.push((i, j, v));
            }
        }
        t
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.ncols);
        DVector::from_fn(self.nrows, |i, _| self.row_dot(i, x.as_slice()))
    }

    pub fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        self.row(i).map(|(j, v)| v * x[j]).sum()
    }

    /// `self^T x`
    pub fn tr_mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.nrows);
        let mut out = DVector::zeros(self.ncols);
        for i in 0..self.nrows {
            let xi = x[i];
            if xi != 0.0 {
                for (j, v) in self.row(i) {
                    out[j] += v * xi;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> CsrMatrix {
        let t: Vec<_> = self.triplets().into_iter().map(|(i, j, v)| (j, i, v)).collect();
        Self::from_triplets(self.ncols, self.nrows, &t)
    }

    pub fn max_abs_diag(&self) -> f64 {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i).abs()).fold(0.0, f64::max)
    }

    /// Largest |a_ij - a_ji| over stored entries.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.nrows, self.ncols);
        for (i, j, v) in self.triplets() {
            m[(i, j)] = v;
        }
        m
    }

    /// Rows selected (in order) from `self`.
    pub fn select_rows(&self, rows: &[usize]) -> CsrMatrix {
        let mut t = Vec::new();
        for (r, &i) in rows.iter().enumerate() {
            for (j, v) in self.row(i) {
                t.push((r, j, v));
            }
        }
        Self::from_triplets(rows.len(), self.ncols, &t)
    }

    fn to_faer(&self) -> Result<SparseColMat<usize, f64>> {
        let t: Vec<_> = self.triplets().into_iter().map(|(i, j, v)| Triplet::new(i, j, v)).collect();
        SparseColMat::try_new_from_triplets(self.nrows, self.ncols, &t)
            .map_err(|e| Error::Numerical(format!("sparse assembly failed: {e:?}")))
    }
}

/// Largest singular value of `m` (power iteration on m^T m).
pub fn spectral_norm(m: &CsrMatrix, iters: usize) -> f64 {
    if m.nnz() == 0 {
        return 0.0;
    }
    let mut x = DVector::from_fn(m.ncols, |i, _| 1.0 + 0.01 * ((i % 7) as f64));
    x /= x.norm();
    let mut est = 0.0;
    for _ in 0..iters {
        let y = m.tr_mul_vec(&m.mul_vec(&x));
        let nrm = y.norm();
        if nrm == 0.0 {
            return 0.0;
        }
        let next = nrm.sqrt();
        x = y / nrm;
        if (next - est).abs() <= 1e-12 * next {
            est = next;
            break;
        }
        est = next;
    }
    est
}

fn to_mat(v: &DVector<f64>) -> Mat<f64> {
    Mat::from_fn(v.len(), 1, |i, _| v[i])
}

fn from_mat(m: &Mat<f64>) -> DVector<f64> {
    DVector::from_fn(m.nrows(), |i, _| m[(i, 0)])
}

/// Sparse Cholesky factorization of a symmetric positive definite matrix.
pub struct SpdFactor {
    llt: faer::sparse::linalg::solvers::Llt<usize, f64>,
    n: usize,
}

impl SpdFactor {
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        let f = a.to_faer()?;
        let llt = f
            .sp_cholesky(Side::Lower)
            .map_err(|e| Error::SingularSystem(format!("cholesky failed: {e:?}")))?;
        Ok(SpdFactor { llt, n: a.nrows })
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        assert_eq!(b.len(), self.n);
        let mut x = to_mat(b);
        self.llt.solve_in_place(x.as_mut());
        from_mat(&x)
    }
}

/// Sparse LU with partial pivoting of a general square matrix.
pub struct LuFactor {
    lu: faer::sparse::linalg::solvers::Lu<usize, f64>,
    n: usize,
}

impl LuFactor {
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        let f = a.to_faer()?;
        let lu = f.sp_lu().map_err(|e| Error::SingularSystem(format!("lu failed: {e:?}")))?;
        Ok(LuFactor { lu, n: a.nrows })
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        assert_eq!(b.len(), self.n);
        let mut x = to_mat(b);
        self.lu.solve_in_place(x.as_mut());
        from_mat(&x)
    }
}

/// Saddle-point system
///
/// ```text
/// [ L  C^T ] [x]   [f]
/// [ C   0  ] [z] = [g]
/// ```
///
/// with `L` symmetric positive definite on the kernel of `C`. `C` may be rank
/// deficient; the factorization uses a `-eps I` regularization of the (2,2)
/// block and iterative refinement against the unregularized operator. When `C`
/// is rank deficient `z` is one of many valid multipliers.
pub struct SaddleSolver {
    n: usize,
    p: usize,
    full: CsrMatrix,
    factor: Option<LuFactor>,
    spd: Option<SpdFactor>,
    pub max_refine: usize,
}

/// Solution of a saddle-point system with the relative residual reached.
#[derive(Clone, Debug)]
pub struct SaddleSolution {
    pub x: DVector<f64>,
    pub z: DVector<f64>,
    pub residual: f64,
}

impl SaddleSolver {
    pub fn new(l: &CsrMatrix, c: &CsrMatrix) -> Result<Self> {
        let n = l.nrows;
        let p = c.nrows;
        if l.ncols != n || c.ncols != n {
            return Err(Error::Dimension(format!(
                "saddle blocks: L is {}x{}, C is {}x{}",
                l.nrows, l.ncols, c.nrows, c.ncols
            )));
        }
        let mut t = l.triplets();
        for (i, j, v) in c.triplets() {
            t.push((n + i, j, v));
            t.push((j, n + i, v));
        }
        let full = CsrMatrix::from_triplets(n + p, n + p, &t);
        if p == 0 {
            let spd = SpdFactor::new(l)?;
            return Ok(SaddleSolver { n, p, full, factor: None, spd: Some(spd), max_refine: 60 });
        }
        let c_scale = (0..p).map(|i| c.row(i).map(|(_, v)| v * v).sum::<f64>()).fold(0.0, f64::max);
        let eps = 1e-10 * c_scale / l.max_abs_diag().max(1e-300);
        let mut treg = t;
        for i in 0..p {
            treg.push((n + i, n + i, -eps.max(1e-300)));
        }
        let reg = CsrMatrix::from_triplets(n + p, n + p, &treg);
        let factor = LuFactor::new(&reg)?;
        Ok(SaddleSolver { n, p, full, factor: Some(factor), spd: None, max_refine: 60 })
    }

    pub fn constraint_rows(&self) -> usize {
        self.p
    }

    pub fn solve(&self, f: &DVector<f64>, g: &DVector<f64>) -> SaddleSolution {
        assert_eq!(f.len(), self.n);
        assert_eq!(g.len(), self.p);
        if let Some(spd) = &self.spd {
            let mut x = spd.solve(f);
            let mut residual = 0.0;
            let scale = f.norm().max(1e-300);
            for _ in 0..3 {
                let r = f - self.full.mul_vec(&x);
                residual = r.norm() / scale;
                if residual < 1e-15 {
                    break;
                }
                x += spd.solve(&r);
            }
            if f.norm() == 0.0 {
                residual = 0.0;
            }
            return SaddleSolution { x, z: DVector::zeros(0), residual };
        }
        let lu = self.factor.as_ref().unwrap();
        let mut b = DVector::zeros(self.n + self.p);
        b.rows_mut(0, self.n).copy_from(f);
        b.rows_mut(self.n, self.p).copy_from(g);
        let scale = b.norm();
        let mut sol = lu.solve(&b);
        let mut best = sol.clone();
        let mut best_res = f64::INFINITY;
        for _ in 0..self.max_refine {
            let r = &b - self.full.mul_vec(&sol);
            let res = if scale > 0.0 { r.norm() / scale } else { r.norm() };
            if res < best_res {
                best_res = res;
                best = sol.clone();
            }
            if res <= 1e-15 {
                break;
            }
            sol += lu.solve(&r);
        }
        SaddleSolution {
            x: best.rows(0, self.n).into_owned(),
            z: best.rows(self.n, self.p).into_owned(),
            residual: best_res,
        }
    }
}

/// Smallest eigenvalue of an SPD matrix by inverse power iteration.
pub fn smallest_eigenvalue_spd(a: &CsrMatrix, iters: usize) -> Result<f64> {
    let f = SpdFactor::new(a)?;
    let mut x = DVector::from_fn(a.nrows, |i, _| 1.0 + 0.01 * ((i % 5) as f64));
    x /= x.norm();
    let mut lam = 0.0;
    for _ in 0..iters {
        let y = f.solve(&x);
        let nrm = y.norm();
        let next = 1.0 / nrm;
        x = y / nrm;
        if (next - lam).abs() <= 1e-12 * next {
            lam = next;
            break;
        }
        lam = next;
    }
    Ok(lam)
}

/// Writes a coordinate real general Matrix Market file.
pub fn write_matrix_market<W: Write>(m: &CsrMatrix, mut w: W) -> std::io::Result<()> {
    writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
    writeln!(w, "{} {} {}", m.nrows, m.ncols, m.nnz())?;
    for (i, j, v) in m.triplets() {
        writeln!(w, "{} {} {}", i + 1, j + 1, crate::io::fmt_f64(v))?;
    }
    Ok(())
}

/// Reads coordinate real/integer Matrix Market (general or symmetric).
pub fn read_matrix_market<R: BufRead>(r: R) -> Result<CsrMatrix> {
    let bad = |msg: &str| Error::BadInput(format!("matrix market: {msg}"));
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| bad("empty file"))?.map_err(Error::Io)?;
    let h = header.to_lowercase();
    let fields: Vec<&str> = h.split_whitespace().collect();
    if fields.len() < 5 || fields[0] != "%%matrixmarket" || fields[1] != "matrix" || fields[2] != "coordinate" {
        return Err(bad("expected '%%MatrixMarket matrix coordinate ...' header"));
    }
    if fields[3] != "real" && fields[3] != "integer" {
        return Err(bad("only real or integer fields are supported"));
    }
    let symmetric = match fields[4] {
        "general" => false,
        "symmetric" => true,
        other => return Err(bad(&format!("unsupported symmetry '{other}'"))),
    };
    let mut size: Option<(usize, usize, usize)> = None;
    let mut t = Vec::new();
    for line in lines {
        let line = line.map_err(Error::Io)?;
        let s = line.trim();
        if s.is_empty() || s.starts_with('%') {
            continue;
        }
        let parts: Vec<&str> = s.split_whitespace().collect();
        match size {
            None => {
                if parts.len() != 3 {
                    return Err(bad("size line must have 3 entries"));
                }
                let p = |x: &str| x.parse::<usize>().map_err(|_| bad("bad size line"));
                size = Some((p(parts[0])?, p(parts[1])?, p(parts[2])?));
            }
            Some((nr, nc, _)) => {
                if parts.len() != 3 {
                    return Err(bad("entry line must have 3 entries"));
                }
                let i: usize = parts[0].parse().map_err(|_| bad("bad row index"))?;
                let j: usize = parts[1].parse().map_err(|_| bad("bad column index"))?;
                let v: f64 = parts[2].parse().map_err(|_| bad("bad value"))?;
                if i == 0 || j == 0 || i > nr || j > nc {
                    return Err(bad("index out of range"));
                }
                t.push((i - 1, j - 1, v));
                if symmetric && i != j {
                    t.push((j - 1, i - 1, v));
                }
            }
        }
    }
    let (nr, nc, nnz) = size.ok_or_else(|| bad("missing size line"))?;
    let stored = if symmetric { t.iter().filter(|e| e.0 >= e.1).count() } else { t.len() };
    if stored != nnz {
        return Err(bad(&format!("expected {nnz} entries, found {stored}")));
    }
    Ok(CsrMatrix::from_triplets(nr, nc, &t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_duplicates_and_transpose() {
        let m = CsrMatrix::from_triplets(2, 3, &[(0, 1, 1.0), (0, 1, 2.0), (1, 2, -1.0), (1, 0, 0.0)]);
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.get(0, 1), 3.0);
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(m.mul_vec(&x).as_slice(), &[6.0, -3.0]);
        let y = DVector::from_vec(vec![1.0, 1.0]);
        assert_eq!(m.tr_mul_vec(&y), m.transpose().mul_vec(&y));
    }

    #[test]
    fn saddle_with_dependent_constraints() {
        // minimize 1/2|x|^2 - x0 subject to x0 = x1 (stated twice)
        let l = CsrMatrix::identity(2);
        let c = CsrMatrix::from_dense(&[vec![1.0, -1.0], vec![2.0, -2.0]]);
        let s = SaddleSolver::new(&l, &c).unwrap();
        let sol = s.solve(&DVector::from_vec(vec![1.0, 0.0]), &DVector::zeros(2));
        assert!((sol.x[0] - 0.5).abs() < 1e-12 && (sol.x[1] - 0.5).abs() < 1e-12, "{:?}", sol.x);
        assert!(sol.residual < 1e-12);
    }

    #[test]
    fn spd_solve_and_eigen() {
        let a = CsrMatrix::from_dense(&[vec![4.0, 1.0], vec![1.0, 1.0]]);
        let f = SpdFactor::new(&a).unwrap();
        let x = f.solve(&DVector::from_vec(vec![1.0, 0.0]));
        assert!((x[0] - 1.0 / 3.0).abs() < 1e-14);
        let lam = smallest_eigenvalue_spd(&a, 200).unwrap();
        let exact = (5.0 - 13f64.sqrt()) / 2.0;
        assert!((lam - exact).abs() < 1e-10);
        assert!((spectral_norm(&a, 500) - (5.0 + 13f64.sqrt()) / 2.0).abs() < 1e-8);
    }

    #[test]
    fn matrix_market_roundtrip() {
        let m = CsrMatrix::from_triplets(3, 2, &[(0, 0, 0.1), (2, 1, -1.0 / 3.0)]);
        let mut buf = Vec::new();
        write_matrix_market(&m, &mut buf).unwrap();
        let back = read_matrix_market(&buf[..]).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn matrix_market_symmetric_expands() {
        let txt = "%%MatrixMarket matrix coordinate real symmetric\n2 2 2\n1 1 2\n2 1 1\n";
        let m = read_matrix_market(txt.as_bytes()).unwrap();
        assert_eq!(m.get(0, 1), 1.0);
        assert_eq!(m.get(1, 0), 1.0);
        assert!(read_matrix_market("garbage".as_bytes()).is_err());
    }
}
