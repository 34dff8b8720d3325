//! File formats: JSON records, CSV tables, problem descriptors, run manifests.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{read_matrix_market, write_matrix_market, CsrMatrix};
use crate::vi_core::{ComplementarityResiduals, VIProblem, VISolution};

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{:.16e}", v)
}

/// Scalar broadcast or explicit vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VectorSpec {
    Scalar(f64),
    Values(Vec<f64>),
}

impl VectorSpec {
    pub fn resolve(&self, n: usize, what: &str) -> Result<DVector<f64>> {
        match self {
            VectorSpec::Scalar(v) => Ok(DVector::from_element(n, *v)),
            VectorSpec::Values(v) if v.len() == n => Ok(DVector::from_column_slice(v)),
            VectorSpec::Values(v) => Err(Error::Dimension(format!("{what} has length {}, expected {n}", v.len()))),
        }
    }
}

/// `{n, m, d, A_path, K_paths, u}`; paths are relative to the descriptor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemDescriptor {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    #[serde(rename = "A_path")]
    pub a_path: String,
    #[serde(rename = "K_paths")]
    pub k_paths: Vec<String>,
    pub u: VectorSpec,
}

fn read_mtx(path: &Path) -> Result<CsrMatrix> {
    let f = File::open(path).map_err(|e| Error::BadInput(format!("{}: {e}", path.display())))?;
    read_matrix_market(BufReader::new(f))
}

pub fn load_problem(path: &Path) -> Result<VIProblem> {
    let text = fs::read_to_string(path).map_err(|e| Error::BadInput(format!("{}: {e}", path.display())))?;
    let desc: ProblemDescriptor =
        serde_json::from_str(&text).map_err(|e| Error::BadInput(format!("{}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let a = read_mtx(&dir.join(&desc.a_path))?;
    let k = desc.k_paths.iter().map(|p| read_mtx(&dir.join(p))).collect::<Result<Vec<_>>>()?;
    if k.len() != desc.d {
        return Err(Error::Dimension(format!("descriptor says d = {}, got {} K files", desc.d, k.len())));
    }
    let u = desc.u.resolve(desc.n, "u")?;
    let prob = VIProblem::new(a, k, u)?;
    if prob.n != desc.n || prob.m != desc.m {
        return Err(Error::Dimension(format!(
            "descriptor says n = {}, m = {}; operators give n = {}, m = {}",
            desc.n, desc.m, prob.n, prob.m
        )));
    }
    Ok(prob)
}

/// Writes `A.mtx`, `K1.mtx`, ... and `problem.json` into `dir`.
pub fn save_problem(dir: &Path, prob: &VIProblem) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    write_matrix_market(&prob.a, BufWriter::new(File::create(dir.join("A.mtx"))?))?;
    let mut k_paths = Vec::new();
    for (i, b) in prob.k.iter().enumerate() {
        let name = format!("K{}.mtx", i + 1);
        write_matrix_market(b, BufWriter::new(File::create(dir.join(&name))?))?;
        k_paths.push(name);
    }
    let desc = ProblemDescriptor {
        n: prob.n,
        m: prob.m,
        d: prob.d,
        a_path: "A.mtx".into(),
        k_paths,
        u: VectorSpec::Values(prob.u.iter().copied().collect()),
    };
    let path = dir.join("problem.json");
    write_json(&path, &desc)?;
    Ok(path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::BadInput(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::BadInput(format!("{}: {e}", path.display())))
}

pub fn vec_of(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

/// Rows of a dense matrix.
pub fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn matrix_from_rows(rows: &[Vec<f64>], ncols: usize) -> Result<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension(format!("expected {ncols} columns in every row")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionRecord {
    pub y: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub residuals: ComplementarityResiduals,
    pub eps_active: f64,
    pub iterations: usize,
    /// Per block: `I`, `S` (strongly active) or `B` (biactive).
    pub sets: String,
}

impl SolutionRecord {
    pub fn new(prob: &VIProblem, sol: &VISolution) -> Self {
        let labels = sol.sets(prob).labels(prob.m);
        SolutionRecord {
            y: vec_of(&sol.y),
            q: rows_of(&sol.q),
            residuals: sol.residuals,
            eps_active: sol.eps_active,
            iterations: sol.iterations,
            sets: labels.into_iter().map(|l| ['I', 'S', 'B'][l as usize]).collect(),
        }
    }

    pub fn to_solution(&self, prob: &VIProblem) -> Result<VISolution> {
        if self.y.len() != prob.n || self.q.len() != prob.m {
            return Err(Error::Dimension("stored solution does not fit the problem".into()));
        }
        let q = matrix_from_rows(&self.q, prob.d)?;
        let mut s = VISolution::new(prob, DVector::from_column_slice(&self.y), q);
        s.eps_active = self.eps_active;
        s.iterations = self.iterations;
        Ok(s)
    }
}

/// Columns of equal length under the given headers.
pub fn write_columns_csv(path: &Path, headers: &[&str], cols: &[&[f64]]) -> Result<()> {
    let len = cols.first().map_or(0, |c| c.len());
    if headers.len() != cols.len() || cols.iter().any(|c| c.len() != len) {
        return Err(Error::Dimension("CSV columns must match headers and share a length".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", headers.join(","))?;
    for i in 0..len {
        let row: Vec<String> = cols.iter().map(|c| fmt_f64(c[i])).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// A nodal field on a `side x side` grid, one grid row per line (`j` fixed, `i` along the line).
pub fn write_grid_csv(path: &Path, field: &DVector<f64>, side: usize) -> Result<()> {
    if side * side != field.len() {
        return Err(Error::Dimension(format!("field of length {} is not {side}^2", field.len())));
    }
    let mut w = BufWriter::new(File::create(path)?);
    for j in 0..side {
        let row: Vec<String> = (0..side).map(|i| fmt_f64(field[j * side + i])).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_grid_csv`] (also reads single-column files).
pub fn read_vector_csv(path: &Path) -> Result<DVector<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::BadInput(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        for tok in line.split(',') {
            let v: f64 = tok.trim().parse().map_err(|_| Error::BadInput(format!("not a number: {tok:?}")))?;
            out.push(v);
        }
    }
    Ok(DVector::from_vec(out))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// One per output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub input_hashes: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub wall_seconds: f64,
    pub versions: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("tvvi".to_string(), env!("CARGO_PKG_VERSION").to_string());
        RunManifest {
            command: command.to_string(),
            config,
            input_hashes: BTreeMap::new(),
            outputs: vec![],
            wall_seconds: 0.0,
            versions,
        }
    }

    pub fn hash_input(&mut self, path: &Path) -> Result<()> {
        let h = sha256_file(path)?;
        self.input_hashes.insert(path.display().to_string(), h);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("manifest.json"), self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fmt_round_trips() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 1.7976931348623157e308, 5e-324] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn vector_spec_parses_both_forms() {
        let s: VectorSpec = serde_json::from_str("2.5").unwrap();
        assert_eq!(s.resolve(3, "u").unwrap(), DVector::from_element(3, 2.5));
        let s: VectorSpec = serde_json::from_str("[1, 2]").unwrap();
        assert!(s.resolve(3, "u").is_err());
    }
}
