//! Sensor graphs, the normalized Laplacian and the graph Fourier transform.

use std::path::Path;

use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::eigen;
use crate::error::{Error, Result};

/// Tolerance for the symmetry precondition of [`eigendecompose`].
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Undirected weighted sensor graph.
#[derive(Debug, Clone, PartialEq)]
pub struct StgGraph {
    pub num_nodes: usize,
    /// Edges as given by the caller, after validation.
    pub edges: Vec<(usize, usize, f64)>,
    pub adjacency: Array2<f64>,
    pub degree: Array1<f64>,
}

/// How distances from a distance-list file become adjacency weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencyMode {
    /// Weight 1 for every listed pair.
    #[default]
    Binary,
    /// Weight `1/distance`, divided by the largest such value.
    InverseDistance,
}

/// Builds a graph from an edge list.
///
/// With `symmetrize` the adjacency becomes `max(A, Aᵀ)`; without it the edge
/// list must already describe a symmetric matrix. A `threshold` turns weights
/// (read as distances) into binary connectivity: pairs at distance
/// `<= threshold` get weight 1 and the rest are dropped.
pub fn build_graph(
    edges: &[(usize, usize, f64)],
    num_nodes: usize,
    symmetrize: bool,
    threshold: Option<f64>,
) -> Result<StgGraph> {
    if num_nodes == 0 {
        return Err(Error::Input("graph needs at least one node".into()));
    }
    let mut adjacency = Array2::<f64>::zeros((num_nodes, num_nodes));
    let mut kept = Vec::with_capacity(edges.len());
    for &(i, j, w) in edges {
        if i >= num_nodes || j >= num_nodes {
            return Err(Error::Input(format!(
                "edge ({i}, {j}) out of range for {num_nodes} nodes"
            )));
        }
        if i == j {
            return Err(Error::Input(format!("self-loop on node {i}")));
        }
        if !w.is_finite() || w < 0.0 {
            return Err(Error::Input(format!(
                "edge ({i}, {j}) has invalid weight {w}"
            )));
        }
        let w = match threshold {
            Some(t) if w <= t => 1.0,
            Some(_) => continue,
            None => w,
        };
        adjacency[[i, j]] = adjacency[[i, j]].max(w);
        kept.push((i, j, w));
    }

    if symmetrize {
        for i in 0..num_nodes {
            for j in (i + 1)..num_nodes {
                let m = adjacency[[i, j]].max(adjacency[[j, i]]);
                adjacency[[i, j]] = m;
                adjacency[[j, i]] = m;
            }
        }
    } else {
        for i in 0..num_nodes {
            for j in (i + 1)..num_nodes {
                if adjacency[[i, j]] != adjacency[[j, i]] {
                    return Err(Error::Input(format!(
                        "edge list is not symmetric at ({i}, {j}); pass symmetrize to fix"
                    )));
                }
            }
        }
    }

    let degree = adjacency.sum_axis(Axis(1));
    Ok(StgGraph {
        num_nodes,
        edges: kept,
        adjacency,
        degree,
    })
}

/// Reads a `from,to,cost` distance-list CSV (zero-based node ids).
pub fn read_distance_csv(path: &Path) -> Result<Vec<(usize, usize, f64)>> {
    #[derive(Deserialize)]
    struct Row {
        from: usize,
        to: usize,
        cost: f64,
    }
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut out = Vec::new();
    for (line, row) in reader.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| Error::format(path, format!("row {}: {e}", line + 1)))?;
        if !(row.cost.is_finite() && row.cost > 0.0) {
            return Err(Error::format(
                path,
                format!("row {}: cost must be positive, got {}", line + 1, row.cost),
            ));
        }
        out.push((row.from, row.to, row.cost));
    }
    Ok(out)
}

pub fn write_distance_csv(path: &Path, edges: &[(usize, usize, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    w.write_record(["from", "to", "cost"])?;
    for &(i, j, c) in edges {
        w.write_record([i.to_string(), j.to_string(), c.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Loads a distance file and converts it to a symmetric graph.
pub fn graph_from_distance_file(
    path: &Path,
    num_nodes: usize,
    mode: AdjacencyMode,
) -> Result<StgGraph> {
    let distances = read_distance_csv(path)?;
    let edges = distance_edges(&distances, mode);
    build_graph(&edges, num_nodes, true, None).map_err(|e| match e {
        Error::Input(msg) => Error::format(path, msg),
        other => other,
    })
}

/// Converts distances to edge weights under `mode`.
pub fn distance_edges(
    distances: &[(usize, usize, f64)],
    mode: AdjacencyMode,
) -> Vec<(usize, usize, f64)> {
    match mode {
        AdjacencyMode::Binary => distances.iter().map(|&(i, j, _)| (i, j, 1.0)).collect(),
        AdjacencyMode::InverseDistance => {
            let max_inv = distances
                .iter()
                .map(|&(_, _, d)| 1.0 / d)
                .fold(0.0f64, f64::max);
            distances
                .iter()
                .map(|&(i, j, d)| (i, j, (1.0 / d) / max_inv))
                .collect()
        }
    }
}

/// Debug export of the adjacency as an `N×N` CSV without header.
pub fn write_adjacency_csv(path: &Path, g: &StgGraph) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    for row in g.adjacency.rows() {
        w.write_record(row.iter().map(|x| x.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// `L = I − D^{-1/2} A D^{-1/2}`; isolated nodes get identity rows.
pub fn normalized_laplacian(g: &StgGraph) -> Array2<f64> {
    let n = g.num_nodes;
    let inv_sqrt: Vec<f64> = g
        .degree
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let mut l = Array2::<f64>::eye(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let a = g.adjacency[[i, j]];
            if a != 0.0 {
                let v = inv_sqrt[i] * a * inv_sqrt[j];
                l[[i, j]] = -v;
                l[[j, i]] = -v;
            }
        }
    }
    l
}

/// Eigenbasis of a normalized Laplacian.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierBasis {
    /// Columns are eigenvectors, in ascending eigenvalue order.
    pub eigvecs: Array2<f64>,
    pub eigvals: Array1<f64>,
    pub lambda_max: f64,
    /// `2λ/λ_max − 1`, the argument of the Chebyshev filters.
    pub scaled_eigvals: Array1<f64>,
}

impl FourierBasis {
    /// Assembles a basis from sorted eigenpairs.
    pub fn from_parts(eigvecs: Array2<f64>, eigvals: Array1<f64>) -> Result<Self> {
        let n = eigvals.len();
        if eigvecs.dim() != (n, n) {
            return Err(Error::Shape(format!(
                "eigenvector matrix {:?} does not match {n} eigenvalues",
                eigvecs.dim()
            )));
        }
        let top = eigvals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lambda_max = if top < 1e-12 { 2.0 } else { top };
        let scaled_eigvals = eigvals.mapv(|l| 2.0 * l / lambda_max - 1.0);
        Ok(FourierBasis {
            eigvecs,
            eigvals,
            lambda_max,
            scaled_eigvals,
        })
    }

    /// Closed-form basis of the normalized Laplacian of the `n`-cycle.
    ///
    /// Eigenvalues are `1 − cos(2πk/n)` with cosine/sine eigenvectors. Used
    /// where `n` is too large for the dense eigensolver (scaling benchmarks).
    pub fn cycle(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::Input(format!("cycle graph needs n >= 3, got {n}")));
        }
        let nf = n as f64;
        let mut pairs: Vec<(f64, Vec<f64>)> = Vec::with_capacity(n);
        pairs.push((0.0, vec![1.0 / nf.sqrt(); n]));
        for k in 1..=(n / 2) {
            let w = 2.0 * std::f64::consts::PI * k as f64 / nf;
            let lam = 1.0 - w.cos();
            if 2 * k == n {
                let v = (0..n)
                    .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 } / nf.sqrt())
                    .collect();
                pairs.push((lam, v));
            } else {
                let s = (2.0 / nf).sqrt();
                pairs.push((lam, (0..n).map(|i| s * (w * i as f64).cos()).collect()));
                pairs.push((lam, (0..n).map(|i| s * (w * i as f64).sin()).collect()));
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut eigvecs = Array2::<f64>::zeros((n, n));
        let mut eigvals = Array1::<f64>::zeros(n);
        for (col, (lam, v)) in pairs.into_iter().enumerate() {
            eigvals[col] = lam;
            for (row, x) in v.into_iter().enumerate() {
                eigvecs[[row, col]] = x;
            }
        }
        Self::from_parts(eigvecs, eigvals)
    }

    pub fn num_nodes(&self) -> usize {
        self.eigvals.len()
    }

    /// `‖UᵀU − I‖_max`.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.eigvecs.t().dot(&self.eigvecs);
        let n = self.num_nodes();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram[[i, j]] - target).abs());
            }
        }
        worst
    }

    /// `Uᵀ 1`: the spectral image of a node-constant unit signal.
    pub fn transformed_ones(&self) -> Array1<f64> {
        self.eigvecs.sum_axis(Axis(0))
    }
}

/// Symmetric eigendecomposition with ascending eigenvalues and a fixed sign
/// convention: the largest-magnitude entry of each eigenvector is positive
/// (first such entry on ties).
pub fn eigendecompose(l: &Array2<f64>) -> Result<FourierBasis> {
    let n = l.nrows();
    if l.ncols() != n {
        return Err(Error::Input(format!(
            "matrix must be square, got {}x{}",
            n,
            l.ncols()
        )));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if (l[[i, j]] - l[[j, i]]).abs() > SYMMETRY_TOL {
                return Err(Error::Input(format!(
                    "matrix not symmetric at ({i}, {j}): {} vs {}",
                    l[[i, j]],
                    l[[j, i]]
                )));
            }
        }
    }
    let eig = eigen::jacobi(l)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.values[a].total_cmp(&eig.values[b]).then(a.cmp(&b)));

    let mut eigvecs = Array2::<f64>::zeros((n, n));
    let mut eigvals = Array1::<f64>::zeros(n);
    for (col, &src) in order.iter().enumerate() {
        eigvals[col] = eig.values[src];
        let v = eig.vectors.column(src);
        let mut pivot = 0;
        for i in 1..n {
            if v[i].abs() > v[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            eigvecs[[i, col]] = sign * v[i];
        }
    }
    FourierBasis::from_parts(eigvecs, eigvals)
}

/// Convenience: graph → Laplacian → basis.
pub fn fourier_basis(g: &StgGraph) -> Result<FourierBasis> {
    eigendecompose(&normalized_laplacian(g))
}

fn check_rows(basis: &FourierBasis, rows: usize, what: &str) -> Result<()> {
    if rows != basis.num_nodes() {
        return Err(Error::Shape(format!(
            "{what}: signal has {rows} rows but the basis has {} nodes",
            basis.num_nodes()
        )));
    }
    Ok(())
}

/// `X̃ = UᵀX`, column by column.
///
/// Every output entry is summed over nodes in ascending order, so the value
/// of a column does not depend on how many other columns are transformed
/// alongside it.
pub fn fourier_transform(basis: &FourierBasis, x: &Array2<f64>) -> Result<Array2<f64>> {
    check_rows(basis, x.nrows(), "fourier_transform")?;
    let n = basis.num_nodes();
    let t = x.ncols();
    let u = &basis.eigvecs;
    let mut out = Array2::<f64>::zeros((n, t));
    for i in 0..n {
        let mut row = out.row_mut(i);
        for node in 0..n {
            let w = u[[node, i]];
            row.zip_mut_with(&x.row(node), |o, &v| *o += w * v);
        }
    }
    Ok(out)
}

/// `X = UX̃`, the exact inverse of [`fourier_transform`].
pub fn fourier_reconstruct(basis: &FourierBasis, xt: &Array2<f64>) -> Result<Array2<f64>> {
    check_rows(basis, xt.nrows(), "fourier_reconstruct")?;
    let n = basis.num_nodes();
    let t = xt.ncols();
    let u = &basis.eigvecs;
    let mut out = Array2::<f64>::zeros((n, t));
    for node in 0..n {
        let mut row = out.row_mut(node);
        for i in 0..n {
            let w = u[[node, i]];
            row.zip_mut_with(&xt.row(i), |o, &v| *o += w * v);
        }
    }
    Ok(out)
}

/// Per-variable transform of an `N×D×T` signal.
pub fn fourier_transform_multivariate(
    basis: &FourierBasis,
    x: &Array3<f64>,
) -> Result<Array3<f64>> {
    map_variables(basis, x, fourier_transform)
}

pub fn fourier_reconstruct_multivariate(
    basis: &FourierBasis,
    xt: &Array3<f64>,
) -> Result<Array3<f64>> {
    map_variables(basis, xt, fourier_reconstruct)
}

fn map_variables(
    basis: &FourierBasis,
    x: &Array3<f64>,
    f: fn(&FourierBasis, &Array2<f64>) -> Result<Array2<f64>>,
) -> Result<Array3<f64>> {
    let (n, d, t) = x.dim();
    if d == 0 {
        return Err(Error::Shape("multivariate signal needs D >= 1".into()));
    }
    check_rows(basis, n, "multivariate transform")?;
    let mut out = Array3::<f64>::zeros((n, d, t));
    for var in 0..d {
        let slice = x.index_axis(Axis(1), var).to_owned();
        out.index_axis_mut(Axis(1), var).assign(&f(basis, &slice)?);
    }
    Ok(out)
}
