//! CSV readers and writers for adjacency matrices, series, forecasts and
//! partition maps.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a value
//! read back is bit-identical to the one written.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use stunet_core::partition::PartitionMap;
use stunet_core::{Graph, Tensor};

use crate::error::{Error, Result};

/// Asymmetry tolerated in dense adjacency files.
const SYMMETRY_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AdjacencyFormat {
    /// `N` rows of `N` weights. The diagonal is ignored.
    DenseCsv,
    /// `i,j,w` lines, symmetrized by taking the larger weight.
    EdgeList,
    /// `i,j,d` distance lines mapped to `exp(−d²/σ²)`, dropped below `epsilon`.
    DistanceGaussian { sigma: f64, epsilon: f64 },
}

impl fmt::Display for AdjacencyFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DenseCsv => f.write_str("dense_csv"),
            Self::EdgeList => f.write_str("edge_list"),
            Self::DistanceGaussian { sigma, epsilon } => write!(f, "distance_gaussian:{sigma}:{epsilon}"),
        }
    }
}

impl FromStr for AdjacencyFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let mut parts = s.split(':');
        match parts.next() {
            Some("dense_csv") => Ok(Self::DenseCsv),
            Some("edge_list") => Ok(Self::EdgeList),
            Some("distance_gaussian") => {
                let mut next = |what: &str| -> std::result::Result<f64, String> {
                    parts
                        .next()
                        .ok_or_else(|| format!("distance_gaussian needs {what}"))?
                        .parse()
                        .map_err(|e| format!("bad {what}: {e}"))
                };
                let sigma = next("sigma")?;
                let epsilon = next("epsilon")?;
                if !(sigma > 0.0) || !(0.0..=1.0).contains(&epsilon) {
                    return Err("sigma must be positive and epsilon in [0, 1]".into());
                }
                Ok(Self::DistanceGaussian { sigma, epsilon })
            }
            _ => Err(format!(
                "unknown adjacency format '{s}' (dense_csv, edge_list, distance_gaussian:SIGMA:EPSILON)"
            )),
        }
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Non-empty lines with their 1-based line numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn cell(path: &Path, line: usize, s: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::parse(path, line, format!("'{}' is not a number", s.trim())))?;
    if !v.is_finite() {
        return Err(Error::parse(path, line, format!("non-finite value '{}'", s.trim())));
    }
    Ok(v)
}

fn row(path: &Path, line: usize, l: &str) -> Result<Vec<f64>> {
    l.split(',').map(|s| cell(path, line, s)).collect()
}

/// A first line whose first cell is not a number is taken as a header.
fn is_header(l: &str) -> bool {
    l.split(',').next().is_some_and(|c| c.trim().parse::<f64>().is_err())
}

fn index(path: &Path, line: usize, s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::parse(path, line, format!("'{}' is not a node index", s.trim())))
}

pub fn load_adjacency(path: &Path, format: AdjacencyFormat, nodes: Option<usize>) -> Result<Graph> {
    let text = read(path)?;
    let weights = match format {
        AdjacencyFormat::DenseCsv => dense_weights(path, &text)?,
        AdjacencyFormat::EdgeList | AdjacencyFormat::DistanceGaussian { .. } => {
            let mut edges = Vec::new();
            for (line, l) in lines(&text) {
                if edges.is_empty() && is_header(l) {
                    continue;
                }
                let cells: Vec<&str> = l.split(',').collect();
                if cells.len() != 3 {
                    return Err(Error::parse(path, line, format!("expected i,j,value, got {} cells", cells.len())));
                }
                let (i, j) = (index(path, line, cells[0])?, index(path, line, cells[1])?);
                let v = cell(path, line, cells[2])?;
                let w = match format {
                    AdjacencyFormat::DistanceGaussian { sigma, epsilon } => {
                        if v < 0.0 {
                            return Err(Error::parse(path, line, format!("negative distance {v}")));
                        }
                        let w = (-(v * v) / (sigma * sigma)).exp();
                        if w >= epsilon {
                            w
                        } else {
                            0.0
                        }
                    }
                    _ => {
                        if v < 0.0 {
                            return Err(Error::parse(path, line, format!("negative weight {v}")));
                        }
                        v
                    }
                };
                edges.push((line, i, j, w));
            }
            let n = nodes.unwrap_or_else(|| edges.iter().map(|e| e.1.max(e.2) + 1).max().unwrap_or(0));
            if n == 0 {
                return Err(Error::format(path, "no edges and no node count given"));
            }
            let mut w = Tensor::zeros(&[n, n]);
            for (line, i, j, v) in edges {
                if i >= n || j >= n {
                    return Err(Error::parse(path, line, format!("edge ({i},{j}) out of range for {n} nodes")));
                }
                if i == j {
                    continue;
                }
                let v = v.max(w.at(i, j));
                w.set(i, j, v);
                w.set(j, i, v);
            }
            w
        }
    };
    Graph::from_dense(weights).map_err(|e| Error::format(path, e.to_string()))
}

fn dense_weights(path: &Path, text: &str) -> Result<Tensor> {
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    for (line, l) in lines(text) {
        if rows.is_empty() && is_header(l) {
            continue;
        }
        rows.push((line, row(path, line, l)?));
    }
    let n = rows.len();
    if n == 0 {
        return Err(Error::format(path, "empty adjacency matrix"));
    }
    for (line, r) in &rows {
        if r.len() != n {
            return Err(Error::parse(path, *line, format!("expected {n} columns, got {}", r.len())));
        }
    }
    let mut w = Tensor::zeros(&[n, n]);
    for (i, (line, r)) in rows.iter().enumerate() {
        for (j, &v) in r.iter().enumerate() {
            if v < 0.0 {
                return Err(Error::parse(path, *line, format!("negative weight {v} at column {}", j + 1)));
            }
            if (v - rows[j].1[i]).abs() > SYMMETRY_TOL {
                return Err(Error::parse(
                    path,
                    *line,
                    format!("asymmetric weights: ({i},{j}) = {v} but ({j},{i}) = {}", rows[j].1[i]),
                ));
            }
            if i != j {
                w.set(i, j, v);
            }
        }
    }
    // Symmetrize within the tolerance so the graph sees an exact mirror.
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (w.at(i, j) + w.at(j, i));
            w.set(i, j, v);
            w.set(j, i, v);
        }
    }
    Ok(w)
}

pub fn dense_csv(graph: &Graph) -> String {
    let w = graph.weights();
    let mut s = String::new();
    for i in 0..graph.node_count() {
        s.push_str(&join_row(w.row(i)));
        s.push('\n');
    }
    s
}

pub fn write_adjacency(path: &Path, graph: &Graph) -> Result<()> {
    write(path, &dense_csv(graph))
}

fn join_row(values: &[f64]) -> String {
    let mut s = String::new();
    for (k, v) in values.iter().enumerate() {
        if k > 0 {
            s.push(',');
        }
        let _ = write!(s, "{v}");
    }
    s
}

/// Reads `T` rows of `N·D` values, node-major (`node0_f0, node0_f1, …`).
pub fn load_series(path: &Path, nodes: usize) -> Result<Vec<Tensor>> {
    let text = read(path)?;
    let mut steps = Vec::new();
    let mut width = None;
    for (line, l) in lines(&text) {
        if steps.is_empty() && width.is_none() && is_header(l) {
            continue;
        }
        let r = row(path, line, l)?;
        let w = *width.get_or_insert(r.len());
        if r.len() != w {
            return Err(Error::parse(path, line, format!("expected {w} columns, got {}", r.len())));
        }
        if nodes == 0 || w % nodes != 0 {
            return Err(Error::parse(path, line, format!("{w} columns is not a multiple of {nodes} nodes")));
        }
        steps.push(Tensor::new(&[nodes, w / nodes], r)?);
    }
    if steps.is_empty() {
        return Err(Error::format(path, "series has no rows"));
    }
    Ok(steps)
}

/// One row per step with a `n{i}_f{d}` header.
pub fn series_csv(steps: &[Tensor]) -> String {
    let mut s = String::new();
    if let Some(first) = steps.first() {
        let (n, d) = (first.rows(), first.cols());
        let header: Vec<String> = (0..n).flat_map(|i| (0..d).map(move |f| format!("n{i}_f{f}"))).collect();
        s.push_str(&header.join(","));
        s.push('\n');
    }
    for x in steps {
        s.push_str(&join_row(x.data()));
        s.push('\n');
    }
    s
}

pub fn write_series(path: &Path, steps: &[Tensor]) -> Result<()> {
    write(path, &series_csv(steps))
}

/// Lines `level k: node i -> super j`, one per node and level, where level
/// `k` maps nodes of level `k − 1` to level `k`.
pub fn partition_text(map: &PartitionMap) -> String {
    let mut s = String::new();
    for (k, level) in map.levels.iter().enumerate() {
        for (i, &j) in level.assignment.iter().enumerate() {
            let _ = writeln!(s, "level {}: node {i} -> super {j}", k + 1);
        }
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write(path, text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), text).unwrap();
        f
    }

    #[test]
    fn dense_two_nodes() {
        let f = file("0,1\n1,0\n");
        let g = load_adjacency(f.path(), AdjacencyFormat::DenseCsv, None).unwrap();
        assert_eq!(g.node_count(), 2);
        assert_eq!(g.edges(), vec![(0, 1, 1.0)]);
    }

    #[test]
    fn dense_rejects_asymmetry_and_negatives_with_line() {
        let f = file("0,1\n2,0\n");
        let e = load_adjacency(f.path(), AdjacencyFormat::DenseCsv, None).unwrap_err().to_string();
        assert!(e.contains(":1:") && e.contains("asymmetric"), "{e}");
        let f = file("0,-1\n-1,0\n");
        let e = load_adjacency(f.path(), AdjacencyFormat::DenseCsv, None).unwrap_err().to_string();
        assert!(e.contains("negative"), "{e}");
    }

    #[test]
    fn edge_list_symmetrized_by_max() {
        let f = file("i,j,w\n0,1,5\n1,0,2\n1,2,1\n");
        let g = load_adjacency(f.path(), AdjacencyFormat::EdgeList, None).unwrap();
        assert_eq!(g.weight(0, 1), 5.0);
        assert_eq!(g.weight(1, 0), 5.0);
        assert_eq!(g.node_count(), 3);
        let g = load_adjacency(f.path(), AdjacencyFormat::EdgeList, Some(5)).unwrap();
        assert_eq!(g.node_count(), 5);
    }

    #[test]
    fn gaussian_kernel() {
        let f = file("0,1,0\n1,2,10\n");
        let fmt = AdjacencyFormat::DistanceGaussian { sigma: 1.0, epsilon: 0.1 };
        let g = load_adjacency(f.path(), fmt, None).unwrap();
        assert_eq!(g.weight(0, 1), 1.0);
        assert_eq!(g.weight(1, 2), 0.0);
    }

    #[test]
    fn nan_is_rejected_with_line() {
        let f = file("1,2\nNaN,3\n");
        let e = load_series(f.path(), 2).unwrap_err().to_string();
        assert!(e.contains(":2:") && e.contains("non-finite"), "{e}");
    }

    #[test]
    fn series_round_trip_is_bit_exact() {
        let steps = vec![
            Tensor::new(&[2, 2], vec![0.1, 1.0 / 3.0, -2.5e-300, 7.0]).unwrap(),
            Tensor::new(&[2, 2], vec![1e20, 0.0, -0.0, std::f64::consts::PI]).unwrap(),
        ];
        let f = file(&series_csv(&steps));
        assert_eq!(load_series(f.path(), 2).unwrap(), steps);
    }

    #[test]
    fn format_names_round_trip() {
        for f in ["dense_csv", "edge_list", "distance_gaussian:2:0.1"] {
            assert_eq!(f.parse::<AdjacencyFormat>().unwrap().to_string(), f);
        }
    }
}
