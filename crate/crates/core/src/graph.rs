//! Attributed graphs and their on-disk formats.
//!
//! Edge files hold whitespace-separated `src dst` pairs (0-indexed) and are
//! read as undirected. Attribute files are either headerless CSV (one row per
//! node) or the binary `RANDATTR` layout: 8-byte magic, `n` and `d` as
//! little-endian `u64`, then `n·d` little-endian `f32` values row-major.
//! Label files hold one `0`/`1` per line.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;
use crate::tensor::Tensor;

pub const ATTR_MAGIC: &[u8; 8] = b"RANDATTR";

/// Immutable attributed graph: symmetric binary adjacency without self-loops,
/// dense attribute rows, optional per-node anomaly labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    adjacency: SparseMatrix,
    attributes: Tensor,
    labels: Option<Vec<u8>>,
}

/// Bookkeeping from edge-list normalization.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EdgeStats {
    pub self_loops_dropped: usize,
    pub duplicates_merged: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// `D^{-1/2} A D^{-1/2}`
    Symmetric,
    /// `D^{-1} A`
    RowStochastic,
}

impl Graph {
    /// Builds a graph from an undirected edge list. Reversed and repeated
    /// pairs collapse to one edge; self-loops are dropped and counted.
    pub fn from_edges(
        attributes: Tensor,
        edges: &[(usize, usize)],
        labels: Option<Vec<u8>>,
    ) -> Result<(Graph, EdgeStats)> {
        let n = attributes.rows();
        let mut stats = EdgeStats::default();
        let mut pairs = Vec::with_capacity(edges.len() * 2);
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Format(format!(
                    "edge ({a}, {b}) references a node outside 0..{n}"
                )));
            }
            if a == b {
                stats.self_loops_dropped += 1;
                continue;
            }
            pairs.push((a.min(b), a.max(b)));
        }
        pairs.sort_unstable();
        let before = pairs.len();
        pairs.dedup();
        stats.duplicates_merged = before - pairs.len();
        let mut triplets = Vec::with_capacity(pairs.len() * 2);
        for (a, b) in pairs {
            triplets.push((a, b, 1.0));
            triplets.push((b, a, 1.0));
        }
        let adjacency = SparseMatrix::from_triplets(n, n, triplets)?;
        let g = Graph::new(adjacency, attributes, labels)?;
        Ok((g, stats))
    }

    /// Wraps an adjacency matrix after checking every invariant.
    pub fn new(
        adjacency: SparseMatrix,
        attributes: Tensor,
        labels: Option<Vec<u8>>,
    ) -> Result<Graph> {
        let n = attributes.rows();
        if adjacency.rows() != n || adjacency.cols() != n {
            return Err(Error::Consistency(format!(
                "adjacency is {}x{} but there are {n} attribute rows",
                adjacency.rows(),
                adjacency.cols()
            )));
        }
        if !attributes.all_finite() {
            return Err(Error::Format(
                "attribute matrix contains non-finite values".into(),
            ));
        }
        for i in 0..n {
            let (idx, vals) = adjacency.row(i);
            for (&j, &v) in idx.iter().zip(vals) {
                if j == i {
                    return Err(Error::Format(format!("self-loop stored at node {i}")));
                }
                if v != 1.0 || !adjacency.contains(j, i) {
                    return Err(Error::Format(format!(
                        "adjacency is not binary symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Consistency(format!(
                    "{} labels for {n} nodes",
                    l.len()
                )));
            }
            if l.iter().any(|&v| v > 1) {
                return Err(Error::Format("labels must be 0 or 1".into()));
            }
        }
        Ok(Graph {
            adjacency,
            attributes,
            labels,
        })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.attributes.rows()
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.attributes.cols()
    }

    pub fn adjacency(&self) -> &SparseMatrix {
        &self.adjacency
    }

    pub fn attributes(&self) -> &Tensor {
        &self.attributes
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    /// Undirected edge count.
    pub fn edge_count(&self) -> usize {
        self.adjacency.nnz() / 2
    }

    #[inline]
    pub fn degree(&self, i: usize) -> usize {
        self.adjacency.row_nnz(i)
    }

    #[inline]
    pub fn neighbors(&self, i: usize) -> &[usize] {
        self.adjacency.row(i).0
    }

    /// Edges `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.edge_count());
        for i in 0..self.n() {
            for &j in self.neighbors(i) {
                if i < j {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Same structure and attributes with labels removed.
    pub fn without_labels(&self) -> Graph {
        Graph {
            adjacency: self.adjacency.clone(),
            attributes: self.attributes.clone(),
            labels: None,
        }
    }

    pub fn with_labels(self, labels: Option<Vec<u8>>) -> Result<Graph> {
        Graph::new(self.adjacency, self.attributes, labels)
    }

    pub fn into_parts(self) -> (SparseMatrix, Tensor, Option<Vec<u8>>) {
        (self.adjacency, self.attributes, self.labels)
    }
}

/// Normalized adjacency with optional self-loops. Isolated nodes give an
/// all-zero row, or a single `1.0` on the diagonal when `self_loops` is set.
pub fn normalized_adjacency(g: &Graph, mode: Normalization, self_loops: bool) -> SparseMatrix {
    let n = g.n();
    let extra = usize::from(self_loops);
    let deg: Vec<f64> = (0..n).map(|i| (g.degree(i) + extra) as f64).collect();
    let mut indptr = Vec::with_capacity(n + 1);
    let mut indices = Vec::with_capacity(g.adjacency().nnz() + n * extra);
    let mut values = Vec::with_capacity(indices.capacity());
    indptr.push(0);
    for i in 0..n {
        let mut cols: Vec<usize> = g.neighbors(i).to_vec();
        if self_loops {
            let pos = cols.partition_point(|&c| c < i);
            cols.insert(pos, i);
        }
        for j in cols {
            let v = match mode {
                Normalization::RowStochastic => 1.0 / deg[i],
                Normalization::Symmetric => 1.0 / (deg[i] * deg[j]).sqrt(),
            };
            indices.push(j);
            values.push(v);
        }
        indptr.push(indices.len());
    }
    SparseMatrix::from_csr(n, n, indptr, indices, values)
        .expect("normalized adjacency preserves CSR structure")
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn read_edges(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = read_text(path)?;
    let mut edges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse = |tok: Option<&str>| -> Result<usize> {
            tok.ok_or_else(|| {
                Error::Format(format!(
                    "{}:{}: expected two node ids",
                    path.display(),
                    lineno + 1
                ))
            })?
            .parse::<usize>()
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))
        };
        let a = parse(it.next())?;
        let b = parse(it.next())?;
        if it.next().is_some() {
            return Err(Error::Format(format!(
                "{}:{}: trailing tokens after edge",
                path.display(),
                lineno + 1
            )));
        }
        edges.push((a, b));
    }
    Ok(edges)
}

/// Reads CSV or binary attributes, detected by the leading magic bytes.
pub fn read_attributes(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(ATTR_MAGIC) {
        return decode_binary_attributes(&bytes);
    }
    let text = String::from_utf8(bytes).map_err(|_| {
        Error::Format(format!(
            "{} is neither UTF-8 CSV nor RANDATTR",
            path.display()
        ))
    })?;
    let mut rows = 0usize;
    let mut cols: Option<usize> = None;
    let mut data = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let before = data.len();
        for tok in line.split(',') {
            let v: f64 = tok.trim().parse().map_err(|e| {
                Error::Format(format!("{}:{}: {e} ({tok:?})", path.display(), lineno + 1))
            })?;
            if !v.is_finite() {
                return Err(Error::Format(format!(
                    "{}:{}: non-finite attribute value",
                    path.display(),
                    lineno + 1
                )));
            }
            data.push(v);
        }
        let width = data.len() - before;
        match cols {
            None => cols = Some(width),
            Some(c) if c != width => {
                return Err(Error::Format(format!(
                    "{}:{}: {width} columns, expected {c}",
                    path.display(),
                    lineno + 1
                )))
            }
            _ => {}
        }
        rows += 1;
    }
    Tensor::from_vec(rows, cols.unwrap_or(0), data)
}

fn decode_binary_attributes(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 24 {
        return Err(Error::Format("truncated RANDATTR header".into()));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let expected = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| Error::Format("RANDATTR dimensions overflow".into()))?;
    let body = &bytes[24..];
    if body.len() != expected {
        return Err(Error::Format(format!(
            "RANDATTR body has {} bytes, header implies {expected}",
            body.len()
        )));
    }
    let mut data = Vec::with_capacity(n * d);
    for chunk in body.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        if !v.is_finite() {
            return Err(Error::Format(
                "non-finite attribute value in RANDATTR".into(),
            ));
        }
        data.push(v);
    }
    Tensor::from_vec(n, d, data)
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(lineno, l)| match l.trim() {
            "0" => Ok(0),
            "1" => Ok(1),
            other => Err(Error::Format(format!(
                "{}:{}: label must be 0 or 1, got {other:?}",
                path.display(),
                lineno + 1
            ))),
        })
        .collect()
}

/// Loads a graph from edge, attribute and optional label files.
pub fn load_graph(edge_path: &Path, attr_path: &Path, label_path: Option<&Path>) -> Result<Graph> {
    let attributes = read_attributes(attr_path)?;
    let edges = read_edges(edge_path)?;
    let labels = label_path.map(read_labels).transpose()?;
    if let Some(l) = &labels {
        if l.len() != attributes.rows() {
            return Err(Error::Consistency(format!(
                "{} labels but {} attribute rows",
                l.len(),
                attributes.rows()
            )));
        }
    }
    let (g, stats) = Graph::from_edges(attributes, &edges, labels)?;
    if stats.self_loops_dropped > 0 {
        log::warn!(
            "{}: dropped {} self-loop(s)",
            edge_path.display(),
            stats.self_loops_dropped
        );
    }
    if stats.duplicates_merged > 0 {
        log::info!(
            "{}: merged {} duplicate or reversed edge(s)",
            edge_path.display(),
            stats.duplicates_merged
        );
    }
    Ok(g)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(BufWriter::new(
        fs::File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

pub fn write_edges(g: &Graph, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    for (a, b) in g.edges() {
        writeln!(w, "{a} {b}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// CSV with shortest round-trip float formatting, so reloading is bit-exact.
pub fn write_attributes_csv(x: &Tensor, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    for r in 0..x.rows() {
        let line: Vec<String> = x.row(r).iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Binary `RANDATTR` layout; values are narrowed to `f32`.
pub fn write_attributes_binary(x: &Tensor, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let mut buf = Vec::with_capacity(24 + x.len() * 4);
    buf.extend_from_slice(ATTR_MAGIC);
    buf.extend_from_slice(&(x.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(x.cols() as u64).to_le_bytes());
    for &v in x.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_labels(labels: &[u8], path: &Path) -> Result<()> {
    let mut w = create(path)?;
    for l in labels {
        writeln!(w, "{l}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes edges and CSV attributes, plus labels when present and a path is given.
pub fn save_graph(
    g: &Graph,
    edge_path: &Path,
    attr_path: &Path,
    label_path: Option<&Path>,
) -> Result<()> {
    write_edges(g, edge_path)?;
    write_attributes_csv(g.attributes(), attr_path)?;
    if let (Some(labels), Some(p)) = (g.labels(), label_path) {
        write_labels(labels, p)?;
    }
    Ok(())
}
