//! CSV ingestion and re-serialization.
//!
//! Node file: `node_id, f0, f1, ...` one row per node, ids dense in
//! `0..N-1`. Edge file: `u, v` undirected pairs. Label file (optional):
//! `node_id, class`. A first line whose first field is not an integer is
//! treated as a header and skipped.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::numerics::dense::DenseMatrix;

pub fn load_graph(
    node_file: &Path,
    edge_file: &Path,
    label_file: Option<&Path>,
) -> Result<Graph> {
    let features = read_node_features(node_file)?;
    let edges = read_edges(edge_file, features.rows())?;
    let labels = match label_file {
        Some(path) => Some(read_labels(path, features.rows())?),
        None => None,
    };
    Graph::new(features, &edges, labels)
}

/// Writes `nodes.csv`, `edges.csv`, and `labels.csv` (when labels exist)
/// into `dir`, in the format `load_graph` reads back.
pub fn save_graph(g: &Graph, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let node_path = dir.join("nodes.csv");
    let mut w = writer(&node_path)?;
    for i in 0..g.n_nodes() {
        let mut line = i.to_string();
        for v in g.features().row(i) {
            line.push(',');
            line.push_str(&format!("{v:.17e}"));
        }
        writeln!(w, "{line}").map_err(|e| Error::io(&node_path, e))?;
    }

    let edge_path = dir.join("edges.csv");
    let mut w = writer(&edge_path)?;
    for (u, v) in g.undirected_edges() {
        writeln!(w, "{u},{v}").map_err(|e| Error::io(&edge_path, e))?;
    }

    if let Some(labels) = g.labels() {
        let label_path = dir.join("labels.csv");
        let mut w = writer(&label_path)?;
        for (i, &c) in labels.iter().enumerate() {
            writeln!(w, "{i},{c}").map_err(|e| Error::io(&label_path, e))?;
        }
    }
    Ok(())
}

fn writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

struct CsvLines {
    path: std::path::PathBuf,
    lines: std::io::Lines<BufReader<File>>,
    line_no: usize,
}

impl CsvLines {
    fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            lines: BufReader::new(file).lines(),
            line_no: 0,
        })
    }

    fn parse_err(&self, message: impl Into<String>) -> Error {
        Error::ParseFile {
            path: self.path.clone(),
            line: self.line_no,
            message: message.into(),
        }
    }

    /// Next non-empty line split into trimmed fields.
    fn next_fields(&mut self) -> Result<Option<Vec<String>>> {
        loop {
            self.line_no += 1;
            match self.lines.next() {
                None => return Ok(None),
                Some(Err(e)) => return Err(Error::io(&self.path, e)),
                Some(Ok(line)) => {
                    if line.trim().is_empty() {
                        continue;
                    }
                    return Ok(Some(
                        line.split(',').map(|f| f.trim().to_string()).collect(),
                    ));
                }
            }
        }
    }
}

fn read_node_features(path: &Path) -> Result<DenseMatrix> {
    let mut csv = CsvLines::open(path)?;
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut width: Option<usize> = None;
    let mut first = true;

    while let Some(fields) = csv.next_fields()? {
        let id = match fields[0].parse::<usize>() {
            Ok(id) => id,
            Err(_) if first => {
                first = false;
                continue; // header
            }
            Err(_) => return Err(csv.parse_err(format!("invalid node id '{}'", fields[0]))),
        };
        first = false;
        let feats: Vec<f64> = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| csv.parse_err(format!("invalid feature value '{f}'")))
            })
            .collect::<Result<_>>()?;
        match width {
            None => width = Some(feats.len()),
            Some(w) if w != feats.len() => {
                return Err(csv.parse_err(format!(
                    "ragged feature row: expected {w} features, got {}",
                    feats.len()
                )))
            }
            _ => {}
        }
        if rows.iter().any(|(seen, _)| *seen == id) {
            return Err(csv.parse_err(format!("duplicate node id {id}")));
        }
        rows.push((id, feats));
    }

    let n = rows.len();
    if n == 0 {
        return Err(Error::InvalidInput(format!(
            "node file {} contains no rows",
            path.display()
        )));
    }
    let mut ordered: Vec<Option<Vec<f64>>> = vec![None; n];
    for (id, feats) in rows {
        if id >= n {
            return Err(Error::InvalidInput(format!(
                "node ids must be dense 0..{}, found {id} in {}",
                n - 1,
                path.display()
            )));
        }
        ordered[id] = Some(feats);
    }
    let dense: Vec<Vec<f64>> = ordered.into_iter().map(|r| r.unwrap()).collect();
    Ok(DenseMatrix::from_rows(&dense))
}

fn read_edges(path: &Path, n_nodes: usize) -> Result<Vec<(usize, usize)>> {
    let mut csv = CsvLines::open(path)?;
    let mut edges = Vec::new();
    let mut first = true;

    while let Some(fields) = csv.next_fields()? {
        if fields.len() < 2 {
            return Err(csv.parse_err("edge rows need two fields"));
        }
        let parse = |f: &str| f.parse::<usize>();
        match (parse(&fields[0]), parse(&fields[1])) {
            (Ok(u), Ok(v)) => {
                if u >= n_nodes || v >= n_nodes {
                    return Err(csv.parse_err(format!(
                        "edge ({u}, {v}) references an unknown node (N = {n_nodes})"
                    )));
                }
                edges.push((u, v));
            }
            _ if first => {} // header
            _ => {
                return Err(csv.parse_err(format!(
                    "invalid edge endpoints '{}', '{}'",
                    fields[0], fields[1]
                )))
            }
        }
        first = false;
    }
    Ok(edges)
}

fn read_labels(path: &Path, n_nodes: usize) -> Result<Vec<usize>> {
    let mut csv = CsvLines::open(path)?;
    let mut labels: Vec<Option<usize>> = vec![None; n_nodes];
    let mut first = true;

    while let Some(fields) = csv.next_fields()? {
        if fields.len() < 2 {
            return Err(csv.parse_err("label rows need two fields"));
        }
        match (fields[0].parse::<usize>(), fields[1].parse::<usize>()) {
            (Ok(id), Ok(class)) => {
                if id >= n_nodes {
                    return Err(csv.parse_err(format!("label references unknown node {id}")));
                }
                if labels[id].is_some() {
                    return Err(csv.parse_err(format!("duplicate label for node {id}")));
                }
                labels[id] = Some(class);
            }
            _ if first => {}
            _ => return Err(csv.parse_err("invalid label row")),
        }
        first = false;
    }

    labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            l.ok_or_else(|| Error::InvalidInput(format!("node {i} has no label in {}", path.display())))
        })
        .collect()
}
