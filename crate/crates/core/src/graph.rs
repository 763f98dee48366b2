//! Undirected area adjacency graphs.
//!
//! Edge lists are plain text, one `labelA labelB` pair per line, with `#`
//! starting a comment. Area labels are declared up front, either directly or
//! through an `index,label` CSV table.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Undirected graph over labelled areas with sorted neighbour lists.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyGraph {
    labels: Vec<String>,
    neighbours: Vec<Vec<usize>>,
    n_components: usize,
    component_of: Vec<usize>,
}

impl AdjacencyGraph {
    /// Builds a graph from zero-based index pairs.
    pub fn from_edges(labels: Vec<String>, edges: &[(usize, usize)]) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::Data("graph needs at least one area".into()));
        }
        let mut sets = vec![BTreeSet::new(); n];
        for (k, &(i, j)) in edges.iter().enumerate() {
            if i >= n || j >= n {
                return Err(Error::Data(format!(
                    "edge {k} references area index outside 0..{n}"
                )));
            }
            if i == j {
                return Err(Error::Data(format!("edge {k}: self-loop on {}", labels[i])));
            }
            if !sets[i].insert(j) {
                return Err(Error::Data(format!(
                    "edge {k}: duplicate edge {} {}",
                    labels[i], labels[j]
                )));
            }
            sets[j].insert(i);
        }
        let neighbours: Vec<Vec<usize>> = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        let (n_components, component_of) = components(&neighbours);
        Ok(Self {
            labels,
            neighbours,
            n_components,
            component_of,
        })
    }

    /// Parses an edge list over the declared labels. Errors carry the 1-based
    /// line number of the offending pair.
    pub fn parse_edge_list(labels: Vec<String>, text: &str) -> Result<Self> {
        let index: HashMap<&str, usize> = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect();
        if index.len() != labels.len() {
            return Err(Error::Data("duplicate area label in label table".into()));
        }
        let mut seen = BTreeSet::new();
        let mut edges = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let parts: Vec<&str> = content.split_whitespace().collect();
            if parts.len() != 2 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected two labels, found {}", parts.len()),
                });
            }
            let lookup = |l: &str| {
                index.get(l).copied().ok_or_else(|| Error::Parse {
                    line,
                    message: format!("unknown area label {l:?}"),
                })
            };
            let (a, b) = (lookup(parts[0])?, lookup(parts[1])?);
            if a == b {
                return Err(Error::Parse {
                    line,
                    message: format!("self-loop on {:?}", parts[0]),
                });
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::Parse {
                    line,
                    message: format!("duplicate edge {} {}", parts[0], parts[1]),
                });
            }
            edges.push((a, b));
        }
        Self::from_edges(labels, &edges)
    }

    /// Reads an edge list file. Without a label table the labels are the
    /// distinct names in order of first appearance.
    pub fn load(edge_path: &Path, label_path: Option<&Path>) -> Result<Self> {
        let text = fs::read_to_string(edge_path).map_err(|e| Error::io(edge_path, e))?;
        let labels = match label_path {
            Some(p) => read_label_table(p)?,
            None => labels_in_order(&text),
        };
        Self::parse_edge_list(labels, &text)
    }

    pub fn n_areas(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn neighbours(&self, i: usize) -> &[usize] {
        &self.neighbours[i]
    }

    /// Neighbour count per area (the diagonal of `D_W`).
    pub fn degrees(&self) -> Vec<usize> {
        self.neighbours.iter().map(Vec::len).collect()
    }

    pub fn n_edges(&self) -> usize {
        self.neighbours.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    pub fn is_connected(&self) -> bool {
        self.n_components == 1
    }

    /// Component index for each area, numbered by first appearance.
    pub fn component_of(&self) -> &[usize] {
        &self.component_of
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Same graph with areas relabelled so that new index `i` is old index
    /// `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let n = self.n_areas();
        let mut inverse = vec![usize::MAX; n];
        for (new, &old) in order.iter().enumerate() {
            if old >= n || inverse[old] != usize::MAX {
                return Err(Error::Data("permutation is not a bijection".into()));
            }
            inverse[old] = new;
        }
        if order.len() != n {
            return Err(Error::Data("permutation length differs from area count".into()));
        }
        let labels = order.iter().map(|&o| self.labels[o].clone()).collect();
        let mut edges = Vec::with_capacity(self.n_edges());
        for (i, nb) in self.neighbours.iter().enumerate() {
            for &j in nb {
                if i < j {
                    edges.push((inverse[i], inverse[j]));
                }
            }
        }
        Self::from_edges(labels, &edges)
    }
}

fn components(neighbours: &[Vec<usize>]) -> (usize, Vec<usize>) {
    let n = neighbours.len();
    let mut comp = vec![usize::MAX; n];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        comp[start] = count;
        stack.push(start);
        while let Some(v) = stack.pop() {
            for &w in &neighbours[v] {
                if comp[w] == usize::MAX {
                    comp[w] = count;
                    stack.push(w);
                }
            }
        }
        count += 1;
    }
    (count, comp)
}

fn labels_in_order(text: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for raw in text.lines() {
        let content = raw.split('#').next().unwrap_or("");
        for tok in content.split_whitespace() {
            if seen.insert(tok.to_string()) {
                out.push(tok.to_string());
            }
        }
    }
    out
}

/// Reads an `index,label` table. Indices are 1-based and must cover
/// `1..=n` exactly once.
pub fn read_label_table(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_label_table(&text)
}

pub fn parse_label_table(text: &str) -> Result<Vec<String>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows: Vec<(usize, String)> = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        if rec.len() < 2 {
            return Err(Error::Parse {
                line,
                message: "expected index,label".into(),
            });
        }
        let idx: usize = rec[0].parse().map_err(|_| Error::Parse {
            line,
            message: format!("bad area index {:?}", &rec[0]),
        })?;
        rows.push((idx, rec[1].to_string()));
    }
    rows.sort_by_key(|r| r.0);
    for (pos, (idx, _)) in rows.iter().enumerate() {
        if *idx != pos + 1 {
            return Err(Error::Data(format!(
                "area indices must run 1..={} without gaps (found {idx} at position {})",
                rows.len(),
                pos + 1
            )));
        }
    }
    Ok(rows.into_iter().map(|r| r.1).collect())
}
