//! Class prototypes: word vectors plus graph-propagated word vectors.
//!
//! The class graph is the minimum spanning tree of the complete graph whose
//! edge weights are Euclidean distances between class word vectors. Edges only
//! select topology; the adjacency stores binary edge presence.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use crate::datamodel::WordTable;
use crate::diffmath::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MstEdge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

/// Minimum-spanning-tree graph over class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticGraph {
    nodes: Vec<String>,
    edges: Vec<MstEdge>,
    /// Binary symmetric adjacency without self-loops.
    adjacency: Tensor,
}

/// Word vector, graph vector and their concatenation for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrototype {
    pub label: String,
    pub word_vec: Vec<f64>,
    pub graph_vec: Vec<f64>,
    pub composed: Vec<f64>,
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

struct DisjointSet {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            Ordering::Less => self.parent[ra] = rb,
            Ordering::Greater => self.parent[rb] = ra,
            Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }
}

impl SemanticGraph {
    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn edges(&self) -> &[MstEdge] {
        &self.edges
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.edges.iter().map(|e| e.weight).sum()
    }

    /// Position of `label` among the graph nodes.
    pub fn position(&self, label: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n == label)
    }

    /// `D̃^{-1/2} (A + I) D̃^{-1/2}`.
    pub fn normalized_adjacency(&self) -> Tensor {
        normalize_adjacency(&self.adjacency).expect("square adjacency")
    }

    /// One graph-convolution layer `Â · features · weight`, recorded on `tape`.
    pub fn graph_convolve(&self, tape: &mut Tape, features: Var, weight: Var) -> Result<Var> {
        let rows = tape.value(features).rows();
        if rows != self.len() {
            return Err(Error::Dimension(format!(
                "graph has {} nodes but features have {rows} rows",
                self.len()
            )));
        }
        propagate(tape, &self.normalized_adjacency(), features, weight)
    }

    /// Builds prototypes for every graph node from `words` and a GCN weight.
    pub fn compose_prototypes(
        &self,
        words: &WordTable,
        gcn_weight: &Tensor,
    ) -> Result<Vec<ClassPrototype>> {
        check_same_labels(self, words)?;
        let table = words.subset(&self.nodes)?;
        let mut tape = Tape::new();
        let features = tape.constant(word_matrix(&table)?);
        let weight = tape.constant(gcn_weight.clone());
        let graph = self.graph_convolve(&mut tape, features, weight)?;
        let out = tape.value(graph);
        Ok(table
            .entries()
            .iter()
            .enumerate()
            .map(|(i, (label, w))| {
                let graph_vec = out.row(i).to_vec();
                let mut composed = w.clone();
                composed.extend_from_slice(&graph_vec);
                ClassPrototype {
                    label: label.clone(),
                    word_vec: w.clone(),
                    graph_vec,
                    composed,
                }
            })
            .collect())
    }
}

/// Symmetric normalisation of `A + I`.
pub fn normalize_adjacency(adjacency: &Tensor) -> Result<Tensor> {
    let n = adjacency.rows();
    if adjacency.rank() != 2 || adjacency.cols() != n {
        return Err(Error::Dimension(format!(
            "adjacency must be square, got {:?}",
            adjacency.shape()
        )));
    }
    let degree: Vec<f64> = (0..n)
        .map(|i| 1.0 + adjacency.row(i).iter().sum::<f64>())
        .collect();
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let a = adjacency.get(i, j) + if i == j { 1.0 } else { 0.0 };
            out.push(a / (degree[i] * degree[j]).sqrt());
        }
    }
    Tensor::matrix(n, n, out)
}

/// `a_hat · features · weight` with a constant propagation matrix.
pub fn propagate(tape: &mut Tape, a_hat: &Tensor, features: Var, weight: Var) -> Result<Var> {
    let a = tape.constant(a_hat.clone());
    let ax = tape.matmul(a, features)?;
    tape.matmul(ax, weight)
}

pub(crate) fn word_matrix(table: &WordTable) -> Result<Tensor> {
    let rows: Vec<&[f64]> = table.entries().iter().map(|(_, v)| v.as_slice()).collect();
    Tensor::from_rows(&rows)
}

fn check_same_labels(graph: &SemanticGraph, words: &WordTable) -> Result<()> {
    let g: BTreeSet<&str> = graph.nodes.iter().map(String::as_str).collect();
    let w: BTreeSet<&str> = words.entries().iter().map(|(l, _)| l.as_str()).collect();
    if g != w {
        let only_graph: Vec<&str> = g.difference(&w).copied().collect();
        let only_words: Vec<&str> = w.difference(&g).copied().collect();
        return Err(Error::Schema(format!(
            "graph/word-table label mismatch: only in graph [{}], only in table [{}]",
            only_graph.join(", "),
            only_words.join(", ")
        )));
    }
    Ok(())
}

/// Builds the MST class graph from a word-vector table (node order = table order).
///
/// Ties in edge weight are broken by the lexicographic label pair.
pub fn build_semantic_graph(words: &WordTable) -> Result<SemanticGraph> {
    let n = words.len();
    if n < 2 {
        return Err(Error::Schema("semantic graph needs at least 2 classes".into()));
    }
    let entries = words.entries();
    let mut candidates = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let weight = euclidean(&entries[i].1, &entries[j].1);
            let (la, lb) = (&entries[i].0, &entries[j].0);
            let key = if la <= lb { (la, lb) } else { (lb, la) };
            candidates.push((weight, key, i, j));
        }
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then_with(|| x.1.cmp(&y.1)));

    let mut sets = DisjointSet::new(n);
    let mut edges = Vec::with_capacity(n - 1);
    let mut adjacency = Tensor::zeros(&[n, n])?;
    for (weight, _, a, b) in candidates {
        if sets.union(a, b) {
            edges.push(MstEdge { a, b, weight });
            adjacency.data_mut()[a * n + b] = 1.0;
            adjacency.data_mut()[b * n + a] = 1.0;
            if edges.len() == n - 1 {
                break;
            }
        }
    }
    Ok(SemanticGraph {
        nodes: entries.iter().map(|(l, _)| l.clone()).collect(),
        edges,
        adjacency,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(points: &[&[f64]]) -> WordTable {
        WordTable::new(
            points
                .iter()
                .enumerate()
                .map(|(i, p)| (format!("c{i}"), p.to_vec()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn two_classes_single_edge() {
        let g = build_semantic_graph(&table(&[&[0.0, 0.0], &[3.0, 4.0]])).unwrap();
        assert_eq!(g.edges().len(), 1);
        assert_eq!(g.total_weight(), 5.0);
    }

    #[test]
    fn collinear_classes_form_a_path() {
        let g = build_semantic_graph(&table(&[&[2.0], &[0.0], &[3.0], &[1.0]])).unwrap();
        assert_eq!(g.total_weight(), 3.0);
        let mut pairs: Vec<(usize, usize)> = g
            .edges()
            .iter()
            .map(|e| (e.a.min(e.b), e.a.max(e.b)))
            .collect();
        pairs.sort();
        // positions 0,1,2,3 live at table rows 1,3,0,2
        assert_eq!(pairs, vec![(0, 2), (0, 3), (1, 3)]);
    }

    #[test]
    fn duplicate_labels_rejected() {
        let t = WordTable::new(vec![("a".into(), vec![1.0]), ("a".into(), vec![2.0])]);
        assert!(matches!(t, Err(Error::Schema(_))));
    }

    #[test]
    fn ties_break_by_label_pair() {
        // unit square: four sides tie, the pair (c2,c3) sorts last and is dropped
        let g = build_semantic_graph(&table(&[
            &[0.0, 0.0],
            &[1.0, 0.0],
            &[1.0, 1.0],
            &[0.0, 1.0],
        ]))
        .unwrap();
        assert_eq!(g.total_weight(), 3.0);
        let a = g.adjacency();
        assert_eq!((a.get(0, 1), a.get(0, 3), a.get(1, 2)), (1.0, 1.0, 1.0));
        assert_eq!(a.get(2, 3), 0.0);
    }

    #[test]
    fn zero_adjacency_identity_weight_is_identity() {
        let a_hat = normalize_adjacency(&Tensor::zeros(&[3, 3]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let x = Tensor::matrix(3, 2, vec![1.0, -2.0, 0.5, 4.0, 3.0, 0.0]).unwrap();
        let f = tape.constant(x.clone());
        let w = tape.constant(Tensor::identity(2).unwrap());
        let out = propagate(&mut tape, &a_hat, f, w).unwrap();
        assert_eq!(tape.value(out), &x);
    }

    #[test]
    fn two_node_constant_features_give_equal_rows() {
        let g = build_semantic_graph(&table(&[&[0.0], &[1.0]])).unwrap();
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::filled(&[2, 3], 0.7).unwrap());
        let w = tape.constant(Tensor::identity(3).unwrap());
        let out = g.graph_convolve(&mut tape, f, w).unwrap();
        let v = tape.value(out);
        assert_eq!(v.row(0), v.row(1));
    }

    #[test]
    fn three_node_path_normalized_adjacency_by_hand() {
        // path 0-1-2: degrees with self-loops are 2, 3, 2
        let g = build_semantic_graph(&table(&[&[0.0], &[1.0], &[2.0]])).unwrap();
        let a = g.normalized_adjacency();
        let s6 = 1.0 / 6f64.sqrt();
        let expected = [0.5, s6, 0.0, s6, 1.0 / 3.0, s6, 0.0, s6, 0.5];
        for (x, y) in a.data().iter().zip(expected) {
            assert!((x - y).abs() < 1e-15, "{a:?}");
        }
        // propagate one feature column through by direct matrix arithmetic
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap());
        let w = tape.constant(Tensor::matrix(1, 1, vec![2.0]).unwrap());
        let out = g.graph_convolve(&mut tape, f, w).unwrap();
        let got = tape.value(out).data().to_vec();
        let want = [
            2.0 * (0.5 + 2.0 * s6),
            2.0 * (s6 + 2.0 / 3.0 + 3.0 * s6),
            2.0 * (2.0 * s6 + 1.5),
        ];
        for (x, y) in got.iter().zip(want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn composition_width_and_null_transform() {
        let t = table(&[&[1.0, 2.0], &[0.0, 1.0], &[5.0, 5.0]]);
        let g = build_semantic_graph(&t).unwrap();
        let protos = g.compose_prototypes(&t, &Tensor::zeros(&[2, 2]).unwrap()).unwrap();
        for p in &protos {
            assert_eq!(p.composed.len(), 4);
            assert_eq!(p.graph_vec, vec![0.0, 0.0]);
            assert_eq!(&p.composed[..2], p.word_vec.as_slice());
        }
    }

    #[test]
    fn composition_label_mismatch_names_class() {
        let t = table(&[&[1.0], &[0.0], &[5.0]]);
        let g = build_semantic_graph(&t).unwrap();
        let other = WordTable::new(vec![
            ("c0".into(), vec![1.0]),
            ("c1".into(), vec![0.0]),
            ("c9".into(), vec![5.0]),
        ])
        .unwrap();
        let err = g
            .compose_prototypes(&other, &Tensor::identity(1).unwrap())
            .unwrap_err()
            .to_string();
        assert!(err.contains("c2") && err.contains("c9"), "{err}");
    }
}
