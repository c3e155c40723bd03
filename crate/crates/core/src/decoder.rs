//! Entity decoding by path search over fragment/gap edges.
//!
//! Each `Frag` or `Gap` cell `(h, t)` becomes a directed edge `h -> t + 1`
//! between token boundary nodes `0..=n`, so consecutive spans chain end to
//! start. An anchor `(tail, head, type)` asks for every path from node `head`
//! to node `tail + 1` that starts with a fragment, alternates fragment and
//! gap, and ends with a fragment. Each such path is one mention.
//!
//! Edges strictly increase their node index, so the graph is a DAG and no
//! visited set is needed.

use std::collections::{BTreeSet, VecDeque};

use crate::data::{EntityMention, LabelId, LabelSet, Span};
use crate::error::{Error, Result};
use crate::tagging::{Anchor, GridLabelMatrix};

pub const DEFAULT_PATH_CAP: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EdgeKind {
    Frag,
    Gap,
}

impl EdgeKind {
    fn other(self) -> Self {
        match self {
            EdgeKind::Frag => EdgeKind::Gap,
            EdgeKind::Gap => EdgeKind::Frag,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub kind: EdgeKind,
}

impl Edge {
    /// The inclusive token span this edge covers.
    pub fn span(&self) -> Span {
        Span::new(self.from, self.to - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeGraph {
    n: usize,
    /// Outgoing edges per node, sorted.
    outgoing: Vec<Vec<Edge>>,
}

impl EdgeGraph {
    pub fn new(n: usize) -> Self {
        EdgeGraph {
            n,
            outgoing: vec![Vec::new(); n + 1],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn add_edge(&mut self, edge: Edge) {
        assert!(
            edge.from < edge.to && edge.to <= self.n,
            "edge {edge:?} out of range"
        );
        let list = &mut self.outgoing[edge.from];
        if let Err(pos) = list.binary_search(&edge) {
            list.insert(pos, edge);
        }
    }

    pub fn edges(&self) -> impl Iterator<Item = &Edge> {
        self.outgoing.iter().flatten()
    }

    pub fn outgoing(&self, node: usize) -> &[Edge] {
        &self.outgoing[node]
    }

    pub fn is_empty(&self) -> bool {
        self.outgoing.iter().all(Vec::is_empty)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct DecodedPath {
    pub anchor: Anchor,
    pub edges: Vec<Edge>,
}

impl DecodedPath {
    pub fn to_mention(&self) -> EntityMention {
        let fragments = self
            .edges
            .iter()
            .filter(|e| e.kind == EdgeKind::Frag)
            .map(Edge::span)
            .collect();
        EntityMention::new(self.anchor.entity_type.clone(), fragments)
            .expect("alternating paths always yield valid mentions")
    }
}

/// Edges and anchors read off a grid. Diagonal entity cells count as both an
/// anchor and a one-token fragment.
pub fn build_edge_graph(grid: &GridLabelMatrix, labels: &LabelSet) -> (EdgeGraph, Vec<Anchor>) {
    let mut graph = EdgeGraph::new(grid.n());
    let mut anchors = Vec::new();
    for (row, col, label) in grid.labelled() {
        match label {
            LabelId::FRAG if row <= col => graph.add_edge(Edge {
                from: row,
                to: col + 1,
                kind: EdgeKind::Frag,
            }),
            LabelId::GAP if row <= col => graph.add_edge(Edge {
                from: row,
                to: col + 1,
                kind: EdgeKind::Gap,
            }),
            id if id.is_entity_type() && row >= col => {
                let Some(name) = labels.name(id) else {
                    continue;
                };
                anchors.push(Anchor {
                    tail: row,
                    head: col,
                    entity_type: name.to_string(),
                });
                if row == col {
                    graph.add_edge(Edge {
                        from: row,
                        to: row + 1,
                        kind: EdgeKind::Frag,
                    });
                }
            }
            _ => {}
        }
    }
    anchors.sort();
    (graph, anchors)
}

/// `finishable[node][kind]`: some valid completion to `target` starts at
/// `node` with an edge of `kind`.
fn finishable(graph: &EdgeGraph, head: usize, target: usize) -> Vec<[bool; 2]> {
    let mut ok = vec![[false; 2]; target + 1];
    for node in (head..target).rev() {
        for edge in graph.outgoing(node) {
            if edge.to > target {
                continue;
            }
            let done = match edge.kind {
                EdgeKind::Frag => edge.to == target || ok[edge.to][EdgeKind::Gap as usize],
                EdgeKind::Gap => edge.to < target && ok[edge.to][EdgeKind::Frag as usize],
            };
            if done {
                ok[node][edge.kind as usize] = true;
            }
        }
    }
    ok
}

/// Breadth-first search for every valid path of `anchor`, in lexicographic
/// edge order. Partial paths that cannot reach the target are pruned, so the
/// work is bounded by the number of complete paths.
pub fn enumerate_valid_paths(
    graph: &EdgeGraph,
    anchor: &Anchor,
    cap: usize,
) -> Result<Vec<DecodedPath>> {
    if anchor.head > anchor.tail || anchor.tail >= graph.n() {
        return Ok(Vec::new());
    }
    let target = anchor.tail + 1;
    let ok = finishable(graph, anchor.head, target);
    let mut complete: Vec<Vec<Edge>> = Vec::new();
    if !ok[anchor.head][EdgeKind::Frag as usize] {
        return Ok(Vec::new());
    }

    let mut frontier: VecDeque<(usize, EdgeKind, Vec<Edge>)> = VecDeque::new();
    frontier.push_back((anchor.head, EdgeKind::Frag, Vec::new()));
    while let Some((node, expect, path)) = frontier.pop_front() {
        for edge in graph.outgoing(node) {
            if edge.kind != expect || edge.to > target {
                continue;
            }
            let mut next = path.clone();
            next.push(*edge);
            if edge.kind == EdgeKind::Frag && edge.to == target {
                complete.push(next);
                if complete.len() > cap {
                    return Err(Error::PathCap {
                        tail: anchor.tail,
                        head: anchor.head,
                        entity_type: anchor.entity_type.clone(),
                        cap,
                    });
                }
            } else if edge.to < target && ok[edge.to][expect.other() as usize] {
                frontier.push_back((edge.to, expect.other(), next));
            }
        }
    }
    complete.sort();
    Ok(complete
        .into_iter()
        .map(|edges| DecodedPath {
            anchor: anchor.clone(),
            edges,
        })
        .collect())
}

pub fn decode_entities(
    grid: &GridLabelMatrix,
    labels: &LabelSet,
) -> Result<BTreeSet<EntityMention>> {
    decode_entities_with_cap(grid, labels, DEFAULT_PATH_CAP)
}

pub fn decode_entities_with_cap(
    grid: &GridLabelMatrix,
    labels: &LabelSet,
    cap: usize,
) -> Result<BTreeSet<EntityMention>> {
    let (graph, anchors) = build_edge_graph(grid, labels);
    let mut out = BTreeSet::new();
    for anchor in &anchors {
        for path in enumerate_valid_paths(&graph, anchor, cap)? {
            out.insert(path.to_mention());
        }
    }
    Ok(out)
}

/// Reference decoder for small grids: enumerates every edge sequence from
/// head to tail + 1 by depth-first search, ignoring kinds, then keeps the
/// ones that satisfy the path rules. Exponential; meant for `n <= 12`.
pub fn brute_force_decode(grid: &GridLabelMatrix, labels: &LabelSet) -> BTreeSet<EntityMention> {
    let n = grid.n();
    let mut edges: Vec<Edge> = Vec::new();
    let mut anchors: Vec<(usize, usize, String)> = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let label = grid.get(i, j);
            if i <= j && (label == LabelId::FRAG || label == LabelId::GAP) {
                let kind = if label == LabelId::FRAG {
                    EdgeKind::Frag
                } else {
                    EdgeKind::Gap
                };
                edges.push(Edge {
                    from: i,
                    to: j + 1,
                    kind,
                });
            }
            if i >= j && label.is_entity_type() {
                let name = labels.name(label).unwrap_or_default().to_string();
                anchors.push((i, j, name));
                if i == j {
                    edges.push(Edge {
                        from: i,
                        to: i + 1,
                        kind: EdgeKind::Frag,
                    });
                }
            }
        }
    }

    fn walk(
        edges: &[Edge],
        at: usize,
        target: usize,
        stack: &mut Vec<Edge>,
        out: &mut Vec<Vec<Edge>>,
    ) {
        if at == target {
            out.push(stack.clone());
            return;
        }
        for e in edges.iter().filter(|e| e.from == at && e.to <= target) {
            stack.push(*e);
            walk(edges, e.to, target, stack, out);
            stack.pop();
        }
    }

    let valid = |seq: &[Edge]| {
        seq.len() % 2 == 1
            && seq.iter().enumerate().all(|(k, e)| {
                let want = if k % 2 == 0 {
                    EdgeKind::Frag
                } else {
                    EdgeKind::Gap
                };
                e.kind == want
            })
    };

    let mut out = BTreeSet::new();
    for (tail, head, ty) in anchors {
        let mut seqs = Vec::new();
        walk(&edges, head, tail + 1, &mut Vec::new(), &mut seqs);
        for seq in seqs.into_iter().filter(|s| valid(s)) {
            let frags = seq
                .iter()
                .filter(|e| e.kind == EdgeKind::Frag)
                .map(|e| Span::new(e.from, e.to - 1))
                .collect();
            out.insert(EntityMention::new(ty.clone(), frags).expect("valid path"));
        }
    }
    out
}
