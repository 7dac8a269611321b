//! Component-level computational graph.
//!
//! Nodes are the input embedding, attention heads, MLP blocks, and the
//! logits endpoint. A directed edge (source, target, slot) exists exactly
//! when the source writes to the residual stream strictly before the target
//! reads it: heads of layer `l` read after every component of layers `< l`,
//! the layer-`l` MLP additionally reads the layer-`l` heads, and logits read
//! everything.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Node {
    Input,
    Head { layer: usize, head: usize },
    Mlp { layer: usize },
    Logits,
}

impl Node {
    /// Position in residual-stream write order: input first, then per layer
    /// the heads (by index) followed by the MLP, logits last. This is the
    /// canonical ordering for files and tie-breaking.
    pub fn rank(&self, n_heads: usize) -> usize {
        match *self {
            Node::Input => 0,
            Node::Head { layer, head } => 1 + layer * (n_heads + 1) + head,
            Node::Mlp { layer } => 1 + layer * (n_heads + 1) + n_heads,
            Node::Logits => usize::MAX,
        }
    }

    pub fn layer(&self) -> Option<usize> {
        match *self {
            Node::Head { layer, .. } | Node::Mlp { layer } => Some(layer),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Result<Node> {
        if s == "input" {
            return Ok(Node::Input);
        }
        if s == "logits" {
            return Ok(Node::Logits);
        }
        if let Some(rest) = s.strip_prefix('m') {
            if let Ok(layer) = rest.parse() {
                return Ok(Node::Mlp { layer });
            }
        }
        if let Some(rest) = s.strip_prefix('a') {
            if let Some((l, h)) = rest.split_once(".h") {
                if let (Ok(layer), Ok(head)) = (l.parse(), h.parse()) {
                    return Ok(Node::Head { layer, head });
                }
            }
        }
        Err(Error::Graph(format!("unparseable node name {s:?}")))
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Node::Input => write!(f, "input"),
            Node::Head { layer, head } => write!(f, "a{layer}.h{head}"),
            Node::Mlp { layer } => write!(f, "m{layer}"),
            Node::Logits => write!(f, "logits"),
        }
    }
}

/// Input slot on an edge target: q/k/v for attention heads, `In` for MLP and
/// logits targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Slot {
    Q,
    K,
    V,
    In,
}

impl Slot {
    pub fn parse(s: &str) -> Result<Slot> {
        match s {
            "q" => Ok(Slot::Q),
            "k" => Ok(Slot::K),
            "v" => Ok(Slot::V),
            "in" => Ok(Slot::In),
            _ => Err(Error::Graph(format!("unknown slot {s:?}"))),
        }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Slot::Q => write!(f, "q"),
            Slot::K => write!(f, "k"),
            Slot::V => write!(f, "v"),
            Slot::In => write!(f, "in"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub source: Node,
    pub target: Node,
    pub slot: Slot,
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}<{}>", self.source, self.target, self.slot)
    }
}

#[derive(Debug, Clone)]
pub struct CompGraph {
    pub n_layers: usize,
    pub n_heads: usize,
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    edge_index: BTreeMap<Edge, usize>,
}

impl CompGraph {
    /// All nodes in residual write order.
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// All edges in canonical (source rank, target rank, slot) order.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edge_index(&self, edge: &Edge) -> Result<usize> {
        self.edge_index
            .get(edge)
            .copied()
            .ok_or_else(|| Error::Graph(format!("edge {edge} not in graph")))
    }

    pub fn contains_node(&self, node: &Node) -> bool {
        match *node {
            Node::Input | Node::Logits => true,
            Node::Head { layer, head } => layer < self.n_layers && head < self.n_heads,
            Node::Mlp { layer } => layer < self.n_layers,
        }
    }

    /// Distinct (target, slot) read points in canonical order.
    pub fn read_points(&self) -> Vec<(Node, Slot)> {
        let mut out = Vec::new();
        for l in 0..self.n_layers {
            for h in 0..self.n_heads {
                let node = Node::Head { layer: l, head: h };
                out.push((node, Slot::Q));
                out.push((node, Slot::K));
                out.push((node, Slot::V));
            }
            out.push((Node::Mlp { layer: l }, Slot::In));
        }
        out.push((Node::Logits, Slot::In));
        out
    }

    /// Nodes whose output is visible at the given read point, in write order.
    pub fn writers_before(&self, target: &Node) -> Vec<Node> {
        let mut out = vec![Node::Input];
        let up_to = |out: &mut Vec<Node>, layers: usize| {
            for l in 0..layers {
                for h in 0..self.n_heads {
                    out.push(Node::Head { layer: l, head: h });
                }
                out.push(Node::Mlp { layer: l });
            }
        };
        match *target {
            Node::Head { layer, .. } => up_to(&mut out, layer),
            Node::Mlp { layer } => {
                up_to(&mut out, layer);
                for h in 0..self.n_heads {
                    out.push(Node::Head { layer, head: h });
                }
            }
            Node::Logits => up_to(&mut out, self.n_layers),
            Node::Input => {}
        }
        out
    }
}

pub fn build_graph(n_layers: usize, n_heads: usize) -> CompGraph {
    let mut nodes = vec![Node::Input];
    for l in 0..n_layers {
        for h in 0..n_heads {
            nodes.push(Node::Head { layer: l, head: h });
        }
        nodes.push(Node::Mlp { layer: l });
    }
    nodes.push(Node::Logits);

    let mut graph = CompGraph {
        n_layers,
        n_heads,
        nodes,
        edges: Vec::new(),
        edge_index: BTreeMap::new(),
    };

    let mut edges = Vec::new();
    for (target, slot) in graph.read_points() {
        for source in graph.writers_before(&target) {
            edges.push(Edge { source, target, slot });
        }
    }
    edges.sort_by_key(|e| {
        (
            e.source.rank(n_heads),
            e.target.rank(n_heads),
            e.slot,
        )
    });
    for (i, e) in edges.iter().enumerate() {
        graph.edge_index.insert(*e, i);
    }
    graph.edges = edges;
    graph
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_count_formula() {
        for (l, h) in [(1, 1), (2, 2), (4, 4), (3, 8)] {
            let g = build_graph(l, h);
            assert_eq!(g.nodes().len(), 2 + l * (h + 1));
        }
    }

    #[test]
    fn two_layer_two_head_graph_has_46_edges() {
        // Independent enumeration of the ordering rule: count source options
        // per read point.
        let (l, h) = (2usize, 2usize);
        let mut expected = 0usize;
        for layer in 0..l {
            let head_sources = 1 + layer * (h + 1);
            expected += head_sources * h * 3;
            let mlp_sources = 1 + layer * (h + 1) + h;
            expected += mlp_sources;
        }
        expected += 1 + l * (h + 1); // logits
        assert_eq!(expected, 46);
        assert_eq!(build_graph(2, 2).n_edges(), 46);
    }

    #[test]
    fn no_same_layer_mlp_to_head_edge() {
        let g = build_graph(4, 4);
        for e in g.edges() {
            if let (Node::Mlp { layer: ml }, Node::Head { layer: hl, .. }) = (e.source, e.target) {
                assert!(ml < hl, "illegal edge {e}");
            }
        }
    }

    #[test]
    fn same_layer_heads_feed_mlp_but_not_each_other() {
        let g = build_graph(2, 2);
        let head = Node::Head { layer: 1, head: 0 };
        let mlp = Node::Mlp { layer: 1 };
        assert!(g.edge_index(&Edge { source: head, target: mlp, slot: Slot::In }).is_ok());
        let other = Node::Head { layer: 1, head: 1 };
        assert!(g
            .edge_index(&Edge { source: head, target: other, slot: Slot::Q })
            .is_err());
    }

    #[test]
    fn edges_are_unique_and_canonically_sorted() {
        let g = build_graph(3, 2);
        for w in g.edges().windows(2) {
            let ka = (w[0].source.rank(2), w[0].target.rank(2), w[0].slot);
            let kb = (w[1].source.rank(2), w[1].target.rank(2), w[1].slot);
            assert!(ka < kb);
        }
    }

    #[test]
    fn node_name_round_trip() {
        let g = build_graph(2, 3);
        for n in g.nodes() {
            assert_eq!(Node::parse(&n.to_string()).unwrap(), *n);
        }
        assert!(Node::parse("a1h2").is_err());
    }
}
