//! The knowledge graph rules are grounded over, plus optional predicate/type checking.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interval::Interval;
use crate::lang::{Atom, Rule, Term};

/// Predicate reserved for graph adjacency.
pub const REL: &str = "rel";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("graph schema error: {0}")]
    Schema(String),
    #[error("edge {from} -> {to} references undeclared node `{missing}`")]
    DanglingEdge { from: String, to: String, missing: String },
    #[error("node `{0}` declared twice")]
    DuplicateNode(String),
    #[error("unknown constant `{0}`")]
    UnknownConstant(String),
    #[error("type schema for `{predicate}` references unknown node type `{type_name}`")]
    UnknownType { predicate: String, type_name: String },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NodeDoc {
    pub id: String,
    #[serde(rename = "type", default, skip_serializing_if = "Option::is_none")]
    pub node_type: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EdgeDoc {
    pub from: String,
    pub to: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// On-disk JSON shape of a graph.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GraphDocument {
    pub nodes: Vec<NodeDoc>,
    #[serde(default)]
    pub edges: Vec<EdgeDoc>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeGraph {
    nodes: BTreeMap<String, Option<String>>,
    edges: BTreeMap<(String, String), BTreeSet<String>>,
}

impl KnowledgeGraph {
    pub fn from_document(doc: &GraphDocument) -> Result<Self, GraphError> {
        let mut g = KnowledgeGraph::default();
        for n in &doc.nodes {
            if n.id.is_empty() {
                return Err(GraphError::Schema("node with empty id".into()));
            }
            if g.nodes.insert(n.id.clone(), n.node_type.clone()).is_some() {
                return Err(GraphError::DuplicateNode(n.id.clone()));
            }
        }
        for e in &doc.edges {
            for end in [&e.from, &e.to] {
                if !g.nodes.contains_key(end) {
                    return Err(GraphError::DanglingEdge {
                        from: e.from.clone(),
                        to: e.to.clone(),
                        missing: end.clone(),
                    });
                }
            }
            let labels = g.edges.entry((e.from.clone(), e.to.clone())).or_default();
            labels.extend(e.label.clone());
        }
        Ok(g)
    }

    pub fn to_document(&self) -> GraphDocument {
        let nodes = self
            .nodes
            .iter()
            .map(|(id, t)| NodeDoc {
                id: id.clone(),
                node_type: t.clone(),
            })
            .collect();
        let mut edges = Vec::new();
        for ((from, to), labels) in &self.edges {
            if labels.is_empty() {
                edges.push(EdgeDoc {
                    from: from.clone(),
                    to: to.clone(),
                    label: None,
                });
            }
            for l in labels {
                edges.push(EdgeDoc {
                    from: from.clone(),
                    to: to.clone(),
                    label: Some(l.clone()),
                });
            }
        }
        GraphDocument { nodes, edges }
    }

    pub fn contains_node(&self, id: &str) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn node_type(&self, id: &str) -> Option<&str> {
        self.nodes.get(id).and_then(|t| t.as_deref())
    }

    /// Node ids in lexicographic order.
    pub fn nodes(&self) -> impl Iterator<Item = &str> {
        self.nodes.keys().map(String::as_str)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Ordered pairs in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (&str, &str)> {
        self.edges.keys().map(|(a, b)| (a.as_str(), b.as_str()))
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, from: &str, to: &str) -> bool {
        self.edges.contains_key(&(from.to_string(), to.to_string()))
    }

    pub fn types(&self) -> BTreeSet<&str> {
        self.nodes.values().filter_map(|t| t.as_deref()).collect()
    }
}

/// Parses a JSON graph document.
pub fn load_graph(json: &str) -> Result<KnowledgeGraph, GraphError> {
    let doc: GraphDocument = serde_json::from_str(json).map_err(|e| GraphError::Schema(e.to_string()))?;
    KnowledgeGraph::from_document(&doc)
}

/// `[1,1]` for a declared edge, `[0,1]` otherwise: absent edges are unknown, never false.
pub fn rel_annotation(a: &str, b: &str, g: &KnowledgeGraph) -> Result<Interval, GraphError> {
    for n in [a, b] {
        if !g.contains_node(n) {
            return Err(GraphError::UnknownConstant(n.to_string()));
        }
    }
    Ok(if g.has_edge(a, b) {
        Interval::TRUE
    } else {
        Interval::UNKNOWN
    })
}

/// Permitted node types per argument position. A `None` position is unconstrained.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TypeSchema {
    pub predicates: BTreeMap<String, Vec<Option<BTreeSet<String>>>>,
}

impl TypeSchema {
    pub fn with(mut self, predicate: &str, positions: &[&[&str]]) -> Self {
        let positions = positions
            .iter()
            .map(|types| (!types.is_empty()).then(|| types.iter().map(|t| t.to_string()).collect()))
            .collect();
        self.predicates.insert(predicate.to_string(), positions);
        self
    }

    pub fn validate(&self, g: &KnowledgeGraph) -> Result<(), GraphError> {
        let known = g.types();
        for (predicate, positions) in &self.predicates {
            for t in positions.iter().flatten().flatten() {
                if !known.contains(t.as_str()) {
                    return Err(GraphError::UnknownType {
                        predicate: predicate.clone(),
                        type_name: t.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Whether `node` may fill argument `position` of `predicate`.
    pub fn admits(&self, predicate: &str, position: usize, node: &str, g: &KnowledgeGraph) -> bool {
        let Some(allowed) = self
            .predicates
            .get(predicate)
            .and_then(|p| p.get(position))
            .and_then(|a| a.as_ref())
        else {
            return true;
        };
        g.node_type(node).is_some_and(|t| allowed.contains(t))
    }
}

/// Variable name → node id.
pub type Substitution = BTreeMap<String, String>;

fn resolve<'a>(term: &'a Term, sub: &'a Substitution) -> Option<&'a str> {
    match term {
        Term::Const(c) => Some(c),
        Term::Var(v) => sub.get(v).map(String::as_str),
    }
}

fn atom_admitted(atom: &Atom, sub: &Substitution, schema: &TypeSchema, g: &KnowledgeGraph) -> bool {
    atom.args.iter().enumerate().all(|(pos, t)| match resolve(t, sub) {
        Some(node) => schema.admits(&atom.predicate, pos, node, g),
        None => true,
    })
}

/// Every substitution of the rule's variables by graph nodes.
///
/// Variables of binary body literals (other than `rel`) range over declared edges; all
/// other variables range over nodes. With a schema, substitutions placing a node of the
/// wrong type in any typed argument position are dropped. The result is sorted by the
/// values of [`Rule::variables`] in order.
pub fn groundings(rule: &Rule, g: &KnowledgeGraph, schema: Option<&TypeSchema>) -> Vec<Substitution> {
    let vars = rule.variables();
    let edge_literals: Vec<&Atom> = rule
        .body
        .iter()
        .map(|l| &l.atom)
        .filter(|a| a.args.len() == 2 && a.predicate != REL)
        .collect();

    let mut out = Vec::new();
    let mut sub = Substitution::new();
    bind_edges(&edge_literals, g, &mut sub, &mut |sub| {
        let free: Vec<&String> = vars.iter().filter(|v| !sub.contains_key(*v)).collect();
        bind_nodes(&free, g, &mut sub.clone(), &mut |full| {
            let ok = match schema {
                None => true,
                Some(s) => std::iter::once(&rule.head)
                    .chain(rule.body.iter().map(|l| &l.atom))
                    .all(|a| atom_admitted(a, full, s, g)),
            };
            if ok {
                out.push(full.clone());
            }
        });
    });
    out.sort_by(|a, b| {
        let ka: Vec<&String> = vars.iter().map(|v| &a[v]).collect();
        let kb: Vec<&String> = vars.iter().map(|v| &b[v]).collect();
        ka.cmp(&kb)
    });
    out.dedup();
    out
}

fn bind_edges(lits: &[&Atom], g: &KnowledgeGraph, sub: &mut Substitution, k: &mut dyn FnMut(&Substitution)) {
    let Some((lit, rest)) = lits.split_first() else {
        k(sub);
        return;
    };
    let (s, t) = (&lit.args[0], &lit.args[1]);
    for (from, to) in g.edges() {
        let mut added = Vec::new();
        let mut ok = true;
        for (term, node) in [(s, from), (t, to)] {
            match resolve(term, sub) {
                Some(bound) if bound != node => {
                    ok = false;
                    break;
                }
                Some(_) => {}
                None => {
                    let v = term.as_var().expect("unbound term is a variable").to_string();
                    sub.insert(v.clone(), node.to_string());
                    added.push(v);
                }
            }
        }
        if ok {
            bind_edges(rest, g, sub, k);
        }
        for v in added {
            sub.remove(&v);
        }
    }
}

fn bind_nodes(free: &[&String], g: &KnowledgeGraph, sub: &mut Substitution, k: &mut dyn FnMut(&Substitution)) {
    let Some((v, rest)) = free.split_first() else {
        k(sub);
        return;
    };
    for n in g.nodes() {
        sub.insert((*v).clone(), n.to_string());
        bind_nodes(rest, g, sub, k);
    }
    sub.remove(*v);
}
