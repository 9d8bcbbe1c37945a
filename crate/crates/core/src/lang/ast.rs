use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::interval::Interval;

pub type Timestep = u32;

/// A rule or atom argument. Variables start with an uppercase letter.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    Const(String),
    Var(String),
}

impl Term {
    pub fn as_var(&self) -> Option<&str> {
        match self {
            Term::Var(v) => Some(v),
            Term::Const(_) => None,
        }
    }
}

/// The thing an atom is about: one node, or an ordered pair of nodes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Entity {
    Node(String),
    Edge(String, String),
}

impl Entity {
    pub fn arity(&self) -> usize {
        match self {
            Entity::Node(_) => 1,
            Entity::Edge(..) => 2,
        }
    }
}

impl fmt::Display for Entity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Entity::Node(n) => f.write_str(n),
            Entity::Edge(a, b) => write!(f, "({a},{b})"),
        }
    }
}

/// An atom with no variables: the key of every interpretation entry.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroundAtom {
    pub predicate: String,
    pub entity: Entity,
}

impl GroundAtom {
    pub fn node(predicate: impl Into<String>, node: impl Into<String>) -> Self {
        GroundAtom {
            predicate: predicate.into(),
            entity: Entity::Node(node.into()),
        }
    }

    pub fn edge(predicate: impl Into<String>, from: impl Into<String>, to: impl Into<String>) -> Self {
        GroundAtom {
            predicate: predicate.into(),
            entity: Entity::Edge(from.into(), to.into()),
        }
    }

    pub fn to_atom(&self) -> Atom {
        let args = match &self.entity {
            Entity::Node(n) => vec![Term::Const(n.clone())],
            Entity::Edge(a, b) => vec![Term::Const(a.clone()), Term::Const(b.clone())],
        };
        Atom {
            predicate: self.predicate.clone(),
            args,
        }
    }
}

impl fmt::Display for GroundAtom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.to_atom().fmt(f)
    }
}

/// `predicate(t1)` or `predicate(t1, t2)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Atom {
    pub predicate: String,
    pub args: Vec<Term>,
}

impl Atom {
    pub fn variables(&self) -> impl Iterator<Item = &str> {
        self.args.iter().filter_map(Term::as_var)
    }

    pub fn is_ground(&self) -> bool {
        self.variables().next().is_none()
    }

    pub fn ground(&self) -> Option<GroundAtom> {
        let name = |t: &Term| match t {
            Term::Const(c) => Some(c.clone()),
            Term::Var(_) => None,
        };
        let entity = match self.args.as_slice() {
            [a] => Entity::Node(name(a)?),
            [a, b] => Entity::Edge(name(a)?, name(b)?),
            _ => return None,
        };
        Some(GroundAtom {
            predicate: self.predicate.clone(),
            entity,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Literal {
    pub atom: Atom,
    pub negated: bool,
    pub threshold: Interval,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnnotationSpec {
    Constant(Interval),
    Function(String),
}

impl Default for AnnotationSpec {
    fn default() -> Self {
        AnnotationSpec::Constant(Interval::TRUE)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub id: String,
    pub head: Atom,
    pub head_annotation: AnnotationSpec,
    pub delta_t: Timestep,
    pub body: Vec<Literal>,
}

impl Rule {
    /// Every variable of the rule, in first-occurrence order (head first).
    pub fn variables(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        let atoms = std::iter::once(&self.head).chain(self.body.iter().map(|l| &l.atom));
        for v in atoms.flat_map(Atom::variables) {
            if seen.insert(v.to_string()) {
                out.push(v.to_string());
            }
        }
        out
    }

    /// Head variables that never appear in the body.
    pub fn unbound_head_variables(&self) -> Vec<String> {
        let body: BTreeSet<&str> = self.body.iter().flat_map(|l| l.atom.variables()).collect();
        self.head
            .variables()
            .filter(|v| !body.contains(v))
            .map(str::to_string)
            .collect()
    }
}

/// When a fact holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Span { from: Timestep, to: Timestep },
    Static,
}

impl Window {
    pub fn at(t: Timestep) -> Self {
        Window::Span { from: t, to: t }
    }

    pub fn contains(&self, t: Timestep) -> bool {
        match *self {
            Window::Span { from, to } => from <= t && t <= to,
            Window::Static => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fact {
    pub id: String,
    pub atom: GroundAtom,
    pub annotation: Interval,
    pub window: Window,
}

impl Fact {
    pub fn new(id: impl Into<String>, atom: GroundAtom, annotation: Interval, window: Window) -> Self {
        Fact {
            id: id.into(),
            atom,
            annotation,
            window,
        }
    }

    pub fn is_static(&self) -> bool {
        self.window == Window::Static
    }
}

/// Entailment query: does the atom's interval lie within `bound`?
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub atom: GroundAtom,
    pub bound: Interval,
}

/// A parsed program: rules and facts in source order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Program {
    pub rules: Vec<Rule>,
    pub facts: Vec<Fact>,
}

fn is_plain_constant(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Var(v) => f.write_str(v),
            Term::Const(c) if is_plain_constant(c) => f.write_str(c),
            Term::Const(c) => {
                f.write_str("\"")?;
                for ch in c.chars() {
                    if ch == '"' || ch == '\\' {
                        f.write_str("\\")?;
                    }
                    write!(f, "{ch}")?;
                }
                f.write_str("\"")
            }
        }
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.predicate)?;
        for (i, a) in self.args.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{a}")?;
        }
        f.write_str(")")
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.negated {
            f.write_str("~")?;
        }
        write!(f, "{}:{}", self.atom, self.threshold)
    }
}

impl fmt::Display for AnnotationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnnotationSpec::Constant(i) => i.fmt(f),
            AnnotationSpec::Function(name) => f.write_str(name),
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.head)?;
        if self.head_annotation != AnnotationSpec::default() {
            write!(f, ":{}", self.head_annotation)?;
        }
        write!(f, " <-{} ", self.delta_t)?;
        for (i, l) in self.body.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Window::Span { from, to } => write!(f, "[{from},{to}]"),
            Window::Static => f.write_str("static"),
        }
    }
}

impl fmt::Display for Fact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} : {} @ {}", self.atom, self.annotation, self.window)
    }
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} : {}", self.atom, self.bound)
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rules {
            writeln!(f, "{r}")?;
        }
        for fact in &self.facts {
            writeln!(f, "{fact}")?;
        }
        Ok(())
    }
}
