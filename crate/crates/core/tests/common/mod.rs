//! Test-side oracles: a naive saturation model for small monotone programs, a brute-force
//! card counter and the random generators that feed them. Nothing here calls into the
//! engine's evaluation code.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use intervalog::engine::{Engine, EngineConfig, Snapshot, RESET_CAUSE};
use intervalog::graph::{groundings, EdgeDoc, GraphDocument, KnowledgeGraph, NodeDoc, Substitution, TypeSchema};
use intervalog::lang::{parse_program, parse_rule, AnnotationSpec, Entity, GroundAtom, Program, Term, Window};
use intervalog::scenario::{card_game_program, WELDING_PROGRAM};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const HEAD_CHAIN: [f64; 4] = [0.0, 0.5, 0.8, 1.0];
const NEG_UPPER: [f64; 4] = [0.0, 0.2, 0.5, 1.0];
const UNARY: [&str; 4] = ["p", "q", "r", "s"];

#[derive(Debug, Clone)]
pub struct RandomCase {
    pub graph: GraphDocument,
    pub text: String,
    pub horizon: u32,
}

fn lower_text(l: f64) -> String {
    format!("[{l},1]")
}

/// Up to 4 nodes, 5 rules, Δt ≤ 2, horizon ≤ 4. Every head and fact bound is `[l,1]`
/// with `l` from a fixed chain, so all bounds are nested and the program is monotone.
pub fn random_case(rng: &mut impl Rng) -> RandomCase {
    let n = rng.gen_range(1..=4);
    let nodes: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
    let mut edges = Vec::new();
    for a in &nodes {
        for b in &nodes {
            if a != b && rng.gen_bool(0.3) {
                edges.push((a.clone(), b.clone()));
            }
        }
    }
    let horizon = rng.gen_range(0..=4u32);
    let mut text = String::new();

    let window = |rng: &mut dyn rand::RngCore| -> String {
        let from = rng.gen_range(0..=horizon);
        let to = rng.gen_range(from..=horizon);
        format!("[{from},{to}]")
    };
    let mut static_atoms = BTreeSet::new();
    let mut windowed_atoms = BTreeSet::new();
    for _ in 0..rng.gen_range(2..=8) {
        let atom = format!("{}({})", UNARY.choose(rng).unwrap(), nodes.choose(rng).unwrap());
        let l = *HEAD_CHAIN.choose(rng).unwrap();
        if rng.gen_bool(0.15) && !windowed_atoms.contains(&atom) && static_atoms.insert(atom.clone()) {
            text.push_str(&format!("{atom} : {} @ static\n", lower_text(l)));
        } else if !static_atoms.contains(&atom) {
            windowed_atoms.insert(atom.clone());
            text.push_str(&format!("{atom} : {} @ {}\n", lower_text(l), window(rng)));
        }
    }
    for (a, b) in &edges {
        if rng.gen_bool(0.7) {
            let l = HEAD_CHAIN[rng.gen_range(1..4)];
            text.push_str(&format!("link({a},{b}) : {} @ {}\n", lower_text(l), window(rng)));
        }
    }

    for _ in 0..rng.gen_range(1..=5) {
        let mut body = Vec::new();
        for _ in 0..rng.gen_range(1..=2) {
            let negated = rng.gen_bool(0.3);
            let atom = if rng.gen_bool(0.25) {
                if rng.gen_bool(0.5) {
                    "link(X,Y)".to_string()
                } else {
                    "link(Y,X)".to_string()
                }
            } else {
                let term = match rng.gen_range(0..10) {
                    0..=4 => "X".to_string(),
                    5..=7 => "Y".to_string(),
                    _ => nodes.choose(rng).unwrap().clone(),
                };
                format!("{}({term})", UNARY.choose(rng).unwrap())
            };
            body.push(if negated {
                format!("~{atom}:[0,{}]", NEG_UPPER.choose(rng).unwrap())
            } else {
                format!("{atom}:{}", lower_text(*HEAD_CHAIN.choose(rng).unwrap()))
            });
        }
        if !body.iter().any(|l| l.contains('X')) {
            body.push(format!(
                "{}(X):{}",
                UNARY.choose(rng).unwrap(),
                lower_text(*HEAD_CHAIN.choose(rng).unwrap())
            ));
        }
        text.push_str(&format!(
            "{}(X):{} <-{} {}\n",
            UNARY.choose(rng).unwrap(),
            lower_text(*HEAD_CHAIN.choose(rng).unwrap()),
            rng.gen_range(0..=2),
            body.join(", ")
        ));
    }

    RandomCase {
        graph: GraphDocument {
            nodes: nodes.into_iter().map(|id| NodeDoc { id, node_type: None }).collect(),
            edges: edges
                .into_iter()
                .map(|(from, to)| EdgeDoc { from, to, label: None })
                .collect(),
        },
        text,
        horizon,
    }
}

/// Lower bound and static flag; every upper bound is 1.
pub type OracleState = BTreeMap<GroundAtom, (f64, bool)>;

const EPS: f64 = 1e-9;

fn ground(args: &[Term], env: &BTreeMap<&str, &str>) -> Entity {
    let name = |t: &Term| match t {
        Term::Const(c) => c.clone(),
        Term::Var(v) => env[v.as_str()].to_string(),
    };
    match args {
        [a] => Entity::Node(name(a)),
        [a, b] => Entity::Edge(name(a), name(b)),
        _ => panic!("unexpected arity"),
    }
}

fn raise(state: &mut OracleState, atom: &GroundAtom, l: f64, from_fact: bool) -> bool {
    match state.get_mut(atom) {
        None if from_fact && l == 0.0 => false,
        None => {
            state.insert(atom.clone(), (l, false));
            true
        }
        Some((_, true)) => false,
        Some((cur, _)) if l > *cur + EPS => {
            *cur = l;
            true
        }
        Some(_) => false,
    }
}

/// Least model at every timestep by naive saturation with canonical persistence.
pub fn saturate(graph: &GraphDocument, program: &Program, horizon: u32) -> Vec<OracleState> {
    let nodes: Vec<&str> = graph.nodes.iter().map(|n| n.id.as_str()).collect();
    let mut state = OracleState::new();
    for f in &program.facts {
        if f.window == Window::Static {
            assert!(f.annotation.upper() == 1.0);
            state.insert(f.atom.clone(), (f.annotation.lower(), true));
        }
    }
    let mut pending: BTreeMap<u32, Vec<(GroundAtom, f64)>> = BTreeMap::new();
    let mut out = Vec::new();
    for t in 0..=horizon {
        for f in &program.facts {
            if let Window::Span { from, to } = f.window {
                if from <= t && t <= to {
                    raise(&mut state, &f.atom, f.annotation.lower(), true);
                }
            }
        }
        for (atom, l) in pending.remove(&t).unwrap_or_default() {
            raise(&mut state, &atom, l, false);
        }
        loop {
            let mut changed = false;
            for rule in &program.rules {
                let AnnotationSpec::Constant(head_bound) = rule.head_annotation else {
                    panic!("oracle handles constant heads only");
                };
                let vars = rule.variables();
                let mut idx = vec![0; vars.len()];
                'assign: loop {
                    let env: BTreeMap<&str, &str> = vars
                        .iter()
                        .map(String::as_str)
                        .zip(idx.iter().map(|&i| nodes[i]))
                        .collect();
                    let holds = rule.body.iter().all(|lit| {
                        let atom = GroundAtom {
                            predicate: lit.atom.predicate.clone(),
                            entity: ground(&lit.atom.args, &env),
                        };
                        match state.get(&atom) {
                            None => false,
                            Some(&(l, _)) if lit.negated => {
                                assert!(lit.threshold.lower() == 0.0);
                                1.0 - l <= lit.threshold.upper() + EPS
                            }
                            Some(&(l, _)) => {
                                assert!(lit.threshold.upper() == 1.0);
                                l + EPS >= lit.threshold.lower()
                            }
                        }
                    });
                    if holds {
                        let head = GroundAtom {
                            predicate: rule.head.predicate.clone(),
                            entity: ground(&rule.head.args, &env),
                        };
                        if rule.delta_t == 0 {
                            changed |= raise(&mut state, &head, head_bound.lower(), false);
                        } else if t + rule.delta_t <= horizon {
                            pending
                                .entry(t + rule.delta_t)
                                .or_default()
                                .push((head, head_bound.lower()));
                        }
                    }
                    for i in idx.iter_mut() {
                        *i += 1;
                        if *i < nodes.len() {
                            continue 'assign;
                        }
                        *i = 0;
                    }
                    break;
                }
            }
            if !changed {
                break;
            }
        }
        out.push(state.clone());
    }
    out
}

/// Drives the engine the same way: a fixpoint at t=0, then advance and fixpoint up to the horizon.
pub fn engine_run(case: &RandomCase) -> Engine {
    let program = parse_program(&case.text).expect("generated program parses");
    let graph = KnowledgeGraph::from_document(&case.graph).expect("generated graph loads");
    let config = EngineConfig {
        horizon: case.horizon,
        ..EngineConfig::default()
    };
    let mut engine = Engine::init(graph, program, config).expect("init");
    engine.fixpoint_step("1").expect("fixpoint");
    while engine.now() < case.horizon {
        engine.advance_time().expect("advance");
        engine.fixpoint_step("1").expect("fixpoint");
    }
    engine
}

/// `None` when the engine agrees with the oracle at every timestep.
pub fn min_model_mismatch(case: &RandomCase) -> Option<String> {
    let program = parse_program(&case.text).expect("generated program parses");
    let expected = saturate(&case.graph, &program, case.horizon);
    let engine = engine_run(case);
    for (t, want) in expected.iter().enumerate() {
        let got: Snapshot = engine.snapshot_at(t as u32);
        let want_keys: Vec<&GroundAtom> = want.keys().collect();
        let got_keys: Vec<&GroundAtom> = got.keys().collect();
        if want_keys != got_keys {
            return Some(format!("t={t}: atoms {got_keys:?} expected {want_keys:?}"));
        }
        for (atom, &(l, st)) in want {
            let s = &got[atom];
            if (s.bound.lower() - l).abs() > EPS || s.bound.upper() != 1.0 || s.is_static != st {
                return Some(format!(
                    "t={t}: {atom} = {} static={} expected [{l},1] static={st}",
                    s.bound, s.is_static
                ));
            }
        }
    }
    None
}

pub fn oracle_deck() -> Vec<String> {
    let ranks = [
        "ace", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "jack", "queen", "king",
    ];
    let suits = ["clubs", "diamonds", "hearts", "spades"];
    suits
        .iter()
        .flat_map(|s| ranks.iter().map(move |r| format!("{r}_{s}")))
        .collect()
}

pub fn oracle_points(card: &str) -> u32 {
    match card.split('_').next().unwrap() {
        "ace" => 3,
        "jack" | "queen" | "king" => 9,
        _ => 6,
    }
}

/// (risky, remaining) over the multiset of cards not yet drawn.
pub fn brute_force_odds(drawn: &[String]) -> (u64, u64) {
    let total: u32 = drawn.iter().map(|c| oracle_points(c)).sum();
    let mut risky = 0;
    let mut n = 0;
    for card in oracle_deck() {
        if drawn.contains(&card) {
            continue;
        }
        n += 1;
        if total + oracle_points(&card) > 42 {
            risky += 1;
        }
    }
    (risky, n)
}

/// The engine's lower bound equals risky/n as an exact rational (denominator ≤ 52).
pub fn matches_ratio(lower: f64, (risky, n): (u64, u64)) -> bool {
    if n == 0 {
        return lower == 1.0;
    }
    let scaled = lower * n as f64;
    (scaled - risky as f64).abs() < 1e-9
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Drives a random program step by step. Every fixpoint invocation must only tighten
/// bounds, a second invocation must change nothing, static atoms never move, and the
/// trace must replay to the final interpretation.
pub fn check_invocations(case: &RandomCase) -> Result<(), String> {
    let program = parse_program(&case.text).map_err(|e| e.to_string())?;
    let graph = KnowledgeGraph::from_document(&case.graph).map_err(|e| e.to_string())?;
    let config = EngineConfig {
        horizon: case.horizon,
        ..EngineConfig::default()
    };
    let mut engine = Engine::init(graph, program, config).map_err(|e| e.to_string())?;
    let statics: Vec<_> = engine.snapshot().into_iter().filter(|(_, s)| s.is_static).collect();
    loop {
        let rows = engine.fixpoint_step("1").map_err(|e| e.to_string())?;
        for r in rows.iter().filter(|r| r.cause != RESET_CAUSE) {
            ensure(r.new.is_subset_of(&r.old), || format!("row loosened: {}", r.tsv_row()))?;
        }
        let before = engine.snapshot();
        let again = engine.fixpoint_step("1").map_err(|e| e.to_string())?;
        ensure(before == engine.snapshot(), || {
            format!("second fixpoint changed t={}", engine.now())
        })?;
        ensure(again.iter().all(|r| r.old == r.new), || {
            "second fixpoint recorded a change".into()
        })?;
        for (atom, s) in &statics {
            ensure(engine.bound(atom) == s.bound && engine.is_static(atom), || {
                format!("static {atom} moved")
            })?;
        }
        if engine.now() == case.horizon {
            break;
        }
        engine.advance_time().map_err(|e| e.to_string())?;
    }
    let replayed = engine.replay().map_err(|e| e.to_string())?;
    ensure(replayed == engine.snapshot(), || {
        "replay differs from final interpretation".into()
    })
}

pub const PARSER_HANDWRITTEN: &[&str] = &[
    "p(X) <-0 q(X)",
    "p(X):[0.5,1] <-2 q(X):[0.2,0.9], ~r(X):[0,0.4]",
    "friend(X,Y):[0.7,1] <-1 knows(X,Y), trusts(Y,X):[0.5,1]",
    "near(X,Y) <-0 rel(X,Y):[1,1], near(Y,X)",
    "risk(X):tnorm_min <-0 a(X):[0.1,1], b(X):[0.2,1]",
    "risk(X):lukasiewicz <-3 a(X), ~b(X)",
    "p(\"odd node\") : [1,1] @ static",
    "p(\"quote\\\"in\") : [0.25,0.75] @ [1,4]",
    "edge_fact(a,b) : [0,0] @ [0,0]",
    "x(n1):[0.333333333,1] <-0 y(n1)",
    "  spaced ( X )  : [ 0.1 , 1 ]  <-1   q ( X ) ",
    "q(a) : [0.5,1]",
];

/// Single-line rules and facts: the handwritten items, both scenario programs and
/// some generated programs.
pub fn parser_corpus() -> Vec<String> {
    let mut items: Vec<String> = PARSER_HANDWRITTEN.iter().map(|s| s.to_string()).collect();
    for text in [WELDING_PROGRAM.to_string(), card_game_program()] {
        items.extend(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_string),
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        items.extend(random_case(&mut rng).text.lines().map(str::to_string));
    }
    items
}

/// parse, print, parse again: same program and same text.
pub fn round_trip(item: &str) -> Result<(), String> {
    let first = parse_program(item).map_err(|e| format!("`{item}`: {e}"))?;
    ensure(first.rules.len() + first.facts.len() == 1, || {
        format!("`{item}` is not one item")
    })?;
    let printed = first.to_string();
    let second = parse_program(&printed).map_err(|e| format!("`{printed}`: {e}"))?;
    ensure(second == first, || {
        format!("`{item}` -> `{printed}` parses differently")
    })?;
    ensure(second.to_string() == printed, || {
        format!("`{printed}` prints differently")
    })
}

pub const MUTATION_CHARS: [char; 18] = [
    '(', ')', ',', ':', '[', ']', '~', '<', '-', '@', '"', 'X', 'a', '0', '.', ' ', '#', '\u{e9}',
];

/// Deletes, replaces or inserts one character.
pub fn mutate(s: &str, pos: usize, op: u8, ch: char) -> String {
    let mut chars: Vec<char> = s.chars().collect();
    let pos = pos % (chars.len() + 1);
    match op % 3 {
        0 if pos < chars.len() => {
            chars.remove(pos);
        }
        1 if pos < chars.len() => chars[pos] = ch,
        _ => chars.insert(pos, ch),
    }
    chars.into_iter().collect()
}

/// A single-line input either parses or fails with errors located on line 1, within the text.
pub fn check_located(text: &str) -> Result<(), String> {
    let width = text.chars().count() + 1;
    match parse_program(text) {
        Ok(_) => Ok(()),
        Err(errs) => {
            ensure(!errs.0.is_empty(), || "empty error list".into())?;
            for e in &errs.0 {
                let (line, col) = e.location();
                ensure(line == 1 && col >= 1 && col <= width, || {
                    format!("`{text}`: bad location {line}:{col}")
                })?;
            }
            Ok(())
        }
    }
}

pub const TYPED_RULES: [&str; 4] = [
    "resident(X) <-0 lives(X,Y), city(Y)",
    "friendly(X) <-0 knows(X,Y), resident(Y)",
    "busy(X) <-0 resident(X), city(Y)",
    "visit(X) <-1 city(X)",
];

const TYPED_SIGNATURES: [(&str, &[&str]); 4] = [
    ("resident", &["person"]),
    ("city", &["place"]),
    ("lives", &["person", "place"]),
    ("knows", &["person", "person"]),
];

/// 10 nodes of two types with random edges.
pub fn typed_graph(seed: u64) -> (GraphDocument, BTreeMap<String, &'static str>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut types = BTreeMap::new();
    let nodes = (0..10)
        .map(|i| {
            let t = if i % 3 == 0 { "place" } else { "person" };
            types.insert(format!("v{i}"), t);
            NodeDoc {
                id: format!("v{i}"),
                node_type: Some(t.into()),
            }
        })
        .collect();
    let mut edges = Vec::new();
    for a in 0..10 {
        for b in 0..10 {
            if a != b && rng.gen_bool(0.35) {
                edges.push(EdgeDoc {
                    from: format!("v{a}"),
                    to: format!("v{b}"),
                    label: None,
                });
            }
        }
    }
    (GraphDocument { nodes, edges }, types)
}

pub fn typed_schema() -> TypeSchema {
    TYPED_SIGNATURES.iter().fold(TypeSchema::default(), |s, (p, ts)| {
        let positions: Vec<&[&str]> = ts.iter().map(std::slice::from_ref).collect();
        s.with(p, &positions)
    })
}

/// Every assignment of nodes to the rule's variables, filtered by hand: binary body
/// atoms must be edges, and with `typed` every argument must have its declared type.
pub fn brute_force_groundings(
    text: &str,
    doc: &GraphDocument,
    types: &BTreeMap<String, &str>,
    typed: bool,
) -> BTreeSet<Substitution> {
    let rule = parse_rule(text).unwrap();
    let vars = rule.variables();
    let nodes: Vec<&String> = doc.nodes.iter().map(|n| &n.id).collect();
    let edges: BTreeSet<(&str, &str)> = doc.edges.iter().map(|e| (e.from.as_str(), e.to.as_str())).collect();
    let signatures: BTreeMap<&str, &[&str]> = TYPED_SIGNATURES.into_iter().collect();
    let mut out = BTreeSet::new();
    for mut code in 0..nodes.len().pow(vars.len() as u32) {
        let mut sub = Substitution::new();
        for v in &vars {
            sub.insert(v.clone(), nodes[code % nodes.len()].clone());
            code /= nodes.len();
        }
        let value = |t: &Term| match t {
            Term::Var(v) => sub[v].clone(),
            Term::Const(c) => c.clone(),
        };
        let edge_ok = rule.body.iter().filter(|l| l.atom.args.len() == 2).all(|l| {
            let (a, b) = (value(&l.atom.args[0]), value(&l.atom.args[1]));
            edges.contains(&(a.as_str(), b.as_str()))
        });
        let type_ok = !typed
            || std::iter::once(&rule.head)
                .chain(rule.body.iter().map(|l| &l.atom))
                .all(|atom| match signatures.get(atom.predicate.as_str()) {
                    None => true,
                    Some(ts) => atom
                        .args
                        .iter()
                        .zip(ts.iter())
                        .all(|(t, want)| types[&value(t)] == *want),
                });
        if edge_ok && type_ok {
            out.insert(sub);
        }
    }
    out
}

/// (typed, untyped) grounding counts after checking both against the brute force.
pub fn check_typed_grounding(seed: u64, text: &str) -> Result<(usize, usize), String> {
    let (doc, types) = typed_graph(seed);
    let g = KnowledgeGraph::from_document(&doc).map_err(|e| e.to_string())?;
    let schema = typed_schema();
    schema.validate(&g).map_err(|e| e.to_string())?;
    let rule = parse_rule(text).map_err(|e| e.to_string())?;
    let typed: BTreeSet<_> = groundings(&rule, &g, Some(&schema)).into_iter().collect();
    let untyped: BTreeSet<_> = groundings(&rule, &g, None).into_iter().collect();
    ensure(typed == brute_force_groundings(text, &doc, &types, true), || {
        format!("seed {seed}: typed groundings of `{text}` differ from brute force")
    })?;
    ensure(untyped == brute_force_groundings(text, &doc, &types, false), || {
        format!("seed {seed}: untyped groundings of `{text}` differ from brute force")
    })?;
    ensure(typed.len() < untyped.len() && typed.is_subset(&untyped), || {
        format!(
            "seed {seed}: `{text}` typed {} not strictly inside untyped {}",
            typed.len(),
            untyped.len()
        )
    })?;
    Ok((typed.len(), untyped.len()))
}
