//! Time-indexed interpretation store, the fixpoint operator, inconsistency handling and the trace.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{AnnotationContext, AnnotationError, BodyMatch, InterpretationView, Registry};
use crate::graph::{groundings, rel_annotation, GraphError, KnowledgeGraph, Substitution, TypeSchema, REL};
use crate::interval::{Interval, BOUND_TOLERANCE};
use crate::lang::{AnnotationSpec, Atom, Entity, Fact, GroundAtom, Program, Query, Term, Timestep, Window};

/// Cause recorded on rows written by the reset policy.
pub const RESET_CAUSE: &str = "inconsistency-reset";

/// Source tag for work the engine does on its own (window facts at a new timestep).
pub const ENGINE_SOURCE: &str = "engine";

/// Stored bounds closer than this count as the same value. Finer than the query tolerance
/// so that long decimal encodings (one digit per card) still register as changes.
const CHANGE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InconsistencyPolicy {
    #[default]
    FlagAndHalt,
    ResetToUnknownStatic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub horizon: Timestep,
    pub canonical: bool,
    pub inconsistency_policy: InconsistencyPolicy,
    pub complement_pairs: Vec<(String, String)>,
    /// Guard against programs whose rounds never settle.
    pub max_rounds: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            horizon: 10,
            canonical: true,
            inconsistency_policy: InconsistencyPolicy::default(),
            complement_pairs: Vec::new(),
            max_rounds: 10_000,
        }
    }
}

/// What went wrong when an update could not be reconciled with the stored bound.
#[derive(Debug, Clone, PartialEq)]
pub struct InconsistencyReport {
    pub atom: GroundAtom,
    pub time: Timestep,
    pub current: Interval,
    pub incoming: Interval,
    pub cause: String,
}

impl fmt::Display for InconsistencyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "inconsistent bounds for {} at t={}: current {} vs incoming {} (from {})",
            self.atom, self.time, self.current, self.incoming, self.cause
        )
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("initial facts disagree on {atom}: {first} vs {second}")]
    InconsistentFacts {
        atom: GroundAtom,
        first: Interval,
        second: Interval,
    },
    #[error("{0}")]
    Inconsistency(Box<InconsistencyReport>),
    #[error("engine halted after an inconsistency: {0}")]
    Halted(Box<InconsistencyReport>),
    #[error("cannot advance past horizon {0}")]
    HorizonExceeded(Timestep),
    #[error("fact {fact} starts before the current time {now}")]
    RetroactiveFact { fact: String, now: Timestep },
    #[error("fact {fact} ends after horizon {horizon}")]
    FactBeyondHorizon { fact: String, horizon: Timestep },
    #[error("unknown annotation function `{0}`")]
    UnknownAnnotationFunction(String),
    #[error("annotation function failed for {head}: {source}")]
    Annotation {
        head: GroundAtom,
        #[source]
        source: AnnotationError,
    },
    #[error("no fixpoint after {rounds} rounds at t={time}")]
    NonConvergence { time: Timestep, rounds: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Result of a single update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateOutcome {
    Changed,
    /// A rule re-derived what is already stored.
    Reaffirmed,
    NoChange,
    Inconsistent,
}

/// Public view of a stored atom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtomState {
    pub bound: Interval,
    pub is_static: bool,
}

pub type Snapshot = BTreeMap<GroundAtom, AtomState>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub fpo: u64,
    pub time: Timestep,
    pub atom: GroundAtom,
    pub old: Interval,
    pub new: Interval,
    pub cause: String,
    pub source: String,
    /// Body atoms that satisfied the rule, empty for facts.
    pub support: Vec<GroundAtom>,
    pub made_static: bool,
}

impl TraceEntry {
    /// `fpo  node  label  old  new  source`
    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.fpo, self.atom.entity, self.atom.predicate, self.old, self.new, self.source
        )
    }
}

pub const TSV_HEADER: &str = "fpo\tnode\tlabel\told_bound\tnew_bound\tsource";

pub fn trace_to_tsv<'a>(rows: impl IntoIterator<Item = &'a TraceEntry>) -> String {
    let mut out = String::from(TSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.tsv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
struct Entry {
    bound: Interval,
    is_static: bool,
    /// Timestep at which the bound was last set.
    since: Timestep,
    /// Order in which the atom was first established.
    seq: u64,
}

#[derive(Debug, Clone)]
struct GroundLiteral {
    atom: GroundAtom,
    negated: bool,
    threshold: Interval,
    /// Graph-given value for `rel` literals.
    fixed: Option<Interval>,
}

#[derive(Debug, Clone)]
struct GroundRule {
    head: GroundAtom,
    body: Vec<GroundLiteral>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum UpdateKind {
    Derived,
    Fact { is_static: bool },
}

#[derive(Debug, Clone)]
struct Update {
    atom: GroundAtom,
    bound: Interval,
    cause: String,
    source: String,
    support: Vec<GroundAtom>,
    kind: UpdateKind,
}

struct View<'a>(&'a BTreeMap<GroundAtom, Entry>);

impl InterpretationView for View<'_> {
    fn bound(&self, atom: &GroundAtom) -> Option<Interval> {
        self.0.get(atom).map(|e| e.bound)
    }
}

type MemoKey = (usize, GroundAtom);

#[derive(Debug, Clone)]
pub struct Engine {
    graph: KnowledgeGraph,
    program: Program,
    config: EngineConfig,
    registry: Registry,
    grounded: Vec<Vec<GroundRule>>,
    now: Timestep,
    current: BTreeMap<GroundAtom, Entry>,
    history: Vec<BTreeMap<GroundAtom, Entry>>,
    pending: BTreeMap<Timestep, Vec<Update>>,
    /// Facts that still have timesteps ahead of them.
    scheduled: Vec<Fact>,
    /// Injected facts whose window reached past the injection time.
    injected_windows: Vec<Fact>,
    memo: HashMap<MemoKey, BTreeMap<GroundAtom, Interval>>,
    trace: Vec<TraceEntry>,
    fpo: u64,
    seq: u64,
    halted: Option<InconsistencyReport>,
}

fn ground_atom(atom: &Atom, sub: &Substitution) -> GroundAtom {
    let name = |t: &Term| match t {
        Term::Const(c) => c.clone(),
        Term::Var(v) => sub[v].clone(),
    };
    let entity = match atom.args.as_slice() {
        [a] => Entity::Node(name(a)),
        [a, b] => Entity::Edge(name(a), name(b)),
        _ => unreachable!("parser admits arity 1 or 2 only"),
    };
    GroundAtom {
        predicate: atom.predicate.clone(),
        entity,
    }
}

impl Engine {
    /// Seeds the interpretation with every fact whose window covers t=0.
    pub fn init(graph: KnowledgeGraph, program: Program, config: EngineConfig) -> Result<Self, EngineError> {
        Engine::init_with(graph, program, config, Registry::with_card_game(), None)
    }

    pub fn init_with(
        graph: KnowledgeGraph,
        program: Program,
        config: EngineConfig,
        registry: Registry,
        schema: Option<&TypeSchema>,
    ) -> Result<Self, EngineError> {
        let mut grounded = Vec::with_capacity(program.rules.len());
        for rule in &program.rules {
            let mut out = Vec::new();
            for sub in groundings(rule, &graph, schema) {
                let mut body = Vec::with_capacity(rule.body.len());
                for lit in &rule.body {
                    let atom = ground_atom(&lit.atom, &sub);
                    let fixed = match (&atom.entity, atom.predicate.as_str()) {
                        (Entity::Edge(a, b), REL) => Some(rel_annotation(a, b, &graph)?),
                        _ => None,
                    };
                    body.push(GroundLiteral {
                        atom,
                        negated: lit.negated,
                        threshold: lit.threshold,
                        fixed,
                    });
                }
                out.push(GroundRule {
                    head: ground_atom(&rule.head, &sub),
                    body,
                });
            }
            grounded.push(out);
        }

        for fact in &program.facts {
            if let Window::Span { to, .. } = fact.window {
                if to > config.horizon {
                    return Err(EngineError::FactBeyondHorizon {
                        fact: fact.id.clone(),
                        horizon: config.horizon,
                    });
                }
            }
        }

        let mut engine = Engine {
            graph,
            scheduled: program.facts.clone(),
            injected_windows: Vec::new(),
            program,
            config,
            registry,
            grounded,
            now: 0,
            current: BTreeMap::new(),
            history: Vec::new(),
            pending: BTreeMap::new(),
            memo: HashMap::new(),
            trace: Vec::new(),
            fpo: 0,
            seq: 0,
            halted: None,
        };
        let initial: Vec<Fact> = engine
            .scheduled
            .iter()
            .filter(|f| f.window.contains(0))
            .cloned()
            .collect();
        for fact in initial {
            let update = Update::from_fact(&fact, ENGINE_SOURCE);
            if engine.apply(&update, false) == UpdateOutcome::Inconsistent {
                return Err(EngineError::InconsistentFacts {
                    first: engine.current[&fact.atom].bound,
                    atom: fact.atom,
                    second: fact.annotation,
                });
            }
        }
        engine
            .scheduled
            .retain(|f| matches!(f.window, Window::Span { to, .. } if to > 0));
        Ok(engine)
    }

    pub fn now(&self) -> Timestep {
        self.now
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn graph(&self) -> &KnowledgeGraph {
        &self.graph
    }

    pub fn program(&self) -> &Program {
        &self.program
    }

    pub fn fpo_count(&self) -> u64 {
        self.fpo
    }

    pub fn halted(&self) -> Option<&InconsistencyReport> {
        self.halted.as_ref()
    }

    pub fn export_trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    /// Stored bound at `t`; `None` means absent (unknown). Future times only see static atoms.
    pub fn bound_at(&self, atom: &GroundAtom, t: Timestep) -> Option<Interval> {
        let slice = match t.cmp(&self.now) {
            std::cmp::Ordering::Less => &self.history[t as usize],
            std::cmp::Ordering::Equal => &self.current,
            std::cmp::Ordering::Greater => {
                return self.current.get(atom).filter(|e| e.is_static).map(|e| e.bound);
            }
        };
        slice.get(atom).map(|e| e.bound)
    }

    pub fn bound(&self, atom: &GroundAtom) -> Interval {
        self.bound_at(atom, self.now).unwrap_or(Interval::UNKNOWN)
    }

    /// Entailment: the atom's interval at `t` lies within the query bound.
    pub fn query(&self, q: &Query, t: Timestep) -> bool {
        self.bound_at(&q.atom, t)
            .unwrap_or(Interval::UNKNOWN)
            .is_subset_of(&q.bound)
    }

    pub fn is_static(&self, atom: &GroundAtom) -> bool {
        self.current.get(atom).is_some_and(|e| e.is_static)
    }

    pub fn snapshot(&self) -> Snapshot {
        snapshot_of(&self.current)
    }

    pub fn snapshot_at(&self, t: Timestep) -> Snapshot {
        match t.cmp(&self.now) {
            std::cmp::Ordering::Less => snapshot_of(&self.history[t as usize]),
            _ => self.snapshot(),
        }
    }

    fn ensure_running(&self) -> Result<(), EngineError> {
        match &self.halted {
            Some(r) => Err(EngineError::Halted(Box::new(r.clone()))),
            None => Ok(()),
        }
    }

    /// Applies `facts` at the current time, then runs the fixpoint.
    pub fn inject_and_recompute(&mut self, facts: &[Fact], source: &str) -> Result<Vec<TraceEntry>, EngineError> {
        self.ensure_running()?;
        for fact in facts {
            if let Window::Span { from, to } = fact.window {
                if from < self.now {
                    return Err(EngineError::RetroactiveFact {
                        fact: fact.to_string(),
                        now: self.now,
                    });
                }
                if to > self.config.horizon {
                    return Err(EngineError::FactBeyondHorizon {
                        fact: fact.to_string(),
                        horizon: self.config.horizon,
                    });
                }
                if to > self.now {
                    self.scheduled.push(fact.clone());
                    self.injected_windows.push(fact.clone());
                }
            }
        }
        let due = facts
            .iter()
            .filter(|f| f.window.contains(self.now))
            .map(|f| Update::from_fact(f, source))
            .collect();
        self.run_rounds(due, source)
    }

    /// Runs the fixpoint at the current time with no new facts.
    pub fn fixpoint_step(&mut self, source: &str) -> Result<Vec<TraceEntry>, EngineError> {
        self.ensure_running()?;
        self.run_rounds(Vec::new(), source)
    }

    /// Moves to the next timestep and applies the facts windowed there.
    pub fn advance_time(&mut self) -> Result<Timestep, EngineError> {
        self.ensure_running()?;
        if self.now >= self.config.horizon {
            return Err(EngineError::HorizonExceeded(self.config.horizon));
        }
        let stale: Vec<Timestep> = self.pending.range(..=self.now).map(|(t, _)| *t).collect();
        for t in stale {
            for u in self.pending.remove(&t).unwrap_or_default() {
                log::warn!("dropping {} due at t={t}: no fixpoint ran at that time", u.atom);
            }
        }
        self.history.push(self.current.clone());
        self.now += 1;
        if !self.config.canonical {
            self.current.retain(|_, e| e.is_static);
        }
        let now = self.now;
        let due: Vec<Fact> = self
            .scheduled
            .iter()
            .filter(|f| f.window.contains(now))
            .cloned()
            .collect();
        self.scheduled
            .retain(|f| matches!(f.window, Window::Span { to, .. } if to > now));
        let mut rows = Vec::new();
        for fact in due {
            let update = Update::from_fact(&fact, ENGINE_SOURCE);
            if self.apply(&update, false) == UpdateOutcome::Inconsistent {
                self.handle_inconsistency(&update, &mut rows)?;
            }
        }
        self.commit_round(rows);
        Ok(self.now)
    }

    fn run_rounds(&mut self, mut queue: Vec<Update>, source: &str) -> Result<Vec<TraceEntry>, EngineError> {
        let start = self.trace.len();
        // Delayed heads are attributed to the task whose invocation applies them.
        let mut due = self.pending.remove(&self.now).unwrap_or_default();
        for u in &mut due {
            u.source = source.to_string();
        }
        due.append(&mut queue);
        queue = due;
        let mut rounds = 0;
        loop {
            let mut rows = Vec::new();
            for update in &queue {
                let old = self.current.get(&update.atom).map(|e| e.bound);
                match self.apply(update, true) {
                    UpdateOutcome::Changed | UpdateOutcome::Reaffirmed => {
                        let e = &self.current[&update.atom];
                        rows.push(self.row(update, old.unwrap_or(Interval::UNKNOWN), e.bound, e.is_static));
                    }
                    UpdateOutcome::NoChange => {}
                    UpdateOutcome::Inconsistent => self.handle_inconsistency(update, &mut rows)?,
                }
            }
            let next = self.evaluate_rules(source)?;
            self.commit_round(rows);
            if next.is_empty() {
                break;
            }
            queue = next;
            rounds += 1;
            if rounds > self.config.max_rounds {
                return Err(EngineError::NonConvergence { time: self.now, rounds });
            }
        }
        Ok(self.trace[start..].to_vec())
    }

    fn commit_round(&mut self, mut rows: Vec<TraceEntry>) {
        if rows.is_empty() {
            return;
        }
        for r in &mut rows {
            r.fpo = self.fpo;
        }
        self.fpo += 1;
        self.trace.append(&mut rows);
    }

    fn row(&self, u: &Update, old: Interval, new: Interval, made_static: bool) -> TraceEntry {
        TraceEntry {
            fpo: 0,
            time: self.now,
            atom: u.atom.clone(),
            old,
            new,
            cause: u.cause.clone(),
            source: u.source.clone(),
            support: u.support.clone(),
            made_static,
        }
    }

    /// The update rule: tighten on subset, ignore weaker claims, otherwise inconsistent.
    /// A bound carried over from an earlier timestep may be replaced outright.
    fn apply(&mut self, u: &Update, record_reaffirm: bool) -> UpdateOutcome {
        let now = self.now;
        let fact_static = matches!(u.kind, UpdateKind::Fact { is_static: true });
        let outcome = match self.current.get_mut(&u.atom) {
            None => {
                if matches!(u.kind, UpdateKind::Fact { .. }) && u.bound.is_unknown() && !fact_static {
                    return UpdateOutcome::NoChange;
                }
                self.seq += 1;
                self.current.insert(
                    u.atom.clone(),
                    Entry {
                        bound: u.bound,
                        is_static: fact_static,
                        since: now,
                        seq: self.seq,
                    },
                );
                UpdateOutcome::Changed
            }
            Some(e) if e.is_static => UpdateOutcome::NoChange,
            Some(e) => {
                let weaker_or_equal = e.bound.is_subset_of(&u.bound) || u.bound.approx_eq(&e.bound, CHANGE_TOLERANCE);
                if weaker_or_equal {
                    e.is_static |= fact_static;
                    if u.kind == UpdateKind::Derived && record_reaffirm {
                        UpdateOutcome::Reaffirmed
                    } else {
                        UpdateOutcome::NoChange
                    }
                } else if u.bound.is_subset_of(&e.bound) || e.since < now {
                    e.bound = u.bound;
                    e.since = now;
                    e.is_static |= fact_static;
                    UpdateOutcome::Changed
                } else {
                    UpdateOutcome::Inconsistent
                }
            }
        };
        if outcome == UpdateOutcome::Changed && self.violates_complement(&u.atom) {
            return UpdateOutcome::Inconsistent;
        }
        outcome
    }

    fn violates_complement(&self, atom: &GroundAtom) -> bool {
        let Some(bound) = self.current.get(atom).map(|e| e.bound) else {
            return false;
        };
        self.config.complement_pairs.iter().any(|(p, q)| {
            let partner = if atom.predicate == *p {
                q
            } else if atom.predicate == *q {
                p
            } else {
                return false;
            };
            let other = GroundAtom {
                predicate: partner.clone(),
                entity: atom.entity.clone(),
            };
            self.current
                .get(&other)
                .is_some_and(|e| bound.intersect(&e.bound.negate()).is_none())
        })
    }

    fn handle_inconsistency(&mut self, u: &Update, rows: &mut Vec<TraceEntry>) -> Result<(), EngineError> {
        let current = self.current.get(&u.atom).map_or(Interval::UNKNOWN, |e| e.bound);
        let report = InconsistencyReport {
            atom: u.atom.clone(),
            time: self.now,
            current,
            incoming: u.bound,
            cause: u.cause.clone(),
        };
        match self.config.inconsistency_policy {
            InconsistencyPolicy::FlagAndHalt => {
                log::error!("{report}");
                self.halted = Some(report.clone());
                Err(EngineError::Inconsistency(Box::new(report)))
            }
            InconsistencyPolicy::ResetToUnknownStatic => {
                log::warn!("{report}; resetting to [0,1] static");
                rows.push(self.resolve_inconsistency(&u.atom, current, &u.source));
                Ok(())
            }
        }
    }

    fn resolve_inconsistency(&mut self, atom: &GroundAtom, old: Interval, source: &str) -> TraceEntry {
        let now = self.now;
        self.seq += 1;
        let seq = self.seq;
        let e = self.current.entry(atom.clone()).or_insert(Entry {
            bound: Interval::UNKNOWN,
            is_static: true,
            since: now,
            seq,
        });
        e.bound = Interval::UNKNOWN;
        e.is_static = true;
        e.since = now;
        TraceEntry {
            fpo: 0,
            time: now,
            atom: atom.clone(),
            old,
            new: Interval::UNKNOWN,
            cause: RESET_CAUSE.to_string(),
            source: source.to_string(),
            support: Vec::new(),
            made_static: true,
        }
    }

    fn literal_value(&self, lit: &GroundLiteral) -> Option<(Interval, u64)> {
        let (raw, seq) = match lit.fixed {
            Some(b) => (b, 0),
            None => self.current.get(&lit.atom).map(|e| (e.bound, e.seq))?,
        };
        let effective = if lit.negated { raw.negate() } else { raw };
        let ok = effective.lower() >= lit.threshold.lower() - BOUND_TOLERANCE
            && effective.upper() <= lit.threshold.upper() + BOUND_TOLERANCE;
        ok.then_some((effective, seq))
    }

    /// One pass over every grounded rule. Heads with Δt = 0 are returned for the next
    /// round; later heads are queued for their timestep.
    fn evaluate_rules(&mut self, source: &str) -> Result<Vec<Update>, EngineError> {
        let mut next = Vec::new();
        for (ri, rule) in self.program.rules.iter().enumerate() {
            // Satisfying groundings per head, heads in grounding order.
            let mut heads: Vec<(&GroundAtom, Vec<Vec<BodyMatch>>)> = Vec::new();
            let mut index: HashMap<&GroundAtom, usize> = HashMap::new();
            for g in &self.grounded[ri] {
                let mut matches = Vec::with_capacity(g.body.len());
                for lit in &g.body {
                    match self.literal_value(lit) {
                        Some((bound, established)) => matches.push(BodyMatch {
                            atom: lit.atom.clone(),
                            bound,
                            established,
                        }),
                        None => break,
                    }
                }
                if matches.len() < g.body.len() {
                    continue;
                }
                let slot = *index.entry(&g.head).or_insert_with(|| {
                    heads.push((&g.head, vec![Vec::new(); g.body.len()]));
                    heads.len() - 1
                });
                for (li, m) in matches.into_iter().enumerate() {
                    let per_lit = &mut heads[slot].1[li];
                    if !per_lit.iter().any(|x| x.atom == m.atom) {
                        per_lit.push(m);
                    }
                }
            }

            let satisfied: Vec<GroundAtom> = heads.iter().map(|(h, _)| (*h).clone()).collect();
            self.memo.retain(|(r, h), _| *r != ri || satisfied.contains(h));

            for (head, body) in heads {
                let support: BTreeMap<GroundAtom, Interval> = body
                    .iter()
                    .flatten()
                    .filter_map(|m| self.current.get(&m.atom).map(|e| (m.atom.clone(), e.bound)))
                    .collect();
                let key = (ri, head.clone());
                let fire = match self.memo.get(&key) {
                    None => true,
                    Some(prev) => support
                        .iter()
                        .any(|(a, b)| prev.get(a).is_none_or(|p| !p.approx_eq(b, CHANGE_TOLERANCE))),
                };
                let support_atoms: Vec<GroundAtom> = support.keys().cloned().collect();
                self.memo.insert(key, support);
                if !fire {
                    continue;
                }
                let bound = match &rule.head_annotation {
                    AnnotationSpec::Constant(c) => *c,
                    AnnotationSpec::Function(name) => {
                        let f = self
                            .registry
                            .get(name)
                            .map_err(|_| EngineError::UnknownAnnotationFunction(name.clone()))?;
                        let ctx = AnnotationContext {
                            head,
                            body,
                            interpretation: &View(&self.current),
                        };
                        f(&ctx).map_err(|source| EngineError::Annotation {
                            head: head.clone(),
                            source,
                        })?
                    }
                };
                let update = Update {
                    atom: head.clone(),
                    bound,
                    cause: rule.id.clone(),
                    source: source.to_string(),
                    support: support_atoms,
                    kind: UpdateKind::Derived,
                };
                if rule.delta_t == 0 {
                    next.push(update);
                } else {
                    let due = self.now + rule.delta_t;
                    if due > self.config.horizon {
                        log::warn!(
                            "discarding {} due at t={due}, past horizon {}",
                            head,
                            self.config.horizon
                        );
                    } else {
                        self.pending.entry(due).or_default().push(update);
                    }
                }
            }
        }
        Ok(next)
    }

    /// The chain of trace rows that produced the atom's bound at `t`, newest first.
    pub fn explain(&self, atom: &GroundAtom, t: Timestep) -> Vec<&TraceEntry> {
        let mut out = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![(atom.clone(), t, self.trace.len())];
        while let Some((a, time, before)) = stack.pop() {
            let found = self.trace[..before]
                .iter()
                .enumerate()
                .rev()
                .find(|(_, r)| r.atom == a && r.time <= time);
            let Some((i, row)) = found else { continue };
            if !seen.insert(i) {
                continue;
            }
            out.push(row);
            for s in row.support.iter().rev() {
                stack.push((s.clone(), row.time, i));
            }
        }
        out
    }

    /// Rebuilds the interpretation from the trace alone and returns the final snapshot.
    pub fn replay(&self) -> Result<Snapshot, EngineError> {
        let mut program = self.program.clone();
        program.rules.clear();
        let mut fresh = Engine::init_with(
            self.graph.clone(),
            program,
            self.config.clone(),
            Registry::default(),
            None,
        )?;
        fresh.config.inconsistency_policy = InconsistencyPolicy::ResetToUnknownStatic;
        // Injected facts scheduled for later timesteps apply silently on advance.
        fresh.scheduled.extend(self.injected_windows.iter().cloned());
        for row in &self.trace {
            while fresh.now < row.time {
                fresh.advance_time()?;
            }
            fresh.seq += 1;
            let seq = fresh.seq;
            let e = fresh.current.entry(row.atom.clone()).or_insert(Entry {
                bound: row.new,
                is_static: false,
                since: row.time,
                seq,
            });
            e.bound = row.new;
            e.is_static |= row.made_static;
        }
        while fresh.now < self.now {
            fresh.advance_time()?;
        }
        Ok(fresh.snapshot())
    }
}

fn snapshot_of(map: &BTreeMap<GroundAtom, Entry>) -> Snapshot {
    map.iter()
        .map(|(a, e)| {
            (
                a.clone(),
                AtomState {
                    bound: e.bound,
                    is_static: e.is_static,
                },
            )
        })
        .collect()
}

impl Update {
    fn from_fact(fact: &Fact, source: &str) -> Self {
        Update {
            atom: fact.atom.clone(),
            bound: fact.annotation,
            cause: fact.id.clone(),
            source: source.to_string(),
            support: Vec::new(),
            kind: UpdateKind::Fact {
                is_static: fact.is_static(),
            },
        }
    }
}
