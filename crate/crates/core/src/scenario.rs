//! Scenario files, the deterministic and real-time schedulers, built-in scenarios and
//! golden-trace comparison.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{card_points, deck, Registry};
use crate::bridge::{
    classify, run_poller_with, BridgeError, ClassifierAdapter, ExternalProcessAdapter, FactConversionOptions,
    InputSource, PollRecord, PollerConfig, Postprocess, PredictionEvent, ScriptedAdapter, ScriptedInputs,
};
use crate::engine::{Engine, EngineConfig, EngineError, InconsistencyReport, TraceEntry};
use crate::graph::{EdgeDoc, GraphDocument, GraphError, KnowledgeGraph, NodeDoc, TypeSchema};
use crate::interval::{Interval, IntervalError};
use crate::lang::{parse_fact, parse_program, parse_query, Entity, Fact, ParseError, Program, Query, Timestep, Window};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{what}: {message}")]
    Json { what: String, message: String },
    #[error("{what}:\n{message}")]
    Parse { what: String, message: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("unknown classifier `{0}`")]
    UnknownClassifier(String),
    #[error("annotation function `{0}` is not registered")]
    UnknownFunction(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
}

impl ScenarioError {
    /// True for problems with the files given, false for failures while reasoning.
    pub fn is_input_error(&self) -> bool {
        match self {
            ScenarioError::Engine(e) | ScenarioError::Bridge(BridgeError::Engine(e)) => matches!(
                e,
                EngineError::UnknownAnnotationFunction(..)
                    | EngineError::Graph(..)
                    | EngineError::RetroactiveFact { .. }
                    | EngineError::FactBeyondHorizon { .. }
            ),
            _ => true,
        }
    }
}

/// A file reference, or the content written inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Source<T> {
    Path(String),
    Inline(T),
}

/// Text given by path, or `{"inline": "..."}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TextSource {
    Path(String),
    Inline { inline: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdapterSpec {
    /// Scores come from the prediction events themselves.
    Scripted { inputs: Source<Vec<PredictionEvent>> },
    /// Scores come from a child process speaking line-delimited JSON.
    External {
        command: Vec<String>,
        inputs: Source<Vec<PredictionEvent>>,
    },
    /// Draws the whole deck in a seeded order. `noisy` replaces one-hot scores by logits.
    ShuffledDeck {
        target: String,
        #[serde(default)]
        noisy: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSpec {
    pub adapter: AdapterSpec,
    /// Empty means the 52 card names.
    #[serde(default)]
    pub class_names: Vec<String>,
    #[serde(default)]
    pub postprocess: Postprocess,
    #[serde(default)]
    pub conversion: FactConversionOptions,
}

/// One unit of scheduled work, run under a single engine access.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Step {
    /// Move to the next timestep first.
    pub advance: bool,
    /// Classifiers to poll for one input each.
    pub classify: Vec<String>,
    /// Extra facts, applied at the current time.
    pub facts: Vec<String>,
    /// Fact templates instantiated with `{class}` for every class that fired.
    pub facts_per_class: Vec<String>,
    /// Run the fixpoint even when there is nothing to inject.
    pub recompute: bool,
}

fn default_source_1() -> String {
    "1".into()
}

fn default_source_2() -> String {
    "2".into()
}

fn default_tick_secs() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverSpec {
    #[serde(default = "default_source_1")]
    pub source: String,
    /// Step for tick i.
    #[serde(default)]
    pub ticks: Vec<Step>,
    /// Run every tick after `ticks` until its classifier inputs run out.
    #[serde(default)]
    pub repeat: Option<Step>,
    #[serde(default = "default_tick_secs")]
    pub tick_secs: f64,
}

fn default_interval_ticks() -> u64 {
    1
}

fn default_interval_secs() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PollerSpec {
    #[serde(default = "default_source_2")]
    pub source: String,
    #[serde(default = "default_interval_ticks")]
    pub interval_ticks: u64,
    #[serde(default = "default_interval_secs")]
    pub interval_secs: f64,
    #[serde(default)]
    pub condition: Option<String>,
    pub on_fire: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorSpec {
    /// Stop before the next tick once this query holds.
    pub stop_when: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceOptions {
    /// Export node rows only, leaving out edge atoms.
    pub nodes_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub graph: Source<GraphDocument>,
    pub program: TextSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<Source<TypeSchema>>,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub classifiers: BTreeMap<String, ClassifierSpec>,
    pub driver: DriverSpec,
    #[serde(default)]
    pub pollers: Vec<PollerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monitor: Option<MonitorSpec>,
    #[serde(default)]
    pub trace: TraceOptions,
    /// Queries evaluated at the end of a run.
    #[serde(default)]
    pub queries: Vec<String>,
}

impl ScenarioSpec {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        serde_json::from_str(text).map_err(|e| ScenarioError::Json {
            what: "scenario".into(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes") + "\n"
    }

    pub fn load(path: &Path) -> Result<(Self, PathBuf), ScenarioError> {
        let text = read(path)?;
        let spec = ScenarioSpec::from_json(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((spec, base))
    }
}

fn read(path: &Path) -> Result<String, ScenarioError> {
    std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct Classifier {
    adapter: Box<dyn ClassifierAdapter>,
    inputs: ScriptedInputs,
    conversion: FactConversionOptions,
}

struct Poller {
    source: String,
    config: PollerConfig,
    interval_secs: f64,
    on_fire: Vec<Step>,
    done: bool,
}

/// A scenario with every file read and parsed, ready to run.
pub struct Scenario {
    pub name: String,
    pub engine: Engine,
    classifiers: BTreeMap<String, Classifier>,
    driver: DriverSpec,
    pollers: Vec<Poller>,
    monitor: Option<Query>,
    pub trace: TraceOptions,
    pub queries: Vec<Query>,
}

impl fmt::Debug for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Scenario")
            .field("name", &self.name)
            .field("classifiers", &self.classifiers.keys().collect::<Vec<_>>())
            .field("pollers", &self.pollers.len())
            .finish_non_exhaustive()
    }
}

fn parse_query_in(what: &str, text: &str) -> Result<Query, ScenarioError> {
    parse_query(text).map_err(|e| ScenarioError::Parse {
        what: format!("{what} `{text}`"),
        message: e.to_string(),
    })
}

/// Shuffled deck events, one per card, all available from tick 0.
pub fn deck_events(seed: u64, target: &str, noisy: bool) -> Vec<PredictionEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cards = deck();
    cards.shuffle(&mut rng);
    let names = deck();
    cards
        .into_iter()
        .map(|card| {
            let scores = if noisy {
                names
                    .iter()
                    .map(|c| (c.clone(), if *c == card { 8.0 } else { rng.gen_range(-1.0..1.0) }))
                    .collect()
            } else {
                [(card, 1.0)].into()
            };
            PredictionEvent {
                tick: 0,
                target: target.to_string(),
                scores: Some(scores),
                input_id: None,
            }
        })
        .collect()
}

/// How the driver, the pollers and the monitor interact with the run.
#[derive(Debug, Clone, PartialEq)]
pub enum StopReason {
    /// Nothing left to do.
    Completed,
    Monitor,
    Horizon,
    Inconsistency(InconsistencyReport),
}

#[derive(Debug)]
pub struct RunReport {
    pub stop: StopReason,
    pub ticks: u64,
    pub engine: Engine,
    pub exported: Vec<TraceEntry>,
    pub query_results: Vec<(Query, bool)>,
}

impl RunReport {
    pub fn tsv(&self) -> String {
        crate::engine::trace_to_tsv(&self.exported)
    }

    pub fn summary(&self) -> String {
        let trace = self.engine.export_trace();
        let resets = trace.iter().filter(|r| r.cause == crate::engine::RESET_CAUSE).count();
        let mut s = format!(
            "stopped: {}\nticks: {}\ntimestep: {}\nfpo: {}\nupdates: {}\ninconsistencies: {}\n",
            self.stop,
            self.ticks,
            self.engine.now(),
            self.engine.fpo_count(),
            trace.len(),
            resets + usize::from(matches!(self.stop, StopReason::Inconsistency(_))),
        );
        for (q, holds) in &self.query_results {
            s.push_str(&format!("query {q}: {holds}\n"));
        }
        s
    }
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StopReason::Completed => f.write_str("completed"),
            StopReason::Monitor => f.write_str("monitor condition met"),
            StopReason::Horizon => f.write_str("horizon reached"),
            StopReason::Inconsistency(r) => write!(f, "halted: {r}"),
        }
    }
}

enum StepOutcome {
    Done,
    /// A required input was not available; nothing was done.
    NoInput,
    Horizon,
}

impl Scenario {
    /// Reads referenced files relative to `base`.
    pub fn resolve(spec: &ScenarioSpec, base: &Path) -> Result<Self, ScenarioError> {
        Scenario::resolve_with(spec, &|p: &str| read(&base.join(p)))
    }

    pub fn resolve_with(
        spec: &ScenarioSpec,
        load: &dyn Fn(&str) -> Result<String, ScenarioError>,
    ) -> Result<Self, ScenarioError> {
        let json = |what: &str, text: &str| -> Result<serde_json::Value, ScenarioError> {
            serde_json::from_str(text).map_err(|e| ScenarioError::Json {
                what: what.to_string(),
                message: e.to_string(),
            })
        };
        let graph_doc: GraphDocument = match &spec.graph {
            Source::Inline(doc) => doc.clone(),
            Source::Path(p) => serde_json::from_value(json(p, &load(p)?)?).map_err(|e| ScenarioError::Json {
                what: p.clone(),
                message: e.to_string(),
            })?,
        };
        let graph = KnowledgeGraph::from_document(&graph_doc)?;
        let (program_name, program_text) = match &spec.program {
            TextSource::Path(p) => (p.clone(), load(p)?),
            TextSource::Inline { inline } => ("program".to_string(), inline.clone()),
        };
        let program = parse_program(&program_text).map_err(|e| ScenarioError::Parse {
            what: program_name,
            message: e.to_string(),
        })?;
        let schema: Option<TypeSchema> = match &spec.schema {
            None => None,
            Some(Source::Inline(s)) => Some(s.clone()),
            Some(Source::Path(p)) => {
                Some(
                    serde_json::from_value(json(p, &load(p)?)?).map_err(|e| ScenarioError::Json {
                        what: p.clone(),
                        message: e.to_string(),
                    })?,
                )
            }
        };
        if let Some(s) = &schema {
            s.validate(&graph)?;
        }
        let registry = Registry::with_card_game();
        check_functions(&program, &registry)?;

        let mut classifiers = BTreeMap::new();
        for (name, c) in &spec.classifiers {
            let class_names = if c.class_names.is_empty() {
                deck()
            } else {
                c.class_names.clone()
            };
            let events = |src: &Source<Vec<PredictionEvent>>| -> Result<ScriptedInputs, ScenarioError> {
                match src {
                    Source::Inline(evs) => Ok(ScriptedInputs::new(evs.clone())),
                    Source::Path(p) => Ok(ScriptedInputs::from_jsonl(&load(p)?)?),
                }
            };
            let (adapter, inputs): (Box<dyn ClassifierAdapter>, ScriptedInputs) = match &c.adapter {
                AdapterSpec::Scripted { inputs } => (
                    Box::new(ScriptedAdapter::new(class_names, c.postprocess)),
                    events(inputs)?,
                ),
                AdapterSpec::External { command, inputs } => (
                    Box::new(ExternalProcessAdapter::spawn(command, class_names, c.postprocess)?),
                    events(inputs)?,
                ),
                AdapterSpec::ShuffledDeck { target, noisy } => (
                    Box::new(ScriptedAdapter::new(class_names, c.postprocess)),
                    ScriptedInputs::new(deck_events(spec.seed, target, *noisy)),
                ),
            };
            classifiers.insert(
                name.clone(),
                Classifier {
                    adapter,
                    inputs,
                    conversion: c.conversion.clone(),
                },
            );
        }

        let mut steps: Vec<&Step> = spec.driver.ticks.iter().chain(&spec.driver.repeat).collect();
        let mut pollers = Vec::new();
        for p in &spec.pollers {
            let condition = p
                .condition
                .as_deref()
                .map(|c| parse_query_in("poll condition", c))
                .transpose()?;
            pollers.push(Poller {
                source: p.source.clone(),
                config: PollerConfig::new(p.interval_ticks as f64, condition)?,
                interval_secs: p.interval_secs,
                on_fire: p.on_fire.clone(),
                done: false,
            });
            steps.extend(&p.on_fire);
        }
        for step in steps {
            for c in &step.classify {
                if !classifiers.contains_key(c) {
                    return Err(ScenarioError::UnknownClassifier(c.clone()));
                }
            }
            for f in step.facts.iter().chain(&step.facts_per_class) {
                parse_fact(&f.replace("{class}", "x")).map_err(|e| ScenarioError::Parse {
                    what: format!("step fact `{f}`"),
                    message: e.to_string(),
                })?;
            }
        }
        let monitor = spec
            .monitor
            .as_ref()
            .map(|m| parse_query_in("monitor", &m.stop_when))
            .transpose()?;
        let queries = spec
            .queries
            .iter()
            .map(|q| parse_query_in("query", q))
            .collect::<Result<_, _>>()?;

        let engine = Engine::init_with(graph, program, spec.engine.clone(), registry, schema.as_ref())?;
        Ok(Scenario {
            name: spec.name.clone(),
            engine,
            classifiers,
            driver: spec.driver.clone(),
            pollers,
            monitor,
            trace: spec.trace.clone(),
            queries,
        })
    }

    fn exported(&self, engine: &Engine) -> Vec<TraceEntry> {
        engine
            .export_trace()
            .iter()
            .filter(|r| !self.trace.nodes_only || matches!(r.atom.entity, Entity::Node(_)))
            .cloned()
            .collect()
    }

    /// Single-threaded run: each tick runs the monitor check, the driver step, then
    /// every poller in declaration order.
    pub fn run_deterministic(mut self) -> Result<RunReport, ScenarioError> {
        let cap = 4 * (u64::from(self.engine.config().horizon) + 1) + self.driver.ticks.len() as u64 + 16;
        let mut stop = StopReason::Completed;
        let mut tick = 0;
        let mut engine = self.engine.clone();
        let result = (|| -> Result<(), ScenarioError> {
            while tick < cap {
                if self.monitor.as_ref().is_some_and(|q| engine.query(q, engine.now())) {
                    stop = StopReason::Monitor;
                    return Ok(());
                }
                let mut busy = false;
                let driver_step = match self.driver.ticks.get(tick as usize) {
                    Some(s) => Some((s.clone(), false)),
                    None => self.driver.repeat.clone().map(|s| (s, true)),
                };
                if let Some((step, required)) = driver_step {
                    let source = self.driver.source.clone();
                    match run_step(&mut engine, &mut self.classifiers, &step, tick, &source, required)? {
                        StepOutcome::Done => busy = true,
                        StepOutcome::NoInput => {}
                        StepOutcome::Horizon => {
                            stop = StopReason::Horizon;
                            return Ok(());
                        }
                    }
                }
                for i in 0..self.pollers.len() {
                    match fire_poller(&mut engine, &mut self.classifiers, &mut self.pollers[i], tick)? {
                        StepOutcome::Done => busy = true,
                        StepOutcome::NoInput => {}
                        StepOutcome::Horizon => {
                            stop = StopReason::Horizon;
                            return Ok(());
                        }
                    }
                }
                tick += 1;
                if !busy {
                    return Ok(());
                }
            }
            Ok(())
        })();
        match result {
            Ok(()) => {}
            Err(ScenarioError::Engine(EngineError::Inconsistency(r))) => stop = StopReason::Inconsistency(*r),
            Err(e) => return Err(e),
        }
        let query_results = self
            .queries
            .iter()
            .map(|q| (q.clone(), engine.query(q, engine.now())))
            .collect();
        Ok(RunReport {
            stop,
            ticks: tick,
            exported: self.exported(&engine),
            engine,
            query_results,
        })
    }

    /// Driver and pollers on their own threads, sharing the engine behind one lock.
    /// Runs for `duration` or until every task is finished.
    pub fn run_realtime(self, duration: Duration) -> Result<RealtimeReport, ScenarioError> {
        let Scenario {
            engine,
            classifiers,
            driver,
            pollers,
            monitor,
            trace,
            ..
        } = self;
        let engine = Mutex::new(engine);
        let classifiers = Mutex::new(classifiers);
        let stop = AtomicBool::new(false);
        let driver_done = AtomicBool::new(false);
        let failure: Mutex<Option<ScenarioError>> = Mutex::new(None);
        let start = Instant::now();
        let fail = |e: ScenarioError| {
            failure.lock().expect("lock").get_or_insert(e);
            stop.store(true, Ordering::SeqCst);
        };

        let poll_logs = std::thread::scope(|s| {
            s.spawn(|| {
                let tick_len = Duration::from_secs_f64(driver.tick_secs);
                for tick in 0u64.. {
                    let deadline = start + tick_len * tick as u32;
                    while Instant::now() < deadline {
                        if stop.load(Ordering::SeqCst) {
                            return;
                        }
                        std::thread::sleep((deadline - Instant::now()).min(Duration::from_millis(10)));
                    }
                    let mut e = engine.lock().expect("engine lock");
                    if monitor.as_ref().is_some_and(|q| e.query(q, e.now())) {
                        break;
                    }
                    let step = match driver.ticks.get(tick as usize) {
                        Some(s) => (s, false),
                        None => match &driver.repeat {
                            Some(s) => (s, true),
                            None => break,
                        },
                    };
                    let mut cls = classifiers.lock().expect("classifier lock");
                    match run_step(&mut e, &mut cls, step.0, u64::MAX, &driver.source, step.1) {
                        Ok(StepOutcome::Done) => {}
                        Ok(StepOutcome::NoInput | StepOutcome::Horizon) => break,
                        Err(err) => {
                            fail(err);
                            break;
                        }
                    }
                }
                driver_done.store(true, Ordering::SeqCst);
            });
            let handles: Vec<_> = pollers
                .iter()
                .map(|p| {
                    let (engine, classifiers, stop, fail) = (&engine, &classifiers, &stop, &fail);
                    s.spawn(move || {
                        let cfg = PollerConfig {
                            poll_interval: p.interval_secs,
                            poll_condition: p.config.poll_condition.clone(),
                        };
                        let mut state = Poller {
                            source: p.source.clone(),
                            config: PollerConfig::new(1.0, None).expect("positive interval"),
                            interval_secs: p.interval_secs,
                            on_fire: p.on_fire.clone(),
                            done: false,
                        };
                        let result = run_poller_with(&cfg, engine, stop, |e| {
                            let mut cls = classifiers.lock().expect("classifier lock");
                            match fire_poller(e, &mut cls, &mut state, u64::MAX) {
                                Ok(StepOutcome::Horizon) => Ok(false),
                                Ok(_) => Ok(true),
                                Err(ScenarioError::Bridge(b)) => Err(b),
                                Err(ScenarioError::Engine(en)) => Err(BridgeError::Engine(en)),
                                Err(other) => Err(BridgeError::Adapter {
                                    source_tag: state.source.clone(),
                                    message: other.to_string(),
                                }),
                            }
                        });
                        result.unwrap_or_else(|e| {
                            fail(ScenarioError::Bridge(e));
                            Vec::new()
                        })
                    })
                })
                .collect();
            while start.elapsed() < duration && !stop.load(Ordering::SeqCst) {
                if driver_done.load(Ordering::SeqCst) && pollers.is_empty() {
                    break;
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            stop.store(true, Ordering::SeqCst);
            handles
                .into_iter()
                .map(|h| h.join().expect("poller thread"))
                .collect::<Vec<_>>()
        });

        let engine = engine.into_inner().expect("engine lock");
        if let Some(err) = failure.into_inner().expect("lock") {
            match err {
                ScenarioError::Engine(EngineError::Inconsistency(_))
                | ScenarioError::Bridge(BridgeError::Engine(EngineError::Inconsistency(_))) => {}
                other => return Err(other),
            }
        }
        let exported = engine
            .export_trace()
            .iter()
            .filter(|r| !trace.nodes_only || matches!(r.atom.entity, Entity::Node(_)))
            .cloned()
            .collect();
        Ok(RealtimeReport {
            engine,
            exported,
            polls: poll_logs,
        })
    }
}

#[derive(Debug)]
pub struct RealtimeReport {
    pub engine: Engine,
    pub exported: Vec<TraceEntry>,
    /// Wake-ups per poller, in declaration order.
    pub polls: Vec<Vec<PollRecord>>,
}

fn check_functions(program: &Program, registry: &Registry) -> Result<(), ScenarioError> {
    for rule in &program.rules {
        if let crate::lang::AnnotationSpec::Function(name) = &rule.head_annotation {
            if !registry.contains(name) {
                return Err(ScenarioError::UnknownFunction(name.clone()));
            }
        }
    }
    Ok(())
}

fn step_fact(text: &str, now: Timestep, id: &str) -> Result<Fact, ScenarioError> {
    let mut fact = parse_fact(text).map_err(|e: ParseError| ScenarioError::Parse {
        what: format!("step fact `{text}`"),
        message: e.to_string(),
    })?;
    if !fact.is_static() {
        fact.window = Window::at(now);
    }
    fact.id = id.to_string();
    Ok(fact)
}

fn run_step(
    engine: &mut Engine,
    classifiers: &mut BTreeMap<String, Classifier>,
    step: &Step,
    tick: u64,
    source: &str,
    required: bool,
) -> Result<StepOutcome, ScenarioError> {
    let mut inputs = Vec::new();
    for name in &step.classify {
        let c = classifiers
            .get_mut(name)
            .ok_or_else(|| ScenarioError::UnknownClassifier(name.clone()))?;
        match c.inputs.next_ready(tick) {
            Some(ev) => inputs.push((name, ev)),
            None if required => return Ok(StepOutcome::NoInput),
            None => log::warn!("classifier `{name}` has no input at tick {tick}"),
        }
    }
    if step.advance {
        match engine.advance_time() {
            Ok(_) => {}
            Err(EngineError::HorizonExceeded(_)) => return Ok(StepOutcome::Horizon),
            Err(e) => return Err(e.into()),
        }
    }
    let now = engine.now();
    let mut facts = Vec::new();
    for (name, ev) in inputs {
        let c = classifiers.get_mut(name).expect("checked above");
        let produced = classify(c.adapter.as_mut(), &ev, &c.conversion, now)?;
        for f in produced.iter().filter(|f| !f.annotation.is_unknown()) {
            for template in &step.facts_per_class {
                let text = template.replace("{class}", &f.atom.predicate);
                facts.push(step_fact(&text, now, &format!("{source}:{}", f.atom.predicate))?);
            }
        }
        facts.splice(0..0, produced);
    }
    for text in &step.facts {
        facts.push(step_fact(text, now, &format!("{source}:step"))?);
    }
    if !facts.is_empty() {
        engine.inject_and_recompute(&facts, source)?;
    } else if step.recompute {
        engine.fixpoint_step(source)?;
    }
    Ok(StepOutcome::Done)
}

fn fire_poller(
    engine: &mut Engine,
    classifiers: &mut BTreeMap<String, Classifier>,
    poller: &mut Poller,
    tick: u64,
) -> Result<StepOutcome, ScenarioError> {
    if poller.done || !poller.config.fires_at(tick, engine) {
        return Ok(StepOutcome::NoInput);
    }
    // Fire only when every classifier the steps need has an input ready.
    let mut needed: Vec<&String> = poller.on_fire.iter().flat_map(|s| &s.classify).collect();
    needed.sort();
    needed.dedup();
    for name in &needed {
        let c = classifiers
            .get(*name)
            .ok_or_else(|| ScenarioError::UnknownClassifier((*name).clone()))?;
        if c.inputs.is_exhausted() {
            poller.done = true;
            return Ok(StepOutcome::NoInput);
        }
        let mut probe = c.inputs.clone();
        if probe.next_ready(tick).is_none() {
            return Ok(StepOutcome::NoInput);
        }
    }
    for step in &poller.on_fire {
        if let StepOutcome::Horizon = run_step(engine, classifiers, step, tick, &poller.source, false)? {
            return Ok(StepOutcome::Horizon);
        }
    }
    Ok(StepOutcome::Done)
}

/// Verdict for one query plus the trace rows that explain it.
#[derive(Debug, Clone)]
pub struct QueryAnswer {
    pub query: Query,
    pub at: Timestep,
    pub holds: bool,
    pub bound: Option<Interval>,
    pub chain: Vec<TraceEntry>,
}

pub fn answer_query(engine: &Engine, query: &Query, at: Timestep) -> QueryAnswer {
    QueryAnswer {
        query: query.clone(),
        at,
        holds: engine.query(query, at),
        bound: engine.bound_at(&query.atom, at),
        chain: engine.explain(&query.atom, at).into_iter().cloned().collect(),
    }
}

impl fmt::Display for QueryAnswer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} at t={}: {}", self.query, self.at, self.holds)?;
        match self.bound {
            None => writeln!(
                f,
                "  {} is open-world unknown [0,1]: no evidence recorded",
                self.query.atom
            ),
            Some(b) => {
                writeln!(f, "  current bound {b}")?;
                for r in &self.chain {
                    writeln!(
                        f,
                        "  fpo {} t={} {} {} -> {} by {} (source {})",
                        r.fpo, r.time, r.atom, r.old, r.new, r.cause, r.source
                    )?;
                }
                Ok(())
            }
        }
    }
}

/// One expected row. `source` is optional in golden files.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldenRow {
    pub fpo: u64,
    pub node: String,
    pub label: String,
    pub old: Interval,
    pub new: Interval,
    pub source: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GoldenTrace {
    pub rows: Vec<GoldenRow>,
}

impl GoldenTrace {
    /// Reads a TSV with header `fpo node label old_bound new_bound [source]`.
    pub fn parse_tsv(text: &str) -> Result<Self, ScenarioError> {
        let bad = |line: usize, msg: String| ScenarioError::Invalid(format!("trace line {line}: {msg}"));
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| bad(1, "empty file".into()))?;
        let cols: Vec<&str> = header.split('\t').map(str::trim).collect();
        if cols.len() < 5 || cols[..5] != ["fpo", "node", "label", "old_bound", "new_bound"] {
            return Err(bad(1, format!("unexpected header `{header}`")));
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            let f: Vec<&str> = line.split('\t').map(str::trim).collect();
            if f.len() != cols.len() {
                return Err(bad(
                    i + 1,
                    format!("expected {} columns, found {}", cols.len(), f.len()),
                ));
            }
            let interval = |s: &str| {
                s.parse::<Interval>()
                    .map_err(|e: IntervalError| bad(i + 1, e.to_string()))
            };
            rows.push(GoldenRow {
                fpo: f[0].parse().map_err(|_| bad(i + 1, format!("bad fpo `{}`", f[0])))?,
                node: f[1].to_string(),
                label: f[2].to_string(),
                old: interval(f[3])?,
                new: interval(f[4])?,
                source: f.get(5).map(|s| s.to_string()),
            });
        }
        Ok(GoldenTrace { rows })
    }

    pub fn from_entries(rows: &[TraceEntry]) -> Self {
        GoldenTrace {
            rows: rows
                .iter()
                .map(|r| GoldenRow {
                    fpo: r.fpo,
                    node: r.atom.entity.to_string(),
                    label: r.atom.predicate.clone(),
                    old: r.old,
                    new: r.new,
                    source: Some(r.source.clone()),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CompareReport {
    pub compared: usize,
    /// (row index, description)
    pub mismatches: Vec<(usize, String)>,
}

impl CompareReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

impl fmt::Display for CompareReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passed() {
            return writeln!(f, "match: {} rows", self.compared);
        }
        for (i, m) in &self.mismatches {
            writeln!(f, "row {i}: {m}")?;
        }
        writeln!(f, "{} mismatching rows out of {}", self.mismatches.len(), self.compared)
    }
}

/// Row-by-row comparison with an absolute bound tolerance. Sources are compared only
/// when both sides have them.
pub fn compare_trace(actual: &GoldenTrace, golden: &GoldenTrace, tol: f64) -> CompareReport {
    let mut report = CompareReport {
        compared: actual.rows.len().max(golden.rows.len()),
        mismatches: Vec::new(),
    };
    for i in 0..report.compared {
        let (a, g) = match (actual.rows.get(i), golden.rows.get(i)) {
            (Some(a), Some(g)) => (a, g),
            (None, Some(g)) => {
                report
                    .mismatches
                    .push((i, format!("missing row, expected {} {} {}", g.fpo, g.node, g.label)));
                continue;
            }
            (Some(a), None) => {
                report
                    .mismatches
                    .push((i, format!("extra row {} {} {}", a.fpo, a.node, a.label)));
                continue;
            }
            (None, None) => unreachable!(),
        };
        let mut diffs = Vec::new();
        if a.fpo != g.fpo {
            diffs.push(format!("fpo {} != {}", a.fpo, g.fpo));
        }
        if a.node != g.node {
            diffs.push(format!("node {} != {}", a.node, g.node));
        }
        if a.label != g.label {
            diffs.push(format!("label {} != {}", a.label, g.label));
        }
        if !a.old.approx_eq(&g.old, tol) {
            diffs.push(format!("old bound {} != {}", a.old, g.old));
        }
        if !a.new.approx_eq(&g.new, tol) {
            diffs.push(format!("new bound {} != {}", a.new, g.new));
        }
        if let (Some(sa), Some(sg)) = (&a.source, &g.source) {
            if sa != sg {
                diffs.push(format!("source {sa} != {sg}"));
            }
        }
        if !diffs.is_empty() {
            report.mismatches.push((i, diffs.join(", ")));
        }
    }
    report
}

/// A scenario plus the files its spec refers to.
#[derive(Debug, Clone, PartialEq)]
pub struct BuiltinScenario {
    pub spec: ScenarioSpec,
    pub files: BTreeMap<String, String>,
}

impl BuiltinScenario {
    pub fn resolve(&self) -> Result<Scenario, ScenarioError> {
        Scenario::resolve_with(&self.spec, &|p: &str| {
            self.files.get(p).cloned().ok_or_else(|| ScenarioError::Io {
                path: p.into(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "not part of the built-in scenario"),
            })
        })
    }

    /// Writes `<name>.json` and every referenced file into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<PathBuf, ScenarioError> {
        let io = |path: &Path, source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        };
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        for (name, content) in &self.files {
            let p = dir.join(name);
            std::fs::write(&p, content).map_err(|e| io(&p, e))?;
        }
        let p = dir.join(format!("{}.json", self.spec.name));
        std::fs::write(&p, self.spec.to_json()).map_err(|e| io(&p, e))?;
        Ok(p)
    }
}

fn graph_json(doc: &GraphDocument) -> String {
    serde_json::to_string_pretty(doc).expect("graph serializes") + "\n"
}

fn event(tick: u64, target: &str, scores: &[(&str, f64)]) -> PredictionEvent {
    PredictionEvent {
        tick,
        target: target.to_string(),
        scores: Some(scores.iter().map(|(c, s)| (c.to_string(), *s)).collect()),
        input_id: None,
    }
}

pub const WELDING_PROGRAM: &str = "\
# Weld defect handling: a gap triggers a repair; a gap that survives the repair
# marks the part defective.
repairing(W) <-1 gap(W)
defective(W) <-1 gap(W), repairing(W)
";

/// Five welded objects classified good, gap, gap, good, good. A poller re-inspects
/// after each gap: the first repair fails, the second succeeds.
pub fn scenario_welding() -> BuiltinScenario {
    let graph = GraphDocument {
        nodes: vec![NodeDoc {
            id: "weld_object".into(),
            node_type: Some("weld".into()),
        }],
        edges: vec![],
    };
    let good = [("good", 4.0), ("gap", -4.0)];
    let gap = [("good", -4.0), ("gap", 4.0)];
    let weld: Vec<PredictionEvent> = [&good, &gap, &gap, &good, &good]
        .iter()
        .enumerate()
        .map(|(i, s)| event(i as u64, "weld_object", &s[..]))
        .collect();
    let recheck = [event(1, "weld_object", &gap), event(2, "weld_object", &good)];
    let classifier = |inputs: &str| ClassifierSpec {
        adapter: AdapterSpec::Scripted {
            inputs: Source::Path(inputs.into()),
        },
        class_names: vec!["good".into(), "gap".into()],
        postprocess: Postprocess::Softmax,
        conversion: FactConversionOptions {
            snap_value: Some(1.0),
            ..Default::default()
        },
    };
    let classify = |advance: bool, c: &str| Step {
        advance,
        classify: vec![c.into()],
        ..Step::default()
    };
    let mut ticks = vec![classify(false, "weld")];
    ticks.extend((0..4).map(|_| classify(true, "weld")));
    let spec = ScenarioSpec {
        name: "welding".into(),
        graph: Source::Path("welding.graph.json".into()),
        program: TextSource::Path("welding.rules".into()),
        schema: None,
        engine: EngineConfig {
            horizon: 8,
            canonical: false,
            ..EngineConfig::default()
        },
        seed: 0,
        classifiers: [
            ("weld".to_string(), classifier("welding.weld.jsonl")),
            ("recheck".to_string(), classifier("welding.recheck.jsonl")),
        ]
        .into(),
        driver: DriverSpec {
            source: "1".into(),
            ticks,
            repeat: None,
            tick_secs: 1.0,
        },
        pollers: vec![PollerSpec {
            source: "2".into(),
            interval_ticks: 1,
            interval_secs: 0.5,
            condition: Some("gap(weld_object):[1,1]".into()),
            on_fire: vec![
                classify(true, "recheck"),
                Step {
                    advance: true,
                    recompute: true,
                    ..Step::default()
                },
            ],
        }],
        monitor: None,
        trace: TraceOptions::default(),
        queries: vec!["good(weld_object):[1,1]".into()],
    };
    BuiltinScenario {
        spec,
        files: [
            ("welding.graph.json".to_string(), graph_json(&graph)),
            ("welding.rules".to_string(), WELDING_PROGRAM.to_string()),
            ("welding.weld.jsonl".to_string(), ScriptedInputs::new(weld).to_jsonl()),
            (
                "welding.recheck.jsonl".to_string(),
                ScriptedInputs::new(recheck).to_jsonl(),
            ),
        ]
        .into(),
    }
}

/// The draw order of the published game.
pub const GOLDEN_DRAWS: [&str; 7] = [
    "two_clubs",
    "ten_hearts",
    "six_clubs",
    "four_clubs",
    "jack_spades",
    "ace_clubs",
    "three_hearts",
];

pub fn card_game_graph() -> GraphDocument {
    let mut nodes: Vec<NodeDoc> = deck()
        .into_iter()
        .map(|id| NodeDoc {
            id,
            node_type: Some("card".into()),
        })
        .collect();
    for (id, t) in [
        ("full_deck", "deck"),
        ("player_hand", "hand"),
        ("card_drawn_obj", "observation"),
    ] {
        nodes.push(NodeDoc {
            id: id.into(),
            node_type: Some(t.into()),
        });
    }
    let edges = deck()
        .into_iter()
        .map(|c| EdgeDoc {
            from: c,
            to: "full_deck".into(),
            label: Some("deck_holds".into()),
        })
        .collect();
    GraphDocument { nodes, edges }
}

pub fn card_game_program() -> String {
    let mut s = String::from("# \"42\": draw while some remaining card keeps the hand at or below 42.\n");
    for card in deck() {
        let v = f64::from(card_points(&card).expect("deck cards have points")) / 10.0;
        s.push_str(&format!("player_holds({card}):[{v},1] <-0 {card}(card_drawn_obj)\n"));
    }
    s.push_str("hand_as_point_vals(player_hand):append_hand <-0 player_holds(Card):[0.3,1]\n");
    s.push_str(
        "odds_of_losing(player_hand):odds_of_losing <-0 hand_as_point_vals(player_hand):[0,1], deck_holds(Card,full_deck):[0.3,1]\n",
    );
    for card in deck() {
        s.push_str(&format!("deck_holds({card},full_deck) : [1,1] @ [0,0]\n"));
    }
    s
}

/// How the card game picks its cards.
#[derive(Debug, Clone, PartialEq)]
pub enum Draws {
    /// A fixed order of card names.
    Scripted(Vec<String>),
    /// A seeded shuffle of the full deck.
    Shuffled { seed: u64, noisy: bool },
}

pub fn scenario_cardgame(draws: Draws) -> BuiltinScenario {
    let mut files: BTreeMap<String, String> = [
        ("cardgame.graph.json".to_string(), graph_json(&card_game_graph())),
        ("cardgame.rules".to_string(), card_game_program()),
    ]
    .into();
    let (adapter, seed, postprocess) = match draws {
        Draws::Scripted(order) => {
            let events = order.iter().map(|c| event(0, "card_drawn_obj", &[(c, 1.0)]));
            files.insert("cardgame.draws.jsonl".into(), ScriptedInputs::new(events).to_jsonl());
            (
                AdapterSpec::Scripted {
                    inputs: Source::Path("cardgame.draws.jsonl".into()),
                },
                0,
                Postprocess::Identity,
            )
        }
        Draws::Shuffled { seed, noisy } => (
            AdapterSpec::ShuffledDeck {
                target: "card_drawn_obj".into(),
                noisy,
            },
            seed,
            if noisy {
                Postprocess::Softmax
            } else {
                Postprocess::Identity
            },
        ),
    };
    let spec = ScenarioSpec {
        name: "cardgame".into(),
        graph: Source::Path("cardgame.graph.json".into()),
        program: TextSource::Path("cardgame.rules".into()),
        schema: None,
        engine: EngineConfig {
            horizon: 52,
            canonical: true,
            ..EngineConfig::default()
        },
        seed,
        classifiers: [(
            "card".to_string(),
            ClassifierSpec {
                adapter,
                class_names: Vec::new(),
                postprocess,
                conversion: FactConversionOptions {
                    snap_value: Some(1.0),
                    ..Default::default()
                },
            },
        )]
        .into(),
        driver: DriverSpec {
            source: "1".into(),
            ticks: Vec::new(),
            repeat: Some(Step {
                advance: true,
                classify: vec!["card".into()],
                facts_per_class: vec!["deck_holds({class},full_deck) : [0,0]".into()],
                ..Step::default()
            }),
            tick_secs: 1.0,
        },
        pollers: Vec::new(),
        monitor: Some(MonitorSpec {
            stop_when: "odds_of_losing(player_hand):[1,1]".into(),
        }),
        trace: TraceOptions { nodes_only: true },
        queries: vec!["odds_of_losing(player_hand):[1,1]".into()],
    };
    BuiltinScenario { spec, files }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{decode_hand, HandEncoding};
    use crate::lang::GroundAtom;

    fn run(b: &BuiltinScenario) -> RunReport {
        b.resolve().unwrap().run_deterministic().unwrap()
    }

    #[test]
    fn welding_rows() {
        let report = run(&scenario_welding());
        let rows: Vec<String> = report.exported.iter().map(TraceEntry::tsv_row).collect();
        assert_eq!(
            rows,
            [
                "0\tweld_object\tgood\t[0,1]\t[1,1]\t1",
                "1\tweld_object\tgap\t[0,1]\t[1,1]\t1",
                "2\tweld_object\trepairing\t[0,1]\t[1,1]\t2",
                "2\tweld_object\tgap\t[0,1]\t[1,1]\t2",
                "3\tweld_object\tdefective\t[0,1]\t[1,1]\t2",
                "4\tweld_object\tgap\t[0,1]\t[1,1]\t1",
                "5\tweld_object\trepairing\t[0,1]\t[1,1]\t2",
                "5\tweld_object\tgood\t[0,1]\t[1,1]\t2",
                "6\tweld_object\tgood\t[0,1]\t[1,1]\t1",
                "7\tweld_object\tgood\t[0,1]\t[1,1]\t1",
            ]
        );
        assert_eq!(report.stop, StopReason::Completed);
        assert_eq!(report.engine.now(), 8);
        let defective = parse_query("defective(weld_object)").unwrap();
        assert!(report.engine.query(&defective, 3));
        assert!(!report.engine.query(&defective, 6));
        assert!(report.query_results[0].1);
    }

    #[test]
    fn golden_card_game() {
        let report = run(&scenario_cardgame(Draws::Scripted(
            GOLDEN_DRAWS.iter().map(|s| s.to_string()).collect(),
        )));
        assert_eq!(report.stop, StopReason::Monitor);
        assert_eq!(report.exported.len(), 28);
        let hand = report
            .engine
            .bound(&GroundAtom::node("hand_as_point_vals", "player_hand"));
        assert_eq!(decode_hand(&HandEncoding::from_lower_bound(hand.lower()).unwrap()), 42);
        assert!(report.query_results[0].1);
        // Edge rows are kept in the engine trace.
        assert_eq!(report.engine.export_trace().len(), 28 + 7);
    }

    #[test]
    fn seeded_games_are_reproducible() {
        let a = run(&scenario_cardgame(Draws::Shuffled { seed: 7, noisy: true }));
        let b = run(&scenario_cardgame(Draws::Shuffled { seed: 7, noisy: true }));
        assert_eq!(a.tsv(), b.tsv());
        assert_eq!(a.stop, StopReason::Monitor);
    }

    #[test]
    fn spec_json_round_trip() {
        for b in [
            scenario_welding(),
            scenario_cardgame(Draws::Shuffled { seed: 3, noisy: false }),
        ] {
            let back = ScenarioSpec::from_json(&b.spec.to_json()).unwrap();
            assert_eq!(back, b.spec);
        }
    }

    #[test]
    fn resolve_errors() {
        let mut b = scenario_welding();
        b.spec.driver.ticks[0].classify = vec!["camera".into()];
        assert!(matches!(b.resolve(), Err(ScenarioError::UnknownClassifier(c)) if c == "camera"));
        let mut b = scenario_welding();
        b.files.insert("welding.rules".into(), "p(X) <- ".into());
        assert!(matches!(b.resolve(), Err(ScenarioError::Parse { .. })));
        let mut b = scenario_welding();
        b.files.remove("welding.graph.json");
        assert!(matches!(b.resolve(), Err(ScenarioError::Io { .. })));
        let mut b = scenario_welding();
        b.files.insert("welding.rules".into(), "p(X):nope <-0 q(X)\n".into());
        assert!(matches!(b.resolve(), Err(ScenarioError::UnknownFunction(_))));
    }

    #[test]
    fn compare_examples() {
        let golden = GoldenTrace::parse_tsv(
            "fpo\tnode\tlabel\told_bound\tnew_bound\n23\tplayer_hand\todds_of_losing\t[0.0,1.0]\t[0.23913,1.0]\n",
        )
        .unwrap();
        let actual = GoldenTrace::parse_tsv(
            "fpo\tnode\tlabel\told_bound\tnew_bound\tsource\n23\tplayer_hand\todds_of_losing\t[0,1]\t[0.2391304,1]\t1\n",
        )
        .unwrap();
        assert!(compare_trace(&actual, &golden, 1e-5).passed());
        assert!(compare_trace(&golden, &golden, 0.0).passed());
        let r = compare_trace(&GoldenTrace::default(), &golden, 1e-5);
        assert_eq!(r.mismatches[0].0, 0);
        assert!(r.mismatches[0].1.contains("missing"));
        assert!(!compare_trace(&actual, &golden, 1e-9).passed());
        assert!(GoldenTrace::parse_tsv("a\tb\n").is_err());
    }

    #[test]
    fn query_answers() {
        let report = run(&scenario_welding());
        let q = parse_query("defective(weld_object):[1,1]").unwrap();
        let a = answer_query(&report.engine, &q, 3);
        assert!(a.holds);
        let labels: Vec<&str> = a.chain.iter().map(|r| r.atom.predicate.as_str()).collect();
        assert_eq!(labels, ["defective", "gap", "repairing", "gap"]);
        let never = answer_query(&report.engine, &parse_query("cracked(weld_object)").unwrap(), 8);
        assert!(!never.holds);
        assert!(never.to_string().contains("open-world unknown"));
    }
}
