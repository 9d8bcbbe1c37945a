//! Classifier integration: infer, postprocess, convert predictions to facts, and poll.

use std::collections::{BTreeMap, VecDeque};
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Engine, EngineError, TraceEntry};
use crate::interval::{Interval, IntervalError};
use crate::lang::{Fact, GroundAtom, Query, Timestep, Window};

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("invalid bounds for class `{class}`: {source}")]
    InvalidBounds {
        class: String,
        #[source]
        source: IntervalError,
    },
    #[error("{0} probabilities for {1} class names")]
    Misaligned(usize, usize),
    #[error("prediction line {line}: {message}")]
    Script { line: usize, message: String },
    #[error("classifier `{source_tag}` failed: {message}")]
    Adapter { source_tag: String, message: String },
    #[error("poll interval must be positive")]
    BadInterval,
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Probabilities from raw scores with max-subtraction.
pub fn softmax(raw: &[f64]) -> Vec<f64> {
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = raw.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn sigmoid_each(raw: &[f64]) -> Vec<f64> {
    raw.iter()
        .map(|&x| {
            // Split by sign so exp never overflows.
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Postprocess {
    #[default]
    Softmax,
    Sigmoid,
    Identity,
}

impl Postprocess {
    pub fn apply(self, raw: &[f64]) -> Vec<f64> {
        match self {
            Postprocess::Softmax => softmax(raw),
            Postprocess::Sigmoid => sigmoid_each(raw),
            Postprocess::Identity => raw.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactConversionOptions {
    pub threshold: f64,
    pub set_lower_bound: bool,
    pub set_upper_bound: bool,
    pub snap_value: Option<f64>,
}

impl Default for FactConversionOptions {
    fn default() -> Self {
        FactConversionOptions {
            threshold: 0.5,
            set_lower_bound: true,
            set_upper_bound: false,
            snap_value: None,
        }
    }
}

/// One fact per class: `c(target):[l,u] @ [t,t]`, or `[0,1]` below the threshold.
pub fn pred_to_facts(
    probs: &[f64],
    class_names: &[String],
    target: &str,
    opts: &FactConversionOptions,
    t: Timestep,
) -> Result<Vec<Fact>, BridgeError> {
    if probs.len() != class_names.len() {
        return Err(BridgeError::Misaligned(probs.len(), class_names.len()));
    }
    probs
        .iter()
        .zip(class_names)
        .map(|(&p, class)| {
            let bound = if p >= opts.threshold {
                let v = opts.snap_value.unwrap_or(p);
                let l = if opts.set_lower_bound { v } else { 0.0 };
                let u = if opts.set_upper_bound { v } else { 1.0 };
                Interval::new(l, u).map_err(|source| BridgeError::InvalidBounds {
                    class: class.clone(),
                    source,
                })?
            } else {
                Interval::UNKNOWN
            };
            Ok(Fact::new(
                format!("classifier:{class}@{t}"),
                GroundAtom::node(class.clone(), target),
                bound,
                Window::at(t),
            ))
        })
        .collect()
}

/// One input for a classifier: what to look at and which node the result is about.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionEvent {
    /// Scheduler tick from which the event is available.
    #[serde(default)]
    pub tick: u64,
    pub target: String,
    /// Raw scores for scripted classifiers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<BTreeMap<String, f64>>,
    /// Opaque id sent to external classifiers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_id: Option<String>,
}

/// The "load new input" side of polling.
pub trait InputSource: Send {
    /// Next input available at `tick`, if any.
    fn next_ready(&mut self, tick: u64) -> Option<PredictionEvent>;
    fn is_exhausted(&self) -> bool;
}

/// Events in file order; each becomes available once the tick reaches it.
#[derive(Debug, Clone, Default)]
pub struct ScriptedInputs {
    events: VecDeque<PredictionEvent>,
}

impl ScriptedInputs {
    pub fn new(events: impl IntoIterator<Item = PredictionEvent>) -> Self {
        ScriptedInputs {
            events: events.into_iter().collect(),
        }
    }

    /// Parses JSON lines; blank lines are skipped.
    pub fn from_jsonl(text: &str) -> Result<Self, BridgeError> {
        let mut events = VecDeque::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let ev: PredictionEvent = serde_json::from_str(line).map_err(|e| BridgeError::Script {
                line: i + 1,
                message: e.to_string(),
            })?;
            events.push_back(ev);
        }
        Ok(ScriptedInputs { events })
    }

    pub fn to_jsonl(&self) -> String {
        self.events
            .iter()
            .map(|e| serde_json::to_string(e).expect("events serialize") + "\n")
            .collect()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

impl InputSource for ScriptedInputs {
    fn next_ready(&mut self, tick: u64) -> Option<PredictionEvent> {
        if self.events.front()?.tick <= tick {
            self.events.pop_front()
        } else {
            None
        }
    }

    fn is_exhausted(&self) -> bool {
        self.events.is_empty()
    }
}

/// infer → postprocess, with the class names the probabilities line up with.
pub trait ClassifierAdapter: Send {
    fn class_names(&self) -> &[String];
    fn infer(&mut self, input: &PredictionEvent) -> Result<Vec<f64>, BridgeError>;
    fn postprocess(&self, raw: &[f64]) -> Vec<f64>;
}

fn align(class_names: &[String], scores: &BTreeMap<String, f64>) -> Vec<f64> {
    class_names
        .iter()
        .map(|c| scores.get(c).copied().unwrap_or(0.0))
        .collect()
}

/// Reads the scores carried by each event. Missing classes score 0.
#[derive(Debug, Clone)]
pub struct ScriptedAdapter {
    class_names: Vec<String>,
    postprocess: Postprocess,
}

impl ScriptedAdapter {
    pub fn new(class_names: Vec<String>, postprocess: Postprocess) -> Self {
        ScriptedAdapter {
            class_names,
            postprocess,
        }
    }
}

impl ClassifierAdapter for ScriptedAdapter {
    fn class_names(&self) -> &[String] {
        &self.class_names
    }

    fn infer(&mut self, input: &PredictionEvent) -> Result<Vec<f64>, BridgeError> {
        let scores = input.scores.as_ref().ok_or_else(|| BridgeError::Adapter {
            source_tag: "scripted".into(),
            message: format!("event for {} carries no scores", input.target),
        })?;
        Ok(align(&self.class_names, scores))
    }

    fn postprocess(&self, raw: &[f64]) -> Vec<f64> {
        self.postprocess.apply(raw)
    }
}

#[derive(Serialize)]
struct ExternalRequest<'a> {
    input_id: &'a str,
}

#[derive(Deserialize)]
struct ExternalResponse {
    scores: BTreeMap<String, f64>,
}

/// A model living in another process: one JSON request line out, one response line back.
#[derive(Debug)]
pub struct ExternalProcessAdapter {
    class_names: Vec<String>,
    postprocess: Postprocess,
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl ExternalProcessAdapter {
    pub fn spawn(command: &[String], class_names: Vec<String>, postprocess: Postprocess) -> Result<Self, BridgeError> {
        let (program, args) = command.split_first().ok_or_else(|| BridgeError::Adapter {
            source_tag: "external".into(),
            message: "empty command".into(),
        })?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(ExternalProcessAdapter {
            class_names,
            postprocess,
            child,
            stdin,
            stdout,
        })
    }
}

impl ClassifierAdapter for ExternalProcessAdapter {
    fn class_names(&self) -> &[String] {
        &self.class_names
    }

    fn infer(&mut self, input: &PredictionEvent) -> Result<Vec<f64>, BridgeError> {
        let fail = |message: String| BridgeError::Adapter {
            source_tag: "external".into(),
            message,
        };
        let id = input.input_id.as_deref().unwrap_or(&input.target);
        let request = serde_json::to_string(&ExternalRequest { input_id: id }).expect("request serializes");
        writeln!(self.stdin, "{request}")?;
        self.stdin.flush()?;
        let mut line = String::new();
        if self.stdout.read_line(&mut line)? == 0 {
            return Err(fail("classifier closed its output".into()));
        }
        let response: ExternalResponse =
            serde_json::from_str(&line).map_err(|e| fail(format!("bad response `{}`: {e}", line.trim())))?;
        Ok(align(&self.class_names, &response.scores))
    }

    fn postprocess(&self, raw: &[f64]) -> Vec<f64> {
        self.postprocess.apply(raw)
    }
}

impl Drop for ExternalProcessAdapter {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// infer → postprocess → pred_to_facts at time `t`.
pub fn classify(
    adapter: &mut dyn ClassifierAdapter,
    input: &PredictionEvent,
    opts: &FactConversionOptions,
    t: Timestep,
) -> Result<Vec<Fact>, BridgeError> {
    let raw = adapter.infer(input)?;
    let probs = adapter.postprocess(&raw);
    pred_to_facts(&probs, adapter.class_names(), &input.target, opts, t)
}

pub fn classify_and_inject(
    adapter: &mut dyn ClassifierAdapter,
    input: &PredictionEvent,
    opts: &FactConversionOptions,
    engine: &mut Engine,
    source: &str,
) -> Result<Vec<TraceEntry>, BridgeError> {
    let facts = classify(adapter, input, opts, engine.now())?;
    Ok(engine.inject_and_recompute(&facts, source)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PollerConfig {
    /// Seconds in real-time mode, scheduler ticks in deterministic mode.
    pub poll_interval: f64,
    pub poll_condition: Option<Query>,
}

impl PollerConfig {
    pub fn new(poll_interval: f64, poll_condition: Option<Query>) -> Result<Self, BridgeError> {
        if poll_interval.is_nan() || poll_interval <= 0.0 {
            return Err(BridgeError::BadInterval);
        }
        Ok(PollerConfig {
            poll_interval,
            poll_condition,
        })
    }

    pub fn interval_ticks(&self) -> u64 {
        (self.poll_interval.round() as u64).max(1)
    }

    /// Whether the condition holds now (an absent condition always holds).
    pub fn condition_holds(&self, engine: &Engine) -> bool {
        self.poll_condition
            .as_ref()
            .is_none_or(|q| engine.query(q, engine.now()))
    }

    /// Deterministic mode: does the poller wake at this tick and find its condition true?
    pub fn fires_at(&self, tick: u64, engine: &Engine) -> bool {
        tick.is_multiple_of(self.interval_ticks()) && self.condition_holds(engine)
    }
}

/// One wake-up of a real-time poller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PollRecord {
    /// Time since the poller started.
    pub at: Duration,
    pub fired: bool,
}

fn sleep_until(deadline: Instant, stop: &AtomicBool) -> bool {
    loop {
        if stop.load(Ordering::SeqCst) {
            return false;
        }
        let now = Instant::now();
        if now >= deadline {
            return true;
        }
        std::thread::sleep((deadline - now).min(Duration::from_millis(10)));
    }
}

/// Real-time loop: wake every interval, check the condition under the engine lock,
/// and run `on_fire` while still holding it. `on_fire` returns false once its input
/// is exhausted, which ends the loop.
pub fn run_poller_with<F>(
    cfg: &PollerConfig,
    engine: &Mutex<Engine>,
    stop: &AtomicBool,
    mut on_fire: F,
) -> Result<Vec<PollRecord>, BridgeError>
where
    F: FnMut(&mut Engine) -> Result<bool, BridgeError>,
{
    let interval = Duration::from_secs_f64(cfg.poll_interval);
    let start = Instant::now();
    let mut log = Vec::new();
    for k in 1u32.. {
        if !sleep_until(start + interval * k, stop) {
            break;
        }
        let at = start.elapsed();
        let mut guard = engine.lock().expect("engine lock poisoned");
        let fired = cfg.condition_holds(&guard);
        log.push(PollRecord { at, fired });
        if fired && !on_fire(&mut guard)? {
            break;
        }
    }
    Ok(log)
}

/// Polls a classifier until `stop` is set or the inputs run out.
#[allow(clippy::too_many_arguments)]
pub fn run_poller(
    cfg: &PollerConfig,
    adapter: &mut dyn ClassifierAdapter,
    inputs: &mut dyn InputSource,
    opts: &FactConversionOptions,
    engine: &Mutex<Engine>,
    stop: &AtomicBool,
    source: &str,
) -> Result<Vec<PollRecord>, BridgeError> {
    run_poller_with(cfg, engine, stop, |e| match inputs.next_ready(u64::MAX) {
        Some(input) => {
            classify_and_inject(adapter, &input, opts, e, source)?;
            Ok(true)
        }
        None => Ok(false),
    })
}
