//! Head annotation functions: T-norms/T-conorms and the "42" card game's hand and odds functions.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::interval::{Interval, IntervalError};
use crate::lang::{Entity, GroundAtom};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnnotationError {
    #[error("annotation function `{0}` is already registered")]
    DuplicateName(String),
    #[error("unknown annotation function `{0}`")]
    UnknownFunction(String),
    #[error("{atom} has lower bound {lower}, not a card value in {{0.3, 0.6, 0.9}}")]
    MalformedCardValue { atom: String, lower: f64 },
    #[error("`{0}` is not a card name")]
    UnknownCard(String),
    #[error("hand lower bound {0} is not a digit encoding")]
    MalformedHand(f64),
    #[error(transparent)]
    Interval(#[from] IntervalError),
}

/// One atom that satisfied a body literal, with its effective bound.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyMatch {
    pub atom: GroundAtom,
    pub bound: Interval,
    /// Monotone sequence number of when the atom was first established.
    pub established: u64,
}

/// Read-only view of the interpretation at the time the rule is evaluated.
pub trait InterpretationView {
    fn bound(&self, atom: &GroundAtom) -> Option<Interval>;
}

/// Inputs handed to an annotation function.
pub struct AnnotationContext<'a> {
    pub head: &'a GroundAtom,
    /// Satisfying atoms per body literal, in literal order then grounding order.
    pub body: Vec<Vec<BodyMatch>>,
    pub interpretation: &'a dyn InterpretationView,
}

impl AnnotationContext<'_> {
    pub fn body_annotations(&self) -> Vec<Interval> {
        self.body.iter().flatten().map(|m| m.bound).collect()
    }
}

impl fmt::Debug for AnnotationContext<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AnnotationContext")
            .field("head", self.head)
            .field("body", &self.body)
            .finish_non_exhaustive()
    }
}

pub type AnnotationFn = Arc<dyn Fn(&AnnotationContext<'_>) -> Result<Interval, AnnotationError> + Send + Sync>;

/// Name → annotation function.
#[derive(Clone, Default)]
pub struct Registry {
    fns: BTreeMap<String, AnnotationFn>,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.fns.keys()).finish()
    }
}

impl Registry {
    /// A registry holding the four standard combinators.
    pub fn standard() -> Self {
        let mut r = Registry::default();
        r.register("min_tnorm", Arc::new(tnorm_min)).unwrap();
        r.register("prod_tnorm", Arc::new(tnorm_product)).unwrap();
        r.register("max_tconorm", Arc::new(tconorm_max)).unwrap();
        r.register("lukasiewicz", Arc::new(lukasiewicz)).unwrap();
        r
    }

    /// Standard combinators plus `append_hand` and `odds_of_losing`.
    pub fn with_card_game() -> Self {
        let mut r = Registry::standard();
        r.register("append_hand", Arc::new(append_hand)).unwrap();
        r.register("odds_of_losing", Arc::new(odds_of_losing)).unwrap();
        r
    }

    pub fn register(&mut self, name: &str, f: AnnotationFn) -> Result<(), AnnotationError> {
        if self.fns.contains_key(name) {
            return Err(AnnotationError::DuplicateName(name.to_string()));
        }
        self.fns.insert(name.to_string(), f);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&AnnotationFn, AnnotationError> {
        self.fns
            .get(name)
            .ok_or_else(|| AnnotationError::UnknownFunction(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.fns.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.fns.keys().map(String::as_str)
    }
}

fn componentwise(
    ctx: &AnnotationContext<'_>,
    init: f64,
    op: impl Fn(f64, f64) -> f64,
) -> Result<Interval, AnnotationError> {
    let anns = ctx.body_annotations();
    let l = anns.iter().map(Interval::lower).fold(init, &op);
    let u = anns.iter().map(Interval::upper).fold(init, &op);
    Ok(Interval::new(l, u)?)
}

pub fn tnorm_min(ctx: &AnnotationContext<'_>) -> Result<Interval, AnnotationError> {
    componentwise(ctx, 1.0, f64::min)
}

pub fn tnorm_product(ctx: &AnnotationContext<'_>) -> Result<Interval, AnnotationError> {
    componentwise(ctx, 1.0, |a, b| a * b)
}

pub fn tconorm_max(ctx: &AnnotationContext<'_>) -> Result<Interval, AnnotationError> {
    componentwise(ctx, 0.0, f64::max)
}

/// `max(0, Σx − (n − 1))` on each bound.
pub fn lukasiewicz(ctx: &AnnotationContext<'_>) -> Result<Interval, AnnotationError> {
    let anns = ctx.body_annotations();
    let n = anns.len() as f64;
    let fold = |xs: &mut dyn Iterator<Item = f64>| (xs.sum::<f64>() - (n - 1.0)).max(0.0);
    let l = fold(&mut anns.iter().map(Interval::lower));
    let u = fold(&mut anns.iter().map(Interval::upper));
    Ok(Interval::new(l, u)?)
}

/// Point limit of the card game.
pub const HAND_LIMIT: u32 = 42;

pub const SUITS: [&str; 4] = ["clubs", "diamonds", "hearts", "spades"];
pub const RANKS: [&str; 13] = [
    "ace", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "jack", "queen", "king",
];

/// Points for a card named `<rank>_<suit>`: ace 3, numeric 6, face 9.
pub fn card_points(card: &str) -> Option<u8> {
    let (rank, suit) = card.split_once('_')?;
    if !SUITS.contains(&suit) {
        return None;
    }
    match rank {
        "ace" => Some(3),
        "jack" | "queen" | "king" => Some(9),
        r if RANKS.contains(&r) => Some(6),
        _ => None,
    }
}

/// All 52 card names, suit-major.
pub fn deck() -> Vec<String> {
    SUITS
        .iter()
        .flat_map(|s| RANKS.iter().map(move |r| format!("{r}_{s}")))
        .collect()
}

/// A hand as the ordered point values of its cards; the lower bound of the hand
/// interval is the decimal `0.d1d2…dn`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HandEncoding {
    digits: Vec<u8>,
}

impl HandEncoding {
    pub fn new(digits: Vec<u8>) -> Result<Self, AnnotationError> {
        if let Some(&bad) = digits.iter().find(|d| ![3, 6, 9].contains(*d)) {
            return Err(AnnotationError::MalformedCardValue {
                atom: "hand".into(),
                lower: f64::from(bad) / 10.0,
            });
        }
        Ok(HandEncoding { digits })
    }

    pub fn digits(&self) -> &[u8] {
        &self.digits
    }

    pub fn push(&mut self, points: u8) {
        self.digits.push(points);
    }

    /// Exact decimal text of the lower bound, e.g. `0.66669`.
    pub fn lower_text(&self) -> String {
        let mut s = String::from("0");
        if !self.digits.is_empty() {
            s.push('.');
            s.extend(self.digits.iter().map(|d| char::from(b'0' + d)));
        }
        s
    }

    /// The lower bound as the nearest double to the exact decimal.
    pub fn lower_bound(&self) -> f64 {
        self.lower_text().parse().expect("digit string is a decimal")
    }

    pub fn interval(&self) -> Interval {
        Interval::new(self.lower_bound(), 1.0).expect("hand lower bound lies in [0,1)")
    }

    /// Recovers the digits from a stored lower bound via its shortest decimal form.
    pub fn from_lower_bound(lower: f64) -> Result<Self, AnnotationError> {
        let text = format!("{lower}");
        let digits = match text.as_str() {
            "0" => Vec::new(),
            t => t
                .strip_prefix("0.")
                .ok_or(AnnotationError::MalformedHand(lower))?
                .bytes()
                .map(|b| b - b'0')
                .collect(),
        };
        HandEncoding::new(digits).map_err(|_| AnnotationError::MalformedHand(lower))
    }
}

/// Total points of a hand.
pub fn decode_hand(h: &HandEncoding) -> u32 {
    h.digits.iter().map(|&d| u32::from(d)).sum()
}

/// Rebuilds the hand from every satisfying `player_holds` atom, in the order the
/// atoms were established.
pub fn append_hand(ctx: &AnnotationContext<'_>) -> Result<Interval, AnnotationError> {
    let mut held: Vec<&BodyMatch> = ctx
        .body
        .iter()
        .flatten()
        .filter(|m| m.bound.lower() >= 0.3 - 1e-9)
        .collect();
    held.sort_by_key(|m| m.established);
    let mut hand = HandEncoding::default();
    for m in held {
        let scaled = m.bound.lower() * 10.0;
        let digit = scaled.round();
        if (scaled - digit).abs() > 1e-6 || ![3.0, 6.0, 9.0].contains(&digit) {
            return Err(AnnotationError::MalformedCardValue {
                atom: m.atom.to_string(),
                lower: m.bound.lower(),
            });
        }
        hand.push(digit as u8);
    }
    Ok(hand.interval())
}

/// `(risky, remaining)`: how many remaining cards would push `total` past the limit.
pub fn losing_ratio(total: u32, remaining: impl IntoIterator<Item = u8>) -> (usize, usize) {
    remaining.into_iter().fold((0, 0), |(risky, n), pts| {
        (risky + usize::from(total + u32::from(pts) > HAND_LIMIT), n + 1)
    })
}

/// `[risky/remaining, 1]`, or `[1,1]` once the deck is empty.
///
/// The node-valued body match is the hand; edge-valued matches `(card, deck)` with
/// lower bound ≥ 0.3 are the cards still in the deck.
pub fn odds_of_losing(ctx: &AnnotationContext<'_>) -> Result<Interval, AnnotationError> {
    let mut total = 0;
    let mut remaining = Vec::new();
    for m in ctx.body.iter().flatten() {
        match &m.atom.entity {
            Entity::Node(_) => total = decode_hand(&HandEncoding::from_lower_bound(m.bound.lower())?),
            Entity::Edge(card, _) if m.bound.lower() >= 0.3 - 1e-9 => {
                remaining.push(card_points(card).ok_or_else(|| AnnotationError::UnknownCard(card.clone()))?);
            }
            Entity::Edge(..) => {}
        }
    }
    let (risky, n) = losing_ratio(total, remaining);
    if n == 0 {
        return Ok(Interval::TRUE);
    }
    Ok(Interval::new(risky as f64 / n as f64, 1.0)?)
}
