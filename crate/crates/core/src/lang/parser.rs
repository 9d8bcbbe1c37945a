//! Line-oriented recursive-descent parser for rules, facts and queries.
//!
//! ```text
//! rule     := atom [":" annspec] "<-" [INT] body
//! body     := literal ("," literal)*
//! literal  := ["~"] atom [":" interval]
//! annspec  := interval | IDENT
//! atom     := IDENT "(" term ("," term)? ")"
//! fact     := atom ":" interval ["@" (window | "static")]
//! window   := "[" INT "," INT "]"
//! ```

use std::fmt;

use thiserror::Error;

use super::ast::*;
use crate::interval::Interval;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("{line}:{column}: syntax error: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{line}:{column}: head variable `{variable}` does not occur in the rule body")]
    RangeRestriction {
        line: usize,
        column: usize,
        variable: String,
    },
    #[error("{line}:{column}: fact `{atom}` contains variables")]
    NonGroundFact { line: usize, column: usize, atom: String },
}

impl ParseError {
    pub fn location(&self) -> (usize, usize) {
        match *self {
            ParseError::Syntax { line, column, .. }
            | ParseError::RangeRestriction { line, column, .. }
            | ParseError::NonGroundFact { line, column, .. } => (line, column),
        }
    }

    fn with_line(mut self, new_line: usize) -> Self {
        match &mut self {
            ParseError::Syntax { line, .. }
            | ParseError::RangeRestriction { line, .. }
            | ParseError::NonGroundFact { line, .. } => *line = new_line,
        }
        self
    }
}

/// Every error found in a program, in source order.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ProgramErrors(pub Vec<ParseError>);

impl fmt::Display for ProgramErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("\n")?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Quoted(String),
    Number(String),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Colon,
    At,
    Tilde,
    Arrow,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "identifier `{s}`"),
            Tok::Quoted(s) => write!(f, "constant \"{s}\""),
            Tok::Number(s) => write!(f, "number `{s}`"),
            Tok::LParen => f.write_str("`(`"),
            Tok::RParen => f.write_str("`)`"),
            Tok::LBracket => f.write_str("`[`"),
            Tok::RBracket => f.write_str("`]`"),
            Tok::Comma => f.write_str("`,`"),
            Tok::Colon => f.write_str("`:`"),
            Tok::At => f.write_str("`@`"),
            Tok::Tilde => f.write_str("`~`"),
            Tok::Arrow => f.write_str("`<-`"),
        }
    }
}

fn syntax(column: usize, message: impl Into<String>) -> ParseError {
    ParseError::Syntax {
        line: 1,
        column,
        message: message.into(),
    }
}

/// Tokens with their 1-based column.
fn lex(text: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let col = i + 1;
        match c {
            c if c.is_whitespace() => i += 1,
            '#' => break,
            '(' | ')' | '[' | ']' | ',' | ':' | '@' | '~' => {
                let tok = match c {
                    '(' => Tok::LParen,
                    ')' => Tok::RParen,
                    '[' => Tok::LBracket,
                    ']' => Tok::RBracket,
                    ',' => Tok::Comma,
                    ':' => Tok::Colon,
                    '@' => Tok::At,
                    _ => Tok::Tilde,
                };
                out.push((tok, col));
                i += 1;
            }
            '<' => {
                if chars.get(i + 1) != Some(&'-') {
                    return Err(syntax(col, "expected `<-`"));
                }
                out.push((Tok::Arrow, col));
                i += 2;
            }
            '"' => {
                let mut s = String::new();
                i += 1;
                loop {
                    match chars.get(i) {
                        None => return Err(syntax(col, "unterminated quoted constant")),
                        Some('"') => break,
                        Some('\\') => match chars.get(i + 1) {
                            Some(&e @ ('"' | '\\')) => {
                                s.push(e);
                                i += 2;
                            }
                            _ => return Err(syntax(i + 1, "invalid escape in quoted constant")),
                        },
                        Some(&ch) => {
                            s.push(ch);
                            i += 1;
                        }
                    }
                }
                i += 1;
                if s.is_empty() {
                    return Err(syntax(col, "empty quoted constant"));
                }
                out.push((Tok::Quoted(s), col));
            }
            c if c.is_ascii_digit() || c == '.' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                    i += 1;
                }
                if i < chars.len() && (chars[i].is_ascii_alphabetic() || chars[i] == '_') {
                    while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                        i += 1;
                    }
                    let word: String = chars[start..i].iter().collect();
                    if word.contains('.') {
                        return Err(syntax(col, format!("malformed token `{word}`")));
                    }
                    out.push((Tok::Ident(word), col));
                } else {
                    out.push((Tok::Number(chars[start..i].iter().collect()), col));
                }
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                out.push((Tok::Ident(chars[start..i].iter().collect()), col));
            }
            other => return Err(syntax(col, format!("unexpected character `{other}`"))),
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    end_col: usize,
}

impl Parser {
    fn new(text: &str) -> Result<Self, ParseError> {
        Ok(Parser {
            toks: lex(text)?,
            pos: 0,
            end_col: text.trim_end().chars().count() + 1,
        })
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn col(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end_col, |&(_, c)| c)
    }

    fn next(&mut self) -> Option<(Tok, usize)> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn unexpected(&self, what: &str) -> ParseError {
        match self.peek() {
            Some(t) => syntax(self.col(), format!("expected {what}, found {t}")),
            None => syntax(self.col(), format!("expected {what}, found end of line")),
        }
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<usize, ParseError> {
        if self.peek() == Some(&tok) {
            Ok(self.next().unwrap().1)
        } else {
            Err(self.unexpected(what))
        }
    }

    fn eat(&mut self, tok: &Tok) -> bool {
        if self.peek() == Some(tok) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn at_end(&self) -> bool {
        self.pos >= self.toks.len()
    }

    fn finish(&self) -> Result<(), ParseError> {
        if self.at_end() {
            Ok(())
        } else {
            Err(self.unexpected("end of line"))
        }
    }

    fn has_arrow(&self) -> bool {
        self.toks.iter().any(|(t, _)| *t == Tok::Arrow)
    }

    fn ident(&mut self, what: &str) -> Result<String, ParseError> {
        match self.peek() {
            Some(Tok::Ident(s)) if !s.starts_with(|c: char| c.is_ascii_digit()) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => Err(self.unexpected(what)),
        }
    }

    fn term(&mut self) -> Result<Term, ParseError> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let t = if s.starts_with(|c: char| c.is_ascii_uppercase()) {
                    Term::Var(s.clone())
                } else {
                    Term::Const(s.clone())
                };
                self.pos += 1;
                Ok(t)
            }
            Some(Tok::Quoted(s)) => {
                let t = Term::Const(s.clone());
                self.pos += 1;
                Ok(t)
            }
            Some(Tok::Number(n)) if n.chars().all(|c| c.is_ascii_digit()) => {
                let t = Term::Const(n.clone());
                self.pos += 1;
                Ok(t)
            }
            _ => Err(self.unexpected("a term")),
        }
    }

    fn atom(&mut self) -> Result<(Atom, usize), ParseError> {
        let col = self.col();
        let predicate = self.ident("a predicate name")?;
        self.expect(Tok::LParen, "`(`")?;
        let mut args = vec![self.term()?];
        while self.peek() == Some(&Tok::Comma) {
            if args.len() == 2 {
                return Err(syntax(
                    self.col(),
                    format!("predicate `{predicate}` has more than two arguments"),
                ));
            }
            self.pos += 1;
            args.push(self.term()?);
        }
        self.expect(Tok::RParen, "`)`")?;
        Ok((Atom { predicate, args }, col))
    }

    fn number(&mut self) -> Result<(f64, usize), ParseError> {
        match self.next() {
            Some((Tok::Number(n), col)) => n
                .parse::<f64>()
                .map(|v| (v, col))
                .map_err(|_| syntax(col, format!("malformed number `{n}`"))),
            Some((t, col)) => Err(syntax(col, format!("expected a number, found {t}"))),
            None => Err(syntax(self.end_col, "expected a number, found end of line")),
        }
    }

    fn integer(&mut self) -> Result<u32, ParseError> {
        match self.next() {
            Some((Tok::Number(n), col)) => n
                .parse::<u32>()
                .map_err(|_| syntax(col, format!("expected a non-negative integer, found `{n}`"))),
            Some((t, col)) => Err(syntax(col, format!("expected an integer, found {t}"))),
            None => Err(syntax(self.end_col, "expected an integer, found end of line")),
        }
    }

    fn interval(&mut self) -> Result<Interval, ParseError> {
        let col = self.expect(Tok::LBracket, "`[`")?;
        let (l, _) = self.number()?;
        self.expect(Tok::Comma, "`,`")?;
        let (u, _) = self.number()?;
        self.expect(Tok::RBracket, "`]`")?;
        Interval::new(l, u).map_err(|e| syntax(col, e.to_string()))
    }

    fn literal(&mut self) -> Result<Literal, ParseError> {
        let negated = self.eat(&Tok::Tilde);
        let (atom, _) = self.atom()?;
        let threshold = if self.eat(&Tok::Colon) {
            self.interval()?
        } else {
            Interval::TRUE
        };
        Ok(Literal {
            atom,
            negated,
            threshold,
        })
    }

    fn rule(&mut self, id: String) -> Result<Rule, ParseError> {
        let (head, head_col) = self.atom()?;
        let head_annotation = if self.eat(&Tok::Colon) {
            match self.peek() {
                Some(Tok::LBracket) => AnnotationSpec::Constant(self.interval()?),
                Some(Tok::Ident(_)) => AnnotationSpec::Function(self.ident("an annotation function")?),
                _ => return Err(self.unexpected("an interval or annotation function name")),
            }
        } else {
            AnnotationSpec::default()
        };
        self.expect(Tok::Arrow, "`<-`")?;
        let delta_t = if matches!(self.peek(), Some(Tok::Number(_))) {
            self.integer()?
        } else {
            0
        };
        let mut body = vec![self.literal()?];
        while self.eat(&Tok::Comma) {
            body.push(self.literal()?);
        }
        self.finish()?;
        let rule = Rule {
            id,
            head,
            head_annotation,
            delta_t,
            body,
        };
        if let Some(variable) = rule.unbound_head_variables().into_iter().next() {
            return Err(ParseError::RangeRestriction {
                line: 1,
                column: head_col,
                variable,
            });
        }
        Ok(rule)
    }

    fn ground(&self, atom: Atom, col: usize) -> Result<GroundAtom, ParseError> {
        atom.ground().ok_or_else(|| ParseError::NonGroundFact {
            line: 1,
            column: col,
            atom: atom.to_string(),
        })
    }

    fn fact(&mut self, id: String) -> Result<Fact, ParseError> {
        let (atom, col) = self.atom()?;
        self.expect(Tok::Colon, "`:`")?;
        let annotation = self.interval()?;
        let window = if self.eat(&Tok::At) {
            match self.peek() {
                Some(Tok::Ident(s)) if s == "static" => {
                    self.pos += 1;
                    Window::Static
                }
                Some(Tok::LBracket) => {
                    let wcol = self.col();
                    self.pos += 1;
                    let from = self.integer()?;
                    self.expect(Tok::Comma, "`,`")?;
                    let to = self.integer()?;
                    self.expect(Tok::RBracket, "`]`")?;
                    if from > to {
                        return Err(syntax(wcol, format!("window [{from},{to}] ends before it starts")));
                    }
                    Window::Span { from, to }
                }
                _ => return Err(self.unexpected("a window `[t1,t2]` or `static`")),
            }
        } else {
            Window::at(0)
        };
        self.finish()?;
        let atom = self.ground(atom, col)?;
        Ok(Fact {
            id,
            atom,
            annotation,
            window,
        })
    }

    fn query(&mut self) -> Result<Query, ParseError> {
        let (atom, col) = self.atom()?;
        let bound = if self.eat(&Tok::Colon) {
            self.interval()?
        } else {
            Interval::TRUE
        };
        self.finish()?;
        let atom = self.ground(atom, col)?;
        Ok(Query { atom, bound })
    }
}

/// Parses one rule. Its id is `rule:1`.
pub fn parse_rule(text: &str) -> Result<Rule, ParseError> {
    Parser::new(text)?.rule("rule:1".into())
}

/// Parses one fact. An omitted window means `[0,0]`.
pub fn parse_fact(text: &str) -> Result<Fact, ParseError> {
    Parser::new(text)?.fact("fact:1".into())
}

/// Parses `atom [: interval]`; the bound defaults to `[1,1]`.
pub fn parse_query(text: &str) -> Result<Query, ParseError> {
    Parser::new(text)?.query()
}

/// Parses a whole program. `#` starts a comment; blank lines are skipped.
/// Ids are `rule:<line>` / `fact:<line>`.
pub fn parse_program(text: &str) -> Result<Program, ProgramErrors> {
    let mut program = Program::default();
    let mut errors = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let result = Parser::new(line).and_then(|mut p| {
            if p.at_end() {
                return Ok(None);
            }
            if p.has_arrow() {
                p.rule(format!("rule:{lineno}")).map(|r| Some(Ok(r)))
            } else {
                p.fact(format!("fact:{lineno}")).map(|f| Some(Err(f)))
            }
        });
        match result {
            Ok(None) => {}
            Ok(Some(Ok(rule))) => program.rules.push(rule),
            Ok(Some(Err(fact))) => program.facts.push(fact),
            Err(e) => errors.push(e.with_line(lineno)),
        }
    }
    if errors.is_empty() {
        Ok(program)
    } else {
        Err(ProgramErrors(errors))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welding_rules() {
        let r = parse_rule("repairing(W) <-1 gap(W)").unwrap();
        assert_eq!(r.head.predicate, "repairing");
        assert_eq!(r.head.args, vec![Term::Var("W".into())]);
        assert_eq!(r.delta_t, 1);
        assert_eq!(r.head_annotation, AnnotationSpec::Constant(Interval::TRUE));
        assert_eq!(r.body.len(), 1);
        assert_eq!(r.body[0].threshold, Interval::TRUE);
        assert!(!r.body[0].negated);

        let r = parse_rule("defective(W) <-1 gap(W), repairing(W)").unwrap();
        assert_eq!(r.body.len(), 2);
        assert_eq!(r.body[1].atom.predicate, "repairing");
    }

    #[test]
    fn function_head() {
        let r = parse_rule("hand_as_point_vals(hand) : append_hand <-0 player_holds(Card):[0.3,1]").unwrap();
        assert_eq!(r.head_annotation, AnnotationSpec::Function("append_hand".into()));
        assert_eq!(r.delta_t, 0);
        assert_eq!(r.body[0].threshold, Interval::new(0.3, 1.0).unwrap());
        assert_eq!(r.head.args, vec![Term::Const("hand".into())]);
    }

    #[test]
    fn delta_defaults_to_zero_and_negation() {
        let r = parse_rule("p(X) <- ~q(X):[0,0.4], rel(X,Y)").unwrap();
        assert_eq!(r.delta_t, 0);
        assert!(r.body[0].negated);
        assert_eq!(r.body[1].atom.args.len(), 2);
    }

    #[test]
    fn facts() {
        let f = parse_fact("gap(weld_object) : [1,1] @ [1,1]").unwrap();
        assert_eq!(f.atom, GroundAtom::node("gap", "weld_object"));
        assert_eq!(f.window, Window::at(1));
        let f = parse_fact("good(weld_object) : [1,1]").unwrap();
        assert_eq!(f.window, Window::at(0));
        let f = parse_fact("deck_holds(two_clubs, full_deck) : [1,1] @ static").unwrap();
        assert!(f.is_static());
        assert_eq!(f.atom, GroundAtom::edge("deck_holds", "two_clubs", "full_deck"));
        assert!(matches!(
            parse_fact("gap(W) : [1,1]"),
            Err(ParseError::NonGroundFact { line: 1, column: 1, .. })
        ));
    }

    #[test]
    fn range_restriction() {
        let e = parse_rule("p(X, Y) <- q(X)").unwrap_err();
        assert!(matches!(e, ParseError::RangeRestriction { ref variable, .. } if variable == "Y"));
    }

    #[test]
    fn located_errors() {
        let cases = [
            ("p(a,b,c) <- q(a)", 6),
            ("p(X) <--1 q(X)", 8),
            ("p(a) : [0.7,0.3]", 8),
            ("p(a) : [0.5,1", 14),
            ("p(a) : [1,1] @ [3,1]", 16),
            ("p(a) <- ", 8),
            ("p(a) $ q", 6),
            ("P", 2),
        ];
        for (text, col) in cases {
            let err = if text.contains("<-") {
                parse_rule(text).unwrap_err()
            } else {
                parse_fact(text).unwrap_err()
            };
            assert_eq!(err.location(), (1, col), "{text}: {err}");
        }
    }

    #[test]
    fn format_examples() {
        let r = parse_rule("repairing(W)<-1 gap(W)").unwrap();
        assert_eq!(r.to_string(), "repairing(W) <-1 gap(W):[1,1]");
        let f = parse_fact("p(a) : [0,1]").unwrap();
        assert_eq!(f.to_string(), "p(a) : [0,1] @ [0,0]");
        let q = parse_query("defective(weld_object)").unwrap();
        assert_eq!(q.to_string(), "defective(weld_object) : [1,1]");
        let f = parse_fact("p(\"New York\") : [0.25,0.5] @ static").unwrap();
        assert_eq!(f.to_string(), "p(\"New York\") : [0.25,0.5] @ static");
        assert_eq!(parse_fact(&f.to_string()).unwrap().atom, f.atom);
    }

    #[test]
    fn programs() {
        assert_eq!(parse_program("").unwrap(), Program::default());
        let p = parse_program("# welding\n\nrepairing(W) <-1 gap(W)\ndefective(W) <-1 gap(W), repairing(W)\n").unwrap();
        assert_eq!(p.rules.len(), 2);
        assert_eq!(p.rules[0].id, "rule:3");
        assert!(p.facts.is_empty());

        let errs = parse_program("p(a) : [1,1]\nq(X <- r(X)\n\ns(a) : [2,1]\n").unwrap_err();
        let lines: Vec<usize> = errs.0.iter().map(|e| e.location().0).collect();
        assert_eq!(lines, vec![2, 4]);
    }
}
