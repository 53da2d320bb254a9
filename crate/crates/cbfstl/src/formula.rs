//! Bounded temporal-logic formulas over named linear predicates.
//!
//! Grammar (whitespace-insensitive):
//!
//! ```text
//! formula  := disjunct ('|' disjunct)*
//! disjunct := conjunct ('&' conjunct)*
//! conjunct := chain IDENT | '(' formula ')'
//! chain    := (op '[' NUMBER ',' NUMBER ']'){1,2}
//! op       := 'F' | 'G'
//! ```
//!
//! The plannable fragment keeps disjunction at the top level only, allows at
//! most two nested temporal operators per task, and has no negation or until.
//! Anything outside the fragment parses far enough to produce a pointed
//! [`ParseError::FragmentViolation`].

use thiserror::Error;

/// Closed time interval `[a, b]`, `0 <= a <= b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub a: f64,
    pub b: f64,
}

impl Interval {
    pub fn new(a: f64, b: f64) -> Option<Self> {
        if a.is_finite() && b.is_finite() && 0.0 <= a && a <= b {
            Some(Self { a, b })
        } else {
            None
        }
    }

    pub fn length(&self) -> f64 {
        self.b - self.a
    }
}

/// Formula tree. Predicates are indices into the caller's predicate table.
///
/// `Not` and `Until` cannot be produced by the parser (the plannable fragment
/// excludes them) but exist so the robustness monitor can evaluate formulas
/// beyond the fragment when used as an oracle.
#[derive(Debug, Clone, PartialEq)]
pub enum StlFormula {
    Predicate(usize),
    Not(Box<StlFormula>),
    Eventually(Interval, Box<StlFormula>),
    Always(Interval, Box<StlFormula>),
    Until(Interval, Box<StlFormula>, Box<StlFormula>),
    And(Vec<StlFormula>),
    Or(Vec<StlFormula>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Eventually,
    Always,
    EventuallyAlways,
    AlwaysEventually,
}

/// One timed task over a single predicate.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomicTask {
    pub kind: TaskKind,
    pub outer: Interval,
    pub inner: Option<Interval>,
    pub predicate: usize,
}

#[derive(Debug, Clone, Error)]
pub enum ParseError {
    #[error("{message} at {}..{} (expected {expected}, found {found})", span.0, span.1)]
    Syntax {
        message: String,
        span: (usize, usize),
        expected: String,
        found: String,
    },
    #[error("unknown predicate `{name}` at {}..{}", span.0, span.1)]
    UnknownPredicate { name: String, span: (usize, usize) },
    #[error("{message} at {}..{}", span.0, span.1)]
    FragmentViolation { message: String, span: (usize, usize) },
}

#[derive(Debug, Clone, Error)]
pub enum FormulaError {
    #[error("decomposition applies to always-eventually tasks, got {0:?}")]
    NotAlwaysEventually(TaskKind),
    #[error("inner interval has zero length but the outer window is nondegenerate")]
    DegenerateInner,
    #[error("{needed} revisits are needed to cover the window, got {given}")]
    InsufficientRevisits { needed: usize, given: usize },
    #[error("outside the plannable fragment: {0}")]
    Fragment(String),
}

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(f64),
    LBracket,
    RBracket,
    LParen,
    RParen,
    Comma,
    Amp,
    Pipe,
    Bang,
    Eof,
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    span: (usize, usize),
}

fn lex(text: &str) -> Result<Vec<Spanned>, ParseError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let start = i;
        match c {
            ' ' | '\t' | '\n' | '\r' => {
                i += 1;
                continue;
            }
            '[' => out.push(Spanned { tok: Tok::LBracket, span: (start, i + 1) }),
            ']' => out.push(Spanned { tok: Tok::RBracket, span: (start, i + 1) }),
            '(' => out.push(Spanned { tok: Tok::LParen, span: (start, i + 1) }),
            ')' => out.push(Spanned { tok: Tok::RParen, span: (start, i + 1) }),
            ',' => out.push(Spanned { tok: Tok::Comma, span: (start, i + 1) }),
            '&' => out.push(Spanned { tok: Tok::Amp, span: (start, i + 1) }),
            '|' => out.push(Spanned { tok: Tok::Pipe, span: (start, i + 1) }),
            '!' => out.push(Spanned { tok: Tok::Bang, span: (start, i + 1) }),
            _ if c.is_ascii_digit() || c == '.' => {
                let mut j = i;
                while j < bytes.len() {
                    let d = bytes[j] as char;
                    if d.is_ascii_digit() || d == '.' {
                        j += 1;
                    } else if (d == 'e' || d == 'E')
                        && j + 1 < bytes.len()
                        && {
                            let nx = bytes[j + 1] as char;
                            nx.is_ascii_digit() || nx == '+' || nx == '-'
                        }
                    {
                        j += 2;
                    } else {
                        break;
                    }
                }
                let s = &text[i..j];
                let v: f64 = s.parse().map_err(|_| ParseError::Syntax {
                    message: format!("malformed number `{s}`"),
                    span: (i, j),
                    expected: "number".into(),
                    found: s.into(),
                })?;
                out.push(Spanned { tok: Tok::Number(v), span: (i, j) });
                i = j;
                continue;
            }
            _ if c.is_ascii_alphabetic() || c == '_' => {
                let mut j = i;
                while j < bytes.len() {
                    let d = bytes[j] as char;
                    if d.is_ascii_alphanumeric() || d == '_' {
                        j += 1;
                    } else {
                        break;
                    }
                }
                out.push(Spanned {
                    tok: Tok::Ident(text[i..j].to_string()),
                    span: (i, j),
                });
                i = j;
                continue;
            }
            _ => {
                return Err(ParseError::Syntax {
                    message: format!("unexpected character `{c}`"),
                    span: (start, start + c.len_utf8()),
                    expected: "token".into(),
                    found: c.to_string(),
                })
            }
        }
        i += 1;
    }
    out.push(Spanned { tok: Tok::Eof, span: (bytes.len(), bytes.len()) });
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

struct Parser<'a> {
    tokens: Vec<Spanned>,
    pos: usize,
    table: &'a [&'a str],
}

impl<'a> Parser<'a> {
    fn current(&self) -> &Spanned {
        &self.tokens[self.pos.min(self.tokens.len() - 1)]
    }

    fn peek(&self) -> &Tok {
        &self.current().tok
    }

    fn peek_n(&self, n: usize) -> &Tok {
        &self.tokens[(self.pos + n).min(self.tokens.len() - 1)].tok
    }

    fn bump(&mut self) -> Spanned {
        let t = self.current().clone();
        self.pos += 1;
        t
    }

    fn expect(&mut self, want: &Tok, what: &str) -> Result<Spanned, ParseError> {
        if self.peek() == want {
            Ok(self.bump())
        } else {
            let cur = self.current();
            Err(ParseError::Syntax {
                message: format!("expected {what}"),
                span: cur.span,
                expected: what.into(),
                found: format!("{:?}", cur.tok),
            })
        }
    }

    fn formula(&mut self) -> Result<StlFormula, ParseError> {
        let mut disjuncts = vec![self.disjunct()?];
        while *self.peek() == Tok::Pipe {
            self.bump();
            disjuncts.push(self.disjunct()?);
        }
        Ok(if disjuncts.len() == 1 {
            disjuncts.pop().unwrap()
        } else {
            StlFormula::Or(disjuncts)
        })
    }

    fn disjunct(&mut self) -> Result<StlFormula, ParseError> {
        let mut conjuncts = vec![self.conjunct()?];
        loop {
            match self.peek() {
                Tok::Amp => {
                    self.bump();
                    conjuncts.push(self.conjunct()?);
                }
                Tok::Ident(name) if name == "U" => {
                    let span = self.current().span;
                    return Err(ParseError::FragmentViolation {
                        message: "until is outside the plannable fragment".into(),
                        span,
                    });
                }
                _ => break,
            }
        }
        Ok(if conjuncts.len() == 1 {
            conjuncts.pop().unwrap()
        } else {
            StlFormula::And(flatten_and(conjuncts))
        })
    }

    fn conjunct(&mut self) -> Result<StlFormula, ParseError> {
        match self.peek().clone() {
            Tok::Bang => {
                let span = self.current().span;
                Err(ParseError::FragmentViolation {
                    message: "negation is outside the plannable fragment".into(),
                    span,
                })
            }
            Tok::LParen => {
                let open = self.bump();
                let inner = self.formula()?;
                self.expect(&Tok::RParen, "`)`")?;
                if matches!(inner, StlFormula::Or(_)) {
                    return Err(ParseError::FragmentViolation {
                        message: "disjunction is only allowed at the top level".into(),
                        span: open.span,
                    });
                }
                Ok(inner)
            }
            Tok::Ident(_) => self.task(),
            _ => {
                let cur = self.current();
                Err(ParseError::Syntax {
                    message: "expected a task or `(`".into(),
                    span: cur.span,
                    expected: "task".into(),
                    found: format!("{:?}", cur.tok),
                })
            }
        }
    }

    /// `chain IDENT` where chain is one or two `F|G [a, b]` operators.
    fn task(&mut self) -> Result<StlFormula, ParseError> {
        let mut ops: Vec<(bool, Interval, (usize, usize))> = Vec::new();
        loop {
            match (self.peek(), self.peek_n(1)) {
                (Tok::Ident(name), Tok::LBracket) if name == "F" || name == "G" => {
                    let is_f = name == "F";
                    let op_span = self.current().span;
                    self.bump();
                    let interval = self.interval()?;
                    if ops.len() == 2 {
                        return Err(ParseError::FragmentViolation {
                            message: "temporal operators nest at most two deep".into(),
                            span: op_span,
                        });
                    }
                    ops.push((is_f, interval, op_span));
                }
                (Tok::Ident(name), Tok::LBracket) if name == "U" => {
                    let span = self.current().span;
                    return Err(ParseError::FragmentViolation {
                        message: "until is outside the plannable fragment".into(),
                        span,
                    });
                }
                (Tok::Ident(name), _) => {
                    let name = name.clone();
                    let span = self.current().span;
                    if ops.is_empty() {
                        return Err(ParseError::Syntax {
                            message: "a task needs a leading temporal operator".into(),
                            span,
                            expected: "`F[` or `G[`".into(),
                            found: name,
                        });
                    }
                    self.bump();
                    let Some(idx) = self.table.iter().position(|p| *p == name) else {
                        return Err(ParseError::UnknownPredicate { name, span });
                    };
                    let mut node = StlFormula::Predicate(idx);
                    for &(is_f, interval, _) in ops.iter().rev() {
                        node = if is_f {
                            StlFormula::Eventually(interval, Box::new(node))
                        } else {
                            StlFormula::Always(interval, Box::new(node))
                        };
                    }
                    return Ok(node);
                }
                _ => {
                    let cur = self.current();
                    return Err(ParseError::Syntax {
                        message: "expected an operator or predicate name".into(),
                        span: cur.span,
                        expected: "identifier".into(),
                        found: format!("{:?}", cur.tok),
                    });
                }
            }
        }
    }

    fn interval(&mut self) -> Result<Interval, ParseError> {
        let open = self.expect(&Tok::LBracket, "`[`")?;
        let a = self.number()?;
        self.expect(&Tok::Comma, "`,`")?;
        let b = self.number()?;
        let close = self.expect(&Tok::RBracket, "`]`")?;
        Interval::new(a, b).ok_or(ParseError::Syntax {
            message: format!("invalid interval [{a}, {b}]"),
            span: (open.span.0, close.span.1),
            expected: "0 <= a <= b".into(),
            found: format!("[{a}, {b}]"),
        })
    }

    fn number(&mut self) -> Result<f64, ParseError> {
        match self.peek() {
            Tok::Number(v) => {
                let v = *v;
                self.bump();
                Ok(v)
            }
            _ => {
                let cur = self.current();
                Err(ParseError::Syntax {
                    message: "expected a number".into(),
                    span: cur.span,
                    expected: "number".into(),
                    found: format!("{:?}", cur.tok),
                })
            }
        }
    }
}

fn flatten_and(nodes: Vec<StlFormula>) -> Vec<StlFormula> {
    let mut out = Vec::with_capacity(nodes.len());
    for n in nodes {
        match n {
            StlFormula::And(inner) => out.extend(flatten_and(inner)),
            other => out.push(other),
        }
    }
    out
}

/// Parses `text` against a table of predicate names (indices into the table
/// become [`StlFormula::Predicate`] payloads).
pub fn parse(text: &str, predicate_table: &[&str]) -> Result<StlFormula, ParseError> {
    let tokens = lex(text)?;
    let mut parser = Parser { tokens, pos: 0, table: predicate_table };
    let f = parser.formula()?;
    let end = parser.current().clone();
    if end.tok != Tok::Eof {
        return Err(ParseError::Syntax {
            message: "trailing input".into(),
            span: end.span,
            expected: "end of input".into(),
            found: format!("{:?}", end.tok),
        });
    }
    Ok(f)
}

/// Renders a formula back to concrete syntax using the given names.
pub fn to_text(f: &StlFormula, names: &[&str]) -> String {
    fn go(f: &StlFormula, names: &[&str], out: &mut String) {
        match f {
            StlFormula::Predicate(i) => out.push_str(names[*i]),
            StlFormula::Not(c) => {
                out.push('!');
                go(c, names, out);
            }
            StlFormula::Eventually(iv, c) => {
                out.push_str(&format!("F[{},{}] ", iv.a, iv.b));
                go(c, names, out);
            }
            StlFormula::Always(iv, c) => {
                out.push_str(&format!("G[{},{}] ", iv.a, iv.b));
                go(c, names, out);
            }
            StlFormula::Until(iv, l, r) => {
                out.push('(');
                go(l, names, out);
                out.push_str(&format!(" U[{},{}] ", iv.a, iv.b));
                go(r, names, out);
                out.push(')');
            }
            StlFormula::And(cs) => {
                for (k, c) in cs.iter().enumerate() {
                    if k > 0 {
                        out.push_str(" & ");
                    }
                    go(c, names, out);
                }
            }
            StlFormula::Or(cs) => {
                for (k, c) in cs.iter().enumerate() {
                    if k > 0 {
                        out.push_str(" | ");
                    }
                    go(c, names, out);
                }
            }
        }
    }
    let mut s = String::new();
    go(f, names, &mut s);
    s
}

/// Time horizon: how far into the future the formula can look.
pub fn horizon(f: &StlFormula) -> f64 {
    match f {
        StlFormula::Predicate(_) => 0.0,
        StlFormula::Not(c) => horizon(c),
        StlFormula::Eventually(iv, c) | StlFormula::Always(iv, c) => iv.b + horizon(c),
        StlFormula::Until(iv, l, r) => iv.b + horizon(l).max(horizon(r)),
        StlFormula::And(cs) | StlFormula::Or(cs) => {
            cs.iter().map(horizon).fold(0.0, f64::max)
        }
    }
}

/// Merges directly nested same-operator pairs: `F[a,b]F[a',b'] -> F[a+a',b+b']`
/// and the same for `G`. Sound for these two operators because the composed
/// window of reachable instants is exactly the Minkowski sum of the intervals.
pub fn collapse_same_operator(f: &StlFormula) -> StlFormula {
    match f {
        StlFormula::Predicate(i) => StlFormula::Predicate(*i),
        StlFormula::Not(c) => StlFormula::Not(Box::new(collapse_same_operator(c))),
        StlFormula::Until(iv, l, r) => StlFormula::Until(
            *iv,
            Box::new(collapse_same_operator(l)),
            Box::new(collapse_same_operator(r)),
        ),
        StlFormula::Eventually(iv, c) => {
            let c = collapse_same_operator(c);
            if let StlFormula::Eventually(iv2, c2) = c {
                StlFormula::Eventually(
                    Interval { a: iv.a + iv2.a, b: iv.b + iv2.b },
                    c2,
                )
            } else {
                StlFormula::Eventually(*iv, Box::new(c))
            }
        }
        StlFormula::Always(iv, c) => {
            let c = collapse_same_operator(c);
            if let StlFormula::Always(iv2, c2) = c {
                StlFormula::Always(Interval { a: iv.a + iv2.a, b: iv.b + iv2.b }, c2)
            } else {
                StlFormula::Always(*iv, Box::new(c))
            }
        }
        StlFormula::And(cs) => {
            StlFormula::And(cs.iter().map(collapse_same_operator).collect())
        }
        StlFormula::Or(cs) => StlFormula::Or(cs.iter().map(collapse_same_operator).collect()),
    }
}

/// Splits a `G[a,b]F[a',b']` task into finitely many pointwise eventually
/// tasks `F[a_w, a_w]`, `w = 1..n_f`, with
/// `a_w = a + a' + w * (b - a) / n_f`.
///
/// Any window `[t+a', t+b']` with `t` in `[a, b]` then contains at least one
/// `a_w` (consecutive revisits are at most `b' - a'` apart and the last one
/// sits at `b + a'`), so satisfying every pointwise task implies the original.
pub fn decompose_gf(task: &AtomicTask, n_f: Option<usize>) -> Result<Vec<AtomicTask>, FormulaError> {
    if task.kind != TaskKind::AlwaysEventually {
        return Err(FormulaError::NotAlwaysEventually(task.kind));
    }
    let inner = task.inner.expect("always-eventually task carries an inner interval");
    let (a, b) = (task.outer.a, task.outer.b);
    let (a2, b2) = (inner.a, inner.b);
    let needed = if b <= a {
        1
    } else {
        if b2 <= a2 {
            return Err(FormulaError::DegenerateInner);
        }
        (((b - a) / (b2 - a2)) - 1e-12).ceil().max(1.0) as usize
    };
    let n = n_f.unwrap_or(needed);
    if n < needed {
        return Err(FormulaError::InsufficientRevisits { needed, given: n });
    }
    let mut out = Vec::with_capacity(n);
    for w in 1..=n {
        let a_w = a + a2 + (w as f64) * (b - a) / (n as f64);
        out.push(AtomicTask {
            kind: TaskKind::Eventually,
            outer: Interval { a: a_w, b: a_w },
            inner: None,
            predicate: task.predicate,
        });
    }
    Ok(out)
}

/// Normalises a fragment formula into disjuncts of atomic tasks.
///
/// Same-operator chains are collapsed first and every `G F` task is
/// decomposed into pointwise eventually tasks, so the output only contains
/// `F`, `G`, and `F G` kinds.
pub fn to_conjunctions(f: &StlFormula) -> Result<Vec<Vec<AtomicTask>>, FormulaError> {
    let f = collapse_same_operator(f);
    let disjuncts: Vec<&StlFormula> = match &f {
        StlFormula::Or(cs) => cs.iter().collect(),
        other => vec![other],
    };
    let mut out = Vec::with_capacity(disjuncts.len());
    for d in disjuncts {
        let mut tasks = Vec::new();
        collect_tasks(d, &mut tasks)?;
        out.push(tasks);
    }
    Ok(out)
}

fn collect_tasks(f: &StlFormula, tasks: &mut Vec<AtomicTask>) -> Result<(), FormulaError> {
    match f {
        StlFormula::Not(_) => Err(FormulaError::Fragment(
            "negation is outside the plannable fragment".into(),
        )),
        StlFormula::Until(..) => Err(FormulaError::Fragment(
            "until is outside the plannable fragment".into(),
        )),
        StlFormula::And(cs) => {
            for c in cs {
                collect_tasks(c, tasks)?;
            }
            Ok(())
        }
        StlFormula::Or(_) => Err(FormulaError::Fragment(
            "disjunction is only allowed at the top level".into(),
        )),
        StlFormula::Predicate(p) => {
            tasks.push(AtomicTask {
                kind: TaskKind::Always,
                outer: Interval { a: 0.0, b: 0.0 },
                inner: None,
                predicate: *p,
            });
            Ok(())
        }
        StlFormula::Eventually(iv, c) => match c.as_ref() {
            StlFormula::Predicate(p) => {
                tasks.push(AtomicTask {
                    kind: TaskKind::Eventually,
                    outer: *iv,
                    inner: None,
                    predicate: *p,
                });
                Ok(())
            }
            StlFormula::Always(iv2, c2) => {
                if let StlFormula::Predicate(p) = c2.as_ref() {
                    tasks.push(AtomicTask {
                        kind: TaskKind::EventuallyAlways,
                        outer: *iv,
                        inner: Some(*iv2),
                        predicate: *p,
                    });
                    Ok(())
                } else {
                    Err(FormulaError::Fragment(
                        "nested operators must apply to a predicate".into(),
                    ))
                }
            }
            _ => Err(FormulaError::Fragment(
                "eventually must apply to a predicate or an always-task".into(),
            )),
        },
        StlFormula::Always(iv, c) => match c.as_ref() {
            StlFormula::Predicate(p) => {
                tasks.push(AtomicTask {
                    kind: TaskKind::Always,
                    outer: *iv,
                    inner: None,
                    predicate: *p,
                });
                Ok(())
            }
            StlFormula::Eventually(iv2, c2) => {
                if let StlFormula::Predicate(p) = c2.as_ref() {
                    let gf = AtomicTask {
                        kind: TaskKind::AlwaysEventually,
                        outer: *iv,
                        inner: Some(*iv2),
                        predicate: *p,
                    };
                    tasks.extend(decompose_gf(&gf, None)?);
                    Ok(())
                } else {
                    Err(FormulaError::Fragment(
                        "nested operators must apply to a predicate".into(),
                    ))
                }
            }
            _ => Err(FormulaError::Fragment(
                "always must apply to a predicate or an eventually-task".into(),
            )),
        },
    }
}
