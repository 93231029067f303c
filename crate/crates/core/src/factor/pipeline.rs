//! Factor pipelines: a small expression language over panel fields and
//! kernels, evaluated in date chunks.
//!
//! Grammar (whitespace insignificant):
//!
//! ```text
//! definition := "factor" STRING "=" pipeline
//! pipeline   := expr ("|>" stage)*
//! stage      := IDENT ("(" number ("," number)* ")")?
//! expr       := term (("+" | "-") term)*
//! term       := unary (("*" | "/") unary)*
//! unary      := "-" unary | primary
//! primary    := NUMBER | FIELD | call | "(" pipeline ")"
//! call       := IDENT "(" pipeline ("," (pipeline | NUMBER))* ")"
//! FIELD      := open | high | low | close | volume | market_cap
//! ```
//!
//! Kernels: `rolling_mean|rolling_std|rolling_min|rolling_max|rolling_sum(x, w)`,
//! `lag(x, d)`, `delta(x, d)`, `ewma(x, alpha)`, `cross_rank(x)`,
//! `cross_rank_norm(x)`, `cs_mean(x)`, `rolling_cov(x, y, w)`. Shorthands:
//! `returns(d)`, `rolling_beta(w)`, `alpha_momentum_volume(d)`. A stage
//! `x |> k(args)` is the same as `k(x, args)`.
//!
//! Example: `factor "mom20" = delta(close,20)/lag(close,20) |> cross_rank`.

use std::fmt;

use rayon::prelude::*;
use thiserror::Error;

use super::kernels::{self, EwmaState, Kernel, RollingStat};
use super::{FactorError, FactorPanel};
use crate::matrix::MaskedMatrix;
use crate::panel::PricePanel;

/// Parser error; `column` is the 1-based character position in the input.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at column {column}: {message}")]
pub struct ParseError {
    pub column: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Field {
    Open,
    High,
    Low,
    Close,
    Volume,
    MarketCap,
}

impl Field {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "open" => Field::Open,
            "high" => Field::High,
            "low" => Field::Low,
            "close" => Field::Close,
            "volume" => Field::Volume,
            "market_cap" => Field::MarketCap,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Field::Open => "open",
            Field::High => "high",
            Field::Low => "low",
            Field::Close => "close",
            Field::Volume => "volume",
            Field::MarketCap => "market_cap",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Field(Field),
    Const(f64),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Kernel(Kernel, Box<Expr>),
    CrossMean(Box<Expr>),
    RollingCov(usize, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn parse(text: &str) -> Result<Self, ParseError> {
        let mut p = Parser::new(text)?;
        let e = p.pipeline()?;
        p.expect_end()?;
        Ok(e)
    }

    pub fn field(f: Field) -> Self {
        Expr::Field(f)
    }

    pub fn kernel(self, k: Kernel) -> Self {
        Expr::Kernel(k, Box::new(self))
    }

    /// Rows of history needed before the first evaluated row.
    pub fn lookback(&self) -> usize {
        match self {
            Expr::Field(_) | Expr::Const(_) => 0,
            Expr::Neg(e) | Expr::CrossMean(e) => e.lookback(),
            Expr::Binary(_, a, b) => a.lookback().max(b.lookback()),
            Expr::Kernel(k, e) => e.lookback() + k.lookback(),
            Expr::RollingCov(w, a, b) => a.lookback().max(b.lookback()) + w - 1,
        }
    }

    fn validate(&self) -> Result<(), FactorError> {
        match self {
            Expr::Field(_) | Expr::Const(_) => Ok(()),
            Expr::Neg(e) | Expr::CrossMean(e) => e.validate(),
            Expr::Binary(_, a, b) => a.validate().and(b.validate()),
            Expr::Kernel(k, e) => k.validate().and(e.validate()),
            Expr::RollingCov(w, a, b) => {
                if *w < 2 {
                    return Err(FactorError::InvalidKernel("rolling_cov window must be ≥ 2".into()));
                }
                a.validate().and(b.validate())
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Field(x) => write!(f, "{}", x.name()),
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Neg(e) => write!(f, "-({e})"),
            Expr::Binary(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Expr::Kernel(k, e) => match k {
                Kernel::CrossRank { .. } => write!(f, "{}({e})", k.describe()),
                Kernel::Rolling { stat, window } => write!(f, "{}({e}, {window})", stat.name()),
                Kernel::Ewma { alpha } => write!(f, "ewma({e}, {alpha})"),
                Kernel::Lag { window } => write!(f, "lag({e}, {window})"),
                Kernel::Delta { window } => write!(f, "delta({e}, {window})"),
            },
            Expr::CrossMean(e) => write!(f, "cs_mean({e})"),
            Expr::RollingCov(w, a, b) => write!(f, "rolling_cov({a}, {b}, {w})"),
        }
    }
}

/// A named factor definition.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub name: String,
    pub expr: Expr,
}

impl Pipeline {
    pub fn new(name: impl Into<String>, expr: Expr) -> Self {
        Self {
            name: name.into(),
            expr,
        }
    }

    /// Parses `factor "name" = <pipeline>`.
    pub fn parse(line: &str) -> Result<Self, ParseError> {
        let mut p = Parser::new(line)?;
        match p.next() {
            Some(Tok {
                kind: TokKind::Ident(kw),
                ..
            }) if kw == "factor" => {}
            other => return Err(p.error_at(other.as_ref(), "expected `factor`")),
        }
        let name = match p.next() {
            Some(Tok {
                kind: TokKind::Str(s), ..
            }) => s,
            other => return Err(p.error_at(other.as_ref(), "expected a quoted factor name")),
        };
        p.expect(TokKind::Assign, "expected `=`")?;
        let expr = p.pipeline()?;
        p.expect_end()?;
        Ok(Self { name, expr })
    }

    pub fn lookback(&self) -> usize {
        self.expr.lookback()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TokKind {
    Ident(String),
    Num(f64),
    Str(String),
    LParen,
    RParen,
    Comma,
    Plus,
    Minus,
    Star,
    Slash,
    Pipe,
    Assign,
}

#[derive(Debug, Clone, PartialEq)]
struct Tok {
    kind: TokKind,
    column: usize,
}

fn lex(text: &str) -> Result<Vec<Tok>, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut toks = Vec::new();
    let mut i = 0;
    let err = |column: usize, message: String| ParseError { column, message };
    while i < chars.len() {
        let c = chars[i];
        let column = i + 1;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let single = match c {
            '(' => Some(TokKind::LParen),
            ')' => Some(TokKind::RParen),
            ',' => Some(TokKind::Comma),
            '+' => Some(TokKind::Plus),
            '-' => Some(TokKind::Minus),
            '*' => Some(TokKind::Star),
            '/' => Some(TokKind::Slash),
            '=' => Some(TokKind::Assign),
            _ => None,
        };
        if let Some(kind) = single {
            toks.push(Tok { kind, column });
            i += 1;
        } else if c == '|' {
            if chars.get(i + 1) != Some(&'>') {
                return Err(err(column, "expected `|>`".into()));
            }
            toks.push(Tok {
                kind: TokKind::Pipe,
                column,
            });
            i += 2;
        } else if c == '"' {
            let end = chars[i + 1..]
                .iter()
                .position(|&c| c == '"')
                .ok_or_else(|| err(column, "unterminated string".into()))?;
            toks.push(Tok {
                kind: TokKind::Str(chars[i + 1..i + 1 + end].iter().collect()),
                column,
            });
            i += end + 2;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len()
                && (chars[i].is_ascii_digit()
                    || chars[i] == '.'
                    || chars[i] == 'e'
                    || chars[i] == 'E'
                    || ((chars[i] == '-' || chars[i] == '+') && matches!(chars[i - 1], 'e' | 'E')))
            {
                i += 1;
            }
            let s: String = chars[start..i].iter().collect();
            let v = s.parse::<f64>().map_err(|_| err(column, format!("invalid number `{s}`")))?;
            toks.push(Tok {
                kind: TokKind::Num(v),
                column,
            });
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            toks.push(Tok {
                kind: TokKind::Ident(chars[start..i].iter().collect()),
                column,
            });
        } else {
            return Err(err(column, format!("unexpected character `{c}`")));
        }
    }
    Ok(toks)
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
    end_column: usize,
}

enum Arg {
    Expr(Expr, usize),
    Num(f64, usize),
}

impl Parser {
    fn new(text: &str) -> Result<Self, ParseError> {
        Ok(Self {
            toks: lex(text)?,
            pos: 0,
            end_column: text.chars().count() + 1,
        })
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn error_at(&self, tok: Option<&Tok>, message: &str) -> ParseError {
        ParseError {
            column: tok.map_or(self.end_column, |t| t.column),
            message: message.to_string(),
        }
    }

    fn expect(&mut self, kind: TokKind, message: &str) -> Result<Tok, ParseError> {
        match self.next() {
            Some(t) if t.kind == kind => Ok(t),
            other => Err(self.error_at(other.as_ref(), message)),
        }
    }

    fn expect_end(&mut self) -> Result<(), ParseError> {
        match self.peek() {
            None => Ok(()),
            Some(t) => Err(self.error_at(Some(t), "unexpected trailing input")),
        }
    }

    fn pipeline(&mut self) -> Result<Expr, ParseError> {
        let mut e = self.expr()?;
        while matches!(self.peek(), Some(Tok { kind: TokKind::Pipe, .. })) {
            self.next();
            let tok = self.next();
            let name = match &tok {
                Some(Tok {
                    kind: TokKind::Ident(n), ..
                }) => n.clone(),
                other => return Err(self.error_at(other.as_ref(), "expected a kernel name after `|>`")),
            };
            let column = tok.as_ref().map_or(self.end_column, |t| t.column);
            let mut args = vec![Arg::Expr(e, column)];
            if matches!(self.peek(), Some(Tok { kind: TokKind::LParen, .. })) {
                self.next();
                loop {
                    let tok = self.next();
                    match tok {
                        Some(Tok {
                            kind: TokKind::Num(v),
                            column,
                        }) => args.push(Arg::Num(v, column)),
                        other => return Err(self.error_at(other.as_ref(), "expected a numeric stage argument")),
                    }
                    match self.next() {
                        Some(Tok {
                            kind: TokKind::Comma, ..
                        }) => continue,
                        Some(Tok {
                            kind: TokKind::RParen, ..
                        }) => break,
                        other => return Err(self.error_at(other.as_ref(), "expected `,` or `)`")),
                    }
                }
            }
            e = build_call(&name, column, args)?;
        }
        Ok(e)
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek().map(|t| &t.kind) {
                Some(TokKind::Plus) => BinOp::Add,
                Some(TokKind::Minus) => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.next();
            let rhs = self.term()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek().map(|t| &t.kind) {
                Some(TokKind::Star) => BinOp::Mul,
                Some(TokKind::Slash) => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.next();
            let rhs = self.unary()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if matches!(self.peek(), Some(Tok { kind: TokKind::Minus, .. })) {
            self.next();
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let tok = self.next();
        match tok {
            Some(Tok {
                kind: TokKind::Num(v), ..
            }) => Ok(Expr::Const(v)),
            Some(Tok {
                kind: TokKind::LParen, ..
            }) => {
                let e = self.pipeline()?;
                self.expect(TokKind::RParen, "expected `)`")?;
                Ok(e)
            }
            Some(Tok {
                kind: TokKind::Ident(name),
                column,
            }) => {
                if !matches!(self.peek(), Some(Tok { kind: TokKind::LParen, .. })) {
                    return Field::from_name(&name).map(Expr::Field).ok_or(ParseError {
                        column,
                        message: format!("unknown field `{name}`"),
                    });
                }
                self.next();
                let mut args = Vec::new();
                if matches!(self.peek(), Some(Tok { kind: TokKind::RParen, .. })) {
                    self.next();
                } else {
                    loop {
                        let col = self.peek().map_or(self.end_column, |t| t.column);
                        let arg = match self.peek().map(|t| &t.kind) {
                            Some(TokKind::Num(v))
                                if matches!(
                                    self.toks.get(self.pos + 1).map(|t| &t.kind),
                                    Some(TokKind::Comma) | Some(TokKind::RParen)
                                ) =>
                            {
                                let v = *v;
                                self.next();
                                Arg::Num(v, col)
                            }
                            _ => Arg::Expr(self.pipeline()?, col),
                        };
                        args.push(arg);
                        match self.next() {
                            Some(Tok {
                                kind: TokKind::Comma, ..
                            }) => continue,
                            Some(Tok {
                                kind: TokKind::RParen, ..
                            }) => break,
                            other => return Err(self.error_at(other.as_ref(), "expected `,` or `)`")),
                        }
                    }
                }
                build_call(&name, column, args)
            }
            other => Err(self.error_at(other.as_ref(), "expected a number, field, call or `(`")),
        }
    }
}

fn build_call(name: &str, column: usize, args: Vec<Arg>) -> Result<Expr, ParseError> {
    let err = |message: String| ParseError { column, message };
    let mut exprs = Vec::new();
    let mut nums = Vec::new();
    for a in args {
        match a {
            Arg::Expr(e, c) => {
                if !nums.is_empty() {
                    return Err(ParseError {
                        column: c,
                        message: "series arguments must precede numeric arguments".into(),
                    });
                }
                exprs.push(e)
            }
            Arg::Num(v, c) => nums.push((v, c)),
        }
    }
    let window = |nums: &[(f64, usize)]| -> Result<usize, ParseError> {
        let (v, c) = nums[0];
        if v >= 1.0 && v.fract() == 0.0 && v < 1e9 {
            Ok(v as usize)
        } else {
            Err(ParseError {
                column: c,
                message: format!("window must be a positive integer, got {v}"),
            })
        }
    };
    let arity = |e: usize, n: usize| -> Result<(), ParseError> {
        if exprs.len() == e && nums.len() == n {
            Ok(())
        } else {
            Err(err(format!(
                "`{name}` takes {e} series and {n} numeric argument(s), got {} and {}",
                exprs.len(),
                nums.len()
            )))
        }
    };
    let rolling = |stat| -> Result<Expr, ParseError> {
        arity(1, 1)?;
        Ok(Expr::Kernel(
            Kernel::Rolling {
                stat,
                window: window(&nums)?,
            },
            Box::new(exprs[0].clone()),
        ))
    };
    let close = || Expr::Field(Field::Close);
    let simple_returns = |d: usize| {
        Expr::Binary(
            BinOp::Div,
            Box::new(close().kernel(Kernel::Delta { window: d })),
            Box::new(close().kernel(Kernel::Lag { window: d })),
        )
    };
    match name {
        "rolling_mean" => rolling(RollingStat::Mean),
        "rolling_std" => rolling(RollingStat::Std),
        "rolling_min" => rolling(RollingStat::Min),
        "rolling_max" => rolling(RollingStat::Max),
        "rolling_sum" => rolling(RollingStat::Sum),
        "lag" | "delta" => {
            arity(1, 1)?;
            let w = window(&nums)?;
            let k = if name == "lag" {
                Kernel::Lag { window: w }
            } else {
                Kernel::Delta { window: w }
            };
            Ok(exprs[0].clone().kernel(k))
        }
        "ewma" => {
            arity(1, 1)?;
            let (alpha, c) = nums[0];
            if !(alpha > 0.0 && alpha <= 1.0) {
                return Err(ParseError {
                    column: c,
                    message: format!("ewma alpha must be in (0, 1], got {alpha}"),
                });
            }
            Ok(exprs[0].clone().kernel(Kernel::Ewma { alpha }))
        }
        "cross_rank" | "cross_rank_norm" => {
            arity(1, 0)?;
            Ok(exprs[0].clone().kernel(Kernel::CrossRank {
                normalized: name == "cross_rank_norm",
            }))
        }
        "cs_mean" => {
            arity(1, 0)?;
            Ok(Expr::CrossMean(Box::new(exprs[0].clone())))
        }
        "rolling_cov" => {
            arity(2, 1)?;
            let w = window(&nums)?;
            if w < 2 {
                return Err(err("rolling_cov window must be ≥ 2".into()));
            }
            Ok(Expr::RollingCov(w, Box::new(exprs[0].clone()), Box::new(exprs[1].clone())))
        }
        "returns" => {
            arity(0, 1)?;
            Ok(simple_returns(window(&nums)?))
        }
        "rolling_beta" => {
            arity(0, 1)?;
            let w = window(&nums)?;
            if w < 2 {
                return Err(err("rolling_beta window must be ≥ 2".into()));
            }
            let r = simple_returns(1);
            let m = Expr::CrossMean(Box::new(r.clone()));
            Ok(Expr::Binary(
                BinOp::Div,
                Box::new(Expr::RollingCov(w, Box::new(r), Box::new(m.clone()))),
                Box::new(Expr::RollingCov(w, Box::new(m.clone()), Box::new(m))),
            ))
        }
        "alpha_momentum_volume" => {
            arity(0, 1)?;
            let d = window(&nums)?;
            let rank = Kernel::CrossRank { normalized: false };
            Ok(Expr::Binary(
                BinOp::Mul,
                Box::new(simple_returns(d).kernel(rank)),
                Box::new(Expr::Field(Field::Volume).kernel(rank)),
            ))
        }
        _ => Err(err(format!("unknown function `{name}`"))),
    }
}

/// Runtime mirror of an [`Expr`] holding each node's carried cache.
enum Node {
    Field(Field),
    Const(f64),
    Neg(Box<Node>),
    Binary(BinOp, Box<Node>, Box<Node>),
    Rolling {
        stat: RollingStat,
        window: usize,
        input: Box<Node>,
        cache: Option<MaskedMatrix>,
    },
    Shift {
        window: usize,
        difference: bool,
        input: Box<Node>,
        cache: Option<MaskedMatrix>,
    },
    Ewma {
        alpha: f64,
        input: Box<Node>,
        state: Option<EwmaState>,
    },
    Rank {
        normalized: bool,
        input: Box<Node>,
    },
    CrossMean(Box<Node>),
    Cov {
        window: usize,
        x: Box<Node>,
        y: Box<Node>,
        cache: Option<(MaskedMatrix, MaskedMatrix)>,
    },
}

/// Last `keep` rows of `cache ++ input`.
fn tail(cache: Option<&MaskedMatrix>, input: &MaskedMatrix, keep: usize) -> MaskedMatrix {
    let all = match cache {
        Some(c) if c.rows() > 0 => c.vstack(input),
        _ => input.clone(),
    };
    let start = all.rows().saturating_sub(keep);
    all.slice_rows(start, all.rows())
}

impl Node {
    fn build(e: &Expr) -> Self {
        let b = |e: &Expr| Box::new(Node::build(e));
        match e {
            Expr::Field(f) => Node::Field(*f),
            Expr::Const(c) => Node::Const(*c),
            Expr::Neg(x) => Node::Neg(b(x)),
            Expr::Binary(op, x, y) => Node::Binary(*op, b(x), b(y)),
            Expr::Kernel(k, x) => match *k {
                Kernel::Rolling { stat, window } => Node::Rolling {
                    stat,
                    window,
                    input: b(x),
                    cache: None,
                },
                Kernel::Lag { window } | Kernel::Delta { window } => Node::Shift {
                    window,
                    difference: matches!(k, Kernel::Delta { .. }),
                    input: b(x),
                    cache: None,
                },
                Kernel::Ewma { alpha } => Node::Ewma {
                    alpha,
                    input: b(x),
                    state: None,
                },
                Kernel::CrossRank { normalized } => Node::Rank { normalized, input: b(x) },
            },
            Expr::CrossMean(x) => Node::CrossMean(b(x)),
            Expr::RollingCov(w, x, y) => Node::Cov {
                window: *w,
                x: b(x),
                y: b(y),
                cache: None,
            },
        }
    }

    /// Evaluates rows `start..end`; chunks must be visited in order.
    fn eval(&mut self, panel: &PricePanel, start: usize, end: usize) -> MaskedMatrix {
        match self {
            Node::Field(f) => {
                let src = match f {
                    Field::Open => &panel.open,
                    Field::High => &panel.high,
                    Field::Low => &panel.low,
                    Field::Close => &panel.close,
                    Field::Volume => &panel.volume,
                    Field::MarketCap => &panel.market_cap,
                };
                MaskedMatrix::new(
                    src.slice(ndarray::s![start..end, ..]).to_owned(),
                    panel.mask.slice(ndarray::s![start..end, ..]).to_owned(),
                )
            }
            Node::Const(c) => MaskedMatrix::from_values(ndarray::Array2::from_elem(
                (end - start, panel.n_securities()),
                *c,
            )),
            Node::Neg(x) => {
                let v = x.eval(panel, start, end);
                MaskedMatrix::new(v.values.mapv(|a| -a), v.mask)
            }
            Node::Binary(op, x, y) => {
                let a = x.eval(panel, start, end);
                let b = y.eval(panel, start, end);
                let op = *op;
                kernels::combine(&a, &b, move |p, q| op.apply(p, q))
            }
            Node::Rolling {
                stat,
                window,
                input,
                cache,
            } => {
                let x = input.eval(panel, start, end);
                let out = kernels::rolling_with_history(cache.as_ref(), &x, *stat, *window);
                *cache = Some(tail(cache.as_ref(), &x, *window - 1));
                out
            }
            Node::Shift {
                window,
                difference,
                input,
                cache,
            } => {
                let x = input.eval(panel, start, end);
                let out = kernels::shift_with_history(cache.as_ref(), &x, *window, *difference);
                *cache = Some(tail(cache.as_ref(), &x, *window));
                out
            }
            Node::Ewma { alpha, input, state } => {
                let x = input.eval(panel, start, end);
                let st = state.get_or_insert_with(|| EwmaState::new(x.cols()));
                kernels::ewma_with_state(st, &x, *alpha)
            }
            Node::Rank { normalized, input } => kernels::cross_rank(&input.eval(panel, start, end), *normalized),
            Node::CrossMean(x) => kernels::cross_mean(&x.eval(panel, start, end)),
            Node::Cov { window, x, y, cache } => {
                let a = x.eval(panel, start, end);
                let b = y.eval(panel, start, end);
                let out = kernels::rolling_cov_with_history(cache.as_ref().map(|(p, q)| (p, q)), &a, &b, *window);
                let keep = *window - 1;
                *cache = Some((
                    tail(cache.as_ref().map(|c| &c.0), &a, keep),
                    tail(cache.as_ref().map(|c| &c.1), &b, keep),
                ));
                out
            }
        }
    }
}

/// Evaluates one pipeline over the whole panel.
pub fn evaluate(panel: &PricePanel, pipeline: &Pipeline) -> Result<FactorPanel, FactorError> {
    let chunk = panel.n_dates().max(1);
    Ok(evaluate_chunked_unchecked(panel, pipeline, chunk)?)
}

fn evaluate_chunked_unchecked(panel: &PricePanel, pipeline: &Pipeline, chunk_days: usize) -> Result<FactorPanel, FactorError> {
    pipeline.expr.validate()?;
    let t_len = panel.n_dates();
    let mut node = Node::build(&pipeline.expr);
    let mut out: Option<MaskedMatrix> = None;
    let mut start = 0;
    while start < t_len {
        let end = (start + chunk_days).min(t_len);
        let part = node.eval(panel, start, end);
        out = Some(match out {
            None => part,
            Some(acc) => acc.vstack(&part),
        });
        start = end;
    }
    let values = out.unwrap_or_else(|| MaskedMatrix::missing(0, panel.n_securities()));
    Ok(FactorPanel::new(
        pipeline.name.clone(),
        values,
        vec![pipeline.expr.to_string()],
    ))
}

/// Evaluates pipelines in date chunks of `chunk_days`.
///
/// Each stateful node carries a cache of its trailing input rows (or its
/// recursion state) from one chunk to the next, so the result is
/// bit-identical to a single pass. `chunk_days` must cover the longest
/// lookback among the pipelines.
pub fn evaluate_chunked(panel: &PricePanel, pipelines: &[Pipeline], chunk_days: usize) -> Result<Vec<FactorPanel>, FactorError> {
    let lookback = pipelines.iter().map(Pipeline::lookback).max().unwrap_or(0);
    if chunk_days == 0 || chunk_days < lookback {
        return Err(FactorError::Config(format!(
            "chunk of {chunk_days} days is shorter than the maximum lookback {lookback}"
        )));
    }
    pipelines
        .par_iter()
        .map(|p| evaluate_chunked_unchecked(panel, p, chunk_days))
        .collect()
}
