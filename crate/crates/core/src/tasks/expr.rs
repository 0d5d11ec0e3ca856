//! Expression trees in prefix s-expression form, e.g. `(* p0 (var 0))`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const MAX_PARAMS: usize = 10;
pub const DEFAULT_MAX_DEPTH: usize = 10;
/// Denominators smaller than this in magnitude flag the sample.
pub const DIVISION_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl UnaryOp {
    pub const ALL: [UnaryOp; 6] = [UnaryOp::Exp, UnaryOp::Log, UnaryOp::Sin, UnaryOp::Cos, UnaryOp::Sqrt, UnaryOp::Abs];

    pub fn symbol(self) -> &'static str {
        match self {
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Abs => "abs",
        }
    }

    fn apply(self, a: f64) -> f64 {
        match self {
            UnaryOp::Exp => a.exp(),
            UnaryOp::Log if a <= 0.0 => f64::NAN,
            UnaryOp::Log => a.ln(),
            UnaryOp::Sin => a.sin(),
            UnaryOp::Cos => a.cos(),
            UnaryOp::Sqrt => a.sqrt(),
            UnaryOp::Abs => a.abs(),
        }
    }
}

impl BinaryOp {
    pub const ALL: [BinaryOp; 5] = [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div, BinaryOp::Pow];

    pub fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
            BinaryOp::Pow => "pow",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div if b.abs() < DIVISION_GUARD => f64::NAN,
            BinaryOp::Div => a / b,
            BinaryOp::Pow if a == 0.0 && b < 0.0 => f64::NAN,
            BinaryOp::Pow => a.powf(b),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Param(usize),
    Var(usize),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExprError {
    #[error("unexpected end of expression")]
    UnexpectedEnd,
    #[error("unexpected token {0:?}")]
    UnexpectedToken(String),
    #[error("unknown operator {0:?}")]
    UnknownOperator(String),
    #[error("parameter index {0} out of range (max {max})", max = MAX_PARAMS - 1)]
    ParamOutOfRange(usize),
    #[error("expression depth {depth} exceeds cap {cap}")]
    TooDeep { depth: usize, cap: usize },
    #[error("trailing input after expression: {0:?}")]
    Trailing(String),
}

impl Expr {
    pub fn unary(op: UnaryOp, a: Expr) -> Self {
        Expr::Unary(op, Box::new(a))
    }

    pub fn binary(op: BinaryOp, a: Expr, b: Expr) -> Self {
        Expr::Binary(op, Box::new(a), Box::new(b))
    }

    /// Leaves have depth 1.
    pub fn depth(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Param(_) | Expr::Var(_) => 1,
            Expr::Unary(_, a) => 1 + a.depth(),
            Expr::Binary(_, a, b) => 1 + a.depth().max(b.depth()),
        }
    }

    pub fn node_count(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Param(_) | Expr::Var(_) => 1,
            Expr::Unary(_, a) => 1 + a.node_count(),
            Expr::Binary(_, a, b) => 1 + a.node_count() + b.node_count(),
        }
    }

    /// Number of parameter slots the expression reads (highest index + 1).
    pub fn param_count(&self) -> usize {
        match self {
            Expr::Param(i) => i + 1,
            Expr::Const(_) | Expr::Var(_) => 0,
            Expr::Unary(_, a) => a.param_count(),
            Expr::Binary(_, a, b) => a.param_count().max(b.param_count()),
        }
    }

    pub fn max_var(&self) -> Option<usize> {
        match self {
            Expr::Var(i) => Some(*i),
            Expr::Const(_) | Expr::Param(_) => None,
            Expr::Unary(_, a) => a.max_var(),
            Expr::Binary(_, a, b) => a.max_var().max(b.max_var()),
        }
    }

    /// Node at preorder position `index`.
    pub fn node(&self, index: usize) -> Option<&Expr> {
        let mut i = index;
        self.nth(&mut i)
    }

    fn nth(&self, i: &mut usize) -> Option<&Expr> {
        if *i == 0 {
            return Some(self);
        }
        *i -= 1;
        match self {
            Expr::Const(_) | Expr::Param(_) | Expr::Var(_) => None,
            Expr::Unary(_, a) => a.nth(i),
            Expr::Binary(_, a, b) => a.nth(i).or_else(|| b.nth(i)),
        }
    }

    /// Copy with the preorder node at `index` replaced.
    pub fn replace_node(&self, index: usize, replacement: &Expr) -> Expr {
        let mut i = index;
        self.replaced(&mut i, replacement)
    }

    fn replaced(&self, i: &mut usize, replacement: &Expr) -> Expr {
        if *i == 0 {
            *i = usize::MAX;
            return replacement.clone();
        }
        if *i != usize::MAX {
            *i -= 1;
        }
        match self {
            Expr::Const(_) | Expr::Param(_) | Expr::Var(_) => self.clone(),
            Expr::Unary(op, a) => Expr::unary(*op, a.replaced(i, replacement)),
            Expr::Binary(op, a, b) => {
                let a = a.replaced(i, replacement);
                let b = b.replaced(i, replacement);
                Expr::binary(*op, a, b)
            }
        }
    }

    /// Scalar evaluation; NaN marks a flagged sample.
    pub fn eval_point(&self, x: &[f64], params: &[f64]) -> f64 {
        let v = match self {
            Expr::Const(c) => *c,
            Expr::Param(i) => params.get(*i).copied().unwrap_or(f64::NAN),
            Expr::Var(i) => x.get(*i).copied().unwrap_or(f64::NAN),
            Expr::Unary(op, a) => {
                let a = a.eval_point(x, params);
                if a.is_nan() {
                    return f64::NAN;
                }
                op.apply(a)
            }
            Expr::Binary(op, a, b) => {
                let a = a.eval_point(x, params);
                if a.is_nan() {
                    return f64::NAN;
                }
                let b = b.eval_point(x, params);
                if b.is_nan() {
                    return f64::NAN;
                }
                op.apply(a, b)
            }
        };
        if v.is_finite() { v } else { f64::NAN }
    }

    pub fn parse_with_depth(text: &str, max_depth: usize) -> Result<Expr, ExprError> {
        let tokens = tokenize(text);
        let mut pos = 0;
        let expr = parse_tokens(&tokens, &mut pos)?;
        if pos < tokens.len() {
            return Err(ExprError::Trailing(tokens[pos..].join(" ")));
        }
        let depth = expr.depth();
        if depth > max_depth {
            return Err(ExprError::TooDeep { depth, cap: max_depth });
        }
        Ok(expr)
    }

    /// `p0 + p1*x0 + p2*x1 + ...` for `n_vars` inputs.
    pub fn linear(n_vars: usize) -> Expr {
        let mut e = Expr::Param(0);
        for v in 0..n_vars.min(MAX_PARAMS - 1) {
            let term = Expr::binary(BinaryOp::Mul, Expr::Param(v + 1), Expr::Var(v));
            e = Expr::binary(BinaryOp::Add, e, term);
        }
        e
    }
}

/// Evaluates every row; flagged samples are NaN.
pub fn eval_expression(ast: &Expr, inputs: &[Vec<f64>], params: &[f64]) -> Vec<f64> {
    inputs.iter().map(|row| ast.eval_point(row, params)).collect()
}

fn tokenize(text: &str) -> Vec<String> {
    text.replace('(', " ( ").replace(')', " ) ").split_whitespace().map(String::from).collect()
}

fn parse_tokens(tokens: &[String], pos: &mut usize) -> Result<Expr, ExprError> {
    let tok = tokens.get(*pos).ok_or(ExprError::UnexpectedEnd)?;
    *pos += 1;
    if tok == ")" {
        return Err(ExprError::UnexpectedToken(tok.clone()));
    }
    if tok != "(" {
        return parse_atom(tok);
    }
    let head = tokens.get(*pos).ok_or(ExprError::UnexpectedEnd)?.clone();
    *pos += 1;
    let expr = if head == "var" {
        let idx = tokens.get(*pos).ok_or(ExprError::UnexpectedEnd)?;
        *pos += 1;
        Expr::Var(idx.parse().map_err(|_| ExprError::UnexpectedToken(idx.clone()))?)
    } else if let Some(op) = UnaryOp::ALL.iter().find(|o| o.symbol() == head) {
        Expr::unary(*op, parse_tokens(tokens, pos)?)
    } else if let Some(op) = BinaryOp::ALL.iter().find(|o| o.symbol() == head) {
        let a = parse_tokens(tokens, pos)?;
        let b = parse_tokens(tokens, pos)?;
        Expr::binary(*op, a, b)
    } else {
        return Err(ExprError::UnknownOperator(head));
    };
    match tokens.get(*pos) {
        Some(t) if t == ")" => {
            *pos += 1;
            Ok(expr)
        }
        Some(t) => Err(ExprError::UnexpectedToken(t.clone())),
        None => Err(ExprError::UnexpectedEnd),
    }
}

fn parse_atom(tok: &str) -> Result<Expr, ExprError> {
    if let Some(rest) = tok.strip_prefix('p') {
        if let Ok(i) = rest.parse::<usize>() {
            if i >= MAX_PARAMS {
                return Err(ExprError::ParamOutOfRange(i));
            }
            return Ok(Expr::Param(i));
        }
    }
    match tok.parse::<f64>() {
        Ok(c) if c.is_finite() => Ok(Expr::Const(c)),
        _ => Err(ExprError::UnexpectedToken(tok.to_string())),
    }
}

impl FromStr for Expr {
    type Err = ExprError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Expr::parse_with_depth(s, DEFAULT_MAX_DEPTH)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c:?}"),
            Expr::Param(i) => write!(f, "p{i}"),
            Expr::Var(i) => write!(f, "(var {i})"),
            Expr::Unary(op, a) => write!(f, "({} {a})", op.symbol()),
            Expr::Binary(op, a, b) => write!(f, "({} {a} {b})", op.symbol()),
        }
    }
}

impl Serialize for Expr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}
