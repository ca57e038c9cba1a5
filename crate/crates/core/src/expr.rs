//! Coefficient expression language.
//!
//! Grammar (lowest to highest precedence):
//!
//! ```text
//! expr    := term (("+" | "-") term)*
//! term    := unary (("*" | "/") unary)*
//! unary   := "-" unary | power
//! power   := primary ("^" unary)?          right associative
//! primary := number | "t" | "x<k>" | func "(" expr ("," expr)* ")" | "(" expr ")"
//! ```
//!
//! Functions: `sin cos exp abs tanh step` (one argument) and `min max powb`
//! (two arguments). `step(u)` is `1` for `u ≥ 0` and `0` otherwise;
//! `powb(u, q) = |u|^q`.

use std::fmt;

use thiserror::Error;

const MAX_DEPTH: usize = 200;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("parse error at line {line}, column {column}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("evaluation error: {0}")]
pub struct EvalError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Abs,
    Tanh,
    Step,
    Min,
    Max,
    Powb,
}

impl Func {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "abs" => Func::Abs,
            "tanh" => Func::Tanh,
            "step" => Func::Step,
            "min" => Func::Min,
            "max" => Func::Max,
            "powb" => Func::Powb,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Abs => "abs",
            Func::Tanh => "tanh",
            Func::Step => "step",
            Func::Min => "min",
            Func::Max => "max",
            Func::Powb => "powb",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max | Func::Powb => 2,
            _ => 1,
        }
    }

    /// Functions that are not smooth in their argument.
    fn is_rough(self) -> bool {
        matches!(
            self,
            Func::Abs | Func::Step | Func::Min | Func::Max | Func::Powb
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    /// Non-negative finite literal; negation is a separate node.
    Num(f64),
    T,
    /// Spatial coordinate, 0-based (`x1` is `X(0)`).
    X(usize),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

/// How an expression depends on `(t, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Dependence {
    Constant,
    TimeOnly,
    SpaceTime,
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr, ParseError> {
        let tokens = lex(src)?;
        let mut p = Parser {
            tokens,
            pos: 0,
            depth: 0,
        };
        let e = p.expr()?;
        match p.peek() {
            Tok::End => Ok(e),
            _ => Err(p.error("unexpected trailing input")),
        }
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> Result<f64, EvalError> {
        let v = match self {
            Expr::Num(v) => *v,
            Expr::T => t,
            Expr::X(i) => *x.get(*i).ok_or_else(|| {
                EvalError(format!(
                    "variable x{} out of range for N = {}",
                    i + 1,
                    x.len()
                ))
            })?,
            Expr::Neg(e) => -e.eval(t, x)?,
            Expr::Bin(op, a, b) => {
                let a = a.eval(t, x)?;
                let b = b.eval(t, x)?;
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b == 0.0 {
                            return Err(EvalError("division by zero".into()));
                        }
                        a / b
                    }
                    BinOp::Pow => a.powf(b),
                }
            }
            Expr::Call(f, args) => {
                let a = args[0].eval(t, x)?;
                match f {
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Exp => a.exp(),
                    Func::Abs => a.abs(),
                    Func::Tanh => a.tanh(),
                    Func::Step => {
                        if a >= 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Func::Min => a.min(args[1].eval(t, x)?),
                    Func::Max => a.max(args[1].eval(t, x)?),
                    Func::Powb => a.abs().powf(args[1].eval(t, x)?),
                }
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError(format!("non-finite result in `{self}`")))
        }
    }

    pub fn dependence(&self) -> Dependence {
        match self {
            Expr::Num(_) => Dependence::Constant,
            Expr::T => Dependence::TimeOnly,
            Expr::X(_) => Dependence::SpaceTime,
            Expr::Neg(e) => e.dependence(),
            Expr::Bin(_, a, b) => a.dependence().max(b.dependence()),
            Expr::Call(_, args) => args
                .iter()
                .map(Expr::dependence)
                .max()
                .unwrap_or(Dependence::Constant),
        }
    }

    /// False when `t` enters through a function that may be discontinuous or
    /// non-differentiable (`step`, `abs`, `min`, `max`, `powb`, or `^` with a
    /// non-integer exponent).
    pub fn is_time_smooth(&self) -> bool {
        match self {
            Expr::Num(_) | Expr::T | Expr::X(_) => true,
            Expr::Neg(e) => e.is_time_smooth(),
            Expr::Bin(BinOp::Pow, a, b) => {
                let integer_exponent = matches!(**b, Expr::Num(v) if v.fract() == 0.0);
                let t_dependent = a.uses_t() || b.uses_t();
                a.is_time_smooth() && b.is_time_smooth() && (integer_exponent || !t_dependent)
            }
            Expr::Bin(_, a, b) => a.is_time_smooth() && b.is_time_smooth(),
            Expr::Call(f, args) => {
                let t_dependent = args.iter().any(Expr::uses_t);
                args.iter().all(Expr::is_time_smooth) && !(f.is_rough() && t_dependent)
            }
        }
    }

    pub fn uses_t(&self) -> bool {
        match self {
            Expr::T => true,
            Expr::Num(_) | Expr::X(_) => false,
            Expr::Neg(e) => e.uses_t(),
            Expr::Bin(_, a, b) => a.uses_t() || b.uses_t(),
            Expr::Call(_, args) => args.iter().any(Expr::uses_t),
        }
    }

    /// Largest spatial index referenced plus one (0 if none).
    pub fn spatial_arity(&self) -> usize {
        match self {
            Expr::Num(_) | Expr::T => 0,
            Expr::X(i) => i + 1,
            Expr::Neg(e) => e.spatial_arity(),
            Expr::Bin(_, a, b) => a.spatial_arity().max(b.spatial_arity()),
            Expr::Call(_, args) => args.iter().map(Expr::spatial_arity).max().unwrap_or(0),
        }
    }

    /// Literal value if the expression is a (possibly negated) number.
    pub fn as_constant(&self) -> Option<f64> {
        match self {
            Expr::Num(v) => Some(*v),
            Expr::Neg(e) => e.as_constant().map(|v| -v),
            _ => None,
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            // `{:?}` is the shortest representation that round-trips.
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::T => write!(f, "t"),
            Expr::X(i) => write!(f, "x{}", i + 1),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Bin(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (k, a) in args.iter().enumerate() {
                    if k > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
    End,
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    line: usize,
    column: usize,
}

fn lex(src: &str) -> Result<Vec<Spanned>, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut line, mut column) = (1, 1);
    let mut i = 0;
    let err = |line, column, message: String| ParseError {
        line,
        column,
        message,
    };
    while i < chars.len() {
        let c = chars[i];
        let (l0, c0) = (line, column);
        if c == '\n' {
            line += 1;
            column = 1;
            i += 1;
            continue;
        }
        if c.is_whitespace() {
            column += 1;
            i += 1;
            continue;
        }
        let start = i;
        let tok = if c.is_ascii_digit() || c == '.' {
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v: f64 = text
                .parse()
                .map_err(|_| err(l0, c0, format!("malformed number `{text}`")))?;
            if !v.is_finite() {
                return Err(err(l0, c0, format!("number `{text}` is not finite")));
            }
            Tok::Num(v)
        } else if c.is_ascii_alphabetic() || c == '_' {
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            Tok::Ident(chars[start..i].iter().collect())
        } else {
            i += 1;
            match c {
                '+' | '-' | '*' | '/' | '^' => Tok::Op(c),
                '(' => Tok::LParen,
                ')' => Tok::RParen,
                ',' => Tok::Comma,
                _ => return Err(err(l0, c0, format!("unexpected character `{c}`"))),
            }
        };
        column += i - start;
        out.push(Spanned {
            tok,
            line: l0,
            column: c0,
        });
    }
    out.push(Spanned {
        tok: Tok::End,
        line,
        column,
    });
    Ok(out)
}

struct Parser {
    tokens: Vec<Spanned>,
    pos: usize,
    depth: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.tokens[self.pos].tok
    }

    fn advance(&mut self) -> Tok {
        let t = self.tokens[self.pos].tok.clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, message: impl Into<String>) -> ParseError {
        let s = &self.tokens[self.pos];
        ParseError {
            line: s.line,
            column: s.column,
            message: message.into(),
        }
    }

    fn enter(&mut self) -> Result<(), ParseError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            Err(self.error(format!("expression nested deeper than {MAX_DEPTH} levels")))
        } else {
            Ok(())
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        self.enter()?;
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Tok::Op('+') => BinOp::Add,
                Tok::Op('-') => BinOp::Sub,
                _ => break,
            };
            self.advance();
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        self.depth -= 1;
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Op('*') => BinOp::Mul,
                Tok::Op('/') => BinOp::Div,
                _ => break,
            };
            self.advance();
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        self.enter()?;
        let e = if matches!(self.peek(), Tok::Op('-')) {
            self.advance();
            Expr::Neg(Box::new(self.unary()?))
        } else {
            self.power()?
        };
        self.depth -= 1;
        Ok(e)
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.primary()?;
        if matches!(self.peek(), Tok::Op('^')) {
            self.advance();
            let exponent = self.unary()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        match self.peek().clone() {
            Tok::Num(v) => {
                self.advance();
                Ok(Expr::Num(v))
            }
            Tok::LParen => {
                self.advance();
                let e = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(e)
            }
            Tok::Ident(name) => {
                if name == "t" {
                    self.advance();
                    return Ok(Expr::T);
                }
                if let Some(idx) = name.strip_prefix('x').and_then(|s| {
                    (!s.is_empty() && !s.starts_with('0') && s.bytes().all(|b| b.is_ascii_digit()))
                        .then(|| s.parse::<usize>().ok())
                        .flatten()
                }) {
                    self.advance();
                    return Ok(Expr::X(idx - 1));
                }
                let Some(func) = Func::from_name(&name) else {
                    return Err(self.error(format!("unknown identifier `{name}`")));
                };
                let at = self.error("");
                self.advance();
                self.expect(Tok::LParen, &format!("`(` after `{name}`"))?;
                let mut args = vec![self.expr()?];
                while matches!(self.peek(), Tok::Comma) {
                    self.advance();
                    args.push(self.expr()?);
                }
                self.expect(Tok::RParen, "`)`")?;
                if args.len() != func.arity() {
                    return Err(ParseError {
                        message: format!(
                            "`{name}` takes {} argument(s), got {}",
                            func.arity(),
                            args.len()
                        ),
                        ..at
                    });
                }
                Ok(Expr::Call(func, args))
            }
            Tok::End => Err(self.error("unexpected end of input")),
            other => Err(self.error(format!("unexpected token {other:?}"))),
        }
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), ParseError> {
        if *self.peek() == tok {
            self.advance();
            Ok(())
        } else {
            Err(self.error(format!("expected {what}")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> Expr {
        Expr::parse(s).unwrap()
    }

    #[test]
    fn literal_and_shape() {
        assert_eq!(p("1"), Expr::Num(1.0));
        assert_eq!(
            p("1 + 0.25*sin(x2)"),
            Expr::Bin(
                BinOp::Add,
                Box::new(Expr::Num(1.0)),
                Box::new(Expr::Bin(
                    BinOp::Mul,
                    Box::new(Expr::Num(0.25)),
                    Box::new(Expr::Call(Func::Sin, vec![Expr::X(1)]))
                ))
            )
        );
    }

    #[test]
    fn step_semantics() {
        let e = p("1 + 0.5*step(t-0.5)");
        assert_eq!(e.eval(0.75, &[]).unwrap(), 1.5);
        assert_eq!(e.eval(0.5, &[]).unwrap(), 1.5);
        assert_eq!(e.eval(0.25, &[]).unwrap(), 1.0);
    }

    #[test]
    fn precedence() {
        assert_eq!(p("-2^2").eval(0.0, &[]).unwrap(), -4.0);
        assert_eq!(p("2^3^2").eval(0.0, &[]).unwrap(), 512.0);
        assert_eq!(p("2^-1").eval(0.0, &[]).unwrap(), 0.5);
        assert_eq!(p("1-2-3").eval(0.0, &[]).unwrap(), -4.0);
        assert_eq!(p("8/4/2").eval(0.0, &[]).unwrap(), 1.0);
        assert_eq!(p("1+2*3").eval(0.0, &[]).unwrap(), 7.0);
        assert_eq!(p("powb(x1, 0.5)").eval(0.0, &[-4.0]).unwrap(), 2.0);
        assert_eq!(p("min(t, x1)").eval(1.0, &[-4.0]).unwrap(), -4.0);
        assert_eq!(p("1.5e-1").eval(0.0, &[]).unwrap(), 0.15);
    }

    #[test]
    fn errors_carry_position() {
        let e = Expr::parse("1 +\n  foo(x1)").unwrap_err();
        assert_eq!((e.line, e.column), (2, 3));
        assert!(e.message.contains("unknown identifier"));
        assert!(Expr::parse("sin(1, 2)")
            .unwrap_err()
            .message
            .contains("argument"));
        assert!(Expr::parse("(1").is_err());
        assert!(Expr::parse("1 2").is_err());
        assert!(Expr::parse("x0").is_err());
        assert!(Expr::parse("").is_err());
        assert!(Expr::parse("1 $ 2").is_err());
    }

    #[test]
    fn deep_nesting_is_rejected_not_overflowed() {
        let src = "(".repeat(10_000) + "1" + &")".repeat(10_000);
        assert!(Expr::parse(&src).is_err());
        let src = "-".repeat(10_000) + "1";
        assert!(Expr::parse(&src).is_err());
    }

    #[test]
    fn evaluation_errors() {
        assert!(p("1/x1").eval(0.0, &[0.0]).is_err());
        assert!(p("exp(1000)").eval(0.0, &[]).is_err());
        assert!(p("(-1)^0.5").eval(0.0, &[]).is_err());
        assert!(p("x3").eval(0.0, &[1.0]).is_err());
    }

    #[test]
    fn classification() {
        assert_eq!(p("2*3").dependence(), Dependence::Constant);
        assert_eq!(p("1+step(t-0.5)").dependence(), Dependence::TimeOnly);
        assert_eq!(p("1+sin(x2)*t").dependence(), Dependence::SpaceTime);
        assert!(p("1+sin(t)+abs(x1)").is_time_smooth());
        assert!(!p("1+step(t-0.5)").is_time_smooth());
        assert!(!p("t^0.5").is_time_smooth());
        assert!(p("t^2").is_time_smooth());
        assert_eq!(p("x3 + x1").spatial_arity(), 3);
    }

    #[test]
    fn print_round_trip() {
        for s in [
            "1 + 0.25*sin(x2)",
            "-x1^-2",
            "powb(x2, 0.3333333333333333)/3",
            "1e-7*t",
            "max(-t, 2)",
        ] {
            let e = p(s);
            assert_eq!(p(&e.to_string()), e, "{s}");
        }
    }
}
