//! A small arithmetic expression language for coordinate fields.
//!
//! Supports `+ - * / ^`, unary minus, parentheses, numeric literals (with
//! exponents), the constants `pi` and `e`, coordinates `x1..xn`, and the
//! functions `sin cos tan exp log sqrt abs tanh cosh sinh atan` plus the
//! two-argument `atan2 min max`. A numeric literal directly followed by a
//! name or parenthesis multiplies (`2pi`, `3(x1+1)`).

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Func1 {
    Sin,
    Cos,
    Tan,
    Exp,
    Log,
    Sqrt,
    Abs,
    Tanh,
    Cosh,
    Sinh,
    Atan,
}

impl Func1 {
    fn apply(self, v: f64) -> f64 {
        match self {
            Func1::Sin => v.sin(),
            Func1::Cos => v.cos(),
            Func1::Tan => v.tan(),
            Func1::Exp => v.exp(),
            Func1::Log => v.ln(),
            Func1::Sqrt => v.sqrt(),
            Func1::Abs => v.abs(),
            Func1::Tanh => v.tanh(),
            Func1::Cosh => v.cosh(),
            Func1::Sinh => v.sinh(),
            Func1::Atan => v.atan(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Func2 {
    Atan2,
    Min,
    Max,
}

impl Func2 {
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Func2::Atan2 => a.atan2(b),
            Func2::Min => a.min(b),
            Func2::Max => a.max(b),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Const(f64),
    Var(usize),
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Call1(Func1, Box<Node>),
    Call2(Func2, Box<Node>, Box<Node>),
}

impl Node {
    fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Node::Const(c) => *c,
            Node::Var(i) => x[*i],
            Node::Neg(a) => -a.eval(x),
            Node::Add(a, b) => a.eval(x) + b.eval(x),
            Node::Sub(a, b) => a.eval(x) - b.eval(x),
            Node::Mul(a, b) => a.eval(x) * b.eval(x),
            Node::Div(a, b) => a.eval(x) / b.eval(x),
            Node::Pow(a, b) => {
                let base = a.eval(x);
                match **b {
                    Node::Const(p) if p == 2.0 => base * base,
                    Node::Const(p) if p.fract() == 0.0 && p.abs() <= 16.0 => base.powi(p as i32),
                    _ => base.powf(b.eval(x)),
                }
            }
            Node::Call1(f, a) => f.apply(a.eval(x)),
            Node::Call2(f, a, b) => f.apply(a.eval(x), b.eval(x)),
        }
    }

    fn is_const(&self) -> bool {
        match self {
            Node::Const(_) => true,
            Node::Var(_) => false,
            Node::Neg(a) | Node::Call1(_, a) => a.is_const(),
            Node::Add(a, b)
            | Node::Sub(a, b)
            | Node::Mul(a, b)
            | Node::Div(a, b)
            | Node::Pow(a, b)
            | Node::Call2(_, a, b) => a.is_const() && b.is_const(),
        }
    }

    fn fold(self) -> Node {
        if self.is_const() {
            return Node::Const(self.eval(&[]));
        }
        match self {
            Node::Neg(a) => Node::Neg(Box::new(a.fold())),
            Node::Add(a, b) => Node::Add(Box::new(a.fold()), Box::new(b.fold())),
            Node::Sub(a, b) => Node::Sub(Box::new(a.fold()), Box::new(b.fold())),
            Node::Mul(a, b) => Node::Mul(Box::new(a.fold()), Box::new(b.fold())),
            Node::Div(a, b) => Node::Div(Box::new(a.fold()), Box::new(b.fold())),
            Node::Pow(a, b) => Node::Pow(Box::new(a.fold()), Box::new(b.fold())),
            Node::Call1(f, a) => Node::Call1(f, Box::new(a.fold())),
            Node::Call2(f, a, b) => Node::Call2(f, Box::new(a.fold()), Box::new(b.fold())),
            other => other,
        }
    }
}

/// A compiled expression in the coordinates `x1..x{dim}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    source: String,
    dim: usize,
    root: Node,
}

impl Expr {
    pub fn parse(source: &str, dim: usize) -> Result<Self> {
        let tokens = tokenize(source)?;
        let mut parser = Parser {
            tokens: &tokens,
            pos: 0,
            dim,
        };
        let root = parser.expr()?;
        if parser.pos != tokens.len() {
            return Err(Error::Expr(format!(
                "unexpected trailing input in `{source}`"
            )));
        }
        Ok(Self {
            source: source.trim().to_string(),
            dim,
            root: root.fold(),
        })
    }

    pub fn constant(value: f64, dim: usize) -> Self {
        Self {
            source: format!("{value:?}"),
            dim,
            root: Node::Const(value),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.root.eval(x)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Value if the expression does not depend on the coordinates.
    pub fn as_constant(&self) -> Option<f64> {
        match self.root {
            Node::Const(c) => Some(c),
            _ => None,
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

/// Evaluates a coordinate-free expression such as `2pi` or `-5`.
pub fn eval_constant(source: &str) -> Result<f64> {
    let e = Expr::parse(source, 0)?;
    e.as_constant()
        .ok_or_else(|| Error::Expr(format!("`{source}` is not a constant")))
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
}

fn tokenize(s: &str) -> Result<Vec<Tok>> {
    let chars: Vec<char> = s.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                // exponent only if followed by digits (optionally signed)
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
            let v = text
                .parse::<f64>()
                .map_err(|_| Error::Expr(format!("bad number `{text}`")))?;
            out.push(Tok::Num(v));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Tok::Ident(chars[start..i].iter().collect()));
        } else {
            let tok = match c {
                '+' | '-' | '*' | '/' | '^' => Tok::Op(c),
                '(' => Tok::LParen,
                ')' => Tok::RParen,
                ',' => Tok::Comma,
                _ => return Err(Error::Expr(format!("unexpected character `{c}`"))),
            };
            out.push(tok);
            i += 1;
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: &'a [Tok],
    pos: usize,
    dim: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expect(&mut self, tok: Tok) -> Result<()> {
        match self.next() {
            Some(t) if t == tok => Ok(()),
            other => Err(Error::Expr(format!("expected {tok:?}, found {other:?}"))),
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        while let Some(Tok::Op(op @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if op == '+' {
                Node::Add(Box::new(lhs), Box::new(rhs))
            } else {
                Node::Sub(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        while let Some(Tok::Op(op @ ('*' | '/'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = if op == '*' {
                Node::Mul(Box::new(lhs), Box::new(rhs))
            } else {
                Node::Div(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node> {
        match self.peek() {
            Some(Tok::Op('-')) => {
                self.pos += 1;
                Ok(Node::Neg(Box::new(self.unary()?)))
            }
            Some(Tok::Op('+')) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if let Some(Tok::Op('^')) = self.peek() {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Node::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        match self.next() {
            Some(Tok::Num(v)) => {
                // implicit multiplication: 2pi, 3x1, 2(x1+1)
                if matches!(self.peek(), Some(Tok::Ident(_)) | Some(Tok::LParen)) {
                    let rhs = self.power()?;
                    return Ok(Node::Mul(Box::new(Node::Const(v)), Box::new(rhs)));
                }
                Ok(Node::Const(v))
            }
            Some(Tok::LParen) => {
                let e = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => self.ident(&name),
            other => Err(Error::Expr(format!("unexpected token {other:?}"))),
        }
    }

    fn ident(&mut self, name: &str) -> Result<Node> {
        if matches!(self.peek(), Some(Tok::LParen)) {
            self.pos += 1;
            let a = self.expr()?;
            let f1 = match name {
                "sin" => Some(Func1::Sin),
                "cos" => Some(Func1::Cos),
                "tan" => Some(Func1::Tan),
                "exp" => Some(Func1::Exp),
                "log" | "ln" => Some(Func1::Log),
                "sqrt" => Some(Func1::Sqrt),
                "abs" => Some(Func1::Abs),
                "tanh" => Some(Func1::Tanh),
                "cosh" => Some(Func1::Cosh),
                "sinh" => Some(Func1::Sinh),
                "atan" => Some(Func1::Atan),
                _ => None,
            };
            if let Some(f) = f1 {
                self.expect(Tok::RParen)?;
                return Ok(Node::Call1(f, Box::new(a)));
            }
            let f2 = match name {
                "atan2" => Func2::Atan2,
                "min" => Func2::Min,
                "max" => Func2::Max,
                _ => return Err(Error::Expr(format!("unknown function `{name}`"))),
            };
            self.expect(Tok::Comma)?;
            let b = self.expr()?;
            self.expect(Tok::RParen)?;
            return Ok(Node::Call2(f2, Box::new(a), Box::new(b)));
        }
        match name {
            "pi" => Ok(Node::Const(std::f64::consts::PI)),
            "e" => Ok(Node::Const(std::f64::consts::E)),
            _ => {
                if let Some(idx) = name.strip_prefix('x').and_then(|s| s.parse::<usize>().ok()) {
                    if idx >= 1 && idx <= self.dim {
                        return Ok(Node::Var(idx - 1));
                    }
                    return Err(Error::Expr(format!(
                        "coordinate `{name}` out of range for dimension {}",
                        self.dim
                    )));
                }
                Err(Error::Expr(format!("unknown name `{name}`")))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn arithmetic_and_precedence() {
        let e = Expr::parse("1 + 2*3^2 - -4/2", 0).unwrap();
        assert_eq!(e.eval(&[]), 1.0 + 18.0 + 2.0);
        let e = Expr::parse("-x1^2", 1).unwrap();
        assert_eq!(e.eval(&[3.0]), -9.0);
        let e = Expr::parse("2^3^2", 0).unwrap();
        assert_eq!(e.eval(&[]), 512.0);
    }

    #[test]
    fn implicit_multiplication_and_constants() {
        assert_eq!(eval_constant("2pi").unwrap(), 2.0 * PI);
        let e = Expr::parse("3x2 + 2(x1 + 1)", 2).unwrap();
        assert_eq!(e.eval(&[1.0, 2.0]), 10.0);
        assert_eq!(eval_constant("1e-3").unwrap(), 1e-3);
        assert_eq!(eval_constant("2.5E+2").unwrap(), 250.0);
    }

    #[test]
    fn functions() {
        let e = Expr::parse("sin(x1)^2 + cos(x1)^2", 1).unwrap();
        assert!((e.eval(&[0.7]) - 1.0).abs() < 1e-15);
        let e = Expr::parse("atan2(x2, x1)", 2).unwrap();
        assert!((e.eval(&[0.0, 1.0]) - PI / 2.0).abs() < 1e-15);
        let e = Expr::parse("exp(x1^2 + x2^2)", 2).unwrap();
        assert!((e.eval(&[1.0, 1.0]) - 2f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(Expr::parse("x3", 2).is_err());
        assert!(Expr::parse("foo(1)", 1).is_err());
        assert!(Expr::parse("1 +", 1).is_err());
        assert!(Expr::parse("(1", 1).is_err());
        assert!(eval_constant("x1").is_err());
    }

    #[test]
    fn constant_folding() {
        let e = Expr::parse("2*pi/4", 2).unwrap();
        assert_eq!(e.as_constant(), Some(PI / 2.0));
        assert_eq!(e.source(), "2*pi/4");
    }
}
