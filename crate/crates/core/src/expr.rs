//! Tiny expression grammar for coefficient fields given in config files.
//!
//! ```text
//! expr   := term  (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' unary)?                 right-associative
//! atom   := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! Variables: `x`/`x1`, `x2` (alias `y`), `v`/`v1`.., `z`/`z1`.., `t`, and
//! the constant `pi`.  Functions: `sin cos exp tanh abs sqrt` and binary
//! `min max`.  Expressions are compiled once and bound against the problem
//! dimensions, then evaluated allocation-free.

use crate::error::{BhjbError, Result};

/// Evaluation context: one spatial point, one control point, one z-value.
#[derive(Debug, Clone, Copy)]
pub struct EvalCtx<'a> {
    pub x: &'a [f64],
    pub v: &'a [f64],
    pub z: &'a [f64],
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Var {
    X(usize),
    V(usize),
    Z(usize),
    T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fn1 {
    Sin,
    Cos,
    Exp,
    Tanh,
    Abs,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fn2 {
    Min,
    Max,
}

#[derive(Debug, Clone)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call1(Fn1, Box<Expr>),
    Call2(Fn2, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn eval(&self, ctx: &EvalCtx) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(Var::X(i)) => ctx.x[*i],
            Expr::Var(Var::V(i)) => ctx.v[*i],
            Expr::Var(Var::Z(i)) => ctx.z[*i],
            Expr::Var(Var::T) => ctx.t,
            Expr::Neg(a) => -a.eval(ctx),
            Expr::Add(a, b) => a.eval(ctx) + b.eval(ctx),
            Expr::Sub(a, b) => a.eval(ctx) - b.eval(ctx),
            Expr::Mul(a, b) => a.eval(ctx) * b.eval(ctx),
            Expr::Div(a, b) => a.eval(ctx) / b.eval(ctx),
            Expr::Pow(a, b) => a.eval(ctx).powf(b.eval(ctx)),
            Expr::Call1(f, a) => {
                let x = a.eval(ctx);
                match f {
                    Fn1::Sin => x.sin(),
                    Fn1::Cos => x.cos(),
                    Fn1::Exp => x.exp(),
                    Fn1::Tanh => x.tanh(),
                    Fn1::Abs => x.abs(),
                    Fn1::Sqrt => x.sqrt(),
                }
            }
            Expr::Call2(f, a, b) => {
                let (x, y) = (a.eval(ctx), b.eval(ctx));
                match f {
                    Fn2::Min => x.min(y),
                    Fn2::Max => x.max(y),
                }
            }
        }
    }

    /// Checks every variable index against the given dimensions.
    pub fn bind(&self, n: usize, m: usize, d: usize) -> Result<()> {
        let check = |kind: &str, i: usize, dim: usize| {
            if i < dim {
                Ok(())
            } else {
                Err(BhjbError::Config(format!(
                    "expression variable {kind}{} exceeds dimension {dim}",
                    i + 1
                )))
            }
        };
        match self {
            Expr::Const(_) | Expr::Var(Var::T) => Ok(()),
            Expr::Var(Var::X(i)) => check("x", *i, n),
            Expr::Var(Var::V(i)) => check("v", *i, m),
            Expr::Var(Var::Z(i)) => check("z", *i, d),
            Expr::Neg(a) | Expr::Call1(_, a) => a.bind(n, m, d),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Pow(a, b)
            | Expr::Call2(_, a, b) => {
                a.bind(n, m, d)?;
                b.bind(n, m, d)
            }
        }
    }
}

pub fn parse(src: &str) -> Result<Expr> {
    let tokens = lex(src)?;
    let mut p = Parser { tokens, pos: 0, src };
    let e = p.expr()?;
    if p.pos != p.tokens.len() {
        return Err(p.err("trailing input"));
    }
    Ok(e)
}

/// Parses and validates variable indices against (n, m, d) in one call.
pub fn parse_bound(src: &str, n: usize, m: usize, d: usize) -> Result<Expr> {
    let e = parse(src)?;
    e.bind(n, m, d)?;
    Ok(e)
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
}

fn lex(src: &str) -> Result<Vec<Tok>> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                out.push(Tok::Plus);
                i += 1;
            }
            '-' => {
                out.push(Tok::Minus);
                i += 1;
            }
            '*' => {
                out.push(Tok::Star);
                i += 1;
            }
            '/' => {
                out.push(Tok::Slash);
                i += 1;
            }
            '^' => {
                out.push(Tok::Caret);
                i += 1;
            }
            '(' => {
                out.push(Tok::LParen);
                i += 1;
            }
            ')' => {
                out.push(Tok::RParen);
                i += 1;
            }
            ',' => {
                out.push(Tok::Comma);
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len() && matches!(bytes[i] as char, '0'..='9' | '.') {
                    i += 1;
                }
                // exponent part: e or E followed by optional sign and digits
                if i < bytes.len()
                    && matches!(bytes[i] as char, 'e' | 'E')
                    && i + 1 < bytes.len()
                    && matches!(bytes[i + 1] as char, '0'..='9' | '+' | '-')
                {
                    i += 2;
                    while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                        i += 1;
                    }
                }
                let text = &src[start..i];
                let val: f64 = text
                    .parse()
                    .map_err(|_| BhjbError::Config(format!("expression: bad number `{text}`")))?;
                out.push(Tok::Num(val));
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let start = i;
                while i < bytes.len()
                    && matches!(bytes[i] as char, 'a'..='z' | 'A'..='Z' | '0'..='9' | '_')
                {
                    i += 1;
                }
                out.push(Tok::Ident(src[start..i].to_string()));
            }
            _ => {
                return Err(BhjbError::Config(format!(
                    "expression: unexpected character `{c}` in `{src}`"
                )))
            }
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<Tok>,
    pos: usize,
    src: &'a str,
}

impl<'a> Parser<'a> {
    fn err(&self, msg: &str) -> BhjbError {
        BhjbError::Config(format!("expression `{}`: {msg}", self.src))
    }

    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.tokens.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, t: Tok, what: &str) -> Result<()> {
        if self.peek() == Some(&t) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(&format!("expected {what}")))
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.pos += 1;
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(Tok::Minus) => {
                    self.pos += 1;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.pos += 1;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Some(Tok::Slash) => {
                    self.pos += 1;
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.peek() == Some(&Tok::Minus) {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if self.peek() == Some(&Tok::Caret) {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.next() {
            Some(Tok::Num(v)) => Ok(Expr::Const(v)),
            Some(Tok::LParen) => {
                let e = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                if self.peek() == Some(&Tok::LParen) {
                    self.pos += 1;
                    let mut args = vec![self.expr()?];
                    while self.peek() == Some(&Tok::Comma) {
                        self.pos += 1;
                        args.push(self.expr()?);
                    }
                    self.expect(Tok::RParen, "`)`")?;
                    self.call(&name, args)
                } else {
                    self.variable(&name)
                }
            }
            _ => Err(self.err("expected a value")),
        }
    }

    fn call(&self, name: &str, mut args: Vec<Expr>) -> Result<Expr> {
        let f1 = match name {
            "sin" => Some(Fn1::Sin),
            "cos" => Some(Fn1::Cos),
            "exp" => Some(Fn1::Exp),
            "tanh" => Some(Fn1::Tanh),
            "abs" => Some(Fn1::Abs),
            "sqrt" => Some(Fn1::Sqrt),
            _ => None,
        };
        if let Some(f) = f1 {
            if args.len() != 1 {
                return Err(self.err(&format!("{name} takes one argument")));
            }
            return Ok(Expr::Call1(f, Box::new(args.pop().unwrap())));
        }
        let f2 = match name {
            "min" => Some(Fn2::Min),
            "max" => Some(Fn2::Max),
            _ => None,
        };
        if let Some(f) = f2 {
            if args.len() != 2 {
                return Err(self.err(&format!("{name} takes two arguments")));
            }
            let b = args.pop().unwrap();
            let a = args.pop().unwrap();
            return Ok(Expr::Call2(f, Box::new(a), Box::new(b)));
        }
        Err(self.err(&format!("unknown function `{name}`")))
    }

    fn variable(&self, name: &str) -> Result<Expr> {
        let indexed = |prefix: &str| -> Option<usize> {
            name.strip_prefix(prefix)
                .and_then(|s| s.parse::<usize>().ok())
                .filter(|&i| i >= 1)
                .map(|i| i - 1)
        };
        let var = match name {
            "x" => Some(Var::X(0)),
            "y" => Some(Var::X(1)),
            "v" => Some(Var::V(0)),
            "z" => Some(Var::Z(0)),
            "t" => Some(Var::T),
            "pi" => return Ok(Expr::Const(std::f64::consts::PI)),
            _ => None,
        };
        if let Some(v) = var {
            return Ok(Expr::Var(v));
        }
        for (prefix, make) in [
            ("x", (|i| Var::X(i)) as fn(usize) -> Var),
            ("v", |i| Var::V(i)),
            ("z", |i| Var::Z(i)),
        ] {
            if let Some(i) = indexed(prefix) {
                return Ok(Expr::Var(make(i)));
            }
        }
        Err(self.err(&format!("unknown identifier `{name}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval1(src: &str, x: f64, v: f64, z: f64, t: f64) -> f64 {
        let e = parse_bound(src, 1, 1, 1).unwrap();
        e.eval(&EvalCtx { x: &[x], v: &[v], z: &[z], t })
    }

    #[test]
    fn arithmetic_and_precedence() {
        assert_eq!(eval1("1 + 2 * 3", 0.0, 0.0, 0.0, 0.0), 7.0);
        assert_eq!(eval1("(1 + 2) * 3", 0.0, 0.0, 0.0, 0.0), 9.0);
        assert_eq!(eval1("2 ^ 3 ^ 2", 0.0, 0.0, 0.0, 0.0), 512.0);
        assert_eq!(eval1("-x^2", 3.0, 0.0, 0.0, 0.0), -9.0);
        assert_eq!(eval1("6 / 2 / 3", 0.0, 0.0, 0.0, 0.0), 1.0);
    }

    #[test]
    fn variables_and_functions() {
        let got = eval1("sin(pi * x) * (1 + 0.5 * v) + z - t", 0.5, 2.0, 3.0, 1.0);
        assert!((got - (1.0 * 2.0 + 3.0 - 1.0)).abs() < 1e-12);
        assert_eq!(eval1("min(v, 0) + max(v, 0)", 0.0, -2.5, 0.0, 0.0), -2.5);
        assert_eq!(eval1("abs(-3) + sqrt(4)", 0.0, 0.0, 0.0, 0.0), 5.0);
        assert!((eval1("1.5e-2 + 1e2", 0.0, 0.0, 0.0, 0.0) - 100.015).abs() < 1e-12);
    }

    #[test]
    fn aliases_map_to_axis_indices() {
        let e = parse_bound("y + x2", 2, 1, 1).unwrap();
        let got = e.eval(&EvalCtx { x: &[1.0, 5.0], v: &[0.0], z: &[0.0], t: 0.0 });
        assert_eq!(got, 10.0);
    }

    #[test]
    fn bind_rejects_out_of_range_indices() {
        assert!(parse_bound("x2", 1, 1, 1).is_err());
        assert!(parse_bound("v3", 1, 2, 1).is_err());
        assert!(parse_bound("z1", 1, 1, 1).is_ok());
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(parse("1 +").is_err());
        assert!(parse("foo(1)").is_err());
        assert!(parse("min(1)").is_err());
        assert!(parse("1 2").is_err());
        assert!(parse("$").is_err());
    }
}
