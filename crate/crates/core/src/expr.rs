//! Minimal arithmetic expression grammar for configuration files.
//!
//! Custom drivers, barriers and payoffs are written in a closed grammar with
//! the binary operators `+ − * / ^`, unary minus, the functions `abs`, `exp`,
//! `log`, `min`, `max`, numeric literals and the named symbols
//!
//! * `t` — current time,
//! * `B` — Brownian value of the node,
//! * `y` — candidate solution value (drivers only),
//! * `z` — martingale-representation coefficient (f-drivers only),
//! * `S` — stock value (market payoffs only).
//!
//! There is no user-defined recursion and no other name resolution; which
//! symbols are actually bound is decided by the evaluation context, so a
//! barrier expression that mentions `y` fails with a symbol error rather than
//! silently reading garbage. Numeric domain issues (division by zero,
//! `log` of a nonpositive value) follow IEEE semantics and are caught later by
//! the finiteness checks of the problem validators.
//!
//! Precedence, tightest first: `^` (right-associative), unary minus,
//! `*` `/`, `+` `-`.

use crate::error::Error;
use crate::Result;
use std::fmt;

/// Named symbols the grammar can reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Symbol {
    /// Current time `t`.
    T,
    /// Brownian node value `B`.
    B,
    /// Candidate solution value `y`.
    Y,
    /// Martingale coefficient `z`.
    Z,
    /// Stock value `S`.
    S,
}

impl Symbol {
    fn name(self) -> &'static str {
        match self {
            Symbol::T => "t",
            Symbol::B => "B",
            Symbol::Y => "y",
            Symbol::Z => "z",
            Symbol::S => "S",
        }
    }
}

/// Values bound to the symbols during evaluation; unbound symbols error.
#[derive(Debug, Clone, Copy, Default)]
pub struct Bindings {
    pub t: Option<f64>,
    pub b: Option<f64>,
    pub y: Option<f64>,
    pub z: Option<f64>,
    pub s: Option<f64>,
}

impl Bindings {
    /// Binds the node coordinates `t`, `B`.
    pub fn node(t: f64, b: f64) -> Self {
        Bindings { t: Some(t), b: Some(b), ..Default::default() }
    }

    /// Additionally binds `y`.
    pub fn with_y(mut self, y: f64) -> Self {
        self.y = Some(y);
        self
    }

    /// Additionally binds `z`.
    pub fn with_z(mut self, z: f64) -> Self {
        self.z = Some(z);
        self
    }

    /// Additionally binds `S`.
    pub fn with_s(mut self, s: f64) -> Self {
        self.s = Some(s);
        self
    }

    fn get(&self, sym: Symbol) -> Result<f64> {
        let v = match sym {
            Symbol::T => self.t,
            Symbol::B => self.b,
            Symbol::Y => self.y,
            Symbol::Z => self.z,
            Symbol::S => self.s,
        };
        v.ok_or_else(|| Error::ExprSymbol { symbol: sym.name().to_string() })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Ast {
    Num(f64),
    Sym(Symbol),
    Neg(Box<Ast>),
    Add(Box<Ast>, Box<Ast>),
    Sub(Box<Ast>, Box<Ast>),
    Mul(Box<Ast>, Box<Ast>),
    Div(Box<Ast>, Box<Ast>),
    Pow(Box<Ast>, Box<Ast>),
    Abs(Box<Ast>),
    Exp(Box<Ast>),
    Log(Box<Ast>),
    Min(Box<Ast>, Box<Ast>),
    Max(Box<Ast>, Box<Ast>),
}

impl Ast {
    fn eval(&self, env: &Bindings) -> Result<f64> {
        Ok(match self {
            Ast::Num(v) => *v,
            Ast::Sym(s) => env.get(*s)?,
            Ast::Neg(a) => -a.eval(env)?,
            Ast::Add(a, b) => a.eval(env)? + b.eval(env)?,
            Ast::Sub(a, b) => a.eval(env)? - b.eval(env)?,
            Ast::Mul(a, b) => a.eval(env)? * b.eval(env)?,
            Ast::Div(a, b) => a.eval(env)? / b.eval(env)?,
            Ast::Pow(a, b) => a.eval(env)?.powf(b.eval(env)?),
            Ast::Abs(a) => a.eval(env)?.abs(),
            Ast::Exp(a) => a.eval(env)?.exp(),
            Ast::Log(a) => a.eval(env)?.ln(),
            Ast::Min(a, b) => a.eval(env)?.min(b.eval(env)?),
            Ast::Max(a, b) => a.eval(env)?.max(b.eval(env)?),
        })
    }

    fn symbols(&self, out: &mut Vec<Symbol>) {
        match self {
            Ast::Num(_) => {}
            Ast::Sym(s) => {
                if !out.contains(s) {
                    out.push(*s);
                }
            }
            Ast::Neg(a) | Ast::Abs(a) | Ast::Exp(a) | Ast::Log(a) => a.symbols(out),
            Ast::Add(a, b)
            | Ast::Sub(a, b)
            | Ast::Mul(a, b)
            | Ast::Div(a, b)
            | Ast::Pow(a, b)
            | Ast::Min(a, b)
            | Ast::Max(a, b) => {
                a.symbols(out);
                b.symbols(out);
            }
        }
    }
}

/// A parsed expression; keeps its source text for display and serialization.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    src: String,
    ast: Ast,
}

impl Expr {
    /// Parses an expression from source text.
    pub fn parse(src: &str) -> Result<Self> {
        let mut p = Parser { bytes: src.as_bytes(), pos: 0 };
        p.skip_ws();
        let ast = p.expr()?;
        p.skip_ws();
        if p.pos != p.bytes.len() {
            return Err(Error::ExprParse {
                position: p.pos,
                reason: format!("unexpected trailing input `{}`", &src[p.pos..]),
            });
        }
        Ok(Expr { src: src.to_string(), ast })
    }

    /// Evaluates under the given symbol bindings.
    pub fn eval(&self, env: &Bindings) -> Result<f64> {
        self.ast.eval(env)
    }

    /// The distinct symbols the expression references.
    pub fn symbols(&self) -> Vec<Symbol> {
        let mut out = Vec::new();
        self.ast.symbols(&mut out);
        out
    }

    /// Errors unless every referenced symbol is in `allowed`; used by the
    /// configuration loader to reject e.g. a barrier that mentions `z`.
    pub fn require_only(&self, allowed: &[Symbol], context: &str) -> Result<()> {
        for sym in self.symbols() {
            if !allowed.contains(&sym) {
                return Err(Error::config(format!(
                    "expression `{}` for {} references symbol `{}`, which is not available there",
                    self.src,
                    context,
                    sym.name()
                )));
            }
        }
        Ok(())
    }

    /// Source text.
    pub fn src(&self) -> &str {
        &self.src
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.src)
    }
}

impl serde::Serialize for Expr {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.src)
    }
}

impl<'de> serde::Deserialize<'de> for Expr {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let src = String::deserialize(deserializer)?;
        Expr::parse(&src).map_err(serde::de::Error::custom)
    }
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn eat(&mut self, byte: u8) -> bool {
        if self.peek() == Some(byte) {
            self.pos += 1;
            self.skip_ws();
            true
        } else {
            false
        }
    }

    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::ExprParse { position: self.pos, reason: reason.into() }
    }

    fn expr(&mut self) -> Result<Ast> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                lhs = Ast::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat(b'-') {
                lhs = Ast::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Ast> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat(b'*') {
                lhs = Ast::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat(b'/') {
                lhs = Ast::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Ast> {
        if self.eat(b'-') {
            Ok(Ast::Neg(Box::new(self.unary()?)))
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Ast> {
        let base = self.primary()?;
        if self.eat(b'^') {
            // Right-associative exponent; unary minus allowed in the exponent.
            let exponent = self.unary()?;
            Ok(Ast::Pow(Box::new(base), Box::new(exponent)))
        } else {
            Ok(base)
        }
    }

    fn primary(&mut self) -> Result<Ast> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                self.skip_ws();
                let inner = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.fail("expected `)`"));
                }
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.ident(),
            Some(c) => Err(self.fail(format!("unexpected character `{}`", c as char))),
            None => Err(self.fail("unexpected end of expression")),
        }
    }

    fn number(&mut self) -> Result<Ast> {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit() || c == b'.') {
            self.pos += 1;
        }
        // Exponent part of a float literal, e.g. 1e-3.
        if matches!(self.peek(), Some(b'e') | Some(b'E')) {
            let mark = self.pos;
            self.pos += 1;
            if matches!(self.peek(), Some(b'+') | Some(b'-')) {
                self.pos += 1;
            }
            if matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
                while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
                    self.pos += 1;
                }
            } else {
                self.pos = mark; // `e` belonged to something else; not a valid exponent
            }
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii slice");
        let value: f64 = text
            .parse()
            .map_err(|_| Error::ExprParse { position: start, reason: format!("bad number `{text}`") })?;
        self.skip_ws();
        Ok(Ast::Num(value))
    }

    fn ident(&mut self) -> Result<Ast> {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_alphabetic()) {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii slice");
        let name_owned = name.to_string();
        self.skip_ws();
        match name_owned.as_str() {
            "t" => Ok(Ast::Sym(Symbol::T)),
            "B" => Ok(Ast::Sym(Symbol::B)),
            "y" => Ok(Ast::Sym(Symbol::Y)),
            "z" => Ok(Ast::Sym(Symbol::Z)),
            "S" => Ok(Ast::Sym(Symbol::S)),
            "abs" => Ok(Ast::Abs(Box::new(self.call_one(&name_owned)?))),
            "exp" => Ok(Ast::Exp(Box::new(self.call_one(&name_owned)?))),
            "log" => Ok(Ast::Log(Box::new(self.call_one(&name_owned)?))),
            "min" => {
                let (a, b) = self.call_two(&name_owned)?;
                Ok(Ast::Min(Box::new(a), Box::new(b)))
            }
            "max" => {
                let (a, b) = self.call_two(&name_owned)?;
                Ok(Ast::Max(Box::new(a), Box::new(b)))
            }
            other => Err(Error::ExprParse {
                position: start,
                reason: format!("unknown name `{other}` (symbols: t, B, y, z, S; functions: abs, exp, log, min, max)"),
            }),
        }
    }

    fn call_one(&mut self, name: &str) -> Result<Ast> {
        if !self.eat(b'(') {
            return Err(self.fail(format!("`{name}` needs parenthesized arguments")));
        }
        let arg = self.expr()?;
        if !self.eat(b')') {
            return Err(self.fail(format!("`{name}` takes exactly one argument")));
        }
        Ok(arg)
    }

    fn call_two(&mut self, name: &str) -> Result<(Ast, Ast)> {
        if !self.eat(b'(') {
            return Err(self.fail(format!("`{name}` needs parenthesized arguments")));
        }
        let a = self.expr()?;
        if !self.eat(b',') {
            return Err(self.fail(format!("`{name}` takes exactly two arguments")));
        }
        let b = self.expr()?;
        if !self.eat(b')') {
            return Err(self.fail(format!("`{name}` takes exactly two arguments")));
        }
        Ok((a, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn eval(src: &str, env: &Bindings) -> f64 {
        Expr::parse(src).unwrap().eval(env).unwrap()
    }

    #[test]
    fn precedence_and_associativity() {
        let env = Bindings::default();
        assert_relative_eq!(eval("1 + 2 * 3", &env), 7.0);
        assert_relative_eq!(eval("(1 + 2) * 3", &env), 9.0);
        assert_relative_eq!(eval("2 ^ 3 ^ 2", &env), 512.0); // right-assoc
        assert_relative_eq!(eval("-2 ^ 2", &env), -4.0); // unary minus after ^
        assert_relative_eq!(eval("2 ^ -1", &env), 0.5);
        assert_relative_eq!(eval("10 - 4 - 3", &env), 3.0); // left-assoc
        assert_relative_eq!(eval("8 / 4 / 2", &env), 1.0);
    }

    #[test]
    fn functions_and_symbols() {
        let env = Bindings::node(0.25, -1.5).with_y(2.0).with_z(0.5).with_s(100.0);
        assert_relative_eq!(eval("abs(B)", &env), 1.5);
        assert_relative_eq!(eval("exp(t)", &env), 0.25_f64.exp());
        assert_relative_eq!(eval("log(exp(y))", &env), 2.0, epsilon = 1e-15);
        assert_relative_eq!(eval("min(1, max(-1, 0.5*B))", &env), -0.75);
        assert_relative_eq!(eval("max(100 - S, 0) + 5", &env), 5.0);
        assert_relative_eq!(eval("-(0.5)*z^2", &env), -0.125);
        assert_relative_eq!(eval("1e-3 + 2.5e2", &env), 250.001);
    }

    #[test]
    fn unbound_symbol_is_an_eval_error() {
        let expr = Expr::parse("y + 1").unwrap();
        let err = expr.eval(&Bindings::node(0.0, 0.0)).unwrap_err();
        assert!(matches!(err, Error::ExprSymbol { ref symbol } if symbol == "y"));
    }

    #[test]
    fn symbol_restriction_rejects_out_of_context_names() {
        let expr = Expr::parse("z * B").unwrap();
        assert!(expr.require_only(&[Symbol::T, Symbol::B], "barrier L").is_err());
        assert!(expr.require_only(&[Symbol::B, Symbol::Z], "driver f").is_ok());
    }

    #[test]
    fn parse_errors_carry_position() {
        for bad in ["1 +", "sin(1)", "min(1)", "(1", "1 2", "q", "abs 3"] {
            let err = Expr::parse(bad).unwrap_err();
            assert!(matches!(err, Error::ExprParse { .. }), "`{bad}` gave {err:?}");
        }
    }

    #[test]
    fn serde_roundtrip_preserves_source() {
        let expr = Expr::parse("max(100 - S, 0) + 5").unwrap();
        let json = serde_json::to_string(&expr).unwrap();
        assert_eq!(json, "\"max(100 - S, 0) + 5\"");
        let back: Expr = serde_json::from_str(&json).unwrap();
        assert_eq!(back, expr);
    }

    #[test]
    fn symbols_are_collected_once() {
        let expr = Expr::parse("B + B*t + z").unwrap();
        let syms = expr.symbols();
        assert_eq!(syms.len(), 3);
        assert!(syms.contains(&Symbol::B) && syms.contains(&Symbol::T) && syms.contains(&Symbol::Z));
    }
}
