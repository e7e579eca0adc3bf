//! Polynomial expressions in the physical parameters.
//!
//! Grammar (whitespace ignored):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor ('*' factor)*
//! factor := ('-' | '+') factor | atom ('^' uint)?
//! atom   := number | var | '(' expr ')'
//! var    := 't' uint | 'theta' uint
//! ```
//!
//! Expressions are evaluated symbolically after substituting each
//! parameter by its germ image `θ_k = o_k + s_k ξ_k`, which gives an exact
//! polynomial in the germ. Expansion coefficients follow from the exact
//! monomial transform of the basis.

use std::collections::BTreeMap;

use polychaos::{MultiIndex, TotalDegreeBasis};

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(usize),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
    Pow(Box<Expr>, u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub position: usize,
    pub message: String,
}

impl std::fmt::Display for ParseError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} at offset {}", self.message, self.position)
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError {
            position: self.pos,
            message: message.into(),
        })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn uint(&mut self) -> Result<u64, ParseError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return self.err("expected an integer");
        }
        std::str::from_utf8(&self.src[start..self.pos])
            .unwrap()
            .parse()
            .or_else(|_| self.err("integer out of range"))
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        while let Some(c @ (b'+' | b'-')) = self.peek() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if c == b'+' {
                Expr::Add(Box::new(lhs), Box::new(rhs))
            } else {
                Expr::Sub(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.factor()?;
        while self.peek() == Some(b'*') {
            self.pos += 1;
            let rhs = self.factor()?;
            lhs = Expr::Mul(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                Ok(Expr::Neg(Box::new(self.factor()?)))
            }
            Some(b'+') => {
                self.pos += 1;
                self.factor()
            }
            _ => {
                let base = self.atom()?;
                if self.peek() == Some(b'^') {
                    self.pos += 1;
                    let e = self.uint()?;
                    let e = u32::try_from(e).or_else(|_| self.err("exponent too large"))?;
                    Ok(Expr::Pow(Box::new(base), e))
                } else {
                    Ok(base)
                }
            }
        }
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek() != Some(b')') {
                    return self.err("expected ')'");
                }
                self.pos += 1;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => {
                let start = self.pos;
                while self.pos < self.src.len() {
                    let c = self.src[self.pos];
                    let exp_sign =
                        (c == b'-' || c == b'+') && self.pos > start && matches!(self.src[self.pos - 1], b'e' | b'E');
                    if c.is_ascii_digit() || c == b'.' || c == b'e' || c == b'E' || exp_sign {
                        self.pos += 1;
                    } else {
                        break;
                    }
                }
                let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
                match text.parse::<f64>() {
                    Ok(v) => Ok(Expr::Const(v)),
                    Err(_) => {
                        self.pos = start;
                        self.err(format!("invalid number '{text}'"))
                    }
                }
            }
            Some(b't') => {
                let rest = &self.src[self.pos..];
                self.pos += if rest.starts_with(b"theta") { 5 } else { 1 };
                if !self.src.get(self.pos).is_some_and(|c| c.is_ascii_digit()) {
                    return self.err("expected parameter index after 't'");
                }
                let k = self.uint()?;
                Ok(Expr::Var(k as usize))
            }
            Some(c) => self.err(format!("unexpected character '{}'", c as char)),
            None => self.err("unexpected end of expression"),
        }
    }
}

pub fn parse(src: &str) -> Result<Expr, ParseError> {
    let mut p = Parser {
        src: src.as_bytes(),
        pos: 0,
    };
    let e = p.expr()?;
    if p.peek().is_some() {
        return p.err("trailing input");
    }
    Ok(e)
}

impl Expr {
    /// Largest parameter index referenced, if any.
    pub fn max_var(&self) -> Option<usize> {
        match self {
            Expr::Const(_) => None,
            Expr::Var(k) => Some(*k),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) => a.max_var().max(b.max_var()),
            Expr::Neg(a) | Expr::Pow(a, _) => a.max_var(),
        }
    }

    /// Polynomial degree, ignoring cancellation.
    pub fn degree(&self) -> usize {
        match self {
            Expr::Const(_) => 0,
            Expr::Var(_) => 1,
            Expr::Add(a, b) | Expr::Sub(a, b) => a.degree().max(b.degree()),
            Expr::Mul(a, b) => a.degree() + b.degree(),
            Expr::Neg(a) => a.degree(),
            Expr::Pow(a, e) => a.degree() * *e as usize,
        }
    }

    pub fn eval(&self, theta: &[f64]) -> f64 {
        match self {
            Expr::Const(v) => *v,
            Expr::Var(k) => theta[*k],
            Expr::Add(a, b) => a.eval(theta) + b.eval(theta),
            Expr::Sub(a, b) => a.eval(theta) - b.eval(theta),
            Expr::Mul(a, b) => a.eval(theta) * b.eval(theta),
            Expr::Neg(a) => -a.eval(theta),
            Expr::Pow(a, e) => a.eval(theta).powi(*e as i32),
        }
    }
}

/// Sparse polynomial keyed by exponent vectors.
type Poly = BTreeMap<Vec<usize>, f64>;

fn constant(n: usize, v: f64) -> Poly {
    Poly::from([(vec![0; n], v)])
}

fn add(a: &Poly, b: &Poly, sign: f64) -> Poly {
    let mut out = a.clone();
    for (k, v) in b {
        *out.entry(k.clone()).or_insert(0.0) += sign * v;
    }
    out
}

fn mul(a: &Poly, b: &Poly) -> Poly {
    let mut out = Poly::new();
    for (ka, va) in a {
        for (kb, vb) in b {
            let k: Vec<usize> = ka.iter().zip(kb).map(|(x, y)| x + y).collect();
            *out.entry(k).or_insert(0.0) += va * vb;
        }
    }
    out
}

/// Expansion of `expr` in the germ variables given `θ_k = offsets[k] + scales[k]·ξ_k`.
fn germ_polynomial(expr: &Expr, offsets: &[f64], scales: &[f64]) -> Poly {
    let n = offsets.len();
    match expr {
        Expr::Const(v) => constant(n, *v),
        Expr::Var(k) => {
            let mut e = vec![0; n];
            e[*k] = 1;
            Poly::from([(vec![0; n], offsets[*k]), (e, scales[*k])])
        }
        Expr::Add(a, b) => add(
            &germ_polynomial(a, offsets, scales),
            &germ_polynomial(b, offsets, scales),
            1.0,
        ),
        Expr::Sub(a, b) => add(
            &germ_polynomial(a, offsets, scales),
            &germ_polynomial(b, offsets, scales),
            -1.0,
        ),
        Expr::Mul(a, b) => mul(
            &germ_polynomial(a, offsets, scales),
            &germ_polynomial(b, offsets, scales),
        ),
        Expr::Neg(a) => add(&constant(n, 0.0), &germ_polynomial(a, offsets, scales), -1.0),
        Expr::Pow(a, e) => {
            let base = germ_polynomial(a, offsets, scales);
            (0..*e).fold(constant(n, 1.0), |acc, _| mul(&acc, &base))
        }
    }
}

/// Exact expansion coefficients of `expr` in `basis`.
pub fn to_basis(expr: &Expr, basis: &TotalDegreeBasis) -> polychaos::Result<Vec<f64>> {
    let (offsets, scales): (Vec<f64>, Vec<f64>) = basis.measures().iter().map(|m| m.germ_affine()).unzip();
    if let Some(k) = expr.max_var() {
        if k >= offsets.len() {
            return Err(polychaos::Error::DimensionMismatch {
                what: "parameter index",
                expected: offsets.len(),
                found: k + 1,
            });
        }
    }
    let poly = germ_polynomial(expr, &offsets, &scales);
    let mut out = vec![0.0; basis.len()];
    let mut memo: BTreeMap<Vec<usize>, Vec<f64>> = BTreeMap::new();
    for (k, v) in poly {
        if v == 0.0 {
            continue;
        }
        if k.iter().all(|&e| e == 0) {
            out[0] += v;
            continue;
        }
        let c = match memo.get(&k) {
            Some(c) => c.clone(),
            None => {
                let c = basis.monomial_to_basis(&MultiIndex(k.clone()))?;
                memo.insert(k, c.clone());
                c
            }
        };
        for (o, ci) in out.iter_mut().zip(c) {
            *o += v * ci;
        }
    }
    Ok(out)
}
