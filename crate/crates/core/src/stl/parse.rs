//! Recursive-descent parser for the formula text syntax.
//!
//! ```text
//! formula  := or
//! or       := and ('|' and)*
//! and      := until ('&' until)*
//! until    := unary ('U' interval unary)?
//! unary    := '!' unary | 'G' interval unary | 'F' interval unary
//!           | '(' formula ')' | predicate
//! predicate:= affine ('>=' | '<=' | '>' | '<') affine
//! affine   := term (('+' | '-') term)*
//! term     := factor (('*' | '/') factor)*
//! factor   := ('-' | '+') factor | number | 'x'<index> | '(' affine ')'
//! ```
//!
//! Strict comparisons are read as non-strict.

use super::{Interval, LinearPredicate, StlError, StlFormula};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Plus,
    Minus,
    Star,
    Slash,
    Amp,
    Pipe,
    Bang,
    Ge,
    Le,
    Gt,
    Lt,
    Eof,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    column: usize,
}

fn syntax(line: usize, column: usize, message: impl Into<String>) -> StlError {
    StlError::Syntax {
        line,
        column,
        message: message.into(),
    }
}

fn tokenize(text: &str) -> Result<Vec<Token>, StlError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    while i < chars.len() {
        let c = chars[i];
        let (start_line, start_col) = (line, col);
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        let mut push = |tok, len: usize, i: &mut usize, col: &mut usize| {
            out.push(Token {
                tok,
                line: start_line,
                column: start_col,
            });
            *i += len;
            *col += len;
        };
        let next = chars.get(i + 1).copied();
        match c {
            '(' => push(Tok::LParen, 1, &mut i, &mut col),
            ')' => push(Tok::RParen, 1, &mut i, &mut col),
            '[' => push(Tok::LBracket, 1, &mut i, &mut col),
            ']' => push(Tok::RBracket, 1, &mut i, &mut col),
            ',' => push(Tok::Comma, 1, &mut i, &mut col),
            '+' => push(Tok::Plus, 1, &mut i, &mut col),
            '-' => push(Tok::Minus, 1, &mut i, &mut col),
            '*' => push(Tok::Star, 1, &mut i, &mut col),
            '/' => push(Tok::Slash, 1, &mut i, &mut col),
            '&' => push(Tok::Amp, 1, &mut i, &mut col),
            '|' => push(Tok::Pipe, 1, &mut i, &mut col),
            '!' => push(Tok::Bang, 1, &mut i, &mut col),
            '>' if next == Some('=') => push(Tok::Ge, 2, &mut i, &mut col),
            '<' if next == Some('=') => push(Tok::Le, 2, &mut i, &mut col),
            '>' => push(Tok::Gt, 1, &mut i, &mut col),
            '<' => push(Tok::Lt, 1, &mut i, &mut col),
            c if c.is_ascii_digit() || c == '.' => {
                let mut j = i;
                while j < chars.len() && (chars[j].is_ascii_digit() || chars[j] == '.') {
                    j += 1;
                }
                if j < chars.len() && (chars[j] == 'e' || chars[j] == 'E') {
                    let mut k = j + 1;
                    if k < chars.len() && (chars[k] == '+' || chars[k] == '-') {
                        k += 1;
                    }
                    if k < chars.len() && chars[k].is_ascii_digit() {
                        while k < chars.len() && chars[k].is_ascii_digit() {
                            k += 1;
                        }
                        j = k;
                    }
                }
                let s: String = chars[i..j].iter().collect();
                let v: f64 = s.parse().map_err(|_| {
                    syntax(start_line, start_col, format!("malformed number `{s}`"))
                })?;
                push(Tok::Num(v), j - i, &mut i, &mut col);
            }
            c if c.is_alphabetic() || c == '_' => {
                let mut j = i;
                while j < chars.len() && (chars[j].is_alphanumeric() || chars[j] == '_') {
                    j += 1;
                }
                let s: String = chars[i..j].iter().collect();
                push(Tok::Ident(s), j - i, &mut i, &mut col);
            }
            other => return Err(syntax(line, col, format!("unexpected character `{other}`"))),
        }
    }
    out.push(Token {
        tok: Tok::Eof,
        line,
        column: col,
    });
    Ok(out)
}

#[derive(Debug, Clone)]
struct Affine {
    coeffs: Vec<f64>,
    constant: f64,
}

impl Affine {
    fn constant(dim: usize, c: f64) -> Self {
        Self {
            coeffs: vec![0.0; dim],
            constant: c,
        }
    }

    fn is_constant(&self) -> bool {
        self.coeffs.iter().all(|c| *c == 0.0)
    }

    fn scale(mut self, k: f64) -> Self {
        self.coeffs.iter_mut().for_each(|c| *c *= k);
        self.constant *= k;
        self
    }

    fn add(mut self, other: &Affine, sign: f64) -> Self {
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += sign * b;
        }
        self.constant += sign * other.constant;
        self
    }
}

type IntervalFn<'a> = dyn Fn(f64, f64) -> Result<(usize, usize), StlError> + 'a;

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    dim: usize,
    interval: &'a IntervalFn<'a>,
}

impl Parser<'_> {
    fn peek(&self) -> &Tok {
        &self.tokens[self.pos].tok
    }

    fn here(&self) -> (usize, usize) {
        let t = &self.tokens[self.pos];
        (t.line, t.column)
    }

    fn error(&self, message: impl Into<String>) -> StlError {
        let (l, c) = self.here();
        syntax(l, c, message)
    }

    fn bump(&mut self) -> Tok {
        let t = self.tokens[self.pos].tok.clone();
        if t != Tok::Eof {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), StlError> {
        if *self.peek() == tok {
            self.bump();
            Ok(())
        } else {
            Err(self.error(format!("expected {what}, found {:?}", self.peek())))
        }
    }

    fn keyword(&self) -> Option<&str> {
        match self.peek() {
            Tok::Ident(s) if s == "G" || s == "F" || s == "U" => Some(s.as_str()),
            _ => None,
        }
    }

    fn formula(&mut self) -> Result<StlFormula, StlError> {
        let mut lhs = self.and()?;
        while *self.peek() == Tok::Pipe {
            self.bump();
            let rhs = self.and()?;
            lhs = StlFormula::or(lhs, rhs);
        }
        Ok(lhs)
    }

    fn and(&mut self) -> Result<StlFormula, StlError> {
        let mut lhs = self.until()?;
        while *self.peek() == Tok::Amp {
            self.bump();
            let rhs = self.until()?;
            lhs = StlFormula::and(lhs, rhs);
        }
        Ok(lhs)
    }

    fn until(&mut self) -> Result<StlFormula, StlError> {
        let lhs = self.unary()?;
        if self.keyword() == Some("U") {
            self.bump();
            let iv = self.interval()?;
            let rhs = self.unary()?;
            return Ok(StlFormula::until(iv, lhs, rhs));
        }
        Ok(lhs)
    }

    fn interval(&mut self) -> Result<Interval, StlError> {
        self.expect(Tok::LBracket, "`[`")?;
        let a = self.signed_number()?;
        self.expect(Tok::Comma, "`,`")?;
        let b = self.signed_number()?;
        self.expect(Tok::RBracket, "`]`")?;
        let (lo, hi) = (self.interval)(a, b)?;
        Interval::new(lo, hi)
    }

    fn signed_number(&mut self) -> Result<f64, StlError> {
        let neg = if *self.peek() == Tok::Minus {
            self.bump();
            true
        } else {
            false
        };
        match self.bump() {
            Tok::Num(v) => Ok(if neg { -v } else { v }),
            other => Err(self.error(format!("expected a number, found {other:?}"))),
        }
    }

    fn unary(&mut self) -> Result<StlFormula, StlError> {
        match self.peek().clone() {
            Tok::Bang => {
                self.bump();
                Ok(StlFormula::not(self.unary()?))
            }
            Tok::Ident(s) if s == "G" || s == "F" => {
                self.bump();
                let iv = self.interval()?;
                let inner = self.unary()?;
                Ok(if s == "G" {
                    StlFormula::always(iv, inner)
                } else {
                    StlFormula::eventually(iv, inner)
                })
            }
            Tok::LParen => {
                let save = self.pos;
                self.bump();
                let as_formula = self
                    .formula()
                    .and_then(|f| self.expect(Tok::RParen, "`)`").map(|_| f));
                match as_formula {
                    Ok(f) => Ok(f),
                    Err(e1) => {
                        let reached = self.pos;
                        self.pos = save;
                        match self.predicate() {
                            Ok(p) => Ok(p),
                            Err(e2) => Err(if reached > self.pos { e1 } else { e2 }),
                        }
                    }
                }
            }
            _ => self.predicate(),
        }
    }

    fn predicate(&mut self) -> Result<StlFormula, StlError> {
        let lhs = self.affine()?;
        let op = self.bump();
        let rhs = self.affine()?;
        let expr = match op {
            Tok::Ge | Tok::Gt => lhs.add(&rhs, -1.0),
            Tok::Le | Tok::Lt => rhs.add(&lhs, -1.0),
            other => {
                self.pos -= 1;
                return Err(self.error(format!("expected a comparison, found {other:?}")));
            }
        };
        LinearPredicate::new(expr.coeffs, expr.constant)
            .map(StlFormula::Predicate)
            .map_err(|_| self.error("predicate does not depend on the state"))
    }

    fn affine(&mut self) -> Result<Affine, StlError> {
        let mut acc = self.term()?;
        loop {
            let sign = match self.peek() {
                Tok::Plus => 1.0,
                Tok::Minus => -1.0,
                _ => return Ok(acc),
            };
            self.bump();
            let rhs = self.term()?;
            acc = acc.add(&rhs, sign);
        }
    }

    fn term(&mut self) -> Result<Affine, StlError> {
        let mut acc = self.factor()?;
        loop {
            match self.peek() {
                Tok::Star => {
                    self.bump();
                    let rhs = self.factor()?;
                    acc = if rhs.is_constant() {
                        acc.scale(rhs.constant)
                    } else if acc.is_constant() {
                        rhs.scale(acc.constant)
                    } else {
                        return Err(
                            self.error("product of two state-dependent terms is not linear")
                        );
                    };
                }
                Tok::Slash => {
                    self.bump();
                    let rhs = self.factor()?;
                    if !rhs.is_constant() || rhs.constant == 0.0 {
                        return Err(self.error("division must be by a nonzero constant"));
                    }
                    acc = acc.scale(1.0 / rhs.constant);
                }
                _ => return Ok(acc),
            }
        }
    }

    fn factor(&mut self) -> Result<Affine, StlError> {
        let (line, column) = self.here();
        match self.bump() {
            Tok::Minus => Ok(self.factor()?.scale(-1.0)),
            Tok::Plus => self.factor(),
            Tok::Num(v) => Ok(Affine::constant(self.dim, v)),
            Tok::LParen => {
                let inner = self.affine()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                let index = name
                    .strip_prefix('x')
                    .and_then(|s| s.parse::<usize>().ok())
                    .ok_or_else(|| syntax(line, column, format!("unknown identifier `{name}`")))?;
                if index == 0 || index > self.dim {
                    return Err(StlError::DimensionMismatch {
                        index,
                        dim: self.dim,
                    });
                }
                let mut a = Affine::constant(self.dim, 0.0);
                a.coeffs[index - 1] = 1.0;
                Ok(a)
            }
            other => Err(syntax(line, column, format!("unexpected {other:?}"))),
        }
    }
}

fn integer_steps(a: f64, b: f64) -> Result<(usize, usize), StlError> {
    let bad = |reason: &str| StlError::InvalidInterval {
        start: a,
        end: b,
        reason: reason.into(),
    };
    if a < 0.0 || b < 0.0 {
        return Err(bad("negative bound"));
    }
    if a.fract() != 0.0 || b.fract() != 0.0 {
        return Err(bad("bounds must be integer steps"));
    }
    if a > b {
        return Err(bad("inverted bounds"));
    }
    Ok((a as usize, b as usize))
}

/// Parse a formula whose interval bounds are integer step indices.
pub fn parse_formula(text: &str, state_dim: usize) -> Result<StlFormula, StlError> {
    parse_formula_with(text, state_dim, &integer_steps)
}

/// Parse a formula, mapping each interval's raw bounds through `interval`
/// (for example seconds to steps).
pub fn parse_formula_with(
    text: &str,
    state_dim: usize,
    interval: &dyn Fn(f64, f64) -> Result<(usize, usize), StlError>,
) -> Result<StlFormula, StlError> {
    let tokens = tokenize(text)?;
    let mut p = Parser {
        tokens,
        pos: 0,
        dim: state_dim,
        interval,
    };
    let f = p.formula()?;
    if *p.peek() != Tok::Eof {
        return Err(p.error(format!("unexpected trailing {:?}", p.peek())));
    }
    Ok(f)
}
