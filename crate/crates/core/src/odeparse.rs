//! Expression language for right-hand sides `ẍ = f(t, x, ẋ)`.
//!
//! One expression per component, separated by `;`. Variables are `t`,
//! `x1..xn` and `v1..vn`; functions `sin cos exp log sqrt`; operators
//! `+ - * / ^` with `^` binding tightest (right-associative), then unary
//! minus, then `* /`, then `+ -`.
//!
//! ```
//! use hlnode_core::odeparse::parse;
//! use hlnode_core::numcore::Acceleration;
//!
//! let sys = parse("x1^2 + x2^2 ; 1*x1", 2).unwrap();
//! assert_eq!(sys.accel(0.0, &[1.0, 2.0], &[0.0, 0.0]).unwrap(), vec![5.0, 1.0]);
//! ```

use std::fmt;

use crate::error::{Error, Result};
use crate::numcore::{Acceleration, Scalar};

/// Denominators smaller than this in magnitude are a domain error.
pub const MIN_DENOMINATOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variable {
    Time,
    /// 0-based position index.
    Position(usize),
    /// 0-based velocity index.
    Velocity(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
        }
    }

    fn from_name(s: &str) -> Option<Func> {
        Some(match s {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            _ => return None,
        })
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
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }

    /// Left and right binding power.
    fn binding(self) -> (u8, u8) {
        match self {
            BinOp::Add | BinOp::Sub => (10, 11),
            BinOp::Mul | BinOp::Div => (20, 21),
            BinOp::Pow => (40, 40),
        }
    }
}

const UNARY_BP: u8 = 30;

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Variable),
    Neg(Box<Expr>),
    Call(Func, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
}

impl Expr {
    fn precedence(&self) -> u8 {
        match self {
            Expr::Binary(BinOp::Add | BinOp::Sub, ..) => 1,
            Expr::Binary(BinOp::Mul | BinOp::Div, ..) => 2,
            Expr::Neg(_) => 3,
            Expr::Binary(BinOp::Pow, ..) => 4,
            _ => 5,
        }
    }

    pub fn mentions_time(&self) -> bool {
        match self {
            Expr::Const(_) => false,
            Expr::Var(v) => *v == Variable::Time,
            Expr::Neg(e) | Expr::Call(_, e) => e.mentions_time(),
            Expr::Binary(_, a, b) => a.mentions_time() || b.mentions_time(),
        }
    }

    pub fn eval<S: Scalar>(&self, t: S, x: &[S], v: &[S]) -> Result<S> {
        Ok(match self {
            Expr::Const(c) => S::constant(*c),
            Expr::Var(Variable::Time) => t,
            Expr::Var(Variable::Position(i)) => x[*i],
            Expr::Var(Variable::Velocity(i)) => v[*i],
            Expr::Neg(e) => -e.eval(t, x, v)?,
            Expr::Call(f, e) => {
                let a = e.eval(t, x, v)?;
                match f {
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Exp => a.exp(),
                    Func::Log => {
                        if a.value() <= 0.0 {
                            return Err(Error::Domain(format!("log of {}", a.value())));
                        }
                        a.ln()
                    }
                    Func::Sqrt => {
                        if a.value() < 0.0 {
                            return Err(Error::Domain(format!("sqrt of {}", a.value())));
                        }
                        a.sqrt()
                    }
                }
            }
            Expr::Binary(op, l, r) => {
                let a = l.eval(t, x, v)?;
                match op {
                    BinOp::Add => a + r.eval(t, x, v)?,
                    BinOp::Sub => a - r.eval(t, x, v)?,
                    BinOp::Mul => a * r.eval(t, x, v)?,
                    BinOp::Div => {
                        let b = r.eval(t, x, v)?;
                        if b.value().abs() < MIN_DENOMINATOR {
                            return Err(Error::Domain("division by zero".into()));
                        }
                        a / b
                    }
                    BinOp::Pow => match **r {
                        Expr::Const(k) if k.fract() == 0.0 && k.abs() <= i32::MAX as f64 => {
                            if k < 0.0 && a.value().abs() < MIN_DENOMINATOR {
                                return Err(Error::Domain("negative power of zero".into()));
                            }
                            a.powi(k as i32)
                        }
                        _ => {
                            let b = r.eval(t, x, v)?;
                            if a.value() <= 0.0 {
                                return Err(Error::Domain(format!(
                                    "non-integer power of non-positive base {}",
                                    a.value()
                                )));
                            }
                            (a.ln() * b).exp()
                        }
                    },
                }
            }
        })
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let wrap = |f: &mut fmt::Formatter<'_>, e: &Expr, parens: bool| {
            if parens {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        };
        match self {
            Expr::Const(c) => write!(f, "{c:?}"),
            Expr::Var(Variable::Time) => write!(f, "t"),
            Expr::Var(Variable::Position(i)) => write!(f, "x{}", i + 1),
            Expr::Var(Variable::Velocity(i)) => write!(f, "v{}", i + 1),
            Expr::Neg(e) => {
                write!(f, "-")?;
                wrap(f, e, e.precedence() < 3)
            }
            Expr::Call(func, e) => write!(f, "{}({e})", func.name()),
            Expr::Binary(op, l, r) => {
                let p = self.precedence();
                if *op == BinOp::Pow {
                    wrap(f, l, l.precedence() <= p)?;
                    write!(f, "^")?;
                    wrap(f, r, r.precedence() < p)
                } else {
                    wrap(f, l, l.precedence() < p)?;
                    write!(f, " {} ", op.symbol())?;
                    wrap(f, r, r.precedence() <= p)
                }
            }
        }
    }
}

/// A parsed right-hand side with one expression per component.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedSystem {
    dim: usize,
    components: Vec<Expr>,
}

impl ParsedSystem {
    pub fn components(&self) -> &[Expr] {
        &self.components
    }

    pub fn mentions_time(&self) -> bool {
        self.components.iter().any(Expr::mentions_time)
    }
}

impl fmt::Display for ParsedSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.components.iter().enumerate() {
            if i > 0 {
                write!(f, " ; ")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

impl Acceleration for ParsedSystem {
    fn dim(&self) -> usize {
        self.dim
    }

    fn accel<S: Scalar>(&self, t: S, x: &[S], v: &[S]) -> Result<Vec<S>> {
        if x.len() != self.dim || v.len() != self.dim {
            return Err(Error::shape(format!("state of dimension {} expected", self.dim)));
        }
        self.components.iter().map(|e| e.eval(t, x, v)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Semi,
    End,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    column: usize,
}

fn syntax(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Syntax {
        line,
        column,
        message: message.into(),
    }
}

fn lex(src: &str) -> Result<Vec<Token>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0, 1, 1);
    while i < chars.len() {
        let c = chars[i];
        let (tl, tc) = (line, col);
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
            let value: f64 = text
                .parse()
                .map_err(|_| syntax(tl, tc, format!("malformed number `{text}`")))?;
            if !value.is_finite() {
                return Err(syntax(tl, tc, format!("number `{text}` out of range")));
            }
            Tok::Num(value)
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
                ';' => Tok::Semi,
                _ => return Err(syntax(tl, tc, format!("unexpected character `{c}`"))),
            }
        };
        col += i - start;
        out.push(Token {
            tok,
            line: tl,
            column: tc,
        });
    }
    out.push(Token {
        tok: Tok::End,
        line,
        column: col,
    });
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    dim: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn next(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn describe(tok: &Tok) -> String {
        match tok {
            Tok::Num(v) => format!("number {v}"),
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Op(c) => format!("`{c}`"),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Semi => "`;`".into(),
            Tok::End => "end of input".into(),
        }
    }

    fn expect(&mut self, want: Tok) -> Result<()> {
        let t = self.next();
        if t.tok == want {
            Ok(())
        } else {
            Err(syntax(
                t.line,
                t.column,
                format!("expected {}, found {}", Self::describe(&want), Self::describe(&t.tok)),
            ))
        }
    }

    fn variable(&self, name: &str, tok: &Token) -> Result<Option<Variable>> {
        if name == "t" {
            return Ok(Some(Variable::Time));
        }
        let (head, digits) = name.split_at(1);
        if !(head == "x" || head == "v") || digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Ok(None);
        }
        let idx: usize = digits.parse().map_err(|_| Error::IndexOutOfRange {
            name: name.to_string(),
            dim: self.dim,
        })?;
        if idx == 0 || idx > self.dim {
            return Err(Error::IndexOutOfRange {
                name: name.to_string(),
                dim: self.dim,
            });
        }
        let _ = tok;
        Ok(Some(if head == "x" {
            Variable::Position(idx - 1)
        } else {
            Variable::Velocity(idx - 1)
        }))
    }

    fn expr(&mut self, min_bp: u8) -> Result<Expr> {
        let t = self.next();
        let mut lhs = match &t.tok {
            Tok::Num(v) => Expr::Const(*v),
            Tok::Op('-') => Expr::Neg(Box::new(self.expr(UNARY_BP)?)),
            Tok::LParen => {
                let e = self.expr(0)?;
                self.expect(Tok::RParen)?;
                e
            }
            Tok::Ident(name) => {
                if let Some(func) = Func::from_name(name) {
                    self.expect(Tok::LParen)?;
                    let arg = self.expr(0)?;
                    self.expect(Tok::RParen)?;
                    Expr::Call(func, Box::new(arg))
                } else if let Some(var) = self.variable(name, &t)? {
                    Expr::Var(var)
                } else {
                    return Err(Error::UnknownIdentifier {
                        name: name.clone(),
                        line: t.line,
                        column: t.column,
                    });
                }
            }
            other => {
                return Err(syntax(
                    t.line,
                    t.column,
                    format!("expected an operand, found {}", Self::describe(other)),
                ))
            }
        };
        loop {
            let op = match self.peek().tok {
                Tok::Op('+') => BinOp::Add,
                Tok::Op('-') => BinOp::Sub,
                Tok::Op('*') => BinOp::Mul,
                Tok::Op('/') => BinOp::Div,
                Tok::Op('^') => BinOp::Pow,
                _ => break,
            };
            let (lbp, rbp) = op.binding();
            if lbp < min_bp {
                break;
            }
            self.next();
            let rhs = self.expr(rbp)?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }
}

/// Parses `n` `;`-separated component expressions.
pub fn parse(source: &str, n: usize) -> Result<ParsedSystem> {
    if n == 0 {
        return Err(Error::Config("dimension must be at least 1".into()));
    }
    let mut p = Parser {
        tokens: lex(source)?,
        pos: 0,
        dim: n,
    };
    let mut components = vec![p.expr(0)?];
    loop {
        let t = p.next();
        match t.tok {
            Tok::Semi => components.push(p.expr(0)?),
            Tok::End => break,
            other => {
                return Err(syntax(
                    t.line,
                    t.column,
                    format!("expected an operator, `;` or end of input, found {}", Parser::describe(&other)),
                ))
            }
        }
    }
    if components.len() != n {
        let end = p.peek();
        return Err(syntax(
            end.line,
            end.column,
            format!("expected {n} components, found {}", components.len()),
        ));
    }
    Ok(ParsedSystem { dim: n, components })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Dual2;
    use crate::systems::System;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn c(v: f64) -> Box<Expr> {
        Box::new(Expr::Const(v))
    }

    fn var(v: Variable) -> Box<Expr> {
        Box::new(Expr::Var(v))
    }

    #[test]
    fn douglas_source() {
        let sys = parse("x1^2 + x2^2 ; 1*x1", 2).unwrap();
        assert_eq!(sys.accel(0.0, &[1.0, 2.0], &[9.0, 9.0]).unwrap(), vec![5.0, 1.0]);
        let zero = parse("0 ; 0", 2).unwrap();
        assert_eq!(zero.accel(3.0, &[1.0, 2.0], &[3.0, 4.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn errors_carry_positions() {
        assert!(matches!(parse("x3", 2), Err(Error::IndexOutOfRange { dim: 2, .. })));
        assert!(matches!(parse("x0 ; 1", 2), Err(Error::IndexOutOfRange { .. })));
        match parse("x1 +\n  y2 ; 0", 2) {
            Err(Error::UnknownIdentifier { name, line, column }) => {
                assert_eq!((name.as_str(), line, column), ("y2", 2, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
        match parse("x1 * (x2 ; 0", 2) {
            Err(Error::Syntax { line, column, .. }) => assert_eq!((line, column), (1, 10)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse("x1 $ 2", 1), Err(Error::Syntax { column: 4, .. })));
        assert!(matches!(parse("x1", 2), Err(Error::Syntax { .. })));
        assert!(matches!(parse("1e999", 1), Err(Error::Syntax { .. })));
    }

    #[test]
    fn precedence_and_associativity() {
        use BinOp::*;
        use Variable::*;
        let e = |s| parse(s, 2).unwrap().components[0].clone();
        assert_eq!(
            e("-x1^2 ; 0"),
            Expr::Neg(Box::new(Expr::Binary(Pow, var(Position(0)), c(2.0))))
        );
        assert_eq!(
            e("2^3^2 ; 0"),
            Expr::Binary(Pow, c(2.0), Box::new(Expr::Binary(Pow, c(3.0), c(2.0))))
        );
        assert_eq!(
            e("1 - 2 - 3 ; 0"),
            Expr::Binary(Sub, Box::new(Expr::Binary(Sub, c(1.0), c(2.0))), c(3.0))
        );
        assert_eq!(
            e("-x1 * v2 ; 0"),
            Expr::Binary(Mul, Box::new(Expr::Neg(var(Position(0)))), var(Velocity(1)))
        );
        assert_eq!(
            e("1 + 2 * t ; 0"),
            Expr::Binary(Add, c(1.0), Box::new(Expr::Binary(Mul, c(2.0), var(Time))))
        );
        assert_eq!(e(" ( 1+2 )*t;0"), e("(1 + 2) * t ; 0"));
    }

    #[test]
    fn evaluation_examples() {
        let sys = parse("x1*v2 ; 0", 2).unwrap();
        assert_eq!(sys.accel(0.0, &[2.0, 0.0], &[0.0, 3.0]).unwrap()[0], 6.0);
        let kepler = parse("x1*v2^2 - 1/x1^2 ; -2*v1*v2/x1", 2).unwrap();
        assert_eq!(kepler.accel(0.0, &[1.0, 0.0], &[0.0, 1.0]).unwrap()[0], 0.0);
        let sys = parse("x1*v2^2 ; 0", 2).unwrap();
        let x = [Dual2::<1>::constant(2.0), Dual2::constant(0.0)];
        let v = [Dual2::<1>::constant(0.0), Dual2::variable(3.0, 0)];
        let out = sys.accel(Dual2::constant(0.0), &x, &v).unwrap();
        assert_eq!(out[0].first[0], 12.0);
        assert_eq!(out[0].second[0][0], 4.0);
    }

    #[test]
    fn domain_errors() {
        let at = |s: &str, x: f64| parse(s, 1).unwrap().accel(0.0, &[x], &[0.0]);
        assert!(matches!(at("1/x1", 0.0), Err(Error::Domain(_))));
        assert!(matches!(at("log(x1)", -1.0), Err(Error::Domain(_))));
        assert!(matches!(at("sqrt(x1)", -1.0), Err(Error::Domain(_))));
        assert!(matches!(at("x1^0.5", -1.0), Err(Error::Domain(_))));
        assert!((at("x1^0.5", 4.0).unwrap()[0] - 2.0).abs() < 1e-15);
        assert_eq!(at("x1^-2", 2.0).unwrap()[0], 0.25);
    }

    #[test]
    fn time_dependence_detected() {
        assert!(parse("sin(t)*x1 ; 0", 2).unwrap().mentions_time());
        assert!(!parse("x1 ; v2", 2).unwrap().mentions_time());
    }

    #[test]
    fn builtin_systems_agree() {
        let systems = [
            System::Oscillator {
                omega: [2.5, 6.0],
                gamma: [0.7, 0.0],
            },
            System::Kepler { gm: 39.47841760435743 },
            System::Douglas { xi: 1.0 },
            System::Douglas { xi: 0.0 },
        ];
        let mut rng = crate::rng::stream(3, crate::rng::Stream::TestSet);
        for sys in &systems {
            let parsed = parse(&sys.to_expression(), 2).unwrap();
            for _ in 0..100 {
                let x = [rng.random_range(0.2..3.0), rng.random_range(-3.0..3.0)];
                let v = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
                let a = sys.accel(0.0, &x, &v).unwrap();
                let b = parsed.accel(0.0, &x, &v).unwrap();
                for i in 0..2 {
                    assert!((a[i] - b[i]).abs() <= 1e-12 * a[i].abs().max(1.0), "{sys:?} {a:?} {b:?}");
                }
            }
        }
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        arb_expr_up_to(10.0)
    }

    fn arb_expr_up_to(max_const: f64) -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0.0f64..max_const).prop_map(Expr::Const),
            Just(Expr::Var(Variable::Time)),
            (0usize..2).prop_map(|i| Expr::Var(Variable::Position(i))),
            (0usize..2).prop_map(|i| Expr::Var(Variable::Velocity(i))),
        ];
        leaf.prop_recursive(4, 32, 2, |inner| {
            prop_oneof![
                inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
                (prop_oneof![Just(Func::Sin), Just(Func::Cos)], inner.clone())
                    .prop_map(|(f, e)| Expr::Call(f, Box::new(e))),
                (
                    prop_oneof![Just(BinOp::Add), Just(BinOp::Sub), Just(BinOp::Mul)],
                    inner.clone(),
                    inner.clone()
                )
                    .prop_map(|(op, a, b)| Expr::Binary(op, Box::new(a), Box::new(b))),
                (inner, 1u8..4).prop_map(|(a, k)| Expr::Binary(BinOp::Pow, Box::new(a), c(k as f64))),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_parse_roundtrip(e in arb_expr(), f in arb_expr()) {
            let sys = ParsedSystem { dim: 2, components: vec![e, f] };
            let printed = sys.to_string();
            let reparsed = parse(&printed, 2).unwrap();
            prop_assert_eq!(&reparsed, &sys);
            prop_assert_eq!(reparsed.to_string(), printed);
        }

        #[test]
        fn dual_partials_match_finite_differences(
            e in arb_expr_up_to(3.0),
            t in -1.0f64..1.0,
            x in prop::array::uniform2(-1.0f64..1.0),
            v in prop::array::uniform2(-1.0f64..1.0),
        ) {
            let mut z = [t, x[0], x[1], v[0], v[1]];
            let dual: Vec<Dual2<5>> = (0..5).map(|k| Dual2::variable(z[k], k)).collect();
            let d = e.eval(dual[0], &dual[1..3], &dual[3..5]).unwrap();
            for k in 0..5 {
                let base = z[k];
                let mut at = |dz: f64| {
                    z[k] = base + dz;
                    let y = e.eval(z[0], &z[1..3], &z[3..5]).unwrap();
                    z[k] = base;
                    y
                };
                let mut stencil = |h: f64| (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
                let (coarse, fd) = (stencil(2e-4), stencil(1e-4));
                // The step-halving gap bounds the truncation error of the finer estimate.
                let scale = fd.abs().max(d.first[k].abs()).max(1.0);
                let tol = 1e-6 * scale + (coarse - fd).abs();
                prop_assert!((d.first[k] - fd).abs() <= tol, "{} vs {}", d.first[k], fd);
            }
        }
    }
}
