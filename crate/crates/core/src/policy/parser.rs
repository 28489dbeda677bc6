//! Recursive-descent parser for policy source.
//!
//! Expressions are first parsed into an untyped tree under a single
//! precedence ladder (or < and < not < comparison < additive <
//! multiplicative < unary), then split into real and boolean trees. This
//! lets `(` open either a grouped guard or a grouped arithmetic term.

use super::lexer::{tokenize, Tok, Token};
use super::{
    check_bounds, BinOp, CmpOp, Cond, Expr, Func, Param, Policy, PolicyError, Pos, Rule, ValidationError, KEYWORDS,
    SENSORS,
};

/// Parses and validates policy source.
pub fn parse(source: &str) -> Result<Policy, PolicyError> {
    let tokens = tokenize(source)?;
    let mut p = Parser { tokens, at: 0 };
    let raw = p.policy()?;
    Ok(raw.check()?)
}

#[derive(Debug)]
enum Node {
    Num(f64),
    Ident(String),
    Bool(bool),
    Neg(Box<Spanned>),
    Not(Box<Spanned>),
    Bin(BinOp, Box<Spanned>, Box<Spanned>),
    Cmp(CmpOp, Box<Spanned>, Box<Spanned>),
    And(Box<Spanned>, Box<Spanned>),
    Or(Box<Spanned>, Box<Spanned>),
    Call(Func, Vec<Spanned>),
}

#[derive(Debug)]
struct Spanned {
    node: Node,
    pos: Pos,
}

struct RawRule {
    name: String,
    pos: Pos,
    guard: Spanned,
    v: Spanned,
    w: Spanned,
}

struct RawPolicy {
    name: String,
    params: Vec<(Param, Pos)>,
    rules: Vec<RawRule>,
}

struct Parser {
    tokens: Vec<Token>,
    at: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.at]
    }

    fn bump(&mut self) -> Token {
        let t = self.tokens[self.at].clone();
        if self.at + 1 < self.tokens.len() {
            self.at += 1;
        }
        t
    }

    fn error<T>(&self, pos: Pos, msg: impl Into<String>) -> Result<T, PolicyError> {
        Err(PolicyError::Syntax { line: pos.line, col: pos.col, msg: msg.into() })
    }

    fn expect(&mut self, want: Tok) -> Result<Pos, PolicyError> {
        let t = self.peek().clone();
        if t.tok == want {
            self.bump();
            Ok(t.pos)
        } else {
            self.error(t.pos, format!("expected {}, found {}", want.describe(), t.tok.describe()))
        }
    }

    fn is_word(&self, word: &str) -> bool {
        matches!(&self.peek().tok, Tok::Ident(w) if w == word)
    }

    fn expect_word(&mut self, word: &str) -> Result<Pos, PolicyError> {
        let t = self.peek().clone();
        if self.is_word(word) {
            self.bump();
            Ok(t.pos)
        } else {
            self.error(t.pos, format!("expected `{word}`, found {}", t.tok.describe()))
        }
    }

    fn ident(&mut self, what: &str) -> Result<(String, Pos), PolicyError> {
        let t = self.peek().clone();
        match t.tok {
            Tok::Ident(name) if !KEYWORDS.contains(&name.as_str()) => {
                self.bump();
                Ok((name, t.pos))
            }
            Tok::Ident(name) => self.error(t.pos, format!("keyword `{name}` cannot be used as {what}")),
            other => self.error(t.pos, format!("expected {what}, found {}", other.describe())),
        }
    }

    fn signed_number(&mut self) -> Result<f64, PolicyError> {
        let negative = if self.peek().tok == Tok::Minus {
            self.bump();
            true
        } else {
            false
        };
        let t = self.peek().clone();
        match t.tok {
            Tok::Num(n) => {
                self.bump();
                Ok(if negative { -n } else { n })
            }
            other => self.error(t.pos, format!("expected number, found {}", other.describe())),
        }
    }

    fn policy(&mut self) -> Result<RawPolicy, PolicyError> {
        self.expect_word("policy")?;
        let (name, _) = self.ident("policy name")?;
        self.expect(Tok::LBrace)?;
        let mut params = Vec::new();
        while self.is_word("param") {
            params.push(self.param()?);
        }
        let mut rules = Vec::new();
        loop {
            if self.is_word("rule") {
                rules.push(self.rule()?);
            } else if rules.is_empty() {
                let t = self.peek().clone();
                return self.error(t.pos, format!("expected `param` or `rule`, found {}", t.tok.describe()));
            } else {
                break;
            }
        }
        self.expect(Tok::RBrace)?;
        let t = self.peek().clone();
        if t.tok != Tok::Eof {
            return self.error(t.pos, format!("unexpected {} after policy body", t.tok.describe()));
        }
        Ok(RawPolicy { name, params, rules })
    }

    fn param(&mut self) -> Result<(Param, Pos), PolicyError> {
        self.expect_word("param")?;
        let (name, pos) = self.ident("param name")?;
        self.expect(Tok::Assign)?;
        let value = self.signed_number()?;
        self.expect(Tok::LBracket)?;
        let lo = self.signed_number()?;
        self.expect(Tok::Comma)?;
        let hi = self.signed_number()?;
        self.expect(Tok::RBracket)?;
        Ok((Param { name, value, lo, hi }, pos))
    }

    fn rule(&mut self) -> Result<RawRule, PolicyError> {
        self.expect_word("rule")?;
        let (name, pos) = self.ident("rule name")?;
        self.expect(Tok::Colon)?;
        self.expect_word("when")?;
        let guard = self.or_expr()?;
        self.expect(Tok::Arrow)?;
        self.expect_word("drive")?;
        self.expect(Tok::LParen)?;
        self.expect_word("v")?;
        self.expect(Tok::Assign)?;
        let v = self.or_expr()?;
        self.expect(Tok::Comma)?;
        self.expect_word("w")?;
        self.expect(Tok::Assign)?;
        let w = self.or_expr()?;
        self.expect(Tok::RParen)?;
        Ok(RawRule { name, pos, guard, v, w })
    }

    fn or_expr(&mut self) -> Result<Spanned, PolicyError> {
        let mut lhs = self.and_expr()?;
        while self.is_word("or") {
            self.bump();
            let rhs = self.and_expr()?;
            let pos = lhs.pos;
            lhs = Spanned { node: Node::Or(Box::new(lhs), Box::new(rhs)), pos };
        }
        Ok(lhs)
    }

    fn and_expr(&mut self) -> Result<Spanned, PolicyError> {
        let mut lhs = self.not_expr()?;
        while self.is_word("and") {
            self.bump();
            let rhs = self.not_expr()?;
            let pos = lhs.pos;
            lhs = Spanned { node: Node::And(Box::new(lhs), Box::new(rhs)), pos };
        }
        Ok(lhs)
    }

    fn not_expr(&mut self) -> Result<Spanned, PolicyError> {
        if self.is_word("not") {
            let pos = self.bump().pos;
            let inner = self.not_expr()?;
            return Ok(Spanned { node: Node::Not(Box::new(inner)), pos });
        }
        self.cmp_expr()
    }

    fn cmp_op(&self) -> Option<CmpOp> {
        Some(match self.peek().tok {
            Tok::Lt => CmpOp::Lt,
            Tok::Le => CmpOp::Le,
            Tok::Gt => CmpOp::Gt,
            Tok::Ge => CmpOp::Ge,
            Tok::EqEq => CmpOp::Eq,
            _ => return None,
        })
    }

    fn cmp_expr(&mut self) -> Result<Spanned, PolicyError> {
        let lhs = self.add_expr()?;
        let Some(op) = self.cmp_op() else { return Ok(lhs) };
        self.bump();
        let rhs = self.add_expr()?;
        if self.cmp_op().is_some() {
            let pos = self.peek().pos;
            return self.error(pos, "comparisons cannot be chained");
        }
        let pos = lhs.pos;
        Ok(Spanned { node: Node::Cmp(op, Box::new(lhs), Box::new(rhs)), pos })
    }

    fn add_expr(&mut self) -> Result<Spanned, PolicyError> {
        let mut lhs = self.mul_expr()?;
        loop {
            let op = match self.peek().tok {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.mul_expr()?;
            let pos = lhs.pos;
            lhs = Spanned { node: Node::Bin(op, Box::new(lhs), Box::new(rhs)), pos };
        }
    }

    fn mul_expr(&mut self) -> Result<Spanned, PolicyError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek().tok {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            let pos = lhs.pos;
            lhs = Spanned { node: Node::Bin(op, Box::new(lhs), Box::new(rhs)), pos };
        }
    }

    fn unary(&mut self) -> Result<Spanned, PolicyError> {
        if self.peek().tok == Tok::Minus {
            let pos = self.bump().pos;
            let inner = self.unary()?;
            let node = match inner.node {
                Node::Num(n) => Node::Num(-n),
                other => Node::Neg(Box::new(Spanned { node: other, pos: inner.pos })),
            };
            return Ok(Spanned { node, pos });
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Spanned, PolicyError> {
        let t = self.bump();
        let pos = t.pos;
        let node = match t.tok {
            Tok::Num(n) => Node::Num(n),
            Tok::LParen => {
                let inner = self.or_expr()?;
                self.expect(Tok::RParen)?;
                return Ok(inner);
            }
            Tok::Ident(word) => match word.as_str() {
                "true" => Node::Bool(true),
                "false" => Node::Bool(false),
                _ => {
                    if let Some(func) = Func::from_name(&word) {
                        self.expect(Tok::LParen)?;
                        let mut args = vec![self.or_expr()?];
                        while self.peek().tok == Tok::Comma {
                            self.bump();
                            args.push(self.or_expr()?);
                        }
                        self.expect(Tok::RParen)?;
                        if args.len() != func.arity() {
                            return self.error(
                                pos,
                                format!("`{word}` takes {} argument(s), found {}", func.arity(), args.len()),
                            );
                        }
                        Node::Call(func, args)
                    } else if KEYWORDS.contains(&word.as_str()) {
                        return self.error(pos, format!("unexpected keyword `{word}` in expression"));
                    } else {
                        Node::Ident(word)
                    }
                }
            },
            other => return self.error(pos, format!("expected expression, found {}", other.describe())),
        };
        Ok(Spanned { node, pos })
    }
}

struct Scope<'a> {
    params: Vec<&'a str>,
}

impl Scope<'_> {
    fn knows(&self, name: &str) -> bool {
        self.params.contains(&name) || SENSORS.contains(&name)
    }
}

fn mismatch<T>(pos: Pos, detail: &str) -> Result<T, ValidationError> {
    Err(ValidationError::TypeMismatch { pos, detail: detail.to_string() })
}

fn to_expr(s: Spanned, scope: &Scope) -> Result<Expr, ValidationError> {
    Ok(match s.node {
        Node::Num(n) => Expr::Num(n),
        Node::Ident(name) => {
            if !scope.knows(&name) {
                return Err(ValidationError::UnknownIdentifier { name, pos: s.pos });
            }
            Expr::Var(name)
        }
        Node::Neg(inner) => Expr::Neg(Box::new(to_expr(*inner, scope)?)),
        Node::Bin(op, a, b) => Expr::Bin(op, Box::new(to_expr(*a, scope)?), Box::new(to_expr(*b, scope)?)),
        Node::Call(func, args) => {
            Expr::Call(func, args.into_iter().map(|a| to_expr(a, scope)).collect::<Result<_, _>>()?)
        }
        Node::Bool(_) | Node::Not(_) | Node::Cmp(..) | Node::And(..) | Node::Or(..) => {
            return mismatch(s.pos, "expected a real-valued expression, found a boolean");
        }
    })
}

fn to_cond(s: Spanned, scope: &Scope) -> Result<Cond, ValidationError> {
    Ok(match s.node {
        Node::Bool(b) => Cond::Lit(b),
        Node::Cmp(op, a, b) => Cond::Cmp(op, to_expr(*a, scope)?, to_expr(*b, scope)?),
        Node::Not(inner) => Cond::Not(Box::new(to_cond(*inner, scope)?)),
        Node::And(a, b) => Cond::And(Box::new(to_cond(*a, scope)?), Box::new(to_cond(*b, scope)?)),
        Node::Or(a, b) => Cond::Or(Box::new(to_cond(*a, scope)?), Box::new(to_cond(*b, scope)?)),
        Node::Num(_) | Node::Ident(_) | Node::Neg(_) | Node::Bin(..) | Node::Call(..) => {
            return mismatch(s.pos, "expected a boolean expression, found a real value");
        }
    })
}

impl RawPolicy {
    fn check(self) -> Result<Policy, ValidationError> {
        let mut seen: Vec<&str> = Vec::new();
        for (p, pos) in &self.params {
            if seen.contains(&p.name.as_str()) || SENSORS.contains(&p.name.as_str()) {
                return Err(ValidationError::DuplicateName { name: p.name.clone(), pos: *pos });
            }
            seen.push(&p.name);
            check_bounds(p)?;
        }
        let mut rule_names: Vec<String> = Vec::new();
        for r in &self.rules {
            if rule_names.contains(&r.name) {
                return Err(ValidationError::DuplicateName { name: r.name.clone(), pos: r.pos });
            }
            rule_names.push(r.name.clone());
        }

        let params: Vec<Param> = self.params.into_iter().map(|(p, _)| p).collect();
        let scope = Scope { params: params.iter().map(|p| p.name.as_str()).collect() };
        let mut rules = Vec::with_capacity(self.rules.len());
        for r in self.rules {
            rules.push(Rule {
                guard: to_cond(r.guard, &scope)?,
                v: to_expr(r.v, &scope)?,
                w: to_expr(r.w, &scope)?,
                name: r.name,
            });
        }
        Ok(Policy { name: self.name, params, rules })
    }
}
