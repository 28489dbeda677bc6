use std::fmt::Write;

use super::{BinOp, Cond, Expr, Policy};

/// Canonical source form. `parse(print(p)) == p` for every valid policy.
pub fn print(policy: &Policy) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "policy {} {{", policy.name);
    for p in &policy.params {
        let _ = writeln!(
            out,
            "  param {} = {} [{}, {}]",
            p.name,
            format_number(p.value),
            format_number(p.lo),
            format_number(p.hi)
        );
    }
    for r in &policy.rules {
        let _ = writeln!(
            out,
            "  rule {}: when {} -> drive(v = {}, w = {})",
            r.name,
            print_cond(&r.guard),
            print_expr(&r.v),
            print_expr(&r.w)
        );
    }
    out.push_str("}\n");
    out
}

/// Shortest decimal text that parses back to the same `f64`.
pub fn format_number(x: f64) -> String {
    // `{}` on f64 is the shortest round-tripping representation; it never
    // uses exponent notation, so very large or tiny magnitudes switch to
    // `{:e}` which is equally exact and much shorter.
    let plain = format!("{x}");
    let sci = format!("{x:e}");
    if sci.len() < plain.len() {
        sci
    } else {
        plain
    }
}

const PREC_ADD: u8 = 1;
const PREC_MUL: u8 = 2;
const PREC_UNARY: u8 = 3;
const PREC_ATOM: u8 = 4;

fn expr_prec(e: &Expr) -> u8 {
    match e {
        Expr::Bin(BinOp::Add | BinOp::Sub, ..) => PREC_ADD,
        Expr::Bin(BinOp::Mul | BinOp::Div, ..) => PREC_MUL,
        // negative literals print with a leading minus
        Expr::Neg(_) => PREC_UNARY,
        Expr::Num(n) if n.is_sign_negative() => PREC_UNARY,
        _ => PREC_ATOM,
    }
}

pub(crate) fn print_expr(e: &Expr) -> String {
    match e {
        Expr::Num(n) => format_number(*n),
        Expr::Var(name) => name.clone(),
        Expr::Neg(inner) => format!("-{}", wrap(inner, expr_prec(inner) < PREC_UNARY)),
        Expr::Bin(op, a, b) => {
            let prec = expr_prec(e);
            format!("{} {} {}", wrap(a, expr_prec(a) < prec), op.symbol(), wrap(b, expr_prec(b) <= prec))
        }
        Expr::Call(func, args) => {
            let args: Vec<String> = args.iter().map(print_expr).collect();
            format!("{}({})", func.name(), args.join(", "))
        }
    }
}

fn wrap(e: &Expr, parens: bool) -> String {
    if parens {
        format!("({})", print_expr(e))
    } else {
        print_expr(e)
    }
}

const PREC_OR: u8 = 1;
const PREC_AND: u8 = 2;
const PREC_NOT: u8 = 3;
const PREC_CMP: u8 = 4;

fn cond_prec(c: &Cond) -> u8 {
    match c {
        Cond::Or(..) => PREC_OR,
        Cond::And(..) => PREC_AND,
        Cond::Not(_) => PREC_NOT,
        Cond::Cmp(..) | Cond::Lit(_) => PREC_CMP,
    }
}

fn print_cond(c: &Cond) -> String {
    match c {
        Cond::Lit(b) => b.to_string(),
        Cond::Cmp(op, a, b) => format!("{} {} {}", print_expr(a), op.symbol(), print_expr(b)),
        Cond::Not(inner) => format!("not {}", wrap_cond(inner, cond_prec(inner) < PREC_NOT)),
        Cond::And(a, b) => {
            format!("{} and {}", wrap_cond(a, cond_prec(a) < PREC_AND), wrap_cond(b, cond_prec(b) <= PREC_AND))
        }
        Cond::Or(a, b) => {
            format!("{} or {}", wrap_cond(a, cond_prec(a) < PREC_OR), wrap_cond(b, cond_prec(b) <= PREC_OR))
        }
    }
}

fn wrap_cond(c: &Cond, parens: bool) -> String {
    if parens {
        format!("({})", print_cond(c))
    } else {
        print_cond(c)
    }
}
