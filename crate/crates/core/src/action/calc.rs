//! Arithmetic for `calculate(...)`: `+ - * /` (also `− × ÷`), parentheses,
//! unary minus and decimal literals, with the usual precedence and left
//! associativity.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalcError {
    #[error("parse error at {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("division by zero")]
    DivisionByZero,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn eval(&self) -> Result<f64, CalcError> {
        Ok(match self {
            Expr::Num(n) => *n,
            Expr::Neg(e) => -e.eval()?,
            Expr::Add(a, b) => a.eval()? + b.eval()?,
            Expr::Sub(a, b) => a.eval()? - b.eval()?,
            Expr::Mul(a, b) => a.eval()? * b.eval()?,
            Expr::Div(a, b) => {
                let num = a.eval()?;
                let den = b.eval()?;
                if den == 0.0 {
                    return Err(CalcError::DivisionByZero);
                }
                num / den
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Tok {
    Num(f64),
    Plus,
    Minus,
    Star,
    Slash,
    LParen,
    RParen,
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, CalcError> {
    let mut out = Vec::new();
    let mut chars = src.char_indices().peekable();
    while let Some(&(i, c)) = chars.peek() {
        let tok = match c {
            c if c.is_whitespace() => {
                chars.next();
                continue;
            }
            '+' => Tok::Plus,
            '-' | '−' => Tok::Minus,
            '*' | '×' => Tok::Star,
            '/' | '÷' => Tok::Slash,
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            c if c.is_ascii_digit() || c == '.' => {
                let mut end = i;
                let mut dots = 0;
                while let Some(&(j, d)) = chars.peek() {
                    if d.is_ascii_digit() {
                        end = j + 1;
                    } else if d == '.' {
                        dots += 1;
                        end = j + 1;
                    } else {
                        break;
                    }
                    chars.next();
                }
                let text = &src[i..end];
                if dots > 1 || text == "." {
                    return Err(CalcError::Parse { pos: i, msg: format!("bad number {text:?}") });
                }
                let n = text
                    .parse::<f64>()
                    .map_err(|_| CalcError::Parse { pos: i, msg: format!("bad number {text:?}") })?;
                out.push((Tok::Num(n), i));
                continue;
            }
            other => return Err(CalcError::Parse { pos: i, msg: format!("unexpected {other:?}") }),
        };
        out.push((tok, i));
        chars.next();
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<Tok> {
        self.toks.get(self.pos).map(|t| t.0)
    }

    fn here(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |t| t.1)
    }

    fn expr(&mut self) -> Result<Expr, CalcError> {
        let mut lhs = self.term()?;
        while let Some(op @ (Tok::Plus | Tok::Minus)) = self.peek() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if op == Tok::Plus {
                Expr::Add(Box::new(lhs), Box::new(rhs))
            } else {
                Expr::Sub(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, CalcError> {
        let mut lhs = self.unary()?;
        while let Some(op @ (Tok::Star | Tok::Slash)) = self.peek() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = if op == Tok::Star {
                Expr::Mul(Box::new(lhs), Box::new(rhs))
            } else {
                Expr::Div(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, CalcError> {
        match self.peek() {
            Some(Tok::Minus) => {
                self.pos += 1;
                Ok(Expr::Neg(Box::new(self.unary()?)))
            }
            Some(Tok::Plus) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.primary(),
        }
    }

    fn primary(&mut self) -> Result<Expr, CalcError> {
        let pos = self.here();
        match self.peek() {
            Some(Tok::Num(n)) => {
                self.pos += 1;
                Ok(Expr::Num(n))
            }
            Some(Tok::LParen) => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek() != Some(Tok::RParen) {
                    return Err(CalcError::Parse { pos: self.here(), msg: "expected ')'".into() });
                }
                self.pos += 1;
                Ok(e)
            }
            Some(t) => Err(CalcError::Parse { pos, msg: format!("unexpected {t:?}") }),
            None => Err(CalcError::Parse { pos, msg: "unexpected end of expression".into() }),
        }
    }
}

pub fn parse_expr(src: &str) -> Result<Expr, CalcError> {
    let toks = lex(src)?;
    if toks.is_empty() {
        return Err(CalcError::Parse { pos: 0, msg: "empty expression".into() });
    }
    let mut p = Parser { toks, pos: 0, end: src.len() };
    let e = p.expr()?;
    if p.pos != p.toks.len() {
        return Err(CalcError::Parse { pos: p.here(), msg: "trailing input".into() });
    }
    Ok(e)
}

pub fn eval_calculate(src: &str) -> Result<f64, CalcError> {
    parse_expr(src)?.eval()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence() {
        assert_eq!(eval_calculate("2*(3+4)").unwrap(), 14.0);
        assert_eq!(eval_calculate("2+3*4").unwrap(), 14.0);
        assert_eq!(eval_calculate("10-4-3").unwrap(), 3.0);
        assert_eq!(eval_calculate("8/4/2").unwrap(), 1.0);
        assert_eq!(eval_calculate("-2*-3").unwrap(), 6.0);
        assert_eq!(eval_calculate("--2").unwrap(), 2.0);
        assert_eq!(eval_calculate("1.5 × 4 − 1 ÷ 2").unwrap(), 5.5);
        assert_eq!(eval_calculate(".5+.25").unwrap(), 0.75);
    }

    #[test]
    fn division_by_zero() {
        assert_eq!(eval_calculate("1/0"), Err(CalcError::DivisionByZero));
        assert_eq!(eval_calculate("1/(2-2)"), Err(CalcError::DivisionByZero));
    }

    #[test]
    fn parse_errors() {
        for bad in ["", "2+", "(1", "1)", "1..2", "abc", "2 3", "."] {
            assert!(matches!(eval_calculate(bad), Err(CalcError::Parse { .. })), "{bad}");
        }
    }
}
