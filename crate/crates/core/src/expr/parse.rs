use super::{Expr, Func};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    End,
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn skip_ws(&mut self) {
        while let Some(c) = self.src[self.pos..].chars().next() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    /// Next token and its starting byte offset.
    fn next(&mut self) -> Result<(Tok, usize)> {
        self.skip_ws();
        let start = self.pos;
        let rest = &self.src[start..];
        let Some(c) = rest.chars().next() else {
            return Ok((Tok::End, start));
        };
        if c.is_ascii_digit() || c == '.' {
            let b = rest.as_bytes();
            let mut i = 0;
            while i < b.len() && b[i].is_ascii_digit() {
                i += 1;
            }
            if i < b.len() && b[i] == b'.' {
                i += 1;
                while i < b.len() && b[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
                let mut j = i + 1;
                if j < b.len() && (b[j] == b'+' || b[j] == b'-') {
                    j += 1;
                }
                if j < b.len() && b[j].is_ascii_digit() {
                    while j < b.len() && b[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let text = &rest[..i];
            let v: f64 = text.parse().map_err(|_| Error::Syntax {
                offset: start,
                msg: format!("malformed number `{text}`"),
            })?;
            self.pos += i;
            return Ok((Tok::Num(v), start));
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let len = rest
                .find(|ch: char| !(ch.is_ascii_alphanumeric() || ch == '_'))
                .unwrap_or(rest.len());
            self.pos += len;
            return Ok((Tok::Ident(rest[..len].to_string()), start));
        }
        if "+-*/^(),".contains(c) {
            self.pos += 1;
            return Ok((Tok::Op(c), start));
        }
        Err(Error::Syntax {
            offset: start,
            msg: format!("unexpected character `{c}`"),
        })
    }
}

struct Parser<'a> {
    lex: Lexer<'a>,
    tok: Tok,
    at: usize,
    dim: Option<usize>,
}

impl<'a> Parser<'a> {
    fn bump(&mut self) -> Result<()> {
        let (t, at) = self.lex.next()?;
        self.tok = t;
        self.at = at;
        Ok(())
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.tok == Tok::Op(c) {
            self.bump()
        } else {
            Err(self.unexpected(&format!("expected `{c}`")))
        }
    }

    fn unexpected(&self, what: &str) -> Error {
        let found = match &self.tok {
            Tok::End => "end of input".to_string(),
            Tok::Num(v) => format!("number {v}"),
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Op(c) => format!("`{c}`"),
        };
        Error::Syntax {
            offset: self.at,
            msg: format!("{what}, found {found}"),
        }
    }

    fn sum(&mut self) -> Result<Expr> {
        let mut lhs = self.product()?;
        loop {
            match self.tok {
                Tok::Op('+') => {
                    self.bump()?;
                    lhs = lhs + self.product()?;
                }
                Tok::Op('-') => {
                    self.bump()?;
                    lhs = lhs - self.product()?;
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn product(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            match self.tok {
                Tok::Op('*') => {
                    self.bump()?;
                    lhs = lhs * self.unary()?;
                }
                Tok::Op('/') => {
                    self.bump()?;
                    lhs = lhs / self.unary()?;
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.tok == Tok::Op('-') {
            self.bump()?;
            return Ok(-self.unary()?);
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let mut base = self.atom()?;
        while self.tok == Tok::Op('^') {
            self.bump()?;
            let e = self.exponent()?;
            base = Expr::Pow(Box::new(base), e);
        }
        Ok(base)
    }

    /// `k`, `-k` or `(±k)` with `k` a non-negative integer literal.
    fn exponent(&mut self) -> Result<i32> {
        let paren = self.tok == Tok::Op('(');
        if paren {
            self.bump()?;
        }
        let neg = self.tok == Tok::Op('-');
        if neg {
            self.bump()?;
        }
        let at = self.at;
        let k = match self.tok {
            Tok::Num(v) if v.fract() == 0.0 && v <= i32::MAX as f64 => v as i32,
            _ => return Err(self.unexpected("expected an integer exponent")),
        };
        // reject `2.0` style literals by checking the source text
        if self.lex.src[at..self.lex.pos].contains(['.', 'e', 'E']) {
            return Err(Error::Syntax {
                offset: at,
                msg: "exponent must be an integer literal".into(),
            });
        }
        self.bump()?;
        if paren {
            self.expect(')')?;
        }
        Ok(if neg { -k } else { k })
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.tok.clone() {
            Tok::Num(v) => {
                self.bump()?;
                Ok(Expr::Num(v))
            }
            Tok::Op('(') => {
                self.bump()?;
                let e = self.sum()?;
                self.expect(')')?;
                Ok(e)
            }
            Tok::Ident(name) => {
                let at = self.at;
                if let Some(func) = Func::from_name(&name) {
                    self.bump()?;
                    if self.tok != Tok::Op('(') {
                        return Err(self.unexpected(&format!("expected `(` after `{name}`")));
                    }
                    self.bump()?;
                    let mut args = vec![self.sum()?];
                    while self.tok == Tok::Op(',') {
                        self.bump()?;
                        args.push(self.sum()?);
                    }
                    self.expect(')')?;
                    if args.len() != 1 {
                        return Err(Error::Arity {
                            name,
                            expected: 1,
                            got: args.len(),
                            offset: at,
                        });
                    }
                    return Ok(Expr::Call(func, Box::new(args.pop().unwrap())));
                }
                let index = name
                    .strip_prefix('q')
                    .filter(|s| !s.is_empty() && !s.starts_with('0') && s.bytes().all(|b| b.is_ascii_digit()))
                    .and_then(|s| s.parse::<usize>().ok())
                    .filter(|&k| self.dim.is_none_or(|d| k <= d));
                match index {
                    Some(k) => {
                        self.bump()?;
                        Ok(Expr::Var(k - 1))
                    }
                    None => Err(Error::UnknownIdentifier { name, offset: at }),
                }
            }
            _ => Err(self.unexpected("expected an operand")),
        }
    }
}

fn parse_impl(src: &str, dim: Option<usize>) -> Result<Expr> {
    let mut p = Parser {
        lex: Lexer { src, pos: 0 },
        tok: Tok::End,
        at: 0,
        dim,
    };
    p.bump()?;
    let e = p.sum()?;
    if p.tok != Tok::End {
        return Err(p.unexpected("expected an operator"));
    }
    Ok(e)
}

/// Parses an expression in the coordinates `q1, q2, …`.
pub fn parse(src: &str) -> Result<Expr> {
    parse_impl(src, None)
}

/// Like [`parse`], but coordinates beyond `q{dim}` are unknown identifiers.
pub fn parse_in_dim(src: &str, dim: usize) -> Result<Expr> {
    parse_impl(src, Some(dim))
}
