//! Recursive-descent parser for the textual formula syntax.
//!
//! ```text
//! or     := and ("or" and)*
//! and    := until ("and" until)*
//! until  := unary ("until" interval unary)*
//! unary  := "not" unary | "F" interval unary | "G" interval unary | atom
//! atom   := "true" | ident | "(" or ")"
//! interval := "[" int "," int "]"
//! ```

use super::{Formula, Interval, PredicateRegistry, Result, StlError};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(usize),
    True,
    Not,
    And,
    Or,
    Until,
    F,
    G,
    LParen,
    RParen,
    LBrack,
    RBrack,
    Comma,
    Eof,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

fn describe(tok: &Tok) -> String {
    match tok {
        Tok::Ident(s) => format!("identifier `{s}`"),
        Tok::Int(n) => format!("integer {n}"),
        Tok::Eof => "end of input".to_string(),
        Tok::True => "`true`".to_string(),
        Tok::Not => "`not`".to_string(),
        Tok::And => "`and`".to_string(),
        Tok::Or => "`or`".to_string(),
        Tok::Until => "`until`".to_string(),
        Tok::F => "`F`".to_string(),
        Tok::G => "`G`".to_string(),
        Tok::LParen => "`(`".to_string(),
        Tok::RParen => "`)`".to_string(),
        Tok::LBrack => "`[`".to_string(),
        Tok::RBrack => "`]`".to_string(),
        Tok::Comma => "`,`".to_string(),
    }
}

fn lex(text: &str) -> Result<Vec<Token>> {
    let mut out = Vec::new();
    let chars: Vec<char> = text.chars().collect();
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
        let single = match c {
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            '[' => Some(Tok::LBrack),
            ']' => Some(Tok::RBrack),
            ',' => Some(Tok::Comma),
            _ => None,
        };
        if let Some(tok) = single {
            out.push(Token { tok, line: tl, col: tc });
            i += 1;
            col += 1;
            continue;
        }
        if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            let s: String = chars[start..i].iter().collect();
            let n = s.parse().map_err(|_| StlError::Syntax {
                line: tl,
                col: tc,
                message: format!("integer `{s}` out of range"),
            })?;
            col += i - start;
            out.push(Token { tok: Tok::Int(n), line: tl, col: tc });
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let word: String = chars[start..i].iter().collect();
            col += i - start;
            let tok = match word.as_str() {
                "true" => Tok::True,
                "not" => Tok::Not,
                "and" => Tok::And,
                "or" => Tok::Or,
                "until" => Tok::Until,
                "F" => Tok::F,
                "G" => Tok::G,
                _ => Tok::Ident(word),
            };
            out.push(Token { tok, line: tl, col: tc });
            continue;
        }
        return Err(StlError::Syntax {
            line: tl,
            col: tc,
            message: format!("unexpected character `{c}`"),
        });
    }
    out.push(Token {
        tok: Tok::Eof,
        line,
        col,
    });
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<Token>,
    pos: usize,
    registry: &'a PredicateRegistry,
}

impl Parser<'_> {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn next(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if t.tok != Tok::Eof {
            self.pos += 1;
        }
        t
    }

    fn error(&self, tok: &Token, expected: &str) -> StlError {
        StlError::Syntax {
            line: tok.line,
            col: tok.col,
            message: format!("expected {expected}, found {}", describe(&tok.tok)),
        }
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<Token> {
        let t = self.next();
        if t.tok == want {
            Ok(t)
        } else {
            Err(self.error(&t, what))
        }
    }

    fn int(&mut self) -> Result<usize> {
        let t = self.next();
        match t.tok {
            Tok::Int(n) => Ok(n),
            _ => Err(self.error(&t, "an integer")),
        }
    }

    fn interval(&mut self) -> Result<Interval> {
        let open = self.expect(Tok::LBrack, "`[`")?;
        let a = self.int()?;
        self.expect(Tok::Comma, "`,`")?;
        let b = self.int()?;
        self.expect(Tok::RBrack, "`]`")?;
        Interval::new(a, b).ok_or(StlError::BadInterval {
            a,
            b,
            line: open.line,
            col: open.col,
        })
    }

    fn or_expr(&mut self) -> Result<Formula> {
        let mut parts = vec![self.and_expr()?];
        while self.peek().tok == Tok::Or {
            self.next();
            parts.push(self.and_expr()?);
        }
        Ok(Formula::or(parts))
    }

    fn and_expr(&mut self) -> Result<Formula> {
        let mut parts = vec![self.until_expr()?];
        while self.peek().tok == Tok::And {
            self.next();
            parts.push(self.until_expr()?);
        }
        Ok(Formula::and(parts))
    }

    fn until_expr(&mut self) -> Result<Formula> {
        let mut lhs = self.unary()?;
        while self.peek().tok == Tok::Until {
            self.next();
            let interval = self.interval()?;
            let rhs = self.unary()?;
            lhs = Formula::until(lhs, interval, rhs);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Formula> {
        match self.peek().tok {
            Tok::Not => {
                self.next();
                Ok(self.unary()?.negate())
            }
            Tok::F => {
                self.next();
                let i = self.interval()?;
                Ok(Formula::eventually(i, self.unary()?))
            }
            Tok::G => {
                self.next();
                let i = self.interval()?;
                Ok(Formula::always(i, self.unary()?))
            }
            _ => self.primary(),
        }
    }

    fn primary(&mut self) -> Result<Formula> {
        let t = self.next();
        match t.tok {
            Tok::True => Ok(Formula::True),
            Tok::Ident(name) => match self.registry.get(&name) {
                Some(p) => Ok(Formula::atom(name, p.clone())),
                None => Err(StlError::UnknownPredicate {
                    name,
                    line: t.line,
                    col: t.col,
                }),
            },
            Tok::LParen => {
                let inner = self.or_expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(inner)
            }
            _ => Err(self.error(&t, "a formula")),
        }
    }
}

/// Parses `text`, resolving identifiers against `registry`. The result is
/// in negation normal form with flattened conjunctions and disjunctions.
pub fn parse(text: &str, registry: &PredicateRegistry) -> Result<Formula> {
    let toks = lex(text)?;
    let mut p = Parser {
        toks,
        pos: 0,
        registry,
    };
    let f = p.or_expr()?;
    let end = p.next();
    if end.tok != Tok::Eof {
        return Err(p.error(&end, "end of input"));
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stl::Predicate;

    fn registry() -> PredicateRegistry {
        let mut r = PredicateRegistry::new();
        for name in ["obs1", "obs2", "goal", "tr1", "tr2", "a", "b", "c"] {
            r.insert(name.to_string(), Predicate::above(2, 0, 0.0));
        }
        r
    }

    fn atom(name: &str) -> Formula {
        Formula::atom(name, Predicate::above(2, 0, 0.0))
    }

    fn iv(a: usize, b: usize) -> Interval {
        Interval::new(a, b).unwrap()
    }

    #[test]
    fn always_not_obstacle() {
        let f = parse("G[0,25] (not obs1)", &registry()).unwrap();
        assert_eq!(
            f,
            Formula::always(iv(0, 25), Formula::Not(Box::new(atom("obs1"))))
        );
    }

    #[test]
    fn conjunction_of_eventualities() {
        let f = parse("F[0,25] goal and F[0,25] tr1", &registry()).unwrap();
        assert_eq!(
            f,
            Formula::And(vec![
                Formula::eventually(iv(0, 25), atom("goal")),
                Formula::eventually(iv(0, 25), atom("tr1")),
            ])
        );
    }

    #[test]
    fn benchmark_task() {
        let text = "(F[0,25] tr1 or F[0,25] tr2) and F[0,25] goal and G[0,25] not obs1 and G[0,25] not obs2";
        let f = parse(text, &registry()).unwrap();
        let i = iv(0, 25);
        let expected = Formula::And(vec![
            Formula::Or(vec![
                Formula::eventually(i, atom("tr1")),
                Formula::eventually(i, atom("tr2")),
            ]),
            Formula::eventually(i, atom("goal")),
            Formula::always(i, Formula::Not(Box::new(atom("obs1")))),
            Formula::always(i, Formula::Not(Box::new(atom("obs2")))),
        ]);
        assert_eq!(f, expected);
        assert_eq!(parse(&f.to_string(), &registry()).unwrap(), f);
    }

    #[test]
    fn precedence_and_associativity() {
        let r = registry();
        assert_eq!(
            parse("a or b and c", &r).unwrap(),
            Formula::Or(vec![atom("a"), Formula::And(vec![atom("b"), atom("c")])])
        );
        assert_eq!(
            parse("a until[0,1] b until[0,2] c", &r).unwrap(),
            Formula::until(Formula::until(atom("a"), iv(0, 1), atom("b")), iv(0, 2), atom("c"))
        );
        assert_eq!(
            parse("not a until[0,1] b", &r).unwrap(),
            Formula::until(Formula::Not(Box::new(atom("a"))), iv(0, 1), atom("b"))
        );
    }

    #[test]
    fn negated_until_round_trips() {
        let r = registry();
        let f = parse("not (a until[1,3] not b)", &r).unwrap();
        assert!(matches!(f, Formula::Release { .. }));
        assert_eq!(parse(&f.to_string(), &r).unwrap(), f);
        let g = parse("not not (F[0,2] G[1,2] a or not true)", &r).unwrap();
        assert_eq!(parse(&g.to_string(), &r).unwrap(), g);
    }

    #[test]
    fn error_positions() {
        let r = registry();
        match parse("a and\n  (b or", &r) {
            Err(StlError::Syntax { line, col, .. }) => assert_eq!((line, col), (2, 8)),
            other => panic!("unexpected {other:?}"),
        }
        match parse("a and zz", &r) {
            Err(StlError::UnknownPredicate { name, line, col }) => {
                assert_eq!((name.as_str(), line, col), ("zz", 1, 7))
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse("F[3,1] a", &r),
            Err(StlError::BadInterval { a: 3, b: 1, .. })
        ));
        assert!(matches!(parse("a b", &r), Err(StlError::Syntax { .. })));
        assert!(matches!(parse("a # b", &r), Err(StlError::Syntax { .. })));
    }
}
