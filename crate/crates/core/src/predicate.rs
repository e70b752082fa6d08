//! Filter predicates over rows.
//!
//! Textual form, used by the CLI and the HTTP API:
//!
//! ```text
//! status = READY AND a < 0.6
//! activity_id in (2, 3) OR NOT (failure_trials >= 1)
//! hostname = 'node 1'
//! ```
//!
//! `AND` binds tighter than `OR`. Literals are integers, floats, quoted
//! strings, `null`, or bare words (read as strings). An empty string or `true`
//! matches everything.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{Scalar, ScalarRef};

/// Anything a predicate can be evaluated against.
pub trait Row {
    fn field(&self, name: &str) -> Option<ScalarRef<'_>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
}

impl CmpOp {
    fn symbol(&self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }

    fn holds(&self, ord: Option<Ordering>) -> bool {
        match self {
            CmpOp::Eq => ord == Some(Ordering::Equal),
            CmpOp::Ne => ord != Some(Ordering::Equal),
            CmpOp::Lt => ord == Some(Ordering::Less),
            CmpOp::Le => matches!(ord, Some(Ordering::Less | Ordering::Equal)),
            CmpOp::Gt => ord == Some(Ordering::Greater),
            CmpOp::Ge => matches!(ord, Some(Ordering::Greater | Ordering::Equal)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Predicate {
    True,
    Cmp {
        field: String,
        op: CmpOp,
        value: Scalar,
    },
    In {
        field: String,
        values: Vec<Scalar>,
    },
    And {
        terms: Vec<Predicate>,
    },
    Or {
        terms: Vec<Predicate>,
    },
    Not {
        term: Box<Predicate>,
    },
}

impl Default for Predicate {
    fn default() -> Self {
        Predicate::True
    }
}

impl Predicate {
    pub fn cmp(field: &str, op: CmpOp, value: impl Into<Scalar>) -> Self {
        Predicate::Cmp {
            field: field.to_string(),
            op,
            value: value.into(),
        }
    }

    pub fn eq(field: &str, value: impl Into<Scalar>) -> Self {
        Self::cmp(field, CmpOp::Eq, value)
    }

    pub fn is_in(field: &str, values: Vec<Scalar>) -> Self {
        Predicate::In {
            field: field.to_string(),
            values,
        }
    }

    pub fn and(self, other: Predicate) -> Self {
        match (self, other) {
            (Predicate::True, p) | (p, Predicate::True) => p,
            (Predicate::And { mut terms }, Predicate::And { terms: more }) => {
                terms.extend(more);
                Predicate::And { terms }
            }
            (Predicate::And { mut terms }, p) => {
                terms.push(p);
                Predicate::And { terms }
            }
            (a, b) => Predicate::And { terms: vec![a, b] },
        }
    }

    pub fn matches<R: Row + ?Sized>(&self, row: &R) -> bool {
        match self {
            Predicate::True => true,
            Predicate::Cmp { field, op, value } => match row.field(field) {
                Some(v) => op.holds(v.compare(&value.as_ref())),
                None => false,
            },
            Predicate::In { field, values } => match row.field(field) {
                Some(v) => values
                    .iter()
                    .any(|lit| v.compare(&lit.as_ref()) == Some(Ordering::Equal)),
                None => false,
            },
            Predicate::And { terms } => terms.iter().all(|t| t.matches(row)),
            Predicate::Or { terms } => terms.iter().any(|t| t.matches(row)),
            Predicate::Not { term } => !term.matches(row),
        }
    }

    /// Every field name the predicate reads.
    pub fn fields(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_fields(&mut out);
        out
    }

    fn collect_fields<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Predicate::True => {}
            Predicate::Cmp { field, .. } | Predicate::In { field, .. } => out.push(field),
            Predicate::And { terms } | Predicate::Or { terms } => {
                terms.iter().for_each(|t| t.collect_fields(out))
            }
            Predicate::Not { term } => term.collect_fields(out),
        }
    }

    /// If the predicate pins `field` to a single string value at the top level
    /// (alone or inside a conjunction), returns that value. Used for index lookups.
    pub fn pinned_str(&self, field: &str) -> Option<&str> {
        match self {
            Predicate::Cmp {
                field: f,
                op: CmpOp::Eq,
                value: Scalar::Str(s),
            } if f == field => Some(s),
            Predicate::And { terms } => terms.iter().find_map(|t| t.pinned_str(field)),
            _ => None,
        }
    }

    pub fn parse(text: &str) -> Result<Predicate, String> {
        let tokens = tokenize(text)?;
        if tokens.is_empty() {
            return Ok(Predicate::True);
        }
        let mut parser = Parser { tokens, pos: 0 };
        let pred = parser.or_expr()?;
        if parser.pos != parser.tokens.len() {
            return Err(format!("unexpected token {:?}", parser.tokens[parser.pos]));
        }
        Ok(pred)
    }
}

impl std::str::FromStr for Predicate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Predicate::parse(s)
    }
}

fn write_literal(f: &mut fmt::Formatter<'_>, v: &Scalar) -> fmt::Result {
    match v {
        Scalar::Null => f.write_str("null"),
        Scalar::Str(s) => write!(f, "'{s}'"),
        other => write!(f, "{other}"),
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::True => f.write_str("true"),
            Predicate::Cmp { field, op, value } => {
                write!(f, "{field} {} ", op.symbol())?;
                write_literal(f, value)
            }
            Predicate::In { field, values } => {
                write!(f, "{field} in (")?;
                for (i, v) in values.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write_literal(f, v)?;
                }
                f.write_str(")")
            }
            Predicate::And { terms } | Predicate::Or { terms } => {
                let sep = if matches!(self, Predicate::And { .. }) { " AND " } else { " OR " };
                if terms.is_empty() {
                    return f.write_str(if sep == " AND " { "true" } else { "NOT (true)" });
                }
                for (i, t) in terms.iter().enumerate() {
                    if i > 0 {
                        f.write_str(sep)?;
                    }
                    write!(f, "({t})")?;
                }
                Ok(())
            }
            Predicate::Not { term } => write!(f, "NOT ({term})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Word(String),
    Quoted(String),
    Op(CmpOp),
    LParen,
    RParen,
    Comma,
}

fn tokenize(text: &str) -> Result<Vec<Token>, String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            c if c.is_whitespace() => i += 1,
            '(' => {
                out.push(Token::LParen);
                i += 1
            }
            ')' => {
                out.push(Token::RParen);
                i += 1
            }
            ',' => {
                out.push(Token::Comma);
                i += 1
            }
            '\'' | '"' => {
                let end = chars[i + 1..]
                    .iter()
                    .position(|&ch| ch == c)
                    .ok_or_else(|| "unterminated string literal".to_string())?;
                out.push(Token::Quoted(chars[i + 1..i + 1 + end].iter().collect()));
                i += end + 2;
            }
            '=' | '!' | '<' | '>' | '≠' | '≤' | '≥' => {
                let next = chars.get(i + 1).copied();
                let (op, len) = match (c, next) {
                    ('=', Some('=')) => (CmpOp::Eq, 2),
                    ('=', _) => (CmpOp::Eq, 1),
                    ('!', Some('=')) => (CmpOp::Ne, 2),
                    ('<', Some('>')) => (CmpOp::Ne, 2),
                    ('<', Some('=')) => (CmpOp::Le, 2),
                    ('<', _) => (CmpOp::Lt, 1),
                    ('>', Some('=')) => (CmpOp::Ge, 2),
                    ('>', _) => (CmpOp::Gt, 1),
                    ('≠', _) => (CmpOp::Ne, 1),
                    ('≤', _) => (CmpOp::Le, 1),
                    ('≥', _) => (CmpOp::Ge, 1),
                    _ => return Err(format!("unexpected character {c:?}")),
                };
                out.push(Token::Op(op));
                i += len;
            }
            _ => {
                let start = i;
                while i < chars.len()
                    && !chars[i].is_whitespace()
                    && !"()=!<>,'\"≠≤≥".contains(chars[i])
                {
                    i += 1;
                }
                out.push(Token::Word(chars[start..i].iter().collect()));
            }
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Token::Word(w)) if w.eq_ignore_ascii_case(kw))
    }

    fn or_expr(&mut self) -> Result<Predicate, String> {
        let mut terms = vec![self.and_expr()?];
        while self.keyword("or") {
            self.pos += 1;
            terms.push(self.and_expr()?);
        }
        Ok(if terms.len() == 1 { terms.pop().unwrap() } else { Predicate::Or { terms } })
    }

    fn and_expr(&mut self) -> Result<Predicate, String> {
        let mut terms = vec![self.unary()?];
        while self.keyword("and") {
            self.pos += 1;
            terms.push(self.unary()?);
        }
        Ok(if terms.len() == 1 { terms.pop().unwrap() } else { Predicate::And { terms } })
    }

    fn unary(&mut self) -> Result<Predicate, String> {
        if self.keyword("not") {
            self.pos += 1;
            return Ok(Predicate::Not {
                term: Box::new(self.unary()?),
            });
        }
        if self.keyword("true") {
            self.pos += 1;
            return Ok(Predicate::True);
        }
        if self.peek() == Some(&Token::LParen) {
            self.pos += 1;
            let inner = self.or_expr()?;
            if self.peek() != Some(&Token::RParen) {
                return Err("expected )".into());
            }
            self.pos += 1;
            return Ok(inner);
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Predicate, String> {
        let field = match self.peek() {
            Some(Token::Word(w)) => w.clone(),
            other => return Err(format!("expected field name, found {other:?}")),
        };
        self.pos += 1;
        if self.keyword("in") {
            self.pos += 1;
            if self.peek() != Some(&Token::LParen) {
                return Err("expected ( after in".into());
            }
            self.pos += 1;
            let mut values = Vec::new();
            loop {
                values.push(self.literal()?);
                match self.peek() {
                    Some(Token::Comma) => self.pos += 1,
                    Some(Token::RParen) => {
                        self.pos += 1;
                        break;
                    }
                    other => return Err(format!("expected , or ) in list, found {other:?}")),
                }
            }
            return Ok(Predicate::In { field, values });
        }
        let op = match self.peek() {
            Some(Token::Op(op)) => *op,
            other => return Err(format!("expected comparison after {field}, found {other:?}")),
        };
        self.pos += 1;
        let value = self.literal()?;
        Ok(Predicate::Cmp { field, op, value })
    }

    fn literal(&mut self) -> Result<Scalar, String> {
        let tok = self.peek().cloned();
        self.pos += 1;
        match tok {
            Some(Token::Quoted(s)) => Ok(Scalar::Str(s)),
            Some(Token::Word(w)) if w.eq_ignore_ascii_case("null") => Ok(Scalar::Null),
            Some(Token::Word(w)) => Ok(Scalar::parse_text(&w)),
            other => Err(format!("expected literal, found {other:?}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use proptest::prelude::*;

    use super::*;

    struct MapRow(BTreeMap<String, Scalar>);

    impl Row for MapRow {
        fn field(&self, name: &str) -> Option<ScalarRef<'_>> {
            self.0.get(name).map(Scalar::as_ref)
        }
    }

    fn row(pairs: &[(&str, Scalar)]) -> MapRow {
        MapRow(pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect())
    }

    #[test]
    fn parses_conjunctions_with_precedence() {
        let p = Predicate::parse("status = READY AND a < 0.6 OR b >= 3").unwrap();
        match &p {
            Predicate::Or { terms } => {
                assert_eq!(terms.len(), 2);
                assert!(matches!(&terms[0], Predicate::And { terms } if terms.len() == 2));
            }
            other => panic!("unexpected {other:?}"),
        }
        let r = row(&[("status", "READY".into()), ("a", Scalar::Num(0.55)), ("b", Scalar::Int(1))]);
        assert!(p.matches(&r));
        let r2 = row(&[("status", "RUNNING".into()), ("a", Scalar::Num(0.55)), ("b", Scalar::Int(1))]);
        assert!(!p.matches(&r2));
    }

    #[test]
    fn in_lists_nulls_and_missing_fields() {
        let p = Predicate::parse("activity_id in (2, 3)").unwrap();
        assert!(p.matches(&row(&[("activity_id", "2".into())])));
        assert!(!p.matches(&row(&[("activity_id", "1".into())])));
        assert!(!p.matches(&row(&[])));

        let nul = Predicate::parse("end_time = null").unwrap();
        assert!(nul.matches(&row(&[("end_time", Scalar::Null)])));
        assert!(!nul.matches(&row(&[("end_time", Scalar::Int(4))])));
        let not_nul = Predicate::parse("end_time != null").unwrap();
        assert!(not_nul.matches(&row(&[("end_time", Scalar::Int(4))])));
    }

    #[test]
    fn unicode_operators_and_quotes() {
        let p = Predicate::parse("a ≤ 2 AND host ≠ 'node 1' AND path = /data/act1").unwrap();
        let r = row(&[("a", Scalar::Int(2)), ("host", "node2".into()), ("path", "/data/act1".into())]);
        assert!(p.matches(&r));
        assert_eq!(Predicate::parse("").unwrap(), Predicate::True);
        assert!(Predicate::parse("a <").is_err());
        assert!(Predicate::parse("a = 'open").is_err());
    }

    fn arb_literal() -> impl Strategy<Value = Scalar> {
        prop_oneof![
            any::<i32>().prop_map(|v| Scalar::Int(v as i64)),
            (-1.0e6f64..1.0e6).prop_map(Scalar::Num),
            "[a-z][a-z0-9 ]{0,6}".prop_map(Scalar::Str),
            Just(Scalar::Null),
        ]
    }

    fn arb_pred() -> impl Strategy<Value = Predicate> {
        let ops = prop_oneof![
            Just(CmpOp::Eq),
            Just(CmpOp::Ne),
            Just(CmpOp::Lt),
            Just(CmpOp::Le),
            Just(CmpOp::Gt),
            Just(CmpOp::Ge)
        ];
        let leaf = prop_oneof![
            ("[a-z_]{1,6}", ops, arb_literal())
                .prop_filter("keywords are not field names", |(f, _, _)| {
                    !["and", "or", "not", "in", "true", "null"].contains(&f.as_str())
                })
                .prop_map(|(field, op, value)| Predicate::Cmp { field, op, value }),
            ("[a-z_]{1,6}", prop::collection::vec(arb_literal(), 1..4))
                .prop_filter("keywords are not field names", |(f, _)| {
                    !["and", "or", "not", "in", "true", "null"].contains(&f.as_str())
                })
                .prop_map(|(field, values)| Predicate::In { field, values }),
        ];
        leaf.prop_recursive(3, 16, 3, |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 2..4).prop_map(|terms| Predicate::And { terms }),
                prop::collection::vec(inner.clone(), 2..4).prop_map(|terms| Predicate::Or { terms }),
                inner.prop_map(|t| Predicate::Not { term: Box::new(t) }),
            ]
        })
    }

    proptest! {
        #[test]
        fn display_then_parse_is_identity(p in arb_pred()) {
            let text = p.to_string();
            let back = Predicate::parse(&text).unwrap();
            prop_assert_eq!(back, p);
        }
    }
}
