//! SQL fragment used by the parser: lexing, parsing with alias resolution, and
//! canonical rendering. Literals are not kept; every literal becomes a `?`
//! placeholder.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::schema::{Schema, SchemaItem};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SetOp {
    Intersect,
    Union,
    Except,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AggFn {
    Max,
    Min,
    Count,
    Sum,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Gt,
    Le,
    Ge,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ColRef {
    Star,
    Column(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Item {
    pub agg: Option<AggFn>,
    /// `AGG(DISTINCT col)`; only meaningful with an aggregate.
    pub distinct: bool,
    pub col: ColRef,
}

impl Item {
    pub fn column(c: usize) -> Item {
        Item {
            agg: None,
            distinct: false,
            col: ColRef::Column(c),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Operand {
    Value,
    Column(usize),
    Nested(Box<Sql>),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Cond {
    And(Box<Cond>, Box<Cond>),
    Or(Box<Cond>, Box<Cond>),
    Compare(CmpOp, Item, Operand),
    Between(Item, Operand, Operand),
    In(Item, Operand),
    NotIn(Item, Operand),
    Like(Item, Operand),
    NotLike(Item, Operand),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupBy {
    pub columns: Vec<usize>,
    pub having: Option<Cond>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Asc,
    Desc,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OrderBy {
    pub items: Vec<Item>,
    pub direction: Direction,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Query {
    pub distinct: bool,
    pub select: Vec<Item>,
    pub from: Vec<usize>,
    pub filter: Option<Cond>,
    pub group: Option<GroupBy>,
    pub order: Option<OrderBy>,
    pub limit: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Sql {
    pub query: Query,
    pub compound: Option<(SetOp, Box<Sql>)>,
}

// ---------------------------------------------------------------- lexing

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Word(String),
    Literal,
    Sym(&'static str),
}

fn lex(src: &str) -> Result<Vec<Tok>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Tok::Word(chars[start..i].iter().collect::<String>().to_lowercase()));
        } else if c == '`' {
            let end = chars[i + 1..]
                .iter()
                .position(|&d| d == '`')
                .ok_or_else(|| Error::Parse("unterminated quoted identifier".into()))?;
            out.push(Tok::Word(chars[i + 1..i + 1 + end].iter().collect::<String>().to_lowercase()));
            i += end + 2;
        } else if c.is_ascii_digit()
            || (c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit()) && !prev_is_operand(&out))
        {
            i += 1;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            out.push(Tok::Literal);
        } else if c == '\'' || c == '"' {
            let end = chars[i + 1..]
                .iter()
                .position(|&d| d == c)
                .ok_or_else(|| Error::Parse("unterminated string literal".into()))?;
            out.push(Tok::Literal);
            i += end + 2;
        } else if c == '?' {
            out.push(Tok::Literal);
            i += 1;
        } else {
            let two: String = chars[i..(i + 2).min(chars.len())].iter().collect();
            let sym = match two.as_str() {
                "!=" => Some("!="),
                "<>" => Some("!="),
                "<=" => Some("<="),
                ">=" => Some(">="),
                _ => None,
            };
            if let Some(s) = sym {
                out.push(Tok::Sym(s));
                i += 2;
                continue;
            }
            let s = match c {
                '(' => "(",
                ')' => ")",
                ',' => ",",
                '.' => ".",
                '*' => "*",
                '=' => "=",
                '<' => "<",
                '>' => ">",
                ';' => ";",
                _ => return Err(Error::Parse(format!("unexpected character `{c}`"))),
            };
            out.push(Tok::Sym(s));
            i += 1;
        }
    }
    while out.last() == Some(&Tok::Sym(";")) {
        out.pop();
    }
    Ok(out)
}

fn prev_is_operand(toks: &[Tok]) -> bool {
    matches!(toks.last(), Some(Tok::Word(w)) if !is_keyword(w)) || matches!(toks.last(), Some(Tok::Literal | Tok::Sym(")")))
}

const KEYWORDS: &[&str] = &[
    "select", "from", "where", "group", "by", "having", "order", "limit", "intersect", "union", "except", "join",
    "inner", "on", "as", "and", "or", "not", "in", "like", "between", "asc", "desc", "distinct", "max", "min",
    "count", "sum", "avg",
];

fn is_keyword(w: &str) -> bool {
    KEYWORDS.contains(&w)
}

// ---------------------------------------------------------------- raw parse

#[derive(Clone, Debug)]
struct RawCol {
    qualifier: Option<String>,
    /// `None` for `*`.
    name: Option<String>,
}

#[derive(Clone, Debug)]
struct RawItem {
    agg: Option<AggFn>,
    distinct: bool,
    col: RawCol,
}

#[derive(Clone, Debug)]
enum RawOperand {
    Value,
    Col(RawCol),
    Nested(Box<RawSql>),
}

#[derive(Clone, Debug)]
enum RawCond {
    And(Box<RawCond>, Box<RawCond>),
    Or(Box<RawCond>, Box<RawCond>),
    Compare(CmpOp, RawItem, RawOperand),
    Between(RawItem, RawOperand, RawOperand),
    In(RawItem, RawOperand),
    NotIn(RawItem, RawOperand),
    Like(RawItem, RawOperand),
    NotLike(RawItem, RawOperand),
}

#[derive(Clone, Debug)]
struct RawQuery {
    distinct: bool,
    select: Vec<RawItem>,
    from: Vec<(String, Option<String>)>,
    filter: Option<RawCond>,
    group: Vec<RawCol>,
    having: Option<RawCond>,
    order: Option<(Vec<RawItem>, Direction)>,
    limit: bool,
}

#[derive(Clone, Debug)]
struct RawSql {
    query: RawQuery,
    compound: Option<(SetOp, Box<RawSql>)>,
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn peek_word(&self, w: &str) -> bool {
        matches!(self.peek(), Some(Tok::Word(x)) if x == w)
    }

    fn peek_sym(&self, s: &str) -> bool {
        matches!(self.peek(), Some(Tok::Sym(x)) if *x == s)
    }

    fn eat_word(&mut self, w: &str) -> bool {
        if self.peek_word(w) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn eat_sym(&mut self, s: &str) -> bool {
        if self.peek_sym(s) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_word(&mut self, w: &str) -> Result<()> {
        if self.eat_word(w) {
            Ok(())
        } else {
            Err(self.unexpected(&format!("`{}`", w.to_uppercase())))
        }
    }

    fn expect_sym(&mut self, s: &str) -> Result<()> {
        if self.eat_sym(s) {
            Ok(())
        } else {
            Err(self.unexpected(&format!("`{s}`")))
        }
    }

    fn unexpected(&self, wanted: &str) -> Error {
        let found = match self.peek() {
            None => "end of input".to_string(),
            Some(Tok::Word(w)) => format!("`{w}`"),
            Some(Tok::Literal) => "a literal".to_string(),
            Some(Tok::Sym(s)) => format!("`{s}`"),
        };
        Error::Parse(format!("expected {wanted}, found {found} at token {}", self.pos))
    }

    fn ident(&mut self) -> Result<String> {
        match self.peek() {
            Some(Tok::Word(w)) if !is_keyword(w) => {
                let w = w.clone();
                self.pos += 1;
                Ok(w)
            }
            _ => Err(self.unexpected("an identifier")),
        }
    }

    fn sql(&mut self) -> Result<RawSql> {
        let query = self.query()?;
        let op = if self.eat_word("intersect") {
            Some(SetOp::Intersect)
        } else if self.eat_word("union") {
            if self.peek_word("all") {
                return Err(Error::Unsupported("UNION ALL".into()));
            }
            Some(SetOp::Union)
        } else if self.eat_word("except") {
            Some(SetOp::Except)
        } else {
            None
        };
        let compound = match op {
            Some(op) => Some((op, Box::new(self.sql()?))),
            None => None,
        };
        Ok(RawSql { query, compound })
    }

    fn query(&mut self) -> Result<RawQuery> {
        self.expect_word("select")?;
        let distinct = self.eat_word("distinct");
        let mut select = vec![self.item()?];
        while self.eat_sym(",") {
            select.push(self.item()?);
        }
        self.expect_word("from")?;
        let from = self.from()?;
        let filter = if self.eat_word("where") {
            Some(self.cond()?)
        } else {
            None
        };
        let mut group = Vec::new();
        let mut having = None;
        if self.eat_word("group") {
            self.expect_word("by")?;
            group.push(self.colref()?);
            while self.eat_sym(",") {
                group.push(self.colref()?);
            }
            if self.eat_word("having") {
                having = Some(self.cond()?);
            }
        }
        if self.peek_word("having") {
            return Err(Error::Unsupported("HAVING without GROUP BY".into()));
        }
        let order = if self.eat_word("order") {
            self.expect_word("by")?;
            let mut items = Vec::new();
            let mut dirs = Vec::new();
            loop {
                items.push(self.item()?);
                dirs.push(if self.eat_word("desc") {
                    Direction::Desc
                } else {
                    self.eat_word("asc");
                    Direction::Asc
                });
                if !self.eat_sym(",") {
                    break;
                }
            }
            if dirs.iter().any(|d| *d != dirs[0]) {
                return Err(Error::Unsupported("mixed ORDER BY directions".into()));
            }
            Some((items, dirs[0]))
        } else {
            None
        };
        let limit = if self.eat_word("limit") {
            match self.peek() {
                Some(Tok::Literal) => {
                    self.pos += 1;
                    true
                }
                _ => return Err(self.unexpected("a LIMIT value")),
            }
        } else {
            false
        };
        Ok(RawQuery {
            distinct,
            select,
            from,
            filter,
            group,
            having,
            order,
            limit,
        })
    }

    fn from(&mut self) -> Result<Vec<(String, Option<String>)>> {
        let mut tables = vec![self.table_ref()?];
        loop {
            if self.eat_sym(",") {
                tables.push(self.table_ref()?);
                continue;
            }
            let inner = self.eat_word("inner");
            if self.eat_word("join") {
                tables.push(self.table_ref()?);
                if self.eat_word("on") {
                    // Join conditions are implied by foreign keys and not kept.
                    self.cond()?;
                }
                continue;
            }
            if inner {
                return Err(self.unexpected("`JOIN`"));
            }
            if matches!(self.peek(), Some(Tok::Word(w)) if w == "left" || w == "right" || w == "outer" || w == "natural" || w == "cross")
            {
                return Err(Error::Unsupported("outer or natural joins".into()));
            }
            break;
        }
        Ok(tables)
    }

    fn table_ref(&mut self) -> Result<(String, Option<String>)> {
        if self.peek_sym("(") {
            return Err(Error::Unsupported("subquery in FROM".into()));
        }
        let name = self.ident()?;
        let alias = if self.eat_word("as") || matches!(self.peek(), Some(Tok::Word(w)) if !is_keyword(w)) {
            Some(self.ident()?)
        } else {
            None
        };
        Ok((name, alias))
    }

    fn agg(&mut self) -> Option<AggFn> {
        let f = match self.peek() {
            Some(Tok::Word(w)) => match w.as_str() {
                "max" => AggFn::Max,
                "min" => AggFn::Min,
                "count" => AggFn::Count,
                "sum" => AggFn::Sum,
                "avg" => AggFn::Avg,
                _ => return None,
            },
            _ => return None,
        };
        if matches!(self.toks.get(self.pos + 1), Some(Tok::Sym("("))) {
            self.pos += 1;
            Some(f)
        } else {
            None
        }
    }

    fn item(&mut self) -> Result<RawItem> {
        if let Some(agg) = self.agg() {
            self.expect_sym("(")?;
            let distinct = self.eat_word("distinct");
            let col = self.colref()?;
            self.expect_sym(")")?;
            return Ok(RawItem {
                agg: Some(agg),
                distinct,
                col,
            });
        }
        if self.peek_sym("(") {
            return Err(Error::Unsupported("parenthesized or arithmetic expression".into()));
        }
        let col = self.colref()?;
        if self.peek_sym("*") {
            return Err(Error::Unsupported("arithmetic expression".into()));
        }
        Ok(RawItem {
            agg: None,
            distinct: false,
            col,
        })
    }

    fn colref(&mut self) -> Result<RawCol> {
        if self.eat_sym("*") {
            return Ok(RawCol {
                qualifier: None,
                name: None,
            });
        }
        let first = self.ident()?;
        if self.eat_sym(".") {
            if self.eat_sym("*") {
                return Ok(RawCol {
                    qualifier: Some(first),
                    name: None,
                });
            }
            let name = self.ident()?;
            return Ok(RawCol {
                qualifier: Some(first),
                name: Some(name),
            });
        }
        Ok(RawCol {
            qualifier: None,
            name: Some(first),
        })
    }

    fn cond(&mut self) -> Result<RawCond> {
        let left = self.conj()?;
        if self.eat_word("or") {
            let right = self.cond()?;
            return Ok(RawCond::Or(Box::new(left), Box::new(right)));
        }
        Ok(left)
    }

    fn conj(&mut self) -> Result<RawCond> {
        let left = self.pred()?;
        if self.eat_word("and") {
            let right = self.conj()?;
            return Ok(RawCond::And(Box::new(left), Box::new(right)));
        }
        Ok(left)
    }

    fn pred(&mut self) -> Result<RawCond> {
        if self.peek_sym("(") {
            if matches!(self.toks.get(self.pos + 1), Some(Tok::Word(w)) if w == "select") {
                return Err(Error::Unsupported("subquery on the left of a predicate".into()));
            }
            self.pos += 1;
            let c = self.cond()?;
            self.expect_sym(")")?;
            return Ok(c);
        }
        if self.eat_word("not") {
            return Err(Error::Unsupported("NOT over a condition".into()));
        }
        let item = self.item()?;
        let negated = self.eat_word("not");
        if self.eat_word("between") {
            if negated {
                return Err(Error::Unsupported("NOT BETWEEN".into()));
            }
            let lo = self.operand()?;
            self.expect_word("and")?;
            let hi = self.operand()?;
            return Ok(RawCond::Between(item, lo, hi));
        }
        if self.eat_word("in") {
            let o = self.operand()?;
            return Ok(if negated {
                RawCond::NotIn(item, o)
            } else {
                RawCond::In(item, o)
            });
        }
        if self.eat_word("like") {
            let o = self.operand()?;
            return Ok(if negated {
                RawCond::NotLike(item, o)
            } else {
                RawCond::Like(item, o)
            });
        }
        if negated {
            return Err(self.unexpected("`IN`, `LIKE` or `BETWEEN` after `NOT`"));
        }
        let op = match self.peek() {
            Some(Tok::Sym("=")) => CmpOp::Eq,
            Some(Tok::Sym("!=")) => CmpOp::Ne,
            Some(Tok::Sym("<")) => CmpOp::Lt,
            Some(Tok::Sym(">")) => CmpOp::Gt,
            Some(Tok::Sym("<=")) => CmpOp::Le,
            Some(Tok::Sym(">=")) => CmpOp::Ge,
            _ => return Err(self.unexpected("a comparison operator")),
        };
        self.pos += 1;
        let o = self.operand()?;
        Ok(RawCond::Compare(op, item, o))
    }

    fn operand(&mut self) -> Result<RawOperand> {
        match self.peek() {
            Some(Tok::Literal) => {
                self.pos += 1;
                Ok(RawOperand::Value)
            }
            Some(Tok::Sym("(")) => {
                self.pos += 1;
                if !self.peek_word("select") {
                    return Err(Error::Unsupported("value lists".into()));
                }
                let s = self.sql()?;
                self.expect_sym(")")?;
                Ok(RawOperand::Nested(Box::new(s)))
            }
            Some(Tok::Word(_)) => {
                if self.agg().is_some() {
                    return Err(Error::Unsupported("aggregate on the right of a predicate".into()));
                }
                let c = self.colref()?;
                if c.name.is_none() {
                    return Err(Error::Unsupported("`*` as an operand".into()));
                }
                Ok(RawOperand::Col(c))
            }
            _ => Err(self.unexpected("a value, column or subquery")),
        }
    }
}

// ---------------------------------------------------------------- resolution

struct Resolver<'a> {
    schema: &'a Schema,
    /// One entry per nesting level: (table id, alias).
    scopes: Vec<Vec<(usize, Option<String>)>>,
}

impl Resolver<'_> {
    fn sql(&mut self, raw: &RawSql) -> Result<Sql> {
        let query = self.query(&raw.query)?;
        let compound = match &raw.compound {
            Some((op, rhs)) => Some((*op, Box::new(self.sql(rhs)?))),
            None => None,
        };
        Ok(Sql { query, compound })
    }

    fn query(&mut self, raw: &RawQuery) -> Result<Query> {
        let mut scope = Vec::new();
        for (name, alias) in &raw.from {
            let t = self.schema.table_id(name).ok_or_else(|| Error::Unknown {
                kind: "table",
                name: name.clone(),
            })?;
            if scope.iter().any(|(u, _)| *u == t) {
                return Err(Error::Unsupported(format!("self-join on `{name}`")));
            }
            scope.push((t, alias.clone()));
        }
        let from = scope.iter().map(|(t, _)| *t).collect();
        self.scopes.push(scope);
        let result = (|| {
            let select = raw.select.iter().map(|i| self.item(i)).collect::<Result<Vec<_>>>()?;
            let filter = raw.filter.as_ref().map(|c| self.cond(c)).transpose()?;
            let group = if raw.group.is_empty() {
                None
            } else {
                let columns = raw
                    .group
                    .iter()
                    .map(|c| match self.col(c)? {
                        ColRef::Column(c) => Ok(c),
                        ColRef::Star => Err(Error::Unsupported("GROUP BY *".into())),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let having = raw.having.as_ref().map(|c| self.cond(c)).transpose()?;
                Some(GroupBy { columns, having })
            };
            let order = match &raw.order {
                Some((items, direction)) => Some(OrderBy {
                    items: items.iter().map(|i| self.item(i)).collect::<Result<_>>()?,
                    direction: *direction,
                }),
                None => None,
            };
            Ok(Query {
                distinct: raw.distinct,
                select,
                from,
                filter,
                group,
                order,
                limit: raw.limit,
            })
        })();
        self.scopes.pop();
        result
    }

    fn item(&mut self, raw: &RawItem) -> Result<Item> {
        let col = self.col(&raw.col)?;
        if raw.agg.is_none() && col == ColRef::Star && raw.distinct {
            return Err(Error::Unsupported("DISTINCT *".into()));
        }
        Ok(Item {
            agg: raw.agg,
            distinct: raw.distinct && raw.agg.is_some(),
            col,
        })
    }

    fn col(&self, raw: &RawCol) -> Result<ColRef> {
        let Some(name) = &raw.name else {
            return Ok(ColRef::Star);
        };
        let schema = self.schema;
        let unknown = || Error::Unknown {
            kind: "column",
            name: match &raw.qualifier {
                Some(q) => format!("{q}.{name}"),
                None => name.clone(),
            },
        };
        if let Some(q) = &raw.qualifier {
            for scope in self.scopes.iter().rev() {
                for (t, alias) in scope {
                    if alias.as_deref() == Some(q.as_str()) || schema.tables[*t].name == *q {
                        return schema.column_in_table(*t, name).map(ColRef::Column).ok_or_else(unknown);
                    }
                }
            }
            let t = schema.table_id(q).ok_or_else(|| Error::Unknown {
                kind: "table",
                name: q.clone(),
            })?;
            return schema.column_in_table(t, name).map(ColRef::Column).ok_or_else(unknown);
        }
        for scope in self.scopes.iter().rev() {
            let hits: Vec<usize> = scope
                .iter()
                .filter_map(|(t, _)| schema.column_in_table(*t, name))
                .collect();
            match hits.len() {
                0 => continue,
                1 => return Ok(ColRef::Column(hits[0])),
                _ => return Err(Error::Parse(format!("ambiguous column `{name}`"))),
            }
        }
        Err(unknown())
    }

    fn operand(&mut self, raw: &RawOperand) -> Result<Operand> {
        Ok(match raw {
            RawOperand::Value => Operand::Value,
            RawOperand::Col(c) => match self.col(c)? {
                ColRef::Column(c) => Operand::Column(c),
                ColRef::Star => return Err(Error::Unsupported("`*` as an operand".into())),
            },
            RawOperand::Nested(s) => Operand::Nested(Box::new(self.sql(s)?)),
        })
    }

    fn cond(&mut self, raw: &RawCond) -> Result<Cond> {
        Ok(match raw {
            RawCond::And(a, b) => Cond::And(Box::new(self.cond(a)?), Box::new(self.cond(b)?)),
            RawCond::Or(a, b) => Cond::Or(Box::new(self.cond(a)?), Box::new(self.cond(b)?)),
            RawCond::Compare(op, i, o) => Cond::Compare(*op, self.item(i)?, self.operand(o)?),
            RawCond::Between(i, a, b) => Cond::Between(self.item(i)?, self.operand(a)?, self.operand(b)?),
            RawCond::In(i, o) => Cond::In(self.item(i)?, self.operand(o)?),
            RawCond::NotIn(i, o) => Cond::NotIn(self.item(i)?, self.operand(o)?),
            RawCond::Like(i, o) => Cond::Like(self.item(i)?, self.operand(o)?),
            RawCond::NotLike(i, o) => Cond::NotLike(self.item(i)?, self.operand(o)?),
        })
    }
}

/// Parses and resolves a query against `schema`.
pub fn parse(src: &str, schema: &Schema) -> Result<Sql> {
    let toks = lex(src)?;
    if toks.is_empty() {
        return Err(Error::Parse("empty query".into()));
    }
    let mut p = Parser { toks, pos: 0 };
    let raw = p.sql()?;
    if p.pos != p.toks.len() {
        return Err(p.unexpected("end of query"));
    }
    Resolver {
        schema,
        scopes: Vec::new(),
    }
    .sql(&raw)
}

// ---------------------------------------------------------------- rendering

/// Canonical text: uppercase keywords, single spaces, `?` for literals,
/// columns qualified by table name whenever the query joins tables.
pub fn render(sql: &Sql, schema: &Schema) -> String {
    let mut out = String::new();
    Renderer { schema }.sql(sql, &mut out);
    out
}

/// `render(parse(src))`.
pub fn normalize(src: &str, schema: &Schema) -> Result<String> {
    Ok(render(&parse(src, schema)?, schema))
}

struct Renderer<'a> {
    schema: &'a Schema,
}

impl Renderer<'_> {
    fn sql(&self, sql: &Sql, out: &mut String) {
        self.query(&sql.query, out);
        if let Some((op, rhs)) = &sql.compound {
            out.push_str(match op {
                SetOp::Intersect => " INTERSECT ",
                SetOp::Union => " UNION ",
                SetOp::Except => " EXCEPT ",
            });
            self.sql(rhs, out);
        }
    }

    fn column(&self, c: usize, q: &Query, out: &mut String) {
        let table = self.schema.columns[c].table;
        if q.from.len() > 1 || !q.from.contains(&table) {
            out.push_str(&self.schema.qualified(c));
        } else {
            out.push_str(&self.schema.columns[c].name);
        }
    }

    fn item(&self, item: &Item, q: &Query, out: &mut String) {
        let mut col = String::new();
        match item.col {
            ColRef::Star => col.push('*'),
            ColRef::Column(c) => self.column(c, q, &mut col),
        }
        match item.agg {
            Some(f) => {
                let name = match f {
                    AggFn::Max => "MAX",
                    AggFn::Min => "MIN",
                    AggFn::Count => "COUNT",
                    AggFn::Sum => "SUM",
                    AggFn::Avg => "AVG",
                };
                let distinct = if item.distinct { "DISTINCT " } else { "" };
                let _ = write!(out, "{name}({distinct}{col})");
            }
            None => out.push_str(&col),
        }
    }

    fn items(&self, items: &[Item], q: &Query, out: &mut String) {
        for (i, item) in items.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            self.item(item, q, out);
        }
    }

    fn query(&self, q: &Query, out: &mut String) {
        out.push_str("SELECT ");
        if q.distinct {
            out.push_str("DISTINCT ");
        }
        self.items(&q.select, q, out);
        out.push_str(" FROM ");
        for (k, &t) in q.from.iter().enumerate() {
            if k > 0 {
                out.push_str(" JOIN ");
            }
            out.push_str(&self.schema.tables[t].name);
            if k > 0 {
                if let Some((a, b)) = q.from[..k].iter().find_map(|&u| self.schema.join_key(u, t)) {
                    let _ = write!(out, " ON {} = {}", self.schema.qualified(a), self.schema.qualified(b));
                }
            }
        }
        if let Some(c) = &q.filter {
            out.push_str(" WHERE ");
            self.cond(c, q, out);
        }
        if let Some(g) = &q.group {
            out.push_str(" GROUP BY ");
            for (i, &c) in g.columns.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                self.column(c, q, out);
            }
            if let Some(h) = &g.having {
                out.push_str(" HAVING ");
                self.cond(h, q, out);
            }
        }
        if let Some(o) = &q.order {
            out.push_str(" ORDER BY ");
            for (i, item) in o.items.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                self.item(item, q, out);
                if o.direction == Direction::Desc {
                    out.push_str(" DESC");
                }
            }
        }
        if q.limit {
            out.push_str(" LIMIT ?");
        }
    }

    fn operand(&self, o: &Operand, q: &Query, out: &mut String) {
        match o {
            Operand::Value => out.push('?'),
            Operand::Column(c) => self.column(*c, q, out),
            Operand::Nested(s) => {
                out.push('(');
                self.sql(s, out);
                out.push(')');
            }
        }
    }

    fn wrapped(&self, c: &Cond, parens: bool, q: &Query, out: &mut String) {
        if parens {
            out.push('(');
        }
        self.cond(c, q, out);
        if parens {
            out.push(')');
        }
    }

    // Parentheses are emitted exactly where the right-associative parse would
    // otherwise build a different tree.
    fn cond(&self, c: &Cond, q: &Query, out: &mut String) {
        let is_and = |c: &Cond| matches!(c, Cond::And(..));
        let is_or = |c: &Cond| matches!(c, Cond::Or(..));
        match c {
            Cond::And(a, b) => {
                self.wrapped(a, is_and(a) || is_or(a), q, out);
                out.push_str(" AND ");
                self.wrapped(b, is_or(b), q, out);
            }
            Cond::Or(a, b) => {
                self.wrapped(a, is_or(a), q, out);
                out.push_str(" OR ");
                self.cond(b, q, out);
            }
            Cond::Compare(op, i, o) => {
                self.item(i, q, out);
                out.push_str(match op {
                    CmpOp::Eq => " = ",
                    CmpOp::Ne => " != ",
                    CmpOp::Lt => " < ",
                    CmpOp::Gt => " > ",
                    CmpOp::Le => " <= ",
                    CmpOp::Ge => " >= ",
                });
                self.operand(o, q, out);
            }
            Cond::Between(i, a, b) => {
                self.item(i, q, out);
                out.push_str(" BETWEEN ");
                self.operand(a, q, out);
                out.push_str(" AND ");
                self.operand(b, q, out);
            }
            Cond::In(i, o) | Cond::NotIn(i, o) | Cond::Like(i, o) | Cond::NotLike(i, o) => {
                self.item(i, q, out);
                out.push_str(match c {
                    Cond::In(..) => " IN ",
                    Cond::NotIn(..) => " NOT IN ",
                    Cond::Like(..) => " LIKE ",
                    _ => " NOT LIKE ",
                });
                self.operand(o, q, out);
            }
        }
    }
}

// ---------------------------------------------------------------- analysis

/// Every table and column the query mentions, nested queries included.
pub fn schema_items(sql: &Sql) -> BTreeSet<SchemaItem> {
    let mut out = BTreeSet::new();
    visit_sql(sql, &mut |q| {
        out.extend(q.from.iter().map(|&t| SchemaItem::Table(t)));
        for_each_column(q, &mut |c| {
            out.insert(SchemaItem::Column(c));
        });
    });
    out
}

/// Parses `src` and returns its schema items.
pub fn schema_items_of(src: &str, schema: &Schema) -> Result<BTreeSet<SchemaItem>> {
    Ok(schema_items(&parse(src, schema)?))
}

/// Calls `f` on every query block, outermost first.
pub fn visit_sql(sql: &Sql, f: &mut impl FnMut(&Query)) {
    f(&sql.query);
    let mut nested = Vec::new();
    collect_nested(&sql.query, &mut nested);
    for n in nested {
        visit_sql(n, f);
    }
    if let Some((_, rhs)) = &sql.compound {
        visit_sql(rhs, f);
    }
}

/// Subqueries appearing directly in this block's conditions.
pub fn collect_nested<'a>(q: &'a Query, out: &mut Vec<&'a Sql>) {
    fn operand<'a>(o: &'a Operand, out: &mut Vec<&'a Sql>) {
        if let Operand::Nested(s) = o {
            out.push(s);
        }
    }
    fn cond<'a>(c: &'a Cond, out: &mut Vec<&'a Sql>) {
        match c {
            Cond::And(a, b) | Cond::Or(a, b) => {
                cond(a, out);
                cond(b, out);
            }
            Cond::Compare(_, _, o) | Cond::In(_, o) | Cond::NotIn(_, o) | Cond::Like(_, o) | Cond::NotLike(_, o) => {
                operand(o, out)
            }
            Cond::Between(_, a, b) => {
                operand(a, out);
                operand(b, out);
            }
        }
    }
    if let Some(c) = &q.filter {
        cond(c, out);
    }
    if let Some(h) = q.group.as_ref().and_then(|g| g.having.as_ref()) {
        cond(h, out);
    }
}

/// Columns referenced in one query block, excluding nested queries.
pub fn for_each_column(q: &Query, f: &mut impl FnMut(usize)) {
    fn item(i: &Item, f: &mut impl FnMut(usize)) {
        if let ColRef::Column(c) = i.col {
            f(c);
        }
    }
    fn operand(o: &Operand, f: &mut impl FnMut(usize)) {
        if let Operand::Column(c) = o {
            f(*c);
        }
    }
    fn cond(c: &Cond, f: &mut impl FnMut(usize)) {
        match c {
            Cond::And(a, b) | Cond::Or(a, b) => {
                cond(a, f);
                cond(b, f);
            }
            Cond::Compare(_, i, o) | Cond::In(i, o) | Cond::NotIn(i, o) | Cond::Like(i, o) | Cond::NotLike(i, o) => {
                item(i, f);
                operand(o, f);
            }
            Cond::Between(i, a, b) => {
                item(i, f);
                operand(a, f);
                operand(b, f);
            }
        }
    }
    q.select.iter().for_each(|i| item(i, f));
    if let Some(c) = &q.filter {
        cond(c, f);
    }
    if let Some(g) = &q.group {
        g.columns.iter().for_each(|&c| f(c));
        if let Some(h) = &g.having {
            cond(h, f);
        }
    }
    if let Some(o) = &q.order {
        o.items.iter().for_each(|i| item(i, f));
    }
}
