//! Station-registered CSV tables and the conjunctive filter language used by
//! the data-query behavior.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QueryError {
    #[error("unknown table {0:?}")]
    UnknownTable(String),
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
    #[error("malformed predicate: {0}")]
    MalformedPredicate(String),
    #[error("{0}")]
    Io(String),
}

impl QueryError {
    pub fn code(&self) -> &'static str {
        match self {
            QueryError::UnknownTable(_) => "UNKNOWN_TABLE",
            QueryError::UnknownColumn(_) => "UNKNOWN_COLUMN",
            QueryError::MalformedPredicate(_) => "MALFORMED_PREDICATE",
            QueryError::Io(_) => "IO_ERROR",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
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

impl Op {
    pub const ALL: [Op; 6] = [Op::Eq, Op::Ne, Op::Lt, Op::Le, Op::Gt, Op::Ge];

    pub fn symbol(self) -> &'static str {
        match self {
            Op::Eq => "=",
            Op::Ne => "!=",
            Op::Lt => "<",
            Op::Le => "<=",
            Op::Gt => ">",
            Op::Ge => ">=",
        }
    }

    fn holds(self, ord: Ordering) -> bool {
        match self {
            Op::Eq => ord == Ordering::Equal,
            Op::Ne => ord != Ordering::Equal,
            Op::Lt => ord == Ordering::Less,
            Op::Le => ord != Ordering::Greater,
            Op::Gt => ord == Ordering::Greater,
            Op::Ge => ord != Ordering::Less,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Clause {
    pub column: String,
    pub op: Op,
    pub value: String,
}

impl Clause {
    pub fn new(column: &str, op: Op, value: &str) -> Self {
        Clause { column: column.into(), op, value: value.into() }
    }

    pub fn matches(&self, cell: &str) -> bool {
        self.op.holds(compare(cell, &self.value))
    }
}

/// `[+-]digits[.digits]`, or `[+-].digits`.
pub fn is_decimal(s: &str) -> bool {
    let body = s.strip_prefix(['+', '-']).unwrap_or(s);
    let (int, frac) = match body.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (body, None),
    };
    let digits = |p: &str| p.bytes().all(|b| b.is_ascii_digit());
    match frac {
        None => !int.is_empty() && digits(int),
        Some(f) => (!int.is_empty() || !f.is_empty()) && digits(int) && digits(f),
    }
}

/// Numeric when both sides are decimals, otherwise byte-wise on the raw text.
pub fn compare(cell: &str, literal: &str) -> Ordering {
    if is_decimal(cell) && is_decimal(literal) {
        if let (Ok(a), Ok(b)) = (cell.parse::<f64>(), literal.parse::<f64>()) {
            return a.partial_cmp(&b).unwrap_or(Ordering::Equal);
        }
    }
    cell.cmp(literal)
}

/// A conjunction of clauses; empty matches every row.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Predicate(pub Vec<Clause>);

impl Predicate {
    /// Accepts `null`, an array of `{column, op, value}`, or text such as
    /// `age > 30 AND city = Paris`. Text literals may be single or double
    /// quoted.
    pub fn from_json(v: &Value) -> Result<Self, QueryError> {
        match v {
            Value::Null => Ok(Predicate::default()),
            Value::String(s) => Self::parse(s),
            Value::Array(_) => {
                serde_json::from_value(v.clone()).map_err(|e| QueryError::MalformedPredicate(e.to_string()))
            }
            other => Err(QueryError::MalformedPredicate(format!("unexpected predicate {other}"))),
        }
    }

    pub fn parse(text: &str) -> Result<Self, QueryError> {
        let text = text.trim();
        if text.is_empty() {
            return Ok(Predicate::default());
        }
        let mut clauses = Vec::new();
        for part in split_and(text) {
            clauses.push(parse_clause(part.trim())?);
        }
        Ok(Predicate(clauses))
    }

    pub fn to_text(&self) -> String {
        self.0
            .iter()
            .map(|c| format!("{} {} \"{}\"", c.column, c.op.symbol(), c.value))
            .collect::<Vec<_>>()
            .join(" AND ")
    }
}

/// Splits on the keyword AND (any case) outside quotes.
fn split_and(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut parts = Vec::new();
    let mut start = 0;
    let mut quote: Option<u8> = None;
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        match quote {
            Some(q) if b == q => quote = None,
            Some(_) => {}
            None if b == b'"' || b == b'\'' => quote = Some(b),
            None => {
                let boundary_before = i == 0 || bytes[i - 1].is_ascii_whitespace();
                if boundary_before
                    && i + 3 <= bytes.len()
                    && bytes[i..i + 3].eq_ignore_ascii_case(b"and")
                    && (i + 3 == bytes.len() || bytes[i + 3].is_ascii_whitespace())
                {
                    parts.push(&text[start..i]);
                    start = i + 3;
                    i += 3;
                    continue;
                }
            }
        }
        i += 1;
    }
    parts.push(&text[start..]);
    parts
}

fn parse_clause(s: &str) -> Result<Clause, QueryError> {
    let bad = || QueryError::MalformedPredicate(format!("cannot parse clause {s:?}"));
    let pos = s.find(['=', '!', '<', '>']).ok_or_else(bad)?;
    let column = s[..pos].trim();
    let rest = &s[pos..];
    let (op, len) = if rest.starts_with("!=") {
        (Op::Ne, 2)
    } else if rest.starts_with("<=") {
        (Op::Le, 2)
    } else if rest.starts_with(">=") {
        (Op::Ge, 2)
    } else if rest.starts_with('<') {
        (Op::Lt, 1)
    } else if rest.starts_with('>') {
        (Op::Gt, 1)
    } else if rest.starts_with('=') {
        (Op::Eq, 1)
    } else {
        return Err(bad());
    };
    let raw = rest[len..].trim();
    if column.is_empty() || column.contains(char::is_whitespace) || raw.is_empty() {
        return Err(bad());
    }
    let value = match raw.as_bytes()[0] {
        q @ (b'"' | b'\'') => {
            if raw.len() < 2 || raw.as_bytes()[raw.len() - 1] != q {
                return Err(bad());
            }
            &raw[1..raw.len() - 1]
        }
        _ => {
            if raw.contains(char::is_whitespace) {
                return Err(bad());
            }
            raw
        }
    };
    Ok(Clause { column: column.to_string(), op, value: value.to_string() })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableInfo {
    pub name: String,
    pub columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryResult {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// The tables a station exposes, by name. Nothing else is reachable.
#[derive(Debug, Clone, Default)]
pub struct TableCatalog {
    tables: BTreeMap<String, PathBuf>,
}

impl TableCatalog {
    pub fn new(tables: BTreeMap<String, PathBuf>) -> Self {
        TableCatalog { tables }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tables.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    fn reader(&self, table: &str) -> Result<csv::Reader<std::fs::File>, QueryError> {
        let path = self.tables.get(table).ok_or_else(|| QueryError::UnknownTable(table.to_string()))?;
        csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| QueryError::Io(format!("{table}: {e}")))
    }

    /// Table names with their header rows. Unreadable tables are listed
    /// without columns.
    pub fn list(&self) -> Vec<TableInfo> {
        self.tables
            .keys()
            .map(|name| {
                let columns = self
                    .reader(name)
                    .and_then(|mut r| {
                        r.headers().map(|h| h.iter().map(str::to_string).collect()).map_err(|e| QueryError::Io(e.to_string()))
                    })
                    .unwrap_or_default();
                TableInfo { name: name.clone(), columns }
            })
            .collect()
    }

    /// Selected columns (all when empty) of rows satisfying every clause, in
    /// file order.
    pub fn query(&self, table: &str, columns: &[String], predicate: &Predicate) -> Result<QueryResult, QueryError> {
        let mut reader = self.reader(table)?;
        let headers: Vec<String> =
            reader.headers().map_err(|e| QueryError::Io(e.to_string()))?.iter().map(str::to_string).collect();
        let index_of = |c: &str| headers.iter().position(|h| h == c).ok_or_else(|| QueryError::UnknownColumn(c.to_string()));

        let selected: Vec<usize> = if columns.is_empty() {
            (0..headers.len()).collect()
        } else {
            columns.iter().map(|c| index_of(c)).collect::<Result<_, _>>()?
        };
        let clauses: Vec<(usize, &Clause)> =
            predicate.0.iter().map(|c| index_of(&c.column).map(|i| (i, c))).collect::<Result<_, _>>()?;

        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| QueryError::Io(format!("{table}: {e}")))?;
            let cell = |i: usize| record.get(i).unwrap_or("");
            if clauses.iter().all(|(i, c)| c.matches(cell(*i))) {
                rows.push(selected.iter().map(|&i| cell(i).to_string()).collect());
            }
        }
        Ok(QueryResult { columns: selected.iter().map(|&i| headers[i].clone()).collect(), rows })
    }
}
