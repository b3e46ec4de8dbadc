use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    Text,
    Number,
    Time,
    Boolean,
    Others,
}

impl ColumnType {
    fn parse(s: &str) -> ColumnType {
        match s.to_ascii_lowercase().as_str() {
            "text" => ColumnType::Text,
            "number" => ColumnType::Number,
            "time" => ColumnType::Time,
            "boolean" => ColumnType::Boolean,
            _ => ColumnType::Others,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    /// SQL identifier, lowercase.
    pub name: String,
    /// Natural-language words of the table name.
    pub words: Vec<String>,
    pub columns: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Column {
    pub name: String,
    pub words: Vec<String>,
    pub table: usize,
    pub ty: ColumnType,
}

/// A table or column, in the order used by the input serialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SchemaItem {
    Table(usize),
    Column(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schema {
    pub db_id: String,
    pub tables: Vec<Table>,
    pub columns: Vec<Column>,
    pub primary_keys: Vec<usize>,
    pub foreign_keys: Vec<(usize, usize)>,
}

/// Spider-style schema record.
#[derive(Debug, Deserialize)]
struct RawSchema {
    db_id: String,
    table_names: Vec<String>,
    #[serde(default)]
    table_names_original: Option<Vec<String>>,
    column_names: Vec<(i64, String)>,
    #[serde(default)]
    column_names_original: Option<Vec<(i64, String)>>,
    column_types: Vec<String>,
    #[serde(default)]
    primary_keys: Vec<serde_json::Value>,
    #[serde(default)]
    foreign_keys: Vec<(usize, usize)>,
}

pub fn words_of(name: &str) -> Vec<String> {
    name.split(|c: char| c == '_' || c.is_whitespace())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn identifier(name: &str) -> String {
    words_of(name).join("_")
}

impl Schema {
    fn from_raw(raw: RawSchema) -> Result<Schema> {
        let err = |message: String| Error::Schema {
            db_id: raw.db_id.clone(),
            message,
        };
        let table_ids = raw
            .table_names_original
            .clone()
            .unwrap_or_else(|| raw.table_names.clone());
        if table_ids.len() != raw.table_names.len() {
            return Err(err("table_names and table_names_original differ in length".into()));
        }
        let col_ids = raw
            .column_names_original
            .clone()
            .unwrap_or_else(|| raw.column_names.clone());
        if col_ids.len() != raw.column_names.len() || raw.column_types.len() != raw.column_names.len() {
            return Err(err("column_names, column_names_original and column_types differ in length".into()));
        }

        let mut tables: Vec<Table> = table_ids
            .iter()
            .zip(&raw.table_names)
            .map(|(id, natural)| Table {
                name: identifier(id),
                words: words_of(natural),
                columns: Vec::new(),
            })
            .collect();

        // The `[-1, "*"]` entry is not a real column; raw indices shift by one when present.
        let offset = usize::from(raw.column_names.first().is_some_and(|(t, _)| *t < 0));
        let mut columns = Vec::new();
        for (i, ((t, natural), (_, id))) in raw.column_names.iter().zip(&col_ids).enumerate().skip(offset) {
            let t = usize::try_from(*t)
                .ok()
                .filter(|t| *t < tables.len())
                .ok_or_else(|| err(format!("column {i} references table {t}")))?;
            tables[t].columns.push(columns.len());
            columns.push(Column {
                name: identifier(id),
                words: words_of(natural),
                table: t,
                ty: ColumnType::parse(&raw.column_types[i]),
            });
        }
        let remap = |raw_idx: usize| -> Result<usize> {
            raw_idx
                .checked_sub(offset)
                .filter(|c| *c < columns.len())
                .ok_or_else(|| err(format!("key references column {raw_idx}")))
        };
        let mut primary_keys = Vec::new();
        for pk in &raw.primary_keys {
            // Composite keys appear as nested arrays in some releases.
            let parts: Vec<u64> = match pk {
                serde_json::Value::Number(n) => n.as_u64().into_iter().collect(),
                serde_json::Value::Array(a) => a.iter().filter_map(|v| v.as_u64()).collect(),
                _ => vec![],
            };
            for p in parts {
                primary_keys.push(remap(p as usize)?);
            }
        }
        let foreign_keys = raw
            .foreign_keys
            .iter()
            .map(|(a, b)| Ok((remap(*a)?, remap(*b)?)))
            .collect::<Result<Vec<_>>>()?;

        let schema = Schema {
            db_id: raw.db_id.clone(),
            tables,
            columns,
            primary_keys,
            foreign_keys,
        };
        schema.validate()?;
        Ok(schema)
    }

    fn validate(&self) -> Result<()> {
        let err = |message: String| Error::Schema {
            db_id: self.db_id.clone(),
            message,
        };
        if self.tables.is_empty() {
            return Err(err("no tables".into()));
        }
        let mut seen = BTreeSet::new();
        for t in &self.tables {
            if !seen.insert(&t.name) {
                return Err(err(format!("duplicate table `{}`", t.name)));
            }
            let mut cols = BTreeSet::new();
            for &c in &t.columns {
                if !cols.insert(&self.columns[c].name) {
                    return Err(err(format!("duplicate column `{}.{}`", t.name, self.columns[c].name)));
                }
            }
        }
        Ok(())
    }

    pub fn table_id(&self, name: &str) -> Option<usize> {
        let name = name.to_ascii_lowercase();
        self.tables.iter().position(|t| t.name == name)
    }

    pub fn column_in_table(&self, table: usize, name: &str) -> Option<usize> {
        let name = name.to_ascii_lowercase();
        self.tables[table]
            .columns
            .iter()
            .copied()
            .find(|&c| self.columns[c].name == name)
    }

    /// Tables first, each followed by its columns.
    pub fn items(&self) -> Vec<SchemaItem> {
        let mut out = Vec::with_capacity(self.tables.len() + self.columns.len());
        for (t, table) in self.tables.iter().enumerate() {
            out.push(SchemaItem::Table(t));
            out.extend(table.columns.iter().map(|&c| SchemaItem::Column(c)));
        }
        out
    }

    pub fn item_words(&self, item: SchemaItem) -> &[String] {
        match item {
            SchemaItem::Table(t) => &self.tables[t].words,
            SchemaItem::Column(c) => &self.columns[c].words,
        }
    }

    /// Foreign-key link between two tables, as (column in `a`, column in `b`).
    pub fn join_key(&self, a: usize, b: usize) -> Option<(usize, usize)> {
        self.foreign_keys.iter().find_map(|&(x, y)| {
            let (tx, ty) = (self.columns[x].table, self.columns[y].table);
            if tx == a && ty == b {
                Some((x, y))
            } else if tx == b && ty == a {
                Some((y, x))
            } else {
                None
            }
        })
    }

    pub fn qualified(&self, column: usize) -> String {
        let c = &self.columns[column];
        format!("{}.{}", self.tables[c.table].name, c.name)
    }
}

/// Reads a JSON array of schema records.
pub fn load_schemas(path: impl AsRef<Path>) -> Result<Vec<Schema>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_schemas(&text).map_err(|e| match e {
        Error::Json { source, .. } => Error::Json {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

pub fn parse_schemas(text: &str) -> Result<Vec<Schema>> {
    let raw: Vec<RawSchema> = serde_json::from_str(text).map_err(|source| Error::Json {
        path: "<schema>".into(),
        source,
    })?;
    raw.into_iter().map(Schema::from_raw).collect()
}

/// Loads a single schema; fails unless the file holds exactly one record.
pub fn load_schema(path: impl AsRef<Path>) -> Result<Schema> {
    let mut all = load_schemas(path.as_ref())?;
    if all.len() != 1 {
        return Err(Error::Invalid(format!(
            "{}: expected one schema, found {}",
            path.as_ref().display(),
            all.len()
        )));
    }
    Ok(all.remove(0))
}

pub fn index_schemas(schemas: Vec<Schema>) -> HashMap<String, Schema> {
    schemas.into_iter().map(|s| (s.db_id.clone(), s)).collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny_schema() -> Schema {
        parse_schemas(
            r#"[{"db_id": "tiny",
                "table_names": ["singer"], "table_names_original": ["singer"],
                "column_names": [[-1, "*"], [0, "name"], [0, "age"]],
                "column_names_original": [[-1, "*"], [0, "Name"], [0, "Age"]],
                "column_types": ["text", "text", "number"],
                "primary_keys": [], "foreign_keys": []}]"#,
        )
        .unwrap()
        .remove(0)
    }

    #[test]
    fn star_entry_is_dropped_and_indices_remapped() {
        let s = tiny_schema();
        assert_eq!(s.columns.len(), 2);
        assert_eq!(s.columns[0].name, "name");
        assert_eq!(s.columns[1].ty, ColumnType::Number);
        assert_eq!(s.tables[0].columns, vec![0, 1]);
    }

    #[test]
    fn dangling_foreign_key_is_rejected() {
        let r = parse_schemas(
            r#"[{"db_id": "bad", "table_names": ["a"],
                "column_names": [[-1, "*"], [0, "x"]], "column_types": ["text", "text"],
                "primary_keys": [], "foreign_keys": [[1, 7]]}]"#,
        );
        assert!(matches!(r, Err(Error::Schema { .. })));
    }

    #[test]
    fn items_are_table_then_columns() {
        let s = tiny_schema();
        assert_eq!(
            s.items(),
            vec![SchemaItem::Table(0), SchemaItem::Column(0), SchemaItem::Column(1)]
        );
    }

    #[test]
    fn names_split_into_words() {
        assert_eq!(words_of("Singer_In concert"), vec!["singer", "in", "concert"]);
    }
}
