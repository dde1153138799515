//! Tabular CSV: one header row naming every schema attribute plus `label`.

use super::schema::{AttributeKind, AttributeRecord, AttributeSchema, AttributeValue};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TabularRow {
    pub record: AttributeRecord,
    pub label: u8,
}

pub fn parse_tabular_csv(bytes: &[u8], schema: &AttributeSchema) -> Result<Vec<TabularRow>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| Error::Input(format!("tabular csv header: {e}")))?
        .clone();
    if headers.len() != schema.len() + 1 {
        return Err(Error::Input(format!(
            "tabular csv has {} columns, expected {} attributes plus `label`",
            headers.len(),
            schema.len()
        )));
    }
    let mut columns = Vec::with_capacity(schema.len());
    for attr in &schema.attributes {
        let col = headers
            .iter()
            .position(|h| h == attr.name)
            .ok_or_else(|| Error::Input(format!("tabular csv is missing column `{}`", attr.name)))?;
        columns.push(col);
    }
    let label_col = headers
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| Error::Input("tabular csv is missing column `label`".into()))?;

    let mut rows = Vec::new();
    for (line, result) in reader.records().enumerate() {
        let rec = result.map_err(|e| Error::Input(format!("tabular csv row {}: {e}", line + 1)))?;
        let field = |col: usize| rec.get(col).unwrap_or("").trim();
        let values = schema
            .attributes
            .iter()
            .zip(&columns)
            .map(|(attr, &col)| {
                let raw = field(col);
                let bad = || Error::Input(format!("row {}: bad value `{raw}` for `{}`", line + 1, attr.name));
                match attr.kind {
                    AttributeKind::Categorical { .. } => raw.parse().map(AttributeValue::Level).map_err(|_| bad()),
                    AttributeKind::Numerical { .. } => match raw.parse::<f64>() {
                        Ok(x) if x.is_finite() => Ok(AttributeValue::Number(x)),
                        _ => Err(bad()),
                    },
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let label = match field(label_col) {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::Input(format!("row {}: label `{other}` is not 0 or 1", line + 1))),
        };
        rows.push(TabularRow {
            record: AttributeRecord { values },
            label,
        });
    }
    Ok(rows)
}

pub fn write_tabular_csv(rows: &[TabularRow], schema: &AttributeSchema) -> String {
    let mut out = String::new();
    for a in &schema.attributes {
        out.push_str(&a.name);
        out.push(',');
    }
    out.push_str("label\n");
    for row in rows {
        for v in &row.record.values {
            match v {
                AttributeValue::Level(l) => out.push_str(&l.to_string()),
                AttributeValue::Number(x) => out.push_str(&x.to_string()),
            }
            out.push(',');
        }
        out.push_str(&row.label.to_string());
        out.push('\n');
    }
    out
}
