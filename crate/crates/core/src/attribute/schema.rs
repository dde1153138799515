use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clinical attributes per subject.
pub const ATTRIBUTE_COUNT: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AttributeKind {
    Categorical { cardinality: usize },
    Numerical { min: f64, max: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeDescriptor {
    pub name: String,
    #[serde(flatten)]
    pub kind: AttributeKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub attributes: Vec<AttributeDescriptor>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttributeValue {
    Level(usize),
    Number(f64),
}

/// One subject's attribute values, in schema order.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeRecord {
    pub values: Vec<AttributeValue>,
}

/// A value after one-hot / min-max preprocessing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EncodedValue {
    OneHot { level: usize, cardinality: usize },
    Scaled(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedRecord {
    pub values: Vec<EncodedValue>,
    /// Numerical values that fell outside the schema range and were clamped.
    pub clamped: usize,
}

impl EncodedRecord {
    /// Concatenated one-hot blocks and scaled scalars.
    pub fn features(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for v in &self.values {
            match *v {
                EncodedValue::OneHot { level, cardinality } => {
                    out.extend((0..cardinality).map(|i| if i == level { 1.0 } else { 0.0 }))
                }
                EncodedValue::Scaled(x) => out.push(x),
            }
        }
        out
    }
}

impl AttributeSchema {
    pub fn from_json(text: &str) -> Result<Self> {
        let schema: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("schema: {e}")))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.attributes.len() != ATTRIBUTE_COUNT {
            return Err(Error::Config(format!(
                "schema must list exactly {ATTRIBUTE_COUNT} attributes, found {}",
                self.attributes.len()
            )));
        }
        let mut seen = HashSet::new();
        for a in &self.attributes {
            if a.name.is_empty() || a.name == "label" || !seen.insert(a.name.as_str()) {
                return Err(Error::Config(format!("invalid or duplicate attribute name `{}`", a.name)));
            }
            match a.kind {
                AttributeKind::Categorical { cardinality } if cardinality < 2 => {
                    return Err(Error::Config(format!(
                        "attribute `{}` needs cardinality >= 2",
                        a.name
                    )))
                }
                AttributeKind::Numerical { min, max } if !(min.is_finite() && max.is_finite() && min < max) => {
                    return Err(Error::Config(format!("attribute `{}` needs finite min < max", a.name)))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    /// Width of [`EncodedRecord::features`].
    pub fn feature_width(&self) -> usize {
        self.attributes
            .iter()
            .map(|a| match a.kind {
                AttributeKind::Categorical { cardinality } => cardinality,
                AttributeKind::Numerical { .. } => 1,
            })
            .sum()
    }

    /// One-hot encodes categorical values and min-max scales numerical ones,
    /// clamping out-of-range numbers into `[0, 1]`.
    pub fn encode(&self, record: &AttributeRecord) -> Result<EncodedRecord> {
        if record.values.len() != self.attributes.len() {
            return Err(Error::Input(format!(
                "record has {} values, schema has {}",
                record.values.len(),
                self.attributes.len()
            )));
        }
        let mut clamped = 0;
        let values = self
            .attributes
            .iter()
            .zip(&record.values)
            .map(|(attr, value)| match (&attr.kind, *value) {
                (&AttributeKind::Categorical { cardinality }, AttributeValue::Level(level)) => {
                    if level >= cardinality {
                        Err(Error::Input(format!(
                            "unknown level {level} for categorical attribute `{}`",
                            attr.name
                        )))
                    } else {
                        Ok(EncodedValue::OneHot { level, cardinality })
                    }
                }
                (&AttributeKind::Numerical { min, max }, AttributeValue::Number(x)) => {
                    if !x.is_finite() {
                        return Err(Error::Input(format!("non-finite value for `{}`", attr.name)));
                    }
                    let scaled = (x - min) / (max - min);
                    if !(0.0..=1.0).contains(&scaled) {
                        clamped += 1;
                    }
                    Ok(EncodedValue::Scaled(scaled.clamp(0.0, 1.0)))
                }
                _ => Err(Error::Input(format!("value kind does not match attribute `{}`", attr.name))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncodedRecord { values, clamped })
    }

    /// The clinical schema used by the synthetic generator.
    pub fn clinical_default() -> Self {
        let num = |name: &str, min: f64, max: f64| AttributeDescriptor {
            name: name.into(),
            kind: AttributeKind::Numerical { min, max },
        };
        let cat = |name: &str, cardinality: usize| AttributeDescriptor {
            name: name.into(),
            kind: AttributeKind::Categorical { cardinality },
        };
        Self {
            attributes: vec![
                num("age", 55.0, 95.0),
                cat("gender", 2),
                num("education", 6.0, 20.0),
                cat("apoe4", 3),
                num("ptau181", 5.0, 60.0),
                num("ttau", 80.0, 600.0),
                num("fdg", 0.8, 1.6),
            ],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(age: f64, gender: usize) -> AttributeRecord {
        use AttributeValue::*;
        AttributeRecord {
            values: vec![
                Number(age),
                Level(gender),
                Number(12.0),
                Level(1),
                Number(20.0),
                Number(300.0),
                Number(1.2),
            ],
        }
    }

    #[test]
    fn min_max_endpoints() {
        let s = AttributeSchema::clinical_default();
        let lo = s.encode(&record(55.0, 0)).unwrap();
        let hi = s.encode(&record(95.0, 1)).unwrap();
        assert_eq!(lo.values[0], EncodedValue::Scaled(0.0));
        assert_eq!(hi.values[0], EncodedValue::Scaled(1.0));
        assert_eq!(lo.values[1], EncodedValue::OneHot { level: 0, cardinality: 2 });
        assert_eq!(&lo.features()[1..3], &[1.0, 0.0]);
        assert_eq!(lo.features().len(), s.feature_width());
    }

    #[test]
    fn out_of_range_is_clamped_and_counted() {
        let s = AttributeSchema::clinical_default();
        let e = s.encode(&record(120.0, 0)).unwrap();
        assert_eq!(e.values[0], EncodedValue::Scaled(1.0));
        assert_eq!(e.clamped, 1);
    }

    #[test]
    fn unknown_level_names_attribute() {
        let s = AttributeSchema::clinical_default();
        let err = s.encode(&record(60.0, 2)).unwrap_err();
        assert!(err.to_string().contains("gender"), "{err}");
    }

    #[test]
    fn json_round_trip_and_validation() {
        let s = AttributeSchema::clinical_default();
        assert_eq!(AttributeSchema::from_json(&s.to_json()).unwrap(), s);
        let mut bad = s.clone();
        bad.attributes.pop();
        assert!(bad.validate().is_err());
        let mut bad = s.clone();
        bad.attributes[1].kind = AttributeKind::Categorical { cardinality: 1 };
        assert!(bad.validate().is_err());
        let mut bad = s;
        bad.attributes[0].kind = AttributeKind::Numerical { min: 3.0, max: 3.0 };
        assert!(bad.validate().is_err());
    }
}
