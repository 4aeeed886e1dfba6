//! Attribute categories and per-sample attribute labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Capture domain of an image: professional shop photo or user street photo.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Online,
    Offline,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::Online => "online",
            Domain::Offline => "offline",
        })
    }
}

/// One attribute value index per category; `None` marks an unannotated
/// category.
pub type AttributeLabels = Vec<Option<usize>>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub cardinality: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    categories: Vec<Category>,
}

impl AttributeSchema {
    pub fn new(categories: Vec<Category>) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::config("schema", "at least one category required"));
        }
        for (i, c) in categories.iter().enumerate() {
            if c.cardinality < 2 {
                return Err(Error::config(
                    format!("schema.{}", c.name),
                    format!("cardinality {} < 2", c.cardinality),
                ));
            }
            if categories[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::config(
                    format!("schema.{}", c.name),
                    "duplicate category name",
                ));
            }
        }
        Ok(AttributeSchema { categories })
    }

    pub fn from_pairs(pairs: &[(&str, usize)]) -> Result<Self> {
        Self::new(
            pairs
                .iter()
                .map(|&(name, cardinality)| Category {
                    name: name.to_string(),
                    cardinality,
                })
                .collect(),
        )
    }

    /// The nine clothing categories of the crawled shop dataset (179 values).
    pub fn clothing_reference() -> Self {
        Self::from_pairs(&[
            ("clothes_button", 12),
            ("clothes_category", 20),
            ("clothes_color", 56),
            ("clothes_length", 6),
            ("clothes_pattern", 27),
            ("clothes_shape", 10),
            ("collar_shape", 25),
            ("sleeve_length", 7),
            ("sleeve_shape", 16),
        ])
        .expect("reference schema is valid")
    }

    /// Four-category schema used for desk-scale synthetic data.
    pub fn desk_default() -> Self {
        Self::from_pairs(&[
            ("color", 6),
            ("pattern", 5),
            ("collar", 4),
            ("sleeve", 4),
        ])
        .expect("default schema is valid")
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn total_cardinality(&self) -> usize {
        self.categories.iter().map(|c| c.cardinality).sum()
    }

    /// Checks that labels have one slot per category and values in range.
    pub fn validate(&self, labels: &[Option<usize>]) -> Result<()> {
        if labels.len() != self.categories.len() {
            return Err(Error::Validation(format!(
                "{} attribute slots for {} categories",
                labels.len(),
                self.categories.len()
            )));
        }
        for (c, l) in self.categories.iter().zip(labels) {
            if let Some(v) = *l {
                if v >= c.cardinality {
                    return Err(Error::Validation(format!(
                        "value {v} out of range for `{}` ({} values)",
                        c.name, c.cardinality
                    )));
                }
            }
        }
        Ok(())
    }

    /// Copy of the schema without the named category.
    pub fn without(&self, name: &str) -> Result<Self> {
        Self::new(
            self.categories
                .iter()
                .filter(|c| c.name != name)
                .cloned()
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_schema_totals() {
        let s = AttributeSchema::clothing_reference();
        assert_eq!(s.len(), 9);
        assert_eq!(s.total_cardinality(), 179);
        assert_eq!(s.categories()[2].cardinality, 56);
    }

    #[test]
    fn rejects_duplicates_and_tiny_cardinality() {
        assert!(AttributeSchema::from_pairs(&[("a", 3), ("a", 4)]).is_err());
        let err = AttributeSchema::from_pairs(&[("a", 3), ("b", 1)]).unwrap_err();
        assert!(err.to_string().contains("schema.b"));
    }

    #[test]
    fn validate_labels() {
        let s = AttributeSchema::desk_default();
        assert!(s.validate(&[Some(5), None, Some(0), Some(3)]).is_ok());
        assert!(s.validate(&[Some(6), None, None, None]).is_err());
        assert!(s.validate(&[None, None]).is_err());
    }
}
