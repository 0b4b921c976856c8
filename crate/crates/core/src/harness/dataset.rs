//! JSONL datasets: one labeled query per line.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::consensus::{AcceptabilitySpec, CanonicalClass, Canonicalizer, CanonicalizerKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetItem {
    pub id: String,
    pub query: String,
    /// Canonical keys of the acceptable answers.
    pub acceptable: Vec<String>,
    pub canonicalizer: CanonicalizerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub metadata: Map<String, Value>,
}

impl DatasetItem {
    pub fn validate(&self) -> Result<()> {
        if self.id.trim().is_empty() {
            return Err(Error::Schema("field `id` must be non-empty".into()));
        }
        if self.acceptable.is_empty() {
            return Err(Error::Schema(format!("item {}: field `acceptable` must be non-empty", self.id)));
        }
        let is_option = self.canonicalizer == CanonicalizerKind::Option;
        if is_option != self.options.is_some() {
            return Err(Error::Schema(format!(
                "item {}: field `options` must be present exactly when canonicalizer is \"option\"",
                self.id
            )));
        }
        self.acceptability()?;
        Ok(())
    }

    pub fn canonicalizer(&self) -> Result<Box<dyn Canonicalizer>> {
        self.canonicalizer.build(self.options.as_deref())
    }

    /// Acceptable keys, each passed through the item's canonicalizer so that
    /// `"42.0"` and `"42"` name the same class.
    pub fn acceptability(&self) -> Result<AcceptabilitySpec> {
        let canon = self.canonicalizer()?;
        let classes = self
            .acceptable
            .iter()
            .map(|key| {
                let c = canon.canonicalize(key);
                if c.is_invalid() {
                    Err(Error::Schema(format!(
                        "item {}: acceptable key {key:?} is not a valid {} answer",
                        self.id,
                        canon.name()
                    )))
                } else {
                    Ok(c)
                }
            })
            .collect::<Result<Vec<CanonicalClass>>>()?;
        AcceptabilitySpec::new(self.id.clone(), classes)
    }
}

/// Parse a JSONL dataset. Blank lines are skipped; ids must be unique.
pub fn parse_dataset(text: &str, path: &Path) -> Result<Vec<DatasetItem>> {
    let mut items = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Dataset {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let item: DatasetItem = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        item.validate().map_err(|e| err(e.to_string()))?;
        if !seen.insert(item.id.clone()) {
            return Err(err(format!("duplicate id {:?}", item.id)));
        }
        items.push(item);
    }
    Ok(items)
}

pub fn load_dataset(path: &Path) -> Result<Vec<DatasetItem>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path)
}

pub fn dataset_to_jsonl(items: &[DatasetItem]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, items: &[DatasetItem]) -> Result<()> {
    super::write_atomic(path, dataset_to_jsonl(items)?.as_bytes())
}
