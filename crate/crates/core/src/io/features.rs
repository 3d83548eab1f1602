//! JSON-lines feature files.
//!
//! One record per line:
//!
//! ```json
//! {"id":"img-001","checkpoint":"ck1","category":"characters","class":"anya","subclass":null,"prompt_type":"trigger","vector":[0.1,0.2]}
//! {"id":"img-002","class":"anya","maps":[{"layer":"conv1_1","c":2,"h":1,"w":2,"data":[1,2,3,4]}]}
//! ```
//!
//! Every record carries either `vector` or `maps`. Blank lines are skipped.

use std::path::Path;

use serde::{Deserialize, Serialize};

use indexmap::IndexMap;

use super::{read_text, FormatError};
use crate::error::{Error, Result};
use crate::metrics::FeatureSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapRecord {
    pub layer: String,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl MapRecord {
    /// The map as a `c × h × w` tensor.
    pub fn tensor(&self) -> Result<Tensor> {
        Tensor::new(&[self.c, self.h, self.w], self.data.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub class: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subclass: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub maps: Option<Vec<MapRecord>>,
}

fn check(rec: &FeatureRecord) -> std::result::Result<(), String> {
    match (&rec.vector, &rec.maps) {
        (Some(_), Some(_)) => return Err("record has both 'vector' and 'maps'".into()),
        (None, None) => return Err("record has neither 'vector' nor 'maps'".into()),
        _ => {}
    }
    if let Some(v) = &rec.vector {
        if v.is_empty() {
            return Err("'vector' is empty".into());
        }
    }
    for m in rec.maps.iter().flatten() {
        if m.c == 0 || m.h == 0 || m.w == 0 {
            return Err(format!("map '{}' has a zero extent", m.layer));
        }
        if m.data.len() != m.c * m.h * m.w {
            return Err(format!(
                "map '{}' declares {}×{}×{} but holds {} values",
                m.layer,
                m.c,
                m.h,
                m.w,
                m.data.len()
            ));
        }
    }
    Ok(())
}

/// Parses JSON-lines text, checking each record and that every vector has
/// the same dimension.
pub fn parse_features(text: &str) -> Result<Vec<FeatureRecord>> {
    let mut out = Vec::new();
    let mut dim: Option<usize> = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| FormatError::Record {
            line: line_no,
            message,
        };
        let rec: FeatureRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        check(&rec).map_err(err)?;
        if let Some(v) = &rec.vector {
            match dim {
                None => dim = Some(v.len()),
                Some(d) if d != v.len() => {
                    return Err(err(format!(
                        "vector has dimension {} but earlier records have {d}",
                        v.len()
                    ))
                    .into())
                }
                _ => {}
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Vec<FeatureRecord>> {
    parse_features(&read_text(path.as_ref())?)
}

/// Record fields that can be used to group records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Id,
    Checkpoint,
    Category,
    Class,
    Subclass,
    PromptType,
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "id" => Ok(Label::Id),
            "checkpoint" => Ok(Label::Checkpoint),
            "category" => Ok(Label::Category),
            "class" => Ok(Label::Class),
            "subclass" => Ok(Label::Subclass),
            "prompt_type" | "prompt-type" => Ok(Label::PromptType),
            other => Err(Error::invalid(format!("unknown record label '{other}'"))),
        }
    }
}

impl FeatureRecord {
    pub fn label(&self, label: Label) -> Option<&str> {
        match label {
            Label::Id => Some(&self.id),
            Label::Checkpoint => self.checkpoint.as_deref(),
            Label::Category => self.category.as_deref(),
            Label::Class => Some(&self.class),
            Label::Subclass => self.subclass.as_deref(),
            Label::PromptType => self.prompt_type.as_deref(),
        }
    }

    /// Activation maps as `c × h × w` tensors, in file order.
    pub fn map_tensors(&self) -> Result<Vec<Tensor>> {
        let maps = self
            .maps
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("record '{}' has no maps", self.id)))?;
        maps.iter().map(MapRecord::tensor).collect()
    }
}

/// The `vector` of every record, in order.
pub fn feature_set(records: &[FeatureRecord]) -> Result<FeatureSet> {
    let vectors = records
        .iter()
        .map(|r| {
            r.vector
                .clone()
                .ok_or_else(|| Error::invalid(format!("record '{}' has no vector", r.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    FeatureSet::new(vectors)
}

/// Vector sets keyed by `label`, in order of first appearance. Every record
/// must carry the label.
pub fn group_features(records: &[FeatureRecord], label: Label) -> Result<Vec<(String, FeatureSet)>> {
    let mut groups: IndexMap<&str, Vec<FeatureRecord>> = IndexMap::new();
    for r in records {
        let key = r
            .label(label)
            .ok_or_else(|| Error::invalid(format!("record '{}' has no {label:?} label", r.id)))?;
        groups.entry(key).or_default().push(r.clone());
    }
    groups
        .into_iter()
        .map(|(k, recs)| Ok((k.to_string(), feature_set(&recs)?)))
        .collect()
}
