//! Layer manifests: a JSON list of `{"name", "kind", "shape"}` entries
//! describing the layers an adapter model is built over.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_text, FormatError};
use crate::adapters::LayerShape;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub name: String,
    pub kind: String,
    pub shape: Vec<usize>,
}

impl LayerSpec {
    pub fn layer_shape(&self) -> std::result::Result<LayerShape, String> {
        let shape = LayerShape::from_weight_shape(&self.shape).map_err(|e| e.to_string())?;
        let expected = if shape.is_conv() { "conv2d" } else { "linear" };
        if self.kind != expected {
            return Err(format!(
                "kind '{}' does not match shape {:?}",
                self.kind, self.shape
            ));
        }
        Ok(shape)
    }
}

fn schema(message: String) -> FormatError {
    FormatError::Schema {
        position: 0,
        message,
    }
}

pub fn parse_manifest(text: &str) -> Result<Vec<(String, LayerShape)>> {
    let specs: Vec<LayerSpec> = serde_json::from_str(text).map_err(|e| FormatError::Json {
        position: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        if !seen.insert(spec.name.clone()) {
            return Err(schema(format!("duplicate layer name '{}'", spec.name)).into());
        }
        let shape = spec
            .layer_shape()
            .map_err(|m| schema(format!("layer '{}': {m}", spec.name)))?;
        out.push((spec.name, shape));
    }
    if out.is_empty() {
        return Err(schema("manifest lists no layers".into()).into());
    }
    Ok(out)
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (start + column.saturating_sub(1)).min(text.len())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<(String, LayerShape)>> {
    parse_manifest(&read_text(path.as_ref())?)
}
