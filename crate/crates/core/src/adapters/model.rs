use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{init_adapter_with_rng, Adapter, Algorithm, InitConfig, KronFactor, LayerShape, MergeScale};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Hyperparameters shared by every layer of an [`AdapterModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMetadata {
    pub algorithm: Algorithm,
    pub dim: usize,
    pub alpha: f64,
    pub factor: i64,
    pub seed: u64,
    pub format_version: u32,
}

impl ModelMetadata {
    pub fn scale(&self) -> Result<MergeScale> {
        MergeScale::new(self.alpha, self.dim)
    }

    pub fn kron_factor(&self) -> Result<KronFactor> {
        KronFactor::from_i64(self.factor)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerEntry {
    pub shape: LayerShape,
    pub adapter: Adapter,
}

/// Named, ordered collection of per-layer adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterModel {
    metadata: ModelMetadata,
    entries: IndexMap<String, LayerEntry>,
}

impl AdapterModel {
    pub fn new(metadata: ModelMetadata) -> Result<Self> {
        metadata.scale()?;
        metadata.kron_factor()?;
        Ok(Self {
            metadata,
            entries: IndexMap::new(),
        })
    }

    /// Zero-update adapters for every layer of `layers`.
    ///
    /// Layer `i` draws from stream `i` of a ChaCha8 generator seeded with
    /// `seed`, so adding or removing later layers never changes earlier ones.
    /// The Tucker flag only applies to conv layers.
    pub fn init(cfg: &InitConfig, layers: &[(String, LayerShape)], seed: u64) -> Result<Self> {
        let mut model = Self::new(ModelMetadata {
            algorithm: cfg.algorithm,
            dim: cfg.dim,
            alpha: cfg.alpha,
            factor: cfg.factor,
            seed,
            format_version: FORMAT_VERSION,
        })?;
        for (i, (name, shape)) in layers.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let layer_cfg = InitConfig {
                tucker: cfg.tucker && shape.is_conv(),
                ..cfg.clone()
            };
            let adapter = init_adapter_with_rng(&layer_cfg, shape, &mut rng)?;
            model.insert(name.clone(), adapter)?;
        }
        Ok(model)
    }

    /// Adds a layer. The adapter must match the model's algorithm and scale.
    pub fn insert(&mut self, name: String, adapter: Adapter) -> Result<()> {
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate layer name '{name}'")));
        }
        if adapter.algorithm() != self.metadata.algorithm {
            return Err(Error::invalid(format!(
                "layer '{name}' is {} but the model is {}",
                adapter.algorithm(),
                self.metadata.algorithm
            )));
        }
        if adapter.scale() != self.metadata.scale()? {
            return Err(Error::invalid(format!(
                "layer '{name}' scale differs from the model metadata"
            )));
        }
        let shape = adapter.layer_shape()?;
        self.entries.insert(name, LayerEntry { shape, adapter });
        Ok(())
    }

    pub fn metadata(&self) -> &ModelMetadata {
        &self.metadata
    }

    pub fn entries(&self) -> &IndexMap<String, LayerEntry> {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&LayerEntry> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layers() -> Vec<(String, LayerShape)> {
        vec![
            ("a".into(), LayerShape::linear(8, 6).unwrap()),
            ("b".into(), LayerShape::conv2d(4, 3, 3).unwrap()),
        ]
    }

    #[test]
    fn init_builds_consistent_layers() {
        let cfg = InitConfig::loha(2, 1.0).with_tucker();
        let m = AdapterModel::init(&cfg, &layers(), 7).unwrap();
        assert_eq!(m.len(), 2);
        assert!(!m.get("a").unwrap().adapter.is_tucker());
        assert!(m.get("b").unwrap().adapter.is_tucker());
        for e in m.entries().values() {
            assert!(e.adapter.reconstruct().unwrap().is_all_zero());
        }
    }

    #[test]
    fn layer_streams_are_independent_of_later_layers() {
        let cfg = InitConfig::lora(2, 2.0);
        let full = AdapterModel::init(&cfg, &layers(), 3).unwrap();
        let prefix = AdapterModel::init(&cfg, &layers()[..1], 3).unwrap();
        assert_eq!(full.get("a"), prefix.get("a"));
    }

    #[test]
    fn insert_rejects_mismatches() {
        let cfg = InitConfig::lora(2, 2.0);
        let mut m = AdapterModel::init(&cfg, &layers(), 3).unwrap();
        let dup = m.get("a").unwrap().adapter.clone();
        assert!(m.insert("a".into(), dup.clone()).is_err());
        let mut other = dup;
        other.set_scale(MergeScale::new(5.0, 2).unwrap());
        assert!(m.insert("c".into(), other).is_err());
    }
}
