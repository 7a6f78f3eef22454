//! Registry for real-model adapters.
//!
//! An adapter wraps a pretrained latent-diffusion network behind the
//! [`Denoiser`] trait: `predict` must return both guidance branches plus the
//! requested decoder feature taps (blocks numbered 1..=4 from the lowest
//! resolution), self-attention maps and cross-attention maps; `capture_kv`
//! and the injection argument follow the same layer numbering; `vjp` reports
//! gradients through the network's autograd. Adapters are looked up by the
//! name given in `denoiser.adapter`.

use std::collections::BTreeMap;

use super::{Denoiser, LatentShape};
use crate::error::{Error, Result};

/// Builds a backend for a latent grid given the configured seed.
pub type AdapterFactory = Box<dyn Fn(u64, LatentShape) -> Result<Box<dyn Denoiser>> + Send + Sync>;

#[derive(Default)]
pub struct AdapterRegistry {
    factories: BTreeMap<String, AdapterFactory>,
}

impl AdapterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, factory: AdapterFactory) {
        self.factories.insert(name.into(), factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn build(&self, name: &str, seed: u64, shape: LatentShape) -> Result<Box<dyn Denoiser>> {
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| Error::Config(format!("no denoiser adapter registered under `{name}`")))?;
        factory(seed, shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{toy_backend, TapTable};

    #[test]
    fn lookup_by_name() {
        let mut reg = AdapterRegistry::new();
        reg.register(
            "toy-alias",
            Box::new(|seed, shape| Ok(Box::new(toy_backend(seed, shape, TapTable::default())?) as Box<dyn Denoiser>)),
        );
        assert_eq!(reg.names().collect::<Vec<_>>(), vec!["toy-alias"]);
        let b = reg.build("toy-alias", 3, LatentShape::new(3, 16, 16)).unwrap();
        assert_eq!(b.name(), "toy");
        let err = reg.build("sd15", 3, LatentShape::new(3, 16, 16)).err().unwrap();
        assert!(err.to_string().contains("sd15"));
    }
}
