//! Named parameter storage shared by the network, the optimizer and checkpoints.

use indexmap::IndexMap;
use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Flat name -> array map with stable insertion order, so checkpoints and
/// optimizer state line up across runs without any sorting step.
#[derive(Clone)]
pub struct ParamStore<F: Scalar> {
    entries: IndexMap<String, ArrayD<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<F>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::StructuralMismatch {
                name,
                detail: "duplicate parameter name".to_string(),
            });
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<F>> {
        self.entries.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&ArrayD<F>> {
        self.get(name).ok_or_else(|| Error::StructuralMismatch {
            name: name.to_string(),
            detail: "parameter missing from store".to_string(),
        })
    }

    /// Overwrite an existing entry; the replacement must keep the shape.
    pub fn set(&mut self, name: &str, value: ArrayD<F>) -> Result<()> {
        let slot = self.entries.get_mut(name).ok_or_else(|| Error::StructuralMismatch {
            name: name.to_string(),
            detail: "parameter missing from store".to_string(),
        })?;
        if slot.shape() != value.shape() {
            return Err(Error::StructuralMismatch {
                name: name.to_string(),
                detail: format!("shape {:?} cannot replace {:?}", value.shape(), slot.shape()),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<F>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    /// Total number of scalar values across all entries.
    pub fn total_scalars(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }

    /// Total scalars over entries whose name starts with `prefix`.
    pub fn scalars_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_same_structure(&self, other: &ParamStore<F>) -> Result<()> {
        for (name, value) in &self.entries {
            match other.entries.get(name) {
                None => {
                    return Err(Error::StructuralMismatch {
                        name: name.clone(),
                        detail: "present in one store but not the other".to_string(),
                    })
                }
                Some(v) if v.shape() != value.shape() => {
                    return Err(Error::StructuralMismatch {
                        name: name.clone(),
                        detail: format!("shape {:?} vs {:?}", value.shape(), v.shape()),
                    })
                }
                _ => {}
            }
        }
        if let Some((name, _)) = other.entries.iter().find(|(k, _)| !self.entries.contains_key(*k)) {
            return Err(Error::StructuralMismatch {
                name: name.clone(),
                detail: "present in one store but not the other".to_string(),
            });
        }
        Ok(())
    }

    /// Converts every entry element-wise through f64, for cross-precision use.
    pub fn convert<G: Scalar>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for (name, value) in &self.entries {
            out.entries
                .insert(name.clone(), value.mapv(|v| G::from_f64(v.to_f64())));
        }
        out
    }
}
