//! LLM descriptors: the static facts about a source model that activation
//! tensors are validated against.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape facts for one source LLM.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmDescriptor {
    pub llm_id: String,
    /// Number of transformer layers captured per activation tensor.
    pub layers: usize,
    /// Hidden (feature) dimension.
    pub hidden_dim: usize,
}

/// Registry of known LLMs, keyed by id. Iteration order is lexicographic,
/// which keeps every sweep over registered models deterministic.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmRegistry {
    models: BTreeMap<String, LlmDescriptor>,
}

impl LlmRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, desc: LlmDescriptor) -> Result<()> {
        if desc.layers == 0 || desc.hidden_dim == 0 {
            return Err(Error::validation(format!(
                "llm '{}' must have positive layer count and hidden dim",
                desc.llm_id
            )));
        }
        if self.models.contains_key(&desc.llm_id) {
            return Err(Error::validation(format!(
                "llm '{}' already registered",
                desc.llm_id
            )));
        }
        self.models.insert(desc.llm_id.clone(), desc);
        Ok(())
    }

    pub fn get(&self, llm_id: &str) -> Option<&LlmDescriptor> {
        self.models.get(llm_id)
    }

    pub fn require(&self, llm_id: &str) -> Result<&LlmDescriptor> {
        self.get(llm_id)
            .ok_or_else(|| Error::validation(format!("llm '{llm_id}' is not registered")))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &LlmDescriptor> {
        self.models.values()
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// Largest hidden dim across registered models (`D_max`), used by the
    /// flattened-MLP detector to zero-pad features to a common width.
    pub fn max_hidden_dim(&self) -> usize {
        self.models.values().map(|d| d.hidden_dim).max().unwrap_or(0)
    }
}
