//! Parameter storage. A model owns one [`VarStore`]; layers hold [`ParamId`]
//! handles into it. Forward passes borrow the store immutably, so a trained
//! model is safe to share across threads; optimizers take `&mut`.

use crate::Arr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Default)]
pub struct VarStore {
    vals: Vec<Arr>,
    names: Vec<String>,
    trainable: Vec<bool>,
}

impl VarStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Arr, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.vals.push(value);
        self.names.push(name);
        self.trainable.push(trainable);
        ParamId(self.vals.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Arr {
        &self.vals[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Arr {
        &mut self.vals[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.vals.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.vals.len())
            .filter(|&i| self.trainable[i])
            .map(ParamId)
            .collect()
    }

    /// Total number of scalar parameters (trainable only).
    pub fn num_trainable_scalars(&self) -> usize {
        (0..self.vals.len())
            .filter(|&i| self.trainable[i])
            .map(|i| self.vals[i].len())
            .sum()
    }

    /// Named snapshot of every entry, in registration order.
    pub fn state_dict(&self) -> Vec<(String, Arr)> {
        self.names
            .iter()
            .cloned()
            .zip(self.vals.iter().cloned())
            .collect()
    }

    /// Restore values by name. Every stored entry must be present with a
    /// matching shape.
    pub fn load_state_dict(&mut self, state: &[(String, Arr)]) -> Result<(), String> {
        for (i, name) in self.names.iter().enumerate() {
            let found = state
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| format!("missing parameter {name}"))?;
            if found.1.shape() != self.vals[i].shape() {
                return Err(format!(
                    "shape mismatch for {name}: {:?} vs {:?}",
                    found.1.shape(),
                    self.vals[i].shape()
                ));
            }
            self.vals[i] = found.1.clone();
        }
        Ok(())
    }
}
