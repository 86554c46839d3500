use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::Mat;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Mat,
    pub trainable: bool,
}

/// Named, ordered collection of model parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            trainable,
        });
        id
    }

    /// Gaussian-initialized trainable or frozen matrix with std `scale`.
    pub fn randn(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        scale: f64,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> ParamId {
        let normal = Normal::new(0.0, scale).expect("finite scale");
        let value = Mat::from_shape_simple_fn(shape, || normal.sample(rng));
        self.insert(name, value, trainable)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: (usize, usize), trainable: bool) -> ParamId {
        self.insert(name, Mat::zeros(shape), trainable)
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: (usize, usize), trainable: bool) -> ParamId {
        self.insert(name, Mat::ones(shape), trainable)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool, trainable: bool) {
        for p in &mut self.params {
            if pred(&p.name) {
                p.trainable = trainable;
            }
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn to_record(&self) -> BTreeMap<String, TensorRecord> {
        self.params
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    TensorRecord {
                        shape: [p.value.nrows(), p.value.ncols()],
                        data: p.value.iter().copied().collect(),
                    },
                )
            })
            .collect()
    }

    /// Overwrite every parameter from a checkpoint record. The record must
    /// name exactly the same parameters with matching shapes.
    pub fn load_record(&mut self, record: &BTreeMap<String, TensorRecord>) -> Result<()> {
        if record.len() != self.params.len() {
            return Err(Error::Validation(format!(
                "checkpoint has {} parameters, model expects {}",
                record.len(),
                self.params.len()
            )));
        }
        for p in &mut self.params {
            let r = record.get(&p.name).ok_or_else(|| {
                Error::Validation(format!("checkpoint is missing parameter {}", p.name))
            })?;
            let shape = (r.shape[0], r.shape[1]);
            if shape != p.value.dim() || r.data.len() != p.value.len() {
                return Err(Error::Validation(format!(
                    "parameter {} has shape {:?} in checkpoint, expected {:?}",
                    p.name,
                    shape,
                    p.value.dim()
                )));
            }
            if r.data.iter().any(|z| !z.is_finite()) {
                return Err(Error::Validation(format!(
                    "parameter {} has non-finite values",
                    p.name
                )));
            }
            p.value = Mat::from_shape_vec(shape, r.data.clone()).expect("checked shape");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// Gradient buffers aligned with a [`ParamStore`]; `None` means zero.
#[derive(Debug, Clone, Default)]
pub struct Grads {
    slots: Vec<Option<Mat>>,
}

impl Grads {
    pub fn zeros(n: usize) -> Self {
        Self {
            slots: (0..n).map(|_| None).collect(),
        }
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &Mat) {
        match &mut self.slots[id.0] {
            Some(acc) => *acc += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of one scalar entry, zero when the parameter got none.
    pub fn entry(&self, id: ParamId, flat: usize) -> f64 {
        self.get(id)
            .map(|g| g.as_slice().expect("standard layout")[flat])
            .unwrap_or(0.0)
    }

    pub fn add_assign(&mut self, other: &Grads) {
        if self.slots.len() < other.slots.len() {
            self.slots.resize(other.slots.len(), None);
        }
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.slots.iter_mut().flatten() {
            *g *= factor;
        }
    }

    pub fn norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .map(|g| g.iter().map(|z| z * z).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn record_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.randn("a", (3, 4), 0.7, true, &mut rng);
        store.zeros("b", (1, 4), false);
        let rec = store.to_record();
        let json = serde_json::to_string(&rec).unwrap();
        let back: BTreeMap<String, TensorRecord> = serde_json::from_str(&json).unwrap();
        let mut other = store.clone();
        other.get_mut(ParamId(0)).value.fill(0.0);
        other.load_record(&back).unwrap();
        assert_eq!(other, store);
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let mut store = ParamStore::new();
        store.zeros("w", (2, 2), true);
        let mut rec = store.to_record();
        rec.get_mut("w").unwrap().shape = [4, 1];
        assert!(store.load_record(&rec).is_err());
    }
}
