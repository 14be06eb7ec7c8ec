use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamRef {
    pub offset: usize,
    pub len: usize,
}

impl ParamRef {
    pub fn of<'a>(&self, buf: &'a [f64]) -> &'a [f64] {
        &buf[self.offset..self.offset + self.len]
    }

    pub fn of_mut<'a>(&self, buf: &'a mut [f64]) -> &'a mut [f64] {
        &mut buf[self.offset..self.offset + self.len]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Flat storage for every trainable scalar of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    specs: Vec<ParamSpec>,
    values: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], mut init: impl FnMut() -> f64) -> ParamRef {
        let name = name.into();
        debug_assert!(self.specs.iter().all(|s| s.name != name), "duplicate parameter {name}");
        let len: usize = shape.iter().product();
        let offset = self.values.len();
        self.values.extend((0..len).map(|_| init()));
        self.specs.push(ParamSpec { name, shape: shape.to_vec(), offset });
        ParamRef { offset, len }
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Number of trainable scalars.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zeros(&self) -> Vec<f64> {
        vec![0.0; self.values.len()]
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.specs
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.offset..s.offset + s.numel()])
    }

    /// Rounds every value to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        round_slice_to_f32(&mut self.values);
    }

    /// FNV-1a hash over the raw bit patterns of all values.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for v in &self.values {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

pub(crate) fn round_slice_to_f32(xs: &mut [f64]) {
    for x in xs {
        *x = *x as f32 as f64;
    }
}
