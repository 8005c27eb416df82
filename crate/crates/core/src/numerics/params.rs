use std::collections::BTreeMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameters, iterated in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn from_map(map: BTreeMap<String, Tensor>) -> Self {
        ParamSet { map }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.map.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
                .collect(),
        }
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_mirrors(&self, other: &ParamSet) -> Result<()> {
        if self.map.len() != other.map.len() {
            return Err(Error::Config(format!(
                "parameter sets differ in size: {} vs {}",
                self.map.len(),
                other.map.len()
            )));
        }
        for (name, t) in &self.map {
            match other.map.get(name) {
                Some(o) if o.shape() == t.shape() => {}
                Some(o) => {
                    return Err(Error::shape(
                        "params",
                        format!("`{name}` is {} vs {}", t.dims(), o.dims()),
                    ))
                }
                None => return Err(Error::Config(format!("missing parameter `{name}`"))),
            }
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &ParamSet) -> Result<()> {
        self.check_mirrors(other)?;
        for (name, t) in &mut self.map {
            t.add_assign(&other.map[name])?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.map.values_mut() {
            t.scale_in_place(factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.map.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            self.scale(max_norm / norm);
        }
        norm
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.map {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Uniform `(-k, k)` initialization with `k = 1 / sqrt(fan_in)`.
pub fn init_uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_scales_to_max_norm() {
        let mut p = ParamSet::default();
        p.insert("a", Tensor::from_vec(vec![3.0, 4.0])).unwrap();
        assert_eq!(p.clip_global_norm(1.0), 5.0);
        assert!((p.global_norm() - 1.0).abs() < 1e-12);
        assert_eq!(p.clip_global_norm(10.0), p.global_norm());
    }

    #[test]
    fn checksum_tracks_bits() {
        let mut p = ParamSet::default();
        p.insert("a", Tensor::from_vec(vec![1.0])).unwrap();
        let before = p.checksum();
        assert_eq!(before, p.clone().checksum());
        p.get_mut("a").unwrap().data_mut()[0] = 1.0 + f64::EPSILON;
        assert_ne!(before, p.checksum());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::default();
        p.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(p.insert("a", Tensor::scalar(2.0)).is_err());
    }
}
