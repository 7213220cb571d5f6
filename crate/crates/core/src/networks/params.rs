//! Named parameter storage, grouped by the sub-network that owns each tensor.

use std::collections::BTreeMap;
use std::fmt;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Owner of a parameter. Update sets of the training phases are unions of groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    EncLowS,
    EncLowT,
    EncHigh,
    DecS,
    DecT,
    GenSt,
    GenTs,
    DiscSt,
    DiscTs,
}

impl Group {
    pub const ALL: [Group; 9] = [
        Group::EncLowS,
        Group::EncLowT,
        Group::EncHigh,
        Group::DecS,
        Group::DecT,
        Group::GenSt,
        Group::GenTs,
        Group::DiscSt,
        Group::DiscTs,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Group::EncLowS => "enc_low_s",
            Group::EncLowT => "enc_low_t",
            Group::EncHigh => "enc_high",
            Group::DecS => "dec_s",
            Group::DecT => "dec_t",
            Group::GenSt => "gen_st",
            Group::GenTs => "gen_ts",
            Group::DiscSt => "disc_st",
            Group::DiscTs => "disc_ts",
        }
    }

    fn bit(self) -> u16 {
        1 << (self as u16)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

/// A set of [`Group`]s.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GroupSet(u16);

impl GroupSet {
    pub const EMPTY: GroupSet = GroupSet(0);
    pub const ENCODERS: GroupSet = GroupSet(0b0_0000_0111);
    pub const DECODERS: GroupSet = GroupSet(0b0_0001_1000);
    pub const VAE: GroupSet = GroupSet(0b0_0001_1111);
    pub const GENERATORS: GroupSet = GroupSet(0b0_0110_0000);
    pub const DISCRIMINATORS: GroupSet = GroupSet(0b1_1000_0000);
    pub const ALL: GroupSet = GroupSet(0b1_1111_1111);

    pub fn of(groups: &[Group]) -> Self {
        GroupSet(groups.iter().fold(0, |acc, g| acc | g.bit()))
    }

    pub fn contains(self, g: Group) -> bool {
        self.0 & g.bit() != 0
    }

    pub fn union(self, other: GroupSet) -> Self {
        GroupSet(self.0 | other.0)
    }

    pub fn minus(self, other: GroupSet) -> Self {
        GroupSet(self.0 & !other.0)
    }

    pub fn complement(self) -> Self {
        GroupSet(!self.0 & Self::ALL.0)
    }

    pub fn iter(self) -> impl Iterator<Item = Group> {
        Group::ALL.into_iter().filter(move |g| self.contains(*g))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Optimized by gradient descent.
    Weight,
    /// State updated outside the optimizer (batch-norm running statistics).
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    pub group: Group,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// Not `Clone`: cloned [`Var`]s alias the same storage.
#[derive(Debug)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        ParamStore {
            dtype,
            device: Device::Cpu,
            entries: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Creates and registers a tensor under `<group prefix>.<local>`.
    pub fn create(
        &mut self,
        group: Group,
        local: &str,
        shape: &[usize],
        init: Init,
        kind: ParamKind,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let name = format!("{}.{local}", group.prefix());
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("parameter {name} registered twice")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Normal(std) => (0..n)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
                .collect(),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        let tensor = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        self.entries.insert(
            name,
            Param {
                var: var.clone(),
                group,
                kind,
            },
        );
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Trainable tensors owned by `groups`, in name order.
    pub fn weights(&self, groups: GroupSet) -> Vec<(String, Var)> {
        self.entries
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Weight && groups.contains(p.group))
            .map(|(n, p)| (n.clone(), p.var.clone()))
            .collect()
    }

    /// Running-statistics buffers owned by `groups`, in name order.
    pub fn buffers(&self, groups: GroupSet) -> Vec<(String, Var)> {
        self.entries
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Buffer && groups.contains(p.group))
            .map(|(n, p)| (n.clone(), p.var.clone()))
            .collect()
    }

    /// Number of trainable scalars owned by `groups`.
    pub fn weight_count(&self, groups: GroupSet) -> usize {
        self.weights(groups).iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and values of every tensor in `group`
    /// (weights and buffers alike).
    pub fn group_digest(&self, group: Group) -> Result<String> {
        let mut h = Sha256::new();
        for (name, p) in self.entries.iter().filter(|(_, p)| p.group == group) {
            h.update(name.as_bytes());
            for d in p.var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.var.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Digests of all groups, keyed by group.
    pub fn digests(&self) -> Result<BTreeMap<Group, String>> {
        Group::ALL
            .into_iter()
            .map(|g| Ok((g, self.group_digest(g)?)))
            .collect()
    }

    /// Overwrites a tensor's value, checking its shape.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let p = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if p.var.dims() != value.dims() {
            return Err(Error::Config(format!(
                "parameter {name}: shape {:?} does not match stored {:?}",
                value.dims(),
                p.var.dims()
            )));
        }
        p.var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Copies every tensor of `groups` from `other` (same architecture).
    pub fn copy_groups_from(&self, other: &ParamStore, groups: GroupSet) -> Result<()> {
        let names = self
            .entries
            .iter()
            .filter(|(_, p)| groups.contains(p.group))
            .map(|(n, _)| n);
        for name in names {
            let src = other
                .get(name)
                .ok_or_else(|| Error::Config(format!("source model lacks parameter {name}")))?;
            self.assign(name, src.var.as_tensor())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn group_sets() {
        assert!(GroupSet::VAE.contains(Group::EncHigh));
        assert!(GroupSet::VAE.contains(Group::DecT));
        assert!(!GroupSet::VAE.contains(Group::GenSt));
        assert_eq!(GroupSet::ENCODERS.union(GroupSet::DECODERS), GroupSet::VAE);
        assert_eq!(
            GroupSet::VAE
                .union(GroupSet::GENERATORS)
                .union(GroupSet::DISCRIMINATORS),
            GroupSet::ALL
        );
        assert_eq!(GroupSet::DECODERS.complement().iter().count(), 7);
        assert_eq!(GroupSet::of(&[Group::DiscSt, Group::DiscTs]), GroupSet::DISCRIMINATORS);
    }

    #[test]
    fn digests_track_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new(DType::F32);
        let w = store
            .create(Group::DecS, "w", &[2, 3], Init::Normal(1.0), ParamKind::Weight, &mut rng)
            .unwrap();
        let before = store.group_digest(Group::DecS).unwrap();
        let untouched = store.group_digest(Group::DecT).unwrap();
        w.set(&w.as_tensor().affine(2.0, 0.0).unwrap()).unwrap();
        assert_ne!(store.group_digest(Group::DecS).unwrap(), before);
        assert_eq!(store.group_digest(Group::DecT).unwrap(), untouched);
    }

    #[test]
    fn duplicate_names_and_bad_shapes_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new(DType::F32);
        store
            .create(Group::GenSt, "a", &[2], Init::Zeros, ParamKind::Weight, &mut rng)
            .unwrap();
        assert!(store
            .create(Group::GenSt, "a", &[2], Init::Zeros, ParamKind::Weight, &mut rng)
            .is_err());
        let wrong = Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(store.assign("gen_st.a", &wrong), Err(Error::Config(_))));
    }
}
