//! Parameter memory: adapter and generator weights addressed by condition
//! id or by nearest condition descriptor.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::adapter::Adapter;
use crate::classifier::DESCRIPTOR_LEN;
use crate::gan::GanModel;
use crate::metrics::euclidean;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Offline,
    Online,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub origin: Origin,
    /// Record whose weights seeded this one.
    pub parent: Option<u32>,
    /// Logical time of insertion.
    pub timestamp: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterRecord {
    pub condition_id: u32,
    pub name: String,
    pub descriptor: Vec<f32>,
    pub adapter: Adapter,
    /// Translation models; absent for the reference condition, which has
    /// nothing to translate to.
    pub generators: Option<GanModel>,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Memory {
    records: BTreeMap<u32, AdapterRecord>,
}

impl Memory {
    pub fn new() -> Self {
        Memory::default()
    }

    pub fn store(&mut self, record: AdapterRecord) -> Result<u32> {
        if record.descriptor.len() != DESCRIPTOR_LEN {
            return Err(Error::dim(
                "memory.store",
                format!("descriptor has {} values, expected {DESCRIPTOR_LEN}", record.descriptor.len()),
            ));
        }
        if record.descriptor.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "memory.store" });
        }
        let id = record.condition_id;
        if self.records.contains_key(&id) {
            return Err(Error::Duplicate(id));
        }
        self.records.insert(id, record);
        Ok(id)
    }

    pub fn query_by_index(&self, id: u32) -> Result<&AdapterRecord> {
        self.records
            .get(&id)
            .ok_or_else(|| Error::NotFound(format!("memory record {id}")))
    }

    /// Record with the closest stored descriptor; ties go to the lowest id.
    pub fn query_by_descriptor(&self, descriptor: &[f32]) -> Result<(&AdapterRecord, f64)> {
        self.nearest(descriptor, |_| true)
    }

    /// Closest record that carries translation models.
    pub fn nearest_with_generators(&self, descriptor: &[f32]) -> Result<(&AdapterRecord, f64)> {
        self.nearest(descriptor, |r| r.generators.is_some())
    }

    fn nearest(&self, descriptor: &[f32], keep: impl Fn(&AdapterRecord) -> bool) -> Result<(&AdapterRecord, f64)> {
        if descriptor.len() != DESCRIPTOR_LEN {
            return Err(Error::dim(
                "memory.query",
                format!("descriptor has {} values, expected {DESCRIPTOR_LEN}", descriptor.len()),
            ));
        }
        let mut best: Option<(&AdapterRecord, f64)> = None;
        for r in self.records.values().filter(|r| keep(r)) {
            let d = euclidean(&r.descriptor, descriptor);
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((r, d));
            }
        }
        best.ok_or_else(|| Error::NotFound("no matching record in memory".into()))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.records.keys().copied().collect()
    }

    /// Records in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = &AdapterRecord> {
        self.records.values()
    }

    /// Smallest id above every stored id and above `floor`.
    pub fn next_id(&self, floor: u32) -> u32 {
        self.records
            .keys()
            .next_back()
            .map_or(floor + 1, |&m| m.max(floor) + 1)
    }
}
