//! Feature schema, encoded interactions and the cold/warm split protocol.

mod cache;
pub mod movielens;
mod split;
pub mod synth;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CsdmError, Result};
use crate::numcore::Bags;

pub use cache::{decode_cache, encode_cache, CACHE_MAGIC, CACHE_VERSION};
pub use split::{split_cold_warm, DatasetSplits, SplitParams, Stage};
pub use synth::{synth_dataset, SynthParams};

/// Padding value for unused multi-value slots.
pub const EMPTY_SLOT: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldKind {
    UserId,
    ItemId,
    UserFeature,
    ItemFeature,
    Context,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Field {
    pub name: String,
    pub kind: FieldKind,
    pub vocab: usize,
    /// Number of slots reserved per instance; 1 for one-hot fields.
    pub max_values: usize,
    /// Part of the item side information used to condition generation.
    pub side_info: bool,
}

impl Field {
    pub fn one_hot(name: &str, kind: FieldKind, vocab: usize) -> Self {
        Self {
            name: name.to_string(),
            kind,
            vocab,
            max_values: 1,
            side_info: false,
        }
    }

    pub fn side(mut self) -> Self {
        self.side_info = true;
        self
    }

    pub fn multi(mut self, max_values: usize) -> Self {
        self.max_values = max_values;
        self
    }
}

/// Ordered list of categorical fields.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub fields: Vec<Field>,
}

impl FeatureSchema {
    pub fn new(fields: Vec<Field>) -> Result<Self> {
        let schema = Self { fields };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let count = |k: FieldKind| self.fields.iter().filter(|f| f.kind == k).count();
        if count(FieldKind::UserId) != 1 || count(FieldKind::ItemId) != 1 {
            return Err(CsdmError::Validation(
                "schema needs exactly one user-id and one item-id field".into(),
            ));
        }
        for f in &self.fields {
            if f.side_info && f.kind != FieldKind::ItemFeature {
                return Err(CsdmError::Validation(format!(
                    "field `{}` is side information but not an item feature",
                    f.name
                )));
            }
            if f.vocab == 0 || f.max_values == 0 {
                return Err(CsdmError::Validation(format!(
                    "field `{}` is empty",
                    f.name
                )));
            }
        }
        if !self.fields.iter().any(|f| f.side_info) {
            return Err(CsdmError::Validation(
                "schema has no side-information field".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    fn position(&self, kind: FieldKind) -> usize {
        self.fields
            .iter()
            .position(|f| f.kind == kind)
            .expect("validated schema")
    }

    pub fn item_field(&self) -> usize {
        self.position(FieldKind::ItemId)
    }

    pub fn user_field(&self) -> usize {
        self.position(FieldKind::UserId)
    }

    /// Field positions that make up the side information, in schema order.
    pub fn side_fields(&self) -> Vec<usize> {
        (0..self.fields.len())
            .filter(|&i| self.fields[i].side_info)
            .collect()
    }

    /// Start of each field's slots inside [`EncodedInstance::slots`].
    pub fn slot_offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.fields.len() + 1);
        let mut acc = 0;
        out.push(0);
        for f in &self.fields {
            acc += f.max_values;
            out.push(acc);
        }
        out
    }

    pub fn total_slots(&self) -> usize {
        self.fields.iter().map(|f| f.max_values).sum()
    }

    pub fn side_slots(&self) -> usize {
        self.fields
            .iter()
            .filter(|f| f.side_info)
            .map(|f| f.max_values)
            .sum()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("schema serializes");
        hex_digest(&json)
    }
}

/// Lower-case hex SHA-256.
pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// One labelled interaction with every field encoded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedInstance {
    pub user: u32,
    pub item: u32,
    pub label: u8,
    pub timestamp: u64,
    /// Field values laid out by [`FeatureSchema::slot_offsets`], padded
    /// with [`EMPTY_SLOT`].
    pub slots: Vec<u32>,
}

impl EncodedInstance {
    pub fn field_values<'a>(
        &'a self,
        offsets: &[usize],
        field: usize,
    ) -> impl Iterator<Item = u32> + 'a {
        self.slots[offsets[field]..offsets[field + 1]]
            .iter()
            .copied()
            .filter(|&v| v != EMPTY_SLOT)
    }
}

/// Rating to click label: 1 iff the rating is at least 4.
pub fn binarize(rating: u8) -> Result<u8> {
    match rating {
        1..=3 => Ok(0),
        4 | 5 => Ok(1),
        _ => Err(CsdmError::Validation(format!(
            "rating {rating} outside 1..=5"
        ))),
    }
}

/// Side-information feature values for every item, including items that
/// never occur in an interaction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItemSideInfo {
    /// Schema positions of the side fields.
    pub fields: Vec<usize>,
    /// `values[item][k]` lists the indices of side field `fields[k]`.
    pub values: Vec<Vec<Vec<u32>>>,
}

impl ItemSideInfo {
    pub fn n_items(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, item: usize) -> Result<&[Vec<u32>]> {
        self.values
            .get(item)
            .map(Vec::as_slice)
            .ok_or_else(|| CsdmError::Contract(format!("item {item} has no side information")))
    }

    /// Bags of side field `k` for the given items.
    pub fn bags(&self, items: &[usize], k: usize) -> Result<Bags> {
        let mut bags = Bags::new();
        for &i in items {
            let vals = &self.get(i)?[k];
            let idx: Vec<usize> = vals.iter().map(|&v| v as usize).collect();
            bags.push(&idx);
        }
        Ok(bags)
    }
}

/// Encoded interactions plus everything needed to interpret them.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub source: String,
    pub schema: FeatureSchema,
    pub instances: Vec<EncodedInstance>,
    pub side_info: ItemSideInfo,
}

impl Dataset {
    pub fn n_items(&self) -> usize {
        self.schema.fields[self.schema.item_field()].vocab
    }

    pub fn n_users(&self) -> usize {
        self.schema.fields[self.schema.user_field()].vocab
    }

    /// Checks vocabulary bounds of every instance and side-info entry.
    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        let offsets = self.schema.slot_offsets();
        for inst in &self.instances {
            if inst.label > 1 {
                return Err(CsdmError::Validation(format!(
                    "label {} not binary",
                    inst.label
                )));
            }
            if inst.slots.len() != self.schema.total_slots() {
                return Err(CsdmError::dim(
                    &[inst.slots.len()],
                    &[self.schema.total_slots()],
                    "instance slots",
                ));
            }
            for (f, field) in self.schema.fields.iter().enumerate() {
                for v in inst.field_values(&offsets, f) {
                    if v as usize >= field.vocab {
                        return Err(CsdmError::Lookup {
                            field: field.name.clone(),
                            index: v as usize,
                            vocab: field.vocab,
                        });
                    }
                }
            }
        }
        if self.side_info.n_items() != self.n_items() {
            return Err(CsdmError::Contract(format!(
                "side information covers {} of {} items",
                self.side_info.n_items(),
                self.n_items()
            )));
        }
        for vals in &self.side_info.values {
            for (k, &f) in self.side_info.fields.iter().enumerate() {
                let field = &self.schema.fields[f];
                if vals[k].is_empty() {
                    return Err(CsdmError::Contract(format!(
                        "empty side field `{}`",
                        field.name
                    )));
                }
                if let Some(&v) = vals[k].iter().find(|&&v| v as usize >= field.vocab) {
                    return Err(CsdmError::Lookup {
                        field: field.name.clone(),
                        index: v as usize,
                        vocab: field.vocab,
                    });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_threshold() {
        assert_eq!(binarize(4).unwrap(), 1);
        assert_eq!(binarize(3).unwrap(), 0);
        assert_eq!(binarize(5).unwrap(), 1);
        assert_eq!(binarize(1).unwrap(), 0);
        assert!(binarize(0).is_err());
        assert!(binarize(6).is_err());
    }

    #[test]
    fn item_id_cannot_be_side_info() {
        let fields = vec![
            Field::one_hot("u", FieldKind::UserId, 3),
            Field::one_hot("i", FieldKind::ItemId, 3).side(),
        ];
        assert!(FeatureSchema::new(fields).is_err());
    }
}
