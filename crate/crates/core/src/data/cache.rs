//! Binary cache of an encoded, split dataset.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "CSDMDATA"
//! version      u32
//! header_len   u32
//! header       header_len bytes of JSON (schema, counts, split parameters)
//! instances    per instance: user u32, item u32, label u32, timestamp u64,
//!              then one u32 per schema slot; grouped as old_train, warm_a,
//!              warm_b, warm_c, test, excluded
//! side info    per item: one u32 per side-field slot
//! ```
//! Unused slots hold `u32::MAX`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{
    Dataset, DatasetSplits, EncodedInstance, FeatureSchema, ItemSideInfo, SplitParams, EMPTY_SLOT,
};
use crate::error::{CsdmError, Result};

pub const CACHE_MAGIC: &[u8; 8] = b"CSDMDATA";
pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    source: String,
    schema: FeatureSchema,
    split: SplitParams,
    counts: Counts,
    n_items: usize,
    instance_record_bytes: usize,
    item_record_bytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Counts {
    old_train: usize,
    warm_a: usize,
    warm_b: usize,
    warm_c: usize,
    test: usize,
    excluded: usize,
}

fn groups(s: &DatasetSplits) -> [&[u32]; 6] {
    [
        &s.old_train,
        &s.warm[0],
        &s.warm[1],
        &s.warm[2],
        &s.test,
        &s.excluded,
    ]
}

pub fn encode_cache(ds: &Dataset, splits: &DatasetSplits) -> Result<Vec<u8>> {
    let slots = ds.schema.total_slots();
    let g = groups(splits);
    let header = Header {
        version: CACHE_VERSION,
        source: ds.source.clone(),
        schema: ds.schema.clone(),
        split: splits.params,
        counts: Counts {
            old_train: g[0].len(),
            warm_a: g[1].len(),
            warm_b: g[2].len(),
            warm_c: g[3].len(),
            test: g[4].len(),
            excluded: g[5].len(),
        },
        n_items: ds.n_items(),
        instance_record_bytes: 20 + 4 * slots,
        item_record_bytes: 4 * ds.schema.side_slots(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out =
        Vec::with_capacity(16 + json.len() + ds.instances.len() * header.instance_record_bytes);
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for &i in g.iter().flat_map(|g| g.iter()) {
        let inst = &ds.instances[i as usize];
        out.extend_from_slice(&inst.user.to_le_bytes());
        out.extend_from_slice(&inst.item.to_le_bytes());
        out.extend_from_slice(&(inst.label as u32).to_le_bytes());
        out.extend_from_slice(&inst.timestamp.to_le_bytes());
        for &s in &inst.slots {
            out.extend_from_slice(&s.to_le_bytes());
        }
    }
    let side_fields = ds.schema.side_fields();
    for item in &ds.side_info.values {
        for (k, &f) in side_fields.iter().enumerate() {
            let width = ds.schema.fields[f].max_values;
            for j in 0..width {
                let v = item[k].get(j).copied().unwrap_or(EMPTY_SLOT);
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CsdmError::Format("cache truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode_cache(bytes: &[u8]) -> Result<(Dataset, DatasetSplits)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CACHE_MAGIC {
        return Err(CsdmError::Format("not a dataset cache".into()));
    }
    let version = r.u32()?;
    if version != CACHE_VERSION {
        return Err(CsdmError::Format(format!(
            "unsupported cache version {version}"
        )));
    }
    let len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(len)?)?;
    header.schema.validate()?;
    let slots = header.schema.total_slots();
    if header.instance_record_bytes != 20 + 4 * slots {
        return Err(CsdmError::Format(
            "instance record width disagrees with schema".into(),
        ));
    }

    let c = &header.counts;
    let sizes = [
        c.old_train,
        c.warm_a,
        c.warm_b,
        c.warm_c,
        c.test,
        c.excluded,
    ];
    let total: usize = sizes.iter().sum();
    let mut instances = Vec::with_capacity(total);
    for _ in 0..total {
        let user = r.u32()?;
        let item = r.u32()?;
        let label = r.u32()?;
        let timestamp = r.u64()?;
        let slots = (0..slots).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if label > 1 {
            return Err(CsdmError::Format(format!("label {label} in cache")));
        }
        instances.push(EncodedInstance {
            user,
            item,
            label: label as u8,
            timestamp,
            slots,
        });
    }
    let side_fields = header.schema.side_fields();
    let mut values = Vec::with_capacity(header.n_items);
    for _ in 0..header.n_items {
        let mut item = Vec::with_capacity(side_fields.len());
        for &f in &side_fields {
            let width = header.schema.fields[f].max_values;
            let vals = (0..width)
                .map(|_| r.u32())
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .filter(|&v| v != EMPTY_SLOT)
                .collect();
            item.push(vals);
        }
        values.push(item);
    }
    if r.pos != bytes.len() {
        return Err(CsdmError::Format("trailing bytes after cache".into()));
    }

    let mut ranges = Vec::with_capacity(6);
    let mut start = 0u32;
    for &s in &sizes {
        ranges.push((start..start + s as u32).collect::<Vec<u32>>());
        start += s as u32;
    }
    let mut it = ranges.into_iter();
    let old_train = it.next().expect("6 groups");
    let warm = [
        it.next().expect("g"),
        it.next().expect("g"),
        it.next().expect("g"),
    ];
    let test = it.next().expect("g");
    let excluded = it.next().expect("g");

    let item_of =
        |g: &[u32]| -> BTreeSet<u32> { g.iter().map(|&i| instances[i as usize].item).collect() };
    let old_items = item_of(&old_train);
    let warm_items = item_of(&warm[0]);
    let mut new_items = warm_items.clone();
    new_items.extend(item_of(&excluded));
    let mut item_freq = vec![0u32; header.n_items];
    for &i in old_train.iter().chain(warm.iter().flatten()) {
        item_freq[instances[i as usize].item as usize] += 1;
    }

    let ds = Dataset {
        source: header.source,
        side_info: ItemSideInfo {
            fields: side_fields,
            values,
        },
        schema: header.schema,
        instances,
    };
    ds.validate()?;
    let splits = DatasetSplits {
        params: header.split,
        old_train,
        warm,
        test,
        excluded,
        old_items,
        new_items,
        warm_items,
        item_freq,
    };
    Ok((ds, splits))
}
