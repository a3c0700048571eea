use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{CsdmError, Result};

/// Frequency threshold `N` and warm group size `K`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitParams {
    pub threshold: usize,
    pub group_size: usize,
}

/// Evaluation stages, in protocol order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Cold,
    WarmA,
    WarmB,
    WarmC,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Cold, Stage::WarmA, Stage::WarmB, Stage::WarmC];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Cold => "cold",
            Stage::WarmA => "warm_a",
            Stage::WarmB => "warm_b",
            Stage::WarmC => "warm_c",
        }
    }

    /// Number of warm groups seen once this stage has been trained on.
    pub fn warm_groups_seen(&self) -> usize {
        *self as usize
    }
}

/// Instance-index partition of a [`Dataset`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplits {
    pub params: SplitParams,
    pub old_train: Vec<u32>,
    pub warm: [Vec<u32>; 3],
    pub test: Vec<u32>,
    /// New-item instances dropped because the item has at most `3K` of them.
    pub excluded: Vec<u32>,
    /// Items with more than `N` interactions.
    pub old_items: BTreeSet<u32>,
    /// Items with between 1 and `N` interactions.
    pub new_items: BTreeSet<u32>,
    /// New items that take part in the warm/test protocol.
    pub warm_items: BTreeSet<u32>,
    /// Interaction count per item over `old_train` and all warm groups.
    pub item_freq: Vec<u32>,
}

impl DatasetSplits {
    pub fn warm_group(&self, stage: Stage) -> Option<&[u32]> {
        match stage {
            Stage::Cold => None,
            s => Some(&self.warm[s.warm_groups_seen() - 1]),
        }
    }

    /// Per-item interaction counts available once `stage` is reached: all
    /// of `old_train` plus the warm groups up to and including it.
    pub fn stage_frequency(&self, ds: &Dataset, stage: Stage) -> Vec<u32> {
        let mut freq = vec![0u32; ds.n_items()];
        let groups =
            std::iter::once(&self.old_train).chain(self.warm[..stage.warm_groups_seen()].iter());
        for g in groups {
            for &i in g {
                freq[ds.instances[i as usize].item as usize] += 1;
            }
        }
        freq
    }

    /// New:old ratio over items that have at least one interaction.
    pub fn new_old_ratio(&self) -> f64 {
        self.new_items.len() as f64 / self.old_items.len().max(1) as f64
    }
}

/// Splits items by frequency and new-item interactions by time.
///
/// Items with more than `threshold` interactions are old and all of their
/// instances train the backbone. For each new item with more than
/// `3 * group_size` interactions, its instances ordered by timestamp (ties
/// kept in input order) fill `warm_a`, `warm_b`, `warm_c` with
/// `group_size` each and the rest goes to `test`. Other new items are
/// excluded.
pub fn split_cold_warm(ds: &Dataset, params: SplitParams) -> Result<DatasetSplits> {
    let SplitParams {
        threshold,
        group_size,
    } = params;
    if threshold == 0 || group_size == 0 {
        return Err(CsdmError::Validation("N and K must be positive".into()));
    }
    let n_items = ds.n_items();
    let mut per_item: Vec<Vec<u32>> = vec![Vec::new(); n_items];
    for (idx, inst) in ds.instances.iter().enumerate() {
        per_item[inst.item as usize].push(idx as u32);
    }

    let mut old_items = BTreeSet::new();
    let mut new_items = BTreeSet::new();
    let mut warm_items = BTreeSet::new();
    let mut is_old = vec![false; n_items];
    let mut warm: [Vec<u32>; 3] = Default::default();
    let mut test = Vec::new();
    let mut excluded = Vec::new();

    for (item, idxs) in per_item.iter_mut().enumerate() {
        let n = idxs.len();
        if n == 0 {
            continue;
        }
        if n > threshold {
            old_items.insert(item as u32);
            is_old[item] = true;
            continue;
        }
        new_items.insert(item as u32);
        if n <= 3 * group_size {
            excluded.extend_from_slice(idxs);
            continue;
        }
        warm_items.insert(item as u32);
        // Stable sort keeps input order among equal timestamps.
        idxs.sort_by_key(|&i| ds.instances[i as usize].timestamp);
        for (g, chunk) in idxs[..3 * group_size].chunks(group_size).enumerate() {
            warm[g].extend_from_slice(chunk);
        }
        test.extend_from_slice(&idxs[3 * group_size..]);
    }

    if old_items.is_empty() {
        return Err(CsdmError::Protocol(format!(
            "no item has more than {threshold} interactions"
        )));
    }
    if warm_items.is_empty() {
        return Err(CsdmError::Protocol(format!(
            "no new item has more than {} interactions",
            3 * group_size
        )));
    }

    let old_train: Vec<u32> = (0..ds.instances.len() as u32)
        .filter(|&i| is_old[ds.instances[i as usize].item as usize])
        .collect();
    for g in warm.iter_mut().chain([&mut test, &mut excluded]) {
        g.sort_unstable();
    }

    let mut item_freq = vec![0u32; n_items];
    for &i in old_train.iter().chain(warm.iter().flatten()) {
        item_freq[ds.instances[i as usize].item as usize] += 1;
    }

    Ok(DatasetSplits {
        params,
        old_train,
        warm,
        test,
        excluded,
        old_items,
        new_items,
        warm_items,
        item_freq,
    })
}
