//! Deterministic synthetic interactions for tests and CI.
//!
//! Clicks follow a logistic model over latent user and item factors. Item
//! factors mix a component determined by the item's side information
//! (category and tags) with an idiosyncratic one; `side_signal` sets the
//! mix, so at 0 the side information carries nothing about clicks beyond
//! chance.

use serde::{Deserialize, Serialize};

use super::{Dataset, EncodedInstance, FeatureSchema, Field, FieldKind, ItemSideInfo, EMPTY_SLOT};
use crate::error::{CsdmError, Result};
use crate::numcore::{sigmoid, SplitRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub seed: u64,
    pub n_users: usize,
    pub n_items: usize,
    pub n_instances: usize,
    /// Weight of the side-information component in item factors, in [0, 1].
    pub side_signal: f64,
    pub latent_dim: usize,
    pub n_categories: usize,
    pub n_tags: usize,
    /// Zipf exponent of item popularity.
    pub popularity_skew: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            seed: 0,
            n_users: 400,
            n_items: 400,
            n_instances: 40_000,
            side_signal: 1.0,
            latent_dim: 8,
            n_categories: 12,
            n_tags: 16,
            popularity_skew: 1.0,
        }
    }
}

const MAX_TAGS: usize = 3;
const N_AGE: usize = 5;
const N_SEGMENT: usize = 3;

fn normal_vec(rng: &mut SplitRng, k: usize, scale: f64) -> Vec<f64> {
    (0..k).map(|_| scale * rng.normal()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn synth_dataset(p: &SynthParams) -> Result<Dataset> {
    if p.n_users == 0 || p.n_items == 0 || p.n_instances == 0 || p.latent_dim == 0 {
        return Err(CsdmError::Validation(
            "synthetic sizes must be positive".into(),
        ));
    }
    if !(0.0..=1.0).contains(&p.side_signal) {
        return Err(CsdmError::Validation(
            "side_signal must be in [0, 1]".into(),
        ));
    }
    let k = p.latent_dim;
    let mut root = SplitRng::new(p.seed);
    let mut rng_items = root.split();
    let mut rng_users = root.split();
    let mut rng_events = root.split();

    // Side-information prototypes.
    let cat_vecs: Vec<Vec<f64>> = (0..p.n_categories)
        .map(|_| normal_vec(&mut rng_items, k, 1.0))
        .collect();
    let tag_vecs: Vec<Vec<f64>> = (0..p.n_tags)
        .map(|_| normal_vec(&mut rng_items, k, 0.7))
        .collect();
    let cat_bias: Vec<f64> = (0..p.n_categories)
        .map(|_| 0.6 * rng_items.normal())
        .collect();

    let s = p.side_signal;
    let idio = (1.0 - s * s).sqrt();
    let mut item_cat = Vec::with_capacity(p.n_items);
    let mut item_tags = Vec::with_capacity(p.n_items);
    let mut item_vec = Vec::with_capacity(p.n_items);
    let mut item_bias = Vec::with_capacity(p.n_items);
    for _ in 0..p.n_items {
        let c = rng_items.int_inclusive(0, p.n_categories - 1);
        let n_t = rng_items.int_inclusive(1, MAX_TAGS.min(p.n_tags));
        let mut tags: Vec<usize> = Vec::with_capacity(n_t);
        while tags.len() < n_t {
            let t = rng_items.int_inclusive(0, p.n_tags - 1);
            if !tags.contains(&t) {
                tags.push(t);
            }
        }
        tags.sort_unstable();
        let mut side: Vec<f64> = cat_vecs[c].clone();
        for &t in &tags {
            for (a, b) in side.iter_mut().zip(&tag_vecs[t]) {
                *a += b / n_t as f64;
            }
        }
        let own = normal_vec(&mut rng_items, k, 1.0);
        let v: Vec<f64> = side
            .iter()
            .zip(&own)
            .map(|(a, b)| s * a + idio * b)
            .collect();
        let own_bias = 0.6 * rng_items.normal();
        item_bias.push(s * cat_bias[c] + idio * own_bias);
        item_vec.push(v);
        item_cat.push(c);
        item_tags.push(tags);
    }

    let users: Vec<(Vec<f64>, f64, usize, usize)> = (0..p.n_users)
        .map(|_| {
            let u = normal_vec(&mut rng_users, k, 1.0 / (k as f64).sqrt());
            let b = 0.5 * rng_users.normal();
            let age = rng_users.int_inclusive(0, N_AGE - 1);
            let seg = rng_users.int_inclusive(0, N_SEGMENT - 1);
            (u, b, age, seg)
        })
        .collect();
    let age_effect: Vec<f64> = (0..N_AGE).map(|_| 0.3 * rng_users.normal()).collect();

    // Zipf popularity over a random permutation of items.
    let mut order: Vec<usize> = (0..p.n_items).collect();
    rng_items.shuffle(&mut order);
    let mut weight = vec![0.0; p.n_items];
    for (rank, &item) in order.iter().enumerate() {
        weight[item] = 1.0 / ((rank + 1) as f64).powf(p.popularity_skew);
    }
    let total: f64 = weight.iter().sum();
    let mut cdf = Vec::with_capacity(p.n_items);
    let mut acc = 0.0;
    for w in &weight {
        acc += w / total;
        cdf.push(acc);
    }

    let schema = FeatureSchema::new(vec![
        Field::one_hot("user_id", FieldKind::UserId, p.n_users),
        Field::one_hot("item_id", FieldKind::ItemId, p.n_items),
        Field::one_hot("age", FieldKind::UserFeature, N_AGE),
        Field::one_hot("segment", FieldKind::UserFeature, N_SEGMENT),
        Field::one_hot("category", FieldKind::ItemFeature, p.n_categories).side(),
        Field::one_hot("tags", FieldKind::ItemFeature, p.n_tags)
            .side()
            .multi(MAX_TAGS.min(p.n_tags)),
    ])?;
    let total_slots = schema.total_slots();

    let mut instances = Vec::with_capacity(p.n_instances);
    for _ in 0..p.n_instances {
        let user = rng_events.int_inclusive(0, p.n_users - 1);
        let r = rng_events.uniform();
        let item = cdf.partition_point(|&c| c < r).min(p.n_items - 1);
        let timestamp = (rng_events.uniform() * 1e8) as u64;
        let (uv, ub, age, seg) = &users[user];
        let logit = 2.5 * dot(uv, &item_vec[item]) + ub + item_bias[item] + age_effect[*age];
        let label = rng_events.bernoulli(sigmoid(logit)) as u8;
        let mut slots = vec![
            user as u32,
            item as u32,
            *age as u32,
            *seg as u32,
            item_cat[item] as u32,
        ];
        slots.extend(item_tags[item].iter().map(|&t| t as u32));
        slots.resize(total_slots, EMPTY_SLOT);
        instances.push(EncodedInstance {
            user: user as u32,
            item: item as u32,
            label,
            timestamp,
            slots,
        });
    }

    let values = (0..p.n_items)
        .map(|i| {
            vec![
                vec![item_cat[i] as u32],
                item_tags[i].iter().map(|&t| t as u32).collect(),
            ]
        })
        .collect();
    let ds = Dataset {
        source: format!("synthetic(seed={})", p.seed),
        side_info: ItemSideInfo {
            fields: schema.side_fields(),
            values,
        },
        schema,
        instances,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let p = SynthParams {
            n_instances: 2000,
            ..Default::default()
        };
        assert_eq!(synth_dataset(&p).unwrap(), synth_dataset(&p).unwrap());
        let q = SynthParams {
            seed: 1,
            ..p.clone()
        };
        assert_ne!(
            synth_dataset(&p).unwrap().instances,
            synth_dataset(&q).unwrap().instances
        );
    }

    #[test]
    fn label_mean_is_balanced_enough() {
        let p = SynthParams {
            n_instances: 10_000,
            ..Default::default()
        };
        let ds = synth_dataset(&p).unwrap();
        let mean = ds.instances.iter().map(|i| i.label as f64).sum::<f64>() / 1e4;
        assert!(mean > 0.2 && mean < 0.8, "{mean}");
    }

    #[test]
    fn rejects_empty_sizes() {
        let p = SynthParams {
            n_items: 0,
            ..Default::default()
        };
        assert!(synth_dataset(&p).is_err());
    }
}
