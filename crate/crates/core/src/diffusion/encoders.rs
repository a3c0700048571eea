use crate::backbones::{Dense, EMBED_INIT};
use crate::data::{FeatureSchema, ItemSideInfo};
use crate::error::{CsdmError, Result};
use crate::numcore::{ParamId, ParamStore, SplitRng, Tape, Tensor, Var};

/// Maps item side information to `h`, cold ID embeddings to `z0`, and
/// denoised hidden states back to the embedding space.
#[derive(Clone, Debug)]
pub struct SideEncoder {
    tables: Vec<ParamId>,
    side_map: Dense,
    z0_proj: Dense,
    head: Dense,
    pub dim: usize,
    pub hidden: usize,
}

impl SideEncoder {
    pub fn new(
        store: &mut ParamStore,
        schema: &FeatureSchema,
        dim: usize,
        hidden: usize,
        rng: &mut SplitRng,
    ) -> Self {
        let tables = schema
            .side_fields()
            .into_iter()
            .map(|f| {
                let field = &schema.fields[f];
                let t = Tensor::from_fn(&[field.vocab, dim], |_| {
                    rng.uniform_range(-EMBED_INIT, EMBED_INIT)
                });
                store.add(format!("side.{}", field.name), t)
            })
            .collect();
        let side_map = Dense::new(store, "side.map", dim, hidden, rng);
        let z0_proj = Dense::new(store, "z0.proj", dim, hidden, rng);
        let head = Dense::new(store, "out.head", hidden, dim, rng);
        Self {
            tables,
            side_map,
            z0_proj,
            head,
            dim,
            hidden,
        }
    }

    pub fn rebind(&self, store: &ParamStore) -> Self {
        Self {
            tables: self.tables.iter().map(|&id| store.rebind(id)).collect(),
            side_map: self.side_map.rebind(store),
            z0_proj: self.z0_proj.rebind(store),
            head: self.head.rebind(store),
            dim: self.dim,
            hidden: self.hidden,
        }
    }

    /// `h` for each item: every side field is mean-pooled, the field vectors
    /// are averaged, then mapped affinely to the hidden space.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        side: &ItemSideInfo,
        items: &[usize],
    ) -> Result<Var> {
        if side.fields.len() != self.tables.len() {
            return Err(CsdmError::Contract(format!(
                "side info has {} fields, encoder expects {}",
                side.fields.len(),
                self.tables.len()
            )));
        }
        let mut acc: Option<Var> = None;
        for (k, &table) in self.tables.iter().enumerate() {
            let v = tape.gather(store, table, side.bags(items, k)?)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, v)?,
                None => v,
            });
        }
        let sum = acc.ok_or_else(|| CsdmError::Contract("no side fields".into()))?;
        let mean = tape.scale(sum, 1.0 / self.tables.len() as f64);
        self.side_map.apply(tape, store, mean)
    }

    pub fn project(&self, tape: &mut Tape, store: &ParamStore, cold: Var) -> Result<Var> {
        self.z0_proj.apply(tape, store, cold)
    }

    pub fn output(&self, tape: &mut Tape, store: &ParamStore, z0_hat: Var) -> Result<Var> {
        self.head.apply(tape, store, z0_hat)
    }
}
