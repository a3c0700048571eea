use crate::data::{EncodedInstance, FeatureSchema};
use crate::error::{CsdmError, Result};
use crate::numcore::{Bags, ParamId, ParamStore, SplitRng, Tape, Tensor, Var};

/// Initial range of embedding entries, `U(-EMBED_INIT, EMBED_INIT)`.
pub const EMBED_INIT: f64 = 0.01;

/// One `[vocab, width]` table per schema field.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub tables: Vec<ParamId>,
    pub width: usize,
}

impl EmbeddingTable {
    pub fn new(
        store: &mut ParamStore,
        schema: &FeatureSchema,
        prefix: &str,
        width: usize,
        rng: &mut SplitRng,
    ) -> Self {
        let tables = schema
            .fields
            .iter()
            .map(|f| {
                let t = Tensor::from_fn(&[f.vocab, width], |_| {
                    rng.uniform_range(-EMBED_INIT, EMBED_INIT)
                });
                store.add(format!("{prefix}.{}", f.name), t)
            })
            .collect();
        Self { tables, width }
    }

    pub fn rebind(&self, store: &ParamStore) -> Self {
        Self {
            tables: self.tables.iter().map(|&id| store.rebind(id)).collect(),
            width: self.width,
        }
    }

    pub fn lookup(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        field: usize,
        bags: Bags,
    ) -> Result<Var> {
        tape.gather(store, self.tables[field], bags)
    }

    /// `[n_fields, width]` matrix of one instance's field embeddings, with
    /// multi-valued fields mean-pooled.
    pub fn embed(
        &self,
        store: &ParamStore,
        schema: &FeatureSchema,
        instance: &EncodedInstance,
    ) -> Result<Tensor> {
        let offsets = schema.slot_offsets();
        let mut out = Vec::with_capacity(schema.len() * self.width);
        for (f, field) in schema.fields.iter().enumerate() {
            let table = store.value(self.tables[f]);
            let mut row = vec![0.0; self.width];
            let vals: Vec<u32> = instance.field_values(&offsets, f).collect();
            for &v in &vals {
                if v as usize >= field.vocab {
                    return Err(CsdmError::Lookup {
                        field: field.name.clone(),
                        index: v as usize,
                        vocab: field.vocab,
                    });
                }
                for (a, b) in row.iter_mut().zip(table.row(v as usize)) {
                    *a += b;
                }
            }
            if !vals.is_empty() {
                let inv = 1.0 / vals.len() as f64;
                row.iter_mut().for_each(|a| *a *= inv);
            }
            out.extend(row);
        }
        Tensor::new(vec![schema.len(), self.width], out)
    }
}
