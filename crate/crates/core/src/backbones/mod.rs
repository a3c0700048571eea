//! Embedding & MLP click-through-rate scorers.
//!
//! All three backbones share the per-field embedding layer and differ in
//! how they combine field embeddings:
//! - DeepFM: first-order weights + FM pairwise term + MLP.
//! - Wide&Deep: first-order weights over the raw one-hot features + MLP.
//! - DCN: cross network and MLP side by side, joined by a linear head.

mod embedding;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use embedding::{EmbeddingTable, EMBED_INIT};

use crate::checkpoint::{self, Manifest};
use crate::data::{EncodedInstance, FeatureSchema};
use crate::error::{CsdmError, Result};
use crate::numcore::{sigmoid, Adam, Bags, ParamId, ParamStore, SplitRng, Tape, Tensor, Var};

pub const DEFAULT_EMBED_DIM: usize = 16;
pub const MLP_UNITS: usize = 16;
pub const MLP_LAYERS: usize = 2;
pub const CROSS_LAYERS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    DeepFm,
    WideDeep,
    Dcn,
}

impl BackboneKind {
    pub fn name(&self) -> &'static str {
        match self {
            BackboneKind::DeepFm => "deepfm",
            BackboneKind::WideDeep => "widedeep",
            BackboneKind::Dcn => "dcn",
        }
    }
}

impl std::str::FromStr for BackboneKind {
    type Err = CsdmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "deepfm" => Ok(Self::DeepFm),
            "widedeep" | "wide&deep" | "wide_deep" => Ok(Self::WideDeep),
            "dcn" => Ok(Self::Dcn),
            other => Err(CsdmError::Validation(format!("unknown backbone `{other}`"))),
        }
    }
}

/// `sum_{i<j} <v_i, v_j>` over the rows of `[n, d]`, via
/// `(|sum v_i|^2 - sum |v_i|^2) / 2`.
pub fn fm_second_order(field_embs: &Tensor) -> f64 {
    let d = field_embs.cols();
    let mut sum = vec![0.0; d];
    let mut sq = 0.0;
    for r in 0..field_embs.rows() {
        for (s, &v) in sum.iter_mut().zip(field_embs.row(r)) {
            *s += v;
            sq += v * v;
        }
    }
    0.5 * (sum.iter().map(|s| s * s).sum::<f64>() - sq)
}

/// Column-oriented mini-batch: one bag list per schema field.
#[derive(Clone, Debug)]
pub struct Batch {
    pub fields: Vec<Bags>,
    pub labels: Vec<f64>,
    pub items: Vec<usize>,
}

impl Batch {
    pub fn from_instances<'a>(
        schema: &FeatureSchema,
        instances: impl IntoIterator<Item = &'a EncodedInstance>,
    ) -> Self {
        let offsets = schema.slot_offsets();
        let mut fields: Vec<Bags> = (0..schema.len()).map(|_| Bags::new()).collect();
        let mut labels = Vec::new();
        let mut items = Vec::new();
        let mut buf = Vec::new();
        for inst in instances {
            for (f, bags) in fields.iter_mut().enumerate() {
                buf.clear();
                buf.extend(inst.field_values(&offsets, f).map(|v| v as usize));
                bags.push(&buf);
            }
            labels.push(inst.label as f64);
            items.push(inst.item as usize);
        }
        Self {
            fields,
            labels,
            items,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Dense {
    pub(crate) w: ParamId,
    pub(crate) b: ParamId,
}

impl Dense {
    pub(crate) fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut SplitRng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), glorot(fan_in, fan_out, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b }
    }

    pub(crate) fn rebind(&self, store: &ParamStore) -> Self {
        Self {
            w: store.rebind(self.w),
            b: store.rebind(self.b),
        }
    }

    pub(crate) fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.affine(x, w, b)
    }
}

/// Glorot-uniform `[fan_in, fan_out]` weights.
pub(crate) fn glorot(fan_in: usize, fan_out: usize, rng: &mut SplitRng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| rng.uniform_range(-limit, limit))
}

/// Which parameters a training step may change.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    /// Only the item-id rows (embedding and first-order weight).
    ItemIdOnly,
}

#[derive(Clone, Debug)]
pub struct BackboneModel {
    pub kind: BackboneKind,
    pub dim: usize,
    pub schema: FeatureSchema,
    pub store: ParamStore,
    pub embeddings: EmbeddingTable,
    /// Per-field scalar weights (first-order / wide part); empty for DCN.
    linear: Option<EmbeddingTable>,
    mlp: Vec<Dense>,
    cross: Vec<Dense>,
    head: Dense,
    pub frozen: bool,
    pub trainable: Trainable,
}

impl BackboneModel {
    pub fn new(kind: BackboneKind, schema: &FeatureSchema, dim: usize, seed: u64) -> Self {
        let mut rng = SplitRng::new(seed);
        let mut store = ParamStore::new();
        let embeddings = EmbeddingTable::new(&mut store, schema, "emb", dim, &mut rng);
        let linear = match kind {
            BackboneKind::DeepFm | BackboneKind::WideDeep => Some(EmbeddingTable::new(
                &mut store, schema, "linear", 1, &mut rng,
            )),
            BackboneKind::Dcn => None,
        };
        let input = schema.len() * dim;
        let mut mlp = Vec::with_capacity(MLP_LAYERS);
        let mut width = input;
        for l in 0..MLP_LAYERS {
            mlp.push(Dense::new(
                &mut store,
                &format!("mlp{l}"),
                width,
                MLP_UNITS,
                &mut rng,
            ));
            width = MLP_UNITS;
        }
        let cross = match kind {
            // Cross weights map to a scalar per row; the bias lives in input space.
            BackboneKind::Dcn => (0..CROSS_LAYERS)
                .map(|l| Dense {
                    w: store.add(format!("cross{l}.w"), glorot(input, 1, &mut rng)),
                    b: store.add(format!("cross{l}.b"), Tensor::zeros(&[input])),
                })
                .collect(),
            _ => Vec::new(),
        };
        let head_in = match kind {
            BackboneKind::Dcn => input + MLP_UNITS,
            _ => MLP_UNITS,
        };
        let head = Dense::new(&mut store, "head", head_in, 1, &mut rng);
        Self {
            kind,
            dim,
            schema: schema.clone(),
            store,
            embeddings,
            linear,
            mlp,
            cross,
            head,
            frozen: false,
            trainable: Trainable::All,
        }
    }

    /// Deep copy with its own parameter store, unfrozen and fully trainable.
    pub fn fork(&self) -> Self {
        let store = self.store.clone();
        Self {
            kind: self.kind,
            dim: self.dim,
            schema: self.schema.clone(),
            embeddings: self.embeddings.rebind(&store),
            linear: self.linear.as_ref().map(|l| l.rebind(&store)),
            mlp: self.mlp.iter().map(|d| d.rebind(&store)).collect(),
            cross: self.cross.iter().map(|d| d.rebind(&store)).collect(),
            head: self.head.rebind(&store),
            store,
            frozen: false,
            trainable: Trainable::All,
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn item_field(&self) -> usize {
        self.schema.item_field()
    }

    pub fn item_table(&self) -> ParamId {
        self.embeddings.tables[self.item_field()]
    }

    pub fn item_embeddings(&self) -> &Tensor {
        self.store.value(self.item_table())
    }

    /// Overwrites item-id embedding rows; `values` is `[items.len(), dim]`.
    pub fn set_item_rows(&mut self, items: &[usize], values: &Tensor) -> Result<()> {
        if values.rows() != items.len() || values.cols() != self.dim {
            return Err(CsdmError::dim(
                values.shape(),
                &[items.len(), self.dim],
                "item rows",
            ));
        }
        let id = self.item_table();
        let table = &mut self.store.get_mut(id).value;
        for (r, &i) in items.iter().enumerate() {
            table.row_mut(i).copy_from_slice(values.row(r));
        }
        Ok(())
    }

    fn trainable_ids(&self) -> Vec<ParamId> {
        match self.trainable {
            Trainable::All => self.store.ids(),
            Trainable::ItemIdOnly => {
                let f = self.item_field();
                let mut ids = vec![self.embeddings.tables[f]];
                if let Some(l) = &self.linear {
                    ids.push(l.tables[f]);
                }
                ids
            }
        }
    }

    /// Restricts training to the item-id rows and clears their Adam state.
    pub fn restrict_to_item_ids(&mut self) {
        self.trainable = Trainable::ItemIdOnly;
        for id in self.trainable_ids() {
            self.store.get_mut(id).reset_optimizer_state();
        }
    }

    /// Records the logits `[n, 1]`. When `item_override` is given it
    /// replaces the looked-up item-id embeddings (the first-order item
    /// weight is unaffected).
    pub fn forward_logits(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        item_override: Option<Var>,
    ) -> Result<Var> {
        let store = &self.store;
        let item_f = self.item_field();
        let mut embs = Vec::with_capacity(self.schema.len());
        for (f, bags) in batch.fields.iter().enumerate() {
            let v = match item_override {
                Some(v) if f == item_f => {
                    let shape = tape.value(v).shape();
                    if shape != [batch.len(), self.dim] {
                        return Err(CsdmError::dim(
                            shape,
                            &[batch.len(), self.dim],
                            "item override",
                        ));
                    }
                    v
                }
                _ => self.embeddings.lookup(tape, store, f, bags.clone())?,
            };
            embs.push(v);
        }
        let x0 = tape.concat(&embs)?;
        let mut deep = x0;
        for layer in &self.mlp {
            let z = layer.apply(tape, store, deep)?;
            deep = tape.relu(z);
        }
        let first_order = |tape: &mut Tape| -> Result<Option<Var>> {
            let Some(lin) = &self.linear else {
                return Ok(None);
            };
            let mut acc: Option<Var> = None;
            for (f, bags) in batch.fields.iter().enumerate() {
                let w = lin.lookup(tape, store, f, bags.clone())?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, w)?,
                    None => w,
                });
            }
            Ok(acc)
        };
        match self.kind {
            BackboneKind::DeepFm => {
                let deep_out = self.head.apply(tape, store, deep)?;
                let fm = tape.fm_second_order(&embs)?;
                let lin = first_order(tape)?.expect("deepfm has first-order weights");
                let s = tape.add(deep_out, fm)?;
                tape.add(s, lin)
            }
            BackboneKind::WideDeep => {
                let deep_out = self.head.apply(tape, store, deep)?;
                let wide = first_order(tape)?.expect("wide&deep has a wide part");
                tape.add(deep_out, wide)
            }
            BackboneKind::Dcn => {
                let mut xl = x0;
                for c in &self.cross {
                    let w = tape.param(store, c.w);
                    let b = tape.param(store, c.b);
                    let xw = tape.matmul(xl, w)?;
                    let inter = tape.scale_rows(x0, xw)?;
                    let s = tape.add(inter, xl)?;
                    xl = tape.add_bias(s, b)?;
                }
                let joined = tape.concat(&[xl, deep])?;
                self.head.apply(tape, store, joined)
            }
        }
    }

    /// Click probabilities for a batch.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let logits = self.forward_logits(&mut tape, batch, None)?;
        Ok(tape
            .value(logits)
            .data()
            .iter()
            .map(|&l| sigmoid(l))
            .collect())
    }

    /// Probabilities for many instances, scored in chunks.
    pub fn predict_instances(&self, instances: &[&EncodedInstance]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(instances.len());
        for chunk in instances.chunks(4096) {
            let batch = Batch::from_instances(&self.schema, chunk.iter().copied());
            out.extend(self.predict(&batch)?);
        }
        Ok(out)
    }

    /// One Adam step on the mean BCE of the batch; returns the loss before
    /// the update.
    pub fn train_step(&mut self, batch: &Batch, adam: &Adam) -> Result<f64> {
        if self.frozen {
            return Err(CsdmError::Contract(
                "train_step on a frozen backbone".into(),
            ));
        }
        let mut tape = Tape::new();
        let logits = self.forward_logits(&mut tape, batch, None)?;
        let loss = tape.bce_with_logits(logits, &batch.labels)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(CsdmError::Training(format!("non-finite loss {value}")));
        }
        let grads = tape.backward(loss)?;
        self.store.accumulate(&grads);
        let ids = self.trainable_ids();
        adam.step_subset(&mut self.store, &ids)?;
        Ok(value)
    }

    pub fn manifest(&self, seed: u64, epoch: usize) -> Manifest {
        Manifest::for_store(
            self.kind.name(),
            &self.schema.hash(),
            seed,
            epoch,
            &self.store,
            serde_json::json!({ "dim": self.dim }),
        )
    }

    pub fn save(&self, dir: &Path, seed: u64, epoch: usize) -> Result<()> {
        checkpoint::save(dir, &self.manifest(seed, epoch), &self.store)
    }

    /// Rebuilds a model from a checkpoint written by [`save`](Self::save).
    pub fn load(dir: &Path, schema: &FeatureSchema) -> Result<Self> {
        let (manifest, tensors) = checkpoint::load(dir)?;
        if manifest.schema_hash != schema.hash() {
            return Err(CsdmError::Format(
                "checkpoint was trained on a different schema".into(),
            ));
        }
        let kind: BackboneKind = manifest.kind.parse()?;
        let dim = manifest.extra["dim"]
            .as_u64()
            .ok_or_else(|| CsdmError::Format("manifest lacks `dim`".into()))?
            as usize;
        let mut model = Self::new(kind, schema, dim, 0);
        checkpoint::restore_into(&mut model.store, &manifest, tensors)?;
        Ok(model)
    }
}
