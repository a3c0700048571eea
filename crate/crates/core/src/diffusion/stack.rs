use std::path::Path;

use serde::{Deserialize, Serialize};

use super::denoiser::Denoiser;
use super::encoders::SideEncoder;
use super::process::{sample_chain, Denoise};
use super::schedule::{build_schedule, Schedule, DEFAULT_BETA, DEFAULT_STEPS};
use crate::backbones::{BackboneModel, Batch};
use crate::checkpoint::{self, Manifest};
use crate::data::{FeatureSchema, ItemSideInfo};
use crate::error::{CsdmError, Result};
use crate::numcore::{Adam, Gradients, ParamStore, SplitRng, Tape, Tensor, Var};

pub const CHECKPOINT_KIND: &str = "csdm-diffusion";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta: f64,
    /// Weight of the diffusion loss against the CTR loss.
    pub rho: f64,
    /// Sub-sequence stride used for generation.
    pub stride: usize,
    /// Per-hop noise as a fraction of its upper bound; 0 makes generation
    /// deterministic.
    pub sigma_frac: f64,
    pub dropout_p: f64,
    pub hidden_dim: usize,
    pub denoiser_width: usize,
    /// Frequency at which the output gate weighs the original embedding and
    /// the generated one equally.
    pub gate: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta: DEFAULT_BETA,
            rho: 0.1,
            stride: 10,
            sigma_frac: 0.0,
            dropout_p: 0.5,
            hidden_dim: 16,
            denoiser_width: 64,
            gate: 200.0,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CsdmError::Validation(m));
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return bad(format!(
                "rho must be a non-negative number, got {}",
                self.rho
            ));
        }
        if self.stride == 0 || self.stride > self.steps {
            return bad(format!(
                "s must be in 1..={}, got {}",
                self.steps, self.stride
            ));
        }
        if !(0.0..1.0).contains(&self.sigma_frac) {
            return bad(format!(
                "sigma_frac must be in [0, 1), got {}",
                self.sigma_frac
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            ));
        }
        if self.hidden_dim == 0 || self.denoiser_width == 0 {
            return bad("hidden sizes must be positive".into());
        }
        if self.gate.is_nan() || self.gate <= 0.0 {
            return bad(format!("gate must be positive, got {}", self.gate));
        }
        build_schedule(self.steps, self.beta).map(|_| ())
    }
}

/// `n / (n + gate)`: 0 for unseen items, approaching 1 as items mature.
pub fn gate_weight(freq: u32, gate: f64) -> f64 {
    let n = freq as f64;
    n / (n + gate)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub ctr: f64,
    pub diff: f64,
}

/// Side encoder, projections and denoiser, with their own parameters.
#[derive(Clone, Debug)]
pub struct CsdmStack {
    pub config: DiffusionConfig,
    pub schedule: Schedule,
    pub store: ParamStore,
    pub encoder: SideEncoder,
    pub denoiser: Denoiser,
    schema_hash: String,
}

fn rows_of(table: &Tensor, items: &[usize]) -> Tensor {
    let d = table.cols();
    let mut data = Vec::with_capacity(items.len() * d);
    for &i in items {
        data.extend_from_slice(table.row(i));
    }
    Tensor::new(vec![items.len(), d], data).expect("row gather")
}

fn column(values: Vec<f64>) -> Tensor {
    let n = values.len();
    Tensor::new(vec![n, 1], values).expect("column")
}

impl CsdmStack {
    pub fn new(
        schema: &FeatureSchema,
        dim: usize,
        config: DiffusionConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let schedule = build_schedule(config.steps, config.beta)?;
        let mut rng = SplitRng::new(seed);
        let mut store = ParamStore::new();
        let encoder = SideEncoder::new(&mut store, schema, dim, config.hidden_dim, &mut rng);
        let denoiser = Denoiser::new(
            &mut store,
            config.hidden_dim,
            config.denoiser_width,
            &mut rng,
        );
        Ok(Self {
            config,
            schedule,
            store,
            encoder,
            denoiser,
            schema_hash: schema.hash(),
        })
    }

    /// Deep copy with its own parameter store.
    pub fn fork(&self) -> Self {
        let store = self.store.clone();
        Self {
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            encoder: self.encoder.rebind(&store),
            denoiser: self.denoiser.rebind(&store),
            store,
            schema_hash: self.schema_hash.clone(),
        }
    }

    /// `h` for each item, without dropout.
    pub fn side_hidden(&self, side: &ItemSideInfo, items: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let h = self.encoder.encode(&mut tape, &self.store, side, items)?;
        Ok(tape.value(h).clone())
    }

    pub fn project(&self, cold: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let c = tape.constant(cold.clone());
        let z = self.encoder.project(&mut tape, &self.store, c)?;
        Ok(tape.value(z).clone())
    }

    /// Records the combined loss for one batch. Returns the total loss and
    /// the values of its two parts.
    #[allow(clippy::too_many_arguments)]
    fn record_loss(
        &self,
        tape: &mut Tape,
        backbone: &BackboneModel,
        batch: &Batch,
        side: &ItemSideInfo,
        freq: &[u32],
        rng: &mut SplitRng,
    ) -> Result<(Var, StepLosses)> {
        let n = batch.len();
        let items = &batch.items;
        let cfg = &self.config;
        let s = &self.schedule;
        let hidden = cfg.hidden_dim;
        let cold_t = rows_of(backbone.item_embeddings(), items);
        let cold = tape.constant(cold_t.clone());
        let z0 = self.encoder.project(tape, &self.store, cold)?;
        let h = self.encoder.encode(tape, &self.store, side, items)?;

        let steps: Vec<usize> = (0..n).map(|_| rng.int_inclusive(1, s.steps)).collect();
        let eps_t = Tensor::from_fn(&[n, hidden], |_| rng.normal());
        let h_drop = tape.dropout(h, cfg.dropout_p, true, rng)?;
        let sa = tape.constant(column(steps.iter().map(|&t| s.alpha(t).sqrt()).collect()));
        let sc = tape.constant(column(steps.iter().map(|&t| s.c(t).sqrt()).collect()));
        let sn = tape.constant(column(
            steps.iter().map(|&t| (1.0 - s.alpha(t)).sqrt()).collect(),
        ));
        let inv_sa = tape.constant(column(
            steps.iter().map(|&t| 1.0 / s.alpha(t).sqrt()).collect(),
        ));
        let eps = tape.constant(eps_t);

        let a = tape.scale_rows(z0, sa)?;
        let b = tape.scale_rows(h_drop, sc)?;
        let c = tape.scale_rows(eps, sn)?;
        let ab = tape.add(a, b)?;
        let z_t = tape.add(ab, c)?;

        let eps_hat =
            self.denoiser
                .forward(tape, &self.store, z_t, &steps, Some((cfg.dropout_p, rng)))?;
        let err = tape.sub(eps, eps_hat)?;
        let sq = tape.square(err);
        let mse = tape.mean(sq);
        let l_diff = tape.scale(mse, hidden as f64);

        // One-step denoised prediction at the sampled step.
        let noise = tape.scale_rows(eps_hat, sn)?;
        // The clean h is subtracted here, so dropout shows up as a perturbation of g.
        let b = tape.scale_rows(h, sc)?;
        let r = tape.sub(z_t, b)?;
        let r = tape.sub(r, noise)?;
        let g = tape.scale_rows(r, inv_sa)?;

        let w = self.gated_output(tape, g, &cold_t, items, freq)?;
        let logits = backbone.forward_logits(tape, batch, Some(w))?;
        let l_ctr = tape.bce_with_logits(logits, &batch.labels)?;
        let weighted = tape.scale(l_diff, cfg.rho);
        let total = tape.add(l_ctr, weighted)?;
        let losses = StepLosses {
            total: tape.value(total).item(),
            ctr: tape.value(l_ctr).item(),
            diff: tape.value(l_diff).item(),
        };
        Ok((total, losses))
    }

    /// `w = gamma * cold + (1 - gamma) * head(z0_hat)` per row.
    fn gated_output(
        &self,
        tape: &mut Tape,
        z0_hat: Var,
        cold: &Tensor,
        items: &[usize],
        freq: &[u32],
    ) -> Result<Var> {
        let mut gammas = Vec::with_capacity(items.len());
        for &i in items {
            let f = *freq
                .get(i)
                .ok_or_else(|| CsdmError::Contract(format!("no frequency for item {i}")))?;
            gammas.push(gate_weight(f, self.config.gate));
        }
        let out = self.encoder.output(tape, &self.store, z0_hat)?;
        let keep_gen = tape.constant(column(gammas.iter().map(|g| 1.0 - g).collect()));
        let gen = tape.scale_rows(out, keep_gen)?;
        let mut kept = cold.clone();
        for (r, g) in gammas.iter().enumerate() {
            kept.row_mut(r).iter_mut().for_each(|v| *v *= g);
        }
        let kept = tape.constant(kept);
        tape.add(gen, kept)
    }

    /// Loss values and gradients for one batch, without updating anything.
    pub fn loss_gradients(
        &self,
        backbone: &BackboneModel,
        batch: &Batch,
        side: &ItemSideInfo,
        freq: &[u32],
        rng: &mut SplitRng,
    ) -> Result<(StepLosses, Gradients)> {
        let mut tape = Tape::new();
        let (total, losses) = self.record_loss(&mut tape, backbone, batch, side, freq, rng)?;
        if !losses.total.is_finite() {
            return Err(CsdmError::Training(format!(
                "non-finite combined loss {}",
                losses.total
            )));
        }
        Ok((losses, tape.backward(total)?))
    }

    /// One Adam step on `L_ctr + rho * L_diff`, touching only diffusion-side
    /// parameters. The backbone must be frozen.
    pub fn combined_step(
        &mut self,
        backbone: &BackboneModel,
        batch: &Batch,
        side: &ItemSideInfo,
        freq: &[u32],
        adam: &Adam,
        rng: &mut SplitRng,
    ) -> Result<StepLosses> {
        if !backbone.frozen {
            return Err(CsdmError::Contract(
                "combined_step needs a frozen backbone".into(),
            ));
        }
        let (losses, grads) = self.loss_gradients(backbone, batch, side, freq, rng)?;
        self.store.accumulate(&grads);
        adam.step(&mut self.store)?;
        Ok(losses)
    }

    /// Runs the reverse chain from `z_T = sqrt(a_T) proj(cold) + sqrt(c_T) h`
    /// and returns the generated hidden states.
    pub fn generate_hidden(
        &self,
        cold: &Tensor,
        side: &ItemSideInfo,
        items: &[usize],
        rng: &mut SplitRng,
    ) -> Result<Tensor> {
        if cold.rows() != items.len() {
            return Err(CsdmError::dim(
                cold.shape(),
                &[items.len(), self.encoder.dim],
                "cold embeddings",
            ));
        }
        let h = self.side_hidden(side, items)?;
        let z0 = self.project(cold)?;
        let t = self.schedule.steps;
        let (sa, sc) = (self.schedule.alpha(t).sqrt(), self.schedule.c(t).sqrt());
        let z_t = z0.zip_map(&h, |a, b| sa * a + sc * b)?;
        sample_chain(
            self,
            &self.schedule,
            &z_t,
            &h,
            self.config.stride,
            self.config.sigma_frac,
            rng,
        )
    }

    /// Warmed embeddings `[items.len(), d]` for the given items, gated by
    /// their frequencies.
    pub fn warm_embeddings(
        &self,
        cold: &Tensor,
        side: &ItemSideInfo,
        items: &[usize],
        freq: &[u32],
        rng: &mut SplitRng,
    ) -> Result<Tensor> {
        let z0_hat = self.generate_hidden(cold, side, items, rng)?;
        let mut tape = Tape::new();
        let z = tape.constant(z0_hat);
        let w = self.gated_output(&mut tape, z, cold, items, freq)?;
        Ok(tape.value(w).clone())
    }

    /// Overwrites the backbone's item-id rows for `items` with warmed
    /// embeddings generated from the current rows.
    pub fn write_back(
        &self,
        backbone: &mut BackboneModel,
        side: &ItemSideInfo,
        items: &[usize],
        freq: &[u32],
        rng: &mut SplitRng,
    ) -> Result<()> {
        let cold = rows_of(backbone.item_embeddings(), items);
        let w = self.warm_embeddings(&cold, side, items, freq, rng)?;
        backbone.set_item_rows(items, &w)
    }

    pub fn save(&self, dir: &Path, seed: u64, epoch: usize) -> Result<()> {
        let extra = serde_json::json!({
            "dim": self.encoder.dim,
            "schedule": { "steps": self.schedule.steps, "beta": self.schedule.beta },
            "config": self.config,
        });
        let manifest = Manifest::for_store(
            CHECKPOINT_KIND,
            &self.schema_hash,
            seed,
            epoch,
            &self.store,
            extra,
        );
        checkpoint::save(dir, &manifest, &self.store)
    }

    pub fn load(dir: &Path, schema: &FeatureSchema) -> Result<Self> {
        let (manifest, tensors) = checkpoint::load(dir)?;
        if manifest.kind != CHECKPOINT_KIND {
            return Err(CsdmError::Format(format!(
                "expected a diffusion checkpoint, found `{}`",
                manifest.kind
            )));
        }
        if manifest.schema_hash != schema.hash() {
            return Err(CsdmError::Format(
                "checkpoint was trained on a different schema".into(),
            ));
        }
        let dim = manifest.extra["dim"]
            .as_u64()
            .ok_or_else(|| CsdmError::Format("manifest lacks `dim`".into()))?
            as usize;
        let config: DiffusionConfig = serde_json::from_value(manifest.extra["config"].clone())?;
        let mut stack = Self::new(schema, dim, config, 0)?;
        checkpoint::restore_into(&mut stack.store, &manifest, tensors)?;
        Ok(stack)
    }
}

impl Denoise for CsdmStack {
    fn predict_noise(&self, z_t: &Tensor, steps: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let z = tape.constant(z_t.clone());
        let e = self
            .denoiser
            .forward(&mut tape, &self.store, z, steps, None)?;
        Ok(tape.value(e).clone())
    }
}
