//! Wall-clock comparisons of training and scoring costs.

use std::time::Instant;

use serde::Serialize;

use super::config::ExperimentConfig;
use super::pipeline::shuffled_batches;
use crate::backbones::{BackboneModel, Batch};
use crate::data::{Dataset, DatasetSplits, Stage};
use crate::diffusion::CsdmStack;
use crate::error::{CsdmError, Result};
use crate::numcore::{Adam, SplitRng};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Timing {
    pub name: String,
    pub batches: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    /// Coefficient of variation of per-batch times.
    pub cv: f64,
}

impl Timing {
    fn from_samples(name: impl Into<String>, secs: &[f64]) -> Self {
        let n = secs.len().max(1) as f64;
        let mean = secs.iter().sum::<f64>() / n;
        let var = secs.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        let mut sorted = secs.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = match sorted.len() {
            0 => 0.0,
            l if l % 2 == 1 => sorted[l / 2],
            l => 0.5 * (sorted[l / 2 - 1] + sorted[l / 2]),
        };
        Self {
            name: name.into(),
            batches: secs.len(),
            mean_ms: mean * 1e3,
            median_ms: median * 1e3,
            cv: if mean > 0.0 { var.sqrt() / mean } else { 0.0 },
        }
    }
}

fn time_each(
    batches: &[Batch],
    warmup: usize,
    mut f: impl FnMut(&Batch) -> Result<()>,
) -> Result<Vec<f64>> {
    for b in batches.iter().take(warmup) {
        f(b)?;
    }
    let mut out = Vec::with_capacity(batches.len());
    for b in batches {
        let t = Instant::now();
        f(b)?;
        out.push(t.elapsed().as_secs_f64());
    }
    Ok(out)
}

/// Mean time per training batch for the backbone alone and for the
/// combined diffusion step at each stride in `strides`, plus scoring time
/// of the test set before and after write-back.
pub fn bench(
    ds: &Dataset,
    splits: &DatasetSplits,
    cfg: &ExperimentConfig,
    n_batches: usize,
    strides: &[usize],
) -> Result<Vec<Timing>> {
    if n_batches == 0 {
        return Err(CsdmError::Validation(
            "need at least one batch to time".into(),
        ));
    }
    let mut rng = SplitRng::new(cfg.seed);
    let mut batches = shuffled_batches(ds, &splits.old_train, cfg.batch_size, &mut rng);
    batches.retain(|b| b.len() == cfg.batch_size.min(splits.old_train.len()));
    batches.truncate(n_batches);
    if batches.is_empty() {
        return Err(CsdmError::Protocol("old_train has no full batch".into()));
    }
    let adam = Adam::new(cfg.lr);
    let mut rows = Vec::new();

    let mut model = BackboneModel::new(cfg.backbone, &ds.schema, cfg.dim, cfg.seed);
    let secs = time_each(&batches, 2, |b| model.train_step(b, &adam).map(|_| ()))?;
    rows.push(Timing::from_samples("backbone_step", &secs));

    model.freeze();
    let freq = splits.stage_frequency(ds, Stage::Cold);
    for &s in strides {
        let mut dc = cfg.diffusion();
        dc.stride = s;
        let mut stack = CsdmStack::new(&ds.schema, cfg.dim, dc, cfg.seed)?;
        let secs = time_each(&batches, 2, |b| {
            stack
                .combined_step(&model, b, &ds.side_info, &freq, &adam, &mut rng)
                .map(|_| ())
        })?;
        rows.push(Timing::from_samples(format!("csdm_step_s{s}"), &secs));
    }

    // Scoring passes over the whole test set alternate between the two
    // models so background load hits both equally.
    let test: Vec<_> = splits
        .test
        .iter()
        .map(|&i| &ds.instances[i as usize])
        .collect();
    if !test.is_empty() {
        let mut after = model.fork();
        let stack = CsdmStack::new(&ds.schema, cfg.dim, cfg.diffusion(), cfg.seed)?;
        let items: Vec<usize> = (0..ds.n_items()).collect();
        stack.write_back(&mut after, &ds.side_info, &items, &freq, &mut rng)?;
        let score = |m: &BackboneModel| -> Result<f64> {
            let t = Instant::now();
            m.predict_instances(&test)?;
            Ok(t.elapsed().as_secs_f64())
        };
        score(&model)?;
        score(&after)?;
        let (mut before_s, mut after_s) = (Vec::new(), Vec::new());
        for _ in 0..n_batches {
            before_s.push(score(&model)?);
            after_s.push(score(&after)?);
        }
        rows.push(Timing::from_samples(
            "inference_before_write_back",
            &before_s,
        ));
        rows.push(Timing::from_samples("inference_after_write_back", &after_s));
    }
    Ok(rows)
}

pub fn timings_csv(rows: &[Timing]) -> String {
    let mut out = String::from("name,batches,mean_ms,median_ms,cv\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.4},{:.4},{:.4}\n",
            r.name, r.batches, r.mean_ms, r.median_ms, r.cv
        ));
    }
    out
}
