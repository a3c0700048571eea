use std::time::Instant;

use log::{debug, info};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::backbones::{BackboneModel, Batch};
use crate::data::{Dataset, DatasetSplits, Stage};
use crate::diffusion::{CsdmStack, StepLosses};
use crate::error::{CsdmError, Result};
use crate::eval::{auc, log_loss, rela_impr, ScoredSet};
use crate::numcore::{Adam, SplitRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Baseline,
    Csdm,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Csdm => "csdm",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub method: Method,
    pub stage: Stage,
    pub auc: f64,
    /// Relative AUC improvement over the baseline at the same stage, in percent.
    pub rela_impr: f64,
    pub logloss: f64,
    pub seconds: f64,
}

/// Independent random streams for each phase of a run, all derived from
/// the configured seed.
pub struct RunRngs {
    pub backbone_init: u64,
    pub stack_init: u64,
    pub pretrain: SplitRng,
    pub diffusion: SplitRng,
    pub warm: SplitRng,
}

impl RunRngs {
    pub fn new(seed: u64) -> Self {
        let mut root = SplitRng::new(seed);
        let backbone_init = root.next_u64();
        let stack_init = root.next_u64();
        Self {
            backbone_init,
            stack_init,
            pretrain: root.split(),
            diffusion: root.split(),
            warm: root.split(),
        }
    }
}

/// Shuffled mini-batches over the given instance indices.
pub fn shuffled_batches(
    ds: &Dataset,
    idx: &[u32],
    batch_size: usize,
    rng: &mut SplitRng,
) -> Vec<Batch> {
    let mut order = idx.to_vec();
    rng.shuffle(&mut order);
    order
        .chunks(batch_size.max(1))
        .map(|c| Batch::from_instances(&ds.schema, c.iter().map(|&i| &ds.instances[i as usize])))
        .collect()
}

/// Trains a fresh backbone on `old_train`; returns it frozen along with the
/// mean loss of every epoch.
pub fn pretrain(
    ds: &Dataset,
    splits: &DatasetSplits,
    cfg: &ExperimentConfig,
    init_seed: u64,
    rng: &mut SplitRng,
) -> Result<(BackboneModel, Vec<f64>)> {
    if splits.old_train.is_empty() {
        return Err(CsdmError::Protocol("old_train is empty".into()));
    }
    let mut model = BackboneModel::new(cfg.backbone, &ds.schema, cfg.dim, init_seed);
    let adam = Adam::new(cfg.lr);
    let mut curve = Vec::with_capacity(cfg.pretrain_epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.pretrain_epochs {
        let batches = shuffled_batches(ds, &splits.old_train, cfg.batch_size, rng);
        let mut sum = 0.0;
        for b in &batches {
            let loss = model
                .train_step(b, &adam)
                .map_err(|e| CsdmError::Training(format!("pretrain step {step}: {e}")))?;
            sum += loss;
            step += 1;
        }
        let mean = sum / batches.len() as f64;
        info!("pretrain epoch {} loss {mean:.5}", epoch + 1);
        curve.push(mean);
    }
    model.freeze();
    Ok((model, curve))
}

/// Trains the diffusion stack against a frozen backbone over `old_train`.
/// Returns the stack and the per-epoch mean losses.
pub fn train_csdm(
    backbone: &BackboneModel,
    ds: &Dataset,
    splits: &DatasetSplits,
    cfg: &ExperimentConfig,
    init_seed: u64,
    rng: &mut SplitRng,
) -> Result<(CsdmStack, Vec<StepLosses>)> {
    let mut stack = CsdmStack::new(&ds.schema, cfg.dim, cfg.diffusion(), init_seed)?;
    let freq = training_frequency(ds);
    let curve = refresh_csdm(
        &mut stack,
        backbone,
        ds,
        &splits.old_train,
        &freq,
        cfg,
        cfg.diffusion_epochs,
        rng,
    )?;
    Ok((stack, curve))
}

/// The gate is held shut while training: every item is treated as unseen so
/// the generator has to produce a usable embedding on its own.
fn training_frequency(ds: &Dataset) -> Vec<u32> {
    vec![0; ds.n_items()]
}

#[allow(clippy::too_many_arguments)]
fn refresh_csdm(
    stack: &mut CsdmStack,
    backbone: &BackboneModel,
    ds: &Dataset,
    idx: &[u32],
    freq: &[u32],
    cfg: &ExperimentConfig,
    epochs: usize,
    rng: &mut SplitRng,
) -> Result<Vec<StepLosses>> {
    let adam = Adam::new(cfg.lr);
    let mut curve = Vec::with_capacity(epochs);
    let mut step = 0usize;
    for epoch in 0..epochs {
        let batches = shuffled_batches(ds, idx, cfg.batch_size, rng);
        let mut acc = StepLosses {
            total: 0.0,
            ctr: 0.0,
            diff: 0.0,
        };
        for b in &batches {
            let l = stack
                .combined_step(backbone, b, &ds.side_info, freq, &adam, rng)
                .map_err(|e| CsdmError::Training(format!("diffusion step {step}: {e}")))?;
            acc.total += l.total;
            acc.ctr += l.ctr;
            acc.diff += l.diff;
            step += 1;
        }
        let n = batches.len().max(1) as f64;
        let mean = StepLosses {
            total: acc.total / n,
            ctr: acc.ctr / n,
            diff: acc.diff / n,
        };
        debug!(
            "diffusion epoch {} L {:.5} ctr {:.5} diff {:.5}",
            epoch + 1,
            mean.total,
            mean.ctr,
            mean.diff
        );
        curve.push(mean);
    }
    Ok(curve)
}

/// Writes warmed embeddings for `items` into the backbone.
pub fn write_back(
    stack: &CsdmStack,
    backbone: &mut BackboneModel,
    ds: &Dataset,
    items: &[usize],
    freq: &[u32],
    rng: &mut SplitRng,
) -> Result<()> {
    stack.write_back(backbone, &ds.side_info, items, freq, rng)
}

/// Item-id-only fine-tuning on one warm group, with fresh Adam moments.
pub fn finetune_item_ids(
    model: &mut BackboneModel,
    ds: &Dataset,
    group: &[u32],
    cfg: &ExperimentConfig,
    rng: &mut SplitRng,
) -> Result<()> {
    model.frozen = false;
    model.restrict_to_item_ids();
    let adam = Adam::new(cfg.lr);
    for _ in 0..cfg.warm_epochs {
        for b in shuffled_batches(ds, group, cfg.batch_size, rng) {
            model.train_step(&b, &adam)?;
        }
    }
    model.freeze();
    Ok(())
}

pub fn score_test(
    model: &BackboneModel,
    ds: &Dataset,
    splits: &DatasetSplits,
) -> Result<(f64, f64)> {
    if splits.test.is_empty() {
        return Err(CsdmError::Protocol("test split is empty".into()));
    }
    let inst: Vec<_> = splits
        .test
        .iter()
        .map(|&i| &ds.instances[i as usize])
        .collect();
    let scores = model.predict_instances(&inst)?;
    let set = ScoredSet::new(scores, inst.iter().map(|i| i.label).collect())?;
    Ok((auc(&set)?, log_loss(&set)?))
}

/// Cold, warm-a, warm-b and warm-c evaluation of the baseline backbone and
/// the CSDM-warmed backbone, both starting from the same pretrained model.
///
/// The fine-tuned id embeddings are shared: at every stage CSDM serves
/// `gamma * e + (1 - gamma) * gen(e)` computed from the baseline's current
/// rows, after refreshing the stack on that stage's group. Generated rows
/// are never fed back into the generator.
pub fn staged_eval(
    ds: &Dataset,
    splits: &DatasetSplits,
    pretrained: &BackboneModel,
    stack: &CsdmStack,
    cfg: &ExperimentConfig,
    rng: &mut SplitRng,
) -> Result<Vec<StageReport>> {
    if splits.warm.iter().any(|g| g.is_empty()) {
        return Err(CsdmError::Protocol("a warm group is empty".into()));
    }
    let mut stack = stack.fork();
    let mut gen_rng = rng.split();
    let mut base = pretrained.fork();
    base.freeze();
    let all_items: Vec<usize> = (0..ds.n_items()).collect();
    let train_freq = training_frequency(ds);

    let mut reports = Vec::with_capacity(8);
    for stage in Stage::ALL {
        let started = Instant::now();
        if let Some(group) = splits.warm_group(stage) {
            finetune_item_ids(&mut base, ds, group, cfg, rng)?;
        }
        let (b_auc, b_ll) = score_test(&base, ds, splits)?;
        let b_secs = started.elapsed().as_secs_f64();

        let started = Instant::now();
        if let Some(group) = splits.warm_group(stage) {
            refresh_csdm(
                &mut stack,
                &base,
                ds,
                group,
                &train_freq,
                cfg,
                1,
                &mut gen_rng,
            )?;
        }
        let mut served = base.fork();
        served.freeze();
        let freq = splits.stage_frequency(ds, stage);
        write_back(&stack, &mut served, ds, &all_items, &freq, &mut gen_rng)?;
        let (c_auc, c_ll) = score_test(&served, ds, splits)?;
        let c_secs = started.elapsed().as_secs_f64();

        info!(
            "{}: baseline auc {b_auc:.4}, csdm auc {c_auc:.4}",
            stage.name()
        );
        reports.push(StageReport {
            method: Method::Baseline,
            stage,
            auc: b_auc,
            rela_impr: rela_impr(b_auc, b_auc)?,
            logloss: b_ll,
            seconds: b_secs,
        });
        reports.push(StageReport {
            method: Method::Csdm,
            stage,
            auc: c_auc,
            rela_impr: rela_impr(c_auc, b_auc)?,
            logloss: c_ll,
            seconds: c_secs,
        });
    }
    Ok(reports)
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub reports: Vec<StageReport>,
    pub pretrain_curve: Vec<f64>,
    pub diffusion_curve: Vec<StepLosses>,
    pub backbone: BackboneModel,
    pub stack: CsdmStack,
}

/// Pretrain, diffusion training and staged evaluation in one go.
pub fn run_experiment(
    ds: &Dataset,
    splits: &DatasetSplits,
    cfg: &ExperimentConfig,
) -> Result<RunOutput> {
    cfg.validate()?;
    let mut rngs = RunRngs::new(cfg.seed);
    let (backbone, pretrain_curve) =
        pretrain(ds, splits, cfg, rngs.backbone_init, &mut rngs.pretrain)?;
    let (stack, diffusion_curve) = train_csdm(
        &backbone,
        ds,
        splits,
        cfg,
        rngs.stack_init,
        &mut rngs.diffusion,
    )?;
    let reports = staged_eval(ds, splits, &backbone, &stack, cfg, &mut rngs.warm)?;
    Ok(RunOutput {
        reports,
        pretrain_curve,
        diffusion_curve,
        backbone,
        stack,
    })
}
