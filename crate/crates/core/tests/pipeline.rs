mod common;

use std::collections::BTreeSet;

use csdm::backbones::{BackboneKind, BackboneModel};
use csdm::data::{decode_cache, encode_cache, Stage};
use csdm::diffusion::{CsdmStack, DiffusionConfig};
use csdm::numcore::{Adam, SplitRng, Tensor};
use csdm::warmup::{
    finetune_item_ids, pretrain, run_experiment, shuffled_batches, Method, RunRngs,
};
use csdm::CsdmError;

fn perturbed_stack(ds: &csdm::data::Dataset, config: DiffusionConfig, seed: u64) -> CsdmStack {
    let mut stack = CsdmStack::new(&ds.schema, 3, config, seed).unwrap();
    let mut rng = SplitRng::new(seed + 100);
    for id in stack.store.ids() {
        for v in stack.store.get_mut(id).value.data_mut() {
            *v += 0.2 * rng.normal();
        }
    }
    stack
}

#[test]
fn combined_step_needs_a_frozen_backbone_and_never_touches_it() {
    let ds = common::tiny_dataset(1);
    let batch = common::tiny_batch(&ds, 16);
    let mut backbone = BackboneModel::new(BackboneKind::DeepFm, &ds.schema, 3, 1);
    let mut stack = CsdmStack::new(&ds.schema, 3, common::tiny_diffusion(), 1).unwrap();
    let freq = vec![0; ds.n_items()];
    let adam = Adam::new(1e-2);
    let mut rng = SplitRng::new(2);
    let err = stack.combined_step(&backbone, &batch, &ds.side_info, &freq, &adam, &mut rng);
    assert!(matches!(err, Err(CsdmError::Contract(_))));

    backbone.freeze();
    let before = backbone.store.to_bytes();
    let stack_before = stack.store.to_bytes();
    for _ in 0..100 {
        stack
            .combined_step(&backbone, &batch, &ds.side_info, &freq, &adam, &mut rng)
            .unwrap();
    }
    assert_eq!(backbone.store.to_bytes(), before);
    assert_ne!(stack.store.to_bytes(), stack_before);
}

#[test]
fn reported_loss_is_weighted_sum_and_rho_zero_is_pure_ctr() {
    let ds = common::tiny_dataset(2);
    let batch = common::tiny_batch(&ds, 16);
    let mut backbone = BackboneModel::new(BackboneKind::WideDeep, &ds.schema, 3, 2);
    backbone.freeze();
    let freq = vec![1; ds.n_items()];
    for rho in [0.0, 0.1, 1.0] {
        let stack = perturbed_stack(
            &ds,
            DiffusionConfig {
                rho,
                ..common::tiny_diffusion()
            },
            2,
        );
        let (l, _) = stack
            .loss_gradients(
                &backbone,
                &batch,
                &ds.side_info,
                &freq,
                &mut SplitRng::new(5),
            )
            .unwrap();
        assert!((l.total - (l.ctr + rho * l.diff)).abs() < 1e-12);
    }
    // rho only scales L_diff, which never reaches the output head.
    let s0 = perturbed_stack(
        &ds,
        DiffusionConfig {
            rho: 0.0,
            ..common::tiny_diffusion()
        },
        2,
    );
    let mut s1 = s0.fork();
    s1.config.rho = 1.0;
    let (_, g0) = s0
        .loss_gradients(
            &backbone,
            &batch,
            &ds.side_info,
            &freq,
            &mut SplitRng::new(5),
        )
        .unwrap();
    let (_, g1) = s1
        .loss_gradients(
            &backbone,
            &batch,
            &ds.side_info,
            &freq,
            &mut SplitRng::new(5),
        )
        .unwrap();
    let head_rows = |g: &csdm::numcore::Gradients, store: &csdm::numcore::ParamStore| -> Vec<f64> {
        store
            .ids()
            .into_iter()
            .filter(|&id| store.get(id).name.starts_with("out.head"))
            .flat_map(|id| g.get(id).unwrap().data().to_vec())
            .collect()
    };
    let (a, b) = (head_rows(&g0, &s0.store), head_rows(&g1, &s1.store));
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    let denoiser = |g: &csdm::numcore::Gradients, store: &csdm::numcore::ParamStore| -> Vec<f64> {
        store
            .ids()
            .into_iter()
            .filter(|&id| store.get(id).name.starts_with("denoiser"))
            .flat_map(|id| g.get(id).map(|t| t.data().to_vec()).unwrap_or_default())
            .collect()
    };
    assert_ne!(denoiser(&g0, &s0.store), denoiser(&g1, &s1.store));
}

#[test]
fn diffusion_loss_starts_near_hidden_dim() {
    let (ds, splits, cfg) = common::small_run(3);
    let mut rngs = RunRngs::new(cfg.seed);
    let (backbone, _) =
        pretrain(&ds, &splits, &cfg, rngs.backbone_init, &mut rngs.pretrain).unwrap();
    let stack = CsdmStack::new(&ds.schema, cfg.dim, cfg.diffusion(), 1).unwrap();
    let batch = shuffled_batches(&ds, &splits.old_train, 512, &mut rngs.diffusion).remove(0);
    let freq = vec![0; ds.n_items()];
    let (l, _) = stack
        .loss_gradients(&backbone, &batch, &ds.side_info, &freq, &mut rngs.diffusion)
        .unwrap();
    let k = cfg.hidden_dim as f64;
    assert!(
        (l.diff - k).abs() < 4.0 * (2.0 * k / 512.0).sqrt(),
        "initial L_diff {}",
        l.diff
    );
}

#[test]
fn gate_limits_of_write_back() {
    let ds = common::tiny_dataset(4);
    let stack = perturbed_stack(&ds, common::tiny_diffusion(), 4);
    let items: Vec<usize> = (0..ds.n_items()).collect();
    let mut rng = SplitRng::new(1);
    let cold = Tensor::from_fn(&[items.len(), 3], |_| rng.normal());
    let at = |f: u32| {
        let freq = vec![f; ds.n_items()];
        stack
            .warm_embeddings(&cold, &ds.side_info, &items, &freq, &mut SplitRng::new(0))
            .unwrap()
    };
    let (w0, whalf, wbig) = (at(0), at(4), at(u32::MAX));
    // gate = 4, so n = 4 gives gamma = 1/2.
    for ((a, b), c) in whalf.data().iter().zip(w0.data()).zip(cold.data()) {
        assert!((a - 0.5 * (b + c)).abs() < 1e-12);
    }
    for (a, c) in wbig.data().iter().zip(cold.data()) {
        assert!((a - c).abs() < 1e-8 * (1.0 + c.abs()));
    }
    assert_ne!(w0, cold);

    let mut model = BackboneModel::new(BackboneKind::DeepFm, &ds.schema, 3, 4);
    let shape = model.item_embeddings().shape().to_vec();
    let others: Vec<Vec<u8>> = model
        .store
        .params()
        .iter()
        .filter(|p| p.name != "emb.item_id")
        .map(|p| p.value.to_le_bytes())
        .collect();
    stack
        .write_back(
            &mut model,
            &ds.side_info,
            &items[..2],
            &vec![0; ds.n_items()],
            &mut rng,
        )
        .unwrap();
    assert_eq!(model.item_embeddings().shape(), shape.as_slice());
    let after: Vec<Vec<u8>> = model
        .store
        .params()
        .iter()
        .filter(|p| p.name != "emb.item_id")
        .map(|p| p.value.to_le_bytes())
        .collect();
    assert_eq!(others, after);
}

#[test]
fn stack_checkpoint_round_trip_generates_identically() {
    let ds = common::tiny_dataset(5);
    let stack = perturbed_stack(&ds, common::tiny_diffusion(), 5);
    let dir = tempfile::tempdir().unwrap();
    stack.save(dir.path(), 5, 1).unwrap();
    let back = CsdmStack::load(dir.path(), &ds.schema).unwrap();
    let items: Vec<usize> = (0..ds.n_items()).collect();
    let cold = Tensor::from_fn(&[items.len(), 3], |i| (i as f64).sin());
    let a = stack
        .generate_hidden(&cold, &ds.side_info, &items, &mut SplitRng::new(0))
        .unwrap();
    let b = back
        .generate_hidden(&cold, &ds.side_info, &items, &mut SplitRng::new(0))
        .unwrap();
    assert_eq!(a.to_le_bytes(), b.to_le_bytes());
}

#[test]
fn warm_finetuning_touches_only_rows_of_the_group() {
    let (ds, splits, cfg) = common::small_run(6);
    let mut rngs = RunRngs::new(cfg.seed);
    let (pre, _) = pretrain(&ds, &splits, &cfg, rngs.backbone_init, &mut rngs.pretrain).unwrap();
    let mut model = pre.fork();
    let group = &splits.warm[0];
    finetune_item_ids(&mut model, &ds, group, &cfg, &mut rngs.warm).unwrap();
    assert!(model.frozen);
    let touched: BTreeSet<usize> = group
        .iter()
        .map(|&i| ds.instances[i as usize].item as usize)
        .collect();
    for (p, q) in pre.store.params().iter().zip(model.store.params()) {
        let item_table = p.name == "emb.item_id" || p.name == "linear.item_id";
        if !item_table {
            assert_eq!(
                p.value.to_le_bytes(),
                q.value.to_le_bytes(),
                "{} changed",
                p.name
            );
            continue;
        }
        for r in 0..p.value.rows() {
            let same = p.value.row(r) == q.value.row(r);
            assert_eq!(same, !touched.contains(&r), "{} row {r}", p.name);
        }
    }
}

#[test]
fn splits_keep_test_instances_out_of_training() {
    let (ds, splits, _) = common::small_run(7);
    let test: BTreeSet<u32> = splits.test.iter().copied().collect();
    let train = splits.old_train.iter().chain(splits.warm.iter().flatten());
    assert!(train.into_iter().all(|i| !test.contains(i)));
    // The cache stores instances grouped by split, so compare group by group.
    let bytes = encode_cache(&ds, &splits).unwrap();
    let (ds2, splits2) = decode_cache(&bytes).unwrap();
    assert_eq!(ds.schema, ds2.schema);
    assert_eq!(ds.side_info, ds2.side_info);
    assert_eq!(splits.item_freq, splits2.item_freq);
    assert_eq!(splits.warm_items, splits2.warm_items);
    let rows = |d: &csdm::data::Dataset, idx: &[u32]| -> Vec<csdm::data::EncodedInstance> {
        idx.iter()
            .map(|&i| d.instances[i as usize].clone())
            .collect()
    };
    assert_eq!(rows(&ds, &splits.old_train), rows(&ds2, &splits2.old_train));
    assert_eq!(rows(&ds, &splits.test), rows(&ds2, &splits2.test));
    for g in 0..3 {
        assert_eq!(rows(&ds, &splits.warm[g]), rows(&ds2, &splits2.warm[g]));
    }
    assert_eq!(encode_cache(&ds2, &splits2).unwrap(), bytes);
}

#[test]
fn runs_are_deterministic_paired_and_self_consistent() {
    let (ds, splits, cfg) = common::small_run(8);
    let a = run_experiment(&ds, &splits, &cfg).unwrap();
    let b = run_experiment(&ds, &splits, &cfg).unwrap();
    let strip = |r: &[csdm::warmup::StageReport]| -> Vec<(Method, Stage, u64, u64, u64)> {
        r.iter()
            .map(|x| {
                (
                    x.method,
                    x.stage,
                    x.auc.to_bits(),
                    x.rela_impr.to_bits(),
                    x.logloss.to_bits(),
                )
            })
            .collect()
    };
    assert_eq!(strip(&a.reports), strip(&b.reports));
    assert_eq!(a.reports.len(), 8);
    for r in a.reports.iter().filter(|r| r.method == Method::Baseline) {
        assert_eq!(r.rela_impr, 0.0);
    }

    // The baseline never depends on diffusion settings.
    let other = csdm::warmup::ExperimentConfig {
        rho: 1.0,
        s: 5,
        ..cfg.clone()
    };
    let c = run_experiment(&ds, &splits, &other).unwrap();
    let base = |r: &[csdm::warmup::StageReport]| -> Vec<u64> {
        r.iter()
            .filter(|x| x.method == Method::Baseline)
            .map(|x| x.auc.to_bits())
            .collect()
    };
    assert_eq!(base(&a.reports), base(&c.reports));
    assert_eq!(a.backbone.store.to_bytes(), c.backbone.store.to_bytes());
}
