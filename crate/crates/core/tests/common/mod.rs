#![allow(dead_code)]

use csdm::backbones::{BackboneKind, BackboneModel, Batch};
use csdm::data::{
    split_cold_warm, synth_dataset, Dataset, DatasetSplits, SplitParams, SynthParams,
};
use csdm::diffusion::{CsdmStack, DiffusionConfig};
use csdm::numcore::{Gradients, ParamStore, SplitRng, Tape};
use csdm::warmup::ExperimentConfig;

/// A dataset small enough that every parameter can be finite-differenced.
pub fn tiny_dataset(seed: u64) -> Dataset {
    synth_dataset(&SynthParams {
        seed,
        n_users: 6,
        n_items: 5,
        n_instances: 60,
        latent_dim: 2,
        n_categories: 3,
        n_tags: 4,
        ..SynthParams::default()
    })
    .unwrap()
}

pub fn tiny_batch(ds: &Dataset, n: usize) -> Batch {
    Batch::from_instances(&ds.schema, ds.instances.iter().take(n))
}

pub fn tiny_diffusion() -> DiffusionConfig {
    DiffusionConfig {
        hidden_dim: 3,
        denoiser_width: 5,
        gate: 4.0,
        ..DiffusionConfig::default()
    }
}

/// A small synthetic run with its splits.
pub fn small_run(seed: u64) -> (Dataset, DatasetSplits, ExperimentConfig) {
    let cfg = ExperimentConfig {
        seed,
        synth_users: 120,
        synth_items: 80,
        synth_instances: 6000,
        threshold: 40,
        group_size: 3,
        batch_size: 128,
        pretrain_epochs: 2,
        diffusion_epochs: 2,
        warm_epochs: 1,
        ..ExperimentConfig::synthetic()
    };
    let ds = synth_dataset(&cfg.synth()).unwrap();
    let splits = split_cold_warm(
        &ds,
        SplitParams {
            threshold: cfg.threshold,
            group_size: cfg.group_size,
        },
    )
    .unwrap();
    (ds, splits, cfg)
}

/// Largest relative error between `analytic` and central differences of
/// `loss` over every element of the store selected by `store`.
pub fn fd_max_rel_err<M>(
    m: &mut M,
    store: fn(&mut M) -> &mut ParamStore,
    analytic: &Gradients,
    h: f64,
    loss: impl Fn(&M) -> f64,
) -> (f64, usize) {
    let ids = store(m).ids();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for id in ids {
        let n = store(m).value(id).len();
        for i in 0..n {
            let orig = store(m).value(id).data()[i];
            store(m).get_mut(id).value.data_mut()[i] = orig + h;
            let up = loss(m);
            store(m).get_mut(id).value.data_mut()[i] = orig - h;
            let down = loss(m);
            store(m).get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            worst = worst.max(csdm::numcore::gradcheck::rel_err(a, numeric));
            checked += 1;
        }
    }
    (worst, checked)
}

fn backbone_store(m: &mut BackboneModel) -> &mut ParamStore {
    &mut m.store
}

fn stack_store(s: &mut CsdmStack) -> &mut ParamStore {
    &mut s.store
}

/// Gradient check of a freshly initialised backbone's BCE loss on a tiny batch.
/// Zero-initialised biases are nudged so every path carries gradient.
pub fn backbone_gradcheck(kind: BackboneKind, seed: u64) -> (f64, usize) {
    let ds = tiny_dataset(seed);
    let batch = tiny_batch(&ds, 12);
    let mut model = BackboneModel::new(kind, &ds.schema, 3, seed);
    let mut rng = SplitRng::new(seed ^ 0x5eed);
    for id in model.store.ids() {
        for v in model.store.get_mut(id).value.data_mut() {
            *v += 0.3 * rng.normal();
        }
    }
    let loss_of = |m: &BackboneModel| -> f64 {
        let mut tape = Tape::new();
        let l = m.forward_logits(&mut tape, &batch, None).unwrap();
        let l = tape.bce_with_logits(l, &batch.labels).unwrap();
        tape.value(l).item()
    };
    let grads = {
        let mut tape = Tape::new();
        let l = model.forward_logits(&mut tape, &batch, None).unwrap();
        let l = tape.bce_with_logits(l, &batch.labels).unwrap();
        tape.backward(l).unwrap()
    };
    fd_max_rel_err(&mut model, backbone_store, &grads, 1e-6, loss_of)
}

/// Gradient check of the combined diffusion loss (side encoder, projection,
/// denoiser and output head) against a frozen backbone.
pub fn stack_gradcheck(seed: u64) -> (f64, usize) {
    let ds = tiny_dataset(seed);
    let batch = tiny_batch(&ds, 10);
    let mut backbone = BackboneModel::new(BackboneKind::DeepFm, &ds.schema, 3, seed);
    backbone.freeze();
    let mut stack = CsdmStack::new(&ds.schema, 3, tiny_diffusion(), seed).unwrap();
    let mut rng = SplitRng::new(seed ^ 0xd1ff);
    for id in stack.store.ids() {
        for v in stack.store.get_mut(id).value.data_mut() {
            *v += 0.3 * rng.normal();
        }
    }
    let freq: Vec<u32> = (0..ds.n_items() as u32).map(|i| i % 7).collect();
    let (_, grads) = stack
        .loss_gradients(
            &backbone,
            &batch,
            &ds.side_info,
            &freq,
            &mut SplitRng::new(11),
        )
        .unwrap();
    let loss_of = |s: &CsdmStack| -> f64 {
        s.loss_gradients(
            &backbone,
            &batch,
            &ds.side_info,
            &freq,
            &mut SplitRng::new(11),
        )
        .unwrap()
        .0
        .total
    };
    fd_max_rel_err(&mut stack, stack_store, &grads, 1e-6, loss_of)
}

/// Every differentiable tape op, each checked on its own random inputs.
/// Returns `(op, max relative error)`.
pub fn tape_op_gradchecks(seed: u64, n: usize, d: usize) -> Vec<(&'static str, f64)> {
    use csdm::numcore::{gradcheck, Bags, Tensor};
    let mut rng = SplitRng::new(seed);
    let mut rand = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0));
    let mut store = ParamStore::new();
    let a = store.add("a", rand(&[n, d]));
    let b = store.add("b", rand(&[n, d]));
    let w = store.add("w", rand(&[d, d + 1]));
    let bias = store.add("bias", rand(&[d + 1]));
    let table = store.add("table", rand(&[4, d]));
    let col = store.add("col", rand(&[n, 1]));
    let labels: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
    let bags = Bags::from_lists(&(0..n).map(|i| vec![i % 4, (i + 1) % 4]).collect::<Vec<_>>());
    let mask_seed = seed ^ 0xdead;

    // Every case ends in a weighted sum so no gradient is trivially uniform.
    let weights = rand(&[n, d + 1]);
    let reduce = move |t: &mut Tape, x: csdm::numcore::Var| -> csdm::Result<csdm::numcore::Var> {
        let cols = t.value(x).cols();
        let rows = t.value(x).rows();
        let wts = Tensor::from_fn(&[rows, cols], |k| {
            weights.data()[(k / cols) * (d + 1) + k % cols]
        });
        let c = t.constant(wts);
        let p = t.mul(x, c)?;
        Ok(t.mean(p))
    };

    type Case = Box<dyn Fn(&ParamStore, &mut Tape) -> csdm::Result<csdm::numcore::Var>>;
    let cases: Vec<(&'static str, Case)> = vec![
        (
            "gather",
            Box::new({
                let reduce = reduce.clone();
                let bags = bags.clone();
                move |s, t| {
                    let g = t.gather(s, table, bags.clone())?;
                    reduce(t, g)
                }
            }),
        ),
        (
            "matmul",
            Box::new({
                let reduce = reduce.clone();
                move |s, t| {
                    let (x, y) = (t.param(s, a), t.param(s, w));
                    let m = t.matmul(x, y)?;
                    reduce(t, m)
                }
            }),
        ),
        (
            "add_bias",
            Box::new({
                let reduce = reduce.clone();
                move |s, t| {
                    let (x, y) = (t.param(s, a), t.param(s, w));
                    let m = t.matmul(x, y)?;
                    let bb = t.param(s, bias);
                    let o = t.add_bias(m, bb)?;
                    reduce(t, o)
                }
            }),
        ),
        (
            "affine",
            Box::new({
                let reduce = reduce.clone();
                move |s, t| {
                    let (x, y, bb) = (t.param(s, a), t.param(s, w), t.param(s, bias));
                    let o = t.affine(x, y, bb)?;
                    reduce(t, o)
                }
            }),
        ),
        (
            "add",
            Box::new({
                let reduce = reduce.clone();
                move |s, t| {
                    let (x, y) = (t.param(s, a), t.param(s, b));
                    let o = t.add(x, y)?;
                    reduce(t, o)
                }
            }),
        ),
        (
            "sub",
            Box::new({
                let reduce = reduce.clone();
                move |s, t| {
                    let (x, y) = (t.param(s, a), t.param(s, b));
                    let o = t.sub(x, y)?;
                    reduce(t, o)
                }
            }),
        ),
        (
            "mul",
            Box::new({
                let reduce = reduce.clone();
                move |s, t| {
                    let (x, y) = (t.param(s, a), t.param(s, b));
                    let o = t.mul(x, y)?;
                    reduce(t, o)
                }
            }),
        ),
        (
            "scale",
            Box::new({
                let reduce = reduce.clone();
                move |s, t| {
                    let x = t.param(s, a);
                    let o = t.scale(x, -1.7);
                    reduce(t, o)
                }
            }),
        ),
        (
            "scale_rows",
            Box::new({
                let reduce = reduce.clone();
                move |s, t| {
                    let (x, c) = (t.param(s, a), t.param(s, col));
                    let o = t.scale_rows(x, c)?;
                    reduce(t, o)
                }
            }),
        ),
        (
            "relu",
            Box::new({
                let reduce = reduce.clone();
                move |s, t| {
                    let x = t.param(s, a);
                    let o = t.relu(x);
                    reduce(t, o)
                }
            }),
        ),
        (
            "sigmoid",
            Box::new({
                let reduce = reduce.clone();
                move |s, t| {
                    let x = t.param(s, a);
                    let o = t.sigmoid(x);
                    reduce(t, o)
                }
            }),
        ),
        (
            "square",
            Box::new({
                let reduce = reduce.clone();
                move |s, t| {
                    let x = t.param(s, a);
                    let o = t.square(x);
                    reduce(t, o)
                }
            }),
        ),
        (
            "concat",
            Box::new({
                let reduce = reduce.clone();
                move |s, t| {
                    let (x, c) = (t.param(s, a), t.param(s, col));
                    let o = t.concat(&[x, c])?;
                    reduce(t, o)
                }
            }),
        ),
        (
            "row_sum",
            Box::new({
                let reduce = reduce.clone();
                move |s, t| {
                    let x = t.param(s, a);
                    let o = t.row_sum(x);
                    reduce(t, o)
                }
            }),
        ),
        (
            "mean",
            Box::new(move |s, t| {
                let x = t.param(s, a);
                let sq = t.square(x);
                Ok(t.mean(sq))
            }),
        ),
        (
            "dropout",
            Box::new({
                let reduce = reduce.clone();
                move |s, t| {
                    let x = t.param(s, a);
                    let o = t.dropout(x, 0.4, true, &mut SplitRng::new(mask_seed))?;
                    reduce(t, o)
                }
            }),
        ),
        (
            "fm_second_order",
            Box::new({
                let reduce = reduce.clone();
                move |s, t| {
                    let (x, y) = (t.param(s, a), t.param(s, b));
                    let g = t.gather(
                        s,
                        table,
                        Bags::one_hot(&(0..n).map(|i| i % 4).collect::<Vec<_>>()),
                    )?;
                    let o = t.fm_second_order(&[x, y, g])?;
                    reduce(t, o)
                }
            }),
        ),
        (
            "bce_with_logits",
            Box::new(move |s, t| {
                let c = t.param(s, col);
                t.bce_with_logits(c, &labels)
            }),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, f)| {
            let r = gradcheck::check(&mut store, 1e-6, |s, t| f(s, t)).unwrap();
            (name, r.max_rel_err)
        })
        .collect()
}

/// Denoiser that knows the true `z0` and `h` and so recovers the noise exactly.
pub struct OracleDenoiser {
    pub schedule: csdm::diffusion::Schedule,
    pub z0: csdm::numcore::Tensor,
    pub h: csdm::numcore::Tensor,
}

impl csdm::diffusion::Denoise for OracleDenoiser {
    fn predict_noise(
        &self,
        z_t: &csdm::numcore::Tensor,
        steps: &[usize],
    ) -> csdm::Result<csdm::numcore::Tensor> {
        let s = &self.schedule;
        let mut out = z_t.clone();
        for (r, &t) in steps.iter().enumerate() {
            let (sa, sc, sn) = (s.alpha(t).sqrt(), s.c(t).sqrt(), (1.0 - s.alpha(t)).sqrt());
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = (*o - sa * self.z0.row(r)[j] - sc * self.h.row(r)[j]) / sn;
            }
        }
        Ok(out)
    }
}

pub fn repeat_row(row: &[f64], n: usize) -> csdm::numcore::Tensor {
    csdm::numcore::Tensor::from_fn(&[n, row.len()], |k| row[k % row.len()])
}

/// Draws `chains` samples of `z_T` from its closed-form marginal, walks
/// each down the stochastic posterior chain to `target`, and compares
/// the empirical distribution with the closed-form marginal at `target`.
/// Returns `(max |z-score| of the mean, relative error of the covariance trace)`.
pub fn marginal_chain_check(target: usize, chains: usize, seed: u64) -> (f64, f64) {
    use csdm::diffusion::{build_schedule, forward_with_noise, posterior_sample};
    use csdm::numcore::Tensor;
    let s = build_schedule(100, 1e-5).unwrap();
    let z0_row = [0.8, -1.3, 0.25];
    let h_row = [-0.4, 0.9, 1.6];
    let k = z0_row.len();
    let z0 = repeat_row(&z0_row, chains);
    let h = repeat_row(&h_row, chains);
    let mut rng = SplitRng::new(seed);
    let eps = Tensor::from_fn(&[chains, k], |_| rng.normal());
    let mut z = forward_with_noise(&s, &z0, &h, &eps, &vec![s.steps; chains]).unwrap();
    for t in (target + 1..=s.steps).rev() {
        let sigma = 0.5 * (1.0 - s.alpha(t - 1)).sqrt();
        z = posterior_sample(&s, &z, &z0, &h, t, sigma, &mut rng).unwrap();
    }
    let (a, c) = (s.alpha(target), s.c(target));
    let var = 1.0 - a;
    let mut worst_z = 0.0f64;
    let mut trace = 0.0;
    for j in 0..k {
        let col: Vec<f64> = (0..chains).map(|r| z.row(r)[j]).collect();
        let mean = col.iter().sum::<f64>() / chains as f64;
        let sv = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (chains - 1) as f64;
        let expect = a.sqrt() * z0_row[j] + c.sqrt() * h_row[j];
        worst_z = worst_z.max((mean - expect).abs() / (var / chains as f64).sqrt());
        trace += sv;
    }
    (worst_z, (trace - k as f64 * var).abs() / (k as f64 * var))
}

/// Runs deterministic generation with an oracle denoiser from a noisy
/// `z_T`; returns the largest absolute deviation from the true `z0`.
pub fn oracle_inversion_error(stride: usize, seed: u64) -> f64 {
    use csdm::diffusion::{build_schedule, forward_with_noise, sample_chain};
    use csdm::numcore::Tensor;
    let s = build_schedule(100, 1e-5).unwrap();
    let mut rng = SplitRng::new(seed);
    let (n, k) = (7, 4);
    let z0 = Tensor::from_fn(&[n, k], |_| rng.normal());
    let h = Tensor::from_fn(&[n, k], |_| rng.normal());
    let eps = Tensor::from_fn(&[n, k], |_| rng.normal());
    let z_t = forward_with_noise(&s, &z0, &h, &eps, &vec![s.steps; n]).unwrap();
    let oracle = OracleDenoiser {
        schedule: s.clone(),
        z0: z0.clone(),
        h: h.clone(),
    };
    let out = sample_chain(&oracle, &s, &z_t, &h, stride, 0.0, &mut rng).unwrap();
    out.data()
        .iter()
        .zip(z0.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}
