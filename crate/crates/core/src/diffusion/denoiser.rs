use crate::backbones::Dense;
use crate::error::Result;
use crate::numcore::{ParamStore, SplitRng, Tape, Tensor, Var};

pub const TIME_DIMS: usize = 16;

/// Sinusoidal encoding of step `t`: pairs `(sin(t w_i), cos(t w_i))` with
/// `w_i = 10000^(-i / (dims/2))`.
pub fn time_encoding(t: usize, dims: usize) -> Vec<f64> {
    let half = dims / 2;
    let mut out = Vec::with_capacity(dims);
    for i in 0..half {
        let w = 10000f64.powf(-(i as f64) / half as f64);
        out.push((t as f64 * w).sin());
        out.push((t as f64 * w).cos());
    }
    out.resize(dims, 0.0);
    out
}

pub fn time_encoding_batch(steps: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = steps.iter().map(|&t| time_encoding(t, TIME_DIMS)).collect();
    let data = rows.concat();
    Tensor::new(vec![steps.len(), TIME_DIMS], data).expect("time encoding shape")
}

/// Two affine layers with a ReLU between; input is `z_t` joined with the
/// time encoding, output is the predicted noise.
#[derive(Clone, Debug)]
pub struct Denoiser {
    l1: Dense,
    l2: Dense,
    pub hidden: usize,
    pub width: usize,
}

impl Denoiser {
    /// The output layer starts at zero, so an untrained denoiser predicts
    /// no noise at all.
    pub fn new(store: &mut ParamStore, hidden: usize, width: usize, rng: &mut SplitRng) -> Self {
        let l1 = Dense::new(store, "denoiser.l1", hidden + TIME_DIMS, width, rng);
        let l2 = Dense {
            w: store.add("denoiser.l2.w", Tensor::zeros(&[width, hidden])),
            b: store.add("denoiser.l2.b", Tensor::zeros(&[hidden])),
        };
        Self {
            l1,
            l2,
            hidden,
            width,
        }
    }

    pub fn rebind(&self, store: &ParamStore) -> Self {
        Self {
            l1: self.l1.rebind(store),
            l2: self.l2.rebind(store),
            hidden: self.hidden,
            width: self.width,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z_t: Var,
        steps: &[usize],
        dropout: Option<(f64, &mut SplitRng)>,
    ) -> Result<Var> {
        let te = tape.constant(time_encoding_batch(steps));
        let x = tape.concat(&[z_t, te])?;
        let a = self.l1.apply(tape, store, x)?;
        let mut a = tape.relu(a);
        if let Some((p, rng)) = dropout {
            a = tape.dropout(a, p, true, rng)?;
        }
        self.l2.apply(tape, store, a)
    }
}
