//! Parameterized layers built on the tape.

use rand::Rng;

use crate::difftensor::{Conv2dSpec, ParamBinder, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pending running-statistics update recorded by a training-mode batch norm.
#[derive(Debug, Clone, Copy)]
pub struct BnUpdate {
    mean: ParamId,
    var: ParamId,
    momentum: f64,
    node: Var,
}

/// Forward-pass context: the tape, parameter bindings and mode.
pub struct Fwd<'t, 'b, 's> {
    pub tape: &'t mut Tape,
    pub binder: &'b mut ParamBinder<'s>,
    pub mode: Mode,
    bn_updates: Vec<BnUpdate>,
}

impl<'t, 'b, 's> Fwd<'t, 'b, 's> {
    pub fn new(tape: &'t mut Tape, binder: &'b mut ParamBinder<'s>, mode: Mode) -> Self {
        Fwd {
            tape,
            binder,
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.binder.get(self.tape, id)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }
}

/// Folds recorded batch statistics into the running buffers.
pub fn apply_bn_updates(store: &mut ParamStore, tape: &Tape, updates: &[BnUpdate]) {
    for u in updates {
        let Some((mean, var)) = tape.batch_stats(u.node) else {
            continue;
        };
        let (mean, var) = (mean.to_vec(), var.to_vec());
        for (id, stats) in [(u.mean, mean), (u.var, var)] {
            let buf = store.get_mut(id).tensor.data_mut();
            for (b, s) in buf.iter_mut().zip(stats) {
                *b = (1.0 - u.momentum) * *b + u.momentum * s;
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        ci: usize,
        co: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), Tensor::glorot(&[co, ci], rng))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[co]))?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    /// `x: [Ci, ..]` -> `[Co, ..]`.
    pub fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let w = f.param(self.weight);
        let y = f.tape.matmul(w, x);
        match self.bias {
            Some(b) => {
                let b = f.param(b);
                f.tape.add_channel_bias(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[c], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c]))?,
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[c]))?,
            running_var: store
                .add_buffer(format!("{name}.running_var"), Tensor::full(&[c], 1.0))?,
            eps: 1e-3,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let g = f.param(self.gamma);
        let b = f.param(self.beta);
        let count = f.tape.value(x).numel() / f.tape.shape(x)[0].max(1);
        match f.mode {
            Mode::Train if count > 1 => {
                let y = f.tape.batch_norm(x, g, b, self.eps);
                f.bn_updates.push(BnUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    momentum: self.momentum,
                    node: y,
                });
                y
            }
            _ => {
                let store = f.binder.store();
                let mean = store.tensor(self.running_mean).data().to_vec();
                let var = store.tensor(self.running_var).data().to_vec();
                f.tape.batch_norm_eval(x, g, b, &mean, &var, self.eps)
            }
        }
    }
}

/// Square-kernel 2D convolution.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::glorot(&[co, ci, k, k], rng),
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[co]))?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            spec: Conv2dSpec { stride, padding },
        })
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let w = f.param(self.weight);
        let b = self.bias.map(|b| f.param(b));
        f.tape.conv2d(x, w, b, self.spec)
    }
}

/// Transposed convolution with kernel size equal to its stride.
#[derive(Debug, Clone, Copy)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        ci: usize,
        co: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::glorot(&[ci, co, stride, stride], rng),
        )?;
        Ok(ConvTranspose2d { weight, stride })
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let w = f.param(self.weight);
        f.tape.conv_transpose2d(x, w, None, self.stride)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn running_stats_track_batch() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 1).unwrap();
        let x = Tensor::new(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        for _ in 0..200 {
            let mut tape = Tape::new();
            let mut binder = ParamBinder::new(&store);
            let mut f = Fwd::new(&mut tape, &mut binder, Mode::Train);
            let xv = f.constant(x.clone());
            bn.forward(&mut f, xv);
            let ups = f.take_bn_updates();
            drop(binder);
            apply_bn_updates(&mut store, &tape, &ups);
        }
        assert!((store.tensor(bn.running_mean).data()[0] - 2.5).abs() < 1e-6);
        assert!((store.tensor(bn.running_var).data()[0] - 1.25).abs() < 1e-6);
    }

    #[test]
    fn linear_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 3, 5, true, &mut rng).unwrap();
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(&store);
        let mut f = Fwd::new(&mut tape, &mut binder, Mode::Eval);
        let x = f.constant(Tensor::zeros(&[3, 7]));
        let y = lin.forward(&mut f, x);
        assert_eq!(tape.shape(y), &[5, 7]);
    }
}
