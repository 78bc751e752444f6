//! Parameterized layers and the forward context that binds them to a tape.

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// A forward pass in progress: the tape plus the parameters it reads.
pub struct Graph<'a, T: Real> {
    pub tape: Tape<T>,
    pub store: &'a ParamStore<T>,
    pub training: bool,
    /// Batch statistics observed by batch-norm layers during training, to be
    /// folded into the running averages after the step.
    pub norm_updates: Vec<NormUpdate<T>>,
}

pub struct NormUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new(store: &'a ParamStore<T>, training: bool) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            training,
            norm_updates: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }
}

/// Fold batch statistics into running averages with the given momentum.
pub fn apply_norm_updates<T: Real>(store: &mut ParamStore<T>, updates: &[NormUpdate<T>], momentum: f64) {
    let m = T::lit(momentum);
    for u in updates {
        for (r, &b) in store.get_mut(u.running_mean).data_mut().iter_mut().zip(&u.mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        for (r, &b) in store.get_mut(u.running_var).data_mut().iter_mut().zip(&u.var) {
            *r = (T::one() - m) * *r + m * b;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-initialized `k × k` convolution with "same" padding for odd `k`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        seed: u64,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add_conv(seed, &format!("{name}.weight"), [cout, cin, k, k]);
        let bias = bias.then(|| store.add_const(&format!("{name}.bias"), &[cout], 0.0));
        Conv2d {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Stride-2, kernel-4, padding-1 transpose convolution: doubles `h` and `w`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvTranspose2d {
    pub const KERNEL: usize = 4;
    pub const STRIDE: usize = 2;
    pub const PAD: usize = 1;

    pub fn new<T: Real>(store: &mut ParamStore<T>, seed: u64, name: &str, cin: usize, cout: usize) -> Self {
        // fan-in of a stride-2 transpose conv: each output sees cin·(k/2)² inputs
        let fan_in = cin * (Self::KERNEL / Self::STRIDE).pow(2);
        let weight = store.add_normal(
            seed,
            &format!("{name}.weight"),
            &[cin, cout, Self::KERNEL, Self::KERNEL],
            (2.0 / fan_in as f64).sqrt(),
        );
        let bias = store.add_const(&format!("{name}.bias"), &[cout], 0.0);
        ConvTranspose2d { weight, bias }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.tape.conv_transpose2d(x, w, Some(b), Self::STRIDE, Self::PAD)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    Group,
}

#[derive(Clone, Debug)]
pub struct Norm {
    kind: NormKind,
    groups: usize,
    gamma: ParamId,
    beta: ParamId,
    running_mean: Option<ParamId>,
    running_var: Option<ParamId>,
}

/// Momentum of the batch-norm running averages.
pub const NORM_MOMENTUM: f64 = 0.1;

impl Norm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, kind: NormKind, groups: usize) -> Self {
        let gamma = store.add_const(&format!("{name}.gamma"), &[channels], 1.0);
        let beta = store.add_const(&format!("{name}.beta"), &[channels], 0.0);
        let (running_mean, running_var) = match kind {
            NormKind::Batch => (
                Some(store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]))),
                Some(store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], T::one()))),
            ),
            NormKind::Group => (None, None),
        };
        Norm {
            kind,
            groups,
            gamma,
            beta,
            running_mean,
            running_var,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        match self.kind {
            NormKind::Group => g.tape.group_norm(x, gamma, beta, self.groups),
            NormKind::Batch => {
                let (rm, rv) = (
                    self.running_mean.expect("batch norm buffers"),
                    self.running_var.expect("batch norm buffers"),
                );
                if g.training {
                    let (y, mean, var) = g.tape.batch_norm_train(x, gamma, beta);
                    g.norm_updates.push(NormUpdate {
                        running_mean: rm,
                        running_var: rv,
                        mean,
                        var,
                    });
                    y
                } else {
                    let mean = g.store.get(rm).data().to_vec();
                    let var = g.store.get(rv).data().to_vec();
                    g.tape.batch_norm_eval(x, gamma, beta, &mean, &var)
                }
            }
        }
    }
}

/// Convolution followed by normalization and ReLU.
#[derive(Clone, Debug)]
pub struct ConvNormRelu {
    conv: Conv2d,
    norm: Norm,
}

impl ConvNormRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        seed: u64,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        kind: NormKind,
        groups: usize,
    ) -> Self {
        ConvNormRelu {
            conv: Conv2d::new(store, seed, &format!("{name}.conv"), cin, cout, 3, stride, false),
            norm: Norm::new(store, &format!("{name}.norm"), cout, kind, groups),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let y = self.conv.forward(g, x);
        let y = self.norm.forward(g, y);
        g.tape.relu(y)
    }
}
