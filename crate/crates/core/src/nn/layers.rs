use rand::Rng;

use super::{BufferId, Ctx, Mode, ParamId, ParamStore, StatUpdate};
use crate::autograd::{Conv2dGeom, TransposedGeom, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: Conv2dGeom,
}

impl Conv2d {
    /// Square-kernel convolution with He fan-in initialization.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        let w = Tensor::randn(&[cout, cin, kernel, kernel], (2.0 / fan_in).sqrt(), rng);
        let weight = store.add(format!("{name}.weight"), w, true);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true));
        Self {
            weight,
            bias,
            geom: Conv2dGeom::new(stride, pad),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.p(self.weight);
        let b = self.bias.map(|b| ctx.p(b));
        ctx.tape.conv2d(x, w, b, self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: TransposedGeom,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        // Each output pixel receives about k^2 / s^2 contributions per input channel.
        let fan_in = (cin * kernel * kernel) as f64 / (stride * stride) as f64;
        let w = Tensor::randn(&[cin, cout, kernel, kernel], (1.0 / fan_in).sqrt(), rng);
        let weight = store.add(format!("{name}.weight"), w, true);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true));
        Self {
            weight,
            bias,
            geom: TransposedGeom::new(stride, pad),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.p(self.weight);
        let b = self.bias.map(|b| ctx.p(b));
        ctx.tape.conv_transpose2d(x, w, b, self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, eps: f64, momentum: f64) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), false),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), false),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
            eps,
            momentum,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let g = ctx.p(self.gamma);
        let b = ctx.p(self.beta);
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.tape.batch_norm_train(x, g, b, self.eps)?;
                ctx.push_update(StatUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    stats,
                    momentum: self.momentum,
                });
                Ok(y)
            }
            Mode::Eval => {
                let store = ctx.store;
                ctx.tape.batch_norm_eval(
                    x,
                    g,
                    b,
                    store.buffer(self.running_mean).data(),
                    store.buffer(self.running_var).data(),
                    self.eps,
                )
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let w = Tensor::randn(&[output, input], (1.0 / input as f64).sqrt(), rng);
        Self {
            weight: store.add(format!("{name}.weight"), w, true),
            bias: bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[output]), true)),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.p(self.weight);
        let b = self.bias.map(|b| ctx.p(b));
        ctx.tape.linear(x, w, b)
    }
}
