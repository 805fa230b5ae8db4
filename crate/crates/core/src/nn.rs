//! Layer descriptions shared by every model.
//!
//! A layer only knows its parameter names and shapes; weights live in a
//! [`ParamSet`] and are looked up through a [`Bound`] at forward time.

use alloc::format;
use alloc::string::String;

use crate::params::{Bound, ParamSet};
use crate::tape::{Activation, Tape, Var};
use crate::{Result, Rng};

pub const NORM_EPSILON: f32 = 1e-5;

#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    pub fn new(name: &str, in_c: usize, out_c: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Conv {
            name: name.into(),
            in_c,
            out_c,
            kernel,
            stride,
            padding,
        }
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut Rng) {
        let k = self.kernel;
        params.init_he(&format!("{}.w", self.name), &[self.out_c, self.in_c, k, k], self.in_c * k * k, rng);
        params.init_const(&format!("{}.b", self.name), &[self.out_c], 0.0);
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, p.var(&format!("{}.w", self.name))?, self.stride, self.padding)?;
        tape.channel_bias(y, p.var(&format!("{}.b", self.name))?)
    }
}

/// Transposed convolution, kernel stored `in x out x k x k`.
#[derive(Clone, Debug)]
pub struct ConvT {
    pub name: String,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvT {
    pub fn new(name: &str, in_c: usize, out_c: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvT {
            name: name.into(),
            in_c,
            out_c,
            kernel,
            stride,
            padding,
        }
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut Rng) {
        let k = self.kernel;
        // Each output pixel sees roughly in_c * (k / stride)^2 inputs.
        let fan_in = (self.in_c * k * k / (self.stride * self.stride)).max(1);
        params.init_he(&format!("{}.w", self.name), &[self.in_c, self.out_c, k, k], fan_in, rng);
        params.init_const(&format!("{}.b", self.name), &[self.out_c], 0.0);
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv_transpose2d(x, p.var(&format!("{}.w", self.name))?, self.stride, self.padding)?;
        tape.channel_bias(y, p.var(&format!("{}.b", self.name))?)
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub name: String,
    pub channels: usize,
}

impl Norm {
    pub fn new(name: &str, channels: usize) -> Self {
        Norm {
            name: name.into(),
            channels,
        }
    }

    pub fn init(&self, params: &mut ParamSet) {
        params.init_const(&format!("{}.g", self.name), &[self.channels], 1.0);
        params.init_const(&format!("{}.b", self.name), &[self.channels], 0.0);
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.instance_norm(
            x,
            p.var(&format!("{}.g", self.name))?,
            p.var(&format!("{}.b", self.name))?,
            NORM_EPSILON,
        )
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub name: String,
    pub in_f: usize,
    pub out_f: usize,
}

impl Dense {
    pub fn new(name: &str, in_f: usize, out_f: usize) -> Self {
        Dense {
            name: name.into(),
            in_f,
            out_f,
        }
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut Rng) {
        params.init_he(&format!("{}.w", self.name), &[self.in_f, self.out_f], self.in_f, rng);
        params.init_const(&format!("{}.b", self.name), &[self.out_f], 0.0);
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(
            x,
            p.var(&format!("{}.w", self.name))?,
            p.var(&format!("{}.b", self.name))?,
        )
    }
}

/// `x + norm(conv(relu(norm(conv(x)))))` with 3x3 convolutions.
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: Conv,
    norm1: Norm,
    conv2: Conv,
    norm2: Norm,
}

impl ResBlock {
    pub fn new(name: &str, channels: usize) -> Self {
        ResBlock {
            conv1: Conv::new(&format!("{name}.c1"), channels, channels, 3, 1, 1),
            norm1: Norm::new(&format!("{name}.n1"), channels),
            conv2: Conv::new(&format!("{name}.c2"), channels, channels, 3, 1, 1),
            norm2: Norm::new(&format!("{name}.n2"), channels),
        }
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut Rng) {
        self.conv1.init(params, rng);
        self.norm1.init(params);
        self.conv2.init(params, rng);
        self.norm2.init(params);
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, p, x)?;
        let h = self.norm1.forward(tape, p, h)?;
        let h = tape.relu(h)?;
        let h = self.conv2.forward(tape, p, h)?;
        let h = self.norm2.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

/// `act(norm(conv(x)))`, the common encoder step.
pub fn conv_norm_act(
    tape: &mut Tape,
    p: &Bound,
    conv: &Conv,
    norm: &Norm,
    act: Activation,
    x: Var,
) -> Result<Var> {
    let h = conv.forward(tape, p, x)?;
    let h = norm.forward(tape, p, h)?;
    tape.activation(h, act)
}

/// Index batches of a shuffled epoch; the last batch may be short.
pub fn epoch_batches(n: usize, batch: usize, rng: &mut Rng) -> alloc::vec::Vec<alloc::vec::Vec<usize>> {
    let mut order: alloc::vec::Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Runs `f` on a fresh tape with `params` bound as constants.
pub fn infer<T>(params: &ParamSet, f: impl FnOnce(&mut Tape, &Bound) -> Result<T>) -> Result<T> {
    let mut tape = Tape::new();
    let bound = tape.bind(params, false);
    f(&mut tape, &bound)
}
