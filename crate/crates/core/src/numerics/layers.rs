//! Parameterized building blocks shared by the model modules.

use rand::Rng;

use super::param::{Init, ParamId, ParamStore};
use super::scalar::Scalar;
use super::tape::{Tape, Var};
use crate::error::Result;

/// `x · W + b` with `W` stored as `d_in x d_out`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Registers `{name}.weight` (fan-in uniform) and `{name}.bias` (zeros).
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_init(store, name, d_in, d_out, Init::fan_in(d_in), true, rng)
    }

    /// Weight and bias both zero; the layer starts out as the constant 0.
    pub fn zeroed<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_init(store, name, d_in, d_out, Init::Zeros, true, rng)
    }

    pub fn with_init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(&format!("{name}.weight"), &[d_in, d_out], init, rng)?;
        let bias = if bias { Some(store.add(&format!("{name}.bias"), &[d_out], Init::Zeros, rng)?) } else { None };
        Ok(Linear { weight, bias, d_in, d_out })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = self.bias.map(|b| tape.param(b));
        tape.linear(x, w, b)
    }
}

/// Layer normalization over the trailing axis with learnable gain and shift.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        let gain = store.add(&format!("{name}.gain"), &[dim], Init::Constant(1.0), rng)?;
        let shift = store.add(&format!("{name}.shift"), &[dim], Init::Zeros, rng)?;
        Ok(LayerNorm { gain, shift, eps: 1e-5 })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(self.gain), tape.param(self.shift));
        tape.layer_norm(x, g, b, self.eps)
    }
}
