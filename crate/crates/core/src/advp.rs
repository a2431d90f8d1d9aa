//! Adaptive dual-vision perception: a per-point, per-channel sigmoid gate
//! over the concatenated image and point features, then a projection to
//! the reasoning width.

use crate::autograd::{Graph, Var};
use crate::config::Dims;
use crate::error::{bail, Result};
use crate::nn::{Activation, Linear, ParamSpecs, ParamVars};

#[derive(Clone, Copy, Debug)]
pub struct AdvpParams {
    pub gate1: Linear,
    pub gate2: Linear,
    pub out: Linear,
}

impl AdvpParams {
    pub fn declare(specs: &mut ParamSpecs, dims: &Dims) {
        let c = dims.d_i + dims.d_p;
        specs.linear("advp.gate.fc1", c, c, true);
        specs.linear("advp.gate.fc2", c, c, true);
        specs.linear("advp.out", c, dims.d_m, true);
    }

    pub fn bind(pv: &ParamVars) -> Result<Self> {
        Ok(Self {
            gate1: Linear::bind(pv, "advp.gate.fc1")?,
            gate2: Linear::bind(pv, "advp.gate.fc2")?,
            out: Linear::bind(pv, "advp.out")?,
        })
    }
}

pub fn concat_features(g: &mut Graph, z_i: Var, z_p: Var) -> Result<Var> {
    if g.shape(z_i)[0] != g.shape(z_p)[0] {
        bail!(Dimension, "{} image rows against {} point rows", g.shape(z_i)[0], g.shape(z_p)[0]);
    }
    g.concat_cols(&[z_i, z_p])
}

/// Gated features `Z_h = σ(MLP(c)) ⊙ c` with `c = [Z_i, Z_p]`, and the
/// gate itself.
pub fn advp_gate(g: &mut Graph, z_i: Var, z_p: Var, params: &AdvpParams) -> Result<(Var, Var)> {
    let c = concat_features(g, z_i, z_p)?;
    let h = params.gate1.forward(g, c)?;
    let h = Activation::Softplus.apply(g, h)?;
    let pre = params.gate2.forward(g, h)?;
    let gate = g.sigmoid(pre)?;
    Ok((g.mul(gate, c)?, gate))
}

/// `Z_v = FC(Z_h)`.
pub fn advp_project(g: &mut Graph, z_h: Var, params: &AdvpParams) -> Result<Var> {
    params.out.forward(g, z_h)
}

/// Gated fusion, or plain concatenation plus projection when `gated` is
/// false (the gate held at 1).
pub fn advp(g: &mut Graph, z_i: Var, z_p: Var, params: &AdvpParams, gated: bool) -> Result<Var> {
    let z_h = if gated { advp_gate(g, z_i, z_p, params)?.0 } else { concat_features(g, z_i, z_p)? };
    advp_project(g, z_h, params)
}
