//! Multimodal context-guided reasoning: sparse candidates read the dense
//! visual context through cross-attention, then share a pre-norm
//! transformer sub-layer with the text tokens. Stacked `L` times with the
//! dense context held fixed.

use crate::autograd::{Graph, Var};
use crate::config::Dims;
use crate::error::{bail, Result};
use crate::geometry::fps;
use crate::nn::{multi_head_attention, Activation, AttentionParams, LayerNorm, Mlp2, ParamSpecs, ParamVars};
use crate::tensor::Tensor;

/// Feedforward expansion factor of the transformer sub-layer.
pub const FFN_EXPANSION: usize = 4;

#[derive(Clone, Copy, Debug)]
pub struct McgrLayerParams {
    pub ln_cross: LayerNorm,
    pub cross: AttentionParams,
    pub ln1: LayerNorm,
    pub self_att: AttentionParams,
    pub ln2: LayerNorm,
    pub ffn: Mlp2,
}

impl McgrLayerParams {
    fn declare(specs: &mut ParamSpecs, prefix: &str, d: usize) {
        specs.layer_norm(&format!("{prefix}.ln_cross"), d);
        specs.attention(&format!("{prefix}.cross"), d);
        specs.layer_norm(&format!("{prefix}.ln1"), d);
        specs.attention(&format!("{prefix}.self"), d);
        specs.layer_norm(&format!("{prefix}.ln2"), d);
        specs.mlp2(&format!("{prefix}.ffn"), d, FFN_EXPANSION * d, d);
    }

    fn bind(pv: &ParamVars, prefix: &str) -> Result<Self> {
        Ok(Self {
            ln_cross: LayerNorm::bind(pv, &format!("{prefix}.ln_cross"))?,
            cross: AttentionParams::bind(pv, &format!("{prefix}.cross"))?,
            ln1: LayerNorm::bind(pv, &format!("{prefix}.ln1"))?,
            self_att: AttentionParams::bind(pv, &format!("{prefix}.self"))?,
            ln2: LayerNorm::bind(pv, &format!("{prefix}.ln2"))?,
            ffn: Mlp2::bind(pv, &format!("{prefix}.ffn"), Activation::Gelu)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct McgrParams {
    pub pos_v: Mlp2,
    pub pos_c: Mlp2,
    pub layers: Vec<McgrLayerParams>,
    pub heads: usize,
}

fn layer_prefix(i: usize) -> String {
    format!("mcgr.l{i}")
}

impl McgrParams {
    pub fn declare(specs: &mut ParamSpecs, dims: &Dims) {
        specs.mlp2("mcgr.pos_v", 3, dims.d_m, dims.d_m);
        specs.mlp2("mcgr.pos_c", 3, dims.d_m, dims.d_m);
        for i in 0..dims.l {
            McgrLayerParams::declare(specs, &layer_prefix(i), dims.d_m);
        }
    }

    pub fn bind(pv: &ParamVars, dims: &Dims) -> Result<Self> {
        if dims.l == 0 {
            bail!(Argument, "reasoning needs at least one layer");
        }
        Ok(Self {
            pos_v: Mlp2::bind(pv, "mcgr.pos_v", Activation::Gelu)?,
            pos_c: Mlp2::bind(pv, "mcgr.pos_c", Activation::Gelu)?,
            layers: (0..dims.l).map(|i| McgrLayerParams::bind(pv, &layer_prefix(i))).collect::<Result<_>>()?,
            heads: dims.heads(),
        })
    }
}

/// `Z + MLP(coords)`.
pub fn position_embed(g: &mut Graph, z: Var, coords: &Tensor, pos: &Mlp2) -> Result<Var> {
    if coords.rank() != 2 || coords.cols() != 3 {
        bail!(Dimension, "coordinates must be n×3, got {:?}", coords.shape());
    }
    if g.shape(z)[0] != coords.rows() {
        bail!(Dimension, "{} feature rows against {} coordinates", g.shape(z)[0], coords.rows());
    }
    let c = g.constant(coords.clone())?;
    let e = pos.forward(g, c)?;
    g.add(z, e)
}

#[derive(Clone, Debug)]
pub struct Candidates {
    pub features: Var,
    pub coords: Tensor,
    /// Row of each candidate in the dense set, in selection order.
    pub indices: Vec<usize>,
}

/// Farthest point sampling of `k` rows, starting from row 0.
pub fn sample_candidates(g: &mut Graph, z_v: Var, coords: &Tensor, k: usize) -> Result<Candidates> {
    if g.shape(z_v)[0] != coords.rows() {
        bail!(Dimension, "{} feature rows against {} coordinates", g.shape(z_v)[0], coords.rows());
    }
    let indices = fps(coords, k, 0)?;
    let features = g.gather_rows(z_v, indices.iter().map(|&i| Some(i)).collect())?;
    let coords = Tensor::new(&[k, 3], indices.iter().flat_map(|&i| coords.row_slice(i).to_vec()).collect())?;
    Ok(Candidates { features, coords, indices })
}

#[derive(Clone, Debug)]
pub struct McgrState {
    pub e_v: Var,
    pub e_c: Var,
    pub e_t: Var,
    pub token_mask: Vec<bool>,
}

/// One layer: candidate cross-attention into the dense context (skipped
/// when `cross` is false), then one joint self-attention and feedforward
/// block over `[h_c; E_t]`. Returns the updated `(E_c, E_t)`.
pub fn mcgr_layer(
    g: &mut Graph,
    state: &McgrState,
    p: &McgrLayerParams,
    heads: usize,
    cross: bool,
) -> Result<(Var, Var)> {
    let k = g.shape(state.e_c)[0];
    let lt = g.shape(state.e_t)[0];
    if state.token_mask.len() != lt {
        bail!(Dimension, "token mask of {} entries for {lt} tokens", state.token_mask.len());
    }
    if !state.token_mask.iter().any(|&b| b) {
        bail!(Numeric, "every text token is masked");
    }
    let h_c = if cross {
        let q = p.ln_cross.forward(g, state.e_c)?;
        let a = multi_head_attention(g, q, state.e_v, state.e_v, heads, &p.cross, None)?;
        g.add(state.e_c, a)?
    } else {
        state.e_c
    };
    let x = g.concat_rows(&[h_c, state.e_t])?;
    let mask: Vec<bool> = std::iter::repeat(true).take(k).chain(state.token_mask.iter().copied()).collect();
    let n = p.ln1.forward(g, x)?;
    let a = multi_head_attention(g, n, n, n, heads, &p.self_att, Some(&mask))?;
    let y = g.add(x, a)?;
    let n = p.ln2.forward(g, y)?;
    let f = p.ffn.forward(g, n)?;
    let z = g.add(y, f)?;
    Ok((g.slice_rows(z, 0, k)?, g.slice_rows(z, k, k + lt)?))
}

#[derive(Clone, Debug)]
pub struct McgrOutput {
    pub e_v: Var,
    pub e_c: Var,
    pub e_t: Var,
    pub candidates: Candidates,
}

/// Builds the dense and candidate embeddings from `Z_v` and its
/// coordinates, then runs every layer with the dense context fixed. Text
/// enters without position embedding.
#[allow(clippy::too_many_arguments)]
pub fn mcgr_forward(
    g: &mut Graph,
    z_v: Var,
    coords: &Tensor,
    z_t: Var,
    token_mask: &[bool],
    params: &McgrParams,
    k: usize,
    cross: bool,
) -> Result<McgrOutput> {
    if params.layers.is_empty() {
        bail!(Argument, "reasoning needs at least one layer");
    }
    let e_v = position_embed(g, z_v, coords, &params.pos_v)?;
    let candidates = sample_candidates(g, z_v, coords, k)?;
    let e_c = position_embed(g, candidates.features, &candidates.coords, &params.pos_c)?;
    let mut state = McgrState { e_v, e_c, e_t: z_t, token_mask: token_mask.to_vec() };
    for layer in &params.layers {
        let (c, t) = mcgr_layer(g, &state, layer, params.heads, cross)?;
        state.e_c = c;
        state.e_t = t;
    }
    Ok(McgrOutput { e_v, e_c: state.e_c, e_t: state.e_t, candidates })
}
