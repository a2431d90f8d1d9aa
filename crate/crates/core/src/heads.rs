//! Answer, object-class and localisation heads, the soft-ranked
//! cross-entropy objective and exact-match metrics.
//!
//! The answer head is a compact stand-in for a full co-attention network:
//! the question and the candidates are each pooled to one vector by a
//! learned attention score, the two are fused additively, and an affine
//! map gives the answer logits.

use crate::autograd::{Graph, Var};
use crate::config::{Dims, LossWeights};
use crate::error::{bail, Result};
use crate::nn::{attention_pool, Init, Linear, ParamSpecs, ParamVars};

#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    pub pool_t: Var,
    pub pool_c: Var,
    pub fuse_t: Linear,
    pub fuse_c: Linear,
    pub answer: Linear,
    pub class: Linear,
    pub loc: Linear,
}

impl HeadParams {
    /// The candidate-side fusion map and the localisation map carry no
    /// bias: the first would duplicate the text-side bias and the second
    /// would shift every candidate logit equally.
    pub fn declare(specs: &mut ParamSpecs, dims: &Dims) {
        let d = dims.d_m;
        specs.add("heads.pool_t", &[d, 1], Init::Uniform { fan_in: d });
        specs.add("heads.pool_c", &[d, 1], Init::Uniform { fan_in: d });
        specs.linear("heads.fuse_t", d, d, true);
        specs.linear("heads.fuse_c", d, d, false);
        specs.linear("heads.answer", d, dims.n_answers, true);
        specs.linear("heads.class", d, dims.n_cls, true);
        specs.linear("heads.loc", d, 1, false);
    }

    pub fn bind(pv: &ParamVars) -> Result<Self> {
        Ok(Self {
            pool_t: pv.get("heads.pool_t")?,
            pool_c: pv.get("heads.pool_c")?,
            fuse_t: Linear::bind(pv, "heads.fuse_t")?,
            fuse_c: Linear::bind_no_bias(pv, "heads.fuse_c")?,
            answer: Linear::bind(pv, "heads.answer")?,
            class: Linear::bind(pv, "heads.class")?,
            loc: Linear::bind_no_bias(pv, "heads.loc")?,
        })
    }
}

/// Logit rows: answers `1×N_α`, object classes `1×N_cls`, candidates `1×K`.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    pub answer: Var,
    pub class: Var,
    pub loc: Var,
}

pub fn fusion_head(g: &mut Graph, e_t: Var, e_c: Var, token_mask: &[bool], p: &HeadParams) -> Result<HeadOutputs> {
    let t_vec = attention_pool(g, e_t, p.pool_t, Some(token_mask))?;
    let c_vec = attention_pool(g, e_c, p.pool_c, None)?;
    let ft = p.fuse_t.forward(g, t_vec)?;
    let fc = p.fuse_c.forward(g, c_vec)?;
    let fused = g.add(ft, fc)?;
    let answer = p.answer.forward(g, fused)?;
    let class = p.class.forward(g, c_vec)?;
    let per_candidate = p.loc.forward(g, e_c)?;
    let loc = g.transpose(per_candidate)?;
    Ok(HeadOutputs { answer, class, loc })
}

/// Positive-label masks. Class and localisation masks may be all false,
/// in which case their loss terms vanish.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetLabels {
    pub answer: Vec<bool>,
    pub obj_class: Vec<bool>,
    pub loc: Vec<bool>,
}

impl TargetLabels {
    pub fn validate(&self) -> Result<()> {
        if !self.answer.iter().any(|&b| b) {
            bail!(Argument, "answer labels need at least one positive");
        }
        Ok(())
    }
}

/// `-log Σ_{y_i} softmax(logits)_i`; exactly zero, with no gradient, when
/// no label is positive.
pub fn soft_ranked_ce(g: &mut Graph, logits: Var, y: &[bool]) -> Result<Var> {
    g.soft_ranked_ce(logits, y)
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub answer: Var,
    pub class: Var,
    pub loc: Var,
}

/// `L_ans + λ1·L_cls + λ2·L_loc`.
pub fn vqa_loss(g: &mut Graph, out: &HeadOutputs, targets: &TargetLabels, w: &LossWeights) -> Result<LossParts> {
    targets.validate()?;
    let answer = soft_ranked_ce(g, out.answer, &targets.answer)?;
    let class = soft_ranked_ce(g, out.class, &targets.obj_class)?;
    let loc = soft_ranked_ce(g, out.loc, &targets.loc)?;
    let wc = g.scale(class, w.lambda1)?;
    let wl = g.scale(loc, w.lambda2)?;
    let partial = g.add(answer, wc)?;
    let total = g.add(partial, wl)?;
    Ok(LossParts { total, answer, class, loc })
}

/// Indices of the `k` largest logits, best first; equal logits rank the
/// lower index first.
pub fn top_k(logits: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > logits.len() {
        bail!(Argument, "k = {k} outside 1..={}", logits.len());
    }
    if logits.iter().any(|v| v.is_nan()) {
        bail!(Numeric, "NaN logit");
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    order.truncate(k);
    Ok(order)
}

/// Whether any gold answer is among the top `k` logits.
pub fn em_at_k(logits: &[f64], gold: &[usize], k: usize) -> Result<bool> {
    if gold.is_empty() {
        bail!(Argument, "exact match needs at least one gold answer");
    }
    if let Some(g) = gold.iter().find(|&&g| g >= logits.len()) {
        bail!(Argument, "gold answer {g} outside {} logits", logits.len());
    }
    Ok(top_k(logits, k)?.iter().any(|i| gold.contains(i)))
}
