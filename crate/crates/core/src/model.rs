//! The full pipeline: encoder stand-ins, view fusion, dual-vision gating,
//! context-guided reasoning and heads, as one differentiable function of
//! the parameters.
//!
//! Everything that does not depend on parameters (seed points, pixel
//! correspondences, candidate selection, labels) is computed once per
//! sample by [`prepare`].

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::advp::{advp, AdvpParams};
use crate::autograd::{Graph, Var};
use crate::config::{Dims, RunConfig};
use crate::error::{bail, Result};
use crate::geometry::{assign_loc_labels, correspondences, fps, Camera, LOC_RADIUS};
use crate::heads::{fusion_head, vqa_loss, HeadOutputs, HeadParams, LossParts, TargetLabels};
use crate::mcgr::{mcgr_forward, McgrParams};
use crate::nn::{ParamSet, ParamSpecs, ParamVars};
use crate::scenegen::encoders::{
    self, encode_text, object_features, seed_point_features, select_seed_points, view_mixture, PointSampling,
};
use crate::scenegen::{QuestionKind, Scene, SceneSample};
use crate::tensor::Tensor;
use crate::tgmf::{fuse_views, global_pool_text, masked_mean_views, view_logits, TgmfParams};

pub fn declare_params(dims: &Dims) -> ParamSpecs {
    let mut specs = ParamSpecs::new();
    encoders::declare_params(&mut specs, dims);
    TgmfParams::declare(&mut specs, dims);
    AdvpParams::declare(&mut specs, dims);
    McgrParams::declare(&mut specs, dims);
    HeadParams::declare(&mut specs, dims);
    specs
}

pub fn init_params(dims: &Dims, seed: u64) -> Result<ParamSet> {
    declare_params(dims).build(seed)
}

/// Fails unless `params` has exactly the names and shapes `dims` declares.
pub fn check_params(params: &ParamSet, dims: &Dims) -> Result<()> {
    let expected = init_params(dims, 0)?;
    for (name, t) in expected.iter() {
        match params.get(name) {
            None => bail!(Config, "parameter {name} missing for these dimensions"),
            Some(p) if p.shape() != t.shape() => {
                bail!(Config, "parameter {name} has shape {:?}, dimensions need {:?}", p.shape(), t.shape())
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = params.names().find(|n| expected.get(n).is_none()) {
        bail!(Config, "parameter {extra} is not used by these dimensions");
    }
    Ok(())
}

/// Parameter-independent inputs of one sample.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub scene: Arc<Scene>,
    pub kind: QuestionKind,
    pub answer: usize,
    pub tokens: Vec<usize>,
    pub seed_indices: Vec<usize>,
    /// `N_p×3` seed point coordinates.
    pub coords: Tensor,
    /// `M × n_obj`: object shares averaged over each view's pixels.
    pub view_fractions: Tensor,
    /// Point-major `N_p·M × n_obj`: object shares at the matched pixel,
    /// zero rows for invalid pairs.
    pub point_view_mix: Tensor,
    /// Point-major `N_p·M` validity of the point-view pairs.
    pub valid: Vec<bool>,
    /// Candidates in selection order.
    pub candidates: Vec<usize>,
    pub targets: TargetLabels,
}

/// Seed points, correspondences to the first `dims.m` views, candidates
/// and labels for `sample`.
pub fn prepare(sample: &SceneSample, config: &RunConfig, sampling: PointSampling) -> Result<PreparedSample> {
    let dims = &config.dims;
    let scene = &sample.scene;
    if scene.views.len() < dims.m {
        bail!(Config, "scene has {} views, configuration uses {}", scene.views.len(), dims.m);
    }
    let xyz = scene.xyz();
    let seed_indices = select_seed_points(&xyz, dims.n_p, sampling)?;
    let coords = Tensor::new(&[dims.n_p, 3], seed_indices.iter().flat_map(|&i| xyz.row_slice(i).to_vec()).collect())?;

    let views: Vec<(&Camera, &Tensor)> = scene.views[..dims.m].iter().map(|v| (&v.camera, &v.depth)).collect();
    let corr = correspondences(&coords, &views, config.data.depth_tol)?;
    let mixtures = (0..dims.m).map(|v| view_mixture(scene, v)).collect::<Result<Vec<_>>>()?;
    let n_obj = scene.spec.objects.len();
    let mut mix = vec![0.0; dims.n_p * dims.m * n_obj];
    for p in 0..dims.n_p {
        for (v, mixture) in mixtures.iter().enumerate() {
            if let Some(px) = corr.get(p, v) {
                let row = (p * dims.m + v) * n_obj;
                mix[row..row + n_obj].copy_from_slice(&mixture.at(px));
            }
        }
    }
    let fractions = mixtures.iter().flat_map(|m| m.mean()).collect();

    let candidates = fps(&coords, dims.k, 0)?;
    let cand_coords = Tensor::new(&[dims.k, 3], candidates.iter().flat_map(|&i| coords.row_slice(i).to_vec()).collect())?;
    let loc = assign_loc_labels(&cand_coords, &sample.reference_centers(config.task), LOC_RADIUS)?;
    let q = sample.question();
    Ok(PreparedSample {
        scene: Arc::clone(scene),
        kind: q.kind,
        answer: q.answer,
        tokens: sample.tokens(config.task),
        seed_indices,
        coords,
        view_fractions: Tensor::new(&[dims.m, n_obj], fractions)?,
        point_view_mix: Tensor::new(&[dims.n_p * dims.m, n_obj], mix)?,
        valid: corr.valid(),
        candidates,
        targets: TargetLabels {
            answer: sample.answer_labels(dims.n_answers),
            obj_class: sample.class_labels(dims.n_cls, config.task),
            loc,
        },
    })
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub heads: HeadOutputs,
    /// `M×1` view logits, present when text-guided fusion runs.
    pub view_logits: Option<Var>,
    /// `N_p×M` per-point view weights, present when images are used.
    pub view_weights: Option<Var>,
    pub candidates: Vec<usize>,
}

pub fn forward(g: &mut Graph, pv: &ParamVars, config: &RunConfig, s: &PreparedSample) -> Result<Forward> {
    let dims = &config.dims;
    let toggles = &config.toggles;
    let (z_p, coords) = seed_point_features(g, pv, &s.scene.points, &s.seed_indices)?;
    let (z_t, mask) = encode_text(g, pv, &s.tokens, dims.max_tokens)?;

    let (z_i, view_logits_var, weights) = if toggles.use_images {
        let obj = object_features(g, pv, &s.scene.spec.objects)?;
        let mix = g.constant(s.point_view_mix.clone())?;
        let u_p = g.matmul(mix, obj)?;
        if toggles.tgmf {
            let p = TgmfParams::bind(pv)?;
            let frac = g.constant(s.view_fractions.clone())?;
            let g_i = g.matmul(frac, obj)?;
            let g_t = global_pool_text(g, z_t, &mask)?;
            let h_s = view_logits(g, g_i, g_t, &p)?;
            let f = fuse_views(g, u_p, &s.valid, h_s, dims.n_p, dims.m)?;
            (f.z_i, Some(h_s), Some(f.weights))
        } else {
            let f = masked_mean_views(g, u_p, &s.valid, dims.n_p, dims.m)?;
            (f.z_i, None, Some(f.weights))
        }
    } else {
        (g.constant(Tensor::zeros(&[dims.n_p, dims.d_i]))?, None, None)
    };

    let z_v = advp(g, z_i, z_p, &AdvpParams::bind(pv)?, toggles.advp)?;
    let reasoning = McgrParams::bind(pv, dims)?;
    let out = mcgr_forward(g, z_v, &coords, z_t, &mask, &reasoning, dims.k, toggles.mcgr)?;
    let heads = fusion_head(g, out.e_t, out.e_c, &mask, &HeadParams::bind(pv)?)?;
    Ok(Forward { heads, view_logits: view_logits_var, view_weights: weights, candidates: out.candidates.indices })
}

pub fn loss(g: &mut Graph, f: &Forward, config: &RunConfig, s: &PreparedSample) -> Result<LossParts> {
    vqa_loss(g, &f.heads, &s.targets, &config.loss)
}

/// Plain-number outcome of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleResult {
    pub answer_logits: Vec<f64>,
    pub loss: f64,
    pub loss_answer: f64,
    pub loss_class: f64,
    pub loss_loc: f64,
}

fn collect(g: &Graph, f: &Forward, l: &LossParts) -> SampleResult {
    let scalar = |v: Var| g.value(v).data()[0];
    SampleResult {
        answer_logits: g.value(f.heads.answer).data().to_vec(),
        loss: scalar(l.total),
        loss_answer: scalar(l.answer),
        loss_class: scalar(l.class),
        loss_loc: scalar(l.loc),
    }
}

/// Forward pass and loss without gradients.
pub fn evaluate_sample(params: &ParamSet, config: &RunConfig, s: &PreparedSample) -> Result<SampleResult> {
    let mut g = Graph::new();
    let pv = params.bind_frozen(&mut g)?;
    let f = forward(&mut g, &pv, config, s)?;
    let l = loss(&mut g, &f, config, s)?;
    Ok(collect(&g, &f, &l))
}

/// Forward pass, loss and parameter gradients.
pub fn sample_gradient(
    params: &ParamSet,
    config: &RunConfig,
    s: &PreparedSample,
) -> Result<(SampleResult, BTreeMap<String, Vec<f64>>)> {
    let mut g = Graph::new();
    let pv = params.bind(&mut g)?;
    let f = forward(&mut g, &pv, config, s)?;
    let l = loss(&mut g, &f, config, s)?;
    let result = collect(&g, &f, &l);
    if !result.loss.is_finite() {
        bail!(Numeric, "non-finite loss {}", result.loss);
    }
    g.backward(l.total)?;
    Ok((result, params.grads_from(&g, &pv)))
}
