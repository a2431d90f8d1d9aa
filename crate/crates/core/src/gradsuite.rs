//! Finite-difference checks of the model's differentiable paths on small
//! random instances. Each case draws its extents, inputs and parameters
//! from a seed and returns the grad-check report for a scalar that mixes
//! every output entry with random weights.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::advp::{advp, AdvpParams};
use crate::autograd::{Graph, Var};
use crate::config::{Dims, LossWeights, RunConfig};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport, DEFAULT_EPS};
use crate::heads::{fusion_head, soft_ranked_ce, HeadParams};
use crate::mcgr::{mcgr_forward, mcgr_layer, McgrParams, McgrState};
use crate::model::{forward, init_params, loss, prepare};
use crate::nn::{random_tensor, ParamSet, ParamSpecs, ParamVars};
use crate::scenegen::encoders::PointSampling;
use crate::scenegen::{generate_scene, samples_of};
use crate::tensor::Tensor;
use crate::tgmf::{fuse_views, global_pool_text, global_pool_views, view_logits, TgmfParams};

/// Pass mark for every case.
pub const TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Case {
    TgmfPath,
    AdvpPath,
    McgrLayer,
    McgrStack,
    FusionHead,
    SoftRankedCe,
    VqaLoss,
}

impl Case {
    pub const ALL: [Case; 7] = [
        Case::TgmfPath,
        Case::AdvpPath,
        Case::McgrLayer,
        Case::McgrStack,
        Case::FusionHead,
        Case::SoftRankedCe,
        Case::VqaLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Case::TgmfPath => "tgmf_path",
            Case::AdvpPath => "advp_path",
            Case::McgrLayer => "mcgr_layer",
            Case::McgrStack => "mcgr_stack_l2",
            Case::FusionHead => "fusion_head",
            Case::SoftRankedCe => "soft_ranked_ce",
            Case::VqaLoss => "vqa_loss_end_to_end",
        }
    }

    pub fn run(self, seed: u64) -> Result<GradCheckReport> {
        match self {
            Case::TgmfPath => tgmf_path(seed),
            Case::AdvpPath => advp_path(seed),
            Case::McgrLayer => mcgr_case(seed, 1, true),
            Case::McgrStack => mcgr_case(seed, 2, false),
            Case::FusionHead => fusion_head_case(seed),
            Case::SoftRankedCe => soft_ranked_ce_case(seed),
            Case::VqaLoss => vqa_loss_case(seed),
        }
    }
}

/// `Σ x ⊙ w` for a fixed random `w`: a scalar touching every entry.
fn probe(g: &mut Graph, x: Var, w: &Tensor) -> Result<Var> {
    let wv = g.constant(w.clone())?;
    let prod = g.mul(x, wv)?;
    g.sum(prod)
}

fn split_params(ps: &ParamSet) -> (Vec<String>, Vec<Tensor>) {
    (ps.names().cloned().collect(), ps.iter().map(|(_, t)| t.clone()).collect())
}

fn bind_prefix(names: &[String], vars: &[Var]) -> ParamVars {
    ParamVars::from_pairs(names.iter().cloned().zip(vars.iter().copied()))
}

/// Pixel features and tokens to fused point features.
pub fn tgmf_path(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, hw, n_p, l) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=6), rng.gen_range(1..=5));
    let (di, dm, dk) = (rng.gen_range(1..=6), rng.gen_range(1..=6), rng.gen_range(1..=6));
    let valid: Vec<bool> = (0..n_p * m).map(|_| rng.gen_bool(0.7)).collect();
    let mut mask: Vec<bool> = (0..l).map(|_| rng.gen_bool(0.7)).collect();
    mask[0] = true;
    let w = random_tensor(&mut rng, &[n_p, di], 1.0);
    let inputs = vec![
        random_tensor(&mut rng, &[m * hw, di], 1.0),
        random_tensor(&mut rng, &[l, dm], 1.0),
        random_tensor(&mut rng, &[di, dk], 1.0),
        random_tensor(&mut rng, &[dm, dk], 1.0),
        random_tensor(&mut rng, &[n_p * m, di], 1.0),
    ];
    grad_check(
        |g, v| {
            let pooled = global_pool_views(g, v[0], m)?;
            let text = global_pool_text(g, v[1], &mask)?;
            let h = view_logits(g, pooled, text, &TgmfParams { w_q: v[2], w_k: v[3] })?;
            let fused = fuse_views(g, v[4], &valid, h, n_p, m)?;
            probe(g, fused.z_i, &w)
        },
        &inputs,
        DEFAULT_EPS,
    )
}

/// Image and point features through the gate and projection.
pub fn advp_path(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Dims { d_i: rng.gen_range(1..=4), d_p: rng.gen_range(1..=4), d_m: rng.gen_range(1..=6), ..Dims::default() };
    let n = rng.gen_range(1..=5);
    let mut specs = ParamSpecs::new();
    AdvpParams::declare(&mut specs, &d);
    let (names, mut inputs) = split_params(&specs.build(seed)?);
    inputs.push(random_tensor(&mut rng, &[n, d.d_i], 1.0));
    inputs.push(random_tensor(&mut rng, &[n, d.d_p], 1.0));
    let w = random_tensor(&mut rng, &[n, d.d_m], 1.0);
    grad_check(
        |g, v| {
            let k = names.len();
            let p = AdvpParams::bind(&bind_prefix(&names, &v[..k]))?;
            let z_v = advp(g, v[k], v[k + 1], &p, true)?;
            probe(g, z_v, &w)
        },
        &inputs,
        DEFAULT_EPS,
    )
}

fn jitter_norms(ps: &mut ParamSet, rng: &mut ChaCha8Rng) {
    for (name, t) in ps.iter_mut() {
        if name.contains(".ln") {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        }
    }
}

/// One reasoning layer on given dense, candidate and text rows
/// (`single`), or the full position-embedded stack of `layers` layers.
pub fn mcgr_case(seed: u64, layers: usize, single: bool) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_m = [4, 6, 8][rng.gen_range(0..3)];
    let n_p = rng.gen_range(2..=5);
    let d = Dims { d_m, l: layers, n_p, k: rng.gen_range(1..=n_p), ..Dims::default() };
    let lt = rng.gen_range(1..=3);
    let mut specs = ParamSpecs::new();
    McgrParams::declare(&mut specs, &d);
    let mut ps = specs.build(seed)?;
    jitter_norms(&mut ps, &mut rng);
    let (names, mut inputs) = split_params(&ps);
    let n = names.len();
    inputs.push(random_tensor(&mut rng, &[n_p, d_m], 1.0));
    inputs.push(random_tensor(&mut rng, &[lt, d_m], 1.0));
    inputs.push(random_tensor(&mut rng, &[d.k, d_m], 1.0));
    let coords = random_tensor(&mut rng, &[n_p, 3], 1.5);
    let mut mask: Vec<bool> = (0..lt).map(|_| rng.gen_bool(0.7)).collect();
    mask[0] = true;
    let wc = random_tensor(&mut rng, &[d.k, d_m], 1.0);
    let wt = random_tensor(&mut rng, &[lt, d_m], 1.0);
    grad_check(
        |g, v| {
            let p = McgrParams::bind(&bind_prefix(&names, &v[..n]), &d)?;
            let (e_c, e_t) = if single {
                let state = McgrState { e_v: v[n], e_c: v[n + 2], e_t: v[n + 1], token_mask: mask.clone() };
                mcgr_layer(g, &state, &p.layers[0], p.heads, true)?
            } else {
                let out = mcgr_forward(g, v[n], &coords, v[n + 1], &mask, &p, d.k, true)?;
                (out.e_c, out.e_t)
            };
            let sc = probe(g, e_c, &wc)?;
            let st = probe(g, e_t, &wt)?;
            g.add(sc, st)
        },
        &inputs,
        DEFAULT_EPS,
    )
}

/// Head logits from text and candidate rows.
pub fn fusion_head_case(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Dims {
        d_m: rng.gen_range(2..=8),
        n_answers: rng.gen_range(2..=8),
        n_cls: rng.gen_range(2..=8),
        ..Dims::default()
    };
    let (lt, k) = (rng.gen_range(1..=4), rng.gen_range(1..=5));
    let mut specs = ParamSpecs::new();
    HeadParams::declare(&mut specs, &d);
    let (names, mut inputs) = split_params(&specs.build(seed)?);
    let n = names.len();
    inputs.push(random_tensor(&mut rng, &[lt, d.d_m], 1.0));
    inputs.push(random_tensor(&mut rng, &[k, d.d_m], 1.0));
    let mut mask: Vec<bool> = (0..lt).map(|_| rng.gen_bool(0.7)).collect();
    mask[0] = true;
    let wa = random_tensor(&mut rng, &[1, d.n_answers], 1.0);
    let wc = random_tensor(&mut rng, &[1, d.n_cls], 1.0);
    let wl = random_tensor(&mut rng, &[1, k], 1.0);
    grad_check(
        |g, v| {
            let p = HeadParams::bind(&bind_prefix(&names, &v[..n]))?;
            let o = fusion_head(g, v[n], v[n + 1], &mask, &p)?;
            let a = probe(g, o.answer, &wa)?;
            let c = probe(g, o.class, &wc)?;
            let l = probe(g, o.loc, &wl)?;
            let ac = g.add(a, c)?;
            g.add(ac, l)
        },
        &inputs,
        DEFAULT_EPS,
    )
}

/// Soft-ranked cross-entropy with a mixed positive set.
pub fn soft_ranked_ce_case(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=8);
    let mut y: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
    y[0] = true;
    y[1] = false;
    let x = random_tensor(&mut rng, &[1, n], 2.0);
    grad_check(|g, v| soft_ranked_ce(g, v[0], &y), &[x], DEFAULT_EPS)
}

/// Small configuration for the end-to-end case.
pub fn end_to_end_config() -> RunConfig {
    let mut c = RunConfig::tiny();
    c.dims.h = 16;
    c.dims.w = 16;
    c
}

/// The full loss, from encoder stand-ins to heads, against every
/// parameter.
pub fn vqa_loss_case(seed: u64) -> Result<GradCheckReport> {
    let mut c = end_to_end_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    c.loss = LossWeights { lambda1: rng.gen_range(0.5..1.5), lambda2: rng.gen_range(0.5..1.5) };
    let sample = samples_of(generate_scene(seed, &c)?).swap_remove(0);
    let prep = prepare(&sample, &c, PointSampling::Inference)?;
    let mut params = init_params(&c.dims, seed + 1000)?;
    // At initialisation the view weights move the loss so little that
    // their gradients (around 1e-9) sit at the resolution of finite
    // differences; check at a point where the image branch matters.
    for (name, t) in params.iter_mut() {
        if name.starts_with("tgmf") || name.starts_with("image") {
            t.data_mut().iter_mut().for_each(|v| *v *= 3.0);
        }
    }
    let (names, inputs) = split_params(&params);
    grad_check(
        |g, v| {
            let f = forward(g, &bind_prefix(&names, v), &c, &prep)?;
            Ok(loss(g, &f, &c, &prep)?.total)
        },
        &inputs,
        DEFAULT_EPS,
    )
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub case: &'static str,
    pub seeds: u64,
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub pass: bool,
    pub seconds: f64,
}

/// Every case over seeds `0..seeds`.
pub fn run_suite(seeds: u64) -> Result<Vec<SuiteEntry>> {
    Case::ALL
        .iter()
        .map(|&case| {
            let start = Instant::now();
            let (mut worst, mut worst_seed) = (0.0f64, 0);
            for seed in 0..seeds {
                let r = case.run(seed)?;
                if r.max_rel_error > worst || seed == 0 {
                    worst = r.max_rel_error;
                    worst_seed = seed;
                }
            }
            Ok(SuiteEntry {
                case: case.name(),
                seeds,
                max_rel_error: worst,
                worst_seed,
                pass: worst <= TOLERANCE,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check(case: Case) {
        for seed in 0..10 {
            let r = case.run(seed).unwrap();
            assert!(r.max_rel_error <= TOLERANCE, "{} seed {seed}: {r:?}", case.name());
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn tgmf_path_passes() {
        check(Case::TgmfPath);
    }

    #[test]
    fn advp_path_passes() {
        check(Case::AdvpPath);
    }

    #[test]
    fn mcgr_layer_passes() {
        check(Case::McgrLayer);
    }

    #[test]
    fn mcgr_stack_passes() {
        check(Case::McgrStack);
    }

    #[test]
    fn fusion_head_passes() {
        check(Case::FusionHead);
    }

    #[test]
    fn soft_ranked_ce_passes() {
        check(Case::SoftRankedCe);
    }

    #[test]
    fn vqa_loss_end_to_end_passes() {
        check(Case::VqaLoss);
    }
}
