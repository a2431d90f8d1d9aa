//! Text-guided multi-view fusion.
//!
//! Each view gets one logit from the dot product of its pooled image
//! feature with the pooled question feature. Per point, the logits of the
//! views that actually see the point are softmax-normalised and used to
//! average that point's back-projected features.

use crate::autograd::{Graph, Var};
use crate::config::Dims;
use crate::error::{bail, Result};
use crate::geometry::BackProjectionResult;
use crate::nn::{Init, ParamSpecs, ParamVars};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct TgmfParams {
    /// `D_i × d_k`
    pub w_q: Var,
    /// `D_m × d_k`
    pub w_k: Var,
}

impl TgmfParams {
    pub fn declare(specs: &mut ParamSpecs, dims: &Dims) {
        specs.add("tgmf.w_q", &[dims.d_i, dims.d_k], Init::Uniform { fan_in: dims.d_i });
        specs.add("tgmf.w_k", &[dims.d_m, dims.d_k], Init::Uniform { fan_in: dims.d_m });
    }

    pub fn bind(pv: &ParamVars) -> Result<Self> {
        Ok(Self { w_q: pv.get("tgmf.w_q")?, w_k: pv.get("tgmf.w_k")? })
    }
}

/// Mean over pixels of each view. `u_i` stacks the `m` views' pixel rows
/// (`M·H·W × D_i`); returns `M × D_i`.
pub fn global_pool_views(g: &mut Graph, u_i: Var, m: usize) -> Result<Var> {
    let rows = g.shape(u_i)[0];
    if m == 0 || rows % m != 0 || rows == 0 {
        bail!(Dimension, "{rows} pixel rows do not split into {m} views");
    }
    let per = rows / m;
    let pooled = (0..m)
        .map(|v| {
            let view = g.slice_rows(u_i, v * per, (v + 1) * per)?;
            g.mean_rows(view)
        })
        .collect::<Result<Vec<_>>>()?;
    g.concat_rows(&pooled)
}

/// Mean of the unmasked token rows, `1 × D_m`.
pub fn global_pool_text(g: &mut Graph, z_t: Var, token_mask: &[bool]) -> Result<Var> {
    let l = g.shape(z_t)[0];
    if token_mask.len() != l {
        bail!(Dimension, "mask of {} for {l} tokens", token_mask.len());
    }
    let count = token_mask.iter().filter(|m| **m).count();
    if count == 0 {
        bail!(Argument, "every token is masked");
    }
    let w: Vec<f64> = token_mask.iter().map(|&m| if m { 1.0 / count as f64 } else { 0.0 }).collect();
    let w = g.constant(Tensor::new(&[1, l], w)?)?;
    g.matmul(w, z_t)
}

/// `h_s = (G_i W_q)(G_t W_k)ᵀ / √d_k`, one logit per view (`M × 1`).
pub fn view_logits(g: &mut Graph, g_i: Var, g_t: Var, params: &TgmfParams) -> Result<Var> {
    let q = g.matmul(g_i, params.w_q)?;
    let k = g.matmul(g_t, params.w_k)?;
    let d_k = g.shape(params.w_q)[1];
    let kt = g.transpose(k)?;
    let h = g.matmul(q, kt)?;
    g.scale(h, 1.0 / (d_k as f64).sqrt())
}

/// Fused image features per point.
#[derive(Clone, Debug)]
pub struct Fused {
    /// `N_p × D_i`
    pub z_i: Var,
    /// `N_p × M` view weights; rows of unseen points are zero.
    pub weights: Var,
    /// False for points no view sees.
    pub point_valid: Vec<bool>,
}

fn point_valid(valid: &[bool], n_p: usize, m: usize) -> Vec<bool> {
    (0..n_p).map(|p| valid[p * m..(p + 1) * m].iter().any(|v| *v)).collect()
}

fn check_layout(g: &Graph, u_p: Var, valid: &[bool], n_p: usize, m: usize) -> Result<()> {
    if g.shape(u_p)[0] != n_p * m || valid.len() != n_p * m {
        bail!(Dimension, "expected {n_p}×{m} point-view rows, got {} features and {} flags", g.shape(u_p)[0], valid.len());
    }
    Ok(())
}

/// `Σ_m s[p, m] · U_p[p, m, :]` for `s` of shape `N_p × M`.
fn weighted_view_sum(g: &mut Graph, u_p: Var, s: Var, n_p: usize, m: usize) -> Result<Var> {
    let d = g.shape(u_p)[1];
    let s_col = g.reshape(s, &[n_p * m, 1])?;
    let weighted = g.mul_col(u_p, s_col)?;
    let wide = g.reshape(weighted, &[n_p, m * d])?;
    let mut acc = g.slice_cols(wide, 0, d)?;
    for v in 1..m {
        let part = g.slice_cols(wide, v * d, (v + 1) * d)?;
        acc = g.add(acc, part)?;
    }
    Ok(acc)
}

/// Softmax of the view logits over each point's valid views, then the
/// weighted sum of its back-projected features. `u_p` is point-major
/// (`N_p·M × D_i`) and `valid` is `N_p × M` row-major.
pub fn fuse_views(g: &mut Graph, u_p: Var, valid: &[bool], h_s: Var, n_p: usize, m: usize) -> Result<Fused> {
    check_layout(g, u_p, valid, n_p, m)?;
    if g.shape(h_s) != [m, 1] {
        bail!(Dimension, "view logits {:?} for {m} views", g.shape(h_s));
    }
    let row = g.transpose(h_s)?;
    let h = g.broadcast_rows(row, n_p)?;
    let h = g.mask_fill(h, valid.to_vec())?;
    let s = g.softmax(h, 1)?;
    let z_i = weighted_view_sum(g, u_p, s, n_p, m)?;
    Ok(Fused { z_i, weights: s, point_valid: point_valid(valid, n_p, m) })
}

/// Plain average over each point's valid views: the fusion used when the
/// text guidance is switched off.
pub fn masked_mean_views(g: &mut Graph, u_p: Var, valid: &[bool], n_p: usize, m: usize) -> Result<Fused> {
    check_layout(g, u_p, valid, n_p, m)?;
    let mut w = vec![0.0; n_p * m];
    for p in 0..n_p {
        let row = &valid[p * m..(p + 1) * m];
        let count = row.iter().filter(|v| **v).count();
        for (v, &ok) in row.iter().enumerate() {
            if ok {
                w[p * m + v] = 1.0 / count as f64;
            }
        }
    }
    let s = g.constant(Tensor::new(&[n_p, m], w)?)?;
    let z_i = weighted_view_sum(g, u_p, s, n_p, m)?;
    Ok(Fused { z_i, weights: s, point_valid: point_valid(valid, n_p, m) })
}

/// [`fuse_views`] on plain tensors: returns `Z_i` and the point validity.
pub fn fuse_back_projection(bp: &BackProjectionResult, h_s: &[f64]) -> Result<(Tensor, Vec<bool>)> {
    let [n_p, m, d] = bp.features.shape() else {
        bail!(Dimension, "back-projected features must be N_p×M×D_i");
    };
    let (n_p, m, d) = (*n_p, *m, *d);
    if h_s.len() != m {
        bail!(Dimension, "{} logits for {m} views", h_s.len());
    }
    let mut g = Graph::new();
    let u_p = g.constant(bp.features.clone().reshape(&[n_p * m, d])?)?;
    let h = g.constant(Tensor::new(&[m, 1], h_s.to_vec())?)?;
    let fused = fuse_views(&mut g, u_p, &bp.valid, h, n_p, m)?;
    Ok((g.value(fused.z_i).clone(), fused.point_valid))
}

/// Softmax of the view logits and the index of the largest (lowest index
/// on ties).
pub fn view_weights(h_s: &[f64]) -> (Vec<f64>, usize) {
    let max = h_s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = h_s.iter().map(|h| (h - max).exp()).collect();
    let z: f64 = e.iter().sum();
    let best = h_s.iter().position(|h| *h == max).unwrap_or(0);
    (e.iter().map(|v| v / z).collect(), best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, DEFAULT_EPS};
    use crate::nn::random_tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn value(g: &Graph, v: Var) -> Vec<f64> {
        g.value(v).data().to_vec()
    }

    #[test]
    fn view_pooling_examples() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(&[2 * 9, 3], 1.5)).unwrap();
        let p = global_pool_views(&mut g, c, 2).unwrap();
        assert_eq!(value(&g, p), vec![1.5; 6]);

        let four = g.constant(Tensor::new(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let p = global_pool_views(&mut g, four, 1).unwrap();
        assert_eq!(value(&g, p), vec![2.5]);

        let one = g.constant(Tensor::new(&[2, 2], vec![7.0, -1.0, 0.5, 2.0]).unwrap()).unwrap();
        let p = global_pool_views(&mut g, one, 2).unwrap();
        assert_eq!(value(&g, p), vec![7.0, -1.0, 0.5, 2.0]);
    }

    #[test]
    fn text_pooling_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(&[2, 2], vec![1.0, 5.0, 3.0, -1.0]).unwrap()).unwrap();
        let both = global_pool_text(&mut g, z, &[true, true]).unwrap();
        assert_eq!(value(&g, both), vec![2.0, 2.0]);
        let first = global_pool_text(&mut g, z, &[true, false]).unwrap();
        assert_eq!(value(&g, first), vec![1.0, 5.0]);
        assert!(matches!(global_pool_text(&mut g, z, &[false, false]), Err(crate::Error::Argument(_))));
    }

    #[test]
    fn view_logit_examples() {
        let mut g = Graph::new();
        let w_q = g.constant(Tensor::new(&[1, 1], vec![1.0]).unwrap()).unwrap();
        let w_k = g.constant(Tensor::new(&[1, 1], vec![1.0]).unwrap()).unwrap();
        let g_i = g.constant(Tensor::new(&[2, 1], vec![2.0, 0.0]).unwrap()).unwrap();
        let g_t = g.constant(Tensor::new(&[1, 1], vec![3.0]).unwrap()).unwrap();
        let h = view_logits(&mut g, g_i, g_t, &TgmfParams { w_q, w_k }).unwrap();
        assert_eq!(value(&g, h), vec![6.0, 0.0]);

        let zero = g.constant(Tensor::zeros(&[1, 1])).unwrap();
        let h = view_logits(&mut g, g_i, g_t, &TgmfParams { w_q: zero, w_k }).unwrap();
        assert_eq!(value(&g, h), vec![0.0, 0.0]);
    }

    #[test]
    fn view_logits_match_unscaled_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (m, di, dm, dk) = (3, 4, 5, 6);
        let gi = random_tensor(&mut rng, &[m, di], 1.0);
        let gt = random_tensor(&mut rng, &[1, dm], 1.0);
        let wq = random_tensor(&mut rng, &[di, dk], 1.0);
        let wk = random_tensor(&mut rng, &[dm, dk], 1.0);
        let mut g = Graph::new();
        let vars: Vec<Var> = [&gi, &gt, &wq, &wk].iter().map(|t| g.constant((*t).clone()).unwrap()).collect();
        let h = view_logits(&mut g, vars[0], vars[1], &TgmfParams { w_q: vars[2], w_k: vars[3] }).unwrap();
        for v in 0..m {
            let q: Vec<f64> = (0..dk).map(|c| (0..di).map(|i| gi.at(v, i) * wq.at(i, c)).sum()).collect();
            let k: Vec<f64> = (0..dk).map(|c| (0..dm).map(|i| gt.at(0, i) * wk.at(i, c)).sum()).collect();
            let raw: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
            assert!((g.value(h).data()[v] - raw / (dk as f64).sqrt()).abs() < 1e-12);
        }
    }

    fn bp(n_p: usize, m: usize, d: usize, data: Vec<f64>, valid: Vec<bool>) -> BackProjectionResult {
        BackProjectionResult { features: Tensor::new(&[n_p, m, d], data).unwrap(), valid }
    }

    #[test]
    fn fusion_examples() {
        let single = bp(1, 1, 2, vec![0.3, -0.7], vec![true]);
        assert_eq!(fuse_back_projection(&single, &[4.2]).unwrap().0.data(), &[0.3, -0.7]);

        let pair = bp(1, 2, 2, vec![1.0, 4.0, 3.0, 0.0], vec![true, true]);
        assert_eq!(fuse_back_projection(&pair, &[0.5, 0.5]).unwrap().0.data(), &[2.0, 2.0]);

        let skew = bp(1, 2, 1, vec![1.0, 0.0], vec![true, true]);
        let (z, _) = fuse_back_projection(&skew, &[6.0, 0.0]).unwrap();
        let expect = 6f64.exp() / (6f64.exp() + 1.0);
        assert!((z.data()[0] - expect).abs() < 1e-15);
        assert!((z.data()[0] - 0.99753).abs() < 1e-5);

        let unseen = bp(2, 2, 1, vec![5.0, 6.0, 0.0, 0.0], vec![true, false, false, false]);
        let (z, ok) = fuse_back_projection(&unseen, &[1.0, 2.0]).unwrap();
        assert_eq!(z.data(), &[5.0, 0.0]);
        assert_eq!(ok, vec![true, false]);
    }

    #[test]
    fn zero_logits_equal_masked_mean_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (n_p, m, d) = (6, 3, 4);
        let u = random_tensor(&mut rng, &[n_p * m, d], 1.0);
        let valid: Vec<bool> = (0..n_p * m).map(|_| rng.gen_bool(0.6)).collect();
        let mut g = Graph::new();
        let u_p = g.constant(u).unwrap();
        let h = g.constant(Tensor::zeros(&[m, 1])).unwrap();
        let a = fuse_views(&mut g, u_p, &valid, h, n_p, m).unwrap();
        let b = masked_mean_views(&mut g, u_p, &valid, n_p, m).unwrap();
        assert!(g.value(a.z_i).bitwise_eq(g.value(b.z_i)));
        assert!(g.value(a.weights).bitwise_eq(g.value(b.weights)));
    }

    #[test]
    fn argmax_is_stable_under_shifts() {
        let h = [0.3, 1.7, -0.2, 1.7];
        let (w, best) = view_weights(&h);
        assert_eq!(best, 1);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for shift in [-100.0, -1.0, 0.0, 3.5, 250.0] {
            let shifted: Vec<f64> = h.iter().map(|v| v + shift).collect();
            assert_eq!(view_weights(&shifted).1, best);
        }
    }

    /// Full path from pixel features and tokens to fused point features.
    fn tgmf_path(g: &mut Graph, v: &[Var], valid: &[bool], mask: &[bool], n_p: usize, m: usize, w: &Tensor) -> Result<Var> {
        let pooled = global_pool_views(g, v[0], m)?;
        let text = global_pool_text(g, v[1], mask)?;
        let h = view_logits(g, pooled, text, &TgmfParams { w_q: v[2], w_k: v[3] })?;
        let fused = fuse_views(g, v[4], valid, h, n_p, m)?;
        let wv = g.constant(w.clone())?;
        let prod = g.mul(fused.z_i, wv)?;
        g.sum(prod)
    }

    #[test]
    fn tgmf_path_passes_grad_check() {
        for seed in 0..10 {
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
            let r = grad_check(|g, v| tgmf_path(g, v, &valid, &mask, n_p, m, &w), &inputs, DEFAULT_EPS).unwrap();
            assert!(r.max_rel_error <= 1e-6, "seed {seed}: {r:?}");
        }
    }

    proptest! {
        #[test]
        fn weights_are_distributions_and_views_permute(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n_p, m, d) = (rng.gen_range(1..8), rng.gen_range(1..6), rng.gen_range(1..5));
            let u = random_tensor(&mut rng, &[n_p * m, d], 1.0);
            let valid: Vec<bool> = (0..n_p * m).map(|_| rng.gen_bool(0.6)).collect();
            let h: Vec<f64> = (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut g = Graph::new();
            let u_p = g.constant(u.clone()).unwrap();
            let hv = g.constant(Tensor::new(&[m, 1], h.clone()).unwrap()).unwrap();
            let f = fuse_views(&mut g, u_p, &valid, hv, n_p, m).unwrap();
            let s = g.value(f.weights).clone();
            for p in 0..n_p {
                let row = &s.data()[p * m..(p + 1) * m];
                let any = valid[p * m..(p + 1) * m].iter().any(|v| *v);
                for v in 0..m {
                    if !valid[p * m + v] { prop_assert_eq!(row[v], 0.0); }
                }
                let sum: f64 = row.iter().sum();
                if any { prop_assert!((sum - 1.0).abs() <= 1e-12); } else {
                    prop_assert!(g.value(f.z_i).row_slice(p).iter().all(|x| *x == 0.0));
                }
            }

            let perm: Vec<usize> = { let mut p: Vec<usize> = (0..m).collect(); use rand::seq::SliceRandom; p.shuffle(&mut rng); p };
            let mut u2 = Vec::with_capacity(u.numel());
            let mut valid2 = Vec::with_capacity(valid.len());
            for p in 0..n_p {
                for &v in &perm {
                    u2.extend_from_slice(u.row_slice(p * m + v));
                    valid2.push(valid[p * m + v]);
                }
            }
            let h2: Vec<f64> = perm.iter().map(|&v| h[v]).collect();
            let u_p2 = g.constant(Tensor::new(&[n_p * m, d], u2).unwrap()).unwrap();
            let hv2 = g.constant(Tensor::new(&[m, 1], h2).unwrap()).unwrap();
            let f2 = fuse_views(&mut g, u_p2, &valid2, hv2, n_p, m).unwrap();
            prop_assert!(g.value(f.z_i).max_abs_diff(g.value(f2.z_i)) <= 1e-12);
        }
    }
}
