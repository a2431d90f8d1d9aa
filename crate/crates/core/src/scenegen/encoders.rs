//! Learnable stand-ins for the image, text and point backbones.
//!
//! Image features mimic a convolutional backbone: each object has a class
//! plus colour embedding, and a pixel's feature is the average embedding
//! over a square receptive field around it (empty pixels count as zero).
//! Near object boundaries the feature therefore depends on the viewpoint.
//! Text features are token plus position embeddings. Point features are a two-layer map of normalised xyz and
//! intensity.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::{N_CLASSES, N_COLORS, PAD, VOCAB_SIZE};
use super::{Object, Scene, ROOM};
use crate::autograd::{Graph, Var};
use crate::config::Dims;
use crate::error::{bail, Result};
use crate::geometry::fps;
use crate::nn::{Activation, Init, Mlp2, ParamSet, ParamSpecs, ParamVars};
use crate::tensor::Tensor;

pub fn declare_params(specs: &mut ParamSpecs, dims: &Dims) {
    specs.add("image.class_emb", &[N_CLASSES, dims.d_i], Init::Uniform { fan_in: 1 });
    specs.add("image.color_emb", &[N_COLORS, dims.d_i], Init::Uniform { fan_in: 1 });
    specs.add("text.token_emb", &[VOCAB_SIZE, dims.d_m], Init::Uniform { fan_in: 1 });
    specs.add("text.pos_emb", &[dims.max_tokens, dims.d_m], Init::Uniform { fan_in: 1 });
    specs.mlp2("point", 6, dims.d_p, dims.d_p);
}

/// `n_obj × D_i` feature of each object as seen in an image.
pub fn object_features(g: &mut Graph, pv: &ParamVars, objects: &[Object]) -> Result<Var> {
    let classes = g.gather_rows(pv.get("image.class_emb")?, objects.iter().map(|o| Some(o.class)).collect())?;
    let colors = g.gather_rows(pv.get("image.color_emb")?, objects.iter().map(|o| Some(o.color)).collect())?;
    g.add(classes, colors)
}

/// Receptive-field radius in pixels for an image `width` pixels wide.
pub fn receptive_radius(width: usize) -> usize {
    (width / 32).max(1)
}

/// Share of each object within the receptive field of every pixel, from
/// per-object summed-area tables.
#[derive(Clone, Debug)]
pub struct ObjectMixture {
    n_obj: usize,
    width: usize,
    height: usize,
    radius: usize,
    /// `(H+1)×(W+1)×n_obj` inclusive prefix sums of the object masks.
    table: Vec<f64>,
}

impl ObjectMixture {
    pub fn new(object_ids: &[Option<usize>], width: usize, height: usize, n_obj: usize, radius: usize) -> Result<Self> {
        if object_ids.len() != width * height {
            bail!(Dimension, "{} object ids for a {width}×{height} image", object_ids.len());
        }
        if let Some(id) = object_ids.iter().flatten().find(|&&id| id >= n_obj) {
            bail!(Argument, "object id {id} outside {n_obj} objects");
        }
        let stride = (width + 1) * n_obj;
        let mut table = vec![0.0; (height + 1) * stride];
        for y in 0..height {
            let mut row = vec![0.0; n_obj];
            for x in 0..width {
                if let Some(id) = object_ids[y * width + x] {
                    row[id] += 1.0;
                }
                for o in 0..n_obj {
                    table[(y + 1) * stride + (x + 1) * n_obj + o] = table[y * stride + (x + 1) * n_obj + o] + row[o];
                }
            }
        }
        Ok(Self { n_obj, width, height, radius, table })
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// Object shares around pixel `px`, normalised by the full window
    /// area.
    pub fn at(&self, px: usize) -> Vec<f64> {
        let (x, y) = (px % self.width, px / self.width);
        let r = self.radius;
        let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(self.width));
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(self.height));
        let area = ((2 * r + 1) * (2 * r + 1)) as f64;
        let stride = (self.width + 1) * self.n_obj;
        let t = |yy: usize, xx: usize, o: usize| self.table[yy * stride + xx * self.n_obj + o];
        (0..self.n_obj)
            .map(|o| (t(y1, x1, o) - t(y0, x1, o) - t(y1, x0, o) + t(y0, x0, o)) / area)
            .collect()
    }

    /// `(H·W) × n_obj` shares of every pixel.
    pub fn all(&self) -> Result<Tensor> {
        Tensor::new(&[self.pixels(), self.n_obj], (0..self.pixels()).flat_map(|px| self.at(px)).collect())
    }

    /// Shares averaged over the whole image.
    pub fn mean(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.n_obj];
        for px in 0..self.pixels() {
            acc.iter_mut().zip(self.at(px)).for_each(|(a, v)| *a += v);
        }
        let inv = 1.0 / self.pixels() as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        acc
    }
}

/// Object mixture of one rendered view at the default receptive field.
pub fn view_mixture(scene: &Scene, view: usize) -> Result<ObjectMixture> {
    let Some(v) = scene.views.get(view) else { bail!(Argument, "view {view} out of range") };
    let (w, h) = (v.camera.width, v.camera.height);
    ObjectMixture::new(&v.object_ids, w, h, scene.spec.objects.len(), receptive_radius(w))
}

/// `(H·W) × D_i` feature map of one view: pixel mixtures times object
/// features.
pub fn image_feature_map(g: &mut Graph, object_feats: Var, mixture: &ObjectMixture) -> Result<Var> {
    let shares = g.constant(mixture.all()?)?;
    g.matmul(shares, object_feats)
}

/// Plain `H×W×D_i` feature map of one rendered view.
pub fn encode_image_features(scene: &Scene, view: usize, params: &ParamSet) -> Result<Tensor> {
    let mixture = view_mixture(scene, view)?;
    let v = &scene.views[view];
    let mut g = Graph::new();
    let pv = params.bind_frozen(&mut g)?;
    let objs = object_features(&mut g, &pv, &scene.spec.objects)?;
    let map = image_feature_map(&mut g, objs, &mixture)?;
    let d = g.shape(map)[1];
    g.value(map).clone().reshape(&[v.camera.height, v.camera.width, d])
}

/// `L×D_m` token features for `tokens` padded to `len`, with the padding
/// mask (true for real tokens).
pub fn encode_text(g: &mut Graph, pv: &ParamVars, tokens: &[usize], len: usize) -> Result<(Var, Vec<bool>)> {
    if tokens.len() > len {
        bail!(Argument, "{} tokens exceed the padded length {len}", tokens.len());
    }
    if let Some(t) = tokens.iter().find(|&&t| t >= VOCAB_SIZE || t == PAD) {
        bail!(Argument, "unknown token id {t}");
    }
    let mut ids: Vec<Option<usize>> = tokens.iter().map(|t| Some(*t)).collect();
    ids.resize(len, Some(PAD));
    let mask: Vec<bool> = (0..len).map(|i| i < tokens.len()).collect();
    let emb = g.gather_rows(pv.get("text.token_emb")?, ids)?;
    let pos_table = pv.get("text.pos_emb")?;
    if g.shape(pos_table)[0] < len {
        bail!(Argument, "position table holds {} rows, need {len}", g.shape(pos_table)[0]);
    }
    let pos = g.slice_rows(pos_table, 0, len)?;
    Ok((g.add(emb, pos)?, mask))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointSampling {
    /// Seeded random subset, in ascending index order.
    Train { seed: u64 },
    /// Farthest point sampling from the first point.
    Inference,
}

pub fn select_seed_points(xyz: &Tensor, n_p: usize, sampling: PointSampling) -> Result<Vec<usize>> {
    let n = xyz.rows();
    if n_p == 0 || n < n_p {
        bail!(Argument, "cannot take {n_p} seed points from {n}");
    }
    match sampling {
        PointSampling::Train { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = index::sample(&mut rng, n, n_p).into_vec();
            idx.sort_unstable();
            Ok(idx)
        }
        PointSampling::Inference => fps(xyz, n_p, 0),
    }
}

/// Point-encoder input: xyz scaled to [-1, 1] over the room, then the
/// three intensity channels.
pub fn point_inputs(points: &Tensor, indices: &[usize]) -> Result<Tensor> {
    if points.rank() != 2 || points.cols() != 6 {
        bail!(Dimension, "points must be N×6, got {:?}", points.shape());
    }
    let mut data = Vec::with_capacity(indices.len() * 6);
    for &i in indices {
        let r = points.row_slice(i);
        data.extend_from_slice(&[
            r[0] / (ROOM[0] / 2.0),
            r[1] / (ROOM[1] / 2.0),
            r[2] / ROOM[2] * 2.0 - 1.0,
            r[3],
            r[4],
            r[5],
        ]);
    }
    Tensor::new(&[indices.len(), 6], data)
}

/// Seed-point features `Z_p` and coordinates for the chosen indices.
pub fn seed_point_features(g: &mut Graph, pv: &ParamVars, points: &Tensor, indices: &[usize]) -> Result<(Var, Tensor)> {
    let inputs = point_inputs(points, indices)?;
    let coords = Tensor::new(
        &[indices.len(), 3],
        indices.iter().flat_map(|&i| points.row_slice(i)[..3].to_vec()).collect(),
    )?;
    let x = g.constant(inputs)?;
    let mlp = Mlp2::bind(pv, "point", Activation::Gelu)?;
    Ok((mlp.forward(g, x)?, coords))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::scenegen::generate_scene;
    use crate::scenegen::vocab::{class_token, word};

    fn params(dims: &Dims) -> ParamSet {
        let mut specs = ParamSpecs::new();
        declare_params(&mut specs, dims);
        specs.build(5).unwrap()
    }

    fn scene() -> (RunConfig, Scene) {
        let mut c = RunConfig::tiny();
        c.dims.n_points = 400;
        c.dims.h = 24;
        c.dims.w = 24;
        let s = generate_scene(4, &c).unwrap();
        (c, s)
    }

    #[test]
    fn image_features_follow_visible_objects() {
        let (c, s) = scene();
        let p = params(&c.dims);
        let map = encode_image_features(&s, 0, &p).unwrap();
        assert_eq!(map.shape(), &[24, 24, c.dims.d_i]);
        let d = c.dims.d_i;
        let ids = &s.views[0].object_ids;
        let px = |i: usize| &map.data()[i * d..(i + 1) * d];
        // A pixel whose whole window is empty has a zero feature; one whose
        // whole window shows a single object has exactly that object's.
        let (w, r) = (24usize, receptive_radius(24) as isize);
        let window = |i: usize| {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            let mut out = Vec::new();
            for dy in -r..=r {
                for dx in -r..=r {
                    let (xx, yy) = (x + dx, y + dy);
                    if xx >= 0 && yy >= 0 && xx < w as isize && yy < w as isize {
                        out.push(ids[yy as usize * w + xx as usize]);
                    } else {
                        out.push(None);
                    }
                }
            }
            out
        };
        let empty = (0..ids.len()).find(|&i| window(i).iter().all(Option::is_none)).unwrap();
        assert!(px(empty).iter().all(|v| *v == 0.0));
        let inner = (0..ids.len()).find(|&i| window(i).iter().all(|o| o.is_some() && *o == ids[i])).unwrap();
        let mut g = Graph::new();
        let pv = p.bind_frozen(&mut g).unwrap();
        let objs = object_features(&mut g, &pv, &s.spec.objects).unwrap();
        let own = g.value(objs).row_slice(ids[inner].unwrap()).to_vec();
        assert!(px(inner).iter().zip(&own).all(|(a, b)| (a - b).abs() <= 1e-12));

        let mut zero = p.clone();
        for (_, t) in zero.iter_mut() {
            t.data_mut().fill(0.0);
        }
        assert!(encode_image_features(&s, 0, &zero).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mixture_matches_brute_force_windows() {
        let (w, h, n_obj) = (7, 5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ids: Vec<Option<usize>> = (0..w * h)
            .map(|_| {
                use rand::Rng;
                let k = rng.gen_range(0..=n_obj);
                (k < n_obj).then_some(k)
            })
            .collect();
        for r in 0..3 {
            let m = ObjectMixture::new(&ids, w, h, n_obj, r).unwrap();
            let area = ((2 * r + 1) * (2 * r + 1)) as f64;
            let mut mean = vec![0.0; n_obj];
            for px in 0..w * h {
                let (x, y) = ((px % w) as isize, (px / w) as isize);
                let mut expect = vec![0.0; n_obj];
                for yy in (y - r as isize).max(0)..=(y + r as isize).min(h as isize - 1) {
                    for xx in (x - r as isize).max(0)..=(x + r as isize).min(w as isize - 1) {
                        if let Some(o) = ids[yy as usize * w + xx as usize] {
                            expect[o] += 1.0 / area;
                        }
                    }
                }
                let got = m.at(px);
                assert!(got.iter().zip(&expect).all(|(a, b)| (a - b).abs() <= 1e-12));
                mean.iter_mut().zip(&expect).for_each(|(a, b)| *a += b / (w * h) as f64);
            }
            assert!(m.mean().iter().zip(&mean).all(|(a, b)| (a - b).abs() <= 1e-12));
            if r == 0 {
                for px in 0..w * h {
                    let one: Vec<f64> = (0..n_obj).map(|o| if ids[px] == Some(o) { 1.0 } else { 0.0 }).collect();
                    assert_eq!(m.at(px), one);
                }
            }
        }
        assert!(ObjectMixture::new(&ids, w, h, 2, 1).is_err());
        assert!(ObjectMixture::new(&ids[1..], w, h, n_obj, 1).is_err());
    }

    #[test]
    fn text_encoding_masks_padding_and_rejects_unknown_ids() {
        let dims = RunConfig::tiny().dims;
        let p = params(&dims);
        let mut g = Graph::new();
        let pv = p.bind_frozen(&mut g).unwrap();
        let toks = [word("how"), word("many"), class_token(2)];
        let (a, mask) = encode_text(&mut g, &pv, &toks, 8).unwrap();
        let (b, _) = encode_text(&mut g, &pv, &toks, 8).unwrap();
        assert_eq!(mask, [true, true, true, false, false, false, false, false]);
        assert!(g.value(a).bitwise_eq(g.value(b)));
        assert!(encode_text(&mut g, &pv, &[VOCAB_SIZE], 8).is_err());
        assert!(encode_text(&mut g, &pv, &[1; 9], 8).is_err());
    }

    #[test]
    fn seed_points_sampling_rules() {
        let (c, s) = scene();
        let xyz = s.xyz();
        let a = select_seed_points(&xyz, 50, PointSampling::Train { seed: 3 }).unwrap();
        assert_eq!(a, select_seed_points(&xyz, 50, PointSampling::Train { seed: 3 }).unwrap());
        assert_eq!(a.len(), 50);
        let all = select_seed_points(&xyz, xyz.rows(), PointSampling::Inference).unwrap();
        assert_eq!(all, fps(&xyz, xyz.rows(), 0).unwrap());
        assert!(select_seed_points(&xyz, xyz.rows() + 1, PointSampling::Inference).is_err());

        let mut p = params(&c.dims);
        for name in ["point.fc2.weight", "point.fc1.weight"] {
            p.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let pv = p.bind_frozen(&mut g).unwrap();
        let (z, coords) = seed_point_features(&mut g, &pv, &s.points, &a[..3]).unwrap();
        let bias = p.get("point.fc2.bias").unwrap().data().to_vec();
        for r in 0..3 {
            assert_eq!(g.value(z).row_slice(r), &bias[..]);
            assert_eq!(coords.row_slice(r), &s.points.row_slice(a[r])[..3]);
        }
    }
}
