//! Scene sample files and the dataset manifest.
//!
//! Sample layout, all integers u64 and all reals f64, little-endian:
//!
//! ```text
//! magic "DSPS", version u32
//! config_len, config (UTF-8 JSON echo of the run configuration)
//! seed, room[3]
//! n_objects, then per object: class, color, center[3], size[3]
//! n_points, cols (6), points[n_points·6], point_objects[n_points]
//! n_views, then per view:
//!     fx, fy, cx, cy, extrinsics[16] (row-major world→camera)
//!     width, height, depth[height·width], object_ids[height·width] (u64::MAX = none)
//! n_questions, then per question:
//!     kind, subject, color (u64::MAX = none), answer, target_class
//!     n_refs, refs[n_refs], n_tokens, tokens, n_situation, situation
//! question index of this sample
//! answer labels[n_answers] and class labels[n_cls] as 0/1
//! n_centers, reference centres[n_centers·3]
//! ```
//!
//! The trailing labels and centres are derived data, checked on read.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Object, Question, QuestionKind, RenderedView, Scene, SceneSample, SceneSpec};
use crate::checkpoint::{read_f64, read_u64};
use crate::config::RunConfig;
use crate::error::{bail, Error, Result};
use crate::geometry::{Camera, Intrinsics, Rigid};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DSPS";
pub const VERSION: u32 = 1;
const NONE: u64 = u64::MAX;
/// Sanity bound on any count read from a file.
const MAX_COUNT: u64 = 1 << 28;

struct Out<'a, W: Write>(&'a mut W);

impl<W: Write> Out<'_, W> {
    fn u(&mut self, v: u64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn n(&mut self, v: usize) -> Result<()> {
        self.u(v as u64)
    }
    fn f(&mut self, v: f64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn fs(&mut self, vs: &[f64]) -> Result<()> {
        vs.iter().try_for_each(|v| self.f(*v))
    }
    fn list(&mut self, vs: &[usize]) -> Result<()> {
        self.n(vs.len())?;
        vs.iter().try_for_each(|v| self.n(*v))
    }
}

struct In<'a, R: Read>(&'a mut R);

impl<R: Read> In<'_, R> {
    fn u(&mut self) -> Result<u64> {
        read_u64(self.0)
    }
    fn count(&mut self) -> Result<usize> {
        let v = self.u()?;
        if v > MAX_COUNT {
            bail!(Format, "implausible count {v}");
        }
        Ok(v as usize)
    }
    fn index(&mut self, bound: usize, what: &str) -> Result<usize> {
        let v = self.u()?;
        if v >= bound as u64 {
            bail!(Format, "{what} {v} out of range (< {bound})");
        }
        Ok(v as usize)
    }
    fn f(&mut self) -> Result<f64> {
        read_f64(self.0)
    }
    fn fs<const N: usize>(&mut self) -> Result<[f64; N]> {
        let mut out = [0.0; N];
        for v in &mut out {
            *v = self.f()?;
        }
        Ok(out)
    }
    fn fvec(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f()).collect()
    }
    fn list(&mut self) -> Result<Vec<usize>> {
        let n = self.count()?;
        (0..n).map(|_| self.count()).collect()
    }
}

pub fn write_sample(w: &mut impl Write, sample: &SceneSample, config: &RunConfig) -> Result<()> {
    let s = &*sample.scene;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let mut o = Out(w);
    let json = config.to_json().to_string();
    o.n(json.len())?;
    o.0.write_all(json.as_bytes())?;

    o.u(s.spec.seed)?;
    o.fs(&s.spec.room)?;
    o.n(s.spec.objects.len())?;
    for obj in &s.spec.objects {
        o.n(obj.class)?;
        o.n(obj.color)?;
        o.fs(&obj.center)?;
        o.fs(&obj.size)?;
    }
    o.n(s.points.rows())?;
    o.n(s.points.cols())?;
    o.fs(s.points.data())?;
    s.point_objects.iter().try_for_each(|v| o.n(*v))?;

    o.n(s.views.len())?;
    for v in &s.views {
        let k = v.camera.intrinsics;
        o.fs(&[k.fx, k.fy, k.cx, k.cy])?;
        o.fs(&v.camera.extrinsics.to_matrix())?;
        o.n(v.camera.width)?;
        o.n(v.camera.height)?;
        o.fs(v.depth.data())?;
        v.object_ids.iter().try_for_each(|id| o.u(id.map_or(NONE, |i| i as u64)))?;
    }

    o.n(s.questions.len())?;
    for q in &s.questions {
        o.n(q.kind.id())?;
        o.n(q.subject)?;
        o.u(q.color.map_or(NONE, |c| c as u64))?;
        o.n(q.answer)?;
        o.n(q.target_class)?;
        o.list(&q.references)?;
        o.list(&q.tokens)?;
        o.list(&q.situation)?;
    }
    o.n(sample.question)?;
    let labels = sample.answer_labels(config.dims.n_answers);
    let classes = sample.class_labels(config.dims.n_cls, config.task);
    labels.iter().chain(&classes).try_for_each(|b| o.u(u64::from(*b)))?;
    let centers = sample.reference_centers(config.task);
    o.n(centers.rows())?;
    o.fs(centers.data())?;
    Ok(())
}

/// Reads one sample and the configuration echo stored with it.
pub fn read_sample(r: &mut impl Read) -> Result<(SceneSample, RunConfig)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        bail!(Format, "not a scene file (bad magic)");
    }
    let mut version = [0u8; 4];
    r.read_exact(&mut version)?;
    if u32::from_le_bytes(version) != VERSION {
        bail!(Format, "unsupported scene file version {}", u32::from_le_bytes(version));
    }
    let mut i = In(r);
    let len = i.count()?;
    let mut json = vec![0u8; len];
    i.0.read_exact(&mut json)?;
    let json = String::from_utf8(json).map_err(|e| Error::Format(e.to_string()))?;
    let config = RunConfig::from_json_str(&json)?;

    let seed = i.u()?;
    let room = i.fs::<3>()?;
    let n_obj = i.count()?;
    let mut objects = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        let class = i.count()?;
        let color = i.count()?;
        objects.push(Object { class, color, center: i.fs()?, size: i.fs()? });
    }
    let spec = SceneSpec { room, objects, seed };
    spec.validate().map_err(|e| Error::Format(e.to_string()))?;

    let n = i.count()?;
    let cols = i.count()?;
    if cols != 6 {
        bail!(Format, "points have {cols} columns, expected 6");
    }
    let points = Tensor::new(&[n, 6], i.fvec(n * 6)?)?;
    let point_objects = (0..n).map(|_| i.index(n_obj, "point object")).collect::<Result<Vec<_>>>()?;

    let m = i.count()?;
    let mut views = Vec::with_capacity(m);
    for _ in 0..m {
        let [fx, fy, cx, cy] = i.fs()?;
        let extrinsics = Rigid::from_matrix(&i.fs::<16>()?).map_err(|e| Error::Format(e.to_string()))?;
        let width = i.count()?;
        let height = i.count()?;
        let camera = Camera::new(Intrinsics { fx, fy, cx, cy }, extrinsics, width, height)
            .map_err(|e| Error::Format(e.to_string()))?;
        let depth = Tensor::new(&[height, width], i.fvec(width * height)?)?;
        let object_ids = (0..width * height)
            .map(|_| match i.u()? {
                NONE => Ok(None),
                v if v < n_obj as u64 => Ok(Some(v as usize)),
                v => bail!(Format, "pixel object {v} out of range"),
            })
            .collect::<Result<Vec<_>>>()?;
        views.push(RenderedView { camera, depth, object_ids });
    }

    let nq = i.count()?;
    let mut questions = Vec::with_capacity(nq);
    for _ in 0..nq {
        let kind = QuestionKind::from_id(i.count()?)?;
        let subject = i.count()?;
        let color = match i.u()? {
            NONE => None,
            c => Some(c as usize),
        };
        let answer = i.count()?;
        let target_class = i.count()?;
        let references = i.list()?;
        if references.iter().any(|r| *r >= n_obj) {
            bail!(Format, "question refers to a missing object");
        }
        questions.push(Question {
            kind,
            subject,
            color,
            answer,
            target_class,
            references,
            tokens: i.list()?,
            situation: i.list()?,
        });
    }
    let question = i.index(nq, "sample question")?;
    let scene = Scene { spec, points, point_objects, views, questions };
    let sample = SceneSample { scene: Arc::new(scene), question };

    let n_labels = config.dims.n_answers + config.dims.n_cls;
    let stored: Vec<bool> = (0..n_labels).map(|_| i.u().map(|v| v != 0)).collect::<Result<_>>()?;
    let mut expect = sample.answer_labels(config.dims.n_answers);
    expect.extend(sample.class_labels(config.dims.n_cls, config.task));
    if stored != expect {
        bail!(Format, "stored labels disagree with the question");
    }
    let g = i.count()?;
    let centers = Tensor::new(&[g, 3], i.fvec(g * 3)?)?;
    if !centers.bitwise_eq(&sample.reference_centers(config.task)) {
        bail!(Format, "stored reference centres disagree with the objects");
    }
    Ok((sample, config))
}

pub fn save_sample(path: &Path, sample: &SceneSample, config: &RunConfig) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_sample(&mut w, sample, config)?;
    w.flush()?;
    Ok(())
}

pub fn load_sample(path: &Path) -> Result<(SceneSample, RunConfig)> {
    read_sample(&mut BufReader::new(File::open(path)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub seed: u64,
    pub question: usize,
    pub kind: QuestionKind,
    pub text: String,
    pub answer: String,
}

/// Human-readable index of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: serde_json::Value,
    pub splits: BTreeMap<String, Vec<ManifestEntry>>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes every sample of every split under `dir` plus `manifest.json`.
pub fn write_dataset(dir: &Path, config: &RunConfig, splits: &[(&str, &[SceneSample])]) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = Manifest { config: config.to_json(), splits: BTreeMap::new() };
    for (name, samples) in splits {
        let mut entries = Vec::with_capacity(samples.len());
        for s in *samples {
            let q = s.question();
            let file = format!("{name}_{:08}_q{}.dsps", s.scene.spec.seed, s.question);
            save_sample(&dir.join(&file), s, config)?;
            entries.push(ManifestEntry {
                file,
                seed: s.scene.spec.seed,
                question: s.question,
                kind: q.kind,
                text: q.text(),
                answer: super::vocab::answer_name(q.answer),
            });
        }
        manifest.splits.insert(name.to_string(), entries);
    }
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(manifest)
}

/// Loads the samples of one split listed in a manifest.
pub fn read_split(dir: &Path, split: &str) -> Result<(Vec<SceneSample>, RunConfig)> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    let config: RunConfig = serde_json::from_value(manifest.config).map_err(|e| Error::Format(e.to_string()))?;
    let Some(entries) = manifest.splits.get(split) else { bail!(Argument, "manifest has no split {split:?}") };
    let mut samples = Vec::with_capacity(entries.len());
    // questions of one scene share their scene in memory
    let mut last: Option<(u64, Arc<Scene>)> = None;
    for e in entries {
        let (s, _) = load_sample(&dir.join(&e.file))?;
        let scene = match &last {
            Some((seed, scene)) if *seed == e.seed && **scene == *s.scene => Arc::clone(scene),
            _ => s.scene,
        };
        last = Some((e.seed, Arc::clone(&scene)));
        samples.push(SceneSample { scene, question: s.question });
    }
    Ok((samples, config))
}
