//! Dataset splits, training, evaluation, view inspection and latency
//! measurement. Every report is a serde record that carries the run
//! configuration it was produced under.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{bail, Error, Result};
use crate::heads::em_at_k;
use crate::model::{check_params, evaluate_sample, forward, init_params, prepare, sample_gradient, PreparedSample};
use crate::nn::ParamSet;
use crate::optim::{AdamW, LrSchedule};
use crate::scenegen::encoders::PointSampling;
use crate::scenegen::{generate_scene, samples_of, SceneSample};
use crate::tgmf::view_weights;
use crate::Graph;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    /// Scene seeds of a split start this far above `data.base_seed`.
    pub fn seed_offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1_000_000,
            Split::Test => 2_000_000,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// All questions of `data.scenes` scenes of `split`, scene by scene.
pub fn generate_split(config: &RunConfig, split: Split) -> Result<Vec<SceneSample>> {
    config.validate()?;
    let first = config.data.base_seed + split.seed_offset();
    let scenes = (0..config.data.scenes as u64)
        .into_par_iter()
        .map(|i| generate_scene(first + i, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(scenes.into_iter().flat_map(samples_of).collect())
}

pub fn prepare_all(samples: &[SceneSample], config: &RunConfig) -> Result<Vec<PreparedSample>> {
    samples.par_iter().map(|s| prepare(s, config, PointSampling::Inference)).collect()
}

pub fn checkpoint_of(params: ParamSet, config: &RunConfig) -> Result<Checkpoint> {
    let config = serde_json::to_string_pretty(config).map_err(|e| Error::Format(e.to_string()))?;
    Ok(Checkpoint { params, config })
}

/// Parameters of `ckpt`, checked against the extents of `config`.
pub fn params_for(ckpt: &Checkpoint, config: &RunConfig) -> Result<ParamSet> {
    check_params(&ckpt.params, &config.dims)?;
    Ok(ckpt.params.clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub mean_loss: f64,
    pub mean_loss_answer: f64,
    pub mean_loss_class: f64,
    pub mean_loss_loc: f64,
    /// EM@1 of the forward passes made during the epoch, each taken
    /// before its batch's update.
    pub running_em1: f64,
    /// EM@1 over the whole training split after the epoch, when it was
    /// evaluated.
    pub train_em1: Option<f64>,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: RunConfig,
    pub questions: usize,
    pub epochs: Vec<EpochRecord>,
    /// Training-split EM@1 of the returned parameters, absent when no
    /// epoch ran.
    pub final_train_em1: Option<f64>,
    pub stopped_early: bool,
    pub seconds: f64,
}

/// Gold answer indices of a prepared sample.
fn gold(s: &PreparedSample) -> Vec<usize> {
    s.targets.answer.iter().enumerate().filter(|(_, &y)| y).map(|(i, _)| i).collect()
}

/// Trains from the seeded initialisation on `samples` for
/// `train.epochs` epochs, or until the training split reaches
/// `train.stop_at_em1`. Samples are shuffled each epoch; a batch's
/// gradient is the mean of its per-sample gradients summed in batch order.
pub fn train(config: &RunConfig, samples: &[SceneSample]) -> Result<(Checkpoint, TrainReport)> {
    config.validate()?;
    let start = Instant::now();
    let mut params = init_params(&config.dims, config.train.seed)?;
    let mut report = TrainReport {
        config: config.clone(),
        questions: samples.len(),
        epochs: Vec::new(),
        final_train_em1: None,
        stopped_early: false,
        seconds: 0.0,
    };
    if config.train.epochs == 0 {
        report.seconds = start.elapsed().as_secs_f64();
        return Ok((checkpoint_of(params, config)?, report));
    }
    if samples.is_empty() {
        bail!(Argument, "no training samples");
    }
    let prepared = prepare_all(samples, config)?;
    let batch = config.optim.batch_size;
    let steps_per_epoch = prepared.len().div_ceil(batch) as u64;
    let schedule = LrSchedule {
        base_lr: config.optim.base_lr,
        peak_lr: config.optim.peak_lr,
        warmup_steps: config.optim.warmup_steps,
        total_steps: steps_per_epoch * config.train.epochs as u64,
    };
    let mut opt = AdamW::new(config.optim.adamw.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut step = 0u64;

    for epoch in 0..config.train.epochs {
        let epoch_start = Instant::now();
        order.shuffle(&mut rng);
        let (mut sums, mut hits, mut lr) = ([0.0f64; 4], 0usize, 0.0);
        for idx in order.chunks(batch) {
            let results = idx
                .par_iter()
                .map(|&i| sample_gradient(&params, config, &prepared[i]))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("training diverged at epoch {epoch}, step {step}: {m}")),
                    e => e,
                })?;
            let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for (&i, (r, g)) in idx.iter().zip(&results) {
                for (k, v) in [r.loss, r.loss_answer, r.loss_class, r.loss_loc].into_iter().enumerate() {
                    sums[k] += v;
                }
                if em_at_k(&r.answer_logits, &gold(&prepared[i]), 1)? {
                    hits += 1;
                }
                for (name, gv) in g {
                    match grads.get_mut(name) {
                        Some(acc) => acc.iter_mut().zip(gv).for_each(|(a, b)| *a += b),
                        None => {
                            grads.insert(name.clone(), gv.clone());
                        }
                    }
                }
            }
            let scale = 1.0 / idx.len() as f64;
            grads.values_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= scale));
            lr = schedule.lr(step);
            opt.step(&mut params, &grads, lr)?;
            step += 1;
        }
        let n = prepared.len() as f64;
        let running_em1 = hits as f64 / n;
        let mut record = EpochRecord {
            epoch,
            steps: step,
            mean_loss: sums[0] / n,
            mean_loss_answer: sums[1] / n,
            mean_loss_class: sums[2] / n,
            mean_loss_loc: sums[3] / n,
            running_em1,
            train_em1: None,
            lr,
            seconds: 0.0,
        };
        let last = epoch + 1 == config.train.epochs;
        let mut stop = false;
        if let Some(target) = config.train.stop_at_em1 {
            // The running figure lags the parameters by up to an epoch, so
            // it only decides when the full evaluation is worth running.
            if running_em1 >= target || last {
                let em1 = evaluate_prepared(&params, config, &prepared, &[1])?.em[0].rate;
                record.train_em1 = Some(em1);
                stop = em1 >= target;
            }
        } else if last {
            record.train_em1 = Some(evaluate_prepared(&params, config, &prepared, &[1])?.em[0].rate);
        }
        record.seconds = epoch_start.elapsed().as_secs_f64();
        report.final_train_em1 = record.train_em1;
        report.epochs.push(record);
        if stop {
            report.stopped_early = !last;
            break;
        }
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok((checkpoint_of(params, config)?, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmRecord {
    pub k: usize,
    pub hits: usize,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeRecord {
    pub questions: usize,
    pub em1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub questions: usize,
    pub em: Vec<EmRecord>,
    pub mean_loss: f64,
    pub mean_loss_answer: f64,
    pub mean_loss_class: f64,
    pub mean_loss_loc: f64,
    /// EM@1 per question type, keyed by its leading question word.
    pub by_type: BTreeMap<String, TypeRecord>,
}

impl Metrics {
    pub fn em_at(&self, k: usize) -> Option<f64> {
        self.em.iter().find(|e| e.k == k).map(|e| e.rate)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: RunConfig,
    pub split: String,
    pub metrics: Metrics,
}

/// Metrics over already prepared samples. Samples run in parallel and
/// are aggregated in input order.
pub fn evaluate_prepared(
    params: &ParamSet,
    config: &RunConfig,
    samples: &[PreparedSample],
    ks: &[usize],
) -> Result<Metrics> {
    check_params(params, &config.dims)?;
    if samples.is_empty() {
        bail!(Argument, "nothing to evaluate");
    }
    if ks.is_empty() {
        bail!(Argument, "no k values requested");
    }
    let results = samples
        .par_iter()
        .map(|s| evaluate_sample(params, config, s))
        .collect::<Result<Vec<_>>>()?;
    aggregate(samples.iter().zip(&results).map(|(s, r)| (s, r)), ks)
}

/// Metrics over raw samples, prepared on the fly.
pub fn evaluate(params: &ParamSet, config: &RunConfig, samples: &[SceneSample], ks: &[usize]) -> Result<Metrics> {
    check_params(params, &config.dims)?;
    if samples.is_empty() {
        bail!(Argument, "nothing to evaluate");
    }
    if ks.is_empty() {
        bail!(Argument, "no k values requested");
    }
    let pairs = samples
        .par_iter()
        .map(|s| {
            let p = prepare(s, config, PointSampling::Inference)?;
            let r = evaluate_sample(params, config, &p)?;
            Ok((p, r))
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(pairs.iter().map(|(p, r)| (p, r)), ks)
}

fn aggregate<'a>(
    pairs: impl Iterator<Item = (&'a PreparedSample, &'a crate::model::SampleResult)>,
    ks: &[usize],
) -> Result<Metrics> {
    let mut hits = vec![0usize; ks.len()];
    let mut sums = [0.0f64; 4];
    let mut by_type: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut n = 0usize;
    for (s, r) in pairs {
        let gold = gold(s);
        for (h, &k) in hits.iter_mut().zip(ks) {
            if em_at_k(&r.answer_logits, &gold, k)? {
                *h += 1;
            }
        }
        let entry = by_type.entry(s.kind.type_name().to_string()).or_default();
        entry.0 += 1;
        if em_at_k(&r.answer_logits, &gold, 1)? {
            entry.1 += 1;
        }
        for (k, v) in [r.loss, r.loss_answer, r.loss_class, r.loss_loc].into_iter().enumerate() {
            sums[k] += v;
        }
        n += 1;
    }
    let nf = n as f64;
    Ok(Metrics {
        questions: n,
        em: ks.iter().zip(&hits).map(|(&k, &h)| EmRecord { k, hits: h, rate: h as f64 / nf }).collect(),
        mean_loss: sums[0] / nf,
        mean_loss_answer: sums[1] / nf,
        mean_loss_class: sums[2] / nf,
        mean_loss_loc: sums[3] / nf,
        by_type: by_type
            .into_iter()
            .map(|(name, (q, h))| (name, TypeRecord { questions: q, em1: h as f64 / q as f64 }))
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewReport {
    pub scene_seed: u64,
    pub question: usize,
    pub text: String,
    /// Per-view logits; absent when text-guided fusion is off.
    pub logits: Option<Vec<f64>>,
    /// Softmax of the logits, or uniform weights when fusion is off.
    pub weights: Vec<f64>,
    pub argmax_view: usize,
    /// Seed points that land on a valid pixel of each view.
    pub valid_points_per_view: Vec<usize>,
    /// Seed points indexed by how many views see them.
    pub points_by_valid_views: Vec<usize>,
}

/// View logits and weights the model assigns for one question.
pub fn inspect_views(params: &ParamSet, config: &RunConfig, sample: &SceneSample) -> Result<ViewReport> {
    check_params(params, &config.dims)?;
    let m = config.dims.m;
    let prep = prepare(sample, config, PointSampling::Inference)?;
    let mut g = Graph::new();
    let pv = params.bind_frozen(&mut g)?;
    let f = forward(&mut g, &pv, config, &prep)?;
    let logits = f.view_logits.map(|v| g.value(v).data().to_vec());
    let (weights, argmax_view) = match &logits {
        Some(h) => view_weights(h),
        None => (vec![1.0 / m as f64; m], 0),
    };
    let mut per_view = vec![0usize; m];
    let mut by_count = vec![0usize; m + 1];
    for p in 0..config.dims.n_p {
        let row = &prep.valid[p * m..(p + 1) * m];
        row.iter().zip(per_view.iter_mut()).filter(|(v, _)| **v).for_each(|(_, c)| *c += 1);
        by_count[row.iter().filter(|v| **v).count()] += 1;
    }
    Ok(ViewReport {
        scene_seed: sample.scene.spec.seed,
        question: sample.question,
        text: sample.question().text(),
        logits,
        weights,
        argmax_view,
        valid_points_per_view: per_view,
        points_by_valid_views: by_count,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyEntry {
    pub views: usize,
    pub repetitions: usize,
    pub mean_ms: f64,
    /// Population standard deviation, so a single repetition reports 0.
    pub std_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub config: RunConfig,
    pub entries: Vec<LatencyEntry>,
}

/// Wall time of answering `sample` (preparation plus forward pass) with
/// the first `v` views, for each `v` in `view_counts`. One untimed run
/// precedes the timed repetitions of each count.
pub fn bench_latency(
    params: &ParamSet,
    config: &RunConfig,
    sample: &SceneSample,
    view_counts: &[usize],
    repetitions: usize,
) -> Result<LatencyReport> {
    check_params(params, &config.dims)?;
    if repetitions == 0 {
        bail!(Argument, "need at least one repetition");
    }
    let available = sample.scene.views.len();
    let mut entries = Vec::with_capacity(view_counts.len());
    for &views in view_counts {
        if views == 0 || views > available {
            bail!(Argument, "{views} views requested, scene has {available}");
        }
        let mut c = config.clone();
        c.dims.m = views;
        let run = || -> Result<f64> {
            let t = Instant::now();
            let prep = prepare(sample, &c, PointSampling::Inference)?;
            evaluate_sample(params, &c, &prep)?;
            Ok(t.elapsed().as_secs_f64() * 1e3)
        };
        run()?;
        let times = (0..repetitions).map(|_| run()).collect::<Result<Vec<_>>>()?;
        let mean = times.iter().sum::<f64>() / repetitions as f64;
        let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / repetitions as f64;
        entries.push(LatencyEntry { views, repetitions, mean_ms: mean, std_ms: var.sqrt() });
    }
    Ok(LatencyReport { config: config.clone(), entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::tiny();
        c.data.scenes = 3;
        c.data.questions_per_scene = 2;
        c.optim.batch_size = 4;
        c.optim.warmup_steps = 2;
        c.train.epochs = 2;
        c
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let c = tiny();
        let train = generate_split(&c, Split::Train).unwrap();
        let val = generate_split(&c, Split::Val).unwrap();
        assert_eq!(train.len(), 6);
        let seeds = |s: &[SceneSample]| s.iter().map(|x| x.scene.spec.seed).collect::<std::collections::BTreeSet<_>>();
        assert!(seeds(&train).is_disjoint(&seeds(&val)));
        assert_eq!(seeds(&train).into_iter().collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn zero_epochs_return_initialisation() {
        let mut c = tiny();
        c.train.epochs = 0;
        let (ckpt, report) = train(&c, &[]).unwrap();
        assert_eq!(ckpt.params, init_params(&c.dims, c.train.seed).unwrap());
        assert!(report.epochs.is_empty());
        assert_eq!(report.final_train_em1, None);
        assert_eq!(ckpt.run_config().unwrap(), c);
    }

    #[test]
    fn training_is_deterministic_and_reported() {
        let c = tiny();
        let data = generate_split(&c, Split::Train).unwrap();
        let (a, ra) = train(&c, &data).unwrap();
        let (b, rb) = train(&c, &data).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.epochs.len(), 2);
        assert_eq!(ra.epochs[1].steps, 4);
        for (x, y) in ra.epochs.iter().zip(&rb.epochs) {
            assert_eq!(x.mean_loss.to_bits(), y.mean_loss.to_bits());
        }
        assert_ne!(a.params, init_params(&c.dims, c.train.seed).unwrap());
        let final_em = evaluate(&a.params, &c, &data, &[1]).unwrap().em_at(1);
        assert_eq!(ra.final_train_em1, final_em);
    }

    #[test]
    fn early_stop_is_confirmed_by_evaluation() {
        let mut c = tiny();
        c.train.epochs = 3;
        c.train.stop_at_em1 = Some(0.0);
        let data = generate_split(&c, Split::Train).unwrap();
        let (_, r) = train(&c, &data).unwrap();
        assert_eq!(r.epochs.len(), 1);
        assert!(r.stopped_early);
        assert_eq!(r.final_train_em1, r.epochs[0].train_em1);
    }

    #[test]
    fn evaluation_metrics_are_consistent() {
        let c = tiny();
        let data = generate_split(&c, Split::Val).unwrap();
        let params = init_params(&c.dims, 5).unwrap();
        let ks = [1, 3, c.dims.n_answers];
        let m = evaluate(&params, &c, &data, &ks).unwrap();
        assert_eq!(m.questions, data.len());
        assert_eq!(m.em_at(c.dims.n_answers), Some(1.0));
        assert!(m.em[0].rate <= m.em[1].rate);
        assert_eq!(m.by_type.values().map(|t| t.questions).sum::<usize>(), data.len());
        let prepared = prepare_all(&data, &c).unwrap();
        assert_eq!(evaluate_prepared(&params, &c, &prepared, &ks).unwrap(), m);
        assert!(evaluate(&params, &c, &data, &[0]).is_err());
        assert!(evaluate(&params, &c, &[], &[1]).is_err());
    }

    #[test]
    fn evaluation_rejects_mismatched_checkpoint() {
        let c = tiny();
        let data = generate_split(&c, Split::Val).unwrap();
        let mut other = c.clone();
        other.dims.d_m = 16;
        let params = init_params(&other.dims, 0).unwrap();
        assert!(matches!(evaluate(&params, &c, &data, &[1]), Err(Error::Config(_))));
    }

    #[test]
    fn zero_query_weights_give_uniform_views() {
        let c = tiny();
        let data = generate_split(&c, Split::Val).unwrap();
        let mut params = init_params(&c.dims, 2).unwrap();
        params.get_mut("tgmf.w_q").unwrap().data_mut().fill(0.0);
        let r = inspect_views(&params, &c, &data[0]).unwrap();
        assert_eq!(r.weights, vec![0.5, 0.5]);
        assert_eq!(r.points_by_valid_views.iter().sum::<usize>(), c.dims.n_p);
        let again = inspect_views(&params, &c, &data[0]).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn single_view_has_unit_weight() {
        let mut c = tiny();
        c.dims.m = 1;
        let data = generate_split(&c, Split::Val).unwrap();
        let params = init_params(&c.dims, 2).unwrap();
        let r = inspect_views(&params, &c, &data[0]).unwrap();
        assert_eq!(r.weights, vec![1.0]);
        assert_eq!(r.argmax_view, 0);
    }

    #[test]
    fn latency_entries_follow_request() {
        let mut c = tiny();
        c.dims.m = 3;
        let data = generate_split(&c, Split::Val).unwrap();
        let params = init_params(&c.dims, 2).unwrap();
        let r = bench_latency(&params, &c, &data[0], &[1, 3], 1).unwrap();
        assert_eq!(r.entries.iter().map(|e| e.views).collect::<Vec<_>>(), vec![1, 3]);
        assert!(r.entries.iter().all(|e| e.std_ms == 0.0 && e.mean_ms > 0.0));
        assert!(bench_latency(&params, &c, &data[0], &[4], 1).is_err());
        assert!(bench_latency(&params, &c, &data[0], &[1], 0).is_err());
    }
}
