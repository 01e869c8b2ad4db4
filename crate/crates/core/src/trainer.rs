//! Training, evaluation, detection, the gap-count baseline and the
//! training-set scaling study.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{derive_seed, DatasetManifest, ManifestEntry, Representation, Split, SplitData};
use crate::enhance::{cao_classify, cao_fit_threshold, count_gap_bins};
use crate::error::{Error, Result};
use crate::imagecore::{histogram, load_pgm, Histogram256};
use crate::models::{build_model, finetune_init, ModelKind, PCNN_MIN_INPUT};
use crate::nn::{loss_softmax_xent, softmax, Checkpoint, Mode, Network, Sgd, Tensor, TrainConfig};
use crate::Label;

/// Samples per inference-mode forward pass.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub iteration: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValRecord {
    /// SGD steps completed when validation ran.
    pub iteration: u64,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub val: Vec<ValRecord>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    pub fn steps_csv(&self) -> String {
        let mut out = String::from("iteration,loss,lr\n");
        for s in &self.steps {
            let _ = writeln!(out, "{},{:.9},{:e}", s.iteration, s.loss, s.lr);
        }
        out
    }

    pub fn val_csv(&self) -> String {
        let mut out = String::from("iteration,val_accuracy,val_loss\n");
        for v in &self.val {
            let _ = writeln!(out, "{},{:.6},{:.9}", v.iteration, v.accuracy, v.loss);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    /// SGD steps between validation passes; validation also runs before the
    /// first step and after the last.
    pub val_every: u64,
    /// Final checkpoint path; the best-validation checkpoint goes next to it
    /// (see [`best_path`]).
    pub out: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            val_every: 200,
            out: None,
        }
    }
}

pub struct TrainOutcome {
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub best_val_accuracy: f64,
    pub log: TrainLog,
}

/// `model.cef` -> `model.best.cef`.
pub fn best_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}.best.{}", ext.to_string_lossy()),
        None => format!("{stem}.best"),
    };
    out.with_file_name(name)
}

/// Class probabilities of every sample, inference mode.
pub fn predict(net: &mut Network<f32>, data: &SplitData) -> Result<Vec<Vec<f64>>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, _) = data.gather(chunk);
        let logits = net.forward(&x, Mode::Infer)?;
        out.extend(softmax(&logits));
    }
    Ok(out)
}

fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Accuracy in percent and mean cross-entropy.
fn score(probs: &[Vec<f64>], labels: &[usize]) -> (f64, f64) {
    let correct = probs.iter().zip(labels).filter(|(p, &l)| argmax(p) == l).count();
    let loss = probs
        .iter()
        .zip(labels)
        .map(|(p, &l)| -p[l].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / labels.len() as f64;
    (100.0 * correct as f64 / labels.len() as f64, loss)
}

fn validate_net(net: &mut Network<f32>, val: &SplitData) -> Result<(f64, f64)> {
    let probs = predict(net, val)?;
    Ok(score(&probs, &val.labels))
}

/// Mini-batch SGD on the train split with periodic validation. Starts from
/// `init` when given (fine-tuning), otherwise from a fresh initialization
/// seeded by `cfg.seed`.
pub fn train(
    model: ModelKind,
    manifest: &DatasetManifest,
    root: &Path,
    cfg: &TrainConfig,
    opts: &TrainOptions,
    init: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if opts.val_every == 0 {
        return Err(Error::InvalidConfig("val_every must be positive".into()));
    }
    let repr = model.representation();
    let train_data = SplitData::load(manifest, root, Split::Train, repr)?;
    let val_data = SplitData::load(manifest, root, Split::Val, repr)?;
    let [_, h, w] = train_data.shape;
    if let Some(base) = init {
        if ModelKind::from_spec(&base.spec)? != model {
            return Err(Error::SpecMismatch(format!(
                "cannot fine-tune {model} from a {} checkpoint",
                base.spec.name
            )));
        }
    }
    let mut net = match init {
        Some(base) => finetune_init(base, &build_model(model, h, w, 0)?.spec().clone())?,
        None => build_model(model, h, w, cfg.seed)?,
    };
    let mut sgd = Sgd::new(&net);
    let mut log = TrainLog::default();

    let (acc0, loss0) = validate_net(&mut net, &val_data)?;
    log.val.push(ValRecord {
        iteration: 0,
        accuracy: acc0,
        loss: loss0,
    });
    let mut best = (acc0, Checkpoint::from_network(&net, 0));

    let mut epoch = 0u64;
    let mut order = train_data.epoch_order(cfg.seed, epoch);
    let mut cursor = 0usize;
    for iter in 0..cfg.max_iter {
        if cursor >= order.len() {
            epoch += 1;
            order = train_data.epoch_order(cfg.seed, epoch);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let (x, labels) = train_data.gather(&order[cursor..end]);
        cursor = end;

        let logits = net.forward(&x, Mode::Train)?;
        let (loss, grad) = loss_softmax_xent(&logits, &labels)?;
        if !loss.is_finite() {
            return Err(Error::DivergedLoss {
                iteration: iter,
                loss,
            });
        }
        net.backward(&grad)?;
        sgd.step(&mut net, cfg, iter)?;
        log.steps.push(StepRecord {
            iteration: iter as u64,
            loss,
            lr: cfg.learning_rate(iter),
        });

        let done = iter as u64 + 1;
        if done.is_multiple_of(opts.val_every) || done == cfg.max_iter as u64 {
            let (acc, vloss) = validate_net(&mut net, &val_data)?;
            log.val.push(ValRecord {
                iteration: done,
                accuracy: acc,
                loss: vloss,
            });
            if acc > best.0 {
                best = (acc, Checkpoint::from_network(&net, done));
            }
        }
    }

    let last = Checkpoint::from_network(&net, cfg.max_iter as u64);
    if let Some(out) = &opts.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        last.save(out)?;
        best.1.save(&best_path(out))?;
    }
    Ok(TrainOutcome {
        last,
        best: best.1,
        best_val_accuracy: best.0,
        log,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub scenario: String,
    pub model: String,
    pub split: String,
    /// `(gamma, detection rate in percent, enhanced samples)` per gamma.
    pub per_gamma: Vec<(f64, f64, usize)>,
    pub accuracy: f64,
    /// `confusion[truth][predicted]`, index 0 original, 1 enhanced.
    pub confusion: [[usize; 2]; 2],
    pub iteration: u64,
    /// Entry counts of the train, val and test splits.
    pub sizes: [usize; 3],
}

impl EvalReport {
    fn from_predictions(
        manifest: &DatasetManifest,
        model: &str,
        split: Split,
        iteration: u64,
        truth: &[usize],
        predicted: &[usize],
        gammas: &[Option<f64>],
    ) -> Self {
        let mut confusion = [[0usize; 2]; 2];
        let mut per: BTreeMap<u64, (f64, usize, usize)> = BTreeMap::new();
        for ((&t, &p), g) in truth.iter().zip(predicted).zip(gammas) {
            confusion[t.min(1)][p.min(1)] += 1;
            if let (Some(g), 1) = (g, t) {
                let e = per.entry(g.to_bits()).or_insert((*g, 0, 0));
                e.2 += 1;
                if p == 1 {
                    e.1 += 1;
                }
            }
        }
        let mut per_gamma: Vec<(f64, f64, usize)> = per
            .into_values()
            .map(|(g, hit, n)| (g, 100.0 * hit as f64 / n as f64, n))
            .collect();
        per_gamma.sort_by(|a, b| a.0.total_cmp(&b.0));
        let correct = confusion[0][0] + confusion[1][1];
        let count = |s| manifest.entries.iter().filter(|e| e.split == Some(s)).count();
        Self {
            scenario: manifest.scenario().to_string(),
            model: model.into(),
            split: split.to_string(),
            per_gamma,
            accuracy: 100.0 * correct as f64 / truth.len().max(1) as f64,
            confusion,
            iteration,
            sizes: [count(Split::Train), count(Split::Val), count(Split::Test)],
        }
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    /// `key,value` table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("key,value\n");
        let _ = writeln!(out, "scenario,{}", self.scenario);
        let _ = writeln!(out, "model,{}", self.model);
        let _ = writeln!(out, "split,{}", self.split);
        let _ = writeln!(out, "iteration,{}", self.iteration);
        let _ = writeln!(out, "train_size,{}", self.sizes[0]);
        let _ = writeln!(out, "val_size,{}", self.sizes[1]);
        let _ = writeln!(out, "test_size,{}", self.sizes[2]);
        for (g, acc, n) in &self.per_gamma {
            let _ = writeln!(out, "accuracy_gamma_{g},{acc:.4}");
            let _ = writeln!(out, "count_gamma_{g},{n}");
        }
        let _ = writeln!(out, "accuracy,{:.4}", self.accuracy);
        let _ = writeln!(out, "true_original_pred_original,{}", self.confusion[0][0]);
        let _ = writeln!(out, "true_original_pred_enhanced,{}", self.confusion[0][1]);
        let _ = writeln!(out, "true_enhanced_pred_original,{}", self.confusion[1][0]);
        let _ = writeln!(out, "true_enhanced_pred_enhanced,{}", self.confusion[1][1]);
        out
    }
}

/// Inference-mode evaluation of `ckpt` on one split.
pub fn evaluate(ckpt: &Checkpoint, manifest: &DatasetManifest, root: &Path, split: Split) -> Result<EvalReport> {
    let kind = ModelKind::from_spec(&ckpt.spec)?;
    let data = SplitData::load(manifest, root, split, kind.representation())?;
    let mut net = ckpt.build_network()?;
    let predicted: Vec<usize> = predict(&mut net, &data)?.iter().map(|p| argmax(p)).collect();
    Ok(EvalReport::from_predictions(
        manifest,
        kind.name(),
        split,
        ckpt.iteration,
        &data.labels,
        &predicted,
        &data.gammas,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub path: PathBuf,
    pub label: Label,
    /// Softmax probability of `label`.
    pub confidence: f64,
}

/// Classifies each image, in input order.
pub fn detect(ckpt: &Checkpoint, images: &[PathBuf], mode: Representation) -> Result<Vec<Detection>> {
    let kind = ModelKind::from_spec(&ckpt.spec)?;
    if kind.representation() != mode {
        return Err(Error::SpecMismatch(format!(
            "{kind} checkpoints take {:?} input, not {mode:?}",
            kind.representation()
        )));
    }
    let mut net = ckpt.build_network()?;
    let mut out = Vec::with_capacity(images.len());
    for path in images {
        let img = load_pgm(path).map_err(|e| match e {
            Error::MissingFile(p) => Error::MissingImage(p),
            other => other,
        })?;
        if mode == Representation::Pixel && (img.width() < PCNN_MIN_INPUT || img.height() < PCNN_MIN_INPUT) {
            return Err(Error::InputTooSmall {
                height: img.height(),
                width: img.width(),
                min: PCNN_MIN_INPUT,
            });
        }
        let shape = mode.shape(&img);
        let x = Tensor::new(vec![1, shape[0], shape[1], shape[2]], mode.features(&img))?;
        let p = softmax(&net.forward(&x, Mode::Infer)?).remove(0);
        let k = argmax(&p);
        out.push(Detection {
            path: path.clone(),
            label: Label::from_index(k),
            confidence: p[k],
        });
    }
    Ok(out)
}

fn split_histograms<'a>(manifest: &'a DatasetManifest, root: &Path, split: Split) -> Result<Vec<(&'a ManifestEntry, Histogram256)>> {
    let entries = manifest.split_entries(split);
    if entries.is_empty() {
        return Err(Error::EmptySplit(split.to_string()));
    }
    entries
        .into_iter()
        .map(|e| {
            let img = load_pgm(&root.join(&e.path)).map_err(|err| match err {
                Error::MissingFile(p) => Error::MissingImage(p),
                other => other,
            })?;
            Ok((e, histogram(&img)))
        })
        .collect()
}

/// Gap-count threshold detector fitted on train, scored on test.
pub fn baseline_eval(manifest: &DatasetManifest, root: &Path) -> Result<EvalReport> {
    let train = split_histograms(manifest, root, Split::Train)?;
    let fit: Vec<_> = train.iter().map(|(e, h)| (count_gap_bins(h), e.label)).collect();
    let threshold = cao_fit_threshold(&fit)?;
    let test = split_histograms(manifest, root, Split::Test)?;
    let truth: Vec<usize> = test.iter().map(|(e, _)| e.label.index()).collect();
    if truth.iter().all(|&t| t == truth[0]) {
        return Err(Error::DegenerateLabels);
    }
    let predicted: Vec<usize> = test.iter().map(|(_, h)| cao_classify(h, threshold).index()).collect();
    let gammas: Vec<Option<f64>> = test.iter().map(|(e, _)| e.gamma).collect();
    Ok(EvalReport::from_predictions(
        manifest,
        "gap_baseline",
        Split::Test,
        0,
        &truth,
        &predicted,
        &gammas,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingRow {
    pub size: usize,
    pub pcnn: f64,
    pub hcnn: f64,
}

pub fn scaling_csv(rows: &[ScalingRow]) -> String {
    let mut out = String::from("pairs,pcnn_accuracy,hcnn_accuracy\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.4},{:.4}", r.size, r.pcnn, r.hcnn);
    }
    out
}

/// Original/enhanced pairs of the train split, in a seeded order. An
/// original entry is paired with the enhanced entry that follows it from
/// the same source.
fn train_pairs(manifest: &DatasetManifest, seed: u64) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let mut pending: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        if e.split != Some(Split::Train) {
            continue;
        }
        match e.label {
            Label::Original => pending.entry(&e.source).or_default().push(i),
            Label::Enhanced => {
                if let Some(o) = pending.get_mut(e.source.as_str()).and_then(|v| v.pop()) {
                    pairs.push((o, i));
                }
            }
        }
    }
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    pairs
}

/// Trains both detectors on nested train subsets of `sizes` pairs each and
/// scores the final models on the manifest's test split.
pub fn scaling_study(
    sizes: &[usize],
    manifest: &DatasetManifest,
    root: &Path,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<Vec<ScalingRow>> {
    let pairs = train_pairs(manifest, derive_seed(cfg.seed, u64::MAX));
    let largest = sizes.iter().copied().max().unwrap_or(0);
    if largest > pairs.len() {
        return Err(Error::SizesExceedData {
            needed: largest,
            available: pairs.len(),
        });
    }
    let jobs: Vec<(usize, ModelKind)> = sizes
        .iter()
        .flat_map(|&s| [(s, ModelKind::Pcnn), (s, ModelKind::Hcnn)])
        .collect();
    let scores: Vec<f64> = jobs
        .par_iter()
        .enumerate()
        .map(|(j, &(size, kind))| {
            let mut keep = vec![false; manifest.entries.len()];
            for &(o, e) in &pairs[..size] {
                keep[o] = true;
                keep[e] = true;
            }
            let entries = manifest
                .entries
                .iter()
                .zip(&keep)
                .filter(|(e, &k)| k || e.split != Some(Split::Train))
                .map(|(e, _)| e.clone())
                .collect();
            let subset = DatasetManifest { entries };
            let job_cfg = TrainConfig {
                seed: derive_seed(cfg.seed, j as u64),
                ..cfg.clone()
            };
            let job_opts = TrainOptions {
                out: None,
                ..opts.clone()
            };
            let outcome = train(kind, &subset, root, &job_cfg, &job_opts, None)?;
            Ok(evaluate(&outcome.last, &subset, root, Split::Test)?.accuracy)
        })
        .collect::<Result<_>>()?;
    Ok(sizes
        .iter()
        .enumerate()
        .map(|(i, &size)| ScalingRow {
            size,
            pcnn: scores[2 * i],
            hcnn: scores[2 * i + 1],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_scenario, ScenarioConfig, SourceSpec};

    fn toy(dir: &Path, sources: (usize, usize, usize)) -> DatasetManifest {
        let cfg = ScenarioConfig {
            gammas: vec![0.6],
            patch_size: 32,
            split_sizes: sources,
            seed: 3,
            ..ScenarioConfig::default()
        };
        let n = sources.0 + sources.1 + sources.2;
        build_scenario(&SourceSpec::Synthetic { seed: 11, count: n, size: 32 }, &cfg, dir).unwrap()
    }

    fn quick_cfg(iters: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            max_iter: iters,
            base_lr: 0.01,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn best_path_naming() {
        assert_eq!(best_path(Path::new("a/model.cef")), Path::new("a/model.best.cef"));
        assert_eq!(best_path(Path::new("model")), Path::new("model.best"));
    }

    #[test]
    fn log_schedule_and_finetune_copy() {
        let dir = tempfile::tempdir().unwrap();
        let m = toy(dir.path(), (30, 10, 10));
        let cfg = TrainConfig {
            lr_step: 7,
            ..quick_cfg(20)
        };
        let out = dir.path().join("h.cef");
        let opts = TrainOptions {
            val_every: 5,
            out: Some(out.clone()),
        };
        let run = train(ModelKind::Hcnn, &m, dir.path(), &cfg, &opts, None).unwrap();
        assert!(run.log.steps.windows(2).all(|w| w[0].iteration < w[1].iteration));
        for s in &run.log.steps {
            assert_eq!(s.lr, cfg.learning_rate(s.iteration as usize));
        }
        let iters: Vec<u64> = run.log.val.iter().map(|v| v.iteration).collect();
        assert_eq!(iters, [0, 5, 10, 15, 20]);
        assert!(out.exists() && best_path(&out).exists());

        let saved = Checkpoint::load(&out).unwrap();
        assert_eq!(saved, run.last);
        let again = train(ModelKind::Hcnn, &m, dir.path(), &cfg, &TrainOptions::default(), Some(&saved)).unwrap();
        let prev = run.log.val.last().unwrap().loss;
        assert!((again.log.val[0].loss - prev).abs() < 1e-6);

        assert!(matches!(
            train(ModelKind::Pcnn, &m, dir.path(), &cfg, &TrainOptions::default(), Some(&saved)),
            Err(Error::SpecMismatch(_))
        ));
    }

    #[test]
    fn report_consistency() {
        let dir = tempfile::tempdir().unwrap();
        let m = toy(dir.path(), (20, 10, 10));
        let run = train(ModelKind::Hcnn, &m, dir.path(), &quick_cfg(5), &TrainOptions::default(), None).unwrap();
        let r = evaluate(&run.last, &m, dir.path(), Split::Test).unwrap();
        assert_eq!(r.total(), 20);
        let acc = 100.0 * (r.confusion[0][0] + r.confusion[1][1]) as f64 / 20.0;
        assert_eq!(r.accuracy, acc);
        assert_eq!(r.sizes, [40, 20, 20]);
        assert_eq!(r.per_gamma.len(), 1);
        assert_eq!(r.to_csv(), evaluate(&run.last, &m, dir.path(), Split::Test).unwrap().to_csv());
    }

    #[test]
    fn constant_predictor_scores_half() {
        let dir = tempfile::tempdir().unwrap();
        let m = toy(dir.path(), (4, 4, 4));
        let mut ckpt = Checkpoint::from_network(&build_model(ModelKind::Hcnn, 32, 32, 1).unwrap(), 0);
        // zero the last fc weights and bias the enhanced class
        let n = ckpt.blocks.len();
        ckpt.blocks[n - 2].1.iter_mut().for_each(|v| *v = 0.0);
        ckpt.blocks[n - 1].1 = vec![0.0, 1.0];
        let r = evaluate(&ckpt, &m, dir.path(), Split::Val).unwrap();
        assert_eq!(r.accuracy, 50.0);
        assert_eq!(r.confusion, [[0, 4], [0, 4]]);
        assert_eq!(r.per_gamma, vec![(0.6, 100.0, 4)]);
    }

    #[test]
    fn detect_contract() {
        let dir = tempfile::tempdir().unwrap();
        let m = toy(dir.path(), (4, 2, 2));
        let ckpt = Checkpoint::from_network(&build_model(ModelKind::Hcnn, 32, 32, 1).unwrap(), 0);
        let paths: Vec<PathBuf> = m.entries.iter().map(|e| dir.path().join(&e.path)).collect();
        let d = detect(&ckpt, &paths, Representation::Histogram).unwrap();
        assert_eq!(d.len(), paths.len());
        assert!(d.iter().zip(&paths).all(|(x, p)| &x.path == p));
        assert!(d.iter().all(|x| (0.5..=1.0).contains(&x.confidence)));
        assert!(matches!(
            detect(&ckpt, &paths, Representation::Pixel),
            Err(Error::SpecMismatch(_))
        ));
        assert!(matches!(
            detect(&ckpt, &[dir.path().join("nope.pgm")], Representation::Histogram),
            Err(Error::MissingImage(_))
        ));
    }

    #[test]
    fn baseline_separates_plain_gamma() {
        let dir = tempfile::tempdir().unwrap();
        let m = toy(dir.path(), (20, 5, 20));
        let r = baseline_eval(&m, dir.path()).unwrap();
        assert!(r.accuracy > 50.0, "{}", r.accuracy);
        let single = m.filtered(|e| e.split != Some(Split::Test) || e.label == Label::Enhanced);
        assert!(matches!(baseline_eval(&single, dir.path()), Err(Error::DegenerateLabels)));
    }

    #[test]
    fn scaling_single_row_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let m = toy(dir.path(), (10, 4, 4));
        let rows = scaling_study(&[6], &m, dir.path(), &quick_cfg(3), &TrainOptions::default()).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].size, 6);
        assert!(matches!(
            scaling_study(&[11], &m, dir.path(), &quick_cfg(3), &TrainOptions::default()),
            Err(Error::SizesExceedData { needed: 11, available: 10 })
        ));
    }
}
