//! Config-driven experiments and the artifacts they leave behind.

mod config;
mod export;
mod model;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{load_idx, make_moons, normalize, split, BatchSampler, Dataset, Normalization, SplitSpec};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::nn::Classifier;
use crate::tensor::Tensor;
use crate::train::{default_mask_source, evaluate, MaskSource, StepMetrics, Trainer};

pub use config::{DatasetKind, ExperimentConfig, MethodName, SEED_ENV};
pub use export::{
    boundary_grid, export_boundary, export_masks, export_weight_hist, histogram, load_mask_inputs, pgm_bytes, Grid,
    Histogram,
};
pub use model::{MaskTable, TrainedMask, TrainedModel};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.xprt";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
pub const METRICS_HEADER: &str = "iteration,wall_ms,loss,ce,xadv,mask_activity,test_acc";

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte.gz";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte.gz";
pub const MNIST_TEST_IMAGES: &str = "test-images-idx3-ubyte.gz";
pub const MNIST_TEST_LABELS: &str = "test-labels-idx1-ubyte.gz";

#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub labeled: Dataset,
    pub unlabeled: Option<Dataset>,
    pub test: Dataset,
}

fn get<T: Clone>(v: &Option<T>, name: &str) -> Result<T> {
    v.clone()
        .ok_or_else(|| Error::Config(format!("{name} is unset; resolve the config first")))
}

fn normalized(ds: Dataset, scheme: Normalization) -> Result<Dataset> {
    match scheme {
        Normalization::Raw | Normalization::Unit => Ok(ds),
        _ => normalize(&ds, scheme),
    }
}

/// Builds the labeled, unlabeled and test sets of a resolved config.
///
/// Moons: the labeled points, the test points and (optionally) a separate
/// unlabeled pool come from independent draws seeded by `split.seed`. MNIST:
/// the training file is split; the test file is the test set.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let spec: SplitSpec = get(&cfg.split, "split")?;
    match cfg.dataset {
        DatasetKind::Moons => {
            let noise = get(&cfg.noise_sd, "noise_sd")?;
            let base = spec.seed.wrapping_mul(3);
            let labeled = make_moons(spec.n_labeled, noise, base)?;
            let test = make_moons(get(&cfg.n_test, "n_test")?, noise, base.wrapping_add(1))?;
            let unlabeled = if spec.n_unlabeled == 0 {
                None
            } else if get(&cfg.unlabeled_from_test, "unlabeled_from_test")? {
                if spec.n_unlabeled > test.len() {
                    return Err(Error::Config(format!(
                        "split.n_unlabeled: {} exceeds the {} test points",
                        spec.n_unlabeled,
                        test.len()
                    )));
                }
                let mut ids: Vec<usize> = (0..test.len()).collect();
                ids.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
                ids.truncate(spec.n_unlabeled);
                ids.sort_unstable();
                Some(test.subset(&ids)?.without_labels())
            } else {
                Some(make_moons(spec.n_unlabeled.max(2), noise, base.wrapping_add(2))?.without_labels())
            };
            Ok(ExperimentData { labeled, unlabeled, test })
        }
        DatasetKind::Mnist => {
            let dir = get(&cfg.data_dir, "data_dir")?;
            let scheme = get(&cfg.normalization, "normalization")?;
            let train = normalized(
                load_idx(&dir.join(MNIST_TRAIN_IMAGES), &dir.join(MNIST_TRAIN_LABELS))?,
                scheme,
            )?;
            let test = normalized(load_idx(&dir.join(MNIST_TEST_IMAGES), &dir.join(MNIST_TEST_LABELS))?, scheme)?;
            let parts = split(&train, &spec)?;
            Ok(ExperimentData {
                labeled: parts.labeled,
                unlabeled: parts.unlabeled,
                test,
            })
        }
    }
}

/// One `metrics.csv` row: step metrics averaged over the evaluation
/// interval, plus clean test accuracy at its end.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub wall_ms: u64,
    pub loss: f64,
    pub ce: f64,
    pub xadv: f64,
    pub mask_activity: Option<f64>,
    pub test_acc: f64,
}

impl MetricsRow {
    fn csv_line(&self, out: &mut String) {
        let activity = self.mask_activity.map(|a| a.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            self.iteration, self.wall_ms, self.loss, self.ce, self.xadv, activity, self.test_acc
        )
        .expect("string write");
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        r.csv_line(&mut out);
    }
    out
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub config: ExperimentConfig,
    pub rows: Vec<MetricsRow>,
    pub final_accuracy: f64,
    pub output_dir: PathBuf,
    pub model: TrainedModel,
}

#[derive(Default)]
struct Interval {
    steps: usize,
    loss: f64,
    ce: f64,
    xadv: f64,
    activity: Option<f64>,
}

impl Interval {
    fn add(&mut self, m: &StepMetrics) {
        self.steps += 1;
        self.loss += m.loss;
        self.ce += m.ce;
        self.xadv += m.xadv;
        if let Some(a) = m.mask_activity {
            *self.activity.get_or_insert(0.0) += a;
        }
    }

    fn row(&self, iteration: usize, wall_ms: u64, test_acc: f64) -> MetricsRow {
        let n = self.steps.max(1) as f64;
        MetricsRow {
            iteration,
            wall_ms,
            loss: self.loss / n,
            ce: self.ce / n,
            xadv: self.xadv / n,
            mask_activity: self.activity.map(|a| a / n),
            test_acc,
        }
    }
}

fn trained_model(trainer: &Trainer, cfg: &ExperimentConfig, data: &ExperimentData, train_unlabeled: bool) -> Result<TrainedModel> {
    let spec = cfg.train_config()?.perturbation;
    let mask = match &trainer.mask {
        MaskSource::None => TrainedMask::None,
        MaskSource::Inductive(g) => TrainedMask::Generator(g.clone()),
        MaskSource::Transductive(t) => {
            let mut parts = vec![&data.labeled.examples];
            if let (true, Some(u)) = (train_unlabeled, &data.unlabeled) {
                parts.push(&u.examples);
            }
            TrainedMask::Table(MaskTable {
                log_alpha: t.log_alpha.clone(),
                inputs: Tensor::concat_rows(&parts)?,
            })
        }
    };
    Ok(TrainedModel {
        classifier: trainer.classifier.clone(),
        mask,
        epsilon: spec.map_or(1.0, |s| s.epsilon),
        hard_concrete: spec.map(|s| s.hard_concrete).unwrap_or_default(),
        sample_shape: data.labeled.sample_shape.clone(),
        normalization: data.labeled.normalization,
    })
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    run_with(cfg, &mut |_| {})
}

/// Resolves and runs an experiment, calling `observer` after each evaluation.
///
/// Writes `resolved_config.json` first, rewrites `metrics.csv` after every
/// evaluation and writes `checkpoint.xprt` at the end, all atomically.
pub fn run_with(cfg: &ExperimentConfig, observer: &mut dyn FnMut(&MetricsRow)) -> Result<RunSummary> {
    let cfg = cfg.resolve()?;
    let out = cfg.output_dir.clone();
    write_atomic(&out.join(RESOLVED_CONFIG_FILE), cfg.to_json().as_bytes())?;

    let data = prepare_data(&cfg)?;
    let tc = cfg.train_config()?;
    let seed = tc.seed;
    let train_unlabeled = tc.perturbation.is_some_and(|s| !s.method.is_supervised());
    let unlabeled = data.unlabeled.as_ref().filter(|_| train_unlabeled);

    let mut init = ChaCha8Rng::seed_from_u64(seed);
    init.set_stream(4);
    let mut widths = vec![data.labeled.feature_len()];
    widths.extend(get(&cfg.hidden, "hidden")?);
    widths.push(data.labeled.num_classes.max(data.test.num_classes));
    let classifier = Classifier::mlp(&widths, &mut init)?;
    let table_rows = data.labeled.len() + unlabeled.map_or(0, Dataset::len);
    let mask = default_mask_source(
        tc.perturbation.as_ref(),
        &data.labeled.sample_shape,
        table_rows,
        tc.mask_optimizer.lr,
        &mut init,
    )?;

    let mut trainer = Trainer::new(classifier, mask, tc.clone(), data.labeled.len())?;
    let mut sampler = BatchSampler::new(&data.labeled, unlabeled, tc.batch_labeled, tc.batch_unlabeled, seed)?;
    let eval_every = get(&cfg.eval_every, "eval_every")?;
    let record_wall = get(&cfg.record_wall_time, "record_wall_time")?;
    let export_every = cfg.mask_export_every;
    let export_ids = cfg.mask_export_indices.clone().unwrap_or_default();

    let start = Instant::now();
    let mut rows = Vec::new();
    let mut interval = Interval::default();
    for it in 0..tc.iterations {
        let batch = sampler.next_batch()?;
        let m = trainer.train_step(&batch)?;
        interval.add(&m);
        let done = it + 1;
        if done % eval_every == 0 || done == tc.iterations {
            let wall_ms = if record_wall { start.elapsed().as_millis() as u64 } else { 0 };
            let row = interval.row(done, wall_ms, evaluate(&trainer.classifier, &data.test)?);
            rows.push(row);
            write_atomic(&out.join(METRICS_FILE), metrics_csv(&rows).as_bytes())?;
            observer(&row);
            interval = Interval::default();
        }
        if export_every.is_some_and(|n| done % n == 0) {
            let model = trained_model(&trainer, &cfg, &data, train_unlabeled)?;
            let dir = out.join("masks").join(format!("iter_{done:06}"));
            export_masks(&model, &data.test.examples, &export_ids, &dir)?;
        }
    }

    let model = trained_model(&trainer, &cfg, &data, train_unlabeled)?;
    model.save(&out.join(CHECKPOINT_FILE))?;
    Ok(RunSummary {
        final_accuracy: rows.last().map_or(0.0, |r| r.test_acc),
        config: cfg,
        rows,
        output_dir: out,
        model,
    })
}

/// Loads a config file (with the seed override) and runs it.
pub fn run_path(path: &Path, observer: &mut dyn FnMut(&MetricsRow)) -> Result<RunSummary> {
    run_with(&ExperimentConfig::load(path)?, observer)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moons_split_sizes() {
        let cfg = ExperimentConfig::new(DatasetKind::Moons, MethodName::Vat, "o").resolve().unwrap();
        let d = prepare_data(&cfg).unwrap();
        assert_eq!(d.labeled.len(), 16);
        assert_eq!(d.unlabeled.as_ref().unwrap().len(), 500);
        assert_eq!(d.test.len(), 1000);
    }

    #[test]
    fn short_moons_run_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::new(DatasetKind::Moons, MethodName::Xvat, dir.path());
        cfg.iterations = Some(30);
        cfg.eval_every = Some(10);
        let s = run(&cfg).unwrap();
        assert_eq!(s.rows.len(), 3);
        let csv = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert!(csv.starts_with(METRICS_HEADER));
        assert_eq!(csv.lines().count(), 4);
        let back = TrainedModel::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(back, s.model);
        let a = s.rows[2].mask_activity.unwrap();
        assert!(a > 0.0 && a < 1.0);
    }
}
