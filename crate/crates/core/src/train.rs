//! Run configuration, the training loop and evaluation.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cmunet_tensor::{par, Element, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::data::{augment, predict, tta_predict, AugmentConfig, Dataset, SegSample, Split};
use crate::error::{Error, Result};
use crate::loss::total_loss;
use crate::metrics::{compute_metrics, ConfusionMatrix, MetricReport};
use crate::model::{CmUnet, ModelConfig};
use crate::nn::Mode;
use crate::optim::{AdamW, Schedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub seed: u64,
    /// Fixed-order reductions so repeated runs are bit-identical.
    pub deterministic: bool,
    /// Use flip test-time augmentation for validation.
    pub eval_tta: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr: 6e-4,
            schedule: Schedule::Cosine,
            weight_decay: 0.01,
            seed: 42,
            deterministic: true,
            eval_tta: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory; the `--data` flag takes precedence.
    pub root: Option<PathBuf>,
    /// Square training crop, a multiple of 32.
    pub crop: usize,
    pub augment: AugmentConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { root: None, crop: 64, augment: AugmentConfig::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub msaa: bool,
    pub multi_output: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { msaa: true, multi_output: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Overrides `model.use_msaa` and `model.multi_output`.
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { use_msaa: self.ablation.msaa, multi_output: self.ablation.multi_output, ..self.model.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(t.lr.is_finite() && t.lr > 0.0) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", t.lr)));
        }
        if !(t.weight_decay.is_finite() && t.weight_decay >= 0.0) {
            return Err(Error::Config("train.weight_decay must be non-negative".into()));
        }
        if self.data.crop == 0 || !self.data.crop.is_multiple_of(32) {
            return Err(Error::Config(format!("data.crop must be a positive multiple of 32, got {}", self.data.crop)));
        }
        if self.data.augment.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config("data.augment.scales must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(rename = "val_mIoU")]
    pub val_miou: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_val_miou: f64,
    pub parameters: usize,
    pub final_report: Option<MetricReport>,
}

/// `<out>` with its extension replaced by `best.cmuw`.
pub fn best_path(out: &Path) -> PathBuf {
    out.with_extension("best.cmuw")
}

/// `<out>.log.jsonl`
pub fn log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log.jsonl");
    PathBuf::from(s)
}

fn stack_batch(samples: &[SegSample]) -> Result<(Tensor<f32>, Vec<u8>)> {
    let images: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    let x = Tensor::stack(&images, 0)?;
    Ok((x, samples.iter().flat_map(|s| s.mask.iter().copied()).collect()))
}

/// Confusion matrix of `model` over `samples`, in batches.
pub fn evaluate<T: Element>(model: &CmUnet<T>, samples: &[SegSample], batch_size: usize, tta: bool) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.config.num_classes);
    for chunk in samples.chunks(batch_size.max(1)) {
        let (x, target) = stack_batch(chunk)?;
        let x = x.cast::<T>();
        let pred = if tta { tta_predict(model, &x)? } else { predict(model, &x)? };
        cm.update(&pred, &target)?;
    }
    Ok(cm)
}

fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64 + 1) << 32) | index as u64);
    rng
}

fn write_line(log: &mut File, path: &Path, value: &impl Serialize) -> Result<()> {
    let line = serde_json::to_string(value).expect("log line serializes");
    writeln!(log, "{line}").map_err(|e| Error::io(path, e))
}

/// Trains per `cfg` on `data`, writing the latest checkpoint to `out` after
/// every epoch, the best-by-validation-mIoU one to [`best_path`] and one JSON
/// line per epoch to [`log_path`] (preceded by the effective config).
pub fn train(cfg: &RunConfig, data: &Dataset, out: &Path, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainReport> {
    cfg.validate()?;
    let model_cfg = cfg.model_config();
    if data.meta.num_classes != model_cfg.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model.num_classes is {}",
            data.meta.num_classes, model_cfg.num_classes
        )));
    }
    let t = &cfg.train;
    par::set_deterministic(t.deterministic);
    let train_set = data.load(Split::Train)?;
    let val_set = data.load(Split::Val)?;
    if train_set.is_empty() && t.epochs > 0 {
        return Err(Error::Config("training split is empty".into()));
    }

    let model = CmUnet::<f32>::new(model_cfg.clone())?;
    let mut opt = AdamW::new(&model.store, t.weight_decay);
    let log_file = log_path(out);
    let mut log = OpenOptions::new().create(true).write(true).truncate(true).open(&log_file).map_err(|e| Error::io(&log_file, e))?;
    write_line(&mut log, &log_file, &serde_json::json!({ "config": cfg }))?;

    let run_json = serde_json::to_value(cfg).expect("config serializes");
    let snapshot = |epoch: usize, step: u64, val_miou: Option<f64>| {
        let meta = CheckpointMeta { model: model_cfg.clone(), epoch, step, seed: t.seed, val_miou, run: Some(run_json.clone()) };
        Checkpoint::from_model(&model, meta)
    };
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: None,
        best_val_miou: f64::NEG_INFINITY,
        parameters: model.count_parameters(),
        final_report: None,
    };
    if t.epochs == 0 {
        snapshot(0, 0, None).save(out)?;
        return Ok(report);
    }

    let per_epoch = train_set.len().div_ceil(t.batch_size) as u64;
    let total_steps = per_epoch * t.epochs as u64;
    let metric_classes = model_cfg.metric_classes();
    for epoch in 0..t.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut sample_rng(t.seed, epoch, u32::MAX as usize));
        let mut loss_sum = 0.0;
        let mut lr = t.lr;
        for batch in order.chunks(t.batch_size) {
            let samples = par::map_range(batch.len(), |j| {
                let i = batch[j];
                augment(&train_set[i], &cfg.data.augment, cfg.data.crop, &mut sample_rng(t.seed, epoch, i))
            });
            let (x, target) = stack_batch(&samples)?;
            model.store.zero_grad();
            let outputs = model.forward(&x, Mode::Train)?;
            let loss = total_loss(&outputs, &target, model_cfg.aux_weight)?;
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(Error::Invalid(format!("non-finite loss at epoch {}", epoch + 1)));
            }
            loss.backward()?;
            lr = t.schedule.lr(t.lr, opt.steps(), total_steps);
            opt.step(lr)?;
            loss_sum += f64::from(value) * batch.len() as f64;
        }
        let train_loss = loss_sum / train_set.len() as f64;

        let val_report = if val_set.is_empty() {
            None
        } else {
            Some(compute_metrics(&evaluate(&model, &val_set, t.batch_size, t.eval_tta)?, &metric_classes)?)
        };
        let val_miou = val_report.as_ref().map_or(0.0, |r| r.miou);
        let entry = EpochLog { epoch: epoch + 1, train_loss, val_miou, lr, seconds: started.elapsed().as_secs_f64() };
        write_line(&mut log, &log_file, &entry)?;

        let ckpt = snapshot(epoch + 1, opt.steps(), val_report.as_ref().map(|r| r.miou));
        ckpt.save(out)?;
        if val_miou > report.best_val_miou {
            report.best_val_miou = val_miou;
            report.best_epoch = Some(epoch + 1);
            ckpt.save(&best_path(out))?;
        }
        on_epoch(&entry);
        report.epochs.push(entry);
        report.final_report = val_report;
    }
    Ok(report)
}
