//! Training loop: Adam with step-decay learning rate, seeded data order,
//! CSV logging, periodic checkpoints and resumption.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::datagen::{derive_seed, load_pair, sample_patch, scan_dataset, DatasetManifest, PairEntry, PairedSample, Split};
use crate::enhance::enhance_image;
use crate::error::{Error, Result};
use crate::image::{GradientMap, Image};
use crate::losses::{loss_total_with_grads, FinalLossForm, LossBreakdown, LossWeights};
use crate::metrics::{aggregate, psnr, ssim, MetricReport, MetricRow};
use crate::model::{build_model, Model, ModelConfig};
use crate::nn::{Exec, Graph, Tensor};
use crate::optim::{clip_global_norm, AdamState};

/// Flat training configuration; every key can be set from a TOML file or a
/// `key=value` override.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub batch: usize,
    pub patch: usize,
    #[serde(flatten)]
    pub weights: LossWeights,
    pub final_loss: FinalLossForm,
    pub grad_clip: f64,
    pub flip: bool,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// LOL-style root (`low/`, `high/`) of real pairs.
    pub train_root: Option<PathBuf>,
    /// LOL-style root of synthetic pairs, mixed 1:1 with the real ones.
    pub synth_root: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    #[serde(flatten)]
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr0: 1e-3,
            decay_factor: 0.1,
            decay_every: 20,
            batch: 8,
            patch: 96,
            weights: LossWeights::default(),
            final_loss: FinalLossForm::Mean,
            grad_clip: 5.0,
            flip: true,
            seed: 0,
            checkpoint_every: 10,
            train_root: None,
            synth_root: None,
            out_dir: PathBuf::from("runs/ddnet"),
            resume: None,
            model: ModelConfig::default(),
        }
    }
}

const OPTIONAL_KEYS: [&str; 4] = ["train_root", "synth_root", "resume", "out_dir"];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::arg("epochs must be at least 1"));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::arg("lr0 must be positive"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::arg("decay_factor must be in (0, 1]"));
        }
        if self.decay_every == 0 || self.batch == 0 || self.checkpoint_every == 0 {
            return Err(Error::arg("decay_every, batch and checkpoint_every must be at least 1"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::arg("grad_clip must be positive"));
        }
        self.weights.validate()?;
        self.model.validate()?;
        let d = self.model.size_divisor();
        if self.patch == 0 || self.patch % d != 0 {
            return Err(Error::arg(format!("patch {} must be a positive multiple of {d}", self.patch)));
        }
        Ok(())
    }

    /// Loss weights with the terms of ablated branches forced to zero.
    pub fn effective_weights(&self) -> LossWeights {
        LossWeights {
            w1: if self.model.use_gem { self.weights.w1 } else { 0.0 },
            w2: if self.model.use_cem { self.weights.w2 } else { 0.0 },
            w3: self.weights.w3,
        }
    }

    /// Reads a flat TOML file and applies `key=value` overrides on top.
    pub fn from_sources(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::arg(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::arg(format!("override `{item}` is not key=value")))?;
            let key = key.trim();
            let parsed = format!("v = {}", value.trim())
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(value.trim().to_string()));
            table.insert(key.to_string(), parsed);
        }
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let known = toml::Table::try_from(TrainConfig::default()).expect("defaults serialize");
        if let Some(bad) = table.keys().find(|k| !known.contains_key(*k) && !OPTIONAL_KEYS.contains(&k.as_str())) {
            return Err(Error::arg(format!("unknown training option `{bad}`")));
        }
        let cfg: TrainConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::arg(format!("invalid training config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Step-decay learning rate `lr0 · decay^⌊epoch / decay_every⌋`, rounded to
/// 15 significant digits so decade schedules land on their decimal values.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::arg(format!("epoch {epoch} outside 0..{}", cfg.epochs)));
    }
    let k = (epoch / cfg.decay_every) as i32;
    let raw = cfg.lr0 * cfg.decay_factor.powi(k);
    Ok(format!("{raw:.14e}").parse().expect("formatted float parses"))
}

/// Model, optimizer moments and progress counters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        Self {
            adam: AdamState::new(model.params()),
            model,
            epoch: 0,
            step: 0,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        let adam = ckpt.optimizer.unwrap_or_else(|| AdamState::new(ckpt.model.params()));
        Self {
            model: ckpt.model,
            adam,
            epoch: ckpt.epoch,
            step: ckpt.step,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            step: self.step,
            epoch: self.epoch,
            optimizer: Some(self.adam.clone()),
        }
    }
}

fn check_finite(value: f64, component: &'static str, step: u64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { component, step })
    }
}

/// One optimization step on a batch: forward, joint loss, backward, global
/// norm clipping and an Adam update at the current epoch's learning rate.
/// Returns the batch-mean loss breakdown.
pub fn train_step(state: &mut TrainState, batch: &[PairedSample], cfg: &TrainConfig) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::arg("training batch is empty"));
    }
    let lr = lr_schedule(state.epoch.min(cfg.epochs - 1), cfg)?;
    let weights = cfg.effective_weights();
    let inv_b = 1.0 / batch.len() as f32;
    let mut grads = state.model.params().zeros_like();
    let (mut lap, mut coarse, mut final_) = (0.0, 0.0, 0.0);

    for sample in batch {
        let mut graph = Graph::new(state.model.params());
        let out = state.model.forward_graph(&mut graph, &sample.low, &sample.grad_in)?;
        let (h, w) = (sample.height(), sample.width());
        let image = |g: &Graph, id| Image::from_clamped(h, w, 3, g.tensor(id).data.clone());
        let forward = crate::model::ForwardOutput {
            final_image: image(&graph, &out.final_image)?,
            coarse: out.coarse.as_ref().map(|id| image(&graph, id)).transpose()?,
            grad_pred: out
                .grad_pred
                .as_ref()
                .map(|id| GradientMap::new(h, w, graph.tensor(id).data.clone()))
                .transpose()?,
        };
        let (loss, out_grads) = loss_total_with_grads(&forward, sample, &weights, cfg.final_loss)?;
        check_finite(loss.lap, "lap", state.step)?;
        check_finite(loss.coarse, "coarse", state.step)?;
        check_finite(loss.final_, "final", state.step)?;
        lap += loss.lap;
        coarse += loss.coarse;
        final_ += loss.final_;

        let seed = |data: Vec<f32>, c: usize| Tensor::from_vec(c, h, w, data.into_iter().map(|v| v * inv_b).collect());
        let mut seeds = vec![(out.final_image, seed(out_grads.final_image, 3))];
        if let (Some(id), Some(g)) = (out.coarse, out_grads.coarse) {
            seeds.push((id, seed(g, 3)));
        }
        if let (Some(id), Some(g)) = (out.grad_pred, out_grads.grad_pred) {
            seeds.push((id, seed(g, 1)));
        }
        graph.backward(seeds, &mut grads);
    }

    let norm = clip_global_norm(&mut grads, cfg.grad_clip as f32);
    check_finite(norm as f64, "gradient", state.step)?;
    state.adam.step(state.model.params_mut(), &grads, lr as f32);
    state.step += 1;
    if !state.model.params().all_finite() {
        return Err(Error::NonFinite {
            component: "parameter",
            step: state.step,
        });
    }
    let n = batch.len() as f64;
    Ok(LossBreakdown::combine(lap / n, coarse / n, final_ / n, &weights))
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub lap: f64,
    pub coarse: f64,
    #[serde(rename = "final")]
    pub final_: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub steps: u64,
    pub epochs: usize,
    pub last: Option<StepRecord>,
}

#[derive(Clone, Copy)]
enum Source {
    Real,
    Synth,
}

/// The epoch's sample order: seeded shuffle of the real pairs, interleaved
/// 1:1 with a seeded (cycled) selection of synthetic pairs when both exist.
fn epoch_order(real: usize, synth: usize, seed: u64, epoch: usize) -> Vec<(Source, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch as u64]));
    let mut shuffled = |n: usize| {
        let mut v: Vec<usize> = (0..n).collect();
        v.shuffle(&mut rng);
        v
    };
    let r = shuffled(real);
    let s = shuffled(synth);
    match (real, synth) {
        (0, _) => s.into_iter().map(|i| (Source::Synth, i)).collect(),
        (_, 0) => r.into_iter().map(|i| (Source::Real, i)).collect(),
        _ => r
            .into_iter()
            .zip(s.into_iter().cycle())
            .flat_map(|(a, b)| [(Source::Real, a), (Source::Synth, b)])
            .collect(),
    }
}

/// Number of optimizer steps per epoch for the configured data.
pub fn steps_per_epoch(samples_per_epoch: usize, batch: usize) -> usize {
    samples_per_epoch.div_ceil(batch)
}

struct Data {
    real: Vec<PairEntry>,
    synth: Vec<PairEntry>,
}

impl Data {
    fn load(cfg: &TrainConfig) -> Result<Self> {
        let scan = |root: &Option<PathBuf>| -> Result<Vec<PairEntry>> {
            match root {
                Some(r) => Ok(scan_dataset(r, Split::Train)?.pairs),
                None => Ok(Vec::new()),
            }
        };
        let data = Self {
            real: scan(&cfg.train_root)?,
            synth: scan(&cfg.synth_root)?,
        };
        if data.real.is_empty() && data.synth.is_empty() {
            return Err(Error::Dataset("no training data: set train_root and/or synth_root".into()));
        }
        Ok(data)
    }

    fn entry(&self, source: Source, index: usize) -> &PairEntry {
        match source {
            Source::Real => &self.real[index],
            Source::Synth => &self.synth[index],
        }
    }
}

fn prepare_sample(entry: &PairEntry, cfg: &TrainConfig, epoch: usize, position: usize) -> Result<PairedSample> {
    let full = load_pair(entry)?;
    let patch = sample_patch(&full, cfg.patch, derive_seed(cfg.seed, &[epoch as u64, position as u64, 1]))?;
    let flip = cfg.flip && derive_seed(cfg.seed, &[epoch as u64, position as u64, 2]) & 1 == 1;
    Ok(if flip { patch.flip_horizontal() } else { patch })
}

fn open_log(path: &Path, append: bool) -> Result<csv::Writer<std::fs::File>> {
    let exists = append && path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(exists)
        .truncate(!exists)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(!exists).from_writer(file))
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(cfg, |_| true)
}

/// Runs training; `on_step` sees every log row and may return `false` to
/// stop early (the state at that point is checkpointed).
pub fn train_with_progress(cfg: &TrainConfig, mut on_step: impl FnMut(&StepRecord) -> bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = Data::load(cfg)?;
    let mut state = match &cfg.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.model.config() != &cfg.model {
                return Err(Error::checkpoint(path, "model configuration differs from the training config"));
            }
            TrainState::from_checkpoint(ckpt)
        }
        None => TrainState::new(build_model(&cfg.model, cfg.seed)?),
    };
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let log_path = cfg.out_dir.join("train_log.csv");
    let mut log = open_log(&log_path, cfg.resume.is_some())?;
    let log_err = |e: csv::Error| crate::datagen::csv_error(&log_path, e);

    let mut last = None;
    let mut stopped = false;
    'epochs: for epoch in state.epoch..cfg.epochs {
        let lr = lr_schedule(epoch, cfg)?;
        let order = epoch_order(data.real.len(), data.synth.len(), cfg.seed, epoch);
        for (chunk_index, chunk) in order.chunks(cfg.batch).enumerate() {
            let batch = chunk
                .iter()
                .enumerate()
                .map(|(i, &(src, idx))| prepare_sample(data.entry(src, idx), cfg, epoch, chunk_index * cfg.batch + i))
                .collect::<Result<Vec<_>>>()?;
            let loss = train_step(&mut state, &batch, cfg)?;
            let record = StepRecord {
                step: state.step,
                epoch,
                lr,
                lap: loss.lap,
                coarse: loss.coarse,
                final_: loss.final_,
                total: loss.total,
            };
            log.serialize(record).map_err(log_err)?;
            last = Some(record);
            if !on_step(&record) {
                stopped = true;
                break 'epochs;
            }
        }
        state.epoch = epoch + 1;
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        if state.epoch % cfg.checkpoint_every == 0 && state.epoch < cfg.epochs {
            save_checkpoint(&state.to_checkpoint(), cfg.out_dir.join(format!("epoch_{:04}.ckpt", state.epoch)))?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let name = if stopped { "stopped.ckpt" } else { "final.ckpt" };
    let checkpoint = cfg.out_dir.join(name);
    save_checkpoint(&state.to_checkpoint(), &checkpoint)?;
    Ok(TrainOutcome {
        checkpoint,
        log: log_path,
        steps: state.step,
        epochs: state.epoch,
        last,
    })
}

/// Full-resolution PSNR/SSIM of the model's enhancement on every pair.
pub fn evaluate(model: &Model, manifest: &DatasetManifest) -> Result<MetricReport> {
    let mut rows = Vec::with_capacity(manifest.len());
    for entry in &manifest.pairs {
        let pair = load_pair(entry)?;
        let enhanced = enhance_image(model, &pair.low, None)?;
        rows.push(MetricRow {
            id: entry.id.clone(),
            psnr: psnr(&enhanced, &pair.normal)?,
            ssim: ssim(&enhanced, &pair.normal)?,
        });
    }
    aggregate(rows)
}
