//! Dataset splitting, mini-batch Adam training, checkpointing and test-set
//! evaluation.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{combined_loss, LossConfig};
use crate::metrics::{aggregate, pair_report, MetricReport};
use crate::model::{load_checkpoint, save_checkpoint, FeatureMap, Gradients, NetConfig, Network, OutputMode};
use crate::raster::{resize_bilinear, SketchRaster};
use crate::synth::TrainingPair;

/// Train fraction that yields a 632/169 split of 801 pairs.
pub const COMPAT_SPLIT_RATIO: f64 = 632.0 / 801.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub split_ratio: f64,
    /// Use [`COMPAT_SPLIT_RATIO`] instead of `split_ratio`.
    pub compat_split: bool,
    /// Drives the split and the per-epoch shuffles.
    pub seed: u64,
    pub init_seed: u64,
    /// Save a resumable checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    /// Evaluate on the test pairs every this many epochs (0 = never).
    pub eval_every: usize,
    pub loss: LossConfig,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 8,
            learning_rate: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            split_ratio: 0.8,
            compat_split: false,
            seed: 0,
            init_seed: 0,
            checkpoint_every: 0,
            eval_every: 0,
            loss: LossConfig::default(),
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad(format!("split_ratio must be in (0, 1), got {}", self.split_ratio));
        }
        self.loss.validate()?;
        self.net.validate()
    }

    pub fn effective_split_ratio(&self) -> f64 {
        if self.compat_split {
            COMPAT_SPLIT_RATIO
        } else {
            self.split_ratio
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Train set size for `n` items: `round(ratio * n)`, kept within `[1, n - 1]`
/// when `n >= 2` so neither side is empty.
pub fn split_sizes(n: usize, ratio: f64) -> (usize, usize) {
    let mut train = (ratio * n as f64).round() as usize;
    if n >= 2 {
        train = train.clamp(1, n - 1);
    } else {
        train = train.min(n);
    }
    (train, n - train)
}

pub fn split_dataset(
    pairs: &[TrainingPair],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<TrainingPair>, Vec<TrainingPair>)> {
    if pairs.is_empty() {
        return Err(Error::arg("cannot split an empty dataset"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::arg(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (n_train, _) = split_sizes(pairs.len(), ratio);
    let pick = |idx: &[usize]| idx.iter().map(|&i| pairs[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        TrainConfig::default().adam()
    }
}

/// First and second moment estimates, one entry per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update at step `t` (1-based).
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    t: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != grads.len() || state.v.len() != grads.len() {
        return Err(Error::arg(format!(
            "adam: {} params, {} grads, {}/{} moments",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    if t == 0 {
        return Err(Error::arg("adam step index is 1-based"));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Training {
            step: t,
            message: format!("non-finite gradient at parameter {i}"),
        });
    }
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

fn flatten_params(net: &Network) -> Vec<f64> {
    let mut out = Vec::with_capacity(net.param_count());
    for n in net.nodes() {
        out.extend_from_slice(&n.layer.weights);
    }
    for n in net.nodes() {
        out.extend_from_slice(&n.layer.bias);
    }
    out
}

fn unflatten_params(net: &mut Network, flat: &[f64]) {
    let mut it = flat.iter().copied();
    for n in net.nodes_mut() {
        n.layer.weights.iter_mut().for_each(|w| *w = it.next().unwrap());
    }
    for n in net.nodes_mut() {
        n.layer.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
    }
}

/// A pair converted to network tensors.
#[derive(Clone, Debug)]
pub struct PreparedPair {
    pub id: String,
    pub input: FeatureMap,
    pub target: FeatureMap,
    pub target_raster: SketchRaster,
}

/// Checks sizes and builds network inputs and targets. Rough sketches must
/// match the input size. Clean sketches may already be at the output size;
/// in double mode an input-sized clean sketch is upsampled bilinearly.
pub fn prepare_pairs(pairs: &[TrainingPair], net: &NetConfig) -> Result<Vec<PreparedPair>> {
    let (n_in, n_out) = (net.input_size, net.output_size());
    pairs
        .iter()
        .map(|p| {
            if p.rough.shape() != (n_in, n_in) {
                return Err(Error::arg(format!(
                    "pair {}: rough sketch is {:?}, network expects {n_in}x{n_in}",
                    p.id,
                    p.rough.shape()
                )));
            }
            let clean = match p.clean.shape() {
                s if s == (n_out, n_out) => p.clean.clone(),
                s if s == (n_in, n_in) && net.output_mode == OutputMode::Double => {
                    resize_bilinear(&p.clean, n_out, n_out)?
                }
                s => {
                    return Err(Error::arg(format!(
                        "pair {}: clean sketch is {s:?}, expected {n_out}x{n_out}",
                        p.id
                    )))
                }
            };
            Ok(PreparedPair {
                id: p.id.clone(),
                input: FeatureMap::from_raster_ink(&p.rough),
                target: FeatureMap::from_raster_ink(&clean),
                target_raster: clean,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean per-image loss over the epoch's steps.
    pub train_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<MetricReport>,
    /// Wall-clock duration; kept out of the history file so reruns compare
    /// byte for byte.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn to_jsonl(&self) -> String {
        self.epochs.iter().map(record_line).collect()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let epochs = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
            .collect::<Result<_>>()?;
        Ok(Self { epochs })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

fn record_line(r: &EpochRecord) -> String {
    serde_json::to_string(r).expect("epoch record serializes") + "\n"
}

const STATE_MAGIC: &[u8; 4] = b"SCT1";

/// Mutable training state: network, optimizer moments and counters.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    net: Network,
    adam: AdamState,
    epoch: usize,
    step: u64,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = Network::build(&cfg.net, cfg.init_seed)?;
        let n = net.param_count();
        Ok(Self {
            cfg: cfg.clone(),
            net,
            adam: AdamState::zeros(n),
            epoch: 0,
            step: 0,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let s = self.cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
        order
    }

    /// Mean loss of a batch and the mean gradient. Per-image passes run in
    /// parallel; gradients are summed in batch order.
    fn batch_gradient(&self, batch: &[&PreparedPair]) -> Result<(f64, Gradients)> {
        let per_image: Vec<Result<(f64, Gradients)>> = batch
            .par_iter()
            .map(|p| {
                let trace = self.net.forward_trace(&p.input)?;
                let loss = combined_loss(trace.output(), &p.target, &self.cfg.loss)?;
                let (g, _) = self.net.backward(&trace, &loss.grad)?;
                Ok((loss.value, g))
            })
            .collect();
        let mut total = Gradients::zeros_like(&self.net);
        let mut loss = 0.0;
        for r in per_image {
            let (l, g) = r?;
            loss += l;
            total.add_assign(&g);
        }
        let scale = 1.0 / batch.len() as f64;
        total.scale(scale);
        Ok((loss * scale, total))
    }

    fn apply(&mut self, grads: &Gradients) -> Result<()> {
        self.step += 1;
        let mut flat = flatten_params(&self.net);
        let g: Vec<f64> = grads
            .weights
            .iter()
            .flatten()
            .chain(grads.bias.iter().flatten())
            .copied()
            .collect();
        adam_step(&mut flat, &g, &mut self.adam, self.step, &self.cfg.adam())?;
        unflatten_params(&mut self.net, &flat);
        self.net.quantize_params();
        Ok(())
    }

    /// Runs one epoch over `train`, evaluating on `test` when the cadence
    /// asks for it.
    pub fn run_epoch(&mut self, train: &[PreparedPair], test: &[PreparedPair]) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::arg("training set is empty"));
        }
        let start = Instant::now();
        let order = self.epoch_order(train.len(), self.epoch);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&PreparedPair> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = self.batch_gradient(&batch).map_err(|e| match e {
                Error::Training { .. } => e,
                other => Error::Training {
                    step: self.step + 1,
                    message: other.to_string(),
                },
            })?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    step: self.step + 1,
                    message: "non-finite loss".into(),
                });
            }
            loss_sum += loss * batch.len() as f64;
            self.apply(&grads)?;
        }
        self.epoch += 1;
        let test_report = if self.cfg.eval_every > 0
            && self.epoch.is_multiple_of(self.cfg.eval_every)
            && !test.is_empty()
        {
            Some(evaluate_prepared(&self.net, test, &self.cfg.loss)?.0)
        } else {
            None
        };
        let record = EpochRecord {
            epoch: self.epoch,
            train_loss: loss_sum / train.len() as f64,
            test: test_report,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} loss {:.6} ({:.2}s)",
            record.epoch,
            record.train_loss,
            record.seconds
        );
        Ok(record)
    }

    /// Writes `checkpoint.scn` and `trainer.state` into `dir`.
    pub fn save_state(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_checkpoint(&self.net, dir.join(CHECKPOINT_FILE))?;
        let mut out = Vec::with_capacity(24 + 16 * self.adam.m.len());
        out.extend_from_slice(STATE_MAGIC);
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.adam.m.len() as u64).to_le_bytes());
        for v in self.adam.m.iter().chain(&self.adam.v) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let path = dir.join(STATE_FILE);
        fs::write(&path, out).map_err(|e| Error::io(path, e))
    }

    /// Restores a trainer saved by [`Trainer::save_state`].
    pub fn load_state(cfg: &TrainConfig, dir: impl AsRef<Path>) -> Result<Self> {
        cfg.validate()?;
        let dir = dir.as_ref();
        let net = load_checkpoint(dir.join(CHECKPOINT_FILE))?;
        if net.config() != &cfg.net {
            return Err(Error::Config(
                "checkpoint network does not match the configured network".into(),
            ));
        }
        let path = dir.join(STATE_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let bad = || Error::Format(format!("{}: malformed trainer state", path.display()));
        if bytes.len() < 28 || &bytes[..4] != STATE_MAGIC {
            return Err(bad());
        }
        let word = |i: usize| u64::from_le_bytes(bytes[4 + 8 * i..12 + 8 * i].try_into().unwrap());
        let (epoch, step, n) = (word(0) as usize, word(1), word(2) as usize);
        if n != net.param_count() || bytes.len() != 28 + 16 * n {
            return Err(bad());
        }
        let vals: Vec<f64> = bytes[28..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            net,
            adam: AdamState {
                m: vals[..n].to_vec(),
                v: vals[n..].to_vec(),
            },
            epoch,
            step,
        })
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.scn";
pub const STATE_FILE: &str = "trainer.state";
pub const HISTORY_FILE: &str = "history.jsonl";

/// Where a run keeps its resumable state and history.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    /// Continue from the state in `out_dir` if present.
    pub resume: bool,
}

/// Trains a fresh network on `pairs` for `cfg.epochs` epochs.
pub fn train(pairs: &[TrainingPair], cfg: &TrainConfig) -> Result<(Network, TrainHistory)> {
    train_run(pairs, &[], cfg, &RunOptions::default())
}

/// Full training run with optional test-set evaluation, periodic resumable
/// checkpoints and a JSON-lines history in `opts.out_dir`.
pub fn train_run(
    pairs: &[TrainingPair],
    test: &[TrainingPair],
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<(Network, TrainHistory)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    let train_set = prepare_pairs(pairs, &cfg.net)?;
    let test_set = prepare_pairs(test, &cfg.net)?;

    let mut history = TrainHistory::default();
    let mut trainer = match &opts.out_dir {
        Some(dir) if opts.resume && dir.join(STATE_FILE).exists() => {
            let t = Trainer::load_state(cfg, dir)?;
            let hist_path = dir.join(HISTORY_FILE);
            if hist_path.exists() {
                history = TrainHistory::read(&hist_path)?;
                history.epochs.truncate(t.epochs_done());
            }
            log::info!("resuming after epoch {}", t.epochs_done());
            t
        }
        _ => Trainer::new(cfg)?,
    };
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        history.write(dir.join(HISTORY_FILE))?;
    }

    while trainer.epochs_done() < cfg.epochs {
        let record = trainer.run_epoch(&train_set, &test_set)?;
        if let Some(dir) = &opts.out_dir {
            let path = dir.join(HISTORY_FILE);
            let mut f = OpenOptions::new()
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            f.write_all(record_line(&record).as_bytes())
                .map_err(|e| Error::io(&path, e))?;
            let due = cfg.checkpoint_every > 0 && record.epoch % cfg.checkpoint_every == 0;
            if due || record.epoch == cfg.epochs {
                trainer.save_state(dir)?;
            }
        }
        history.epochs.push(record);
    }
    Ok((trainer.into_network(), history))
}

/// Cleans one rough raster with `net`.
pub fn clean_raster(net: &Network, rough: &SketchRaster) -> Result<SketchRaster> {
    let n = net.config().input_size;
    let input = if rough.shape() == (n, n) {
        rough.clone()
    } else {
        resize_bilinear(rough, n, n)?
    };
    net.forward(&FeatureMap::from_raster_ink(&input))?.to_raster_ink()
}

fn evaluate_prepared(
    net: &Network,
    test: &[PreparedPair],
    loss_cfg: &LossConfig,
) -> Result<(MetricReport, Vec<(String, MetricReport)>)> {
    if test.is_empty() {
        return Err(Error::arg("test set is empty"));
    }
    let rows = test
        .par_iter()
        .map(|p| {
            let out = net.forward(&p.input)?.to_raster_ink()?;
            Ok((p.id.clone(), pair_report(&out, &p.target_raster, loss_cfg)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<MetricReport> = rows.iter().map(|(_, r)| r.clone()).collect();
    Ok((aggregate(&reports)?, rows))
}

/// Aggregate metrics of `net` on `test`, plus the per-pair rows.
pub fn evaluate_detailed(
    net: &Network,
    test: &[TrainingPair],
    loss_cfg: &LossConfig,
) -> Result<(MetricReport, Vec<(String, MetricReport)>)> {
    if test.is_empty() {
        return Err(Error::arg("test set is empty"));
    }
    evaluate_prepared(net, &prepare_pairs(test, net.config())?, loss_cfg)
}

pub fn evaluate(net: &Network, test: &[TrainingPair], loss_cfg: &LossConfig) -> Result<MetricReport> {
    Ok(evaluate_detailed(net, test, loss_cfg)?.0)
}
