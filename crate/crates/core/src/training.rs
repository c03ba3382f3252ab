//! Optimization loop, evaluation and early stopping.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Interaction};
use crate::error::{Error, Result};
use crate::metrics::{self, RelaImprMode};
use crate::model::{ForwardOptions, Model, ModelConfig, NoiseMode};
use crate::tensor::{Adam, AdamConfig, Graph, Optimizer, ParamStore, Sgd};

/// Accepted range for the auxiliary loss weights.
pub const LOSS_WEIGHT_RANGE: (f64, f64) = (1e-4, 0.3);

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "best.ckpt";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    /// Weight of the decoupling loss.
    pub w1: f64,
    /// Weight of the synergy loss.
    pub w2: f64,
    /// Upper bound on epochs.
    pub max_epochs: usize,
    /// Epochs without a test-AUC improvement before stopping.
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Reference AUC for the relative-improvement column of each report.
    pub base_auc: Option<f64>,
    pub rela_impr_mode: RelaImprMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            batch_size: 1024,
            w1: 0.01,
            w2: 0.01,
            max_epochs: 100,
            early_stop_patience: 10,
            seed: 0,
            base_auc: None,
            rela_impr_mode: RelaImprMode::PlainRelative,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr = {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be positive"));
        }
        let (lo, hi) = LOSS_WEIGHT_RANGE;
        for (name, w) in [("w1", self.w1), ("w2", self.w2)] {
            if !(lo..=hi).contains(&w) {
                return Err(Error::config(format!("{name} = {w} outside [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// One line of the per-epoch metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub epoch: usize,
    /// Test-split AUC.
    pub auc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rela_impr: Option<f64>,
    pub l_y: f64,
    pub l_con: f64,
    pub l_syn: f64,
    pub seconds: f64,
}

pub struct TrainOutcome {
    /// The model holding the best-AUC parameters.
    pub model: Model,
    pub history: Vec<MetricReport>,
    pub best_epoch: usize,
    pub best_auc: f64,
}

/// Where [`train`] writes its metrics stream and best checkpoint.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub dir: Option<PathBuf>,
}

/// Number of evaluation workers: available cores, bounded by `DMSN_THREADS`.
pub fn eval_workers() -> usize {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("DMSN_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n > 0 => n.min(cores).max(1),
        _ => cores,
    }
}

/// Evaluation noise seed derived from the training seed.
fn eval_seed(seed: u64) -> u64 {
    seed ^ 0x5EED_E7A1
}

/// Scores `records` with per-sample noise, returning scores in record order.
/// Work is sharded over `workers` threads; each score depends only on its
/// record and the seed, so the result does not depend on the worker count.
pub fn score(model: &Model, data: &Dataset, records: &[Interaction], batch_size: usize, seed: u64, workers: usize) -> Result<Vec<f64>> {
    let batches = data.batches(records, batch_size, None)?;
    let workers = workers.clamp(1, batches.len().max(1));
    let mut scores = vec![f64::NAN; records.len()];
    let chunk = batches.len().div_ceil(workers);
    let results: Vec<Result<Vec<(u64, f64)>>> = std::thread::scope(|s| {
        let handles: Vec<_> = batches
            .chunks(chunk.max(1))
            .map(|part| {
                s.spawn(move || -> Result<Vec<(u64, f64)>> {
                    let mut out = Vec::new();
                    let mut unused = ChaCha8Rng::seed_from_u64(0);
                    for b in part {
                        let noise = model.noise(b, NoiseMode::PerSample(seed), &mut unused)?;
                        let probs = model.predict(b, &data.table, noise.as_ref())?;
                        out.extend(b.sample_ids.iter().copied().zip(probs));
                    }
                    Ok(out)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Numeric("evaluation worker panicked".into()))))
            .collect()
    });
    for r in results {
        for (id, p) in r? {
            scores[id as usize] = p;
        }
    }
    if let Some(p) = scores.iter().find(|p| !p.is_finite()) {
        return Err(Error::Numeric(format!("non-finite score {p}")));
    }
    Ok(scores)
}

/// Test AUC of `model` on `records`.
pub fn evaluate(model: &Model, data: &Dataset, records: &[Interaction], batch_size: usize, seed: u64) -> Result<f64> {
    let scores = score(model, data, records, batch_size, eval_seed(seed), eval_workers())?;
    let labels: Vec<f64> = records.iter().map(|r| f64::from(r.y)).collect();
    metrics::auc(&scores, &labels)
}

fn optimizer(config: &TrainConfig) -> Box<dyn Optimizer> {
    match config.optimizer {
        OptimizerKind::Adam => Box::new(Adam::new(AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        })),
        OptimizerKind::Sgd => Box::new(Sgd { lr: config.lr }),
    }
}

/// Loss components of one optimization step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub l_y: f64,
    pub l_con: f64,
    pub l_syn: f64,
}

/// Forward, backward and one optimizer update on `batch`.
pub fn train_step(
    model: &mut Model,
    opt: &mut dyn Optimizer,
    batch: &crate::model::Batch,
    data: &Dataset,
    config: &TrainConfig,
    noise_rng: &mut ChaCha8Rng,
) -> Result<StepLosses> {
    let noise = model.noise(batch, NoiseMode::Stream, noise_rng)?;
    let mut g = Graph::new();
    let out = model.forward(&mut g, batch, &data.table, noise.as_ref(), ForwardOptions::default())?;
    let terms = model.loss(&mut g, &out, &batch.labels, config.w1, config.w2)?;
    let value = |v: Option<crate::tensor::Var>| v.map_or(0.0, |v| g.value(v).data()[0]);
    let losses = StepLosses {
        total: g.value(terms.total).data()[0],
        l_y: g.value(terms.l_y).data()[0],
        l_con: value(terms.l_con),
        l_syn: value(terms.l_syn),
    };
    if !losses.total.is_finite() {
        return Err(Error::Numeric(format!("loss became {}", losses.total)));
    }
    let grads = g.backward(terms.total)?;
    model.store.zero_grad();
    model.store.accumulate(&g, &grads)?;
    model.store.fill_missing_grads();
    opt.step(&mut model.store)?;
    Ok(losses)
}

/// Trains until the test AUC stops improving for `early_stop_patience`
/// epochs (or `max_epochs` is reached) and returns the best-AUC model.
pub fn train(config: &TrainConfig, data: &Dataset, outputs: &TrainOutputs) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.len() < config.batch_size {
        return Err(Error::config(format!(
            "{} training records do not fill one batch of {}",
            data.train.len(),
            config.batch_size
        )));
    }
    let mut model = Model::new(config.model.clone(), data.vocab.clone(), config.seed)?;
    let mut opt = optimizer(config);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let mut metrics_out = match &outputs.dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(std::fs::File::create(dir.join(METRICS_FILE))?))
        }
        None => None,
    };

    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut stale = 0usize;
    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        let batches = data.batches(&data.train, config.batch_size, Some(&mut shuffle_rng))?;
        let (mut sums, mut count) = (StepLosses::default(), 0.0);
        for batch in &batches {
            let l = train_step(&mut model, opt.as_mut(), batch, data, config, &mut noise_rng)?;
            let w = batch.len() as f64;
            sums.l_y += w * l.l_y;
            sums.l_con += w * l.l_con;
            sums.l_syn += w * l.l_syn;
            count += w;
        }
        let auc = evaluate(&model, data, &data.test, config.batch_size, config.seed)?;
        let rela_impr = config
            .base_auc
            .map(|b| metrics::rela_impr(auc, b, config.rela_impr_mode))
            .transpose()?;
        let report = MetricReport {
            epoch,
            auc,
            rela_impr,
            l_y: sums.l_y / count,
            l_con: sums.l_con / count,
            l_syn: sums.l_syn / count,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: auc {:.4} l_y {:.4} l_con {:.4} l_syn {:.4} ({:.1}s)",
            report.auc,
            report.l_y,
            report.l_con,
            report.l_syn,
            report.seconds
        );
        if let Some(w) = metrics_out.as_mut() {
            serde_json::to_writer(&mut *w, &report)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        history.push(report);

        if best.as_ref().is_none_or(|(_, b, _)| auc > *b) {
            best = Some((epoch, auc, model.store.clone()));
            stale = 0;
            if let Some(dir) = &outputs.dir {
                model.store.save(&dir.join(CHECKPOINT_FILE))?;
            }
        } else {
            stale += 1;
        }
        if stale >= config.early_stop_patience {
            break;
        }
    }
    let (best_epoch, best_auc, store) = best.expect("at least one epoch ran");
    model.store = store;
    model.store.zero_grad();
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_auc,
    })
}

/// Loads a checkpoint written by [`train`] into a model of `config`.
pub fn load_model(config: &ModelConfig, data: &Dataset, path: &Path) -> Result<Model> {
    let store = ParamStore::load(path)?;
    Model::with_store(config.clone(), data.vocab.clone(), store)
}
