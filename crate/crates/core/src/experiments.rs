//! Reproducible experiment drivers: the ablation table, the diffusion-depth
//! sweep and the finite-difference gradient audit.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SyntheticData, SyntheticSpec};
use crate::error::{Error, Result};
use crate::features::EmbeddingTable;
use crate::model::{Ablation, Batch, ForwardOptions, Model, ModelConfig, NoiseMode, SrcConfig, Vocab};
use crate::tensor::Graph;
use crate::training::{self, TrainConfig, TrainOutputs};

/// Model and optimizer settings sized for single-core benchmark runs.
pub fn bench_train_config() -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            d_id: 16,
            d_im: 512,
            d_te: 512,
            d_e: 32,
            hidden: 32,
            attention_hidden: 16,
            heads: 8,
            src: SrcConfig {
                steps: 12,
                ..SrcConfig::default()
            },
            ablation: Ablation::FULL,
        },
        lr: 2e-3,
        batch_size: 256,
        max_epochs: 6,
        early_stop_patience: 2,
        ..TrainConfig::default()
    }
}

/// AUCs of one configuration across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub aucs: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (zero for a single seed).
    pub std: f64,
    pub seconds: f64,
}

impl RunSummary {
    fn new(label: String, aucs: Vec<f64>, seconds: f64) -> Self {
        let n = aucs.len() as f64;
        let mean = aucs.iter().sum::<f64>() / n;
        let std = if aucs.len() > 1 {
            (aucs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        RunSummary {
            label,
            aucs,
            mean,
            std,
            seconds,
        }
    }
}

/// The four configurations of the ablation table, in display order.
pub fn ablation_rows() -> Vec<Ablation> {
    vec![
        Ablation::FULL,
        Ablation {
            no_fdaf: true,
            ..Ablation::FULL
        },
        Ablation {
            no_src: true,
            ..Ablation::FULL
        },
        Ablation::ALL,
    ]
}

/// Trains every configuration in `variants` on datasets generated with
/// each seed; data seed and model seed are both the run seed.
pub fn sweep(
    spec: &SyntheticSpec,
    seeds: &[u64],
    variants: &[(String, TrainConfig)],
) -> Result<Vec<RunSummary>> {
    if seeds.is_empty() {
        return Err(Error::config("at least one seed is required"));
    }
    let mut aucs = vec![Vec::new(); variants.len()];
    let mut seconds = vec![0.0; variants.len()];
    for &seed in seeds {
        let data = SyntheticData::generate(&SyntheticSpec { seed, ..spec.clone() })?.dataset();
        for (k, (label, cfg)) in variants.iter().enumerate() {
            let start = Instant::now();
            let cfg = TrainConfig { seed, ..cfg.clone() };
            let out = training::train(&cfg, &data, &TrainOutputs::default())?;
            let secs = start.elapsed().as_secs_f64();
            log::info!("{label} seed {seed}: auc {:.4} after {} epochs ({secs:.1}s)", out.best_auc, out.history.len());
            aucs[k].push(out.best_auc);
            seconds[k] += secs;
        }
    }
    Ok(variants
        .iter()
        .zip(aucs)
        .zip(seconds)
        .map(|(((label, _), a), s)| RunSummary::new(label.clone(), a, s))
        .collect())
}

/// The ablation table: full, no_fdaf, no_src, and all three removed.
pub fn run_ablation(spec: &SyntheticSpec, base: &TrainConfig, seeds: &[u64]) -> Result<Vec<RunSummary>> {
    let variants: Vec<(String, TrainConfig)> = ablation_rows()
        .into_iter()
        .map(|a| {
            let mut c = base.clone();
            c.model.ablation = a;
            (a.label(), c)
        })
        .collect();
    sweep(spec, seeds, &variants)
}

/// The full model at several diffusion depths.
pub fn run_depth_sweep(spec: &SyntheticSpec, base: &TrainConfig, seeds: &[u64], depths: &[usize]) -> Result<Vec<RunSummary>> {
    let variants: Vec<(String, TrainConfig)> = depths
        .iter()
        .map(|&t| {
            let mut c = base.clone();
            c.model.ablation = Ablation::FULL;
            c.model.src.steps = t;
            (format!("T={t}"), c)
        })
        .collect();
    sweep(spec, seeds, &variants)
}

/// Renders a summary table with AUC deltas against the first row.
pub fn format_table(rows: &[RunSummary]) -> String {
    let mut s = format!("{:<18} {:>8} {:>8} {:>9} {:>8}\n", "config", "auc", "std", "delta", "seconds");
    let base = rows.first().map_or(0.0, |r| r.mean);
    for r in rows {
        s.push_str(&format!(
            "{:<18} {:>8.4} {:>8.4} {:>+9.4} {:>8.1}\n",
            r.label,
            r.mean,
            r.std,
            r.mean - base,
            r.seconds
        ));
    }
    s
}

/// A small model, embedding table and batch for gradient audits.
pub struct Miniature {
    pub model: Model,
    pub table: EmbeddingTable,
    pub batch: Batch,
}

/// Builds the miniature setting: `T = 4`, `d_e = 16`, twelve items and a
/// four-sample batch, with every stage switched on.
pub fn miniature(seed: u64) -> Result<Miniature> {
    let config = ModelConfig {
        d_id: 4,
        d_im: 6,
        d_te: 5,
        d_e: 16,
        hidden: 8,
        attention_hidden: 4,
        heads: 2,
        src: SrcConfig {
            steps: 4,
            ..SrcConfig::default()
        },
        ablation: Ablation::FULL,
    };
    let vocab = Vocab {
        n_items: 12,
        profile: vec![3, 2],
    };
    let model = Model::new(config.clone(), vocab.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let mut table = EmbeddingTable::new(config.d_im, config.d_te);
    for item in 0..vocab.n_items {
        let im: Vec<f64> = (0..config.d_im).map(|_| rng.random_range(-1.0..1.0)).collect();
        let te: Vec<f64> = (0..config.d_te).map(|_| rng.random_range(-1.0..1.0)).collect();
        table.insert(item as u64, &im, &te)?;
    }
    let (b, n) = (4, 3);
    let batch = Batch {
        sample_ids: (0..b as u64).collect(),
        profile: (0..b).map(|_| vec![rng.random_range(0..3), rng.random_range(0..2)]).collect(),
        seq: (0..b * n).map(|_| rng.random_range(0..vocab.n_items)).collect(),
        seq_len: n,
        target: (0..b).map(|_| rng.random_range(0..vocab.n_items)).collect(),
        labels: (0..b).map(|i| (i % 2) as f64).collect(),
    };
    Ok(Miniature { model, table, batch })
}

/// Worst disagreement between analytic and central-difference gradients
/// for one parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckSettings {
    pub eps: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Denominator floor of the relative error, so entries whose gradient
    /// is numerically zero compare by absolute error instead.
    pub floor: f64,
    pub w1: f64,
    pub w2: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            eps: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            w1: 0.3,
            w2: 0.3,
        }
    }
}

/// Compares the analytic gradient of the total loss with central
/// differences for every entry of every parameter. Diffusion noise is
/// derived per sample, so every evaluation sees the same noise.
pub fn gradcheck(mini: &mut Miniature, settings: GradCheckSettings) -> Result<Vec<ParamCheck>> {
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let noise = mini.model.noise(&mini.batch, NoiseMode::PerSample(17), &mut unused)?;
    let loss_at = |model: &Model| -> Result<f64> {
        let mut g = Graph::new();
        let out = model.forward(&mut g, &mini.batch, &mini.table, noise.as_ref(), ForwardOptions::default())?;
        let t = model.loss(&mut g, &out, &mini.batch.labels, settings.w1, settings.w2)?;
        Ok(g.value(t.total).data()[0])
    };

    let mut g = Graph::new();
    let out = mini
        .model
        .forward(&mut g, &mini.batch, &mini.table, noise.as_ref(), ForwardOptions::default())?;
    let t = mini.model.loss(&mut g, &out, &mini.batch.labels, settings.w1, settings.w2)?;
    let grads = g.backward(t.total)?;
    mini.model.store.zero_grad();
    mini.model.store.accumulate(&g, &grads)?;
    mini.model.store.fill_missing_grads();

    let names: Vec<String> = mini.model.store.names().map(str::to_string).collect();
    let mut report = Vec::with_capacity(names.len());
    for name in names {
        let analytic = mini
            .model
            .store
            .get(&name)
            .and_then(|p| p.grad.clone())
            .ok_or_else(|| Error::contract(format!("no gradient for {name}")))?;
        let n = analytic.numel();
        let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
        for i in 0..n {
            let original = mini.model.store.value(&name)?.data()[i];
            let set = |model: &mut Model, x: f64| {
                model.store.get_mut(&name).expect("known parameter").value.data_mut()[i] = x;
            };
            set(&mut mini.model, original + settings.eps);
            let plus = loss_at(&mini.model)?;
            set(&mut mini.model, original - settings.eps);
            let minus = loss_at(&mini.model)?;
            set(&mut mini.model, original);
            let numeric = (plus - minus) / (2.0 * settings.eps);
            let a = analytic.data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(settings.floor);
            max_rel = max_rel.max(rel);
            max_abs = max_abs.max(abs);
        }
        report.push(ParamCheck {
            name,
            entries: n,
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            passed: max_rel <= settings.tolerance,
        });
    }
    Ok(report)
}
