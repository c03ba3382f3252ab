//! The full click-through-rate model and its ablations.
//!
//! Forward pass for a batch of equal-length behavior sequences:
//!
//! 1. ID embeddings of the sequence and target; profile embeddings of the user.
//! 2. ID expert (DIN) over the ID sequence.
//! 3. Target attention pooling of the image and text sequences.
//! 4. Experts, shared experts and gates; decoupling loss.
//! 5. Diffusion chain over the expert outputs, synergy feature, synergy loss.
//! 6. Target-gated auxiliary blocks, cross layer, attention onto the ID
//!    feature.
//! 7. Head on `[E_att, user, projected target]`.
//!
//! Ablations: without the extraction stage the image/text experts are single
//! linear maps and there is no shared path, gate or decoupling loss; without
//! the diffusion stage there is no synergy block or synergy loss; without
//! adaptive fusion the head reads the ID feature and the auxiliary blocks
//! side by side. With all three off, the image and text sequences are not
//! used at all and the model is the DIN backbone plus the head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{self, DiffusionNoise, FusionWeights, NegativeBranch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::experts::{self, ExpertDims};
use crate::features::{self, EmbeddingTable, EncoderProvider, Modality, PerModality};
use crate::fusion;
use crate::tensor::nn;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub const ITEM_EMBEDDING: &str = "embed.item";
pub const HEAD_TARGET_PROJECTION: &str = "head.target_projection";

pub fn profile_embedding(field: usize) -> String {
    format!("embed.profile.{field}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrcConfig {
    /// Diffusion steps.
    #[serde(rename = "T")]
    pub steps: usize,
    pub alpha_start: f64,
    pub alpha_end: f64,
    /// Initial value of every cross-modal weight `α_{m,n}`.
    pub weight_init: f64,
    /// When set, the synergy loss penalizes negatives with
    /// `max(0, cos − margin)` instead of the verbatim `max(0, −1 − cos)`.
    pub negative_margin: Option<f64>,
}

impl Default for SrcConfig {
    fn default() -> Self {
        SrcConfig {
            steps: diffusion::DEFAULT_STEPS,
            alpha_start: diffusion::ALPHA_START,
            alpha_end: diffusion::ALPHA_END,
            weight_init: diffusion::DEFAULT_WEIGHT_INIT,
            negative_margin: None,
        }
    }
}

impl SrcConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.alpha_start, self.alpha_end)
    }

    pub fn negative_branch(&self) -> NegativeBranch {
        match self.negative_margin {
            Some(m) => NegativeBranch::Margin(m),
            None => NegativeBranch::Verbatim,
        }
    }
}

/// Independent switches removing one stage each.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub no_mfe: bool,
    pub no_src: bool,
    pub no_fdaf: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        no_mfe: false,
        no_src: false,
        no_fdaf: false,
    };
    pub const ALL: Ablation = Ablation {
        no_mfe: true,
        no_src: true,
        no_fdaf: true,
    };

    /// Parses `none`, `no_mfe`, `no_src`, `no_fdaf` or `all`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut a = Ablation::default();
        match s {
            "none" => {}
            "no_mfe" => a.no_mfe = true,
            "no_src" => a.no_src = true,
            "no_fdaf" => a.no_fdaf = true,
            "all" => a = Ablation::ALL,
            other => return Err(Error::config(format!("unknown ablation {other}"))),
        }
        Ok(a)
    }

    /// Whether the image and text sequences feed anything.
    pub fn uses_content(&self) -> bool {
        !(self.no_mfe && self.no_src && self.no_fdaf)
    }

    pub fn label(&self) -> String {
        if !self.uses_content() {
            return "no_mfe_src_fdaf".into();
        }
        let parts: Vec<&str> = [
            (self.no_mfe, "no_mfe"),
            (self.no_src, "no_src"),
            (self.no_fdaf, "no_fdaf"),
        ]
        .into_iter()
        .filter_map(|(on, name)| on.then_some(name))
        .collect();
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_id: usize,
    pub d_im: usize,
    pub d_te: usize,
    pub d_e: usize,
    /// Hidden width of every expert, fusion and head perceptron.
    pub hidden: usize,
    /// Hidden width of the attention scoring units.
    pub attention_hidden: usize,
    pub heads: usize,
    pub src: SrcConfig,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_id: 16,
            d_im: 512,
            d_te: 512,
            d_e: 128,
            hidden: 128,
            attention_hidden: 64,
            heads: 8,
            src: SrcConfig::default(),
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_id", self.d_id),
            ("d_im", self.d_im),
            ("d_te", self.d_te),
            ("d_e", self.d_e),
            ("hidden", self.hidden),
            ("attention_hidden", self.attention_hidden),
            ("heads", self.heads),
            ("src.T", self.src.steps),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.d_e % self.heads != 0 {
            return Err(Error::config(format!(
                "d_e = {} is not divisible by {} heads",
                self.d_e, self.heads
            )));
        }
        if !self.src.weight_init.is_finite() {
            return Err(Error::config("src.weight_init must be finite"));
        }
        self.src.schedule()?;
        Ok(())
    }

    pub fn expert_dims(&self) -> ExpertDims {
        ExpertDims {
            d_id: self.d_id,
            d_im: self.d_im,
            d_te: self.d_te,
            d_e: self.d_e,
            hidden: self.hidden,
            attention_hidden: self.attention_hidden,
        }
    }

    /// Auxiliary blocks handed to the fusion stage, in order.
    pub fn aux_blocks(&self) -> Vec<&'static str> {
        let a = self.ablation;
        if !a.uses_content() {
            return Vec::new();
        }
        let mut blocks = vec!["im", "te"];
        if !a.no_mfe {
            blocks.push("sh");
        }
        if !a.no_src {
            blocks.push("syn");
        }
        blocks
    }
}

/// Sizes of the categorical inputs, fixed by the dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub n_items: usize,
    /// Cardinality of each user-profile field.
    pub profile: Vec<usize>,
}

/// A batch of samples whose behavior sequences share one length.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Stable identifiers; evaluation noise is derived from them.
    pub sample_ids: Vec<u64>,
    /// `[b][fields]` profile values.
    pub profile: Vec<Vec<usize>>,
    /// `b·seq_len` item slots, sample-major.
    pub seq: Vec<usize>,
    pub seq_len: usize,
    /// `b` target item slots.
    pub target: Vec<usize>,
    pub labels: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        let b = self.len();
        if b == 0 {
            return Err(Error::contract("empty batch"));
        }
        if self.seq_len == 0 {
            return Err(Error::EmptySequence("batch with zero-length sequences".into()));
        }
        if self.seq.len() != b * self.seq_len
            || self.labels.len() != b
            || self.profile.len() != b
            || self.sample_ids.len() != b
        {
            return Err(Error::dim(format!(
                "batch of {b}: {} sequence slots for length {}, {} labels, {} profiles, {} ids",
                self.seq.len(),
                self.seq_len,
                self.labels.len(),
                self.profile.len(),
                self.sample_ids.len()
            )));
        }
        if let Some(&s) = self.seq.iter().chain(&self.target).find(|&&s| s >= vocab.n_items) {
            return Err(Error::contract(format!("item slot {s} outside {} items", vocab.n_items)));
        }
        for p in &self.profile {
            if p.len() != vocab.profile.len() {
                return Err(Error::dim(format!(
                    "profile of {} fields, expected {}",
                    p.len(),
                    vocab.profile.len()
                )));
            }
            for (v, &card) in p.iter().zip(&vocab.profile) {
                if *v >= card {
                    return Err(Error::contract(format!("profile value {v} outside {card}")));
                }
            }
        }
        Ok(())
    }
}

/// How the diffusion noise of a forward pass is produced.
#[derive(Clone, Copy, Debug)]
pub enum NoiseMode {
    /// Fresh draws from the caller's stream (training).
    Stream,
    /// Derived from `(seed, sample id)` (evaluation).
    PerSample(u64),
    /// All zeros.
    Zero,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Substitutes zeros for this modality's input to the diffusion chain.
    pub missing: Option<Modality>,
}

/// Graph handles produced by one forward pass.
pub struct ForwardOutput {
    /// Click probabilities `[b, 1]`.
    pub probs: Var,
    /// Batch-mean decoupling loss, when the extraction stage is active.
    pub l_con: Option<Var>,
    /// Batch-mean synergy loss, when the diffusion stage is active.
    pub l_syn: Option<Var>,
    /// The primary ID feature `[b, d_e]`.
    pub e_id: Var,
    /// The head input after fusion.
    pub e_att: Var,
}

/// Scalar handles of the combined objective.
pub struct LossTerms {
    pub total: Var,
    pub l_y: Var,
    pub l_con: Option<Var>,
    pub l_syn: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    schedule: NoiseSchedule,
    /// Whether the head's target projection reads the image and text
    /// embeddings of the target besides its ID embedding.
    head_content: bool,
}

impl Model {
    /// Registers every parameter the configuration needs, drawing initial
    /// values from a stream seeded by `seed`.
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        let head_content = config.ablation.uses_content();
        Model::build(config, vocab, seed, head_content)
    }

    fn build(config: ModelConfig, vocab: Vocab, seed: u64, head_content: bool) -> Result<Self> {
        config.validate()?;
        if vocab.n_items == 0 {
            return Err(Error::config("no items"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_backbone(&mut store, &config, &vocab, head_content, &mut rng)?;
        let a = config.ablation;
        let dims = config.expert_dims();
        if a.uses_content() {
            experts::init_pooling(&mut store, &dims, &mut rng)?;
            if a.no_mfe {
                experts::init_projections(&mut store, &dims, &mut rng)?;
            } else {
                experts::init_experts(&mut store, &dims, &mut rng)?;
            }
        }
        if !a.no_src {
            diffusion::init_fusion_weights(&mut store, config.src.weight_init)?;
            diffusion::init_synergy(&mut store, config.d_e, config.hidden, target_width(&config), &mut rng)?;
        }
        let blocks = config.aux_blocks().len();
        if a.uses_content() && !a.no_fdaf {
            fusion::init_fusion(&mut store, config.d_id, config.d_e, blocks, &mut rng)?;
        }
        let head_in = head_input_width(&config, &vocab);
        fusion::init_head(&mut store, head_in, config.hidden, &mut rng)?;
        let schedule = config.src.schedule()?;
        Ok(Model {
            config,
            vocab,
            store,
            schedule,
            head_content,
        })
    }

    /// The DIN backbone feeding the prediction head of `config`, with no
    /// multi-modal stage. Its head reads the same inputs as the head of a
    /// `config` model, so both can share head parameters.
    pub fn backbone(config: &ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        let mut c = config.clone();
        c.ablation = Ablation::ALL;
        Model::build(c, vocab, seed, config.ablation.uses_content())
    }

    pub fn with_store(config: ModelConfig, vocab: Vocab, store: ParamStore) -> Result<Self> {
        let template = Model::new(config, vocab, 0)?;
        let expected: Vec<(&str, &[usize])> = template.store.iter().map(|(n, p)| (n, p.value.shape())).collect();
        let found: Vec<(&str, &[usize])> = store.iter().map(|(n, p)| (n, p.value.shape())).collect();
        if expected != found {
            return Err(Error::Checkpoint(
                "parameter names or shapes do not match the configuration".into(),
            ));
        }
        Ok(Model { store, ..template })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Diffusion noise for `batch`, or `None` when the model has no diffusion
    /// stage.
    pub fn noise(&self, batch: &Batch, mode: NoiseMode, stream: &mut ChaCha8Rng) -> Result<Option<DiffusionNoise>> {
        if self.config.ablation.no_src {
            return Ok(None);
        }
        let (t, b, d) = (self.schedule.steps(), batch.len(), self.config.d_e);
        let noise = match mode {
            NoiseMode::Stream => DiffusionNoise::sample(stream, t, b, d)?,
            NoiseMode::PerSample(seed) => DiffusionNoise::per_sample(seed, &batch.sample_ids, t, d)?,
            NoiseMode::Zero => DiffusionNoise::zeros(t, b, d),
        };
        Ok(Some(noise))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        batch: &Batch,
        table: &EmbeddingTable,
        noise: Option<&DiffusionNoise>,
        options: ForwardOptions,
    ) -> Result<ForwardOutput> {
        batch.validate(&self.vocab)?;
        let c = &self.config;
        let a = c.ablation;
        let store = &self.store;
        let (b, n) = (batch.len(), batch.seq_len);
        if table.dims() != (c.d_im, c.d_te) {
            return Err(Error::dim(format!(
                "embedding table dims {:?} vs config ({}, {})",
                table.dims(),
                c.d_im,
                c.d_te
            )));
        }

        let item_table = g.param(store, ITEM_EMBEDDING)?;
        let seq_id = g.gather(item_table, &batch.seq)?;
        let target_id = g.gather(item_table, &batch.target)?;
        let target_im = g.constant(content(table, &batch.target, Modality::Im)?);
        let target_te = g.constant(content(table, &batch.target, Modality::Te)?);
        let user = user_embedding(g, store, batch)?;

        let id_out = experts::id_expert(g, store, seq_id, target_id, n)?;

        let mut l_con = None;
        let mut l_syn = None;
        let mut e_id = id_out.expert;
        let mut aux: Vec<Var> = Vec::new();
        if a.uses_content() {
            let seq_im = g.constant(content(table, &batch.seq, Modality::Im)?);
            let seq_te = g.constant(content(table, &batch.seq, Modality::Te)?);
            let pooled_im = pool(g, store, Modality::Im, seq_im, target_im, n)?;
            let pooled_te = pool(g, store, Modality::Te, seq_te, target_te, n)?;
            let expert;
            if a.no_mfe {
                expert = PerModality::new(
                    id_out.expert,
                    nn::linear(g, store, &experts::projection_prefix(Modality::Im), pooled_im)?,
                    nn::linear(g, store, &experts::projection_prefix(Modality::Te), pooled_te)?,
                );
                aux.push(expert.im);
                aux.push(expert.te);
            } else {
                let pooled = PerModality::new(id_out.pooled, pooled_im, pooled_te);
                let mfe = experts::mfe_forward(g, store, pooled, id_out.expert)?;
                let con = experts::decoupling_loss(g, &mfe.expert, &mfe.share)?;
                l_con = Some(g.mean(con));
                e_id = mfe.fused.id;
                expert = mfe.expert;
                aux.push(expert.im);
                aux.push(expert.te);
                aux.push(mfe.expert_sh);
            }
            if !a.no_src {
                let noise = noise.ok_or_else(|| Error::contract("diffusion stage needs noise"))?;
                let mut h0 = expert;
                if let Some(m) = options.missing {
                    *h0.get_mut(m) = g.constant(Tensor::zeros(&[b, c.d_e]));
                }
                let weights = FusionWeights::from_store(g, store)?;
                let h = diffusion::run_mssfi(g, h0, &self.schedule, &weights, noise)?;
                let e_syn = diffusion::synergy_fuse(g, store, &h)?;
                let e_target = diffusion::target_representation(g, store, &[target_id, target_im, target_te])?;
                let syn = diffusion::synergy_loss(g, e_syn, e_target, &batch.labels, c.src.negative_branch())?;
                l_syn = Some(g.mean(syn));
                aux.push(e_syn);
            }
        }

        let e_att = if aux.is_empty() {
            e_id
        } else if a.no_fdaf {
            let mut parts = vec![e_id];
            parts.extend(&aux);
            g.concat_cols(&parts)?
        } else {
            let gated = fusion::modality_gate(g, store, target_id, &aux)?;
            let crossed = fusion::cross_net(g, store, gated.concat)?;
            fusion::noninvasive_fuse(g, store, e_id, crossed, c.heads)?.e_att
        };

        let target_proj = if self.head_content {
            nn::linear_blocks(g, store, HEAD_TARGET_PROJECTION, &[target_id, target_im, target_te])?
        } else {
            nn::linear(g, store, HEAD_TARGET_PROJECTION, target_id)?
        };
        let mut head_in = vec![e_att];
        head_in.extend(user);
        head_in.push(target_proj);
        let probs = fusion::predict_head(g, store, &head_in)?;
        Ok(ForwardOutput {
            probs,
            l_con,
            l_syn,
            e_id,
            e_att,
        })
    }

    /// `L = L_y + w1·L_con + w2·L_syn` for a forward output.
    pub fn loss(&self, g: &mut Graph, out: &ForwardOutput, labels: &[f64], w1: f64, w2: f64) -> Result<LossTerms> {
        let l_y = g.bce(out.probs, labels)?;
        let mut terms = vec![(l_y, 1.0)];
        if let Some(v) = out.l_con {
            terms.push((v, w1));
        }
        if let Some(v) = out.l_syn {
            terms.push((v, w2));
        }
        let total = g.lin_comb(&terms)?;
        Ok(LossTerms {
            total,
            l_y,
            l_con: out.l_con,
            l_syn: out.l_syn,
        })
    }

    /// Click probabilities for a batch, without keeping the graph.
    pub fn predict(&self, batch: &Batch, table: &EmbeddingTable, noise: Option<&DiffusionNoise>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, batch, table, noise, ForwardOptions::default())?;
        Ok(g.value(out.probs).data().to_vec())
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }
}

fn target_width(c: &ModelConfig) -> usize {
    c.d_id + c.d_im + c.d_te
}

fn head_input_width(c: &ModelConfig, vocab: &Vocab) -> usize {
    let a = c.ablation;
    let primary = if a.uses_content() && a.no_fdaf {
        c.d_e * (1 + c.aux_blocks().len())
    } else {
        c.d_e
    };
    primary + vocab.profile.len() * c.d_id + c.d_e
}

/// Item and profile embeddings, the ID expert and the head's target
/// projection: the parameters every configuration shares. The projection
/// reads the target's content embeddings only when `head_content` is set.
fn init_backbone(
    store: &mut ParamStore,
    c: &ModelConfig,
    vocab: &Vocab,
    head_content: bool,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let bound = 1.0 / (c.d_id as f64).sqrt();
    store.insert_uniform(ITEM_EMBEDDING, &[vocab.n_items, c.d_id], bound, rng)?;
    for (k, &card) in vocab.profile.iter().enumerate() {
        if card == 0 {
            return Err(Error::config(format!("profile field {k} has no values")));
        }
        store.insert_uniform(&profile_embedding(k), &[card, c.d_id], bound, rng)?;
    }
    experts::init_id_expert(store, &c.expert_dims(), rng)?;
    let width = if head_content { target_width(c) } else { c.d_id };
    nn::init_linear(store, HEAD_TARGET_PROJECTION, width, c.d_e, rng)
}

fn user_embedding(g: &mut Graph, store: &ParamStore, batch: &Batch) -> Result<Option<Var>> {
    let fields = batch.profile.first().map_or(0, Vec::len);
    if fields == 0 {
        return Ok(None);
    }
    let mut parts = Vec::with_capacity(fields);
    for k in 0..fields {
        let table = g.param(store, &profile_embedding(k))?;
        let idx: Vec<usize> = batch.profile.iter().map(|p| p[k]).collect();
        parts.push(g.gather(table, &idx)?);
    }
    Ok(Some(if fields == 1 { parts[0] } else { g.concat_cols(&parts)? }))
}

fn pool(g: &mut Graph, store: &ParamStore, m: Modality, seq: Var, target: Var, n: usize) -> Result<Var> {
    let att = features::target_attention_batch(g, store, &experts::pooling_prefix(m), seq, target, n)?;
    features::sum_pool_batch(g, att.weighted, n)
}

/// Stacks the image or text embeddings of `slots` into `[len, d]`.
fn content(table: &EmbeddingTable, slots: &[usize], m: Modality) -> Result<Tensor> {
    let (d_im, d_te) = table.dims();
    let d = if m == Modality::Im { d_im } else { d_te };
    let mut data = Vec::with_capacity(slots.len() * d);
    for &s in slots {
        if s >= table.len() {
            return Err(Error::contract(format!("item slot {s} outside the embedding table")));
        }
        data.extend_from_slice(if m == Modality::Im { table.image_at(s) } else { table.text_at(s) });
    }
    Tensor::new(vec![slots.len(), d], data)
}
