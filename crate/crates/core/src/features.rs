//! Modality embeddings and target-conditioned pooling of behavior sequences.
//!
//! Image and text embeddings come from an [`EncoderProvider`]; this crate ships
//! the precomputed-table provider ([`EmbeddingTable`]), which the synthetic
//! generator also fills. Pooling uses a DIN-style local activation unit: a
//! two-layer perceptron scores `[item, target, item ⊙ target]`, scores are
//! softmax-normalized over the sequence, and the weighted rows are summed.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::nn;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Id,
    Im,
    Te,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Id, Modality::Im, Modality::Te];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Id => "id",
            Modality::Im => "im",
            Modality::Te => "te",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One value per modality.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct PerModality<T> {
    pub id: T,
    pub im: T,
    pub te: T,
}

impl<T> PerModality<T> {
    pub fn new(id: T, im: T, te: T) -> Self {
        PerModality { id, im, te }
    }

    pub fn get(&self, m: Modality) -> &T {
        match m {
            Modality::Id => &self.id,
            Modality::Im => &self.im,
            Modality::Te => &self.te,
        }
    }

    pub fn get_mut(&mut self, m: Modality) -> &mut T {
        match m {
            Modality::Id => &mut self.id,
            Modality::Im => &mut self.im,
            Modality::Te => &mut self.te,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(Modality, &T) -> U) -> PerModality<U> {
        PerModality {
            id: f(Modality::Id, &self.id),
            im: f(Modality::Im, &self.im),
            te: f(Modality::Te, &self.te),
        }
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(Modality, &T) -> Result<U>) -> Result<PerModality<U>> {
        Ok(PerModality {
            id: f(Modality::Id, &self.id)?,
            im: f(Modality::Im, &self.im)?,
            te: f(Modality::Te, &self.te)?,
        })
    }
}

/// A behavior sequence of one modality, `n` rows of width `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence {
    pub modality: Modality,
    pub vectors: Tensor,
}

impl EmbeddingSequence {
    pub fn new(modality: Modality, vectors: Tensor) -> Result<Self> {
        if vectors.rank() != 2 {
            return Err(Error::dim(format!(
                "sequence must be [n, d], got {:?}",
                vectors.shape()
            )));
        }
        Ok(EmbeddingSequence { modality, vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetItem {
    pub raw_id: u64,
    pub id_embed: Tensor,
    pub im_embed: Tensor,
    pub te_embed: Tensor,
}

/// Source of image and text embeddings for item keys.
pub trait EncoderProvider {
    fn dims(&self) -> (usize, usize);
    fn image(&self, item: u64) -> Result<&[f64]>;
    fn text(&self, item: u64) -> Result<&[f64]>;
}

/// Precomputed per-item image and text embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    d_im: usize,
    d_te: usize,
    keys: Vec<u64>,
    index: HashMap<u64, usize>,
    im: Vec<f64>,
    te: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    d_im: usize,
    d_te: usize,
}

#[derive(Serialize, Deserialize)]
struct ManifestRow {
    item: u64,
    im: Vec<f64>,
    te: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(d_im: usize, d_te: usize) -> Self {
        EmbeddingTable {
            d_im,
            d_te,
            keys: Vec::new(),
            index: HashMap::new(),
            im: Vec::new(),
            te: Vec::new(),
        }
    }

    pub fn insert(&mut self, item: u64, im: &[f64], te: &[f64]) -> Result<()> {
        let key = format!("item {item}");
        if im.len() != self.d_im {
            return Err(Error::Ingestion {
                key,
                reason: format!("image embedding has {} values, declared {}", im.len(), self.d_im),
            });
        }
        if te.len() != self.d_te {
            return Err(Error::Ingestion {
                key,
                reason: format!("text embedding has {} values, declared {}", te.len(), self.d_te),
            });
        }
        if self.index.contains_key(&item) {
            return Err(Error::Ingestion {
                key,
                reason: "duplicate item".into(),
            });
        }
        self.index.insert(item, self.keys.len());
        self.keys.push(item);
        self.im.extend_from_slice(im);
        self.te.extend_from_slice(te);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[u64] {
        &self.keys
    }

    /// Row position of `item`, stable for the table's lifetime.
    pub fn slot(&self, item: u64) -> Result<usize> {
        self.index.get(&item).copied().ok_or_else(|| Error::Ingestion {
            key: format!("item {item}"),
            reason: "missing from embedding table".into(),
        })
    }

    pub fn image_at(&self, slot: usize) -> &[f64] {
        &self.im[slot * self.d_im..(slot + 1) * self.d_im]
    }

    pub fn text_at(&self, slot: usize) -> &[f64] {
        &self.te[slot * self.d_te..(slot + 1) * self.d_te]
    }

    /// Writes the JSON-lines form: a `{"d_im","d_te"}` header, then one
    /// `{"item","im","te"}` object per item.
    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<()> {
        serde_json::to_writer(
            &mut *w,
            &ManifestHeader {
                d_im: self.d_im,
                d_te: self.d_te,
            },
        )?;
        w.write_all(b"\n")?;
        for (slot, &item) in self.keys.iter().enumerate() {
            let row = ManifestRow {
                item,
                im: self.im[slot * self.d_im..(slot + 1) * self.d_im].to_vec(),
                te: self.te[slot * self.d_te..(slot + 1) * self.d_te].to_vec(),
            };
            serde_json::to_writer(&mut *w, &row)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead, expected: Option<(usize, usize)>) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let Some((_, header)) = lines.next() else {
            return Err(Error::Ingestion {
                key: "header".into(),
                reason: "file is empty".into(),
            });
        };
        let header: ManifestHeader =
            serde_json::from_str(&header?).map_err(|e| Error::Ingestion {
                key: "header".into(),
                reason: e.to_string(),
            })?;
        if let Some((d_im, d_te)) = expected {
            if (d_im, d_te) != (header.d_im, header.d_te) {
                return Err(Error::Ingestion {
                    key: "header".into(),
                    reason: format!(
                        "declares d_im={}, d_te={} but config expects {d_im}, {d_te}",
                        header.d_im, header.d_te
                    ),
                });
            }
        }
        let mut table = EmbeddingTable::new(header.d_im, header.d_te);
        for (lineno, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: ManifestRow = serde_json::from_str(&line).map_err(|e| Error::Ingestion {
                key: format!("line {}", lineno + 1),
                reason: e.to_string(),
            })?;
            table
                .insert(row.item, &row.im, &row.te)
                .map_err(|e| match e {
                    Error::Ingestion { key, reason } => Error::Ingestion {
                        key: format!("line {} ({key})", lineno + 1),
                        reason,
                    },
                    other => other,
                })?;
        }
        if table.is_empty() {
            log::warn!("embedding manifest holds no items");
        }
        Ok(table)
    }
}

impl EncoderProvider for EmbeddingTable {
    fn dims(&self) -> (usize, usize) {
        (self.d_im, self.d_te)
    }

    fn image(&self, item: u64) -> Result<&[f64]> {
        let s = self.slot(item)?;
        Ok(&self.im[s * self.d_im..(s + 1) * self.d_im])
    }

    fn text(&self, item: u64) -> Result<&[f64]> {
        let s = self.slot(item)?;
        Ok(&self.te[s * self.d_te..(s + 1) * self.d_te])
    }
}

/// Loads a precomputed embedding manifest from disk.
pub fn load_precomputed(path: &Path, expected: Option<(usize, usize)>) -> Result<EmbeddingTable> {
    let f = std::fs::File::open(path)?;
    EmbeddingTable::read_jsonl(BufReader::new(f), expected)
}

/// Registers a local activation unit scoring `[item, target, item ⊙ target]`.
/// The first layer's weight is `[3d, hidden]` with row blocks for the item,
/// target and product terms.
pub fn init_attention_unit(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    hidden: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    nn::init_mlp(store, prefix, &[3 * d, hidden, 1], rng)
}

/// Attention over a batch of equal-length sequences.
pub struct AttentionPooling {
    /// `[b, n]`, each row sums to one.
    pub weights: Var,
    /// `[b·n, d]`, sequence rows scaled by their weight.
    pub weighted: Var,
}

/// Scores every sequence row against its sample's target. `seq` is
/// `[b·n, d]` with sample `i` owning rows `i·n .. (i+1)·n`; `target` is `[b, d]`.
pub fn target_attention_batch(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    seq: Var,
    target: Var,
    n: usize,
) -> Result<AttentionPooling> {
    let (rows, d) = (g.value(seq).rows(), g.value(seq).cols());
    let (b, dt) = (g.value(target).rows(), g.value(target).cols());
    if d != dt {
        return Err(Error::dim(format!("sequence width {d} vs target width {dt}")));
    }
    if n == 0 {
        return Err(Error::EmptySequence(format!("{prefix}: empty behavior sequence")));
    }
    if rows != b * n {
        return Err(Error::dim(format!("{rows} sequence rows for {b} targets of length {n}")));
    }
    let w0 = g.param(store, &format!("{prefix}.layer0.weight"))?;
    let b0 = g.param(store, &format!("{prefix}.layer0.bias"))?;
    if g.value(w0).rows() != 3 * d {
        return Err(Error::dim(format!(
            "{prefix}: attention unit built for width {}, got {d}",
            g.value(w0).rows() / 3
        )));
    }
    // [s, t, s⊙t]·W0 evaluated blockwise; the target block is computed once per sample.
    let w_item = g.slice_rows(w0, 0, d)?;
    let w_target = g.slice_rows(w0, d, d)?;
    let w_prod = g.slice_rows(w0, 2 * d, d)?;
    let seq_terms = g.seq_target_product(seq, target, w_item, w_prod, n)?;
    let target_term = g.matmul(target, w_target)?;
    let target_term = g.repeat_rows(target_term, n)?;
    let h = g.add(seq_terms, target_term)?;
    let h = g.add_row(h, b0)?;
    let h = g.relu(h);
    let score = nn::linear(g, store, &format!("{prefix}.layer1"), h)?;
    let score = g.reshape(score, &[b, n])?;
    let weights = g.softmax_rows(score);
    let flat = g.reshape(weights, &[b * n, 1])?;
    let weighted = g.mul_col(seq, flat)?;
    Ok(AttentionPooling { weights, weighted })
}

/// Sums each sample's weighted rows: `[b·n, d] -> [b, d]`.
pub fn sum_pool_batch(g: &mut Graph, weighted: Var, n: usize) -> Result<Var> {
    g.segment_sum(weighted, n)
}

/// Single-sequence form of [`target_attention_batch`]: returns the weighted
/// rows `[n, d]` and the weights `[1, n]`.
pub fn target_attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    seq: &EmbeddingSequence,
    target: &Tensor,
) -> Result<AttentionPooling> {
    if seq.dim() != target.numel() {
        return Err(Error::dim(format!(
            "sequence width {} vs target width {}",
            seq.dim(),
            target.numel()
        )));
    }
    let s = g.constant(seq.vectors.clone());
    let t = g.constant(target.reshape(&[1, target.numel()])?);
    target_attention_batch(g, store, prefix, s, t, seq.len())
}

/// Column sums of `[n, d]` weighted rows.
pub fn sum_pool(g: &mut Graph, weighted: Var) -> Var {
    g.col_sum(weighted)
}
