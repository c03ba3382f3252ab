//! Synthetic multi-modal click data with planted structure, dataset files
//! and batching.
//!
//! Every item carries latent `±1` factors of four kinds: common factors seen
//! by both content modalities, image-only factors, text-only factors, and
//! synergy flags that come in image/text pairs. An item's image embedding
//! writes its common, image and image-flag factors as constant blocks over
//! disjoint dimension ranges, plus Gaussian noise; the text embedding does
//! the same with its own factors. A user's click logit on an item is
//!
//! `bias + u_c·c + u_im·a + u_te·b + β·Σ_p [image flag p ∧ text flag p]`
//!
//! The last term only fires when an image flag and its paired text flag are
//! both on, so neither modality alone can recover it.
//!
//! Each user is shown a stream of distinct, uniformly drawn items and clicks
//! each with probability `sigmoid(logit)`. The first `seq_len` clicks form
//! the starting history; the following clicks are labeled positives whose
//! behavior sequence is the `seq_len` most recent clicks before them. Every
//! positive is paired with a negative: an impression the user was shown and
//! skipped. The last positive of each user and its negative are held out
//! for testing.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{EmbeddingTable, Modality};
use crate::model::{Batch, Vocab};

pub const ITEMS_FILE: &str = "items.jsonl";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Longest behavior sequence kept, and the shortest history a user needs.
pub const MAX_SEQ_LEN: usize = 50;
pub const MIN_SEQ_LEN: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub seq_len: usize,
    /// Labeled positives per user; the last one is held out.
    pub interactions: usize,
    pub d_im: usize,
    pub d_te: usize,
    pub k_common: usize,
    pub k_im: usize,
    pub k_te: usize,
    /// Number of image/text synergy flag pairs.
    pub k_synergy: usize,
    /// Synergy strength β.
    pub beta: f64,
    /// Probability of flipping a generated label.
    pub label_noise: f64,
    /// Per-dimension standard deviation of the embedding noise.
    pub embed_noise: f64,
    /// Standard deviation of the user preference weights.
    pub preference_scale: f64,
    /// Probability that an item's synergy flag is on.
    pub flag_rate: f64,
    /// Constant added to every click logit.
    pub bias: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec::preset("synergy-small").expect("built-in preset")
    }
}

impl SyntheticSpec {
    /// `synergy-small` (2k users, 5k items) or `synergy-med` (20k users).
    pub fn preset(name: &str) -> Result<Self> {
        let small = SyntheticSpec {
            n_users: 2000,
            n_items: 5000,
            seq_len: 10,
            interactions: 5,
            d_im: 512,
            d_te: 512,
            k_common: 4,
            k_im: 3,
            k_te: 3,
            k_synergy: 3,
            beta: 4.0,
            label_noise: 0.0,
            embed_noise: 0.1,
            preference_scale: 1.0,
            flag_rate: 0.5,
            bias: -2.0,
            seed: 0,
        };
        match name {
            "synergy-small" => Ok(small),
            "synergy-med" => Ok(SyntheticSpec {
                n_users: 20_000,
                ..small
            }),
            other => Err(Error::config(format!("unknown preset {other}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_users", self.n_users),
            ("n_items", self.n_items),
            ("d_im", self.d_im),
            ("d_te", self.d_te),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(MIN_SEQ_LEN..=MAX_SEQ_LEN).contains(&self.seq_len) {
            return Err(Error::config(format!(
                "seq_len {} outside [{MIN_SEQ_LEN}, {MAX_SEQ_LEN}]",
                self.seq_len
            )));
        }
        if self.interactions < 2 {
            return Err(Error::config("each user needs at least two interactions"));
        }
        let needed = 2 * (self.seq_len + self.interactions);
        if self.n_items < needed {
            return Err(Error::config(format!(
                "{} items cannot support {} clicks plus as many negatives per user",
                self.n_items,
                self.seq_len + self.interactions
            )));
        }
        for (name, d, blocks) in [
            ("d_im", self.d_im, self.blocks(Modality::Im)),
            ("d_te", self.d_te, self.blocks(Modality::Te)),
        ] {
            if blocks > d {
                return Err(Error::config(format!(
                    "{blocks} latent factors do not fit into {name} = {d}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::config("label_noise must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.flag_rate) {
            return Err(Error::config("flag_rate must lie in [0, 1]"));
        }
        for (name, v) in [
            ("beta", self.beta),
            ("embed_noise", self.embed_noise),
            ("preference_scale", self.preference_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and nonnegative")));
            }
        }
        if !self.bias.is_finite() {
            return Err(Error::config("bias must be finite"));
        }
        Ok(())
    }

    /// Latent factors written into one content modality's embedding.
    pub fn blocks(&self, m: Modality) -> usize {
        match m {
            Modality::Im => self.k_common + self.k_im + self.k_synergy,
            Modality::Te => self.k_common + self.k_te + self.k_synergy,
            Modality::Id => 0,
        }
    }

    /// Profile field cardinalities: an age-like bucket carrying no signal and
    /// the user's dominant common factor with its sign.
    pub fn profile_cardinalities(&self) -> Vec<usize> {
        vec![4, 2 * self.k_common.max(1)]
    }
}

/// Latent description of an item.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemLatent {
    pub common: Vec<f64>,
    pub im: Vec<f64>,
    pub te: Vec<f64>,
    pub flag_im: Vec<bool>,
    pub flag_te: Vec<bool>,
}

/// Latent preferences of a user.
#[derive(Clone, Debug, PartialEq)]
pub struct UserLatent {
    pub common: Vec<f64>,
    pub im: Vec<f64>,
    pub te: Vec<f64>,
    pub profile: Vec<usize>,
}

/// One labeled record as stored in the interaction files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: u64,
    pub profile: Vec<usize>,
    pub seq: Vec<u64>,
    pub target: u64,
    pub y: u8,
}

/// A user's clicks in order (the starting history, then the labeled ones)
/// and the impressions the user skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct UserLog {
    pub user: u64,
    pub profile: Vec<usize>,
    pub history: Vec<u64>,
    pub interactions: Vec<u64>,
    /// Items shown but not clicked, in display order.
    pub skipped: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<Interaction>,
    pub test: Vec<Interaction>,
    /// Users dropped for having fewer than two interactions.
    pub excluded_users: usize,
}

/// Per-user leave-last-out split. Each interaction's sequence is the
/// `max_len` most recent clicks before it. Each positive gets one negative,
/// drawn without replacement from the user's skipped impressions; once those
/// run out, negatives are drawn uniformly from item keys `0..n_items`
/// outside the user's clicks.
pub fn split(logs: &[UserLog], n_items: usize, max_len: usize, rng: &mut impl Rng) -> Result<Split> {
    if max_len == 0 {
        return Err(Error::config("max_len must be positive"));
    }
    let mut out = Split {
        train: Vec::new(),
        test: Vec::new(),
        excluded_users: 0,
    };
    for log in logs {
        if log.interactions.len() < 2 {
            out.excluded_users += 1;
            continue;
        }
        let clicked: HashSet<u64> = log.history.iter().chain(&log.interactions).copied().collect();
        if clicked.len() as u64 >= n_items as u64 {
            return Err(Error::config(format!(
                "user {} clicked every item; no negatives left",
                log.user
            )));
        }
        let mut skipped: Vec<u64> = log.skipped.iter().copied().filter(|i| !clicked.contains(i)).collect();
        let mut past: Vec<u64> = log.history.clone();
        let last = log.interactions.len() - 1;
        for (j, &target) in log.interactions.iter().enumerate() {
            if past.is_empty() {
                return Err(Error::EmptySequence(format!("user {} has no history", log.user)));
            }
            let seq = past[past.len().saturating_sub(max_len)..].to_vec();
            let negative = if skipped.is_empty() {
                loop {
                    let cand = rng.random_range(0..n_items as u64);
                    if !clicked.contains(&cand) {
                        break cand;
                    }
                }
            } else {
                let k = rng.random_range(0..skipped.len());
                skipped.swap_remove(k)
            };
            let dst = if j == last { &mut out.test } else { &mut out.train };
            for (item, y) in [(target, 1), (negative, 0)] {
                dst.push(Interaction {
                    user: log.user,
                    profile: log.profile.clone(),
                    seq: seq.clone(),
                    target: item,
                    y,
                });
            }
            past.push(target);
        }
    }
    if out.excluded_users > 0 {
        log::info!("excluded {} users with fewer than two interactions", out.excluded_users);
    }
    Ok(out)
}

/// Everything the generator knows, including the latent ground truth.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub spec: SyntheticSpec,
    pub items: Vec<ItemLatent>,
    pub users: Vec<UserLatent>,
    pub table: EmbeddingTable,
    pub logs: Vec<UserLog>,
    pub split: Split,
}

fn sign(rng: &mut impl Rng) -> f64 {
    if rng.random_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}

fn gaussian_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Writes `values` as constant blocks of equal width, then adds noise to
/// every dimension. Dimensions past the last block carry noise only.
fn embed(values: &[f64], d: usize, noise: f64, rng: &mut impl Rng) -> Vec<f64> {
    let width = if values.is_empty() { d } else { d / values.len() };
    (0..d)
        .map(|j| {
            let block = j / width;
            let signal = values.get(block).copied().unwrap_or(0.0);
            signal + noise * rng.sample::<f64, _>(StandardNormal)
        })
        .collect()
}

fn flag_value(on: bool) -> f64 {
    if on {
        1.0
    } else {
        -1.0
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl SyntheticData {
    pub fn generate(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let s = spec;

        let mut items = Vec::with_capacity(s.n_items);
        let mut table = EmbeddingTable::new(s.d_im, s.d_te);
        for key in 0..s.n_items {
            let item = ItemLatent {
                common: (0..s.k_common).map(|_| sign(&mut rng)).collect(),
                im: (0..s.k_im).map(|_| sign(&mut rng)).collect(),
                te: (0..s.k_te).map(|_| sign(&mut rng)).collect(),
                flag_im: (0..s.k_synergy).map(|_| rng.random_bool(s.flag_rate)).collect(),
                flag_te: (0..s.k_synergy).map(|_| rng.random_bool(s.flag_rate)).collect(),
            };
            let im_values: Vec<f64> = item
                .common
                .iter()
                .chain(&item.im)
                .copied()
                .chain(item.flag_im.iter().map(|&f| flag_value(f)))
                .collect();
            let te_values: Vec<f64> = item
                .common
                .iter()
                .chain(&item.te)
                .copied()
                .chain(item.flag_te.iter().map(|&f| flag_value(f)))
                .collect();
            let im = embed(&im_values, s.d_im, s.embed_noise, &mut rng);
            let te = embed(&te_values, s.d_te, s.embed_noise, &mut rng);
            table.insert(key as u64, &im, &te)?;
            items.push(item);
        }

        let mut users = Vec::with_capacity(s.n_users);
        for _ in 0..s.n_users {
            let common = gaussian_vec(&mut rng, s.k_common, s.preference_scale);
            let im = gaussian_vec(&mut rng, s.k_im, s.preference_scale);
            let te = gaussian_vec(&mut rng, s.k_te, s.preference_scale);
            let dominant = common
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .map_or(0, |(k, v)| 2 * k + usize::from(*v < 0.0));
            let profile = vec![rng.random_range(0..4), dominant];
            users.push(UserLatent {
                common,
                im,
                te,
                profile,
            });
        }

        let mut data = SyntheticData {
            spec: s.clone(),
            items,
            users,
            table,
            logs: Vec::new(),
            split: Split {
                train: Vec::new(),
                test: Vec::new(),
                excluded_users: 0,
            },
        };

        let clicks_needed = s.seq_len + s.interactions;
        let mut logs = Vec::with_capacity(s.n_users);
        for u in 0..s.n_users {
            let mut seen = HashSet::new();
            let mut clicks = Vec::with_capacity(clicks_needed);
            let mut skipped = Vec::new();
            let mut draws = 0usize;
            while clicks.len() < clicks_needed {
                draws += 1;
                if draws > 10_000 * clicks_needed {
                    return Err(Error::config(format!(
                        "user {u} clicks too rarely; raise bias or lower preference_scale"
                    )));
                }
                let cand = rng.random_range(0..s.n_items);
                if !seen.insert(cand) {
                    continue;
                }
                if rng.random_bool(sigmoid(data.bayes_logit(u, cand))) {
                    clicks.push(cand as u64);
                } else {
                    skipped.push(cand as u64);
                }
            }
            let interactions = clicks.split_off(s.seq_len);
            logs.push(UserLog {
                user: u as u64,
                profile: data.users[u].profile.clone(),
                history: clicks,
                interactions,
                skipped,
            });
        }
        let mut split = split(&logs, s.n_items, s.seq_len, &mut rng)?;
        if s.label_noise > 0.0 {
            for r in split.train.iter_mut().chain(split.test.iter_mut()) {
                if rng.random_bool(s.label_noise) {
                    r.y = 1 - r.y;
                }
            }
        }
        data.logs = logs;
        data.split = split;
        Ok(data)
    }

    /// The generating click logit of user `u` on item `i`.
    pub fn bayes_logit(&self, u: usize, i: usize) -> f64 {
        let (user, item) = (&self.users[u], &self.items[i]);
        let synergy: f64 = (0..self.spec.k_synergy)
            .filter(|&p| item.flag_im[p] && item.flag_te[p])
            .count() as f64;
        self.spec.bias
            + dot(&user.common, &item.common)
            + dot(&user.im, &item.im)
            + dot(&user.te, &item.te)
            + self.spec.beta * synergy
    }

    /// Expected click logit given only one content modality's factors (the
    /// common factors, that modality's own factors and its synergy flags);
    /// the unseen modality's terms are replaced by their means.
    pub fn single_modality_logit(&self, u: usize, i: usize, m: Modality) -> Result<f64> {
        let (user, item) = (&self.users[u], &self.items[i]);
        let rate = self.spec.flag_rate;
        let (own, own_flags) = match m {
            Modality::Im => (dot(&user.im, &item.im), &item.flag_im),
            Modality::Te => (dot(&user.te, &item.te), &item.flag_te),
            Modality::Id => return Err(Error::contract("the id modality carries no content factors")),
        };
        let synergy: f64 = (0..self.spec.k_synergy)
            .filter(|&p| own_flags[p])
            .map(|_| rate)
            .sum();
        Ok(self.spec.bias + dot(&user.common, &item.common) + own + self.spec.beta * synergy)
    }

    pub fn vocab(&self) -> Vocab {
        Vocab {
            n_items: self.spec.n_items,
            profile: self.spec.profile_cardinalities(),
        }
    }

    /// Writes the embedding table, both splits and a manifest into `dir`.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest> {
        std::fs::create_dir_all(dir)?;
        {
            let mut w = BufWriter::new(File::create(dir.join(ITEMS_FILE))?);
            self.table.write_jsonl(&mut w)?;
            w.flush()?;
        }
        write_interactions(&dir.join(TRAIN_FILE), &self.split.train)?;
        write_interactions(&dir.join(TEST_FILE), &self.split.test)?;
        let manifest = DatasetManifest {
            items: ITEMS_FILE.into(),
            train: TRAIN_FILE.into(),
            test: TEST_FILE.into(),
            spec: self.spec.clone(),
            n_items: self.spec.n_items,
            profile_cardinalities: self.spec.profile_cardinalities(),
            train_records: self.split.train.len(),
            test_records: self.split.test.len(),
            excluded_users: self.split.excluded_users,
            checksum: checksum(dir, &[ITEMS_FILE, TRAIN_FILE, TEST_FILE])?,
        };
        let mut w = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
        serde_json::to_writer_pretty(&mut w, &manifest)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(manifest)
    }

    /// The in-memory dataset in the form the trainer consumes.
    pub fn dataset(&self) -> Dataset {
        Dataset {
            table: self.table.clone(),
            vocab: self.vocab(),
            train: self.split.train.clone(),
            test: self.split.test.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub items: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
    pub spec: SyntheticSpec,
    pub n_items: usize,
    pub profile_cardinalities: Vec<usize>,
    pub train_records: usize,
    pub test_records: usize,
    pub excluded_users: usize,
    /// Hex SHA-256 over the items, train and test files in that order.
    pub checksum: String,
}

fn checksum(dir: &Path, files: &[&str]) -> Result<String> {
    let mut h = Sha256::new();
    for f in files {
        let bytes = std::fs::read(dir.join(f))?;
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn write_interactions(path: &Path, records: &[Interaction]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_interactions(path: &Path) -> Result<Vec<Interaction>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Interaction = serde_json::from_str(&line).map_err(|e| Error::Ingestion {
            key: format!("{} line {}", path.display(), lineno + 1),
            reason: e.to_string(),
        })?;
        if rec.y > 1 {
            return Err(Error::Ingestion {
                key: format!("{} line {}", path.display(), lineno + 1),
                reason: format!("label {} is not 0 or 1", rec.y),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Train and test records with the embedding table they refer to.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub table: EmbeddingTable,
    pub vocab: Vocab,
    pub train: Vec<Interaction>,
    pub test: Vec<Interaction>,
}

impl Dataset {
    /// Loads a generated directory, verifying the manifest checksum.
    pub fn load(manifest_path: &Path) -> Result<(DatasetManifest, Dataset)> {
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let manifest: DatasetManifest = serde_json::from_reader(BufReader::new(File::open(manifest_path)?))?;
        let files = [&manifest.items, &manifest.train, &manifest.test];
        let mut h = Sha256::new();
        for f in files {
            h.update(std::fs::read(dir.join(f))?);
        }
        let found = hex::encode(h.finalize());
        if found != manifest.checksum {
            return Err(Error::Checksum {
                expected: manifest.checksum.clone(),
                found,
            });
        }
        let table = crate::features::load_precomputed(
            &dir.join(&manifest.items),
            Some((manifest.spec.d_im, manifest.spec.d_te)),
        )?;
        if table.len() != manifest.n_items {
            return Err(Error::Ingestion {
                key: manifest.items.display().to_string(),
                reason: format!("{} items, manifest declares {}", table.len(), manifest.n_items),
            });
        }
        let dataset = Dataset {
            vocab: Vocab {
                n_items: table.len(),
                profile: manifest.profile_cardinalities.clone(),
            },
            table,
            train: read_interactions(&dir.join(&manifest.train))?,
            test: read_interactions(&dir.join(&manifest.test))?,
        };
        Ok((manifest, dataset))
    }

    /// Groups records by sequence length and cuts them into batches of at
    /// most `batch_size`. With an rng, records are shuffled within each
    /// length group and the batch order is shuffled too; without one the
    /// order is deterministic. Sample ids are record positions in `records`.
    pub fn batches(
        &self,
        records: &[Interaction],
        batch_size: usize,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<Batch>> {
        if batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            groups.entry(r.seq.len()).or_default().push(i);
        }
        let mut chunks: Vec<Vec<usize>> = Vec::new();
        let mut rng = rng;
        for (_, mut idx) in groups {
            if let Some(r) = rng.as_deref_mut() {
                idx.shuffle(r);
            }
            chunks.extend(idx.chunks(batch_size).map(<[usize]>::to_vec));
        }
        if let Some(r) = rng.as_deref_mut() {
            chunks.shuffle(r);
        }
        chunks.iter().map(|c| self.batch(records, c)).collect()
    }

    /// Builds one batch from the given record positions.
    pub fn batch(&self, records: &[Interaction], positions: &[usize]) -> Result<Batch> {
        let first = positions
            .first()
            .ok_or_else(|| Error::contract("batch of no records"))?;
        let seq_len = records[*first].seq.len();
        let mut b = Batch {
            sample_ids: Vec::with_capacity(positions.len()),
            profile: Vec::with_capacity(positions.len()),
            seq: Vec::with_capacity(positions.len() * seq_len),
            seq_len,
            target: Vec::with_capacity(positions.len()),
            labels: Vec::with_capacity(positions.len()),
        };
        for &p in positions {
            let r = &records[p];
            if r.seq.len() != seq_len {
                return Err(Error::dim("batch mixes sequence lengths"));
            }
            b.sample_ids.push(p as u64);
            b.profile.push(r.profile.clone());
            for &item in &r.seq {
                b.seq.push(self.table.slot(item)?);
            }
            b.target.push(self.table.slot(r.target)?);
            b.labels.push(f64::from(r.y));
        }
        Ok(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::auc;

    fn small_spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_users: 300,
            n_items: 800,
            d_im: 32,
            d_te: 32,
            seed,
            ..SyntheticSpec::preset("synergy-small").unwrap()
        }
    }

    fn labels(records: &[Interaction]) -> Vec<f64> {
        records.iter().map(|r| f64::from(r.y)).collect()
    }

    fn score(records: &[Interaction], f: impl Fn(usize, usize) -> f64) -> Vec<f64> {
        records.iter().map(|r| f(r.user as usize, r.target as usize)).collect()
    }

    /// Per-modality terms of the click logit, each scored from that
    /// modality's own factors only.
    fn modality_terms(data: &SyntheticData, u: usize, i: usize) -> [f64; 3] {
        let (user, item) = (&data.users[u], &data.items[i]);
        [dot(&user.common, &item.common), dot(&user.im, &item.im), dot(&user.te, &item.te)]
    }

    /// Logistic regression on the three per-modality terms, fitted by full
    /// batch gradient descent. It has no cross-modal term.
    fn fit_additive(data: &SyntheticData, records: &[Interaction]) -> [f64; 4] {
        let x: Vec<[f64; 3]> = records.iter().map(|r| modality_terms(data, r.user as usize, r.target as usize)).collect();
        let y = labels(records);
        let mut w = [0.0; 4];
        for _ in 0..2000 {
            let mut grad = [0.0; 4];
            for (xi, yi) in x.iter().zip(&y) {
                let p = sigmoid(w[3] + w[0] * xi[0] + w[1] * xi[1] + w[2] * xi[2]);
                for k in 0..3 {
                    grad[k] += (p - yi) * xi[k];
                }
                grad[3] += p - yi;
            }
            for k in 0..4 {
                w[k] -= 0.5 * grad[k] / x.len() as f64;
            }
        }
        w
    }

    #[test]
    fn without_synergy_an_additive_per_modality_model_reaches_bayes() {
        let spec = SyntheticSpec {
            beta: 0.0,
            n_users: 2000,
            ..small_spec(3)
        };
        let data = SyntheticData::generate(&spec).unwrap();
        let w = fit_additive(&data, &data.split.train);
        let test = &data.split.test;
        let y = labels(test);
        let additive = score(test, |u, i| {
            let x = modality_terms(&data, u, i);
            w[3] + w[0] * x[0] + w[1] * x[1] + w[2] * x[2]
        });
        let bayes = score(test, |u, i| data.bayes_logit(u, i));
        let (a, b) = (auc(&additive, &y).unwrap(), auc(&bayes, &y).unwrap());
        assert!((a - b).abs() <= 0.01, "additive {a} vs bayes {b}");
    }

    #[test]
    fn strong_synergy_is_invisible_to_any_single_modality() {
        let spec = SyntheticSpec::preset("synergy-small").unwrap();
        let data = SyntheticData::generate(&spec).unwrap();
        let test = &data.split.test;
        let y = labels(test);
        let bayes = auc(&score(test, |u, i| data.bayes_logit(u, i)), &y).unwrap();
        assert!(bayes >= 0.85, "bayes {bayes}");
        for m in [Modality::Im, Modality::Te] {
            let single = auc(&score(test, |u, i| data.single_modality_logit(u, i, m).unwrap()), &y).unwrap();
            assert!(single <= bayes - 0.05, "{m}: {single} vs bayes {bayes}");
        }
    }

    #[test]
    fn same_seed_writes_identical_files() {
        let spec = small_spec(5);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = SyntheticData::generate(&spec).unwrap().write(a.path()).unwrap();
        let mb = SyntheticData::generate(&spec).unwrap().write(b.path()).unwrap();
        assert_eq!(ma.checksum, mb.checksum);
        for f in [ITEMS_FILE, TRAIN_FILE, TEST_FILE, MANIFEST_FILE] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let other = SyntheticData::generate(&small_spec(6)).unwrap().write(b.path()).unwrap();
        assert_ne!(other.checksum, ma.checksum);
    }

    #[test]
    fn five_interactions_split_four_to_one() {
        let data = SyntheticData::generate(&small_spec(7)).unwrap();
        let n = data.spec.n_users;
        let count = |recs: &[Interaction], y| recs.iter().filter(|r| r.y == y).count();
        assert_eq!(count(&data.split.train, 1), 4 * n);
        assert_eq!(count(&data.split.test, 1), n);
        assert_eq!(count(&data.split.train, 0), 4 * n);
        assert_eq!(count(&data.split.test, 0), n);
        for r in data.split.train.iter().chain(&data.split.test) {
            assert_eq!(r.seq.len(), data.spec.seq_len);
        }
    }

    #[test]
    fn negatives_are_never_clicked_and_sequences_precede_targets() {
        let data = SyntheticData::generate(&small_spec(8)).unwrap();
        let clicked: Vec<HashSet<u64>> = data
            .logs
            .iter()
            .map(|l| l.history.iter().chain(&l.interactions).copied().collect())
            .collect();
        for r in data.split.train.iter().chain(&data.split.test) {
            let c = &clicked[r.user as usize];
            assert_eq!(c.contains(&r.target), r.y == 1);
            assert!(!r.seq.contains(&r.target) || r.y == 0);
        }
        for (log, c) in data.logs.iter().zip(&clicked) {
            assert!(log.skipped.iter().all(|i| !c.contains(i)));
        }
    }

    fn log(user: u64, history: Vec<u64>, interactions: Vec<u64>) -> UserLog {
        UserLog {
            user,
            profile: vec![0, 0],
            history,
            interactions,
            skipped: vec![],
        }
    }

    #[test]
    fn split_follows_the_leave_last_out_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logs = vec![log(0, vec![1, 2, 3], vec![4, 5, 6]), log(1, vec![1], vec![7])];
        let s = split(&logs, 20, 2, &mut rng).unwrap();
        assert_eq!(s.excluded_users, 1);
        let pos: Vec<&Interaction> = s.train.iter().filter(|r| r.y == 1).collect();
        assert_eq!(pos.len(), 2);
        assert_eq!((pos[0].target, pos[0].seq.clone()), (4, vec![2, 3]));
        assert_eq!((pos[1].target, pos[1].seq.clone()), (5, vec![3, 4]));
        let test_pos = s.test.iter().find(|r| r.y == 1).unwrap();
        assert_eq!((test_pos.target, test_pos.seq.clone()), (6, vec![4, 5]));
        for r in s.train.iter().chain(&s.test).filter(|r| r.y == 0) {
            assert!(![1, 2, 3, 4, 5, 6].contains(&r.target) && r.target < 20);
        }
    }

    #[test]
    fn split_prefers_skipped_impressions() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut l = log(0, vec![1], vec![2, 3]);
        l.skipped = vec![9, 8];
        let s = split(&[l], 100, 5, &mut rng).unwrap();
        let mut negs: Vec<u64> = s.train.iter().chain(&s.test).filter(|r| r.y == 0).map(|r| r.target).collect();
        negs.sort();
        assert_eq!(negs, vec![8, 9]);
    }

    #[test]
    fn split_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        assert!(split(&[log(0, vec![], vec![1, 2])], 10, 3, &mut rng).is_err());
        assert!(split(&[log(0, vec![0], vec![1, 2])], 3, 3, &mut rng).is_err());
        assert!(split(&[], 3, 0, &mut rng).is_err());
    }

    #[test]
    fn interactions_round_trip_and_bad_labels_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        let recs = vec![Interaction {
            user: 3,
            profile: vec![1, 6],
            seq: vec![10, 11],
            target: 12,
            y: 1,
        }];
        write_interactions(&path, &recs).unwrap();
        assert_eq!(read_interactions(&path).unwrap(), recs);
        std::fs::write(&path, "{\"user\":1,\"profile\":[0],\"seq\":[1],\"target\":2,\"y\":3}\n").unwrap();
        assert!(matches!(read_interactions(&path), Err(Error::Ingestion { .. })));
    }

    #[test]
    fn load_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let data = SyntheticData::generate(&small_spec(12)).unwrap();
        data.write(dir.path()).unwrap();
        let (manifest, loaded) = Dataset::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded.train, data.split.train);
        assert_eq!(loaded.test, data.split.test);
        assert_eq!(manifest.train_records, data.split.train.len());
        let slot = loaded.table.slot(17).unwrap();
        assert_eq!(loaded.table.image_at(slot), data.table.image_at(data.table.slot(17).unwrap()));
        let test_path = dir.path().join(TEST_FILE);
        let mut text = std::fs::read_to_string(&test_path).unwrap();
        text.push('\n');
        std::fs::write(&test_path, text).unwrap();
        assert!(matches!(Dataset::load(&dir.path().join(MANIFEST_FILE)), Err(Error::Checksum { .. })));
    }

    #[test]
    fn batches_cover_every_record_once_with_one_length_each() {
        let data = SyntheticData::generate(&small_spec(13)).unwrap();
        let ds = data.dataset();
        let mut records = ds.train.clone();
        records[0].seq.truncate(7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = ds.batches(&records, 64, Some(&mut rng)).unwrap();
        let mut seen: Vec<u64> = batches.iter().flat_map(|b| b.sample_ids.clone()).collect();
        seen.sort();
        assert_eq!(seen, (0..records.len() as u64).collect::<Vec<_>>());
        for b in &batches {
            assert!(b.len() <= 64);
            assert_eq!(b.seq.len(), b.len() * b.seq_len);
        }
        assert!(batches.iter().any(|b| b.seq_len == 7 && b.len() == 1));
        assert!(ds.batches(&records, 0, None).is_err());
    }

    #[test]
    fn spec_validation_and_presets() {
        assert_eq!(SyntheticSpec::preset("synergy-med").unwrap().n_users, 20_000);
        assert!(SyntheticSpec::preset("huge").is_err());
        let bad = SyntheticSpec {
            seq_len: 2,
            ..small_spec(0)
        };
        assert!(bad.validate().is_err());
        let narrow = SyntheticSpec {
            d_im: 4,
            ..small_spec(0)
        };
        assert!(narrow.validate().is_err());
    }
}
