//! Synergistic relationship capture.
//!
//! Each modality's expert output is corrupted by a short diffusion chain and
//! then denoised step by step. The noise estimate for one modality comes
//! from attending to the other two modalities (cross-modal interaction),
//! weighted by learned scalars `α_{m,n}`. The three denoised features are
//! fused by a perceptron into the synergy feature `E_syn`. A click-conditioned
//! cosine hinge pulls `E_syn` toward the target representation for clicks.
//!
//! Conventions: `α_t` is linear between the schedule endpoints over
//! `t = 1..=T`, `ᾱ_t = Π_{s≤t} α_s` with `ᾱ_0 = 1`.
//!
//! * forward: `ĥ_t = √α_t · h_{t−1} + √(1−α_t) · ε_t`
//! * reverse: `ĥ_{t−1} = (ĥ_t − (1−α_t)/√(1−ᾱ_t) · ε̂_t) / √α_t`
//!
//! The reverse step adds no stochastic term.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::features::{Modality, PerModality};
use crate::tensor::nn::{self, Activation};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub const ALPHA_START: f64 = 0.999;
pub const ALPHA_END: f64 = 0.98;
pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_WEIGHT_INIT: f64 = 0.5;

pub const FUSE_PREFIX: &str = "src.fuse";
pub const TARGET_PROJECTION: &str = "src.target_projection";

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// The default schedule, linear from 0.999 to 0.98 over `steps` steps.
pub fn build_schedule(steps: usize) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(steps, ALPHA_START, ALPHA_END)
}

impl NoiseSchedule {
    /// Linear grid including both endpoints. A single step takes `start`.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("diffusion needs at least one step"));
        }
        for (name, a) in [("alpha_start", start), ("alpha_end", end)] {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::config(format!("{name} = {a} outside (0, 1]")));
            }
        }
        let alpha = if steps == 1 {
            vec![start]
        } else {
            let span = (steps - 1) as f64;
            (0..steps)
                .map(|i| start + (end - start) * i as f64 / span)
                .collect()
        };
        NoiseSchedule::from_alphas(alpha)
    }

    /// Arbitrary per-step values, e.g. an `α_t = 1` step for tests.
    pub fn from_alphas(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::config("diffusion needs at least one step"));
        }
        if let Some(a) = alpha.iter().find(|&&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::config(format!("alpha {a} outside (0, 1]")));
        }
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut running = 1.0;
        for &a in &alpha {
            running *= a;
            alpha_bar.push(running);
        }
        Ok(NoiseSchedule { alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::contract(format!(
                "step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `α_t` for `t` in `1..=T`.
    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha[t - 1])
    }

    /// `ᾱ_t` for `t` in `0..=T`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check(t)?;
        Ok(self.alpha_bar[t - 1])
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Coefficients `(on h, on ε)` of the forward step.
    pub fn forward_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        let a = self.alpha(t)?;
        Ok((a.sqrt(), (1.0 - a).sqrt()))
    }

    /// Coefficients `(on ĥ, on ε̂)` of the reverse step.
    pub fn reverse_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        let a = self.alpha(t)?;
        let ab = self.alpha_bar(t)?;
        if ab >= 1.0 {
            return Err(Error::Singularity(format!(
                "cumulative alpha at step {t} is 1; the noise coefficient divides by zero"
            )));
        }
        let inv = 1.0 / a.sqrt();
        Ok((inv, -inv * (1.0 - a) / (1.0 - ab).sqrt()))
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn combine(a: &Tensor, ca: f64, b: &Tensor, cb: f64) -> Result<Tensor> {
    same_shape(a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| ca * x + cb * y)
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// One forward (noising) step on plain values.
pub fn forward_step(h: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let (ch, ce) = sched.forward_coefficients(t)?;
    combine(h, ch, eps, ce)
}

/// One reverse (denoising) step on plain values.
pub fn reverse_step(h_t: &Tensor, eps_hat: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    let (ch, ce) = sched.reverse_coefficients(t)?;
    combine(h_t, ch, eps_hat, ce)
}

/// Algebraic inverse of [`forward_step`] given the same noise.
pub fn exact_invert(h_t: &Tensor, eps: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    let a = sched.alpha(t)?;
    same_shape(h_t, eps)?;
    let (s, r) = (a.sqrt(), (1.0 - a).sqrt());
    let data = h_t
        .data()
        .iter()
        .zip(eps.data())
        .map(|(h, e)| (h - r * e) / s)
        .collect();
    Tensor::new(h_t.shape().to_vec(), data)
}

/// [`forward_step`] recorded on a graph.
pub fn forward_step_var(g: &mut Graph, h: Var, t: usize, eps: Var, sched: &NoiseSchedule) -> Result<Var> {
    let (ch, ce) = sched.forward_coefficients(t)?;
    g.lin_comb(&[(h, ch), (eps, ce)])
}

/// [`reverse_step`] recorded on a graph.
pub fn reverse_step_var(g: &mut Graph, h_t: Var, eps_hat: Var, t: usize, sched: &NoiseSchedule) -> Result<Var> {
    let (ch, ce) = sched.reverse_coefficients(t)?;
    g.lin_comb(&[(h_t, ch), (eps_hat, ce)])
}

/// Per-modality features at one point of the chain.
#[derive(Clone, Copy, Debug)]
pub struct DiffusionState {
    pub h: PerModality<Var>,
    pub t: usize,
}

/// Ordered pairs `(m, n)`, `m ≠ n`, in the order their weights are stored.
pub fn ordered_pairs() -> impl Iterator<Item = (Modality, Modality)> {
    Modality::ALL
        .into_iter()
        .flat_map(|m| Modality::ALL.into_iter().filter(move |&n| n != m).map(move |n| (m, n)))
}

pub fn weight_name(m: Modality, n: Modality) -> String {
    format!("src.alpha.{m}_{n}")
}

/// Registers the six `α_{m,n}` scalars with a common initial value.
pub fn init_fusion_weights(store: &mut ParamStore, init: f64) -> Result<()> {
    for (m, n) in ordered_pairs() {
        store.insert(&weight_name(m, n), Tensor::scalar(init))?;
    }
    Ok(())
}

/// Graph handles to the six cross-modal weights.
#[derive(Clone, Debug)]
pub struct FusionWeights {
    vars: Vec<((Modality, Modality), Var)>,
}

impl FusionWeights {
    pub fn from_store(g: &mut Graph, store: &ParamStore) -> Result<Self> {
        let vars = ordered_pairs()
            .map(|(m, n)| Ok(((m, n), g.param(store, &weight_name(m, n))?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(FusionWeights { vars })
    }

    /// Fixed weights, for inspection and tests.
    pub fn constants(g: &mut Graph, value: impl Fn(Modality, Modality) -> f64) -> Self {
        let vars = ordered_pairs()
            .map(|(m, n)| ((m, n), g.constant(Tensor::scalar(value(m, n)))))
            .collect();
        FusionWeights { vars }
    }

    pub fn get(&self, m: Modality, n: Modality) -> Result<Var> {
        self.vars
            .iter()
            .find(|(k, _)| *k == (m, n))
            .map(|&(_, v)| v)
            .ok_or_else(|| Error::contract(format!("no weight for pair ({m}, {n})")))
    }
}

/// Cross-modal interaction: `h^m` attends over the single key/value `h^n`.
pub fn cross_interaction(g: &mut Graph, query: Var, other: Var) -> Result<Var> {
    let (out, _) = nn::attend_tokens(g, query, &[other], &[other])?;
    Ok(out)
}

/// Predicted noise per modality: `ε̂^m = Σ_{n≠m} α_{m,n} · CI(h^m, h^n)`.
pub fn ci_denoise(g: &mut Graph, state: &DiffusionState, weights: &FusionWeights) -> Result<PerModality<Var>> {
    state.h.try_map(|m, &hm| {
        let mut acc: Option<Var> = None;
        for n in Modality::ALL.into_iter().filter(|&n| n != m) {
            let ci = cross_interaction(g, hm, *state.h.get(n))?;
            let term = g.scale_by(ci, weights.get(m, n)?)?;
            acc = Some(match acc {
                None => term,
                Some(a) => g.add(a, term)?,
            });
        }
        Ok(acc.expect("two other modalities"))
    })
}

/// Gaussian noise for every step and modality, each `[batch, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionNoise {
    steps: Vec<PerModality<Tensor>>,
}

impl DiffusionNoise {
    pub fn from_steps(steps: Vec<PerModality<Tensor>>) -> Self {
        DiffusionNoise { steps }
    }

    pub fn zeros(steps: usize, batch: usize, width: usize) -> Self {
        let z = Tensor::zeros(&[batch, width]);
        DiffusionNoise {
            steps: vec![PerModality::new(z.clone(), z.clone(), z); steps],
        }
    }

    /// Draws every entry from `rng`, step by step, modality by modality.
    pub fn sample(rng: &mut impl Rng, steps: usize, batch: usize, width: usize) -> Result<Self> {
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let mut draw = || -> Result<Tensor> {
                let data = (0..batch * width).map(|_| rng.sample(StandardNormal)).collect();
                Tensor::new(vec![batch, width], data)
            };
            out.push(PerModality::new(draw()?, draw()?, draw()?));
        }
        Ok(DiffusionNoise { steps: out })
    }

    /// Noise that depends only on `(seed, sample id)`, so a sample scores the
    /// same regardless of batch composition or worker assignment.
    pub fn per_sample(seed: u64, sample_ids: &[u64], steps: usize, width: usize) -> Result<Self> {
        let b = sample_ids.len();
        let mut buf = vec![PerModality::new(vec![0.0; b * width], vec![0.0; b * width], vec![0.0; b * width]); steps];
        for (row, &id) in sample_ids.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, id));
            for step in buf.iter_mut() {
                for m in Modality::ALL {
                    let dst = &mut step.get_mut(m)[row * width..(row + 1) * width];
                    for x in dst {
                        *x = rng.sample(StandardNormal);
                    }
                }
            }
        }
        let steps = buf
            .into_iter()
            .map(|p| p.try_map(|_, d| Tensor::new(vec![b, width], d.clone())))
            .collect::<Result<Vec<_>>>()?;
        Ok(DiffusionNoise { steps })
    }

    pub fn steps(&self) -> usize {
        self.steps.len()
    }

    /// Noise of step `t` in `1..=T`.
    pub fn at(&self, t: usize) -> Result<&PerModality<Tensor>> {
        t.checked_sub(1)
            .and_then(|i| self.steps.get(i))
            .ok_or_else(|| Error::contract(format!("no noise for step {t}")))
    }
}

/// SplitMix64 finalizer over the pair, so nearby ids get unrelated streams.
pub fn sample_seed(seed: u64, id: u64) -> u64 {
    let mut z = seed ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Multi-step synergistic interaction: noise every modality for `t = 1..=T`,
/// then denoise for `t = T..=1` with cross-modal noise estimates. Returns
/// the denoised `ĥ_0` per modality.
pub fn run_mssfi(
    g: &mut Graph,
    h0: PerModality<Var>,
    sched: &NoiseSchedule,
    weights: &FusionWeights,
    noise: &DiffusionNoise,
) -> Result<PerModality<Var>> {
    if noise.steps() != sched.steps() {
        return Err(Error::dim(format!(
            "{} noise steps for a {}-step schedule",
            noise.steps(),
            sched.steps()
        )));
    }
    let mut h = h0;
    for t in 1..=sched.steps() {
        let eps = noise.at(t)?;
        h = h.try_map(|m, &x| {
            let e = g.constant(eps.get(m).clone());
            forward_step_var(g, x, t, e, sched)
        })?;
    }
    for t in (1..=sched.steps()).rev() {
        let state = DiffusionState { h, t };
        let eps_hat = ci_denoise(g, &state, weights)?;
        h = h.try_map(|m, &x| reverse_step_var(g, x, *eps_hat.get(m), t, sched))?;
    }
    Ok(h)
}

/// Synergy fusion perceptron `3·d_e → hidden → d_e`.
pub fn init_synergy(store: &mut ParamStore, d_e: usize, hidden: usize, target_dim: usize, rng: &mut impl Rng) -> Result<()> {
    nn::init_mlp(store, FUSE_PREFIX, &[3 * d_e, hidden, d_e], rng)?;
    nn::init_linear(store, TARGET_PROJECTION, target_dim, d_e, rng)
}

/// `E_syn = MLP([ĥ_0^im, ĥ_0^te, ĥ_0^id])`.
pub fn synergy_fuse(g: &mut Graph, store: &ParamStore, h: &PerModality<Var>) -> Result<Var> {
    let cat = g.concat_cols(&[h.im, h.te, h.id])?;
    nn::mlp_forward(g, store, FUSE_PREFIX, cat, Activation::None)
}

/// Projection of the concatenated target embeddings `[id, im, te]` used as
/// the synergy loss anchor.
pub fn target_representation(g: &mut Graph, store: &ParamStore, targets: &[Var]) -> Result<Var> {
    nn::linear_blocks(g, store, TARGET_PROJECTION, targets)
}

/// Which negative-sample branch the synergy loss uses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NegativeBranch {
    /// `max(0, −1 − cos)`: as printed; never positive for a true cosine.
    Verbatim,
    /// `max(0, cos − margin)`: a corrected form that does penalize negatives.
    Margin(f64),
}

/// Per-sample synergy loss `[b, 1]`:
/// `y·max(0, 1 − cos) + (1 − y)·negative(cos)`.
pub fn synergy_loss(
    g: &mut Graph,
    e_syn: Var,
    e_target: Var,
    labels: &[f64],
    branch: NegativeBranch,
) -> Result<Var> {
    let cos = g.row_cosine(e_syn, e_target)?;
    let b = g.value(cos).rows();
    if labels.len() != b {
        return Err(Error::dim(format!("{} labels for {b} samples", labels.len())));
    }
    let neg_cos = g.scale(cos, -1.0);
    let pos_gap = g.add_scalar(neg_cos, 1.0);
    let pos = g.relu(pos_gap);
    let neg_gap = match branch {
        NegativeBranch::Verbatim => g.add_scalar(neg_cos, -1.0),
        NegativeBranch::Margin(margin) => g.add_scalar(cos, -margin),
    };
    let neg = g.relu(neg_gap);
    let y = g.constant(Tensor::new(vec![b, 1], labels.to_vec())?);
    let not_y = g.constant(Tensor::new(vec![b, 1], labels.iter().map(|v| 1.0 - v).collect())?);
    let a = g.mul(y, pos)?;
    let c = g.mul(not_y, neg)?;
    g.add(a, c)
}
