//! Knowledge extraction and decoupling.
//!
//! Each modality gets a private expert and a shared expert. The ID expert is
//! an embedded DIN: target attention over the ID sequence, sum pooling, then a
//! perceptron. Shared-expert outputs are averaged into one common feature,
//! and a per-modality sigmoid gate mixes each expert output with it. The
//! decoupling loss pushes expert outputs apart and pulls shared outputs
//! together through pairwise cosine similarity.

use rand::Rng;

use crate::error::{Error, Result};
use crate::features::{self, Modality, PerModality};
use crate::tensor::nn::{self, Activation};
use crate::tensor::{Graph, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExpertDims {
    pub d_id: usize,
    pub d_im: usize,
    pub d_te: usize,
    /// Expert output width.
    pub d_e: usize,
    pub hidden: usize,
    pub attention_hidden: usize,
}

impl ExpertDims {
    pub fn input(&self, m: Modality) -> usize {
        match m {
            Modality::Id => self.d_id,
            Modality::Im => self.d_im,
            Modality::Te => self.d_te,
        }
    }
}

pub const ID_ATTENTION: &str = "experts.id.attention";
pub const ID_MLP: &str = "experts.id.mlp";

pub fn pooling_prefix(m: Modality) -> String {
    format!("features.attention.{m}")
}

pub fn expert_prefix(m: Modality) -> String {
    format!("experts.{m}")
}

pub fn projection_prefix(m: Modality) -> String {
    format!("experts.projection.{m}")
}

pub fn share_prefix(m: Modality) -> String {
    format!("experts.share.{m}")
}

pub fn gate_prefix(m: Modality) -> String {
    format!("experts.gate.{m}")
}

/// DIN attention unit plus perceptron for the ID modality.
pub fn init_id_expert(store: &mut ParamStore, dims: &ExpertDims, rng: &mut impl Rng) -> Result<()> {
    features::init_attention_unit(store, ID_ATTENTION, dims.d_id, dims.attention_hidden, rng)?;
    nn::init_mlp(store, ID_MLP, &[dims.d_id, dims.hidden, dims.d_e], rng)
}

/// Target-attention units that pool the image and text sequences.
pub fn init_pooling(store: &mut ParamStore, dims: &ExpertDims, rng: &mut impl Rng) -> Result<()> {
    for m in [Modality::Im, Modality::Te] {
        features::init_attention_unit(store, &pooling_prefix(m), dims.input(m), dims.attention_hidden, rng)?;
    }
    Ok(())
}

/// Image/text experts, the three shared experts and the three gates.
pub fn init_experts(store: &mut ParamStore, dims: &ExpertDims, rng: &mut impl Rng) -> Result<()> {
    for m in [Modality::Im, Modality::Te] {
        nn::init_mlp(store, &expert_prefix(m), &[dims.input(m), dims.hidden, dims.d_e], rng)?;
    }
    for m in Modality::ALL {
        nn::init_mlp(store, &share_prefix(m), &[dims.input(m), dims.hidden, dims.d_e], rng)?;
    }
    for m in Modality::ALL {
        nn::init_linear(store, &gate_prefix(m), dims.d_e, dims.d_e, rng)?;
    }
    Ok(())
}

/// Single linear maps standing in for the image/text experts when the
/// extraction stage is ablated.
pub fn init_projections(store: &mut ParamStore, dims: &ExpertDims, rng: &mut impl Rng) -> Result<()> {
    for m in [Modality::Im, Modality::Te] {
        nn::init_linear(store, &projection_prefix(m), dims.input(m), dims.d_e, rng)?;
    }
    Ok(())
}

/// Private expert for the image or text modality. The ID modality goes
/// through [`id_expert`].
pub fn expert_forward(g: &mut Graph, store: &ParamStore, pooled: Var, m: Modality) -> Result<Var> {
    if m == Modality::Id {
        return Err(Error::contract("the id modality uses the DIN expert"));
    }
    nn::mlp_forward(g, store, &expert_prefix(m), pooled, Activation::None)
}

pub struct IdExpertOutput {
    /// `[b, d_e]`
    pub expert: Var,
    /// Attention-pooled ID feature before the perceptron, `[b, d_id]`.
    pub pooled: Var,
    pub weights: Var,
}

/// DIN over the ID sequence `[b·n, d_id]` against target IDs `[b, d_id]`.
pub fn id_expert(
    g: &mut Graph,
    store: &ParamStore,
    seq: Var,
    target: Var,
    n: usize,
) -> Result<IdExpertOutput> {
    if n == 0 || g.value(seq).rows() == 0 {
        return Err(Error::EmptySequence("id behavior sequence".into()));
    }
    let att = features::target_attention_batch(g, store, ID_ATTENTION, seq, target, n)?;
    let pooled = features::sum_pool_batch(g, att.weighted, n)?;
    let expert = nn::mlp_forward(g, store, ID_MLP, pooled, Activation::None)?;
    Ok(IdExpertOutput {
        expert,
        pooled,
        weights: att.weights,
    })
}

pub struct SharedOutput {
    pub share: PerModality<Var>,
    /// Arithmetic mean of the three shared outputs.
    pub mean: Var,
}

/// Runs every shared expert on its modality's pooled feature and averages.
pub fn shared_forward(g: &mut Graph, store: &ParamStore, pooled: &PerModality<Var>) -> Result<SharedOutput> {
    let share = pooled.try_map(|m, &x| nn::mlp_forward(g, store, &share_prefix(m), x, Activation::None))?;
    let mean = mean_of_three(g, share.id, share.im, share.te)?;
    Ok(SharedOutput { share, mean })
}

pub fn mean_of_three(g: &mut Graph, a: Var, b: Var, c: Var) -> Result<Var> {
    let s = g.add(a, b)?;
    let s = g.add(s, c)?;
    Ok(g.scale(s, 1.0 / 3.0))
}

/// `w ⊙ expert + (1 − w) ⊙ shared` for a given gate `w`.
pub fn mix_with_gate(g: &mut Graph, expert: Var, shared: Var, w: Var) -> Result<Var> {
    let keep = g.mul(w, expert)?;
    let neg = g.scale(w, -1.0);
    let rest = g.add_scalar(neg, 1.0);
    let borrowed = g.mul(rest, shared)?;
    g.add(keep, borrowed)
}

pub struct GateOutput {
    pub fused: Var,
    pub gate: Var,
}

/// Gate computed from the modality's own expert output, then mixed with the
/// shared feature.
pub fn gate_fuse(g: &mut Graph, store: &ParamStore, m: Modality, expert: Var, shared: Var) -> Result<GateOutput> {
    let logits = nn::linear(g, store, &gate_prefix(m), expert)?;
    let gate = g.sigmoid(logits);
    let fused = mix_with_gate(g, expert, shared, gate)?;
    Ok(GateOutput { fused, gate })
}

/// Sum of cosines over ordered pairs of distinct modalities, `[b, 1]`.
pub fn pairwise_cosine_sum(g: &mut Graph, v: &PerModality<Var>) -> Result<Var> {
    let a = g.row_cosine(v.id, v.im)?;
    let b = g.row_cosine(v.id, v.te)?;
    let c = g.row_cosine(v.im, v.te)?;
    let s = g.add(a, b)?;
    let s = g.add(s, c)?;
    // cosine is symmetric, so each unordered pair counts twice
    Ok(g.scale(s, 2.0))
}

/// Per-sample decoupling loss `[b, 1]`: expert pairwise cosines minus shared
/// pairwise cosines. Three cosines sum to at least −1.5, so each side lies
/// in `[-3, 6]` and the loss in `[-9, 9]`.
pub fn decoupling_loss(g: &mut Graph, experts: &PerModality<Var>, shares: &PerModality<Var>) -> Result<Var> {
    let e = pairwise_cosine_sum(g, experts)?;
    let s = pairwise_cosine_sum(g, shares)?;
    g.sub(e, s)
}

/// Everything the extraction stage produces for a batch.
pub struct MfeOutput {
    pub pooled: PerModality<Var>,
    pub expert: PerModality<Var>,
    pub share: PerModality<Var>,
    pub expert_sh: Var,
    pub fused: PerModality<Var>,
    pub gates: PerModality<Var>,
}

/// Full extraction for a batch whose pooled features are already computed
/// and whose ID expert has run.
pub fn mfe_forward(
    g: &mut Graph,
    store: &ParamStore,
    pooled: PerModality<Var>,
    id_expert_out: Var,
) -> Result<MfeOutput> {
    let expert = PerModality {
        id: id_expert_out,
        im: expert_forward(g, store, pooled.im, Modality::Im)?,
        te: expert_forward(g, store, pooled.te, Modality::Te)?,
    };
    let shared = shared_forward(g, store, &pooled)?;
    let mut fused = PerModality::new(expert.id, expert.im, expert.te);
    let mut gates = fused;
    for m in Modality::ALL {
        let out = gate_fuse(g, store, m, *expert.get(m), shared.mean)?;
        *fused.get_mut(m) = out.fused;
        *gates.get_mut(m) = out.gate;
    }
    Ok(MfeOutput {
        pooled,
        expert,
        share: shared.share,
        expert_sh: shared.mean,
        fused,
        gates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn dims() -> ExpertDims {
        ExpertDims {
            d_id: 4,
            d_im: 6,
            d_te: 5,
            d_e: 3,
            hidden: 7,
            attention_hidden: 4,
        }
    }

    fn full_store(seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_id_expert(&mut store, &dims(), &mut rng).unwrap();
        init_experts(&mut store, &dims(), &mut rng).unwrap();
        let names: Vec<String> = store.names().filter(|n| n.ends_with("bias")).map(String::from).collect();
        for name in names {
            let shape = store.value(&name).unwrap().shape().to_vec();
            store.set(&name, random(&mut rng, &shape)).unwrap();
        }
        store
    }

    fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
        (0..w.cols())
            .map(|o| b.data()[o] + (0..w.rows()).map(|i| x[i] * w.data()[i * w.cols() + o]).sum::<f64>())
            .collect()
    }

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn expert_of_zero_input_with_zero_biases_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        init_experts(&mut store, &dims(), &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 6]));
        let y = expert_forward(&mut g, &store, x, Modality::Im).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        assert!(expert_forward(&mut g, &store, x, Modality::Id).is_err());
    }

    #[test]
    fn identity_single_layer_expert_passes_input_through() {
        let mut store = ParamStore::new();
        store.insert("experts.te.layer0.weight", Tensor::identity(3)).unwrap();
        store.insert("experts.te.layer0.bias", Tensor::zeros(&[3])).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 3, vec![-1.0, 0.5, 2.0]).unwrap());
        let y = expert_forward(&mut g, &store, x, Modality::Te).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, 0.5, 2.0]);
    }

    #[test]
    fn expert_matches_affine_relu_affine() {
        let store = full_store(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[1, 6]);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = expert_forward(&mut g, &store, xv, Modality::Im).unwrap();
        let v = |n: &str| store.value(n).unwrap();
        let h: Vec<f64> = affine(x.data(), v("experts.im.layer0.weight"), v("experts.im.layer0.bias"))
            .into_iter()
            .map(|z| z.max(0.0))
            .collect();
        let out = affine(&h, v("experts.im.layer1.weight"), v("experts.im.layer1.bias"));
        for (a, b) in g.value(y).data().iter().zip(&out) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    fn run_id_expert(store: &ParamStore, seq: &Tensor, target: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let mut g = Graph::new();
        let n = seq.rows();
        let (s, t) = (g.constant(seq.clone()), g.constant(target.clone()));
        let out = id_expert(&mut g, store, s, t, n).unwrap();
        (g.value(out.expert).data().to_vec(), g.value(out.pooled).data().to_vec())
    }

    fn id_mlp(store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let v = |n: &str| store.value(n).unwrap();
        let h: Vec<f64> = affine(x, v("experts.id.mlp.layer0.weight"), v("experts.id.mlp.layer0.bias"))
            .into_iter()
            .map(|z| z.max(0.0))
            .collect();
        affine(&h, v("experts.id.mlp.layer1.weight"), v("experts.id.mlp.layer1.bias"))
    }

    #[test]
    fn single_item_equal_to_target_goes_straight_to_the_perceptron() {
        let store = full_store(4);
        let item = Tensor::matrix(1, 4, vec![0.3, -0.2, 0.8, 0.1]).unwrap();
        let (out, pooled) = run_id_expert(&store, &item, &item);
        assert_eq!(pooled, item.data());
        for (a, b) in out.iter().zip(id_mlp(&store, item.data())) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn duplicated_item_pools_to_the_same_feature() {
        // Softmax gives each copy weight ½, so the pooled feature equals the
        // single item rather than doubling it.
        let store = full_store(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let item = random(&mut rng, &[1, 4]);
        let target = random(&mut rng, &[1, 4]);
        let twice = Tensor::from_rows(&[item.row(0).to_vec(), item.row(0).to_vec()]).unwrap();
        let (one, pooled_one) = run_id_expert(&store, &item, &target);
        let (two, pooled_two) = run_id_expert(&store, &twice, &target);
        let manual: Vec<f64> = item.data().iter().map(|x| 0.5 * x + 0.5 * x).collect();
        for ((a, b), m) in pooled_one.iter().zip(&pooled_two).zip(&manual) {
            assert!((a - b).abs() <= 1e-15 && (b - m).abs() <= 1e-15);
        }
        for (a, b) in one.iter().zip(&two) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn id_expert_is_permutation_invariant() {
        let store = full_store(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let seq = random(&mut rng, &[4, 4]);
        let target = random(&mut rng, &[1, 4]);
        let permuted = Tensor::from_rows(&[2, 0, 3, 1].map(|j| seq.row(j).to_vec())).unwrap();
        let (a, _) = run_id_expert(&store, &seq, &target);
        let (b, _) = run_id_expert(&store, &permuted, &target);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn id_expert_rejects_empty_sequence() {
        let store = full_store(9);
        let mut g = Graph::new();
        let s = g.constant(Tensor::zeros(&[0, 4]));
        let t = g.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(id_expert(&mut g, &store, s, t, 0), Err(Error::EmptySequence(_))));
    }

    #[test]
    fn mean_of_three_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut g = Graph::new();
        let v = g.constant(Tensor::matrix(1, 3, vec![0.3, -0.6, 0.9]).unwrap());
        let m = mean_of_three(&mut g, v, v, v).unwrap();
        for (a, b) in g.value(m).data().iter().zip([0.3, -0.6, 0.9]) {
            assert!((a - b).abs() <= 1e-15);
        }
        let neg = g.scale(v, -1.0);
        let zero = g.constant(Tensor::zeros(&[1, 3]));
        let m = mean_of_three(&mut g, v, neg, zero).unwrap();
        assert!(g.value(m).data().iter().all(|&x| x == 0.0));
        let ts = [random(&mut rng, &[2, 3]), random(&mut rng, &[2, 3]), random(&mut rng, &[2, 3])];
        let vs: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let m = mean_of_three(&mut g, vs[0], vs[1], vs[2]).unwrap();
        for i in 0..6 {
            let expected = (ts[0].data()[i] + ts[1].data()[i] + ts[2].data()[i]) / 3.0;
            assert!((g.value(m).data()[i] - expected).abs() <= 1e-12);
        }
    }

    #[test]
    fn shared_forward_averages_the_three_shares() {
        let store = full_store(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut g = Graph::new();
        let pooled = PerModality::new(
            g.constant(random(&mut rng, &[2, 4])),
            g.constant(random(&mut rng, &[2, 6])),
            g.constant(random(&mut rng, &[2, 5])),
        );
        let out = shared_forward(&mut g, &store, &pooled).unwrap();
        for i in 0..6 {
            let s: f64 = Modality::ALL.iter().map(|&m| g.value(*out.share.get(m)).data()[i]).sum();
            assert!((g.value(out.mean).data()[i] - s / 3.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn gate_boundaries() {
        let mut store = full_store(13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let expert = random(&mut rng, &[2, 3]);
        let shared = random(&mut rng, &[2, 3]);
        for (bias, expected) in [(1000.0, &expert), (-1000.0, &shared)] {
            store.set("experts.gate.im.bias", Tensor::full(&[3], bias)).unwrap();
            let mut g = Graph::new();
            let (e, s) = (g.constant(expert.clone()), g.constant(shared.clone()));
            let out = gate_fuse(&mut g, &store, Modality::Im, e, s).unwrap();
            assert_eq!(g.value(out.fused).data(), expected.data());
        }
        let mut g = Graph::new();
        let (e, s) = (g.constant(expert.clone()), g.constant(shared.clone()));
        let half = g.constant(Tensor::full(&[2, 3], 0.5));
        let mixed = mix_with_gate(&mut g, e, s, half).unwrap();
        for i in 0..6 {
            let avg = (expert.data()[i] + shared.data()[i]) / 2.0;
            assert!((g.value(mixed).data()[i] - avg).abs() <= 1e-15);
        }
    }

    fn l_con(experts: [&[f64]; 3], shares: [&[f64]; 3]) -> f64 {
        let mut g = Graph::new();
        let row = |g: &mut Graph, v: &[f64]| g.constant(Tensor::matrix(1, v.len(), v.to_vec()).unwrap());
        let e = PerModality::new(row(&mut g, experts[0]), row(&mut g, experts[1]), row(&mut g, experts[2]));
        let s = PerModality::new(row(&mut g, shares[0]), row(&mut g, shares[1]), row(&mut g, shares[2]));
        let l = decoupling_loss(&mut g, &e, &s).unwrap();
        g.value(l).data()[0]
    }

    #[test]
    fn decoupling_loss_identities() {
        let (e1, e2, e3) = ([1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]);
        let v = [0.4, -1.0, 2.0];
        assert!((l_con([&e1, &e2, &e3], [&v, &v, &v]) + 6.0).abs() <= 1e-12);
        assert!(l_con([&v, &v, &v], [&v, &v, &v]).abs() <= 1e-12);
    }

    #[test]
    fn decoupling_loss_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let vs: Vec<Tensor> = (0..6).map(|_| random(&mut rng, &[4])).collect();
        let d = |i: usize| vs[i].data();
        let mut expected = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    expected += cos(d(i), d(j)) - cos(d(i + 3), d(j + 3));
                }
            }
        }
        let got = l_con([d(0), d(1), d(2)], [d(3), d(4), d(5)]);
        assert!((got - expected).abs() <= 1e-10);
    }

    #[test]
    fn mfe_forward_wires_every_block() {
        let store = full_store(16);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut g = Graph::new();
        let pooled = PerModality::new(
            g.constant(random(&mut rng, &[2, 4])),
            g.constant(random(&mut rng, &[2, 6])),
            g.constant(random(&mut rng, &[2, 5])),
        );
        let id_out = g.constant(random(&mut rng, &[2, 3]));
        let out = mfe_forward(&mut g, &store, pooled, id_out).unwrap();
        assert_eq!(out.expert.id, id_out);
        for m in Modality::ALL {
            assert_eq!(g.shape(*out.fused.get(m)), &[2, 3]);
            assert!(g.value(*out.gates.get(m)).data().iter().all(|&w| w > 0.0 && w < 1.0));
        }
    }
}
