//! Layer building blocks composed from graph primitives.
//!
//! Weights are stored `[in, out]` so a batch `x[b, in]` maps through `x · W`.
//! Layer `i` of an MLP under prefix `p` owns `p.layer{i}.weight` and
//! `p.layer{i}.bias`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{cosine_parts, Graph, Var};
use super::params::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

pub fn activate(g: &mut Graph, x: Var, act: Activation) -> Var {
    match act {
        Activation::Relu => g.relu(x),
        Activation::Sigmoid => g.sigmoid(x),
        Activation::None => x,
    }
}

fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Registers an affine layer `prefix.weight [in,out]`, `prefix.bias [out]`.
pub fn init_linear(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    store.insert_uniform(
        &format!("{prefix}.weight"),
        &[fan_in, fan_out],
        xavier_bound(fan_in, fan_out),
        rng,
    )?;
    store.insert(&format!("{prefix}.bias"), Tensor::zeros(&[fan_out]))
}

/// Registers an MLP whose layer widths are `dims = [in, h1, .., out]`.
pub fn init_mlp(
    store: &mut ParamStore,
    prefix: &str,
    dims: &[usize],
    rng: &mut impl Rng,
) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::config(format!("mlp {prefix} needs at least two widths")));
    }
    for (i, w) in dims.windows(2).enumerate() {
        init_linear(store, &format!("{prefix}.layer{i}"), w[0], w[1], rng)?;
    }
    Ok(())
}

pub fn linear(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    let xw = g.matmul(x, w)?;
    g.add_row(xw, b)
}

/// `concat(parts)·W + b` evaluated block by block: each part meets its own
/// row slice of `W`, so constant parts never receive a gradient.
pub fn linear_blocks(g: &mut Graph, store: &ParamStore, prefix: &str, parts: &[Var]) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    let width: usize = parts.iter().map(|&p| g.value(p).cols()).sum();
    if width != g.value(w).rows() {
        return Err(Error::dim(format!(
            "{prefix}: inputs of total width {width} for a weight with {} rows",
            g.value(w).rows()
        )));
    }
    let mut acc: Option<Var> = None;
    let mut offset = 0;
    for &part in parts {
        let cols = g.value(part).cols();
        let w_part = g.slice_rows(w, offset, cols)?;
        let term = g.matmul(part, w_part)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
        offset += cols;
    }
    let xw = acc.ok_or_else(|| Error::dim(format!("{prefix}: no inputs")))?;
    g.add_row(xw, b)
}

/// Number of layers registered under `prefix`.
pub fn mlp_depth(store: &ParamStore, prefix: &str) -> usize {
    (0..)
        .take_while(|i| store.get(&format!("{prefix}.layer{i}.weight")).is_some())
        .count()
}

/// Affine + ReLU on hidden layers, `final_act` on the last one.
pub fn mlp_forward(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    final_act: Activation,
) -> Result<Var> {
    let depth = mlp_depth(store, prefix);
    if depth == 0 {
        return Err(Error::contract(format!("no layers under {prefix}")));
    }
    let mut h = x;
    for i in 0..depth {
        h = linear(g, store, &format!("{prefix}.layer{i}"), h)?;
        let act = if i + 1 == depth {
            final_act
        } else {
            Activation::Relu
        };
        h = activate(g, h, act);
    }
    Ok(h)
}

/// `softmax(q·Kᵀ/√d)·V` for one query `q[d]` against `K[n,d]`, `V[n,dv]`.
pub fn scaled_dot_attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let d = g.value(q).numel();
    let (kt, vt) = (g.value(k), g.value(v));
    if kt.cols() != d {
        return Err(Error::dim(format!(
            "query of {d} vs keys of width {}",
            kt.cols()
        )));
    }
    if kt.rows() != vt.rows() {
        return Err(Error::dim(format!(
            "{} keys vs {} values",
            kt.rows(),
            vt.rows()
        )));
    }
    let dv = vt.cols();
    let q_row = g.reshape(q, &[1, d])?;
    let k_t = g.transpose(k);
    let scores = g.matmul(q_row, k_t)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = g.softmax_rows(scores);
    let out = g.matmul(weights, v)?;
    g.reshape(out, &[dv])
}

/// Batched scaled-dot attention where each of `b` queries attends over its
/// own `n` tokens. Token `j` is row `i` of `keys[j]` / `values[j]` for query `i`.
/// Returns the attended values `[b, dv]` and the weights `[b, n]`.
pub fn attend_tokens(
    g: &mut Graph,
    q: Var,
    keys: &[Var],
    values: &[Var],
) -> Result<(Var, Var)> {
    if keys.is_empty() {
        return Err(Error::EmptySequence("attention over zero keys".into()));
    }
    if keys.len() != values.len() {
        return Err(Error::dim(format!(
            "{} keys vs {} values",
            keys.len(),
            values.len()
        )));
    }
    let d = g.value(q).cols();
    let scores = keys
        .iter()
        .map(|&k| g.row_dot(q, k))
        .collect::<Result<Vec<_>>>()?;
    let scores = g.concat_cols(&scores)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = g.softmax_rows(scores);
    let mut out = None;
    for (j, &v) in values.iter().enumerate() {
        let w = g.slice_cols(weights, j, 1)?;
        let term = g.mul_col(v, w)?;
        out = Some(match out {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok((out.expect("at least one value"), weights))
}

/// Registers `wq, wk, wv, wo`, each `[d, d]`, without biases.
pub fn init_mha(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl Rng) -> Result<()> {
    for name in ["wq", "wk", "wv", "wo"] {
        store.insert_uniform(&format!("{prefix}.{name}"), &[d, d], xavier_bound(d, d), rng)?;
    }
    Ok(())
}

pub struct MhaOutput {
    /// `[b, d]`
    pub output: Var,
    /// One `[b, n]` weight matrix per head.
    pub head_weights: Vec<Var>,
}

/// Multi-head attention of queries `q[b,d]` over `tokens`, each `[b,d]`.
/// Heads operate on contiguous column slices of the projected query, keys
/// and values; their outputs are concatenated and projected by `wo`.
pub fn multi_head_attention_tokens(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    q: Var,
    tokens: &[Var],
    heads: usize,
) -> Result<MhaOutput> {
    let d = g.value(q).cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!(
            "model width {d} not divisible into {heads} heads"
        )));
    }
    if tokens.is_empty() {
        return Err(Error::EmptySequence("attention over zero tokens".into()));
    }
    let dh = d / heads;
    let wq = g.param(store, &format!("{prefix}.wq"))?;
    let wk = g.param(store, &format!("{prefix}.wk"))?;
    let wv = g.param(store, &format!("{prefix}.wv"))?;
    let wo = g.param(store, &format!("{prefix}.wo"))?;
    let qp = g.matmul(q, wq)?;
    let mut kp = Vec::with_capacity(tokens.len());
    let mut vp = Vec::with_capacity(tokens.len());
    for &t in tokens {
        kp.push(g.matmul(t, wk)?);
        vp.push(g.matmul(t, wv)?);
    }
    let mut outs = Vec::with_capacity(heads);
    let mut head_weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(qp, h * dh, dh)?;
        let kh = kp
            .iter()
            .map(|&k| g.slice_cols(k, h * dh, dh))
            .collect::<Result<Vec<_>>>()?;
        let vh = vp
            .iter()
            .map(|&v| g.slice_cols(v, h * dh, dh))
            .collect::<Result<Vec<_>>>()?;
        let (o, w) = attend_tokens(g, qh, &kh, &vh)?;
        outs.push(o);
        head_weights.push(w);
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)?
    };
    let output = g.matmul(cat, wo)?;
    Ok(MhaOutput {
        output,
        head_weights,
    })
}

/// Single-query form: `q[d]` attends over the rows of `kv[n,d]`, which serve
/// as both keys and values.
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    q: Var,
    kv: Var,
    heads: usize,
) -> Result<Var> {
    let d = g.value(q).numel();
    let n = g.value(kv).rows();
    if g.value(kv).cols() != d {
        return Err(Error::dim(format!(
            "query of {d} vs tokens of width {}",
            g.value(kv).cols()
        )));
    }
    let q_row = g.reshape(q, &[1, d])?;
    let tokens = (0..n)
        .map(|j| g.slice_rows(kv, j, 1))
        .collect::<Result<Vec<_>>>()?;
    let out = multi_head_attention_tokens(g, store, prefix, q_row, &tokens, heads)?;
    g.reshape(out.output, &[d])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// Set when either input has zero norm; `value` is then 0.
    pub degenerate: bool,
}

pub fn cosine_sim(a: &Tensor, b: &Tensor) -> Result<Cosine> {
    if a.numel() != b.numel() {
        return Err(Error::dim(format!(
            "cosine of {} vs {} values",
            a.numel(),
            b.numel()
        )));
    }
    let (value, na, nb) = cosine_parts(a.data(), b.data());
    Ok(Cosine {
        value,
        degenerate: na == 0.0 || nb == 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn relu(x: f64) -> f64 {
        x.max(0.0)
    }

    /// `x·W + b` by explicit loops.
    fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
        (0..w.cols())
            .map(|o| b.data()[o] + (0..w.rows()).map(|i| x[i] * w.data()[i * w.cols() + o]).sum::<f64>())
            .collect()
    }

    /// Reference attention for one query written with plain loops.
    fn attention_oracle(q: &[f64], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<f64> {
        let scale = (q.len() as f64).sqrt();
        let scores: Vec<f64> = k
            .iter()
            .map(|row| row.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() / scale)
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut out = vec![0.0; v[0].len()];
        for (e, row) in exps.iter().zip(v) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += e / z * x;
            }
        }
        out
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn mlp_zero_weights_with_relu_give_zero() {
        let mut store = ParamStore::new();
        store.insert("m.layer0.weight", Tensor::zeros(&[3, 2])).unwrap();
        store.insert("m.layer0.bias", Tensor::zeros(&[2])).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 3, vec![1.0, -2.0, 3.0]).unwrap());
        let y = mlp_forward(&mut g, &store, "m", x, Activation::Relu).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn mlp_identity_layer_passes_input_through() {
        let mut store = ParamStore::new();
        store.insert("m.layer0.weight", Tensor::identity(3)).unwrap();
        store.insert("m.layer0.bias", Tensor::zeros(&[3])).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 3, vec![1.0, -2.0, 3.0]).unwrap());
        let y = mlp_forward(&mut g, &store, "m", x, Activation::None).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn mlp_matches_hand_affine_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        init_mlp(&mut store, "m", &[4, 5, 2], &mut rng).unwrap();
        store.set("m.layer0.bias", random(&mut rng, &[5])).unwrap();
        store.set("m.layer1.bias", random(&mut rng, &[2])).unwrap();
        let x = random(&mut rng, &[1, 4]);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = mlp_forward(&mut g, &store, "m", xv, Activation::Sigmoid).unwrap();
        let v = |n: &str| store.value(n).unwrap().clone();
        let h: Vec<f64> = affine(x.data(), &v("m.layer0.weight"), &v("m.layer0.bias"))
            .into_iter()
            .map(relu)
            .collect();
        let out: Vec<f64> = affine(&h, &v("m.layer1.weight"), &v("m.layer1.bias"))
            .into_iter()
            .map(|z| 1.0 / (1.0 + (-z).exp()))
            .collect();
        assert_close(g.value(y).data(), &out, 1e-12);
        assert_eq!(mlp_depth(&store, "m"), 2);
    }

    #[test]
    fn linear_blocks_equals_linear_of_concatenation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        init_linear(&mut store, "p", 7, 3, &mut rng).unwrap();
        store.set("p.bias", random(&mut rng, &[3])).unwrap();
        let parts = [random(&mut rng, &[2, 3]), random(&mut rng, &[2, 4])];
        let mut g = Graph::new();
        let vars: Vec<Var> = parts.iter().map(|t| g.constant(t.clone())).collect();
        let blocks = linear_blocks(&mut g, &store, "p", &vars).unwrap();
        let cat = g.concat_cols(&vars).unwrap();
        let whole = linear(&mut g, &store, "p", cat).unwrap();
        assert_close(g.value(blocks).data(), g.value(whole).data(), 1e-12);
        let short = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(linear_blocks(&mut g, &store, "p", &[short]), Err(Error::Dimension(_))));
    }

    #[test]
    fn attention_single_key_returns_its_value() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::vector(vec![0.3, -1.0]).unwrap());
        let k = g.constant(Tensor::matrix(1, 2, vec![5.0, 2.0]).unwrap());
        let v = g.constant(Tensor::matrix(1, 2, vec![7.0, -8.0]).unwrap());
        let out = scaled_dot_attention(&mut g, q, k, v).unwrap();
        assert_eq!(g.value(out).data(), &[7.0, -8.0]);
    }

    #[test]
    fn attention_identical_keys_give_common_value() {
        let mut g = Graph::new();
        let k = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap());
        let v = g.constant(Tensor::from_rows(&[vec![4.0, 4.0], vec![4.0, 4.0], vec![4.0, 4.0]]).unwrap());
        for q in [[0.0, 0.0], [9.0, -3.0]] {
            let q = g.constant(Tensor::vector(q.to_vec()).unwrap());
            let out = scaled_dot_attention(&mut g, q, k, v).unwrap();
            assert_close(g.value(out).data(), &[4.0, 4.0], 1e-12);
        }
    }

    #[test]
    fn attention_two_keys_by_hand() {
        // scores (1·1 + 0·0)/√2 and (0 + 1·2)/√2
        let s1 = 1.0 / 2f64.sqrt();
        let s2 = 2.0 / 2f64.sqrt();
        let w1 = s1.exp() / (s1.exp() + s2.exp());
        let expected = [w1 * 1.0 + (1.0 - w1) * 3.0, w1 * 2.0 + (1.0 - w1) * 4.0];
        let mut g = Graph::new();
        let q = g.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let k = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let v = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let out = scaled_dot_attention(&mut g, q, k, v).unwrap();
        assert_close(g.value(out).data(), &expected, 1e-12);
    }

    fn mha_store(d: usize, rng: &mut ChaCha8Rng) -> ParamStore {
        let mut store = ParamStore::new();
        init_mha(&mut store, "a", d, rng).unwrap();
        store
    }

    #[test]
    fn single_head_identity_projections_reduce_to_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut store = mha_store(3, &mut rng);
        for name in ["wq", "wk", "wv", "wo"] {
            store.set(&format!("a.{name}"), Tensor::identity(3)).unwrap();
        }
        let q = random(&mut rng, &[3]);
        let kv = random(&mut rng, &[4, 3]);
        let mut g = Graph::new();
        let (qv, kvv) = (g.constant(q), g.constant(kv));
        let mha = multi_head_attention(&mut g, &store, "a", qv, kvv, 1).unwrap();
        let plain = scaled_dot_attention(&mut g, qv, kvv, kvv).unwrap();
        assert_close(g.value(mha).data(), g.value(plain).data(), 1e-12);
    }

    #[test]
    fn zero_value_projection_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut store = mha_store(4, &mut rng);
        store.set("a.wv", Tensor::zeros(&[4, 4])).unwrap();
        let mut g = Graph::new();
        let q = g.constant(random(&mut rng, &[4]));
        let kv = g.constant(random(&mut rng, &[3, 4]));
        let out = multi_head_attention(&mut g, &store, "a", q, kv, 2).unwrap();
        assert!(g.value(out).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn multi_head_matches_per_head_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (d, n, heads) = (6, 4, 2);
        let store = mha_store(d, &mut rng);
        let q = random(&mut rng, &[d]);
        let kv = random(&mut rng, &[n, d]);
        let mut g = Graph::new();
        let (qv, kvv) = (g.constant(q.clone()), g.constant(kv.clone()));
        let out = multi_head_attention(&mut g, &store, "a", qv, kvv, heads).unwrap();

        let w = |name: &str| store.value(&format!("a.{name}")).unwrap().clone();
        let zero = |c| Tensor::zeros(&[c]);
        let qp = affine(q.data(), &w("wq"), &zero(d));
        let kp: Vec<Vec<f64>> = (0..n).map(|j| affine(kv.row(j), &w("wk"), &zero(d))).collect();
        let vp: Vec<Vec<f64>> = (0..n).map(|j| affine(kv.row(j), &w("wv"), &zero(d))).collect();
        let dh = d / heads;
        let mut cat = Vec::new();
        for h in 0..heads {
            let r = h * dh..(h + 1) * dh;
            let ks: Vec<Vec<f64>> = kp.iter().map(|k| k[r.clone()].to_vec()).collect();
            let vs: Vec<Vec<f64>> = vp.iter().map(|v| v[r.clone()].to_vec()).collect();
            cat.extend(attention_oracle(&qp[r.clone()], &ks, &vs));
        }
        let expected = affine(&cat, &w("wo"), &zero(d));
        assert_close(g.value(out).data(), &expected, 1e-10);
    }

    #[test]
    fn heads_must_divide_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let store = mha_store(4, &mut rng);
        let mut g = Graph::new();
        let q = g.constant(random(&mut rng, &[4]));
        let kv = g.constant(random(&mut rng, &[2, 4]));
        assert!(matches!(multi_head_attention(&mut g, &store, "a", q, kv, 3), Err(Error::Config(_))));
    }

    #[test]
    fn cosine_examples() {
        let v = Tensor::vector(vec![0.3, -2.0, 5.0]).unwrap();
        let neg = Tensor::vector(vec![-0.3, 2.0, -5.0]).unwrap();
        assert!((cosine_sim(&v, &v).unwrap().value - 1.0).abs() <= 1e-12);
        assert!((cosine_sim(&v, &neg).unwrap().value + 1.0).abs() <= 1e-12);
        let e1 = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let e2 = Tensor::vector(vec![0.0, 1.0]).unwrap();
        assert_eq!(cosine_sim(&e1, &e2).unwrap().value, 0.0);
        let zero = Tensor::zeros(&[2]);
        let c = cosine_sim(&zero, &e1).unwrap();
        assert!(c.degenerate && c.value == 0.0);
        assert!(cosine_sim(&e1, &v).is_err());
    }
}
