//! Dynamic adaptive fusion of the auxiliary features onto the ID feature.
//!
//! A sigmoid gate driven by the target's ID embedding weights each auxiliary
//! block (image expert, text expert, shared, synergy). The gated blocks are
//! concatenated and passed through one rank-one cross layer
//! `E′(E′·w_c) + b_c + E′`. The result is split back into one token per block
//! and the fused ID feature attends over those tokens with multi-head
//! attention; a residual keeps the ID feature intact when the auxiliary path
//! carries nothing. A perceptron with a sigmoid output produces the click
//! probability.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::nn::{self, Activation, MhaOutput};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub const GATE_PREFIX: &str = "fusion.gate";
pub const CROSS_WEIGHT: &str = "fusion.cross.weight";
pub const CROSS_BIAS: &str = "fusion.cross.bias";
pub const ATTENTION_PREFIX: &str = "fusion.attention";
pub const HEAD_PREFIX: &str = "head.mlp";

/// Gate, cross layer and attention for `blocks` auxiliary blocks of width `d_e`.
pub fn init_fusion(
    store: &mut ParamStore,
    d_id: usize,
    d_e: usize,
    blocks: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let width = blocks * d_e;
    nn::init_linear(store, GATE_PREFIX, d_id, width, rng)?;
    let bound = 1.0 / (width as f64).sqrt();
    store.insert_uniform(CROSS_WEIGHT, &[width], bound, rng)?;
    store.insert(CROSS_BIAS, Tensor::zeros(&[width]))?;
    nn::init_mha(store, ATTENTION_PREFIX, d_e, rng)
}

/// Prediction perceptron `input → hidden → 1`.
pub fn init_head(store: &mut ParamStore, input: usize, hidden: usize, rng: &mut impl Rng) -> Result<()> {
    nn::init_mlp(store, HEAD_PREFIX, &[input, hidden, 1], rng)
}

pub struct GatedBlocks {
    /// `[b, blocks·d_e]`, the gated blocks side by side.
    pub concat: Var,
    /// The gate values, same shape as `concat`.
    pub gates: Var,
}

/// Gates computed from the target ID embedding `[b, d_id]`.
pub fn gate_weights(g: &mut Graph, store: &ParamStore, target_id: Var) -> Result<Var> {
    let logits = nn::linear(g, store, GATE_PREFIX, target_id)?;
    Ok(g.sigmoid(logits))
}

/// Multiplies each block by its slice of `gates` and concatenates.
pub fn apply_gates(g: &mut Graph, gates: Var, blocks: &[Var]) -> Result<GatedBlocks> {
    let cat = if blocks.len() == 1 {
        blocks[0]
    } else {
        g.concat_cols(blocks)?
    };
    if g.shape(gates) != g.shape(cat) {
        return Err(Error::dim(format!(
            "gates {:?} vs blocks {:?}",
            g.shape(gates),
            g.shape(cat)
        )));
    }
    let concat = g.mul(gates, cat)?;
    Ok(GatedBlocks { concat, gates })
}

/// Target-conditioned gating of the auxiliary blocks.
pub fn modality_gate(g: &mut Graph, store: &ParamStore, target_id: Var, blocks: &[Var]) -> Result<GatedBlocks> {
    if blocks.is_empty() {
        return Err(Error::contract("no auxiliary blocks to gate"));
    }
    let gates = gate_weights(g, store, target_id)?;
    apply_gates(g, gates, blocks)
}

/// `E′(E′·w_c) + b_c + E′` per row, with `w` and `b` given as graph values.
pub fn cross_layer(g: &mut Graph, e: Var, w: Var, b: Var) -> Result<Var> {
    let width = g.value(e).cols();
    let w_col = g.reshape(w, &[width, 1])?;
    let s = g.matmul(e, w_col)?;
    let rank_one = g.mul_col(e, s)?;
    let with_bias = g.add_row(rank_one, b)?;
    g.add(with_bias, e)
}

pub fn cross_net(g: &mut Graph, store: &ParamStore, e: Var) -> Result<Var> {
    let w = g.param(store, CROSS_WEIGHT)?;
    let b = g.param(store, CROSS_BIAS)?;
    cross_layer(g, e, w, b)
}

pub struct FusedOutput {
    /// `[b, d_e]`
    pub e_att: Var,
    pub attention: MhaOutput,
}

/// Multi-head attention of the ID feature over the `d_e`-wide tokens of
/// `e_c`, plus a residual of the ID feature.
pub fn noninvasive_fuse(g: &mut Graph, store: &ParamStore, e_id: Var, e_c: Var, heads: usize) -> Result<FusedOutput> {
    let d_e = g.value(e_id).cols();
    let width = g.value(e_c).cols();
    if width % d_e != 0 {
        return Err(Error::config(format!(
            "fused width {width} is not a multiple of the token width {d_e}"
        )));
    }
    let tokens = (0..width / d_e)
        .map(|k| g.slice_cols(e_c, k * d_e, d_e))
        .collect::<Result<Vec<_>>>()?;
    let attention = nn::multi_head_attention_tokens(g, store, ATTENTION_PREFIX, e_id, &tokens, heads)?;
    let e_att = g.add(attention.output, e_id)?;
    Ok(FusedOutput { e_att, attention })
}

/// Click probability `[b, 1]` from the concatenated head inputs.
pub fn predict_head(g: &mut Graph, store: &ParamStore, inputs: &[Var]) -> Result<Var> {
    let x = if inputs.len() == 1 {
        inputs[0]
    } else {
        g.concat_cols(inputs)?
    };
    nn::mlp_forward(g, store, HEAD_PREFIX, x, Activation::Sigmoid)
}
