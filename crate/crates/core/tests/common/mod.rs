//! Shared helpers: small model shapes and a plain causal transformer written
//! directly against tensor operations, used as an oracle for the engine.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unimem::mask::MaskMatrix;
use unimem::model::{positional_encoding, ModelConfig, Params};
use unimem::tensor::{
    add_row_bias, concat_cols, concat_rows, gelu, layer_norm, masked_softmax, matmul, matmul_nt, slice_cols, Tensor,
    LAYER_NORM_EPS,
};

pub fn tiny() -> ModelConfig {
    ModelConfig {
        layers: 2,
        d_model: 8,
        heads: 2,
        vocab: 13,
        segment_len: 4,
        max_position: 32,
    }
}

pub fn random_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(0..vocab)).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn p<'a>(params: &'a Params, name: &str) -> &'a Tensor {
    params.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
}

/// Key and value projections one layer computed for a segment.
pub struct LayerKv {
    pub keys: Tensor,
    pub values: Tensor,
}

/// Multi-head attention over explicit keys and values.
fn attention(cfg: &ModelConfig, q: &Tensor, k: &Tensor, v: &Tensor, mask: &MaskMatrix) -> Tensor {
    let dh = cfg.d_model / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let heads: Vec<Tensor> = (0..cfg.heads)
        .map(|h| {
            let qh = slice_cols(q, h * dh, dh).unwrap();
            let kh = slice_cols(k, h * dh, dh).unwrap();
            let vh = slice_cols(v, h * dh, dh).unwrap();
            let w = masked_softmax(&matmul_nt(&qh, &kh).unwrap().scale(scale), mask).unwrap();
            matmul(&w, &vh).unwrap()
        })
        .collect();
    let refs: Vec<&Tensor> = heads.iter().collect();
    concat_cols(&refs).unwrap()
}

/// Forward pass of one full segment. When `memory` holds the previous
/// segment's per-layer projections, every layer attends over
/// `[previous ; current]` with the sliding window `(i, i+L]`.
pub fn plain_forward(
    cfg: &ModelConfig,
    params: &Params,
    tokens: &[usize],
    memory: Option<&[LayerKv]>,
) -> (Tensor, Vec<LayerKv>) {
    let l = tokens.len();
    let d = cfg.d_model;
    let emb = p(params, "tok_emb");
    let mut rows = Vec::with_capacity(l * d);
    for &t in tokens {
        rows.extend_from_slice(emb.row(t));
    }
    let mut pos = Vec::with_capacity(l * d);
    for i in 0..l {
        pos.extend(positional_encoding(i, d, cfg.max_position).unwrap());
    }
    let mut h = Tensor::matrix(l, d, rows).add(&Tensor::matrix(l, d, pos)).unwrap();
    let mut kvs = Vec::new();
    for n in 0..cfg.layers {
        let w = |s: &str| p(params, &format!("layer{n}.{s}"));
        let a = layer_norm(&h, w("ln1.gain"), w("ln1.bias"), LAYER_NORM_EPS).unwrap();
        let q = matmul_nt(&a, w("wq")).unwrap();
        let k = matmul_nt(&a, w("wk")).unwrap();
        let v = matmul_nt(&a, w("wv")).unwrap();
        let att = match memory {
            None => attention(cfg, &q, &k, &v, &MaskMatrix::from_fn(l, l, |i, j| j <= i)),
            Some(mem) => {
                let m = mem[n].keys.rows();
                let keys = concat_rows(&[&mem[n].keys, &k]).unwrap();
                let values = concat_rows(&[&mem[n].values, &v]).unwrap();
                let mask = MaskMatrix::from_fn(l, m + l, |i, j| if j < m { j > i } else { j - m <= i });
                attention(cfg, &q, &keys, &values, &mask)
            }
        };
        h = h.add(&matmul_nt(&att, w("wo")).unwrap()).unwrap();
        let f = layer_norm(&h, w("ln2.gain"), w("ln2.bias"), LAYER_NORM_EPS).unwrap();
        let f = add_row_bias(&matmul_nt(&f, w("ffn.w1")).unwrap(), w("ffn.b1")).unwrap();
        let f = f.map(gelu);
        let f = add_row_bias(&matmul_nt(&f, w("ffn.w2")).unwrap(), w("ffn.b2")).unwrap();
        h = h.add(&f).unwrap();
        kvs.push(LayerKv { keys: k, values: v });
    }
    let z = layer_norm(&h, p(params, "ln_f.gain"), p(params, "ln_f.bias"), LAYER_NORM_EPS).unwrap();
    (matmul_nt(&z, p(params, "head")).unwrap(), kvs)
}
