//! Mask construction for every supported memory-access pattern, plus the
//! concatenated and gated forms of masked scaled-dot-product attention.
//!
//! All builders use 0-based row and column indices. Key columns are laid out
//! as `[memory ; current segment]` (with global tokens first when present),
//! matching the order in which keys are concatenated.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::MaskMatrix;
use crate::tape::equivalence_gate_value;
use crate::tensor::{concat_rows, masked_softmax, masked_softmax_impl, matmul, matmul_nt, Tensor};

/// Allows key column `j` for query `i` iff `j ≤ i`.
pub fn build_causal_mask(segment_len: usize) -> Result<MaskMatrix> {
    if segment_len == 0 {
        return Err(Error::EmptySegment);
    }
    Ok(MaskMatrix::from_fn(segment_len, segment_len, |i, j| j <= i))
}

/// Segment-recurrence mask over `[previous segment ; current segment]`.
///
/// Query `i` sees the `L` most recent positions ending at itself. With a
/// full memory (`M = L`) that is columns `i+1 ..= i+L`, the half-open
/// `(i, i+L]` window in 1-based terms. A shorter memory keeps the same
/// right-aligned window; `M = 0` is the causal mask.
pub fn build_xl_mask(segment_len: usize, memory_len: usize) -> Result<MaskMatrix> {
    if memory_len > segment_len {
        return Err(Error::invalid(format!(
            "segment recurrence caches one segment: memory length {memory_len} exceeds segment length {segment_len}"
        )));
    }
    build_window_global_mask(segment_len, memory_len, segment_len, 0)
}

/// Mask over `[read memory (m) ; content (L) ; write memory (m)]`.
///
/// Read-memory and content rows see columns `0 ..= max(i, m−1)`: every read
/// token plus causal content. Write-memory rows see every column.
pub fn build_rmt_mask(segment_len: usize, memory_tokens: usize) -> Result<MaskMatrix> {
    if segment_len == 0 {
        return Err(Error::EmptySegment);
    }
    if memory_tokens == 0 {
        return Err(Error::invalid("memory token count must be at least 1"));
    }
    let m = memory_tokens;
    let total = segment_len + 2 * m;
    Ok(MaskMatrix::from_fn(total, total, |i, j| {
        if i >= segment_len + m {
            true
        } else {
            j <= i.max(m - 1)
        }
    }))
}

/// Sliding window plus global tokens over `[globals (G) ; memory (M) ; current (L)]`.
///
/// Query `i` sees every global column, the memory positions that fall inside
/// a window of `W` positions ending at itself (memory column `c` iff
/// `c + W > M + i`), and all causal current positions.
pub fn build_window_global_mask(
    segment_len: usize,
    memory_len: usize,
    window: usize,
    global_count: usize,
) -> Result<MaskMatrix> {
    if segment_len == 0 {
        return Err(Error::EmptySegment);
    }
    if window + global_count == 0 && memory_len > 0 {
        return Err(Error::invalid(
            "window and global token count are both zero while memory is present; memory would be unreadable",
        ));
    }
    Ok(window_global(segment_len, memory_len, window, global_count))
}

fn window_global(segment_len: usize, memory_len: usize, window: usize, global_count: usize) -> MaskMatrix {
    let (g, m) = (global_count, memory_len);
    MaskMatrix::from_fn(segment_len, g + m + segment_len, |i, j| {
        if j < g {
            true
        } else if j < g + m {
            (j - g) + window > m + i
        } else {
            j - g - m <= i
        }
    })
}

/// Window-global mask plus `min(R, eligible)` random memory columns per
/// row, drawn uniformly without replacement from the memory columns that
/// the window does not already cover. Deterministic for a given seed.
pub fn build_bigbird_mask(
    segment_len: usize,
    memory_len: usize,
    window: usize,
    global_count: usize,
    random_count: usize,
    seed: u64,
) -> Result<MaskMatrix> {
    if random_count == 0 {
        return build_window_global_mask(segment_len, memory_len, window, global_count);
    }
    if segment_len == 0 {
        return Err(Error::EmptySegment);
    }
    let mut mask = window_global(segment_len, memory_len, window, global_count);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..segment_len {
        // Memory columns c with c + W <= M + i lie outside the window.
        let eligible = (memory_len + i + 1).saturating_sub(window).min(memory_len);
        let take = random_count.min(eligible);
        if take == 0 {
            continue;
        }
        for c in sample(&mut rng, eligible, take).iter() {
            mask.set(i, global_count + c, true);
        }
    }
    Ok(mask)
}

/// Per-query memory selections plus causal current positions, over
/// `[memory (M) ; current (L)]`.
pub fn build_knn_mask(selected: &[Vec<usize>], memory_len: usize, segment_len: usize) -> Result<MaskMatrix> {
    if segment_len == 0 {
        return Err(Error::EmptySegment);
    }
    if selected.len() != segment_len {
        return Err(Error::Shape {
            op: "build_knn_mask",
            left: vec![selected.len()],
            right: vec![segment_len],
        });
    }
    let mut mask = MaskMatrix::from_fn(segment_len, memory_len + segment_len, |i, j| {
        j >= memory_len && j - memory_len <= i
    });
    for (i, row) in selected.iter().enumerate() {
        for &c in row {
            if c >= memory_len {
                return Err(Error::invalid(format!(
                    "selected memory index {c} out of range for memory of {memory_len}"
                )));
            }
            mask.set(i, c, true);
        }
    }
    Ok(mask)
}

/// Per-query-row mixing weight between memory attention and local attention.
#[derive(Clone, Debug, PartialEq)]
pub struct GateVector(Vec<f64>);

impl GateVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|g| !(0.0..=1.0).contains(*g)) {
            return Err(Error::invalid(format!("gate value {bad} outside [0, 1]")));
        }
        Ok(Self(values))
    }

    pub fn uniform(rows: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; rows])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Memory keys and values, `M×d` each.
#[derive(Clone, Copy, Debug)]
pub struct MemoryKv<'a> {
    pub keys: &'a Tensor,
    pub values: &'a Tensor,
}

fn scaled_scores(q: &Tensor, k: &Tensor, scale: f64) -> Result<Tensor> {
    Ok(matmul_nt(q, k)?.scale(scale))
}

/// `softmax(scale · Q [K_mem ; K_cur]ᵀ + mask) [V_mem ; V_cur]`.
pub fn unimem_attention(
    q: &Tensor,
    memory: Option<MemoryKv<'_>>,
    k_cur: &Tensor,
    v_cur: &Tensor,
    mask: &MaskMatrix,
    scale: f64,
) -> Result<Tensor> {
    let (keys, values) = match memory {
        Some(mem) => (concat_rows(&[mem.keys, k_cur])?, concat_rows(&[mem.values, v_cur])?),
        None => (k_cur.clone(), v_cur.clone()),
    };
    if mask.shape() != [q.rows(), keys.rows()] {
        return Err(Error::Shape {
            op: "unimem_attention mask",
            left: mask.shape().to_vec(),
            right: vec![q.rows(), keys.rows()],
        });
    }
    let weights = masked_softmax(&scaled_scores(q, &keys, scale)?, mask)?;
    matmul(&weights, &values)
}

/// `g ⊙ Attn(Q, K_mem, V_mem) + (1 − g) ⊙ Attn(Q, K_cur, V_cur)`, row-wise.
///
/// A row whose memory mask is empty must carry `g = 0`; it then reduces to
/// local attention.
#[allow(clippy::too_many_arguments)]
pub fn gated_attention(
    q: &Tensor,
    memory: Option<MemoryKv<'_>>,
    k_cur: &Tensor,
    v_cur: &Tensor,
    mem_mask: &MaskMatrix,
    cur_mask: &MaskMatrix,
    gate: &GateVector,
    scale: f64,
) -> Result<Tensor> {
    let rows = q.rows();
    if gate.len() != rows {
        return Err(Error::Shape {
            op: "gated_attention gate",
            left: vec![gate.len()],
            right: vec![rows],
        });
    }
    let local = matmul(&masked_softmax(&scaled_scores(q, k_cur, scale)?, cur_mask)?, v_cur)?;
    let Some(mem) = memory else {
        if let Some(i) = gate.values().iter().position(|&g| g > 0.0) {
            return Err(Error::invalid(format!("gate {} > 0 on row {i} with empty memory", gate.values()[i])));
        }
        return Ok(local);
    };
    for (i, &g) in gate.values().iter().enumerate() {
        if g > 0.0 && mem_mask.row_allowed_count(i) == 0 {
            return Err(Error::EmptyRow { row: i });
        }
    }
    let mem_weights = masked_softmax_impl(&scaled_scores(q, mem.keys, scale)?, mem_mask, true)?;
    let remote = matmul(&mem_weights, mem.values)?;
    let d = local.cols();
    let mut out = vec![0.0; rows * d];
    for (i, &g) in gate.values().iter().enumerate() {
        for j in 0..d {
            out[i * d + j] = remote.get(i, j) * g + local.get(i, j) * (1.0 - g);
        }
    }
    Ok(Tensor::matrix(rows, d, out))
}

/// Gate under which [`gated_attention`] reproduces [`unimem_attention`]:
/// the share of each row's exponentiated, scaled, allowed scores that falls
/// on memory. Empty memory gives `g = 0`.
pub fn compute_equivalence_gate(
    q: &Tensor,
    k_mem: Option<&Tensor>,
    k_cur: &Tensor,
    mem_mask: &MaskMatrix,
    cur_mask: &MaskMatrix,
    scale: f64,
) -> Result<GateVector> {
    let Some(k_mem) = k_mem else {
        return GateVector::new(vec![0.0; q.rows()]);
    };
    let (g, _, _) = equivalence_gate_value(
        &scaled_scores(q, k_mem, scale)?,
        &scaled_scores(q, k_cur, scale)?,
        mem_mask,
        cur_mask,
    )?;
    // Rounding can push a ratio a hair outside [0, 1].
    GateVector::new(g.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn allowed_cols(mask: &MaskMatrix, row: usize) -> Vec<usize> {
        (0..mask.cols()).filter(|&j| mask.is_allowed(row, j)).collect()
    }

    #[test]
    fn causal_cases() {
        assert_eq!(build_causal_mask(1).unwrap(), MaskMatrix::from_fn(1, 1, |_, _| true));
        let m = build_causal_mask(3).unwrap();
        assert_eq!(allowed_cols(&m, 0), vec![0]);
        assert_eq!(allowed_cols(&m, 1), vec![0, 1]);
        assert_eq!(allowed_cols(&m, 2), vec![0, 1, 2]);
        assert!(matches!(build_causal_mask(0), Err(Error::EmptySegment)));
    }

    #[test]
    fn xl_cases() {
        let m = build_xl_mask(2, 2).unwrap();
        assert_eq!(allowed_cols(&m, 0), vec![1, 2]);
        assert_eq!(allowed_cols(&m, 1), vec![2, 3]);
        assert_eq!(build_xl_mask(4, 0).unwrap(), build_causal_mask(4).unwrap());
        let m = build_xl_mask(5, 5).unwrap();
        assert!((0..5).all(|i| m.row_allowed_count(i) == 5));
        assert!(build_xl_mask(2, 3).is_err());
    }

    #[test]
    fn rmt_cases() {
        let m = build_rmt_mask(2, 1).unwrap();
        assert_eq!(allowed_cols(&m, 0), vec![0]);
        assert_eq!(allowed_cols(&m, 1), vec![0, 1]);
        assert_eq!(allowed_cols(&m, 2), vec![0, 1, 2]);
        assert_eq!(allowed_cols(&m, 3), vec![0, 1, 2, 3]);
        let m = build_rmt_mask(3, 2).unwrap();
        for i in 2..5 {
            assert!(m.is_allowed(i, 0) && m.is_allowed(i, 1));
        }
        for i in 5..7 {
            assert_eq!(m.row_allowed_count(i), 7);
        }
        assert!(build_rmt_mask(3, 0).is_err());
    }

    #[test]
    fn window_global_cases() {
        assert_eq!(build_window_global_mask(4, 4, 4, 0).unwrap(), build_xl_mask(4, 4).unwrap());
        let m = build_window_global_mask(3, 4, 0, 2).unwrap();
        for i in 0..3 {
            let expect: Vec<usize> = [0, 1].into_iter().chain((0..=i).map(|j| 6 + j)).collect();
            assert_eq!(allowed_cols(&m, i), expect);
        }
        assert!(build_window_global_mask(3, 2, 0, 0).is_err());
        assert_eq!(build_window_global_mask(3, 0, 0, 0).unwrap(), build_causal_mask(3).unwrap());
    }

    #[test]
    fn bigbird_cases() {
        let base = build_window_global_mask(4, 6, 2, 1).unwrap();
        assert_eq!(build_bigbird_mask(4, 6, 2, 1, 0, 7).unwrap(), base);
        let a = build_bigbird_mask(4, 6, 2, 1, 2, 7).unwrap();
        assert_eq!(a, build_bigbird_mask(4, 6, 2, 1, 2, 7).unwrap());
        assert!(base.is_subset_of(&a));
        for i in 0..4 {
            assert_eq!(a.row_allowed_count(i), base.row_allowed_count(i) + 2);
        }
    }

    #[test]
    fn knn_cases() {
        let empty = vec![Vec::new(); 3];
        let m = build_knn_mask(&empty, 4, 3).unwrap();
        assert_eq!(m.split_cols(4).1, build_causal_mask(3).unwrap());
        let all = vec![(0..4).collect::<Vec<_>>(); 3];
        let m = build_knn_mask(&all, 4, 3).unwrap();
        assert!((0..3).all(|i| (0..4).all(|j| m.is_allowed(i, j))));
        let two = vec![vec![1, 4]; 2];
        let m = build_knn_mask(&two, 5, 2).unwrap();
        assert!((0..2).all(|i| (0..5).filter(|&j| m.is_allowed(i, j)).count() == 2));
        assert!(build_knn_mask(&[vec![5]], 5, 1).is_err());
    }

    #[test]
    fn attention_uniform_case() {
        let q = Tensor::matrix(1, 2, vec![0.0, 0.0]);
        let k_mem = Tensor::matrix(1, 2, vec![1.0, 2.0]);
        let v_mem = Tensor::matrix(1, 2, vec![2.0, 4.0]);
        let k_cur = Tensor::matrix(1, 2, vec![-3.0, 0.5]);
        let v_cur = Tensor::matrix(1, 2, vec![6.0, -4.0]);
        let mask = MaskMatrix::from_fn(1, 2, |_, _| true);
        let out = unimem_attention(
            &q,
            Some(MemoryKv {
                keys: &k_mem,
                values: &v_mem,
            }),
            &k_cur,
            &v_cur,
            &mask,
            1.0,
        )
        .unwrap();
        assert_eq!(out.data(), &[4.0, 0.0]);
    }

    #[test]
    fn gate_extremes() {
        let q = Tensor::matrix(2, 2, vec![0.3, -0.1, 1.0, 0.2]);
        let k_mem = Tensor::matrix(3, 2, vec![0.5, 0.5, -1.0, 0.0, 0.2, 0.9]);
        let v_mem = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let k_cur = Tensor::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]);
        let v_cur = Tensor::matrix(2, 2, vec![-1.0, 0.0, 0.0, -1.0]);
        let mem_mask = MaskMatrix::from_fn(2, 3, |_, _| true);
        let cur_mask = build_causal_mask(2).unwrap();
        let mem = Some(MemoryKv {
            keys: &k_mem,
            values: &v_mem,
        });
        let local = unimem_attention(&q, None, &k_cur, &v_cur, &cur_mask, 0.5).unwrap();
        let g0 = gated_attention(&q, mem, &k_cur, &v_cur, &mem_mask, &cur_mask, &GateVector::uniform(2, 0.0).unwrap(), 0.5).unwrap();
        assert!(g0.max_abs_diff(&local) < 1e-15);
        let remote_only = matmul(&masked_softmax(&matmul_nt(&q, &k_mem).unwrap().scale(0.5), &mem_mask).unwrap(), &v_mem).unwrap();
        let g1 = gated_attention(&q, mem, &k_cur, &v_cur, &mem_mask, &cur_mask, &GateVector::uniform(2, 1.0).unwrap(), 0.5).unwrap();
        assert!(g1.max_abs_diff(&remote_only) < 1e-15);
        assert!(gated_attention(&q, None, &k_cur, &v_cur, &mem_mask, &cur_mask, &GateVector::uniform(2, 0.5).unwrap(), 0.5).is_err());
    }

    #[test]
    fn equivalence_gate_cases() {
        let q = Tensor::matrix(1, 2, vec![0.0, 0.0]);
        let k = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let all = MaskMatrix::from_fn(1, 2, |_, _| true);
        let g = compute_equivalence_gate(&q, None, &k, &all, &all, 1.0).unwrap();
        assert_eq!(g.values(), &[0.0]);
        let g = compute_equivalence_gate(&q, Some(&k), &k, &all, &all, 1.0).unwrap();
        assert_eq!(g.values(), &[0.5]);
        assert!(GateVector::new(vec![1.5]).is_err());
    }
}
