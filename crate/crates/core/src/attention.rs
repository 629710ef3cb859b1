//! Instance and BEV query spaces, the shared-logit bidirectional
//! cross-attention between them, instance self-attention, and the cost model.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::scalar::{gemm, MatRef};
use crate::numerics::{Init, LayerNorm, Linear, ParamStore, Scalar, Tape, Tensor, Var};

/// Fixed transformer-style encoding of a `rows x cols` grid, flattened row-major.
///
/// The first `c/2` channels encode the row index and the rest the column
/// index; each half is `[sin(p·f_0..f_{q-1}), cos(p·f_0..f_{q-1})]` with
/// `q = c/4` geometric frequencies `f_k = 10000^(-k/q)`.
pub fn sine_pos_encoding(grid_dims: (usize, usize), c: usize) -> Result<Tensor<f64>> {
    if c == 0 || c % 4 != 0 {
        return Err(Error::Config(format!("positional encoding needs channels divisible by 4, got {c}")));
    }
    let (rows, cols) = grid_dims;
    if rows == 0 || cols == 0 {
        return Err(Error::Config(format!("empty grid {rows}x{cols}")));
    }
    let q = c / 4;
    let freqs: Vec<f64> = (0..q).map(|k| 10000f64.powf(-(k as f64) / q as f64)).collect();
    let mut data = Vec::with_capacity(rows * cols * c);
    for r in 0..rows {
        for col in 0..cols {
            for p in [r as f64, col as f64] {
                data.extend(freqs.iter().map(|f| (p * f).sin()));
                data.extend(freqs.iter().map(|f| (p * f).cos()));
            }
        }
    }
    Tensor::new(&[rows * cols, c], data)
}

/// Dense BEV queries with their fixed positional encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct BevQueryGrid<T> {
    pub features: Tensor<T>,
    pub grid_dims: (usize, usize),
    pub pos: Tensor<T>,
}

impl<T: Scalar> BevQueryGrid<T> {
    pub fn new(features: Tensor<T>, grid_dims: (usize, usize)) -> Result<Self> {
        let n_b = grid_dims.0 * grid_dims.1;
        if features.rank() != 2 || features.rows() != n_b {
            return Err(Error::dim("bev_queries", format!("features {:?} do not match grid {grid_dims:?}", features.shape())));
        }
        let pos = sine_pos_encoding(grid_dims, features.cols())?.cast();
        Ok(BevQueryGrid { features, grid_dims, pos })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Instance queries with a learnable positional encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceQuerySet<T> {
    pub features: Tensor<T>,
    pub pos: Tensor<T>,
}

impl<T: Scalar> InstanceQuerySet<T> {
    pub fn new(features: Tensor<T>, pos: Tensor<T>) -> Result<Self> {
        if features.rank() != 2 || features.shape() != pos.shape() {
            return Err(Error::dim(
                "instance_queries",
                format!("features {:?} and pos {:?} must both be n_i x c", features.shape(), pos.shape()),
            ));
        }
        Ok(InstanceQuerySet { features, pos })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Warning text when the instance space is not smaller than the BEV space.
pub fn instance_count_warning(n_i: usize, n_b: usize) -> Option<String> {
    (n_i >= n_b).then(|| format!("instance_queries ({n_i}) >= BEV cells ({n_b}); the instance bottleneck is ineffective"))
}

fn check_heads(c: usize, heads: usize) -> Result<()> {
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("channels {c} not divisible by heads {heads}")));
    }
    Ok(())
}

/// Per-head attention tensors from one bidirectional pass.
#[derive(Clone, Debug, Default)]
pub struct BiAttnWeights {
    /// Scaled logits `n_i x n_b`, one per head.
    pub logits: Vec<Var>,
    /// Softmax over the BEV axis (rows sum to 1).
    pub inst_to_bev: Vec<Var>,
    /// Softmax over the instance axis (columns sum to 1).
    pub bev_to_inst: Vec<Var>,
}

/// Shared-logit attention core on already projected features.
///
/// Returns the head-concatenated updates `(n_i x c, n_b x c)` and the
/// per-head weights. The logit matrix of each head is formed once and read
/// by both softmaxes.
pub fn bixattn_core<T: Scalar>(tape: &mut Tape<T>, li: Var, lb: Var, heads: usize) -> Result<(Var, Var, BiAttnWeights)> {
    let c = tape.value(li).cols();
    if tape.value(lb).cols() != c {
        return Err(Error::dim("bixattn", format!("instance width {c} vs BEV width {}", tape.value(lb).cols())));
    }
    check_heads(c, heads)?;
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut weights = BiAttnWeights::default();
    let (mut vi, mut vb) = (Vec::with_capacity(heads), Vec::with_capacity(heads));
    for head in 0..heads {
        let (li_h, lb_h) = if heads == 1 {
            (li, lb)
        } else {
            (tape.slice_cols(li, head * d, d)?, tape.slice_cols(lb, head * d, d)?)
        };
        let raw = tape.matmul_nt(li_h, lb_h)?;
        let w = tape.scale(raw, scale)?;
        let rows = tape.softmax(w, 1)?;
        let cols = tape.softmax(w, 0)?;
        vi.push(tape.matmul(rows, lb_h)?);
        vb.push(tape.matmul_tn(cols, li_h)?);
        weights.logits.push(w);
        weights.inst_to_bev.push(rows);
        weights.bev_to_inst.push(cols);
    }
    let (vi, vb) = if heads == 1 { (vi[0], vb[0]) } else { (tape.concat_cols(&vi)?, tape.concat_cols(&vb)?) };
    Ok((vi, vb, weights))
}

/// Bidirectional instance/BEV cross-attention block with pre-norm,
/// additive positional encodings and (optionally) residual outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct IbBiXAttn {
    pub heads: usize,
    pub channels: usize,
    pub residual: bool,
    pub norm_i: LayerNorm,
    pub norm_b: LayerNorm,
    pub proj_i: Linear,
    pub proj_b: Linear,
    pub out_i: Linear,
    pub out_b: Linear,
}

#[derive(Clone, Debug)]
pub struct BiXAttnOutput {
    pub inst: Var,
    pub bev: Var,
    pub weights: BiAttnWeights,
}

impl IbBiXAttn {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        heads: usize,
        residual: bool,
        rng: &mut R,
    ) -> Result<Self> {
        check_heads(channels, heads)?;
        Ok(IbBiXAttn {
            heads,
            channels,
            residual,
            norm_i: LayerNorm::new(store, &format!("{name}.norm_i"), channels, rng)?,
            norm_b: LayerNorm::new(store, &format!("{name}.norm_b"), channels, rng)?,
            proj_i: Linear::new(store, &format!("{name}.proj_i"), channels, channels, rng)?,
            proj_b: Linear::new(store, &format!("{name}.proj_b"), channels, channels, rng)?,
            out_i: Linear::new(store, &format!("{name}.out_i"), channels, channels, rng)?,
            out_b: Linear::new(store, &format!("{name}.out_b"), channels, channels, rng)?,
        })
    }

    /// Projected latents `(L^I, L^B)` for the given queries.
    pub fn latents<T: Scalar>(&self, tape: &mut Tape<T>, inst: Var, inst_pos: Var, bev: Var, bev_pos: Var) -> Result<(Var, Var)> {
        let ni = self.norm_i.forward(tape, inst)?;
        let ni = tape.add(ni, inst_pos)?;
        let li = self.proj_i.forward(tape, ni)?;
        let nb = self.norm_b.forward(tape, bev)?;
        let nb = tape.add(nb, bev_pos)?;
        let lb = self.proj_b.forward(tape, nb)?;
        Ok((li, lb))
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, inst: Var, inst_pos: Var, bev: Var, bev_pos: Var) -> Result<BiXAttnOutput> {
        let (li, lb) = self.latents(tape, inst, inst_pos, bev, bev_pos)?;
        let (vi, vb, weights) = bixattn_core(tape, li, lb, self.heads)?;
        let mut oi = self.out_i.forward(tape, vi)?;
        let mut ob = self.out_b.forward(tape, vb)?;
        if self.residual {
            oi = tape.add(inst, oi)?;
            ob = tape.add(bev, ob)?;
        }
        Ok(BiXAttnOutput { inst: oi, bev: ob, weights })
    }
}

/// Pre-norm transformer encoder layer over the instance queries.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceEncoderLayer {
    pub heads: usize,
    pub norm1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl InstanceEncoderLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_heads(channels, heads)?;
        let c = channels;
        Ok(InstanceEncoderLayer {
            heads,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c, rng)?,
            query: Linear::new(store, &format!("{name}.query"), c, c, rng)?,
            // A key bias shifts each score row by a constant, which softmax ignores.
            key: Linear::with_init(store, &format!("{name}.key"), c, c, Init::fan_in(c), false, rng)?,
            value: Linear::new(store, &format!("{name}.value"), c, c, rng)?,
            out: Linear::new(store, &format!("{name}.out"), c, c, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c, rng)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), c, 4 * c, rng)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), 4 * c, c, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let c = tape.value(x).cols();
        let d = c / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let n = self.norm1.forward(tape, x)?;
        let (q, k, v) = (self.query.forward(tape, n)?, self.key.forward(tape, n)?, self.value.forward(tape, n)?);
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (tape.slice_cols(q, h * d, d)?, tape.slice_cols(k, h * d, d)?, tape.slice_cols(v, h * d, d)?)
            };
            let s = tape.matmul_nt(qh, kh)?;
            let s = tape.scale(s, scale)?;
            let a = tape.softmax(s, 1)?;
            heads.push(tape.matmul(a, vh)?);
        }
        let attn = if self.heads == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let attn = self.out.forward(tape, attn)?;
        let x = tape.add(x, attn)?;
        let n = self.norm2.forward(tape, x)?;
        let hdn = self.ff1.forward(tape, n)?;
        let hdn = tape.relu(hdn)?;
        let ff = self.ff2.forward(tape, hdn)?;
        tape.add(x, ff)
    }
}

/// Closed-form multiply-add counts of the attention cores (score and
/// weighted-sum products; projections excluded) plus score-entry counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionCost {
    /// One `n_i x n_b` logit product plus the two weighted sums.
    pub bixattn_flops: u64,
    /// Instance self-attention: scores plus weighted sum.
    pub inst_self_flops: u64,
    /// Self-attention over all BEV cells.
    pub dense_bev_self_flops: u64,
    /// Attention-matrix entries: `n_i·n_b` for the cross pass.
    pub bixattn_scores: u64,
    pub inst_self_scores: u64,
    pub dense_bev_scores: u64,
    /// Linear projections around the cross pass (two in, two out).
    pub bixattn_projection_flops: u64,
}

impl AttentionCost {
    /// Ratio of dense score entries to the instance-routed total `n_i·n_b + n_i²`.
    pub fn score_ratio(&self) -> f64 {
        self.dense_bev_scores as f64 / (self.bixattn_scores + self.inst_self_scores) as f64
    }

    pub fn flop_ratio(&self) -> f64 {
        self.dense_bev_self_flops as f64 / self.bixattn_flops as f64
    }
}

pub fn attention_cost(n_i: usize, n_b: usize, c: usize, h: usize) -> Result<AttentionCost> {
    if n_i == 0 || n_b == 0 || c == 0 || h == 0 {
        return Err(Error::Config("attention sizes must be positive".into()));
    }
    check_heads(c, h)?;
    let (ni, nb, c) = (n_i as u64, n_b as u64, c as u64);
    Ok(AttentionCost {
        bixattn_flops: 3 * ni * nb * c,
        inst_self_flops: 2 * ni * ni * c,
        dense_bev_self_flops: 2 * nb * nb * c,
        bixattn_scores: ni * nb,
        inst_self_scores: ni * ni,
        dense_bev_scores: nb * nb,
        bixattn_projection_flops: 2 * (ni + nb) * c * c,
    })
}

/// Multi-head self-attention over `x` (`n x c`, used directly as query, key
/// and value) computed in blocks of `chunk` query rows so the `n x n` score
/// matrix is never materialized. Off-tape reference for dense BEV cost.
pub fn dense_self_attention<T: Scalar>(x: &Tensor<T>, heads: usize, chunk: usize) -> Result<Tensor<T>> {
    let (n, c) = (x.rows(), x.cols());
    check_heads(c, heads)?;
    let d = c / heads;
    let scale = T::of(1.0 / (d as f64).sqrt());
    let chunk = chunk.clamp(1, n);
    let mut heads_data: Vec<Vec<T>> = Vec::with_capacity(heads);
    for h in 0..heads {
        let xh: Vec<T> = x.data().chunks(c).flat_map(|row| row[h * d..(h + 1) * d].iter().copied()).collect();
        heads_data.push(xh);
    }
    let mut out = vec![T::zero(); n * c];
    let mut scores = vec![T::zero(); chunk * n];
    let mut block = vec![T::zero(); chunk * d];
    for (h, xh) in heads_data.iter().enumerate() {
        for start in (0..n).step_by(chunk) {
            let rows = chunk.min(n - start);
            let q = &xh[start * d..(start + rows) * d];
            let s = &mut scores[..rows * n];
            gemm(MatRef::new(q, rows, d), MatRef::new(xh, n, d).t(), T::zero(), s);
            for row in s.chunks_mut(n) {
                let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v * scale));
                let mut total = T::zero();
                for v in row.iter_mut() {
                    *v = (*v * scale - max).exp();
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
            let b = &mut block[..rows * d];
            gemm(MatRef::new(s, rows, n), MatRef::new(xh, n, d), T::zero(), b);
            for (r, src) in b.chunks(d).enumerate() {
                out[(start + r) * c + h * d..(start + r) * c + (h + 1) * d].copy_from_slice(src);
            }
        }
    }
    Tensor::new(&[n, c], out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{grad_check, mac_count, reset_mac_count};

    #[test]
    fn sine_encoding_examples() {
        let pe = sine_pos_encoding((8, 8), 16).unwrap();
        let first = &pe.data()[..16];
        for half in 0..2 {
            assert!(first[half * 8..half * 8 + 4].iter().all(|&v| v == 0.0));
            assert!(first[half * 8 + 4..half * 8 + 8].iter().all(|&v| v == 1.0));
        }
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(pe, sine_pos_encoding((8, 8), 16).unwrap());
        let rows: Vec<&[f64]> = pe.data().chunks(16).collect();
        for a in 0..64 {
            for b in a + 1..64 {
                let d: f64 = rows[a].iter().zip(rows[b]).map(|(x, y)| (x - y).powi(2)).sum();
                assert!(d.sqrt() > 0.0, "cells {a} and {b} collide");
            }
        }
        assert!(matches!(sine_pos_encoding((2, 2), 6), Err(Error::Config(_))));
    }

    struct Toy {
        store: ParamStore<f64>,
        block: IbBiXAttn,
        inst: Tensor<f64>,
        inst_pos: Tensor<f64>,
        bev: Tensor<f64>,
        bev_pos: Tensor<f64>,
    }

    fn toy(n_i: usize, n_b: usize, c: usize, h: usize, residual: bool, seed: u64) -> Toy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let block = IbBiXAttn::new(&mut store, "x", c, h, residual, &mut rng).unwrap();
        Toy {
            store,
            block,
            inst: Tensor::normal(&[n_i, c], 1.0, &mut rng),
            inst_pos: Tensor::normal(&[n_i, c], 0.5, &mut rng),
            bev: Tensor::normal(&[n_b, c], 1.0, &mut rng),
            bev_pos: Tensor::normal(&[n_b, c], 0.5, &mut rng),
        }
    }

    fn run(t: &Toy, tape: &mut Tape<f64>) -> BiXAttnOutput {
        tape.bind_params(&t.store);
        let v: Vec<Var> = [&t.inst, &t.inst_pos, &t.bev, &t.bev_pos].iter().map(|x| tape.constant((*x).clone())).collect();
        t.block.forward(tape, v[0], v[1], v[2], v[3]).unwrap()
    }

    #[test]
    fn degenerate_single_query_single_cell() {
        let t = toy(1, 1, 8, 1, false, 1);
        let mut tape = Tape::new();
        let out = run(&t, &mut tape);
        assert_eq!(tape.value(out.weights.inst_to_bev[0]).data(), &[1.0]);
        assert_eq!(tape.value(out.weights.bev_to_inst[0]).data(), &[1.0]);
        let v: Vec<Var> = [&t.inst, &t.inst_pos, &t.bev, &t.bev_pos].iter().map(|x| tape.constant((*x).clone())).collect();
        let (li, lb) = t.block.latents(&mut tape, v[0], v[1], v[2], v[3]).unwrap();
        let want_i = t.block.out_i.forward(&mut tape, lb).unwrap();
        let want_b = t.block.out_b.forward(&mut tape, li).unwrap();
        assert!(tape.value(out.inst).max_abs_diff(tape.value(want_i)) < 1e-12);
        assert!(tape.value(out.bev).max_abs_diff(tape.value(want_b)) < 1e-12);
    }

    #[test]
    fn both_normalizations_are_stochastic_and_shift_invariant() {
        let t = toy(5, 12, 8, 2, true, 2);
        let mut tape = Tape::new();
        let out = run(&t, &mut tape);
        for h in 0..2 {
            let rows = tape.value(out.weights.inst_to_bev[h]);
            for r in rows.data().chunks(12) {
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6 && r.iter().all(|&v| v >= 0.0));
            }
            let cols = tape.value(out.weights.bev_to_inst[h]);
            for j in 0..12 {
                let s: f64 = (0..5).map(|i| cols.data()[i * 12 + j]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
            let shifted: Vec<f64> = tape.value(out.weights.logits[h]).data().iter().map(|v| v + 7.25).collect();
            let sv = tape.constant(Tensor::new(&[5, 12], shifted).unwrap());
            let (sr, sc) = (tape.softmax(sv, 1).unwrap(), tape.softmax(sv, 0).unwrap());
            assert!(tape.value(sr).max_abs_diff(tape.value(out.weights.inst_to_bev[h])) < 1e-9);
            assert!(tape.value(sc).max_abs_diff(tape.value(out.weights.bev_to_inst[h])) < 1e-9);
        }
    }

    #[test]
    fn instance_permutation_is_equivariant() {
        let t = toy(4, 9, 8, 2, true, 3);
        let mut tape = Tape::new();
        let base = run(&t, &mut tape);
        let perm = [2usize, 0, 3, 1];
        let permute = |x: &Tensor<f64>| {
            let c = x.cols();
            Tensor::new(&[4, c], perm.iter().flat_map(|&p| x.data()[p * c..(p + 1) * c].to_vec()).collect()).unwrap()
        };
        let moved = Toy { inst: permute(&t.inst), inst_pos: permute(&t.inst_pos), ..toy(4, 9, 8, 2, true, 3) };
        let mut tape2 = Tape::new();
        let out = run(&moved, &mut tape2);
        assert!(tape2.value(out.inst).max_abs_diff(&permute(tape.value(base.inst))) < 1e-10);
        assert!(tape2.value(out.bev).max_abs_diff(tape.value(base.bev)) < 1e-10);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        assert!(matches!(IbBiXAttn::new(&mut store, "x", 10, 4, true, &mut rng), Err(Error::Config(_))));
        assert!(InstanceEncoderLayer::new(&mut store, "e", 10, 3, &mut rng).is_err());
    }

    #[test]
    fn encoder_layer_single_instance_is_residual_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let layer = InstanceEncoderLayer::new(&mut store, "e", 8, 2, &mut rng).unwrap();
        let x = Tensor::<f64>::normal(&[1, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        tape.bind_params(&store);
        let xv = tape.constant(x);
        let y = layer.forward(&mut tape, xv).unwrap();
        // With one row, attention returns the value projection unchanged.
        let n = layer.norm1.forward(&mut tape, xv).unwrap();
        let v = layer.value.forward(&mut tape, n).unwrap();
        let a = layer.out.forward(&mut tape, v).unwrap();
        let x1 = tape.add(xv, a).unwrap();
        let n2 = layer.norm2.forward(&mut tape, x1).unwrap();
        let h = layer.ff1.forward(&mut tape, n2).unwrap();
        let h = tape.relu(h).unwrap();
        let f = layer.ff2.forward(&mut tape, h).unwrap();
        let want = tape.add(x1, f).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(want)) < 1e-12);
    }

    #[test]
    fn encoder_layer_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let layer = InstanceEncoderLayer::new(&mut store, "e", 8, 2, &mut rng).unwrap();
        let x = Tensor::<f64>::normal(&[5, 8], 1.0, &mut rng);
        let perm = [4usize, 2, 0, 1, 3];
        let px = Tensor::new(&[5, 8], perm.iter().flat_map(|&p| x.data()[p * 8..(p + 1) * 8].to_vec()).collect()).unwrap();
        let eval = |x: Tensor<f64>| {
            let mut tape = Tape::new();
            tape.bind_params(&store);
            let xv = tape.constant(x);
            let y = layer.forward(&mut tape, xv).unwrap();
            tape.value(y).clone()
        };
        let (y, py) = (eval(x), eval(px));
        for (i, &p) in perm.iter().enumerate() {
            for k in 0..8 {
                assert!((py.data()[i * 8 + k] - y.data()[p * 8 + k]).abs() < 1e-12);
            }
        }
    }

    /// Runs `f` with every parameter of `store` plus `extra` as checked inputs.
    fn check_with_params(
        store: &ParamStore<f64>,
        extra: Vec<Tensor<f64>>,
        f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    ) -> f64 {
        let mut inputs: Vec<Tensor<f64>> = store.iter().map(|p| p.tensor.clone()).collect();
        let np = inputs.len();
        inputs.extend(extra);
        let report = grad_check(
            |tape, v| {
                tape.bind(v[..np].to_vec());
                f(tape, &v[np..])
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        report.max_rel_error
    }

    #[test]
    fn encoder_layer_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let layer = InstanceEncoderLayer::new(&mut store, "e", 8, 2, &mut rng).unwrap();
        let x = Tensor::<f64>::normal(&[4, 8], 1.0, &mut rng);
        let w = Tensor::<f64>::normal(&[4, 8], 1.0, &mut rng);
        let err = check_with_params(&store, vec![x], |tape, v| {
            let y = layer.forward(tape, v[0])?;
            let wv = tape.constant(w.clone());
            let y = tape.mul(y, wv)?;
            tape.sum(y)
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn four_layer_stack_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let (n_i, n_b, c, h) = (4, 16, 8, 2);
        let mut layers = Vec::new();
        for l in 0..4 {
            let x = IbBiXAttn::new(&mut store, &format!("l{l}.bix"), c, h, true, &mut rng).unwrap();
            let e = InstanceEncoderLayer::new(&mut store, &format!("l{l}.enc"), c, h, &mut rng).unwrap();
            layers.push((x, e));
        }
        let bev_pos = sine_pos_encoding((4, 4), c).unwrap();
        let inst = Tensor::<f64>::normal(&[n_i, c], 1.0, &mut rng);
        let inst_pos = Tensor::<f64>::normal(&[n_i, c], 0.5, &mut rng);
        let bev = Tensor::<f64>::normal(&[n_b, c], 1.0, &mut rng);
        let (wi, wb) = (Tensor::<f64>::normal(&[n_i, c], 1.0, &mut rng), Tensor::<f64>::normal(&[n_b, c], 1.0, &mut rng));
        let err = check_with_params(&store, vec![inst, inst_pos, bev], |tape, v| {
            let bp = tape.constant(bev_pos.clone());
            let (mut qi, mut qb) = (v[0], v[2]);
            for (x, e) in &layers {
                let o = x.forward(tape, qi, v[1], qb, bp)?;
                qi = e.forward(tape, o.inst)?;
                qb = o.bev;
            }
            let (a, b) = (tape.constant(wi.clone()), tape.constant(wb.clone()));
            let (yi, yb) = (tape.mul(qi, a)?, tape.mul(qb, b)?);
            let (si, sb) = (tape.sum(yi)?, tape.sum(yb)?);
            tape.add(si, sb)
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn cost_model_examples() {
        let c1 = attention_cost(50, 1000, 64, 8).unwrap();
        let c2 = attention_cost(50, 2000, 64, 8).unwrap();
        let c4 = attention_cost(50, 4000, 64, 8).unwrap();
        assert_eq!(c2.bixattn_flops - 2 * c1.bixattn_flops, c4.bixattn_flops - 2 * c2.bixattn_flops);
        let big = attention_cost(50, 1 << 20, 64, 8).unwrap();
        let big2 = attention_cost(50, 1 << 21, 64, 8).unwrap();
        assert!((big2.dense_bev_self_flops as f64 / big.dense_bev_self_flops as f64 - 4.0).abs() < 1e-9);
        let paper = attention_cost(200, 10_000, 128, 8).unwrap();
        assert!(paper.score_ratio() > 40.0, "{}", paper.score_ratio());
        assert!((paper.flop_ratio() - 2.0 * 10_000.0 / 600.0).abs() < 1e-9);
        assert!(attention_cost(0, 1, 8, 1).is_err());
    }

    #[test]
    fn cost_model_matches_instrumented_core() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (n_i, n_b, c, h) in [(3, 40, 8, 2), (10, 64, 16, 4), (7, 33, 12, 3)] {
            let mut tape = Tape::<f32>::new();
            let li = tape.constant(Tensor::normal(&[n_i, c], 1.0, &mut rng));
            let lb = tape.constant(Tensor::normal(&[n_b, c], 1.0, &mut rng));
            reset_mac_count();
            bixattn_core(&mut tape, li, lb, h).unwrap();
            assert_eq!(mac_count(), attention_cost(n_i, n_b, c, h).unwrap().bixattn_flops);

            let x = Tensor::<f32>::normal(&[n_b, c], 1.0, &mut rng);
            reset_mac_count();
            dense_self_attention(&x, h, 16).unwrap();
            assert_eq!(mac_count(), attention_cost(n_i, n_b, c, h).unwrap().dense_bev_self_flops);
        }
    }

    #[test]
    fn dense_reference_matches_tape_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::normal(&[13, 8], 1.0, &mut rng);
        let fast = dense_self_attention(&x, 2, 5).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let mut heads = Vec::new();
        for h in 0..2 {
            let xh = tape.slice_cols(xv, h * 4, 4).unwrap();
            let s = tape.matmul_nt(xh, xh).unwrap();
            let s = tape.scale(s, 0.5).unwrap();
            let a = tape.softmax(s, 1).unwrap();
            heads.push(tape.matmul(a, xh).unwrap());
        }
        let y = tape.concat_cols(&heads).unwrap();
        assert!(tape.value(y).max_abs_diff(&fast) < 1e-12);
    }
}
