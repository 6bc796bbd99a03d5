//! Partition-specific multi-head self-attention.
//!
//! Each of the four branches partitions its channel group, runs scaled
//! dot-product attention inside every block with an additive
//! skeletal-temporal bias, and reverses the partition. Neighbouring-joint
//! branches use a temporal-only bias; distant-joint branches multiply in a
//! learned absolute skeletal bias (Kronecker product).

use std::sync::Arc;

use num_rational::Ratio;
use rand::{Rng, RngCore};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{cst, Graph, ParamMap, Scalar, Tensor, Var};
use crate::partition::{PartitionLayout, SkateType};

/// Learnable tensors of one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    /// `[H', 2T' - 1]` relative temporal table.
    pub rel_bias: Tensor<T>,
    /// `[H', V', V']` absolute skeletal bias, distant-joint branches only.
    pub abs_bias: Option<Tensor<T>>,
}

/// Parameters of all four branches.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub branches: [BranchParams<T>; 4],
    pub heads: usize,
}

/// Graph handles of one branch's parameters.
#[derive(Debug, Clone, Copy)]
pub struct BranchVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub rel_bias: Var,
    pub abs_bias: Option<Var>,
}

/// Post-softmax dropout applied in training.
pub struct AttnDropout<'a> {
    pub rate: f64,
    pub rng: &'a mut dyn RngCore,
}

impl<T: Scalar> BranchParams<T> {
    pub fn init<R: Rng + ?Sized>(ty: SkateType, layout: &PartitionLayout, c: usize, heads: usize, rng: &mut R) -> Self {
        let (_, tp, vp) = layout.partition_dims(ty);
        Self {
            w_q: Tensor::trunc_normal(&[c, c], 0.02, rng),
            w_k: Tensor::trunc_normal(&[c, c], 0.02, rng),
            w_v: Tensor::trunc_normal(&[c, c], 0.02, rng),
            rel_bias: Tensor::zeros(&[heads, 2 * tp - 1]),
            abs_bias: (!ty.is_neighbouring()).then(|| Tensor::ones(&[heads, vp, vp])),
        }
    }

    pub fn channels(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn insert_into(&self, map: &mut ParamMap<T>, prefix: &str) {
        map.insert(format!("{prefix}.w_q"), self.w_q.clone());
        map.insert(format!("{prefix}.w_k"), self.w_k.clone());
        map.insert(format!("{prefix}.w_v"), self.w_v.clone());
        map.insert(format!("{prefix}.rel_bias"), self.rel_bias.clone());
        if let Some(b) = &self.abs_bias {
            map.insert(format!("{prefix}.abs_bias"), b.clone());
        }
    }

    pub fn from_map(map: &ParamMap<T>, prefix: &str) -> Result<Self> {
        let get = |k: &str| {
            map.get(&format!("{prefix}.{k}"))
                .cloned()
                .ok_or_else(|| Error::Config(format!("missing parameter {prefix}.{k}")))
        };
        Ok(Self {
            w_q: get("w_q")?,
            w_k: get("w_k")?,
            w_v: get("w_v")?,
            rel_bias: get("rel_bias")?,
            abs_bias: map.get(&format!("{prefix}.abs_bias")).cloned(),
        })
    }

    /// Register as named graph parameters.
    pub fn to_vars(&self, g: &mut Graph<T>, prefix: &str) -> BranchVars {
        BranchVars {
            w_q: g.param(&format!("{prefix}.w_q"), self.w_q.clone()),
            w_k: g.param(&format!("{prefix}.w_k"), self.w_k.clone()),
            w_v: g.param(&format!("{prefix}.w_v"), self.w_v.clone()),
            rel_bias: g.param(&format!("{prefix}.rel_bias"), self.rel_bias.clone()),
            abs_bias: self.abs_bias.as_ref().map(|b| g.param(&format!("{prefix}.abs_bias"), b.clone())),
        }
    }
}

impl<T: Scalar> AttentionParams<T> {
    /// Parameters for `c_half = C/2` input channels and `heads = H'`.
    pub fn init<R: Rng + ?Sized>(layout: &PartitionLayout, c_half: usize, heads: usize, rng: &mut R) -> Result<Self> {
        let c = branch_channels(c_half, heads)?;
        let branches = SkateType::ALL.map(|ty| BranchParams::init(ty, layout, c, heads, rng));
        Ok(Self { branches, heads })
    }

    pub fn insert_into(&self, map: &mut ParamMap<T>, prefix: &str) {
        for (ty, b) in SkateType::ALL.iter().zip(&self.branches) {
            b.insert_into(map, &format!("{prefix}.{ty}"));
        }
    }

    pub fn from_map(map: &ParamMap<T>, prefix: &str, heads: usize) -> Result<Self> {
        let mut out = Vec::with_capacity(4);
        for ty in SkateType::ALL {
            out.push(BranchParams::from_map(map, &format!("{prefix}.{ty}"))?);
        }
        let branches: [BranchParams<T>; 4] = out.try_into().map_err(|_| Error::Config("branch count".into()))?;
        Ok(Self { branches, heads })
    }

    pub fn to_vars(&self, g: &mut Graph<T>, prefix: &str) -> [BranchVars; 4] {
        let mut it = SkateType::ALL.iter().zip(&self.branches).map(|(ty, b)| b.to_vars(g, &format!("{prefix}.{ty}")));
        [it.next().unwrap(), it.next().unwrap(), it.next().unwrap(), it.next().unwrap()]
    }
}

/// Channels per branch for `c_half = C/2`; must split into `heads` heads.
pub fn branch_channels(c_half: usize, heads: usize) -> Result<usize> {
    if !c_half.is_multiple_of(4) {
        return Err(Error::Config(format!("attention width {c_half} is not divisible into 4 branches")));
    }
    let c = c_half / 4;
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::Config(format!("{c} branch channels do not split into {heads} heads")));
    }
    Ok(c)
}

/// Index into a `[H, 2T'-1]` table for every entry of `[H, T'V', T'V']`.
fn rel_index(heads: usize, tp: usize, vp: usize) -> Vec<usize> {
    let s = tp * vp;
    let width = 2 * tp - 1;
    let mut idx = Vec::with_capacity(heads * s * s);
    for h in 0..heads {
        for i in 0..s {
            for j in 0..s {
                let (t1, t2) = (i / vp, j / vp);
                idx.push(h * width + t1 + tp - 1 - t2);
            }
        }
    }
    idx
}

/// Index into `[H, a, a]` expanded to `[H, a*b, a*b]` over the outer factor.
fn kron_outer_index(heads: usize, a: usize, b: usize) -> Vec<usize> {
    let s = a * b;
    let mut idx = Vec::with_capacity(heads * s * s);
    for h in 0..heads {
        for i in 0..s {
            for j in 0..s {
                idx.push((h * a + i / b) * a + j / b);
            }
        }
    }
    idx
}

/// Index into `[H, b, b]` expanded to `[H, a*b, a*b]` over the inner factor.
fn kron_inner_index(heads: usize, a: usize, b: usize) -> Vec<usize> {
    let s = a * b;
    let mut idx = Vec::with_capacity(heads * s * s);
    for h in 0..heads {
        for i in 0..s {
            for j in 0..s {
                idx.push((h * b + i % b) * b + j % b);
            }
        }
    }
    idx
}

/// Per-head Kronecker product `bt ⊗ bv` of `[H, T', T']` and `[H, V', V']`.
pub fn kron<T: Scalar>(g: &mut Graph<T>, bt: Var, bv: Var) -> Result<Var> {
    let (st, sv) = (g.shape(bt).to_vec(), g.shape(bv).to_vec());
    if st.len() != 3 || sv.len() != 3 || st[0] != sv[0] || st[1] != st[2] || sv[1] != sv[2] {
        return Err(dim_err(format!("kron expects [H,a,a] and [H,b,b], got {st:?} and {sv:?}")));
    }
    let (h, a, b) = (st[0], st[1], sv[1]);
    let shape = [h, a * b, a * b];
    let outer = g.gather(bt, Arc::new(kron_outer_index(h, a, b)), &shape)?;
    let inner = g.gather(bv, Arc::new(kron_inner_index(h, a, b)), &shape)?;
    g.mul(outer, inner)
}

/// Skeletal-temporal bias `[H', T'V', T'V']` for one branch. The relative
/// table entry for frames `(t1, t2)` sits at offset `t1 - t2 + T' - 1`.
pub fn build_bias<T: Scalar>(
    g: &mut Graph<T>,
    ty: SkateType,
    rel_bias: Var,
    abs_bias: Option<Var>,
    tp: usize,
    vp: usize,
) -> Result<Var> {
    let rs = g.shape(rel_bias).to_vec();
    if rs.len() != 2 || rs[1] != 2 * tp - 1 {
        return Err(dim_err(format!("relative table {rs:?} does not fit T' = {tp}")));
    }
    let heads = rs[0];
    let shape = [heads, tp * vp, tp * vp];
    match (ty.is_neighbouring(), abs_bias) {
        (true, _) => g.gather(rel_bias, Arc::new(rel_index(heads, tp, vp)), &shape),
        (false, Some(abs)) => {
            if g.shape(abs) != [heads, vp, vp] {
                return Err(dim_err(format!("absolute bias {:?} vs [{heads}, {vp}, {vp}]", g.shape(abs))));
            }
            let bt = g.gather(rel_bias, Arc::new(rel_index(heads, tp, 1)), &[heads, tp, tp])?;
            kron(g, bt, abs)
        }
        (false, None) => Err(Error::Config(format!("{ty} needs an absolute skeletal bias"))),
    }
}

/// Scaled dot-product attention over the `T'·V'` tokens of each block,
/// `xp: [B', T', V', c]`, `bias: [H', T'V', T'V']`.
pub fn msa<T: Scalar>(
    g: &mut Graph<T>,
    xp: Var,
    w: &BranchVars,
    bias: Var,
    heads: usize,
    dropout: Option<&mut AttnDropout<'_>>,
) -> Result<Var> {
    let xs = g.shape(xp).to_vec();
    if xs.len() != 4 {
        return Err(dim_err(format!("msa expects [B', T', V', c], got {xs:?}")));
    }
    let (bp, tp, vp, c) = (xs[0], xs[1], xs[2], xs[3]);
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{c} channels do not split into {heads} heads")));
    }
    let (s, d) = (tp * vp, c / heads);
    if g.shape(bias) != [heads, s, s] {
        return Err(dim_err(format!("bias {:?} vs [{heads}, {s}, {s}]", g.shape(bias))));
    }
    let x2 = g.reshape(xp, &[bp, s, c])?;
    let split = |g: &mut Graph<T>, wv: Var, perm: &[usize]| -> Result<Var> {
        let y = g.matmul(x2, wv)?;
        let y = g.reshape(y, &[bp, s, heads, d])?;
        g.permute(y, perm)
    };
    let q = split(g, w.w_q, &[0, 2, 1, 3])?;
    let k = split(g, w.w_k, &[0, 2, 3, 1])?;
    let v = split(g, w.w_v, &[0, 2, 1, 3])?;
    let logits = g.matmul(q, k)?;
    let logits = g.scale(logits, cst(1.0 / (d as f64).sqrt()));
    let logits = g.add_bcast(logits, bias)?;
    let mut attn = g.softmax(logits)?;
    if let Some(drop) = dropout {
        if drop.rate > 0.0 {
            let keep = 1.0 - drop.rate;
            let n = g.value(attn).numel();
            let mask: Vec<T> = (0..n)
                .map(|_| if drop.rng.random::<f64>() < keep { cst(1.0 / keep) } else { T::zero() })
                .collect();
            let mask = g.constant(Tensor::from_vec(&[bp, heads, s, s], mask)?);
            attn = g.mul(attn, mask)?;
        }
    }
    let o = g.matmul(attn, v)?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    g.reshape(o, &[bp, tp, vp, c])
}

/// Partition → attention → reverse for one branch; `x: [B, T, V, c]`.
pub fn branch_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    ty: SkateType,
    w: &BranchVars,
    layout: &PartitionLayout,
    heads: usize,
    dropout: Option<&mut AttnDropout<'_>>,
) -> Result<Var> {
    let (_, tp, vp) = layout.partition_dims(ty);
    let xp = layout.partition_var(g, x, ty)?;
    let bias = build_bias(g, ty, w.rel_bias, w.abs_bias, tp, vp)?;
    let y = msa(g, xp, w, bias, heads, dropout)?;
    layout.reverse_var(g, y, ty)
}

/// Split `x_msa: [B, T, V, C/2]` into four channel groups, run each through
/// its branch, and concatenate.
pub fn skate_msa<T: Scalar>(
    g: &mut Graph<T>,
    x_msa: Var,
    branches: &[BranchVars; 4],
    layout: &PartitionLayout,
    heads: usize,
    mut dropout: Option<&mut AttnDropout<'_>>,
) -> Result<Var> {
    let xs = g.shape(x_msa).to_vec();
    if xs.len() != 4 || xs[1] != layout.t() || xs[2] != layout.v() {
        return Err(dim_err(format!(
            "skate_msa input {xs:?} does not match layout T = {}, V = {}",
            layout.t(),
            layout.v()
        )));
    }
    let c = branch_channels(xs[3], heads)?;
    let mut outs = Vec::with_capacity(4);
    for (i, ty) in SkateType::ALL.into_iter().enumerate() {
        let xi = g.slice_last(x_msa, i * c, c)?;
        outs.push(branch_forward(g, xi, ty, &branches[i], layout, heads, dropout.as_deref_mut())?);
    }
    g.concat_last(&outs)
}

/// Mean pre-softmax logit `QKᵀ` of each branch (bias excluded), averaged
/// over blocks, heads and token pairs. `x_msa: [B, T, V, C/2]` or `[T, V, C/2]`.
pub fn importance_score<T: Scalar>(x_msa: &Tensor<T>, params: &AttentionParams<T>, layout: &PartitionLayout) -> Result<[f64; 4]> {
    let c_half = *x_msa.shape().last().ok_or_else(|| dim_err("importance_score on a scalar"))?;
    let c = branch_channels(c_half, params.heads)?;
    let mut scores = [0.0; 4];
    for (i, ty) in SkateType::ALL.into_iter().enumerate() {
        let p = &params.branches[i];
        let mut g = Graph::<T>::new();
        let x = g.constant(x_msa.clone());
        let x = if x_msa.rank() == 3 {
            let s = x_msa.shape();
            g.reshape(x, &[1, s[0], s[1], s[2]])?
        } else {
            x
        };
        let xi = g.slice_last(x, i * c, c)?;
        let xp = layout.partition_var(&mut g, xi, ty)?;
        let xs = g.shape(xp).to_vec();
        let (blocks, tokens) = (xs[0], xs[1] * xs[2]);
        let x2 = g.reshape(xp, &[blocks, tokens, c])?;
        let (wq, wk) = (g.constant(p.w_q.clone()), g.constant(p.w_k.clone()));
        let q = g.matmul(x2, wq)?;
        let k = g.matmul(x2, wk)?;
        // mean over (i, j) of q_i·k_j factorises into mean(q)·mean(k) per block
        let (qv, kv) = (g.value(q).data(), g.value(k).data());
        let mut total = 0.0;
        for b in 0..blocks {
            let mut qm = vec![0.0; c];
            let mut km = vec![0.0; c];
            for t in 0..tokens {
                for ch in 0..c {
                    qm[ch] += qv[(b * tokens + t) * c + ch].as_f64();
                    km[ch] += kv[(b * tokens + t) * c + ch].as_f64();
                }
            }
            let n2 = (tokens * tokens) as f64;
            total += qm.iter().zip(&km).map(|(a, b)| a * b).sum::<f64>() / n2;
        }
        scores[i] = total / (blocks * params.heads) as f64;
    }
    Ok(scores)
}

/// MAC counter threaded through [`naive_attention_oracle`].
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct MacCount {
    /// multiply-accumulates in the `QKᵀ` logits
    pub logits: u64,
    /// multiply-accumulates in the attention-weighted sum of values
    pub weighted_sum: u64,
}

impl MacCount {
    pub fn total(&self) -> u64 {
        self.logits + self.weighted_sum
    }
}

/// Full-grid reference attention in f64 over `x: [S, c]` (any leading
/// shape whose product is `S`). `mask: [S, S]` holds `0` or `-inf`;
/// `bias: [H, S, S]` is added to the scaled logits. Pairs masked with
/// `-inf` are skipped and not counted.
#[allow(clippy::too_many_arguments)]
pub fn naive_attention_oracle(
    x: &Tensor<f64>,
    w_q: &Tensor<f64>,
    w_k: &Tensor<f64>,
    w_v: &Tensor<f64>,
    mask: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    heads: usize,
    macs: &mut MacCount,
) -> Result<Tensor<f64>> {
    let c = *x.shape().last().ok_or_else(|| dim_err("oracle input is a scalar"))?;
    let s = x.numel() / c;
    if mask.shape() != [s, s] {
        return Err(dim_err(format!("mask {:?} vs {s} tokens", mask.shape())));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{c} channels do not split into {heads} heads")));
    }
    let d = c / heads;
    let xd = x.data();
    let project = |w: &Tensor<f64>| -> Vec<f64> {
        let mut out = vec![0.0; s * c];
        for i in 0..s {
            for j in 0..c {
                out[i * c + j] = (0..c).map(|k| xd[i * c + k] * w.data()[k * c + j]).sum();
            }
        }
        out
    };
    let (q, k, v) = (project(w_q), project(w_k), project(w_v));
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; s * c];
    for h in 0..heads {
        for i in 0..s {
            let mut logits = vec![f64::NEG_INFINITY; s];
            for (j, lj) in logits.iter_mut().enumerate() {
                let m = mask.data()[i * s + j];
                if m == f64::NEG_INFINITY {
                    continue;
                }
                let mut dot = 0.0;
                for e in 0..d {
                    dot += q[i * c + h * d + e] * k[j * c + h * d + e];
                }
                macs.logits += d as u64;
                *lj = dot * scale + m + bias.map_or(0.0, |b| b.data()[(h * s + i) * s + j]);
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { (l - mx).exp() }).collect();
            let z: f64 = weights.iter().sum();
            for (j, &wj) in weights.iter().enumerate() {
                if mask.data()[i * s + j] == f64::NEG_INFINITY {
                    continue;
                }
                for e in 0..d {
                    out[i * c + h * d + e] += wj / z * v[j * c + h * d + e];
                }
                macs.weighted_sum += d as u64;
            }
        }
    }
    Tensor::from_vec(&[s, c], out)
}

/// Shape parameters for the attention cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopsConfig {
    pub v: u64,
    pub t: u64,
    pub c: u64,
    pub k: u64,
    pub l: u64,
    pub m: u64,
    pub n: u64,
}

/// Multiply-accumulate counts of full-grid vs partitioned attention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopsReport {
    pub naive_macs: u128,
    pub skate_macs: u128,
    pub per_type_macs: [u128; 4],
    /// exact `naive / skate`
    pub ratio: Ratio<u128>,
}

impl FlopsReport {
    pub fn ratio_f64(&self) -> f64 {
        *self.ratio.numer() as f64 / *self.ratio.denom() as f64
    }

    /// Single-line JSON record.
    pub fn to_json(&self) -> String {
        format!(
            "{{\"naive_macs\":{},\"skate_macs\":{},\"per_type_macs\":[{},{},{},{}],\"ratio\":{:.3},\"ratio_exact\":\"{}/{}\"}}",
            self.naive_macs,
            self.skate_macs,
            self.per_type_macs[0],
            self.per_type_macs[1],
            self.per_type_macs[2],
            self.per_type_macs[3],
            self.ratio_f64(),
            self.ratio.numer(),
            self.ratio.denom()
        )
    }
}

/// Attention cost of a `(T, V, C/2)` feature map: naive `2(VT)²(C/2)` vs the
/// four partitioned branches, each `blocks · 2(T'V')² · C/8`.
pub fn count_flops(cfg: &FlopsConfig) -> Result<FlopsReport> {
    let FlopsConfig { v, t, c, k, l, m, n } = *cfg;
    if [v, t, c, k, l, m, n].contains(&0) {
        return Err(Error::Config("all of V, T, C, K, L, M, N must be positive".into()));
    }
    if v != k * l {
        return Err(Error::Config(format!("V = {v} but K·L = {}", k * l)));
    }
    if t != m * n {
        return Err(Error::Config(format!("T = {t} but M·N = {}", m * n)));
    }
    if c % 8 != 0 {
        return Err(Error::Config(format!("C = {c} is not divisible by 8")));
    }
    let w = |x: u64| x as u128;
    let naive = 2 * w(v * t).pow(2) * w(c / 2);
    let branch = |blocks: u64, tp: u64, vp: u64| w(blocks) * 2 * w(tp * vp).pow(2) * w(c / 8);
    let per_type = [branch(m * k, n, l), branch(m * l, n, k), branch(n * k, m, l), branch(n * l, m, k)];
    let skate: u128 = per_type.iter().sum();
    Ok(FlopsReport { naive_macs: naive, skate_macs: skate, per_type_macs: per_type, ratio: Ratio::new(naive, skate) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layout(k: usize, l: usize, m: usize, n: usize) -> PartitionLayout {
        let rows: Vec<Vec<usize>> = (0..k).map(|r| (r * l + 1..=(r + 1) * l).collect()).collect();
        PartitionLayout::from_table(&rows, m * n, n).unwrap()
    }

    fn random_branch(ty: SkateType, lay: &PartitionLayout, c: usize, heads: usize, rng: &mut ChaCha8Rng) -> BranchParams<f64> {
        let (_, tp, vp) = lay.partition_dims(ty);
        BranchParams {
            w_q: Tensor::randn(&[c, c], 0.5, rng),
            w_k: Tensor::randn(&[c, c], 0.5, rng),
            w_v: Tensor::randn(&[c, c], 0.5, rng),
            rel_bias: Tensor::randn(&[heads, 2 * tp - 1], 1.0, rng),
            abs_bias: (!ty.is_neighbouring()).then(|| Tensor::randn(&[heads, vp, vp], 1.0, rng)),
        }
    }

    fn bias_tensor(ty: SkateType, p: &BranchParams<f64>, tp: usize, vp: usize) -> Tensor<f64> {
        let mut g = Graph::new();
        let rel = g.constant(p.rel_bias.clone());
        let abs = p.abs_bias.clone().map(|b| g.constant(b));
        let b = build_bias(&mut g, ty, rel, abs, tp, vp).unwrap();
        g.value(b).clone()
    }

    fn run_msa(xp: &Tensor<f64>, p: &BranchParams<f64>, bias: &Tensor<f64>, heads: usize) -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        let x = g.constant(xp.clone());
        let w = p.to_vars(&mut g, "b");
        let bias = g.constant(bias.clone());
        let y = msa(&mut g, x, &w, bias, heads, None)?;
        Ok(g.value(y).clone())
    }

    fn run_branch(x: &Tensor<f64>, ty: SkateType, p: &BranchParams<f64>, lay: &PartitionLayout, heads: usize) -> Tensor<f64> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let w = p.to_vars(&mut g, "b");
        let y = branch_forward(&mut g, xv, ty, &w, lay, heads, None).unwrap();
        g.value(y).clone()
    }

    /// Full-grid mask and bias that reproduce branch `ty` on a `T·V` grid.
    fn full_grid_mask(ty: SkateType, lay: &PartitionLayout, branch_bias: &Tensor<f64>, heads: usize) -> (Tensor<f64>, Tensor<f64>) {
        let (t, v) = (lay.t(), lay.v());
        let (_, _, vp) = lay.partition_dims(ty);
        let s = t * v;
        let sp = branch_bias.shape()[1];
        let mut mask = Tensor::full(&[s, s], f64::NEG_INFINITY);
        let mut bias = Tensor::zeros(&[heads, s, s]);
        for i in 0..s {
            let (b1, t1, v1) = lay.token_block(ty, i / v, i % v);
            for j in 0..s {
                let (b2, t2, v2) = lay.token_block(ty, j / v, j % v);
                if b1 == b2 {
                    mask.set(&[i, j], 0.0);
                    for h in 0..heads {
                        let val = branch_bias.data()[(h * sp + t1 * vp + v1) * sp + t2 * vp + v2];
                        bias.set(&[h, i, j], val);
                    }
                }
            }
        }
        (mask, bias)
    }

    fn rel_close(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.max_abs_diff(b) / b.max_abs().max(1e-12)
    }

    #[test]
    fn zero_qk_gives_token_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xp = Tensor::<f64>::randn(&[2, 3, 2, 4], 1.0, &mut rng);
        let p = BranchParams {
            w_q: Tensor::zeros(&[4, 4]),
            w_k: Tensor::zeros(&[4, 4]),
            w_v: Tensor::eye(4),
            rel_bias: Tensor::zeros(&[2, 5]),
            abs_bias: None,
        };
        let y = run_msa(&xp, &p, &Tensor::zeros(&[2, 6, 6]), 2).unwrap();
        for b in 0..2 {
            for ch in 0..4 {
                let mean: f64 = (0..6).map(|s| xp.data()[(b * 6 + s) * 4 + ch]).sum::<f64>() / 6.0;
                for s in 0..6 {
                    assert!((y.data()[(b * 6 + s) * 4 + ch] - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_token_is_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xp = Tensor::<f64>::randn(&[3, 1, 1, 4], 1.0, &mut rng);
        let p = random_branch(SkateType::Type1, &layout(1, 1, 1, 1), 4, 2, &mut rng);
        let y = run_msa(&xp, &p, &Tensor::zeros(&[2, 1, 1]), 2).unwrap();
        for b in 0..3 {
            for j in 0..4 {
                let want: f64 = (0..4).map(|k| xp.data()[b * 4 + k] * p.w_v.data()[k * 4 + j]).sum();
                assert!((y.data()[b * 4 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn msa_matches_literal_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (bp, tp, vp, c, h) = (2, 3, 2, 8, 2);
        let xp = Tensor::<f64>::randn(&[bp, tp, vp, c], 1.0, &mut rng);
        let p = random_branch(SkateType::Type2, &layout(2, 2, 1, 3), c, h, &mut rng);
        let bias = Tensor::<f64>::randn(&[h, tp * vp, tp * vp], 1.0, &mut rng);
        let y = run_msa(&xp, &p, &bias, h).unwrap();
        // step-by-step per block, per head
        let (s, d) = (tp * vp, c / h);
        let mm = |x: &[f64], w: &Tensor<f64>| -> Vec<f64> {
            (0..s * c).map(|e| (0..c).map(|k| x[(e / c) * c + k] * w.data()[k * c + e % c]).sum()).collect()
        };
        for b in 0..bp {
            let xb = &xp.data()[b * s * c..(b + 1) * s * c];
            let (q, k, v) = (mm(xb, &p.w_q), mm(xb, &p.w_k), mm(xb, &p.w_v));
            for hh in 0..h {
                for i in 0..s {
                    let logits: Vec<f64> = (0..s)
                        .map(|j| {
                            let dot: f64 = (0..d).map(|e| q[i * c + hh * d + e] * k[j * c + hh * d + e]).sum();
                            dot / (d as f64).sqrt() + bias.data()[(hh * s + i) * s + j]
                        })
                        .collect();
                    let z: f64 = logits.iter().map(|l| l.exp()).sum();
                    for e in 0..d {
                        let want: f64 = (0..s).map(|j| logits[j].exp() / z * v[j * c + hh * d + e]).sum();
                        let got = y.data()[(b * s + i) * c + hh * d + e];
                        assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn msa_rejects_indivisible_heads() {
        let xp = Tensor::<f64>::zeros(&[1, 1, 1, 6]);
        let p = BranchParams {
            w_q: Tensor::zeros(&[6, 6]),
            w_k: Tensor::zeros(&[6, 6]),
            w_v: Tensor::zeros(&[6, 6]),
            rel_bias: Tensor::zeros(&[4, 1]),
            abs_bias: None,
        };
        assert!(matches!(run_msa(&xp, &p, &Tensor::zeros(&[4, 1, 1]), 4), Err(Error::Config(_))));
        assert!(branch_channels(24, 4).is_err());
        assert!(branch_channels(30, 2).is_err());
        assert_eq!(branch_channels(32, 4).unwrap(), 8);
    }

    #[test]
    fn kronecker_of_literal_blocks() {
        let (a, b, c, d) = (2.0, -1.0, 0.5, 3.0);
        let mut g = Graph::<f64>::new();
        let bt = g.constant(Tensor::from_vec(&[1, 2, 2], vec![a, b, c, d]).unwrap());
        let bv = g.constant(Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let k = kron(&mut g, bt, bv).unwrap();
        let want = [
            [a, 2.0 * a, b, 2.0 * b],
            [3.0 * a, 4.0 * a, 3.0 * b, 4.0 * b],
            [c, 2.0 * c, d, 2.0 * d],
            [3.0 * c, 4.0 * c, 3.0 * d, 4.0 * d],
        ];
        let flat: Vec<f64> = want.iter().flatten().copied().collect();
        assert_eq!(g.value(k).data(), &flat[..]);
    }

    #[test]
    fn kronecker_of_identities_is_identity() {
        let mut g = Graph::<f64>::new();
        let i3 = Tensor::eye(3).reshape(&[1, 3, 3]).unwrap();
        let i2 = Tensor::eye(2).reshape(&[1, 2, 2]).unwrap();
        let (a, b) = (g.constant(i3), g.constant(i2));
        let k = kron(&mut g, a, b).unwrap();
        assert_eq!(g.value(k).reshape(&[6, 6]).unwrap(), Tensor::eye(6));
    }

    #[test]
    fn bias_structure_per_type() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lay = layout(2, 3, 2, 4);
        for ty in SkateType::ALL {
            let (_, tp, vp) = lay.partition_dims(ty);
            let p = random_branch(ty, &lay, 4, 2, &mut rng);
            let bias = bias_tensor(ty, &p, tp, vp);
            let s = tp * vp;
            for h in 0..2 {
                for (t1, t2) in (0..tp).flat_map(|a| (0..tp).map(move |b| (a, b))) {
                    let bt = p.rel_bias.get(&[h, t1 + tp - 1 - t2]);
                    for (v1, v2) in (0..vp).flat_map(|a| (0..vp).map(move |b| (a, b))) {
                        let got = bias.data()[(h * s + t1 * vp + v1) * s + t2 * vp + v2];
                        let bv = p.abs_bias.as_ref().map_or(1.0, |b| b.get(&[h, v1, v2]));
                        assert_eq!(got, bt * bv, "{ty} h={h} t=({t1},{t2}) v=({v1},{v2})");
                    }
                }
            }
        }
    }

    #[test]
    fn djp_bias_requires_absolute_table() {
        let mut g = Graph::<f64>::new();
        let rel = g.constant(Tensor::zeros(&[2, 3]));
        assert!(build_bias(&mut g, SkateType::Type2, rel, None, 2, 2).is_err());
        assert!(build_bias(&mut g, SkateType::Type1, rel, None, 3, 2).is_err());
    }

    #[test]
    fn skate_msa_with_trivial_weights_averages_blocks() {
        let lay = layout(2, 4, 4, 4);
        let (t, v, c_half, heads) = (16, 8, 16, 2);
        let c = c_half / 4;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(&[1, t, v, c_half], 1.0, &mut rng);
        let mut params = AttentionParams::<f64>::init(&lay, c_half, heads, &mut rng).unwrap();
        for b in &mut params.branches {
            b.w_q = Tensor::zeros(&[c, c]);
            b.w_k = Tensor::zeros(&[c, c]);
            b.w_v = Tensor::eye(c);
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let vars = params.to_vars(&mut g, "a");
        let y = skate_msa(&mut g, xv, &vars, &lay, heads, None).unwrap();
        let y = g.value(y);
        assert_eq!(y.shape(), x.shape());
        for (i, ty) in SkateType::ALL.into_iter().enumerate() {
            let (blocks, tp, vp) = lay.partition_dims(ty);
            let mut sums = vec![0.0; blocks * c];
            for ti in 0..t {
                for vi in 0..v {
                    let (b, _, _) = lay.token_block(ty, ti, vi);
                    for ch in 0..c {
                        sums[b * c + ch] += x.get(&[0, ti, vi, i * c + ch]);
                    }
                }
            }
            for ti in 0..t {
                for vi in 0..v {
                    let (b, _, _) = lay.token_block(ty, ti, vi);
                    for ch in 0..c {
                        let want = sums[b * c + ch] / (tp * vp) as f64;
                        assert!((y.get(&[0, ti, vi, i * c + ch]) - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn skate_msa_shape_contract_and_errors() {
        let lay = layout(2, 4, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = AttentionParams::<f64>::init(&lay, 16, 2, &mut rng).unwrap();
        let mut g = Graph::new();
        let vars = params.to_vars(&mut g, "a");
        let x = g.constant(Tensor::randn(&[2, 16, 8, 16], 1.0, &mut rng));
        let y = skate_msa(&mut g, x, &vars, &lay, 2, None).unwrap();
        assert_eq!(g.shape(y), &[2, 16, 8, 16]);
        let bad = g.constant(Tensor::zeros(&[1, 16, 7, 16]));
        assert!(skate_msa(&mut g, bad, &vars, &lay, 2, None).is_err());
        let bad = g.constant(Tensor::zeros(&[1, 16, 8, 12]));
        assert!(skate_msa(&mut g, bad, &vars, &lay, 2, None).is_err());
    }

    #[test]
    fn init_biases_are_zero_at_start() {
        let lay = layout(2, 4, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = AttentionParams::<f64>::init(&lay, 16, 2, &mut rng).unwrap();
        for (ty, p) in SkateType::ALL.iter().zip(&params.branches) {
            let (_, tp, vp) = lay.partition_dims(*ty);
            assert_eq!(bias_tensor(*ty, p, tp, vp).max_abs(), 0.0);
            assert_eq!(p.abs_bias.is_some(), !ty.is_neighbouring());
        }
    }

    #[test]
    fn oracle_with_open_mask_is_full_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let lay = layout(1, 4, 1, 3);
        let x = Tensor::<f64>::randn(&[1, 3, 4, 4], 1.0, &mut rng);
        let p = random_branch(SkateType::Type1, &lay, 4, 2, &mut rng);
        // with K = M = 1, type 1 is a single block covering the grid
        let bias = bias_tensor(SkateType::Type1, &p, 3, 4);
        let mut macs = MacCount::default();
        let y = naive_attention_oracle(&x, &p.w_q, &p.w_k, &p.w_v, &Tensor::zeros(&[12, 12]), Some(&bias), 2, &mut macs).unwrap();
        let branch = run_branch(&x, SkateType::Type1, &p, &lay, 2);
        assert!(rel_close(&branch.reshape(&[12, 4]).unwrap(), &y) < 1e-10);
        assert_eq!(macs.total(), 2 * 144 * 4);
    }

    #[test]
    fn oracle_diagonal_mask_is_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn(&[3, 2, 4], 1.0, &mut rng);
        let lay = layout(1, 2, 1, 3);
        let p = random_branch(SkateType::Type1, &lay, 4, 2, &mut rng);
        let mut mask = Tensor::full(&[6, 6], f64::NEG_INFINITY);
        for i in 0..6 {
            mask.set(&[i, i], 0.0);
        }
        let mut macs = MacCount::default();
        let y = naive_attention_oracle(&x, &p.w_q, &p.w_k, &p.w_v, &mask, None, 2, &mut macs).unwrap();
        for i in 0..6 {
            for j in 0..4 {
                let want: f64 = (0..4).map(|k| x.data()[i * 4 + k] * p.w_v.data()[k * 4 + j]).sum();
                assert!((y.get(&[i, j]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flops_reference_and_closed_form_ratios() {
        let ntu = count_flops(&FlopsConfig { v: 48, t: 64, c: 96, k: 12, l: 4, m: 8, n: 8 }).unwrap();
        assert_eq!(ntu.ratio, Ratio::from_integer(48));
        let ucla = count_flops(&FlopsConfig { v: 20, t: 64, c: 96, k: 5, l: 4, m: 8, n: 8 }).unwrap();
        let want = 1.0 / (0.25 * (1.0 / 40.0 + 1.0 / 32.0 + 1.0 / 40.0 + 1.0 / 32.0));
        assert!((ucla.ratio_f64() - want).abs() < 1e-12);
        assert_eq!(ucla.ratio, Ratio::new(320, 9));
        let one = count_flops(&FlopsConfig { v: 1, t: 1, c: 8, k: 1, l: 1, m: 1, n: 1 }).unwrap();
        assert_eq!(one.ratio, Ratio::from_integer(1));
        assert!(ntu.to_json().contains("\"ratio\":48.000"));
    }

    #[test]
    fn flops_rejects_inconsistent_config() {
        let base = FlopsConfig { v: 20, t: 64, c: 96, k: 5, l: 4, m: 8, n: 8 };
        for bad in [FlopsConfig { v: 21, ..base }, FlopsConfig { t: 63, ..base }, FlopsConfig { c: 92, ..base }, FlopsConfig { k: 0, ..base }] {
            assert!(matches!(count_flops(&bad), Err(Error::Config(_))));
        }
    }

    #[test]
    fn importance_scores_zero_and_bilinear() {
        let lay = layout(2, 4, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let params = AttentionParams::<f64>::init(&lay, 16, 2, &mut rng).unwrap();
        let zero = importance_score(&Tensor::zeros(&[8, 8, 16]), &params, &lay).unwrap();
        assert_eq!(zero, [0.0; 4]);
        let x = Tensor::<f64>::randn(&[8, 8, 16], 1.0, &mut rng);
        let s1 = importance_score(&x, &params, &lay).unwrap();
        let s2 = importance_score(&x.map(|v| 2.0 * v), &params, &lay).unwrap();
        for i in 0..4 {
            assert!((s2[i] - 4.0 * s1[i]).abs() <= 1e-12 * s1[i].abs().max(1e-300) + 1e-18);
        }
    }

    #[test]
    fn importance_score_matches_explicit_logits() {
        let lay = layout(2, 4, 2, 4);
        let heads = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = AttentionParams::<f64>::init(&lay, 16, heads, &mut rng).unwrap();
        for (ty, b) in SkateType::ALL.into_iter().zip(&mut params.branches) {
            *b = random_branch(ty, &lay, 4, heads, &mut rng);
        }
        let x = Tensor::<f64>::randn(&[8, 8, 16], 1.0, &mut rng);
        let got = importance_score(&x, &params, &lay).unwrap();
        let (c, d) = (4, 2);
        for (i, ty) in SkateType::ALL.into_iter().enumerate() {
            let p = &params.branches[i];
            let xs: Vec<f64> = (0..64).flat_map(|tok| (0..c).map(move |ch| (tok, ch))).map(|(tok, ch)| x.data()[tok * 16 + i * c + ch]).collect();
            let proj = |w: &Tensor<f64>| -> Vec<f64> {
                (0..64 * c).map(|e| (0..c).map(|k| xs[(e / c) * c + k] * w.data()[k * c + e % c]).sum()).collect()
            };
            let (q, k) = (proj(&p.w_q), proj(&p.w_k));
            let (mut total, mut count) = (0.0, 0usize);
            for a in 0..64 {
                for b in 0..64 {
                    if lay.token_block(ty, a / 8, a % 8).0 != lay.token_block(ty, b / 8, b % 8).0 {
                        continue;
                    }
                    for h in 0..heads {
                        total += (0..d).map(|e| q[a * c + h * d + e] * k[b * c + h * d + e]).sum::<f64>();
                        count += 1;
                    }
                }
            }
            let want = total / count as f64;
            assert!((got[i] - want).abs() <= 1e-6 * want.abs().max(1e-3), "{ty}: {} vs {want}", got[i]);
        }
    }

    #[test]
    fn dropout_changes_training_output_only_when_enabled() {
        let lay = layout(2, 4, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let params = AttentionParams::<f64>::init(&lay, 16, 2, &mut rng).unwrap();
        let x = Tensor::<f64>::randn(&[1, 8, 8, 16], 1.0, &mut rng);
        let run = |rate: f64| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let vars = params.to_vars(&mut g, "a");
            let mut drng = ChaCha8Rng::seed_from_u64(0);
            let mut drop = AttnDropout { rate, rng: &mut drng };
            let y = skate_msa(&mut g, xv, &vars, &lay, 2, Some(&mut drop)).unwrap();
            g.value(y).clone()
        };
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let vars = params.to_vars(&mut g, "a");
        let y = skate_msa(&mut g, xv, &vars, &lay, 2, None).unwrap();
        assert_eq!(&run(0.0), g.value(y));
        assert!(run(0.5).max_abs_diff(g.value(y)) > 1e-6);
    }

    #[test]
    fn flops_match_oracle_mac_counter() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let lay = layout(2, 3, 2, 2);
        let (t, v, c_full) = (4, 6, 16);
        let rep = count_flops(&FlopsConfig { v: 6, t: 4, c: 16, k: 2, l: 3, m: 2, n: 2 }).unwrap();
        let x = Tensor::<f64>::randn(&[t, v, c_full / 2], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[8, 8], 1.0, &mut rng);
        let mut naive = MacCount::default();
        naive_attention_oracle(&x, &w, &w, &w, &Tensor::zeros(&[24, 24]), None, 2, &mut naive).unwrap();
        assert_eq!(naive.total() as u128, rep.naive_macs);
        let xs = Tensor::<f64>::randn(&[t, v, 2], 1.0, &mut rng);
        let ws = Tensor::<f64>::randn(&[2, 2], 1.0, &mut rng);
        let mut skate = 0u128;
        for ty in SkateType::ALL {
            let (mask, _) = full_grid_mask(ty, &lay, &Tensor::zeros(&[0, 1, 1]), 0);
            let mut m = MacCount::default();
            naive_attention_oracle(&xs, &ws, &ws, &ws, &mask, None, 1, &mut m).unwrap();
            skate += m.total() as u128;
            let want = rep.per_type_macs[ty.index()] as f64;
            assert!((m.total() as f64 - want).abs() / want < 0.01);
        }
        assert_eq!(skate, rep.skate_macs);
        assert_eq!(rep.per_type_macs.iter().sum::<u128>(), rep.skate_macs);
    }

    fn small_config() -> impl Strategy<Value = (usize, usize, usize, usize, usize, u64)> {
        (1usize..4, 1usize..4, 1usize..3, 1usize..4, 1usize..3, any::<u64>())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn branch_equals_masked_oracle((k, l, m, n, heads, seed) in small_config()) {
            let lay = layout(k, l, m, n);
            let c = 2 * heads;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::randn(&[1, m * n, k * l, c], 1.0, &mut rng);
            for ty in SkateType::ALL {
                let (_, tp, vp) = lay.partition_dims(ty);
                let p = random_branch(ty, &lay, c, heads, &mut rng);
                let bias = bias_tensor(ty, &p, tp, vp);
                let (mask, full_bias) = full_grid_mask(ty, &lay, &bias, heads);
                let mut macs = MacCount::default();
                let want = naive_attention_oracle(&x, &p.w_q, &p.w_k, &p.w_v, &mask, Some(&full_bias), heads, &mut macs).unwrap();
                let got = run_branch(&x, ty, &p, &lay, heads).reshape(&[m * n * k * l, c]).unwrap();
                prop_assert!(rel_close(&got, &want) <= 1e-5, "{} rel err {}", ty, rel_close(&got, &want));
            }
        }

        #[test]
        fn block_permutation_equivariance(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (tp, vp, c, heads) = (3, 2, 4, 2);
            let s = tp * vp;
            let xp = Tensor::<f64>::randn(&[1, tp, vp, c], 1.0, &mut rng);
            let p = random_branch(SkateType::Type2, &layout(2, 2, 1, 3), c, heads, &mut rng);
            let bias = Tensor::<f64>::randn(&[heads, s, s], 1.0, &mut rng);
            let perm = {
                let mut v: Vec<usize> = (0..s).collect();
                use rand::seq::SliceRandom;
                v.shuffle(&mut rng);
                v
            };
            let xperm: Vec<f64> = perm.iter().flat_map(|&i| xp.data()[i * c..(i + 1) * c].to_vec()).collect();
            let mut bperm = Tensor::zeros(&[heads, s, s]);
            for h in 0..heads {
                for i in 0..s {
                    for j in 0..s {
                        bperm.set(&[h, i, j], bias.get(&[h, perm[i], perm[j]]));
                    }
                }
            }
            let y = run_msa(&xp, &p, &bias, heads).unwrap();
            let yp = run_msa(&Tensor::from_vec(&[1, tp, vp, c], xperm).unwrap(), &p, &bperm, heads).unwrap();
            for (i, &pi) in perm.iter().enumerate() {
                for ch in 0..c {
                    prop_assert!((yp.data()[i * c + ch] - y.data()[pi * c + ch]).abs() < 1e-10);
                }
            }
        }
    }
}
