use std::collections::BTreeMap;

use rand::{Rng, RngCore};

use crate::attention::{skate_msa, AttnDropout, BranchVars};
use crate::error::{dim_err, Error, Result};
use crate::numerics::{cst, Graph, Scalar, Tensor, Var};
use crate::partition::{PartitionLayout, SkateType};

use super::config::ModelConfig;
use super::params::{block_prefix, is_buffer, ModelParams};

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Eval disables dropout and drop-path and normalizes with running stats.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Everything a forward pass produces besides the graph itself.
pub struct ForwardOutput<T> {
    /// `[B, N_c]`
    pub logits: Var,
    /// New batch-norm running statistics (train mode only).
    pub bn_updates: Vec<(String, Tensor<T>)>,
    /// Per-sample output shape after every module.
    pub trace: Vec<(String, Vec<usize>)>,
    /// Input to each block's attention branch, `[B, T_s, V, C_s/2]`.
    pub msa_inputs: Vec<Tensor<T>>,
}

/// Graph handles of the learnable tensors plus read access to buffers.
pub struct ModelVars<'a, T> {
    pub vars: BTreeMap<String, Var>,
    pub params: &'a ModelParams<T>,
}

impl<'a, T: Scalar> ModelVars<'a, T> {
    /// Register every learnable tensor as a named graph parameter.
    pub fn register(g: &mut Graph<T>, params: &'a ModelParams<T>) -> Self {
        let vars = params
            .tensors
            .iter()
            .filter(|(k, _)| !is_buffer(k))
            .map(|(k, t)| (k.clone(), g.param(k, t.clone())))
            .collect();
        Self { vars, params }
    }

    /// Register every learnable tensor as a constant.
    pub fn constants(g: &mut Graph<T>, params: &'a ModelParams<T>) -> Self {
        let vars = params
            .tensors
            .iter()
            .filter(|(k, _)| !is_buffer(k))
            .map(|(k, t)| (k.clone(), g.constant(t.clone())))
            .collect();
        Self { vars, params }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    fn opt(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    fn branches(&self, prefix: &str) -> Result<[BranchVars; 4]> {
        let mut out = Vec::with_capacity(4);
        for ty in SkateType::ALL {
            let p = format!("{prefix}.{ty}");
            out.push(BranchVars {
                w_q: self.var(&format!("{p}.w_q"))?,
                w_k: self.var(&format!("{p}.w_k"))?,
                w_v: self.var(&format!("{p}.w_v"))?,
                rel_bias: self.var(&format!("{p}.rel_bias"))?,
                abs_bias: self.opt(&format!("{p}.abs_bias")),
            });
        }
        Ok([out[0], out[1], out[2], out[3]])
    }
}

/// Sinusoidal temporal features `[T, C]` of normalized frame positions.
pub fn temporal_embedding(t_norm: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; t_norm.len() * c];
    for (i, &t) in t_norm.iter().enumerate() {
        for d in 0..c {
            let k = d / 2;
            let freq = 10000f64.powf((2 * k) as f64 / c as f64);
            out[i * c + d] = if d % 2 == 0 { (t / freq).sin() } else { (t / freq).cos() };
        }
    }
    out
}

/// `STE[b, i, j, d] = SE[j, d] · TE_b[i, d]` for every sample's positions.
pub fn skate_embedding<T: Scalar>(g: &mut Graph<T>, se: Var, t_norm: &[Vec<f64>]) -> Result<Var> {
    let ss = g.shape(se).to_vec();
    if ss.len() != 2 || !ss[1].is_multiple_of(2) {
        return Err(dim_err(format!("skate_embedding: SE must be [V, C] with C even, got {ss:?}")));
    }
    let (v, c) = (ss[0], ss[1]);
    let b = t_norm.len();
    let t = t_norm.first().map_or(0, Vec::len);
    if t_norm.iter().any(|r| r.len() != t) {
        return Err(dim_err("skate_embedding: ragged frame positions"));
    }
    let mut te = Vec::with_capacity(b * t * v * c);
    for row in t_norm {
        let e = temporal_embedding(row, c);
        for i in 0..t {
            for _ in 0..v {
                te.extend(e[i * c..(i + 1) * c].iter().map(|&x| cst::<T>(x)));
            }
        }
    }
    let te = g.constant(Tensor::from_vec(&[b, t, v, c], te)?);
    let zeros = g.constant(Tensor::zeros(&[b, t, v, c]));
    let se_b = g.add_bcast(zeros, se)?;
    g.mul(se_b, te)
}

/// Per-group joint mixing: group `h` of the channels is multiplied by
/// `G[h]` along the joint axis. `x: [B, T, V, Q]`, `gm: [G, V, V]`.
pub fn g_conv<T: Scalar>(g: &mut Graph<T>, x: Var, gm: Var) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let gs = g.shape(gm).to_vec();
    if xs.len() != 4 || gs.len() != 3 || gs[1] != xs[2] || gs[2] != xs[2] || gs[0] == 0 || !xs[3].is_multiple_of(gs[0]) {
        return Err(dim_err(format!("g_conv: input {xs:?} does not fit matrices {gs:?}")));
    }
    let (b, t, v, q) = (xs[0], xs[1], xs[2], xs[3]);
    let (groups, cg) = (gs[0], q / gs[0]);
    let y = g.reshape(x, &[b, t, v, groups, cg])?;
    let y = g.permute(y, &[3, 2, 0, 1, 4])?;
    let y = g.reshape(y, &[groups, v, b * t * cg])?;
    let y = g.matmul(gm, y)?;
    let y = g.reshape(y, &[groups, v, b, t, cg])?;
    let y = g.permute(y, &[2, 3, 1, 0, 4])?;
    g.reshape(y, &[b, t, v, q])
}

/// Zero whole samples with probability `rate`, rescaling survivors.
fn drop_path<T: Scalar>(g: &mut Graph<T>, x: Var, rate: f64, rng: &mut dyn RngCore) -> Result<Var> {
    if rate <= 0.0 {
        return Ok(x);
    }
    let xs = g.shape(x).to_vec();
    let per = xs[1..].iter().product::<usize>();
    let mut mask = Vec::with_capacity(xs[0] * per);
    for _ in 0..xs[0] {
        let keep = if rng.random_bool(1.0 - rate) { 1.0 / (1.0 - rate) } else { 0.0 };
        mask.extend(std::iter::repeat_n(cst::<T>(keep), per));
    }
    let m = g.constant(Tensor::from_vec(&xs, mask)?);
    g.mul(x, m)
}

fn linear<T: Scalar>(g: &mut Graph<T>, mv: &ModelVars<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let w = mv.var(&format!("{prefix}.w"))?;
    let b = mv.opt(&format!("{prefix}.b"));
    g.linear(x, w, b)
}

fn layer_norm<T: Scalar>(g: &mut Graph<T>, mv: &ModelVars<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let (gamma, beta) = (mv.var(&format!("{prefix}.g"))?, mv.var(&format!("{prefix}.b"))?);
    g.layer_norm(x, gamma, beta, LN_EPS)
}

/// Per-block settings that are not tensors.
pub struct BlockSpec<'l> {
    pub layout: &'l PartitionLayout,
    pub heads: usize,
    pub attention: bool,
    pub drop_path: f64,
    pub attn_drop: f64,
}

/// One block: `x + Linear(GConv ∥ TConv ∥ SkateMSA)` then `x + FFN(x)`.
/// Returns the block output and the attention-branch input.
pub fn block_forward<T: Scalar>(
    g: &mut Graph<T>,
    mv: &ModelVars<'_, T>,
    prefix: &str,
    x: Var,
    spec: &BlockSpec<'_>,
    mode: &mut Mode<'_>,
) -> Result<(Var, Var)> {
    let h = layer_norm(g, mv, x, &format!("{prefix}.ln1"))?;
    let h = linear(g, mv, h, &format!("{prefix}.pre"))?;
    let c = *g.shape(h).last().unwrap();
    let q = c / 4;
    let x_gc = g.slice_last(h, 0, q)?;
    let x_tc = g.slice_last(h, q, q)?;
    let x_msa = g.slice_last(h, 2 * q, 2 * q)?;

    let y_gc = g_conv(g, x_gc, mv.var(&format!("{prefix}.gconv.g"))?)?;
    let tw = mv.var(&format!("{prefix}.tconv.w"))?;
    let k = g.shape(tw)[1];
    let y_tc = g.conv1d_grouped(x_tc, tw, Some(mv.var(&format!("{prefix}.tconv.b"))?), 1, k / 2)?;
    let y_msa = if spec.attention {
        let branches = mv.branches(&format!("{prefix}.attn"))?;
        match mode {
            Mode::Train(rng) if spec.attn_drop > 0.0 => {
                let mut d = AttnDropout { rate: spec.attn_drop, rng: &mut **rng };
                skate_msa(g, x_msa, &branches, spec.layout, spec.heads, Some(&mut d))?
            }
            _ => skate_msa(g, x_msa, &branches, spec.layout, spec.heads, None)?,
        }
    } else {
        x_msa
    };
    let y = g.concat_last(&[y_gc, y_tc, y_msa])?;
    let mut y = linear(g, mv, y, &format!("{prefix}.post"))?;
    if let Mode::Train(rng) = mode {
        y = drop_path(g, y, spec.drop_path, &mut **rng)?;
    }
    let res = match mv.opt(&format!("{prefix}.res.w")) {
        Some(_) => linear(g, mv, x, &format!("{prefix}.res"))?,
        None => x,
    };
    let x = g.add(res, y)?;

    let h = layer_norm(g, mv, x, &format!("{prefix}.ln2"))?;
    let h = linear(g, mv, h, &format!("{prefix}.ffn.l1"))?;
    let h = g.gelu(h);
    let mut h = linear(g, mv, h, &format!("{prefix}.ffn.l2"))?;
    if let Mode::Train(rng) = mode {
        h = drop_path(g, h, spec.drop_path, &mut **rng)?;
    }
    Ok((g.add(x, h)?, x_msa))
}

/// Stride-2 grouped temporal convolution followed by batch norm.
fn downsample<T: Scalar>(
    g: &mut Graph<T>,
    mv: &ModelVars<'_, T>,
    prefix: &str,
    x: Var,
    train: bool,
    updates: &mut Vec<(String, Tensor<T>)>,
) -> Result<Var> {
    let w = mv.var(&format!("{prefix}.w"))?;
    let k = g.shape(w)[1];
    let y = g.conv1d_grouped(x, w, None, 2, k / 2)?;
    let (gamma, beta) = (mv.var(&format!("{prefix}.bn.g"))?, mv.var(&format!("{prefix}.bn.b"))?);
    let rm_name = format!("{prefix}.bn.running_mean");
    let rv_name = format!("{prefix}.bn.running_var");
    let rm = mv.params.get(&rm_name)?;
    let rv = mv.params.get(&rv_name)?;
    if train {
        let c = *g.shape(y).last().unwrap();
        let data = g.value(y).data();
        let n = data.len() / c;
        let mut mean = vec![0.0f64; c];
        for (i, v) in data.iter().enumerate() {
            mean[i % c] += v.as_f64();
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0f64; c];
        for (i, v) in data.iter().enumerate() {
            let d = v.as_f64() - mean[i % c];
            var[i % c] += d * d;
        }
        let unbiased = (n.max(2) - 1) as f64;
        let new_rm: Vec<T> = (0..c).map(|i| cst((1.0 - BN_MOMENTUM) * rm.data()[i].as_f64() + BN_MOMENTUM * mean[i])).collect();
        let new_rv: Vec<T> =
            (0..c).map(|i| cst((1.0 - BN_MOMENTUM) * rv.data()[i].as_f64() + BN_MOMENTUM * var[i] / unbiased)).collect();
        updates.push((rm_name, Tensor::from_vec(&[c], new_rm)?));
        updates.push((rv_name, Tensor::from_vec(&[c], new_rv)?));
        g.batch_norm_train(y, gamma, beta, BN_EPS)
    } else {
        let neg_mean = g.constant(rm.map(|m| -m));
        let rstd = g.constant(rv.map(|v| T::one() / (v + cst(BN_EPS)).sqrt()));
        let y = g.add_bcast(y, neg_mean)?;
        let y = g.mul_bcast(y, rstd)?;
        let y = g.mul_bcast(y, gamma)?;
        g.add_bcast(y, beta)
    }
}

fn per_sample(shape: &[usize]) -> Vec<usize> {
    shape[1..].to_vec()
}

/// Full network on `x: [B, T, V, 3]` (joints already in layout order) with
/// per-sample normalized frame positions `t_norm: B × T`.
pub fn forward_with<T: Scalar>(
    g: &mut Graph<T>,
    mv: &ModelVars<'_, T>,
    x: Var,
    t_norm: &[Vec<f64>],
    cfg: &ModelConfig,
    mode: &mut Mode<'_>,
) -> Result<ForwardOutput<T>> {
    let xs = g.shape(x).to_vec();
    let v = cfg.joints()?;
    if xs.len() != 4 || xs[1] != cfg.frames || xs[2] != v || xs[3] != 3 {
        return Err(dim_err(format!("model input {xs:?} does not match [B, {}, {v}, 3]", cfg.frames)));
    }
    if t_norm.len() != xs[0] {
        return Err(dim_err(format!("{} position rows for batch of {}", t_norm.len(), xs[0])));
    }
    let mut trace = vec![("Input".to_string(), per_sample(&xs))];
    let mut h = x;
    for i in 1..=3 {
        h = linear(g, mv, h, &format!("proj.l{i}"))?;
        if i < 3 {
            h = g.gelu(h);
        }
        trace.push((format!("Linear {i}"), per_sample(g.shape(h))));
    }
    let ste = skate_embedding(g, mv.var("embed.se")?, t_norm)?;
    h = g.add(h, ste)?;

    let train = mode.is_train();
    let mut bn_updates = Vec::new();
    let mut msa_inputs = Vec::new();
    let mut block = 0;
    for s in 0..cfg.stages() {
        let layout = cfg.stage_layout(s)?;
        if s > 0 {
            h = downsample(g, mv, &format!("down.{s}"), h, train, &mut bn_updates)?;
            trace.push((format!("Downsampling {s}"), per_sample(g.shape(h))));
        }
        for _ in 0..cfg.blocks_per_stage {
            let rate = if cfg.blocks > 1 { cfg.drop_path * block as f64 / (cfg.blocks - 1) as f64 } else { 0.0 };
            let spec = BlockSpec { layout: &layout, heads: cfg.heads / 8, attention: cfg.attention, drop_path: rate, attn_drop: cfg.attn_drop };
            let (out, x_msa) = block_forward(g, mv, &block_prefix(block), h, &spec, mode)?;
            msa_inputs.push(g.value(x_msa).clone());
            h = out;
            block += 1;
            trace.push((format!("Block {block}"), per_sample(g.shape(h))));
        }
    }
    let pooled = g.mean_axis(h, 1)?;
    let pooled = g.mean_axis(pooled, 1)?;
    let c_last = g.shape(pooled)[1];
    trace.push(("Pool".into(), vec![1, 1, c_last]));
    let logits = linear(g, mv, pooled, "head")?;
    let nc = g.shape(logits)[1];
    trace.push(("Linear (classification)".into(), vec![1, 1, nc]));
    trace.push(("Output".into(), vec![1, 1, nc]));
    Ok(ForwardOutput { logits, bn_updates, trace, msa_inputs })
}

/// Register `params` on `g` and run [`forward_with`].
pub fn model_forward<T: Scalar>(
    g: &mut Graph<T>,
    params: &ModelParams<T>,
    x: &Tensor<T>,
    t_norm: &[Vec<f64>],
    cfg: &ModelConfig,
    mut mode: Mode<'_>,
) -> Result<ForwardOutput<T>> {
    let mv = if mode.is_train() { ModelVars::register(g, params) } else { ModelVars::constants(g, params) };
    let xv = g.constant(x.clone());
    forward_with(g, &mv, xv, t_norm, cfg, &mut mode)
}

/// Eval-mode logits `[B, N_c]` without keeping the graph.
pub fn predict<T: Scalar>(params: &ModelParams<T>, x: &Tensor<T>, t_norm: &[Vec<f64>], cfg: &ModelConfig) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let out = model_forward(&mut g, params, x, t_norm, cfg, Mode::Eval)?;
    Ok(g.value(out.logits).clone())
}

/// Mean label-smoothed cross-entropy of `logits: [B, N_c]`.
pub fn label_smoothed_ce<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize], alpha: f64) -> Result<Var> {
    let ls = g.shape(logits).to_vec();
    if ls.len() != 2 || ls[0] != labels.len() {
        return Err(dim_err(format!("loss: logits {ls:?} vs {} labels", labels.len())));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Config(format!("label smoothing {alpha} must lie in [0, 1)")));
    }
    let (b, nc) = (ls[0], ls[1]);
    let mut target = vec![cst::<T>(alpha / nc as f64); b * nc];
    for (i, &y) in labels.iter().enumerate() {
        if y >= nc {
            return Err(Error::Index(format!("label {y} out of range for {nc} classes")));
        }
        target[i * nc + y] = cst(1.0 - alpha + alpha / nc as f64);
    }
    let target = g.constant(Tensor::from_vec(&ls, target)?);
    let lp = g.log_softmax(logits)?;
    let prod = g.mul(lp, target)?;
    let s = g.sum(prod);
    Ok(g.scale(s, cst(-1.0 / b as f64)))
}
