//! Temporal sampling, skeletal transforms and bone-length AdaIN.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::skeldata::{AdjacencyTable, SkeletonSequence};

/// Portion kept at evaluation time.
pub const EVAL_PORTION: f64 = 0.95;
/// Lower bound of the training portion; the upper bound is 1.
pub const MIN_TRAIN_PORTION: f64 = 0.5;
pub const ADAIN_EPS: f64 = 1e-6;

/// Source positions of the `T` sampled frames.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleIndices {
    /// Frame positions, integral unless the trimmed span is shorter than `T`.
    pub t_idx: Vec<f64>,
    pub p: f64,
    pub t_s: usize,
    /// Exclusive end of the trimmed span.
    pub t_e: usize,
    pub interpolated: bool,
}

impl SampleIndices {
    /// Positions mapped to `[-1, 1]` by `2t / T_total - 1`.
    pub fn normalized(&self, t_total: usize) -> Vec<f64> {
        self.t_idx.iter().map(|&t| 2.0 * t / t_total as f64 - 1.0).collect()
    }
}

/// Sampling regime.
pub enum SampleMode<'a> {
    Train(&'a mut dyn RngCore),
    Eval,
}

/// Trimmed-uniform sampling of `t` frames from a clip of `t_total` frames.
pub fn trimmed_uniform_sample(t_total: usize, t: usize, mode: SampleMode<'_>) -> Result<SampleIndices> {
    if t_total == 0 || t == 0 {
        return Err(Error::Config(format!("cannot sample {t} frames from a clip of {t_total}")));
    }
    match mode {
        SampleMode::Eval => {
            let t_s = (t_total as f64 * (1.0 - EVAL_PORTION) / 2.0).floor() as usize;
            Ok(sample_span(t_total, t, EVAL_PORTION, t_s, |lo, hi| lo + (hi - lo - 1) / 2))
        }
        SampleMode::Train(rng) => {
            let p = rng.random_range(MIN_TRAIN_PORTION..=1.0);
            let slack = (t_total as f64 * (1.0 - p)).floor() as usize;
            let t_s = rng.random_range(0..=slack);
            Ok(sample_span(t_total, t, p, t_s, |lo, hi| rng.random_range(lo..hi)))
        }
    }
}

/// Sampling with a fixed portion and start; `pick(lo, hi)` chooses one frame
/// in each sub-interval `[lo, hi)`.
pub fn sample_span(t_total: usize, t: usize, p: f64, t_s: usize, mut pick: impl FnMut(usize, usize) -> usize) -> SampleIndices {
    let len = ((t_total as f64 * p).floor() as usize).clamp(1, t_total - t_s.min(t_total - 1));
    let t_e = t_s + len;
    if len >= t {
        let bound = |i: usize| t_s + i * len / t;
        let t_idx = (0..t).map(|i| pick(bound(i), bound(i + 1)) as f64).collect();
        SampleIndices { t_idx, p, t_s, t_e, interpolated: false }
    } else {
        let last = (len - 1) as f64;
        let t_idx = (0..t)
            .map(|i| if t == 1 { t_s as f64 + last / 2.0 } else { t_s as f64 + last * i as f64 / (t - 1) as f64 })
            .collect();
        SampleIndices { t_idx, p, t_s, t_e, interpolated: true }
    }
}

/// Gather frames `[T_total, V, 3]` at (possibly fractional) positions with
/// linear interpolation.
pub fn resample<T: Scalar>(frames: &Tensor<T>, t_idx: &[f64]) -> Result<Tensor<T>> {
    let s = frames.shape();
    if s.len() != 3 {
        return Err(dim_err(format!("resample expects [T, V, C], got {s:?}")));
    }
    let step = s[1] * s[2];
    let last = s[0] - 1;
    let src = frames.data();
    let mut out = Vec::with_capacity(t_idx.len() * step);
    for &pos in t_idx {
        let pos = pos.clamp(0.0, last as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(last);
        let w = pos - lo as f64;
        for i in 0..step {
            let a = src[lo * step + i].as_f64();
            let b = src[hi * step + i].as_f64();
            out.push(if w == 0.0 { src[lo * step + i] } else { T::lift(a + (b - a) * w) });
        }
    }
    Tensor::from_vec(&[t_idx.len(), s[1], s[2]], out)
}

/// Per-transform probabilities and ranges of the skeletal augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub shear_p: f64,
    /// `sh_i ∈ [-shear, shear]`
    pub shear: f64,
    pub rotate_p: f64,
    /// `θ ∈ [-rotate, rotate]`
    pub rotate: f64,
    pub scale_p: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_p: f64,
    pub coord_drop_p: f64,
    pub joint_drop_p: f64,
    pub actor_perm_p: f64,
    pub adain_p: f64,
}

impl AugmentConfig {
    /// Every transform off.
    pub fn none() -> Self {
        Self {
            shear_p: 0.0,
            shear: 0.5,
            rotate_p: 0.0,
            rotate: std::f64::consts::PI / 6.0,
            scale_p: 0.0,
            scale_min: 0.8,
            scale_max: 1.2,
            flip_p: 0.0,
            coord_drop_p: 0.0,
            joint_drop_p: 0.0,
            actor_perm_p: 0.0,
            adain_p: 0.0,
        }
    }

    /// Two-person 25-joint recipe: everything at probability one half.
    pub fn ntu() -> Self {
        Self {
            shear_p: 0.5,
            rotate_p: 0.5,
            scale_p: 0.5,
            flip_p: 0.5,
            coord_drop_p: 0.5,
            joint_drop_p: 0.5,
            actor_perm_p: 0.5,
            adain_p: 0.2,
            ..Self::none()
        }
    }

    /// Single-person 20-joint recipe: rotation and scaling only.
    pub fn nwucla() -> Self {
        Self {
            rotate_p: 1.0,
            rotate: std::f64::consts::PI / 3.0,
            scale_p: 1.0,
            scale_min: 0.5,
            scale_max: 1.5,
            adain_p: 0.2,
            ..Self::none()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("shear_p", self.shear_p),
            ("rotate_p", self.rotate_p),
            ("scale_p", self.scale_p),
            ("flip_p", self.flip_p),
            ("coord_drop_p", self.coord_drop_p),
            ("joint_drop_p", self.joint_drop_p),
            ("actor_perm_p", self.actor_perm_p),
            ("adain_p", self.adain_p),
        ];
        if let Some((name, p)) = probs.iter().find(|(_, p)| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!("{name} = {p} is not a probability")));
        }
        if !(self.shear >= 0.0 && self.rotate >= 0.0 && self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(Error::Config("augmentation ranges must be non-negative and ordered".into()));
        }
        Ok(())
    }
}

pub type Mat3 = [[f64; 3]; 3];

pub fn shear_matrix(sh1: f64, sh2: f64) -> Mat3 {
    [[1.0, sh1, sh2], [sh1, 1.0, sh2], [sh1, sh2, 1.0]]
}

/// Planar rotation by `theta` acting on the axis pair `(a, b)`.
pub fn rotation_matrix(theta: f64, a: usize, b: usize) -> Mat3 {
    let mut m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let (c, s) = (theta.cos(), theta.sin());
    m[a][a] = c;
    m[a][b] = -s;
    m[b][a] = s;
    m[b][b] = c;
    m
}

pub fn scale_matrix(sc: [f64; 3]) -> Mat3 {
    [[sc[0], 0.0, 0.0], [0.0, sc[1], 0.0], [0.0, 0.0, sc[2]]]
}

/// Apply `m` to every coordinate triple of `[..., 3]` data as a column vector.
pub fn apply_linear(frames: &Tensor<f32>, m: &Mat3) -> Tensor<f32> {
    let mut out = frames.clone();
    for p in out.data_mut().chunks_exact_mut(3) {
        let v = [p[0] as f64, p[1] as f64, p[2] as f64];
        for (r, row) in m.iter().enumerate() {
            p[r] = (row[0] * v[0] + row[1] * v[1] + row[2] * v[2]) as f32;
        }
    }
    out
}

const AXIS_PAIRS: [(usize, usize); 3] = [(0, 1), (1, 2), (0, 2)];

/// Apply each skeletal transform with its own probability. `groups` are the
/// joint subsets eligible for joint dropout (one is zeroed when it fires).
pub fn apply_skeletal_aug<R: Rng + ?Sized>(
    frames: &Tensor<f32>,
    persons: usize,
    cfg: &AugmentConfig,
    adj: &AdjacencyTable,
    groups: &[Vec<usize>],
    rng: &mut R,
) -> Result<Tensor<f32>> {
    let s = frames.shape().to_vec();
    if s.len() != 3 || s[2] != 3 || s[1] != adj.joints() || persons == 0 || !s[1].is_multiple_of(persons) {
        return Err(dim_err(format!("skeletal augmentation expects [T, {}, 3], got {s:?}", adj.joints())));
    }
    let (t, v) = (s[0], s[1]);
    let mut x = frames.clone();
    if rng.random_bool(cfg.shear_p) {
        let (a, b) = (rng.random_range(-cfg.shear..=cfg.shear), rng.random_range(-cfg.shear..=cfg.shear));
        x = apply_linear(&x, &shear_matrix(a, b));
    }
    if rng.random_bool(cfg.rotate_p) {
        let (a, b) = AXIS_PAIRS[rng.random_range(0..3)];
        let theta = rng.random_range(-cfg.rotate..=cfg.rotate);
        x = apply_linear(&x, &rotation_matrix(theta, a, b));
    }
    if rng.random_bool(cfg.scale_p) {
        let mut sc = [0.0; 3];
        sc.iter_mut().for_each(|s| *s = rng.random_range(cfg.scale_min..=cfg.scale_max));
        x = apply_linear(&x, &scale_matrix(sc));
    }
    if rng.random_bool(cfg.flip_p) {
        let mut perm: Vec<usize> = (0..v).collect();
        for &(a, b) in adj.pairs() {
            perm.swap(a, b);
        }
        x = permute_joints(&x, &perm);
    }
    if rng.random_bool(cfg.coord_drop_p) {
        let axis = rng.random_range(0..3);
        x.data_mut().iter_mut().skip(axis).step_by(3).for_each(|c| *c = 0.0);
    }
    if rng.random_bool(cfg.joint_drop_p) && !groups.is_empty() {
        let group = &groups[rng.random_range(0..groups.len())];
        if let Some(&j) = group.iter().find(|&&j| j >= v) {
            return Err(Error::Index(format!("joint dropout group names joint {j} of {v}")));
        }
        let data = x.data_mut();
        for ti in 0..t {
            for &j in group {
                data[(ti * v + j) * 3..(ti * v + j) * 3 + 3].fill(0.0);
            }
        }
    }
    if persons > 1 && rng.random_bool(cfg.actor_perm_p) {
        let per = v / persons;
        let mut order: Vec<usize> = (0..persons).collect();
        order.shuffle(rng);
        let perm: Vec<usize> = order.iter().flat_map(|&p| p * per..(p + 1) * per).collect();
        x = permute_joints(&x, &perm);
    }
    Ok(x)
}

/// Output joint `j` takes input joint `perm[j]`.
fn permute_joints(x: &Tensor<f32>, perm: &[usize]) -> Tensor<f32> {
    let v = perm.len();
    let mut out = x.clone();
    let (src, dst) = (x.data(), out.data_mut());
    for t in 0..x.shape()[0] {
        for (j, &p) in perm.iter().enumerate() {
            dst[(t * v + j) * 3..(t * v + j) * 3 + 3].copy_from_slice(&src[(t * v + p) * 3..(t * v + p) * 3 + 3]);
        }
    }
    out
}

/// Frame indices into a reference clip of `t_total_ref` frames for the
/// normalised positions `t_norm`. A 1e-9 guard keeps exact round trips of
/// `2t / T - 1` from flooring one frame low.
pub fn reference_indices(t_norm: &[f64], t_total_ref: usize) -> Vec<usize> {
    t_norm
        .iter()
        .map(|&t| (((t + 1.0) / 2.0 * t_total_ref as f64 + 1e-9).floor().max(0.0) as usize).min(t_total_ref - 1))
        .collect()
}

/// Rescale every non-root bone of `x: [T, V, 3]` to the length of the same
/// bone in the reference clip sampled at `t_norm`, then rebuild the joints.
pub fn bone_length_adain<T: Scalar>(x: &Tensor<T>, reference: &Tensor<T>, t_norm: &[f64], adj: &AdjacencyTable) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 || t_norm.len() != s[0] || reference.shape().len() != 3 || reference.shape()[1..] != s[1..] {
        return Err(dim_err(format!(
            "AdaIN input {s:?}, reference {:?}, {} indices",
            reference.shape(),
            t_norm.len()
        )));
    }
    let idx: Vec<f64> = reference_indices(t_norm, reference.shape()[0]).into_iter().map(|i| i as f64).collect();
    let reference = resample(reference, &idx)?;
    let bones = adj.to_bones(&x.cast::<f64>())?;
    let ref_bones = adj.to_bones(&reference.cast::<f64>())?;
    let v = s[1];
    let mut scaled = bones.clone();
    let (b, rb, out) = (bones.data(), ref_bones.data(), scaled.data_mut());
    for t in 0..s[0] {
        for j in (0..v).filter(|&j| !adj.is_root(j)) {
            let o = (t * v + j) * 3;
            let len = (b[o] * b[o] + b[o + 1] * b[o + 1] + b[o + 2] * b[o + 2]).sqrt();
            let ref_len = (rb[o] * rb[o] + rb[o + 1] * rb[o + 1] + rb[o + 2] * rb[o + 2]).sqrt();
            let r = (ref_len + ADAIN_EPS) / (len + ADAIN_EPS);
            out[o..o + 3].iter_mut().for_each(|c| *c *= r);
        }
    }
    Ok(adj.from_bones(&scaled)?.cast())
}

/// One training clip: sampled frames, their normalised positions, and the
/// augmented coordinates.
#[derive(Debug, Clone)]
pub struct PreparedClip {
    pub frames: Tensor<f32>,
    pub t_norm: Vec<f64>,
}

/// Training-time inputs to [`prepare_clip`]: config, the dataset, indices by
/// label, and the RNG.
pub type TrainSource<'a, R> = (&'a AugmentConfig, &'a [&'a SkeletonSequence], &'a [Vec<usize>], &'a mut R);

/// Sample `t` frames (random in training), apply skeletal transforms and,
/// with probability `adain_p`, bone-length AdaIN against a random clip from
/// `same_label`.
pub fn prepare_clip<R: Rng>(
    seq: &SkeletonSequence,
    t: usize,
    train: Option<TrainSource<'_, R>>,
) -> Result<PreparedClip> {
    match train {
        None => {
            let idx = trimmed_uniform_sample(seq.t_total(), t, SampleMode::Eval)?;
            Ok(PreparedClip { frames: resample(seq.frames(), &idx.t_idx)?, t_norm: idx.normalized(seq.t_total()) })
        }
        Some((cfg, same_label, groups, rng)) => {
            let idx = trimmed_uniform_sample(seq.t_total(), t, SampleMode::Train(rng))?;
            let t_norm = idx.normalized(seq.t_total());
            let adj = AdjacencyTable::for_sequence(seq);
            let mut frames = resample(seq.frames(), &idx.t_idx)?;
            frames = apply_skeletal_aug(&frames, seq.persons(), cfg, &adj, groups, rng)?;
            if !same_label.is_empty() && rng.random_bool(cfg.adain_p) {
                let reference = same_label[rng.random_range(0..same_label.len())];
                if reference.v_raw() == seq.v_raw() {
                    frames = bone_length_adain(&frames, reference.frames(), &t_norm, &adj)?;
                }
            }
            Ok(PreparedClip { frames, t_norm })
        }
    }
}
