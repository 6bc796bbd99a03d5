//! Skeleton sequences, adjacency forests, modalities, the SKEL1 container
//! and a synthetic action generator.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, Error, Result};
use crate::fsutil::write_atomic;
use crate::numerics::{Scalar, Tensor};
use crate::partition::LayoutKind;

/// Source family of a recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    NtuLike,
    NwuclaLike,
    Synthetic,
}

impl DatasetKind {
    pub fn code(self) -> u8 {
        match self {
            DatasetKind::NtuLike => 0,
            DatasetKind::NwuclaLike => 1,
            DatasetKind::Synthetic => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DatasetKind::NtuLike),
            1 => Some(DatasetKind::NwuclaLike),
            2 => Some(DatasetKind::Synthetic),
            _ => None,
        }
    }

    pub fn joints_per_person(self) -> usize {
        match self {
            DatasetKind::NtuLike => 25,
            DatasetKind::NwuclaLike | DatasetKind::Synthetic => 20,
        }
    }

    /// Partition layout matching this skeleton.
    pub fn layout_kind(self) -> LayoutKind {
        match self {
            DatasetKind::NtuLike => LayoutKind::NtuLike,
            DatasetKind::NwuclaLike | DatasetKind::Synthetic => LayoutKind::NwuclaLike,
        }
    }
}

/// One clip of `T_total × V_raw × 3` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    frames: Tensor<f32>,
    label: usize,
    num_classes: usize,
    persons: usize,
    kind: DatasetKind,
}

impl SkeletonSequence {
    pub fn new(frames: Tensor<f32>, label: usize, num_classes: usize, persons: usize, kind: DatasetKind) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(dim_err(format!("frames must be [T, V, 3], got {s:?}")));
        }
        if s[0] == 0 {
            return Err(dim_err("a sequence needs at least one frame"));
        }
        if persons == 0 || s[1] != persons * kind.joints_per_person() {
            return Err(dim_err(format!(
                "{} joints do not match {persons} person(s) of {} joints",
                s[1],
                kind.joints_per_person()
            )));
        }
        if label >= num_classes {
            return Err(Error::Index(format!("label {label} is not below {num_classes} classes")));
        }
        if !frames.all_finite() {
            return Err(Error::Numeric("non-finite coordinate".into()));
        }
        Ok(Self { frames, label, num_classes, persons, kind })
    }

    /// Same metadata, new coordinates of the same joint count.
    pub fn with_frames(&self, frames: Tensor<f32>) -> Result<Self> {
        Self::new(frames, self.label, self.num_classes, self.persons, self.kind)
    }

    pub fn frames(&self) -> &Tensor<f32> {
        &self.frames
    }

    pub fn t_total(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn v_raw(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn persons(&self) -> usize {
        self.persons
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn point(&self, t: usize, v: usize) -> [f32; 3] {
        let i = (t * self.v_raw() + v) * 3;
        let d = self.frames.data();
        [d[i], d[i + 1], d[i + 2]]
    }
}

/// 0-based parents of the 20-joint single-person skeleton; the hip centre
/// is the root.
pub const NWUCLA_PARENTS: [usize; 20] = [0, 0, 1, 2, 2, 4, 5, 6, 2, 8, 9, 10, 0, 12, 13, 14, 0, 16, 17, 18];
pub const NWUCLA_MIRROR: [(usize, usize); 8] = [(4, 8), (5, 9), (6, 10), (7, 11), (12, 16), (13, 17), (14, 18), (15, 19)];

/// 0-based parents of the 25-joint skeleton; the spine joint (index 20) is
/// the root.
pub const NTU_PARENTS: [usize; 25] = [
    1, 20, 20, 2, 20, 4, 5, 6, 20, 8, 9, 10, 0, 12, 13, 14, 0, 16, 17, 18, 20, 22, 7, 24, 11,
];
pub const NTU_MIRROR: [(usize, usize); 10] =
    [(4, 8), (5, 9), (6, 10), (7, 11), (21, 23), (22, 24), (12, 16), (13, 17), (14, 18), (15, 19)];

/// Bone forest: each joint's parent (roots point to themselves) plus the
/// left/right joint pairs swapped by mirroring.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyTable {
    parent: Vec<usize>,
    pairs: Vec<(usize, usize)>,
    /// joints ordered so every parent precedes its children
    order: Vec<usize>,
}

impl AdjacencyTable {
    pub fn new(parent: Vec<usize>, pairs: Vec<(usize, usize)>) -> Result<Self> {
        let v = parent.len();
        if let Some((j, &p)) = parent.iter().enumerate().find(|(_, &p)| p >= v) {
            return Err(Error::Structure(format!("joint {j} has parent {p} outside 0..{v}")));
        }
        if let Some(&(a, b)) = pairs.iter().find(|&&(a, b)| a >= v || b >= v || a == b) {
            return Err(Error::Structure(format!("invalid mirror pair ({a}, {b})")));
        }
        let mut children = vec![Vec::new(); v];
        let mut order = Vec::with_capacity(v);
        for (j, &p) in parent.iter().enumerate() {
            if p == j {
                order.push(j);
            } else {
                children[p].push(j);
            }
        }
        let mut head = 0;
        while head < order.len() {
            let j = order[head];
            order.extend_from_slice(&children[j]);
            head += 1;
        }
        if order.len() != v {
            return Err(Error::Structure("parent table contains a cycle".into()));
        }
        Ok(Self { parent, pairs, order })
    }

    pub fn nwucla() -> Self {
        Self::new(NWUCLA_PARENTS.to_vec(), NWUCLA_MIRROR.to_vec()).expect("static table")
    }

    /// NTU skeleton replicated for `persons` actors.
    pub fn ntu(persons: usize) -> Self {
        let jp = NTU_PARENTS.len();
        let parent = (0..persons).flat_map(|p| NTU_PARENTS.iter().map(move |&q| p * jp + q)).collect();
        let pairs = (0..persons).flat_map(|p| NTU_MIRROR.iter().map(move |&(a, b)| (p * jp + a, p * jp + b))).collect();
        Self::new(parent, pairs).expect("static table")
    }

    pub fn for_kind(kind: DatasetKind, persons: usize) -> Self {
        match kind {
            DatasetKind::NtuLike => Self::ntu(persons),
            DatasetKind::NwuclaLike | DatasetKind::Synthetic => {
                let base = Self::nwucla();
                let jp = base.parent.len();
                let parent = (0..persons).flat_map(|p| base.parent.iter().map(move |&q| p * jp + q)).collect();
                let pairs = (0..persons).flat_map(|p| base.pairs.iter().map(move |&(a, b)| (p * jp + a, p * jp + b))).collect();
                Self::new(parent, pairs).expect("static table")
            }
        }
    }

    pub fn for_sequence(seq: &SkeletonSequence) -> Self {
        Self::for_kind(seq.kind(), seq.persons())
    }

    pub fn joints(&self) -> usize {
        self.parent.len()
    }

    pub fn parent(&self) -> &[usize] {
        &self.parent
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn is_root(&self, j: usize) -> bool {
        self.parent[j] == j
    }

    /// Joints in breadth-first order from the roots.
    pub fn topo_order(&self) -> &[usize] {
        &self.order
    }

    fn check<T: Scalar>(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 3 || s[1] != self.joints() || s[2] != 3 {
            return Err(dim_err(format!("expected [T, {}, 3], got {s:?}", self.joints())));
        }
        Ok(())
    }

    /// `bone[v] = joint[v] - joint[parent(v)]`; a root's bone is the joint itself.
    pub fn to_bones<T: Scalar>(&self, joints: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(joints)?;
        let v = self.joints();
        let mut out = joints.clone();
        let src = joints.data();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            let (t, j, c) = (i / (3 * v), (i / 3) % v, i % 3);
            if !self.is_root(j) {
                *o -= src[(t * v + self.parent[j]) * 3 + c];
            }
        }
        Ok(out)
    }

    /// Inverse of [`to_bones`](Self::to_bones): prefix sums from the roots.
    pub fn from_bones<T: Scalar>(&self, bones: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(bones)?;
        let v = self.joints();
        let mut out = bones.clone();
        let data = out.data_mut();
        for t in 0..bones.shape()[0] {
            for &j in &self.order {
                if !self.is_root(j) {
                    let p = self.parent[j];
                    for c in 0..3 {
                        let pv = data[(t * v + p) * 3 + c];
                        data[(t * v + j) * 3 + c] += pv;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Forward difference along the first axis with the final frame zeroed.
pub fn motion<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let t = x.shape()[0];
    let step = x.numel() / t.max(1);
    let mut out = Tensor::zeros(x.shape());
    let (src, dst) = (x.data(), out.data_mut());
    for i in 0..step * t.saturating_sub(1) {
        dst[i] = src[i + step] - src[i];
    }
    out
}

/// Input stream fed to a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModalityKind {
    Joint,
    Bone,
    JointMotion,
    BoneMotion,
}

impl ModalityKind {
    pub const ALL: [ModalityKind; 4] =
        [ModalityKind::Joint, ModalityKind::Bone, ModalityKind::JointMotion, ModalityKind::BoneMotion];

    pub fn name(self) -> &'static str {
        match self {
            ModalityKind::Joint => "joint",
            ModalityKind::Bone => "bone",
            ModalityKind::JointMotion => "joint_motion",
            ModalityKind::BoneMotion => "bone_motion",
        }
    }
}

impl fmt::Display for ModalityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModalityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown modality {s:?} (joint, bone, joint_motion, bone_motion)")))
    }
}

/// Modality transform of a `[T, V, 3]` joint tensor.
pub fn modality_tensor<T: Scalar>(joints: &Tensor<T>, adj: &AdjacencyTable, kind: ModalityKind) -> Result<Tensor<T>> {
    match kind {
        ModalityKind::Joint => Ok(joints.clone()),
        ModalityKind::Bone => adj.to_bones(joints),
        ModalityKind::JointMotion => {
            adj.check(joints)?;
            Ok(motion(joints))
        }
        ModalityKind::BoneMotion => Ok(motion(&adj.to_bones(joints)?)),
    }
}

pub fn derive_modality(seq: &SkeletonSequence, adj: &AdjacencyTable, kind: ModalityKind) -> Result<SkeletonSequence> {
    seq.with_frames(modality_tensor(seq.frames(), adj, kind)?)
}

const MAGIC: &[u8; 4] = b"SKEL";
const VERSION: u8 = 1;
const HEADER_LEN: usize = 21;

/// Serialise to the SKEL1 byte layout.
pub fn encode_sequence(seq: &SkeletonSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * seq.frames.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(seq.t_total() as u32).to_le_bytes());
    out.extend_from_slice(&(seq.v_raw() as u16).to_le_bytes());
    out.push(seq.persons as u8);
    out.push(seq.kind.code());
    out.extend_from_slice(&(seq.label as u32).to_le_bytes());
    out.extend_from_slice(&(seq.num_classes as u32).to_le_bytes());
    for x in seq.frames.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format { offset: self.buf.len(), msg: format!("truncated while reading {what}") });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format { offset, msg: msg.into() }
}

pub fn decode_sequence(buf: &[u8]) -> Result<SkeletonSequence> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(format_err(0, "bad magic, expected \"SKEL\""));
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let t = r.u32("frame count")? as usize;
    if t == 0 {
        return Err(format_err(5, "frame count is zero"));
    }
    let v = r.u16("joint count")? as usize;
    let persons = r.u8("person count")? as usize;
    let kind_code = r.u8("dataset kind")?;
    let kind = DatasetKind::from_code(kind_code).ok_or_else(|| format_err(12, format!("unknown dataset kind {kind_code}")))?;
    if persons == 0 || v != persons * kind.joints_per_person() {
        return Err(format_err(9, format!("{v} joints do not match {persons} person(s) of {} joints", kind.joints_per_person())));
    }
    let label = r.u32("label")? as usize;
    let num_classes = r.u32("class count")? as usize;
    if label >= num_classes {
        return Err(format_err(13, format!("label {label} is not below class count {num_classes}")));
    }
    let n = t * v * 3;
    let raw = r.take(4 * n, "coordinates")?;
    let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    if let Some(i) = data.iter().position(|x| !x.is_finite()) {
        return Err(format_err(HEADER_LEN + 4 * i, "non-finite coordinate"));
    }
    if r.pos != buf.len() {
        return Err(format_err(r.pos, format!("{} trailing bytes", buf.len() - r.pos)));
    }
    SkeletonSequence::new(Tensor::from_vec(&[t, v, 3], data)?, label, num_classes, persons, kind)
}

pub fn save_sequence(seq: &SkeletonSequence, path: &Path) -> Result<()> {
    write_atomic(path, &encode_sequence(seq))
}

pub fn load_sequence(path: &Path) -> Result<SkeletonSequence> {
    decode_sequence(&fs::read(path)?)
}

pub const MANIFEST: &str = "manifest.txt";
pub const CLASS_NAMES: &str = "classes.txt";

/// A labelled collection of sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<SkeletonSequence>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(sequences: Vec<SkeletonSequence>, class_names: Vec<String>) -> Result<Self> {
        let nc = class_names.len();
        if let Some(s) = sequences.iter().find(|s| s.label() >= nc || s.num_classes() != nc) {
            return Err(Error::Index(format!("sequence label {} / {} classes vs {nc} class names", s.label(), s.num_classes())));
        }
        Ok(Self { sequences, class_names })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Write `<dir>/NNNNN.skel`, the manifest and the class names.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for (i, s) in self.sequences.iter().enumerate() {
            let name = format!("{i:05}.skel");
            save_sequence(s, &dir.join(&name))?;
            manifest.push_str(&name);
            manifest.push('\n');
        }
        let names: String = self.class_names.iter().map(|n| format!("{n}\n")).collect();
        write_atomic(&dir.join(CLASS_NAMES), names.as_bytes())?;
        write_atomic(&dir.join(MANIFEST), manifest.as_bytes())
    }

    /// Load every file listed in the manifest. Class names default to
    /// `class<i>` when no names file is present.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = fs::read_to_string(dir.join(MANIFEST))?;
        let mut sequences = Vec::new();
        for line in manifest.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let path = dir.join(line);
            let seq = load_sequence(&path).map_err(|e| match e {
                Error::Format { offset, msg } => Error::Format { offset, msg: format!("{}: {msg}", path.display()) },
                other => other,
            })?;
            sequences.push(seq);
        }
        let class_names = match fs::read_to_string(dir.join(CLASS_NAMES)) {
            Ok(text) => text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect(),
            Err(_) => {
                let nc = sequences.first().map_or(0, |s| s.num_classes());
                (0..nc).map(|i| format!("class{i}")).collect()
            }
        };
        Self::new(sequences, class_names)
    }
}

/// Parameters of [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub noise_sigma: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { classes: 4, per_class: 32, t_min: 40, t_max: 80, noise_sigma: 0.01 }
    }
}

/// Motion archetype of a synthetic class (`class % 4`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Archetype {
    /// fast oscillation of the right hand
    HandTremor,
    /// both hands oscillating in anti-phase
    AntiPhaseHands,
    /// one limb sweeping slowly across the clip
    LimbSweep,
    /// whole-body translation with out-of-phase limb swings
    BodyTranslation,
}

impl Archetype {
    pub fn of_class(class: usize) -> Self {
        match class % 4 {
            0 => Archetype::HandTremor,
            1 => Archetype::AntiPhaseHands,
            2 => Archetype::LimbSweep,
            _ => Archetype::BodyTranslation,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Archetype::HandTremor => "hand_tremor",
            Archetype::AntiPhaseHands => "antiphase_hands",
            Archetype::LimbSweep => "limb_sweep",
            Archetype::BodyTranslation => "body_translation",
        }
    }
}

/// Rest pose in metres, y up, subject facing -z.
const REST_POSE: [[f64; 3]; 20] = [
    [0.0, 0.0, 0.0],
    [0.0, 0.25, 0.0],
    [0.0, 0.5, 0.0],
    [0.0, 0.7, 0.0],
    [-0.2, 0.5, 0.0],
    [-0.22, 0.25, 0.0],
    [-0.24, 0.02, 0.0],
    [-0.25, -0.06, -0.02],
    [0.2, 0.5, 0.0],
    [0.22, 0.25, 0.0],
    [0.24, 0.02, 0.0],
    [0.25, -0.06, -0.02],
    [-0.1, 0.0, 0.0],
    [-0.1, -0.45, 0.0],
    [-0.1, -0.88, 0.0],
    [-0.1, -0.93, -0.1],
    [0.1, 0.0, 0.0],
    [0.1, -0.45, 0.0],
    [0.1, -0.88, 0.0],
    [0.1, -0.93, -0.1],
];

/// Joints of the four limbs, proximal to distal.
const LIMBS: [[usize; 4]; 4] = [[4, 5, 6, 7], [8, 9, 10, 11], [12, 13, 14, 15], [16, 17, 18, 19]];

fn unit_vector<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    let n = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v: [f64; 3] = [n.sample(rng), n.sample(rng), n.sample(rng)];
        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if len > 1e-3 {
            return [v[0] / len, v[1] / len, v[2] / len];
        }
    }
}

fn horizontal_unit<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    [a.cos(), 0.0, a.sin()]
}

fn synth_clip<R: Rng + ?Sized>(arch: Archetype, variant: usize, t_total: usize, noise: f64, rng: &mut R) -> Vec<f32> {
    use std::f64::consts::{PI, TAU};
    let scale: f64 = rng.random_range(0.85..1.15);
    let offset = [rng.random_range(-0.2..0.2), rng.random_range(-0.05..0.05), rng.random_range(-0.2..0.2)];
    let yaw: f64 = rng.random_range(-0.5..0.5);
    let phase: f64 = rng.random_range(0.0..TAU);
    // higher variants of a family move faster or further
    let boost = 1.0 + 0.25 * variant as f64;
    let mut disp = vec![[0.0f64; 3]; 20];
    let mut frames = Vec::with_capacity(t_total * 60);
    let noise_dist = Normal::new(0.0, noise.max(0.0)).unwrap();

    let dir = unit_vector(rng);
    let hdir = horizontal_unit(rng);
    let limb = rng.random_range(0..4usize);
    let amp: f64 = rng.random_range(0.12..0.18) * boost;
    let cycles: f64 = rng.random_range(2.0..3.0) * boost;
    let sweep: f64 = rng.random_range(0.15..0.3) * boost;
    let travel: f64 = rng.random_range(0.2..0.4) * boost;
    let swing_cycles: f64 = rng.random_range(1.0..2.0);

    for t in 0..t_total {
        let u = if t_total > 1 { t as f64 / (t_total - 1) as f64 } else { 0.5 };
        disp.iter_mut().for_each(|d| *d = [0.0; 3]);
        let add = |d: &mut [f64; 3], v: [f64; 3], s: f64| {
            for c in 0..3 {
                d[c] += v[c] * s;
            }
        };
        match arch {
            Archetype::HandTremor => {
                let w = (TAU * cycles * u + phase).sin() * amp;
                for (&j, g) in LIMBS[1][1..].iter().zip([0.3, 0.8, 1.0]) {
                    add(&mut disp[j], dir, w * g);
                }
            }
            Archetype::AntiPhaseHands => {
                let w = (TAU * cycles * u + phase).sin() * amp;
                for (&j, g) in LIMBS[0][1..].iter().zip([0.3, 0.8, 1.0]) {
                    add(&mut disp[j], dir, w * g);
                }
                for (&j, g) in LIMBS[1][1..].iter().zip([0.3, 0.8, 1.0]) {
                    add(&mut disp[j], dir, -w * g);
                }
            }
            Archetype::LimbSweep => {
                let w = (2.0 * u - 1.0) * sweep;
                for (&j, g) in LIMBS[limb].iter().zip([0.4, 0.7, 0.9, 1.0]) {
                    add(&mut disp[j], hdir, w * g);
                }
            }
            Archetype::BodyTranslation => {
                let w = (2.0 * u - 1.0) * travel;
                for d in disp.iter_mut() {
                    add(d, hdir, w);
                }
                // left/right limbs swing half a cycle apart, legs against arms
                let fwd = [0.0, 0.0, -1.0];
                for (li, off) in [(0, 0.0), (1, PI), (2, PI), (3, 0.0)] {
                    let s = (TAU * swing_cycles * u + phase + off).sin() * 0.06;
                    for (&j, g) in LIMBS[li][1..].iter().zip([0.5, 0.8, 1.0]) {
                        add(&mut disp[j], fwd, s * g);
                    }
                }
            }
        }
        let (cy, sy) = (yaw.cos(), yaw.sin());
        for j in 0..20 {
            let p = [
                scale * (REST_POSE[j][0] + disp[j][0]),
                scale * (REST_POSE[j][1] + disp[j][1]),
                scale * (REST_POSE[j][2] + disp[j][2]),
            ];
            let rotated = [cy * p[0] + sy * p[2], p[1], -sy * p[0] + cy * p[2]];
            for c in 0..3 {
                let n = if noise > 0.0 { noise_dist.sample(rng) } else { 0.0 };
                frames.push((rotated[c] + offset[c] + n) as f32);
            }
        }
    }
    frames
}

/// Deterministic synthetic dataset of 20-joint single-person clips.
/// Classes cycle through the four [`Archetype`]s; every fourth class repeats
/// a family with faster, larger motion.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::Config("classes must be ≥ 2".into()));
    }
    if spec.t_min == 0 || spec.t_min > spec.t_max {
        return Err(Error::Config(format!("invalid clip length range {}..={}", spec.t_min, spec.t_max)));
    }
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return Err(Error::Config(format!("noise sigma {} must be finite and ≥ 0", spec.noise_sigma)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sequences = Vec::with_capacity(spec.classes * spec.per_class);
    for class in 0..spec.classes {
        let arch = Archetype::of_class(class);
        for _ in 0..spec.per_class {
            let t = rng.random_range(spec.t_min..=spec.t_max);
            let data = synth_clip(arch, class / 4, t, spec.noise_sigma, &mut rng);
            let frames = Tensor::from_vec(&[t, 20, 3], data)?;
            sequences.push(SkeletonSequence::new(frames, class, spec.classes, 1, DatasetKind::Synthetic)?);
        }
    }
    let class_names = (0..spec.classes)
        .map(|c| {
            let arch = Archetype::of_class(c);
            if c < 4 {
                arch.name().to_string()
            } else {
                format!("{}_{}", arch.name(), c / 4)
            }
        })
        .collect();
    Dataset::new(sequences, class_names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_seq(seed: u64, t: usize) -> SkeletonSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = Tensor::<f32>::randn(&[t, 20, 3], 1.0, &mut rng);
        SkeletonSequence::new(frames, 1, 3, 1, DatasetKind::NwuclaLike).unwrap()
    }

    #[test]
    fn joint_modality_is_identity() {
        let s = random_seq(1, 5);
        let adj = AdjacencyTable::for_sequence(&s);
        assert_eq!(derive_modality(&s, &adj, ModalityKind::Joint).unwrap(), s);
    }

    #[test]
    fn bone_of_two_joint_chain() {
        let adj = AdjacencyTable::new(vec![0, 0], vec![]).unwrap();
        let j = Tensor::<f64>::from_vec(&[1, 2, 3], vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let b = adj.to_bones(&j).unwrap();
        assert_eq!(b.data(), &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn static_sequence_has_no_motion() {
        let one = random_seq(2, 1);
        let data: Vec<f32> = (0..6).flat_map(|_| one.frames().data().to_vec()).collect();
        let s = one.with_frames(Tensor::from_vec(&[6, 20, 3], data).unwrap()).unwrap();
        let adj = AdjacencyTable::nwucla();
        for kind in [ModalityKind::JointMotion, ModalityKind::BoneMotion] {
            assert_eq!(derive_modality(&s, &adj, kind).unwrap().frames().max_abs(), 0.0);
        }
    }

    #[test]
    fn motion_zero_pads_last_frame() {
        let x = Tensor::<f64>::from_vec(&[3, 1, 1], vec![1.0, 4.0, 9.0]).unwrap();
        assert_eq!(motion(&x).data(), &[3.0, 5.0, 0.0]);
    }

    #[test]
    fn bone_of_zero_is_zero() {
        let adj = AdjacencyTable::ntu(2);
        let z = Tensor::<f64>::zeros(&[4, 50, 3]);
        assert_eq!(adj.to_bones(&z).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn static_tables_are_forests() {
        let ntu = AdjacencyTable::ntu(2);
        assert_eq!(ntu.joints(), 50);
        assert!(ntu.is_root(20) && ntu.is_root(45));
        assert_eq!(ntu.topo_order().len(), 50);
        let ucla = AdjacencyTable::nwucla();
        assert_eq!((0..20).filter(|&j| ucla.is_root(j)).collect::<Vec<_>>(), vec![0]);
        assert_eq!(ucla.pairs().len(), 8);
    }

    #[test]
    fn cycle_is_rejected() {
        assert!(matches!(AdjacencyTable::new(vec![1, 0], vec![]), Err(Error::Structure(_))));
        assert!(matches!(AdjacencyTable::new(vec![0, 5], vec![]), Err(Error::Structure(_))));
    }

    #[test]
    fn skel_roundtrip_is_bit_exact() {
        let s = random_seq(3, 7);
        let bytes = encode_sequence(&s);
        assert_eq!(bytes.len(), HEADER_LEN + 7 * 20 * 3 * 4);
        let back = decode_sequence(&bytes).unwrap();
        assert_eq!(back, s);
        let bits = |q: &SkeletonSequence| q.frames().data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&s));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.skel");
        save_sequence(&s, &p).unwrap();
        assert_eq!(load_sequence(&p).unwrap(), s);
    }

    #[test]
    fn skel_rejects_bad_input() {
        let s = random_seq(4, 2);
        let good = encode_sequence(&s);
        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_sequence(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = good.clone();
        bad[5..9].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_sequence(&bad), Err(Error::Format { offset: 5, .. })));
        let mut bad = good.clone();
        bad[13..17].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(decode_sequence(&bad), Err(Error::Format { offset: 13, .. })));
        let truncated = &good[..good.len() - 3];
        assert!(matches!(decode_sequence(truncated), Err(Error::Format { .. })));
        assert!(matches!(decode_sequence(&good[..3]), Err(Error::Format { .. })));
        let mut bad = good.clone();
        bad[HEADER_LEN + 8..HEADER_LEN + 12].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_sequence(&bad), Err(Error::Format { offset, .. }) if offset == HEADER_LEN + 8));
    }

    #[test]
    fn dataset_roundtrip_through_directory() {
        let ds = generate_synthetic(&SyntheticSpec { per_class: 2, ..Default::default() }, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
        let files = fs::read_dir(dir.path()).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "skel")).count();
        assert_eq!(files, 8);
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let spec = SyntheticSpec { classes: 4, per_class: 8, ..Default::default() };
        let a = generate_synthetic(&spec, 1).unwrap();
        assert_eq!(a.len(), 32);
        assert_eq!(a, generate_synthetic(&spec, 1).unwrap());
        assert_ne!(a, generate_synthetic(&spec, 2).unwrap());
        for (i, s) in a.sequences.iter().enumerate() {
            assert_eq!(s.label(), i / 8);
            assert!((40..=80).contains(&s.t_total()));
        }
        assert!(generate_synthetic(&SyntheticSpec { classes: 1, ..spec }, 1).is_err());
    }

    #[test]
    fn limb_sweep_centroid_is_monotone() {
        let spec = SyntheticSpec { classes: 4, per_class: 6, noise_sigma: 0.0, ..Default::default() };
        let ds = generate_synthetic(&spec, 9).unwrap();
        for s in ds.sequences.iter().filter(|s| s.label() == 2) {
            let centroids: Vec<[f64; 3]> = (0..s.t_total())
                .map(|t| {
                    let mut c = [0.0; 3];
                    for v in 0..20 {
                        let p = s.point(t, v);
                        for k in 0..3 {
                            c[k] += p[k] as f64 / 20.0;
                        }
                    }
                    c
                })
                .collect();
            let last = centroids[centroids.len() - 1];
            let axis: Vec<f64> = (0..3).map(|k| last[k] - centroids[0][k]).collect();
            let proj: Vec<f64> = centroids.iter().map(|c| (0..3).map(|k| c[k] * axis[k]).sum()).collect();
            assert!(proj.windows(2).all(|w| w[1] >= w[0] - 1e-9), "centroid not monotone");
        }
    }

    proptest! {
        #[test]
        fn bones_then_prefix_sum_recovers_joints(seed in any::<u64>(), t in 1usize..6, persons in 1usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let adj = AdjacencyTable::ntu(persons);
            let j = Tensor::<f32>::randn(&[t, 25 * persons, 3], 1.0, &mut rng);
            let back = adj.from_bones(&adj.to_bones(&j).unwrap()).unwrap();
            prop_assert!(back.max_abs_diff(&j) <= 1e-5);
        }
    }
}
