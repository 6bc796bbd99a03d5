//! Joint-order tables and the four skeletal-temporal partition / reverse
//! index transforms.
//!
//! The joint axis is arranged as `K` neighbouring-joint blocks of `L`
//! joints each; the time axis as `M` local windows of `N` frames. Every
//! partition is a pure gather, so `reverse` is the inverse gather.

use std::fmt;
use std::sync::Arc;

use crate::error::{dim_err, Error, Result};
use crate::numerics::{inverse_permutation, Graph, Scalar, Tensor, Var};

/// One of the four joint-partition × frame-partition combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SkateType {
    /// neighbouring joints, local motion
    Type1,
    /// distant joints, local motion
    Type2,
    /// neighbouring joints, global motion
    Type3,
    /// distant joints, global motion
    Type4,
}

impl SkateType {
    pub const ALL: [SkateType; 4] = [SkateType::Type1, SkateType::Type2, SkateType::Type3, SkateType::Type4];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Neighbouring-joint types carry no skeletal positional bias.
    pub fn is_neighbouring(self) -> bool {
        matches!(self, SkateType::Type1 | SkateType::Type3)
    }

    pub fn is_local(self) -> bool {
        matches!(self, SkateType::Type1 | SkateType::Type2)
    }
}

impl fmt::Display for SkateType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "type{}", self.index() + 1)
    }
}

/// Which built-in joint table a layout uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayoutKind {
    NtuLike,
    NwuclaLike,
    Custom,
}

impl LayoutKind {
    pub fn name(self) -> &'static str {
        match self {
            LayoutKind::NtuLike => "ntu",
            LayoutKind::NwuclaLike => "nwucla",
            LayoutKind::Custom => "custom",
        }
    }
}

/// 20-joint single-person table, 1-based tracking indices, arms and legs
/// ordered outward from the body centre.
pub const NWUCLA_BLOCKS: [[usize; 4]; 5] = [
    [9, 10, 11, 12],  // right arm
    [5, 6, 7, 8],     // left arm
    [17, 18, 19, 20], // right leg
    [13, 14, 15, 16], // left leg
    [2, 3, 1, 4],     // vertical torso
];

/// 25-joint per-person table with joint 21 left out.
pub const NTU_BLOCKS: [[usize; 4]; 6] = [
    [11, 12, 24, 25], // right arm
    [7, 8, 22, 23],   // left arm
    [17, 18, 19, 20], // right leg
    [13, 14, 15, 16], // left leg
    [2, 3, 1, 4],     // vertical torso
    [5, 9, 6, 10],    // horizontal torso
];

pub const NTU_JOINTS_PER_PERSON: usize = 25;
/// 1-based index of the joint that the NTU layout drops.
pub const NTU_EXCLUDED_JOINT: usize = 21;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionLayout {
    kind: LayoutKind,
    /// Permutation of the reduced joint indices `0..V`, stored block by block.
    joint_order: Vec<usize>,
    /// Raw joint index of every reduced joint.
    source_joints: Vec<usize>,
    k: usize,
    l: usize,
    m: usize,
    n: usize,
}

impl PartitionLayout {
    /// Layout over `t` frames split into windows of `n` frames.
    pub fn build(kind: LayoutKind, t: usize, n: usize) -> Result<Self> {
        match kind {
            LayoutKind::NwuclaLike => {
                let rows: Vec<Vec<usize>> = NWUCLA_BLOCKS.iter().map(|b| b.to_vec()).collect();
                let order = rows.iter().flatten().map(|&j| j - 1).collect();
                Self::from_parts(kind, order, (0..20).collect(), NWUCLA_BLOCKS.len(), 4, t, n)
            }
            LayoutKind::NtuLike => {
                // Reduced index space: per person the 24 kept joints in raw order.
                let kept: Vec<usize> = (1..=NTU_JOINTS_PER_PERSON).filter(|&j| j != NTU_EXCLUDED_JOINT).collect();
                let reduced_of = |tracking: usize| kept.iter().position(|&j| j == tracking).unwrap();
                let mut order = Vec::with_capacity(48);
                let mut source = Vec::with_capacity(48);
                for person in 0..2 {
                    for &j in &kept {
                        source.push(person * NTU_JOINTS_PER_PERSON + j - 1);
                    }
                }
                for person in 0..2 {
                    for block in &NTU_BLOCKS {
                        order.extend(block.iter().map(|&j| person * kept.len() + reduced_of(j)));
                    }
                }
                Self::from_parts(kind, order, source, 2 * NTU_BLOCKS.len(), 4, t, n)
            }
            LayoutKind::Custom => Err(Error::Layout("custom layouts are built from a table".into())),
        }
    }

    /// Layout from `K` rows of `L` 1-based joint indices.
    pub fn from_table(rows: &[Vec<usize>], t: usize, n: usize) -> Result<Self> {
        let k = rows.len();
        if k == 0 {
            return Err(Error::Layout("empty joint table".into()));
        }
        let l = rows[0].len();
        if l == 0 || rows.iter().any(|r| r.len() != l) {
            return Err(Error::Layout("joint table rows must all have the same non-zero length".into()));
        }
        if rows.iter().flatten().any(|&j| j == 0) {
            return Err(Error::Layout("joint indices are 1-based".into()));
        }
        let order: Vec<usize> = rows.iter().flatten().map(|&j| j - 1).collect();
        let v = order.len();
        Self::from_parts(LayoutKind::Custom, order, (0..v).collect(), k, l, t, n)
    }

    /// Parse the text form: one line per block, whitespace- or
    /// comma-separated 1-based indices, `#` comments.
    pub fn parse_table(text: &str, t: usize, n: usize) -> Result<Self> {
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let row = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<usize>()
                        .map_err(|_| Error::Layout(format!("line {}: bad joint index {s:?}", lineno + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Self::from_table(&rows, t, n)
    }

    fn from_parts(
        kind: LayoutKind,
        joint_order: Vec<usize>,
        source_joints: Vec<usize>,
        k: usize,
        l: usize,
        t: usize,
        n: usize,
    ) -> Result<Self> {
        let v = k * l;
        if joint_order.len() != v {
            return Err(Error::Layout(format!("{} joints listed, expected K*L = {v}", joint_order.len())));
        }
        let mut seen = vec![false; v];
        for &j in &joint_order {
            if j >= v {
                return Err(Error::Layout(format!("joint {} outside 1..={v}", j + 1)));
            }
            if std::mem::replace(&mut seen[j], true) {
                return Err(Error::Layout(format!("joint {} appears more than once", j + 1)));
            }
        }
        let mut layout = Self { kind, joint_order, source_joints, k, l, m: 1, n: 1 };
        layout.set_frames(t, n)?;
        Ok(layout)
    }

    /// Same joint table, different frame split.
    pub fn with_frames(&self, t: usize, n: usize) -> Result<Self> {
        let mut out = self.clone();
        out.set_frames(t, n)?;
        Ok(out)
    }

    fn set_frames(&mut self, t: usize, n: usize) -> Result<()> {
        if t == 0 || n == 0 || !t.is_multiple_of(n) {
            return Err(Error::Layout(format!("T = {t} is not a positive multiple of N = {n}")));
        }
        self.m = t / n;
        self.n = n;
        Ok(())
    }

    pub fn kind(&self) -> LayoutKind {
        self.kind
    }
    pub fn k(&self) -> usize {
        self.k
    }
    pub fn l(&self) -> usize {
        self.l
    }
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn v(&self) -> usize {
        self.k * self.l
    }
    pub fn t(&self) -> usize {
        self.m * self.n
    }

    pub fn joint_order(&self) -> &[usize] {
        &self.joint_order
    }

    /// Raw joint count the layout reads from.
    pub fn raw_joints(&self) -> usize {
        self.source_joints.iter().max().map_or(0, |m| m + 1)
    }

    /// Joint order expressed as 1-based raw tracking indices (person 2 of
    /// the NTU layout is offset by 25).
    pub fn tracking_order(&self) -> Vec<usize> {
        self.joint_order.iter().map(|&j| self.source_joints[j] + 1).collect()
    }

    /// Raw joint read by each layout position; this is the gather applied
    /// once at model input.
    pub fn input_index(&self) -> Vec<usize> {
        self.joint_order.iter().map(|&j| self.source_joints[j]).collect()
    }

    /// Neighbouring-joint partitions as raw joint indices.
    pub fn njp_raw(&self) -> Vec<Vec<usize>> {
        self.input_index().chunks(self.l).map(|c| c.to_vec()).collect()
    }

    /// Neighbouring-joint partition `k` (0-based) as reduced joint indices.
    pub fn njp(&self, k: usize) -> &[usize] {
        &self.joint_order[k * self.l..(k + 1) * self.l]
    }

    /// Layout positions that make up distant-joint partition `l` (0-based).
    pub fn djp_positions(&self, l: usize) -> Vec<usize> {
        (0..self.k).map(|k| k * self.l + l).collect()
    }

    /// All `L` distant-joint partitions: the `l`-th element of every
    /// neighbouring block.
    pub fn djp_view(&self) -> Vec<Vec<usize>> {
        (0..self.l)
            .map(|l| self.djp_positions(l).into_iter().map(|p| self.joint_order[p]).collect())
            .collect()
    }

    /// `(blocks, T', V')` of the partitioned tensor for `ty`.
    pub fn partition_dims(&self, ty: SkateType) -> (usize, usize, usize) {
        let (k, l, m, n) = (self.k, self.l, self.m, self.n);
        match ty {
            SkateType::Type1 => (m * k, n, l),
            SkateType::Type2 => (m * l, n, k),
            SkateType::Type3 => (n * k, m, l),
            SkateType::Type4 => (n * l, m, k),
        }
    }

    /// `(block, t', v')` holding the token at frame `t`, layout position `v`.
    pub fn token_block(&self, ty: SkateType, t: usize, v: usize) -> (usize, usize, usize) {
        let (k, l, n) = (self.k, self.l, self.n);
        let (m_i, n_i) = (t / n, t % n);
        let (k_i, l_i) = (v / l, v % l);
        match ty {
            SkateType::Type1 => (m_i * k + k_i, n_i, l_i),
            SkateType::Type2 => (m_i * l + l_i, n_i, k_i),
            SkateType::Type3 => (n_i * k + k_i, m_i, l_i),
            SkateType::Type4 => (n_i * l + l_i, m_i, k_i),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<(usize, usize)> {
        let (b, rest) = match shape.len() {
            3 => (1, shape),
            4 => (shape[0], &shape[1..]),
            _ => return Err(dim_err(format!("partition expects [B,T,V,c] or [T,V,c], got {shape:?}"))),
        };
        if rest[0] != self.t() || rest[1] != self.v() {
            return Err(dim_err(format!(
                "input {shape:?} does not match layout T = {}, V = {}",
                self.t(),
                self.v()
            )));
        }
        Ok((b, rest[2]))
    }

    /// Flat source offset for every element of the partitioned tensor.
    pub fn partition_index(&self, ty: SkateType, batch: usize, c: usize) -> Vec<usize> {
        let (blocks, tp, vp) = self.partition_dims(ty);
        let (t, v) = (self.t(), self.v());
        let mut out = vec![0; batch * t * v * c];
        for b in 0..batch {
            for ti in 0..t {
                for vi in 0..v {
                    let (blk, tt, vv) = self.token_block(ty, ti, vi);
                    let dst = (((b * blocks + blk) * tp + tt) * vp + vv) * c;
                    let src = ((b * t + ti) * v + vi) * c;
                    for ch in 0..c {
                        out[dst + ch] = src + ch;
                    }
                }
            }
        }
        out
    }

    fn partitioned_shape(&self, ty: SkateType, batch: usize, c: usize) -> [usize; 4] {
        let (blocks, tp, vp) = self.partition_dims(ty);
        [batch * blocks, tp, vp, c]
    }

    fn reverse_batch(&self, ty: SkateType, shape: &[usize]) -> Result<(usize, usize)> {
        let (blocks, tp, vp) = self.partition_dims(ty);
        if shape.len() != 4 || !shape[0].is_multiple_of(blocks) || shape[1] != tp || shape[2] != vp {
            return Err(dim_err(format!(
                "{ty} reverse expects [B*{blocks}, {tp}, {vp}, c], got {shape:?}"
            )));
        }
        Ok((shape[0] / blocks, shape[3]))
    }

    /// Partition `x: [B, T, V, c]` (or `[T, V, c]`) into `[B*blocks, T', V', c]`.
    pub fn partition<T: Scalar>(&self, x: &Tensor<T>, ty: SkateType) -> Result<Tensor<T>> {
        let (b, c) = self.check_input(x.shape())?;
        let idx = self.partition_index(ty, b, c);
        let data = idx.iter().map(|&i| x.data()[i]).collect();
        Tensor::from_vec(&self.partitioned_shape(ty, b, c), data)
    }

    /// Inverse of [`partition`](Self::partition); returns `[B, T, V, c]`.
    pub fn reverse<T: Scalar>(&self, xp: &Tensor<T>, ty: SkateType) -> Result<Tensor<T>> {
        let (b, c) = self.reverse_batch(ty, xp.shape())?;
        let inv = inverse_permutation(&self.partition_index(ty, b, c));
        let data = inv.iter().map(|&i| xp.data()[i]).collect();
        Tensor::from_vec(&[b, self.t(), self.v(), c], data)
    }

    /// Tape version of [`partition`](Self::partition) for `x: [B, T, V, c]`.
    pub fn partition_var<T: Scalar>(&self, g: &mut Graph<T>, x: Var, ty: SkateType) -> Result<Var> {
        let (b, c) = self.check_input(g.shape(x))?;
        let idx = self.partition_index(ty, b, c);
        g.gather(x, Arc::new(idx), &self.partitioned_shape(ty, b, c))
    }

    pub fn reverse_var<T: Scalar>(&self, g: &mut Graph<T>, xp: Var, ty: SkateType) -> Result<Var> {
        let (b, c) = self.reverse_batch(ty, g.shape(xp))?;
        let inv = inverse_permutation(&self.partition_index(ty, b, c));
        g.gather(xp, Arc::new(inv), &[b, self.t(), self.v(), c])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nwucla_layout_matches_table() {
        let lay = PartitionLayout::build(LayoutKind::NwuclaLike, 64, 8).unwrap();
        assert_eq!((lay.v(), lay.k(), lay.l(), lay.m(), lay.n()), (20, 5, 4, 8, 8));
        assert_eq!(&lay.tracking_order()[..8], &[9, 10, 11, 12, 5, 6, 7, 8]);
        assert_eq!(&lay.tracking_order()[16..], &[2, 3, 1, 4]);
    }

    #[test]
    fn ntu_layout_matches_table() {
        let lay = PartitionLayout::build(LayoutKind::NtuLike, 64, 8).unwrap();
        assert_eq!((lay.v(), lay.k(), lay.l()), (48, 12, 4));
        let tr = lay.tracking_order();
        assert_eq!(&tr[..4], &[11, 12, 24, 25]);
        assert_eq!(&tr[20..24], &[5, 9, 6, 10]);
        // person 2 blocks follow person 1, offset by 25 raw joints
        assert_eq!(&tr[24..28], &[36, 37, 49, 50]);
        assert!(!tr.contains(&21) && !tr.contains(&46));
        let mut sorted = lay.input_index();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 48);
    }

    #[test]
    fn custom_table_with_duplicate_is_rejected() {
        let err = PartitionLayout::from_table(&[vec![1, 2], vec![2, 3]], 4, 2).unwrap_err();
        assert!(matches!(err, Error::Layout(_)));
        let err = PartitionLayout::from_table(&[vec![1, 2], vec![3]], 4, 2).unwrap_err();
        assert!(matches!(err, Error::Layout(_)));
    }

    #[test]
    fn parse_table_text() {
        let lay = PartitionLayout::parse_table("# arms\n3 4\n1, 2\n", 4, 2).unwrap();
        assert_eq!(lay.joint_order(), &[2, 3, 0, 1]);
        assert!(PartitionLayout::parse_table("1 x\n", 4, 2).is_err());
    }

    #[test]
    fn frames_must_split_evenly() {
        assert!(PartitionLayout::build(LayoutKind::NwuclaLike, 30, 8).is_err());
    }

    #[test]
    fn djp_partitions() {
        let lay = PartitionLayout::build(LayoutKind::NwuclaLike, 64, 8).unwrap();
        assert_eq!(lay.djp_positions(0), vec![0, 4, 8, 12, 16]);
        let djp = lay.djp_view();
        assert_eq!(djp.len(), 4);
        let mut all: Vec<usize> = djp.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());

        let single = PartitionLayout::from_table(&[vec![2, 1, 3]], 2, 1).unwrap();
        assert!(single.djp_view().iter().all(|p| p.len() == 1));
    }

    #[test]
    fn partition_shapes_for_ntu_config() {
        let lay = PartitionLayout::build(LayoutKind::NtuLike, 64, 8).unwrap();
        let x = Tensor::<f32>::zeros(&[64, 48, 12]);
        assert_eq!(lay.partition(&x, SkateType::Type1).unwrap().shape(), &[96, 8, 4, 12]);
        assert_eq!(lay.partition(&x, SkateType::Type2).unwrap().shape(), &[32, 8, 12, 12]);
        assert_eq!(lay.partition(&x, SkateType::Type3).unwrap().shape(), &[96, 8, 4, 12]);
        assert_eq!(lay.partition(&x, SkateType::Type4).unwrap().shape(), &[32, 8, 12, 12]);
    }

    #[test]
    fn partition_is_a_permutation_of_elements() {
        let lay = PartitionLayout::build(LayoutKind::NwuclaLike, 16, 4).unwrap();
        let x = Tensor::<f64>::arange(&[16, 20, 3]);
        for ty in SkateType::ALL {
            let mut vals = lay.partition(&x, ty).unwrap().to_f64_vec();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(vals, x.to_f64_vec());
        }
    }

    #[test]
    fn reverse_with_the_wrong_type_does_not_restore() {
        let lay = PartitionLayout::build(LayoutKind::NwuclaLike, 16, 4).unwrap();
        let x = Tensor::<f64>::arange(&[1, 16, 20, 2]);
        for a in SkateType::ALL {
            for b in SkateType::ALL {
                let xp = lay.partition(&x, a).unwrap();
                match lay.reverse(&xp, b) {
                    Ok(back) if a == b => assert_eq!(back, x),
                    Ok(back) => assert_ne!(back, x, "{a} reversed as {b}"),
                    Err(_) => assert_ne!(a, b),
                }
            }
        }
    }

    #[test]
    fn zero_roundtrip_and_shape_errors() {
        let lay = PartitionLayout::build(LayoutKind::NwuclaLike, 8, 4).unwrap();
        let z = Tensor::<f32>::zeros(&[2, 8, 20, 3]);
        for ty in SkateType::ALL {
            assert_eq!(lay.reverse(&lay.partition(&z, ty).unwrap(), ty).unwrap(), z);
        }
        assert!(lay.partition(&Tensor::<f32>::zeros(&[8, 19, 3]), SkateType::Type1).is_err());
        assert!(lay.reverse(&Tensor::<f32>::zeros(&[3, 4, 4, 3]), SkateType::Type1).is_err());
    }

    fn small_layout() -> impl Strategy<Value = (PartitionLayout, usize, usize)> {
        (1usize..4, 1usize..4, 1usize..4, 1usize..4, 1usize..3, 1usize..4, any::<u64>()).prop_map(
            |(k, l, m, n, b, c, seed)| {
                let mut order: Vec<usize> = (1..=k * l).collect();
                // deterministic shuffle from the seed
                let mut s = seed | 1;
                for i in (1..order.len()).rev() {
                    s ^= s << 13;
                    s ^= s >> 7;
                    s ^= s << 17;
                    order.swap(i, (s % (i as u64 + 1)) as usize);
                }
                let rows: Vec<Vec<usize>> = order.chunks(l).map(|r| r.to_vec()).collect();
                (PartitionLayout::from_table(&rows, m * n, n).unwrap(), b, c)
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]
        #[test]
        fn layout_algebra((lay, _b, _c) in small_layout()) {
            let tv = lay.t() * lay.v();
            for ty in SkateType::ALL {
                let (blocks, tp, vp) = lay.partition_dims(ty);
                prop_assert_eq!(blocks * tp * vp, tv);
            }
        }
    }
}
