use crate::error::{Error, Result};
use crate::kv::{self, KvFile};
use crate::partition::{LayoutKind, PartitionLayout};

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layout: LayoutKind,
    /// 1-based joint table rows, used when `layout` is `Custom`.
    pub joint_table: Vec<Vec<usize>>,
    /// Input frames `T`.
    pub frames: usize,
    /// Embedding width `C`; later stages use `2C`.
    pub channels: usize,
    /// Heads `H`: G-Conv and T-Conv use `H/4` groups, each attention branch `H/8` heads.
    pub heads: usize,
    /// Total blocks `R`.
    pub blocks: usize,
    pub blocks_per_stage: usize,
    pub kernel: usize,
    /// FFN expansion `e`.
    pub expansion: usize,
    pub num_classes: usize,
    /// Local window `N`, capped at each stage's frame count.
    pub window: usize,
    /// Per-stage window override; empty means derive from `window`.
    pub stage_windows: Vec<usize>,
    pub attn_drop: f64,
    pub drop_path: f64,
    /// When false, the attention branch is replaced by the identity.
    pub attention: bool,
}

impl ModelConfig {
    /// Small default for a laptop: 20 joints, 16 frames, two stages.
    pub fn desk(num_classes: usize) -> Self {
        Self {
            layout: LayoutKind::NwuclaLike,
            joint_table: Vec::new(),
            frames: 16,
            channels: 32,
            heads: 8,
            blocks: 4,
            blocks_per_stage: 2,
            kernel: 7,
            expansion: 1,
            num_classes,
            window: 8,
            stage_windows: Vec::new(),
            attn_drop: 0.0,
            drop_path: 0.0,
            attention: true,
        }
    }

    /// Full two-person configuration.
    pub fn ntu(num_classes: usize) -> Self {
        Self {
            layout: LayoutKind::NtuLike,
            frames: 64,
            channels: 96,
            heads: 32,
            blocks: 8,
            expansion: 4,
            attn_drop: 0.5,
            drop_path: 0.2,
            ..Self::desk(num_classes)
        }
    }

    /// Full single-person configuration.
    pub fn nwucla(num_classes: usize) -> Self {
        Self { expansion: 1, layout: LayoutKind::NwuclaLike, ..Self::ntu(num_classes) }
    }

    /// Smallest useful network (one stage, 8 frames, 8 joints), for gradient checks.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            layout: LayoutKind::Custom,
            joint_table: vec![vec![1, 2], vec![3, 4], vec![5, 6], vec![7, 8]],
            frames: 8,
            channels: 16,
            heads: 8,
            blocks: 2,
            blocks_per_stage: 2,
            kernel: 7,
            expansion: 1,
            num_classes,
            window: 4,
            stage_windows: Vec::new(),
            attn_drop: 0.0,
            drop_path: 0.0,
            attention: true,
        }
    }

    pub fn stages(&self) -> usize {
        self.blocks / self.blocks_per_stage.max(1)
    }

    pub fn stage_channels(&self, s: usize) -> usize {
        if s == 0 {
            self.channels
        } else {
            2 * self.channels
        }
    }

    pub fn stage_frames(&self, s: usize) -> usize {
        self.frames >> s
    }

    pub fn stage_window(&self, s: usize) -> usize {
        self.stage_windows.get(s).copied().unwrap_or_else(|| self.window.min(self.stage_frames(s)))
    }

    pub fn base_layout(&self) -> Result<PartitionLayout> {
        let (t, n) = (self.frames, self.stage_window(0));
        match self.layout {
            LayoutKind::Custom => PartitionLayout::from_table(&self.joint_table, t, n),
            kind => PartitionLayout::build(kind, t, n),
        }
    }

    pub fn stage_layout(&self, s: usize) -> Result<PartitionLayout> {
        self.base_layout()?.with_frames(self.stage_frames(s), self.stage_window(s))
    }

    pub fn joints(&self) -> Result<usize> {
        Ok(self.base_layout()?.v())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return fail(format!("num_classes = {} must be ≥ 2", self.num_classes));
        }
        if self.blocks == 0 || self.blocks_per_stage == 0 || !self.blocks.is_multiple_of(self.blocks_per_stage) {
            return fail(format!("blocks = {} is not a multiple of blocks_per_stage = {}", self.blocks, self.blocks_per_stage));
        }
        if self.heads == 0 || !self.heads.is_multiple_of(8) {
            return fail(format!("heads = {} must be a positive multiple of 8", self.heads));
        }
        let (g, h8) = (self.heads / 4, self.heads / 8);
        for c in [self.channels, 2 * self.channels] {
            if c == 0 || c % 4 != 0 || (c / 4) % g != 0 || (c / 8) % h8 != 0 {
                return fail(format!("channels {c} do not split into {g} conv groups and {h8} heads per branch"));
            }
        }
        if self.kernel.is_multiple_of(2) {
            return fail(format!("kernel = {} must be odd", self.kernel));
        }
        if self.expansion == 0 {
            return fail("expansion must be ≥ 1".into());
        }
        if !self.stage_windows.is_empty() && self.stage_windows.len() != self.stages() {
            return fail(format!("stage_windows lists {} entries for {} stages", self.stage_windows.len(), self.stages()));
        }
        let stages = self.stages();
        if self.frames == 0 || !self.frames.is_multiple_of(1 << (stages - 1)) {
            return fail(format!("frames = {} cannot be halved {} times", self.frames, stages - 1));
        }
        for s in 0..stages {
            if self.stage_frames(s) < self.kernel.div_ceil(2) {
                return fail(format!("stage {s} has {} frames, fewer than the kernel reach", self.stage_frames(s)));
            }
            self.stage_layout(s).map_err(|e| Error::Config(format!("stage {s}: {e}")))?;
        }
        if !(0.0..1.0).contains(&self.attn_drop) || !(0.0..1.0).contains(&self.drop_path) {
            return fail("dropout rates must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// Write as `model.*` keys.
    pub fn write_kv(&self, out: &mut String) {
        kv::push(out, "model.layout", self.layout.name());
        if self.layout == LayoutKind::Custom {
            let rows: Vec<String> = self.joint_table.iter().map(|r| kv::join(r).replace(',', " ")).collect();
            kv::push(out, "model.joint_table", rows.join(";"));
        }
        kv::push(out, "model.frames", self.frames);
        kv::push(out, "model.channels", self.channels);
        kv::push(out, "model.heads", self.heads);
        kv::push(out, "model.blocks", self.blocks);
        kv::push(out, "model.blocks_per_stage", self.blocks_per_stage);
        kv::push(out, "model.kernel", self.kernel);
        kv::push(out, "model.expansion", self.expansion);
        kv::push(out, "model.num_classes", self.num_classes);
        kv::push(out, "model.window", self.window);
        if !self.stage_windows.is_empty() {
            kv::push(out, "model.stage_windows", kv::join(&self.stage_windows));
        }
        kv::push(out, "model.attn_drop", self.attn_drop);
        kv::push(out, "model.drop_path", self.drop_path);
        kv::push(out, "model.attention", self.attention);
    }

    /// Apply any `model.*` keys present in `kv` on top of `self`.
    pub fn read_kv(&mut self, kv: &mut KvFile) -> Result<()> {
        if let Some(name) = kv.take::<String>("model.layout")? {
            self.layout = match name.as_str() {
                "ntu" => LayoutKind::NtuLike,
                "nwucla" => LayoutKind::NwuclaLike,
                "custom" => LayoutKind::Custom,
                other => return Err(Error::Config(format!("unknown layout {other:?}"))),
            };
        }
        if let Some(text) = kv.take::<String>("model.joint_table")? {
            self.joint_table = text
                .split(';')
                .map(|row| {
                    row.split_whitespace()
                        .map(|j| j.parse().map_err(|_| Error::Config(format!("bad joint index {j:?} in model.joint_table"))))
                        .collect::<Result<Vec<usize>>>()
                })
                .collect::<Result<_>>()?;
        }
        kv.set("model.frames", &mut self.frames)?;
        kv.set("model.channels", &mut self.channels)?;
        kv.set("model.heads", &mut self.heads)?;
        kv.set("model.blocks", &mut self.blocks)?;
        kv.set("model.blocks_per_stage", &mut self.blocks_per_stage)?;
        kv.set("model.kernel", &mut self.kernel)?;
        kv.set("model.expansion", &mut self.expansion)?;
        kv.set("model.num_classes", &mut self.num_classes)?;
        kv.set("model.window", &mut self.window)?;
        if let Some(w) = kv.take_list("model.stage_windows")? {
            self.stage_windows = w;
        }
        kv.set("model.attn_drop", &mut self.attn_drop)?;
        kv.set("model.drop_path", &mut self.drop_path)?;
        kv.set("model.attention", &mut self.attention)?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        self.write_kv(&mut s);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KvFile::parse(text)?;
        let mut cfg = Self::desk(2);
        cfg.read_kv(&mut kv)?;
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for cfg in [ModelConfig::desk(4), ModelConfig::ntu(60), ModelConfig::nwucla(10), ModelConfig::tiny(3)] {
            cfg.validate().unwrap();
        }
        let ntu = ModelConfig::ntu(60);
        assert_eq!(ntu.stages(), 4);
        let ms: Vec<(usize, usize)> = (0..4).map(|s| {
            let l = ntu.stage_layout(s).unwrap();
            (l.m(), l.n())
        }).collect();
        assert_eq!(ms, vec![(8, 8), (4, 8), (2, 8), (1, 8)]);
        assert_eq!(ntu.joints().unwrap(), 48);
    }

    #[test]
    fn text_roundtrip_is_fixed_point() {
        let mut cfg = ModelConfig::tiny(5);
        cfg.stage_windows = vec![2];
        cfg.attention = false;
        let text = cfg.to_text();
        let back = ModelConfig::from_text(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn rejects_bad_splits() {
        let mut cfg = ModelConfig::desk(4);
        cfg.heads = 12;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk(4);
        cfg.frames = 18;
        cfg.window = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk(4);
        cfg.blocks = 3;
        assert!(cfg.validate().is_err());
    }
}
