use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionParams;
use crate::error::{Error, Result};
use crate::numerics::{ParamMap, Scalar, Tensor};

use super::config::ModelConfig;

const INIT_STD: f64 = 0.02;
/// Widths of the coordinate projection `3 → 6 → 9 → C`.
pub const PROJ_WIDTHS: [usize; 3] = [3, 6, 9];

/// Named model tensors: learnable weights plus batch-norm running buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub tensors: ParamMap<T>,
}

/// Running statistics are not trained.
pub fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

/// Biases, norm affines, attention bias tables and the skeletal embedding
/// are exempt from weight decay.
pub fn no_decay(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    matches!(leaf, "b" | "g" | "rel_bias" | "abs_bias" | "se") || is_buffer(name)
}

pub fn block_prefix(i: usize) -> String {
    format!("blocks.{i}")
}

impl<T: Scalar> ModelParams<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut m = ParamMap::new();
        let tn = |shape: &[usize], rng: &mut R| Tensor::<T>::trunc_normal(shape, INIT_STD, rng);
        // dense layers are scaled by fan-in; at 0.02 the coordinates are
        // drowned by the embedding and small runs never leave the plateau
        let dense = |fan_in: usize, fan_out: usize, rng: &mut R| {
            Tensor::<T>::trunc_normal(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
        };
        let c = cfg.channels;
        let v = cfg.joints()?;

        let widths = [PROJ_WIDTHS[0], PROJ_WIDTHS[1], PROJ_WIDTHS[2], c];
        for i in 0..3 {
            m.insert(format!("proj.l{}.w", i + 1), dense(widths[i], widths[i + 1], rng));
            m.insert(format!("proj.l{}.b", i + 1), Tensor::zeros(&[widths[i + 1]]));
        }
        m.insert("embed.se".into(), tn(&[v, c], rng));

        let groups = cfg.heads / 4;
        let mut block = 0;
        for s in 0..cfg.stages() {
            let layout = cfg.stage_layout(s)?;
            let cout = cfg.stage_channels(s);
            if s > 0 {
                let cin = cfg.stage_channels(s - 1);
                let cg = cin / groups;
                let p = format!("down.{s}");
                m.insert(format!("{p}.w"), tn(&[groups, cfg.kernel, cg, cg], rng));
                m.insert(format!("{p}.bn.g"), Tensor::ones(&[cin]));
                m.insert(format!("{p}.bn.b"), Tensor::zeros(&[cin]));
                m.insert(format!("{p}.bn.running_mean"), Tensor::zeros(&[cin]));
                m.insert(format!("{p}.bn.running_var"), Tensor::ones(&[cin]));
            }
            for j in 0..cfg.blocks_per_stage {
                let cin = if s > 0 && j == 0 { cfg.stage_channels(s - 1) } else { cout };
                let p = block_prefix(block);
                let q = cout / 4;
                let cg = q / groups;
                m.insert(format!("{p}.ln1.g"), Tensor::ones(&[cin]));
                m.insert(format!("{p}.ln1.b"), Tensor::zeros(&[cin]));
                m.insert(format!("{p}.pre.w"), dense(cin, cout, rng));
                m.insert(format!("{p}.pre.b"), Tensor::zeros(&[cout]));
                m.insert(format!("{p}.gconv.g"), tn(&[groups, v, v], rng));
                m.insert(format!("{p}.tconv.w"), tn(&[groups, cfg.kernel, cg, cg], rng));
                m.insert(format!("{p}.tconv.b"), Tensor::zeros(&[q]));
                AttentionParams::<T>::init(&layout, cout / 2, cfg.heads / 8, rng)?.insert_into(&mut m, &format!("{p}.attn"));
                m.insert(format!("{p}.post.w"), dense(cout, cout, rng));
                m.insert(format!("{p}.post.b"), Tensor::zeros(&[cout]));
                if cin != cout {
                    m.insert(format!("{p}.res.w"), dense(cin, cout, rng));
                    m.insert(format!("{p}.res.b"), Tensor::zeros(&[cout]));
                }
                let hidden = cfg.expansion * cout;
                m.insert(format!("{p}.ln2.g"), Tensor::ones(&[cout]));
                m.insert(format!("{p}.ln2.b"), Tensor::zeros(&[cout]));
                m.insert(format!("{p}.ffn.l1.w"), dense(cout, hidden, rng));
                m.insert(format!("{p}.ffn.l1.b"), Tensor::zeros(&[hidden]));
                m.insert(format!("{p}.ffn.l2.w"), dense(hidden, cout, rng));
                m.insert(format!("{p}.ffn.l2.b"), Tensor::zeros(&[cout]));
                block += 1;
            }
        }
        let c_last = cfg.stage_channels(cfg.stages() - 1);
        m.insert("head.w".into(), dense(c_last, cfg.num_classes, rng));
        m.insert("head.b".into(), Tensor::zeros(&[cfg.num_classes]));
        Ok(Self { tensors: m })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    /// Number of trainable scalars.
    pub fn num_learnable(&self) -> usize {
        self.tensors.iter().filter(|(k, _)| !is_buffer(k)).map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams { tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.cast())).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Check that `self` holds exactly the tensors `cfg` needs, with matching shapes.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let reference = ModelParams::<f32>::init(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        for (k, t) in &reference.tensors {
            let have = self.get(k)?;
            if have.shape() != t.shape() {
                return Err(Error::Config(format!("parameter {k} has shape {:?}, expected {:?}", have.shape(), t.shape())));
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !reference.tensors.contains_key(*k)) {
            return Err(Error::Config(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }
}
