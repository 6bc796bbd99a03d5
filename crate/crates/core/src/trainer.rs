//! Run configuration, the data pipeline from clips to batches, and the
//! train / evaluate / inspect loops.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{importance_score, AttentionParams};
use crate::augment::{prepare_clip, AugmentConfig};
use crate::error::{dim_err, Error, Result};
use crate::fsutil::write_atomic;
use crate::kv::{self, KvFile};
use crate::model::forward::{label_smoothed_ce, model_forward, Mode};
use crate::model::params::block_prefix;
use crate::model::{argmax_rows, train_step, AdamW, Batch, Checkpoint, LrSchedule, ModelConfig, ModelParams, OptimConfig};
use crate::numerics::{Graph, Tensor};
use crate::partition::{LayoutKind, PartitionLayout};
use crate::skeldata::{modality_tensor, AdjacencyTable, Dataset, DatasetKind, ModalityKind, SkeletonSequence};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "best.skck";
pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_acc,eval_loss,eval_acc,best_acc";
const EVAL_BATCH: usize = 32;

/// Everything `train` needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub modality: ModalityKind,
    pub train_data: PathBuf,
    pub eval_data: PathBuf,
    pub out_dir: PathBuf,
}

impl RunConfig {
    /// `desk`, `ntu` or `nwucla`.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self {
            model: ModelConfig::desk(4),
            optim: OptimConfig::desk(),
            augment: AugmentConfig::none(),
            seed: 1,
            modality: ModalityKind::Joint,
            train_data: PathBuf::from("data/train"),
            eval_data: PathBuf::from("data/eval"),
            out_dir: PathBuf::from("runs/desk"),
        };
        match name {
            "desk" => Ok(base),
            "ntu" => Ok(Self {
                model: ModelConfig::ntu(60),
                optim: OptimConfig::default(),
                augment: AugmentConfig::ntu(),
                out_dir: PathBuf::from("runs/ntu"),
                ..base
            }),
            "nwucla" => Ok(Self {
                model: ModelConfig::nwucla(10),
                optim: OptimConfig::default(),
                augment: AugmentConfig::nwucla(),
                out_dir: PathBuf::from("runs/nwucla"),
                ..base
            }),
            other => Err(Error::Config(format!("unknown preset {other:?} (desk, ntu, nwucla)"))),
        }
    }

    /// Parse `key = value` text; an optional `preset` key picks the base.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvFile::parse(text)?;
        let preset: String = kv.take("preset")?.unwrap_or_else(|| "desk".into());
        let mut cfg = Self::preset(&preset)?;
        kv.set("seed", &mut cfg.seed)?;
        kv.set("modality", &mut cfg.modality)?;
        kv.set("data.train", &mut cfg.train_data)?;
        kv.set("data.eval", &mut cfg.eval_data)?;
        kv.set("out_dir", &mut cfg.out_dir)?;
        cfg.model.read_kv(&mut kv)?;
        cfg.optim.read_kv(&mut kv)?;
        read_augment(&mut cfg.augment, &mut kv)?;
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        kv::push(&mut s, "seed", self.seed);
        kv::push(&mut s, "modality", self.modality);
        kv::push(&mut s, "data.train", self.train_data.display());
        kv::push(&mut s, "data.eval", self.eval_data.display());
        kv::push(&mut s, "out_dir", self.out_dir.display());
        self.model.write_kv(&mut s);
        self.optim.write_kv(&mut s);
        write_augment(&self.augment, &mut s);
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        self.augment.validate()
    }
}

fn write_augment(a: &AugmentConfig, s: &mut String) {
    kv::push(s, "augment.shear_p", a.shear_p);
    kv::push(s, "augment.shear", a.shear);
    kv::push(s, "augment.rotate_p", a.rotate_p);
    kv::push(s, "augment.rotate", a.rotate);
    kv::push(s, "augment.scale_p", a.scale_p);
    kv::push(s, "augment.scale_min", a.scale_min);
    kv::push(s, "augment.scale_max", a.scale_max);
    kv::push(s, "augment.flip_p", a.flip_p);
    kv::push(s, "augment.coord_drop_p", a.coord_drop_p);
    kv::push(s, "augment.joint_drop_p", a.joint_drop_p);
    kv::push(s, "augment.actor_perm_p", a.actor_perm_p);
    kv::push(s, "augment.adain_p", a.adain_p);
}

fn read_augment(a: &mut AugmentConfig, kv: &mut KvFile) -> Result<()> {
    kv.set("augment.shear_p", &mut a.shear_p)?;
    kv.set("augment.shear", &mut a.shear)?;
    kv.set("augment.rotate_p", &mut a.rotate_p)?;
    kv.set("augment.rotate", &mut a.rotate)?;
    kv.set("augment.scale_p", &mut a.scale_p)?;
    kv.set("augment.scale_min", &mut a.scale_min)?;
    kv.set("augment.scale_max", &mut a.scale_max)?;
    kv.set("augment.flip_p", &mut a.flip_p)?;
    kv.set("augment.coord_drop_p", &mut a.coord_drop_p)?;
    kv.set("augment.joint_drop_p", &mut a.joint_drop_p)?;
    kv.set("augment.actor_perm_p", &mut a.actor_perm_p)?;
    kv.set("augment.adain_p", &mut a.adain_p)?;
    Ok(())
}

/// Gather `[T, V_raw, 3]` into layout order; joints the clip lacks (a
/// missing second actor) are zero.
pub fn select_joints(x: &Tensor<f32>, index: &[usize]) -> Result<Tensor<f32>> {
    let s = x.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(dim_err(format!("select_joints expects [T, V, 3], got {s:?}")));
    }
    let (t, v) = (s[0], s[1]);
    let mut out = vec![0.0f32; t * index.len() * 3];
    for ti in 0..t {
        for (j, &src) in index.iter().enumerate() {
            if src < v {
                let from = (ti * v + src) * 3;
                let to = (ti * index.len() + j) * 3;
                out[to..to + 3].copy_from_slice(&x.data()[from..from + 3]);
            }
        }
    }
    Tensor::from_vec(&[t, index.len(), 3], out)
}

/// Fail early when a dataset cannot feed a model's joint table.
pub fn check_compatible(ds: &Dataset, cfg: &ModelConfig) -> Result<()> {
    let layout = cfg.base_layout()?;
    for (i, seq) in ds.sequences.iter().enumerate() {
        let ok = match cfg.layout {
            LayoutKind::NtuLike => seq.kind() == DatasetKind::NtuLike,
            LayoutKind::NwuclaLike => matches!(seq.kind(), DatasetKind::NwuclaLike | DatasetKind::Synthetic),
            LayoutKind::Custom => layout.input_index().iter().all(|&j| j < seq.v_raw()),
        };
        if !ok {
            return Err(Error::Config(format!(
                "sequence {i} ({:?}, {} joints) does not fit the {} joint layout",
                seq.kind(),
                seq.v_raw(),
                cfg.layout.name()
            )));
        }
    }
    Ok(())
}

/// Per-dataset data for training-time augmentation.
struct AugmentContext<'a> {
    cfg: &'a AugmentConfig,
    by_label: Vec<Vec<&'a SkeletonSequence>>,
    groups: Vec<Vec<usize>>,
}

/// Clip → sampled frames → modality → joint selection.
fn clip_input<R: Rng>(
    seq: &SkeletonSequence,
    layout: &PartitionLayout,
    frames: usize,
    modality: ModalityKind,
    train: Option<(&AugmentContext<'_>, &mut R)>,
) -> Result<(Tensor<f32>, Vec<f64>)> {
    let clip = match train {
        None => prepare_clip::<R>(seq, frames, None)?,
        Some((ctx, rng)) => {
            let groups: Vec<Vec<usize>> =
                ctx.groups.iter().filter(|g| g.iter().all(|&j| j < seq.v_raw())).cloned().collect();
            prepare_clip(seq, frames, Some((ctx.cfg, &ctx.by_label[seq.label()], &groups, rng)))?
        }
    };
    let adj = AdjacencyTable::for_sequence(seq);
    let x = modality_tensor(&clip.frames, &adj, modality)?;
    Ok((select_joints(&x, &layout.input_index())?, clip.t_norm))
}

/// Deterministic network inputs for `seqs` (eval sampling, no augmentation).
pub fn eval_batch(seqs: &[&SkeletonSequence], cfg: &ModelConfig, modality: ModalityKind) -> Result<Batch<f32>> {
    let layout = cfg.base_layout()?;
    let clips = seqs
        .iter()
        .map(|s| clip_input::<ChaCha8Rng>(s, &layout, cfg.frames, modality, None).map(|(x, t)| (x, t, s.label())))
        .collect::<Result<Vec<_>>>()?;
    Batch::stack(&clips)
}

/// Softmax probabilities and accuracy over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub probs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub loss: f64,
    pub accuracy: f64,
}

fn softmax_row(row: &[f32]) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
    let e: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Accuracy and mean cross-entropy of already averaged probabilities.
pub fn score_probs(probs: Vec<Vec<f64>>, labels: Vec<usize>) -> EvalResult {
    let n = labels.len().max(1) as f64;
    let mut loss = 0.0;
    let mut correct = 0;
    for (p, &y) in probs.iter().zip(&labels) {
        loss -= p[y].max(1e-300).ln();
        let pred = p.iter().enumerate().fold(0, |b, (i, v)| if *v > p[b] { i } else { b });
        correct += usize::from(pred == y);
    }
    EvalResult { loss: loss / n, accuracy: correct as f64 / n, probs, labels }
}

pub fn evaluate(params: &ModelParams<f32>, cfg: &ModelConfig, ds: &Dataset, modality: ModalityKind) -> Result<EvalResult> {
    if ds.num_classes() != cfg.num_classes {
        return Err(Error::Config(format!("data has {} classes, model has {}", ds.num_classes(), cfg.num_classes)));
    }
    check_compatible(ds, cfg)?;
    let mut probs = Vec::with_capacity(ds.len());
    let refs: Vec<&SkeletonSequence> = ds.sequences.iter().collect();
    for chunk in refs.chunks(EVAL_BATCH) {
        let batch = eval_batch(chunk, cfg, modality)?;
        let mut g = Graph::new();
        let out = model_forward(&mut g, params, &batch.x, &batch.t_norm, cfg, Mode::Eval)?;
        let logits = g.value(out.logits);
        probs.extend(logits.data().chunks(cfg.num_classes).map(softmax_row));
    }
    Ok(score_probs(probs, ds.sequences.iter().map(|s| s.label()).collect()))
}

/// Uniform mean of per-checkpoint softmax outputs.
pub fn evaluate_ensemble(ckpts: &[Checkpoint], ds: &Dataset) -> Result<EvalResult> {
    let first = ckpts.first().ok_or_else(|| Error::Config("no checkpoints given".into()))?;
    let mut sum: Option<Vec<Vec<f64>>> = None;
    for ck in ckpts {
        if ck.config.num_classes != first.config.num_classes {
            return Err(Error::Config(format!(
                "checkpoints disagree on class count ({} vs {})",
                ck.config.num_classes, first.config.num_classes
            )));
        }
        let r = evaluate(&ck.params, &ck.config, ds, ck.modality)?;
        sum = Some(match sum {
            None => r.probs,
            Some(acc) => acc.iter().zip(&r.probs).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect(),
        });
    }
    let k = ckpts.len() as f64;
    let probs = sum.unwrap().into_iter().map(|r| r.into_iter().map(|v| v / k).collect()).collect();
    Ok(score_probs(probs, ds.sequences.iter().map(|s| s.label()).collect()))
}

/// One row of the metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_loss: f64,
    pub eval_acc: f64,
    pub best_acc: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6e},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.lr, self.train_loss, self.train_acc, self.eval_loss, self.eval_acc, self.best_acc
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub best_acc: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochMetrics>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub num_params: usize,
}

/// Train from scratch, evaluating after every epoch. Writes the metrics
/// CSV, the resolved config and the best-eval checkpoint into `out_dir`.
pub fn fit(
    run: &RunConfig,
    train: &Dataset,
    eval: &Dataset,
    out_dir: &Path,
    mut progress: impl FnMut(&EpochMetrics),
) -> Result<FitSummary> {
    let mut run = run.clone();
    run.model.num_classes = train.num_classes();
    run.validate()?;
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Config("training and evaluation sets must be non-empty".into()));
    }
    check_compatible(train, &run.model)?;
    check_compatible(eval, &run.model)?;
    std::fs::create_dir_all(out_dir)?;
    write_atomic(&out_dir.join(CONFIG_FILE), run.to_text().as_bytes())?;

    let cfg = &run.model;
    let layout = cfg.base_layout()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut data_rng = ChaCha8Rng::seed_from_u64(run.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut params = ModelParams::<f32>::init(cfg, &mut init_rng)?;
    let num_params = params.num_learnable();
    let mut opt = AdamW::new();
    let steps_per_epoch = train.len().div_ceil(run.optim.batch_size);
    let schedule = LrSchedule::new(&run.optim, steps_per_epoch);

    let mut by_label: Vec<Vec<&SkeletonSequence>> = vec![Vec::new(); train.num_classes()];
    for s in &train.sequences {
        by_label[s.label()].push(s);
    }
    let ctx = AugmentContext { cfg: &run.augment, by_label, groups: layout.njp_raw() };

    let metrics_path = out_dir.join(METRICS_FILE);
    let checkpoint_path = out_dir.join(CHECKPOINT_FILE);
    let mut csv = format!("{METRICS_HEADER}\n");
    let mut history = Vec::new();
    let (mut best_acc, mut best_epoch) = (-1.0, 0);
    let mut step = 0;
    for epoch in 1..=run.optim.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut data_rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0, 0);
        let mut lr = schedule.lr(step);
        for idx in order.chunks(run.optim.batch_size) {
            let clips = idx
                .iter()
                .map(|&i| {
                    let s = &train.sequences[i];
                    clip_input(s, &layout, cfg.frames, run.modality, Some((&ctx, &mut data_rng))).map(|(x, t)| (x, t, s.label()))
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = Batch::stack(&clips)?;
            lr = schedule.lr(step);
            let stats = train_step(&mut params, &mut opt, &batch, cfg, &run.optim, lr, &mut data_rng)?;
            loss_sum += stats.loss * batch.len() as f64;
            correct += stats.correct;
            seen += batch.len();
            step += 1;
        }
        let ev = evaluate(&params, cfg, eval, run.modality)?;
        if ev.accuracy > best_acc {
            best_acc = ev.accuracy;
            best_epoch = epoch;
            Checkpoint { config: cfg.clone(), modality: run.modality, params: params.clone() }.save(&checkpoint_path)?;
        }
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            eval_loss: ev.loss,
            eval_acc: ev.accuracy,
            best_acc,
        };
        csv.push_str(&m.csv_row());
        csv.push('\n');
        write_atomic(&metrics_path, csv.as_bytes())?;
        progress(&m);
        history.push(m);
    }
    Ok(FitSummary { best_acc, best_epoch, history, metrics_path, checkpoint_path, num_params })
}

/// Per-class mean Skate-Type importance (averaged over blocks and samples)
/// and per-class accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassInspection {
    pub class: usize,
    pub name: String,
    pub scores: [f64; 4],
    pub accuracy: f64,
}

pub fn inspect(ck: &Checkpoint, ds: &Dataset) -> Result<Vec<ClassInspection>> {
    let cfg = &ck.config;
    if ds.num_classes() != cfg.num_classes {
        return Err(Error::Config(format!("data has {} classes, model has {}", ds.num_classes(), cfg.num_classes)));
    }
    check_compatible(ds, cfg)?;
    let mut attn = Vec::with_capacity(cfg.blocks);
    let mut layouts = Vec::with_capacity(cfg.blocks);
    for b in 0..cfg.blocks {
        attn.push(AttentionParams::from_map(&ck.params.tensors, &format!("{}.attn", block_prefix(b)), cfg.heads / 8)?);
        layouts.push(cfg.stage_layout(b / cfg.blocks_per_stage)?);
    }
    let mut out = Vec::with_capacity(cfg.num_classes);
    for class in 0..cfg.num_classes {
        let members: Vec<&SkeletonSequence> = ds.sequences.iter().filter(|s| s.label() == class).collect();
        let mut scores = [0.0; 4];
        let mut correct = 0;
        for chunk in members.chunks(EVAL_BATCH) {
            let batch = eval_batch(chunk, cfg, ck.modality)?;
            let mut g = Graph::new();
            let fwd = model_forward(&mut g, &ck.params, &batch.x, &batch.t_norm, cfg, Mode::Eval)?;
            correct += argmax_rows(g.value(fwd.logits)).iter().filter(|&&p| p == class).count();
            for (b, x_msa) in fwd.msa_inputs.iter().enumerate() {
                let s = importance_score(x_msa, &attn[b], &layouts[b])?;
                for (acc, v) in scores.iter_mut().zip(s) {
                    *acc += v * chunk.len() as f64 / cfg.blocks as f64;
                }
            }
        }
        let n = members.len().max(1) as f64;
        out.push(ClassInspection {
            class,
            name: ds.class_names[class].clone(),
            scores: scores.map(|s| s / n),
            accuracy: correct as f64 / n,
        });
    }
    Ok(out)
}

/// Mean label-smoothed loss of `params` on `batch` in eval mode.
pub fn batch_loss(params: &ModelParams<f32>, cfg: &ModelConfig, batch: &Batch<f32>, alpha: f64) -> Result<f64> {
    let mut g = Graph::new();
    let out = model_forward(&mut g, params, &batch.x, &batch.t_norm, cfg, Mode::Eval)?;
    let loss = label_smoothed_ce(&mut g, out.logits, &batch.labels, alpha)?;
    Ok(g.value(loss).item() as f64)
}
