//! RMSProp training loop with per-epoch learning-rate decay, validation-Dice
//! checkpoint selection, CSV epoch logs, and the regularizer lifecycle.
//!
//! Distance-map regression targets are always computed from the ground-truth
//! labels of the batch (never from predictions) and cached per slice; the
//! truncation threshold is fixed for the run, so the cache key is the slice
//! alone.

use std::collections::HashMap;
use std::rc::Rc;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::{augment::augment, Case};
use crate::distmap::{dm_stack, DistanceMapStack, LabelSlice};
use crate::error::{Error, Result};
use crate::metrics::dice;
use crate::mtl::{fixed_loss, joint_loss, TaskWeights};
use crate::networks::{build_model, detach_regularizer, forward, predict_labels, ArchSpec, ModelParams};
use crate::tensor::{cross_entropy_loss, mad_loss, Mode, Tape, Tensor};

pub const RMSPROP_ALPHA: f64 = 0.99;
pub const RMSPROP_EPS: f64 = 1e-8;

/// How the two loss terms are combined when the regularizer is attached.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Weighting {
    /// uncertainty weighting with learned log-scales
    Learned,
    /// fixed non-negative weights (w1 for MAD, w2 for cross-entropy)
    Fixed { w1: f64, w2: f64 },
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub arch: ArchSpec,
    pub lr0: f64,
    /// multiplicative decay applied once per epoch
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weighting: Weighting,
    /// extra randomly transformed copies of every training slice per epoch
    pub augment_copies: usize,
    /// hash of the resolved run configuration, carried into checkpoints
    pub config_hash: u64,
}

impl TrainConfig {
    pub fn new(arch: ArchSpec) -> TrainConfig {
        // reference defaults: baseline rate 1e-4, multi-task rate 5e-4,
        // decay 0.99 per epoch, batch 15
        let lr0 = if arch.dmr_attached { 5e-4 } else { 1e-4 };
        TrainConfig {
            arch,
            lr0,
            lr_decay: 0.99,
            epochs: 30,
            batch_size: 15,
            seed: 0,
            weighting: Weighting::Learned,
            augment_copies: 0,
            config_hash: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if !(self.lr0 > 0.0) {
            return Err(Error::Usage(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Usage(format!(
                "lr_decay must be in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Usage("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Usage("epochs must be >= 1".into()));
        }
        if let Weighting::Fixed { w1, w2 } = self.weighting {
            if w1 < 0.0 || w2 < 0.0 {
                return Err(Error::Usage(format!(
                    "fixed weights must be non-negative, got ({w1}, {w2})"
                )));
            }
        }
        Ok(())
    }
}

/// Learning rate at a given epoch: lr0 * decay^epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi(epoch as i32)
}

/// One RMSProp update on a flat parameter: v <- a*v + (1-a)*g^2,
/// p <- p - lr * g / (sqrt(v) + eps).
pub fn rmsprop_update(
    param: &mut [f64],
    grad: &[f64],
    v: &mut [f64],
    lr: f64,
    alpha: f64,
    eps: f64,
) {
    for ((p, &g), vi) in param.iter_mut().zip(grad).zip(v.iter_mut()) {
        *vi = alpha * *vi + (1.0 - alpha) * g * g;
        *p -= lr * g / (vi.sqrt() + eps);
    }
}

/// RMSProp state keyed by parameter name.
pub struct RmsProp {
    v: IndexMap<String, Vec<f64>>,
    pub alpha: f64,
    pub eps: f64,
}

impl RmsProp {
    pub fn new() -> RmsProp {
        RmsProp {
            v: IndexMap::new(),
            alpha: RMSPROP_ALPHA,
            eps: RMSPROP_EPS,
        }
    }

    /// Apply one step to every named tensor that holds a gradient.
    pub fn step<'a>(&mut self, params: impl Iterator<Item = (&'a String, &'a Tensor)>, lr: f64) {
        for (name, t) in params {
            let Some(grad) = t.grad() else { continue };
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; t.numel()]);
            rmsprop_update(&mut t.data_mut(), &grad, v, lr, self.alpha, self.eps);
        }
    }
}

impl Default for RmsProp {
    fn default() -> Self {
        RmsProp::new()
    }
}

/// One row of the per-epoch training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_ce: f64,
    /// absent for baseline runs without the regularizer
    pub train_mad: Option<f64>,
    pub val_dice_mean: f64,
    pub val_dice_per_class: Vec<f64>,
    /// learned log-scales, present with learned weighting
    pub s1: Option<f64>,
    pub s2: Option<f64>,
}

impl EpochLog {
    pub fn csv_header(num_classes: usize) -> String {
        let mut cols = vec![
            "epoch".to_string(),
            "lr".to_string(),
            "train_ce".to_string(),
            "train_mad".to_string(),
            "val_dice_mean".to_string(),
        ];
        for c in 1..num_classes {
            cols.push(format!("val_dice_c{c}"));
        }
        cols.extend(["s1", "s2", "eff_w_mad", "eff_w_ce"].map(String::from));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.8}")).unwrap_or_default();
        let mut cols = vec![
            self.epoch.to_string(),
            format!("{:.8e}", self.lr),
            format!("{:.8}", self.train_ce),
            opt(self.train_mad),
            format!("{:.8}", self.val_dice_mean),
        ];
        for d in &self.val_dice_per_class {
            cols.push(format!("{d:.8}"));
        }
        cols.push(opt(self.s1));
        cols.push(opt(self.s2));
        cols.push(opt(self.s1.map(|s| (-s).exp())));
        cols.push(opt(self.s2.map(|s| (-2.0 * s).exp())));
        cols.join(",")
    }
}

pub fn logs_to_csv(logs: &[EpochLog], num_classes: usize) -> String {
    let mut out = EpochLog::csv_header(num_classes);
    out.push('\n');
    for l in logs {
        out.push_str(&l.csv_row());
        out.push('\n');
    }
    out
}

/// Best-validation snapshot selected during training.
pub struct TrainedCheckpoint {
    pub params: ModelParams,
    pub epoch: usize,
    pub val_dice: f64,
    pub config_hash: u64,
    /// learned (s1, s2) at snapshot time
    pub s: Option<(f64, f64)>,
}

pub struct TrainOutcome {
    pub best: TrainedCheckpoint,
    pub final_params: ModelParams,
    pub final_s: Option<(f64, f64)>,
    pub logs: Vec<EpochLog>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

fn mix(parts: &[u64]) -> u64 {
    let mut h = 0u64;
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    h
}

#[derive(Clone, Copy)]
struct SliceRef {
    case: usize,
    z: usize,
}

struct BatchData {
    images: Tensor,
    labels: Vec<u8>,
    targets: Option<Tensor>,
}

/// Regression targets for a batch of label slices, always derived from the
/// ground truth. Only untransformed slices hit the cache.
fn dm_targets(
    slices: &[LabelSlice],
    num_classes: usize,
    threshold: f64,
    cache_keys: &[Option<u64>],
    cache: &mut HashMap<u64, Rc<DistanceMapStack>>,
) -> Result<Tensor> {
    let (h, w) = (slices[0].height, slices[0].width);
    let channels = num_classes - 1;
    let mut data = Vec::with_capacity(slices.len() * channels * h * w);
    for (slice, key) in slices.iter().zip(cache_keys) {
        let stack = match key {
            Some(k) => {
                if let Some(hit) = cache.get(k) {
                    hit.clone()
                } else {
                    let s = Rc::new(dm_stack(slice, num_classes, threshold)?);
                    cache.insert(*k, s.clone());
                    s
                }
            }
            None => Rc::new(dm_stack(slice, num_classes, threshold)?),
        };
        data.extend_from_slice(&stack.data);
    }
    Tensor::from_vec(vec![slices.len(), channels, h, w], data)
}

fn assemble_batch(
    cfg: &TrainConfig,
    cases: &[Case],
    entries: &[(SliceRef, usize)],
    epoch: usize,
    cache: &mut HashMap<u64, Rc<DistanceMapStack>>,
) -> Result<BatchData> {
    let first = &cases[entries[0].0.case].image;
    let (w, h) = (first.width, first.height);
    let plane = w * h;
    let mut image_data = Vec::with_capacity(entries.len() * plane);
    let mut labels = Vec::with_capacity(entries.len() * plane);
    let mut slices = Vec::with_capacity(entries.len());
    let mut cache_keys = Vec::with_capacity(entries.len());
    for &(sref, copy) in entries {
        let case = &cases[sref.case];
        if case.image.width != w || case.image.height != h {
            return Err(Error::Dim(format!(
                "case {} is {}x{}, expected {w}x{h}; preprocess to a common size",
                case.id, case.image.width, case.image.height
            )));
        }
        let img = case.image.slice(sref.z);
        let lab = case.labels.slice(sref.z);
        let (img, lab, key) = if copy == 0 {
            (img.to_vec(), lab.to_vec(), Some(mix(&[sref.case as u64, sref.z as u64])))
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(&[
                cfg.seed,
                sref.case as u64,
                sref.z as u64,
                epoch as u64,
                copy as u64,
            ]));
            let (ai, al) = augment(img, lab, w, h, &mut rng);
            (ai, al, None)
        };
        image_data.extend(img.iter().map(|&v| v as f64));
        labels.extend_from_slice(&lab);
        slices.push(LabelSlice {
            height: h,
            width: w,
            labels: lab,
        });
        cache_keys.push(key);
    }
    let images = Tensor::from_vec(vec![entries.len(), 1, h, w], image_data)?;
    let targets = if cfg.arch.dmr_attached {
        Some(dm_targets(
            &slices,
            cfg.arch.num_classes,
            cfg.arch.dm_threshold,
            &cache_keys,
            cache,
        )?)
    } else {
        None
    };
    Ok(BatchData {
        images,
        labels,
        targets,
    })
}

/// Mean foreground Dice of one predicted volume against its reference,
/// plus the per-class values. Classes absent from both count as 1.
fn volume_dice(pred: &crate::dataio::LabelVolume, reference: &crate::dataio::LabelVolume) -> Vec<f64> {
    (1..reference.num_classes as u8)
        .map(|c| dice(&pred.class_mask(c), &reference.class_mask(c)).expect("equal shapes"))
        .collect()
}

fn validate(model: &ModelParams, val_cases: &[Case]) -> Result<(f64, Vec<f64>)> {
    let num_fg = model.spec().num_classes - 1;
    let mut per_class_sums = vec![0.0; num_fg];
    let mut volume_means = Vec::with_capacity(val_cases.len());
    for case in val_cases {
        let pred = predict_labels(model, &case.image)?;
        let dices = volume_dice(&pred, &case.labels);
        volume_means.push(dices.iter().sum::<f64>() / num_fg as f64);
        for (s, d) in per_class_sums.iter_mut().zip(&dices) {
            *s += d;
        }
    }
    let n = val_cases.len() as f64;
    Ok((
        volume_means.iter().sum::<f64>() / n,
        per_class_sums.into_iter().map(|s| s / n).collect(),
    ))
}

/// Full training run. Deterministic for identical configs: logs, the best
/// checkpoint, and the final parameters are all bit-reproducible.
pub fn train(cfg: &TrainConfig, train_cases: &[Case], val_cases: &[Case]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_cases.is_empty() || val_cases.is_empty() {
        return Err(Error::Usage(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let model = build_model(&cfg.arch, cfg.seed)?;
    let task = match (cfg.arch.dmr_attached, cfg.weighting) {
        (true, Weighting::Learned) => Some(TaskWeights::new()),
        _ => None,
    };
    let mut opt = RmsProp::new();
    let mut cache: HashMap<u64, Rc<DistanceMapStack>> = HashMap::new();

    let mut pool = Vec::new();
    for (ci, case) in train_cases.iter().enumerate() {
        for z in 0..case.image.depth {
            pool.push(SliceRef { case: ci, z });
        }
    }

    let task_names = ("mtl.s1".to_string(), "mtl.s2".to_string());
    let mut best: Option<TrainedCheckpoint> = None;
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut entries: Vec<(SliceRef, usize)> = Vec::new();
        for &sref in &pool {
            for copy in 0..=cfg.augment_copies {
                entries.push((sref, copy));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, epoch as u64, 0xE70C]));
        entries.shuffle(&mut rng);

        let (mut ce_sum, mut mad_sum, mut n_seen) = (0.0, 0.0, 0usize);
        for (step, batch_entries) in entries.chunks(cfg.batch_size).enumerate() {
            let batch = assemble_batch(cfg, train_cases, batch_entries, epoch, &mut cache)?;
            let mut tape = Tape::recording();
            let out = forward(&mut tape, &model, &batch.images, Mode::Train)?;
            let ce = cross_entropy_loss(&mut tape, &out.logits, &batch.labels)?;
            let (loss, mad_val) = match (&batch.targets, &out.dm_pred) {
                (Some(target), Some(dm_pred)) => {
                    let mad = mad_loss(&mut tape, dm_pred, target)?;
                    let mad_val = mad.item();
                    let loss = match (&task, cfg.weighting) {
                        (Some(tw), _) => joint_loss(&mut tape, &mad, &ce, tw)?,
                        (None, Weighting::Fixed { w1, w2 }) => {
                            fixed_loss(&mut tape, &mad, &ce, w1, w2)?
                        }
                        (None, Weighting::Learned) => unreachable!("learned implies task weights"),
                    };
                    (loss, Some(mad_val))
                }
                _ => (ce.clone(), None),
            };
            let (ce_val, loss_val) = (ce.item(), loss.item());
            if !loss_val.is_finite() || !ce_val.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss diverged at epoch {epoch}, step {step}: loss = {loss_val}, ce = {ce_val}, mad = {mad_val:?}"
                )));
            }
            tape.backward(&loss)?;
            opt.step(model.trainable(), lr);
            if let Some(tw) = &task {
                opt.step(
                    [(&task_names.0, &tw.s1), (&task_names.1, &tw.s2)].into_iter(),
                    lr,
                );
                tw.s1.clear_grad();
                tw.s2.clear_grad();
            }
            model.clear_grads();
            let n = batch_entries.len();
            ce_sum += ce_val * n as f64;
            if let Some(m) = mad_val {
                mad_sum += m * n as f64;
            }
            n_seen += n;
        }

        let (val_mean, val_per_class) = validate(&model, val_cases)?;
        let log = EpochLog {
            epoch,
            lr,
            train_ce: ce_sum / n_seen as f64,
            train_mad: cfg.arch.dmr_attached.then_some(mad_sum / n_seen as f64),
            val_dice_mean: val_mean,
            val_dice_per_class: val_per_class,
            s1: task.as_ref().map(|t| t.s1.item()),
            s2: task.as_ref().map(|t| t.s2.item()),
        };
        logs.push(log);

        let improved = best.as_ref().map_or(true, |b| val_mean > b.val_dice);
        if improved {
            best = Some(TrainedCheckpoint {
                params: model.deep_copy(),
                epoch,
                val_dice: val_mean,
                config_hash: cfg.config_hash,
                s: task.as_ref().map(|t| (t.s1.item(), t.s2.item())),
            });
        }
    }

    Ok(TrainOutcome {
        best: best.expect("at least one epoch ran"),
        final_s: task.as_ref().map(|t| (t.s1.item(), t.s2.item())),
        final_params: model,
        logs,
    })
}

/// Deployable parameters from a checkpoint: the regularizer is dropped when
/// present; segmentation predictions are unchanged either way.
pub fn finalize(ckpt: &TrainedCheckpoint) -> Result<ModelParams> {
    if ckpt.params.spec().dmr_attached {
        detach_regularizer(&ckpt.params)
    } else {
        Ok(ckpt.params.deep_copy())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::phantom::{gen_phantom, PhantomSpec};
    use crate::networks::Variant;

    #[test]
    fn rmsprop_hand_evaluated_first_step() {
        let mut p = vec![1.0];
        let g = vec![1.0];
        let mut v = vec![0.0];
        rmsprop_update(&mut p, &g, &mut v, 0.1, RMSPROP_ALPHA, RMSPROP_EPS);
        assert!((v[0] - 0.01).abs() < 1e-15);
        // v = 0.99*0 + 0.01*1 = 0.01; step = lr * 1 / (sqrt(0.01) + 1e-8)
        let step = 0.1 * 1.0 / (0.1 + 1e-8);
        assert!((step - 0.9999999f64).abs() < 1e-7);
        assert!((p[0] - (1.0 - step)).abs() < 1e-12);
    }

    #[test]
    fn rmsprop_zero_gradient_decays_v_only() {
        let mut p = vec![2.0];
        let mut v = vec![0.04];
        rmsprop_update(&mut p, &[0.0], &mut v, 0.1, RMSPROP_ALPHA, RMSPROP_EPS);
        assert_eq!(p[0], 2.0);
        assert!((v[0] - 0.0396).abs() < 1e-15);
    }

    #[test]
    fn rmsprop_is_deterministic_across_instances() {
        let run = || {
            let t = Tensor::param(vec![3], vec![0.5, -0.25, 1.5]).unwrap();
            t.accum_grad(&[0.1, -0.2, 0.05]);
            let mut opt = RmsProp::new();
            let name = "w".to_string();
            opt.step([(&name, &t)].into_iter(), 0.01);
            let data = t.data().clone();
            data
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn lr_schedule_matches_reference_values() {
        let mut cfg = TrainConfig::new(ArchSpec::new(Variant::UNet));
        cfg.lr0 = 0.0005;
        assert_eq!(lr_at(0, &cfg), 0.0005);
        assert!((lr_at(1, &cfg) - 0.000495).abs() < 1e-12);
        cfg.lr_decay = 1.0;
        assert_eq!(lr_at(100, &cfg), 0.0005);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let arch = ArchSpec::new(Variant::UNet);
        let mut cfg = TrainConfig::new(arch.clone());
        cfg.lr0 = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::new(arch.clone());
        cfg.lr_decay = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::new(arch);
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn empty_dataset_is_a_usage_error() {
        let mut arch = ArchSpec::new(Variant::UNet);
        arch.stage_channels = vec![2, 3, 4];
        arch.bottleneck_channels = 6;
        let cfg = TrainConfig::new(arch);
        assert!(matches!(
            train(&cfg, &[], &[]),
            Err(Error::Usage(_))
        ));
    }

    fn tiny_cases(n: usize, seed: u64) -> Vec<Case> {
        (0..n)
            .map(|i| {
                let spec = PhantomSpec {
                    size: 32,
                    slices: 2,
                    empty_fraction: 0.0,
                    lv_radius: (3.0, 4.0),
                    myo_thickness: (2.0, 2.5),
                    rv_radius: (2.0, 3.0),
                    center_jitter: 1.0,
                    noise_sigma: 0.05,
                    lv_scale: 1.0,
                    seed: mix(&[seed, i as u64]),
                };
                let (image, labels) = gen_phantom(&spec).unwrap();
                Case {
                    id: format!("case{i}"),
                    image,
                    labels,
                    subgroup: None,
                }
            })
            .collect()
    }

    fn tiny_cfg(dmr: bool) -> TrainConfig {
        let mut arch = ArchSpec::new(Variant::UNet);
        arch.stage_channels = vec![2, 3, 4];
        arch.bottleneck_channels = 6;
        arch.dmr_attached = dmr;
        arch.dm_threshold = 250.0;
        let mut cfg = TrainConfig::new(arch);
        cfg.epochs = 2;
        cfg.batch_size = 4;
        cfg.seed = 7;
        cfg
    }

    #[test]
    fn training_is_bit_reproducible() {
        let cases = tiny_cases(4, 3);
        let cfg = tiny_cfg(true);
        let a = train(&cfg, &cases, &cases[..1]).unwrap();
        let b = train(&cfg, &cases, &cases[..1]).unwrap();
        assert_eq!(logs_to_csv(&a.logs, 4), logs_to_csv(&b.logs, 4));
        for ((na, ta), (nb, tb)) in a.final_params.iter().zip(b.final_params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(*ta.data(), *tb.data(), "{na} differs between runs");
        }
        assert_eq!(a.best.epoch, b.best.epoch);
        assert_eq!(a.best.val_dice, b.best.val_dice);
    }

    #[test]
    fn both_loss_terms_are_positive_and_logged() {
        let cases = tiny_cases(4, 5);
        let cfg = tiny_cfg(true);
        let out = train(&cfg, &cases, &cases[..1]).unwrap();
        let first = &out.logs[0];
        assert!(first.train_ce > 0.0);
        assert!(first.train_mad.unwrap() > 0.0);
        assert!(first.s1.is_some() && first.s2.is_some());
    }

    #[test]
    fn validation_does_not_update_parameters() {
        let cases = tiny_cases(2, 9);
        let cfg = tiny_cfg(false);
        let model = build_model(&cfg.arch, cfg.seed).unwrap();
        let hash_params = |m: &ModelParams| -> Vec<Vec<u64>> {
            m.iter()
                .map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect())
                .collect()
        };
        let before = hash_params(&model);
        let _ = validate(&model, &cases).unwrap();
        assert_eq!(before, hash_params(&model));
    }

    #[test]
    fn checkpoint_tracks_the_best_epoch_monotonically() {
        let cases = tiny_cases(4, 11);
        let mut cfg = tiny_cfg(false);
        cfg.epochs = 3;
        let out = train(&cfg, &cases, &cases[..2]).unwrap();
        let best_logged = out
            .logs
            .iter()
            .map(|l| l.val_dice_mean)
            .fold(f64::MIN, f64::max);
        assert_eq!(out.best.val_dice, best_logged);
    }

    #[test]
    fn finalize_detaches_and_preserves_predictions() {
        let cases = tiny_cases(3, 13);
        let cfg = tiny_cfg(true);
        let out = train(&cfg, &cases, &cases[..1]).unwrap();
        let deployable = finalize(&out.best).unwrap();
        assert!(!deployable.spec().dmr_attached);
        assert!(deployable.param_count() < out.best.params.param_count());
        let before = predict_labels(&out.best.params, &cases[0].image).unwrap();
        let after = predict_labels(&deployable, &cases[0].image).unwrap();
        assert_eq!(before.labels, after.labels);
    }

    #[test]
    fn dm_targets_ignore_predictions_entirely() {
        // targets depend only on the labels: rebuilding them after scrambling
        // the model (hence any would-be prediction) changes nothing
        let cases = tiny_cases(2, 17);
        let cfg = tiny_cfg(true);
        let entries: Vec<(SliceRef, usize)> =
            vec![(SliceRef { case: 0, z: 0 }, 0), (SliceRef { case: 1, z: 1 }, 0)];
        let mut cache = HashMap::new();
        let a = assemble_batch(&cfg, &cases, &entries, 0, &mut cache).unwrap();
        let model = build_model(&cfg.arch, 1).unwrap();
        for (_, t) in model.iter() {
            for v in t.data_mut().iter_mut() {
                *v += 123.0;
            }
        }
        let mut cache2 = HashMap::new();
        let b = assemble_batch(&cfg, &cases, &entries, 0, &mut cache2).unwrap();
        assert_eq!(
            *a.targets.unwrap().data(),
            *b.targets.unwrap().data()
        );
    }

    #[test]
    fn augmented_copies_enlarge_the_epoch() {
        let cases = tiny_cases(2, 19);
        let mut cfg = tiny_cfg(false);
        cfg.augment_copies = 2;
        cfg.epochs = 1;
        // 2 cases * 2 slices * (1 + 2 copies) = 12 samples -> 3 batches of 4
        let out = train(&cfg, &cases, &cases[..1]).unwrap();
        assert_eq!(out.logs.len(), 1);
    }
}
