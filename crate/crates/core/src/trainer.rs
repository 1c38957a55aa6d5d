//! ERM, adversarial and shared adversarial training with momentum SGD.
//!
//! Each mini-batch minimizes `sigma * mean(perturbed loss) + (1 - sigma) *
//! mean(clean loss)`. The perturbation is crafted against the parameters as
//! they were at the start of the batch.

use alloc::vec;
use alloc::vec::Vec;

use crate::adversary::{
    perturbed_inputs, pgd_attack, shared_pgd_attack, AttackGoal, AttackParams, HeapPlan, NormBall,
};
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::net::{accuracy, smooth_labels, Classifier, GradientBundle, LossConfig, ModelParams};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Defense {
    Erm,
    /// Per-example PGD perturbations.
    AdvTrain,
    /// One perturbation per heap of `sharedness` batch elements.
    SharedAdvTrain { sharedness: usize },
}

impl Defense {
    pub fn sharedness(&self) -> Option<usize> {
        match self {
            Defense::Erm => None,
            Defense::AdvTrain => Some(1),
            Defense::SharedAdvTrain { sharedness } => Some(*sharedness),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Weight of the perturbed term, in `[0, 1]`.
    pub sigma: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// `(epoch, factor)`: from `epoch` on, the learning rate is multiplied by
    /// `factor` (cumulatively).
    pub milestones: Vec<(usize, f32)>,
    pub seed: u64,
    pub defense: Defense,
    /// Training-time attack budget in input units.
    pub eps: f32,
    /// Training-time attack; a few constant steps of `c * eps`.
    pub attack: AttackParams,
    /// Smoothing and threshold shared by the attack and the training loss.
    pub loss: LossConfig,
    /// Apply the `kappa` cap to the perturbed term of the objective too.
    pub threshold_perturbed_term: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            epochs: 10,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            milestones: Vec::new(),
            seed: 0,
            defense: Defense::Erm,
            eps: 0.0,
            attack: AttackParams::proportional(0.5, 4),
            loss: LossConfig::training(),
            threshold_perturbed_term: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(invalid("sigma must lie in [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(invalid("momentum must lie in [0, 1) and weight decay be >= 0"));
        }
        if !(self.eps >= 0.0) || !self.eps.is_finite() {
            return Err(invalid("training eps must be finite and non-negative"));
        }
        if let Defense::SharedAdvTrain { sharedness } = self.defense {
            if sharedness == 0 || sharedness > self.batch_size {
                return Err(invalid("sharedness must lie in [1, batch size]"));
            }
        }
        self.attack.validate()?;
        self.loss.validate()
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f32 {
        self.milestones
            .iter()
            .filter(|(e, _)| epoch >= *e)
            .fold(self.learning_rate, |lr, (_, f)| lr * f)
    }

    /// Whether batches are perturbed at all.
    fn attacks(&self) -> bool {
        self.defense != Defense::Erm && self.sigma > 0.0
    }
}

/// `sigma * mean(perturbed) + (1 - sigma) * mean(clean)`. The clean term is
/// ignored when `sigma = 1` and the perturbed term when `sigma = 0`.
pub fn mixed_loss(clean: &[f32], perturbed: &[f32], sigma: f32) -> Result<f32> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(invalid("sigma must lie in [0, 1]"));
    }
    let mean = |v: &[f32]| -> Result<f32> {
        if v.is_empty() {
            return Err(Error::Empty("loss batch"));
        }
        Ok(v.iter().sum::<f32>() / v.len() as f32)
    };
    if sigma == 0.0 {
        return mean(clean);
    }
    if sigma == 1.0 {
        return mean(perturbed);
    }
    if clean.len() != perturbed.len() {
        return Err(invalid("clean and perturbed losses cover different batches"));
    }
    Ok(sigma * mean(perturbed)? + (1.0 - sigma) * mean(clean)?)
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            velocity: params.tensors.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }
}

/// `v <- momentum * v + (g + wd * p)`, `p <- p - lr * v`.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    lr: f32,
    momentum: f32,
    weight_decay: f32,
    state: &mut SgdState,
) -> Result<()> {
    if grads.len() != params.tensors.len() || state.velocity.len() != grads.len() {
        return Err(invalid("gradient count differs from parameter count"));
    }
    for (((_, p), g), v) in params.tensors.iter_mut().zip(grads).zip(&mut state.velocity) {
        if p.shape() != g.shape() || v.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        for ((pv, &gv), vv) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(v.as_mut_slice()) {
            *vv = momentum * *vv + (gv + weight_decay * *pv);
            *pv -= lr * *vv;
        }
        if !p.all_finite() || !v.all_finite() {
            return Err(Error::NonFinite("sgd_step"));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub clean_loss: f64,
    /// `None` when no batch was perturbed.
    pub adversarial_loss: Option<f64>,
    pub clean_accuracy: f64,
    pub learning_rate: f32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

const SHUFFLE_STREAM: u64 = 1;
const ATTACK_STREAM: u64 = 2;

/// Train `model` on `data`. Deterministic in `cfg.seed`.
pub fn train(model: Classifier, data: &Dataset, cfg: &TrainConfig) -> Result<(Classifier, TrainHistory)> {
    train_with(model, data, cfg, |_, _, _| Ok(()))
}

/// As [`train`], calling `on_epoch` after every completed epoch.
pub fn train_with(
    mut model: Classifier,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &Classifier, &EpochRecord) -> Result<()>,
) -> Result<(Classifier, TrainHistory)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    model.batch_len(&data.inputs)?;
    if data.classes != model.classes() {
        return Err(invalid("dataset and model disagree on the class count"));
    }
    let ball = NormBall::new(cfg.eps, data.domain)?;
    let root = RngStream::new(cfg.seed, 0);
    let shuffle_root = root.fork(SHUFFLE_STREAM);
    let attack_root = root.fork(ATTACK_STREAM);
    let n = data.len();
    let batches = n.div_ceil(cfg.batch_size);
    let mut state = SgdState::new(&model.params);
    let mut history = TrainHistory::default();
    let goal = AttackGoal::Untargeted;
    let smoothing = cfg.loss.smoothing as f64;
    let perturbed_kappa = if cfg.threshold_perturbed_term { cfg.loss.kappa } else { None };

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        let order = shuffle_root.fork(epoch as u64).permutation(n);
        let (mut clean_sum, mut adv_sum, mut acc_sum) = (0f64, 0f64, 0f64);
        let mut attacked = false;
        for b in 0..batches {
            let idx = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(n)];
            let batch = data.subset(idx);
            let d = idx.len();
            let targets: Tensor = smooth_labels(&batch.labels, model.classes(), smoothing)?;

            let perturbed = if cfg.attacks() {
                let mut stream = attack_root.fork((epoch * batches + b) as u64);
                let xi = match cfg.defense {
                    Defense::AdvTrain => pgd_attack(
                        &model,
                        &batch.inputs,
                        &batch.labels,
                        &ball,
                        &cfg.attack,
                        &goal,
                        &cfg.loss,
                        &mut stream,
                    )?,
                    Defense::SharedAdvTrain { sharedness } => {
                        let plan = HeapPlan::new(d, sharedness.min(d), false)?;
                        shared_pgd_attack(
                            &model,
                            &batch.inputs,
                            &batch.labels,
                            &ball,
                            &cfg.attack,
                            &goal,
                            &cfg.loss,
                            &plan,
                            &mut stream,
                        )?
                        .applied
                    }
                    Defense::Erm => unreachable!(),
                };
                let xa = perturbed_inputs(&batch.inputs, &xi, data.domain)?;
                Some(model.backward(&xa, &targets, perturbed_kappa)?)
            } else {
                None
            };
            let clean: Option<GradientBundle> = if perturbed.is_none() || cfg.sigma < 1.0 {
                Some(model.backward(&batch.inputs, &targets, None)?)
            } else {
                None
            };

            let grads: Vec<Tensor> = match (&clean, &perturbed) {
                (Some(c), None) => c.params.clone(),
                (None, Some(p)) => p.params.clone(),
                (Some(c), Some(p)) => c
                    .params
                    .iter()
                    .zip(&p.params)
                    .map(|(gc, gp)| Tensor::axpy(cfg.sigma, gp, &gc.scale(1.0 - cfg.sigma)))
                    .collect::<Result<_>>()?,
                (None, None) => unreachable!(),
            };

            let clean_logits = model.forward(&batch.inputs)?;
            let clean_mean = match &clean {
                Some(c) => c.mean_loss as f64,
                None => {
                    let l = crate::net::cross_entropy(&clean_logits, &targets)?;
                    l.iter().map(|&v| v as f64).sum::<f64>() / l.len() as f64
                }
            };
            let adv_mean = perturbed.as_ref().map(|p| p.mean_loss as f64);
            if !clean_mean.is_finite() || adv_mean.is_some_and(|a| !a.is_finite()) {
                return Err(Error::Diverged { epoch, batch: b });
            }
            clean_sum += clean_mean * d as f64;
            if let Some(a) = adv_mean {
                adv_sum += a * d as f64;
                attacked = true;
            }
            acc_sum += accuracy(&clean_logits, &batch.labels)? * d as f64;

            sgd_step(&mut model.params, &grads, lr, cfg.momentum, cfg.weight_decay, &mut state)
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::Diverged { epoch, batch: b },
                    other => other,
                })?;
        }
        let record = EpochRecord {
            epoch,
            clean_loss: clean_sum / n as f64,
            adversarial_loss: attacked.then(|| adv_sum / n as f64),
            clean_accuracy: acc_sum / n as f64,
            learning_rate: lr,
        };
        history.epochs.push(record);
        on_epoch(epoch, &model, &record)?;
    }
    Ok((model, history))
}

/// Clean accuracy over a dataset, evaluated in chunks.
pub fn evaluate_accuracy(model: &Classifier, data: &Dataset) -> Result<f64> {
    let pred = crate::adversary::perturbed_predictions(model, data, crate::adversary::Applied::Clean)?;
    crate::net::pixel_accuracy(&pred, &data.labels)
}

/// Mean class-wise intersection-over-union of clean predictions; classes
/// absent from both prediction and ground truth are skipped.
pub fn mean_iou(model: &Classifier, data: &Dataset) -> Result<f64> {
    let pred = crate::adversary::perturbed_predictions(model, data, crate::adversary::Applied::Clean)?;
    let c = model.classes();
    let mut inter = vec![0usize; c];
    let mut union = vec![0usize; c];
    for (&p, &y) in pred.iter().zip(&data.labels) {
        if p == y {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[y] += 1;
        }
    }
    let ious: Vec<f64> = (0..c)
        .filter(|&k| union[k] > 0)
        .map(|k| inter[k] as f64 / union[k] as f64)
        .collect();
    if ious.is_empty() {
        return Err(Error::Empty("label maps"));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;
    use crate::net::{Architecture, ModelSpec};

    #[test]
    fn mixed_loss_examples() {
        assert_eq!(mixed_loss(&[1.0, 3.0], &[9.0, 9.0], 0.0).unwrap(), 2.0);
        assert_eq!(mixed_loss(&[1.0, 3.0], &[9.0, 5.0], 1.0).unwrap(), 7.0);
        assert_eq!(mixed_loss(&[1.0], &[3.0], 0.5).unwrap(), 2.0);
        assert!(mixed_loss(&[1.0], &[3.0], 1.5).is_err());
        assert!(mixed_loss(&[1.0], &[3.0], -0.1).is_err());
    }

    fn one_param(v: &[f32]) -> ModelParams {
        ModelParams {
            tensors: vec![("w".into(), Tensor::from_slice(&[v.len()], v).unwrap())],
        }
    }

    #[test]
    fn sgd_vanilla_and_fixed_point() {
        let mut p = one_param(&[1.0, 2.0]);
        let mut st = SgdState::new(&p);
        let g = [Tensor::from_slice(&[2], &[0.5, -1.0]).unwrap()];
        sgd_step(&mut p, &g, 0.1, 0.0, 0.0, &mut st).unwrap();
        assert_eq!(p.tensors[0].1.as_slice(), &[1.0 - 0.05, 2.0 + 0.1]);

        let mut q = one_param(&[1.0, 2.0]);
        let mut st = SgdState::new(&q);
        sgd_step(&mut q, &[Tensor::zeros(&[2])], 0.1, 0.9, 0.0, &mut st).unwrap();
        assert_eq!(q, one_param(&[1.0, 2.0]));
    }

    #[test]
    fn sgd_momentum_two_steps() {
        // v1 = g, v2 = 0.9 g + g: displacement -lr g (1 + 1.9).
        let mut p = one_param(&[0.0]);
        let mut st = SgdState::new(&p);
        let g = [Tensor::from_slice(&[1], &[2.0]).unwrap()];
        for _ in 0..2 {
            sgd_step(&mut p, &g, 0.1, 0.9, 0.0, &mut st).unwrap();
        }
        let want = -0.1 * 2.0 * (1.0 + 1.9);
        assert!((p.tensors[0].1.as_slice()[0] - want).abs() < 1e-6);
    }

    #[test]
    fn sgd_rejects_divergence() {
        let mut p = one_param(&[0.0]);
        let mut st = SgdState::new(&p);
        let g = [Tensor::from_slice(&[1], &[f32::MAX]).unwrap()];
        assert!(sgd_step(&mut p, &g, 10.0, 0.0, 0.0, &mut st).is_err());
    }

    #[test]
    fn learning_rate_milestones() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            milestones: vec![(5, 0.1), (8, 0.5)],
            ..TrainConfig::default()
        };
        assert_eq!(cfg.learning_rate_at(0), 1.0);
        assert_eq!(cfg.learning_rate_at(5), 0.1);
        assert!((cfg.learning_rate_at(9) - 0.05).abs() < 1e-7);
    }

    #[test]
    fn erm_separates_blobs() {
        let data = gen_blobs(&mut RngStream::new(0, 0), 200, 2, 2, 10.0).unwrap();
        let spec = ModelSpec::new(Architecture::SoftmaxLinear, vec![2], 2).unwrap();
        let model = Classifier::init(spec, &mut RngStream::new(1, 0)).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 20,
            learning_rate: 0.5,
            defense: Defense::Erm,
            ..TrainConfig::default()
        };
        let (model, hist) = train(model, &data, &cfg).unwrap();
        assert_eq!(hist.epochs.len(), 50);
        assert!(evaluate_accuracy(&model, &data).unwrap() >= 0.99);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = TrainConfig {
            defense: Defense::SharedAdvTrain { sharedness: 128 },
            batch_size: 64,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            sigma: 1.5,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
