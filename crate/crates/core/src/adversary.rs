//! Sign-gradient PGD adversaries over max-norm balls.
//!
//! Three adversaries share one update rule, differing only in how many inputs
//! a perturbation is shared across:
//!
//! * [`pgd_attack`]: one perturbation per example.
//! * [`shared_pgd_attack`]: the batch is cut into contiguous heaps of size
//!   `s`; each heap gets one perturbation driven by the mean loss gradient
//!   over its members, then broadcast back to them.
//! * [`universal_attack`]: one perturbation for a whole dataset, estimated by
//!   stochastic PGD over fresh samples of `m` points per iteration.
//!
//! The iterate is kept inside `[-eps, eps]^n`. The input-domain constraint is
//! enforced on the perturbed inputs, `clamp(x + xi, lo, hi)`, member by
//! member; returned per-example perturbations are the effective ones,
//! `clamp(x + xi, lo, hi) - x`.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::data::{Dataset, Domain};
use crate::error::{invalid, Error, Result};
use crate::net::{pixel_accuracy, smooth_labels, Classifier, LossConfig, Reduction};
use crate::rng::RngStream;
use crate::tensor::{clamp_scalar, sign_of, Tensor};

/// `[-eps, eps]^n` intersected with the input domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormBall {
    pub eps: f32,
    pub domain: Domain,
}

impl NormBall {
    pub fn new(eps: f32, domain: Domain) -> Result<Self> {
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(invalid("eps must be finite and non-negative"));
        }
        if !(domain.lo < domain.hi) {
            return Err(invalid("domain needs lo < hi"));
        }
        Ok(Self { eps, domain })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSchedule {
    /// Fixed step `alpha` in input units.
    Constant { alpha: f32 },
    /// Fixed step `factor * eps`; the training-time schedule.
    Proportional { factor: f32 },
    /// `alpha_k = beta * eps * gamma^k / sum_{j<K} gamma^j`, so the steps sum
    /// to `beta * eps`.
    GeometricAnnealed { beta: f64, gamma: f64, steps: usize },
}

impl StepSchedule {
    pub fn alpha(&self, eps: f32, k: usize) -> Result<f32> {
        match *self {
            StepSchedule::Constant { alpha } => Ok(alpha),
            StepSchedule::Proportional { factor } => Ok(factor * eps),
            StepSchedule::GeometricAnnealed { beta, gamma, steps } => {
                if steps == 0 {
                    return Err(invalid("geometric schedule needs K >= 1"));
                }
                if !(gamma > 0.0) {
                    return Err(invalid("gamma must be positive"));
                }
                if k >= steps {
                    return Err(invalid("step index beyond K"));
                }
                let norm = if gamma == 1.0 {
                    steps as f64
                } else {
                    (1.0 - libm::pow(gamma, steps as f64)) / (1.0 - gamma)
                };
                Ok((beta * eps as f64 * libm::pow(gamma, k as f64) / norm) as f32)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            StepSchedule::Constant { alpha } if !(alpha >= 0.0) || !alpha.is_finite() => {
                Err(invalid("alpha must be finite and non-negative"))
            }
            StepSchedule::Proportional { factor } if !(factor >= 0.0) || !factor.is_finite() => {
                Err(invalid("step factor must be finite and non-negative"))
            }
            StepSchedule::GeometricAnnealed { beta, gamma, steps } => {
                if steps == 0 || !(gamma > 0.0) || !(beta >= 0.0) || !beta.is_finite() || !gamma.is_finite() {
                    Err(invalid("geometric schedule needs K >= 1, gamma > 0, beta >= 0"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// Iteration count plus step schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackParams {
    pub steps: usize,
    pub schedule: StepSchedule,
}

impl AttackParams {
    pub fn geometric(beta: f64, gamma: f64, steps: usize) -> Self {
        Self {
            steps,
            schedule: StepSchedule::GeometricAnnealed { beta, gamma, steps },
        }
    }

    pub fn proportional(factor: f32, steps: usize) -> Self {
        Self {
            steps,
            schedule: StepSchedule::Proportional { factor },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if let StepSchedule::GeometricAnnealed { steps, .. } = self.schedule {
            if steps != self.steps {
                return Err(invalid("geometric schedule K differs from attack steps"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttackGoal {
    /// Increase the loss on the true labels.
    Untargeted,
    /// Decrease the loss towards one target: a single class for classifiers,
    /// a full label map for dense prediction.
    Targeted { target: Vec<usize> },
}

impl AttackGoal {
    fn check(&self, model: &Classifier) -> Result<()> {
        if let AttackGoal::Targeted { target } = self {
            if target.len() != model.spec.decisions_per_example() {
                return Err(Error::ShapeMismatch {
                    op: "target",
                    left: vec![model.spec.decisions_per_example()],
                    right: vec![target.len()],
                });
            }
            if target.iter().any(|&t| t >= model.classes()) {
                return Err(invalid("target class out of range"));
            }
        }
        Ok(())
    }
}

/// Assignment of batch elements to contiguous heaps of (at most) `s` members.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeapPlan {
    pub batch: usize,
    pub sharedness: usize,
    /// Heaps of sharedness `2s` are unions of exactly two heaps of sharedness
    /// `s`; requires `s` a power of two dividing the batch.
    pub hierarchical: bool,
}

impl HeapPlan {
    pub fn new(batch: usize, sharedness: usize, hierarchical: bool) -> Result<Self> {
        if batch == 0 || sharedness == 0 {
            return Err(invalid("batch size and sharedness must be positive"));
        }
        if sharedness > batch {
            return Err(invalid("sharedness exceeds the batch size"));
        }
        if hierarchical && (!sharedness.is_power_of_two() || batch % sharedness != 0) {
            return Err(invalid("hierarchical heaps need a power-of-two s dividing d"));
        }
        Ok(Self {
            batch,
            sharedness,
            hierarchical,
        })
    }

    /// `ceil(d / s)`; the last heap is smaller when `s` does not divide `d`.
    pub fn heap_count(&self) -> usize {
        self.batch.div_ceil(self.sharedness)
    }

    pub fn heap_of(&self, i: usize) -> usize {
        i / self.sharedness
    }

    pub fn heap(&self, h: usize) -> Range<usize> {
        let start = h * self.sharedness;
        start..(start + self.sharedness).min(self.batch)
    }

    pub fn heaps(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        (0..self.heap_count()).map(|h| self.heap(h))
    }

    /// Whether every heap of `coarser` is the union of exactly two heaps of
    /// `self`.
    pub fn refines(&self, coarser: &HeapPlan) -> bool {
        self.batch == coarser.batch
            && coarser.sharedness == 2 * self.sharedness
            && coarser.heaps().all(|r| {
                let parts: Vec<usize> = (0..self.heap_count())
                    .filter(|&h| {
                        let own = self.heap(h);
                        own.start >= r.start && own.end <= r.end
                    })
                    .collect();
                parts.len() == 2
                    && parts.iter().map(|&h| self.heap(h).len()).sum::<usize>() == r.len()
            })
    }
}

/// Output of the heap adversary.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedPerturbation {
    /// One perturbation per heap, `[heaps, ...example shape]`.
    pub heaps: Tensor,
    /// Each heap's perturbation repeated for all of its members.
    pub broadcast: Tensor,
    /// Effective per-member perturbation after the domain clamp.
    pub applied: Tensor,
    pub plan: HeapPlan,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniversalAttackConfig {
    pub attack: AttackParams,
    /// Points sampled per iteration.
    pub sample_size: usize,
}

/// Project `xi` onto the ball and then onto the domain around `x`:
/// returns `clamp(x + clamp(xi, -eps, eps), lo, hi) - x`. `xi` may also be a
/// single example-shaped perturbation shared by every row of `x`.
pub fn project(xi: &Tensor, x: &Tensor, ball: &NormBall) -> Result<Tensor> {
    let row = x.row_len();
    let shared = xi.len() == row && xi.shape() != x.shape();
    if !shared && xi.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "project",
            left: x.shape().to_vec(),
            right: xi.shape().to_vec(),
        });
    }
    xi.check_finite("project")?;
    let (lo, hi, eps) = (ball.domain.lo, ball.domain.hi, ball.eps);
    let data = x
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &xv)| {
            let p = if shared { xi.as_slice()[i % row] } else { xi.as_slice()[i] };
            effective_step(xv, clamp_scalar(p, -eps, eps), lo, hi)
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// `clamp(x + p, lo, hi) - x`, nudged by an ulp where rounding would leave
/// `x + result` outside `[lo, hi]` in exact arithmetic. Needs `x` in domain.
fn effective_step(x: f32, p: f32, lo: f32, hi: f32) -> f32 {
    let y = clamp_scalar(x + p, lo, hi);
    let mut r = y - x;
    // Rounding may overshoot the requested step; never exceed it.
    if r.abs() > p.abs() {
        r = p;
    }
    // Exact sums of two f32 values fit in f64.
    while (x as f64 + r as f64) > hi as f64 {
        r = r.next_down();
    }
    while (x as f64 + r as f64) < lo as f64 {
        r = r.next_up();
    }
    r
}

/// `clamp(x + xi, lo, hi)`, with `xi` either per-row or shared by all rows.
pub fn perturbed_inputs(x: &Tensor, xi: &Tensor, domain: Domain) -> Result<Tensor> {
    let row = x.row_len();
    let shared = xi.len() == row && xi.shape() != x.shape();
    if !shared && xi.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "perturb",
            left: x.shape().to_vec(),
            right: xi.shape().to_vec(),
        });
    }
    let data = x
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &xv)| {
            let p = if shared { xi.as_slice()[i % row] } else { xi.as_slice()[i] };
            clamp_scalar(xv + p, domain.lo, domain.hi)
        })
        .collect();
    let out = Tensor::new(x.shape().to_vec(), data)?;
    out.check_finite("perturb")?;
    Ok(out)
}

/// Loss targets, threshold and ascent direction for an attack goal.
pub(crate) struct AttackObjective {
    targets: Tensor,
    kappa: Option<f32>,
    direction: f32,
}

impl AttackObjective {
    pub(crate) fn new(
        model: &Classifier,
        labels: &[usize],
        goal: &AttackGoal,
        loss: &LossConfig,
    ) -> Result<Self> {
        loss.validate()?;
        goal.check(model)?;
        let smoothing = loss.smoothing as f64;
        match goal {
            AttackGoal::Untargeted => Ok(Self {
                targets: smooth_labels(labels, model.classes(), smoothing)?,
                kappa: loss.kappa,
                direction: 1.0,
            }),
            AttackGoal::Targeted { target } => {
                let p = target.len();
                if labels.len() % p != 0 {
                    return Err(invalid("label count is not a multiple of the target size"));
                }
                let repeated: Vec<usize> = target.iter().cycle().take(labels.len()).copied().collect();
                // Targeted attacks run without loss thresholding.
                Ok(Self {
                    targets: smooth_labels(&repeated, model.classes(), smoothing)?,
                    kappa: None,
                    direction: -1.0,
                })
            }
        }
    }

    /// Rows `idx` of the target matrix, grouped per example.
    fn rows(&self, idx: &[usize], decisions: usize) -> Result<Tensor> {
        let c = self.targets.shape()[1];
        let mut data = Vec::with_capacity(idx.len() * decisions * c);
        for &i in idx {
            data.extend_from_slice(&self.targets.as_slice()[i * decisions * c..(i + 1) * decisions * c]);
        }
        Tensor::new(vec![idx.len() * decisions, c], data)
    }

    /// Per-example input gradients of the (thresholded) loss at `xa`.
    fn gradients(&self, model: &Classifier, xa: &Tensor, targets: &Tensor) -> Result<Tensor> {
        let g = model.gradients(xa, targets, self.kappa, Reduction::PerExample, false)?;
        Ok(g.input)
    }
}

fn check_batch(model: &Classifier, x: &Tensor, labels: &[usize]) -> Result<usize> {
    let n = model.batch_len(x)?;
    if n == 0 {
        return Err(Error::Empty("attack batch"));
    }
    if labels.len() != n * model.spec.decisions_per_example() {
        return Err(Error::ShapeMismatch {
            op: "attack labels",
            left: vec![n * model.spec.decisions_per_example()],
            right: vec![labels.len()],
        });
    }
    Ok(n)
}

/// Per-example PGD from a uniform random start in `[-eps, eps]^n`.
#[allow(clippy::too_many_arguments)]
pub fn pgd_attack(
    model: &Classifier,
    x: &Tensor,
    labels: &[usize],
    ball: &NormBall,
    attack: &AttackParams,
    goal: &AttackGoal,
    loss: &LossConfig,
    rng: &mut RngStream,
) -> Result<Tensor> {
    let init = Tensor::uniform(rng, x.shape(), -ball.eps, ball.eps)?;
    pgd_attack_from(model, x, labels, ball, attack, goal, loss, init)
}

/// Per-example PGD from an explicit starting perturbation.
#[allow(clippy::too_many_arguments)]
pub fn pgd_attack_from(
    model: &Classifier,
    x: &Tensor,
    labels: &[usize],
    ball: &NormBall,
    attack: &AttackParams,
    goal: &AttackGoal,
    loss: &LossConfig,
    init: Tensor,
) -> Result<Tensor> {
    let n = check_batch(model, x, labels)?;
    attack.validate()?;
    let objective = AttackObjective::new(model, labels, goal, loss)?;
    let eps = ball.eps;
    let mut xi = init.clamp(-eps, eps)?;
    if xi.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "pgd init",
            left: x.shape().to_vec(),
            right: xi.shape().to_vec(),
        });
    }
    let all: Vec<usize> = (0..n).collect();
    let targets = objective.rows(&all, model.spec.decisions_per_example())?;
    for k in 0..attack.steps {
        let alpha = objective.direction * attack.schedule.alpha(eps, k)?;
        let xa = perturbed_inputs(x, &xi, ball.domain)?;
        let grad = objective.gradients(model, &xa, &targets)?;
        for (v, &g) in xi.as_mut_slice().iter_mut().zip(grad.as_slice()) {
            *v = clamp_scalar(*v + alpha * sign_of(g), -eps, eps);
        }
    }
    project(&xi, x, ball)
}

/// Sign of the elementwise mean of `rows`, written into `out`. Rows are
/// summed in iteration order so the result does not depend on scheduling.
pub(crate) fn mean_sign<'a>(rows: impl Iterator<Item = &'a [f32]>, out: &mut [f32]) {
    out.iter_mut().for_each(|m| *m = 0.0);
    let mut count = 0usize;
    for r in rows {
        for (m, &g) in out.iter_mut().zip(r) {
            *m += g;
        }
        count += 1;
    }
    let inv = 1.0 / count.max(1) as f32;
    for m in out.iter_mut() {
        *m = sign_of(*m * inv);
    }
}

/// Heap adversary: one perturbation per heap of `plan`, each driven by the
/// sign of the mean gradient over the heap's members.
#[allow(clippy::too_many_arguments)]
pub fn shared_pgd_attack(
    model: &Classifier,
    x: &Tensor,
    labels: &[usize],
    ball: &NormBall,
    attack: &AttackParams,
    goal: &AttackGoal,
    loss: &LossConfig,
    plan: &HeapPlan,
    rng: &mut RngStream,
) -> Result<SharedPerturbation> {
    let n = check_batch(model, x, labels)?;
    if plan.batch != n {
        return Err(invalid("heap plan batch size differs from the batch"));
    }
    attack.validate()?;
    let objective = AttackObjective::new(model, labels, goal, loss)?;
    let eps = ball.eps;
    let row = x.row_len();
    let mut heap_shape = x.shape().to_vec();
    heap_shape[0] = plan.heap_count();
    let mut xi = Tensor::uniform(rng, &heap_shape, -eps, eps)?;

    let all: Vec<usize> = (0..n).collect();
    let targets = objective.rows(&all, model.spec.decisions_per_example())?;
    let mut dir = vec![0f32; row];
    for k in 0..attack.steps {
        let alpha = objective.direction * attack.schedule.alpha(eps, k)?;
        let broadcast = broadcast_heaps(&xi, plan, x.shape())?;
        let xa = perturbed_inputs(x, &broadcast, ball.domain)?;
        let grad = objective.gradients(model, &xa, &targets)?;
        for h in 0..plan.heap_count() {
            mean_sign(plan.heap(h).map(|i| grad.row(i)), &mut dir);
            let slice = &mut xi.as_mut_slice()[h * row..(h + 1) * row];
            for (v, &s) in slice.iter_mut().zip(&dir) {
                *v = clamp_scalar(*v + alpha * s, -eps, eps);
            }
        }
    }
    let broadcast = broadcast_heaps(&xi, plan, x.shape())?;
    let applied = project(&broadcast, x, ball)?;
    Ok(SharedPerturbation {
        heaps: xi,
        broadcast,
        applied,
        plan: *plan,
    })
}

/// Repeat each heap's perturbation for all members of the heap.
pub fn broadcast_heaps(heaps: &Tensor, plan: &HeapPlan, batch_shape: &[usize]) -> Result<Tensor> {
    if heaps.outer() != plan.heap_count() || heaps.shape()[1..] != batch_shape[1..] {
        return Err(Error::ShapeMismatch {
            op: "broadcast",
            left: batch_shape.to_vec(),
            right: heaps.shape().to_vec(),
        });
    }
    let row = heaps.row_len();
    let mut data = Vec::with_capacity(plan.batch * row);
    for i in 0..plan.batch {
        data.extend_from_slice(heaps.row(plan.heap_of(i)));
    }
    Tensor::new(batch_shape.to_vec(), data)
}

/// Cycles through a dataset in shuffled order, reshuffling once exhausted.
struct CyclicSampler {
    rng: RngStream,
    order: Vec<usize>,
    pos: usize,
}

impl CyclicSampler {
    fn new(n: usize, rng: RngStream) -> Self {
        let mut s = Self {
            rng,
            order: (0..n).collect(),
            pos: n,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.rng.shuffle(&mut self.order);
        self.pos = 0;
    }

    fn take(&mut self, m: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(m);
        while out.len() < m {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

const SAMPLER_STREAM: u64 = 0x5a3d_1e;

/// Stochastic PGD for a single perturbation shared by every point of `data`.
/// Each iteration draws `sample_size` points without replacement (cycling
/// through shuffled epochs) and steps along the sign of their mean gradient.
/// The result lies in `[-eps, eps]^n`; the domain clamp happens per input.
pub fn universal_attack(
    model: &Classifier,
    data: &Dataset,
    cfg: &UniversalAttackConfig,
    ball: &NormBall,
    goal: &AttackGoal,
    loss: &LossConfig,
    rng: &mut RngStream,
) -> Result<Tensor> {
    if data.is_empty() {
        return Err(Error::Empty("universal attack data"));
    }
    if cfg.sample_size == 0 {
        return Err(invalid("sample size must be at least 1"));
    }
    model.batch_len(&data.inputs)?;
    cfg.attack.validate()?;
    let objective = AttackObjective::new(model, &data.labels, goal, loss)?;
    let eps = ball.eps;
    let decisions = model.spec.decisions_per_example();
    let mut xi = Tensor::uniform(rng, data.example_shape(), -eps, eps)?;
    let mut sampler = CyclicSampler::new(data.len(), rng.fork(SAMPLER_STREAM));
    let mut dir = vec![0f32; xi.len()];
    for k in 0..cfg.attack.steps {
        let alpha = objective.direction * cfg.attack.schedule.alpha(eps, k)?;
        let idx = sampler.take(cfg.sample_size);
        let x = data.inputs.gather_rows(&idx);
        let targets = objective.rows(&idx, decisions)?;
        let xa = perturbed_inputs(&x, &xi, ball.domain)?;
        let grad = objective.gradients(model, &xa, &targets)?;
        mean_sign((0..idx.len()).map(|i| grad.row(i)), &mut dir);
        for (v, &s) in xi.as_mut_slice().iter_mut().zip(&dir) {
            *v = clamp_scalar(*v + alpha * s, -eps, eps);
        }
    }
    Ok(xi)
}

/// A perturbation to evaluate: none, one shared by all inputs, or one per input.
#[derive(Debug, Clone, Copy)]
pub enum Applied<'a> {
    Clean,
    Universal(&'a Tensor),
    PerExample(&'a Tensor),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoolingReport {
    /// Untargeted: fraction of decisions misclassified. Targeted
    /// classification: fraction predicted as the target. Targeted dense
    /// prediction: fraction of images whose pixel accuracy against the
    /// target map exceeds `delta`.
    pub rate: f64,
    /// Mean over images of the pixel accuracy against the target map
    /// (targeted dense prediction only).
    pub mean_pixel_accuracy: Option<f64>,
    pub examples: usize,
}

const EVAL_CHUNK: usize = 256;

/// Predicted labels on `clamp(x + xi)` for every example, in chunks.
pub fn perturbed_predictions(model: &Classifier, data: &Dataset, applied: Applied<'_>) -> Result<Vec<usize>> {
    let n = data.len();
    let mut out = Vec::with_capacity(n * model.spec.decisions_per_example());
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let x = data.inputs.gather_rows(&idx);
        let xa = match applied {
            Applied::Clean => x,
            Applied::Universal(xi) => {
                if xi.len() != x.row_len() {
                    return Err(Error::ShapeMismatch {
                        op: "fooling_rate",
                        left: data.example_shape().to_vec(),
                        right: xi.shape().to_vec(),
                    });
                }
                perturbed_inputs(&x, xi, data.domain)?
            }
            Applied::PerExample(all) => {
                if all.shape() != data.inputs.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "fooling_rate",
                        left: data.inputs.shape().to_vec(),
                        right: all.shape().to_vec(),
                    });
                }
                perturbed_inputs(&x, &all.gather_rows(&idx), data.domain)?
            }
        };
        out.extend(model.predict(&xa)?);
        start = end;
    }
    Ok(out)
}

/// Success rate of a perturbation on `data` under `goal`. `delta` is the
/// per-image pixel-accuracy bar for targeted dense prediction.
pub fn fooling_rate(
    model: &Classifier,
    data: &Dataset,
    applied: Applied<'_>,
    goal: &AttackGoal,
    delta: Option<f64>,
) -> Result<FoolingReport> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation data"));
    }
    goal.check(model)?;
    let pred = perturbed_predictions(model, data, applied)?;
    let n = data.len();
    let p = model.spec.decisions_per_example();
    match goal {
        AttackGoal::Untargeted => {
            let wrong = pred.iter().zip(&data.labels).filter(|(a, b)| a != b).count();
            Ok(FoolingReport {
                rate: wrong as f64 / pred.len() as f64,
                mean_pixel_accuracy: None,
                examples: n,
            })
        }
        AttackGoal::Targeted { target } if p == 1 => {
            let hit = pred.iter().filter(|&&y| y == target[0]).count();
            Ok(FoolingReport {
                rate: hit as f64 / n as f64,
                mean_pixel_accuracy: None,
                examples: n,
            })
        }
        AttackGoal::Targeted { target } => {
            let delta = delta.ok_or_else(|| invalid("targeted dense fooling rate needs delta"))?;
            let mut above = 0;
            let mut total = 0.0;
            for img in pred.chunks(p) {
                let acc = pixel_accuracy(img, target)?;
                total += acc;
                if acc > delta {
                    above += 1;
                }
            }
            Ok(FoolingReport {
                rate: above as f64 / n as f64,
                mean_pixel_accuracy: Some(total / n as f64),
                examples: n,
            })
        }
    }
}

/// Mean per-decision adversarial loss `min(CE, kappa)` on `clamp(x + xi)`.
pub fn mean_adversarial_loss(
    model: &Classifier,
    x: &Tensor,
    labels: &[usize],
    xi: &Tensor,
    domain: Domain,
    loss: &LossConfig,
) -> Result<f64> {
    loss.validate()?;
    let xa = perturbed_inputs(x, xi, domain)?;
    let targets = smooth_labels(labels, model.classes(), loss.smoothing as f64)?;
    let l = model.losses(&xa, &targets, loss.kappa)?;
    Ok(l.iter().map(|&v| v as f64).sum::<f64>() / l.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Architecture, ModelParams, ModelSpec};

    #[test]
    fn project_examples() {
        let wide = NormBall::new(4.0, Domain::BYTE).unwrap();
        let x = Tensor::from_slice(&[2], &[100.0, 100.0]).unwrap();
        let xi = Tensor::from_slice(&[2], &[10.0, -10.0]).unwrap();
        assert_eq!(project(&xi, &x, &wide).unwrap().as_slice(), &[4.0, -4.0]);

        let inside = Tensor::from_slice(&[2], &[1.5, -0.25]).unwrap();
        assert_eq!(project(&inside, &x, &wide).unwrap(), inside);

        let ball = NormBall::new(8.0, Domain::BYTE).unwrap();
        let x = Tensor::from_slice(&[1], &[254.0]).unwrap();
        let xi = Tensor::from_slice(&[1], &[4.0]).unwrap();
        assert_eq!(project(&xi, &x, &ball).unwrap().as_slice(), &[1.0]);

        assert!(project(&Tensor::zeros(&[3]), &Tensor::zeros(&[2]), &ball).is_err());
    }

    #[test]
    fn effective_step_keeps_exact_containment() {
        let mut rng = RngStream::new(3, 0);
        for _ in 0..10_000 {
            let x = rng.next_unit() as f32 * 255.0;
            let p = (rng.next_unit() as f32 * 2.0 - 1.0) * 40.0;
            let r = effective_step(x, p, 0.0, 255.0);
            let s = x as f64 + r as f64;
            assert!((0.0..=255.0).contains(&s));
            assert!(r.abs() <= p.abs());
        }
    }

    #[test]
    fn geometric_schedule_examples() {
        let s = StepSchedule::GeometricAnnealed {
            beta: 4.0,
            gamma: 1.0,
            steps: 4,
        };
        for k in 0..4 {
            assert_eq!(s.alpha(10.0, k).unwrap(), 10.0);
        }
        let s = StepSchedule::GeometricAnnealed {
            beta: 4.0,
            gamma: 0.975,
            steps: 200,
        };
        // Denominator by direct summation.
        let denom: f64 = (0..200).map(|j| 0.975f64.powi(j)).sum();
        let want = 40.0 / denom;
        assert!((s.alpha(10.0, 0).unwrap() as f64 - want).abs() < 1e-6 * want);
        let closed = 40.0 * (1.0 - 0.975) / (1.0 - 0.975f64.powi(200));
        assert!((want - closed).abs() < 1e-9);
        assert!(s.alpha(10.0, 200).is_err());
        let zero = StepSchedule::GeometricAnnealed {
            beta: 4.0,
            gamma: 0.9,
            steps: 0,
        };
        assert!(zero.alpha(1.0, 0).is_err());
    }

    #[test]
    fn heap_plan_layout() {
        let p = HeapPlan::new(10, 4, false).unwrap();
        assert_eq!(p.heap_count(), 3);
        assert_eq!(p.heap(2), 8..10);
        assert_eq!(p.heap_of(9), 2);
        assert!(HeapPlan::new(10, 4, true).is_err());
        assert!(HeapPlan::new(4, 8, false).is_err());
        let fine = HeapPlan::new(8, 2, true).unwrap();
        let coarse = HeapPlan::new(8, 4, true).unwrap();
        assert!(fine.refines(&coarse));
        assert!(!coarse.refines(&fine));
    }

    /// Two-class linear model `logit_1 - logit_0 = w . x`.
    fn linear_model(w: [f32; 2]) -> Classifier {
        let spec = ModelSpec::new(Architecture::SoftmaxLinear, vec![2], 2).unwrap();
        let mut params = ModelParams::zeros(&spec).unwrap();
        params
            .set(
                "layer0.weight",
                Tensor::from_slice(&[2, 2], &[0.0, w[0], 0.0, w[1]]).unwrap(),
            )
            .unwrap();
        Classifier::new(spec, params).unwrap()
    }

    #[test]
    fn heap_step_is_sign_of_mean() {
        // The linear model's input gradient for label 0 is p1 * w and for
        // label 1 is -(1 - p1) * w; choose inputs and labels so the two
        // members pull the second coordinate in opposite directions equally.
        let model = linear_model([0.0, 0.0]);
        let x = Tensor::from_slice(&[2, 2], &[0.5, 0.5, 0.5, 0.5]).unwrap();
        // Zero weights: gradients are exactly zero, so heap xi keeps its init.
        let ball = NormBall::new(0.1, Domain::UNIT).unwrap();
        let attack = AttackParams::proportional(1.0, 1);
        let plan = HeapPlan::new(2, 2, false).unwrap();
        let out = shared_pgd_attack(
            &model,
            &x,
            &[0, 1],
            &ball,
            &attack,
            &AttackGoal::Untargeted,
            &LossConfig::plain(),
            &plan,
            &mut RngStream::new(1, 0),
        )
        .unwrap();
        let init = Tensor::<f32>::uniform(&mut RngStream::new(1, 0), &[1, 2], -0.1, 0.1).unwrap();
        assert_eq!(out.heaps, init);
        assert_eq!(out.broadcast.row(0), out.broadcast.row(1));

        // Mean-then-sign: g1 = [1, -1], g2 = [1, 1] average to [1, 0].
        let g1 = [1.0f32, -1.0];
        let g2 = [1.0f32, 1.0];
        let mut dir = [9.0f32; 2];
        mean_sign([&g1[..], &g2[..]].into_iter(), &mut dir);
        assert_eq!(dir, [1.0, 0.0]);
        // Sign of the mean, not mean of the signs.
        let g3 = [-5.0f32, 0.0];
        mean_sign([&g1[..], &g2[..], &g3[..]].into_iter(), &mut dir);
        assert_eq!(dir, [-1.0, 0.0]);
    }

    #[test]
    fn one_step_linear_attack_moves_by_eps_sign() {
        // For label 0, d CE / dx = p1 * w: moving along sign(w) raises the loss.
        let w = [0.8f32, -1.3];
        let model = linear_model(w);
        let x = Tensor::from_slice(&[3, 2], &[0.4, 0.5, 0.6, 0.2, 0.3, 0.7]).unwrap();
        let labels = [0, 1, 0];
        let eps = 0.05;
        let ball = NormBall::new(eps, Domain::UNIT).unwrap();
        let attack = AttackParams {
            steps: 1,
            schedule: StepSchedule::Constant { alpha: eps },
        };
        let xi = pgd_attack_from(
            &model,
            &x,
            &labels,
            &ball,
            &attack,
            &AttackGoal::Untargeted,
            &LossConfig::plain(),
            Tensor::zeros(&[3, 2]),
        )
        .unwrap();
        for (i, &y) in labels.iter().enumerate() {
            let dir = if y == 0 { 1.0 } else { -1.0 };
            for j in 0..2 {
                let want = eps * dir * w[j].signum();
                // Off by at most the rounding of x + xi.
                assert!((xi.row(i)[j] - want).abs() <= 1e-7, "{} vs {want}", xi.row(i)[j]);
                assert_eq!(x.row(i)[j] + xi.row(i)[j], x.row(i)[j] + want);
            }
        }
    }

    #[test]
    fn zero_eps_gives_zero_perturbation() {
        let model = linear_model([1.0, -1.0]);
        let x = Tensor::from_slice(&[2, 2], &[0.4, 0.5, 0.6, 0.2]).unwrap();
        let ball = NormBall::new(0.0, Domain::UNIT).unwrap();
        let xi = pgd_attack(
            &model,
            &x,
            &[0, 1],
            &ball,
            &AttackParams::geometric(4.0, 0.975, 10),
            &AttackGoal::Untargeted,
            &LossConfig::attack(),
            &mut RngStream::new(0, 0),
        )
        .unwrap();
        assert!(xi.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cyclic_sampler_covers_everything_each_cycle() {
        let mut s = CyclicSampler::new(7, RngStream::new(0, 0));
        let mut first: Vec<usize> = s.take(7);
        first.sort_unstable();
        assert_eq!(first, (0..7).collect::<Vec<_>>());
        assert_eq!(s.take(10).len(), 10);
    }

    #[test]
    fn targeted_constant_model_always_hits() {
        let spec = ModelSpec::new(Architecture::SoftmaxLinear, vec![2], 2).unwrap();
        let mut params = ModelParams::zeros(&spec).unwrap();
        params.set("layer0.bias", Tensor::from_slice(&[2], &[1.0, 0.0]).unwrap()).unwrap();
        let model = Classifier::new(spec, params).unwrap();
        let data = Dataset::new(
            Tensor::from_slice(&[3, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap(),
            vec![0, 1, 1],
            vec![],
            2,
            Domain::UNIT,
            crate::data::Split::Test,
        )
        .unwrap();
        let goal = AttackGoal::Targeted { target: vec![0] };
        let r = fooling_rate(&model, &data, Applied::Clean, &goal, None).unwrap();
        assert_eq!(r.rate, 1.0);
        let r = fooling_rate(&model, &data, Applied::Clean, &AttackGoal::Untargeted, None).unwrap();
        assert!((r.rate - 2.0 / 3.0).abs() < 1e-12);
    }
}
