//! Empirical risk estimates and bisection search for the smallest budget at
//! which an attack exceeds a target fooling rate.
//!
//! Every value produced here is an upper bound on the true robustness: a
//! stronger attack could only find smaller budgets.

use alloc::vec;
use alloc::vec::Vec;

use crate::adversary::{
    fooling_rate, mean_adversarial_loss, pgd_attack, pgd_attack_from, perturbed_predictions,
    shared_pgd_attack, universal_attack, Applied, AttackGoal, AttackParams, HeapPlan, NormBall,
    UniversalAttackConfig,
};
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::net::{Classifier, LossConfig};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMode {
    Universal,
    PerExample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessQuery {
    /// Required fooling rate, in `(0, 1]`; success is strictly `> delta`.
    pub delta: f64,
    /// Bisection iterations `b`.
    pub iterations: usize,
    pub eps_lo: f32,
    pub eps_hi: f32,
    /// Attack run at every midpoint; normally geometric-annealed.
    pub attack: AttackParams,
    /// Points per stochastic step of the universal attack.
    pub sample_size: usize,
    pub loss: LossConfig,
    pub goal: AttackGoal,
    pub mode: SearchMode,
}

impl RobustnessQuery {
    /// Classification defaults: `b = 10`, `K = 200`, `gamma = 0.975`,
    /// `beta = 4`, 16 points per step, search over the full domain width.
    pub fn classification(delta: f64, eps_hi: f32) -> Self {
        Self {
            delta,
            iterations: 10,
            eps_lo: 0.0,
            eps_hi,
            attack: AttackParams::geometric(4.0, 0.975, 200),
            sample_size: 16,
            loss: LossConfig::attack(),
            goal: AttackGoal::Untargeted,
            mode: SearchMode::Universal,
        }
    }

    /// Dense-prediction defaults for a targeted universal attack:
    /// `gamma = 0.99`, `beta = 2`, 5 images per step, `delta = 0.95`.
    pub fn dense_targeted(target: Vec<usize>, eps_hi: f32) -> Self {
        Self {
            delta: 0.95,
            iterations: 10,
            eps_lo: 0.0,
            eps_hi,
            attack: AttackParams::geometric(2.0, 0.99, 200),
            sample_size: 5,
            loss: LossConfig::plain(),
            goal: AttackGoal::Targeted { target },
            mode: SearchMode::Universal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(invalid("delta must lie in (0, 1]"));
        }
        if self.iterations == 0 {
            return Err(invalid("at least one bisection iteration is required"));
        }
        if !(self.eps_lo < self.eps_hi) || !(self.eps_lo >= 0.0) || !self.eps_hi.is_finite() {
            return Err(invalid("search interval needs 0 <= lo < hi"));
        }
        if self.sample_size == 0 {
            return Err(invalid("sample size must be at least 1"));
        }
        self.attack.validate()?;
        self.loss.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub eps: f32,
    pub rate: f64,
    pub success: bool,
    /// Stream id of the attack's random stream.
    pub stream: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bisection<A> {
    /// Smallest successful budget with its artifact, if any iteration succeeded.
    pub best: Option<(f32, A)>,
    pub trace: Vec<TraceEntry>,
    /// `(hi - lo) / 2^b`.
    pub resolution: f32,
}

/// Bisection on `[lo, hi]`: evaluate the midpoint, continue in the lower half
/// on success (`rate > delta`) and in the upper half otherwise. Returns the
/// smallest budget among *all* successful iterations, which need not be the
/// final midpoint when success is not monotone in the budget.
pub fn bisect<A>(
    lo: f32,
    hi: f32,
    iterations: usize,
    delta: f64,
    mut oracle: impl FnMut(usize, f32) -> Result<(f64, u64, A)>,
) -> Result<Bisection<A>> {
    if !(lo < hi) {
        return Err(invalid("bisection needs lo < hi"));
    }
    let (mut a, mut b) = (lo, hi);
    let mut best: Option<(f32, A)> = None;
    let mut trace = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let mid = a + (b - a) / 2.0;
        let (rate, stream, artifact) = oracle(it, mid)?;
        let success = rate > delta;
        trace.push(TraceEntry {
            iteration: it,
            eps: mid,
            rate,
            success,
            stream,
        });
        if success {
            if best.as_ref().is_none_or(|(e, _)| mid < *e) {
                best = Some((mid, artifact));
            }
            b = mid;
        } else {
            a = mid;
        }
    }
    Ok(Bisection {
        best,
        trace,
        resolution: (hi - lo) / libm::powf(2.0, iterations as f32),
    })
}

/// Result of a robustness search.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    /// `None` when no iteration reached the required rate.
    pub eps_hat: Option<f32>,
    /// The universal perturbation, or the per-example set, found at `eps_hat`.
    pub perturbation: Option<Tensor>,
    pub trace: Vec<TraceEntry>,
    pub resolution: f32,
}

impl SearchOutcome {
    pub fn found(&self) -> bool {
        self.eps_hat.is_some()
    }
}

/// Estimate `eps(delta)` for `model`. The universal mode crafts one
/// perturbation on `attack_data` and scores it on `eval_data`; the
/// per-example mode attacks `eval_data` directly. For targeted dense
/// prediction the success measure is the mean pixel accuracy against the
/// target map. Each iteration attacks with its own forked stream.
pub fn search_robustness(
    model: &Classifier,
    query: &RobustnessQuery,
    attack_data: &Dataset,
    eval_data: &Dataset,
    rng: &RngStream,
) -> Result<SearchOutcome> {
    query.validate()?;
    if attack_data.is_empty() || eval_data.is_empty() {
        return Err(Error::Empty("robustness data"));
    }
    let dense_targeted = model.spec.is_dense() && matches!(query.goal, AttackGoal::Targeted { .. });
    let domain = eval_data.domain;
    let result = bisect(
        query.eps_lo,
        query.eps_hi,
        query.iterations,
        query.delta,
        |it, eps| {
            let mut stream = rng.fork(it as u64);
            let id = stream.stream_id();
            let ball = NormBall::new(eps, domain)?;
            let (applied_tensor, universal) = match query.mode {
                SearchMode::Universal => {
                    let cfg = UniversalAttackConfig {
                        attack: query.attack,
                        sample_size: query.sample_size,
                    };
                    let xi = universal_attack(model, attack_data, &cfg, &ball, &query.goal, &query.loss, &mut stream)?;
                    (xi, true)
                }
                SearchMode::PerExample => {
                    let xi = pgd_attack(
                        model,
                        &eval_data.inputs,
                        &eval_data.labels,
                        &ball,
                        &query.attack,
                        &query.goal,
                        &query.loss,
                        &mut stream,
                    )?;
                    (xi, false)
                }
            };
            let applied = if universal {
                Applied::Universal(&applied_tensor)
            } else {
                Applied::PerExample(&applied_tensor)
            };
            let report = fooling_rate(model, eval_data, applied, &query.goal, Some(query.delta))?;
            let rate = if dense_targeted {
                report.mean_pixel_accuracy.unwrap_or(0.0)
            } else {
                report.rate
            };
            Ok((rate, id, applied_tensor))
        },
    )?;
    let (eps_hat, perturbation) = match result.best {
        Some((e, xi)) => (Some(e), Some(xi)),
        None => (None, None),
    };
    Ok(SearchOutcome {
        eps_hat,
        perturbation,
        trace: result.trace,
        resolution: result.resolution,
    })
}

/// How the adversarial and universal risks are approximated.
#[derive(Debug, Clone, PartialEq)]
pub enum RiskAttack {
    /// PGD from a random and from a zero start, plus stochastic PGD for the
    /// universal perturbation.
    Pgd {
        attack: AttackParams,
        sample_size: usize,
        loss: LossConfig,
    },
    /// Exhaustive search over `{-eps, 0, eps}^n`; only for tiny inputs.
    SignGrid,
}

/// Empirical 0-1 risks on one evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskEstimate {
    pub expected: f64,
    pub universal: f64,
    pub adversarial: f64,
    pub samples: usize,
    /// The perturbation achieving `universal`.
    pub universal_perturbation: Tensor,
    /// Whether `expected <= universal <= adversarial` held on this run.
    pub ordered: bool,
}

const MAX_GRID_DIM: usize = 12;

fn grid_candidates(dim: usize, eps: f32) -> Result<Vec<Tensor>> {
    if dim > MAX_GRID_DIM {
        return Err(invalid("sign grid is limited to 12 input dimensions"));
    }
    let levels = [-eps, 0.0, eps];
    let total = 3usize.pow(dim as u32);
    (0..total)
        .map(|mut code| {
            let mut v = vec![0f32; dim];
            for slot in v.iter_mut() {
                *slot = levels[code % 3];
                code /= 3;
            }
            Tensor::new(vec![dim], v)
        })
        .collect()
}

fn misclassified(model: &Classifier, data: &Dataset, applied: Applied<'_>) -> Result<Vec<bool>> {
    let pred = perturbed_predictions(model, data, applied)?;
    Ok(pred.iter().zip(&data.labels).map(|(a, b)| a != b).collect())
}

fn rate(flags: &[bool]) -> f64 {
    flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64
}

/// Clean, universal and adversarial 0-1 error on `data` under `ball`.
/// Untargeted classification only.
pub fn estimate_risks(
    model: &Classifier,
    data: &Dataset,
    ball: &NormBall,
    template: &RiskAttack,
    rng: &RngStream,
) -> Result<RiskEstimate> {
    if data.is_empty() {
        return Err(Error::Empty("risk data"));
    }
    if data.is_dense() {
        return Err(invalid("risk estimates are defined for classification data"));
    }
    let clean = misclassified(model, data, Applied::Clean)?;
    let expected = rate(&clean);
    let zero = Tensor::zeros(data.example_shape());

    let (mut adv_flags, mut best_rate, mut best_xi) = (clean.clone(), expected, zero);
    match template {
        RiskAttack::SignGrid => {
            for cand in grid_candidates(data.inputs.row_len(), ball.eps)? {
                let cand = cand.reshape(data.example_shape())?;
                let flags = misclassified(model, data, Applied::Universal(&cand))?;
                for (a, f) in adv_flags.iter_mut().zip(&flags) {
                    *a |= *f;
                }
                let r = rate(&flags);
                if r > best_rate {
                    best_rate = r;
                    best_xi = cand;
                }
            }
        }
        RiskAttack::Pgd {
            attack,
            sample_size,
            loss,
        } => {
            let goal = AttackGoal::Untargeted;
            let random = pgd_attack(
                model,
                &data.inputs,
                &data.labels,
                ball,
                attack,
                &goal,
                loss,
                &mut rng.fork(1),
            )?;
            let from_zero = pgd_attack_from(
                model,
                &data.inputs,
                &data.labels,
                ball,
                attack,
                &goal,
                loss,
                Tensor::zeros(data.inputs.shape()),
            )?;
            for xi in [&random, &from_zero] {
                let flags = misclassified(model, data, Applied::PerExample(xi))?;
                for (a, f) in adv_flags.iter_mut().zip(&flags) {
                    *a |= *f;
                }
            }
            let cfg = UniversalAttackConfig {
                attack: *attack,
                sample_size: *sample_size,
            };
            let xi = universal_attack(model, data, &cfg, ball, &goal, loss, &mut rng.fork(2))?;
            let r = rate(&misclassified(model, data, Applied::Universal(&xi))?);
            if r > best_rate {
                best_rate = r;
                best_xi = xi;
            }
        }
    }
    let adversarial = rate(&adv_flags);
    Ok(RiskEstimate {
        expected,
        universal: best_rate,
        adversarial,
        samples: data.len(),
        universal_perturbation: best_xi,
        ordered: expected <= best_rate && best_rate <= adversarial,
    })
}

/// One row of the sharedness chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainEntry {
    /// `None` for the universal estimate on the same batch.
    pub sharedness: Option<usize>,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskChain {
    /// Sharedness 1, 2, 4, ..., d, then the universal row.
    pub entries: Vec<ChainEntry>,
    /// Indices `i` where `entries[i + 1]` exceeds `entries[i]` by more than
    /// the tolerance, over the heap rows.
    pub violations: Vec<usize>,
    pub tolerance: f64,
}

impl RiskChain {
    pub fn is_monotone(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Mean thresholded adversarial loss of the heap adversary for every
/// sharedness `1, 2, 4, ..., d` on hierarchical heaps of one batch, plus a
/// universal attack restricted to the same batch. All rows start from the
/// same random stream.
#[allow(clippy::too_many_arguments)]
pub fn risk_chain_check(
    model: &Classifier,
    batch: &Dataset,
    ball: &NormBall,
    attack: &AttackParams,
    loss: &LossConfig,
    tolerance: f64,
    rng: &RngStream,
) -> Result<RiskChain> {
    let d = batch.len();
    if d == 0 || !d.is_power_of_two() {
        return Err(invalid("risk chain needs a power-of-two batch size"));
    }
    let goal = AttackGoal::Untargeted;
    let mut entries = Vec::new();
    let mut s = 1;
    while s <= d {
        let plan = HeapPlan::new(d, s, true)?;
        let out = shared_pgd_attack(
            model,
            &batch.inputs,
            &batch.labels,
            ball,
            attack,
            &goal,
            loss,
            &plan,
            &mut rng.fork(0),
        )?;
        let l = mean_adversarial_loss(model, &batch.inputs, &batch.labels, &out.applied, ball.domain, loss)?;
        entries.push(ChainEntry {
            sharedness: Some(s),
            mean_loss: l,
        });
        s *= 2;
    }
    let cfg = UniversalAttackConfig {
        attack: *attack,
        sample_size: d,
    };
    let xi = universal_attack(model, batch, &cfg, ball, &goal, loss, &mut rng.fork(0))?;
    let l = mean_adversarial_loss(model, &batch.inputs, &batch.labels, &xi, ball.domain, loss)?;
    entries.push(ChainEntry {
        sharedness: None,
        mean_loss: l,
    });
    let heap_rows = entries.len() - 1;
    let violations = (0..heap_rows - 1)
        .filter(|&i| entries[i + 1].mean_loss > entries[i].mean_loss + tolerance)
        .collect();
    Ok(RiskChain {
        entries,
        violations,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bisection_on_step_oracle() {
        let out = bisect(0.0, 255.0, 10, 0.5, |_, eps| Ok((if eps >= 17.0 { 1.0 } else { 0.0 }, 0, ())))
            .unwrap();
        let (eps, ()) = out.best.unwrap();
        assert!(eps >= 17.0 && eps < 17.0 + 255.0 / 1024.0, "{eps}");
        assert_eq!(out.trace.len(), 10);
        assert!((out.resolution - 255.0 / 1024.0).abs() < 1e-6);
    }

    #[test]
    fn bisection_always_fooled_descends_to_resolution() {
        let out = bisect(0.0, 255.0, 10, 0.75, |_, _| Ok((1.0, 0, ()))).unwrap();
        assert_eq!(out.best.unwrap().0, 255.0 / 1024.0);
        assert!(out.trace.iter().all(|t| t.success));
    }

    #[test]
    fn bisection_ties_count_as_failure() {
        let out = bisect(0.0, 1.0, 5, 0.5, |_, _| Ok((0.5, 0, ()))).unwrap();
        assert!(out.best.is_none());
        assert!(out.trace.iter().all(|t| !t.success));
    }

    #[test]
    fn bisection_keeps_global_minimum() {
        // Succeeds at the first midpoint, then (non-monotonically) at nothing
        // smaller: the answer is the first midpoint, not the last one tried.
        let out = bisect(0.0, 100.0, 6, 0.5, |it, _| Ok((if it == 0 { 1.0 } else { 0.0 }, 0, ()))).unwrap();
        assert_eq!(out.best.unwrap().0, 50.0);
        let widths: Vec<f32> = out.trace.windows(2).map(|w| (w[1].eps - w[0].eps).abs()).collect();
        for pair in widths.windows(2) {
            assert!((pair[1] - pair[0] / 2.0).abs() < 1e-4);
        }
    }

    #[test]
    fn grid_has_all_sign_patterns() {
        let g = grid_candidates(2, 1.0).unwrap();
        assert_eq!(g.len(), 9);
        assert!(g.iter().any(|t| t.as_slice() == [0.0, 0.0]));
        assert!(g.iter().any(|t| t.as_slice() == [-1.0, 1.0]));
        assert!(grid_candidates(13, 1.0).is_err());
    }
}
