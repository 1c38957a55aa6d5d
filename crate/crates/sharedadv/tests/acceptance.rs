//! Acceptance suite. Every test prints one `criterion N ...: PASS|FAIL` line
//! and then asserts the criterion at its stated tolerance.

use std::path::Path;
use std::time::Instant;

use sharedadv::checkpoint::{load_checkpoint, save_checkpoint};
use sharedadv::config::Config;
use sharedadv::records::{read_records, write_records, CsvRow, ExperimentRecord};
use sharedadv::tensor_io::{load_tensor, save_tensor};
use sharedadv_core::adversary::{
    perturbed_inputs, pgd_attack, shared_pgd_attack, universal_attack, AttackGoal, AttackParams, HeapPlan, NormBall,
    StepSchedule, UniversalAttackConfig,
};
use sharedadv_core::data::{gen_blobs, gen_shapes_seg, Dataset, Domain, Split};
use sharedadv_core::net::{smooth_labels, Architecture, Classifier, LossConfig, ModelSpec};
use sharedadv_core::robustness::{
    bisect, estimate_risks, risk_chain_check, search_robustness, RiskAttack, RobustnessQuery,
};
use sharedadv_core::trainer::{evaluate_accuracy, mean_iou, train, Defense, TrainConfig};
use sharedadv_core::{RngStream, Tensor};

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "criterion {n} {name}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
}

fn uniform(rng: &mut RngStream, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.next_unit()
}

// ---------------------------------------------------------------- 1

/// Central differences of the mean loss in f64.
fn gradient_errors(model: &Classifier<f64>, x: &Tensor<f64>, targets: &Tensor<f64>) -> (f64, f64) {
    const H: f64 = 1e-5;
    let loss = |m: &Classifier<f64>, x: &Tensor<f64>| -> f64 {
        let l = m.losses(x, targets, None).unwrap();
        l.iter().sum::<f64>() / l.len() as f64
    };
    let g = model.backward(x, targets, None).unwrap();
    let rel = |analytic: &[f64], numeric: &[f64]| -> f64 {
        let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    };

    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut v = x.as_slice().to_vec();
        v[i] += H;
        let up = loss(model, &Tensor::new(x.shape().to_vec(), v.clone()).unwrap());
        v[i] -= 2.0 * H;
        let down = loss(model, &Tensor::new(x.shape().to_vec(), v).unwrap());
        numeric.push((up - down) / (2.0 * H));
    }
    let input_err = rel(g.input.as_slice(), &numeric);

    let mut param_err: f64 = 0.0;
    for (k, (name, t)) in model.params.tensors.iter().enumerate() {
        let mut numeric = Vec::with_capacity(t.len());
        for i in 0..t.len() {
            let mut m = model.clone();
            let mut v = t.as_slice().to_vec();
            v[i] += H;
            m.params.set(name, Tensor::new(t.shape().to_vec(), v.clone()).unwrap()).unwrap();
            let up = loss(&m, x);
            v[i] -= 2.0 * H;
            m.params.set(name, Tensor::new(t.shape().to_vec(), v).unwrap()).unwrap();
            let down = loss(&m, x);
            numeric.push((up - down) / (2.0 * H));
        }
        param_err = param_err.max(rel(g.params[k].as_slice(), &numeric));
    }
    (input_err, param_err)
}

#[test]
fn criterion_01_gradient_oracle() {
    let start = Instant::now();
    let kinds: Vec<(&str, Architecture, Vec<usize>, usize)> = vec![
        ("softmax-linear", Architecture::SoftmaxLinear, vec![5], 3),
        ("mlp", Architecture::Mlp { hidden: vec![6, 5] }, vec![4], 3),
        (
            "small-conv",
            Architecture::SmallConv {
                channels: vec![3, 4],
                strides: vec![1, 2],
            },
            vec![5, 5, 2],
            3,
        ),
        ("dense", Architecture::DensePredictor { channels: vec![3, 3] }, vec![4, 4, 1], 3),
    ];
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (kind, arch, shape, classes) in &kinds {
        for inst in 0..20u64 {
            let mut rng = RngStream::new(1000 + inst, 1);
            let spec = ModelSpec::new(arch.clone(), shape.clone(), *classes).unwrap();
            let model: Classifier = Classifier::init(spec.clone(), &mut rng).unwrap();
            // Non-zero biases so every layer's bias gradient is exercised.
            let mut model = model.cast::<f64>();
            for (_, t) in model.params.tensors.iter_mut() {
                let v: Vec<f64> = t.as_slice().iter().map(|&w| w + 0.1 * rng.normal()).collect();
                *t = Tensor::new(t.shape().to_vec(), v).unwrap();
            }
            let batch = 3;
            let mut full = vec![batch];
            full.extend(shape);
            let x = Tensor::<f32>::uniform(&mut rng, &full, 0.0, 1.0).unwrap().cast::<f64>();
            let labels: Vec<usize> = (0..batch * spec.decisions_per_example()).map(|_| rng.below(*classes)).collect();
            let smoothing = if inst % 2 == 0 { 0.1 } else { 0.0 };
            let targets = smooth_labels::<f64>(&labels, *classes, smoothing).unwrap();
            let (ie, pe) = gradient_errors(&model, &x, &targets);
            let e = ie.max(pe);
            assert!(e.is_finite(), "{kind} instance {inst}");
            worst = worst.max(e);
            count += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-4 && elapsed < 60.0;
    report(
        1,
        "gradient oracle",
        pass,
        &format!("{count} instances over 4 architectures, worst relative error {worst:.2e}, {elapsed:.1}s"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_02_schedule_identity() {
    let mut rng = RngStream::new(2, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let beta = uniform(&mut rng, 0.25, 8.0);
        let gamma = uniform(&mut rng, 0.5, 1.0);
        let steps = 1 + rng.below(400);
        let eps = uniform(&mut rng, 1e-3, 255.0) as f32;
        let s = StepSchedule::GeometricAnnealed { beta, gamma, steps };
        let total: f64 = (0..steps).map(|k| s.alpha(eps, k).unwrap() as f64).sum();
        let want = beta * eps as f64;
        worst = worst.max((total - want).abs() / want);
    }
    let pass = worst <= 1e-5;
    report(2, "schedule identity", pass, &format!("100 draws, worst relative error {worst:.2e}"));
    assert!(pass);
}

// ---------------------------------------------------------------- 3

fn random_model(rng: &mut RngStream, k: u64) -> (Classifier, Vec<usize>) {
    let (arch, shape) = match k % 3 {
        0 => (Architecture::SoftmaxLinear, vec![6]),
        1 => (Architecture::Mlp { hidden: vec![8] }, vec![6]),
        _ => (
            Architecture::SmallConv {
                channels: vec![4],
                strides: vec![1],
            },
            vec![4, 4, 1],
        ),
    };
    let classes = 2 + rng.below(3);
    let spec = ModelSpec::new(arch, shape.clone(), classes).unwrap();
    (Classifier::init(spec, rng).unwrap(), shape)
}

fn random_batch(rng: &mut RngStream, d: usize, shape: &[usize], classes: usize, domain: Domain) -> (Tensor, Vec<usize>) {
    let mut full = vec![d];
    full.extend(shape);
    let x = Tensor::uniform(rng, &full, domain.lo, domain.hi).unwrap();
    let labels = (0..d).map(|_| rng.below(classes)).collect();
    (x, labels)
}

#[test]
fn criterion_03_sharedness_one_equivalence() {
    let mut identical = 0;
    for k in 0..10u64 {
        let mut rng = RngStream::new(30 + k, 0);
        let (model, shape) = random_model(&mut rng, k);
        let d = 1 + rng.below(12);
        let (x, labels) = random_batch(&mut rng, d, &shape, model.classes(), Domain::UNIT);
        let ball = NormBall::new(0.05 + 0.2 * rng.next_unit() as f32, Domain::UNIT).unwrap();
        let attack = AttackParams::geometric(4.0, 0.975, 20);
        let loss = LossConfig::attack();
        let goal = AttackGoal::Untargeted;
        let per = pgd_attack(&model, &x, &labels, &ball, &attack, &goal, &loss, &mut RngStream::new(k, 7)).unwrap();
        let plan = HeapPlan::new(d, 1, false).unwrap();
        let shared =
            shared_pgd_attack(&model, &x, &labels, &ball, &attack, &goal, &loss, &plan, &mut RngStream::new(k, 7)).unwrap();
        let bits = |t: &Tensor| t.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if bits(&per) == bits(&shared.applied) {
            identical += 1;
        }
    }
    let pass = identical == 10;
    report(3, "sharedness-1 equivalence", pass, &format!("{identical}/10 bit-identical"));
    assert!(pass);
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_ball_and_domain_discipline() {
    let mut worst_excess: f64 = f64::NEG_INFINITY;
    let mut violations = 0;
    let mut configs = 0;
    for k in 0..1200u64 {
        let mut rng = RngStream::new(400 + k, 0);
        let (model, shape) = random_model(&mut rng, k);
        let domain = if rng.below(2) == 0 { Domain::UNIT } else { Domain::BYTE };
        let eps = (rng.next_unit() * 1.2 * domain.width() as f64) as f32;
        let ball = NormBall::new(eps, domain).unwrap();
        let d = 1 + rng.below(8);
        let (x, labels) = random_batch(&mut rng, d, &shape, model.classes(), domain);
        let steps = 1 + rng.below(8);
        let attack = if rng.below(2) == 0 {
            AttackParams::geometric(uniform(&mut rng, 0.5, 6.0), uniform(&mut rng, 0.8, 1.0), steps)
        } else {
            AttackParams::proportional(uniform(&mut rng, 0.1, 2.0) as f32, steps)
        };
        let goal = if rng.below(3) == 0 {
            AttackGoal::Targeted {
                target: vec![rng.below(model.classes())],
            }
        } else {
            AttackGoal::Untargeted
        };
        let loss = if rng.below(2) == 0 { LossConfig::attack() } else { LossConfig::training() };
        // Per-example and heap attacks return the effective perturbation,
        // which must keep `x + xi` inside the domain exactly. The universal
        // attack returns one raw perturbation; its domain clamp happens per
        // input, so the clamped inputs are checked instead.
        let mut check = |p: f32, y: f64| {
            worst_excess = worst_excess.max(p.abs() as f64 - eps as f64);
            if !p.is_finite() || p.abs() as f64 > eps as f64 + 1e-6 || y < domain.lo as f64 || y > domain.hi as f64 {
                violations += 1;
            }
        };
        match k % 3 {
            0 | 1 => {
                let effective = if k % 3 == 0 {
                    pgd_attack(&model, &x, &labels, &ball, &attack, &goal, &loss, &mut rng).unwrap()
                } else {
                    let s = 1 + rng.below(d);
                    let plan = HeapPlan::new(d, s, false).unwrap();
                    let out = shared_pgd_attack(&model, &x, &labels, &ball, &attack, &goal, &loss, &plan, &mut rng).unwrap();
                    for &v in out.heaps.as_slice() {
                        check(v, domain.lo as f64);
                    }
                    out.applied
                };
                for (&p, &xv) in effective.as_slice().iter().zip(x.as_slice()) {
                    check(p, xv as f64 + p as f64);
                }
            }
            _ => {
                let data = Dataset::new(x.clone(), labels.clone(), vec![], model.classes(), domain, Split::Test).unwrap();
                let cfg = UniversalAttackConfig {
                    attack,
                    sample_size: 1 + rng.below(d),
                };
                let xi = universal_attack(&model, &data, &cfg, &ball, &goal, &loss, &mut rng).unwrap();
                let xa = perturbed_inputs(&x, &xi, domain).unwrap();
                for (i, &y) in xa.as_slice().iter().enumerate() {
                    check(xi.as_slice()[i % xi.len()], y as f64);
                }
            }
        }
        configs += 1;
    }
    let pass = violations == 0 && configs >= 1000;
    report(
        4,
        "ball/domain discipline",
        pass,
        &format!("{configs} configs, {violations} violations, max |xi| - eps = {worst_excess:.2e}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_05_exhaustive_risks() {
    let mut matched = 0;
    let trials = 20;
    for t in 0..trials {
        let mut rng = RngStream::new(500 + t, 0);
        let spec = ModelSpec::new(Architecture::SoftmaxLinear, vec![2], 2).unwrap();
        let model = Classifier::init(spec, &mut rng).unwrap();
        let data = gen_blobs(&mut rng, 40, 2, 2, 1.5).unwrap();
        let eps = 0.05 + 0.3 * rng.next_unit() as f32;
        let ball = NormBall::new(eps, Domain::UNIT).unwrap();
        let est = estimate_risks(&model, &data, &ball, &RiskAttack::SignGrid, &rng.fork(9)).unwrap();

        // Independent enumeration of the nine grid perturbations.
        let levels = [-eps, 0.0, eps];
        let mut wrong = vec![[false; 9]; data.len()];
        for (c, cell) in (0..9).map(|c| (c, [levels[c % 3], levels[c / 3]])) {
            for i in 0..data.len() {
                let x = data.inputs.row(i);
                let xa: Vec<f32> = (0..2).map(|j| (x[j] + cell[j]).clamp(0.0, 1.0)).collect();
                let pred = model.predict(&Tensor::from_slice(&[1, 2], &xa).unwrap()).unwrap()[0];
                wrong[i][c] = pred != data.labels[i];
            }
        }
        let n = data.len() as f64;
        let clean = wrong.iter().filter(|w| w[4]).count() as f64 / n;
        let uni = (0..9)
            .map(|c| wrong.iter().filter(|w| w[c]).count() as f64 / n)
            .fold(0.0, f64::max);
        let adv = wrong.iter().filter(|w| w.iter().any(|&b| b)).count() as f64 / n;
        if est.expected == clean && est.universal == uni && est.adversarial == adv && clean <= uni && uni <= adv && est.ordered {
            matched += 1;
        }
    }
    let pass = matched == trials;
    report(5, "exhaustive-oracle risks", pass, &format!("{matched}/{trials} exact matches"));
    assert!(pass);
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_risk_chain_ordering() {
    let start = Instant::now();
    let data = gen_blobs(&mut RngStream::new(6, 0), 400, 2, 10, 3.0).unwrap();
    let spec = ModelSpec::new(Architecture::Mlp { hidden: vec![16] }, vec![10], 2).unwrap();
    let model = Classifier::init(spec, &mut RngStream::new(6, 1)).unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        batch_size: 32,
        learning_rate: 0.05,
        seed: 6,
        ..TrainConfig::default()
    };
    let (model, _) = train(model, &data, &cfg).unwrap();
    let ball = NormBall::new(0.05, Domain::UNIT).unwrap();
    let attack = AttackParams::geometric(4.0, 0.975, 100);
    let mut ordered = 0;
    let trials = 20;
    for t in 0..trials {
        let rng = RngStream::new(600 + t, 0);
        let idx = rng.fork(1).permutation(data.len());
        let batch = data.subset(&idx[..8]);
        let chain = risk_chain_check(&model, &batch, &ball, &attack, &LossConfig::attack(), 0.02, &rng).unwrap();
        assert_eq!(chain.entries.len(), 5);
        if chain.is_monotone() {
            ordered += 1;
        }
    }
    let frac = ordered as f64 / trials as f64;
    let elapsed = start.elapsed().as_secs_f64();
    let pass = frac >= 0.9 && elapsed < 300.0;
    report(
        6,
        "risk-chain ordering",
        pass,
        &format!("{ordered}/{trials} trials non-increasing within 0.02, {elapsed:.1}s"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_07_bisection() {
    let star = 17.0f32;
    let out = bisect(0.0, 255.0, 10, 0.75, |_, eps| Ok((if eps >= star { 1.0 } else { 0.0 }, 0, ()))).unwrap();
    let eps_hat = out.best.map(|(e, _)| e);
    let hi = star + 255.0 / 1024.0;
    let pass = eps_hat.is_some_and(|e| e >= star && e < hi) && out.trace.len() == 10;
    report(7, "bisection correctness", pass, &format!("eps_hat = {eps_hat:?}, window [17, {hi})"));
    assert!(pass);
}

// ---------------------------------------------------------------- 8, 9

/// `a >= factor * b` for search outcomes where `None` means the required
/// rate was never reached up to `eps_hi`, i.e. robustness beyond `eps_hi`.
fn at_least(a: Option<f32>, factor: f32, b: Option<f32>, eps_hi: f32) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => a >= factor * b,
        (None, Some(b)) => factor * b <= eps_hi,
        (_, None) => false,
    }
}

#[test]
fn criterion_08_blobs_shared_vs_erm() {
    let start = Instant::now();
    let mut passed = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let all = gen_blobs(&mut RngStream::new(seed, 0), 2000, 2, 20, 6.0).unwrap();
        let (train_set, test_set) = all.split_at(1500, &mut RngStream::new(seed, 9));
        let spec = ModelSpec::new(Architecture::Mlp { hidden: vec![32] }, vec![20], 2).unwrap();
        let batch = 64;
        let mut results = Vec::new();
        for defense in [Defense::Erm, Defense::AdvTrain, Defense::SharedAdvTrain { sharedness: batch }] {
            let model = Classifier::init(spec.clone(), &mut RngStream::new(seed, 1)).unwrap();
            let cfg = TrainConfig {
                epochs: 20,
                batch_size: batch,
                learning_rate: 0.05,
                defense,
                eps: 0.1,
                sigma: 0.5,
                seed,
                ..TrainConfig::default()
            };
            let (m, _) = train(model, &train_set, &cfg).unwrap();
            let acc = evaluate_accuracy(&m, &test_set).unwrap();
            let q = RobustnessQuery::classification(0.75, Domain::UNIT.width());
            let out = search_robustness(&m, &q, &train_set, &test_set, &RngStream::new(seed, 5)).unwrap();
            let best_rate = out.trace.iter().map(|e| e.rate).fold(0.0, f64::max);
            results.push((acc, out.eps_hat, best_rate));
        }
        let [(acc_erm, erm, r0), (acc_s1, s1, r1), (acc_sb, sb, r2)] = results[..] else { unreachable!() };
        let matched = (acc_s1 - acc_erm).abs() <= 0.01 && (acc_sb - acc_erm).abs() <= 0.01;
        let ok = matched && at_least(sb, 1.5, erm, 1.0) && at_least(sb, 1.0, s1, 1.0) && sb.is_some();
        if ok {
            passed += 1;
        }
        lines.push(format!(
            "seed {seed}: acc {acc_erm:.3}/{acc_s1:.3}/{acc_sb:.3} eps_uni {erm:?}/{s1:?}/{sb:?} best rate {r0:.2}/{r1:.2}/{r2:.2}"
        ));
    }
    for l in &lines {
        println!("  {l}");
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = passed >= 4 && elapsed < 1800.0;
    report(
        8,
        "blobs shared vs ERM (erm/s=1/s=batch)",
        pass,
        &format!("{passed}/5 seeds, {elapsed:.0}s"),
    );
    assert!(pass);
}

#[test]
fn criterion_09_dense_targeted_universal() {
    let start = Instant::now();
    let mut passed = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let set = gen_shapes_seg(&mut RngStream::new(seed, 0), 440, 12, 2, 3).unwrap();
        let (train_set, test_set) = set.data.split_at(400, &mut RngStream::new(seed, 9));
        let spec = ModelSpec::new(
            Architecture::DensePredictor {
                channels: vec![16, 16, 16, 16],
            },
            vec![12, 12, 1],
            2,
        )
        .unwrap();
        let mut results = Vec::new();
        for defense in [Defense::Erm, Defense::SharedAdvTrain { sharedness: 8 }] {
            let model = Classifier::init(spec.clone(), &mut RngStream::new(seed, 1)).unwrap();
            let cfg = TrainConfig {
                epochs: 25,
                batch_size: 16,
                learning_rate: 0.1,
                defense,
                eps: 0.6,
                sigma: 0.5,
                seed,
                ..TrainConfig::default()
            };
            let (m, _) = train(model, &train_set, &cfg).unwrap();
            let iou = mean_iou(&m, &test_set).unwrap();
            let q = RobustnessQuery::dense_targeted(set.target.clone(), Domain::UNIT.width());
            let out = search_robustness(&m, &q, &train_set, &test_set, &RngStream::new(seed, 5)).unwrap();
            results.push((iou, out.eps_hat));
        }
        let [(iou_erm, erm), (iou_sh, sh)] = results[..] else { unreachable!() };
        let ok = erm.is_some() && (iou_sh - iou_erm).abs() <= 0.05 && at_least(sh, 1.5, erm, 1.0);
        if ok {
            passed += 1;
        }
        lines.push(format!("seed {seed}: iou {iou_erm:.4}/{iou_sh:.4} eps_uni {erm:?}/{sh:?}"));
    }
    for l in &lines {
        println!("  {l}");
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = passed >= 3 && elapsed < 3600.0;
    report(9, "dense targeted universal attack (erm/shared)", pass, &format!("{passed}/5 seeds, {elapsed:.0}s"));
    assert!(pass);
}

// ---------------------------------------------------------------- 10

fn param_bits(m: &Classifier) -> Vec<u32> {
    m.params.tensors.iter().flat_map(|(_, t)| t.as_slice().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn criterion_10_mode_equivalences_and_round_trips() {
    let data = gen_blobs(&mut RngStream::new(10, 0), 200, 3, 4, 4.0).unwrap();
    let spec = ModelSpec::new(Architecture::Mlp { hidden: vec![8] }, vec![4], 3).unwrap();
    let base = TrainConfig {
        epochs: 3,
        batch_size: 16,
        eps: 0.1,
        seed: 10,
        ..TrainConfig::default()
    };
    let run = |defense: Defense, sigma: f32| {
        let model = Classifier::init(spec.clone(), &mut RngStream::new(10, 1)).unwrap();
        let cfg = TrainConfig {
            defense,
            sigma,
            ..base.clone()
        };
        train(model, &data, &cfg).unwrap()
    };
    let (erm, erm_hist) = run(Defense::Erm, 0.5);
    let (adv0, adv0_hist) = run(Defense::AdvTrain, 0.0);
    let (sh0, _) = run(Defense::SharedAdvTrain { sharedness: 4 }, 0.0);
    let sigma_zero = param_bits(&erm) == param_bits(&adv0) && param_bits(&erm) == param_bits(&sh0) && erm_hist == adv0_hist;

    let dir = tempfile::tempdir().unwrap();
    // TNSR1 round trip of random tensors, including a scalar.
    let mut rng = RngStream::new(10, 2);
    let mut tensors_ok = true;
    for (i, shape) in [vec![], vec![7], vec![2, 3, 4], vec![0, 5]].into_iter().enumerate() {
        let t = Tensor::uniform(&mut rng, &shape, -1e3, 1e3).unwrap();
        let p = dir.path().join(format!("t{i}.tnsr"));
        save_tensor(&p, &t).unwrap();
        let back = load_tensor(&p).unwrap();
        tensors_ok &= back.shape() == t.shape()
            && back.as_slice().iter().zip(t.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
        if shape.is_empty() {
            tensors_ok &= std::fs::metadata(&p).unwrap().len() == 13;
        }
    }
    // Checkpoint round trip.
    let ck = dir.path().join("ck");
    save_checkpoint(&ck, &adv0, &Config::default()).unwrap();
    let (loaded, _) = load_checkpoint(&ck).unwrap();
    let checkpoint_ok = param_bits(&loaded) == param_bits(&adv0);
    // Records round trip.
    let csv = dir.path().join("records.csv");
    let records: Vec<ExperimentRecord> = (0..5).map(|i| sample_record(&mut rng, i)).collect();
    write_records(&csv, &records[..2]).unwrap();
    write_records(&csv, &records[2..]).unwrap();
    let rows = read_records(Path::new(&csv)).unwrap();
    let csv_ok = rows == records.iter().map(CsvRow::from).collect::<Vec<_>>();

    let pass = sigma_zero && tensors_ok && checkpoint_ok && csv_ok;
    report(
        10,
        "mode equivalences and round trips",
        pass,
        &format!("sigma=0 == ERM: {sigma_zero}, TNSR1: {tensors_ok}, checkpoint: {checkpoint_ok}, CSV: {csv_ok}"),
    );
    assert!(pass);
}

fn sample_record(rng: &mut RngStream, i: u64) -> ExperimentRecord {
    let mut nulls = std::collections::BTreeMap::new();
    let eps_adv = if i % 2 == 0 {
        nulls.insert("eps_adv".to_string(), "not_found".to_string());
        None
    } else {
        Some(rng.next_unit() as f32)
    };
    ExperimentRecord {
        sigma: rng.next_unit() as f32,
        sharedness: Some(1 << i),
        eps_train: rng.next_unit() as f32 * 26.0,
        seed: i,
        clean_acc: Some(rng.next_unit()),
        eps_uni: Some(rng.next_unit() as f32 * 255.0),
        eps_adv,
        delta: 0.75,
        wall_s: rng.next_unit() * 100.0,
        schedule: "proportional(0.5,4)".into(),
        config_hash: format!("h{i}"),
        config: String::new(),
        artifacts: vec![],
        nulls,
    }
}
