//! The experiment commands. Each writes its outputs under a directory keyed
//! by the hash of its resolved configuration and never touches its inputs.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sharedadv_core::adversary::{
    fooling_rate, pgd_attack, shared_pgd_attack, universal_attack, Applied, AttackGoal, HeapPlan, NormBall,
    UniversalAttackConfig,
};
use sharedadv_core::data::Dataset;
use sharedadv_core::net::Classifier;
use sharedadv_core::pareto::pareto_front;
use sharedadv_core::robustness::{risk_chain_check, search_robustness, RiskChain, SearchOutcome};
use sharedadv_core::trainer::{evaluate_accuracy, train_with, TrainHistory};
use sharedadv_core::RngStream;

use crate::checkpoint::{load_checkpoint, load_manifest, save_checkpoint};
use crate::config::{digest_hex, AttackMode, Config, DefenseKind};
use crate::data::{load_data, Loaded};
use crate::error::{Error, Result};
use crate::records::{self, reason, ExperimentRecord, HEADER};
use crate::tensor_io::{load_tensor, save_tensor};

const INIT_STREAM: u64 = 0x1417;
const ATTACK_STREAM: u64 = 0xa77a;
const EVAL_STREAM: u64 = 0xe7a1;
const RISK_STREAM: u64 = 0x215c;

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(Error::io(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes") + "\n";
    fs::write(path, text).map_err(Error::io(path))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(Error::io(path))
}

pub struct TrainOutput {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub model: Classifier,
    pub history: TrainHistory,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

fn input_shape(data: &Dataset) -> Vec<usize> {
    data.example_shape().to_vec()
}

/// Train a model from scratch on already loaded data.
pub fn train_model(cfg: &Config, data: &Loaded) -> Result<(Classifier, TrainHistory)> {
    let spec = cfg.model.spec(input_shape(&data.train), data.train.classes)?;
    let tc = cfg.train.to_train_config(cfg.seed)?;
    let model = Classifier::init(spec, &mut RngStream::new(cfg.seed, INIT_STREAM))?;
    Ok(train_with(model, &data.train, &tc, |_, _, _| Ok(()))?)
}

fn history_csv(h: &TrainHistory) -> String {
    let mut s = String::from("epoch,lr,clean_loss,adv_loss,clean_acc\n");
    for e in &h.epochs {
        let adv = e.adversarial_loss.map(|v| v.to_string()).unwrap_or_default();
        s += &format!("{},{},{},{},{}\n", e.epoch, e.learning_rate, e.clean_loss, adv, e.clean_accuracy);
    }
    s
}

/// `train`: fit a model and write `checkpoint/` and `history.csv`.
pub fn cmd_train(cfg: &Config) -> Result<TrainOutput> {
    let data = load_data(&cfg.data, cfg.seed)?;
    let (model, history) = train_model(cfg, &data)?;
    let dir = cfg.out_dir.join(format!("train-{}", cfg.short_hash()));
    create_dir(&dir)?;
    let checkpoint = dir.join("checkpoint");
    save_checkpoint(&checkpoint, &model, cfg)?;
    write_text(&dir.join("history.csv"), &history_csv(&history))?;
    Ok(TrainOutput {
        train_accuracy: evaluate_accuracy(&model, &data.train)?,
        test_accuracy: evaluate_accuracy(&model, &data.test)?,
        dir,
        checkpoint,
        model,
        history,
    })
}

/// Resolve a `--targeted` value: a class index, `scene`, or a TNSR1 map.
pub fn resolve_goal(targeted: Option<&str>, model: &Classifier, scene: Option<&[usize]>) -> Result<AttackGoal> {
    let Some(t) = targeted else {
        return Ok(AttackGoal::Untargeted);
    };
    let p = model.spec.decisions_per_example();
    let target = if t == "scene" {
        scene
            .ok_or_else(|| Error::Config("`scene` target needs the shapes dataset".into()))?
            .to_vec()
    } else if let Ok(k) = t.parse::<usize>() {
        vec![k; p]
    } else {
        let map = load_tensor(Path::new(t))?;
        map.as_slice().iter().map(|&v| v as usize).collect()
    };
    if target.len() != p || target.iter().any(|&k| k >= model.classes()) {
        return Err(Error::Config(format!(
            "target needs {p} labels below {}",
            model.classes()
        )));
    }
    Ok(AttackGoal::Targeted { target })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackReport {
    pub mode: AttackMode,
    pub eps: f32,
    pub clean_accuracy: f64,
    pub fooling_rate: f64,
    pub mean_pixel_accuracy: Option<f64>,
    pub examples: usize,
}

fn derived_hash(cfg: &Config, checkpoint: &Path, tag: &str) -> Result<String> {
    let m = load_manifest(checkpoint)?;
    Ok(digest_hex(format!("{tag}\n{}\n{}", m.config_hash, cfg.resolved_text()).as_bytes())[..12].to_string())
}

/// `attack`: craft a perturbation against the test split of the
/// checkpoint's data and report its effect.
pub fn cmd_attack(checkpoint: &Path, cfg: &Config) -> Result<(PathBuf, AttackReport)> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let data = load_data(&cfg.data, cfg.seed)?;
    let a = &cfg.attack;
    if a.mode != AttackMode::Shared && a.sharedness != 1 {
        return Err(Error::Config("sharedness only applies to the shared mode".into()));
    }
    let goal = resolve_goal(a.targeted.as_deref(), &model, data.scene.as_deref())?;
    let ball = NormBall::new(a.eps, data.test.domain)?;
    let params = a.params();
    let loss = if matches!(goal, AttackGoal::Targeted { .. }) {
        a.loss().without_threshold()
    } else {
        a.loss()
    };
    let mut rng = RngStream::new(cfg.seed, ATTACK_STREAM);
    let test = &data.test;
    let (xi, applied_universal) = match a.mode {
        AttackMode::Pgd => (
            pgd_attack(&model, &test.inputs, &test.labels, &ball, &params, &goal, &loss, &mut rng)?,
            false,
        ),
        AttackMode::Shared => {
            let plan = HeapPlan::new(test.len(), a.sharedness.min(test.len()), false)?;
            let out = shared_pgd_attack(&model, &test.inputs, &test.labels, &ball, &params, &goal, &loss, &plan, &mut rng)?;
            (out.applied, false)
        }
        AttackMode::Universal => {
            let uc = UniversalAttackConfig {
                attack: params,
                sample_size: a.sample_size,
            };
            (universal_attack(&model, &data.train, &uc, &ball, &goal, &loss, &mut rng)?, true)
        }
    };
    let applied = if applied_universal {
        Applied::Universal(&xi)
    } else {
        Applied::PerExample(&xi)
    };
    let fr = fooling_rate(&model, test, applied, &goal, Some(cfg.eval.delta))?;
    let report = AttackReport {
        mode: a.mode,
        eps: a.eps,
        clean_accuracy: evaluate_accuracy(&model, test)?,
        fooling_rate: fr.rate,
        mean_pixel_accuracy: fr.mean_pixel_accuracy,
        examples: fr.examples,
    };
    let dir = cfg.out_dir.join(format!("attack-{}", derived_hash(cfg, checkpoint, "attack")?));
    create_dir(&dir)?;
    save_tensor(&dir.join("xi.tnsr"), &xi)?;
    write_json(
        &dir.join("manifest.json"),
        &serde_json::json!({
            "checkpoint": checkpoint.display().to_string(),
            "mode": a.mode,
            "eps": a.eps,
            "shape": xi.shape(),
            "config": cfg.resolved_text(),
        }),
    )?;
    write_json(&dir.join("report.json"), &report)?;
    Ok((dir, report))
}

fn trace_csv(out: &SearchOutcome) -> String {
    let mut s = String::from("iteration,eps,rate,success,stream\n");
    for e in &out.trace {
        s += &format!("{},{},{},{},{}\n", e.iteration, e.eps, e.rate, e.success, e.stream);
    }
    s
}

/// Robustness search on an in-memory model; `cmd_eval` and `cmd_sweep`
/// share it.
pub fn evaluate_robustness(model: &Classifier, cfg: &Config, data: &Loaded) -> Result<SearchOutcome> {
    let goal = resolve_goal(cfg.eval.targeted.as_deref(), model, data.scene.as_deref())?;
    let query = cfg.eval.query(goal, data.test.domain.width());
    Ok(search_robustness(
        model,
        &query,
        &data.train,
        &data.test,
        &RngStream::new(cfg.seed, EVAL_STREAM),
    )?)
}

/// `eval`: estimate `eps(delta)`, writing the bisection trace. A search that
/// never succeeds still writes the trace, then fails with `NotFound`.
pub fn cmd_eval(checkpoint: &Path, cfg: &Config) -> Result<(PathBuf, SearchOutcome)> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let data = load_data(&cfg.data, cfg.seed)?;
    let out = evaluate_robustness(&model, cfg, &data)?;
    let dir = cfg.out_dir.join(format!("eval-{}", derived_hash(cfg, checkpoint, "eval")?));
    create_dir(&dir)?;
    write_text(&dir.join("trace.csv"), &trace_csv(&out))?;
    write_json(
        &dir.join("result.json"),
        &serde_json::json!({
            "eps_hat": out.eps_hat,
            "resolution": out.resolution,
            "delta": cfg.eval.delta,
        }),
    )?;
    if let Some(xi) = &out.perturbation {
        save_tensor(&dir.join("xi.tnsr"), xi)?;
    }
    if !out.found() {
        return Err(Error::NotFound {
            eps_hi: cfg.eval.eps_hi.unwrap_or(data.test.domain.width()),
            delta: cfg.eval.delta,
        });
    }
    Ok((dir, out))
}

/// Grid points of a sweep plan as fully resolved configurations.
pub fn sweep_grid(plan: &Config) -> Result<Vec<Config>> {
    let s = &plan.sweep;
    let mut grid = Vec::new();
    if s.include_erm {
        let mut c = plan.clone();
        c.train.defense = DefenseKind::Erm;
        c.train.eps = 0.0;
        c.train.sharedness = 1;
        grid.push(c);
    }
    for &eps in &s.eps {
        for &sigma in &s.sigma {
            for &sh in &s.sharedness {
                let mut c = plan.clone();
                c.train.eps = eps;
                c.train.sigma = sigma;
                c.train.sharedness = sh;
                c.train.defense = if sh == 1 { DefenseKind::Adv } else { DefenseKind::Shared };
                c.train.to_train_config(c.seed)?;
                grid.push(c);
            }
        }
    }
    if grid.is_empty() {
        return Err(Error::Config("the sweep grid is empty".into()));
    }
    Ok(grid)
}

pub struct SweepSummary {
    pub records: PathBuf,
    pub pareto: PathBuf,
    pub ran: usize,
    pub skipped: usize,
    pub failed: usize,
}

fn run_point(cfg: &Config, data: &Loaded, dir: &Path) -> Result<ExperimentRecord> {
    let start = Instant::now();
    let mut nulls = BTreeMap::new();
    let defense = cfg.train.defense();
    let sharedness = defense.sharedness();
    if sharedness.is_none() {
        nulls.insert("s".into(), reason::ERM.into());
    }
    let mut record = ExperimentRecord {
        sigma: cfg.train.sigma,
        sharedness,
        eps_train: cfg.train.eps,
        seed: cfg.seed,
        clean_acc: None,
        eps_uni: None,
        eps_adv: None,
        delta: cfg.eval.delta,
        wall_s: 0.0,
        schedule: format!("proportional({},{})", cfg.train.step_factor, cfg.train.steps),
        config_hash: cfg.hash(),
        config: cfg.resolved_text(),
        artifacts: Vec::new(),
        nulls,
    };
    let outcome = (|| -> Result<()> {
        let (model, _) = train_model(cfg, data)?;
        let ckpt = dir.join(format!("{}-checkpoint", cfg.short_hash()));
        save_checkpoint(&ckpt, &model, cfg)?;
        record.artifacts.push(ckpt.display().to_string());
        record.clean_acc = Some(evaluate_accuracy(&model, &data.test)?);
        let uni = evaluate_robustness(&model, cfg, data)?;
        match uni.eps_hat {
            Some(e) => record.eps_uni = Some(e),
            None => {
                record.nulls.insert("eps_uni".into(), reason::NOT_FOUND.into());
            }
        }
        if cfg.sweep.eval_adv {
            let mut per = cfg.clone();
            per.eval.mode = crate::config::EvalMode::PerExample;
            match evaluate_robustness(&model, &per, data)?.eps_hat {
                Some(e) => record.eps_adv = Some(e),
                None => {
                    record.nulls.insert("eps_adv".into(), reason::NOT_FOUND.into());
                }
            }
        } else {
            record.nulls.insert("eps_adv".into(), reason::NOT_REQUESTED.into());
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        let why = format!("{}: {e}", reason::FAILED);
        let missing = [
            ("clean_acc", record.clean_acc.is_none()),
            ("eps_uni", record.eps_uni.is_none()),
            ("eps_adv", record.eps_adv.is_none()),
        ];
        for (field, empty) in missing {
            if empty {
                record.nulls.entry(field.into()).or_insert_with(|| why.clone());
            }
        }
    }
    record.wall_s = start.elapsed().as_secs_f64();
    Ok(record)
}

/// `sweep`: train and evaluate every grid point not yet recorded, then
/// write the Pareto subset of all records.
pub fn cmd_sweep(plan: &Config) -> Result<SweepSummary> {
    let grid = sweep_grid(plan)?;
    create_dir(&plan.out_dir)?;
    let records_path = plan.out_dir.join("records.csv");
    let done: HashSet<String> = records::read_sidecar(&records_path)?
        .into_iter()
        .map(|r| r.config_hash)
        .collect();
    let data = load_data(&plan.data, plan.seed)?;
    let dir = plan.out_dir.join("sweep");
    create_dir(&dir)?;
    let (mut ran, mut skipped, mut failed) = (0, 0, 0);
    for point in &grid {
        if done.contains(&point.hash()) {
            skipped += 1;
            continue;
        }
        let record = run_point(point, &data, &dir)?;
        if record.nulls.values().any(|v| v.starts_with(reason::FAILED)) {
            failed += 1;
        }
        records::write_records(&records_path, &[record])?;
        ran += 1;
    }
    let pareto = plan.out_dir.join("pareto.csv");
    write_pareto(&records_path, &pareto)?;
    Ok(SweepSummary {
        records: records_path,
        pareto,
        ran,
        skipped,
        failed,
    })
}

/// Copy the non-dominated rows of a records file, verbatim, to `out`.
pub fn write_pareto(records_path: &Path, out: &Path) -> Result<Vec<usize>> {
    let rows = records::read_records(records_path)?;
    let raw = fs::read_to_string(records_path).map_err(Error::io(records_path))?;
    let lines: Vec<&str> = raw.lines().skip(1).collect();
    let scored: Vec<usize> = (0..rows.len())
        .filter(|&i| rows[i].clean_acc.is_some() && rows[i].eps_uni.is_some())
        .collect();
    let points: Vec<(f64, f64)> = scored
        .iter()
        .map(|&i| (rows[i].clean_acc.unwrap(), rows[i].eps_uni.unwrap() as f64))
        .collect();
    let front: Vec<usize> = pareto_front(&points).into_iter().map(|k| scored[k]).collect();
    let mut text = format!("{HEADER}\n");
    for &i in &front {
        text += lines[i];
        text.push('\n');
    }
    write_text(out, &text)?;
    Ok(front)
}

/// `risk-chain`: heap adversary losses for `s = 1, 2, ..., d` and the
/// universal estimate on one test batch.
pub fn cmd_risk_chain(checkpoint: &Path, cfg: &Config) -> Result<(PathBuf, RiskChain)> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let data = load_data(&cfg.data, cfg.seed)?;
    let d = cfg.risk.batch;
    if d == 0 || !d.is_power_of_two() {
        return Err(Error::Config(format!("risk-chain batch {d} is not a power of two")));
    }
    if d > data.test.len() {
        return Err(Error::Config("risk-chain batch exceeds the test split".into()));
    }
    let rng = RngStream::new(cfg.seed, RISK_STREAM);
    let order = rng.fork(0).permutation(data.test.len());
    let batch = data.test.subset(&order[..d]);
    let ball = NormBall::new(cfg.risk.eps, batch.domain)?;
    let attack = sharedadv_core::adversary::AttackParams::geometric(cfg.attack.beta, cfg.attack.gamma, cfg.risk.steps);
    let chain = risk_chain_check(&model, &batch, &ball, &attack, &cfg.attack.loss(), cfg.risk.tolerance, &rng.fork(1))?;
    let dir = cfg.out_dir.join(format!("risk-{}", derived_hash(cfg, checkpoint, "risk")?));
    create_dir(&dir)?;
    let mut text = String::from("sharedness,mean_loss,violation\n");
    for (i, e) in chain.entries.iter().enumerate() {
        let s = e.sharedness.map(|s| s.to_string()).unwrap_or_else(|| "universal".into());
        let v = i > 0 && chain.violations.contains(&(i - 1));
        text += &format!("{s},{},{v}\n", e.mean_loss);
    }
    write_text(&dir.join("chain.csv"), &text)?;
    Ok((dir, chain))
}

/// `export-plot`: one `accuracy eps_uni` series file per sharedness, sorted
/// by accuracy. Values are copied from the records file unchanged.
pub fn cmd_export_plot(records_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    records::read_records(records_path)?;
    let mut reader = csv::ReaderBuilder::new()
        .from_path(records_path)
        .map_err(|e| Error::Format {
            path: records_path.to_owned(),
            msg: e.to_string(),
        })?;
    let mut series: BTreeMap<String, Vec<(f64, String, String)>> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Format {
            path: records_path.to_owned(),
            msg: e.to_string(),
        })?;
        let (s, acc, eps) = (&rec[1], &rec[4], &rec[5]);
        if acc.is_empty() || eps.is_empty() {
            continue;
        }
        let key = if s.is_empty() { "erm".to_string() } else { format!("s{s}") };
        let sort_key: f64 = acc.parse().map_err(|_| Error::Format {
            path: records_path.to_owned(),
            msg: format!("bad accuracy {acc:?}"),
        })?;
        series.entry(key).or_default().push((sort_key, acc.to_string(), eps.to_string()));
    }
    if series.is_empty() {
        eprintln!("warning: {} has no complete records; nothing exported", records_path.display());
        return Ok(Vec::new());
    }
    create_dir(out_dir)?;
    let mut files = Vec::new();
    for (key, mut rows) in series {
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut text = String::from("# clean_acc eps_uni\n");
        for (_, acc, eps) in rows {
            text += &format!("{acc} {eps}\n");
        }
        let path = out_dir.join(format!("series_{key}.dat"));
        write_text(&path, &text)?;
        files.push(path);
    }
    Ok(files)
}
