use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::Context;
use budgetseg_core::budget::{
    allocations_for_budget_with_pool, allocations_matching_display, seconds_to_days_display, Allocation, CostModel, SupervisionKind,
    SECONDS_PER_DAY,
};
use budgetseg_core::metrics::write_report;
use budgetseg_core::models::{image_tensor, NetKind, Network};
use budgetseg_core::pipeline::{
    annotator_stage, config_hash, evaluate_detail, pseudo_label, run_repeat_with_networks, score_pseudo_labels, std_dev, train_annotator,
    train_segmenter, union_samples, AnnotatorVariant, ExperimentConfig, ExperimentResult, PseudoLabel, ResultRow, Sample, TrainReport,
    Workspace,
};
use budgetseg_core::synthdata::io::{read_dataset, write_dataset, StoredScene};
use budgetseg_core::synthdata::{generate_scenes, held_out_scenes, semantic_from_instances, split_dataset, Instance, Scene};
use serde::Serialize;

use crate::manifest::{RunManifest, RunStatus};
use crate::{CliError, CliResult, EvaluateArgs, GenerateArgs, PlanArgs, PseudoLabelArgs, RunArgs, StageArgs, SweepArgs, TrainSegmenterArgs};

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn parse_kind(s: &str) -> CliResult<SupervisionKind> {
    s.parse().map_err(|e: budgetseg_core::Error| usage(e.to_string()))
}

/// Runs `body`, then records its outcome in the manifest at `dir`.
fn with_manifest(dir: &Path, command: &str, config: &ExperimentConfig, body: impl FnOnce(&mut Vec<PathBuf>) -> CliResult<()>) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = RunManifest::start(command, config);
    manifest.write(dir)?;
    let result = body(&mut manifest.outputs);
    manifest.finish(result.as_ref().map(|_| ()).map_err(ToString::to_string));
    manifest.write(dir)?;
    result
}

pub fn cmd_generate(a: &GenerateArgs) -> CliResult<()> {
    let cfg = a.cfg.load()?;
    let data = cfg.data_config();
    let count = a.count.unwrap_or_else(|| cfg.pool_len());
    with_manifest(&a.out, "generate", &cfg, |outputs| {
        let mut stored: Vec<StoredScene> = generate_scenes(&data, 0..count as u64)?
            .into_iter()
            .map(|s| StoredScene::new(s, "pool", "full"))
            .collect();
        if a.test_count > 0 {
            stored.extend(held_out_scenes(&data, a.test_count)?.into_iter().map(|s| StoredScene::new(s, "test", "full")));
        }
        write_dataset(&a.out, &stored)?;
        outputs.extend(["manifest.csv", "labels.jsonl", "images", "masks"].map(PathBuf::from));
        log::info!("wrote {count} pool and {} test scenes to {}", a.test_count, a.out.display());
        Ok(())
    })
}

#[derive(Serialize)]
struct PlanRow {
    n: u64,
    m: u64,
    strong_kind: SupervisionKind,
    weak_kind: SupervisionKind,
    cost_seconds: String,
    budget_days_display: String,
}

pub fn cost_model_from(a: &PlanArgs) -> CliResult<CostModel> {
    let mut c = CostModel::default();
    let absent_default = a.classes_total.is_some() || a.classes_present.is_some();
    let set = |slot: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut c.classes_total, a.classes_total);
    set(&mut c.classes_present_avg, a.classes_present);
    set(&mut c.objects_avg, a.objects);
    set(&mut c.verify_time, a.verify_time);
    set(&mut c.count_extra_time, a.count_extra_time);
    set(&mut c.mask_time, a.mask_time);
    set(&mut c.box_time, a.box_time);
    if absent_default {
        c.absent_verify_classes = c.classes_total - c.classes_present_avg;
    }
    set(&mut c.absent_verify_classes, a.absent_classes);
    c.validate()?;
    Ok(c)
}

pub fn plan_rows(a: &PlanArgs) -> CliResult<Vec<Allocation>> {
    let model = cost_model_from(a)?;
    let strong = parse_kind(&a.strong)?;
    let weak = parse_kind(&a.weak)?;
    let seconds = match (a.budget_days, a.budget_seconds) {
        (Some(d), _) => d * SECONDS_PER_DAY,
        (None, Some(s)) => s,
        (None, None) => return Err(usage("one of --budget-days or --budget-seconds is required")),
    };
    if !(seconds.is_finite() && seconds >= 0.0) {
        return Err(usage("the budget must be a non-negative number"));
    }
    Ok(if a.match_display {
        let hundredths = match a.budget_days {
            Some(d) => (d * 100.0).round() as u64,
            None => seconds_to_days_display(seconds).hundredths,
        };
        allocations_matching_display(hundredths, strong, weak, &model, a.pool)
    } else {
        allocations_for_budget_with_pool(seconds, strong, weak, &model, a.pool)
    })
}

pub fn cmd_plan(a: &PlanArgs) -> CliResult<()> {
    let model = cost_model_from(a)?;
    let rows = plan_rows(a)?;
    let out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(out);
    for r in &rows {
        let cost = model.allocation_cost(r);
        w.serialize(PlanRow {
            n: r.n_strong,
            m: r.m_weak,
            strong_kind: r.strong_kind,
            weak_kind: r.weak_kind,
            cost_seconds: format!("{cost:.2}"),
            budget_days_display: seconds_to_days_display(cost).to_string(),
        })?;
    }
    if rows.is_empty() {
        w.write_record(["n", "m", "strong_kind", "weak_kind", "cost_seconds", "budget_days_display"])?;
    }
    w.flush()?;
    Ok(())
}

fn workspace(cfg: &ExperimentConfig, data: Option<&Path>) -> CliResult<Workspace> {
    let Some(dir) = data else {
        return Ok(Workspace::new(cfg)?);
    };
    let mut pool: Vec<Scene> = read_dataset(dir)?
        .into_iter()
        .filter(|s| s.split == "pool")
        .map(|s| s.scene)
        .collect();
    pool.sort_by_key(|s| s.index);
    if pool.len() < cfg.pool_len() {
        return Err(usage(format!("{} holds {} pool scenes, the config needs {}", dir.display(), pool.len(), cfg.pool_len())));
    }
    pool.truncate(cfg.pool_len());
    Ok(Workspace::with_pool(cfg, pool)?)
}

fn write_losses(path: &Path, report: &TrainReport) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "loss"])?;
    for (e, l) in report.epoch_losses.iter().enumerate() {
        w.write_record([e.to_string(), format!("{l:.8}")])?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_train_annotator(a: &StageArgs) -> CliResult<()> {
    let cfg = a.cfg.load()?;
    with_manifest(&a.out, "train-annotator", &cfg, |outputs| {
        let ws = Workspace::new(&cfg)?;
        let seed = cfg.repeat_seed(a.repeat);
        let split = split_dataset(&ws.pool, &cfg.allocation(), seed)?;
        let (f, report) = train_annotator(&cfg, &split.strong, seed)?;
        f.save(&a.out.join("annotator"))?;
        write_losses(&a.out.join("annotator_losses.csv"), &report)?;
        outputs.extend(["annotator.bin", "annotator.csv", "annotator.jsonl", "annotator_losses.csv"].map(PathBuf::from));
        Ok(())
    })
}

fn check_kind(net: &Network, want: NetKind, what: &str) -> CliResult<()> {
    if net.kind() != want {
        return Err(usage(format!("{what} checkpoint is a {:?} network, the config needs {want:?}", net.kind())));
    }
    Ok(())
}

/// Scene carrying pseudo-labels instead of ground truth.
fn pseudo_scene(source: &Scene, label: &PseudoLabel) -> (Scene, Option<Vec<f64>>) {
    let (instances, confidences, semantic) = match label {
        PseudoLabel::Instances(list) => {
            let inst: Vec<Instance> = list
                .iter()
                .map(|p| Instance {
                    class_id: p.class_id,
                    mask: p.mask.clone(),
                })
                .collect();
            let sem = semantic_from_instances(source.height, source.width, &inst);
            (inst, Some(list.iter().map(|p| p.confidence).collect()), sem)
        }
        PseudoLabel::Semantic(sem) => (Vec::new(), None, sem.clone()),
    };
    let scene = Scene {
        instances,
        semantic,
        ..source.clone()
    };
    (scene, confidences)
}

pub fn cmd_pseudo_label(a: &PseudoLabelArgs) -> CliResult<()> {
    let cfg = a.stage.cfg.load()?;
    let f = Network::load(&a.annotator)?;
    check_kind(&f, cfg.variant.annotator_kind(), "annotator")?;
    with_manifest(&a.stage.out, "pseudo-label", &cfg, |outputs| {
        let ws = Workspace::new(&cfg)?;
        let seed = cfg.repeat_seed(a.stage.repeat);
        let split = split_dataset(&ws.pool, &cfg.allocation(), seed)?;
        let mut inputs = Vec::new();
        let mut sources = Vec::new();
        for (scene, weak) in &split.weak {
            inputs.push(budgetseg_core::pipeline::WeakInput {
                image: image_tensor(scene.height, scene.width, &scene.image)?,
                weak: Some(weak.clone()),
            });
            sources.push(scene);
        }
        for scene in &split.unlabeled {
            inputs.push(budgetseg_core::pipeline::WeakInput {
                image: image_tensor(scene.height, scene.width, &scene.image)?,
                weak: None,
            });
            sources.push(scene);
        }
        let threshold = cfg.model.stop_threshold;
        let labels = pseudo_label(&f, &inputs, cfg.variant, threshold, cfg.confidence)?;
        let hidden: Vec<Scene> = sources.iter().map(|s| (*s).clone()).collect();
        if !hidden.is_empty() {
            let score = score_pseudo_labels(cfg.variant, &hidden, &labels, cfg.model.num_classes)?;
            log::info!("pseudo-label score against hidden masks: {score:.4}");
        }
        let stored: Vec<StoredScene> = sources
            .iter()
            .zip(&labels)
            .filter(|(_, l)| !l.is_empty())
            .map(|(s, l)| {
                let (scene, confidences) = pseudo_scene(s, l);
                StoredScene {
                    confidences,
                    ..StoredScene::new(scene, "pseudo", "pseudo")
                }
            })
            .collect();
        log::info!("{} of {} weak images received pseudo-labels", stored.len(), sources.len());
        write_dataset(&a.stage.out, &stored)?;
        outputs.extend(["manifest.csv", "labels.jsonl", "images", "masks"].map(PathBuf::from));
        Ok(())
    })
}

pub fn cmd_train_segmenter(a: &TrainSegmenterArgs) -> CliResult<()> {
    let cfg = a.stage.cfg.load()?;
    with_manifest(&a.stage.out, "train-segmenter", &cfg, |outputs| {
        let ws = Workspace::new(&cfg)?;
        let seed = cfg.repeat_seed(a.stage.repeat);
        let split = split_dataset(&ws.pool, &cfg.allocation(), seed)?;
        let mut union = union_samples(&split.strong, &[], &[], cfg.pseudo_weight)?;
        if let Some(dir) = &a.pseudo {
            for s in read_dataset(dir)?.into_iter().filter(|s| s.split == "pseudo") {
                let mut sample = Sample::from_scene(&s.scene)?;
                sample.weight = cfg.pseudo_weight;
                union.push(sample);
            }
        }
        log::info!("training the segmenter on {} images ({} strong)", union.len(), split.strong.len());
        let (g, report) = train_segmenter(&cfg, &union, seed)?;
        g.save(&a.stage.out.join("segmenter"))?;
        write_losses(&a.stage.out.join("segmenter_losses.csv"), &report)?;
        outputs.extend(["segmenter.bin", "segmenter.csv", "segmenter.jsonl", "segmenter_losses.csv"].map(PathBuf::from));
        Ok(())
    })
}

/// The variant a saved network is scored as.
fn scoring_variant(net: &Network, cfg: &ExperimentConfig) -> AnnotatorVariant {
    match net.kind() {
        NetKind::Semantic => AnnotatorVariant::Semantic,
        NetKind::Conditioned => AnnotatorVariant::Conditioned,
        NetKind::Recurrent => match cfg.variant {
            v @ (AnnotatorVariant::PlainIL | AnnotatorVariant::PlainILC) => v,
            _ => AnnotatorVariant::Plain,
        },
    }
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let cfg = a.cfg.load()?;
    let net = Network::load(&a.model)?;
    if net.config() != &cfg.model {
        log::warn!("checkpoint model config differs from the experiment config; scoring with the checkpoint's");
    }
    let ws = Workspace::with_pool(&cfg, Vec::new())?;
    let variant = scoring_variant(&net, &cfg);
    let eval = evaluate_detail(&net, variant, &ws.test, cfg.model.stop_threshold, cfg.confidence)?;
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    };
    write_report(&mut out, eval.metric, &eval.per_class, eval.mean)?;
    out.flush()?;
    Ok(())
}

pub const RESULTS_FILE: &str = "results.csv";

/// Runs every repeat of `cfg` into `out`, returning the aggregated result.
pub fn run_into(cfg: &ExperimentConfig, out: &Path, data: Option<&Path>, checkpoints: bool) -> CliResult<ExperimentResult> {
    let ws = workspace(cfg, data)?;
    let mut repeats = Vec::with_capacity(cfg.repeats);
    let ckpt = out.join("checkpoints");
    let mut losses = csv::Writer::from_path(out.join("losses.csv"))?;
    losses.write_record(["repeat_seed", "network", "epoch", "loss"])?;
    for r in 0..cfg.repeats {
        let seed = cfg.repeat_seed(r);
        let (res, f, g) = run_repeat_with_networks(cfg, &ws, r).map_err(|e| match e {
            budgetseg_core::Error::Diverged(msg) => CliError::Runtime(anyhow::anyhow!("training diverged in repeat seed {seed}: {msg}")),
            other => CliError::from(other),
        })?;
        if checkpoints {
            fs::create_dir_all(&ckpt)?;
            f.save(&ckpt.join(format!("f_seed{seed}")))?;
            g.save(&ckpt.join(format!("g_seed{seed}")))?;
        }
        for (name, series) in [("f", &res.f_losses), ("g", &res.g_losses)] {
            for (e, l) in series.iter().enumerate() {
                losses.write_record([seed.to_string(), name.to_string(), e.to_string(), format!("{l:.8}")])?;
            }
        }
        repeats.push(res);
    }
    losses.flush()?;
    let result = ExperimentResult {
        config_hash: config_hash(cfg),
        repeats,
        budget_seconds: cfg.budget_seconds(),
    };
    budgetseg_core::pipeline::write_results(File::create(out.join(RESULTS_FILE))?, &result.rows(cfg))?;
    let mut jsonl = File::create(out.join("configs.jsonl"))?;
    serde_json::to_writer(&mut jsonl, cfg).context("serialising the config")?;
    jsonl.write_all(b"\n")?;
    Ok(result)
}

pub fn cmd_run(a: &RunArgs) -> CliResult<()> {
    let cfg = a.cfg.load()?;
    with_manifest(&a.out, "run", &cfg, |outputs| {
        let res = run_into(&cfg, &a.out, a.data.as_deref(), !a.no_checkpoints)?;
        outputs.extend([RESULTS_FILE, "losses.csv", "configs.jsonl"].map(PathBuf::from));
        if !a.no_checkpoints {
            outputs.push("checkpoints".into());
        }
        log::info!("mean f {:.4}, mean g {:.4} over {} repeats", res.mean_f(), res.mean_g(), res.repeats.len());
        Ok(())
    })
}

/// One point of a sweep.
#[derive(Debug, Clone)]
pub struct Cell {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
}

pub fn sweep_cells(a: &SweepArgs, base: &ExperimentConfig) -> CliResult<Vec<Cell>> {
    if a.ns.is_empty() == a.budgets_days.is_empty() {
        return Err(usage("give exactly one of --ns or --budgets-days"));
    }
    let mut cells = Vec::new();
    for v in &a.variants {
        let variant: AnnotatorVariant = v.parse().map_err(|e: budgetseg_core::Error| usage(e.to_string()))?;
        let mut cfg = base.clone();
        cfg.variant = variant;
        if let Some(need) = variant.needs_weak() {
            if matches!(cfg.weak_kind, SupervisionKind::Unlabeled | SupervisionKind::ImageLevel) {
                cfg.weak_kind = need;
            }
        }
        let mut points = Vec::new();
        for &n in &a.ns {
            let m = match a.pool {
                Some(pool) if pool < n => return Err(usage(format!("--pool {pool} is smaller than N = {n}"))),
                Some(pool) => pool - n,
                None => cfg.m_weak,
            };
            points.push((n, m));
        }
        for &days in &a.budgets_days {
            let n = cfg.n_strong;
            let strong = cfg.cost_model.per_image_cost(SupervisionKind::FullMasks) * n as f64;
            let left = days * SECONDS_PER_DAY - strong;
            if left < 0.0 {
                return Err(usage(format!("{days} days cannot pay for {n} strong images")));
            }
            let weak = cfg.cost_model.per_image_cost(cfg.weak_kind);
            let affordable = if weak > 0.0 { (left / weak + 1e-6).floor() as usize } else { cfg.m_weak };
            let m = a.pool.map_or(affordable, |p| affordable.min(p.saturating_sub(n)));
            points.push((n, m));
        }
        for (n, m) in points {
            let mut c = cfg.clone();
            c.n_strong = n;
            c.m_weak = m;
            c.validate()?;
            let hash = config_hash(&c);
            cells.push(Cell {
                dir: a.out.join("cells").join(format!("{}-n{n}-m{m}-{hash}", variant.as_str().replace('+', "p"))),
                config: c,
            });
        }
    }
    Ok(cells)
}

fn cell_complete(cell: &Cell) -> bool {
    RunManifest::read(&cell.dir).is_some_and(|m| m.status == RunStatus::Complete && m.config_hash == config_hash(&cell.config))
        && cell.dir.join(RESULTS_FILE).exists()
}

#[derive(Debug, Serialize)]
struct CurveRow {
    variant: String,
    n: usize,
    m: usize,
    weak_kind: SupervisionKind,
    budget_seconds: String,
    budget_days: String,
    f_mean: String,
    f_std: String,
    g_mean: String,
    g_std: String,
    status: String,
    config_hash: String,
}

fn read_scores(dir: &Path) -> CliResult<(Vec<f64>, Vec<f64>)> {
    let mut r = csv::Reader::from_path(dir.join(RESULTS_FILE))?;
    let mut f = Vec::new();
    let mut g = Vec::new();
    for row in r.deserialize::<ResultRow>() {
        let row = row?;
        if row.repeat_seed == "mean" {
            continue;
        }
        let pick = |a: &str, b: &str| if a.is_empty() { b.to_string() } else { a.to_string() };
        let parse = |s: String| s.parse::<f64>().map_err(|e| CliError::Runtime(anyhow::anyhow!("bad score `{s}` in {}: {e}", dir.display())));
        f.push(parse(pick(&row.f_ap50, &row.f_miou))?);
        g.push(parse(pick(&row.g_ap50, &row.g_miou))?);
    }
    Ok((f, g))
}

pub fn cmd_sweep(a: &SweepArgs) -> CliResult<()> {
    let base = a.cfg.load()?;
    let cells = sweep_cells(a, &base)?;
    fs::create_dir_all(&a.out)?;
    log::info!("sweep of {} cells with {} workers", cells.len(), a.jobs.max(1));
    let next = AtomicUsize::new(0);
    let failures = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..a.jobs.max(1).min(cells.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                if cell_complete(cell) {
                    log::info!("skipping completed cell {}", cell.dir.display());
                    continue;
                }
                let _ = fs::remove_file(cell.dir.join("FAILED"));
                let result = with_manifest(&cell.dir, "sweep-cell", &cell.config, |outputs| {
                    run_into(&cell.config, &cell.dir, None, false)?;
                    outputs.extend([RESULTS_FILE, "losses.csv", "configs.jsonl"].map(PathBuf::from));
                    Ok(())
                });
                if let Err(e) = result {
                    log::error!("cell {} failed: {e}", cell.dir.display());
                    let _ = fs::write(cell.dir.join("FAILED"), format!("{e}\n"));
                    failures.lock().expect("no worker panics while holding the lock").push(i);
                }
            });
        }
    });

    let mut rows = Vec::with_capacity(cells.len());
    for cell in &cells {
        let c = &cell.config;
        let budget = c.budget_seconds();
        let mut row = CurveRow {
            variant: c.variant.to_string(),
            n: c.n_strong,
            m: c.m_weak,
            weak_kind: c.weak_kind,
            budget_seconds: format!("{budget:.2}"),
            budget_days: seconds_to_days_display(budget).to_string(),
            f_mean: String::new(),
            f_std: String::new(),
            g_mean: String::new(),
            g_std: String::new(),
            status: "failed".into(),
            config_hash: config_hash(c),
        };
        if cell_complete(cell) {
            let (f, g) = read_scores(&cell.dir)?;
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
            row.f_mean = format!("{:.6}", mean(&f));
            row.f_std = format!("{:.6}", std_dev(&f));
            row.g_mean = format!("{:.6}", mean(&g));
            row.g_std = format!("{:.6}", std_dev(&g));
            row.status = "complete".into();
        }
        rows.push((budget, row));
    }
    rows.sort_by(|(ba, a), (bb, b)| a.variant.cmp(&b.variant).then(ba.total_cmp(bb)).then(a.n.cmp(&b.n)));
    let mut w = csv::Writer::from_path(a.out.join("curve.csv"))?;
    for (_, r) in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut jsonl = File::create(a.out.join("configs.jsonl"))?;
    for cell in &cells {
        serde_json::to_writer(&mut jsonl, &cell.config).context("serialising a cell config")?;
        jsonl.write_all(b"\n")?;
    }
    let failed = failures.into_inner().expect("workers have finished");
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(anyhow::anyhow!("{} of {} sweep cells failed; see their FAILED markers", failed.len(), cells.len())))
    }
}

/// Annotator-only pass used by tests and benches: trains `f` for one repeat
/// and returns its pseudo-labels alongside the weak scenes.
pub fn annotate_repeat(cfg: &ExperimentConfig, ws: &Workspace, repeat: usize) -> CliResult<(Vec<PseudoLabel>, Vec<Scene>)> {
    let stage = annotator_stage(cfg, ws, cfg.repeat_seed(repeat))?;
    let labels = pseudo_label(&stage.f, &stage.weak_inputs, cfg.variant, cfg.model.stop_threshold, cfg.confidence)?;
    Ok((labels, stage.hidden))
}
