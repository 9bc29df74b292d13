use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use capsie::eval::{evaluate, reports_to_csv, EvalSelection, MetricReport};
use capsie::synthgen::{generate_dataset, Dataset};
use capsie::train::{
    capsule_sweep, eval_series, step_series, CheckpointState, LogRecord, SweepReport, SweepRun,
    TrainConfig, Trainer,
};
use log::info;
use serde_json::{json, Value};

use crate::args::{Cli, Command, EvalArgs, GenDataArgs, PretrainArgs, ReportArgs, SweepArgs};
use crate::charts::{line_chart, Series};
use crate::config::{dataset_file, resolve_protocol, resolve_train};
use crate::rundir::{run_of_checkpoint, write_json, Input, RunDir};
use crate::usage;

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Pretrain(a) => pretrain(&a),
        Command::EvalClassify(a) => eval(&a, EvalKind::Classify),
        Command::EvalRotation(a) => eval(&a, EvalKind::Rotation),
        Command::EvalColour(a) => eval(&a, EvalKind::Colour),
        Command::EvalRetrieval(a) => eval(&a, EvalKind::Retrieval),
        Command::Sweep(a) => sweep(&a),
        Command::Report(a) => report(&a),
    }
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

fn projector_name(config: &TrainConfig) -> Result<String> {
    Ok(serde_json::to_value(config.model.projector)?
        .as_str()
        .unwrap_or_default()
        .to_string())
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(usage(format!("dataset {} does not exist", path.display())));
    }
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let ds = generate_dataset(a.classes, a.objects, a.views, a.image_size, a.seed)
        .map_err(|e| usage(e.to_string()))?;
    let run = RunDir::create(&a.out)?;
    let path = run.root.join("dataset.bin");
    let sha256 = ds
        .save(&path)
        .with_context(|| format!("writing {}", path.display()))?;
    let config = json!({
        "seed": a.seed,
        "classes": a.classes,
        "objects_per_class": a.objects,
        "views": a.views,
        "image_size": a.image_size,
    });
    run.write_manifest("gen-data", &config, &[])?;
    info!("wrote {} views to {}", ds.len(), path.display());
    print_json(
        &json!({ "archive": path, "sha256": sha256, "records": ds.len(), "manifest": ds.manifest }),
    )
}

/// Writes loss and online-probe curves for one training log.
/// One chart per metric: epoch-mean losses, then the online probes when
/// the log has eval records. An empty log is a usage error.
pub(crate) fn curves(log: &[LogRecord]) -> Result<Vec<(&'static str, String)>> {
    if log.is_empty() {
        return Err(usage("training log is empty, nothing to chart"));
    }
    let steps = step_series(log);
    let mut by_epoch: Vec<([f64; 3], usize)> = Vec::new();
    for s in &steps {
        if by_epoch.len() <= s.epoch {
            by_epoch.resize(s.epoch + 1, ([0.0; 3], 0));
        }
        let e = &mut by_epoch[s.epoch];
        e.0[0] += s.losses.total;
        e.0[1] += s.losses.invariant_ce;
        e.0[2] += s.losses.equivariant_mse;
        e.1 += 1;
    }
    let mut charts = Vec::new();
    let losses = [
        ("loss_total", "Total loss (epoch mean)"),
        ("loss_invariant_ce", "Invariant cross-entropy (epoch mean)"),
        ("loss_equivariant_mse", "Equivariant MSE (epoch mean)"),
    ];
    for (k, (name, title)) in losses.into_iter().enumerate() {
        let points = by_epoch
            .iter()
            .enumerate()
            .filter(|(_, e)| e.1 > 0)
            .map(|(i, e)| ((i + 1) as f64, e.0[k] / e.1 as f64))
            .collect();
        let series = [Series {
            label: name.into(),
            points,
        }];
        charts.push((name, line_chart(title, "epoch", "loss", &series)));
    }
    let online = eval_series(log);
    if !online.is_empty() {
        let probes: [(&str, &str, fn(&capsie::train::OnlineEvalRecord) -> f64); 2] = [
            (
                "online_top1",
                "Online classification top-1 on held-out objects",
                |r| r.classification_top1,
            ),
            (
                "online_rotation_r2",
                "Online rotation R² on held-out objects",
                |r| r.rotation_r2,
            ),
        ];
        for (name, title, get) in probes {
            let points = online.iter().map(|r| (r.epoch as f64, get(r))).collect();
            let series = [Series {
                label: name.into(),
                points,
            }];
            charts.push((name, line_chart(title, "epoch", "score", &series)));
        }
    }
    Ok(charts)
}

fn emit_curves(log: &[LogRecord], dir: &Path) -> Result<()> {
    for (name, svg) in curves(log)? {
        std::fs::write(dir.join(format!("{name}.svg")), svg)?;
    }
    Ok(())
}

fn write_report(run: &RunDir, name: &str, report: &MetricReport) -> Result<()> {
    report.save_json(&run.reports().join(format!("{name}.json")))?;
    std::fs::write(
        run.reports().join(format!("{name}.csv")),
        reports_to_csv(std::slice::from_ref(report))?,
    )?;
    Ok(())
}

fn pretrain(a: &PretrainArgs) -> Result<()> {
    let config = resolve_train(&a.train)?;
    let protocol = resolve_protocol(&a.protocol)?;
    let data_path = config
        .dataset
        .clone()
        .expect("resolved configs carry a dataset");
    let ds = load_dataset(&data_path)?;
    let out = a.out.clone().unwrap_or_else(|| {
        PathBuf::from("runs").join(format!("pretrain-{}", &config.hash()[..12]))
    });
    let run = RunDir::create(&out)?;
    let mut manifest = serde_json::to_value(&config)?;
    if a.eval {
        manifest["protocol"] = serde_json::to_value(&protocol)?;
    }
    run.write_manifest("pretrain", &manifest, &[Input::new("dataset", &data_path)?])?;

    let mut trainer = Trainer::new(config.clone(), &ds)?;
    let batches = trainer.batches_per_epoch();
    let mut writer = BufWriter::new(
        File::create(run.log()).with_context(|| format!("creating {}", run.log().display()))?,
    );
    let mut log = Vec::new();
    let ckpt_dir = run.checkpoints();
    let result = trainer.run(
        |r| {
            writeln!(writer, "{}", r.to_json_line())?;
            match r {
                LogRecord::Step(s) if s.batch + 1 == batches => {
                    info!(
                        "epoch {} step {} loss {:.5}",
                        s.epoch + 1,
                        s.step + 1,
                        s.losses.total
                    );
                }
                LogRecord::Eval(e) => info!(
                    "online eval at epoch {}: top-1 {:.4} rotation R² {:.4}",
                    e.epoch, e.classification_top1, e.rotation_r2
                ),
                _ => {}
            }
            log.push(r.clone());
            Ok(())
        },
        |state| {
            let path = ckpt_dir.join(format!("epoch-{:04}.ckpt", state.position.epoch));
            state.save(&path)?;
            info!("checkpoint {}", path.display());
            Ok(())
        },
    );
    writer.flush()?;
    drop(writer);
    if let Err(e) = result {
        // keep what was logged so the failure can be inspected
        if !log.is_empty() {
            emit_curves(&log, &run.charts())?;
        }
        if let capsie::Error::Diverged {
            step,
            epoch,
            batch,
            views,
            components,
            cause,
        } = &e
        {
            let dump = json!({
                "step": step, "epoch": epoch, "batch": batch,
                "views": views, "components": components, "cause": cause,
            });
            write_json(&run.root.join("divergence.json"), &dump)?;
        }
        return Err(e).context("training failed");
    }
    let state = trainer.checkpoint()?;
    let final_path = run.checkpoints().join("final.ckpt");
    state.save(&final_path)?;
    emit_curves(&log, &run.charts())?;

    let mut summary = json!({
        "run_dir": run.root,
        "checkpoint": final_path,
        "steps": state.position.step,
        "final_loss": step_series(&log).last().map(|s| s.losses.total),
        "online": eval_series(&log).last(),
    });
    if a.eval {
        let (model, params) = state.model()?;
        let split = ds.object_split(config.val_fraction)?;
        let results = evaluate(&model, &params, &ds, &split, &protocol, EvalSelection::ALL)?;
        let report = results.report(
            &run_name(&run.root),
            &projector_name(&config)?,
            config.model.n_caps,
            &protocol,
        );
        write_report(&run, "metrics", &report)?;
        write_json(&run.reports().join("metrics.results.json"), &results)?;
        summary["report"] = serde_json::to_value(&report)?;
    }
    print_json(&summary)
}

#[derive(Clone, Copy)]
enum EvalKind {
    Classify,
    Rotation,
    Colour,
    Retrieval,
}

impl EvalKind {
    fn command(self) -> &'static str {
        match self {
            Self::Classify => "eval-classify",
            Self::Rotation => "eval-rotation",
            Self::Colour => "eval-colour",
            Self::Retrieval => "eval-retrieval",
        }
    }

    fn selection(self) -> EvalSelection {
        let mut s = EvalSelection::NONE;
        match self {
            Self::Classify => s.classify = true,
            Self::Rotation => s.rotation = true,
            Self::Colour => s.colour = true,
            Self::Retrieval => s.retrieval = true,
        }
        s
    }
}

fn eval(a: &EvalArgs, kind: EvalKind) -> Result<()> {
    if !a.ckpt.exists() {
        return Err(usage(format!(
            "checkpoint {} does not exist",
            a.ckpt.display()
        )));
    }
    let state = CheckpointState::load(&a.ckpt)
        .with_context(|| format!("loading checkpoint {}", a.ckpt.display()))?;
    let data_path = match (&a.dataset, &state.config.dataset) {
        (Some(p), _) => dataset_file(p),
        (None, Some(p)) => p.clone(),
        (None, None) => return Err(usage("the checkpoint records no dataset; pass --dataset")),
    };
    let ds = load_dataset(&data_path)?;
    if ds.manifest != state.dataset {
        bail!(
            "dataset {} is not the one the checkpoint was trained on",
            data_path.display()
        );
    }
    let protocol = resolve_protocol(&a.protocol)?;
    let run = RunDir::create(a.out.clone().unwrap_or_else(|| run_of_checkpoint(&a.ckpt)))?;
    run.write_manifest(
        kind.command(),
        &json!({ "protocol": protocol, "train_config": state.config }),
        &[
            Input::new("checkpoint", &a.ckpt)?,
            Input::new("dataset", &data_path)?,
        ],
    )?;

    let (model, params) = state.model()?;
    let split = ds.object_split(state.config.val_fraction)?;
    let results = evaluate(&model, &params, &ds, &split, &protocol, kind.selection())?;
    let report = results.report(
        &run_name(&run.root),
        &projector_name(&state.config)?,
        state.config.model.n_caps,
        &protocol,
    );
    write_report(&run, kind.command(), &report)?;
    write_json(
        &run.reports()
            .join(format!("{}.results.json", kind.command())),
        &results,
    )?;
    let mut out = serde_json::to_value(&report)?;
    out["details"] = serde_json::to_value(&results)?;
    print_json(&out)
}

fn sweep(a: &SweepArgs) -> Result<()> {
    if a.caps.is_empty() || a.caps.contains(&0) {
        return Err(usage("--caps needs positive capsule counts"));
    }
    let base = resolve_train(&a.train)?;
    let protocol = resolve_protocol(&a.protocol)?;
    let data_path = base
        .dataset
        .clone()
        .expect("resolved configs carry a dataset");
    let ds = load_dataset(&data_path)?;
    let root = RunDir::create(&a.out)?;
    let dataset_input = [Input::new("dataset", &data_path)?];
    root.write_manifest(
        "sweep",
        &json!({ "base": base, "n_caps": a.caps, "protocol": protocol }),
        &dataset_input,
    )?;
    let projector = projector_name(&base)?;
    let report = capsule_sweep(&base, &a.caps, &ds, &protocol, EvalSelection::ALL, |r| {
        save_sweep_run(&root, r, &data_path, &projector)
            .map_err(|e| capsie::Error::Storage(std::io::Error::other(format!("{e:#}"))))
    })?;
    write_json(&root.reports().join("sweep.json"), &report)?;
    let rows = sweep_reports(&report);
    std::fs::write(root.reports().join("sweep.csv"), reports_to_csv(&rows)?)?;
    let curves: Vec<Series> = report
        .rows
        .iter()
        .map(|r| Series {
            label: format!("n_caps={}", r.n_caps),
            points: r
                .online
                .iter()
                .map(|e| (e.epoch as f64, e.classification_top1))
                .collect(),
        })
        .collect();
    std::fs::write(
        root.charts().join("online_top1.svg"),
        line_chart(
            "Online classification top-1 by capsule count",
            "epoch",
            "top-1",
            &curves,
        ),
    )?;
    print_json(&json!({
        "sweep_dir": root.root,
        "rows": report.rows.iter().map(|r| json!({
            "n_caps": r.n_caps,
            "pose_dim": r.pose_dim,
            "final_online_top1": r.final_online_top1,
            "report": r.report,
        })).collect::<Vec<Value>>(),
    }))
}

/// Lays out one finished sweep run as its own run directory.
fn save_sweep_run(root: &RunDir, r: &SweepRun, data_path: &Path, projector: &str) -> Result<()> {
    let run = RunDir::create(root.root.join(format!("n_caps-{}", r.row.n_caps)))?;
    let inputs = [Input::new("dataset", data_path)?];
    run.write_manifest("pretrain", &serde_json::to_value(&r.state.config)?, &inputs)?;
    let mut f = BufWriter::new(File::create(run.log())?);
    for rec in &r.log {
        writeln!(f, "{}", rec.to_json_line())?;
    }
    f.flush()?;
    r.state.save(&run.checkpoints().join("final.ckpt"))?;
    emit_curves(&r.log, &run.charts())?;
    let mut m = r.row.report.clone();
    m.run = run_name(&run.root);
    m.projector = projector.to_string();
    write_report(&run, "metrics", &m)?;
    info!(
        "n_caps {} done: final online top-1 {:?}",
        r.row.n_caps, r.row.final_online_top1
    );
    Ok(())
}

fn sweep_reports(report: &SweepReport) -> Vec<MetricReport> {
    report
        .reports()
        .into_iter()
        .map(|mut m| {
            m.run = format!("n_caps-{}", m.n_caps);
            m
        })
        .collect()
}

/// All metric reports of one run directory merged into one row, or the
/// rows of a sweep directory.
fn collect_run(dir: &Path) -> Result<Vec<MetricReport>> {
    let reports = dir.join("reports");
    if !reports.is_dir() {
        return Err(usage(format!(
            "{} is not a run directory (no reports/)",
            dir.display()
        )));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(&reports)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.sort();
    let mut merged: Option<MetricReport> = None;
    for f in &files {
        let name = f
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        if !name.ends_with(".json") || name.ends_with(".results.json") || name == "sweep.json" {
            continue;
        }
        let r = MetricReport::load_json(f)
            .with_context(|| format!("reading report {}", f.display()))?;
        match &mut merged {
            Some(m) => m.merge(&r),
            None => merged = Some(r),
        }
    }
    if let Some(mut m) = merged {
        m.run = run_name(dir);
        return Ok(vec![m]);
    }
    let sweep = reports.join("sweep.json");
    if sweep.exists() {
        let report: SweepReport = serde_json::from_slice(&std::fs::read(&sweep)?)?;
        return Ok(sweep_reports(&report));
    }
    bail!("run {} has no metric reports yet", dir.display())
}

fn report(a: &ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for dir in &a.runs {
        rows.extend(collect_run(dir)?);
    }
    let csv = reports_to_csv(&rows)?;
    if let Some(out) = &a.out {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(out, &csv).with_context(|| format!("writing {}", out.display()))?;
    }
    print!("{csv}");
    Ok(())
}
