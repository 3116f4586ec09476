use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc};

use anyhow::{bail, Context, Result};
use refinery_core::annotation::{
    class_id_by_name, class_name, AnnotationHub, Annotator, HubAnnotator, OracleAnnotator,
};
use refinery_core::benchmark::{
    build_group, refinement_sequence, run_benchmark, supervised_sequence,
};
use refinery_core::config::{AnnotatorMode, RunConfig};
use refinery_core::detector::DetectorModels;
use refinery_core::evaluation::{evaluate_models, render_table};
use refinery_core::eventlog::{
    read_log, replay_refinement_stats, replay_report_rows, Event, EventLog,
};
use refinery_core::frontend::ReplaySource;
use refinery_core::orchestrator::{Command as EngineCommand, Engine, PHASE_SUPERVISED};
use refinery_core::store::DatasetStore;
use refinery_core::tracker::ConstantVelocityTracker;
use refinery_core::world::io::{load_sequence, save_sequence};
use refinery_core::world::{derive_seed, ExplorationSequence, World};
use serde::Serialize;
use serde_json::json;

use crate::args::{AnnotatorArg, Cli, Command, RunCommand, ServiceArgs, WorldCommand};
use crate::server::{self, BackgroundServer, ServiceContext};

pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::World(WorldCommand::Gen { out }) => world_gen(&cfg, &out),
        Command::Run(RunCommand::Supervised {
            out,
            sequence,
            class,
        }) => run_supervised(&cfg, &out, sequence.as_deref(), class.as_deref()),
        Command::Run(RunCommand::Refine {
            out,
            annotator,
            from,
            sequence,
            service,
        }) => run_refine(
            &with_service(cfg, annotator, &service),
            &out,
            from.as_deref(),
            sequence.as_deref(),
            service.ui_dir,
        ),
        Command::Run(RunCommand::Benchmark { out }) => benchmark(&cfg, &out),
        Command::Eval { models, sequence } => eval(&cfg, &models, &sequence),
        Command::Report { log } => report(&log),
        Command::Serve(service) => serve(&with_service(cfg, None, &service), service.ui_dir),
        Command::Shell {
            out,
            annotator,
            service,
        } => shell(
            &with_service(cfg, annotator, &service),
            &out,
            service.ui_dir,
        ),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn with_service(
    mut cfg: RunConfig,
    annotator: Option<AnnotatorArg>,
    service: &ServiceArgs,
) -> RunConfig {
    if let Some(a) = annotator {
        cfg.annotation.mode = a.into();
    }
    if let Some(b) = &service.bind {
        cfg.annotation.bind = b.clone();
    }
    cfg
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn write_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn world_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    let world = World::new(cfg.world.clone())?;
    let mut files = Vec::new();
    let mut written = BTreeSet::new();
    for g in 0..cfg.benchmark.groups.len() {
        let data = build_group(&world, cfg, g)?;
        for (c, seq) in &data.supervised {
            if written.insert(*c) {
                let name = format!("handheld-{c}.json.gz");
                save_sequence(seq, &out.join(&name))?;
                files.push(json!({"file": name, "kind": "supervised", "class": c, "frames": seq.frames.len()}));
            }
        }
        for (kind, seq) in [
            ("refinement", &data.refinement),
            ("held_out", &data.held_out),
        ] {
            let name = format!("{kind}-{g}.json.gz");
            save_sequence(seq, &out.join(&name))?;
            files.push(json!({"file": name, "kind": kind, "group": g, "frames": seq.frames.len()}));
        }
    }
    cfg.save(&out.join("config.json"))?;
    let manifest = json!({ "seed": cfg.seed, "files": files });
    write_pretty(&out.join("manifest.json"), &manifest)?;
    print_json(&manifest)
}

fn open_engine(cfg: &RunConfig, out: &Path) -> Result<Engine> {
    create_dir(out)?;
    Ok(Engine::new(cfg.clone())?.with_log(EventLog::open(&out.join("events.jsonl"))?))
}

fn save_engine(engine: &Engine, out: &Path) -> Result<()> {
    if let Some(models) = engine.models() {
        models.save(&out.join("models"))?;
    }
    engine.store().save(&out.join("store"))?;
    Ok(())
}

fn parse_class(name: &str, cfg: &RunConfig) -> Result<usize> {
    match class_id_by_name(name) {
        Some(c) if c < cfg.world.num_classes => Ok(c),
        _ => bail!(refinery_core::Error::InvalidInput(format!(
            "unknown class {name:?}"
        ))),
    }
}

fn sequence_name(path: &Path) -> String {
    let file = path
        .file_name()
        .map_or_else(|| "sequence".into(), |f| f.to_string_lossy().into_owned());
    file.trim_end_matches(".gz")
        .trim_end_matches(".json")
        .to_string()
}

/// Trains every class of the benchmark groups from generated handheld
/// sequences.
fn train_generated(engine: &mut Engine, classes: &[usize]) -> Result<serde_json::Value> {
    let cfg = engine.config().clone();
    let world = World::new(cfg.world.clone())?;
    let mut summaries = Vec::new();
    for &c in classes {
        let seq = supervised_sequence(&world, c, cfg.benchmark.supervised_frames, cfg.seed)?;
        summaries.push(engine.ingest_supervised(&format!("handheld-{c}"), &seq, c)?);
    }
    let report = engine.retrain()?;
    engine.record(Event::PhaseCompleted {
        phase: PHASE_SUPERVISED.into(),
        pseudo_label_map: None,
    })?;
    Ok(json!({ "sequences": summaries, "training": report }))
}

fn run_supervised(
    cfg: &RunConfig,
    out: &Path,
    sequence: Option<&Path>,
    class: Option<&str>,
) -> Result<()> {
    let mut engine = open_engine(cfg, out)?;
    let summary = match (sequence, class) {
        (Some(path), Some(class)) => {
            let c = parse_class(class, cfg)?;
            let seq = load_sequence(path)?;
            let (s, report) = engine.run_supervised_phase(&sequence_name(path), &seq, c)?;
            json!({ "sequences": [s], "training": report })
        }
        _ => {
            let classes: BTreeSet<usize> = cfg.benchmark.groups.iter().flatten().copied().collect();
            train_generated(&mut engine, &classes.into_iter().collect::<Vec<_>>())?
        }
    };
    save_engine(&engine, out)?;
    write_pretty(&out.join("summary.json"), &summary)?;
    print_json(&summary)
}

/// Annotator for the configured mode, plus the service keeping it reachable
/// in human mode.
fn make_annotator(
    cfg: &RunConfig,
    engine: &Engine,
    ui_dir: Option<PathBuf>,
) -> Result<(Box<dyn Annotator>, Option<BackgroundServer>)> {
    let a = &cfg.annotation;
    Ok(match a.mode {
        AnnotatorMode::Oracle => (
            Box::new(OracleAnnotator::new(a.oracle_noise, a.oracle_seed)),
            None,
        ),
        AnnotatorMode::Human => {
            let hub = Arc::new(AnnotationHub::new());
            let ctx = ServiceContext {
                hub: Arc::clone(&hub),
                controller: engine.controller(),
                ui_dir,
            };
            let server = BackgroundServer::start(&a.bind, ctx)?;
            eprintln!("annotation UI at http://{}/ui/", server.addr);
            (Box::new(HubAnnotator::new(hub, a.timeout())), Some(server))
        }
    })
}

fn run_refine(
    cfg: &RunConfig,
    out: &Path,
    from: Option<&Path>,
    sequence: Option<&Path>,
    ui_dir: Option<PathBuf>,
) -> Result<()> {
    let mut engine = open_engine(cfg, out)?;
    match from {
        Some(dir) => {
            engine = engine.with_store(DatasetStore::load(&dir.join("store"))?);
            engine.set_models(DetectorModels::load(&dir.join("models"))?);
        }
        None => {
            let classes = cfg.benchmark.groups[0].clone();
            train_generated(&mut engine, &classes)?;
        }
    }
    let (name, seq): (String, ExplorationSequence) = match sequence {
        Some(p) => (sequence_name(p), load_sequence(p)?),
        None => {
            let world = World::new(cfg.world.clone())?;
            ("refinement-0".into(), refinement_sequence(&world, cfg, 0)?)
        }
    };
    let (mut annotator, _server) = make_annotator(cfg, &engine, ui_dir)?;
    let mut tracker = ConstantVelocityTracker::new(cfg.tracker);
    let outcome = engine.run_refinement_phase(&name, &seq, annotator.as_mut(), &mut tracker)?;
    save_engine(&engine, out)?;
    write_pretty(&out.join("stats.json"), &outcome)?;
    print_json(&outcome)
}

fn benchmark(cfg: &RunConfig, out: &Path) -> Result<()> {
    let logs = out.join("logs");
    create_dir(&logs)?;
    // logs append; a rerun into the same directory starts them afresh
    for g in 0..cfg.benchmark.groups.len() {
        let p = logs.join(format!("group-{g}.jsonl"));
        if p.exists() {
            fs::remove_file(&p).with_context(|| format!("removing {}", p.display()))?;
        }
    }
    let result = run_benchmark(cfg, Some(&logs))?;
    write_pretty(&out.join("stats.json"), &result)?;
    let table = render_table(&result.rows());
    fs::write(out.join("report.txt"), &table)?;
    print!("{table}");
    if let Some(m) = result.mean_pseudo_label_map {
        println!("mean pseudo-label mAP: {:.1}", 100.0 * m);
    }
    Ok(())
}

fn eval(cfg: &RunConfig, models: &Path, sequence: &Path) -> Result<()> {
    let models = DetectorModels::load(models)?;
    let seq = load_sequence(sequence)?;
    let report = evaluate_models(&models, &seq, &ReplaySource, &cfg.inference, &cfg.eval)?;
    print_json(&report)
}

fn log_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
            .collect();
        files.sort();
        Ok(files)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

fn report(log: &Path) -> Result<()> {
    let files = log_files(log)?;
    if files.is_empty() {
        bail!(refinery_core::Error::InvalidInput(format!(
            "no event logs in {}",
            log.display()
        )));
    }
    let mut rows = Vec::new();
    let mut unevaluated = Vec::new();
    for f in &files {
        let contents = read_log(f)?;
        if contents.corrupt_tail.is_some() {
            log::warn!("{}: ignoring a corrupt last line", f.display());
        }
        let r = replay_report_rows(&contents.entries);
        if r.is_empty() {
            for stats in replay_refinement_stats(&contents.entries) {
                unevaluated.push(json!({ "log": f.display().to_string(), "stats": stats }));
            }
        }
        rows.extend(r);
    }
    if !rows.is_empty() {
        print!("{}", render_table(&rows));
    }
    for u in &unevaluated {
        println!("{}", serde_json::to_string(u)?);
    }
    if rows.is_empty() && unevaluated.is_empty() {
        bail!(refinery_core::Error::InvalidInput(
            "the logs contain no refinement phase".into()
        ));
    }
    Ok(())
}

fn serve(cfg: &RunConfig, ui_dir: Option<PathBuf>) -> Result<()> {
    let ctx = ServiceContext {
        hub: Arc::new(AnnotationHub::new()),
        controller: Arc::new(Default::default()),
        ui_dir,
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(server::serve(&cfg.annotation.bind, ctx))
}

fn reply(value: serde_json::Value) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{value}");
    let _ = out.flush();
}

fn error_reply(e: &anyhow::Error) {
    reply(crate::error_json(e));
}

/// Text command channel. Phases run on a worker thread so `stop` and
/// `status` stay responsive while one is active.
fn shell(cfg: &RunConfig, out: &Path, ui_dir: Option<PathBuf>) -> Result<()> {
    let mut engine = open_engine(cfg, out)?;
    let controller = engine.controller();
    let (mut annotator, _server) = make_annotator(cfg, &engine, ui_dir)?;
    let world = World::new(cfg.world.clone())?;
    let (tx, rx) = mpsc::channel::<EngineCommand>();

    let worker_cfg = cfg.clone();
    let worker = std::thread::spawn(move || {
        for (n, cmd) in rx.into_iter().enumerate() {
            let result = execute(&mut engine, &world, &worker_cfg, cmd, n, annotator.as_mut());
            engine.controller().release_claim();
            match result {
                Ok(v) => reply(v),
                Err(e) => error_reply(&e),
            }
        }
        engine
    });

    for line in std::io::stdin().lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cmd: EngineCommand = match line.parse() {
            Ok(c) => c,
            Err(e) => {
                error_reply(&anyhow::Error::new(e));
                continue;
            }
        };
        match controller.handle_command(&cmd) {
            Err(e) => error_reply(&anyhow::Error::new(e)),
            Ok(_) => match cmd {
                EngineCommand::Status => reply(serde_json::to_value(controller.snapshot())?),
                EngineCommand::Stop => {
                    reply(json!({ "stop_requested": controller.stop_requested() }))
                }
                phase => {
                    reply(json!({ "accepted": line.trim(), "state": controller.state() }));
                    tx.send(phase).context("worker thread ended")?;
                }
            },
        }
    }
    drop(tx);
    let engine = worker
        .join()
        .map_err(|_| anyhow::anyhow!("worker thread panicked"))?;
    save_engine(&engine, out)
}

fn execute(
    engine: &mut Engine,
    world: &World,
    cfg: &RunConfig,
    cmd: EngineCommand,
    n: usize,
    annotator: &mut dyn Annotator,
) -> Result<serde_json::Value> {
    match cmd {
        EngineCommand::Train { class_name: name } => {
            let c = parse_class(&name, cfg)?;
            let seed = derive_seed(cfg.seed, &format!("shell/{n}"));
            let seq = supervised_sequence(world, c, cfg.benchmark.supervised_frames, seed)?;
            let (summary, report) =
                engine.run_supervised_phase(&format!("handheld-{}-{n}", class_name(c)), &seq, c)?;
            Ok(json!({ "trained": summary, "training": report }))
        }
        EngineCommand::Refine { path } => {
            let seq = load_sequence(&path)?;
            let mut tracker = ConstantVelocityTracker::new(cfg.tracker);
            let outcome = engine.run_refinement_phase(
                &sequence_name(&path),
                &seq,
                annotator,
                &mut tracker,
            )?;
            Ok(serde_json::to_value(outcome)?)
        }
        EngineCommand::Stop | EngineCommand::Status => unreachable!("handled by the reader"),
    }
}
