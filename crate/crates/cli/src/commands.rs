use std::path::Path;

use anyhow::{Context, Result};
use partfit_core::baseline::evaluate_all;
use partfit_core::dataprep::{load_raw, save_raw, DatasetPair, LabelTables, Part};
use partfit_core::error::Error;
use partfit_core::geometry::PointCloud;
use partfit_core::manifest::sha256_hex;
use partfit_core::model::TrainedModel;
use partfit_core::pipeline::{
    generate, metrics_for, prepare, replay_seeds, session_replay, train_encoder, train_relnet, DeskConfig,
};
use partfit_core::relnet::RelNetSnapshot;
use partfit_core::retrieval::{build_index, own_slot, prepare_query, QueryPart, RankedCandidate, Session, WarehouseIndex};
use partfit_core::selftest::{run_all, SuiteSizes};
use partfit_service::{AppState, CreateSession, Engine, ServiceConfig};
use serde::Serialize;

use crate::workdir::*;
use crate::{Command, Global, RetrieveArgs, SelftestArgs, ServeArgs};

/// Machine-readable category for an error: the core error's own category
/// when there is one in the chain.
pub fn category(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<Error>())
        .map(Error::category)
        .or_else(|| e.chain().find_map(|c| c.downcast_ref::<std::io::Error>()).map(|_| "io"))
        .unwrap_or("internal")
}

fn stochastic(cmd: &Command) -> bool {
    matches!(
        cmd,
        Command::GenData | Command::Prepare | Command::TrainEncoder | Command::TrainRelnet | Command::SessionReplay | Command::Eval
    )
}

fn name(cmd: &Command) -> &'static str {
    match cmd {
        Command::GenData => "gen-data",
        Command::Prepare => "prepare",
        Command::TrainEncoder => "train-encoder",
        Command::TrainRelnet => "train-relnet",
        Command::BuildIndex => "build-index",
        Command::Retrieve(_) => "retrieve",
        Command::SessionReplay => "session-replay",
        Command::Eval => "eval",
        Command::Serve(_) => "serve",
        Command::Selftest(_) => "selftest",
    }
}

pub fn run(g: &Global, cmd: Command) -> Result<()> {
    if let Some(n) = g.threads {
        if n == 0 {
            return Err(Error::Usage("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let wd = Workdir::open(&g.workdir)?;
    let (cfg, seeded) = resolve_config(&wd, g.config.as_deref(), g.seed)?;
    if stochastic(&cmd) && !seeded {
        return Err(Error::Usage(format!("{} needs --seed or a config that sets one", name(&cmd))).into());
    }
    let mut run = Run::start(&wd, name(&cmd), &cfg)?;
    match cmd {
        Command::GenData => gen_data(&wd, &cfg, &mut run)?,
        Command::Prepare => prepare_cmd(&wd, &cfg, &mut run)?,
        Command::TrainEncoder => train_encoder_cmd(&wd, &cfg, &mut run)?,
        Command::TrainRelnet => train_relnet_cmd(&wd, &cfg, &mut run)?,
        Command::BuildIndex => build_index_cmd(&wd, &mut run)?,
        Command::Retrieve(a) => retrieve(&mut run, &a)?,
        Command::SessionReplay => replay(&wd, &cfg, &mut run)?,
        Command::Eval => eval(&wd, &cfg, &mut run)?,
        Command::Serve(a) => serve(&wd, run, &a)?,
        Command::Selftest(a) => selftest(&mut run, &a)?,
    }
    Ok(())
}

fn gen_data(wd: &Workdir, cfg: &DeskConfig, run: &mut Run) -> Result<()> {
    let raw = generate(cfg)?;
    save_raw(&wd.path(RAW), &raw)?;
    save_config(wd, cfg)?;
    run.lap("generate");
    run.output(RAW)?;
    log::info!("{} raw objects in {}", raw.len(), wd.path(RAW).display());
    finish(run)
}

fn prepare_cmd(wd: &Workdir, cfg: &DeskConfig, run: &mut Run) -> Result<()> {
    let raw = load_raw(&run.input(RAW)?)?;
    let data = prepare(&raw, cfg)?;
    let dir = wd.path(DATASET);
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    data.save(&dir)?;
    run.lap("prepare");
    run.output(DATASET)?;
    log::info!(
        "{} items ({} held out), {} warehouse parts, {} excluded",
        data.items.len(),
        data.holdout.len(),
        data.warehouse.len(),
        data.excluded.len()
    );
    finish(run)
}

fn train_encoder_cmd(wd: &Workdir, cfg: &DeskConfig, run: &mut Run) -> Result<()> {
    let data = DatasetPair::load(&run.input(DATASET)?)?;
    let (encoder, report) = train_encoder(&data, cfg)?;
    run.lap("stage1");
    if let Some(last) = report.epochs.last() {
        log::info!("stage 1 final epoch: {last:?}");
    }
    let model = TrainedModel {
        labels: data.labels.clone(),
        encoder,
        relnet: None,
        stats: Some(report.stats),
    };
    model.save(&wd.path(MODEL))?;
    write_json(&wd.path("reports/stage1.json"), &report)?;
    run.output(MODEL)?;
    finish(run)
}

fn train_relnet_cmd(wd: &Workdir, cfg: &DeskConfig, run: &mut Run) -> Result<()> {
    let data = DatasetPair::load(&run.input(DATASET)?)?;
    let mut model = TrainedModel::load(&run.input(MODEL)?)?;
    same_labels(&model.labels, &data.labels)?;
    let (relnet, report) = train_relnet(&data, &model.encoder_snapshot(), cfg)?;
    run.lap("stage2");
    if let Some(last) = report.epochs.last() {
        log::info!("stage 2 final epoch: {last:?}");
    }
    model.relnet = Some(relnet);
    model.save(&wd.path(MODEL))?;
    write_json(&wd.path("reports/stage2.json"), &report)?;
    run.output(MODEL)?;
    finish(run)
}

fn build_index_cmd(wd: &Workdir, run: &mut Run) -> Result<()> {
    let data = DatasetPair::load(&run.input(DATASET)?)?;
    let model = TrainedModel::load(&run.input(MODEL)?)?;
    same_labels(&model.labels, &data.labels)?;
    let parts: Vec<&Part> = data.warehouse.iter().collect();
    let index = build_index(&parts, &model.encoder_snapshot())?;
    run.lap("index");
    index.save(&wd.path(INDEX))?;
    run.output(INDEX)?;
    log::info!("indexed {} parts", index.len());
    finish(run)
}

fn same_labels(model: &LabelTables, data: &LabelTables) -> Result<()> {
    if model != data {
        return Err(Error::Config("model and dataset were built from different label tables".into()).into());
    }
    Ok(())
}

/// Dataset, model and index, checked against each other.
struct Loaded {
    data: DatasetPair,
    model: TrainedModel,
    relnet: RelNetSnapshot,
    index: WarehouseIndex,
}

fn load_all(run: &mut Run) -> Result<Loaded> {
    let data = DatasetPair::load(&run.input(DATASET)?)?;
    let model = TrainedModel::load(&run.input(MODEL)?)?;
    let index = WarehouseIndex::load(&run.input(INDEX)?)?;
    same_labels(&model.labels, &data.labels)?;
    index
        .check_encoder(&model.encoder_hash())
        .context("index was built with a different encoder than model.ckpt holds; rerun build-index")?;
    let (_, relnet) = model.snapshots()?;
    Ok(Loaded {
        data,
        model,
        relnet,
        index,
    })
}

#[derive(Serialize)]
struct CandidateRow {
    rank: usize,
    part_id: u64,
    label: String,
    object_class: String,
    log_prob: f64,
    suitability: f64,
}

#[derive(Serialize)]
struct RetrieveOutput {
    query: String,
    class: String,
    slots: usize,
    candidates: Vec<CandidateRow>,
}

fn retrieve(run: &mut Run, a: &RetrieveArgs) -> Result<()> {
    if a.k == 0 {
        return Err(Error::Usage("-k must be at least 1".into()).into());
    }
    let l = load_all(run)?;
    let (session, query) = match (&a.object, &a.query) {
        (Some(id), _) => (object_session(&l, id, &a.remove)?, format!("object {id} without parts {:?}", a.remove)),
        (None, Some(path)) => (file_session(&l, path)?, format!("file {}", path.display())),
        (None, None) => return Err(Error::Usage("give --object or --query".into()).into()),
    };
    let ranking = session.candidates(&l.index, &l.relnet, a.k)?;
    run.lap("rank");
    let out = RetrieveOutput {
        query,
        class: l.model.labels.classes[session.class_id as usize].clone(),
        slots: session.slots.len(),
        candidates: ranking.iter().map(|c| row(&l, c)).collect(),
    };
    let text = serde_json::to_string_pretty(&out)? + "\n";
    run.manifest.output_bytes("ranking", text.as_bytes());
    match &a.out {
        Some(p) => std::fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    finish(run)
}

fn row(l: &Loaded, c: &RankedCandidate) -> CandidateRow {
    let r = l.index.get(c.part_id);
    let labels = &l.model.labels;
    CandidateRow {
        rank: c.rank,
        part_id: c.part_id,
        label: r.map(|r| labels.part_labels[r.part_label as usize].clone()).unwrap_or_default(),
        object_class: r.map(|r| labels.classes[r.object_class as usize].clone()).unwrap_or_default(),
        log_prob: c.log_prob,
        suitability: c.suitability,
    }
}

/// A dataset object with the parts at `remove` taken out; each removed
/// part's own placement becomes a slot.
fn object_session(l: &Loaded, id: &str, remove: &[usize]) -> Result<Session> {
    let o = l
        .data
        .items
        .iter()
        .find(|o| o.object_id == id)
        .ok_or_else(|| Error::InvalidInput(format!("no object {id:?} in the dataset")))?;
    if let Some(&i) = remove.iter().find(|&&i| i >= o.parts.len()) {
        return Err(Error::InvalidInput(format!("{id} has {} parts; cannot remove part {i}", o.parts.len())).into());
    }
    let mut parts = Vec::new();
    for (i, p) in o.parts.iter().enumerate().filter(|(i, _)| !remove.contains(i)) {
        let r = l.index.get(p.part_id).ok_or(Error::UnknownPart(p.part_id))?;
        parts.push(QueryPart {
            part_id: None,
            feature: r.feature.clone(),
            centroid: p.pose.centroid,
            cloud: p.cloud.scaled_translated(p.pose.scale as f64, p.pose.centroid.map(|v| v as f64)),
            part_label: Some(p.part_label),
        });
        log::debug!("kept part {i} ({})", p.part_id);
    }
    if parts.is_empty() {
        return Err(Error::InvalidInput("at least one part must remain".into()).into());
    }
    let mut seen = Vec::new();
    let slots = remove
        .iter()
        .filter(|&&i| {
            let fresh = !seen.contains(&i);
            seen.push(i);
            fresh
        })
        .map(|&i| own_slot(&o.parts[i]))
        .collect();
    Ok(Session::new(o.object_class, parts, slots)?)
}

fn file_session(l: &Loaded, path: &Path) -> Result<Session> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let req: CreateSession =
        serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    let labels = &l.model.labels;
    let class = labels
        .class_id(&req.class)
        .ok_or_else(|| Error::InvalidInput(format!("unknown class {:?}; known: {:?}", req.class, labels.classes)))?;
    let mut parts = Vec::with_capacity(req.parts.len());
    for (i, p) in req.parts.into_iter().enumerate() {
        let label = match &p.label {
            Some(n) => Some(
                labels
                    .part_label_id(n)
                    .ok_or_else(|| Error::InvalidInput(format!("parts[{i}]: unknown label {n:?}")))?,
            ),
            None => None,
        };
        let cloud = PointCloud::new(p.points).map_err(|e| Error::InvalidInput(format!("parts[{i}]: {e}")))?;
        parts.push((cloud, label));
    }
    let q = prepare_query(parts, &req.slots, &l.model.encoder_snapshot())?;
    Ok(Session::new(class, q.parts, q.slots)?)
}

fn replay(wd: &Workdir, cfg: &DeskConfig, run: &mut Run) -> Result<()> {
    let l = load_all(run)?;
    let r = session_replay(&l.data, &l.relnet, &l.index, cfg.sessions, cfg.top_k, replay_seeds(cfg).1)?;
    run.lap("replay");
    write_json(&wd.path(REPLAY), &r)?;
    run.output(REPLAY)?;
    println!(
        "step 1 both labels in top {}: {}/{}; step 2 majority: {}/{}",
        cfg.top_k, r.step1_both.hits, r.step1_both.trials, r.step2_majority.hits, r.step2_majority.trials
    );
    finish(run)
}

fn eval(wd: &Workdir, cfg: &DeskConfig, run: &mut Run) -> Result<()> {
    let l = load_all(run)?;
    let enc = l.model.encoder_snapshot();
    let table = evaluate_all(&l.data, &enc, &l.relnet, &l.index, &cfg.eval)?;
    run.lap("baselines");
    let metrics = metrics_for(&l.data, &enc, &l.relnet, &l.index, cfg)?;
    run.lap("metrics");
    std::fs::create_dir_all(wd.path("eval"))?;
    std::fs::write(wd.path(EVAL_TSV), table.to_tsv())?;
    std::fs::write(wd.path(EVAL_TXT), table.to_text())?;
    write_json(&wd.path(METRICS), &metrics)?;
    run.output(EVAL_TSV)?;
    run.output(EVAL_TXT)?;
    run.output(METRICS)?;
    run.manifest.outputs.insert("eval-digest".into(), table.content_digest());
    println!("{}", table.to_text());
    let rate = |name: &str, r: partfit_core::pipeline::Rate| println!("{name}: {}/{} = {:.3}", r.hits, r.trials, r.value());
    rate("intact accuracy", metrics.intact_accuracy);
    rate("label hit rate", metrics.label_hit_rate);
    rate("original beats random", metrics.original_beats_random);
    rate("session step 1 both", metrics.sessions.step1_both);
    rate("session step 2 majority", metrics.sessions.step2_majority);
    finish(run)
}

fn serve(wd: &Workdir, mut run: Run, a: &ServeArgs) -> Result<()> {
    let engine = Engine::load(&run.input(MODEL)?, &run.input(INDEX)?, &run.input(DATASET)?)?;
    let config = ServiceConfig {
        max_k: a.max_k,
        log_dir: Some(wd.path(SESSIONS)),
    };
    let state = AppState::new(engine, config).context("restoring sessions")?;
    log::info!("{} sessions restored", state.session_count());
    run.manifest.outputs.insert("listen".into(), a.listen.to_string());
    finish(&mut run)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(partfit_service::serve(state, a.listen))?;
    Ok(())
}

fn selftest(run: &mut Run, a: &SelftestArgs) -> Result<()> {
    let results = run_all(SuiteSizes {
        gradient_trials: a.gradient_trials,
        invariance_cases: a.invariance_cases,
        dbscan_instances: a.dbscan_instances,
    });
    run.lap("suites");
    let mut report = String::new();
    for r in &results {
        report.push_str(&r.line());
        report.push('\n');
    }
    print!("{report}");
    run.manifest.outputs.insert("report".into(), sha256_hex(report.as_bytes()));
    let failed = results.iter().filter(|r| !r.passed()).count();
    finish(run)?;
    if failed > 0 {
        return Err(Error::Contract(format!("{failed} of {} self-test suites failed", results.len())).into());
    }
    Ok(())
}

fn finish(run: &mut Run) -> Result<()> {
    let path = run.save()?;
    log::info!("manifest written to {}", path.display());
    Ok(())
}
