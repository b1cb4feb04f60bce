//! Subcommand implementations. Every command writes under `runs/<name>/`.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info, warn};
use rayon::prelude::*;
use rtrv_core::baselines::{fit_cluster_tree, tree_search, CosineAdapter, NoTreeModel};
use rtrv_core::index::{build_cosine_index, build_index, measure_latency, Hit, LatencyStats, LevelIndex, Metric, MetricsReport, ResultRow};
use rtrv_core::inspect::{self, ExportFormat, NodePairMode};
use rtrv_core::io::{read_store, write_store, EmbeddingStore, Manifest, PairDataset, Split};
use rtrv_core::model::{ModelConfig, Trainable, TreeModel};
use rtrv_core::synth::{generate, SynthSpec};
use rtrv_core::train::{check_gradients, search_all, split_recall, train, train_until, Checkpoint, Hooks, NoHooks, StepLog, TrainData, TrainState};
use serde::Serialize;

use crate::config::{BaselineKind, InspectMode, RunConfig};
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub struct Data {
    pub queries: EmbeddingStore,
    pub contexts: EmbeddingStore,
    pub pairs: PairDataset,
    pub manifest: Option<Manifest>,
}

impl Data {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        if let Some(spec) = &cfg.io.synth {
            let d = generate(spec)?;
            return Ok(Self { queries: d.queries, contexts: d.contexts, pairs: d.pairs, manifest: Some(d.context_manifest) });
        }
        let path = |p: &Option<PathBuf>| p.clone().expect("validated config");
        let open = |p: PathBuf| read_store(&p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())));
        let queries = open(path(&cfg.io.queries))?;
        let contexts = open(path(&cfg.io.contexts))?;
        let pairs_path = path(&cfg.io.pairs);
        let pairs = PairDataset::read(&pairs_path).map_err(|e| CliError::Data(format!("{}: {e}", pairs_path.display())))?;
        pairs.validate(&queries, &contexts)?;
        let manifest = match &cfg.io.context_manifest {
            Some(p) => Some(Manifest::read(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?),
            None => None,
        };
        if let Some(m) = &manifest {
            if m.rows.len() != contexts.len() {
                return Err(CliError::Data(format!("manifest has {} rows for {} contexts", m.rows.len(), contexts.len())));
            }
        }
        Ok(Self { queries, contexts, pairs, manifest })
    }

    fn train_data(&self) -> TrainData<'_> {
        TrainData { queries: &self.queries, contexts: &self.contexts, pairs: &self.pairs }
    }

    /// Query store and ground truth for one split, one row per pair.
    fn eval_set(&self, split: Split) -> Result<(Vec<usize>, EmbeddingStore, Vec<Option<u64>>)> {
        let pairs: Vec<_> = self.pairs.split(split).collect();
        if pairs.is_empty() {
            return Err(CliError::Data(format!("split {} has no pairs", split.as_str())));
        }
        let qids: Vec<usize> = pairs.iter().map(|p| p.query_id).collect();
        let gt = pairs.iter().map(|p| Some(p.context_id as u64)).collect();
        Ok((qids.clone(), self.queries.subset(&qids)?, gt))
    }
}

pub struct RunDir(PathBuf);

impl RunDir {
    /// Creates the layout and stores the resolved config.
    pub fn create(cfg: &RunConfig) -> Result<Self> {
        let root = cfg.run_dir();
        for sub in ["checkpoints", "reports"] {
            fs::create_dir_all(root.join(sub))?;
        }
        write_json(&root.join("config.json"), cfg)?;
        Ok(Self(root))
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.0.join(rel)
    }

    fn final_checkpoint(&self) -> PathBuf {
        self.path("checkpoints/final.ckpt")
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn json_line<T: Serialize>(w: &mut impl Write, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

struct CliHooks<'a> {
    cfg: &'a RunConfig,
    run: &'a RunDir,
    model: &'a TreeModel,
    data: TrainData<'a>,
    metrics: BufWriter<File>,
    val: BufWriter<File>,
    log_every: u64,
}

#[derive(Serialize)]
struct ValLine {
    step: u64,
    level: usize,
    k: usize,
    recall: f64,
}

impl Hooks for CliHooks<'_> {
    fn on_step(&mut self, log: &StepLog) -> rtrv_core::Result<()> {
        serde_json::to_writer(&mut self.metrics, log).map_err(|e| rtrv_core::Error::Config(e.to_string()))?;
        self.metrics.write_all(b"\n")?;
        if (log.step + 1) % self.log_every == 0 {
            info!("step {} loss {:.4} lr {:.2e}", log.step + 1, log.loss, log.lr);
        }
        debug!("step {} loss {} level {:?}", log.step, log.loss, log.level);
        Ok(())
    }

    fn on_eval(&mut self, step: u64, params: &[f64]) -> rtrv_core::Result<()> {
        let level = self.model.depth();
        let k = self.cfg.train.eval_k;
        let recall = split_recall(self.model, params, self.data, Split::Val, level, k)?;
        info!("step {step}: val recall@{k} at level {level} = {recall:.4}");
        serde_json::to_writer(&mut self.val, &ValLine { step, level, k, recall }).map_err(|e| rtrv_core::Error::Config(e.to_string()))?;
        self.val.write_all(b"\n")?;
        self.val.flush()?;
        Ok(())
    }

    fn on_checkpoint(&mut self, state: &TrainState) -> rtrv_core::Result<()> {
        self.metrics.flush()?;
        let ck = Checkpoint { model: self.cfg.model.clone(), train: self.cfg.train.clone(), state: state.clone() };
        let path = self.run.path(&format!("checkpoints/step_{}.ckpt", state.step));
        ck.save(&path)?;
        info!("saved {}", path.display());
        Ok(())
    }
}

fn open_log(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let f = OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(path)?;
    Ok(BufWriter::new(f))
}

pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let run = RunDir::create(cfg)?;
    let data = Data::load(cfg)?;
    let model = TreeModel::new(cfg.model.clone())?;
    let mut state = match resume {
        Some(p) => {
            let ck = Checkpoint::<ModelConfig>::load(p)?;
            if ck.model != cfg.model {
                return Err(CliError::ConfigInvalid("model: differs from the checkpoint being resumed".into()));
            }
            info!("resuming from step {}", ck.state.step);
            ck.state
        }
        None => TrainState::fresh(model.init_params(cfg.train.seed)),
    };
    let append = resume.is_some();
    let mut hooks = CliHooks {
        cfg,
        run: &run,
        model: &model,
        data: data.train_data(),
        metrics: open_log(&run.path("metrics.jsonl"), append)?,
        val: open_log(&run.path("reports/val.jsonl"), append)?,
        log_every: (cfg.train.total_steps / 20).max(1),
    };
    info!("training {} params for {} steps", model.n_params(), cfg.train.total_steps);
    let start = Instant::now();
    if cfg.train.total_steps > state.step {
        train_until(&model, &mut state, data.train_data(), &cfg.train, cfg.train.total_steps, &mut hooks)?;
    }
    hooks.metrics.flush()?;
    let ck = Checkpoint { model: cfg.model.clone(), train: cfg.train.clone(), state };
    ck.save(run.final_checkpoint())?;
    info!("done in {:.1}s; wrote {}", start.elapsed().as_secs_f64(), run.final_checkpoint().display());
    println!("{}", run.final_checkpoint().display());
    Ok(())
}

fn load_model(run: &RunDir, checkpoint: Option<&Path>) -> Result<(TreeModel, Vec<f64>)> {
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| run.final_checkpoint());
    if !path.exists() {
        return Err(CliError::Data(format!("checkpoint {} not found; run `train` first", path.display())));
    }
    let ck = Checkpoint::<ModelConfig>::load(&path)?;
    Ok((TreeModel::new(ck.model)?, ck.state.params))
}

fn index_path(run: &RunDir, level: usize, metric: Metric) -> PathBuf {
    run.path(&format!("index/level{level}_{}.idx", metric.as_str()))
}

pub fn cmd_index(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let run = RunDir::create(cfg)?;
    let data = Data::load(cfg)?;
    let (model, params) = load_model(&run, checkpoint)?;
    fs::create_dir_all(run.path("index"))?;
    for h in cfg.eval.levels_for(model.depth()) {
        let index = build_index(&model, &params, &data.contexts, h, cfg.eval.metric)?;
        let path = index_path(&run, h, cfg.eval.metric);
        index.write(&path)?;
        info!("level {h}: {} rows of width {}", index.len(), index.width());
        println!("{}", path.display());
    }
    Ok(())
}

fn load_or_build(run: &RunDir, model: &TreeModel, params: &[f64], contexts: &EmbeddingStore, h: usize, metric: Metric) -> Result<LevelIndex> {
    let path = index_path(run, h, metric);
    if path.exists() {
        let index = LevelIndex::read(&path)?;
        if index.level() == h && index.metric() == metric && index.len() == contexts.len() {
            return Ok(index);
        }
        warn!("ignoring stale index {}", path.display());
    }
    Ok(build_index(model, params, contexts, h, metric)?)
}

pub fn cmd_search(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let run = RunDir::create(cfg)?;
    let data = Data::load(cfg)?;
    let (model, params) = load_model(&run, checkpoint)?;
    let h = *cfg.eval.levels_for(model.depth()).iter().max().expect("non-empty levels");
    let index = load_or_build(&run, &model, &params, &data.contexts, h, cfg.eval.metric)?;
    let (qids, qstore, _) = data.eval_set(cfg.eval.split)?;
    let qs = model.encode_level(&params, &qstore, h)?;
    let results = search_all(&index, &qs, cfg.eval.metric, cfg.eval.max_k())?;
    let path = run.path("results.jsonl");
    let mut w = BufWriter::new(File::create(&path)?);
    for (qid, ranked) in qids.iter().zip(results) {
        json_line(&mut w, &ResultRow { query_id: *qid as u64, ranked })?;
    }
    w.flush()?;
    info!("searched {} queries at level {h}", qids.len());
    println!("{}", path.display());
    Ok(())
}

fn f32_rows(rows: &[Vec<f64>]) -> Vec<Vec<f32>> {
    rows.iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect()
}

fn print_report(label: &str, r: &MetricsReport) {
    let fmt = |m: &BTreeMap<String, f64>| m.iter().map(|(k, v)| format!("@{k} {v:.4}")).collect::<Vec<_>>().join(" ");
    println!("{label}: recall {} | ndcg {}", fmt(&r.recall), fmt(&r.ndcg));
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let run = RunDir::create(cfg)?;
    let data = Data::load(cfg)?;
    let (model, params) = load_model(&run, checkpoint)?;
    let (_, qstore, gt) = data.eval_set(cfg.eval.split)?;
    let k = cfg.eval.max_k();
    let mut report = BTreeMap::new();
    for h in cfg.eval.levels_for(model.depth()) {
        let index = load_or_build(&run, &model, &params, &data.contexts, h, cfg.eval.metric)?;
        let qs = model.encode_level(&params, &qstore, h)?;
        let results = search_all(&index, &qs, cfg.eval.metric, k)?;
        let latency = match cfg.eval.latency_reps {
            0 => LatencyStats::default(),
            reps => measure_latency(&index, &f32_rows(&qs), k, reps)?,
        };
        let r = MetricsReport::compute(&results, &gt, &cfg.eval.k, latency)?;
        print_report(&format!("level {h}"), &r);
        report.insert(h, r);
    }
    write_json(&run.path("reports/eval.json"), &report)?;
    Ok(())
}

/// Mean/p50/p95 over `reps` timed passes after one warmup pass.
fn time_queries<T>(reps: usize, n: usize, f: impl Fn(usize) -> T) -> LatencyStats {
    if reps == 0 || n == 0 {
        return LatencyStats::default();
    }
    (0..n).for_each(|i| drop(std::hint::black_box(f(i))));
    let mut t: Vec<f64> = Vec::with_capacity(reps * n);
    for _ in 0..reps {
        for i in 0..n {
            let s = Instant::now();
            std::hint::black_box(f(i));
            t.push(s.elapsed().as_secs_f64() * 1e3);
        }
    }
    t.sort_by(|a, b| a.total_cmp(b));
    let pct = |q: f64| t[((q * t.len() as f64).ceil() as usize).clamp(1, t.len()) - 1];
    LatencyStats { mean: t.iter().sum::<f64>() / t.len() as f64, p50: pct(0.5), p95: pct(0.95), samples: t.len() }
}

#[derive(Serialize)]
struct BaselineReport {
    kind: BaselineKind,
    results: BTreeMap<String, MetricsReport>,
}

pub fn cmd_baseline(cfg: &RunConfig) -> Result<()> {
    let b = cfg.baseline.clone().ok_or_else(|| CliError::ConfigInvalid("baseline: section required".into()))?;
    let run = RunDir::create(cfg)?;
    let data = Data::load(cfg)?;
    let (_, qstore, gt) = data.eval_set(cfg.eval.split)?;
    let k = cfg.eval.max_k();
    let reps = cfg.eval.latency_reps;
    let ids: Vec<u64> = (0..data.contexts.len() as u64).collect();
    let mut results = BTreeMap::new();
    match b.kind {
        BaselineKind::HierKmeans | BaselineKind::HierGmm => {
            let kind = b.kind.cluster_kind().expect("clustering kind");
            let depth = b.depth.unwrap_or(cfg.model.depth);
            let tree = fit_cluster_tree(&data.contexts, depth, kind, cfg.train.seed)?;
            fs::write(run.path("reports/cluster_tree.json"), tree.to_json()?)?;
            let search = |i: usize| tree_search(&tree, &data.contexts, qstore.vector(i), k);
            let res: Vec<Vec<Hit>> = (0..qstore.len()).into_par_iter().map(search).collect();
            let lat = time_queries(reps, qstore.len(), search);
            results.insert("tree_search".to_string(), MetricsReport::compute(&res, &gt, &cfg.eval.k, lat)?);
            let rows: Vec<f32> = (0..data.contexts.len())
                .into_par_iter()
                .flat_map_iter(|i| tree.leaf_distribution(data.contexts.vector(i)).into_iter().map(|v| v as f32))
                .collect();
            let index = LevelIndex::from_rows(depth, Metric::Ntvd, 1 << depth, ids, rows)?;
            let qs: Vec<Vec<f64>> = (0..qstore.len()).into_par_iter().map(|i| tree.leaf_distribution(qstore.vector(i))).collect();
            let res = search_all(&index, &qs, Metric::Ntvd, k)?;
            let lat = if reps > 0 { measure_latency(&index, &f32_rows(&qs), k, reps)? } else { LatencyStats::default() };
            results.insert("leaf_distribution".to_string(), MetricsReport::compute(&res, &gt, &cfg.eval.k, lat)?);
        }
        BaselineKind::NoTree => {
            let model = NoTreeModel::new(cfg.model.clone())?;
            let (state, _) = train(&model, data.train_data(), &cfg.train, &mut NoHooks)?;
            let depth = model.depth();
            let rows: Vec<f32> = model.encode(&state.params, &data.contexts)?.into_iter().flatten().map(|v| v as f32).collect();
            let index = LevelIndex::from_rows(depth, Metric::Ntvd, 1 << depth, ids, rows)?;
            let qs = model.encode(&state.params, &qstore)?;
            let res = search_all(&index, &qs, Metric::Ntvd, k)?;
            let lat = if reps > 0 { measure_latency(&index, &f32_rows(&qs), k, reps)? } else { LatencyStats::default() };
            results.insert(format!("level_{depth}"), MetricsReport::compute(&res, &gt, &cfg.eval.k, lat)?);
        }
        BaselineKind::CosineAdapter => {
            let model = CosineAdapter { dim: data.contexts.dim(), nested_depth: b.nested_depth };
            let (state, _) = train(&model, data.train_data(), &cfg.train, &mut NoHooks)?;
            for width in model.prefixes() {
                let index = build_cosine_index(&model.encode(&state.params, &data.contexts, width)?, ids.clone(), width)?;
                let qs = model.encode(&state.params, &qstore, width)?;
                let qs64: Vec<Vec<f64>> = qs.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
                let res = search_all(&index, &qs64, Metric::Cosine, k)?;
                let lat = if reps > 0 { measure_latency(&index, &qs, k, reps)? } else { LatencyStats::default() };
                results.insert(format!("width_{width}"), MetricsReport::compute(&res, &gt, &cfg.eval.k, lat)?);
            }
        }
    }
    for (name, r) in &results {
        print_report(name, r);
    }
    let name = serde_json::to_value(b.kind)?;
    let path = run.path(&format!("reports/baseline_{}.json", name.as_str().unwrap_or("baseline")));
    write_json(&path, &BaselineReport { kind: b.kind, results })?;
    Ok(())
}

#[derive(Serialize, Default)]
struct InspectReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    all_pairs: Option<inspect::SimilarityBuckets>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ancestor_descendant: Option<inspect::SimilarityBuckets>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lca: Option<inspect::SimilarityBuckets>,
    /// Spearman correlation of bucket key against bucket mean, per analysis.
    trends: BTreeMap<String, f64>,
}

fn texts(data: &Data) -> Result<Vec<&str>> {
    let m = data.manifest.as_ref().ok_or_else(|| CliError::ConfigInvalid("io.context_manifest: required for keywords".into()))?;
    Ok(m.rows.iter().map(|r| r.text.as_str()).collect())
}

pub fn cmd_inspect(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let run = RunDir::create(cfg)?;
    let data = Data::load(cfg)?;
    let (model, params) = load_model(&run, checkpoint)?;
    let ic = &cfg.inspect;
    let has_nodes = model.node_embeddings(&params).is_some();
    let mut report = InspectReport::default();
    for &mode in &ic.modes {
        let (key, buckets) = match mode {
            InspectMode::AllPairs | InspectMode::AncestorDescendant if !has_nodes => {
                warn!("{mode:?} skipped: model has no node embeddings");
                continue;
            }
            InspectMode::AllPairs => ("all_pairs", inspect::node_embedding_similarity(&model, &params, NodePairMode::AllPairs)?),
            InspectMode::AncestorDescendant => {
                ("ancestor_descendant", inspect::node_embedding_similarity(&model, &params, NodePairMode::AncestorDescendant)?)
            }
            InspectMode::Lca => ("lca", inspect::lca_context_similarity(&model, &params, &data.contexts, ic.sample_size, ic.seed)?),
            InspectMode::Keywords => {
                let leaves = inspect::argmax_leaves(&model, &params, &data.contexts)?;
                let kws = inspect::node_keywords(&leaves, &texts(&data)?, model.topology(), ic.k)?;
                write_json(&run.path("reports/keywords.json"), &kws)?;
                for n in kws.iter().filter(|n| n.node < 8) {
                    let terms: Vec<&str> = n.keywords.iter().map(|k| k.term.as_str()).collect();
                    println!("node {} ({} contexts): {}", n.node, n.contexts, terms.join(", "));
                }
                continue;
            }
        };
        let rho = buckets.trend();
        println!("{key}: spearman {rho:.3} over {} buckets (baseline {:.4})", buckets.buckets.len(), buckets.baseline);
        report.trends.insert(key.to_string(), rho);
        match key {
            "all_pairs" => report.all_pairs = Some(buckets),
            "ancestor_descendant" => report.ancestor_descendant = Some(buckets),
            _ => report.lca = Some(buckets),
        }
    }
    write_json(&run.path("reports/congruence.json"), &report)?;
    Ok(())
}

pub fn cmd_export_tree(cfg: &RunConfig, checkpoint: Option<&Path>, format: Option<ExportFormat>) -> Result<()> {
    let run = RunDir::create(cfg)?;
    let data = Data::load(cfg)?;
    let (model, params) = load_model(&run, checkpoint)?;
    let leaves = inspect::argmax_leaves(&model, &params, &data.contexts)?;
    let kws = match &data.manifest {
        Some(_) => inspect::node_keywords(&leaves, &texts(&data)?, model.topology(), cfg.inspect.k)?,
        None => Vec::new(),
    };
    let format = format.unwrap_or(cfg.inspect.format);
    let doc = inspect::export_tree(&leaves, model.topology(), &kws, format)?;
    let ext = if format == ExportFormat::Dot { "dot" } else { "json" };
    let path = run.path(&format!("reports/tree.{ext}"));
    fs::write(&path, doc)?;
    println!("{}", path.display());
    Ok(())
}

pub fn cmd_check_grad(cfg: Option<&RunConfig>, seed: u64) -> Result<()> {
    let start = Instant::now();
    let report = check_gradients(seed)?;
    for e in &report.entries {
        println!("{:<48} {:>6} params  max rel err {:.3e}  {}", e.name, e.n_params, e.max_rel_error, if e.passed { "ok" } else { "FAIL" });
    }
    println!("{} combinations in {:.1}s", report.entries.len(), start.elapsed().as_secs_f64());
    if let Some(cfg) = cfg {
        let run = RunDir::create(cfg)?;
        write_json(&run.path("reports/check_grad.json"), &report)?;
    }
    if report.passed() { Ok(()) } else { Err(CliError::GradCheckFailed) }
}

/// Writes a synthetic corpus as embedding stores, manifests and pairs.
pub fn cmd_synth(spec_path: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(spec_path).map_err(|e| CliError::Data(format!("{}: {e}", spec_path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let spec: SynthSpec = serde_path_to_error::deserialize(de).map_err(|e| CliError::ConfigInvalid(format!("{}: {}", e.path(), e.inner())))?;
    let d = generate(&spec)?;
    fs::create_dir_all(out)?;
    write_store(&d.contexts, out.join("contexts.rtrv"))?;
    write_store(&d.queries, out.join("queries.rtrv"))?;
    d.pairs.write(out.join("pairs.jsonl"))?;
    d.context_manifest.write(out.join("contexts.jsonl"))?;
    d.query_manifest.write(out.join("queries.jsonl"))?;
    println!("{} contexts, {} queries -> {}", d.contexts.len(), d.queries.len(), out.display());
    Ok(())
}
