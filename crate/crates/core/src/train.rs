//! Depth schedulers, warmup, AdamW, the training loop, checkpoints and the
//! finite-difference gradient checker.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::index::{recall_at_k, LevelIndex, Metric};
use crate::io::{make_batches, Batch, EmbeddingStore, PairDataset, Split};
use crate::model::{derive_seed, BatchData, ModelConfig, Trainable, TreeModel};
use crate::objective::{LevelMode, LossConfig};
use crate::propagation::PropagationConfig;
use crate::split::{AggregatorKind, SplitConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    Constant,
    LinearGrowth,
    ExponentialGrowth,
    Stochastic,
    Nested,
}

/// Level the loss is computed on for one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LevelChoice {
    Level(usize),
    All,
}

impl Serialize for LevelChoice {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LevelChoice::Level(h) => s.serialize_u64(*h as u64),
            LevelChoice::All => s.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for LevelChoice {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Level(usize),
            Tag(String),
        }
        match Raw::deserialize(d)? {
            Raw::Level(h) => Ok(LevelChoice::Level(h)),
            Raw::Tag(t) if t == "all" => Ok(LevelChoice::All),
            Raw::Tag(t) => Err(serde::de::Error::custom(format!("unknown level {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub scheduler: Scheduler,
    /// Stochastic scheduler bias: `P(h)` proportional to `h^beta`.
    pub beta: f64,
    pub l1_weight: f64,
    /// Per-level weights for the nested scheduler (default all 1).
    pub level_weights: Option<Vec<f64>>,
    pub seed: u64,
    /// Validation every this many steps (0 disables).
    pub eval_every: u64,
    pub eval_k: usize,
    /// Checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 4e-4,
            total_steps: 200_000,
            warmup_steps: 10_000,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            scheduler: Scheduler::Stochastic,
            beta: 1.0,
            l1_weight: 0.0,
            level_weights: None,
            seed: 0,
            eval_every: 0,
            eval_k: 10,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.warmup_steps > self.total_steps {
            return bad(format!("warmup_steps {} exceeds total_steps {}", self.warmup_steps, self.total_steps));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.beta >= 0.0) {
            return bad(format!("beta must be non-negative, got {}", self.beta));
        }
        if self.batch_size < 2 {
            return Err(Error::BatchSize(self.batch_size));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.weight_decay < 0.0 || self.l1_weight < 0.0 {
            return bad("weight_decay and l1_weight must be non-negative".into());
        }
        Ok(())
    }

    fn loss_config(&self, level: LevelChoice) -> LossConfig {
        let level_mode = match level {
            LevelChoice::Level(h) => LevelMode::Single(h),
            LevelChoice::All => LevelMode::SumAllLevels(self.level_weights.clone()),
        };
        LossConfig { level_mode, l1_weight: self.l1_weight }
    }
}

/// Number of doubling stages `1, 2, 4, ...` up to and including `depth`.
fn exponential_stages(depth: usize) -> usize {
    let mut stages = 1;
    while (1usize << (stages - 1)) < depth {
        stages += 1;
    }
    stages
}

/// Level for `step`. Growth schedules reach `depth` at `step == total_steps`.
///
/// The exponential schedule trains depths `1, 2, 4, ...` (capped at `depth`)
/// for equal fractions of the run: with `m` stages, stage
/// `min(m - 1, floor(m * step / total))` trains `min(depth, 2^stage)`.
pub fn select_level(
    scheduler: Scheduler,
    beta: f64,
    step: u64,
    total_steps: u64,
    depth: usize,
    rng: &mut impl Rng,
) -> LevelChoice {
    let frac = if total_steps == 0 { 1.0 } else { (step as f64 / total_steps as f64).min(1.0) };
    match scheduler {
        Scheduler::Constant => LevelChoice::Level(depth),
        Scheduler::LinearGrowth => LevelChoice::Level(((depth as f64 * frac).ceil() as usize).clamp(1, depth)),
        Scheduler::ExponentialGrowth => {
            let m = exponential_stages(depth);
            let stage = ((m as f64 * frac).floor() as usize).min(m - 1);
            LevelChoice::Level((1usize << stage).min(depth))
        }
        Scheduler::Stochastic => {
            let weights: Vec<f64> = (1..=depth).map(|h| (h as f64).powf(beta)).collect();
            let dist = WeightedIndex::new(&weights).expect("positive level weights");
            LevelChoice::Level(dist.sample(rng) + 1)
        }
        Scheduler::Nested => LevelChoice::All,
    }
}

/// Linear warmup from 0 to `lr`, constant afterwards.
pub fn lr_at(step: u64, config: &TrainConfig) -> f64 {
    if step >= config.warmup_steps {
        config.lr
    } else {
        config.lr * step as f64 / config.warmup_steps as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// One AdamW update with decoupled weight decay. `t` counts updates from 1.
pub fn optimizer_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, t: u64, lr: f64, config: &TrainConfig) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "params {n}, grads {}, moments {}/{}",
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i} is {}", grads[i])));
    }
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let decay = 1.0 - lr * config.weight_decay;
    for i in 0..n {
        let g = grads[i];
        params[i] *= decay;
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= lr * mhat / (vhat.sqrt() + config.eps);
    }
    Ok(())
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub level: LevelChoice,
    pub lr: f64,
}

/// Everything needed to continue training bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: Vec<f64>,
    pub adam: AdamState,
    /// Number of completed updates.
    pub step: u64,
}

impl TrainState {
    pub fn fresh(params: Vec<f64>) -> Self {
        let n = params.len();
        Self { params, adam: AdamState::new(n), step: 0 }
    }
}

/// Training-time side effects. Hooks see parameters read-only.
pub trait Hooks {
    fn on_step(&mut self, _log: &StepLog) -> Result<()> {
        Ok(())
    }
    fn on_eval(&mut self, _step: u64, _params: &[f64]) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

/// Hooks that do nothing.
pub struct NoHooks;
impl Hooks for NoHooks {}

/// Stores and pairs for training.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub queries: &'a EmbeddingStore,
    pub contexts: &'a EmbeddingStore,
    pub pairs: &'a PairDataset,
}

/// The batch stream: epoch `e` is a shuffle seeded by `(seed, e)`.
struct Batches<'a> {
    pairs: &'a PairDataset,
    batch_size: usize,
    seed: u64,
    epoch: Option<u64>,
    current: Vec<Batch>,
    per_epoch: u64,
}

impl<'a> Batches<'a> {
    fn new(pairs: &'a PairDataset, batch_size: usize, seed: u64) -> Result<Self> {
        let current = make_batches(pairs, Split::Train, batch_size, derive_seed(seed, 0))?;
        if current.is_empty() {
            return Err(Error::Config(format!("fewer train pairs than batch size {batch_size}")));
        }
        Ok(Self { pairs, batch_size, seed, epoch: Some(0), per_epoch: current.len() as u64, current })
    }

    fn get(&mut self, step: u64) -> Result<&Batch> {
        let epoch = step / self.per_epoch;
        if self.epoch != Some(epoch) {
            self.current = make_batches(self.pairs, Split::Train, self.batch_size, derive_seed(self.seed, epoch))?;
            self.epoch = Some(epoch);
        }
        Ok(&self.current[(step % self.per_epoch) as usize])
    }
}

const LEVEL_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

/// Runs updates until `state.step == until`. Returns the step logs of this call.
pub fn train_until<M: Trainable>(
    model: &M,
    state: &mut TrainState,
    data: TrainData,
    config: &TrainConfig,
    until: u64,
    hooks: &mut dyn Hooks,
) -> Result<Vec<StepLog>> {
    config.validate()?;
    data.pairs.validate(data.queries, data.contexts)?;
    if state.params.len() != model.n_params() {
        return Err(Error::ShapeMismatch(format!("{} params, model has {}", state.params.len(), model.n_params())));
    }
    let mut batches = Batches::new(data.pairs, config.batch_size, config.seed)?;
    let mut logs = Vec::new();
    while state.step < until {
        let step = state.step;
        let step_seed = derive_seed(config.seed ^ 0x5EED, step);
        let mut level_rng = ChaCha8Rng::seed_from_u64(derive_seed(step_seed, LEVEL_STREAM));
        let level = select_level(config.scheduler, config.beta, step, config.total_steps, model.depth(), &mut level_rng);
        let pairs = batches.get(step)?;
        let batch = BatchData { queries: data.queries, contexts: data.contexts, pairs };
        let (loss, grad) = model.loss_and_grad(&state.params, &batch, &config.loss_config(level), derive_seed(step_seed, DROPOUT_STREAM))?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss} at step {step}")));
        }
        let lr = lr_at(step, config);
        optimizer_step(&mut state.params, &grad, &mut state.adam, step + 1, lr, config)?;
        state.step += 1;
        let log = StepLog { step, loss, level, lr };
        hooks.on_step(&log)?;
        logs.push(log);
        if config.eval_every > 0 && state.step % config.eval_every == 0 {
            hooks.on_eval(state.step, &state.params)?;
        }
        if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 {
            hooks.on_checkpoint(state)?;
        }
    }
    Ok(logs)
}

/// Full run from freshly initialized parameters.
pub fn train<M: Trainable>(model: &M, data: TrainData, config: &TrainConfig, hooks: &mut dyn Hooks) -> Result<(TrainState, Vec<StepLog>)> {
    let mut state = TrainState::fresh(model.init_params(config.seed));
    if config.total_steps == 0 {
        config.validate()?;
        return Ok((state, Vec::new()));
    }
    let logs = train_until(model, &mut state, data, config, config.total_steps, hooks)?;
    Ok((state, logs))
}

/// Recall@k of `split` queries against every context at level `h`.
pub fn split_recall(
    model: &TreeModel,
    params: &[f64],
    data: TrainData,
    split: Split,
    level: usize,
    k: usize,
) -> Result<f64> {
    let index = crate::index::build_index(model, params, data.contexts, level, Metric::Ntvd)?;
    let pairs: Vec<_> = data.pairs.split(split).collect();
    let qs = model.encode_level(params, &data.queries.subset(&pairs.iter().map(|p| p.query_id).collect::<Vec<_>>())?, level)?;
    let results = search_all(&index, &qs, Metric::Ntvd, k)?;
    let gt: Vec<Option<u64>> = pairs.iter().map(|p| Some(p.context_id as u64)).collect();
    recall_at_k(&results, &gt, k)
}

/// Searches every query (given as 64-bit rows).
pub fn search_all(index: &LevelIndex, queries: &[Vec<f64>], metric: Metric, k: usize) -> Result<Vec<Vec<crate::index::Hit>>> {
    use rayon::prelude::*;
    queries
        .par_iter()
        .map(|q| {
            let q32: Vec<f32> = q.iter().map(|&v| v as f32).collect();
            index.search(&q32, metric, k)
        })
        .collect()
}

const CHECKPOINT_MAGIC: [u8; 4] = *b"RTCK";
const CHECKPOINT_VERSION: u8 = 1;

/// A saved run: model description, training config and optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<C> {
    pub model: C,
    pub train: TrainConfig,
    pub state: TrainState,
}

/// Layout: `"RTCK" | u8 version | u32 n | n bytes of JSON {model, train} |
/// bincode TrainState`.
impl<C: Serialize + DeserializeOwned> Checkpoint<C> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        #[derive(Serialize)]
        struct Head<'a, C> {
            model: &'a C,
            train: &'a TrainConfig,
        }
        let head = serde_json::to_vec(&Head { model: &self.model, train: &self.train })
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&crate::io::to_u32(head.len(), "checkpoint header")?.to_le_bytes());
        out.extend_from_slice(&head);
        bincode::serialize_into(&mut out, &self.state).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Head<C> {
            model: C,
            train: TrainConfig,
        }
        if bytes.len() < 9 {
            return Err(Error::TruncatedPayload("checkpoint header".into()));
        }
        let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic(magic));
        }
        if bytes[4] != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(bytes[4]));
        }
        let n = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let body = bytes.get(9..9 + n).ok_or_else(|| Error::TruncatedPayload("checkpoint config".into()))?;
        let head: Head<C> = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let state: TrainState =
            bincode::deserialize(&bytes[9 + n..]).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if state.adam.m.len() != state.params.len() || state.adam.v.len() != state.params.len() {
            return Err(Error::Checkpoint("optimizer moments do not match parameters".into()));
        }
        Ok(Self { model: head.model, train: head.train, state })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(&self.to_bytes()?)?;
            w.flush()?;
            w.get_ref().sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Result of comparing analytic and finite-difference gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub name: String,
    pub n_params: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub entries: Vec<GradCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-3;
/// Denominator floor for relative errors of near-zero gradient entries.
pub const FD_FLOOR: f64 = 1e-6;

/// Largest relative error between `analytic` and central differences of
/// `loss`, one coordinate at a time.
pub fn max_relative_error(params: &[f64], analytic: &[f64], loss: impl Fn(&[f64]) -> f64) -> f64 {
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + FD_STEP;
        let plus = loss(&p);
        p[i] = orig - FD_STEP;
        let minus = loss(&p);
        p[i] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let denom = analytic[i].abs().max(numeric.abs()).max(FD_FLOOR);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

/// Checks one model on a random batch. `corrupt` may tamper with the
/// analytic gradient (negative controls).
pub fn check_model<M: Trainable>(
    name: &str,
    model: &M,
    batch: &BatchData,
    loss: &LossConfig,
    seed: u64,
    corrupt: impl Fn(&mut [f64]),
) -> Result<GradCheck> {
    let params = model.init_params(seed);
    let (_, mut grad) = model.loss_and_grad(&params, batch, loss, seed)?;
    corrupt(&mut grad);
    let err = max_relative_error(&params, &grad, |p| model.loss_and_grad(p, batch, loss, seed).map(|r| r.0).unwrap_or(f64::NAN));
    Ok(GradCheck { name: name.into(), n_params: params.len(), max_rel_error: err, passed: err <= FD_TOLERANCE })
}

/// The small configurations exercised by [`check_gradients`].
pub fn grad_check_configs() -> Vec<ModelConfig> {
    let cross = |aggregator| SplitConfig::CrossAttention { n_e: 2, d_node: 4, heads: 2, d_head: 3, aggregator, tree_hidden: 4 };
    let splits = [
        SplitConfig::Linear {},
        SplitConfig::Perceptron { hidden: 6, dropout: 0.1 },
        cross(AggregatorKind::MeanThenLinear),
        cross(AggregatorKind::PerNodeLinearThenMean),
        cross(AggregatorKind::TreeStructured),
    ];
    let props = [PropagationConfig::Product {}, PropagationConfig::Learned { hidden: 8, dropout: 0.1 }];
    let mut out = Vec::new();
    for split in &splits {
        for prop in &props {
            out.push(ModelConfig { depth: 3, dim: 8, token_dim: 8, split: split.clone(), propagation: prop.clone(), score_dropout: 0.1 });
        }
    }
    out
}

/// Random stores with token matrices, and `b` aligned pairs.
pub fn random_batch_stores(dim: usize, b: usize, seed: u64) -> Result<(EmbeddingStore, EmbeddingStore)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let make = |rng: &mut ChaCha8Rng| {
        let sentence: Vec<f32> = (0..b * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tokens: Vec<Vec<f32>> =
            (0..b).map(|_| (0..rng.gen_range(2..6) * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        EmbeddingStore::with_tokens(dim, sentence, dim, Some(tokens))
    };
    Ok((make(&mut rng)?, make(&mut rng)?))
}

/// Every split x aggregator x propagation combination on D=3, dim=8, B=4,
/// with dropout active under a fixed mask seed and the nested loss plus L1.
pub fn check_gradients(seed: u64) -> Result<GradCheckReport> {
    let (q, c) = random_batch_stores(8, 4, seed)?;
    let pairs: Vec<(usize, usize)> = (0..4).map(|i| (i, i)).collect();
    let batch = BatchData { queries: &q, contexts: &c, pairs: &pairs };
    let loss = LossConfig { level_mode: LevelMode::SumAllLevels(None), l1_weight: 0.01 };
    let entries = grad_check_configs()
        .into_iter()
        .map(|cfg| {
            let name = format!("{}+{}", cfg.split.name(), cfg.propagation.name());
            let model = TreeModel::new(cfg)?;
            check_model(&name, &model, &batch, &loss, seed, |_| {})
        })
        .collect::<Result<_>>()?;
    Ok(GradCheckReport { step: FD_STEP, tolerance: FD_TOLERANCE, entries })
}
