//! Trains a routing tree on the standard synthetic corpus and reports
//! per-level test recall and congruence trends.
//!
//! Usage: `synth_run [key=value ...]` with keys lr, steps, warmup, batch,
//! scheduler, seed, sdrop, heads, dhead, dnode, agg, prop, phidden, wd, ne,
//! split, hidden, thidden, depth, every, dseed, tnoise.

use std::collections::HashMap;
use std::time::Instant;

use rtrv_core::index::{build_cosine_index, build_index, ndcg_at_k, recall_at_k, Metric};
use rtrv_core::inspect::{lca_context_similarity, node_embedding_similarity, NodePairMode};
use rtrv_core::io::Split;
use rtrv_core::model::{ModelConfig, TreeModel};
use rtrv_core::propagation::PropagationConfig;
use rtrv_core::split::{AggregatorKind, SplitConfig};
use rtrv_core::synth::{generate, SynthSpec};
use rtrv_core::train::{search_all, split_recall, train, Hooks, Scheduler, TrainConfig, TrainData};

struct Probe<'a> {
    model: &'a TreeModel,
    data: TrainData<'a>,
    depth: usize,
}

impl Hooks for Probe<'_> {
    fn on_eval(&mut self, step: u64, params: &[f64]) -> rtrv_core::Result<()> {
        let r1 = split_recall(self.model, params, self.data, Split::Val, self.depth, 1)?;
        let r10 = split_recall(self.model, params, self.data, Split::Val, 2.min(self.depth), 10)?;
        println!("  step {step}: val leaf R@1 {r1:.3}, level-2 R@10 {r10:.3}");
        Ok(())
    }
}

fn main() -> rtrv_core::Result<()> {
    let args: HashMap<String, String> = std::env::args()
        .skip(1)
        .filter_map(|a| a.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let get = |k: &str, d: &str| args.get(k).cloned().unwrap_or_else(|| d.to_string());
    let num = |k: &str, d: &str| get(k, d).parse::<f64>().expect("numeric argument");

    let spec = SynthSpec { token_noise: num("tnoise", "0.1"), ..SynthSpec::standard(num("dseed", "0") as u64) };
    let data = generate(&spec)?;
    let aggregator = match get("agg", "tree").as_str() {
        "mean" => AggregatorKind::MeanThenLinear,
        "pernode" => AggregatorKind::PerNodeLinearThenMean,
        _ => AggregatorKind::TreeStructured,
    };
    let split = match get("split", "cross").as_str() {
        "linear" => SplitConfig::Linear {},
        "mlp" => SplitConfig::Perceptron { hidden: num("hidden", "64") as usize, dropout: 0.0 },
        _ => SplitConfig::CrossAttention {
            n_e: num("ne", "1") as usize,
            d_node: num("dnode", "32") as usize,
            heads: num("heads", "4") as usize,
            d_head: num("dhead", "8") as usize,
            aggregator,
            tree_hidden: num("thidden", "8") as usize,
        },
    };
    let propagation = match get("prop", "learned").as_str() {
        "product" => PropagationConfig::Product {},
        _ => PropagationConfig::Learned { hidden: num("phidden", "32") as usize, dropout: 0.0 },
    };
    let depth = num("depth", "5") as usize;
    let model = TreeModel::new(ModelConfig { depth, dim: 16, token_dim: 16, split, propagation, score_dropout: num("sdrop", "0") })?;
    let scheduler = match get("scheduler", "stochastic").as_str() {
        "constant" => Scheduler::Constant,
        "nested" => Scheduler::Nested,
        "linear" => Scheduler::LinearGrowth,
        "exponential" => Scheduler::ExponentialGrowth,
        _ => Scheduler::Stochastic,
    };
    let cfg = TrainConfig {
        batch_size: num("batch", "64") as usize,
        lr: num("lr", "1e-3"),
        total_steps: num("steps", "5000") as u64,
        warmup_steps: num("warmup", "500") as u64,
        scheduler,
        seed: num("seed", "0") as u64,
        weight_decay: num("wd", "0.01"),
        eval_every: num("every", "500") as u64,
        ..TrainConfig::default()
    };
    let td = TrainData { queries: &data.queries, contexts: &data.contexts, pairs: &data.pairs };
    let t0 = Instant::now();
    let (state, logs) = train(&model, td, &cfg, &mut Probe { model: &model, data: td, depth })?;
    let train_secs = t0.elapsed().as_secs_f64();
    let tail: f64 = logs.iter().rev().take(200).map(|l| l.loss).sum::<f64>() / 200f64.min(logs.len() as f64);
    println!("trained {} steps in {train_secs:.1}s, tail loss {tail:.4}", logs.len());

    let test: Vec<_> = data.pairs.split(Split::Test).collect();
    let gt: Vec<Option<u64>> = test.iter().map(|p| Some(p.context_id as u64)).collect();
    let qids: Vec<usize> = test.iter().map(|p| p.query_id).collect();
    let qstore = data.queries.subset(&qids)?;
    for h in 1..=depth {
        let index = build_index(&model, &state.params, &data.contexts, h, Metric::Ntvd)?;
        let qs = model.encode_level(&state.params, &qstore, h)?;
        let res = search_all(&index, &qs, Metric::Ntvd, 100)?;
        println!(
            "level {h}: R@1 {:.3} R@10 {:.3} R@100 {:.3} NDCG@10 {:.3}",
            recall_at_k(&res, &gt, 1)?,
            recall_at_k(&res, &gt, 10)?,
            recall_at_k(&res, &gt, 100)?,
            ndcg_at_k(&res, &gt, 10)?
        );
    }
    let rows: Vec<Vec<f32>> = (0..data.contexts.len()).map(|i| data.contexts.vector(i).to_vec()).collect();
    let cos = build_cosine_index(&rows, (0..rows.len() as u64).collect(), 16)?;
    let qv: Vec<Vec<f64>> = qids.iter().map(|&i| data.queries.vector(i).iter().map(|&v| v as f64).collect()).collect();
    let res = search_all(&cos, &qv, Metric::Cosine, 10)?;
    println!("cosine oracle: R@1 {:.3}", recall_at_k(&res, &gt, 1)?);
    for mode in [NodePairMode::AllPairs, NodePairMode::AncestorDescendant] {
        if let Ok(b) = node_embedding_similarity(&model, &state.params, mode) {
            let means: Vec<String> = b.means().iter().map(|m| format!("{m:.3}")).collect();
            println!("{mode:?} node similarity: rho {:.3}, means [{}]", b.trend(), means.join(", "));
        }
    }
    let lca = lca_context_similarity(&model, &state.params, &data.contexts, 100_000, 0)?;
    println!("LCA-depth context similarity: rho {:.3}", lca.trend());
    Ok(())
}
