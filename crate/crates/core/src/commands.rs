//! Command implementations behind the `disenhcn` binary.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{
    apply_filters, build_vocab, dedup, encode, ingest_csv, load_bundle, sample_negative, save_bundle,
    split, write_raw_csv, DatasetBundle, IdMap, ObservedIndex, Record, Vocab,
};
use crate::diff::{finite_diff_check, GradCheckReport, Tape};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate_with, write_metrics_json, write_ranks_csv, EvalOptions, MetricsReport};
use crate::hypergraph::{adjacency_stats, build_equivalent_adjacencies, build_incidence, AdjacencyStats};
use crate::loss::{total_loss, LossWeights, PairwiseBatch};
use crate::model::{
    attention_report, attention_weights, compute_embeddings, init_params, vocab_sizes, write_attention_csv,
    AttentionSummary, FinalEmbeddings, Fusion, ModelConfig, ModelGraph, ParameterSet,
};
use crate::synth::{generate, SynthSpec};
use crate::trainer::{
    fit, gradients, load_checkpoint, save_checkpoint, write_log_csv, Checkpoint, FitOptions, FitOutcome,
    LogRow, LOG_HEADER,
};

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct DatasetSummary {
    pub users: usize,
    pub locations: usize,
    pub times: usize,
    pub activities: usize,
    pub records: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl DatasetSummary {
    pub fn of(bundle: &DatasetBundle) -> Self {
        Self {
            users: bundle.vocab.n_users(),
            locations: bundle.vocab.n_locations(),
            times: bundle.vocab.n_times(),
            activities: bundle.vocab.n_activities(),
            records: bundle.n_records(),
            train: bundle.train.len(),
            valid: bundle.valid.len(),
            test: bundle.test.len(),
        }
    }

    pub fn table(&self) -> String {
        format!(
            "{:>8} {:>10} {:>6} {:>10} {:>9}\n{:>8} {:>10} {:>6} {:>10} {:>9}\n",
            "#User",
            "#Location",
            "#Time",
            "#Activity",
            "#Records",
            self.users,
            self.locations,
            self.times,
            self.activities,
            self.records
        )
    }
}

pub fn cmd_synth(spec: &SynthSpec, out_csv: &Path) -> Result<usize> {
    let corpus = generate(spec)?;
    if let Some(dir) = out_csv.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_raw_csv(out_csv, &corpus.records)?;
    Ok(corpus.records.len())
}

/// Ingest, filter, encode, deduplicate and split a raw CSV into a bundle
/// directory.
pub fn cmd_prepare(input: &Path, cfg: &RunConfig, out_dir: &Path) -> Result<DatasetSummary> {
    let raw = ingest_csv(input)?;
    let kept = apply_filters(&raw, &cfg.filter);
    if kept.is_empty() {
        return Err(Error::Empty("records after filtering"));
    }
    let vocab = build_vocab(&kept);
    let encoded = dedup(&encode(&kept, &vocab)?);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let bundle = split(&encoded, vocab, cfg.split, &mut rng)?;
    save_bundle(&bundle, out_dir)?;
    Ok(DatasetSummary::of(&bundle))
}

pub fn cmd_train(
    bundle_dir: &Path,
    cfg: &RunConfig,
    out_dir: &Path,
    on_epoch: Option<&mut dyn FnMut(&LogRow)>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    let bundle = load_bundle(bundle_dir)?;
    let mut previous_log = None;
    let resume = match &cfg.resume {
        Some(dir) => {
            let last = load_checkpoint(&dir.join("last.ckpt"))?;
            let best = load_checkpoint(&dir.join("best.ckpt"))?;
            previous_log = fs::read_to_string(dir.join("train_log.csv")).ok();
            Some((last, best))
        }
        None => None,
    };
    let outcome = fit(&bundle, &cfg.model, &cfg.train, FitOptions { resume, on_epoch })?;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    save_checkpoint(&outcome.best, &out_dir.join("best.ckpt"))?;
    save_checkpoint(&outcome.last, &out_dir.join("last.ckpt"))?;
    let log_path = out_dir.join("train_log.csv");
    write_log_csv(&log_path, &outcome.log)?;
    if let Some(prev) = previous_log.filter(|p| p.starts_with(LOG_HEADER)) {
        let fresh = fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let rows = fresh.split_once('\n').map_or("", |(_, rest)| rest);
        fs::write(&log_path, prev + rows).map_err(|e| Error::io(&log_path, e))?;
    }
    let cfg_path = out_dir.join("config.txt");
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    Ok(outcome)
}

/// Checkpoint plus the bundle it was trained on, with the model graph
/// rebuilt from the training split.
pub struct LoadedModel {
    pub ckpt: Checkpoint,
    pub bundle: DatasetBundle,
    pub graph: ModelGraph,
    pub stats: AdjacencyStats,
}

impl LoadedModel {
    pub fn open(ckpt_path: &Path, bundle_dir: &Path) -> Result<Self> {
        let ckpt = load_checkpoint(ckpt_path)?;
        let bundle = load_bundle(bundle_dir)?;
        bundle.vocab.check_hashes(&ckpt.vocab)?;
        let inc = build_incidence(&bundle)?;
        let adj = build_equivalent_adjacencies(&inc, &ckpt.model.enabled_types)?;
        let stats = adjacency_stats(&adj);
        let graph = ModelGraph::new(&adj)?;
        Ok(Self {
            ckpt,
            bundle,
            graph,
            stats,
        })
    }

    pub fn embeddings(&self) -> Result<FinalEmbeddings> {
        compute_embeddings(&self.graph, &self.ckpt.model, &self.ckpt.params)
    }
}

/// Test-split metrics; also writes `metrics.json` and `ranks.csv` into
/// `out_dir` when given.
pub fn cmd_evaluate(
    ckpt_path: &Path,
    bundle_dir: &Path,
    k: usize,
    exclude_train: bool,
    out_dir: Option<&Path>,
) -> Result<MetricsReport> {
    let m = LoadedModel::open(ckpt_path, bundle_dir)?;
    let emb = m.embeddings()?;
    let seen = exclude_train.then(|| ObservedIndex::from_records(&m.bundle.train));
    let opts = EvalOptions {
        k,
        exclude: seen.as_ref(),
        keep_ranks: out_dir.is_some(),
    };
    let report = evaluate_with(&emb, &m.bundle.test, &opts)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_metrics_json(&dir.join("metrics.json"), &report)?;
        if let Some(ranks) = &report.ranks {
            write_ranks_csv(&dir.join("ranks.csv"), &m.bundle.test, ranks)?;
        }
    }
    Ok(report)
}

fn resolve(map: &IdMap, kind: &'static str, id: &str) -> Result<u32> {
    map.index_of(id).ok_or_else(|| Error::UnknownId {
        kind,
        id: id.to_owned(),
    })
}

/// Top-`k` activity ids for a raw (user, location, time) context, by
/// descending score with ties to the smaller index.
pub fn cmd_predict(
    ckpt_path: &Path,
    bundle_dir: &Path,
    context: (&str, &str, &str),
    k: usize,
) -> Result<Vec<(String, f64)>> {
    let m = LoadedModel::open(ckpt_path, bundle_dir)?;
    let v = &m.bundle.vocab;
    let u = resolve(&v.users, "user", context.0)?;
    let l = resolve(&v.locations, "location", context.1)?;
    let t = resolve(&v.times, "time", context.2)?;
    let scores = m.embeddings()?.score_all_activities(u, l, t)?;
    Ok(top_k(&scores, k)
        .into_iter()
        .map(|a| (v.activities.ids()[a].clone(), scores[a]))
        .collect())
}

pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[derive(Debug, Clone)]
pub struct InspectOutput {
    pub stats: AdjacencyStats,
    /// Present only for attention fusion.
    pub attention: Option<Vec<AttentionSummary>>,
}

/// Writes `adjacency_stats.json` and, for attention fusion, `attention.csv`.
pub fn cmd_inspect(ckpt_path: &Path, bundle_dir: &Path, out_dir: &Path) -> Result<InspectOutput> {
    let m = LoadedModel::open(ckpt_path, bundle_dir)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("adjacency_stats.json");
    fs::write(&path, serde_json::to_string_pretty(&m.stats)? + "\n").map_err(|e| Error::io(&path, e))?;
    let attention = if m.ckpt.model.fusion == Fusion::Attention {
        let (weights, types) = attention_weights(&m.graph, &m.ckpt.model, &m.ckpt.params)?;
        let rows = attention_report(&weights, &types);
        write_attention_csv(&out_dir.join("attention.csv"), &rows)?;
        Some(rows)
    } else {
        None
    };
    Ok(InspectOutput {
        stats: m.stats,
        attention,
    })
}

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// The fixed four-user instance used by [`cmd_gradcheck`].
pub fn gradcheck_bundle() -> DatasetBundle {
    let ids = |p: &str, n: usize| IdMap::from_ids((0..n).map(|i| format!("{p}{i}")).collect()).expect("distinct ids");
    let vocab = Vocab {
        users: ids("u", 4),
        locations: ids("l", 3),
        times: ids("t", 2),
        activities: ids("a", 3),
    };
    let rows = [
        (0, 0, 0, 0),
        (0, 0, 1, 1),
        (0, 1, 0, 2),
        (1, 1, 1, 0),
        (1, 2, 0, 1),
        (1, 0, 0, 1),
        (2, 2, 1, 2),
        (2, 1, 0, 0),
        (2, 2, 1, 1),
        (3, 0, 1, 2),
        (3, 1, 1, 1),
        (3, 2, 0, 0),
    ];
    let train = rows.iter().map(|&(u, l, t, a)| Record::new(u, l, t, a)).collect();
    DatasetBundle::new(vocab, train, Vec::new(), Vec::new())
}

/// Model used for the gradient check: the run's model with `d = 6`, one
/// layer.
pub fn gradcheck_model(cfg: &RunConfig) -> ModelConfig {
    ModelConfig {
        d: 6,
        layers: 1,
        ..cfg.model.clone()
    }
}

/// Central-difference check of every parameter gradient of the full
/// objective on [`gradcheck_bundle`].
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradCheckReport> {
    gradcheck_with(cfg, GRADCHECK_STEP, GRADCHECK_TOLERANCE)
}

pub fn gradcheck_with(cfg: &RunConfig, h: f64, tolerance: f64) -> Result<GradCheckReport> {
    let model = gradcheck_model(cfg);
    model.validate()?;
    let bundle = gradcheck_bundle();
    let inc = build_incidence(&bundle)?;
    let adj = build_equivalent_adjacencies(&inc, &model.enabled_types)?;
    let graph = ModelGraph::new(&adj)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let params = init_params(&model, vocab_sizes(&bundle.vocab), &mut rng)?;
    let negatives = bundle
        .train
        .iter()
        .map(|r| sample_negative(&bundle, r.context(), &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let batch = PairwiseBatch::new(&bundle.train, negatives)?;
    let weights = LossWeights {
        lambda: cfg.train.lambda,
        gamma: cfg.train.gamma,
        l2_scope: cfg.train.l2_scope,
    };

    let loss = |tensors: &[crate::sparse::DenseMatrix]| -> Result<f64> {
        let p: ParameterSet = params.with_tensors(tensors)?;
        let mut tape = Tape::new();
        let (root, _, _) = total_loss(&mut tape, &graph, &model, &p, &batch, &weights)?;
        Ok(tape.scalar(root))
    };
    let gradient = |tensors: &[crate::sparse::DenseMatrix]| -> Result<Vec<crate::sparse::DenseMatrix>> {
        let p: ParameterSet = params.with_tensors(tensors)?;
        let mut tape = Tape::new();
        let (root, _, out) = total_loss(&mut tape, &graph, &model, &p, &batch, &weights)?;
        tape.backward(root)?;
        Ok(gradients(&tape, &out.params.vars))
    };
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    let tensors: Vec<_> = params.tensors().cloned().collect();
    finite_diff_check(&names, &tensors, loss, gradient, h, tolerance)
}

/// Human-readable gradient check summary.
pub fn gradcheck_summary(r: &GradCheckReport) -> String {
    let mut s = format!(
        "{} entries checked, max rel err {:.3e}, mean {:.3e}, tolerance {:.0e}: {}\n",
        r.checked,
        r.max_rel_err,
        r.mean_rel_err,
        r.tolerance,
        if r.passed() { "PASS" } else { "FAIL" }
    );
    if let Some((name, i)) = &r.worst {
        s.push_str(&format!("worst entry: {name}[{i}]\n"));
    }
    for (name, e) in &r.per_param {
        s.push_str(&format!("  {name:<16} {e:.3e}\n"));
    }
    s
}

/// Turns a failed report into a verification error.
pub fn ensure_passed(r: &GradCheckReport) -> Result<()> {
    if r.passed() {
        return Ok(());
    }
    let (name, i) = r.worst.clone().unwrap_or_default();
    Err(Error::Verification(format!(
        "gradient check failed: max rel err {:.3e} > {:.0e} at {name}[{i}]",
        r.max_rel_err, r.tolerance
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::fault;

    #[test]
    fn top_k_orders_and_breaks_ties() {
        assert_eq!(top_k(&[0.1, 0.5, 0.5, 0.9], 3), vec![3, 1, 2]);
        assert_eq!(top_k(&[0.0; 4], 10), vec![0, 1, 2, 3]);
    }

    #[test]
    fn gradcheck_passes_and_catches_a_fault() {
        let cfg = RunConfig::default();
        let r = cmd_gradcheck(&cfg).unwrap();
        assert!(r.passed(), "{}", gradcheck_summary(&r));
        assert!(ensure_passed(&r).is_ok());

        fault::inject("tanh");
        let bad = cmd_gradcheck(&cfg);
        fault::clear();
        let bad = bad.unwrap();
        assert!(!bad.passed());
        assert!(bad.worst.is_some());
        assert!(matches!(ensure_passed(&bad), Err(Error::Verification(_))));
    }

    // some entries here have gradients near 1e-8, where round-off at the
    // default step alone reaches 1e-4 relative
    #[test]
    fn gradcheck_covers_variants() {
        for set in [["fusion=mean"], ["fusion=max"], ["conv=hgconv-linearized"], ["l2_scope=full"]] {
            let mut cfg = RunConfig::default();
            cfg.apply_overrides(&set).unwrap();
            let r = gradcheck_with(&cfg, 1e-4, GRADCHECK_TOLERANCE).unwrap();
            assert!(r.passed(), "{set:?}: {}", gradcheck_summary(&r));
        }
    }
}
