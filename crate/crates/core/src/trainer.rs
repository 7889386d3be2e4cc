//! Adam training loop with step decay, early stopping and checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_negative, DatasetBundle, VocabHashes};
use crate::diff::Tape;
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, MetricsReport};
use crate::hypergraph::{build_equivalent_adjacencies, build_incidence};
use crate::loss::{total_loss, L2Scope, LossBreakdown, LossWeights, PairwiseBatch};
use crate::model::{compute_embeddings, init_params, vocab_sizes, ModelConfig, ModelGraph, ParameterSet};
use crate::sparse::DenseMatrix;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    /// When set, decay at these epochs instead of every `lr_decay_every`.
    pub lr_milestones: Option<Vec<usize>>,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub negatives_per_positive: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub seed: u64,
    pub eval_k: usize,
    pub l2_scope: L2Scope,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_decay: 0.1,
            lr_decay_every: 20,
            lr_milestones: None,
            epochs: 500,
            patience: 20,
            batch_size: 2048,
            negatives_per_positive: 1,
            lambda: 3e-5,
            gamma: 3e-3,
            seed: 2022,
            eval_k: 10,
            l2_scope: L2Scope::Touched,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.negatives_per_positive == 0 {
            return bad("negatives_per_positive must be at least 1");
        }
        if self.eval_k == 0 {
            return bad("eval_k must be at least 1");
        }
        if self.lambda < 0.0 || self.gamma < 0.0 {
            return bad("lambda and gamma must be non-negative");
        }
        Ok(())
    }

    /// Learning rate used during 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = match &self.lr_milestones {
            Some(ms) => ms.iter().filter(|&&m| m <= epoch).count(),
            None => epoch / self.lr_decay_every,
        };
        self.lr * self.lr_decay.powi(decays as i32)
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            gamma: self.gamma,
            l2_scope: self.l2_scope,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<DenseMatrix>,
    pub v: Vec<DenseMatrix>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        let zeros: Vec<DenseMatrix> = params
            .tensors()
            .map(|t| DenseMatrix::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut ParameterSet, grads: &[DenseMatrix], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Invalid("gradient count does not match parameters".into()));
    }
    for ((name, p), g) in params.entries().iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape(),
                rhs: g.shape(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, p) in params.tensors_mut().enumerate() {
        let g = grads[i].as_slice();
        let m = state.m[i].as_mut_slice();
        let v = state.v[i].as_mut_slice();
        for (j, w) in p.as_mut_slice().iter_mut().enumerate() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Shuffled training positives with fresh negatives, in batches.
pub fn sample_epoch_batches(bundle: &DatasetBundle, cfg: &TrainConfig, epoch: usize) -> Result<Vec<PairwiseBatch>> {
    if bundle.train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let mut rng = epoch_rng(cfg.seed, epoch);
    let mut order: Vec<usize> = (0..bundle.train.len()).collect();
    order.shuffle(&mut rng);
    let mut pairs = Vec::with_capacity(order.len() * cfg.negatives_per_positive);
    for i in order {
        let r = bundle.train[i];
        for _ in 0..cfg.negatives_per_positive {
            pairs.push((r, sample_negative(bundle, r.context(), &mut rng)?));
        }
    }
    pairs
        .chunks(cfg.batch_size)
        .map(|c| {
            let recs: Vec<_> = c.iter().map(|p| p.0).collect();
            PairwiseBatch::new(&recs, c.iter().map(|p| p.1).collect())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestMetrics {
    pub epoch: usize,
    pub recall: f64,
    pub ndcg: f64,
}

/// Early-stopping bookkeeping carried across resumes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    /// Epochs completed; the next epoch to run.
    pub epoch: usize,
    pub best: Option<BestMetrics>,
    pub best_ndcg: f64,
    /// Last epoch on which Recall or NDCG improved.
    pub last_improvement: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab: VocabHashes,
    pub sizes: [usize; 4],
    pub params: ParameterSet,
    pub adam: AdamState,
    pub progress: TrainProgress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub bpr: f64,
    pub l2: f64,
    pub ind: f64,
    pub total: f64,
    pub val_recall: f64,
    pub val_ndcg: f64,
    pub lr: f64,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "epoch,bpr,l2,ind,total,val_recall10,val_ndcg10,lr,seconds";

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{:.3}\n",
            r.epoch, r.bpr, r.l2, r.ind, r.total, r.val_recall, r.val_ndcg, r.lr, r.seconds
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<LogRow>,
}

#[derive(Default)]
pub struct FitOptions<'a> {
    /// Continue from the last checkpoint of an earlier run and its best.
    pub resume: Option<(Checkpoint, Checkpoint)>,
    pub on_epoch: Option<&'a mut dyn FnMut(&LogRow)>,
}

pub(crate) fn gradients(tape: &Tape<'_>, vars: &[crate::diff::Var]) -> Vec<DenseMatrix> {
    vars.iter()
        .map(|&v| {
            tape.grad(v).cloned().unwrap_or_else(|| {
                let (r, c) = tape.shape(v);
                DenseMatrix::zeros(r, c)
            })
        })
        .collect()
}

/// Finite breakdown or an error naming the epoch and batch.
fn check_finite(b: &LossBreakdown, epoch: usize, batch: usize) -> Result<()> {
    if [b.bpr, b.l2, b.independence, b.total].iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("loss {b:?} at epoch {epoch}, batch {batch}")))
    }
}

pub fn fit(bundle: &DatasetBundle, model: &ModelConfig, train: &TrainConfig, opts: FitOptions<'_>) -> Result<FitOutcome> {
    model.validate()?;
    train.validate()?;
    if bundle.valid.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let sizes = vocab_sizes(&bundle.vocab);
    let inc = build_incidence(bundle)?;
    let adj = build_equivalent_adjacencies(&inc, &model.enabled_types)?;
    let graph = ModelGraph::new(&adj)?;
    drop(adj);

    let FitOptions { resume, mut on_epoch } = opts;
    let (mut params, mut adam, mut progress, mut best) = match resume {
        Some((last, best)) => {
            bundle.vocab.check_hashes(&last.vocab)?;
            if last.model != *model || last.sizes != sizes {
                return Err(Error::Invalid("resume checkpoint was trained with a different model".into()));
            }
            (last.params, last.adam, last.progress, Some(best))
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
            let params = init_params(model, sizes, &mut rng)?;
            let adam = AdamState::new(&params);
            let progress = TrainProgress {
                epoch: 0,
                best: None,
                best_ndcg: -1.0,
                last_improvement: 0,
            };
            (params, adam, progress, None)
        }
    };

    let snapshot = |params: &ParameterSet, adam: &AdamState, progress: TrainProgress| Checkpoint {
        model: model.clone(),
        train: train.clone(),
        vocab: bundle.vocab.hashes(),
        sizes,
        params: params.clone(),
        adam: adam.clone(),
        progress,
    };

    let weights = train.weights();
    let mut log = Vec::new();
    let mut tape = Tape::new();
    while progress.epoch < train.epochs {
        let epoch = progress.epoch;
        // a resumed run that had already stopped stays stopped
        if epoch > 0 && epoch - 1 - progress.last_improvement >= train.patience {
            break;
        }
        let started = Instant::now();
        let lr = train.lr_at(epoch);
        let batches = sample_epoch_batches(bundle, train, epoch)?;
        let mut sums = LossBreakdown::default();
        for (bi, batch) in batches.iter().enumerate() {
            tape.reset();
            let (root, breakdown, out) = total_loss(&mut tape, &graph, model, &params, batch, &weights)?;
            check_finite(&breakdown, epoch, bi)?;
            tape.backward(root)?;
            let grads = gradients(&tape, &out.params.vars);
            drop(out);
            adam_step(&mut params, &grads, &mut adam, lr)?;
            sums.bpr += breakdown.bpr;
            sums.l2 += breakdown.l2;
            sums.independence += breakdown.independence;
            sums.total += breakdown.total;
        }
        tape.reset();
        let nb = batches.len() as f64;

        let emb = compute_embeddings(&graph, model, &params)?;
        let val: MetricsReport = evaluate(&emb, &bundle.valid, train.eval_k)?;
        let improved_recall = progress.best.is_none_or(|b| val.recall > b.recall);
        let improved_ndcg = val.ndcg > progress.best_ndcg;
        if improved_ndcg {
            progress.best_ndcg = val.ndcg;
        }
        if improved_recall || improved_ndcg {
            progress.last_improvement = epoch;
        }
        progress.epoch = epoch + 1;
        if improved_recall {
            progress.best = Some(BestMetrics {
                epoch,
                recall: val.recall,
                ndcg: val.ndcg,
            });
            best = Some(snapshot(&params, &adam, progress));
        }
        let row = LogRow {
            epoch,
            bpr: sums.bpr / nb,
            l2: sums.l2 / nb,
            ind: sums.independence / nb,
            total: sums.total / nb,
            val_recall: val.recall,
            val_ndcg: val.ndcg,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(cb) = on_epoch.as_mut() {
            cb(&row);
        }
        log.push(row);
        if epoch - progress.last_improvement >= train.patience {
            break;
        }
    }
    let last = snapshot(&params, &adam, progress);
    let best = best.unwrap_or_else(|| last.clone());
    Ok(FitOutcome { best, last, log })
}

const MAGIC: &[u8; 4] = b"DHCN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    vocab: VocabHashes,
    sizes: [usize; 4],
    tensors: Vec<TensorMeta>,
    adam_step: u64,
    progress: TrainProgress,
}

/// Container: magic, u32 version, u64 header length, JSON header, then the
/// parameter tables followed by Adam first and second moments as f64 LE.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let header = Header {
        model: ckpt.model.clone(),
        train: ckpt.train.clone(),
        vocab: ckpt.vocab.clone(),
        sizes: ckpt.sizes,
        tensors: ckpt
            .params
            .entries()
            .iter()
            .map(|(name, m)| TensorMeta {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
        adam_step: ckpt.adam.step,
        progress: ckpt.progress,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    let tables = ckpt.params.tensors().chain(&ckpt.adam.m).chain(&ckpt.adam.v);
    for t in tables {
        for v in t.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |m: &str| Error::CheckpointCorrupt(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(corrupt("missing DHCN header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..).ok_or_else(|| corrupt("truncated"))?;
    if hlen > body.len() {
        return Err(corrupt("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(&e.to_string()))?;
    let payload = &body[hlen..];
    let per_copy: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
    if payload.len() != 3 * per_copy * 8 {
        return Err(corrupt(&format!(
            "payload holds {} bytes, header describes {}",
            payload.len(),
            3 * per_copy * 8
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut read_copy = || -> Result<Vec<DenseMatrix>> {
        header
            .tensors
            .iter()
            .map(|t| DenseMatrix::from_vec(t.rows, t.cols, values.by_ref().take(t.rows * t.cols).collect()))
            .collect()
    };
    let tables = read_copy()?;
    let m = read_copy()?;
    let v = read_copy()?;
    let entries = header.tensors.iter().map(|t| t.name.clone()).zip(tables).collect();
    let params = ParameterSet::from_entries(&header.model, header.sizes, entries)
        .map_err(|e| corrupt(&e.to_string()))?;
    Ok(Checkpoint {
        model: header.model,
        train: header.train,
        vocab: header.vocab,
        sizes: header.sizes,
        params,
        adam: AdamState {
            m,
            v,
            step: header.adam_step,
        },
        progress: header.progress,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{IdMap, Record, Vocab};
    use rand::Rng;

    fn toy_bundle(seed: u64) -> DatasetBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = |p: &str, n: usize| IdMap::from_ids((0..n).map(|i| format!("{p}{i}")).collect()).unwrap();
        let vocab = Vocab {
            users: ids("u", 12),
            locations: ids("l", 5),
            times: ids("t", 3),
            activities: ids("a", 8),
        };
        let rec = |rng: &mut ChaCha8Rng| {
            let u = rng.gen_range(0..12u32);
            Record::new(u, rng.gen_range(0..5), rng.gen_range(0..3), (u % 4) * 2 + rng.gen_range(0..2))
        };
        let mut train: Vec<Record> = (0..150).map(|_| rec(&mut rng)).collect();
        train.sort();
        train.dedup();
        let valid = (0..20).map(|_| rec(&mut rng)).collect();
        let test = (0..20).map(|_| rec(&mut rng)).collect();
        DatasetBundle::new(vocab, train, valid, test)
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            d: 6,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn lr_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 1e-3);
        assert_eq!(c.lr_at(19), 1e-3);
        assert!((c.lr_at(45) - 1e-5).abs() < 1e-18);
        for e in 0..200 {
            assert_eq!(c.lr_at(e), 1e-3 * 0.1f64.powi((e / 20) as i32));
        }
        let m = TrainConfig {
            lr_milestones: Some(vec![50, 100, 200, 400]),
            lr_decay: 0.5,
            ..TrainConfig::default()
        };
        assert_eq!(m.lr_at(49), 1e-3);
        assert_eq!(m.lr_at(100), 2.5e-4);
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr_decay: 1.5, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn adam_rules() {
        let cfg = tiny_model();
        let mut p = init_params(&cfg, [3, 2, 2, 2], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let zero: Vec<_> = p.tensors().map(|t| DenseMatrix::zeros(t.rows(), t.cols())).collect();
        adam_step(&mut p, &zero, &mut st, 1e-3).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);

        let mut p = before.clone();
        let mut st = AdamState::new(&p);
        let g: Vec<_> = p
            .tensors()
            .enumerate()
            .map(|(i, t)| DenseMatrix::filled(t.rows(), t.cols(), if i % 2 == 0 { 0.5 } else { -2.0 }))
            .collect();
        adam_step(&mut p, &g, &mut st, 1e-3).unwrap();
        for ((a, b), gi) in p.tensors().zip(before.tensors()).zip(&g) {
            for e in 0..a.len() {
                let step = a.as_slice()[e] - b.as_slice()[e];
                let expect = -1e-3 * gi.as_slice()[e].signum();
                assert!((step - expect).abs() < 1e-6);
            }
        }
        let mut bad = g.clone();
        bad[0].set(0, 0, f64::NAN);
        assert!(matches!(adam_step(&mut p, &bad, &mut st, 1e-3), Err(Error::NonFinite(_))));
    }

    #[test]
    fn batches() {
        let b = toy_bundle(1);
        let cfg = TrainConfig {
            batch_size: 50,
            ..TrainConfig::default()
        };
        let a = sample_epoch_batches(&b, &cfg, 3).unwrap();
        assert_eq!(a, sample_epoch_batches(&b, &cfg, 3).unwrap());
        assert_ne!(a, sample_epoch_batches(&b, &cfg, 4).unwrap());
        let n = b.train.len();
        let sizes: Vec<usize> = a.iter().map(PairwiseBatch::len).collect();
        assert_eq!(sizes.iter().sum::<usize>(), n);
        assert!(sizes[..sizes.len() - 1].iter().all(|&s| s == 50));
        for batch in &a {
            for (c, &neg) in batch.contexts.iter().zip(&batch.negatives) {
                assert!(!b.observed.contains(&Record::new(c.0, c.1, c.2, neg)));
            }
        }
        let two = TrainConfig {
            negatives_per_positive: 2,
            ..cfg
        };
        let total: usize = sample_epoch_batches(&b, &two, 0).unwrap().iter().map(PairwiseBatch::len).sum();
        assert_eq!(total, 2 * n);
    }

    #[test]
    fn batch_sizes_for_5000_positives() {
        let b = {
            let ids = |p: &str, n: usize| IdMap::from_ids((0..n).map(|i| format!("{p}{i}")).collect()).unwrap();
            let vocab = Vocab {
                users: ids("u", 50),
                locations: ids("l", 10),
                times: ids("t", 10),
                activities: ids("a", 4),
            };
            let train: Vec<Record> = (0..5000u32).map(|i| Record::new(i % 50, (i / 50) % 10, i / 500, 0)).collect();
            DatasetBundle::new(vocab, train, Vec::new(), Vec::new())
        };
        let cfg = TrainConfig::default();
        let sizes: Vec<usize> = sample_epoch_batches(&b, &cfg, 0).unwrap().iter().map(PairwiseBatch::len).collect();
        assert_eq!(sizes, vec![2048, 2048, 904]);
    }

    fn quick_train() -> TrainConfig {
        TrainConfig {
            lr: 0.01,
            lr_decay: 1.0,
            epochs: 6,
            batch_size: 64,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn fit_is_deterministic_and_tracks_best() {
        let b = toy_bundle(2);
        let before = crate::hypergraph::adjacency_build_count();
        let a = fit(&b, &tiny_model(), &quick_train(), FitOptions::default()).unwrap();
        assert_eq!(crate::hypergraph::adjacency_build_count(), before + 1);
        let c = fit(&b, &tiny_model(), &quick_train(), FitOptions::default()).unwrap();
        assert_eq!(a.best, c.best);
        assert_eq!(a.last, c.last);
        let strip = |l: &[LogRow]| l.iter().map(|r| LogRow { seconds: 0.0, ..r.clone() }).collect::<Vec<_>>();
        assert_eq!(strip(&a.log), strip(&c.log));
        let max = a.log.iter().map(|r| r.val_recall).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(a.best.progress.best.unwrap().recall, max);
        assert_eq!(a.last.adam.step as usize, a.log.len() * sample_epoch_batches(&b, &quick_train(), 0).unwrap().len());
    }

    #[test]
    fn early_stopping_waits_for_patience() {
        let b = toy_bundle(3);
        let cfg = TrainConfig {
            // a vanishing step size freezes the metrics after the first epoch
            lr: 1e-300,
            patience: 4,
            epochs: 100,
            ..quick_train()
        };
        let out = fit(&b, &tiny_model(), &cfg, FitOptions::default()).unwrap();
        let e = out.best.progress.last_improvement;
        assert_eq!(out.log.last().unwrap().epoch, e + 4);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let b = toy_bundle(4);
        let full = fit(&b, &tiny_model(), &quick_train(), FitOptions::default()).unwrap();
        let first = fit(
            &b,
            &tiny_model(),
            &TrainConfig {
                epochs: 3,
                ..quick_train()
            },
            FitOptions::default(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (lp, bp) = (dir.path().join("last.ckpt"), dir.path().join("best.ckpt"));
        save_checkpoint(&first.last, &lp).unwrap();
        save_checkpoint(&first.best, &bp).unwrap();
        let resumed = fit(
            &b,
            &tiny_model(),
            &quick_train(),
            FitOptions {
                resume: Some((load_checkpoint(&lp).unwrap(), load_checkpoint(&bp).unwrap())),
                on_epoch: None,
            },
        )
        .unwrap();
        let tail: Vec<_> = full.log[3..].iter().map(|r| (r.epoch, r.total.to_bits(), r.val_recall.to_bits())).collect();
        let got: Vec<_> = resumed.log.iter().map(|r| (r.epoch, r.total.to_bits(), r.val_recall.to_bits())).collect();
        assert_eq!(tail, got);
        assert_eq!(resumed.last.params, full.last.params);
        assert_eq!(resumed.last.adam.step, full.last.adam.step);
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let b = toy_bundle(5);
        let out = fit(
            &b,
            &tiny_model(),
            &TrainConfig {
                epochs: 2,
                ..quick_train()
            },
            FitOptions::default(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        save_checkpoint(&out.last, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, out.last);
        for (a, b) in back.params.tensors().zip(out.last.params.tensors()) {
            assert!(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }

        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::CheckpointCorrupt(_))));
        let mut wrong = bytes.clone();
        wrong[4] = 9;
        fs::write(&p, &wrong).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::CheckpointVersion { found: 9, .. })));
        fs::write(&p, b"nope").unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::CheckpointCorrupt(_))));

        let mut other = toy_bundle(5);
        other.vocab.users = IdMap::from_ids((0..12).map(|i| format!("x{i}")).collect()).unwrap();
        let res = fit(
            &other,
            &tiny_model(),
            &quick_train(),
            FitOptions {
                resume: Some((out.last.clone(), out.best.clone())),
                on_epoch: None,
            },
        );
        assert!(matches!(res, Err(Error::VocabMismatch(_))));
    }

    #[test]
    fn empty_validation_is_rejected() {
        let mut b = toy_bundle(6);
        b.valid.clear();
        assert!(matches!(
            fit(&b, &tiny_model(), &quick_train(), FitOptions::default()),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn log_format() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        let row = LogRow {
            epoch: 0,
            bpr: 0.5,
            l2: 1.0,
            ind: 0.25,
            total: 0.75,
            val_recall: 0.1,
            val_ndcg: 0.05,
            lr: 1e-3,
            seconds: 0.1234,
        };
        write_log_csv(&p, &[row]).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text, format!("{LOG_HEADER}\n0,0.5,1,0.25,0.75,0.1,0.05,0.001,0.123\n"));
    }
}
