//! Full-ranking Recall@K and NDCG@K.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetBundle, ObservedIndex, Record};
use crate::error::{Error, Result};
use crate::model::FinalEmbeddings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub n_records: usize,
    #[serde(skip)]
    pub ranks: Option<Vec<usize>>,
}

/// 1-based rank of `target`; ties go to the smaller index.
pub fn rank_of_target(scores: &[f64], target: usize) -> Result<usize> {
    let Some(&s) = scores.get(target) else {
        return Err(Error::IndexOutOfRange {
            row: target,
            col: 0,
            rows: scores.len(),
            cols: 1,
        });
    };
    let above = scores.iter().filter(|&&v| v > s).count();
    let tied_before = scores[..target].iter().filter(|&&v| v == s).count();
    Ok(1 + above + tied_before)
}

/// Aggregates ranks; independent of their order.
pub fn metrics_from_ranks(ranks: &[usize], k: usize, keep_ranks: bool) -> Result<MetricsReport> {
    if ranks.is_empty() {
        return Err(Error::Empty("evaluation records"));
    }
    let mut hits_at = vec![0usize; k + 1];
    for &r in ranks {
        if r <= k {
            hits_at[r] += 1;
        }
    }
    let hits: usize = hits_at.iter().sum();
    let dcg: f64 = hits_at
        .iter()
        .enumerate()
        .skip(1)
        .map(|(r, &c)| c as f64 / ((r + 1) as f64).log2())
        .sum();
    let n = ranks.len() as f64;
    Ok(MetricsReport {
        k,
        recall: hits as f64 / n,
        ndcg: dcg / n,
        n_records: ranks.len(),
        ranks: keep_ranks.then(|| ranks.to_vec()),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions<'a> {
    pub k: usize,
    /// Drop these observed activities of a context from the candidates,
    /// except the target itself.
    pub exclude: Option<&'a ObservedIndex>,
    pub keep_ranks: bool,
}

impl EvalOptions<'_> {
    pub fn top(k: usize) -> Self {
        Self {
            k,
            exclude: None,
            keep_ranks: false,
        }
    }
}

pub fn evaluate(emb: &FinalEmbeddings, records: &[Record], k: usize) -> Result<MetricsReport> {
    evaluate_with(emb, records, &EvalOptions::top(k))
}

pub fn evaluate_with(emb: &FinalEmbeddings, records: &[Record], opts: &EvalOptions<'_>) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::Empty("evaluation records"));
    }
    let ranks = records
        .par_iter()
        .map(|r| {
            let mut scores = emb.score_all_activities(r.u, r.l, r.t)?;
            if let Some(seen) = opts.exclude.and_then(|o| o.activities_for(r.context())) {
                for &a in seen {
                    if a != r.a {
                        if let Some(s) = scores.get_mut(a as usize) {
                            *s = f64::NEG_INFINITY;
                        }
                    }
                }
            }
            rank_of_target(&scores, r.a as usize)
        })
        .collect::<Result<Vec<_>>>()?;
    metrics_from_ranks(&ranks, opts.k, opts.keep_ranks)
}

/// Ranks every test record's activities by training frequency.
pub fn popularity_baseline(bundle: &DatasetBundle, k: usize) -> Result<MetricsReport> {
    if bundle.train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let mut counts = vec![0.0; bundle.vocab.n_activities()];
    for r in &bundle.train {
        counts[r.a as usize] += 1.0;
    }
    let ranks = bundle
        .test
        .iter()
        .map(|r| rank_of_target(&counts, r.a as usize))
        .collect::<Result<Vec<_>>>()?;
    metrics_from_ranks(&ranks, k, false)
}

pub fn write_metrics_json(path: &Path, report: &MetricsReport) -> Result<()> {
    let text = serde_json::to_string(report)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn write_ranks_csv(path: &Path, records: &[Record], ranks: &[usize]) -> Result<()> {
    let mut out = String::from("user,location,time,activity,rank\n");
    for (r, rank) in records.iter().zip(ranks) {
        out.push_str(&format!("{},{},{},{},{rank}\n", r.u, r.l, r.t, r.a));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{IdMap, Vocab};
    use crate::sparse::DenseMatrix;
    use proptest::prelude::*;

    #[test]
    fn crafted_ranks() {
        assert_eq!(rank_of_target(&[0.1, 0.9, 0.3], 1).unwrap(), 1);
        assert_eq!(rank_of_target(&[0.5; 6], 0).unwrap(), 1);
        assert_eq!(rank_of_target(&[0.5; 6], 4).unwrap(), 5);
        assert!(rank_of_target(&[0.5; 3], 3).is_err());

        let r1 = metrics_from_ranks(&[1], 10, false).unwrap();
        assert_eq!((r1.recall, r1.ndcg), (1.0, 1.0));
        let r3 = metrics_from_ranks(&[3], 10, false).unwrap();
        assert_eq!((r3.recall, r3.ndcg), (1.0, 0.5));
        let out = metrics_from_ranks(&[11], 10, false).unwrap();
        assert_eq!((out.recall, out.ndcg), (0.0, 0.0));
        assert!(metrics_from_ranks(&[], 10, false).is_err());
    }

    fn table(n_u: usize, n_a: usize, vals: &[f64]) -> FinalEmbeddings {
        let users = DenseMatrix::from_vec(n_u, 1, vec![1.0; n_u]).unwrap();
        let zero_u = DenseMatrix::zeros(n_u, 1);
        FinalEmbeddings {
            users: [zero_u.clone(), zero_u, users],
            entities: [
                DenseMatrix::zeros(1, 1),
                DenseMatrix::zeros(1, 1),
                DenseMatrix::from_vec(n_a, 1, vals.to_vec()).unwrap(),
            ],
        }
    }

    #[test]
    fn exclusion_flag() {
        let emb = table(1, 4, &[0.9, 0.8, 0.1, 0.0]);
        let recs = [Record::new(0, 0, 0, 1)];
        assert_eq!(evaluate_with(&emb, &recs, &EvalOptions { keep_ranks: true, ..EvalOptions::top(1) }).unwrap().ranks, Some(vec![2]));
        let seen = ObservedIndex::from_records(&[Record::new(0, 0, 0, 0), Record::new(0, 0, 0, 1)]);
        let r = evaluate_with(
            &emb,
            &recs,
            &EvalOptions {
                k: 1,
                exclude: Some(&seen),
                keep_ranks: true,
            },
        )
        .unwrap();
        assert_eq!(r.ranks, Some(vec![1]));
    }

    fn bundle(train: Vec<Record>, test: Vec<Record>, n_a: usize) -> DatasetBundle {
        let ids = |p: &str, n: usize| IdMap::from_ids((0..n).map(|i| format!("{p}{i}")).collect()).unwrap();
        let vocab = Vocab {
            users: ids("u", 1),
            locations: ids("l", 1),
            times: ids("t", 1),
            activities: ids("a", n_a),
        };
        DatasetBundle::new(vocab, train, Vec::new(), test)
    }

    #[test]
    fn popularity() {
        let train = vec![Record::new(0, 0, 0, 0); 3];
        let b = bundle(train, vec![Record::new(0, 0, 0, 0); 2], 5);
        assert_eq!(popularity_baseline(&b, 1).unwrap().recall, 1.0);

        let train: Vec<_> = (0..5).map(|a| Record::new(0, 0, 0, a)).collect();
        let test: Vec<_> = (0..5).map(|a| Record::new(0, 0, 0, a)).collect();
        let b = bundle(train, test, 5);
        let r = popularity_baseline(&b, 2).unwrap();
        // uniform counts: index order, so activities 0 and 1 hit
        assert_eq!(r.recall, 0.4);
        assert!((0.0..=1.0).contains(&r.ndcg));

        let b = bundle(Vec::new(), Vec::new(), 2);
        assert!(popularity_baseline(&b, 1).is_err());
    }

    #[test]
    fn json_shape() {
        let r = metrics_from_ranks(&[1, 3], 10, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        write_metrics_json(&p, &r).unwrap();
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(v["k"], 10);
        assert_eq!(v["n_records"], 2);
        assert_eq!(v["recall"], 1.0);
        assert_eq!(v["ndcg"], 0.75);
        assert!(v.get("ranks").is_none());
    }

    proptest! {
        #[test]
        fn metric_properties(
            // multiples of 1/8 keep shifted scores exact and produce ties
            vals in prop::collection::vec((-40i32..40).prop_map(|v| v as f64 / 8.0), 12),
            targets in prop::collection::vec(0u32..12, 1..20),
            shift in (-100i32..100).prop_map(f64::from),
        ) {
            let n_u = targets.len();
            let recs: Vec<Record> = targets.iter().enumerate().map(|(u, &a)| Record::new(u as u32, 0, 0, a)).collect();
            let emb = table(n_u, 12, &vals);
            let mut prev = (0.0, 0.0);
            for k in 1..=12 {
                let r = evaluate(&emb, &recs, k).unwrap();
                prop_assert!(r.recall >= prev.0 && r.ndcg >= prev.1 - 1e-15);
                prop_assert!(r.ndcg <= r.recall + 1e-15);
                prop_assert!((0.0..=1.0).contains(&r.recall) && (0.0..=1.0).contains(&r.ndcg));
                prev = (r.recall, r.ndcg);
            }
            let shifted: Vec<f64> = vals.iter().map(|v| v + shift).collect();
            for &a in &targets {
                prop_assert_eq!(
                    rank_of_target(&shifted, a as usize).unwrap(),
                    rank_of_target(&vals, a as usize).unwrap()
                );
            }
            let mut rev = recs.clone();
            rev.reverse();
            let a = evaluate(&emb, &recs, 5).unwrap();
            let b = evaluate(&emb, &rev, 5).unwrap();
            prop_assert_eq!(a.recall.to_bits(), b.recall.to_bits());
            prop_assert_eq!(a.ndcg.to_bits(), b.ndcg.to_bits());
        }
    }
}
