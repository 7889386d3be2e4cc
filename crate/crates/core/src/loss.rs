//! Pairwise ranking loss, L2 penalty and the distance-correlation
//! independence penalty, all recorded on a [`Tape`].

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Record;
use crate::diff::{Tape, Var};
use crate::error::{Error, Result};
use crate::hypergraph::Aspect;
use crate::model::{entity_table, forward, ForwardOutput, ModelConfig, ModelGraph, ParameterSet};
use crate::sparse::DenseMatrix;

/// Denominator guard of [`distance_correlation`].
pub const DCOR_EPS: f64 = 1e-10;

/// Positives paired with sampled negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseBatch {
    pub contexts: Vec<(u32, u32, u32)>,
    pub positives: Vec<u32>,
    pub negatives: Vec<u32>,
    /// Sorted, deduplicated users of the batch.
    pub unique_users: Vec<u32>,
}

impl PairwiseBatch {
    pub fn new(records: &[Record], negatives: Vec<u32>) -> Result<Self> {
        if records.len() != negatives.len() {
            return Err(Error::Invalid(format!(
                "{} positives but {} negatives",
                records.len(),
                negatives.len()
            )));
        }
        let mut unique_users: Vec<u32> = records.iter().map(|r| r.u).collect();
        unique_users.sort_unstable();
        unique_users.dedup();
        Ok(Self {
            contexts: records.iter().map(Record::context).collect(),
            positives: records.iter().map(|r| r.a).collect(),
            negatives,
            unique_users,
        })
    }

    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum L2Scope {
    /// Layer-0 rows touched by the batch plus all non-embedding parameters.
    Touched,
    /// Every parameter.
    Full,
}

impl FromStr for L2Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "touched" => Ok(L2Scope::Touched),
            "full" => Ok(L2Scope::Full),
            _ => Err(Error::Config(format!("unknown l2_scope `{s}` (touched|full)"))),
        }
    }
}

impl std::fmt::Display for L2Scope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            L2Scope::Touched => "touched",
            L2Scope::Full => "full",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub gamma: f64,
    pub l2_scope: L2Scope,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bpr: f64,
    pub l2: f64,
    pub independence: f64,
    pub total: f64,
}

/// Mean of `−ln σ(pos − neg)`.
pub fn bpr_loss(tape: &mut Tape<'_>, pos: Var, neg: Var) -> Result<Var> {
    if tape.value(pos).is_empty() {
        return Err(Error::Empty("pairwise batch"));
    }
    let margin = tape.sub(pos, neg)?;
    let l = tape.sigmoid_logloss(margin);
    tape.mean_all(l)
}

fn sorted_unique(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v.dedup();
    v
}

fn sum_squares(tape: &mut Tape<'_>, x: Var) -> Var {
    let sq = tape.square(x);
    tape.sum_all(sq)
}

/// Squared norm of regularized parameters divided by the batch size.
pub fn l2_term(
    tape: &mut Tape<'_>,
    out: &ForwardOutput<'_>,
    params: &ParameterSet,
    batch: &PairwiseBatch,
    scope: L2Scope,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Empty("pairwise batch"));
    }
    let mut terms = Vec::new();
    match scope {
        L2Scope::Full => {
            for &v in &out.params.vars {
                terms.push(sum_squares(tape, v));
            }
        }
        L2Scope::Touched => {
            let users = batch.unique_users.iter().map(|&u| u as usize).collect();
            let locs = batch.contexts.iter().map(|c| c.1 as usize).collect();
            let times = batch.contexts.iter().map(|c| c.2 as usize).collect();
            let acts = batch
                .positives
                .iter()
                .chain(&batch.negatives)
                .map(|&a| a as usize)
                .collect();
            let rows = [
                ("P0", sorted_unique(users)),
                (entity_table(Aspect::Location), sorted_unique(locs)),
                (entity_table(Aspect::Time), sorted_unique(times)),
                (entity_table(Aspect::Activity), sorted_unique(acts)),
            ];
            for (name, idx) in rows {
                let sel = tape.row_select(out.params.var(name)?, &idx)?;
                terms.push(sum_squares(tape, sel));
            }
            for name in params.names() {
                if ["P0", "Q0", "R0", "S0"].contains(&name) {
                    continue;
                }
                let v = out.params.var(name)?;
                terms.push(sum_squares(tape, v));
            }
        }
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / batch.len() as f64))
}

/// Sample distance correlation between the rows of `x` and `y`.
pub fn distance_correlation(tape: &mut Tape<'_>, x: Var, y: Var) -> Result<Var> {
    let (n, _) = tape.shape(x);
    if n < 2 || tape.shape(y).0 != n {
        return Err(Error::Invalid(format!(
            "distance correlation needs two samples of equal size n >= 2, got {} and {}",
            n,
            tape.shape(y).0
        )));
    }
    // d²/√(d²+ε): smooth at 0, exactly 0 for coincident points, and within
    // ε/(2d) of the Euclidean distance elsewhere
    let centred = |tape: &mut Tape<'_>, m: Var| -> Result<Var> {
        let d2 = tape.pairwise_sq_dists(m);
        let guard = tape.sqrt_eps(d2);
        let d = tape.div(d2, guard)?;
        tape.double_center(d)
    };
    let a = centred(tape, x)?;
    let b = centred(tape, y)?;
    let mean_prod = |tape: &mut Tape<'_>, p: Var, q: Var| -> Result<Var> {
        let h = tape.hadamard_dense(p, q)?;
        let m = tape.mean_all(h)?;
        Ok(tape.clamp_min(m, 0.0))
    };
    let dcov2 = mean_prod(tape, a, b)?;
    let dvar_x = mean_prod(tape, a, a)?;
    let dvar_y = mean_prod(tape, b, b)?;
    let prod = tape.hadamard_dense(dvar_x, dvar_y)?;
    let root = tape.sqrt(prod);
    let root = tape.sqrt(root);
    let denom = tape.clamp_min(root, DCOR_EPS);
    let num = tape.sqrt(dcov2);
    tape.div(num, denom)
}

/// Sum of pairwise distance correlations between the three aspect chunks.
pub fn independence_loss(tape: &mut Tape<'_>, chunks: [Var; 3]) -> Result<Var> {
    if tape.shape(chunks[0]).0 < 2 {
        return Err(Error::Invalid("independence loss needs at least two users".into()));
    }
    let lt = distance_correlation(tape, chunks[0], chunks[1])?;
    let la = distance_correlation(tape, chunks[0], chunks[2])?;
    let ta = distance_correlation(tape, chunks[1], chunks[2])?;
    let s = tape.add(lt, la)?;
    tape.add(s, ta)
}

/// Batch scores `ŷ` of the given activities for the batch contexts.
pub fn batch_scores(tape: &mut Tape<'_>, out: &ForwardOutput<'_>, batch: &PairwiseBatch, activities: &[u32]) -> Result<Var> {
    let users: Vec<usize> = batch.contexts.iter().map(|c| c.0 as usize).collect();
    let picks: [Vec<usize>; 3] = [
        batch.contexts.iter().map(|c| c.1 as usize).collect(),
        batch.contexts.iter().map(|c| c.2 as usize).collect(),
        activities.iter().map(|&a| a as usize).collect(),
    ];
    let k = tape.shape(out.users[0]).1;
    let ones = tape.constant(DenseMatrix::filled(k, 1, 1.0));
    let mut acc: Option<Var> = None;
    for s in 0..3 {
        let pu = tape.row_select(out.users[s], &users)?;
        let pe = tape.row_select(out.entities[s], &picks[s])?;
        let h = tape.hadamard_dense(pu, pe)?;
        let dot = tape.matmul(h, ones)?;
        acc = Some(match acc {
            None => dot,
            Some(a) => tape.add(a, dot)?,
        });
    }
    Ok(acc.expect("three aspects"))
}

/// `bpr + λ·l2 + γ·independence` for one batch. Returns the root, the
/// numeric breakdown and the parameter leaves in [`ParameterSet`] order.
pub fn total_loss<'a, 'p>(
    tape: &mut Tape<'a>,
    graph: &'a ModelGraph,
    cfg: &ModelConfig,
    params: &'p ParameterSet,
    batch: &PairwiseBatch,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown, ForwardOutput<'p>)> {
    if batch.is_empty() {
        return Err(Error::Empty("pairwise batch"));
    }
    let out = forward(tape, graph, cfg, params, true)?;
    let pos = batch_scores(tape, &out, batch, &batch.positives)?;
    let neg = batch_scores(tape, &out, batch, &batch.negatives)?;
    let bpr = bpr_loss(tape, pos, neg)?;
    let l2 = l2_term(tape, &out, params, batch, weights.l2_scope)?;
    let scaled_l2 = tape.scale(l2, weights.lambda);
    let mut total = tape.add(bpr, scaled_l2)?;
    let mut independence = 0.0;
    // a batch drawn from a single user has no sample to correlate over
    if weights.gamma != 0.0 && batch.unique_users.len() >= 2 {
        let users: Vec<usize> = batch.unique_users.iter().map(|&u| u as usize).collect();
        let mut chunks = out.users;
        for c in &mut chunks {
            *c = tape.row_select(*c, &users)?;
        }
        let ind = independence_loss(tape, chunks)?;
        independence = tape.scalar(ind);
        let scaled = tape.scale(ind, weights.gamma);
        total = tape.add(total, scaled)?;
    }
    let breakdown = LossBreakdown {
        bpr: tape.scalar(bpr),
        l2: tape.scalar(l2),
        independence,
        total: tape.scalar(total),
    };
    Ok((total, breakdown, out))
}
