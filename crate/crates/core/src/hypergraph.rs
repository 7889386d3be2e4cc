//! Heterogeneous hypergraph construction.
//!
//! User-similarity hyperedges are never materialized. For a similarity type
//! `τ` covering entity families `{L, T, A}` the equivalent adjacency
//! `H_τ H_τᵀ` is obtained as the Hadamard product of the per-family
//! adjacencies `R_us R_usᵀ`, because a binary incidence for a combination
//! hyperedge is the product of the per-family incidences.

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Column budget for [`oracle_adjacency`].
pub const ORACLE_MAX_COLUMNS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Aspect {
    Location,
    Time,
    Activity,
}

impl Aspect {
    pub const ALL: [Aspect; 3] = [Aspect::Location, Aspect::Time, Aspect::Activity];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn short(self) -> &'static str {
        match self {
            Aspect::Location => "L",
            Aspect::Time => "T",
            Aspect::Activity => "A",
        }
    }
}

impl fmt::Display for Aspect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HyperedgeType {
    L,
    T,
    A,
    LT,
    LA,
    TA,
    LTA,
    U,
}

impl HyperedgeType {
    pub const ALL: [HyperedgeType; 8] = [
        HyperedgeType::L,
        HyperedgeType::T,
        HyperedgeType::A,
        HyperedgeType::LT,
        HyperedgeType::LA,
        HyperedgeType::TA,
        HyperedgeType::LTA,
        HyperedgeType::U,
    ];

    pub const SIMILARITY: [HyperedgeType; 7] = [
        HyperedgeType::L,
        HyperedgeType::T,
        HyperedgeType::A,
        HyperedgeType::LT,
        HyperedgeType::LA,
        HyperedgeType::TA,
        HyperedgeType::LTA,
    ];

    pub fn is_similarity(self) -> bool {
        self != HyperedgeType::U
    }

    /// Entity families a similarity type is built from (its aspect set).
    /// Empty for `U`.
    pub fn aspects(self) -> &'static [Aspect] {
        use Aspect::*;
        match self {
            HyperedgeType::L => &[Location],
            HyperedgeType::T => &[Time],
            HyperedgeType::A => &[Activity],
            HyperedgeType::LT => &[Location, Time],
            HyperedgeType::LA => &[Location, Activity],
            HyperedgeType::TA => &[Time, Activity],
            HyperedgeType::LTA => &[Location, Time, Activity],
            HyperedgeType::U => &[],
        }
    }

    pub fn covers(self, aspect: Aspect) -> bool {
        self.aspects().contains(&aspect)
    }

    pub fn name(self) -> &'static str {
        match self {
            HyperedgeType::L => "L",
            HyperedgeType::T => "T",
            HyperedgeType::A => "A",
            HyperedgeType::LT => "LT",
            HyperedgeType::LA => "LA",
            HyperedgeType::TA => "TA",
            HyperedgeType::LTA => "LTA",
            HyperedgeType::U => "U",
        }
    }

    pub fn all_set() -> BTreeSet<HyperedgeType> {
        Self::ALL.into_iter().collect()
    }
}

impl fmt::Display for HyperedgeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HyperedgeType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HyperedgeType::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown hyperedge type `{s}`")))
    }
}

/// Binary user × entity incidences from the training split.
#[derive(Debug, Clone)]
pub struct IncidenceSet {
    pub user_location: CsrMatrix,
    pub user_time: CsrMatrix,
    pub user_activity: CsrMatrix,
}

impl IncidenceSet {
    pub fn empty(n_users: usize, n_locations: usize, n_times: usize, n_activities: usize) -> Self {
        Self {
            user_location: CsrMatrix::empty(n_users, n_locations),
            user_time: CsrMatrix::empty(n_users, n_times),
            user_activity: CsrMatrix::empty(n_users, n_activities),
        }
    }

    pub fn n_users(&self) -> usize {
        self.user_location.n_rows()
    }

    pub fn for_aspect(&self, aspect: Aspect) -> &CsrMatrix {
        match aspect {
            Aspect::Location => &self.user_location,
            Aspect::Time => &self.user_time,
            Aspect::Activity => &self.user_activity,
        }
    }
}

/// Node-to-hyperedge and hyperedge-to-node mean operators for the
/// user-centred hyperedges of one aspect.
#[derive(Debug, Clone)]
pub struct UserHyperedgeOps {
    /// users × entities, rows sum to 1 or 0
    pub node_to_edge: CsrMatrix,
    /// entities × users, rows sum to 1 or 0
    pub edge_to_node: CsrMatrix,
}

#[derive(Debug, Clone)]
pub struct AdjacencySet {
    pub n_users: usize,
    pub enabled: BTreeSet<HyperedgeType>,
    /// `H Hᵀ` per enabled similarity type, before normalization.
    pub raw: BTreeMap<HyperedgeType, CsrMatrix>,
    /// Symmetrically normalized propagation operator per enabled similarity type.
    pub normalized: BTreeMap<HyperedgeType, CsrMatrix>,
    /// Present only when `U` is enabled, indexed by [`Aspect::index`].
    pub user_edges: Option<[UserHyperedgeOps; 3]>,
}

thread_local! {
    static BUILD_COUNT: Cell<usize> = const { Cell::new(0) };
}

/// How many times [`build_equivalent_adjacencies`] has run on this thread.
pub fn adjacency_build_count() -> usize {
    BUILD_COUNT.with(Cell::get)
}

pub fn build_incidence(bundle: &DatasetBundle) -> Result<IncidenceSet> {
    if bundle.train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let v = &bundle.vocab;
    let n_u = v.n_users();
    let binary = |n_cols: usize, pick: &dyn Fn(&crate::data::Record) -> u32| -> Result<CsrMatrix> {
        let mut pairs: Vec<(usize, usize)> = bundle
            .train
            .iter()
            .map(|r| (r.u as usize, pick(r) as usize))
            .collect();
        pairs.sort_unstable();
        pairs.dedup();
        let entries: Vec<_> = pairs.into_iter().map(|(i, j)| (i, j, 1.0)).collect();
        CsrMatrix::from_triplets(n_u, n_cols, &entries)
    };
    Ok(IncidenceSet {
        user_location: binary(v.n_locations(), &|r| r.l)?,
        user_time: binary(v.n_times(), &|r| r.t)?,
        user_activity: binary(v.n_activities(), &|r| r.a)?,
    })
}

/// Pre-normalization equivalent adjacencies for the requested similarity
/// types. Per-family products are computed only if some requested type
/// needs them.
pub fn equivalent_adjacencies(
    inc: &IncidenceSet,
    types: &BTreeSet<HyperedgeType>,
) -> Result<BTreeMap<HyperedgeType, CsrMatrix>> {
    let needed: BTreeSet<Aspect> = types
        .iter()
        .flat_map(|t| t.aspects().iter().copied())
        .collect();
    let mut base: BTreeMap<Aspect, CsrMatrix> = BTreeMap::new();
    for &a in &needed {
        let r = inc.for_aspect(a);
        base.insert(a, r.spgemm(&r.transpose())?);
    }
    let mut out = BTreeMap::new();
    for &t in types.iter().filter(|t| t.is_similarity()) {
        let aspects = t.aspects();
        let mut acc = base[&aspects[0]].clone();
        for a in &aspects[1..] {
            acc = acc.hadamard(&base[a])?;
        }
        out.insert(t, acc);
    }
    Ok(out)
}

pub fn build_equivalent_adjacencies(
    inc: &IncidenceSet,
    enabled: &BTreeSet<HyperedgeType>,
) -> Result<AdjacencySet> {
    BUILD_COUNT.with(|c| c.set(c.get() + 1));
    let raw = equivalent_adjacencies(inc, enabled)?;
    let normalized = raw
        .iter()
        .map(|(&t, a)| Ok((t, a.sym_normalize()?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let user_edges = if enabled.contains(&HyperedgeType::U) {
        let ops = |a: Aspect| -> Result<UserHyperedgeOps> {
            let r = inc.for_aspect(a);
            Ok(UserHyperedgeOps {
                node_to_edge: r.row_normalize()?,
                edge_to_node: r.transpose().row_normalize()?,
            })
        };
        Some([
            ops(Aspect::Location)?,
            ops(Aspect::Time)?,
            ops(Aspect::Activity)?,
        ])
    } else {
        None
    };
    Ok(AdjacencySet {
        n_users: inc.n_users(),
        enabled: enabled.clone(),
        raw,
        normalized,
        user_edges,
    })
}

/// Explicitly enumerates the combination hyperedges of `ty` and returns
/// `H Hᵀ`. Exponential in the number of families; for verification on small
/// instances only.
pub fn oracle_adjacency(inc: &IncidenceSet, ty: HyperedgeType) -> Result<CsrMatrix> {
    if !ty.is_similarity() {
        return Err(Error::Invalid("oracle adjacency is defined for similarity types only".into()));
    }
    let families: Vec<&CsrMatrix> = ty.aspects().iter().map(|&a| inc.for_aspect(a)).collect();
    let n_cols = families
        .iter()
        .try_fold(1usize, |acc, m| acc.checked_mul(m.n_cols()))
        .unwrap_or(usize::MAX);
    if n_cols > ORACLE_MAX_COLUMNS {
        return Err(Error::TooLarge(n_cols));
    }
    let n_u = inc.n_users();

    // H[u, (e_1, ..., e_k)] = Π_f R_f[u, e_f], laid out densely
    let mut h = vec![vec![0u64; n_cols]; n_u];
    for (u, row) in h.iter_mut().enumerate() {
        for (c, cell) in row.iter_mut().enumerate() {
            let mut rest = c;
            let mut member = 1u64;
            for m in families.iter().rev() {
                let e = rest % m.n_cols();
                rest /= m.n_cols();
                if m.get(u, e) == 0.0 {
                    member = 0;
                    break;
                }
            }
            *cell = member;
        }
    }
    let mut entries = Vec::new();
    for u in 0..n_u {
        for v in 0..n_u {
            let shared: u64 = h[u].iter().zip(&h[v]).map(|(a, b)| a * b).sum();
            if shared > 0 {
                entries.push((u, v, shared as f64));
            }
        }
    }
    CsrMatrix::from_triplets(n_u, n_u, &entries)
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct OperatorStats {
    pub rows: usize,
    pub cols: usize,
    pub nnz: usize,
    pub bytes: usize,
    /// `degree_histogram[k]` = number of rows with stored-entry count in
    /// `[2^k - 1, 2^{k+1} - 1)`; bucket 0 counts empty rows.
    pub degree_histogram: Vec<usize>,
}

impl OperatorStats {
    fn of(m: &CsrMatrix) -> Self {
        let mut hist = Vec::new();
        for i in 0..m.n_rows() {
            let deg = m.row(i).0.len();
            let bucket = (usize::BITS - (deg + 1).leading_zeros() - 1) as usize;
            if hist.len() <= bucket {
                hist.resize(bucket + 1, 0);
            }
            hist[bucket] += 1;
        }
        Self {
            rows: m.n_rows(),
            cols: m.n_cols(),
            nnz: m.nnz(),
            bytes: m.memory_bytes(),
            degree_histogram: hist,
        }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq, Default)]
pub struct AdjacencyStats {
    /// Normalized similarity operators keyed by type name.
    pub types: BTreeMap<String, OperatorStats>,
    /// `U_n2e_L`, `U_e2n_L`, ... when user hyperedges are enabled.
    pub user_edges: BTreeMap<String, OperatorStats>,
    pub total_nnz: usize,
    pub total_bytes: usize,
}

pub fn adjacency_stats(adj: &AdjacencySet) -> AdjacencyStats {
    let mut stats = AdjacencyStats::default();
    for (t, m) in &adj.normalized {
        stats.types.insert(t.name().to_owned(), OperatorStats::of(m));
    }
    if let Some(ops) = &adj.user_edges {
        for a in Aspect::ALL {
            let o = &ops[a.index()];
            stats
                .user_edges
                .insert(format!("U_n2e_{a}"), OperatorStats::of(&o.node_to_edge));
            stats
                .user_edges
                .insert(format!("U_e2n_{a}"), OperatorStats::of(&o.edge_to_node));
        }
    }
    for s in stats.types.values().chain(stats.user_edges.values()) {
        stats.total_nnz += s.nnz;
        stats.total_bytes += s.bytes;
    }
    stats
}
