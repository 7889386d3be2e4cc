//! Record ingestion, filtering, vocabulary encoding, splitting and negative
//! sampling.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 4] = ["user_id", "location_id", "time_id", "activity_id"];

/// Rejection draws attempted before scanning the complement.
const NEGATIVE_DRAW_CAP: usize = 100;

/// One raw (user, location, time, activity) observation.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RawRecord {
    pub user: String,
    pub location: String,
    pub time: String,
    pub activity: String,
}

impl RawRecord {
    pub fn new(
        user: impl Into<String>,
        location: impl Into<String>,
        time: impl Into<String>,
        activity: impl Into<String>,
    ) -> Self {
        Self {
            user: user.into(),
            location: location.into(),
            time: time.into(),
            activity: activity.into(),
        }
    }
}

/// A dense-index encoded quadruple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Record {
    pub u: u32,
    pub l: u32,
    pub t: u32,
    pub a: u32,
}

impl Record {
    pub fn new(u: u32, l: u32, t: u32, a: u32) -> Self {
        Self { u, l, t, a }
    }

    pub fn context(&self) -> (u32, u32, u32) {
        (self.u, self.l, self.t)
    }
}

/// Bidirectional id map for one entity family.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    ids: Vec<String>,
    index: HashMap<String, u32>,
}

impl IdMap {
    pub fn from_ids(ids: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i as u32).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary id `{id}`")));
            }
        }
        Ok(Self { ids, index })
    }

    fn intern(&mut self, id: &str) {
        if !self.index.contains_key(id) {
            self.index.insert(id.to_owned(), self.ids.len() as u32);
            self.ids.push(id.to_owned());
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<u32> {
        self.index.get(id).copied()
    }

    pub fn id_of(&self, index: u32) -> Option<&str> {
        self.ids.get(index as usize).map(String::as_str)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// SHA-256 over the ordered ids, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for id in &self.ids {
            h.update((id.len() as u64).to_le_bytes());
            h.update(id.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    pub users: IdMap,
    pub locations: IdMap,
    pub times: IdMap,
    pub activities: IdMap,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct VocabHashes {
    pub users: String,
    pub locations: String,
    pub times: String,
    pub activities: String,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    users: Vec<String>,
    locations: Vec<String>,
    times: Vec<String>,
    activities: Vec<String>,
}

impl Vocab {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }
    pub fn n_locations(&self) -> usize {
        self.locations.len()
    }
    pub fn n_times(&self) -> usize {
        self.times.len()
    }
    pub fn n_activities(&self) -> usize {
        self.activities.len()
    }

    pub fn hashes(&self) -> VocabHashes {
        VocabHashes {
            users: self.users.hash(),
            locations: self.locations.hash(),
            times: self.times.hash(),
            activities: self.activities.hash(),
        }
    }

    /// Fails with the first family whose hash differs.
    pub fn check_hashes(&self, expected: &VocabHashes) -> Result<()> {
        let own = self.hashes();
        if own.users != expected.users {
            return Err(Error::VocabMismatch("users"));
        }
        if own.locations != expected.locations {
            return Err(Error::VocabMismatch("locations"));
        }
        if own.times != expected.times {
            return Err(Error::VocabMismatch("times"));
        }
        if own.activities != expected.activities {
            return Err(Error::VocabMismatch("activities"));
        }
        Ok(())
    }
}

/// Minimum-support thresholds applied before encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterConfig {
    pub min_locations_per_user: usize,
    pub min_activities_per_user: usize,
    pub min_activity_frequency: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_locations_per_user: 10,
            min_activities_per_user: 5,
            min_activity_frequency: 0,
        }
    }
}

impl FilterConfig {
    pub fn disabled() -> Self {
        Self {
            min_locations_per_user: 0,
            min_activities_per_user: 0,
            min_activity_frequency: 0,
        }
    }
}

/// Membership index over every observed quadruple, keyed by context.
#[derive(Debug, Clone, Default)]
pub struct ObservedIndex {
    by_context: HashMap<(u32, u32, u32), HashSet<u32>>,
    len: usize,
}

impl ObservedIndex {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a Record>) -> Self {
        let mut idx = Self::default();
        for r in records {
            if idx.by_context.entry(r.context()).or_default().insert(r.a) {
                idx.len += 1;
            }
        }
        idx
    }

    pub fn contains(&self, r: &Record) -> bool {
        self.by_context
            .get(&r.context())
            .is_some_and(|s| s.contains(&r.a))
    }

    pub fn activities_for(&self, context: (u32, u32, u32)) -> Option<&HashSet<u32>> {
        self.by_context.get(&context)
    }

    /// Number of distinct quadruples.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub vocab: Vocab,
    pub train: Vec<Record>,
    pub valid: Vec<Record>,
    pub test: Vec<Record>,
    pub observed: ObservedIndex,
}

impl DatasetBundle {
    pub fn new(vocab: Vocab, train: Vec<Record>, valid: Vec<Record>, test: Vec<Record>) -> Self {
        let observed = ObservedIndex::from_records(train.iter().chain(&valid).chain(&test));
        Self {
            vocab,
            train,
            valid,
            test,
            observed,
        }
    }

    pub fn n_records(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }
}

/// Reads a CSV with header `user_id,location_id,time_id,activity_id`.
pub fn ingest_csv(path: &Path) -> Result<Vec<RawRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_owned(),
        line,
        msg,
    };

    let mut rows = reader.records();
    let header = match rows.next() {
        None => return Err(parse_err(1, "missing header".into())),
        Some(h) => h.map_err(|e| parse_err(1, e.to_string()))?,
    };
    let fields: Vec<&str> = header.iter().map(str::trim).collect();
    if fields != CSV_HEADER {
        return Err(parse_err(
            1,
            format!("expected header `{}`, found `{}`", CSV_HEADER.join(","), fields.join(",")),
        ));
    }

    let mut out = Vec::new();
    for row in rows {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != 4 {
            return Err(parse_err(line, format!("expected 4 columns, found {}", row.len())));
        }
        let f: Vec<&str> = row.iter().map(str::trim).collect();
        if f.iter().any(|s| s.is_empty()) {
            return Err(parse_err(line, "empty field".into()));
        }
        out.push(RawRecord::new(f[0], f[1], f[2], f[3]));
    }
    Ok(out)
}

pub fn write_raw_csv(path: &Path, records: &[RawRecord]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "{}", CSV_HEADER.join(",")).expect("write to vec");
    for r in records {
        writeln!(buf, "{},{},{},{}", r.user, r.location, r.time, r.activity).expect("write to vec");
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Drops users below the distinct-location / distinct-activity thresholds
/// and activities below the frequency threshold, repeating until nothing
/// changes.
pub fn apply_filters(records: &[RawRecord], cfg: &FilterConfig) -> Vec<RawRecord> {
    let mut current: Vec<RawRecord> = records.to_vec();
    loop {
        let before = current.len();

        if cfg.min_activity_frequency > 0 {
            let mut freq: HashMap<&str, usize> = HashMap::new();
            for r in &current {
                *freq.entry(r.activity.as_str()).or_default() += 1;
            }
            let keep: HashSet<String> = freq
                .into_iter()
                .filter(|&(_, c)| c >= cfg.min_activity_frequency)
                .map(|(a, _)| a.to_owned())
                .collect();
            current.retain(|r| keep.contains(&r.activity));
        }

        if cfg.min_locations_per_user > 0 || cfg.min_activities_per_user > 0 {
            let mut locs: HashMap<&str, HashSet<&str>> = HashMap::new();
            let mut acts: HashMap<&str, HashSet<&str>> = HashMap::new();
            for r in &current {
                locs.entry(&r.user).or_default().insert(&r.location);
                acts.entry(&r.user).or_default().insert(&r.activity);
            }
            let keep: HashSet<String> = locs
                .iter()
                .filter(|(u, l)| {
                    l.len() >= cfg.min_locations_per_user
                        && acts[*u].len() >= cfg.min_activities_per_user
                })
                .map(|(u, _)| (*u).to_owned())
                .collect();
            current.retain(|r| keep.contains(&r.user));
        }

        if current.len() == before {
            return current;
        }
    }
}

/// Assigns dense indices in first-occurrence order.
pub fn build_vocab(records: &[RawRecord]) -> Vocab {
    let mut v = Vocab::default();
    for r in records {
        v.users.intern(&r.user);
        v.locations.intern(&r.location);
        v.times.intern(&r.time);
        v.activities.intern(&r.activity);
    }
    v
}

pub fn encode(records: &[RawRecord], vocab: &Vocab) -> Result<Vec<Record>> {
    let look = |map: &IdMap, kind: &'static str, id: &str| {
        map.index_of(id).ok_or_else(|| Error::UnknownId {
            kind,
            id: id.to_owned(),
        })
    };
    records
        .iter()
        .map(|r| {
            Ok(Record {
                u: look(&vocab.users, "user", &r.user)?,
                l: look(&vocab.locations, "location", &r.location)?,
                t: look(&vocab.times, "time", &r.time)?,
                a: look(&vocab.activities, "activity", &r.activity)?,
            })
        })
        .collect()
}

pub fn decode(records: &[Record], vocab: &Vocab) -> Result<Vec<RawRecord>> {
    let look = |map: &IdMap, kind: &'static str, i: u32| {
        map.id_of(i).map(str::to_owned).ok_or_else(|| Error::UnknownId {
            kind,
            id: i.to_string(),
        })
    };
    records
        .iter()
        .map(|r| {
            Ok(RawRecord {
                user: look(&vocab.users, "user", r.u)?,
                location: look(&vocab.locations, "location", r.l)?,
                time: look(&vocab.times, "time", r.t)?,
                activity: look(&vocab.activities, "activity", r.a)?,
            })
        })
        .collect()
}

/// Removes repeated quadruples, keeping first occurrences in order.
pub fn dedup(records: &[Record]) -> Vec<Record> {
    let mut seen = HashSet::with_capacity(records.len());
    records.iter().copied().filter(|r| seen.insert(*r)).collect()
}

/// Seeded shuffle followed by a contiguous train/valid/test partition.
/// Valid and test sizes are rounded down; the remainder goes to train.
pub fn split(
    records: &[Record],
    vocab: Vocab,
    ratios: (f64, f64, f64),
    rng: &mut impl Rng,
) -> Result<DatasetBundle> {
    let (tr, va, te) = ratios;
    let ok = [tr, va, te].iter().all(|&r| r > 0.0 && r.is_finite())
        && ((tr + va + te) - 1.0).abs() <= 1e-9;
    if !ok {
        return Err(Error::InvalidRatios(tr, va, te));
    }
    let mut shuffled = records.to_vec();
    shuffled.shuffle(rng);
    let n = shuffled.len() as f64;
    let n_valid = (n * va + 1e-9).floor() as usize;
    let n_test = (n * te + 1e-9).floor() as usize;
    let n_train = shuffled.len() - n_valid - n_test;
    let test = shuffled.split_off(n_train + n_valid);
    let valid = shuffled.split_off(n_train);
    Ok(DatasetBundle::new(vocab, shuffled, valid, test))
}

/// Draws an activity `a*` with `(u, l, t, a*)` unobserved, uniformly over the
/// complement.
pub fn sample_negative(
    bundle: &DatasetBundle,
    context: (u32, u32, u32),
    rng: &mut impl Rng,
) -> Result<u32> {
    let n_a = bundle.vocab.n_activities() as u32;
    let no_negative = || Error::NoNegative {
        u: context.0,
        l: context.1,
        t: context.2,
    };
    if n_a == 0 {
        return Err(no_negative());
    }
    let Some(seen) = bundle.observed.activities_for(context) else {
        return Ok(rng.gen_range(0..n_a));
    };
    if seen.len() >= n_a as usize {
        return Err(no_negative());
    }
    for _ in 0..NEGATIVE_DRAW_CAP {
        let a = rng.gen_range(0..n_a);
        if !seen.contains(&a) {
            return Ok(a);
        }
    }
    let complement: Vec<u32> = (0..n_a).filter(|a| !seen.contains(a)).collect();
    Ok(complement[rng.gen_range(0..complement.len())])
}

/// Writes `vocab.json` and the three encoded split CSVs into `dir`.
pub fn save_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let vf = VocabFile {
        users: bundle.vocab.users.ids().to_vec(),
        locations: bundle.vocab.locations.ids().to_vec(),
        times: bundle.vocab.times.ids().to_vec(),
        activities: bundle.vocab.activities.ids().to_vec(),
    };
    let path = dir.join("vocab.json");
    fs::write(&path, serde_json::to_vec_pretty(&vf)?).map_err(|e| Error::io(&path, e))?;
    for (name, recs) in [
        ("train.csv", &bundle.train),
        ("valid.csv", &bundle.valid),
        ("test.csv", &bundle.test),
    ] {
        write_encoded_csv(&dir.join(name), recs)?;
    }
    Ok(())
}

fn write_encoded_csv(path: &Path, records: &[Record]) -> Result<()> {
    let mut buf = Vec::with_capacity(records.len() * 16);
    writeln!(buf, "{}", CSV_HEADER.join(",")).expect("write to vec");
    for r in records {
        writeln!(buf, "{},{},{},{}", r.u, r.l, r.t, r.a).expect("write to vec");
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_encoded_csv(path: &Path, vocab: &Vocab) -> Result<Vec<Record>> {
    let raw = ingest_csv(path)?;
    let parse = |s: &str, n: usize, kind: &'static str| -> Result<u32> {
        match s.parse::<u32>() {
            Ok(v) if (v as usize) < n => Ok(v),
            _ => Err(Error::UnknownId {
                kind,
                id: s.to_owned(),
            }),
        }
    };
    raw.iter()
        .map(|r| {
            Ok(Record {
                u: parse(&r.user, vocab.n_users(), "user")?,
                l: parse(&r.location, vocab.n_locations(), "location")?,
                t: parse(&r.time, vocab.n_times(), "time")?,
                a: parse(&r.activity, vocab.n_activities(), "activity")?,
            })
        })
        .collect()
}

pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    let path = dir.join("vocab.json");
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let vf: VocabFile = serde_json::from_slice(&text)?;
    let vocab = Vocab {
        users: IdMap::from_ids(vf.users)?,
        locations: IdMap::from_ids(vf.locations)?,
        times: IdMap::from_ids(vf.times)?,
        activities: IdMap::from_ids(vf.activities)?,
    };
    let train = read_encoded_csv(&dir.join("train.csv"), &vocab)?;
    let valid = read_encoded_csv(&dir.join("valid.csv"), &vocab)?;
    let test = read_encoded_csv(&dir.join("test.csv"), &vocab)?;
    Ok(DatasetBundle::new(vocab, train, valid, test))
}
