//! Synthetic corpora with independent per-aspect user clusters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::RawRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_users: usize,
    pub n_locations: usize,
    pub n_times: usize,
    pub n_activities: usize,
    /// Cluster counts for location, time and activity.
    pub clusters: [usize; 3],
    pub records_per_user: usize,
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_users: 100,
            n_locations: 20,
            n_times: 8,
            n_activities: 30,
            clusters: [4, 2, 5],
            records_per_user: 40,
            noise_rate: 0.1,
            seed: 13,
        }
    }
}

impl SynthSpec {
    pub fn sizes(&self) -> [usize; 3] {
        [self.n_locations, self.n_times, self.n_activities]
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.records_per_user == 0 {
            return Err(Error::Invalid("synthetic corpus needs users and records".into()));
        }
        for (n, k) in self.sizes().into_iter().zip(self.clusters) {
            if n == 0 || k == 0 || k > n {
                return Err(Error::Invalid(format!(
                    "cluster count {k} must lie in 1..={n}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::Invalid(format!(
                "noise rate {} outside [0, 1]",
                self.noise_rate
            )));
        }
        Ok(())
    }

    /// Entity range owned by cluster `c` of `k` over `n` entities.
    pub fn pool(n: usize, k: usize, c: usize) -> std::ops::Range<usize> {
        c * n / k..(c + 1) * n / k
    }
}

/// Per-user cluster assignments and the generated records.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub user_clusters: Vec<[usize; 3]>,
    pub records: Vec<RawRecord>,
}

pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sizes = spec.sizes();
    let prefixes = ["l", "t", "a"];
    let mut user_clusters = Vec::with_capacity(spec.n_users);
    let mut records = Vec::with_capacity(spec.n_users * spec.records_per_user);
    for u in 0..spec.n_users {
        let c = [0, 1, 2].map(|i| rng.gen_range(0..spec.clusters[i]));
        user_clusters.push(c);
        for _ in 0..spec.records_per_user {
            let ids = [0, 1, 2].map(|i| {
                let j = if rng.gen::<f64>() < spec.noise_rate {
                    rng.gen_range(0..sizes[i])
                } else {
                    rng.gen_range(SynthSpec::pool(sizes[i], spec.clusters[i], c[i]))
                };
                format!("{}{j}", prefixes[i])
            });
            let [l, t, a] = ids;
            records.push(RawRecord::new(format!("u{u}"), l, t, a));
        }
    }
    Ok(SynthCorpus {
        user_clusters,
        records,
    })
}
