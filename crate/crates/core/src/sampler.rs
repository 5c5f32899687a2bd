//! Triplet generation.
//!
//! Sampling is reproducible across machines: a ChaCha8 stream seeded with
//! `seed` draws triplet ranks uniformly from `[0, C(N, 3))`, which are
//! unranked through the combinatorial number system. Small universes are
//! materialised and partially shuffled; large ones use rejection against
//! the set of keys already drawn.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{read_jsonl, write_jsonl};
use crate::{Error, Result};

/// Three distinct stimulus ids in sorted order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TripletKey([String; 3]);

impl TripletKey {
    pub fn new(a: &str, b: &str, c: &str) -> Result<Self> {
        if a == b || a == c || b == c {
            return Err(Error::InvalidRecord(format!(
                "triplet ids must be distinct: [{a}, {b}, {c}]"
            )));
        }
        let mut ids = [a.to_string(), b.to_string(), c.to_string()];
        ids.sort();
        Ok(TripletKey(ids))
    }

    pub fn from_ids(ids: &[String; 3]) -> Result<Self> {
        Self::new(&ids[0], &ids[1], &ids[2])
    }

    pub fn ids(&self) -> &[String; 3] {
        &self.0
    }

    pub fn contains(&self, id: &str) -> bool {
        self.0.iter().any(|s| s == id)
    }
}

#[derive(Serialize, Deserialize)]
struct TripletLine {
    triplet: [String; 3],
}

pub fn write_triplets(path: &Path, triplets: &[TripletKey]) -> Result<()> {
    let lines: Vec<TripletLine> = triplets
        .iter()
        .map(|t| TripletLine {
            triplet: t.0.clone(),
        })
        .collect();
    write_jsonl(path, &lines)
}

pub fn read_triplets(path: &Path) -> Result<Vec<TripletKey>> {
    read_jsonl::<TripletLine>(path)?
        .into_iter()
        .map(|(_, l)| TripletKey::from_ids(&l.triplet))
        .collect()
}

/// `C(n, k)` for k ≤ 3.
pub fn binomial(n: u128, k: u32) -> u128 {
    match k {
        0 => 1,
        1 => n,
        2 => n * n.saturating_sub(1) / 2,
        3 => n * n.saturating_sub(1) * n.saturating_sub(2) / 6,
        _ => unreachable!("only k <= 3 is needed"),
    }
}

/// Inverse of the colex rank `C(c,3) + C(b,2) + C(a,1)` with `a < b < c`.
fn unrank(mut rank: u128, n: usize) -> [usize; 3] {
    let mut out = [0usize; 3];
    let mut upper = n;
    for (pos, k) in [(2usize, 3u32), (1, 2), (0, 1)] {
        // largest c < upper with C(c, k) <= rank
        let (mut lo, mut hi) = (k as usize - 1, upper - 1);
        while lo < hi {
            let mid = (lo + hi).div_ceil(2);
            if binomial(mid as u128, k) <= rank {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        out[pos] = lo;
        rank -= binomial(lo as u128, k);
        upper = lo;
    }
    out
}

fn key_for(ids: &[String], idx: [usize; 3]) -> TripletKey {
    let mut k = [ids[idx[0]].clone(), ids[idx[1]].clone(), ids[idx[2]].clone()];
    k.sort();
    TripletKey(k)
}

fn distinct_sorted(stimulus_ids: &[String]) -> Result<Vec<String>> {
    let mut ids = stimulus_ids.to_vec();
    ids.sort();
    for w in ids.windows(2) {
        if w[0] == w[1] {
            return Err(Error::DuplicateId {
                kind: "stimulus",
                id: w[0].clone(),
            });
        }
    }
    Ok(ids)
}

/// Every triplet over `stimulus_ids`, in lexicographic order.
pub fn enumerate_all_triplets(stimulus_ids: &[String]) -> Result<Vec<TripletKey>> {
    let ids = distinct_sorted(stimulus_ids)?;
    let n = ids.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 stimuli, got {n}")));
    }
    let mut out = Vec::with_capacity(binomial(n as u128, 3) as usize);
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                out.push(TripletKey([ids[i].clone(), ids[j].clone(), ids[k].clone()]));
            }
        }
    }
    Ok(out)
}

/// Above this universe size the sampler switches to rejection.
const MATERIALIZE_LIMIT: u128 = 2_000_000;

/// Draws `count` distinct triplets uniformly from those not in `exclude`.
pub fn sample_triplets(
    stimulus_ids: &[String],
    count: usize,
    seed: u64,
    exclude: &HashSet<TripletKey>,
) -> Result<Vec<TripletKey>> {
    let ids = distinct_sorted(stimulus_ids)?;
    let n = ids.len();
    let universe = binomial(n as u128, 3);
    let id_set: HashSet<&str> = ids.iter().map(String::as_str).collect();
    let excluded_in_universe = exclude
        .iter()
        .filter(|k| k.0.iter().all(|s| id_set.contains(s.as_str())))
        .count() as u128;
    let available = universe - excluded_in_universe;
    if count as u128 > available {
        return Err(Error::UniverseExhausted {
            requested: count as u128,
            available,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // dense draws or small universes: shuffle the complement
    if universe <= MATERIALIZE_LIMIT && (count as u128) * 4 > available {
        let mut pool: Vec<u128> = (0..universe)
            .filter(|&r| exclude.is_empty() || !exclude.contains(&key_for(&ids, unrank(r, n))))
            .collect();
        let (picked, _) = pool.partial_shuffle(&mut rng, count);
        return Ok(picked.iter().map(|&r| key_for(&ids, unrank(r, n))).collect());
    }

    let mut seen: HashSet<TripletKey> = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let r = rng.random_range(0..universe);
        let key = key_for(&ids, unrank(r, n));
        if exclude.contains(&key) || !seen.insert(key.clone()) {
            continue;
        }
        out.push(key);
    }
    Ok(out)
}
