use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CaseRecord, DataError, Decision};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSizes {
    pub sft: usize,
    pub grpo1: usize,
    pub grpo2: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes { sft: 2000, grpo1: 1000, grpo2: 200, test: 1000 }
    }
}

/// Case ids per stage. Training lists are label-balanced and may repeat
/// minority ids; no id appears in more than one stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSplits {
    pub sft: Vec<u64>,
    pub grpo1: Vec<u64>,
    pub grpo2: Vec<u64>,
    pub test: Vec<u64>,
}

impl StageSplits {
    pub fn stages(&self) -> [(&'static str, &[u64]); 4] {
        [("sft", &self.sft), ("grpo1", &self.grpo1), ("grpo2", &self.grpo2), ("test", &self.test)]
    }

    /// True when no id is shared between two stages.
    pub fn is_disjoint(&self) -> bool {
        let sets: Vec<HashSet<u64>> = self.stages().iter().map(|(_, ids)| ids.iter().copied().collect()).collect();
        (0..sets.len()).all(|i| (i + 1..sets.len()).all(|j| sets[i].is_disjoint(&sets[j])))
    }

    pub fn test_hash(&self) -> String {
        id_hash(&self.test)
    }
}

/// SHA-256 over an ordered id list.
pub fn id_hash(ids: &[u64]) -> String {
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn balance_and_split(cases: &[CaseRecord], sizes: SplitSizes, seed: u64) -> Result<StageSplits, DataError> {
    let mut seen = HashSet::with_capacity(cases.len());
    if let Some(dup) = cases.iter().find(|c| !seen.insert(c.id)) {
        return Err(DataError::Split(format!("duplicate case id {}", dup.id)));
    }
    for (name, n) in [("sft", sizes.sft), ("grpo1", sizes.grpo1), ("grpo2", sizes.grpo2)] {
        if n % 2 != 0 {
            return Err(DataError::Split(format!("{name} size {n} must be even to balance labels")));
        }
    }
    if sizes.test > cases.len() {
        return Err(DataError::Split(format!(
            "test set needs {} distinct cases but only {} are available",
            sizes.test,
            cases.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..cases.len()).collect();
    order.shuffle(&mut rng);

    let test: Vec<u64> = order[..sizes.test].iter().map(|&i| cases[i].id).collect();
    let rest = &order[sizes.test..];
    let pool = |label: Decision| -> Vec<u64> {
        rest.iter().filter(|&&i| cases[i].label == label).map(|&i| cases[i].id).collect()
    };
    let halves = [sizes.sft / 2, sizes.grpo1 / 2, sizes.grpo2 / 2];
    let approve = allocate(&pool(Decision::Approve), &halves, "approved")?;
    let deny = allocate(&pool(Decision::Deny), &halves, "denied")?;

    let mut stages = approve.into_iter().zip(deny).map(|(mut a, d)| {
        a.extend(d);
        a.shuffle(&mut rng);
        a
    });
    Ok(StageSplits { sft: stages.next().unwrap(), grpo1: stages.next().unwrap(), grpo2: stages.next().unwrap(), test })
}

/// Splits one label's pool into disjoint per-stage lists of the requested
/// lengths. When the pool is too small, each stage receives a share of
/// distinct ids proportional to its request and cycles through them.
fn allocate(pool: &[u64], wants: &[usize; 3], what: &str) -> Result<Vec<Vec<u64>>, DataError> {
    let total: usize = wants.iter().sum();
    let active = wants.iter().filter(|&&w| w > 0).count();
    if total == 0 {
        return Ok(vec![Vec::new(); 3]);
    }
    if pool.len() < active {
        return Err(DataError::Split(format!(
            "only {} {what} cases left after the test split, need at least {active}",
            pool.len()
        )));
    }
    let quotas: Vec<usize> = if pool.len() >= total {
        wants.to_vec()
    } else {
        let mut q: Vec<usize> =
            wants.iter().map(|&w| if w == 0 { 0 } else { (pool.len() * w / total).clamp(1, w) }).collect();
        let mut spare = pool.len() - q.iter().sum::<usize>();
        while spare > 0 {
            let mut gave = false;
            for (qi, &w) in q.iter_mut().zip(wants) {
                if spare > 0 && *qi < w {
                    *qi += 1;
                    spare -= 1;
                    gave = true;
                }
            }
            if !gave {
                break;
            }
        }
        q
    };

    let mut start = 0;
    Ok(quotas
        .iter()
        .zip(wants)
        .map(|(&q, &w)| {
            let distinct = &pool[start..start + q];
            start += q;
            distinct.iter().copied().cycle().take(w).collect()
        })
        .collect())
}
