//! Candidate pool pruning: top-k by objective plus a few annealed survivors.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;

use crate::metrics::Objective;
use crate::prompt::Candidate;

/// Orders candidates best first: objective descending, then older lineage
/// (fewer edits), then fingerprint.
pub fn rank(pool: &mut [Candidate], objective: Objective) {
    pool.sort_by(|a, b| {
        let sa = a.objective(objective).unwrap_or(0.0);
        let sb = b.objective(objective).unwrap_or(0.0);
        sb.partial_cmp(&sa)
            .unwrap_or(Ordering::Equal)
            .then(a.lineage.len().cmp(&b.lineage.len()))
            .then(a.fingerprint.cmp(&b.fingerprint))
    });
}

/// Keeps the `top_k` best candidates and up to `anneal_count` others.
///
/// Each annealing slot draws one remaining candidate with weight
/// `exp((score - best) / temperature)` and admits it with that same
/// probability, so poor candidates survive rarely and almost never as the
/// temperature approaches zero. Duplicate fingerprints collapse to their
/// best-ranked copy. The best candidate always survives since `top_k >= 1`.
pub fn retain<R: Rng + ?Sized>(
    mut pool: Vec<Candidate>,
    objective: Objective,
    top_k: usize,
    anneal_count: usize,
    temperature: f64,
    rng: &mut R,
) -> Vec<Candidate> {
    rank(&mut pool, objective);
    let mut seen = BTreeSet::new();
    pool.retain(|c| seen.insert(c.fingerprint.clone()));
    if pool.is_empty() {
        return pool;
    }
    let top_k = top_k.max(1);
    if pool.len() <= top_k {
        return pool;
    }
    let best = pool[0].objective(objective).unwrap_or(0.0);
    let mut rest = pool.split_off(top_k);
    let mut survivors = pool;
    for _ in 0..anneal_count {
        if rest.is_empty() {
            break;
        }
        let weights: Vec<f64> = rest
            .iter()
            .map(|c| anneal_weight(c.objective(objective).unwrap_or(0.0), best, temperature))
            .collect();
        let mass: f64 = weights.iter().sum();
        if mass <= 0.0 {
            break;
        }
        let mut target = rng.random::<f64>() * mass;
        let mut pick = weights.len() - 1;
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 && target < w {
                pick = i;
                break;
            }
            target -= w;
        }
        while weights[pick] <= 0.0 {
            pick -= 1;
        }
        if rng.random::<f64>() < weights[pick] {
            survivors.push(rest.remove(pick));
        }
    }
    survivors
}

/// Admission weight in `[0, 1]`.
pub fn anneal_weight(score: f64, best: f64, temperature: f64) -> f64 {
    if temperature <= 0.0 {
        return if score >= best { 1.0 } else { 0.0 };
    }
    libm::exp((score - best) / temperature).min(1.0)
}
