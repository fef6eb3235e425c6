//! Standard Elo ratings over judged definition matches: every model starts
//! at 1000, transfers are zero-sum under a uniform K factor, and confidence
//! intervals come from bootstrap resampling of the match log.

use std::collections::BTreeMap;

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::error::{CollegeError, Result};

pub const INITIAL_RATING: f64 = 1000.0;
pub const DEFAULT_K: f64 = 32.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchResult {
    AWins,
    BWins,
    Tie,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatchRecord {
    pub a: String,
    pub b: String,
    pub result: MatchResult,
}

#[derive(Clone, Debug)]
pub struct EloState {
    pub k: f64,
    ratings: BTreeMap<String, f64>,
    pub history: Vec<MatchRecord>,
}

impl EloState {
    pub fn new(k: f64) -> Self {
        EloState {
            k,
            ratings: BTreeMap::new(),
            history: vec![],
        }
    }

    pub fn register(&mut self, name: &str) {
        self.ratings.entry(name.to_string()).or_insert(INITIAL_RATING);
    }

    pub fn rating(&self, name: &str) -> Option<f64> {
        self.ratings.get(name).copied()
    }

    pub fn ratings(&self) -> &BTreeMap<String, f64> {
        &self.ratings
    }

    pub fn rating_sum(&self) -> f64 {
        self.ratings.values().sum()
    }

    /// One rated match: r_a' = r_a + K (s_a − e_a) with
    /// e_a = 1 / (1 + 10^((r_b − r_a)/400)), symmetric for b.
    pub fn elo_update(&mut self, a: &str, b: &str, result: MatchResult) -> Result<()> {
        let ra = self
            .rating(a)
            .ok_or_else(|| CollegeError::NotFound(format!("model {a:?} not registered")))?;
        let rb = self
            .rating(b)
            .ok_or_else(|| CollegeError::NotFound(format!("model {b:?} not registered")))?;
        let ea = expected_score(ra, rb);
        let eb = expected_score(rb, ra);
        let (sa, sb) = match result {
            MatchResult::AWins => (1.0, 0.0),
            MatchResult::BWins => (0.0, 1.0),
            MatchResult::Tie => (0.5, 0.5),
        };
        *self.ratings.get_mut(a).unwrap() = ra + self.k * (sa - ea);
        *self.ratings.get_mut(b).unwrap() = rb + self.k * (sb - eb);
        self.history.push(MatchRecord {
            a: a.to_string(),
            b: b.to_string(),
            result,
        });
        Ok(())
    }
}

pub fn expected_score(r_self: f64, r_other: f64) -> f64 {
    1.0 / (1.0 + 10f64.powf((r_other - r_self) / 400.0))
}

/// Rebuilds ratings from scratch by replaying a match log.
pub fn replay(k: f64, names: &[String], log: &[MatchRecord]) -> Result<EloState> {
    let mut state = EloState::new(k);
    for n in names {
        state.register(n);
    }
    for m in log {
        state.elo_update(&m.a, &m.b, m.result)?;
    }
    Ok(state)
}

/// Percentile bootstrap over the match log: resample matches with
/// replacement, replay, and take the 2.5/97.5 percentiles per model.
pub fn bootstrap_intervals(
    state: &EloState,
    iterations: usize,
    rng: &mut impl Rng,
) -> Result<BTreeMap<String, (f64, f64)>> {
    let names: Vec<String> = state.ratings().keys().cloned().collect();
    if state.history.is_empty() || iterations == 0 {
        return Ok(names
            .into_iter()
            .map(|n| (n.clone(), (state.rating(&n).unwrap(), state.rating(&n).unwrap())))
            .collect());
    }
    let mut samples: BTreeMap<String, Vec<f64>> =
        names.iter().map(|n| (n.clone(), vec![])).collect();
    for _ in 0..iterations {
        let resampled: Vec<MatchRecord> = (0..state.history.len())
            .map(|_| state.history[rng.random_range(0..state.history.len())].clone())
            .collect();
        let replayed = replay(state.k, &names, &resampled)?;
        for n in &names {
            samples.get_mut(n).unwrap().push(replayed.rating(n).unwrap());
        }
    }
    Ok(samples
        .into_iter()
        .map(|(n, mut v)| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let lo = v[((v.len() as f64) * 0.025).floor() as usize];
            let hi = v[(((v.len() as f64) * 0.975).ceil() as usize - 1).min(v.len() - 1)];
            (n, (lo, hi))
        })
        .collect())
}
