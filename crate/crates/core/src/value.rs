//! Leaf valuation for search-tree expansion: a Monte-Carlo discounted
//! success estimator over visited states, plus a solver-backed oracle
//! variant used as ground truth in tests.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{SokobanState, TaskInstance};
use crate::oracle::{bfs_solve, OracleError};
use crate::policy::Policy;
use crate::rollout::run_plain_episode;
use crate::derive_seed2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueEntry {
    pub value: f64,
    pub visit_count: u64,
}

/// State-key table of discounted empirical success rates. For a state first
/// seen at step t, the stored value is
/// gamma^(t_max - t) * (successful trajectories containing it / all
/// trajectories containing it). Unseen states fall back to the discounted
/// default prior at lookup time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    pub gamma: f64,
    pub t_max: usize,
    pub default_prior: f64,
    pub entries: BTreeMap<String, ValueEntry>,
}

impl ValueTable {
    pub fn new(gamma: f64, t_max: usize, default_prior: f64) -> Self {
        assert!(gamma > 0.0 && gamma <= 1.0, "gamma must be in (0, 1]");
        Self {
            gamma,
            t_max,
            default_prior,
            entries: BTreeMap::new(),
        }
    }

    /// Stored value when present, otherwise gamma^(t_max - t) * prior.
    pub fn lookup(&self, state_key: &str, t: usize) -> f64 {
        match self.entries.get(state_key) {
            Some(entry) => entry.value,
            None => {
                let remaining = self.t_max.saturating_sub(t) as f64;
                self.gamma.powf(remaining) * self.default_prior
            }
        }
    }

    pub fn save_json(&self, path: &Path) -> io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(io::Error::other)?;
        fs::write(path, text)
    }

    pub fn load_json(path: &Path) -> io::Result<ValueTable> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(io::Error::other)
    }
}

/// Fits a value table by Monte-Carlo rollouts: `n_rollouts * repeats`
/// episodes per instance under `policy`, then for every visited state the
/// discounted success fraction with the exponent anchored at the first step
/// the state was seen. Deterministic given the seed and instance order.
#[allow(clippy::too_many_arguments)]
pub fn mc_fit(
    policy: &dyn Policy,
    instances: &[TaskInstance],
    n_rollouts: usize,
    repeats: usize,
    gamma: f64,
    t_max: usize,
    default_prior: f64,
    h: usize,
    seed: u64,
) -> ValueTable {
    assert!(n_rollouts >= 1, "need at least one rollout per instance");
    let mut first_seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut successes: BTreeMap<String, u64> = BTreeMap::new();
    let mut totals: BTreeMap<String, u64> = BTreeMap::new();

    for (i, instance) in instances.iter().enumerate() {
        for r in 0..n_rollouts * repeats.max(1) {
            let result = run_plain_episode(
                instance,
                policy,
                h,
                derive_seed2(seed, i as u64, r as u64),
            );
            let mut seen_in_episode: BTreeMap<&str, usize> = BTreeMap::new();
            for (t, key) in result.state_keys.iter().enumerate() {
                seen_in_episode.entry(key.as_str()).or_insert(t);
            }
            for (key, t) in seen_in_episode {
                let entry = first_seen.entry(key.to_string()).or_insert(t);
                *entry = (*entry).min(t);
                *totals.entry(key.to_string()).or_insert(0) += 1;
                if result.outcome.success {
                    *successes.entry(key.to_string()).or_insert(0) += 1;
                }
            }
        }
    }

    let mut table = ValueTable::new(gamma, t_max, default_prior);
    for (key, total) in totals {
        let wins = successes.get(&key).copied().unwrap_or(0);
        let t = first_seen[&key];
        let remaining = t_max.saturating_sub(t) as f64;
        let value = gamma.powf(remaining) * (wins as f64 / total as f64);
        table.entries.insert(
            key,
            ValueEntry {
                value,
                visit_count: total,
            },
        );
    }
    table
}

/// Ground-truth value: gamma^(t_max - t) when the solver can finish within
/// the remaining budget, otherwise zero.
pub fn oracle_value(
    state: &SokobanState,
    t: usize,
    gamma: f64,
    t_max: usize,
) -> Result<f64, OracleError> {
    let solve = bfs_solve(state)?;
    let remaining = t_max.saturating_sub(t);
    if solve.solvable && solve.optimal_length <= remaining {
        Ok(gamma.powf(remaining as f64))
    } else {
        Ok(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_instance, is_deadlocked, render_text, Position};
    use crate::policy::{OraclePolicy, TabularPolicy, TabularSoftmaxParams};

    #[test]
    fn deterministic_success_gives_discounted_one() {
        // Single instance, oracle policy: every trajectory succeeds, so the
        // initial state's value is gamma^(t_max - 0).
        let instance = generate_instance(2, 6, 6, 1).unwrap();
        let table = mc_fit(
            &OraclePolicy::default(),
            std::slice::from_ref(&instance),
            2,
            2,
            0.95,
            instance.t_max,
            0.1,
            2,
            7,
        );
        let key = render_text(&instance.initial_state);
        let got = table.lookup(&key, 0);
        let want = 0.95f64.powi(instance.t_max as i32);
        assert!((got - want).abs() < 1e-12);
        assert!(table.entries[&key].visit_count >= 4);
    }

    #[test]
    fn power_formula_example() {
        // t_max - t = 5 at gamma 0.95 under an always-succeeding policy.
        let v = 0.95f64.powi(5);
        assert!((v - 0.7737809374999998).abs() < 1e-12);
    }

    struct FixedActionPolicy(crate::env::ActionPrimitive);

    impl Policy for FixedActionPolicy {
        fn respond(
            &self,
            _obs: &crate::policy::Observation,
            _rng: &mut rand_chacha::ChaCha8Rng,
        ) -> Result<crate::policy::Response, crate::policy::PolicyError> {
            Ok(crate::policy::Response::from_parts(
                String::new(),
                vec![self.0],
                None,
            ))
        }

        fn refine(
            &self,
            _ctx: &crate::simrollout::RefinementContext,
            _rng: &mut rand_chacha::ChaCha8Rng,
        ) -> Result<crate::policy::Response, crate::policy::PolicyError> {
            Ok(crate::policy::Response::from_parts(
                String::new(),
                vec![self.0],
                None,
            ))
        }
    }

    #[test]
    fn always_failing_policy_gives_zero() {
        let instance = generate_instance(21, 6, 6, 1).unwrap();
        let policy = FixedActionPolicy(crate::env::ActionPrimitive::Up);
        let result = run_plain_episode(&instance, &policy, 0, 0);
        assert!(!result.outcome.success, "walking up forever must not solve this layout");
        let table = mc_fit(
            &policy,
            std::slice::from_ref(&instance),
            2,
            1,
            0.95,
            instance.t_max,
            0.1,
            0,
            3,
        );
        for entry in table.entries.values() {
            assert_eq!(entry.value, 0.0);
        }
    }

    #[test]
    fn gamma_one_disables_discount() {
        let instance = generate_instance(2, 6, 6, 1).unwrap();
        let table = mc_fit(
            &OraclePolicy::default(),
            std::slice::from_ref(&instance),
            1,
            1,
            1.0,
            instance.t_max,
            0.1,
            2,
            7,
        );
        let key = render_text(&instance.initial_state);
        assert!((table.lookup(&key, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lookup_fallback_uses_discounted_prior() {
        let table = ValueTable::new(0.95, 20, 0.1);
        assert!((table.lookup("unseen", 20) - 0.1).abs() < 1e-12);
        assert!((table.lookup("unseen", 15) - 0.95f64.powi(5) * 0.1).abs() < 1e-12);
        let zero_prior = ValueTable::new(0.95, 20, 0.0);
        assert_eq!(zero_prior.lookup("unseen", 3), 0.0);
    }

    #[test]
    fn oracle_value_formula_and_deadlock() {
        let instance = generate_instance(6, 6, 6, 1).unwrap();
        let state = &instance.initial_state;
        let v = oracle_value(state, 0, 0.95, instance.t_max).unwrap();
        assert!((v - 0.95f64.powi(instance.t_max as i32)).abs() < 1e-12);

        let mut dead = crate::env::example_state();
        dead.boxes = std::collections::BTreeSet::from([Position::new(1, 1)]);
        assert!(is_deadlocked(&dead));
        assert_eq!(oracle_value(&dead, 0, 0.95, 20).unwrap(), 0.0);
    }

    #[test]
    fn mc_fit_matches_oracle_value_on_visited_states() {
        // Under the deterministic oracle policy the success fraction is
        // exactly 1, so fitted values equal the oracle formula pointwise.
        let instances: Vec<_> = (0..5)
            .map(|s| generate_instance(60 + s, 6, 6, 1).unwrap())
            .collect();
        let t_max = instances[0].t_max;
        let table = mc_fit(
            &OraclePolicy::default(),
            &instances,
            1,
            3,
            0.95,
            t_max,
            0.1,
            2,
            11,
        );
        for instance in &instances {
            let mut state = instance.initial_state.clone();
            let solve = bfs_solve(&state).unwrap();
            for &a in &solve.plan {
                let key = render_text(&state);
                let stored = table.lookup(&key, state.step_count);
                let oracle = oracle_value(&state, state.step_count, 0.95, t_max).unwrap();
                assert!(
                    (stored - oracle).abs() < 1e-12,
                    "mismatch at step {}: {stored} vs {oracle}",
                    state.step_count
                );
                state = crate::env::step(&state, a, t_max).next_state;
            }
        }
    }

    #[test]
    fn values_stay_in_unit_interval_and_fit_is_deterministic() {
        let instances: Vec<_> = (0..3)
            .map(|s| generate_instance(80 + s, 6, 6, 1).unwrap())
            .collect();
        let params = TabularSoftmaxParams::new(1.0);
        let policy = TabularPolicy::new(&params, 3);
        let a = mc_fit(&policy, &instances, 2, 2, 0.95, 20, 0.1, 2, 13);
        let b = mc_fit(&policy, &instances, 2, 2, 0.95, 20, 0.1, 2, 13);
        assert_eq!(a, b);
        for entry in a.entries.values() {
            assert!(entry.value >= 0.0 && entry.value <= 1.0);
            assert!(entry.visit_count >= 1);
        }
    }

    #[test]
    fn json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("values.json");
        let mut table = ValueTable::new(0.9, 20, 0.1);
        table.entries.insert(
            "k".into(),
            ValueEntry {
                value: 0.5,
                visit_count: 3,
            },
        );
        table.save_json(&path).unwrap();
        assert_eq!(ValueTable::load_json(&path).unwrap(), table);
    }
}
