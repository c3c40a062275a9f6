//! Plain episode driver and the trajectory record shared by every rollout
//! flavour (plain, simulation-refinement, evaluation, value fitting).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{render_text, step, ActionPrimitive, SokobanState, StepOutcome, TaskInstance};
use crate::policy::{
    build_observation, sokoban_task_instruction, Policy, PolicyError, Response, Turn,
};

/// Whether a record was collected under the plain observation or under a
/// refinement observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Plain,
    Refine,
}

/// One step of an episode. When `parse_failed` is set, no action was
/// executed (the environment treated the turn as a stay-in-place no-op) and
/// `response` is a placeholder carrying the unparseable raw text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub task_id: String,
    pub turn_index: usize,
    pub observation_key: String,
    pub response: Response,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
    pub kind: RecordKind,
    pub parse_failed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeOutcome {
    pub success: bool,
    pub steps: usize,
    pub total_return: f64,
}

/// A finished plain episode: per-step records, the outcome, the turn list
/// (renderings plus response texts), and every visited state key indexed by
/// step (length `steps + 1`, terminal state included).
#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub records: Vec<TrajectoryRecord>,
    pub outcome: EpisodeOutcome,
    pub state_keys: Vec<String>,
    pub turns: Vec<Turn>,
}

/// Stay-in-place no-op applied when a response cannot be parsed: the state
/// is unchanged apart from the step counter, costing the usual step penalty.
pub(crate) fn noop_step(
    state: &SokobanState,
    instance: &TaskInstance,
    turn_index: usize,
    observation_key: String,
    raw_text: String,
) -> (StepOutcome, TrajectoryRecord) {
    let mut next = state.clone();
    next.step_count += 1;
    let done = next.step_count >= instance.t_max;
    let reward = if done {
        crate::env::FAILURE_REWARD
    } else {
        crate::env::STEP_PENALTY
    };
    let placeholder = Response {
        think: String::new(),
        plan: vec![ActionPrimitive::Up],
        action: ActionPrimitive::Up,
        raw_text,
        logprob: None,
        plan_action_mismatch: false,
    };
    let record = TrajectoryRecord {
        task_id: instance.task_id.clone(),
        turn_index,
        observation_key,
        response: placeholder,
        reward,
        done,
        success: false,
        kind: RecordKind::Plain,
        parse_failed: true,
    };
    (
        StepOutcome {
            next_state: next,
            reward,
            done,
            success: false,
        },
        record,
    )
}

/// Runs one episode with the given policy. Parse failures become no-op steps
/// so the episode (and its advantage group) stays intact; other policy
/// errors end the episode early with the return accumulated so far.
pub fn run_plain_episode(
    instance: &TaskInstance,
    policy: &dyn Policy,
    h: usize,
    seed: u64,
) -> EpisodeResult {
    let mut state = instance.initial_state.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut turns: Vec<Turn> = Vec::new();
    let mut records = Vec::new();
    let mut state_keys = vec![render_text(&state)];
    let mut total_return = 0.0;
    let mut success = false;

    for turn_index in 0..instance.t_max {
        let rendering = state_keys.last().cloned().unwrap();
        let obs = build_observation(sokoban_task_instruction(), &turns, rendering.clone(), h);

        let (out, record, response_text) = match policy.respond(&obs, &mut rng) {
            Ok(resp) => {
                let out = step(&state, resp.action, instance.t_max);
                let record = TrajectoryRecord {
                    task_id: instance.task_id.clone(),
                    turn_index,
                    observation_key: rendering.clone(),
                    response: resp.clone(),
                    reward: out.reward,
                    done: out.done,
                    success: out.success,
                    kind: RecordKind::Plain,
                    parse_failed: false,
                };
                (out, record, resp.raw_text)
            }
            Err(PolicyError::Parse { raw_text, .. }) => {
                let (out, record) =
                    noop_step(&state, instance, turn_index, rendering.clone(), raw_text.clone());
                (out, record, raw_text)
            }
            Err(other) => {
                log::warn!("episode aborted at turn {turn_index}: {other}");
                break;
            }
        };

        total_return += out.reward;
        success = out.success;
        records.push(record);
        turns.push(Turn {
            rendering,
            response_text,
        });
        state = out.next_state;
        state_keys.push(render_text(&state));
        if out.done {
            break;
        }
    }

    EpisodeResult {
        outcome: EpisodeOutcome {
            success,
            steps: records.len(),
            total_return,
        },
        records,
        state_keys,
        turns,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::generate_instance;
    use crate::policy::{OraclePolicy, TabularPolicy, TabularSoftmaxParams};

    #[test]
    fn oracle_episode_succeeds_with_expected_return() {
        let instance = generate_instance(3, 6, 6, 1).unwrap();
        let result = run_plain_episode(&instance, &OraclePolicy::default(), 2, 0);
        assert!(result.outcome.success);
        let t = result.outcome.steps as f64;
        let expected = 10.0 - 0.1 * (t - 1.0);
        assert!((result.outcome.total_return - expected).abs() < 1e-9);
        assert_eq!(result.state_keys.len(), result.records.len() + 1);
    }

    #[test]
    fn failed_episode_return_identity() {
        // A uniform policy usually fails within the budget; verify the
        // return identity on failures.
        let params = TabularSoftmaxParams::new(1.0);
        let policy = TabularPolicy::new(&params, 4);
        let mut saw_failure = false;
        for seed in 0..10 {
            let instance = generate_instance(40 + seed, 6, 6, 1).unwrap();
            let result = run_plain_episode(&instance, &policy, 2, seed);
            let t = result.outcome.steps as f64;
            let expected = if result.outcome.success {
                10.0 - 0.1 * (t - 1.0)
            } else {
                -0.1 * (t - 1.0)
            };
            assert!((result.outcome.total_return - expected).abs() < 1e-9);
            saw_failure |= !result.outcome.success;
        }
        assert!(saw_failure);
    }

    #[test]
    fn episodes_are_deterministic_per_seed() {
        let instance = generate_instance(5, 6, 6, 1).unwrap();
        let params = TabularSoftmaxParams::new(1.0);
        let policy = TabularPolicy::new(&params, 4);
        let a = run_plain_episode(&instance, &policy, 2, 9);
        let b = run_plain_episode(&instance, &policy, 2, 9);
        assert_eq!(a.records, b.records);
        assert_eq!(a.state_keys, b.state_keys);
    }
}
