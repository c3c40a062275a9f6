//! Simulation-refinement rollouts: execute the policy's plan to harvest real
//! future states, compose the refinement prompt from them, obtain a refined
//! response, and collect the paired plain/refine trajectory streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::env::{render_text, step, ActionPrimitive, SokobanState, TaskInstance};
use crate::policy::{
    build_observation, sokoban_task_instruction, Observation, Policy, PolicyError, Response, Turn,
};
use crate::rollout::{noop_step, EpisodeOutcome, RecordKind, TrajectoryRecord};
use crate::{derive_seed, derive_seed2};

/// Training key for the refinement conditional distribution. Shared by the
/// tabular policy's sampling and the refine-record stream so updates land on
/// the rows that produced the samples.
pub fn refinement_key(state_key: &str, original_action: ActionPrimitive) -> String {
    format!("refine::{}::{}", original_action.name(), state_key)
}

/// Ground-truth feedback for one decision: the original response plus the
/// true states reached by replaying its plan prefix, and the composed
/// refinement prompt built from them.
#[derive(Debug, Clone)]
pub struct RefinementContext {
    pub base_state: SokobanState,
    pub base_observation: Observation,
    pub original_response: Response,
    pub feedback: Vec<(ActionPrimitive, String)>,
    pub composed_prompt: String,
}

/// One step of a simulation-refinement episode: the same refined response
/// and realized reward recorded under both the plain observation key and the
/// refinement key.
#[derive(Debug, Clone)]
pub struct PairedStep {
    pub plain_record: TrajectoryRecord,
    pub refine_record: TrajectoryRecord,
}

/// Replays up to `refine_depth` actions of the response's plan on a snapshot
/// of the environment, collecting the true rendered next-states, then
/// restores the snapshot and composes the refinement prompt. The live state
/// passed in is never mutated.
pub fn harvest_feedback(
    state: &SokobanState,
    base_observation: &Observation,
    response: &Response,
    refine_depth: usize,
    t_max: usize,
) -> RefinementContext {
    let snapshot = state.snapshot();
    let mut sim = SokobanState::restore(&snapshot);
    let mut feedback = Vec::new();
    for &action in response.plan.iter().take(refine_depth) {
        let out = step(&sim, action, t_max);
        sim = out.next_state;
        feedback.push((action, render_text(&sim)));
        if out.done {
            break;
        }
    }

    let feedback_text = if feedback.is_empty() {
        "(the example response contained no executable plan; no actions were executed)".to_string()
    } else {
        feedback
            .iter()
            .map(|(action, rendering)| {
                format!("After executing \"{}\", the observation became:\n{rendering}", action.name())
            })
            .collect::<Vec<_>>()
            .join("\n\n")
    };

    let composed_prompt = format!(
        "{instruction}\n\n\
         # Current observation\n{observation}\n\n\
         # Example response and feedback\n\
         To help you reason and plan better, we have explored some plans for the current step and obtained the following feedback from the environment:\n\
         ## Example response\n{original}\n\
         ## Ground truth feedback\n{feedback_text}\n\n\
         # Back to the current step\n\
         Now, the environment has been reset back to the current observation/current step. It's your turn to refine the example response based on the ground truth feedback. You should think about:\n\
         - Correctness: is the example response aligned with the feedback? did the feedback reveal some incorrect/ineffective actions in the example response?\n\
         - Progress: did the the environment feedback show positive progress towards solving the task?\n\
         Note: the example response may hallucinate incorrect outcomes different from the ground truth feedback. You should avoid coming up with similar hallucinations in your response.\n\n\
         If you think the example response is correct and has made progress, no revision is needed and your should **directly output the example response verbatim**.\n\
         Otherwise, you should modify the example response's thinking process/plan/action to be consistent with the environment feedback. Specifically, you should:\n\
         1. **Incorporate all relevant details from the feedback** into the example response and then **improve its accuracy and progress**. Be detailed when adding information from the feedback into the response.\n\
         2. The final refined response should **read as a standalone answer, without saying its a revision or referencing the feedback section**. The output should look like the final authoritative response that faithfully incorporated relevant details from the feedback.\n\n\
         Now, refine the example response. Keep the same tone and format as the example response. Ensure the final plan/action is logically consistent with your (refined) thinking process. DO NOT generate anything else.",
        instruction = sokoban_task_instruction(),
        observation = base_observation.current_rendering,
        original = response.raw_text,
    );

    RefinementContext {
        base_state: SokobanState::restore(&snapshot),
        base_observation: base_observation.clone(),
        original_response: response.clone(),
        feedback,
        composed_prompt,
    }
}

/// Full simulation-refinement episode: sample, harvest feedback, refine,
/// execute the refined action in the real environment. Returns the plain
/// stream (state key, refined response) and the refine stream (refinement
/// key, refined response); both share rewards pointwise. Refinement failures
/// fall back to the original response so the episode and its group survive.
pub fn sim_rollout_episode(
    instance: &TaskInstance,
    policy: &dyn Policy,
    refine_depth: usize,
    h: usize,
    seed: u64,
) -> (Vec<TrajectoryRecord>, Vec<TrajectoryRecord>, EpisodeOutcome) {
    let mut state = instance.initial_state.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
    let mut refine_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let mut turns: Vec<Turn> = Vec::new();
    let mut plain = Vec::new();
    let mut refine = Vec::new();
    let mut total_return = 0.0;
    let mut success = false;

    for turn_index in 0..instance.t_max {
        let rendering = render_text(&state);
        let obs = build_observation(sokoban_task_instruction(), &turns, rendering.clone(), h);

        let original = match policy.respond(&obs, &mut rng) {
            Ok(resp) => resp,
            Err(PolicyError::Parse { raw_text, .. }) => {
                // Unusable response: stay-in-place no-op, recorded as such.
                let (out, record) =
                    noop_step(&state, instance, turn_index, rendering.clone(), raw_text);
                total_return += out.reward;
                turns.push(Turn {
                    rendering,
                    response_text: record.response.raw_text.clone(),
                });
                state = out.next_state;
                let mut refine_record = record.clone();
                refine_record.kind = RecordKind::Refine;
                plain.push(record);
                refine.push(refine_record);
                if out.done {
                    break;
                }
                continue;
            }
            Err(other) => {
                log::warn!("episode aborted at turn {turn_index}: {other}");
                break;
            }
        };

        let ctx = harvest_feedback(&state, &obs, &original, refine_depth, instance.t_max);
        debug_assert_eq!(ctx.base_state, state);

        let refined = match policy.refine(&ctx, &mut refine_rng) {
            Ok(resp) => resp,
            Err(err) => {
                log::debug!("refinement failed, keeping original response: {err}");
                original.clone()
            }
        };

        let out = step(&state, refined.action, instance.t_max);
        total_return += out.reward;
        success = out.success;

        plain.push(TrajectoryRecord {
            task_id: instance.task_id.clone(),
            turn_index,
            observation_key: rendering.clone(),
            response: refined.clone(),
            reward: out.reward,
            done: out.done,
            success: out.success,
            kind: RecordKind::Plain,
            parse_failed: false,
        });
        refine.push(TrajectoryRecord {
            task_id: instance.task_id.clone(),
            turn_index,
            observation_key: refinement_key(&rendering, original.action),
            response: refined.clone(),
            reward: out.reward,
            done: out.done,
            success: out.success,
            kind: RecordKind::Refine,
            parse_failed: false,
        });

        turns.push(Turn {
            rendering,
            response_text: refined.raw_text.clone(),
        });
        state = out.next_state;
        if out.done {
            break;
        }
    }

    let outcome = EpisodeOutcome {
        success,
        steps: plain.len(),
        total_return,
    };
    (plain, refine, outcome)
}

/// Derived seed for one simulation-refinement episode inside a group.
pub fn episode_seed(base: u64, task_index: u64, member: u64) -> u64 {
    derive_seed2(base, task_index, member)
}
