//! Brute-force ground truth: optimal breadth-first Sokoban solver plus a
//! scripted perfect policy built on it. Used as the oracle side of every
//! dual-route check in this crate, and as the "perfect refiner" in tests
//! and desk-scale experiments.

use std::collections::{HashMap, VecDeque};

use thiserror::Error;

use crate::env::{ActionPrimitive, Position, SokobanState};
use crate::policy::Response;

/// Default cap on explored (player, boxes) configurations.
pub const DEFAULT_CONFIG_CAP: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SolveResult {
    pub solvable: bool,
    pub plan: Vec<ActionPrimitive>,
    pub optimal_length: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("state-space cap of {cap} configurations exceeded")]
    CapacityExceeded { cap: usize },
    #[error("state is unsolvable")]
    Unsolvable,
}

/// Canonical configuration key: player position plus sorted box positions,
/// independent of any container iteration order.
fn config_key(player: Position, boxes: &[Position]) -> (Position, Vec<Position>) {
    (player, boxes.to_vec())
}

/// Shortest plan by breadth-first search over (player, boxes) configurations
/// with [`DEFAULT_CONFIG_CAP`]. Ties break by the action total order
/// up < down < left < right, so the returned plan is deterministic.
pub fn bfs_solve(state: &SokobanState) -> Result<SolveResult, OracleError> {
    bfs_solve_with_cap(state, DEFAULT_CONFIG_CAP)
}

pub fn bfs_solve_with_cap(state: &SokobanState, cap: usize) -> Result<SolveResult, OracleError> {
    if state.is_solved() {
        return Ok(SolveResult {
            solvable: true,
            plan: vec![],
            optimal_length: 0,
        });
    }

    let start_boxes: Vec<Position> = state.boxes.iter().copied().collect();
    let start = config_key(state.player, &start_boxes);
    let mut parents: HashMap<(Position, Vec<Position>), Option<((Position, Vec<Position>), ActionPrimitive)>> =
        HashMap::new();
    parents.insert(start.clone(), None);
    let mut queue = VecDeque::from([start]);

    while let Some((player, boxes)) = queue.pop_front() {
        for action in ActionPrimitive::ALL {
            let Some((next_player, next_boxes)) = apply_move(state, player, &boxes, action) else {
                continue;
            };
            let key = config_key(next_player, &next_boxes);
            if parents.contains_key(&key) {
                continue;
            }
            if parents.len() >= cap {
                return Err(OracleError::CapacityExceeded { cap });
            }
            parents.insert(key.clone(), Some(((player, boxes.clone()), action)));

            if state.targets.iter().all(|t| next_boxes.contains(t)) {
                let mut plan = Vec::new();
                let mut cursor = key;
                while let Some(Some((prev, act))) = parents.get(&cursor) {
                    plan.push(*act);
                    cursor = prev.clone();
                }
                plan.reverse();
                let optimal_length = plan.len();
                return Ok(SolveResult {
                    solvable: true,
                    plan,
                    optimal_length,
                });
            }
            queue.push_back(key);
        }
    }

    Ok(SolveResult {
        solvable: false,
        plan: vec![],
        optimal_length: 0,
    })
}

/// Pure move on a configuration; `None` when blocked (BFS skips no-ops).
fn apply_move(
    grid: &SokobanState,
    player: Position,
    boxes: &[Position],
    action: ActionPrimitive,
) -> Option<(Position, Vec<Position>)> {
    let dest = player.shifted(action)?;
    if !grid.in_bounds(dest) || grid.is_wall(dest) {
        return None;
    }
    if let Some(idx) = boxes.iter().position(|&b| b == dest) {
        let box_dest = dest.shifted(action)?;
        if !grid.in_bounds(box_dest) || grid.is_wall(box_dest) || boxes.contains(&box_dest) {
            return None;
        }
        let mut next_boxes = boxes.to_vec();
        next_boxes[idx] = box_dest;
        next_boxes.sort_unstable();
        Some((dest, next_boxes))
    } else {
        Some((dest, boxes.to_vec()))
    }
}

/// What [`oracle_policy`] should do when asked to act in an already-solved
/// state, where no meaningful plan exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolvedBehavior {
    Error,
    NoOp,
}

/// Scripted perfect policy: the BFS plan (optionally truncated to
/// `max_plan_len`) with its first action, wrapped in the standard response
/// template. Errors on unsolvable states.
pub fn oracle_policy(
    state: &SokobanState,
    max_plan_len: Option<usize>,
    on_solved: SolvedBehavior,
) -> Result<Response, OracleError> {
    let solve = bfs_solve(state)?;
    if !solve.solvable {
        return Err(OracleError::Unsolvable);
    }
    if solve.plan.is_empty() {
        return match on_solved {
            SolvedBehavior::Error => Err(OracleError::Unsolvable),
            SolvedBehavior::NoOp => {
                let think = "The task is already solved; any move is a no-op.".to_string();
                Ok(Response::from_parts(
                    think,
                    vec![ActionPrimitive::Up],
                    None,
                ))
            }
        };
    }
    let mut plan = solve.plan;
    if let Some(cap) = max_plan_len {
        plan.truncate(cap.max(1));
    }
    let think = format!(
        "Okay, let me look at the current situation. A shortest path to push every box onto a target is \"{}\".",
        crate::env::format_plan(&plan)
    );
    Ok(Response::from_parts(think, plan, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{example_state, generate_instance, step};

    #[test]
    fn worked_example_solves_in_four() {
        let result = bfs_solve(&example_state()).unwrap();
        assert!(result.solvable);
        assert_eq!(result.optimal_length, 4);
        assert_eq!(
            result.plan,
            vec![
                ActionPrimitive::Down,
                ActionPrimitive::Left,
                ActionPrimitive::Down,
                ActionPrimitive::Right
            ]
        );
    }

    #[test]
    fn already_solved_state_has_empty_plan() {
        let mut s = example_state();
        s.boxes = std::collections::BTreeSet::from([Position::new(4, 3)]);
        let result = bfs_solve(&s).unwrap();
        assert!(result.solvable);
        assert!(result.plan.is_empty());
        assert_eq!(result.optimal_length, 0);
    }

    #[test]
    fn corner_deadlock_is_unsolvable() {
        let mut s = example_state();
        s.boxes = std::collections::BTreeSet::from([Position::new(1, 1)]);
        let result = bfs_solve(&s).unwrap();
        assert!(!result.solvable);
    }

    #[test]
    fn replaying_plan_succeeds_in_optimal_length() {
        for seed in 0..20 {
            let inst = generate_instance(seed, 6, 6, 1).unwrap();
            let solve = bfs_solve(&inst.initial_state).unwrap();
            assert!(solve.solvable, "seed {seed} not solvable");
            let mut s = inst.initial_state.clone();
            let mut done = false;
            for &a in &solve.plan {
                let out = step(&s, a, inst.t_max);
                s = out.next_state;
                done = out.done;
                if done {
                    assert!(out.success);
                }
            }
            assert!(done, "seed {seed}: plan did not finish the task");
            assert_eq!(s.step_count, solve.optimal_length);
        }
    }

    #[test]
    fn no_shorter_plan_exists_exhaustively() {
        // Exhaustive enumeration of all action sequences below the optimal
        // length on small instances.
        for seed in [3u64, 11, 19] {
            let inst = generate_instance(seed, 6, 6, 1).unwrap();
            let solve = bfs_solve(&inst.initial_state).unwrap();
            let len = solve.optimal_length.min(7);
            if len < 2 {
                continue;
            }
            for depth in 1..len {
                let mut stack = vec![(inst.initial_state.clone(), 0usize)];
                while let Some((s, d)) = stack.pop() {
                    assert!(!s.is_solved(), "seed {seed}: solved in {d} < {len}");
                    if d == depth {
                        continue;
                    }
                    for a in ActionPrimitive::ALL {
                        stack.push((step(&s, a, usize::MAX).next_state, d + 1));
                    }
                }
            }
        }
    }

    #[test]
    fn oracle_policy_emits_first_plan_action() {
        let resp = oracle_policy(&example_state(), None, SolvedBehavior::Error).unwrap();
        assert_eq!(resp.action, ActionPrimitive::Down);
        assert_eq!(resp.plan.len(), 4);
    }

    #[test]
    fn oracle_policy_on_solved_state_respects_flag() {
        let mut s = example_state();
        s.boxes = std::collections::BTreeSet::from([Position::new(4, 3)]);
        assert!(oracle_policy(&s, None, SolvedBehavior::Error).is_err());
        let noop = oracle_policy(&s, None, SolvedBehavior::NoOp).unwrap();
        assert_eq!(noop.plan.len(), 1);
    }

    #[test]
    fn oracle_policy_errors_on_unsolvable() {
        let mut s = example_state();
        s.boxes = std::collections::BTreeSet::from([Position::new(1, 1)]);
        assert_eq!(
            oracle_policy(&s, None, SolvedBehavior::Error),
            Err(OracleError::Unsolvable)
        );
    }

    #[test]
    fn capacity_cap_is_enforced() {
        let inst = generate_instance(0, 6, 6, 1).unwrap();
        assert!(matches!(
            bfs_solve_with_cap(&inst.initial_state, 2),
            Err(OracleError::CapacityExceeded { cap: 2 })
        ));
    }
}
