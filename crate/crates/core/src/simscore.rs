//! Simulation-ability measurement: extract the chosen plan and narrated
//! next-states from a response, roll the plan forward for ground truth,
//! score the imagination against it with the additive rubric (correctness
//! capped at 0.3, progress capped at 0.7), aggregate per trajectory, and
//! correlate scores with success.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{is_deadlocked, step, ActionPrimitive, Position, SokobanState};
use crate::policy::parse_response;
use crate::remote::{chat_complete, EndpointConfig};
use crate::policy::PolicyError;

/// One coordinate assertion found in narrated text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellClaim {
    Player,
    Box,
    BoxOnTarget,
    Target,
    Wall,
    Floor,
}

/// A narrated state: coordinate claims by kind, possibly partial, plus
/// whether the text asserts the task is solved.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImaginedState {
    pub claims: Vec<(CellClaim, Position)>,
    pub claims_solved: bool,
}

impl ImaginedState {
    pub fn is_empty(&self) -> bool {
        self.claims.is_empty() && !self.claims_solved
    }
}

/// Plan plus imagined states extracted from one response.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedSimulation {
    pub actions: Vec<ActionPrimitive>,
    pub imagined_states: Vec<ImaginedState>,
    pub discounted_success_rate: Option<f64>,
}

/// One narrated branch block: its action sequence, the per-action narrated
/// states, and the closing rate sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedBranch {
    pub actions: Vec<ActionPrimitive>,
    pub states: Vec<ImaginedState>,
    pub rate: Option<f64>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ExtractError {
    #[error("no plan or action could be extracted: {0}")]
    Unparseable(String),
}

static POSITION_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\((\d+),\s*(\d+)\)").unwrap());
static PLAYER_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"the player is at \((\d+),\s*(\d+)\)").unwrap());
static ADJACENT_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"a (wall|floor|box on target|box|target) (?:above|below|left|right)(?: of the player)?(?: the player)? at \((\d+),\s*(\d+)\)")
        .unwrap()
});
static TRY_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"Maybe we can try (?:moving )?"(\w+)""#).unwrap());
static AFTER_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r#"- After "(\w+)","#).unwrap());
static RATE_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"Discounted success rate if continued further: around (\d+)%").unwrap()
});

fn positions_in(text: &str) -> Vec<Position> {
    POSITION_RE
        .captures_iter(text)
        .map(|c| Position::new(c[1].parse().unwrap(), c[2].parse().unwrap()))
        .collect()
}

fn span_between<'a>(text: &'a str, start: &str, ends: &[&str]) -> Option<&'a str> {
    let from = text.find(start)? + start.len();
    let rest = &text[from..];
    let to = ends
        .iter()
        .filter_map(|e| rest.find(e))
        .min()
        .unwrap_or(rest.len());
    Some(&rest[..to])
}

/// Parses one narration segment ("the player is at ..., with boxes at ...
/// and unsolved targets at .... The player now has ...") into claims.
fn parse_state_narration(text: &str) -> ImaginedState {
    let mut claims = Vec::new();
    if let Some(c) = PLAYER_RE.captures(text) {
        claims.push((
            CellClaim::Player,
            Position::new(c[1].parse().unwrap(), c[2].parse().unwrap()),
        ));
    }
    if let Some(span) = span_between(
        text,
        "with boxes at ",
        &[" and unsolved targets", " and all targets solved", ". "],
    ) {
        for p in positions_in(span) {
            claims.push((CellClaim::Box, p));
        }
    }
    if let Some(span) = span_between(text, "unsolved targets at ", &[". ", ".\n"]) {
        // Trim at the sentence end for end-of-text segments.
        let span = span.strip_suffix('.').unwrap_or(span);
        for p in positions_in(span) {
            claims.push((CellClaim::Target, p));
        }
    }
    if let Some(adjacency) = text.find("The player now has ") {
        for c in ADJACENT_RE.captures_iter(&text[adjacency..]) {
            let kind = match &c[1] {
                "wall" => CellClaim::Wall,
                "floor" => CellClaim::Floor,
                "box on target" => CellClaim::BoxOnTarget,
                "box" => CellClaim::Box,
                "target" => CellClaim::Target,
                _ => unreachable!(),
            };
            claims.push((kind, Position::new(c[2].parse().unwrap(), c[3].parse().unwrap())));
        }
    }
    ImaginedState {
        claims,
        claims_solved: text.contains("all targets solved"),
    }
}

/// Parses every "Maybe we can try" block out of a response, with its action
/// sequence, the narrated state per action, and the closing rate.
pub fn extract_all_branches(text: &str) -> Vec<ParsedBranch> {
    let mut branches = Vec::new();
    let mut current: Option<ParsedBranch> = None;
    for line in text.lines() {
        if let Some(c) = TRY_RE.captures(line) {
            if let Some(done) = current.take() {
                branches.push(done);
            }
            let Some(first) = ActionPrimitive::parse(&c[1]) else {
                continue;
            };
            current = Some(ParsedBranch {
                actions: vec![first],
                states: vec![parse_state_narration(line)],
                rate: None,
            });
        } else if let Some(c) = AFTER_RE.captures(line) {
            if let (Some(branch), Some(action)) = (current.as_mut(), ActionPrimitive::parse(&c[1]))
            {
                branch.actions.push(action);
                branch.states.push(parse_state_narration(line));
            }
        } else if let Some(c) = RATE_RE.captures(line) {
            if let Some(branch) = current.as_mut() {
                branch.rate = Some(c[1].parse::<f64>().unwrap() / 100.0);
            }
        }
    }
    if let Some(done) = current.take() {
        branches.push(done);
    }
    branches
}

/// Deterministic extraction for templated traces: the plan tags name the
/// chosen branch; its narrated states become the imagined states. Responses
/// with a plan but no narration extract successfully with no imagined
/// states. Returns an error only when no plan/action is recoverable.
pub fn extract_simulation(text: &str) -> Result<ExtractedSimulation, ExtractError> {
    let response =
        parse_response(text).map_err(|e| ExtractError::Unparseable(e.to_string()))?;
    let branches = extract_all_branches(text);
    let chosen = branches
        .iter()
        .find(|b| b.actions == response.plan)
        .or_else(|| {
            // Without an exact match, fall back to the highest-rate branch.
            branches
                .iter()
                .max_by(|a, b| {
                    a.rate
                        .unwrap_or(-1.0)
                        .partial_cmp(&b.rate.unwrap_or(-1.0))
                        .unwrap()
                })
        });
    Ok(ExtractedSimulation {
        actions: response.plan,
        imagined_states: chosen.map(|b| b.states.clone()).unwrap_or_default(),
        discounted_success_rate: chosen.and_then(|b| b.rate),
    })
}

/// Table-style JSON shape returned by a remote extractor endpoint.
#[derive(Debug, Deserialize)]
struct RemoteExtraction {
    extracted_final_chosen_branch: RemoteBranch,
}

#[derive(Debug, Deserialize)]
struct RemoteBranch {
    actions: Vec<String>,
    #[serde(default)]
    last_observation: String,
    #[serde(default)]
    discounted_success_rate: Option<f64>,
}

/// Delegates extraction of free-form text to a chat-completion endpoint that
/// answers with the JSON object wrapped in `<json>` tags.
pub fn extract_simulation_remote(
    cfg: &EndpointConfig,
    response_text: &str,
) -> Result<ExtractedSimulation, ExtractError> {
    let prompt = format!(
        "Parse the agent response below. Output a JSON object wrapped in <json> </json> tags with the shape \
         {{\"extracted_final_chosen_branch\": {{\"actions\": [\"...\"], \"last_observation\": \"...\", \"discounted_success_rate\": 0}}}}. \
         The actions array is the ENTIRE branch/plan that caused the agent's current decision; last_observation describes the \
         imagined observation AFTER executing that branch; discounted_success_rate is 0-100 or -1 if absent.\n\n\
         # Input response\n{response_text}\n\nDO NOT generate anything else."
    );
    let raw = chat_complete(cfg, &prompt).map_err(|e: PolicyError| {
        ExtractError::Unparseable(format!("extractor endpoint failed: {e}"))
    })?;
    let json_body = span_between(&raw, "<json>", &["</json>"])
        .unwrap_or(&raw)
        .trim();
    let parsed: RemoteExtraction = serde_json::from_str(json_body)
        .map_err(|e| ExtractError::Unparseable(format!("bad extractor JSON: {e}")))?;
    let mut actions = Vec::new();
    for name in &parsed.extracted_final_chosen_branch.actions {
        actions.push(
            ActionPrimitive::parse(name)
                .ok_or_else(|| ExtractError::Unparseable(format!("unknown action {name:?}")))?,
        );
    }
    if actions.is_empty() {
        return Err(ExtractError::Unparseable("empty extracted plan".into()));
    }
    let imagined = parse_state_narration(&parsed.extracted_final_chosen_branch.last_observation);
    let rate = parsed
        .extracted_final_chosen_branch
        .discounted_success_rate
        .filter(|r| *r >= 0.0)
        .map(|r| r / 100.0);
    Ok(ExtractedSimulation {
        actions,
        imagined_states: if imagined.is_empty() { vec![] } else { vec![imagined] },
        discounted_success_rate: rate,
    })
}

/// Replays a plan on a snapshot and returns the true post-action states;
/// the live state is untouched. The replay stops once the task is solved.
pub fn ground_truth_rollforward(
    state: &SokobanState,
    actions: &[ActionPrimitive],
) -> Vec<SokobanState> {
    let snapshot = state.snapshot();
    let mut sim = SokobanState::restore(&snapshot);
    // A budget the replay can never exhaust, so truth reflects every action.
    let cap = state.step_count + actions.len() + 1;
    let mut out = Vec::with_capacity(actions.len());
    for &a in actions {
        let res = step(&sim, a, cap);
        sim = res.next_state;
        out.push(sim.clone());
        if sim.is_solved() {
            break;
        }
    }
    out
}

/// Per-turn score report with the satisfied rubric items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScoreReport {
    pub correctness: f64,
    pub progress: f64,
    pub total: f64,
    pub rubric_flags: Vec<String>,
}

fn claim_correct(claim: CellClaim, p: Position, truth: &SokobanState) -> bool {
    let is_box = truth.boxes.contains(&p);
    let is_target = truth.targets.contains(&p);
    match claim {
        CellClaim::Player => p == truth.player,
        CellClaim::Box => is_box,
        CellClaim::BoxOnTarget => is_box && is_target,
        CellClaim::Target => is_target && !is_box,
        CellClaim::Wall => truth.is_wall(p),
        CellClaim::Floor => {
            truth.in_bounds(p) && !truth.is_wall(p) && !is_box && !is_target && p != truth.player
        }
    }
}

/// Additive correctness rubric against the true final state: player
/// coordinates (+0.1), some mentioned boxes/targets correct (+0.05), all
/// mentioned boxes/targets correct (+0.1), all mentioned walls/floors
/// correct (+0.05); capped at 0.3. Unmentioned categories earn nothing.
pub fn score_correctness(
    imagined: &ImaginedState,
    truth_final: &SokobanState,
) -> (f64, Vec<String>) {
    let mut score: f64 = 0.0;
    let mut flags = Vec::new();

    let player_claims: Vec<_> = imagined
        .claims
        .iter()
        .filter(|(k, _)| *k == CellClaim::Player)
        .collect();
    if !player_claims.is_empty() && player_claims.iter().all(|(k, p)| claim_correct(*k, *p, truth_final))
    {
        score += 0.1;
        flags.push("player_correct".into());
    }

    let bt: Vec<bool> = imagined
        .claims
        .iter()
        .filter(|(k, _)| matches!(k, CellClaim::Box | CellClaim::BoxOnTarget | CellClaim::Target))
        .map(|(k, p)| claim_correct(*k, *p, truth_final))
        .collect();
    if bt.iter().any(|&ok| ok) {
        score += 0.05;
        flags.push("some_boxes_targets_correct".into());
    }
    if !bt.is_empty() && bt.iter().all(|&ok| ok) {
        score += 0.1;
        flags.push("all_boxes_targets_correct".into());
    }

    let wf: Vec<bool> = imagined
        .claims
        .iter()
        .filter(|(k, _)| matches!(k, CellClaim::Wall | CellClaim::Floor))
        .map(|(k, p)| claim_correct(*k, *p, truth_final))
        .collect();
    if !wf.is_empty() && wf.iter().all(|&ok| ok) {
        score += 0.05;
        flags.push("walls_floors_correct".into());
    }

    (score.min(0.3), flags)
}

fn box_target_distance(state: &SokobanState) -> isize {
    state
        .boxes
        .iter()
        .map(|b| {
            state
                .targets
                .iter()
                .map(|t| {
                    (b.row as isize - t.row as isize).abs()
                        + (b.col as isize - t.col as isize).abs()
                })
                .min()
                .unwrap_or(0)
        })
        .sum()
}

/// Progress rubric on the true final state: solved earns the full 0.7, a
/// dead position earns nothing, and otherwise the decrease in summed
/// box-to-nearest-target Manhattan distance maps deterministically to the
/// major (0.5) / minor (0.2) / none (0.0) tiers.
pub fn score_progress(start: &SokobanState, truth_final: &SokobanState) -> (f64, Vec<String>) {
    if truth_final.is_solved() {
        return (0.7, vec!["solved".into()]);
    }
    if is_deadlocked(truth_final) {
        return (0.0, vec!["deadlocked".into()]);
    }
    let delta = box_target_distance(start) - box_target_distance(truth_final);
    if delta >= 2 {
        (0.5, vec!["major_progress".into()])
    } else if delta == 1 {
        (0.2, vec!["minor_progress".into()])
    } else {
        (0.0, vec!["no_progress".into()])
    }
}

/// Scores one turn: extraction, ground-truth roll-forward, correctness of
/// the final imagined state, and progress of the true final state.
/// Extraction failures score zero (flagged, not dropped).
pub fn score_turn(state: &SokobanState, response_text: &str) -> SimScoreReport {
    let sim = match extract_simulation(response_text) {
        Ok(sim) => sim,
        Err(_) => {
            return SimScoreReport {
                correctness: 0.0,
                progress: 0.0,
                total: 0.0,
                rubric_flags: vec!["extraction_failed".into()],
            }
        }
    };
    score_extracted(state, &sim)
}

/// Scoring body shared by the template and remote extraction routes.
pub fn score_extracted(state: &SokobanState, sim: &ExtractedSimulation) -> SimScoreReport {
    let truth = ground_truth_rollforward(state, &sim.actions);
    let truth_final = truth.last().unwrap_or(state);

    let (correctness, mut flags) = match sim.imagined_states.last() {
        Some(imagined) if !imagined.is_empty() => score_correctness(imagined, truth_final),
        _ => (0.0, Vec::new()),
    };
    let (progress, mut progress_flags) = score_progress(state, truth_final);
    flags.append(&mut progress_flags);

    SimScoreReport {
        correctness,
        progress,
        total: correctness + progress,
        rubric_flags: flags,
    }
}

/// Mean per-turn total over a stored trajectory of (state, response text).
pub fn trajectory_sim_score(turns: &[(SokobanState, String)]) -> f64 {
    if turns.is_empty() {
        return 0.0;
    }
    turns
        .iter()
        .map(|(state, text)| score_turn(state, text).total)
        .sum::<f64>()
        / turns.len() as f64
}

#[derive(Debug, Error, PartialEq)]
pub enum SpearmanError {
    #[error("need two equally sized vectors of length >= 2 (got {x} and {y})")]
    BadInput { x: usize, y: usize },
    #[error("rank correlation undefined for a constant vector")]
    ConstantInput,
}

fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Average 1-based rank over the tie run.
        let rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of fractional ranks with
/// average-rank ties. Constant vectors are undefined and error explicitly.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, SpearmanError> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(SpearmanError::BadInput {
            x: x.len(),
            y: y.len(),
        });
    }
    let constant = |v: &[f64]| v.iter().all(|a| a == &v[0]);
    if constant(x) || constant(y) {
        return Err(SpearmanError::ConstantInput);
    }
    let rx = fractional_ranks(x);
    let ry = fractional_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx).powi(2);
        vy += (b - my).powi(2);
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}
