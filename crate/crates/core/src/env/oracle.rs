//! Breadth-first solver over the full game state. Used as a test oracle and
//! as a scripted policy for harness checks.

use std::collections::{HashSet, VecDeque};
use std::sync::Arc;

use super::game::{transition, Action, Core, EnvState, Outcome};
use super::level::Level;

/// Shortest action sequence that collects the gem from the start of `level`
/// without opening a distractor box, or `None` if no such sequence fits in
/// the step budget.
pub fn oracle_solve(level: &Level) -> Option<Vec<Action>> {
    solve_from(&EnvState::new(Arc::new(level.clone())))
}

/// As [`oracle_solve`], starting from an arbitrary episode state.
pub fn solve_from(state: &EnvState) -> Option<Vec<Action>> {
    match state.outcome() {
        Outcome::GemCollected => return Some(Vec::new()),
        Outcome::Running => {}
        _ => return None,
    }
    let budget = state.level().config().max_steps - state.steps_taken();
    bfs(state.level(), *state.core(), budget)
}

fn bfs(level: &Level, start: Core, budget: u32) -> Option<Vec<Action>> {
    // node -> (parent, action taken from parent)
    let mut nodes: Vec<(Core, usize, Action, u32)> = vec![(start, usize::MAX, Action::Up, 0)];
    let mut seen = HashSet::from([start]);
    let mut queue = VecDeque::from([0usize]);
    while let Some(i) = queue.pop_front() {
        let (core, _, _, depth) = nodes[i];
        if depth >= budget {
            continue;
        }
        for action in Action::ALL {
            let (next, _, outcome) = transition(level, &core, action);
            match outcome {
                Outcome::GemCollected => {
                    let mut path = vec![action];
                    let mut j = i;
                    while nodes[j].1 != usize::MAX {
                        path.push(nodes[j].2);
                        j = nodes[j].1;
                    }
                    path.reverse();
                    return Some(path);
                }
                Outcome::DistractorOpened => continue,
                _ => {}
            }
            if seen.insert(next) {
                nodes.push((next, i, action, depth + 1));
                queue.push_back(nodes.len() - 1);
            }
        }
    }
    None
}
