use super::{EnvKind, GroundTruth, TaskInstance};
use crate::proto::{Observation, Segment, State, Trajectory, Vocab};

/// What the environment appended after an action.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvResponse {
    pub appended_segments: Vec<Segment>,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Action {
    Look {
        row: usize,
        col: usize,
    },
    /// Opening `<answer>` followed by its payload; `closed` records whether
    /// `</answer>` ended it with nothing after.
    Answer {
        payload: Vec<u32>,
        closed: bool,
    },
    Malformed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Answer {
    Integer(u32),
    Location { row: usize, col: usize },
    Symbol(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Verdict {
    pub correct: bool,
    pub parsed_answer: Option<Answer>,
    pub format_ok: bool,
}

pub fn parse_action(tokens: &[u32], vocab: &Vocab, height: usize, width: usize) -> Action {
    match tokens.first() {
        Some(&t) if Some(t) == vocab.look() => match tokens {
            [_, r, c] => match (vocab.as_digit(*r), vocab.as_digit(*c)) {
                (Some(r), Some(c)) if (r as usize) < height && (c as usize) < width => {
                    Action::Look {
                        row: r as usize,
                        col: c as usize,
                    }
                }
                _ => Action::Malformed,
            },
            _ => Action::Malformed,
        },
        Some(&t) if t == vocab.answer_open() => {
            let rest = &tokens[1..];
            let end = rest.iter().position(|&x| x == vocab.answer_close());
            let payload = rest[..end.unwrap_or(rest.len())].to_vec();
            let closed = matches!(end, Some(i) if i + 1 == rest.len());
            Action::Answer { payload, closed }
        }
        _ => Action::Malformed,
    }
}

pub fn reset(instance: &TaskInstance, _rng_seed: u64) -> State {
    let obs = match instance.env.hidden_symbol() {
        Some(hidden) => Observation::filled(instance.grid.height, instance.grid.width, hidden),
        None => instance.grid.clone(),
    };
    State::new(vec![
        Segment::prompt(instance.prompt_tokens.clone()),
        Segment::observation(obs),
    ])
}

/// Appends the action and the environment's reply. `turn` is the 1-based
/// index of this action within the episode.
pub fn step(
    instance: &TaskInstance,
    state: &State,
    action: &[u32],
    turn: usize,
) -> (State, EnvResponse) {
    let env = &instance.env;
    let mut appended = Vec::new();
    let mut done = true;
    if env.kind.is_multi_turn() {
        let vocab = env.vocab();
        match parse_action(action, &vocab, env.height, env.width) {
            Action::Answer { .. } => {}
            Action::Look { row, col } => {
                let hidden = env
                    .hidden_symbol()
                    .expect("multi-turn env has a hidden symbol");
                let mut obs = Observation::filled(env.height, env.width, hidden);
                obs.cells[row * env.width + col] = instance.grid.get(row, col);
                appended.push(Segment::observation(obs));
                done = false;
            }
            Action::Malformed => {
                appended.push(Segment::prompt(vec![vocab.invalid()]));
                done = false;
            }
        }
        if turn >= env.max_turns {
            done = true;
            appended.clear();
        }
    }
    let next =
        state.extended(std::iter::once(Segment::action(action.to_vec())).chain(appended.clone()));
    (
        next,
        EnvResponse {
            appended_segments: appended,
            done,
        },
    )
}

fn digits_value(payload: &[u32], vocab: &Vocab) -> Option<u32> {
    if payload.is_empty() || payload.len() > 6 {
        return None;
    }
    payload.iter().try_fold(0u32, |acc, &t| {
        vocab.as_digit(t).map(|d| acc * vocab.num_digits + d)
    })
}

/// The well-formed correct final action for `instance`.
pub fn answer_tokens(instance: &TaskInstance) -> Vec<u32> {
    let vocab = instance.env.vocab();
    let mut payload = match instance.ground_truth {
        GroundTruth::Count(mut n) => {
            let mut digits = vec![n % vocab.num_digits];
            n /= vocab.num_digits;
            while n > 0 {
                digits.push(n % vocab.num_digits);
                n /= vocab.num_digits;
            }
            digits.reverse();
            digits
        }
        GroundTruth::Location { row, col } => vec![row as u32, col as u32],
        GroundTruth::Symbol(s) => vec![s],
    };
    payload.insert(0, vocab.answer_open());
    payload.push(vocab.answer_close());
    payload
}

pub fn verify(trajectory: &Trajectory, instance: &TaskInstance) -> Verdict {
    verify_state(&trajectory.final_state, instance)
}

/// Verification only needs the final state's last action.
pub fn verify_state(state: &State, instance: &TaskInstance) -> Verdict {
    let env = &instance.env;
    let vocab = env.vocab();
    let none = Verdict {
        correct: false,
        parsed_answer: None,
        format_ok: false,
    };
    let Some(action) = state.last_action() else {
        return none;
    };
    let Action::Answer { payload, closed } = parse_action(action, &vocab, env.height, env.width)
    else {
        return none;
    };
    let parsed = match env.kind {
        EnvKind::GridCount => digits_value(&payload, &vocab).map(Answer::Integer),
        EnvKind::GridGround => match payload.as_slice() {
            [r, c] => match (vocab.as_digit(*r), vocab.as_digit(*c)) {
                (Some(r), Some(c)) => Some(Answer::Location {
                    row: r as usize,
                    col: c as usize,
                }),
                _ => None,
            },
            _ => None,
        },
        EnvKind::MultiTurnSearch => match payload.as_slice() {
            [s] => vocab.as_digit(*s).map(Answer::Symbol),
            _ => None,
        },
    };
    let correct = match (parsed, instance.ground_truth) {
        (Some(Answer::Integer(a)), GroundTruth::Count(b)) => a == b,
        (Some(Answer::Location { row, col }), GroundTruth::Location { row: r, col: c }) => {
            row == r && col == c
        }
        (Some(Answer::Symbol(a)), GroundTruth::Symbol(b)) => a == b,
        _ => false,
    };
    Verdict {
        correct,
        parsed_answer: parsed,
        format_ok: parsed.is_some() && closed,
    }
}
