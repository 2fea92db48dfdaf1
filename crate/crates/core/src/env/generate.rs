use rand::seq::SliceRandom;
use rand::Rng;

use super::{EnvKind, EnvSpec, GroundTruth, TaskInstance};
use crate::error::Result;
use crate::proto::Observation;
use crate::rng::{stream, tag};

/// Deterministic instance set. Counting labels are uniform over
/// `0..=height*width`; grounding grids hold the target exactly once; search
/// grids are uniform with a uniform query cell.
pub fn generate_instances(spec: &EnvSpec, count: usize, seed: u64) -> Result<Vec<TaskInstance>> {
    spec.validate()?;
    let vocab = spec.vocab();
    let (h, w, s) = (spec.height, spec.width, spec.num_symbols as u32);
    let n = h * w;
    let mut out = Vec::with_capacity(count);
    for id in 0..count as u64 {
        let mut rng = stream(seed, &[tag::INSTANCES, id]);
        let inst = match spec.kind {
            EnvKind::GridCount | EnvKind::GridGround => {
                let target = rng.gen_range(0..s);
                let k = match spec.kind {
                    EnvKind::GridCount => rng.gen_range(0..=n),
                    _ => 1,
                };
                let mut cells: Vec<u32> = (0..n)
                    .map(|_| {
                        let x = rng.gen_range(0..s - 1);
                        if x >= target {
                            x + 1
                        } else {
                            x
                        }
                    })
                    .collect();
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                for &i in &order[..k] {
                    cells[i] = target;
                }
                let grid = Observation::new(h, w, cells)?;
                let truth = match spec.kind {
                    EnvKind::GridCount => GroundTruth::Count(k as u32),
                    _ => GroundTruth::Location {
                        row: order[0] / w,
                        col: order[0] % w,
                    },
                };
                TaskInstance {
                    id,
                    env: *spec,
                    grid,
                    target_symbol: target,
                    prompt_tokens: vec![vocab.query(), target],
                    ground_truth: truth,
                    query: None,
                }
            }
            EnvKind::MultiTurnSearch => {
                let cells: Vec<u32> = (0..n).map(|_| rng.gen_range(0..s)).collect();
                let (r, c) = (rng.gen_range(0..h), rng.gen_range(0..w));
                let answer = cells[r * w + c];
                TaskInstance {
                    id,
                    env: *spec,
                    grid: Observation::new(h, w, cells)?,
                    target_symbol: answer,
                    prompt_tokens: vec![vocab.query(), r as u32, c as u32],
                    ground_truth: GroundTruth::Symbol(answer),
                    query: Some((r, c)),
                }
            }
        };
        out.push(inst);
    }
    Ok(out)
}
