//! The trajectory batch protocol: states are flattened into token streams
//! with response masks, padded into a batch, annotated with numeric fields,
//! split into minibatches and written to a JSONL dump.
//!
//! ```text
//! cargo run --release --example batch_protocol
//! ```

use rlforge::env::{answer_tokens, generate_instances, reset, step, EnvKind, EnvSpec};
use rlforge::proto::{concat_batches, field, flatten_state, make_batch, select_rows, DumpRecord, Trajectory};

fn main() -> rlforge::Result<()> {
    let spec = EnvSpec::default_for(EnvKind::MultiTurnSearch);
    let vocab = spec.vocab();
    let ph = vocab.placeholder_policy(spec.height, spec.width);
    let instances = generate_instances(&spec, 3, 0)?;

    // Episodes of different lengths: answer immediately, or look first.
    let trajectories: Vec<Trajectory> = instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let s0 = reset(inst, 0);
            let mut state = s0.clone();
            let mut turns = 0;
            if i % 2 == 1 {
                let (r, c) = inst.query.expect("search instances carry a query cell");
                state = step(inst, &state, &[vocab.look().unwrap(), r as u32, c as u32], 1).0;
                turns += 1;
            }
            state = step(inst, &state, &answer_tokens(inst), turns + 1).0;
            let flat = flatten_state(&state, &ph)?;
            Ok(Trajectory {
                initial_state: s0,
                sampled_logprobs: vec![0.0; flat.tokens.len()],
                flat_tokens: flat.tokens,
                response_mask: flat.response_mask,
                final_state: state,
                turn_count: turns + 1,
                reward_components: Default::default(),
                total_reward: 1.0,
                group_id: i as u64,
                prompt_id: inst.id,
                rng_seed: 0,
                truncated: false,
                greedy_baseline: false,
            })
        })
        .collect::<rlforge::Result<_>>()?;

    let mut batch = make_batch(&trajectories, vocab.pad())?;
    println!("{} rows padded to {} positions", batch.rows(), batch.max_len());
    for r in 0..batch.rows() {
        let mask: String = batch
            .row(field::RESPONSE_MASK, r)?
            .iter()
            .map(|&m| if m == 1.0 { '1' } else { '.' })
            .collect();
        println!("  row {r}: length {:>2} response {:>2} mask {mask}", batch.row_len(r), batch.response_len(r));
    }

    // Numeric fields are dense rows x max_len arrays.
    let w = batch.max_len();
    let mut adv = vec![0.0; batch.rows() * w];
    let mask = batch.data(field::RESPONSE_MASK)?.to_vec();
    for (i, a) in adv.iter_mut().enumerate() {
        *a = mask[i] * (i / w) as f64;
    }
    batch.set_field(field::ADVANTAGES, 0.0, adv)?;
    println!("fields: {:?}", batch.field_names().collect::<Vec<_>>());

    let first = select_rows(&batch, &[0])?;
    let rest = select_rows(&batch, &[1, 2])?;
    let joined = concat_batches(&[first, rest])?;
    println!("split and rejoined batch equals the original: {}", joined == batch);

    let mut dump = Vec::new();
    let records: Vec<DumpRecord> = trajectories.iter().map(|t| DumpRecord::from_trajectory(t, Some(vocab))).collect();
    DumpRecord::write_all(&records, &mut dump)?;
    let back = DumpRecord::read_all(dump.as_slice())?;
    println!("dump: {} bytes, {} records, round trip exact: {}", dump.len(), back.len(), back == records);
    let mut text = String::new();
    rlforge::cli::render_record(&mut text, 1, &back[1]);
    print!("{text}");
    Ok(())
}
