//! Browser bindings for three small demonstrations:
//!
//! * the aggregated versus per-sample low-rank cost model,
//! * fusing and switching tasks on one expert layer,
//! * a mixed-task batch through the single-pass convolution.
//!
//! Each export returns a JSON string. The `*_report` functions hold the logic
//! and are plain Rust, so they are tested natively.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::wasm_bindgen;

use eks_core::autodiff::Tape;
use eks_core::conv::ConvSpec;
use eks_core::eks::{eks_cost_model, EksConvLayer, TaskMask};
use eks_core::instrument;
use eks_core::tensor::Tensor;

type Report = Result<Value, String>;

fn to_json(r: Report) -> String {
    r.unwrap_or_else(|e| json!({ "error": e })).to_string()
}

fn layer(
    seed: u64,
    tasks: usize,
    rank: usize,
    channels: usize,
) -> Result<(EksConvLayer, ChaCha8Rng), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ConvSpec::same(channels, channels, 3, 1).map_err(|e| e.to_string())?;
    let mut layer = EksConvLayer::init(spec, tasks, rank, &mut rng).map_err(|e| e.to_string())?;
    // Trained experts are non-zero; fresh ones start at B = 0.
    for e in &mut layer.experts {
        e.b_factor = Tensor::uniform(e.b_factor.shape(), -0.5, 0.5, &mut rng);
    }
    Ok((layer, rng))
}

pub fn cost_report(tasks: u64, rank: u64, batch: u64, len: u64, dim: u64) -> Report {
    let c = eks_cost_model(tasks, rank, batch, len, dim).map_err(|e| e.to_string())?;
    Ok(json!({
        "eks_cost": c.eks_cost.to_string(),
        "flora_cost": c.flora_cost.to_string(),
        "lhs": (tasks * rank) as f64 / (batch * len) as f64 + 1.0,
        "rhs": rank,
        "eks_cheaper": c.eks_cheaper,
        "speedup": c.flora_cost as f64 / c.eks_cost as f64,
    }))
}

/// Fuses `route[0]`, then switches through the rest, comparing each state
/// with a direct fusion of the same task.
pub fn switch_report(seed: u64, tasks: usize, rank: usize, route: &[usize]) -> Report {
    let (base, _) = layer(seed, tasks, rank, 8)?;
    let (&first, rest) = route.split_first().ok_or("route is empty")?;
    let mut live = base.clone();
    live.fuse(first).map_err(|e| e.to_string())?;
    let mut steps = vec![json!({ "task": first, "max_err_vs_direct": 0.0 })];
    for &t in rest {
        live.switch(t).map_err(|e| e.to_string())?;
        let direct = base.task_weight(t).map_err(|e| e.to_string())?;
        steps.push(json!({ "task": t, "max_err_vs_direct": live.w0.max_abs_diff(&direct) }));
    }
    live.unfuse().map_err(|e| e.to_string())?;
    let counts = base.param_count();
    Ok(json!({
        "steps": steps,
        "w0_restore_err": live.w0.max_abs_diff(&base.w0),
        "shared_params": counts.shared,
        "expert_params": counts.expert_total,
        "deployed_params": counts.deployed,
    }))
}

/// Runs a random mixed-task batch through the single-pass layer and through
/// one convolution per task, reporting their agreement and call counts.
pub fn forward_report(seed: u64, tasks: usize, batch: usize) -> Report {
    if batch == 0 || batch > 64 {
        return Err("batch must be in 1..=64".into());
    }
    let (layer, mut rng) = layer(seed, tasks, 2, 4)?;
    let ids: Vec<usize> = (0..batch).map(|_| rng.random_range(0..tasks)).collect();
    let mask = TaskMask::from_tasks(&ids, tasks).map_err(|e| e.to_string())?;
    let h = Tensor::uniform(&[batch, 4, 6, 6], -1.0, 1.0, &mut rng);

    let mut tape = Tape::new();
    let vars = layer.bind(&mut tape);
    let x = tape.constant(h);
    let before = instrument::snapshot().grouped_conv_calls;
    let fast = layer
        .forward(&mut tape, &vars, x, &mask)
        .map_err(|e| e.to_string())?;
    let calls = instrument::snapshot().grouped_conv_calls - before;
    let slow = layer
        .forward_per_task(&mut tape, &vars, x, &mask)
        .map_err(|e| e.to_string())?;
    let present = (0..tasks).filter(|&t| mask.is_present(t)).count();
    Ok(json!({
        "sample_tasks": ids,
        "grouped_conv_calls": calls,
        "per_task_conv_calls": present,
        "max_abs_diff": tape.value(fast).max_abs_diff(tape.value(slow)),
    }))
}

#[wasm_bindgen]
pub fn cost_model(tasks: u32, rank: u32, batch: u32, len: u32, dim: u32) -> String {
    to_json(cost_report(
        tasks.into(),
        rank.into(),
        batch.into(),
        len.into(),
        dim.into(),
    ))
}

/// `route` is a comma-separated task list such as `"0,2,1,0"`.
#[wasm_bindgen]
pub fn switch_demo(seed: u32, tasks: u32, rank: u32, route: &str) -> String {
    let parsed: Result<Vec<usize>, String> = route
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| format!("bad task index {s:?}"))
        })
        .collect();
    to_json(parsed.and_then(|r| switch_report(seed.into(), tasks as usize, rank as usize, &r)))
}

#[wasm_bindgen]
pub fn forward_demo(seed: u32, tasks: u32, batch: u32) -> String {
    to_json(forward_report(seed.into(), tasks as usize, batch as usize))
}
