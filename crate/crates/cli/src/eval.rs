use log::info;
use mnad::data::load_split;
use mnad::error::{Error, Result};
use mnad::scoring::write_trace;
use mnad::trainer::{checkpoint, evaluate, EvalOptions};

use crate::output::{self, BANK_FILE, ERROR_MAP_DIR, EVOLVED_CHECKPOINT, METRICS_FILE, QUERIES_FILE, TRACE_FILE};
use crate::{config, EvalArgs, GateArgs};

/// Test-time gate and score weight after the config file and flags.
pub fn apply_gate(args: &GateArgs, gamma: &mut f64, lambda: &mut f64) {
    if args.gate_off {
        *gamma = f64::INFINITY;
    }
    if let Some(g) = args.gamma {
        *gamma = g;
    }
    if let Some(l) = args.lambda {
        *lambda = l;
    }
}

pub fn run(args: EvalArgs) -> Result<()> {
    let mut state = checkpoint::load(&args.checkpoint)?;
    if let Some(task) = args.task {
        state.expect_task(task)?;
    }
    let mut c = config::resolve_eval(&state.config, args.config.as_deref())?;
    apply_gate(&args.gate, &mut c.memory.gamma, &mut c.score.lambda);
    if let Some(scope) = args.scope {
        c.score.scope = scope;
    }
    if args.bank_per_video {
        c.score.bank_per_video = true;
    }
    c.validate()?;

    let clips = load_split(&args.data, "test", c.model.frame_height, c.model.frame_width)?;
    let mut opts = EvalOptions::from_config(&c);
    opts.query_sample_every = args.query_every;
    opts.error_maps = args.error_maps;
    info!("scoring {} test clips", clips.len());
    let result = evaluate(&state, &clips, &opts)?;

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let trace_path = args.out.join(TRACE_FILE);
    write_trace(output::create(&trace_path)?, &result.rows)?;
    output::write_bank(&args.out.join(BANK_FILE), &result.bank)?;
    output::write_queries(&args.out.join(QUERIES_FILE), &result.queries, c.model.query_channels)?;
    if args.error_maps {
        output::write_error_maps(&args.out.join(ERROR_MAP_DIR), &result.error_maps)?;
    }
    if args.persist_memory {
        state.bank = result.bank.clone();
        let path = args.out.join(EVOLVED_CHECKPOINT);
        checkpoint::save(&state, &path)?;
        info!("evolved memory written to {}", path.display());
    }
    let metrics = output::metrics(&result, c.memory.gamma, c.score.lambda, c.score.scope.as_str());
    output::write_text(&args.out.join(METRICS_FILE), &metrics)?;
    print!("{metrics}");
    Ok(())
}
