//! Config files are TOML with one table per module. A file only needs the
//! keys it changes; everything else comes from the task defaults.

use std::path::Path;

use mnad::error::{CheckpointError, Error, Result};
use mnad::model::Task;
use mnad::trainer::Config;
use toml::{Table, Value};

/// Key reference printed under `--help` for the subcommands that read a
/// config file.
pub const KEYS_HELP: &str = "\
Config file keys (TOML, one table per section; command-line flags win):
  [model]
    task                  reconstruction | prediction
    input_window          frames stacked as input (1 or 4 by task)
    target_index          frame index the output is compared with
    frame_height          frames are resized to this height
    frame_width           frames are resized to this width
    channels_in           channels per frame (1 for grayscale)
    feature_dims          encoder widths, one stride-2 stage each
    query_channels        query and item dimension C
    use_skip_connections  U-Net skips between encoder and decoder
    use_memory            false bypasses the memory (decoder sees q|q)
  [memory]
    items                 number of items M
    trainable_items       let the feature losses move the items too
    gamma                 test-time gate threshold on E_t (inf disables)
  [losses]
    lambda_c              weight of the compactness term
    lambda_s              weight of the separateness term
    alpha                 separateness margin
  [train]
    epochs, batch_size, lr, seed
  [score]
    lambda                PSNR weight in the fused score
    scope                 per-video | global min-max normalization
    bank_per_video        restart each test video from the trained bank";

fn read_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.parse::<Table>()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Overlays `file` onto `base`, rejecting keys `base` does not have.
fn overlay(base: &mut Table, file: &Table, prefix: &str) -> Result<()> {
    for (key, value) in file {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (base.get_mut(key), value) {
            (None, _) => return Err(Error::Config(format!("unknown config key `{path}`"))),
            (Some(Value::Table(b)), Value::Table(f)) => overlay(b, f, &path)?,
            (Some(Value::Table(_)), _) => return Err(Error::Config(format!("`{path}` must be a table"))),
            (Some(slot), v) => *slot = v.clone(),
        }
    }
    Ok(())
}

fn to_table(config: &Config) -> Table {
    config.to_toml().parse().expect("serialized config parses")
}

fn from_table(table: Table) -> Result<Config> {
    Config::from_toml(&table.to_string())
}

fn file_task(file: &Table) -> Result<Option<Task>> {
    match file.get("model").and_then(|m| m.get("task")) {
        None => Ok(None),
        Some(Value::String(s)) => s.parse().map(Some),
        Some(other) => Err(Error::Config(format!("`model.task` must be a string, got {other}"))),
    }
}

/// Task defaults, then the file, with `task` (from the command line)
/// taking precedence over the file's `model.task`.
pub fn resolve(task: Option<Task>, file: Option<&Path>) -> Result<Config> {
    let table = file.map(read_table).transpose()?.unwrap_or_default();
    let task = match task {
        Some(t) => t,
        None => file_task(&table)?.unwrap_or(Task::Prediction),
    };
    let mut base = to_table(&Config::for_task(task));
    overlay(&mut base, &table, "")?;
    let mut config = from_table(base)?;
    config.model.task = task;
    Ok(config)
}

/// Overlays an evaluation config onto the checkpoint's. Only the test-time
/// keys may change; anything else must match what the model was trained with.
pub fn resolve_eval(trained: &Config, file: Option<&Path>) -> Result<Config> {
    let Some(path) = file else {
        return Ok(trained.clone());
    };
    let mut base = to_table(trained);
    overlay(&mut base, &read_table(path)?, "")?;
    let config = from_table(base)?;
    let mut comparable = config.clone();
    comparable.memory.gamma = trained.memory.gamma;
    comparable.score = trained.score.clone();
    if comparable != *trained {
        let (a, b) = (to_table(trained), to_table(&comparable));
        let key = first_difference(&a, &b, "").unwrap_or_default();
        return Err(CheckpointError::ConfigMismatch {
            key: key.clone(),
            found: lookup(&a, &key),
            expected: lookup(&b, &key),
        }
        .into());
    }
    Ok(config)
}

fn first_difference(a: &Table, b: &Table, prefix: &str) -> Option<String> {
    for (key, va) in a {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (va, b.get(key)) {
            (Value::Table(ta), Some(Value::Table(tb))) => {
                if let Some(p) = first_difference(ta, tb, &path) {
                    return Some(p);
                }
            }
            (va, Some(vb)) if va == vb => {}
            _ => return Some(path),
        }
    }
    None
}

fn lookup(t: &Table, dotted: &str) -> String {
    let mut v: Option<&Value> = None;
    let mut table = Some(t);
    for part in dotted.split('.') {
        v = table.and_then(|t| t.get(part));
        table = v.and_then(Value::as_table);
    }
    v.map(ToString::to_string).unwrap_or_else(|| "nothing".into())
}
