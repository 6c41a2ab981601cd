use log::info;
use mnad::data::load_split;
use mnad::error::{Error, Result};
use mnad::trainer::{self, CHECKPOINT_FILE};

use crate::{config, TrainArgs};

pub const CONFIG_FILE: &str = "config.toml";

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

pub fn run(args: TrainArgs) -> Result<()> {
    let mut c = config::resolve(args.task, args.config.as_deref())?;
    if args.no_memory {
        c.model.use_memory = false;
    }
    if args.trainable_items {
        c.memory.trainable_items = true;
    }
    set(&mut c.train.epochs, args.epochs);
    set(&mut c.train.batch_size, args.batch_size);
    set(&mut c.train.lr, args.lr);
    set(&mut c.train.seed, args.seed);
    set(&mut c.memory.items, args.items);
    set(&mut c.losses.lambda_c, args.lambda_c);
    set(&mut c.losses.lambda_s, args.lambda_s);
    c.validate()?;

    let clips = load_split(&args.data, "train", c.model.frame_height, c.model.frame_width)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let config_path = args.out.join(CONFIG_FILE);
    std::fs::write(&config_path, c.to_toml()).map_err(|e| Error::io(&config_path, e))?;
    info!(
        "training the {} model on {} clips for {} epochs",
        c.model.task.as_str(),
        clips.len(),
        c.train.epochs
    );
    let run = trainer::train(&c, &clips, Some(&args.out))?;
    if let Some(last) = run.log.last() {
        println!("steps={} l_total={:.6}", last.step, last.loss.total);
    }
    println!("checkpoint={}", args.out.join(CHECKPOINT_FILE).display());
    Ok(())
}
