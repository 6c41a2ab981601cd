use std::path::Path;

use log::info;
use mnad::data::{gen_synthetic, write_clip, Split, SynthSpec};
use mnad::error::{Error, Result};

use crate::{GendataArgs, SplitChoice};

fn is_non_empty(dir: &Path) -> Result<bool> {
    match std::fs::read_dir(dir) {
        Ok(mut entries) => Ok(entries.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(Error::io(dir, e)),
    }
}

fn write_split(root: &Path, spec: &SynthSpec, clips: usize, len: usize) -> Result<usize> {
    let name = match spec.split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let dir = root.join(name);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let generated = gen_synthetic(spec, clips, len)?;
    for clip in &generated {
        write_clip(&dir.join(&clip.video_id), clip)?;
    }
    let abnormal: usize = generated.iter().map(|c| c.labels.iter().filter(|&&l| l == 1).count()).sum();
    info!("{}: {clips} clips of {len} frames, {abnormal} abnormal frames", dir.display());
    Ok(generated.len())
}

pub fn run(args: GendataArgs) -> Result<()> {
    if args.split == SplitChoice::Train && args.anomalies.is_some() {
        return Err(mnad::error::DataError::AnomalyInTrainingSpec.into());
    }
    if is_non_empty(&args.out)? && !args.force {
        return Err(Error::config(format!(
            "{} is not empty; pass --force to replace its splits",
            args.out.display()
        )));
    }
    let shape = |mut s: SynthSpec| {
        s.height = args.height;
        s.width = args.width;
        s
    };
    let mut written = Vec::new();
    if matches!(args.split, SplitChoice::Train | SplitChoice::Both) {
        let spec = shape(SynthSpec::train(args.seed));
        spec.validate()?;
        written.push(("train", write_split(&args.out, &spec, args.clips, args.len)?));
    }
    if matches!(args.split, SplitChoice::Test | SplitChoice::Both) {
        let mut spec = shape(SynthSpec::test(args.seed));
        // Onset and duration scale with the clip; 64 frames give onsets in
        // 8..=20 and durations in 8..=16.
        let l = args.len;
        spec.onset = (l / 8, l * 5 / 16);
        spec.duration = ((l / 8).max(1), (l / 4).max(1));
        if let Some(kinds) = &args.anomalies {
            spec.anomalies = kinds.clone();
        }
        spec.validate()?;
        written.push(("test", write_split(&args.out, &spec, args.clips, args.len)?));
    }
    for (split, n) in written {
        println!("{split}={n}");
    }
    Ok(())
}
