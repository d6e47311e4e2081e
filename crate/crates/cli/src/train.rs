//! Loss-curve CSV for the toy multi-task harness.

use std::io::Write;

use streamvit::engine::{toy_train_with, EngineConfig, StepRecord, TrainRun};
use streamvit::{Error, Result};

pub const CSV_HEADER: &str = "step,total,dino,ibot,koleo,gram,depth,ray,points,camera,caption";

pub fn csv_row(r: &StepRecord) -> String {
    let p = &r.parts;
    // `{:?}` on f64 is shortest round-trip, so the CSV reproduces the run exactly
    format!(
        "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
        r.step, r.total, p.dino, p.ibot, p.koleo, p.gram, p.depth, p.ray, p.points, p.camera, p.caption
    )
}

/// Trains and streams one CSV row per step into `out`, header first.
pub fn train_to_csv(steps: usize, seed: u64, config: &EngineConfig, out: &mut (dyn Write + Send)) -> Result<TrainRun> {
    writeln!(out, "{CSV_HEADER}")?;
    let mut io_error = None;
    let run = toy_train_with(steps, seed, config, |r| {
        if io_error.is_none() {
            if let Err(e) = writeln!(out, "{}", csv_row(r)) {
                io_error = Some(e);
            }
        }
    });
    if let Some(e) = io_error {
        return Err(Error::Io(e));
    }
    out.flush()?;
    run
}
