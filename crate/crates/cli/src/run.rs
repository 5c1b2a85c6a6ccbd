use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use chainrag::{exec, ExecMode};
use serde::Serialize;
use serde_json::{json, Map, Value};

pub const METADATA_FILE: &str = "run_metadata.json";

/// Maps `f` over `items` batch by batch, handing results to `sink` in input
/// order. Stops at the first error `sink` returns.
pub fn run_ordered<T, R, F, S>(
    items: &[T],
    mode: ExecMode,
    workers: usize,
    f: F,
    mut sink: S,
) -> Result<()>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
    S: FnMut(&T, R) -> Result<()>,
{
    let batch = if workers == 0 { 64 } else { workers * 4 };
    for chunk in items.chunks(batch) {
        let results = exec::map_indexed(mode, chunk, |_, t| f(t));
        for (item, r) in chunk.iter().zip(results) {
            sink(item, r)?;
        }
    }
    Ok(())
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Wall-clock bookkeeping for one command, kept out of every other output file.
pub struct RunClock {
    command: &'static str,
    started: f64,
}

impl RunClock {
    pub fn start(command: &'static str) -> Self {
        Self {
            command,
            started: unix_now(),
        }
    }

    /// Merges this command's entry into the directory's metadata file.
    pub fn finish(self, output_dir: &Path, seed: u64, config: &impl Serialize) -> Result<()> {
        let path = output_dir.join(METADATA_FILE);
        let mut all: Map<String, Value> = match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
            Err(_) => Map::new(),
        };
        all.insert(
            self.command.to_string(),
            json!({
                "started_unix": self.started,
                "finished_unix": unix_now(),
                "seed": seed,
                "version": env!("CARGO_PKG_VERSION"),
                "config": config,
            }),
        );
        std::fs::write(&path, serde_json::to_string_pretty(&all)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }
}
