//! JSON-lines scene files: one scenario per line.
//!
//! Floats are serialized as the shortest decimal that parses back to the
//! identical 64-bit value, so write-then-read is a bit-exact round trip.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scene::Scene;

pub fn write_scenes(scenes: &[Scene], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for scene in scenes {
        serde_json::to_writer(&mut w, scene)
            .map_err(|e| Error::Validation(format!("cannot serialize scene: {e}")))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads and validates scenes. With `require_future`, every target agent
/// must carry ground truth (training / evaluation data).
pub fn read_scenes(path: &Path, require_future: bool) -> Result<Vec<Scene>> {
    let reader = BufReader::new(File::open(path)?);
    let mut scenes = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut scene: Scene = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        // horizon is not serialized; recover it from any ground-truth future
        if let Some(fut_len) = scene.agents.iter().find_map(|a| a.future_gt.as_ref().map(|f| f.len()))
        {
            scene.horizon = fut_len;
        }
        scene.validate(require_future).map_err(|e| Error::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        scenes.push(scene);
    }
    Ok(scenes)
}
