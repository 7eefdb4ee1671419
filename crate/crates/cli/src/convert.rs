//! `convert`: native-layout scene files to canonical NDJSON.
//!
//! Input is one scene per line in the canonical layout, except that
//! `pose3d` / `pose2d` may instead be an object naming the source skeleton:
//!
//! ```text
//! {"scene_id":"s","fps":25,"t_obs":2,"t_pred":1,"agents":[{"agent_id":"0",
//!   "traj":[[0,0],[0.1,0],[0.2,0]],
//!   "pose3d":{"source":"h36m","joints":[[[x,y,z],null,…],…]}}]}
//! ```
//!
//! Native joints are remapped onto the unified skeleton; a header line, if
//! present, is skipped.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use serde_json::Value;
use transmotion::data::canonical::scene_from_line;
use transmotion::data::{remap_joints, resample_scene, Fps, Modality, ModalityTensor, PoseSource, RawPose, SceneRecord};

fn remap_value(v: &Value, target: Modality, at: &str) -> Result<Value> {
    let source: PoseSource = serde_json::from_value(v.get("source").cloned().unwrap_or(Value::Null))
        .with_context(|| format!("{at}.source: expected one of jta, h36m, jrdb, amass, 3dpw"))?;
    let rows: Vec<Vec<Option<Vec<f64>>>> = serde_json::from_value(v.get("joints").cloned().unwrap_or(Value::Null))
        .with_context(|| format!("{at}.joints: expected frames of joint points"))?;
    let features = target.features();
    let joints = source.joint_count();
    let mut values = vec![0.0; rows.len() * joints * features];
    let mut valid = vec![false; rows.len() * joints];
    for (t, row) in rows.iter().enumerate() {
        if row.len() != joints {
            return Err(anyhow!("{at}.joints[{t}]: {source} has {joints} joints, got {}", row.len()));
        }
        for (j, p) in row.iter().enumerate() {
            if let Some(p) = p {
                if p.len() != features {
                    return Err(anyhow!("{at}.joints[{t}][{j}]: expected {features} coordinates"));
                }
                let slot = t * joints + j;
                values[slot * features..(slot + 1) * features].copy_from_slice(p);
                valid[slot] = true;
            }
        }
    }
    let raw = RawPose {
        frames: rows.len(),
        joints,
        features,
        values,
        valid,
    };
    let unified = remap_joints(source, &raw, target).with_context(|| at.to_string())?;
    Ok(serde_json::to_value(point_rows(&unified))?)
}

fn point_rows(t: &ModalityTensor) -> Vec<Vec<Option<Vec<f64>>>> {
    (0..t.frames())
        .map(|f| (0..t.elements()).map(|e| t.get(f, e).map(<[f64]>::to_vec)).collect())
        .collect()
}

/// Parses one raw line into a canonical scene.
pub fn convert_line(text: &str, line: usize) -> Result<SceneRecord> {
    let mut v: Value = serde_json::from_str(text).with_context(|| format!("line {line}: not JSON"))?;
    if let Some(agents) = v.get_mut("agents").and_then(Value::as_array_mut) {
        for (i, a) in agents.iter_mut().enumerate() {
            for (key, m) in [("pose3d", Modality::Pose3d), ("pose2d", Modality::Pose2d)] {
                if let Some(p) = a.get(key).filter(|p| p.is_object()) {
                    let fixed = remap_value(p, m, &format!("line {line}: agents[{i}].{key}"))?;
                    a[key] = fixed;
                }
            }
        }
    }
    Ok(scene_from_line(&v.to_string(), line)?)
}

/// Reads a raw file; scenes are resampled to `fps` when given.
pub fn convert_file(path: &Path, fps: Option<Fps>) -> Result<Vec<SceneRecord>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() || (i == 0 && line.contains("\"format\"")) {
            continue;
        }
        let scene = convert_line(&line, i + 1)?;
        out.push(match fps {
            Some(fps) if fps != scene.fps => resample_scene(&scene, fps)?,
            _ => scene,
        });
    }
    Ok(out)
}
