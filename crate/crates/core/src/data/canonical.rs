//! Canonical NDJSON persistence: a header line followed by one scene per line.
//!
//! ```text
//! {"format":"transmotion-canonical","version":1,"dataset":"synth","split":"train"}
//! {"scene_id":"…","fps":5,"t_obs":10,"t_pred":20,"agents":[{"agent_id":"0","traj":[[x,y],null,…],"pose3d":null,…}]}
//! ```
//!
//! Invalid entries are written as `null` and restored as invalid.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scene::{AgentTrack, Fps, Modality, ModalityTensor, SceneRecord};
use crate::error::{Error, Result};

pub const FORMAT_NAME: &str = "transmotion-canonical";
pub const FORMAT_VERSION: u32 = 1;

/// First line of every canonical file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalHeader {
    pub format: String,
    pub version: u32,
    pub dataset: String,
    pub split: String,
}

impl CanonicalHeader {
    pub fn new(dataset: impl Into<String>, split: impl Into<String>) -> Self {
        Self {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            dataset: dataset.into(),
            split: split.into(),
        }
    }

    /// `dataset/split`, the identity used to keep evaluation data disjoint
    /// from training data.
    pub fn tag(&self) -> String {
        format!("{}/{}", self.dataset, self.split)
    }
}

type Point = Option<Vec<f64>>;

#[derive(Serialize, Deserialize)]
struct SceneLine {
    scene_id: String,
    fps: Fps,
    t_obs: usize,
    t_pred: usize,
    agents: Vec<AgentLine>,
}

#[derive(Serialize, Deserialize)]
struct AgentLine {
    agent_id: String,
    traj: Vec<Point>,
    #[serde(default)]
    pose3d: Option<Vec<Vec<Point>>>,
    #[serde(default)]
    bbox3d: Option<Vec<Option<Vec<Vec<f64>>>>>,
    #[serde(default)]
    bbox2d: Option<Vec<Option<Vec<Vec<f64>>>>>,
    #[serde(default)]
    pose2d: Option<Vec<Vec<Point>>>,
    #[serde(default)]
    img_wh: Option<[f64; 2]>,
}

fn point_rows(t: &ModalityTensor) -> Vec<Vec<Point>> {
    (0..t.frames())
        .map(|f| (0..t.elements()).map(|e| t.get(f, e).map(<[f64]>::to_vec)).collect())
        .collect()
}

fn box_rows(t: &ModalityTensor) -> Vec<Option<Vec<Vec<f64>>>> {
    (0..t.frames())
        .map(|f| {
            t.frame_fully_valid(f)
                .then(|| (0..2).map(|e| t.get(f, e).unwrap().to_vec()).collect())
        })
        .collect()
}

impl From<&SceneRecord> for SceneLine {
    fn from(s: &SceneRecord) -> Self {
        SceneLine {
            scene_id: s.scene_id.clone(),
            fps: s.fps,
            t_obs: s.t_obs,
            t_pred: s.t_pred,
            agents: s
                .agents
                .iter()
                .map(|a| AgentLine {
                    agent_id: a.agent_id.clone(),
                    traj: (0..a.traj.frames()).map(|f| a.traj.get(f, 0).map(<[f64]>::to_vec)).collect(),
                    pose3d: a.pose3d.as_ref().map(point_rows),
                    bbox3d: a.bbox3d.as_ref().map(box_rows),
                    bbox2d: a.bbox2d.as_ref().map(box_rows),
                    pose2d: a.pose2d.as_ref().map(point_rows),
                    img_wh: a.img_wh,
                })
                .collect(),
        }
    }
}

struct LineCtx {
    line: usize,
}

impl LineCtx {
    fn err(&self, path: impl Into<String>, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            path: path.into(),
            message: message.into(),
        }
    }

    fn coords(&self, path: &str, p: &[f64], width: usize, out: &mut [f64]) -> Result<()> {
        if p.len() != width {
            return Err(self.err(path, format!("expected {width} coordinates, got {}", p.len())));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(self.err(path, "coordinates must be finite"));
        }
        out.copy_from_slice(p);
        Ok(())
    }

    fn frames_len(&self, path: &str, got: usize, want: usize) -> Result<()> {
        if got == want {
            Ok(())
        } else {
            Err(self.err(path, format!("expected {want} frames, got {got}")))
        }
    }

    fn points(&self, path: &str, m: Modality, rows: &[Vec<Point>], frames: usize) -> Result<ModalityTensor> {
        self.frames_len(path, rows.len(), frames)?;
        let e = m.elements();
        let f = m.features();
        let mut values = vec![f64::NAN; frames * e * f];
        let mut valid = vec![false; frames * e];
        for (t, row) in rows.iter().enumerate() {
            if row.len() != e {
                return Err(self.err(format!("{path}[{t}]"), format!("expected {e} elements, got {}", row.len())));
            }
            for (el, p) in row.iter().enumerate() {
                if let Some(p) = p {
                    let slot = t * e + el;
                    self.coords(&format!("{path}[{t}][{el}]"), p, f, &mut values[slot * f..(slot + 1) * f])?;
                    valid[slot] = true;
                }
            }
        }
        ModalityTensor::new(m, frames, values, valid).map_err(|e| self.err(path, e.to_string()))
    }

    fn boxes(&self, path: &str, m: Modality, rows: &[Option<Vec<Vec<f64>>>], frames: usize) -> Result<ModalityTensor> {
        self.frames_len(path, rows.len(), frames)?;
        let f = m.features();
        let mut values = vec![f64::NAN; frames * 2 * f];
        let mut valid = vec![false; frames * 2];
        for (t, row) in rows.iter().enumerate() {
            let Some(corners) = row else { continue };
            if corners.len() != 2 {
                return Err(self.err(format!("{path}[{t}]"), format!("expected 2 corners, got {}", corners.len())));
            }
            for (el, p) in corners.iter().enumerate() {
                let slot = t * 2 + el;
                self.coords(&format!("{path}[{t}][{el}]"), p, f, &mut values[slot * f..(slot + 1) * f])?;
                valid[slot] = true;
            }
        }
        ModalityTensor::new(m, frames, values, valid).map_err(|e| self.err(path, e.to_string()))
    }

    fn scene(&self, line: SceneLine) -> Result<SceneRecord> {
        let frames = line.t_obs + line.t_pred;
        let mut agents = Vec::with_capacity(line.agents.len());
        for (i, a) in line.agents.into_iter().enumerate() {
            let base = format!("agents[{i}]");
            let traj_rows: Vec<Vec<Point>> = a.traj.into_iter().map(|p| vec![p]).collect();
            let traj = self.points(&format!("{base}.traj"), Modality::Traj, &traj_rows, frames)?;
            let mut track = AgentTrack::new(a.agent_id, traj);
            if let Some(rows) = a.pose3d {
                track.pose3d = Some(self.points(&format!("{base}.pose3d"), Modality::Pose3d, &rows, frames)?);
            }
            if let Some(rows) = a.pose2d {
                track.pose2d = Some(self.points(&format!("{base}.pose2d"), Modality::Pose2d, &rows, frames)?);
            }
            if let Some(rows) = a.bbox3d {
                track.bbox3d = Some(self.boxes(&format!("{base}.bbox3d"), Modality::Box3d, &rows, frames)?);
            }
            if let Some(rows) = a.bbox2d {
                track.bbox2d = Some(self.boxes(&format!("{base}.bbox2d"), Modality::Box2d, &rows, frames)?);
            }
            track.img_wh = a.img_wh;
            agents.push(track);
        }
        Ok(SceneRecord {
            scene_id: line.scene_id,
            fps: line.fps,
            t_obs: line.t_obs,
            t_pred: line.t_pred,
            agents,
        })
    }
}

fn decode<'a, T: Deserialize<'a>>(text: &'a str, line: usize) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Parse {
            line,
            path,
            message: e.into_inner().to_string(),
        }
    })
}

/// Serializes one scene to a single JSON line (no trailing newline).
pub fn scene_to_line(scene: &SceneRecord) -> Result<String> {
    scene.validate()?;
    Ok(serde_json::to_string(&SceneLine::from(scene))?)
}

/// Parses one scene line; `line` is the 1-based line number used in errors.
pub fn scene_from_line(text: &str, line: usize) -> Result<SceneRecord> {
    let wire: SceneLine = decode(text, line)?;
    LineCtx { line }.scene(wire)
}

pub fn write_canonical_to<W: Write>(mut w: W, header: &CanonicalHeader, scenes: &[SceneRecord]) -> Result<()> {
    let io = |e| Error::io("<writer>", e);
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n").map_err(io)?;
    for s in scenes {
        w.write_all(scene_to_line(s)?.as_bytes()).map_err(io)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_canonical(path: impl AsRef<Path>, header: &CanonicalHeader, scenes: &[SceneRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_canonical_to(BufWriter::new(file), header, scenes).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Streaming reader over the scenes of a canonical file.
pub struct CanonicalReader<R> {
    lines: std::io::Lines<R>,
    line: usize,
    header: CanonicalHeader,
}

impl<R: BufRead> CanonicalReader<R> {
    pub fn new(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let first = match lines.next() {
            Some(l) => l.map_err(|e| Error::io("<reader>", e))?,
            None => {
                return Err(Error::Parse {
                    line: 1,
                    path: ".".into(),
                    message: "missing header line".into(),
                })
            }
        };
        let header: CanonicalHeader = decode(&first, 1)?;
        if header.format != FORMAT_NAME {
            return Err(Error::Parse {
                line: 1,
                path: "format".into(),
                message: format!("expected `{FORMAT_NAME}`, got `{}`", header.format),
            });
        }
        if header.version != FORMAT_VERSION {
            return Err(Error::Parse {
                line: 1,
                path: "version".into(),
                message: format!("unsupported version {}", header.version),
            });
        }
        Ok(Self { lines, line: 1, header })
    }

    pub fn header(&self) -> &CanonicalHeader {
        &self.header
    }
}

impl<R: BufRead> Iterator for CanonicalReader<R> {
    type Item = Result<SceneRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let raw = self.lines.next()?;
            self.line += 1;
            let text = match raw {
                Ok(t) => t,
                Err(e) => return Some(Err(Error::io("<reader>", e))),
            };
            if text.trim().is_empty() {
                continue;
            }
            return Some(scene_from_line(&text, self.line));
        }
    }
}

pub fn read_canonical_from<R: BufRead>(reader: R) -> Result<(CanonicalHeader, Vec<SceneRecord>)> {
    let r = CanonicalReader::new(reader)?;
    let header = r.header().clone();
    let scenes = r.collect::<Result<Vec<_>>>()?;
    Ok((header, scenes))
}

pub fn read_canonical(path: impl AsRef<Path>) -> Result<(CanonicalHeader, Vec<SceneRecord>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_canonical_from(BufReader::new(file))
}

/// A canonical file held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: CanonicalHeader,
    pub scenes: Vec<SceneRecord>,
}

impl Dataset {
    pub fn new(header: CanonicalHeader, scenes: Vec<SceneRecord>) -> Self {
        Self { header, scenes }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (header, scenes) = read_canonical(path)?;
        Ok(Self { header, scenes })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_canonical(path, &self.header, &self.scenes)
    }

    pub fn tag(&self) -> String {
        self.header.tag()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_scene() -> SceneRecord {
        let mut traj = ModalityTensor::empty(Modality::Traj, 3);
        traj.set(0, 0, Some(&[0.0, 1.0]));
        traj.set(2, 0, Some(&[0.1, 1.25]));
        let mut a = AgentTrack::new("7", traj);
        let mut pose = ModalityTensor::empty(Modality::Pose3d, 3);
        pose.set(1, 0, Some(&[0.5, 0.25, 1e-17]));
        a.pose3d = Some(pose);
        let mut b = ModalityTensor::empty(Modality::Box2d, 3);
        b.set(2, 0, Some(&[1.0, 2.0]));
        b.set(2, 1, Some(&[3.0, 4.0]));
        a.bbox2d = Some(b);
        a.img_wh = Some([640.0, 480.0]);
        SceneRecord {
            scene_id: "x".into(),
            fps: Fps::new(2.5).unwrap(),
            t_obs: 2,
            t_pred: 1,
            agents: vec![a],
        }
    }

    #[test]
    fn round_trip_preserves_nulls() {
        let s = tiny_scene();
        let line = scene_to_line(&s).unwrap();
        assert!(line.contains("\"traj\":[[0.0,1.0],null,[0.1,1.25]]"));
        assert!(line.contains("\"fps\":2.5"));
        let back = scene_from_line(&line, 2).unwrap();
        assert_eq!(back, s);
        assert!(!back.agents[0].traj.is_valid(1, 0));
    }

    #[test]
    fn empty_file_has_header() {
        let mut buf = Vec::new();
        let header = CanonicalHeader::new("synth", "train");
        write_canonical_to(&mut buf, &header, &[]).unwrap();
        let (h, scenes) = read_canonical_from(buf.as_slice()).unwrap();
        assert_eq!(h, header);
        assert!(scenes.is_empty());
        assert_eq!(h.tag(), "synth/train");
    }

    #[test]
    fn missing_fps_names_field_and_line() {
        let header = serde_json::to_string(&CanonicalHeader::new("d", "s")).unwrap();
        let good = scene_to_line(&tiny_scene()).unwrap();
        let bad = good.replace("\"fps\":2.5,", "");
        let text = format!("{header}\n{good}\n{bad}\n");
        match read_canonical_from(text.as_bytes()) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("fps"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_arity_reports_field_path() {
        let line = scene_to_line(&tiny_scene()).unwrap().replace("[0.1,1.25]", "[0.1]");
        match scene_from_line(&line, 5) {
            Err(Error::Parse { line, path, .. }) => {
                assert_eq!(line, 5);
                assert_eq!(path, "agents[0].traj[2][0]");
            }
            other => panic!("{other:?}"),
        }
        let line = scene_to_line(&tiny_scene()).unwrap().replace("\"t_obs\":2", "\"t_obs\":4");
        assert!(matches!(scene_from_line(&line, 2), Err(Error::Parse { .. })));
    }

    #[test]
    fn header_is_required() {
        assert!(read_canonical_from(&b""[..]).is_err());
        let line = scene_to_line(&tiny_scene()).unwrap();
        assert!(read_canonical_from(line.as_bytes()).is_err());
    }
}
