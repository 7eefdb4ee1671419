//! Frame-rate resampling, windowing and sample normalization.

use super::scene::{AgentTrack, Fps, FrameSettings, Modality, ModalityTensor, SceneRecord};
use super::vocab::joint;
use crate::error::{Error, Result};

/// Frame indices kept when downsampling `frames` by `stride`, always
/// including the last frame.
pub fn kept_indices(frames: usize, stride: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..frames).rev().step_by(stride.max(1)).collect();
    idx.reverse();
    idx
}

/// Downsamples a track by an integer stride, keeping the last frame.
pub fn resample(track: &ModalityTensor, src_fps: Fps, dst_fps: Fps) -> Result<ModalityTensor> {
    let stride = src_fps.stride_to(dst_fps)?;
    Ok(track.select_frames(&kept_indices(track.frames(), stride)))
}

/// Downsamples every track of a scene. The last observed frame must survive,
/// so the prediction length has to be a multiple of the stride.
pub fn resample_scene(scene: &SceneRecord, dst_fps: Fps) -> Result<SceneRecord> {
    let stride = scene.fps.stride_to(dst_fps)?;
    if scene.t_pred % stride != 0 {
        return Err(Error::UnsupportedRate(format!(
            "prediction length {} is not a multiple of stride {stride}",
            scene.t_pred
        )));
    }
    let idx = kept_indices(scene.frames(), stride);
    let t_pred = scene.t_pred / stride;
    Ok(SceneRecord {
        scene_id: scene.scene_id.clone(),
        fps: dst_fps,
        t_obs: idx.len() - t_pred,
        t_pred,
        agents: scene
            .agents
            .iter()
            .map(|a| a.map_tensors(|t| t.select_frames(&idx)))
            .collect(),
    })
}

/// Cuts a scene into sliding windows of `obs + pred` frames.
///
/// A scene shorter than one window yields no windows.
pub fn window(scene: &SceneRecord, settings: &FrameSettings, stride_frames: usize) -> Result<Vec<SceneRecord>> {
    if (scene.fps.get() - settings.fps.get()).abs() > 1e-9 {
        return Err(Error::contract(format!(
            "scene {} is at {} fps, window settings expect {} fps",
            scene.scene_id, scene.fps, settings.fps
        )));
    }
    if stride_frames == 0 {
        return Err(Error::contract("window stride must be at least one frame"));
    }
    let t_obs = settings.t_obs()?;
    let t_pred = settings.t_pred()?;
    let len = t_obs + t_pred;
    let total = scene.frames();
    if total < len {
        return Ok(Vec::new());
    }
    Ok((0..=total - len)
        .step_by(stride_frames)
        .map(|start| SceneRecord {
            scene_id: format!("{}@{start}", scene.scene_id),
            fps: scene.fps,
            t_obs,
            t_pred,
            agents: scene
                .agents
                .iter()
                .map(|a| a.map_tensors(|t| t.slice_frames(start, len)))
                .collect(),
        })
        .collect())
}

/// World-frame offset removed by [`normalize_sample`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub origin: [f64; 2],
}

impl Anchor {
    pub fn to_world(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0] + self.origin[0], p[1] + self.origin[1]]
    }
}

/// Expresses a window in the ego's frame.
///
/// The ego moves to agent index 0. Positions are translated so the ego's last
/// observed trajectory point is the origin, 3D poses become pelvis-relative
/// (frames without a pelvis are dropped), and image-space modalities are
/// scaled by the declared image size, which is then reset to 1×1.
pub fn normalize_sample(sample: &SceneRecord, ego_id: &str) -> Result<(SceneRecord, Anchor)> {
    let ego = sample
        .agents
        .iter()
        .position(|a| a.agent_id == ego_id)
        .ok_or_else(|| Error::Normalization(format!("no agent `{ego_id}` in {}", sample.scene_id)))?;
    if sample.t_obs == 0 {
        return Err(Error::Normalization("window has no observed frames".into()));
    }
    let last = sample.t_obs - 1;
    let anchor = sample.agents[ego].traj.get(last, 0).ok_or_else(|| {
        Error::Normalization(format!(
            "ego `{ego_id}` has no trajectory at the last observed frame of {}",
            sample.scene_id
        ))
    })?;
    let origin = [anchor[0], anchor[1]];

    let mut order = vec![ego];
    order.extend((0..sample.agents.len()).filter(|&i| i != ego));
    let agents = order
        .into_iter()
        .map(|i| normalize_agent(&sample.agents[i], origin))
        .collect::<Result<Vec<_>>>()?;

    Ok((
        SceneRecord {
            scene_id: sample.scene_id.clone(),
            fps: sample.fps,
            t_obs: sample.t_obs,
            t_pred: sample.t_pred,
            agents,
        },
        Anchor { origin },
    ))
}

fn normalize_agent(agent: &AgentTrack, origin: [f64; 2]) -> Result<AgentTrack> {
    let mut out = agent.clone();
    out.traj.map_valid(|_, _, c| {
        c[0] -= origin[0];
        c[1] -= origin[1];
    });
    if let Some(b) = out.bbox3d.as_mut() {
        b.map_valid(|_, _, c| {
            c[0] -= origin[0];
            c[1] -= origin[1];
        });
    }
    if let Some(p) = out.pose3d.as_mut() {
        *p = local_pose(p);
    }
    let has_image = out.bbox2d.is_some() || out.pose2d.is_some();
    if has_image {
        let [w, h] = out.img_wh.ok_or_else(|| {
            Error::Normalization(format!(
                "agent `{}` has image-space modalities but no image size",
                agent.agent_id
            ))
        })?;
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::Normalization(format!("image size {w}×{h} is not positive")));
        }
        for m in [Modality::Box2d, Modality::Pose2d] {
            if let Some(t) = out.get_mut(m) {
                t.map_valid(|_, _, c| {
                    c[0] /= w;
                    c[1] /= h;
                });
            }
        }
        out.img_wh = Some([1.0, 1.0]);
    }
    Ok(out)
}

fn local_pose(pose: &ModalityTensor) -> ModalityTensor {
    let mut out = pose.clone();
    for t in 0..pose.frames() {
        match pose.get(t, joint::PELVIS) {
            Some(p) => {
                let p = [p[0], p[1], p[2]];
                for e in 0..pose.elements() {
                    if let Some(c) = pose.get(t, e) {
                        out.set(t, e, Some(&[c[0] - p[0], c[1] - p[1], c[2] - p[2]]));
                    }
                }
            }
            None => {
                for e in 0..pose.elements() {
                    out.set(t, e, None);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_track(frames: usize) -> ModalityTensor {
        let values = (0..frames).flat_map(|t| [t as f64, 0.5 * t as f64]).collect();
        ModalityTensor::new(Modality::Traj, frames, values, vec![true; frames]).unwrap()
    }

    fn fps(v: f64) -> Fps {
        Fps::new(v).unwrap()
    }

    #[test]
    fn resample_keeps_last_frame() {
        let t = line_track(50);
        let r = resample(&t, fps(50.0), fps(5.0)).unwrap();
        let kept: Vec<f64> = (0..r.frames()).map(|i| r.get(i, 0).unwrap()[0]).collect();
        assert_eq!(kept, vec![9.0, 19.0, 29.0, 39.0, 49.0]);
        assert_eq!(resample(&t, fps(25.0), fps(25.0)).unwrap(), t);
        assert!(matches!(
            resample(&t, fps(25.0), fps(10.0)),
            Err(Error::UnsupportedRate(_))
        ));
    }

    #[test]
    fn resample_strides_compose() {
        let t = line_track(137);
        let two_step = resample(&resample(&t, fps(50.0), fps(10.0)).unwrap(), fps(10.0), fps(5.0)).unwrap();
        assert_eq!(two_step, resample(&t, fps(50.0), fps(5.0)).unwrap());
    }

    fn scene(frames: usize) -> SceneRecord {
        SceneRecord {
            scene_id: "s".into(),
            fps: fps(5.0),
            t_obs: frames,
            t_pred: 0,
            agents: vec![AgentTrack::new("a", line_track(frames))],
        }
    }

    #[test]
    fn window_counts() {
        let settings = FrameSettings::default();
        assert_eq!(window(&scene(60), &settings, 30).unwrap().len(), 2);
        assert!(window(&scene(29), &settings, 30).unwrap().is_empty());
        let w = window(&scene(90), &settings, 10).unwrap();
        assert_eq!(w.len(), 7);
        assert!(w.iter().all(|s| s.t_obs == 10 && s.t_pred == 20 && s.frames() == 30));
        assert_eq!(w[6].agents[0].traj.get(0, 0).unwrap()[0], 60.0);
    }

    #[test]
    fn window_rejects_rate_mismatch() {
        let settings = FrameSettings::new(2.0, 4.0, 2.5).unwrap();
        assert!(window(&scene(60), &settings, 1).is_err());
    }

    #[test]
    fn resample_scene_tracks_horizons() {
        let mut s = scene(60);
        s.fps = fps(10.0);
        s.t_obs = 20;
        s.t_pred = 40;
        let r = resample_scene(&s, fps(5.0)).unwrap();
        assert_eq!((r.t_obs, r.t_pred), (10, 20));
        // last observed frame (index 19) survives as index 9
        assert_eq!(r.agents[0].traj.get(9, 0).unwrap()[0], 19.0);
    }

    #[test]
    fn normalization_anchors_ego() {
        let mut s = scene(30);
        s.t_obs = 10;
        s.t_pred = 20;
        let mut other = AgentTrack::new("b", line_track(30));
        let mut pose = ModalityTensor::empty(Modality::Pose3d, 30);
        for t in 0..30 {
            pose.set(t, joint::PELVIS, Some(&[1.0, 2.0, 0.9]));
            pose.set(t, joint::NECK, Some(&[1.0, 2.0, 1.5]));
        }
        pose.set(3, joint::PELVIS, None);
        other.pose3d = Some(pose);
        s.agents.push(other);

        let (n, anchor) = normalize_sample(&s, "b").unwrap();
        assert_eq!(n.agents[0].agent_id, "b");
        assert_eq!(anchor.origin, [9.0, 4.5]);
        assert_eq!(n.agents[0].traj.get(9, 0).unwrap(), &[0.0, 0.0]);
        let p = n.agents[0].pose3d.as_ref().unwrap();
        assert_eq!(p.get(0, joint::PELVIS).unwrap(), &[0.0, 0.0, 0.0]);
        assert!((p.get(0, joint::NECK).unwrap()[2] - 0.6).abs() < 1e-12);
        assert_eq!(p.get(3, joint::NECK), None);

        let (twice, _) = normalize_sample(&n, "b").unwrap();
        assert_eq!(twice, n);
    }

    #[test]
    fn normalization_needs_anchor() {
        let mut s = scene(30);
        s.t_obs = 10;
        s.t_pred = 20;
        s.agents[0].traj.set(9, 0, None);
        assert!(matches!(normalize_sample(&s, "a"), Err(Error::Normalization(_))));
        assert!(normalize_sample(&s, "zz").is_err());
    }

    #[test]
    fn image_space_scaling() {
        let mut s = scene(2);
        s.t_obs = 1;
        s.t_pred = 1;
        let b = ModalityTensor::new(Modality::Box2d, 2, vec![100.0, 50.0, 200.0, 100.0, 0.0, 0.0, 400.0, 200.0], vec![true; 4]).unwrap();
        s.agents[0].bbox2d = Some(b);
        assert!(normalize_sample(&s, "a").is_err());
        s.agents[0].img_wh = Some([400.0, 200.0]);
        let (n, _) = normalize_sample(&s, "a").unwrap();
        assert_eq!(n.agents[0].bbox2d.as_ref().unwrap().get(0, 1).unwrap(), &[0.5, 0.5]);
        assert_eq!(normalize_sample(&n, "a").unwrap().0, n);
    }
}
