//! Raw scenes to normalized training samples: resampling, velocities,
//! sliding windows, neighbor selection, ego-frame transforms, map crops.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{
    AgentClass, AgentState, Neighbor, Scene, SemanticMask, Trajectory, TrajectorySample, CROP_CELLS, CROP_METERS, DT,
    HISTORY_LEN, HORIZON, NEIGHBOR_RADIUS, TARGET_FPS, WINDOW_LEN,
};

/// Keeps every `src_fps / 2.5`-th frame (frames counted from 0) and
/// rewrites timestamps onto the 0.4 s grid.
pub fn resample(traj: &Trajectory, src_fps: f64) -> Result<Trajectory> {
    let ratio = src_fps / TARGET_FPS;
    let k = ratio.round();
    if src_fps < TARGET_FPS || (ratio - k).abs() > 1e-9 || k < 1.0 {
        return Err(Error::NonIntegerDecimation { src_fps });
    }
    let k = k as i64;
    let states = traj
        .states()
        .iter()
        .filter_map(|s| {
            let frame = (s.t * src_fps).round() as i64;
            (frame.rem_euclid(k) == 0).then(|| AgentState { t: (frame / k) as f64 * DT, ..*s })
        })
        .collect();
    Trajectory::new(traj.agent_id.clone(), traj.cls, states)
}

/// Forward differences; the last state repeats the previous velocity.
pub fn derive_velocities(traj: &Trajectory) -> Result<Trajectory> {
    let s = traj.states();
    if s.len() < 2 {
        return Err(Error::TooShort { len: s.len(), needed: 2 });
    }
    let mut out = s.to_vec();
    for i in 0..s.len() - 1 {
        let dt = s[i + 1].t - s[i].t;
        out[i].vx = (s[i + 1].x - s[i].x) / dt;
        out[i].vy = (s[i + 1].y - s[i].y) / dt;
    }
    let n = s.len();
    out[n - 1].vx = out[n - 2].vx;
    out[n - 1].vy = out[n - 2].vy;
    Trajectory::new(traj.agent_id.clone(), traj.cls, out)
}

/// Resamples every trajectory to 2.5 Hz and derives velocities; agents
/// left with fewer than two states are dropped.
pub fn prepare_scene(scene: &Scene) -> Result<Scene> {
    let mut trajectories = Vec::with_capacity(scene.trajectories.len());
    for tr in &scene.trajectories {
        let r = resample(tr, scene.fps)?;
        if r.len() >= 2 {
            trajectories.push(derive_velocities(&r)?);
        }
    }
    Ok(Scene { scene_id: scene.scene_id.clone(), fps: TARGET_FPS, mask: scene.mask.clone(), trajectories })
}

/// Expresses `state` relative to `ego`: translated to the ego position and
/// rotated so the ego heading is +x. Velocity is the rotated difference.
/// Below 1e-6 m/s ego speed the rotation is the identity.
pub fn to_ego_frame(state: &AgentState, ego: &AgentState) -> AgentState {
    let speed = ego.vx.hypot(ego.vy);
    let (c, s) = if speed < 1e-6 { (1.0, 0.0) } else { (ego.vx / speed, ego.vy / speed) };
    let rot = |x: f64, y: f64| (c * x + s * y, -s * x + c * y);
    let (x, y) = rot(state.x - ego.x, state.y - ego.y);
    let (vx, vy) = rot(state.vx - ego.vx, state.vy - ego.vy);
    AgentState { x, y, vx, vy, t: state.t }
}

/// Every other agent that comes within the neighbor radius of the ego at
/// some history step, expressed in the ego frame of each step.
pub fn select_neighbors(ego_id: &str, ego_history: &[AgentState], scene: &Scene) -> Vec<Neighbor> {
    let steps: Vec<Option<i64>> = ego_history.iter().map(AgentState::step_index).collect();
    let mut out = Vec::new();
    for tr in &scene.trajectories {
        if tr.agent_id == ego_id {
            continue;
        }
        let states: Vec<Option<AgentState>> = ego_history
            .iter()
            .zip(&steps)
            .map(|(ego, step)| {
                let other = tr.state_at_step((*step)?)?;
                (other.distance_to(ego) <= NEIGHBOR_RADIUS).then(|| to_ego_frame(other, ego))
            })
            .collect();
        if states.iter().any(Option::is_some) {
            out.push(Neighbor { agent_id: tr.agent_id.clone(), cls: tr.cls, states });
        }
    }
    out
}

/// World-axis-aligned 10 m square around `center`, resampled (nearest cell)
/// to 64x64. Cells outside the source are class 0.
pub fn crop_map(mask: &SemanticMask, center: [f64; 2]) -> SemanticMask {
    let cell = CROP_METERS / CROP_CELLS as f64;
    let origin = [center[0] - CROP_METERS / 2.0, center[1] - CROP_METERS / 2.0];
    let mut grid = vec![0u8; CROP_CELLS * CROP_CELLS];
    for row in 0..CROP_CELLS {
        for col in 0..CROP_CELLS {
            let p = [origin[0] + (col as f64 + 0.5) * cell, origin[1] + (row as f64 + 0.5) * cell];
            grid[row * CROP_CELLS + col] = mask.class_at(p).unwrap_or(0);
        }
    }
    SemanticMask::new(CROP_CELLS, CROP_CELLS, grid, cell, origin).expect("crop is well formed")
}

/// One sample per pedestrian per complete 20-step window (stride 1).
/// Expects a scene already passed through [`prepare_scene`].
pub fn window_samples(scene: &Scene) -> Vec<TrajectorySample> {
    let mut out = Vec::new();
    for tr in scene.trajectories.iter().filter(|t| t.cls == AgentClass::Pedestrian) {
        let states = tr.states();
        if states.len() < WINDOW_LEN {
            continue;
        }
        let steps: Vec<Option<i64>> = states.iter().map(AgentState::step_index).collect();
        for start in 0..=states.len() - WINDOW_LEN {
            let window = &steps[start..start + WINDOW_LEN];
            let Some(first) = window[0] else { continue };
            let contiguous = window.iter().enumerate().all(|(i, s)| *s == Some(first + i as i64));
            if !contiguous {
                continue;
            }
            let ego = states[start..start + HISTORY_LEN].to_vec();
            let future = states[start + HISTORY_LEN..start + WINDOW_LEN].to_vec();
            let last = ego[HISTORY_LEN - 1];
            let center = last.position();
            out.push(TrajectorySample {
                sample_id: format!("{}:{}:{}", scene.scene_id, tr.agent_id, first),
                neighbors: select_neighbors(&tr.agent_id, &ego, scene),
                map_patch: crop_map(&scene.mask, center),
                goal: future[HORIZON - 1].position(),
                center,
                ego,
                future,
                ego_cls: tr.cls,
                normalized: false,
            });
        }
    }
    out
}

/// Divisors applied after centering; fitted on the training split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub pos_scale: f64,
    pub vel_scale: f64,
}

impl Default for NormStats {
    fn default() -> Self {
        NormStats { pos_scale: 1.0, vel_scale: 1.0 }
    }
}

impl NormStats {
    pub fn new(pos_scale: f64, vel_scale: f64) -> Result<Self> {
        if !(pos_scale > 0.0 && vel_scale > 0.0 && pos_scale.is_finite() && vel_scale.is_finite()) {
            return Err(Error::Invalid(format!("normalization scales must be positive, got {pos_scale}, {vel_scale}")));
        }
        Ok(NormStats { pos_scale, vel_scale })
    }

    /// Standard deviation of centered ego positions and of velocity
    /// components, pooled over both axes. Degenerate spreads fall back to 1.
    pub fn fit(samples: &[TrajectorySample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut pos = Vec::new();
        let mut vel = Vec::new();
        for s in samples {
            for st in s.ego.iter().chain(&s.future) {
                pos.push(st.x - s.center[0]);
                pos.push(st.y - s.center[1]);
                vel.push(st.vx);
                vel.push(st.vy);
            }
        }
        let std = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let sd = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt();
            if sd > 1e-6 {
                sd
            } else {
                1.0
            }
        };
        NormStats::new(std(&pos), std(&vel))
    }
}

fn map_states(sample: &TrajectorySample, fp: impl Fn(f64, f64) -> (f64, f64), fv: impl Fn(f64) -> f64, nbr_p: impl Fn(f64) -> f64) -> TrajectorySample {
    let ego_map = |s: &AgentState| {
        let (x, y) = fp(s.x, s.y);
        AgentState { x, y, vx: fv(s.vx), vy: fv(s.vy), t: s.t }
    };
    let mut out = sample.clone();
    out.ego = sample.ego.iter().map(ego_map).collect();
    out.future = sample.future.iter().map(ego_map).collect();
    let (gx, gy) = fp(sample.goal[0], sample.goal[1]);
    out.goal = [gx, gy];
    for n in &mut out.neighbors {
        for s in n.states.iter_mut().flatten() {
            *s = AgentState { x: nbr_p(s.x), y: nbr_p(s.y), vx: fv(s.vx), vy: fv(s.vy), t: s.t };
        }
    }
    out
}

/// Centers on the last observed position and divides by the scales.
/// Neighbor states are already ego-relative and are only scaled.
pub fn normalize(sample: &TrajectorySample, stats: &NormStats) -> TrajectorySample {
    assert!(!sample.normalized, "sample {} is already normalized", sample.sample_id);
    let c = sample.center;
    let (ps, vs) = (stats.pos_scale, stats.vel_scale);
    let mut out = map_states(sample, |x, y| ((x - c[0]) / ps, (y - c[1]) / ps), |v| v / vs, |p| p / ps);
    out.goal = out.future[HORIZON - 1].position();
    out.normalized = true;
    out
}

pub fn denormalize(sample: &TrajectorySample, stats: &NormStats) -> TrajectorySample {
    assert!(sample.normalized, "sample {} is not normalized", sample.sample_id);
    let c = sample.center;
    let (ps, vs) = (stats.pos_scale, stats.vel_scale);
    let mut out = map_states(sample, |x, y| (x * ps + c[0], y * ps + c[1]), |v| v * vs, |p| p * ps);
    out.goal = out.future[HORIZON - 1].position();
    out.normalized = false;
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(points: &[(f64, f64)], fps: f64) -> Trajectory {
        let states = points.iter().enumerate().map(|(i, &(x, y))| AgentState::at(x, y, i as f64 / fps)).collect();
        Trajectory::new("a", AgentClass::Pedestrian, states).unwrap()
    }

    #[test]
    fn resample_25hz_keeps_every_tenth() {
        let pts: Vec<_> = (0..250).map(|i| (i as f64 * 0.05, 0.0)).collect();
        let r = resample(&traj(&pts, 25.0), 25.0).unwrap();
        assert_eq!(r.len(), 25);
        for (k, s) in r.states().iter().enumerate() {
            assert!((s.t - k as f64 * DT).abs() < 1e-12);
            assert!((s.x - k as f64 * 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn resample_identity_and_rejection() {
        let t = traj(&[(0.0, 0.0), (1.0, 1.0), (2.0, 0.5)], 2.5);
        assert_eq!(resample(&t, 2.5).unwrap(), t);
        assert!(matches!(resample(&t, 24.0), Err(Error::NonIntegerDecimation { .. })));
        assert!(matches!(resample(&t, 1.0), Err(Error::NonIntegerDecimation { .. })));
    }

    #[test]
    fn velocity_examples() {
        let v = derive_velocities(&traj(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)], 2.5)).unwrap();
        assert!(v.states().iter().all(|s| (s.vx - 2.5).abs() < 1e-12 && s.vy == 0.0));
        let v = derive_velocities(&traj(&[(3.0, 3.0); 4], 2.5)).unwrap();
        assert!(v.states().iter().all(|s| s.vx == 0.0 && s.vy == 0.0));
        let v = derive_velocities(&traj(&[(0.0, 0.0), (0.0, 2.0)], 2.5)).unwrap();
        assert!((v.states()[0].vy - 5.0).abs() < 1e-12);
        assert!(matches!(derive_velocities(&traj(&[(0.0, 0.0)], 2.5)), Err(Error::TooShort { .. })));
    }

    #[test]
    fn ego_frame_examples() {
        let ego = AgentState::new(0.0, 0.0, 1.0, 0.0, 0.0);
        let n = to_ego_frame(&AgentState::new(3.0, 0.0, 0.0, 0.0, 0.0), &ego);
        assert!((n.x - 3.0).abs() < 1e-12 && n.y.abs() < 1e-12);

        let ego = AgentState::new(2.0, 5.0, 0.5, 0.5, 0.0);
        let same = to_ego_frame(&AgentState::new(2.0, 5.0, 1.5, 0.5, 0.0), &ego);
        assert!(same.x.abs() < 1e-12 && same.y.abs() < 1e-12);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((same.vx - s).abs() < 1e-12 && (same.vy + s).abs() < 1e-12);

        let ego = AgentState::new(0.0, 0.0, 0.0, 1.3, 0.0);
        let n = to_ego_frame(&AgentState::new(2.0, 0.0, 0.0, 0.0, 0.0), &ego);
        assert!(n.x.abs() < 1e-12 && (n.y + 2.0).abs() < 1e-12);

        let still = AgentState::new(1.0, 1.0, 0.0, 0.0, 0.0);
        let n = to_ego_frame(&AgentState::new(2.0, 3.0, 0.0, 0.0, 0.0), &still);
        assert_eq!((n.x, n.y), (1.0, 2.0));
    }

    fn scene_with(trajs: Vec<Trajectory>) -> Scene {
        Scene {
            scene_id: "s".into(),
            fps: TARGET_FPS,
            mask: SemanticMask::uniform(100, 100, 3, 0.5, [-25.0, -25.0]).unwrap(),
            trajectories: trajs,
        }
    }

    fn line(id: &str, cls: AgentClass, n: usize, f: impl Fn(usize) -> (f64, f64)) -> Trajectory {
        let states = (0..n)
            .map(|k| {
                let (x, y) = f(k);
                AgentState::at(x, y, k as f64 * DT)
            })
            .collect();
        derive_velocities(&Trajectory::new(id, cls, states).unwrap()).unwrap()
    }

    #[test]
    fn neighbor_threshold_examples() {
        let ego = line("ego", AgentClass::Pedestrian, 8, |k| (k as f64 * 0.5, 0.0));
        let near = line("near", AgentClass::Car, 8, |k| (k as f64 * 0.5, 14.9));
        let far = line("far", AgentClass::Car, 8, |k| (k as f64 * 0.5, 15.1));
        // Distance 16 m for steps 0..5, then 10 m.
        let cross = line("cross", AgentClass::Bicycle, 8, |k| (k as f64 * 0.5, if k < 5 { 16.0 } else { 10.0 }));
        let scene = scene_with(vec![ego.clone(), near, far, cross]);
        let nbrs = select_neighbors("ego", ego.states(), &scene);
        let by_id = |id: &str| nbrs.iter().find(|n| n.agent_id == id);
        assert_eq!(by_id("near").unwrap().present_steps(), 8);
        assert!(by_id("far").is_none());
        let cross = by_id("cross").unwrap();
        let present: Vec<bool> = cross.states.iter().map(Option::is_some).collect();
        assert_eq!(present, vec![false, false, false, false, false, true, true, true]);
    }

    #[test]
    fn window_count_law_and_pedestrian_only() {
        let ped20 = line("p20", AgentClass::Pedestrian, 20, |k| (k as f64, 0.0));
        let ped25 = line("p25", AgentClass::Pedestrian, 25, |k| (k as f64, 5.0));
        let car = line("car", AgentClass::Car, 25, |k| (k as f64, 9.0));
        let samples = window_samples(&scene_with(vec![ped20, ped25, car.clone()]));
        assert_eq!(samples.iter().filter(|s| s.sample_id.contains(":p20:")).count(), 1);
        assert_eq!(samples.iter().filter(|s| s.sample_id.contains(":p25:")).count(), 6);
        assert!(window_samples(&scene_with(vec![car])).is_empty());
        for s in &samples {
            s.validate().unwrap();
            assert_eq!(s.goal, s.future[HORIZON - 1].position());
            assert!(s.neighbors.iter().any(|n| n.cls == AgentClass::Car));
        }
    }

    #[test]
    fn windows_skip_gaps() {
        let mut states: Vec<AgentState> = (0..22).map(|k| AgentState::at(k as f64, 0.0, k as f64 * DT)).collect();
        states.remove(10);
        let tr = derive_velocities(&Trajectory::new("g", AgentClass::Pedestrian, states).unwrap()).unwrap();
        assert!(window_samples(&scene_with(vec![tr])).is_empty());
    }

    #[test]
    fn crop_examples() {
        let uniform = SemanticMask::uniform(200, 200, 3, 0.25, [0.0, 0.0]).unwrap();
        let c = crop_map(&uniform, [25.0, 25.0]);
        assert_eq!((c.width, c.height), (64, 64));
        assert!(c.grid().iter().all(|&v| v == 3));

        let corner = crop_map(&uniform, [0.0, 0.0]);
        let inside = corner.grid().iter().filter(|&&v| v == 3).count();
        assert_eq!(inside, 32 * 32);
        assert_eq!(corner.get(40, 40), 3);
        assert_eq!(corner.get(10, 10), 0);
        assert_eq!(corner.get(40, 10), 0);

        // 0.25 m source cells: 40 source cells span the crop; each output
        // cell takes the source cell containing its center.
        let mut stripes = SemanticMask::uniform(200, 200, 0, 0.25, [0.0, 0.0]).unwrap();
        for row in 0..200 {
            for col in 0..200 {
                stripes.set(col, row, (col % 5) as u8 + 1);
            }
        }
        let crop = crop_map(&stripes, [25.0, 25.0]);
        let cell = 10.0 / 64.0;
        let mut distinct_cols = std::collections::BTreeSet::new();
        for col in 0..64 {
            let x = 20.0 + (col as f64 + 0.5) * cell;
            let src_col = (x / 0.25).floor() as usize;
            distinct_cols.insert(src_col);
            assert_eq!(crop.get(col, 7), (src_col % 5) as u8 + 1);
        }
        assert_eq!(distinct_cols.len(), 40);
    }

    #[test]
    fn normalization_examples() {
        let tr = line("p", AgentClass::Pedestrian, 20, |k| (k as f64 * 0.4 + 3.0, -2.0 + 0.1 * k as f64));
        let s = &window_samples(&scene_with(vec![tr]))[0];
        let stats = NormStats::new(2.0, 1.5).unwrap();
        let n = normalize(s, &stats);
        assert_eq!(n.last_observed().position(), [0.0, 0.0]);
        let back = denormalize(&n, &stats);
        for (a, b) in back.future.iter().zip(&s.future) {
            assert!((a.x - b.x).abs() <= 1e-9 * b.x.abs().max(1.0));
            assert!((a.vy - b.vy).abs() <= 1e-9 * b.vy.abs().max(1.0));
        }
        let p = s.future[0].position();
        let dist = (p[0] - s.center[0]).hypot(p[1] - s.center[1]);
        let np = n.future[0].position();
        assert!((np[0].hypot(np[1]) - dist / 2.0).abs() < 1e-12);
        assert!(NormStats::new(0.0, 1.0).is_err());
    }
}
