//! Text formats: trajectory CSV, semantic-mask grid, prediction CSV and
//! JSON-lines sample archives.
//!
//! Trajectory CSV:
//!
//! ```text
//! # fps=25 scene=s0 scale=0.25 origin_x=0 origin_y=0
//! frame,agent_id,class,x,y
//! ```
//!
//! The mask for `scene.csv` lives next to it as `scene.mask`: the same
//! metadata line, then `P2`, `W H`, the max class value, and `W*H` ids.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::types::{
    AgentClass, AgentState, Point, PredictedTrajectory, PredictionSet, Scene, SemanticMask, Trajectory,
    TrajectorySample, NUM_MAP_CLASSES,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneFormat {
    Csv,
}

#[derive(Clone, Debug, PartialEq)]
struct Header {
    fps: f64,
    scene: String,
    scale: f64,
    origin: Point,
}

fn parse_header(path: &Path, line: &str) -> Result<Header> {
    let body = line.trim_start_matches('#').trim();
    let mut kv = BTreeMap::new();
    for tok in body.split_whitespace() {
        if let Some((k, v)) = tok.split_once('=') {
            kv.insert(k.to_string(), v.to_string());
        }
    }
    let num = |key: &str, default: Option<f64>| -> Result<f64> {
        match kv.get(key) {
            Some(v) => v.parse::<f64>().map_err(|_| Error::MalformedRow {
                path: path.to_path_buf(),
                line: 1,
                reason: format!("header field {key}={v} is not a number"),
            }),
            None => default.ok_or_else(|| Error::MalformedRow {
                path: path.to_path_buf(),
                line: 1,
                reason: format!("header lacks `{key}`"),
            }),
        }
    };
    Ok(Header {
        fps: num("fps", None)?,
        scene: kv.get("scene").cloned().unwrap_or_else(|| "scene".to_string()),
        scale: num("scale", Some(1.0))?,
        origin: [num("origin_x", Some(0.0))?, num("origin_y", Some(0.0))?],
    })
}

fn header_line(h: &Header) -> String {
    format!("# fps={} scene={} scale={} origin_x={} origin_y={}", h.fps, h.scene, h.scale, h.origin[0], h.origin[1])
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn mask_path_for(csv: &Path) -> PathBuf {
    csv.with_extension("mask")
}

/// Reads a scene CSV (and its sibling mask, if any). Velocities are left at
/// zero; `preprocess::derive_velocities` fills them.
pub fn load_scene(path: &Path, format: SceneFormat) -> Result<Scene> {
    let SceneFormat::Csv = format;
    let text = read(path)?;
    let mut lines = text.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((_, l)) if l.starts_with('#') => break parse_header(path, l)?,
            _ => {
                return Err(Error::MalformedRow {
                    path: path.to_path_buf(),
                    line: 1,
                    reason: "missing `# fps=...` header".into(),
                })
            }
        }
    };
    if !(header.fps > 0.0) {
        return Err(Error::MalformedRow { path: path.to_path_buf(), line: 1, reason: "fps must be positive".into() });
    }
    let mut rows: BTreeMap<String, (AgentClass, Vec<(i64, f64, f64)>)> = BTreeMap::new();
    for (i, raw) in lines {
        let line = i + 1;
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') || l.starts_with("frame,") {
            continue;
        }
        let cols: Vec<&str> = l.split(',').map(str::trim).collect();
        let malformed = |reason: String| Error::MalformedRow { path: path.to_path_buf(), line, reason };
        if cols.len() != 5 {
            return Err(malformed(format!("expected 5 columns, found {}", cols.len())));
        }
        let frame: i64 = cols[0].parse().map_err(|_| malformed(format!("frame {:?} is not an integer", cols[0])))?;
        let cls: AgentClass = cols[2]
            .parse()
            .map_err(|c| Error::UnknownClass { path: path.to_path_buf(), line, class: c })?;
        let x: f64 = cols[3].parse().map_err(|_| malformed(format!("x {:?} is not numeric", cols[3])))?;
        let y: f64 = cols[4].parse().map_err(|_| malformed(format!("y {:?} is not numeric", cols[4])))?;
        if !x.is_finite() || !y.is_finite() {
            return Err(malformed("non-finite coordinate".into()));
        }
        let entry = rows.entry(cols[1].to_string()).or_insert_with(|| (cls, Vec::new()));
        if entry.0 != cls {
            return Err(malformed(format!("agent {} changes class", cols[1])));
        }
        entry.1.push((frame, x, y));
    }
    let mut trajectories = Vec::with_capacity(rows.len());
    for (agent, (cls, mut pts)) in rows {
        pts.sort_by_key(|p| p.0);
        if let Some(w) = pts.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::NonMonotonicFrames { agent, frame: w[1].0 });
        }
        let states = pts.iter().map(|&(f, x, y)| AgentState::at(x, y, f as f64 / header.fps)).collect();
        trajectories.push(Trajectory::new(agent, cls, states)?);
    }
    let mask_path = mask_path_for(path);
    let mask = if mask_path.exists() {
        load_mask(&mask_path)?
    } else {
        SemanticMask::uniform(1, 1, 0, header.scale, header.origin)?
    };
    Ok(Scene { scene_id: header.scene, fps: header.fps, mask, trajectories })
}

/// Writes `scene` as CSV plus its sibling `.mask` file.
pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    let header = Header {
        fps: scene.fps,
        scene: scene.scene_id.clone(),
        scale: scene.mask.scale,
        origin: scene.mask.origin,
    };
    let mut out = header_line(&header);
    out.push_str("\nframe,agent_id,class,x,y\n");
    for tr in &scene.trajectories {
        for s in tr.states() {
            let frame = (s.t * scene.fps).round() as i64;
            let _ = writeln!(out, "{frame},{},{},{},{}", tr.agent_id, tr.cls, s.x, s.y);
        }
    }
    write(path, &out)?;
    save_mask(&scene.mask, &scene.scene_id, scene.fps, &mask_path_for(path))
}

pub fn save_mask(mask: &SemanticMask, scene_id: &str, fps: f64, path: &Path) -> Result<()> {
    let header = Header { fps, scene: scene_id.to_string(), scale: mask.scale, origin: mask.origin };
    let mut out = header_line(&header);
    let _ = write!(out, "\nP2\n{} {}\n{}\n", mask.width, mask.height, NUM_MAP_CLASSES - 1);
    for row in 0..mask.height {
        let line: Vec<String> = (0..mask.width).map(|c| mask.get(c, row).to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    write(path, &out)
}

pub fn load_mask(path: &Path) -> Result<SemanticMask> {
    let text = read(path)?;
    let bad = |reason: &str| Error::MalformedRow { path: path.to_path_buf(), line: 0, reason: reason.to_string() };
    let mut header = None;
    let mut tokens = Vec::new();
    for l in text.lines() {
        let l = l.trim();
        if l.starts_with('#') {
            if header.is_none() {
                header = Some(parse_header(path, l)?);
            }
            continue;
        }
        tokens.extend(l.split_whitespace());
    }
    let header = header.ok_or_else(|| bad("mask lacks metadata header"))?;
    let mut it = tokens.into_iter();
    if it.next() != Some("P2") {
        return Err(bad("mask must start with P2"));
    }
    let mut next_num = |what: &str| -> Result<usize> {
        it.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad(&format!("bad or missing {what}")))
    };
    let w = next_num("width")?;
    let h = next_num("height")?;
    let _max = next_num("max value")?;
    let mut grid = Vec::with_capacity(w * h);
    for _ in 0..w * h {
        let v = next_num("cell")?;
        if v >= NUM_MAP_CLASSES {
            return Err(bad(&format!("cell class {v} out of range")));
        }
        grid.push(v as u8);
    }
    SemanticMask::new(w, h, grid, header.scale, header.origin)
}

/// Writes one or more prediction sets. Each set starts with a
/// `# sample=<id>` line, followed by `sample_k,step,x,y` rows and
/// `goal,sample_k,x,y` rows.
pub fn save_predictions(preds: &[PredictionSet], path: &Path) -> Result<()> {
    let mut out = String::new();
    for p in preds {
        let _ = writeln!(out, "# sample={}", p.sample_id);
        for (k, tr) in p.trajectories.iter().enumerate() {
            for (step, pos) in tr.positions.iter().enumerate() {
                let _ = writeln!(out, "{k},{step},{},{}", pos[0], pos[1]);
            }
        }
        for (k, g) in p.goals.iter().enumerate() {
            let _ = writeln!(out, "goal,{k},{},{}", g[0], g[1]);
        }
    }
    write(path, &out)
}

/// Reads prediction sets written by [`save_predictions`]. The file carries
/// positions and goals only; velocities and latent draws come back empty.
pub fn load_predictions(path: &Path) -> Result<Vec<PredictionSet>> {
    let text = read(path)?;
    let mut sets: Vec<PredictionSet> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim();
        if l.is_empty() {
            continue;
        }
        let malformed = |reason: &str| Error::MalformedRow { path: path.to_path_buf(), line, reason: reason.into() };
        if let Some(rest) = l.strip_prefix('#') {
            let id = rest.trim().strip_prefix("sample=").ok_or_else(|| malformed("expected `# sample=<id>`"))?;
            sets.push(PredictionSet {
                sample_id: id.to_string(),
                trajectories: Vec::new(),
                goals: Vec::new(),
                z_goal: Vec::new(),
                z_waypoint: Vec::new(),
            });
            continue;
        }
        let set = sets.last_mut().ok_or_else(|| malformed("row before any `# sample=` line"))?;
        let cols: Vec<&str> = l.split(',').map(str::trim).collect();
        if cols.len() != 4 {
            return Err(malformed("expected 4 columns"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| malformed("non-numeric coordinate"));
        let idx = |s: &str| s.parse::<usize>().map_err(|_| malformed("bad index"));
        if cols[0] == "goal" {
            let k = idx(cols[1])?;
            if k != set.goals.len() {
                return Err(malformed("goal rows out of order"));
            }
            set.goals.push([num(cols[2])?, num(cols[3])?]);
        } else {
            let k = idx(cols[0])?;
            let step = idx(cols[1])?;
            if k == set.trajectories.len() && step == 0 {
                set.trajectories.push(PredictedTrajectory { positions: Vec::new(), velocities: Vec::new() });
            }
            let tr = set.trajectories.get_mut(k).ok_or_else(|| malformed("sample index out of order"))?;
            if tr.positions.len() != step {
                return Err(malformed("step rows out of order"));
            }
            tr.positions.push([num(cols[2])?, num(cols[3])?]);
        }
    }
    Ok(sets)
}

pub fn save_samples(samples: &[TrajectorySample], path: &Path) -> Result<()> {
    let mut out = String::new();
    for s in samples {
        let line = serde_json::to_string(s).map_err(|e| Error::Invalid(e.to_string()))?;
        out.push_str(&line);
        out.push('\n');
    }
    write(path, &out)
}

pub fn load_samples(path: &Path) -> Result<Vec<TrajectorySample>> {
    let text = read(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::MalformedRow {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(dir: &tempfile::TempDir, name: &str, text: &str) -> PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn loads_single_agent() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(&dir, "a.csv", "# fps=25 scene=x\n0,a,pedestrian,0,0\n10,a,pedestrian,1,0\n20,a,pedestrian,2,0\n");
        let s = load_scene(&p, SceneFormat::Csv).unwrap();
        assert_eq!(s.trajectories.len(), 1);
        assert_eq!(s.trajectories[0].len(), 3);
        assert!((s.trajectories[0].states()[1].t - 0.4).abs() < 1e-12);
    }

    #[test]
    fn groups_interleaved_agents_and_sorts_frames() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(
            &dir,
            "b.csv",
            "# fps=2.5 scene=x\nframe,agent_id,class,x,y\n1,a,pedestrian,1,0\n0,b,car,5,5\n0,a,pedestrian,0,0\n1,b,car,6,5\n",
        );
        let s = load_scene(&p, SceneFormat::Csv).unwrap();
        assert_eq!(s.trajectories.len(), 2);
        for tr in &s.trajectories {
            assert_eq!(tr.len(), 2);
            assert!(tr.states()[0].t < tr.states()[1].t);
        }
    }

    #[test]
    fn unknown_class_names_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(&dir, "c.csv", "# fps=25\n0,a,pedestrian,0,0\n1,h,horse,0,0\n");
        match load_scene(&p, SceneFormat::Csv) {
            Err(Error::UnknownClass { line, class, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(class, "horse");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_and_duplicate_rows_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(&dir, "d.csv", "# fps=25\n0,a,pedestrian,0\n");
        assert!(matches!(load_scene(&p, SceneFormat::Csv), Err(Error::MalformedRow { .. })));
        let p = write_tmp(&dir, "e.csv", "# fps=25\n0,a,pedestrian,zero,0\n");
        assert!(matches!(load_scene(&p, SceneFormat::Csv), Err(Error::MalformedRow { .. })));
        let p = write_tmp(&dir, "f.csv", "# fps=25\n0,a,pedestrian,0,0\n0,a,pedestrian,1,0\n");
        assert!(matches!(load_scene(&p, SceneFormat::Csv), Err(Error::NonMonotonicFrames { .. })));
    }

    #[test]
    fn prediction_file_counts_rows() {
        let dir = tempfile::tempdir().unwrap();
        let tr = PredictedTrajectory { positions: vec![[1.5, -2.25]; 12], velocities: vec![[0.0, 0.0]; 12] };
        let set = PredictionSet {
            sample_id: "s".into(),
            trajectories: vec![tr; 20],
            goals: vec![[3.0, 4.0]; 20],
            z_goal: vec![],
            z_waypoint: vec![],
        };
        let p = dir.path().join("p.csv");
        save_predictions(std::slice::from_ref(&set), &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let rows = text.lines().filter(|l| !l.starts_with('#')).count();
        assert_eq!(rows, 20 * 12 + 20);
        let back = load_predictions(&p).unwrap();
        assert_eq!(back[0].goals, set.goals);
        assert_eq!(back[0].trajectories[7].positions, set.trajectories[7].positions);
    }

    #[test]
    fn unwritable_path_is_io_failure() {
        let set = PredictionSet {
            sample_id: "s".into(),
            trajectories: vec![],
            goals: vec![],
            z_goal: vec![],
            z_waypoint: vec![],
        };
        let err = save_predictions(&[set], Path::new("/nonexistent-dir/for/sure/p.csv")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
