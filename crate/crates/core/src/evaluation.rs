//! Displacement metrics, the constant-velocity baseline, and occupancy
//! rasters built from sampled predictions.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Point, PredictionSet, SemanticMask, TrajectorySample, DT, HORIZON};

pub const DEFAULT_BANDWIDTH: f64 = 0.5;

fn check_pair(pred: &[Point], truth: &[Point]) -> Result<()> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::LengthMismatch { expected: truth.len(), got: pred.len() });
    }
    Ok(())
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Mean Euclidean distance over the steps.
pub fn ade(pred: &[Point], truth: &[Point]) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| dist(*p, *t)).sum::<f64>() / pred.len() as f64)
}

/// Distance at the final step.
pub fn fde(pred: &[Point], truth: &[Point]) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok(dist(pred[pred.len() - 1], truth[truth.len() - 1]))
}

/// Best ADE and best FDE over the K draws, each minimized on its own (the
/// two minima may come from different draws).
pub fn min_over_k(preds: &PredictionSet, truth: &[Point]) -> Result<(f64, f64)> {
    if preds.trajectories.is_empty() {
        return Err(Error::Invalid(format!("{}: empty prediction set", preds.sample_id)));
    }
    let mut best = (f64::INFINITY, f64::INFINITY);
    for tr in &preds.trajectories {
        best.0 = best.0.min(ade(&tr.positions, truth)?);
        best.1 = best.1.min(fde(&tr.positions, truth)?);
    }
    Ok(best)
}

/// Last observed velocity carried forward for the horizon. Needs a
/// world-frame sample since normalized ones scale positions and velocities
/// differently.
pub fn constant_velocity_baseline(sample: &TrajectorySample) -> Result<Vec<Point>> {
    if sample.normalized {
        return Err(Error::Invalid(format!("{}: constant-velocity baseline needs a world-frame sample", sample.sample_id)));
    }
    let last = sample.last_observed();
    Ok((1..=HORIZON).map(|k| [last.x + last.vx * DT * k as f64, last.y + last.vy * DT * k as f64]).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetric {
    pub sample_id: String,
    pub min_ade: f64,
    pub min_fde: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub min_ade: f64,
    pub min_fde: f64,
    pub k: usize,
    pub per_sample: Vec<SampleMetric>,
    pub dataset_id: String,
    pub checkpoint_id: String,
}

/// Scores every prediction set against the sample with the same id.
pub fn evaluate(
    preds: &[PredictionSet],
    truth: &[TrajectorySample],
    dataset_id: &str,
    checkpoint_id: &str,
) -> Result<MetricReport> {
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let by_id: HashMap<&str, &TrajectorySample> = truth.iter().map(|s| (s.sample_id.as_str(), s)).collect();
    let mut per_sample = Vec::with_capacity(preds.len());
    let k = preds[0].k();
    for p in preds {
        let s = by_id
            .get(p.sample_id.as_str())
            .ok_or_else(|| Error::Invalid(format!("no ground truth for sample '{}'", p.sample_id)))?;
        if s.normalized {
            return Err(Error::Invalid(format!("{}: ground truth must be in world frame", s.sample_id)));
        }
        let (a, f) = min_over_k(p, &s.future_positions())?;
        per_sample.push(SampleMetric { sample_id: p.sample_id.clone(), min_ade: a, min_fde: f });
    }
    let n = per_sample.len() as f64;
    Ok(MetricReport {
        min_ade: per_sample.iter().map(|m| m.min_ade).sum::<f64>() / n,
        min_fde: per_sample.iter().map(|m| m.min_fde).sum::<f64>() / n,
        k,
        per_sample,
        dataset_id: dataset_id.into(),
        checkpoint_id: checkpoint_id.into(),
    })
}

impl MetricReport {
    /// Flat `key = value` summary.
    pub fn to_kv(&self) -> String {
        format!(
            "dataset = {}\ncheckpoint = {}\nk = {}\nsamples = {}\nmin_ade = {:.6}\nmin_fde = {:.6}\n",
            self.dataset_id,
            self.checkpoint_id,
            self.k,
            self.per_sample.len(),
            self.min_ade,
            self.min_fde
        )
    }

    /// Tab-separated per-sample table with a header row.
    pub fn to_table(&self) -> String {
        let mut out = String::from("sample_id\tmin_ade\tmin_fde\n");
        for m in &self.per_sample {
            let _ = writeln!(out, "{}\t{:.9}\t{:.9}", m.sample_id, m.min_ade, m.min_fde);
        }
        out
    }

    /// Writes `path` (key-value) and `path` with a `.tsv` extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_kv()).map_err(|e| Error::io(path, e))?;
        let table = path.with_extension("tsv");
        fs::write(&table, self.to_table()).map_err(|e| Error::io(&table, e))
    }
}

/// Occupancy density on a mask-aligned grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RiskMap {
    pub width: usize,
    pub height: usize,
    /// Row-major, row index increasing with y like [`SemanticMask`].
    pub grid: Vec<f64>,
    pub scale: f64,
    pub origin: Point,
    /// Number of normalized layers summed in.
    pub layers: usize,
    /// Mass that fell outside the grid.
    pub truncated: f64,
}

impl RiskMap {
    fn empty(mask: &SemanticMask) -> Self {
        RiskMap {
            width: mask.width,
            height: mask.height,
            grid: vec![0.0; mask.width * mask.height],
            scale: mask.scale,
            origin: mask.origin,
            layers: 0,
            truncated: 0.0,
        }
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.grid[row * self.width + col]
    }

    pub fn total(&self) -> f64 {
        self.grid.iter().sum()
    }

    /// Adds one layer of unit mass spread over `points` (equal weight
    /// each), each point blurred by a Gaussian of `bandwidth` meters
    /// truncated at 4 sigma and renormalized over that window. Mass landing
    /// outside the grid is counted in `truncated`.
    fn add_layer(&mut self, points: &[Point], bandwidth: f64) {
        self.layers += 1;
        if points.is_empty() {
            self.truncated += 1.0;
            return;
        }
        let w = 1.0 / points.len() as f64;
        // Built separately so that adding identical layers is exact.
        let mut layer = vec![0.0; self.grid.len()];
        let reach = ((4.0 * bandwidth) / self.scale).ceil() as i64 + 1;
        let mut cells: Vec<(i64, i64, f64)> = Vec::new();
        for p in points {
            let fc = ((p[0] - self.origin[0]) / self.scale).floor() as i64;
            let fr = ((p[1] - self.origin[1]) / self.scale).floor() as i64;
            cells.clear();
            // Log-weights keep vanishing bandwidths well defined: the mass
            // collapses onto the nearest cell center.
            let mut max = f64::NEG_INFINITY;
            for r in fr - reach..=fr + reach {
                for c in fc - reach..=fc + reach {
                    let cx = self.origin[0] + (c as f64 + 0.5) * self.scale;
                    let cy = self.origin[1] + (r as f64 + 0.5) * self.scale;
                    let d2 = (cx - p[0]).powi(2) + (cy - p[1]).powi(2);
                    if d2.sqrt() > 4.0 * bandwidth + self.scale {
                        continue;
                    }
                    let lw = -d2 / (2.0 * bandwidth * bandwidth);
                    max = max.max(lw);
                    cells.push((c, r, lw));
                }
            }
            let mut z = 0.0;
            for cell in cells.iter_mut() {
                cell.2 = (cell.2 - max).exp();
                z += cell.2;
            }
            for &(c, r, cw) in &cells {
                let m = w * cw / z;
                if c >= 0 && r >= 0 && (c as usize) < self.width && (r as usize) < self.height {
                    layer[r as usize * self.width + c as usize] += m;
                } else {
                    self.truncated += m;
                }
            }
        }
        for (g, l) in self.grid.iter_mut().zip(layer) {
            *g += l;
        }
    }

    /// Grid as text: a `# key=value` header, `width height`, then one line
    /// of values per row.
    pub fn save_grid(&self, path: &Path) -> Result<()> {
        let mut out = format!(
            "# scale={} origin_x={} origin_y={} layers={} truncated={}\n{} {}\n",
            self.scale, self.origin[0], self.origin[1], self.layers, self.truncated, self.width, self.height
        );
        for r in 0..self.height {
            let row: Vec<String> = (0..self.width).map(|c| format!("{:e}", self.get(c, r))).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load_grid(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |line: usize, reason: &str| Error::MalformedRow { path: path.to_path_buf(), line, reason: reason.into() };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad(1, "missing header"))?;
        let mut kv = HashMap::new();
        for tok in header.trim_start_matches('#').split_whitespace() {
            if let Some((k, v)) = tok.split_once('=') {
                kv.insert(k, v.parse::<f64>().map_err(|_| bad(1, "bad header value"))?);
            }
        }
        let field = |k: &str| kv.get(k).copied().ok_or_else(|| bad(1, &format!("missing {k}")));
        let dims: Vec<usize> = lines
            .next()
            .ok_or_else(|| bad(2, "missing size"))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad(2, "bad size")))
            .collect::<Result<_>>()?;
        if dims.len() != 2 {
            return Err(bad(2, "expected width and height"));
        }
        let mut grid = Vec::with_capacity(dims[0] * dims[1]);
        for (i, l) in lines.enumerate() {
            for t in l.split_whitespace() {
                grid.push(t.parse::<f64>().map_err(|_| bad(i + 3, "bad value"))?);
            }
        }
        if grid.len() != dims[0] * dims[1] {
            return Err(bad(0, "cell count does not match size"));
        }
        Ok(RiskMap {
            width: dims[0],
            height: dims[1],
            grid,
            scale: field("scale")?,
            origin: [field("origin_x")?, field("origin_y")?],
            layers: field("layers")? as usize,
            truncated: field("truncated")?,
        })
    }

    /// 8-bit grayscale rendering scaled to the maximum cell, north up.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let max = self.grid.iter().cloned().fold(0.0, f64::max);
        let img = image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let row = self.height - 1 - y as usize;
            let v = if max > 0.0 { self.get(x as usize, row) / max } else { 0.0 };
            image::Luma([(v * 255.0).round() as u8])
        });
        img.save(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
    }
}

/// Sum over agents of per-agent unit-mass layers built from all K x 12
/// predicted positions.
pub fn risk_map(preds: &[PredictionSet], mask: &SemanticMask, bandwidth: f64) -> RiskMap {
    let mut map = RiskMap::empty(mask);
    for p in preds {
        let pts: Vec<Point> = p.trajectories.iter().flat_map(|t| t.positions.iter().copied()).collect();
        map.add_layer(&pts, bandwidth);
    }
    map
}

/// Single unit-mass layer over sampled goal positions.
pub fn goal_heatmap(goals: &[Point], mask: &SemanticMask, bandwidth: f64) -> RiskMap {
    let mut map = RiskMap::empty(mask);
    map.add_layer(goals, bandwidth);
    map
}
