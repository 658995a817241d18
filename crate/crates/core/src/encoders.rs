//! State, map and goal-condition encoders. Everything lands in a
//! `D_MODEL`-wide embedding.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Graph, Linear, ParamId, ParamStore, Tensor, Var};
use crate::types::{AgentClass, AgentState, SemanticMask, CROP_CELLS, HISTORY_LEN, NUM_MAP_CLASSES};

pub const D_MODEL: usize = 128;

const CNN_CHANNELS: [usize; 3] = [16, 32, 64];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Ego,
    Neighbor,
}

/// A finite `D_MODEL` vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != D_MODEL {
            return Err(Error::LengthMismatch { expected: D_MODEL, got: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("embedding has non-finite entries".into()));
        }
        Ok(Embedding(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::row_vector(self.0.clone())
    }

    pub(crate) fn from_row(t: &Tensor, row: usize) -> Result<Self> {
        Embedding::new(t.row(row).to_vec())
    }
}

#[derive(Clone, Debug)]
pub struct MapCnn {
    conv: [(ParamId, ParamId); 3],
    fc: Linear,
}

#[derive(Clone, Debug)]
pub struct GoalConditionEncoder {
    conv1: Linear,
    conv2: Linear,
    out: Linear,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    ego: Vec<Linear>,
    neighbor: Vec<Linear>,
    absent: ParamId,
    pub map: MapCnn,
    pub goal: GoalConditionEncoder,
    /// Embeds a 2-D goal position as the goal node of the social graph.
    pub goal_point: Linear,
}

impl EncoderParams {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let ego = AgentClass::ALL.iter().map(|c| Linear::new(store, &format!("enc.ego.{c}"), 4, D_MODEL, rng)).collect();
        let neighbor =
            AgentClass::ALL.iter().map(|c| Linear::new(store, &format!("enc.nbr.{c}"), 4, D_MODEL, rng)).collect();
        let absent = store.add_uniform("enc.absent", 1, D_MODEL, D_MODEL, rng);

        let mut c_in = NUM_MAP_CLASSES;
        let mut conv = Vec::new();
        for (i, &c_out) in CNN_CHANNELS.iter().enumerate() {
            let w = store.add_uniform(format!("enc.map.conv{i}.w"), c_out, c_in * 9, c_in * 9, rng);
            let b = store.add(format!("enc.map.conv{i}.b"), Tensor::zeros(1, c_out));
            conv.push((w, b));
            c_in = c_out;
        }
        let side = CROP_CELLS >> CNN_CHANNELS.len();
        let fc = Linear::new(store, "enc.map.fc", c_in * side * side, D_MODEL, rng);
        let map = MapCnn { conv: [conv[0], conv[1], conv[2]], fc };

        let goal = GoalConditionEncoder {
            conv1: Linear::new(store, "enc.goal.conv1", 3 * D_MODEL, D_MODEL, rng),
            conv2: Linear::new(store, "enc.goal.conv2", 3 * D_MODEL, D_MODEL, rng),
            out: Linear::new(store, "enc.goal.out", 2 * D_MODEL, D_MODEL, rng),
        };
        let goal_point = Linear::new(store, "enc.goal_point", 2, D_MODEL, rng);
        EncoderParams { ego, neighbor, absent, map, goal, goal_point }
    }

    fn linear_for(&self, role: Role, cls: AgentClass) -> Linear {
        match role {
            Role::Ego => self.ego[cls.index()],
            Role::Neighbor => self.neighbor[cls.index()],
        }
    }

    /// Embeds `n` states with the class- and role-specific affine map.
    /// `None` rows (absent neighbor steps) take the absent token.
    pub fn encode_states(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        rows: &[Option<(AgentState, AgentClass)>],
        role: Role,
    ) -> Var {
        let n = rows.len();
        let mut parts = Vec::new();
        let mut dest = Vec::new();
        for cls in AgentClass::ALL {
            let idx: Vec<usize> =
                (0..n).filter(|&i| matches!(rows[i], Some((_, c)) if c == cls)).collect();
            if idx.is_empty() {
                continue;
            }
            let feats: Vec<f64> = idx.iter().flat_map(|&i| rows[i].unwrap().0.features()).collect();
            let x = g.leaf(Tensor::from_vec(idx.len(), 4, feats));
            parts.push(self.linear_for(role, cls).forward(g, store, x));
            dest.extend(idx);
        }
        let absent_rows: Vec<usize> = (0..n).filter(|&i| rows[i].is_none()).collect();
        if !absent_rows.is_empty() {
            let token = g.param(store, self.absent);
            parts.push(g.gather_rows(token, &vec![0; absent_rows.len()]));
            dest.extend(absent_rows);
        }
        if parts.is_empty() {
            return g.zeros(0, D_MODEL);
        }
        let stacked = g.concat_rows(&parts);
        g.scatter_add_rows(stacked, Arc::new(dest), n)
    }

    /// CNN over one-hot 64x64 class patches; one embedding row per patch.
    pub fn encode_maps(&self, g: &mut Graph, store: &ParamStore, patches: &[&SemanticMask]) -> Result<Var> {
        let mut classes = Vec::with_capacity(patches.len() * CROP_CELLS * CROP_CELLS);
        for p in patches {
            if p.width != CROP_CELLS || p.height != CROP_CELLS {
                return Err(Error::ShapeMismatch {
                    expected: format!("{CROP_CELLS}x{CROP_CELLS} patch"),
                    got: format!("{}x{}", p.width, p.height),
                });
            }
            classes.extend_from_slice(p.grid());
        }
        let [(w0, b0), (w1, b1), (w2, b2)] = self.map.conv;
        let (w0, b0) = (g.param(store, w0), g.param(store, b0));
        let mut side = CROP_CELLS;
        let mut h = g.onehot_conv3x3(Arc::new(classes), NUM_MAP_CLASSES, side, side, w0, b0);
        h = g.relu(h);
        h = g.avg_pool2(h, CNN_CHANNELS[0], side, side);
        side /= 2;
        for (i, (w, b)) in [(w1, b1), (w2, b2)].into_iter().enumerate() {
            let (w, b) = (g.param(store, w), g.param(store, b));
            h = g.conv3x3(h, w, b, CNN_CHANNELS[i], side, side);
            h = g.relu(h);
            h = g.avg_pool2(h, CNN_CHANNELS[i + 1], side, side);
            side /= 2;
        }
        Ok(self.map.fc.forward(g, store, h))
    }

    /// Temporal 1-D convolution over stacked history embeddings
    /// (`batch*8` rows, batch-major), averaged over time, joined with the
    /// map embedding (zeros when absent) and projected to `D_MODEL`.
    pub fn encode_goal_condition(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        history: Var,
        map_emb: Option<Var>,
    ) -> Result<Var> {
        let (rows, cols) = g.shape(history);
        if cols != D_MODEL {
            return Err(Error::ShapeMismatch { expected: format!("{D_MODEL} columns"), got: cols.to_string() });
        }
        if rows == 0 || rows % HISTORY_LEN != 0 {
            return Err(Error::LengthMismatch { expected: HISTORY_LEN, got: rows % HISTORY_LEN });
        }
        let batch = rows / HISTORY_LEN;
        let shift = |offset: isize| -> Arc<Vec<Option<usize>>> {
            Arc::new(
                (0..rows)
                    .map(|r| {
                        let t = (r % HISTORY_LEN) as isize + offset;
                        (0..HISTORY_LEN as isize).contains(&t).then(|| (r as isize + offset) as usize)
                    })
                    .collect(),
            )
        };
        let (prev, next) = (shift(-1), shift(1));
        let mut h = history;
        for layer in [&self.goal.conv1, &self.goal.conv2] {
            let p = g.gather_rows_opt(h, prev.clone());
            let n = g.gather_rows_opt(h, next.clone());
            let stacked = g.concat_cols(&[p, h, n]);
            let y = layer.forward(g, store, stacked);
            h = g.relu(y);
        }
        let owner: Vec<usize> = (0..rows).map(|r| r / HISTORY_LEN).collect();
        let summed = g.scatter_add_rows(h, Arc::new(owner), batch);
        let pooled = g.scale(summed, 1.0 / HISTORY_LEN as f64);
        let map = match map_emb {
            Some(m) => {
                if g.shape(m) != (batch, D_MODEL) {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{batch}x{D_MODEL} map embedding"),
                        got: format!("{:?}", g.shape(m)),
                    });
                }
                m
            }
            None => g.zeros(batch, D_MODEL),
        };
        let joined = g.concat_cols(&[pooled, map]);
        Ok(self.goal.out.forward(g, store, joined))
    }

    /// Goal-node embeddings for `batch x 2` goal positions.
    pub fn encode_goal_points(&self, g: &mut Graph, store: &ParamStore, goals: Var) -> Var {
        self.goal_point.forward(g, store, goals)
    }

    // Single-instance conveniences.

    pub fn encode_agent(&self, store: &ParamStore, state: Option<&AgentState>, cls: AgentClass, role: Role) -> Embedding {
        let mut g = Graph::new();
        let v = self.encode_states(&mut g, store, &[state.map(|s| (*s, cls))], role);
        Embedding::from_row(g.value(v), 0).expect("finite embedding")
    }

    pub fn encode_map(&self, store: &ParamStore, patch: &SemanticMask) -> Result<Embedding> {
        let mut g = Graph::new();
        let v = self.encode_maps(&mut g, store, &[patch])?;
        Embedding::from_row(g.value(v), 0)
    }

    pub fn goal_condition(&self, store: &ParamStore, history: &[Embedding], map_emb: &Embedding) -> Result<Embedding> {
        if history.len() != HISTORY_LEN {
            return Err(Error::LengthMismatch { expected: HISTORY_LEN, got: history.len() });
        }
        let mut g = Graph::new();
        let data: Vec<f64> = history.iter().flat_map(|e| e.values().iter().copied()).collect();
        let h = g.leaf(Tensor::from_vec(HISTORY_LEN, D_MODEL, data));
        let m = g.leaf(map_emb.to_tensor());
        let v = self.encode_goal_condition(&mut g, store, h, Some(m))?;
        Embedding::from_row(g.value(v), 0)
    }
}
