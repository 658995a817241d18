//! The assembled predictor: encoders, social graph, transformer and the two
//! CVAE heads, with the batched training loss and autoregressive sampling.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderParams, Role, D_MODEL};
use crate::error::{Error, Result};
use crate::generative::{sample_vars, standard_normal, CvaeHead, HeadConfig};
use crate::nn::{Graph, ParamStore, Tensor, Var};
use crate::pipeline::integrate_positions;
use crate::preprocess::NormStats;
use crate::social_graph::{fuse_vars, AblationFlags, Fusion, GatParams, NodeSet};
use crate::temporal::{Dropout, TransformerParams};
use crate::types::{
    AgentClass, AgentState, Neighbor, Point, PredictedTrajectory, PredictionSet, TrajectorySample, DT, HISTORY_LEN,
    HORIZON,
};

pub const GOAL_LATENT: usize = 16;
pub const WAYPOINT_LATENT: usize = 32;
pub const GOAL_COMPONENTS: usize = 4;
pub const WAYPOINT_COMPONENTS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub flags: AblationFlags,
    pub fusion: Fusion,
    /// Nearest neighbors kept per sample.
    pub max_neighbors: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { flags: AblationFlags::default(), fusion: Fusion::Add, max_neighbors: 8, dropout: 0.0 }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub enc: EncoderParams,
    pub gat: GatParams,
    pub tf: TransformerParams,
    pub goal_head: Option<CvaeHead>,
    pub waypoint_head: CvaeHead,
}

/// Scalar parts of a batch loss, summed over samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub waypoint_nll: f64,
    pub waypoint_kl: f64,
    pub goal_nll: f64,
    pub goal_kl: f64,
    pub samples: usize,
}

impl LossParts {
    pub fn total(&self, kl_weight: f64) -> f64 {
        self.waypoint_nll + self.goal_nll + kl_weight * (self.waypoint_kl + self.goal_kl)
    }

    pub fn add(&mut self, o: &LossParts) {
        self.waypoint_nll += o.waypoint_nll;
        self.waypoint_kl += o.waypoint_kl;
        self.goal_nll += o.goal_nll;
        self.goal_kl += o.goal_kl;
        self.samples += o.samples;
    }

    pub fn is_finite(&self) -> bool {
        [self.waypoint_nll, self.waypoint_kl, self.goal_nll, self.goal_kl].iter().all(|v| v.is_finite())
    }
}

/// What the decoder consumed and produced during one autoregressive run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecodeTrace {
    /// `[step][draw]` normalized `(x, y, vx, vy)` fed at decoder position `step`.
    pub inputs: Vec<Vec<[f64; 4]>>,
    /// `[step][draw]` the state predicted at `step`.
    pub predicted: Vec<Vec<[f64; 4]>>,
}

struct Context {
    /// `S*8` ego history embeddings.
    hist: Var,
    map: Option<Var>,
    goal_cond: Option<Var>,
    /// Neighbor node embeddings and, per node, `(sample, step)`.
    nbr: Option<(Var, Vec<(usize, usize)>)>,
}

fn features(s: &AgentState) -> [f64; 4] {
    s.features()
}

/// Nearest neighbors by closest present approach, at most `cap`.
fn capped_neighbors(sample: &TrajectorySample, cap: usize) -> Vec<&Neighbor> {
    let mut with_d: Vec<(f64, &Neighbor)> = sample
        .neighbors
        .iter()
        .map(|n| {
            let d = n.states.iter().flatten().map(|s| s.x.hypot(s.y)).fold(f64::INFINITY, f64::min);
            (d, n)
        })
        .collect();
    with_d.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.agent_id.cmp(&b.1.agent_id)));
    with_d.into_iter().take(cap).map(|(_, n)| n).collect()
}

impl Model {
    pub fn new(store: &mut ParamStore, cfg: ModelConfig, rng: &mut impl Rng) -> Self {
        let enc = EncoderParams::new(store, rng);
        let gat = GatParams::new(store, rng);
        let tf = TransformerParams::new(store, rng);
        let residual = cfg.flags.rg;
        let goal_head = cfg.flags.g.then(|| {
            let hc = HeadConfig {
                cond_dim: D_MODEL,
                target_dim: 2,
                out_dim: 2,
                latent_dim: GOAL_LATENT,
                components: GOAL_COMPONENTS,
                residual,
            };
            CvaeHead::new(store, "goal", hc, rng)
        });
        let wc = HeadConfig {
            cond_dim: D_MODEL,
            target_dim: 2 * HORIZON,
            out_dim: 2,
            latent_dim: WAYPOINT_LATENT,
            components: WAYPOINT_COMPONENTS,
            residual,
        };
        let waypoint_head = CvaeHead::new(store, "waypoint", wc, rng);
        Model { cfg, enc, gat, tf, goal_head, waypoint_head }
    }

    fn context(&self, g: &mut Graph, store: &ParamStore, samples: &[&TrajectorySample]) -> Result<Context> {
        for s in samples {
            s.validate()?;
            if !s.normalized {
                return Err(Error::Invalid(format!("{}: sample is not normalized", s.sample_id)));
            }
        }
        let rows: Vec<_> = samples.iter().flat_map(|s| s.ego.iter().map(|st| Some((*st, s.ego_cls)))).collect();
        let hist = self.enc.encode_states(g, store, &rows, Role::Ego);
        let map = if self.cfg.flags.s {
            let patches: Vec<_> = samples.iter().map(|s| &s.map_patch).collect();
            Some(self.enc.encode_maps(g, store, &patches)?)
        } else {
            None
        };
        let goal_cond = if self.cfg.flags.g {
            Some(self.enc.encode_goal_condition(g, store, hist, map)?)
        } else {
            None
        };
        let nbr = if self.cfg.flags.n {
            let mut rows = Vec::new();
            let mut owner = Vec::new();
            for (si, s) in samples.iter().enumerate() {
                for n in capped_neighbors(s, self.cfg.max_neighbors) {
                    for (t, st) in n.states.iter().enumerate() {
                        rows.push(st.map(|st| (st, n.cls)));
                        owner.push((si, t));
                    }
                }
            }
            (!rows.is_empty()).then(|| (self.enc.encode_states(g, store, &rows, Role::Neighbor), owner))
        } else {
            None
        };
        Ok(Context { hist, map, goal_cond, nbr })
    }

    /// Social embeddings for `draws` sequences of length `len`; `owner[r]`
    /// is the sample of draw `r`. `ego` rows are draw-major.
    #[allow(clippy::too_many_arguments)]
    fn social(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ego: Var,
        len: usize,
        owner: &[usize],
        ctx: &Context,
        with_neighbors: bool,
        goal_emb: Option<Var>,
    ) -> Var {
        let draws = owner.len();
        let groups = draws * len;
        let per_group = |g: &mut Graph, v: Var, by_draw: bool| {
            let idx: Vec<usize> = (0..groups).map(|r| if by_draw { r / len } else { owner[r / len] }).collect();
            NodeSet { nodes: g.gather_rows(v, &idx), group: Arc::new((0..groups).collect()) }
        };
        let nbr = match (&ctx.nbr, with_neighbors) {
            (Some((nodes, node_owner)), true) => {
                let mut idx = Vec::new();
                let mut group = Vec::new();
                for (r, &s) in owner.iter().enumerate() {
                    for (j, &(ns, t)) in node_owner.iter().enumerate() {
                        if ns == s {
                            idx.push(j);
                            group.push(r * len + t);
                        }
                    }
                }
                (!idx.is_empty()).then(|| NodeSet { nodes: g.gather_rows(*nodes, &idx), group: Arc::new(group) })
            }
            _ => None,
        };
        let map = ctx.map.map(|m| per_group(g, m, false));
        let goal = goal_emb.map(|e| per_group(g, e, true));
        let (force, _) = self.gat.attend_batch(g, store, ego, &[nbr, map, goal]);
        fuse_vars(g, ego, force, self.cfg.fusion)
    }

    /// Ego embeddings of `states`, one row per entry.
    fn embed_states(&self, g: &mut Graph, store: &ParamStore, states: &[(AgentState, AgentClass)]) -> Var {
        let rows: Vec<_> = states.iter().map(|&(s, c)| Some((s, c))).collect();
        self.enc.encode_states(g, store, &rows, Role::Ego)
    }

    /// Teacher-forced negative ELBO summed over `samples`, multiplied by
    /// `scale`. Noise is drawn from `rng` in sample order.
    pub fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        samples: &[&TrajectorySample],
        kl_weight: f64,
        scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, LossParts)> {
        let b = samples.len();
        let ctx = self.context(g, store, samples)?;
        let owner: Vec<usize> = (0..b).collect();
        let mut noise_goal = Vec::with_capacity(b * GOAL_LATENT);
        let mut noise_wp = Vec::with_capacity(b * WAYPOINT_LATENT);
        let mut dropout = (self.cfg.dropout > 0.0).then(|| Dropout { p: self.cfg.dropout, rng: ChaCha8Rng::from_rng(&mut *rng).expect("rng") });
        for _ in 0..b {
            noise_goal.extend(standard_normal(rng, GOAL_LATENT));
            noise_wp.extend(standard_normal(rng, WAYPOINT_LATENT));
        }
        let mut parts = LossParts { samples: b, ..Default::default() };
        let mut terms = Vec::new();

        let goal_emb = match (&self.goal_head, ctx.goal_cond) {
            (Some(head), Some(xg)) => {
                let goals: Vec<f64> = samples.iter().flat_map(|s| s.goal).collect();
                let yg = g.leaf(Tensor::from_vec(b, 2, goals));
                let (mq, lq) = head.recognize_vars(g, store, xg, yg);
                let (mp, lp) = head.prior_vars(g, store, xg);
                let z = sample_vars(g, mq, lq, Tensor::from_vec(b, GOAL_LATENT, noise_goal));
                let dec = head.decode_vars(g, store, xg, z);
                let rec = head.reconstruction(g, &dec, yg);
                let kl = g.kl_diag(mq, lq, mp, lp);
                parts.goal_nll = g.value(rec).sum();
                parts.goal_kl = g.value(kl).sum();
                let klw = g.scale(kl, kl_weight);
                terms.push(rec);
                terms.push(klw);
                let points: Vec<f64> =
                    (0..b).flat_map(|r| head.responsible_estimate(g, &dec, r, &samples[r].goal)).collect();
                let p = g.leaf(Tensor::from_vec(b, 2, points));
                Some(self.enc.encode_goal_points(g, store, p))
            }
            _ => None,
        };

        let hist_social = self.social(g, store, ctx.hist, HISTORY_LEN, &owner, &ctx, true, goal_emb);
        let memory = self.tf.encode_sequence(g, store, hist_social, b, None, dropout.as_mut())?;

        // Decoder position t carries window state 7+t and predicts the
        // velocity of state 8+t.
        let mut inputs = Vec::with_capacity(b * HORIZON);
        let mut targets = Vec::with_capacity(b * HORIZON * 2);
        let mut future_v = Vec::with_capacity(b * HORIZON * 2);
        for s in samples {
            for t in 0..HORIZON {
                let st = if t == 0 { *s.last_observed() } else { s.future[t - 1] };
                inputs.push((st, s.ego_cls));
                targets.extend(s.future[t].velocity());
            }
            future_v.extend(s.future.iter().flat_map(|st| st.velocity()));
        }
        let tgt_emb = self.embed_states(g, store, &inputs);
        let tgt_social = self.social(g, store, tgt_emb, HORIZON, &owner, &ctx, false, goal_emb);
        let dec_out = self.tf.decode(g, store, tgt_social, memory, b, None, true, dropout.as_mut())?;

        let head = &self.waypoint_head;
        let first: Vec<usize> = (0..b).map(|r| r * HORIZON).collect();
        let x0 = g.gather_rows(dec_out, &first);
        let yv = g.leaf(Tensor::from_vec(b, 2 * HORIZON, future_v));
        let (mq, lq) = head.recognize_vars(g, store, x0, yv);
        let (mp, lp) = head.prior_vars(g, store, x0);
        let z = sample_vars(g, mq, lq, Tensor::from_vec(b, WAYPOINT_LATENT, noise_wp));
        let per_step: Vec<usize> = (0..b * HORIZON).map(|r| r / HORIZON).collect();
        let zr = g.gather_rows(z, &per_step);
        let dec = head.decode_vars(g, store, dec_out, zr);
        let tv = g.leaf(Tensor::from_vec(b * HORIZON, 2, targets));
        let rec = head.reconstruction(g, &dec, tv);
        let kl = g.kl_diag(mq, lq, mp, lp);
        parts.waypoint_nll = g.value(rec).sum();
        parts.waypoint_kl = g.value(kl).sum();
        let klw = g.scale(kl, kl_weight);
        terms.push(rec);
        terms.push(klw);

        let sums: Vec<Var> = terms.into_iter().map(|t| g.sum_all(t)).collect();
        let mut total = sums[0];
        for &s in &sums[1..] {
            total = g.add(total, s);
        }
        Ok((g.scale(total, scale), parts))
    }

    /// `k` sampled futures for one normalized sample, returned in world
    /// frame. Each draw has its own goal latent, sampled goal and waypoint
    /// latent; the waypoint latent is shared by all 12 steps.
    pub fn predict(
        &self,
        store: &ParamStore,
        sample: &TrajectorySample,
        k: usize,
        stats: &NormStats,
        rng: &mut impl Rng,
    ) -> Result<PredictionSet> {
        self.predict_traced(store, sample, k, stats, rng).map(|(p, _)| p)
    }

    pub fn predict_traced(
        &self,
        store: &ParamStore,
        sample: &TrajectorySample,
        k: usize,
        stats: &NormStats,
        rng: &mut impl Rng,
    ) -> Result<(PredictionSet, DecodeTrace)> {
        if k == 0 {
            return Err(Error::Invalid("k must be at least 1".into()));
        }
        let mut g = Graph::new();
        let ctx = self.context(&mut g, store, &[sample])?;
        let owner = vec![0usize; k];
        let all = vec![0usize; k];

        let mut z_goal = Vec::new();
        let mut goals_norm: Vec<Point> = Vec::new();
        let goal_emb = match (&self.goal_head, ctx.goal_cond) {
            (Some(head), Some(xg)) => {
                let xk = g.gather_rows(xg, &all);
                let (mp, lp) = head.prior_vars(&mut g, store, xk);
                let noise: Vec<f64> = (0..k).flat_map(|_| standard_normal(rng, GOAL_LATENT)).collect();
                let z = sample_vars(&mut g, mp, lp, Tensor::from_vec(k, GOAL_LATENT, noise));
                let dec = head.decode_vars(&mut g, store, xk, z);
                let mut pts = Vec::with_capacity(2 * k);
                for r in 0..k {
                    z_goal.push(g.value(z).row(r).to_vec());
                    let y = head.sample_output(&g, &dec, r, rng);
                    goals_norm.push([y[0], y[1]]);
                    pts.extend(y);
                }
                let p = g.leaf(Tensor::from_vec(k, 2, pts));
                Some(self.enc.encode_goal_points(&mut g, store, p))
            }
            _ => None,
        };

        let hist_rows: Vec<usize> = (0..k * HISTORY_LEN).map(|r| r % HISTORY_LEN).collect();
        let hist = g.gather_rows(ctx.hist, &hist_rows);
        let hist_social = self.social(&mut g, store, hist, HISTORY_LEN, &owner, &ctx, true, goal_emb);
        let memory = self.tf.encode_sequence(&mut g, store, hist_social, k, None, None)?;

        let head = &self.waypoint_head;
        let step_scale = DT * stats.vel_scale / stats.pos_scale;
        let last = *sample.last_observed();
        let mut cur: Vec<AgentState> = vec![last; k];
        let mut state = self.tf.decoder_start(k);
        let mut z = None;
        let mut z_waypoint = Vec::new();
        let mut velocities: Vec<Vec<Point>> = vec![Vec::with_capacity(HORIZON); k];
        let mut trace = DecodeTrace::default();
        for _ in 0..HORIZON {
            trace.inputs.push(cur.iter().map(features).collect());
            let states: Vec<_> = cur.iter().map(|&s| (s, sample.ego_cls)).collect();
            let emb = self.embed_states(&mut g, store, &states);
            let social = self.social(&mut g, store, emb, 1, &owner, &ctx, false, goal_emb);
            let x = self.tf.decode_step(&mut g, store, &mut state, social, memory, None)?;
            let zv = match z {
                Some(zv) => zv,
                None => {
                    let (mp, lp) = head.prior_vars(&mut g, store, x);
                    let noise: Vec<f64> = (0..k).flat_map(|_| standard_normal(rng, WAYPOINT_LATENT)).collect();
                    let zv = sample_vars(&mut g, mp, lp, Tensor::from_vec(k, WAYPOINT_LATENT, noise));
                    z_waypoint = (0..k).map(|r| g.value(zv).row(r).to_vec()).collect();
                    z = Some(zv);
                    zv
                }
            };
            let dec = head.decode_vars(&mut g, store, x, zv);
            for r in 0..k {
                let v = head.sample_output(&g, &dec, r, rng);
                let c = cur[r];
                cur[r] = AgentState::new(c.x + c.vx * step_scale, c.y + c.vy * step_scale, v[0], v[1], c.t + DT);
                velocities[r].push([v[0], v[1]]);
            }
            trace.predicted.push(cur.iter().map(features).collect());
        }

        let center = sample.center;
        let last_v = [last.vx * stats.vel_scale, last.vy * stats.vel_scale];
        let start = [last.x * stats.pos_scale + center[0], last.y * stats.pos_scale + center[1]];
        let mut trajectories = Vec::with_capacity(k);
        for vel in &velocities {
            let world_v: Vec<Point> = vel.iter().map(|v| [v[0] * stats.vel_scale, v[1] * stats.vel_scale]).collect();
            // Displacement into step t uses the velocity of the state before it.
            let mut disp = Vec::with_capacity(HORIZON);
            disp.push(last_v);
            disp.extend_from_slice(&world_v[..HORIZON - 1]);
            let positions = integrate_positions(start, &disp, DT)?;
            trajectories.push(PredictedTrajectory { positions, velocities: world_v });
        }
        let goals = if goals_norm.is_empty() {
            trajectories.iter().map(|t| t.positions[HORIZON - 1]).collect()
        } else {
            goals_norm.iter().map(|p| [p[0] * stats.pos_scale + center[0], p[1] * stats.pos_scale + center[1]]).collect()
        };
        let set = PredictionSet { sample_id: sample.sample_id.clone(), trajectories, goals, z_goal, z_waypoint };
        set.validate()?;
        Ok((set, trace))
    }
}
