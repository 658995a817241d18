//! Heterogeneous star graph around the ego agent: node-level attention per
//! edge type, semantic attention across types, two stacked layers.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{Embedding, D_MODEL};
use crate::error::Result;
use crate::nn::{Graph, Linear, ParamId, ParamStore, Tensor, Var};
use crate::types::AgentClass;

pub const GAT_LAYERS: usize = 2;
pub const GAT_HEADS: usize = 4;
const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeType {
    Neighbor,
    Map,
    Goal,
}

impl EdgeType {
    pub const ALL: [EdgeType; 3] = [EdgeType::Neighbor, EdgeType::Map, EdgeType::Goal];

    pub fn index(self) -> usize {
        self as usize
    }

    fn label(self) -> &'static str {
        match self {
            EdgeType::Neighbor => "neighbor",
            EdgeType::Map => "map",
            EdgeType::Goal => "goal",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    #[default]
    Add,
    Mul,
}

impl std::fmt::Display for Fusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Fusion::Add => "add",
            Fusion::Mul => "mul",
        })
    }
}

impl std::str::FromStr for Fusion {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "add" => Ok(Fusion::Add),
            "mul" => Ok(Fusion::Mul),
            other => Err(format!("unknown fusion '{other}'")),
        }
    }
}

/// Which optional components are switched on. `rg` selects the residual
/// mixture head; the others keep or drop node types of the social graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub rg: bool,
    pub g: bool,
    pub n: bool,
    pub s: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags { rg: true, g: true, n: true, s: true }
    }
}

impl AblationFlags {
    pub fn none() -> Self {
        AblationFlags { rg: false, g: false, n: false, s: false }
    }
}

/// One ego node plus optional map and goal nodes and any number of
/// neighbors, each linked only to the ego.
#[derive(Clone, Debug, PartialEq)]
pub struct SocialGraph {
    pub ego: Embedding,
    pub neighbors: Vec<(AgentClass, Embedding)>,
    pub map: Option<Embedding>,
    pub goal: Option<Embedding>,
}

pub fn ablate(graph: &SocialGraph, flags: &AblationFlags) -> SocialGraph {
    SocialGraph {
        ego: graph.ego.clone(),
        neighbors: if flags.n { graph.neighbors.clone() } else { Vec::new() },
        map: if flags.s { graph.map.clone() } else { None },
        goal: if flags.g { graph.goal.clone() } else { None },
    }
}

#[derive(Clone, Copy, Debug)]
struct TypeParams {
    w: ParamId,
    a_src: ParamId,
    a_dst: ParamId,
}

#[derive(Clone, Debug)]
struct LayerParams {
    types: [TypeParams; 3],
    semantic: Linear,
    query: ParamId,
}

#[derive(Clone, Debug)]
pub struct GatParams {
    layers: Vec<LayerParams>,
}

/// Source nodes of one edge type; `group[j]` is the ego row node `j`
/// attaches to.
#[derive(Clone, Debug)]
pub struct NodeSet {
    pub nodes: Var,
    pub group: Arc<Vec<usize>>,
}

/// Attention values recorded by a batched pass, for inspection.
#[derive(Clone, Debug, Default)]
pub struct AttendVars {
    /// `[layer][type]` segment-attention node, if that type had sources.
    pub node_attention: Vec<[Option<Var>; 3]>,
    /// `[layer]` semantic weights, `groups x 3`.
    pub beta: Vec<Var>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionTrace {
    /// `[layer][type][head]` node-level weights over that type's nodes.
    pub node_weights: Vec<[Vec<Vec<f64>>; 3]>,
    /// `[layer]` semantic weights over the three edge types.
    pub beta: Vec<[f64; 3]>,
}

impl GatParams {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let hd = GAT_HEADS * D_MODEL;
        let layers = (0..GAT_LAYERS)
            .map(|l| {
                let types = EdgeType::ALL.map(|t| {
                    let p = format!("gat.l{l}.{}", t.label());
                    TypeParams {
                        w: store.add_uniform(format!("{p}.w"), D_MODEL, hd, D_MODEL, rng),
                        a_src: store.add_uniform(format!("{p}.a_src"), GAT_HEADS, D_MODEL, D_MODEL, rng),
                        a_dst: store.add_uniform(format!("{p}.a_dst"), GAT_HEADS, D_MODEL, D_MODEL, rng),
                    }
                });
                LayerParams {
                    types,
                    semantic: Linear::new(store, &format!("gat.l{l}.sem"), D_MODEL, D_MODEL, rng),
                    query: store.add_uniform(format!("gat.l{l}.sem.q"), D_MODEL, 1, D_MODEL, rng),
                }
            })
            .collect();
        GatParams { layers }
    }

    /// Social-force embeddings for `groups` ego rows at once. Groups with no
    /// sources of any type get a zero force.
    pub fn attend_batch(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ego: Var,
        sets: &[Option<NodeSet>; 3],
    ) -> (Var, AttendVars) {
        let groups = g.shape(ego).0;
        let mut present = vec![false; groups * 3];
        for (t, set) in sets.iter().enumerate() {
            if let Some(s) = set {
                for &grp in s.group.iter() {
                    present[grp * 3 + t] = true;
                }
            }
        }
        let present = Arc::new(present);
        let mut vars = AttendVars::default();
        let mut x = ego;
        let mut out = ego;
        for layer in &self.layers {
            let mut h_types = Vec::new();
            let mut scores = Vec::new();
            let mut node_att = [None, None, None];
            for (t, set) in sets.iter().enumerate() {
                let (h, att) = match set {
                    Some(s) if !s.group.is_empty() => {
                        let tp = layer.types[t];
                        let w = g.param(store, tp.w);
                        let a_src = g.param(store, tp.a_src);
                        let a_dst = g.param(store, tp.a_dst);
                        let z = g.matmul(s.nodes, w);
                        let ze = g.matmul(x, w);
                        let src = g.head_dot(z, a_src, GAT_HEADS);
                        let dst = g.head_dot(ze, a_dst, GAT_HEADS);
                        let agg =
                            g.segment_attention(src, dst, z, s.group.clone(), groups, GAT_HEADS, LEAKY_SLOPE);
                        let mean = g.head_mean(agg, GAT_HEADS);
                        (g.elu(mean), Some(agg))
                    }
                    _ => (g.zeros(groups, D_MODEL), None),
                };
                node_att[t] = att;
                let proj = layer.semantic.forward(g, store, h);
                let act = g.tanh(proj);
                let q = g.param(store, layer.query);
                scores.push(g.matmul(act, q));
                h_types.push(h);
            }
            let logits = g.concat_cols(&scores);
            let beta = g.masked_softmax(logits, present.clone());
            let mut acc: Option<Var> = None;
            for (t, &h) in h_types.iter().enumerate() {
                let b = g.slice_cols(beta, t, 1);
                let term = g.mul_col(h, b);
                acc = Some(match acc {
                    Some(a) => g.add(a, term),
                    None => term,
                });
            }
            out = acc.expect("three edge types");
            x = g.add(ego, out);
            vars.node_attention.push(node_att);
            vars.beta.push(beta);
        }
        (out, vars)
    }

    /// Force embedding of a single graph, with the attention weights used.
    pub fn attend(&self, store: &ParamStore, graph: &SocialGraph) -> Result<(Embedding, AttentionTrace)> {
        let mut g = Graph::new();
        let ego = g.leaf(graph.ego.to_tensor());
        let stack = |g: &mut Graph, embs: Vec<&Embedding>| -> Option<NodeSet> {
            if embs.is_empty() {
                return None;
            }
            let n = embs.len();
            let data = embs.iter().flat_map(|e| e.values().iter().copied()).collect();
            Some(NodeSet { nodes: g.leaf(Tensor::from_vec(n, D_MODEL, data)), group: Arc::new(vec![0; n]) })
        };
        let sets = [
            stack(&mut g, graph.neighbors.iter().map(|(_, e)| e).collect()),
            stack(&mut g, graph.map.iter().collect()),
            stack(&mut g, graph.goal.iter().collect()),
        ];
        let counts = [graph.neighbors.len(), graph.map.is_some() as usize, graph.goal.is_some() as usize];
        let (force, vars) = self.attend_batch(&mut g, store, ego, &sets);
        let mut trace = AttentionTrace::default();
        for (l, att) in vars.node_attention.iter().enumerate() {
            let per_type = [0, 1, 2].map(|t| match att[t] {
                Some(v) => {
                    let alpha = g.segment_weights(v).expect("segment node");
                    (0..GAT_HEADS).map(|h| (0..counts[t]).map(|j| alpha[j * GAT_HEADS + h]).collect()).collect()
                }
                None => Vec::new(),
            });
            trace.node_weights.push(per_type);
            let b = g.value(vars.beta[l]).row(0);
            trace.beta.push([b[0], b[1], b[2]]);
        }
        Ok((Embedding::from_row(g.value(force), 0)?, trace))
    }
}

pub fn fuse_vars(g: &mut Graph, ego: Var, force: Var, fusion: Fusion) -> Var {
    match fusion {
        Fusion::Add => g.add(ego, force),
        Fusion::Mul => g.mul(ego, force),
    }
}

pub fn fuse(ego: &Embedding, force: &Embedding, fusion: Fusion) -> Embedding {
    let values = ego
        .values()
        .iter()
        .zip(force.values())
        .map(|(a, b)| match fusion {
            Fusion::Add => a + b,
            Fusion::Mul => a * b,
        })
        .collect();
    Embedding::new(values).expect("finite fusion")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (ParamStore, GatParams, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let gat = GatParams::new(&mut store, &mut rng);
        (store, gat, rng)
    }

    fn random_emb(rng: &mut impl Rng) -> Embedding {
        Embedding::new((0..D_MODEL).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn graph(rng: &mut impl Rng, n: usize) -> SocialGraph {
        SocialGraph {
            ego: random_emb(rng),
            neighbors: (0..n).map(|_| (AgentClass::Pedestrian, random_emb(rng))).collect(),
            map: Some(random_emb(rng)),
            goal: Some(random_emb(rng)),
        }
    }

    #[test]
    fn single_neighbor_weight_is_one() {
        let (store, gat, mut rng) = setup(1);
        let gr = graph(&mut rng, 1);
        let (_, trace) = gat.attend(&store, &gr).unwrap();
        for layer in &trace.node_weights {
            for head in &layer[EdgeType::Neighbor.index()] {
                assert_eq!(head, &vec![1.0]);
            }
        }
    }

    #[test]
    fn weights_are_simplices() {
        let (store, gat, mut rng) = setup(2);
        let mut gr = graph(&mut rng, 5);
        gr.map = None;
        let (_, trace) = gat.attend(&store, &gr).unwrap();
        for (layer, beta) in trace.node_weights.iter().zip(&trace.beta) {
            for head in &layer[0] {
                assert!(head.iter().all(|&w| w >= 0.0));
                assert!((head.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            assert_eq!(beta[EdgeType::Map.index()], 0.0);
            assert!((beta.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_neighbors_match_single() {
        let (store, gat, mut rng) = setup(3);
        let single = graph(&mut rng, 1);
        let mut dup = single.clone();
        dup.neighbors.push(single.neighbors[0].clone());
        dup.neighbors.push(single.neighbors[0].clone());
        let (a, _) = gat.attend(&store, &single).unwrap();
        let (b, _) = gat.attend(&store, &dup).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_invariance() {
        let (store, gat, mut rng) = setup(4);
        let gr = graph(&mut rng, 6);
        let mut perm = gr.clone();
        perm.neighbors.reverse();
        perm.neighbors.swap(1, 4);
        let (a, _) = gat.attend(&store, &gr).unwrap();
        let (b, _) = gat.attend(&store, &perm).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn ego_only_graph_reduces_to_ego() {
        let (store, gat, mut rng) = setup(5);
        let gr = ablate(&graph(&mut rng, 3), &AblationFlags::none());
        assert!(gr.neighbors.is_empty() && gr.map.is_none() && gr.goal.is_none());
        let (force, trace) = gat.attend(&store, &gr).unwrap();
        assert!(force.values().iter().all(|&v| v == 0.0));
        assert_eq!(fuse(&gr.ego, &force, Fusion::Add), gr.ego);
        assert!(trace.beta.iter().all(|b| b == &[0.0; 3]));
    }

    #[test]
    fn ablate_drops_map_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gr = graph(&mut rng, 2);
        let out = ablate(&gr, &AblationFlags { rg: true, n: true, s: false, g: true });
        assert_eq!(out.neighbors.len(), 2);
        assert!(out.map.is_none());
        assert!(out.goal.is_some());
    }

    #[test]
    fn fuse_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_emb(&mut rng);
        let b = random_emb(&mut rng);
        let zero = Embedding::new(vec![0.0; D_MODEL]).unwrap();
        assert_eq!(fuse(&a, &zero, Fusion::Add), a);
        assert_eq!(fuse(&a, &b, Fusion::Add), fuse(&b, &a, Fusion::Add));
        let f = fuse(&a, &b, Fusion::Add);
        let resid: f64 = (0..D_MODEL).map(|i| (f.values()[i] - a.values()[i] - b.values()[i]).powi(2)).sum();
        assert_eq!(resid, 0.0);
    }

    #[test]
    fn attend_gradients_match_finite_differences() {
        let (mut store, gat, mut rng) = setup(8);
        // Two ego groups, one without neighbors, so the empty-type path is
        // exercised too.
        let ego = Tensor::from_vec(2, D_MODEL, (0..2 * D_MODEL).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let nbr = Tensor::from_vec(3, D_MODEL, (0..3 * D_MODEL).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let map = Tensor::from_vec(2, D_MODEL, (0..2 * D_MODEL).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let probe = Tensor::from_vec(2, D_MODEL, (0..2 * D_MODEL).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let build = |g: &mut Graph, s: &ParamStore| {
            let e = g.leaf(ego.clone());
            let sets = [
                Some(NodeSet { nodes: g.leaf(nbr.clone()), group: Arc::new(vec![0, 0, 0]) }),
                Some(NodeSet { nodes: g.leaf(map.clone()), group: Arc::new(vec![0, 1]) }),
                None,
            ];
            let (f, _) = gat.attend_batch(g, s, e, &sets);
            let p = g.leaf(probe.clone());
            let m = g.mul(f, p);
            g.sum_all(m)
        };
        for check in check_params(&mut store, 24, &build) {
            if check.name.contains(".goal.") {
                continue;
            }
            assert!(check.rel_error <= 1e-4, "{}: {}", check.name, check.rel_error);
        }
    }
}
