//! Shared fixtures for the integration and acceptance targets.
#![allow(dead_code)]

use std::sync::Arc;

use gsgformer::encoders::{EncoderParams, Role, D_MODEL};
use gsgformer::generative::{standard_normal, CvaeHead, HeadConfig};
use gsgformer::nn::gradcheck::{check_inputs, check_params};
use gsgformer::nn::{Graph, ParamStore, Tensor, Var};
use gsgformer::social_graph::{GatParams, NodeSet};
use gsgformer::temporal::TransformerParams;
use gsgformer::types::{AgentClass, AgentState, SemanticMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOL: f64 = 1e-4;

pub fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Reduces an output to a scalar through a fixed random projection so
/// every output entry gets a distinct weight.
fn project(g: &mut Graph, out: Var, probe: &Tensor) -> Var {
    let p = g.leaf(probe.clone());
    let m = g.mul(out, p);
    g.sum_all(m)
}

type InputCase = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Var>);

/// Every primitive tape operation, each with freshly drawn inputs.
fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<InputCase> {
    let mut t = |r: usize, c: usize| rand_tensor(rng, r, c);
    let p23 = t(2, 3);
    let p34 = t(3, 4);
    let mut cases: Vec<InputCase> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($input:expr),*], $probe:expr, |$g:ident, $v:ident| $body:expr) => {{
            let probe = $probe;
            cases.push(($name, vec![$($input),*], Box::new(move |$g: &mut Graph, $v: &[Var]| {
                let o = $body;
                project($g, o, &probe)
            })));
        }};
    }
    case!("matmul", [t(2, 3), t(3, 4)], t(2, 4), |g, v| g.matmul(v[0], v[1]));
    case!("add", [t(2, 3), t(2, 3)], p23.clone(), |g, v| g.add(v[0], v[1]));
    case!("sub", [t(2, 3), t(2, 3)], p23.clone(), |g, v| g.sub(v[0], v[1]));
    case!("mul", [t(2, 3), t(2, 3)], p23.clone(), |g, v| g.mul(v[0], v[1]));
    case!("add_bias", [t(2, 3), t(1, 3)], p23.clone(), |g, v| g.add_bias(v[0], v[1]));
    case!("scale", [t(2, 3)], p23.clone(), |g, v| g.scale(v[0], -1.7));
    case!("relu", [t(2, 3)], p23.clone(), |g, v| g.relu(v[0]));
    case!("elu", [t(2, 3)], p23.clone(), |g, v| g.elu(v[0]));
    case!("leaky_relu", [t(2, 3)], p23.clone(), |g, v| g.leaky_relu(v[0], 0.2));
    case!("tanh", [t(2, 3)], p23.clone(), |g, v| g.tanh(v[0]));
    case!("exp", [t(2, 3)], p23.clone(), |g, v| g.exp(v[0]));
    case!("clamp", [t(2, 3)], p23.clone(), |g, v| g.clamp(v[0], -0.5, 0.5));
    case!("concat_cols", [t(2, 3), t(2, 1)], t(2, 4), |g, v| g.concat_cols(&[v[0], v[1]]));
    case!("slice_cols", [t(2, 5)], p23.clone(), |g, v| g.slice_cols(v[0], 1, 3));
    case!("concat_rows", [t(2, 3), t(1, 3)], t(3, 3), |g, v| g.concat_rows(&[v[0], v[1]]));
    case!("gather_rows", [t(3, 4)], t(4, 4), |g, v| g.gather_rows(v[0], &[2, 0, 2, 1]));
    case!("gather_rows_opt", [t(3, 4)], t(3, 4), |g, v| g.gather_rows_opt(v[0], Arc::new(vec![Some(1), None, Some(1)])));
    case!("scatter_add_rows", [t(3, 4)], t(2, 4), |g, v| g.scatter_add_rows(v[0], Arc::new(vec![1, 0, 1]), 2));
    case!("row_sum", [t(3, 4)], t(3, 1), |g, v| g.row_sum(v[0]));
    case!("mul_col", [t(3, 4), t(3, 1)], p34.clone(), |g, v| g.mul_col(v[0], v[1]));
    case!("layer_norm", [t(3, 4), t(1, 4), t(1, 4)], p34.clone(), |g, v| g.layer_norm(v[0], v[1], v[2]));
    case!("attention", [t(6, 8), t(8, 8), t(8, 8)], t(6, 8), |g, v| {
        g.attention(v[0], v[1], v[2], 2, 2, Some(&[true, false, true, true, true, true, false, true]), false)
    });
    case!("attention_causal", [t(8, 8), t(8, 8), t(8, 8)], t(8, 8), |g, v| g.attention(v[0], v[1], v[2], 2, 4, None, true));
    case!("head_dot", [t(3, 8), t(2, 4)], t(3, 2), |g, v| g.head_dot(v[0], v[1], 2));
    case!("head_mean", [t(3, 8)], p34.clone(), |g, v| g.head_mean(v[0], 2));
    case!("segment_attention", [t(5, 2), t(3, 2), t(5, 8)], t(3, 8), |g, v| {
        g.segment_attention(v[0], v[1], v[2], Arc::new(vec![0, 0, 2, 2, 2]), 3, 2, 0.2)
    });
    case!("masked_softmax", [t(3, 4)], p34.clone(), |g, v| {
        g.masked_softmax(v[0], Arc::new(vec![true, false, true, true, false, false, false, false, true, true, true, true]))
    });
    case!("gmm_nll", [t(3, 4), t(3, 8), t(3, 8), t(3, 2)], t(3, 1), |g, v| g.gmm_nll(v[0], v[1], v[2], v[3]));
    case!("kl_diag", [t(2, 5), t(2, 5), t(2, 5), t(2, 5)], t(2, 1), |g, v| g.kl_diag(v[0], v[1], v[2], v[3]));
    case!("conv3x3", [t(2, 3 * 16), t(4, 27), t(1, 4)], t(2, 4 * 16), |g, v| g.conv3x3(v[0], v[1], v[2], 3, 4, 4));
    case!("avg_pool2", [t(2, 2 * 16)], t(2, 2 * 4), |g, v| g.avg_pool2(v[0], 2, 4, 4));
    let classes: Vec<u8> = (0..2 * 16).map(|_| rng.gen_range(0..6)).collect();
    let classes = Arc::new(classes);
    let probe = rand_tensor(rng, 2, 3 * 16);
    cases.push((
        "onehot_conv3x3",
        vec![rand_tensor(rng, 3, 54), rand_tensor(rng, 1, 3)],
        Box::new(move |g: &mut Graph, v: &[Var]| {
            let o = g.onehot_conv3x3(classes.clone(), 6, 4, 4, v[0], v[1]);
            project(g, o, &probe)
        }),
    ));
    cases
}

fn worst(results: &mut Vec<(String, f64)>, name: &str, err: f64) {
    match results.iter_mut().find(|(n, _)| n == name) {
        Some((_, e)) => *e = e.max(err),
        None => results.push((name.to_string(), err)),
    }
}

fn params_case(results: &mut Vec<(String, f64)>, name: &str, store: &mut ParamStore, coords: usize, build: &dyn Fn(&mut Graph, &ParamStore) -> Var) {
    let checks = check_params(store, coords, build);
    if std::env::var("GRAD_DEBUG").is_ok() {
        for c in &checks {
            if c.rel_error > 1e-6 {
                eprintln!("{name} {} {:.2e}", c.name, c.rel_error);
            }
        }
    }
    let e = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    worst(results, name, e);
}

/// Moves every parameter off its initial value so zero biases do not put
/// rectifier inputs exactly on their kink.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
}

fn random_patch(rng: &mut ChaCha8Rng) -> SemanticMask {
    let grid = (0..64 * 64).map(|_| rng.gen_range(0..6)).collect();
    SemanticMask::new(64, 64, grid, 10.0 / 64.0, [0.0, 0.0]).unwrap()
}

/// Worst relative error per operation over `points` random draws (inputs
/// and weights) per operation.
pub fn gradient_suite(points: usize) -> Vec<(String, f64)> {
    let mut results: Vec<(String, f64)> = Vec::new();
    for point in 0..points as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + point);
        for (name, inputs, build) in primitive_cases(&mut rng) {
            let e = check_inputs(&inputs, build.as_ref()).into_iter().fold(0.0, f64::max);
            worst(&mut results, name, e);
        }

        // Agent-state encoders, ego and neighbor roles with absent steps.
        let mut store = ParamStore::new();
        let enc = EncoderParams::new(&mut store, &mut rng);
        jitter(&mut store, &mut rng);
        let classes = [AgentClass::Pedestrian, AgentClass::Car, AgentClass::Pedestrian, AgentClass::Bus];
        let rows: Vec<Option<(AgentState, AgentClass)>> = classes
            .iter()
            .map(|&c| Some((AgentState::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen(), rng.gen(), 0.0), c)))
            .chain([None])
            .collect();
        let probe = rand_tensor(&mut rng, rows.len(), D_MODEL);
        let ego_probe = rand_tensor(&mut rng, 2, D_MODEL);
        params_case(&mut results, "agent_encoder", &mut store, 6, &|g, s| {
            let a = enc.encode_states(g, s, &rows, Role::Neighbor);
            let b = enc.encode_states(g, s, &rows[..2], Role::Ego);
            let pa = project(g, a, &probe);
            let pb = project(g, b, &ego_probe);
            g.add(pa, pb)
        });

        // Map CNN and goal-condition encoder.
        let patches = [random_patch(&mut rng), random_patch(&mut rng)];
        let hist = rand_tensor(&mut rng, 2 * 8, D_MODEL);
        let probe = rand_tensor(&mut rng, 2, D_MODEL);
        params_case(&mut results, "map_and_goal_encoders", &mut store, 6, &|g, s| {
            let m = enc.encode_maps(g, s, &[&patches[0], &patches[1]]).unwrap();
            let h = g.leaf(hist.clone());
            let c = enc.encode_goal_condition(g, s, h, Some(m)).unwrap();
            project(g, c, &probe)
        });

        // Graph attention over all three node types, one group missing neighbors.
        let mut store = ParamStore::new();
        let gat = GatParams::new(&mut store, &mut rng);
        jitter(&mut store, &mut rng);
        let ego = rand_tensor(&mut rng, 2, D_MODEL);
        let nbr = rand_tensor(&mut rng, 3, D_MODEL);
        let map = rand_tensor(&mut rng, 2, D_MODEL);
        let goal = rand_tensor(&mut rng, 2, D_MODEL);
        let probe = rand_tensor(&mut rng, 2, D_MODEL);
        params_case(&mut results, "graph_attention", &mut store, 8, &|g, s| {
            let e = g.leaf(ego.clone());
            let sets = [
                Some(NodeSet { nodes: g.leaf(nbr.clone()), group: Arc::new(vec![1, 1, 1]) }),
                Some(NodeSet { nodes: g.leaf(map.clone()), group: Arc::new(vec![0, 1]) }),
                Some(NodeSet { nodes: g.leaf(goal.clone()), group: Arc::new(vec![0, 1]) }),
            ];
            let (f, _) = gat.attend_batch(g, s, e, &sets);
            project(g, f, &probe)
        });

        // Transformer encoder and causal decoder blocks.
        let mut store = ParamStore::new();
        let tf = TransformerParams::new(&mut store, &mut rng);
        jitter(&mut store, &mut rng);
        let mem_in = rand_tensor(&mut rng, 2 * 8, D_MODEL);
        let tgt = rand_tensor(&mut rng, 2 * 3, D_MODEL);
        let probe = rand_tensor(&mut rng, 2 * 3, D_MODEL);
        let mut mask = vec![true; 16];
        mask[rng.gen_range(0..8)] = false;
        params_case(&mut results, "transformer", &mut store, 6, &|g, s| {
            let h = g.leaf(mem_in.clone());
            let mem = tf.encode_sequence(g, s, h, 2, Some(&mask), None).unwrap();
            let x = g.leaf(tgt.clone());
            let o = tf.decode(g, s, x, mem, 2, Some(&mask), true, None).unwrap();
            project(g, o, &probe)
        });

        // CVAE heads, with and without the residual mixture.
        for (name, residual) in [("cvae_residual_gmm", true), ("cvae_plain", false)] {
            let cfg = HeadConfig { cond_dim: 6, target_dim: 2, out_dim: 2, latent_dim: 3, components: 3, residual };
            let mut store = ParamStore::new();
            let head = CvaeHead::new(&mut store, "h", cfg, &mut rng);
            jitter(&mut store, &mut rng);
            let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let noise = standard_normal(&mut rng, 3);
            params_case(&mut results, name, &mut store, 8, &|g, s| head.loss_graph(g, s, &x, &y, &noise));
        }
    }
    results
}
