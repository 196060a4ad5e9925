//! Multi-scale meta-path fusion.
//!
//! Every iteration runs node-level attention separately for each meta-path
//! (edge label), mixes the per-path results with semantic attention, and
//! passes every node through a position-wise feed-forward layer. All reads
//! within an iteration come from the iteration-start states.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ModelConfig;
use crate::data::Modality;
use crate::error::{Error, Result};
use crate::graph::{EdgeLabel, HeteroGraph, NodeKind, PathScale};
use crate::numerics::nn::{FeedForward, LayerNorm, Linear};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

/// Index plan for one meta-path on one graph.
#[derive(Clone, Debug)]
pub struct PathPlan {
    pub label: EdgeLabel,
    /// Distinct nodes touched by the path, ascending.
    pub nodes: Rc<[usize]>,
    /// Destination nodes with a non-empty neighborhood, ascending.
    pub dsts: Rc<[usize]>,
    /// Edges as (src, dst) node ids, sorted by destination then source.
    pub edges: Vec<(usize, usize)>,
    src_local: Rc<[usize]>,
    dst_local: Rc<[usize]>,
    dst_group: Rc<[usize]>,
}

impl PathPlan {
    pub fn new(label: EdgeLabel, mut edges: Vec<(usize, usize)>) -> Result<Self> {
        if edges.is_empty() {
            return Err(Error::Validation(format!("meta-path {label} has no edges")));
        }
        edges.sort_by_key(|&(s, d)| (d, s));
        edges.dedup();
        let mut nodes: Vec<usize> = edges.iter().flat_map(|&(s, d)| [s, d]).collect();
        nodes.sort_unstable();
        nodes.dedup();
        let local = |v: usize| nodes.binary_search(&v).expect("node collected above");
        let mut dsts: Vec<usize> = edges.iter().map(|e| e.1).collect();
        dsts.dedup();
        let group = |v: usize| dsts.binary_search(&v).expect("dst collected above");
        let src_local: Rc<[usize]> = edges.iter().map(|e| local(e.0)).collect();
        let dst_local: Rc<[usize]> = edges.iter().map(|e| local(e.1)).collect();
        let dst_group: Rc<[usize]> = edges.iter().map(|e| group(e.1)).collect();
        Ok(Self {
            label,
            nodes: nodes.into(),
            dsts: dsts.into(),
            edges,
            src_local,
            dst_local,
            dst_group,
        })
    }
}

/// Active meta-paths of one graph plus the connected component of every
/// node under the surviving edges.
#[derive(Clone, Debug)]
pub struct FusionPlan {
    pub paths: Vec<PathPlan>,
    pub component: Vec<usize>,
}

/// Which edges survive the ablation flags and the modality selection.
pub fn path_plans(g: &HeteroGraph, cfg: &ModelConfig) -> Result<FusionPlan> {
    let ab = &cfg.ablation;
    let present = |node: usize| -> bool {
        let kind = g.nodes[node];
        if kind.is_context() {
            return ab.use_context_nodes;
        }
        kind.modality().is_none_or(|m| cfg.modalities.contains(m))
    };
    let mut by_label: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    let order = EdgeLabel::all();
    let mut parent: Vec<usize> = (0..g.node_count()).collect();
    fn root(parent: &mut [usize], mut v: usize) -> usize {
        while parent[v] != v {
            parent[v] = parent[parent[v]];
            v = parent[v];
        }
        v
    }
    for e in &g.edges {
        let keep = match (e.label, e.label.scale()) {
            (EdgeLabel::ToEmotion(_) | EdgeLabel::ToCause(_), _) if !ab.use_context_nodes => false,
            (_, PathScale::Intra) => ab.use_intra,
            (_, PathScale::Inter) => ab.use_inter,
            // self-loops keep every retained node well defined
            (_, PathScale::SelfLoop) => true,
        };
        if keep && present(e.src) && present(e.dst) {
            let pos = order.iter().position(|l| *l == e.label).expect("catalogued label");
            by_label.entry(pos).or_default().push((e.src, e.dst));
            let (a, b) = (root(&mut parent, e.src), root(&mut parent, e.dst));
            parent[a.max(b)] = a.min(b);
        }
    }
    let component = (0..g.node_count()).map(|v| root(&mut parent, v)).collect();
    let paths = by_label
        .into_iter()
        .map(|(pos, edges)| PathPlan::new(order[pos], edges))
        .collect::<Result<_>>()?;
    Ok(FusionPlan { paths, component })
}

/// Per-path weights: `W_phi` (d x d) and the split attention vector `a_phi`
/// stored as a d x 2 matrix, column 0 scoring the destination, column 1 the
/// source.
#[derive(Clone, Debug)]
pub struct MetaPath {
    pub label: EdgeLabel,
    pub transform: ParamId,
    pub attn: ParamId,
}

#[derive(Clone, Debug)]
pub struct FusionLayer {
    pub paths: Vec<MetaPath>,
    pub semantic: Linear,
    pub query: ParamId,
    pub ffn: FeedForward,
    pub norm: LayerNorm,
}

impl FusionLayer {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_h;
        let paths = EdgeLabel::all()
            .into_iter()
            .map(|label| {
                let code = label.code();
                MetaPath {
                    label,
                    transform: store.add(format!("{name}.path.{code}.transform"), Tensor::identity(d)),
                    attn: store.add_glorot(format!("{name}.path.{code}.attn"), d, 2, rng),
                }
            })
            .collect();
        Self {
            paths,
            semantic: Linear::new(store, &format!("{name}.semantic"), d, cfg.d_s, true, rng),
            query: store.add_glorot(format!("{name}.query"), cfg.d_s, 1, rng),
            ffn: FeedForward::new(store, &format!("{name}.pffn"), d, 4 * d, d, rng),
            norm: LayerNorm::new(store, &format!("{name}.pffn_norm"), d, cfg.ln_eps),
        }
    }

    fn path(&self, label: EdgeLabel) -> &MetaPath {
        self.paths.iter().find(|p| p.label == label).expect("every label has a meta-path")
    }
}

#[derive(Clone, Debug)]
pub struct FusionParams {
    pub layers: Vec<FusionLayer>,
    pub iterations: usize,
    pub leaky_slope: f64,
}

impl FusionParams {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        if !(1..=8).contains(&cfg.fusion_layers) {
            return Err(Error::Config(format!("fusion iterations must be in 1..=8, got {}", cfg.fusion_layers)));
        }
        let blocks = if cfg.per_iteration_params { cfg.fusion_layers } else { 1 };
        let layers = (0..blocks)
            .map(|l| {
                let name = if cfg.per_iteration_params { format!("fusion.{l}") } else { "fusion".to_string() };
                FusionLayer::new(store, &name, cfg, rng)
            })
            .collect();
        Ok(Self {
            layers,
            iterations: cfg.fusion_layers,
            leaky_slope: cfg.leaky_slope,
        })
    }

    fn layer(&self, iteration: usize) -> &FusionLayer {
        &self.layers[iteration.min(self.layers.len() - 1)]
    }
}

/// Node-level attention for one path. Returns `Z` for `plan.dsts` (one row
/// each, in order) and the per-edge weights aligned with `plan.edges`.
pub fn node_attention(tape: &mut Tape, states: Var, transform: Var, attn: Var, plan: &PathPlan, slope: f64) -> Result<(Var, Var)> {
    let x = tape.gather_rows(states, plan.nodes.clone())?;
    let x = tape.matmul(x, transform)?;
    let parts = tape.matmul(x, attn)?;
    let dst_part = tape.gather_rows(parts, plan.dst_local.clone())?;
    let dst_part = tape.slice_cols(dst_part, 0, 1)?;
    let src_part = tape.gather_rows(parts, plan.src_local.clone())?;
    let src_part = tape.slice_cols(src_part, 1, 1)?;
    let score = tape.add(dst_part, src_part)?;
    let score = tape.leaky_relu(score, slope)?;
    let alpha = tape.segment_softmax(score, plan.dst_group.clone())?;
    let msgs = tape.gather_rows(x, plan.src_local.clone())?;
    let msgs = tape.scale_rows(msgs, alpha)?;
    let agg = tape.scatter_add_rows(msgs, plan.dst_group.clone(), plan.dsts.len())?;
    Ok((tape.elu(agg)?, alpha))
}

/// Semantic attention across paths. `per_path[p]` holds the `Z` rows for
/// `plans[p].dsts`. The importance of a path is the mean of
/// `q . tanh(W_s z + b_s)` over the nodes carrying it, taken within each
/// connected component (`component[v]` labels node `v`) so nodes that cannot
/// exchange messages stay independent. Returns the mixed `n_nodes x d`
/// states (rows of nodes without any path are zero), the per-entry weights,
/// and the entries as (node, path position) in the same order.
#[allow(clippy::too_many_arguments)]
pub fn semantic_attention(
    tape: &mut Tape,
    per_path: &[Var],
    plans: &[PathPlan],
    component: &[usize],
    semantic: Var,
    semantic_bias: Var,
    query: Var,
    n_nodes: usize,
) -> Result<(Var, Var, Vec<(usize, usize)>)> {
    let mut scores = Vec::with_capacity(per_path.len());
    let mut entries = Vec::new();
    for (p, (&z, plan)) in per_path.iter().zip(plans).enumerate() {
        let t = tape.matmul(z, semantic)?;
        let t = tape.add_row(t, semantic_bias)?;
        let t = tape.tanh(t)?;
        let s = tape.matmul(t, query)?;
        let mut comps: Vec<usize> = plan.dsts.iter().map(|&v| component[v]).collect();
        comps.sort_unstable();
        comps.dedup();
        let group: Rc<[usize]> = plan
            .dsts
            .iter()
            .map(|&v| comps.binary_search(&component[v]).expect("component listed"))
            .collect();
        let w = if comps.len() == 1 {
            tape.mean_rows(s)?
        } else {
            let mut counts = vec![0.0; comps.len()];
            for &c in group.iter() {
                counts[c] += 1.0;
            }
            let inv: Rc<[f64]> = counts.iter().map(|c| 1.0 / c).collect();
            let total = tape.scatter_add_rows(s, group.clone(), comps.len())?;
            tape.mul_const(total, inv)?
        };
        let spread: Rc<[usize]> = if comps.len() == 1 { vec![0; plan.dsts.len()].into() } else { group };
        scores.push(tape.gather_rows(w, spread)?);
        entries.extend(plan.dsts.iter().map(|&v| (v, p)));
    }
    let scores = tape.concat_rows(&scores)?;
    let node_of: Rc<[usize]> = entries.iter().map(|e| e.0).collect();
    let beta = tape.segment_softmax(scores, node_of.clone())?;
    let z = tape.concat_rows(per_path)?;
    let z = tape.scale_rows(z, beta)?;
    let out = tape.scatter_add_rows(z, node_of, n_nodes)?;
    Ok((out, beta, entries))
}

/// `LN(Z + W2 ReLU(W1 Z + b1) + b2)` on every row.
pub fn pffn(tape: &mut Tape, store: &ParamStore, ffn: &FeedForward, norm: &LayerNorm, z: Var) -> Result<Var> {
    let f = ffn.forward(tape, store, z)?;
    let s = tape.add(z, f)?;
    norm.forward(tape, store, s)
}

#[derive(Clone, Debug, Serialize)]
pub struct EdgeWeight {
    pub src: usize,
    pub dst: usize,
    pub alpha: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PathTrace {
    pub path: String,
    pub edges: Vec<EdgeWeight>,
}

#[derive(Clone, Debug, Serialize)]
pub struct PathWeight {
    pub node: usize,
    pub path: String,
    pub beta: f64,
}

/// Attention weights of one fusion iteration.
#[derive(Clone, Debug, Serialize)]
pub struct IterationTrace {
    pub paths: Vec<PathTrace>,
    pub semantic: Vec<PathWeight>,
}

pub struct FusionOutput {
    pub z_e: Var,
    pub z_c: Var,
    /// Final states of all graph nodes.
    pub states: Var,
    pub trace: Option<Vec<IterationTrace>>,
}

/// Inverted dropout applied to node states after each PFFN during training.
/// The mask of iteration `l` is drawn from `seed + l`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    pub rate: f64,
    pub seed: u64,
}

impl Dropout {
    fn apply(&self, tape: &mut Tape, x: Var, iteration: usize) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(iteration as u64));
        let keep = 1.0 / (1.0 - self.rate);
        let mask: Rc<[f64]> = (0..tape.value(x).len())
            .map(|_| if rng.random::<f64>() < self.rate { 0.0 } else { keep })
            .collect();
        tape.mul_const(x, mask)
    }
}

/// Runs all iterations and reads off the emotion and cause context states
/// (or the text states when context nodes are disabled).
#[allow(clippy::too_many_arguments)]
pub fn fuse(
    tape: &mut Tape,
    store: &ParamStore,
    params: &FusionParams,
    g: &HeteroGraph,
    init: Var,
    cfg: &ModelConfig,
    record: bool,
    dropout: Option<Dropout>,
) -> Result<FusionOutput> {
    let plan = path_plans(g, cfg)?;
    let plans = &plan.paths;
    let n_nodes = g.node_count();
    let mut states = init;
    let mut trace = record.then(Vec::new);
    for it in 0..params.iterations {
        let layer = params.layer(it);
        let mut per_path = Vec::with_capacity(plans.len());
        let mut alphas = Vec::with_capacity(plans.len());
        for plan in plans {
            let mp = layer.path(plan.label);
            let w = tape.param(store, mp.transform);
            let a = tape.param(store, mp.attn);
            let (z, alpha) = node_attention(tape, states, w, a, plan, params.leaky_slope)?;
            per_path.push(z);
            alphas.push(alpha);
        }
        let ws = tape.param(store, layer.semantic.weight);
        let bs = tape.param(store, layer.semantic.bias.expect("semantic transform has a bias"));
        let q = tape.param(store, layer.query);
        let (mixed, beta, entries) = semantic_attention(tape, &per_path, plans, &plan.component, ws, bs, q, n_nodes)?;
        if let Some(trace) = trace.as_mut() {
            trace.push(IterationTrace {
                paths: plans
                    .iter()
                    .zip(&alphas)
                    .map(|(plan, &alpha)| PathTrace {
                        path: plan.label.code(),
                        edges: plan
                            .edges
                            .iter()
                            .zip(tape.value(alpha).data())
                            .map(|(&(src, dst), &alpha)| EdgeWeight { src, dst, alpha })
                            .collect(),
                    })
                    .collect(),
                semantic: entries
                    .iter()
                    .zip(tape.value(beta).data())
                    .map(|(&(node, p), &beta)| PathWeight {
                        node,
                        path: plans[p].label.code(),
                        beta,
                    })
                    .collect(),
            });
        }
        states = pffn(tape, store, &layer.ffn, &layer.norm, mixed)?;
        if let Some(d) = &dropout {
            states = d.apply(tape, states, it)?;
        }
    }
    let read = |f: fn(usize) -> NodeKind| -> Rc<[usize]> { (1..=g.n).map(|i| g.node_id(f(i))).collect() };
    let (e_rows, c_rows) = if cfg.ablation.use_context_nodes {
        (read(NodeKind::EmotionCtx), read(NodeKind::CauseCtx))
    } else {
        let t = read(|i| NodeKind::modality_node(Modality::Text, i));
        (t.clone(), t)
    };
    let z_e = tape.gather_rows(states, e_rows)?;
    let z_c = tape.gather_rows(states, c_rows)?;
    Ok(FusionOutput { z_e, z_c, states, trace })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::config::Ablation;
    use crate::graph::{build_super_graph, expand_super_edges};

    fn graph(speakers: &[u8], k: usize) -> HeteroGraph {
        let mut g = build_super_graph(speakers, k).unwrap();
        expand_super_edges(&mut g);
        g
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn cfg(d: usize, ablation: Ablation) -> ModelConfig {
        ModelConfig {
            d_h: d,
            d_s: d,
            ablation,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn scalar_hand_example() {
        let plan = PathPlan::new(EdgeLabel::SelfLoop, vec![(1, 0), (2, 0)]).unwrap();
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::from_rows(&[[1.0], [1.0], [2.0]]));
        let w = tape.constant(Tensor::identity(1));
        let a = tape.constant(Tensor::from_rows(&[[0.0, 1.0]]));
        let (z, alpha) = node_attention(&mut tape, s, w, a, &plan, 0.2).unwrap();
        let al = tape.value(alpha).data();
        assert!((al[0] - 0.268941).abs() < 1e-5 && (al[1] - 0.731059).abs() < 1e-5);
        assert!((tape.value(z).item() - 1.731059).abs() < 1e-5);
    }

    #[test]
    fn singleton_and_symmetric_neighborhoods() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plan = PathPlan::new(EdgeLabel::SelfLoop, vec![(1, 0), (0, 2), (1, 2), (3, 2)]).unwrap();
        let mut tape = Tape::new();
        let row = random(1, 3, &mut rng);
        let mut st = random(4, 3, &mut rng);
        for r in [0, 1, 3] {
            st.data_mut()[r * 3..r * 3 + 3].copy_from_slice(row.data());
        }
        let s = tape.constant(st);
        let w = tape.constant(random(3, 3, &mut rng));
        let a = tape.constant(random(3, 2, &mut rng));
        let (z, alpha) = node_attention(&mut tape, s, w, a, &plan, 0.2).unwrap();
        let al = tape.value(alpha).data().to_vec();
        // edges sorted by dst: (1,0) then (0,2),(1,2),(3,2)
        assert_eq!(al[0], 1.0);
        for v in &al[1..] {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        // singleton: Z = ELU(W h_src)
        let wv = tape.value(w).clone();
        for c in 0..3 {
            let lin: f64 = (0..3).map(|k| row.data()[k] * wv.get(k, c)).sum();
            let elu = if lin > 0.0 { lin } else { lin.exp_m1() };
            assert!((tape.value(z).get(0, c) - elu).abs() < 1e-12);
        }
    }

    #[test]
    fn semantic_attention_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p1 = PathPlan::new(EdgeLabel::SelfLoop, vec![(0, 0), (1, 1)]).unwrap();
        let p2 = PathPlan::new(EdgeLabel::Global(Modality::Text), vec![(1, 0)]).unwrap();
        let mut tape = Tape::new();
        let z1 = tape.constant(random(2, 3, &mut rng));
        let z2 = tape.constant(random(1, 3, &mut rng));
        let ws = tape.constant(random(3, 3, &mut rng));
        let bs = tape.constant(random(1, 3, &mut rng));
        let q0 = tape.constant(Tensor::zeros(&[3, 1]));
        let (out, beta, entries) = semantic_attention(&mut tape, &[z1, z2], &[p1.clone(), p2.clone()], &[0, 0], ws, bs, q0, 2).unwrap();
        assert_eq!(entries, vec![(0, 0), (1, 0), (0, 1)]);
        assert_eq!(tape.value(beta).data(), &[0.5, 1.0, 0.5]);
        let o = tape.value(out).clone();
        for c in 0..3 {
            let avg = 0.5 * tape.value(z1).get(0, c) + 0.5 * tape.value(z2).get(0, c);
            assert!((o.get(0, c) - avg).abs() < 1e-15);
            assert_eq!(o.get(1, c), tape.value(z1).get(1, c));
        }
    }

    #[test]
    fn pffn_layer_norm_example() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let ffn = FeedForward::new(&mut store, "f", 2, 8, 2, &mut rng);
        let norm = LayerNorm::new(&mut store, "n", 2, 0.0);
        for lin in [&ffn.inner, &ffn.outer] {
            store.get_mut(lin.weight).data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_rows(&[[1.0, 3.0], [1.0, 3.0]]));
        let y = pffn(&mut tape, &store, &ffn, &norm, z).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 1.0, -1.0, 1.0]);
    }

    fn run(g: &HeteroGraph, cfg: &ModelConfig, init: &Tensor, seed: u64) -> (Tensor, Tensor, Vec<IterationTrace>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = FusionParams::new(&mut store, cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let s = tape.constant(init.clone());
        let out = fuse(&mut tape, &store, &params, g, s, cfg, true, None).unwrap();
        (tape.value(out.z_e).clone(), tape.value(out.z_c).clone(), out.trace.unwrap())
    }

    #[test]
    fn attention_weights_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = graph(&[0, 1, 0, 2, 1, 0], 2);
        let c = cfg(6, Ablation::default());
        let init = random(g.node_count(), 6, &mut rng);
        let (_, _, trace) = run(&g, &c, &init, 1);
        assert_eq!(trace.len(), c.fusion_layers);
        for it in &trace {
            for p in &it.paths {
                let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
                for e in &p.edges {
                    *sums.entry(e.dst).or_default() += e.alpha;
                }
                assert!(sums.values().all(|s| (s - 1.0).abs() < 1e-9));
            }
            let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
            for w in &it.semantic {
                *sums.entry(w.node).or_default() += w.beta;
            }
            assert_eq!(sums.len(), g.node_count());
            assert!(sums.values().all(|s| (s - 1.0).abs() < 1e-9));
        }
    }

    fn perturb_rows(t: &Tensor, rows: &[usize], delta: f64) -> Tensor {
        let mut t = t.clone();
        let c = t.cols();
        for &r in rows {
            for v in &mut t.data_mut()[r * c..(r + 1) * c] {
                *v += delta;
            }
        }
        t
    }

    #[test]
    fn without_intra_context_ignores_audio_video() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = graph(&[0, 1, 0], 1);
        let c = cfg(4, Ablation { use_intra: false, ..Ablation::default() });
        let init = random(g.node_count(), 4, &mut rng);
        let av: Vec<usize> = (1..=3)
            .flat_map(|i| [g.node_id(NodeKind::AudioMod(i)), g.node_id(NodeKind::VideoMod(i))])
            .collect();
        let (ze, zc, _) = run(&g, &c, &init, 2);
        let (ze2, zc2, _) = run(&g, &c, &perturb_rows(&init, &av, 0.9), 2);
        assert_eq!(ze, ze2);
        assert_eq!(zc, zc2);
    }

    #[test]
    fn without_inter_utterances_are_isolated() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = graph(&[0, 1, 0, 1], 2);
        let c = cfg(4, Ablation { use_inter: false, ..Ablation::default() });
        let init = random(g.node_count(), 4, &mut rng);
        let (ze, zc, _) = run(&g, &c, &init, 3);
        for j in 1..=4usize {
            let rows: Vec<usize> = (0..5).map(|r| 5 * (j - 1) + r).collect();
            let (ze2, zc2, _) = run(&g, &c, &perturb_rows(&init, &rows, 0.5), 3);
            for i in (1..=4usize).filter(|&i| i != j) {
                assert_eq!(ze.row(i - 1), ze2.row(i - 1));
                assert_eq!(zc.row(i - 1), zc2.row(i - 1));
            }
            assert_ne!(ze.row(j - 1), ze2.row(j - 1));
        }
    }

    #[test]
    fn fusion_flags_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = graph(&[0, 1, 1], 1);
        let init = random(g.node_count(), 4, &mut rng);
        let all = cfg(4, Ablation::default());
        let none = cfg(
            4,
            Ablation {
                use_context_nodes: false,
                use_inter: false,
                use_intra: false,
            },
        );
        let (a, _, _) = run(&g, &all, &init, 4);
        let (b, _, _) = run(&g, &none, &init, 4);
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    #[test]
    fn text_only_drops_other_modalities() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let g = graph(&[0, 1], 1);
        let mut c = cfg(4, Ablation::default());
        c.modalities = crate::config::ModalitySet::TEXT;
        let plans = path_plans(&g, &c).unwrap();
        for p in &plans.paths {
            for &(s, d) in &p.edges {
                for v in [s, d] {
                    let m = g.nodes[v].modality();
                    assert!(m.is_none() || m == Some(Modality::Text) || s == d);
                }
            }
        }
        let init = random(g.node_count(), 4, &mut rng);
        let av: Vec<usize> = (1..=2).map(|i| g.node_id(NodeKind::AudioMod(i))).collect();
        let (ze, _, _) = run(&g, &c, &init, 5);
        let (ze2, _, _) = run(&g, &c, &perturb_rows(&init, &av, 1.0), 5);
        assert_eq!(ze, ze2);
    }

    #[test]
    fn bounded_inputs_stay_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = graph(&[0, 1, 2, 0], 3);
        let mut c = cfg(4, Ablation::default());
        c.fusion_layers = 8;
        let init = random(g.node_count(), 4, &mut rng);
        let big = Tensor::matrix(init.rows(), 4, init.data().iter().map(|v| v * 1e3).collect()).unwrap();
        let (ze, zc, _) = run(&g, &c, &big, 6);
        assert!(ze.is_finite() && zc.is_finite());
    }

    #[test]
    fn update_is_independent_of_node_order() {
        // Relabeling nodes inside a plan must not change results: rebuild the
        // same path with edges given in reverse order.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let edges = vec![(0, 1), (2, 1), (1, 0), (2, 2), (0, 2)];
        let fwd = PathPlan::new(EdgeLabel::SelfLoop, edges.clone()).unwrap();
        let rev = PathPlan::new(EdgeLabel::SelfLoop, edges.into_iter().rev().collect()).unwrap();
        let mut tape = Tape::new();
        let s = tape.constant(random(3, 2, &mut rng));
        let w = tape.constant(random(2, 2, &mut rng));
        let a = tape.constant(random(2, 2, &mut rng));
        let (z1, _) = node_attention(&mut tape, s, w, a, &fwd, 0.2).unwrap();
        let (z2, _) = node_attention(&mut tape, s, w, a, &rev, 0.2).unwrap();
        assert_eq!(tape.value(z1), tape.value(z2));
    }
}
