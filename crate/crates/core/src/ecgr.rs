//! Edge-constricted graph reasoning: an edge map gates the fused region
//! features, the gated map is projected to supportive nodes, and every pixel
//! aggregates over its k nearest supportive nodes with a per-channel max.

use rand::Rng;

use crate::autograd::{ParamId, ParamStore, Real, Session, Tape, Tensor, Var};
use crate::error::{MglError, Result};
use crate::exec::Execution;
use crate::graph::{GraphProjector, NodeSet};
use crate::init;

/// 1×1 map from `C` channels to one logit per pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelClassifier {
    /// `C×1`.
    pub weight: ParamId,
    /// `1×1`.
    pub bias: ParamId,
}

impl PixelClassifier {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, prefix: &str, c: usize, rng: &mut R) -> Self {
        Self {
            weight: store.add(format!("{prefix}.weight"), init::normal(rng, &[c, 1], 1.0 / (c as f64).sqrt())),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[1, 1])),
        }
    }

    pub fn bind<T: Real>(&self, s: &mut Session<'_, T>) -> (Var, Var) {
        (s.param(self.weight), s.param(self.bias))
    }
}

/// Logits and probabilities of an edge map, both `(h·w)×1`.
#[derive(Clone, Copy, Debug)]
pub struct EdgeMap {
    pub logits: Var,
    pub prob: Var,
}

/// Per-pixel linear map followed by a sigmoid.
pub fn edge_classify<T: Real>(tape: &mut Tape<T>, feats: Var, weight: Var, bias: Var) -> Result<EdgeMap> {
    let z = tape.matmul(feats, weight)?;
    let logits = tape.add(z, bias)?;
    Ok(EdgeMap {
        logits,
        prob: tape.sigmoid(logits),
    })
}

/// Gate `F'_C` by the edge map and project the result onto `z` nodes. The
/// edge map also weights each pixel's share of the assignment mass, so an
/// all-zero map leaves every supportive node degenerate.
pub fn supportive_nodes<T: Real>(
    s: &mut Session<'_, T>,
    edge: Var,
    fc_prime: Var,
    proj: &GraphProjector,
    grid: (usize, usize),
) -> Result<NodeSet> {
    let gated = s.tape.mul(fc_prime, edge)?;
    proj.project_weighted(s, gated, grid, edge)
}

/// k-NN links from every grid feature to the supportive nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeSupportGraph {
    pub k: usize,
    /// Row-major `positions×k` node indices, nearest first.
    pub neighbors: Vec<usize>,
    /// Euclidean distances matching `neighbors`.
    pub distances: Vec<f64>,
}

impl EdgeSupportGraph {
    pub fn positions(&self) -> usize {
        self.neighbors.len() / self.k.max(1)
    }

    pub fn of(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }
}

/// Exact k-NN by Euclidean distance; ties go to the lower node index.
pub fn build_knn_graph<T: Real>(
    feats: &Tensor<T>,
    nodes: &Tensor<T>,
    k_nn: usize,
    exec: Execution,
) -> Result<EdgeSupportGraph> {
    let (fs, ns) = (feats.shape(), nodes.shape());
    if fs.len() != 2 || ns.len() != 2 || fs[1] != ns[1] {
        return Err(MglError::shape(format!("knn graph: features {fs:?}, nodes {ns:?}")));
    }
    let (n, z, c) = (fs[0], ns[0], fs[1]);
    if z == 0 {
        return Err(MglError::Invariant("knn graph over zero supportive nodes".into()));
    }
    if k_nn == 0 {
        return Err(MglError::Config("k_nn must be at least 1".into()));
    }
    let k = k_nn.min(z);
    let (f, p) = (feats.data(), nodes.data());
    const CHUNK: usize = 64;
    let parts = exec.map(n.div_ceil(CHUNK), |chunk| {
        let mut idx = Vec::with_capacity(CHUNK * k);
        let mut dist = Vec::with_capacity(CHUNK * k);
        let mut cand: Vec<(f64, usize)> = Vec::with_capacity(z);
        for i in chunk * CHUNK..((chunk + 1) * CHUNK).min(n) {
            let fi = &f[i * c..(i + 1) * c];
            cand.clear();
            cand.extend((0..z).map(|j| {
                let d2: f64 = fi
                    .iter()
                    .zip(&p[j * c..(j + 1) * c])
                    .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
                    .sum();
                (d2, j)
            }));
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(d2, j) in &cand[..k] {
                idx.push(j);
                dist.push(d2.sqrt());
            }
        }
        (idx, dist)
    });
    let mut neighbors = Vec::with_capacity(n * k);
    let mut distances = Vec::with_capacity(n * k);
    for (i, d) in parts {
        neighbors.extend(i);
        distances.extend(d);
    }
    Ok(EdgeSupportGraph {
        k,
        neighbors,
        distances,
    })
}

/// Weights of the edge embedding `φ` and the fusion `Φ = [Φ_node | Φ_edge]`,
/// each `C×C` and applied as `x·Mᵀ`, plus the fusion bias `1×C`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EsgParams {
    pub phi: ParamId,
    pub node_weight: ParamId,
    pub edge_weight: ParamId,
    pub bias: ParamId,
}

impl EsgParams {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, prefix: &str, c: usize, rng: &mut R) -> Self {
        let std = 1.0 / ((2 * c) as f64).sqrt();
        Self {
            phi: store.add(format!("{prefix}.phi"), init::linear(rng, c, c)),
            node_weight: store.add(format!("{prefix}.node_weight"), init::normal(rng, &[c, c], std)),
            edge_weight: store.add(format!("{prefix}.edge_weight"), init::normal(rng, &[c, c], std)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[1, c])),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EsgVars {
    pub phi: Var,
    pub node_weight: Var,
    pub edge_weight: Var,
    pub bias: Var,
}

impl EsgVars {
    pub fn bind<T: Real>(s: &mut Session<'_, T>, p: &EsgParams) -> Self {
        Self {
            phi: s.param(p.phi),
            node_weight: s.param(p.node_weight),
            edge_weight: s.param(p.edge_weight),
            bias: s.param(p.bias),
        }
    }
}

/// `f̆ᵢ = max_j Φ(f'ᵢ, φ(f'ᵢ − p_j))`, max per output channel.
///
/// Both maps are linear, so every candidate splits into a pixel term
/// `Φ_node f'ᵢ + Φ_edge φ f'ᵢ + b` shared by all neighbours and a node term
/// `−Φ_edge φ p_j`; only the node term enters the max.
pub fn esg_conv<T: Real>(
    tape: &mut Tape<T>,
    fc_prime: Var,
    graph: &EdgeSupportGraph,
    support: Var,
    p: EsgVars,
) -> Result<Var> {
    let n = tape.shape(fc_prime)[0];
    let c = tape.shape(fc_prime)[1];
    if graph.k == 0 || graph.positions() != n {
        return Err(MglError::Invariant(format!(
            "esg conv: graph has {} positions with {} neighbours, features have {n} rows",
            graph.positions(),
            graph.k
        )));
    }
    let own = tape.matmul_t(fc_prime, p.node_weight, false, true)?;
    let emb = tape.matmul_t(fc_prime, p.phi, false, true)?;
    let cross = tape.matmul_t(emb, p.edge_weight, false, true)?;
    let pixel = tape.add(own, cross)?;
    let pixel = tape.add(pixel, p.bias)?;
    let node_emb = tape.matmul_t(support, p.phi, false, true)?;
    let node_term = tape.matmul_t(node_emb, p.edge_weight, false, true)?;
    let node_term = tape.neg(node_term);
    let gathered = tape.gather_rows(node_term, &graph.neighbors)?;
    let stacked = tape.reshape(gathered, &[n, graph.k, c])?;
    let best = tape.max(stacked, Some(1))?;
    let best = tape.reshape(best, &[n, c])?;
    tape.add(pixel, best)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EcgrParams {
    /// `C×2C` fusion of `[F̆_E | F̂_C]`.
    pub fuse_weight: ParamId,
    pub fuse_bias: ParamId,
    pub support: GraphProjector,
    pub esg: EsgParams,
    pub k_nn: usize,
}

impl EcgrParams {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c: usize,
        z: usize,
        k_nn: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fuse_weight: store.add(format!("{prefix}.fuse.weight"), init::linear(rng, c, 2 * c)),
            fuse_bias: store.add(format!("{prefix}.fuse.bias"), Tensor::zeros(&[1, c])),
            support: GraphProjector::new(store, &format!("{prefix}.support"), z, c, rng),
            esg: EsgParams::new(store, &format!("{prefix}.esg"), c, rng),
            k_nn,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EcgrOutput {
    /// Refined region features `F̆_C`, pixel-major.
    pub fc: Var,
    pub fc_prime: Var,
    pub edge: EdgeMap,
    pub support: NodeSet,
    pub graph: EdgeSupportGraph,
}

/// Classify edges from `F̆_E`, then refine `F̂_C` under that edge map.
#[allow(clippy::too_many_arguments)]
pub fn ecgr_forward<T: Real>(
    s: &mut Session<'_, T>,
    p: &EcgrParams,
    classifier: &PixelClassifier,
    fc_hat: Var,
    fe_breve: Var,
    grid: (usize, usize),
    exec: Execution,
) -> Result<EcgrOutput> {
    let (w, b) = classifier.bind(s);
    let edge = edge_classify(&mut s.tape, fe_breve, w, b)?;
    ecgr_with_edge(s, p, edge, fc_hat, fe_breve, grid, exec)
}

/// ECGR under a given edge map.
///
/// `F'_C = F̂_C + fuse([F̆_E | F̂_C])` and `F̆_C = F'_C + ESGConv(F'_C)`; the
/// residual terms make zeroed weights an exact identity.
#[allow(clippy::too_many_arguments)]
pub fn ecgr_with_edge<T: Real>(
    s: &mut Session<'_, T>,
    p: &EcgrParams,
    edge: EdgeMap,
    fc_hat: Var,
    fe_breve: Var,
    grid: (usize, usize),
    exec: Execution,
) -> Result<EcgrOutput> {
    let (fw, fb) = (s.param(p.fuse_weight), s.param(p.fuse_bias));
    let esg = EsgVars::bind(s, &p.esg);
    let cat = s.tape.concat(&[fe_breve, fc_hat], 1)?;
    let fused = s.tape.matmul_t(cat, fw, false, true)?;
    let fused = s.tape.add(fused, fb)?;
    let fc_prime = s.tape.add(fc_hat, fused)?;
    let support = supportive_nodes(s, edge.prob, fc_prime, &p.support, grid)?;
    let graph = build_knn_graph(s.tape.value(fc_prime), s.tape.value(support.nodes), p.k_nn, exec)?;
    let refined = esg_conv(&mut s.tape, fc_prime, &graph, support.nodes, esg)?;
    let fc = s.tape.add(fc_prime, refined)?;
    Ok(EcgrOutput {
        fc,
        fc_prime,
        edge,
        support,
        graph,
    })
}
