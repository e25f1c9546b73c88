//! Region-induced graph reasoning: semantic graphs for both branches, a
//! one-way cross-graph attention from the region graph to the edge graph,
//! GCN reasoning on each, and residual reprojection.

use rand::Rng;

use crate::autograd::{ParamId, ParamStore, Real, Session, Tape, Tensor, Var};
use crate::error::{MglError, Result};
use crate::graph::{self, Adjacency, GraphProjector, NodeSet};
use crate::init;

/// Row-sum tolerance accepted by [`graph_reason`].
pub const STOCHASTIC_TOL: f64 = 1e-4;

/// Key, value and query transforms (`C×C`, applied as `V·Mᵀ`) and the
/// interaction weight `χ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CgiParams {
    pub theta: ParamId,
    pub gamma: ParamId,
    pub kappa: ParamId,
    pub chi: ParamId,
}

impl CgiParams {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, prefix: &str, c: usize, rng: &mut R) -> Self {
        Self {
            theta: store.add(format!("{prefix}.theta"), init::linear(rng, c, c)),
            gamma: store.add(format!("{prefix}.gamma"), init::linear(rng, c, c)),
            kappa: store.add(format!("{prefix}.kappa"), init::linear(rng, c, c)),
            chi: store.add(format!("{prefix}.chi"), Tensor::scalar(T::zero())),
        }
    }
}

/// Node-feature mixing matrix of one GCN layer, `C×C`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GcnParams {
    pub weight: ParamId,
}

impl GcnParams {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, prefix: &str, c: usize, rng: &mut R) -> Self {
        Self {
            weight: store.add(format!("{prefix}.weight"), init::linear(rng, c, c)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RigrParams {
    pub proj_c: GraphProjector,
    pub proj_e: GraphProjector,
    pub cgi: CgiParams,
    pub gcn_c: GcnParams,
    pub gcn_e: GcnParams,
}

impl RigrParams {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            proj_c: GraphProjector::new(store, &format!("{prefix}.proj_c"), k, c, rng),
            proj_e: GraphProjector::new(store, &format!("{prefix}.proj_e"), k, c, rng),
            cgi: CgiParams::new(store, &format!("{prefix}.cgi"), c, rng),
            gcn_c: GcnParams::new(store, &format!("{prefix}.gcn_c"), c, rng),
            gcn_e: GcnParams::new(store, &format!("{prefix}.gcn_e"), c, rng),
        }
    }

    pub fn projectors(&self) -> [GraphProjector; 2] {
        [self.proj_c, self.proj_e]
    }
}

/// Tape-level inputs to [`cgi`], already bound to parameter leaves.
#[derive(Clone, Copy, Debug)]
pub struct CgiVars {
    pub theta: Var,
    pub gamma: Var,
    pub kappa: Var,
    pub chi: Var,
}

impl CgiVars {
    pub fn bind<T: Real>(s: &mut Session<'_, T>, p: &CgiParams) -> Self {
        Self {
            theta: s.param(p.theta),
            gamma: s.param(p.gamma),
            kappa: s.param(p.kappa),
            chi: s.param(p.chi),
        }
    }
}

/// Cross-graph interaction `C → E`:
/// `A = row_softmax(κ(V_E)·θ(V_C)ᵀ)`, `V'_E = χ·A·γ(V_C) + V_E`.
pub fn cgi<T: Real>(tape: &mut Tape<T>, vc: &NodeSet, ve: &NodeSet, p: CgiVars) -> Result<(NodeSet, Adjacency)> {
    let (sc, se) = (tape.shape(vc.nodes).to_vec(), tape.shape(ve.nodes).to_vec());
    if sc != se {
        return Err(MglError::shape(format!(
            "cross-graph interaction: region nodes {sc:?}, edge nodes {se:?}"
        )));
    }
    let key = tape.matmul_t(vc.nodes, p.theta, false, true)?;
    let value = tape.matmul_t(vc.nodes, p.gamma, false, true)?;
    let query = tape.matmul_t(ve.nodes, p.kappa, false, true)?;
    let sim = tape.matmul_t(query, key, false, true)?;
    let a = tape.softmax(sim, 1)?;
    let msg = tape.matmul(a, value)?;
    let msg = tape.scalar_mul(p.chi, msg)?;
    let out = tape.add(msg, ve.nodes)?;
    Ok((ve.with_nodes(out), Adjacency(a)))
}

/// One GCN layer `ReLU(A·V·W)`.
pub fn graph_reason<T: Real>(tape: &mut Tape<T>, nodes: &NodeSet, adj: Adjacency, weight: Var) -> Result<NodeSet> {
    let a = tape.value(adj.0);
    let k = a.shape()[1];
    for (r, row) in a.data().chunks(k).enumerate() {
        let s: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (s - 1.0).abs() > STOCHASTIC_TOL {
            return Err(MglError::Invariant(format!(
                "adjacency row {r} sums to {s}, expected 1"
            )));
        }
    }
    let prop = tape.matmul(adj.0, nodes.nodes)?;
    let mixed = tape.matmul(prop, weight)?;
    Ok(nodes.with_nodes(tape.relu(mixed)))
}

/// Intermediate node sets of one RIGR pass.
#[derive(Clone, Copy, Debug)]
pub struct RigrTrace {
    pub vc: NodeSet,
    pub ve: NodeSet,
    pub ve_cgi: NodeSet,
    pub vc_reasoned: NodeSet,
    pub ve_reasoned: NodeSet,
    pub inter: Adjacency,
}

#[derive(Clone, Copy, Debug)]
pub struct RigrOutput {
    /// Enhanced region features `F̂_C`, pixel-major.
    pub fc: Var,
    /// Enhanced edge features `F̆_E`, pixel-major.
    pub fe: Var,
    pub trace: RigrTrace,
}

/// Full RIGR pass over pixel-major `(h·w)×C` features.
pub fn rigr_forward<T: Real>(
    s: &mut Session<'_, T>,
    p: &RigrParams,
    fc: Var,
    fe: Var,
    grid: (usize, usize),
) -> Result<RigrOutput> {
    if s.tape.shape(fc) != s.tape.shape(fe) {
        return Err(MglError::shape(format!(
            "rigr: region features {:?}, edge features {:?}",
            s.tape.shape(fc),
            s.tape.shape(fe)
        )));
    }
    let vc = p.proj_c.project(s, fc, grid)?;
    let ve = p.proj_e.project(s, fe, grid)?;
    let cv = CgiVars::bind(s, &p.cgi);
    let (wc, we) = (s.param(p.gcn_c.weight), s.param(p.gcn_e.weight));
    let tape = &mut s.tape;
    let (ve_cgi, inter) = cgi(tape, &vc, &ve, cv)?;
    let ac = graph::intra_adjacency(tape, &vc)?;
    let ae = graph::intra_adjacency(tape, &ve_cgi)?;
    let vc_reasoned = graph_reason(tape, &vc, ac, wc)?;
    let ve_reasoned = graph_reason(tape, &ve_cgi, ae, we)?;
    let fc_hat = graph::reproject(tape, &vc_reasoned, fc)?;
    let fe_breve = graph::reproject(tape, &ve_reasoned, fe)?;
    Ok(RigrOutput {
        fc: fc_hat,
        fe: fe_breve,
        trace: RigrTrace {
            vc,
            ve,
            ve_cgi,
            vc_reasoned,
            ve_reasoned,
            inter,
        },
    })
}
