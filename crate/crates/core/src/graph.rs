//! Pixel-to-node soft clustering and its inverse.
//!
//! Grid features are handled pixel-major: an `(h·w)×C` matrix whose row `i`
//! is the feature vector of pixel `i`. Node embeddings are node-major: a
//! `K×C` matrix whose row `k` is node `k`.

use rand::Rng;

use crate::autograd::{ParamId, ParamStore, Real, Session, Tape, Tensor, Var};
use crate::error::{MglError, Result};
use crate::init;

/// Nodes whose assignment mass falls below this are degenerate.
pub const MASS_FLOOR: f64 = 1e-12;
/// Residual norms at or below this normalise to the zero vector.
pub const NORM_FLOOR: f64 = 1e-8;
/// Lower bound on every learned scale.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// Learnable clustering centres `W` and log-scales `log Σ`, both `K×C`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphProjector {
    pub centers: ParamId,
    pub log_sigma: ParamId,
    pub nodes: usize,
    pub channels: usize,
}

impl GraphProjector {
    /// Centres drawn from `N(0, 1/C)`, scales initialised to 1.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        nodes: usize,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let centers = init::normal(rng, &[nodes, channels], 1.0 / (channels as f64).sqrt());
        Self {
            centers: store.add(format!("{prefix}.centers"), centers),
            log_sigma: store.add(format!("{prefix}.log_sigma"), Tensor::zeros(&[nodes, channels])),
            nodes,
            channels,
        }
    }

    pub fn bind<T: Real>(&self, s: &mut Session<'_, T>) -> (Var, Var) {
        (s.param(self.centers), s.param(self.log_sigma))
    }

    pub fn soft_assign<T: Real>(&self, s: &mut Session<'_, T>, feats: Var) -> Result<Var> {
        let (w, ls) = self.bind(s);
        soft_assign(&mut s.tape, feats, w, ls)
    }

    pub fn project<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        feats: Var,
        grid: (usize, usize),
    ) -> Result<NodeSet> {
        let (w, ls) = self.bind(s);
        project(&mut s.tape, feats, w, ls, grid)
    }

    pub fn project_weighted<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        feats: Var,
        grid: (usize, usize),
        weights: Var,
    ) -> Result<NodeSet> {
        let (w, ls) = self.bind(s);
        project_weighted(&mut s.tape, feats, w, ls, grid, Some(weights))
    }

    /// Enforce `σ ≥ SIGMA_FLOOR` after an optimiser step.
    pub fn clamp_sigma<T: Real>(&self, store: &mut ParamStore<T>) {
        let lo = T::of(SIGMA_FLOOR.ln());
        for v in store.get_mut(self.log_sigma).data_mut() {
            if *v < lo {
                *v = lo;
            }
        }
    }
}

/// Node embeddings together with the assignment that produced them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeSet {
    /// `K×C`, row `k` is node `k`.
    pub nodes: Var,
    /// `(h·w)×K` soft assignment.
    pub assign: Var,
    /// `(h, w, C)` of the grid the nodes came from.
    pub grid: (usize, usize, usize),
}

impl NodeSet {
    pub fn count<T: Real>(&self, tape: &Tape<T>) -> usize {
        tape.shape(self.nodes)[0]
    }

    pub fn with_nodes(self, nodes: Var) -> Self {
        Self { nodes, ..self }
    }
}

/// Row-stochastic `K×K` affinity between nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Adjacency(pub Var);

fn check_feature_dims<T: Real>(tape: &Tape<T>, feats: Var, centers: Var, log_sigma: Var) -> Result<()> {
    let (f, w, s) = (tape.shape(feats), tape.shape(centers), tape.shape(log_sigma));
    if f.len() != 2 || w.len() != 2 || f[1] != w[1] || w != s {
        return Err(MglError::shape(format!(
            "graph projection: features {f:?}, centers {w:?}, log-scales {s:?}"
        )));
    }
    Ok(())
}

/// `q_k^i = softmax_k(−‖(f_i − w_k)/σ_k‖² / 2)`, returned as `(h·w)×K`.
///
/// The squared distance is expanded into three matrix products so the cost
/// stays at two `N×C×K` multiplies.
pub fn soft_assign<T: Real>(tape: &mut Tape<T>, feats: Var, centers: Var, log_sigma: Var) -> Result<Var> {
    check_feature_dims(tape, feats, centers, log_sigma)?;
    let m2 = tape.scale(log_sigma, -2.0);
    let inv_var = tape.exp(m2);
    let f2 = tape.mul(feats, feats)?;
    let quad = tape.matmul_t(f2, inv_var, false, true)?;
    let w_iv = tape.mul(centers, inv_var)?;
    let cross = tape.matmul_t(feats, w_iv, false, true)?;
    let w2_iv = tape.mul(centers, w_iv)?;
    let bias = tape.sum(w2_iv, Some(1))?;
    let bias_row = tape.transpose(bias)?;
    let cross2 = tape.scale(cross, 2.0);
    let d = tape.sub(quad, cross2)?;
    let d = tape.add(d, bias_row)?;
    let logits = tape.scale(d, -0.5);
    tape.softmax(logits, 1)
}

/// Soft-assign features to nodes and aggregate normalised residuals:
/// `v'_k = Σᵢ q_k^i (f_i − w_k)/σ_k / Σᵢ q_k^i`, `v_k = v'_k / ‖v'_k‖`.
pub fn project<T: Real>(
    tape: &mut Tape<T>,
    feats: Var,
    centers: Var,
    log_sigma: Var,
    grid: (usize, usize),
) -> Result<NodeSet> {
    project_weighted(tape, feats, centers, log_sigma, grid, None)
}

/// [`project`] with each pixel's contribution to the assignment mass scaled
/// by a `(h·w)×1` weight. Nodes that receive no weighted mass are degenerate.
pub fn project_weighted<T: Real>(
    tape: &mut Tape<T>,
    feats: Var,
    centers: Var,
    log_sigma: Var,
    grid: (usize, usize),
    weights: Option<Var>,
) -> Result<NodeSet> {
    let n = tape.shape(feats)[0];
    if n != grid.0 * grid.1 {
        return Err(MglError::shape(format!(
            "graph projection: {n} feature rows for a {}×{} grid",
            grid.0, grid.1
        )));
    }
    let q = soft_assign(tape, feats, centers, log_sigma)?;
    let qw = match weights {
        Some(w) => tape.mul(q, w)?,
        None => q,
    };
    let mass_row = tape.sum(qw, Some(0))?;
    let mass = tape.transpose(mass_row)?;
    let weighted = tape.matmul_t(qw, feats, true, false)?;
    let mean = tape.div(weighted, mass)?;
    let resid = tape.sub(mean, centers)?;
    let neg_ls = tape.neg(log_sigma);
    let inv_sigma = tape.exp(neg_ls);
    let mut scaled = tape.mul(resid, inv_sigma)?;
    let floor = T::of(MASS_FLOOR);
    let keep: Vec<T> = tape
        .value(mass)
        .data()
        .iter()
        .map(|&m| if m < floor { T::zero() } else { T::one() })
        .collect();
    if keep.iter().any(|&k| k == T::zero()) {
        let k = keep.len();
        let mask = tape.constant(Tensor::new(&[k, 1], keep)?);
        scaled = tape.mul(scaled, mask)?;
    }
    let nodes = tape.normalize_rows(scaled, NORM_FLOOR)?;
    let c = tape.shape(feats)[1];
    Ok(NodeSet {
        nodes,
        assign: q,
        grid: (grid.0, grid.1, c),
    })
}

/// `A = row_softmax(V Vᵀ)` over node embeddings.
pub fn intra_adjacency<T: Real>(tape: &mut Tape<T>, nodes: &NodeSet) -> Result<Adjacency> {
    let gram = tape.matmul_t(nodes.nodes, nodes.nodes, false, true)?;
    Ok(Adjacency(tape.softmax(gram, 1)?))
}

/// Residual reprojection onto the grid: `Q·V + F`.
pub fn reproject<T: Real>(tape: &mut Tape<T>, nodes: &NodeSet, feats: Var) -> Result<Var> {
    let (qs, vs, fs) = (
        tape.shape(nodes.assign).to_vec(),
        tape.shape(nodes.nodes).to_vec(),
        tape.shape(feats).to_vec(),
    );
    if qs[0] != fs[0] || qs[1] != vs[0] || vs[1] != fs[1] {
        return Err(MglError::shape(format!(
            "reprojection: assignment {qs:?}, nodes {vs:?}, features {fs:?}"
        )));
    }
    let back = tape.matmul(nodes.assign, nodes.nodes)?;
    tape.add(back, feats)
}
