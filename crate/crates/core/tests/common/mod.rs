//! Direct nested-loop evaluations of every graph operation, written from the
//! defining formulas with no shared code paths, plus helpers that run the
//! library versions on random instances.
#![allow(dead_code)]

use mgl::autograd::{Tape, Tensor};
use mgl::ecgr::{self, EdgeSupportGraph, EsgVars};
use mgl::exec::Execution;
use mgl::graph::{self, Adjacency, NodeSet};
use mgl::rigr::{self, CgiVars};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub r: usize,
    pub c: usize,
    pub d: Vec<f64>,
}

impl Mat {
    pub fn zeros(r: usize, c: usize) -> Self {
        Self {
            r,
            c,
            d: vec![0.0; r * c],
        }
    }

    pub fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, std: f64) -> Self {
        Self {
            r,
            c,
            d: (0..r * c).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect(),
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.c + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.d[i * self.c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.d[i * self.c..(i + 1) * self.c]
    }

    pub fn tensor(&self) -> Tensor<f64> {
        Tensor::new(&[self.r, self.c], self.d.clone()).unwrap()
    }

    pub fn of(t: &Tensor<f64>) -> Self {
        let s = t.shape();
        Self {
            r: s[0],
            c: s[1],
            d: t.data().to_vec(),
        }
    }

    pub fn max_diff(&self, t: &Tensor<f64>) -> f64 {
        assert_eq!(t.shape(), [self.r, self.c], "oracle/library shape mismatch");
        self.d
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn softmax_row(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

/// `q_ik ∝ exp(−½ Σ_c ((f_ic − w_kc)/σ_kc)²)`.
pub fn soft_assign(f: &Mat, w: &Mat, ls: &Mat) -> Mat {
    let mut q = Mat::zeros(f.r, w.r);
    for i in 0..f.r {
        let mut row: Vec<f64> = (0..w.r)
            .map(|k| {
                -0.5 * (0..f.c)
                    .map(|c| ((f.at(i, c) - w.at(k, c)) / ls.at(k, c).exp()).powi(2))
                    .sum::<f64>()
            })
            .collect();
        softmax_row(&mut row);
        for k in 0..w.r {
            q.set(i, k, row[k]);
        }
    }
    q
}

/// Node `k`: `(Σ_i a_ik f_i / Σ_i a_ik − w_k)/σ_k`, unit-normalised, with
/// `a_ik = q_ik·weight_i`. Empty or zero residuals give the zero node.
pub fn project(f: &Mat, w: &Mat, ls: &Mat, weights: Option<&[f64]>) -> (Mat, Mat) {
    let q = soft_assign(f, w, ls);
    let mut v = Mat::zeros(w.r, f.c);
    for k in 0..w.r {
        let a: Vec<f64> = (0..f.r).map(|i| q.at(i, k) * weights.map_or(1.0, |ww| ww[i])).collect();
        let mass: f64 = a.iter().sum();
        if mass < 1e-12 {
            continue;
        }
        let mut res = vec![0.0; f.c];
        for (c, r) in res.iter_mut().enumerate() {
            let mean = (0..f.r).map(|i| a[i] * f.at(i, c)).sum::<f64>() / mass;
            *r = (mean - w.at(k, c)) / ls.at(k, c).exp();
        }
        let n = res.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            for (c, r) in res.iter().enumerate() {
                v.set(k, c, r / n);
            }
        }
    }
    (v, q)
}

pub fn adjacency(v: &Mat) -> Mat {
    let mut a = Mat::zeros(v.r, v.r);
    for i in 0..v.r {
        let mut row: Vec<f64> = (0..v.r)
            .map(|j| (0..v.c).map(|c| v.at(i, c) * v.at(j, c)).sum())
            .collect();
        softmax_row(&mut row);
        for j in 0..v.r {
            a.set(i, j, row[j]);
        }
    }
    a
}

/// `y = x·Wᵀ` for a row vector `x`.
fn apply_t(x: &[f64], w: &Mat) -> Vec<f64> {
    (0..w.r).map(|o| (0..w.c).map(|i| w.at(o, i) * x[i]).sum()).collect()
}

/// Query `κ v^e_i`, key `θ v^c_j`, value `γ v^c_j`; attention over `j`, then
/// `v'^e_i = χ Σ_j a_ij value_j + v^e_i`.
pub fn cgi(vc: &Mat, ve: &Mat, theta: &Mat, gamma: &Mat, kappa: &Mat, chi: f64) -> (Mat, Mat) {
    let k = vc.r;
    let keys: Vec<Vec<f64>> = (0..k).map(|j| apply_t(vc.row(j), theta)).collect();
    let vals: Vec<Vec<f64>> = (0..k).map(|j| apply_t(vc.row(j), gamma)).collect();
    let mut a = Mat::zeros(k, k);
    let mut out = Mat::zeros(k, ve.c);
    for i in 0..k {
        let q = apply_t(ve.row(i), kappa);
        let mut row: Vec<f64> = keys.iter().map(|kj| q.iter().zip(kj).map(|(x, y)| x * y).sum()).collect();
        softmax_row(&mut row);
        for c in 0..ve.c {
            let msg: f64 = (0..k).map(|j| row[j] * vals[j][c]).sum();
            out.set(i, c, chi * msg + ve.at(i, c));
        }
        for j in 0..k {
            a.set(i, j, row[j]);
        }
    }
    (out, a)
}

/// `relu(A V W)`.
pub fn gcn(a: &Mat, v: &Mat, w: &Mat) -> Mat {
    let mut out = Mat::zeros(v.r, w.c);
    for i in 0..v.r {
        for o in 0..w.c {
            let mut s = 0.0;
            for j in 0..v.r {
                for c in 0..v.c {
                    s += a.at(i, j) * v.at(j, c) * w.at(c, o);
                }
            }
            out.set(i, o, s.max(0.0));
        }
    }
    out
}

/// `f_i + Σ_k q_ik v_k`.
pub fn reproject(q: &Mat, v: &Mat, f: &Mat) -> Mat {
    let mut out = f.clone();
    for i in 0..f.r {
        for c in 0..f.c {
            let s: f64 = (0..v.r).map(|k| q.at(i, k) * v.at(k, c)).sum();
            out.set(i, c, out.at(i, c) + s);
        }
    }
    out
}

/// Exhaustive all-pairs sort: repeatedly extract the nearest unused node,
/// lower index first on equal distance.
pub fn knn(f: &Mat, p: &Mat, k_nn: usize) -> Vec<Vec<usize>> {
    let k = k_nn.min(p.r);
    (0..f.r)
        .map(|i| {
            let d: Vec<f64> = (0..p.r)
                .map(|j| (0..f.c).map(|c| (f.at(i, c) - p.at(j, c)).powi(2)).sum::<f64>().sqrt())
                .collect();
            let mut used = vec![false; p.r];
            (0..k)
                .map(|_| {
                    let mut best = usize::MAX;
                    for j in 0..p.r {
                        if !used[j] && (best == usize::MAX || d[j] < d[best]) {
                            best = j;
                        }
                    }
                    used[best] = true;
                    best
                })
                .collect()
        })
        .collect()
}

pub struct EsgWeights {
    pub phi: Mat,
    pub node: Mat,
    pub edge: Mat,
    pub bias: Vec<f64>,
}

/// `out_i = max_j [Θ_n f_i + Θ_e(φ f_i − φ p_j) + b]` per channel, over the
/// neighbour list of `i`.
pub fn esg(fp: &Mat, support: &Mat, nbrs: &[Vec<usize>], w: &EsgWeights) -> Mat {
    let mut out = Mat::zeros(fp.r, fp.c);
    for i in 0..fp.r {
        let fi = fp.row(i);
        let own = apply_t(fi, &w.node);
        let ef = apply_t(fi, &w.phi);
        for c in 0..fp.c {
            let mut best = f64::NEG_INFINITY;
            for &j in &nbrs[i] {
                let ep = apply_t(support.row(j), &w.phi);
                let diff: Vec<f64> = ef.iter().zip(&ep).map(|(a, b)| a - b).collect();
                let h = own[c] + apply_t(&diff, &w.edge)[c] + w.bias[c];
                best = best.max(h);
            }
            out.set(i, c, best);
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-pixel BCE with probability clamp `eps`, averaged.
pub fn bce(p: &[f64], y: &[f64], eps: f64) -> f64 {
    p.iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.clamp(eps, 1.0 - eps);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / p.len() as f64
}

/// Threshold sweep over `t = 0.01 … 0.99`, recounting pixels per threshold.
pub fn ods_ois(preds: &[Vec<f64>], gts: &[Vec<u8>]) -> (f64, f64) {
    let f = |tp: f64, fp: f64, fnn: f64| {
        if tp == 0.0 {
            0.0
        } else {
            let (p, r) = (tp / (tp + fp), tp / (tp + fnn));
            2.0 * p * r / (p + r)
        }
    };
    let mut ods: f64 = 0.0;
    let mut per_image = vec![0.0f64; preds.len()];
    for t in 1..=99 {
        let t = t as f64 / 100.0;
        let (mut tp, mut fp, mut fnn) = (0.0, 0.0, 0.0);
        for (n, (p, g)) in preds.iter().zip(gts).enumerate() {
            let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
            for (&pi, &gi) in p.iter().zip(g) {
                let hit = pi >= t;
                if hit && gi == 1 {
                    a += 1.0;
                } else if hit {
                    b += 1.0;
                } else if gi == 1 {
                    c += 1.0;
                }
            }
            per_image[n] = per_image[n].max(f(a, b, c));
            tp += a;
            fp += b;
            fnn += c;
        }
        ods = ods.max(f(tp, fp, fnn));
    }
    (ods, per_image.iter().sum::<f64>() / preds.len() as f64)
}

// ---- library runners -----------------------------------------------------

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn lib_project(f: &Mat, w: &Mat, ls: &Mat, h: usize, wd: usize) -> (Tape<f64>, NodeSet) {
    let mut t = Tape::new();
    let (fv, wv, lv) = (t.constant(f.tensor()), t.constant(w.tensor()), t.constant(ls.tensor()));
    let ns = graph::project(&mut t, fv, wv, lv, (h, wd)).unwrap();
    (t, ns)
}

/// A random graph-operation instance with `n = h·w` pixels.
pub struct Instance {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub c: usize,
    pub f: Mat,
    pub centers: Mat,
    pub ls: Mat,
}

pub fn instance(seed: u64) -> Instance {
    let mut r = rng(seed);
    let (h, w) = (r.random_range(1..6), r.random_range(1..6));
    let k = r.random_range(1..6);
    let c = r.random_range(1..7);
    Instance {
        h,
        w,
        k,
        c,
        f: Mat::random(&mut r, h * w, c, 1.0),
        centers: Mat::random(&mut r, k, c, 1.0),
        ls: Mat::random(&mut r, k, c, 0.3),
    }
}

pub fn err_soft_assign(seed: u64) -> f64 {
    let i = instance(seed);
    let mut t = Tape::new();
    let (f, w, l) = (t.constant(i.f.tensor()), t.constant(i.centers.tensor()), t.constant(i.ls.tensor()));
    let q = graph::soft_assign(&mut t, f, w, l).unwrap();
    soft_assign(&i.f, &i.centers, &i.ls).max_diff(t.value(q))
}

pub fn err_project(seed: u64) -> f64 {
    let i = instance(seed);
    let (t, ns) = lib_project(&i.f, &i.centers, &i.ls, i.h, i.w);
    project(&i.f, &i.centers, &i.ls, None).0.max_diff(t.value(ns.nodes))
}

pub fn err_adjacency(seed: u64) -> f64 {
    let i = instance(seed);
    let (mut t, ns) = lib_project(&i.f, &i.centers, &i.ls, i.h, i.w);
    let a = graph::intra_adjacency(&mut t, &ns).unwrap();
    adjacency(&Mat::of(t.value(ns.nodes))).max_diff(t.value(a.0))
}

pub fn err_reproject(seed: u64) -> f64 {
    let i = instance(seed);
    let (mut t, ns) = lib_project(&i.f, &i.centers, &i.ls, i.h, i.w);
    let fv = t.constant(i.f.tensor());
    let back = graph::reproject(&mut t, &ns, fv).unwrap();
    let (q, v) = (Mat::of(t.value(ns.assign)), Mat::of(t.value(ns.nodes)));
    reproject(&q, &v, &i.f).max_diff(t.value(back))
}

fn node_set(t: &mut Tape<f64>, v: &Mat, n: usize) -> NodeSet {
    NodeSet {
        nodes: t.constant(v.tensor()),
        assign: t.constant(Tensor::full(&[n, v.r], 1.0 / v.r as f64)),
        grid: (n, 1, v.c),
    }
}

pub fn err_cgi(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (k, c) = (r.random_range(1..7), r.random_range(1..7));
    let vc = Mat::random(&mut r, k, c, 1.0);
    let ve = Mat::random(&mut r, k, c, 1.0);
    let ws: Vec<Mat> = (0..3).map(|_| Mat::random(&mut r, c, c, 0.7)).collect();
    let chi: f64 = r.random_range(-1.0..1.0);
    let mut t = Tape::new();
    let (a, b) = (node_set(&mut t, &vc, 4), node_set(&mut t, &ve, 4));
    let vars = CgiVars {
        theta: t.constant(ws[0].tensor()),
        gamma: t.constant(ws[1].tensor()),
        kappa: t.constant(ws[2].tensor()),
        chi: t.constant(Tensor::scalar(chi)),
    };
    let (out, adj) = rigr::cgi(&mut t, &a, &b, vars).unwrap();
    let (o_out, o_adj) = cgi(&vc, &ve, &ws[0], &ws[1], &ws[2], chi);
    o_out.max_diff(t.value(out.nodes)).max(o_adj.max_diff(t.value(adj.0)))
}

pub fn random_stochastic(r: &mut ChaCha8Rng, k: usize) -> Mat {
    let mut a = Mat::random(r, k, k, 1.0);
    for i in 0..k {
        let mut row = a.row(i).to_vec();
        softmax_row(&mut row);
        for j in 0..k {
            a.set(i, j, row[j]);
        }
    }
    a
}

pub fn err_gcn(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (k, c) = (r.random_range(1..7), r.random_range(1..7));
    let a = random_stochastic(&mut r, k);
    let v = Mat::random(&mut r, k, c, 1.0);
    let w = Mat::random(&mut r, c, c, 0.7);
    let mut t = Tape::new();
    let ns = node_set(&mut t, &v, 3);
    let (av, wv) = (t.constant(a.tensor()), t.constant(w.tensor()));
    let out = rigr::graph_reason(&mut t, &ns, Adjacency(av), wv).unwrap();
    gcn(&a, &v, &w).max_diff(t.value(out.nodes))
}

/// Number of neighbour-list entries that differ from the oracle.
pub fn err_knn(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, z, c) = (r.random_range(1..30), r.random_range(1..8), r.random_range(1..6));
    let k_nn = r.random_range(1..6);
    let f = Mat::random(&mut r, n, c, 1.0);
    let mut p = Mat::random(&mut r, z, c, 1.0);
    if z > 1 && seed % 3 == 0 {
        // duplicated node: equal distances must resolve to the lower index
        let dup = p.row(0).to_vec();
        for (cc, v) in dup.into_iter().enumerate() {
            p.set(z - 1, cc, v);
        }
    }
    let g = ecgr::build_knn_graph(&f.tensor(), &p.tensor(), k_nn, Execution::Sequential).unwrap();
    let o = knn(&f, &p, k_nn);
    (0..n).map(|i| g.of(i).iter().zip(&o[i]).filter(|(a, b)| a != b).count()).sum::<usize>() as f64
}

pub fn err_esg(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, z, c) = (r.random_range(1..20), r.random_range(1..6), r.random_range(1..6));
    let k_nn = r.random_range(1..4);
    let fp = Mat::random(&mut r, n, c, 1.0);
    let sp = Mat::random(&mut r, z, c, 1.0);
    let w = EsgWeights {
        phi: Mat::random(&mut r, c, c, 0.7),
        node: Mat::random(&mut r, c, c, 0.7),
        edge: Mat::random(&mut r, c, c, 0.7),
        bias: Mat::random(&mut r, 1, c, 0.5).d,
    };
    let nbrs = knn(&fp, &sp, k_nn);
    let k = k_nn.min(z);
    let graph = EdgeSupportGraph {
        k,
        neighbors: nbrs.iter().flatten().copied().collect(),
        distances: vec![0.0; n * k],
    };
    let mut t = Tape::new();
    let (fv, sv) = (t.constant(fp.tensor()), t.constant(sp.tensor()));
    let vars = EsgVars {
        phi: t.constant(w.phi.tensor()),
        node_weight: t.constant(w.node.tensor()),
        edge_weight: t.constant(w.edge.tensor()),
        bias: t.constant(Tensor::new(&[1, c], w.bias.clone()).unwrap()),
    };
    let out = ecgr::esg_conv(&mut t, fv, &graph, sv, vars).unwrap();
    esg(&fp, &sp, &nbrs, &w).max_diff(t.value(out))
}

pub type OracleCheck = (&'static str, fn(u64) -> f64);

pub const ORACLE_CHECKS: [OracleCheck; 8] = [
    ("soft_assign", err_soft_assign),
    ("project", err_project),
    ("intra_adjacency", err_adjacency),
    ("cgi", err_cgi),
    ("graph_reason", err_gcn),
    ("reproject", err_reproject),
    ("knn", err_knn),
    ("esg_conv", err_esg),
];

/// Worst error of each check over `instances` seeds.
pub fn oracle_sweep(instances: u64) -> Vec<(&'static str, f64)> {
    ORACLE_CHECKS
        .iter()
        .map(|(name, f)| (*name, (0..instances).map(f).fold(0.0, f64::max)))
        .collect()
}
