//! Double-precision finite-difference check of every module's backward pass.
//!
//! Each module is evaluated on a toy instance whose inputs are themselves
//! parameters, so gradients with respect to inputs are checked alongside the
//! weights. Coordinates where central differences at `h` and `h/2` disagree
//! sit on a kink (a max tie, a ReLU hinge, a k-NN reselection) and are
//! skipped and counted.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BackwardFault, ParamStore, Session, Tensor, Var};
use crate::ecgr::{self, EcgrParams, PixelClassifier};
use crate::error::{MglError, Result};
use crate::exec::Execution;
use crate::graph::{self, GraphProjector};
use crate::init;
use crate::network::{mgl_loss, LossConfig, MglModel, ModelConfig, Variant};
use crate::rigr::{self, RigrParams};
use crate::synth::{generate_scene, SceneConfig};

pub const MODULES: [&str; 6] = [
    "tensor-autograd",
    "graph-projection",
    "rigr",
    "ecgr",
    "network-t1",
    "network-t2",
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckConfig {
    /// Grid side `h = w` of the feature maps (images are `4h × 4w`).
    pub grid: usize,
    pub channels: usize,
    pub nodes: usize,
    pub support: usize,
    pub k_nn: usize,
    /// Coordinates sampled per tensor; every coordinate when the tensor is no larger.
    pub coords_per_tensor: usize,
    pub step: f64,
    pub tol: f64,
    /// Largest tolerated share of skipped coordinates per module.
    pub max_skip_fraction: f64,
    pub seed: u64,
    pub fault: Option<BackwardFault>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            grid: 8,
            channels: 8,
            nodes: 4,
            support: 4,
            k_nn: 2,
            coords_per_tensor: usize::MAX,
            step: 1e-5,
            tol: 1e-4,
            max_skip_fraction: 0.25,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModuleResult {
    pub name: &'static str,
    pub worst: f64,
    /// `tensor[index]` of the worst coordinate.
    pub worst_at: String,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
}

impl ModuleResult {
    pub fn line(&self) -> String {
        format!(
            "{:<17} {}  worst rel err {:.3e} at {}  ({} checked, {} skipped)",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.worst,
            self.worst_at,
            self.checked,
            self.skipped
        )
    }
}

/// Relative error with a small absolute floor for vanishing gradients.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn check<F>(
    name: &'static str,
    store: &ParamStore<f64>,
    loss_fn: F,
    cfg: &GradcheckConfig,
    exec: Execution,
) -> Result<ModuleResult>
where
    F: Fn(&mut Session<'_, f64>) -> Result<Var> + Sync,
{
    let mut s = Session::new(store);
    s.tape.inject_fault(cfg.fault);
    let l = loss_fn(&mut s)?;
    let analytic = s.gradients(l)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC0FF_EE00);
    let mut coords = Vec::new();
    for id in store.ids() {
        let n = store.get(id).len();
        if n <= cfg.coords_per_tensor {
            coords.extend((0..n).map(|i| (id, i)));
        } else {
            let mut pick = index::sample(&mut rng, n, cfg.coords_per_tensor).into_vec();
            pick.sort_unstable();
            coords.extend(pick.into_iter().map(|i| (id, i)));
        }
    }
    let eval = |st: &ParamStore<f64>| -> Result<f64> {
        let mut s = Session::new(st);
        let l = loss_fn(&mut s)?;
        Ok(s.tape.value(l).data()[0])
    };
    let h = cfg.step;
    let results = exec.map(coords.len(), |c| -> Result<Option<f64>> {
        let (id, i) = coords[c];
        let mut st = store.clone();
        let x0 = st.get(id).data()[i];
        let mut at = |dx: f64| -> Result<f64> {
            st.get_mut(id).data_mut()[i] = x0 + dx;
            eval(&st)
        };
        let n1 = (at(h)? - at(-h)?) / (2.0 * h);
        let n2 = (at(h / 2.0)? - at(-h / 2.0)?) / h;
        if rel_err(n1, n2) > cfg.tol * 0.1 {
            return Ok(None);
        }
        Ok(Some(rel_err(analytic[id.index()].data()[i], n1)))
    });
    let (mut worst, mut worst_at, mut checked, mut skipped) = (0.0f64, String::from("-"), 0, 0);
    for (c, r) in results.into_iter().enumerate() {
        match r? {
            None => skipped += 1,
            Some(e) => {
                checked += 1;
                if e > worst || e.is_nan() {
                    worst = e;
                    let (id, i) = coords[c];
                    worst_at = format!("{}[{i}]", store.name(id));
                }
            }
        }
    }
    let total = (checked + skipped).max(1);
    let passed = worst < cfg.tol && checked > 0 && (skipped as f64) <= cfg.max_skip_fraction * total as f64;
    Ok(ModuleResult {
        name,
        worst,
        worst_at,
        checked,
        skipped,
        passed,
    })
}

fn weighted_sum(s: &mut Session<'_, f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = s.tape.constant(init::normal(&mut rng, &s.tape.shape(x).to_vec(), 1.0));
    let p = s.tape.mul(x, r)?;
    s.tape.sum(p, None)
}

/// Replace every parameter that starts at exactly zero (biases, `χ`,
/// `log σ`) with small noise so no path is trivially dead.
fn jitter_zeros(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in store.ids().collect::<Vec<_>>() {
        let t = store.get_mut(id);
        if t.data().iter().all(|&v| v == 0.0) {
            let noise: Tensor<f64> = init::normal(&mut rng, t.shape(), 0.2);
            *t = noise;
        }
    }
}

fn primitives(cfg: &GradcheckConfig, exec: Execution) -> Result<ModuleResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed + 1);
    let mut st = ParamStore::<f64>::new();
    let a = st.add("a", init::normal(&mut rng, &[4, 5], 1.0));
    let b = st.add("b", init::normal(&mut rng, &[5, 3], 1.0));
    let x = st.add("image", init::normal(&mut rng, &[2, 6, 6], 1.0));
    let k = st.add("kernel", init::normal(&mut rng, &[3, 2, 3, 3], 0.5));
    let bias = st.add("bias", init::normal(&mut rng, &[3], 0.5));
    let sc = st.add("scalar", Tensor::scalar(0.7));
    let denom = st.add("denom", Tensor::from_fn(&[4, 1], |i| 1.5 + i as f64 * 0.25));
    let target = Tensor::from_fn(&[4, 6], |i| (i % 3 == 0) as u8 as f64);
    let rows = [3usize, 0, 7, 12];
    check(
        "tensor-autograd",
        &st,
        |s| {
            let (a, b, x, k, bias, sc, denom) = (
                s.param(a),
                s.param(b),
                s.param(x),
                s.param(k),
                s.param(bias),
                s.param(sc),
                s.param(denom),
            );
            let t = &mut s.tape;
            let m = t.matmul(a, b)?;
            let sm = t.softmax(m, 1)?;
            let conv = t.conv2d(x, k, Some(bias), 1, 1)?;
            let conv = t.relu(conv);
            let r = t.resize_bilinear(conv, 4, 5)?;
            let r = t.reshape(r, &[3, 20])?;
            let r = t.transpose(r)?;
            let g = t.gather_rows(r, &rows)?;
            let g = t.normalize_rows(g, 1e-8)?;
            let c = t.concat(&[sm, g], 1)?;
            let mx = t.max(c, Some(1))?;
            let q = t.mul(c, mx)?;
            let q = t.div(q, denom)?;
            let q = t.scalar_mul(sc, q)?;
            let e = t.neg(q);
            let e = t.exp(e);
            let p = t.sigmoid(e);
            let l1 = t.bce(p, &target, 1e-7)?;
            let mean = t.mean(q, Some(0))?;
            let mean = t.scale(mean, 0.5);
            let sum = t.sum(mean, None)?;
            let diff = t.sub(l1, sum)?;
            t.add(diff, l1)
        },
        cfg,
        exec,
    )
}

fn features(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Tensor<f64> {
    init::normal(rng, &[n, c], 1.0)
}

fn projection(cfg: &GradcheckConfig, exec: Execution) -> Result<ModuleResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed + 2);
    let (n, c) = (cfg.grid * cfg.grid, cfg.channels);
    let mut st = ParamStore::<f64>::new();
    let proj = GraphProjector::new(&mut st, "proj", cfg.nodes, c, &mut rng);
    let f = st.add("features", features(&mut rng, n, c));
    jitter_zeros(&mut st, cfg.seed + 20);
    let grid = (cfg.grid, cfg.grid);
    check(
        "graph-projection",
        &st,
        |s| {
            let fv = s.param(f);
            let ns = proj.project(s, fv, grid)?;
            let adj = graph::intra_adjacency(&mut s.tape, &ns)?;
            let back = graph::reproject(&mut s.tape, &ns, fv)?;
            let l1 = weighted_sum(s, back, 21)?;
            let l2 = weighted_sum(s, adj.0, 22)?;
            s.tape.add(l1, l2)
        },
        cfg,
        exec,
    )
}

fn rigr_module(cfg: &GradcheckConfig, exec: Execution) -> Result<ModuleResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed + 3);
    let (n, c) = (cfg.grid * cfg.grid, cfg.channels);
    let mut st = ParamStore::<f64>::new();
    let p = RigrParams::new(&mut st, "rigr", c, cfg.nodes, &mut rng);
    let fc = st.add("fc", features(&mut rng, n, c));
    let fe = st.add("fe", features(&mut rng, n, c));
    jitter_zeros(&mut st, cfg.seed + 30);
    let grid = (cfg.grid, cfg.grid);
    check(
        "rigr",
        &st,
        |s| {
            let (fc, fe) = (s.param(fc), s.param(fe));
            let out = rigr::rigr_forward(s, &p, fc, fe, grid)?;
            let l1 = weighted_sum(s, out.fc, 31)?;
            let l2 = weighted_sum(s, out.fe, 32)?;
            s.tape.add(l1, l2)
        },
        cfg,
        exec,
    )
}

fn ecgr_module(cfg: &GradcheckConfig, exec: Execution) -> Result<ModuleResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed + 4);
    let (n, c) = (cfg.grid * cfg.grid, cfg.channels);
    let mut st = ParamStore::<f64>::new();
    let p = EcgrParams::new(&mut st, "ecgr", c, cfg.support, cfg.k_nn, &mut rng);
    let cls = PixelClassifier::new(&mut st, "edge", c, &mut rng);
    let fc = st.add("fc", features(&mut rng, n, c));
    let fe = st.add("fe", features(&mut rng, n, c));
    jitter_zeros(&mut st, cfg.seed + 40);
    let grid = (cfg.grid, cfg.grid);
    check(
        "ecgr",
        &st,
        |s| {
            let (fc, fe) = (s.param(fc), s.param(fe));
            let out = ecgr::ecgr_forward(s, &p, &cls, fc, fe, grid, Execution::Sequential)?;
            let l1 = weighted_sum(s, out.fc, 41)?;
            let l2 = weighted_sum(s, out.edge.logits, 42)?;
            s.tape.add(l1, l2)
        },
        cfg,
        exec,
    )
}

fn network(name: &'static str, stages: usize, cfg: &GradcheckConfig, exec: Execution) -> Result<ModuleResult> {
    let mc = ModelConfig {
        widths: [4, 6, 6, 8],
        channels: cfg.channels,
        nodes: cfg.nodes,
        support: cfg.support,
        k_nn: cfg.k_nn,
        stages,
        variant: Variant::Full,
        per_stage_weights: false,
    };
    let mut model = MglModel::<f64>::new(mc, cfg.seed + 5)?;
    jitter_zeros(&mut model.params, cfg.seed + 50);
    let size = cfg.grid * 4;
    let scene = generate_scene(
        &SceneConfig {
            height: size,
            width: size,
            ..SceneConfig::default()
        },
        cfg.seed + 51,
    )?;
    let smp = scene.to_sample::<f64>();
    let mut st = model.params.clone();
    let img = st.add("image", smp.image.clone());
    model.params = st.clone();
    let model = &model;
    check(
        name,
        &st,
        |s| {
            let x = s.param(img);
            let pred = model.forward(s, x, Execution::Sequential, false)?;
            Ok(mgl_loss(s, &pred, &smp.mask, &smp.edge, &LossConfig::default())?.0)
        },
        cfg,
        exec,
    )
}

pub fn run_module(name: &str, cfg: &GradcheckConfig, exec: Execution) -> Result<ModuleResult> {
    match name {
        "tensor-autograd" => primitives(cfg, exec),
        "graph-projection" => projection(cfg, exec),
        "rigr" => rigr_module(cfg, exec),
        "ecgr" => ecgr_module(cfg, exec),
        "network-t1" => network("network-t1", 1, cfg, exec),
        "network-t2" => network("network-t2", 2, cfg, exec),
        other => Err(MglError::Config(format!("unknown gradcheck module {other:?}"))),
    }
}

pub fn run_suite(cfg: &GradcheckConfig, exec: Execution) -> Result<Vec<ModuleResult>> {
    MODULES.iter().map(|m| run_module(m, cfg, exec)).collect()
}
