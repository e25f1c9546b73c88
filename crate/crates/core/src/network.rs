//! The full model: a small multi-task trunk, recurrent RIGR/ECGR stages,
//! 1×1 output classifiers and the joint cross-entropy loss.

use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamId, ParamStore, Real, Session, Tensor, Var};
use crate::ecgr::{self, EcgrParams, PixelClassifier};
use crate::error::{MglError, Result};
use crate::exec::Execution;
use crate::graph::GraphProjector;
use crate::init;
use crate::rigr::{self, RigrParams};

/// Probability clamp inside the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Which interaction modules run between the trunk and the classifiers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Variant {
    /// Trunk heads straight into the classifiers.
    Baseline,
    /// RIGR only.
    RigrOnly,
    /// RIGR followed by ECGR.
    #[default]
    Full,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::RigrOnly => "rigr",
            Variant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "rigr" => Ok(Variant::RigrOnly),
            "full" => Ok(Variant::Full),
            _ => Err(MglError::Config(format!(
                "unknown variant {s:?} (expected baseline, rigr or full)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Output widths of the four trunk stages.
    pub widths: [usize; 4],
    /// Feature channels `C` entering the graph modules.
    pub channels: usize,
    /// Semantic nodes per branch `K`.
    pub nodes: usize,
    /// Supportive nodes `z`.
    pub support: usize,
    pub k_nn: usize,
    /// Recurrent stages `t`.
    pub stages: usize,
    pub variant: Variant,
    /// Give every recurrent stage its own RIGR/ECGR weights.
    pub per_stage_weights: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 48, 64],
            channels: 64,
            nodes: 32,
            support: 32,
            k_nn: 4,
            stages: 2,
            variant: Variant::Full,
            per_stage_weights: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MglError::Config(m.to_string()));
        if self.widths.contains(&0) || self.channels == 0 {
            return bad("layer widths and channels must be positive");
        }
        if self.nodes == 0 || self.support == 0 {
            return bad("node counts K and z must be at least 1");
        }
        if self.k_nn == 0 {
            return bad("k_nn must be at least 1");
        }
        if self.stages == 0 {
            return bad("at least one recurrent stage is required");
        }
        Ok(())
    }

    fn weight_sets(&self) -> usize {
        if self.variant == Variant::Baseline {
            0
        } else if self.per_stage_weights {
            self.stages
        } else {
            1
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    /// Halve the resolution after the activation.
    pub downsample: bool,
}

/// A 1×1 map on pixel-major features: `x·Wᵀ + b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, prefix: &str, out: usize, inp: usize, rng: &mut R) -> Self {
        Self {
            weight: store.add(format!("{prefix}.weight"), init::linear(rng, out, inp)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[1, out])),
        }
    }

    fn apply<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (s.param(self.weight), s.param(self.bias));
        let y = s.tape.matmul_t(x, w, false, true)?;
        s.tape.add(y, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MtfeParams {
    pub convs: [ConvLayer; 4],
    pub cod_head: Linear,
    pub coee_head: Linear,
}

impl MtfeParams {
    fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut inp = 3;
        let convs = std::array::from_fn(|i| {
            let out = cfg.widths[i];
            let layer = ConvLayer {
                weight: store.add(format!("mtfe.conv{}.weight", i + 1), init::kaiming(rng, out, inp, 3)),
                bias: store.add(format!("mtfe.conv{}.bias", i + 1), Tensor::zeros(&[out])),
                downsample: i < 2,
            };
            inp = out;
            layer
        });
        let [_, w2, w3, w4] = cfg.widths;
        Self {
            convs,
            cod_head: Linear::new(store, "mtfe.cod", cfg.channels, w4, rng),
            coee_head: Linear::new(store, "mtfe.coee", cfg.channels, w2 + w3 + w4, rng),
        }
    }
}

fn to_pixel_major<T: Real>(s: &mut Session<'_, T>, x: Var) -> Result<Var> {
    let sh = s.tape.shape(x).to_vec();
    let flat = s.tape.reshape(x, &[sh[0], sh[1] * sh[2]])?;
    s.tape.transpose(flat)
}

/// Trunk and heads. Returns pixel-major `(F_C, F_E)` at quarter resolution.
pub fn mtfe_forward<T: Real>(s: &mut Session<'_, T>, p: &MtfeParams, image: Var) -> Result<(Var, Var, (usize, usize))> {
    let sh = s.tape.shape(image).to_vec();
    if sh.len() != 3 || sh[0] != 3 {
        return Err(MglError::shape(format!("image must be 3×H×W, got {sh:?}")));
    }
    let (hh, ww) = (sh[1], sh[2]);
    if hh == 0 || ww == 0 || hh % 4 != 0 || ww % 4 != 0 {
        return Err(MglError::shape(format!(
            "image size {hh}×{ww} must be a positive multiple of 4"
        )));
    }
    let (h, w) = (hh / 4, ww / 4);
    let mut x = image;
    let mut sides = Vec::with_capacity(3);
    for (i, layer) in p.convs.iter().enumerate() {
        let (k, b) = (s.param(layer.weight), s.param(layer.bias));
        let y = s.tape.conv2d(x, k, Some(b), 1, 1)?;
        x = s.tape.relu(y);
        if layer.downsample {
            let cur = s.tape.shape(x).to_vec();
            x = s.tape.resize_bilinear(x, cur[1] / 2, cur[2] / 2)?;
        }
        if i >= 1 {
            let cur = s.tape.shape(x).to_vec();
            let aligned = if (cur[1], cur[2]) == (h, w) {
                x
            } else {
                s.tape.resize_bilinear(x, h, w)?
            };
            sides.push(to_pixel_major(s, aligned)?);
        }
    }
    let last = *sides.last().expect("three side outputs");
    let fc = p.cod_head.apply(s, last)?;
    let cat = s.tape.concat(&sides, 1)?;
    let fe = p.coee_head.apply(s, cat)?;
    Ok((fc, fe, (h, w)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageParams {
    pub rigr: RigrParams,
    pub ecgr: Option<EcgrParams>,
}

/// Parameters and structure of one model.
#[derive(Clone, Debug)]
pub struct MglModel<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub mtfe: MtfeParams,
    pub stages: Vec<StageParams>,
    pub cod_classifier: PixelClassifier,
    pub coee_classifier: PixelClassifier,
}

/// Probability maps at input resolution, `1×H×W`, plus the logits that
/// produced them and, when requested, every earlier stage's maps.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub c: Var,
    pub e: Var,
    pub c_logits: Var,
    pub e_logits: Var,
    pub intermediate: Vec<(Var, Var)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub gamma: f64,
    /// Also supervise every earlier recurrent stage.
    pub deep_supervision: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            deep_supervision: false,
        }
    }
}

impl<T: Real> MglModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mtfe = MtfeParams::new(&mut params, &config, &mut rng);
        let c = config.channels;
        let stages = (0..config.weight_sets())
            .map(|i| {
                let prefix = format!("stage{i}");
                let rigr = RigrParams::new(&mut params, &format!("{prefix}.rigr"), c, config.nodes, &mut rng);
                let ecgr = (config.variant == Variant::Full).then(|| {
                    EcgrParams::new(
                        &mut params,
                        &format!("{prefix}.ecgr"),
                        c,
                        config.support,
                        config.k_nn,
                        &mut rng,
                    )
                });
                StageParams { rigr, ecgr }
            })
            .collect();
        let cod_classifier = PixelClassifier::new(&mut params, "head.cod", c, &mut rng);
        let coee_classifier = PixelClassifier::new(&mut params, "head.coee", c, &mut rng);
        Ok(Self {
            config,
            params,
            mtfe,
            stages,
            cod_classifier,
            coee_classifier,
        })
    }

    /// Same structure with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> MglModel<U> {
        MglModel {
            config: self.config.clone(),
            params: self.params.cast(),
            mtfe: self.mtfe,
            stages: self.stages.clone(),
            cod_classifier: self.cod_classifier,
            coee_classifier: self.coee_classifier,
        }
    }

    /// Same structure with another parameter store (for example one read
    /// back from disk). Names and shapes must match.
    pub fn with_params(&self, params: ParamStore<T>) -> Result<Self> {
        if params.len() != self.params.len() {
            return Err(MglError::shape(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for id in self.params.ids() {
            if params.name(id) != self.params.name(id) || params.get(id).shape() != self.params.get(id).shape() {
                return Err(MglError::shape(format!(
                    "parameter {} has shape {:?}, expected {} {:?}",
                    params.name(id),
                    params.get(id).shape(),
                    self.params.name(id),
                    self.params.get(id).shape()
                )));
            }
        }
        Ok(Self {
            params,
            ..self.clone()
        })
    }

    pub fn projectors(&self) -> Vec<GraphProjector> {
        self.stages
            .iter()
            .flat_map(|st| {
                let mut v = st.rigr.projectors().to_vec();
                v.extend(st.ecgr.map(|e| e.support));
                v
            })
            .collect()
    }

    pub fn clamp_sigma(&mut self) {
        for p in self.projectors() {
            p.clamp_sigma(&mut self.params);
        }
    }

    /// Parameters of the RIGR and ECGR modules.
    pub fn interaction_params(&self) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| self.params.name(id).starts_with("stage"))
            .collect()
    }

    pub fn zero_interaction_weights(&mut self) {
        for id in self.interaction_params() {
            self.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    fn stage(&self, t: usize) -> Option<&StageParams> {
        if self.stages.is_empty() {
            None
        } else {
            Some(&self.stages[t.min(self.stages.len() - 1)])
        }
    }

    /// Forward pass over a `3×H×W` image already placed on the tape.
    pub fn forward(
        &self,
        s: &mut Session<'_, T>,
        image: Var,
        exec: Execution,
        keep_intermediate: bool,
    ) -> Result<Prediction> {
        let (hh, ww) = {
            let sh = s.tape.shape(image);
            (sh.get(1).copied().unwrap_or(0), sh.get(2).copied().unwrap_or(0))
        };
        let (mut fc, mut fe, grid) = mtfe_forward(s, &self.mtfe, image)?;
        let mut edge_logits = None;
        let mut intermediate = Vec::new();
        let rounds = if self.config.variant == Variant::Baseline { 0 } else { self.config.stages };
        for t in 0..rounds {
            if keep_intermediate && t > 0 {
                intermediate.push(self.head_maps(s, fc, fe, edge_logits, grid, (hh, ww))?);
            }
            let st = *self.stage(t).expect("interaction weights exist");
            let r = rigr::rigr_forward(s, &st.rigr, fc, fe, grid)?;
            fe = r.fe;
            match st.ecgr {
                Some(ep) => {
                    let e = ecgr::ecgr_forward(s, &ep, &self.coee_classifier, r.fc, r.fe, grid, exec)?;
                    fc = e.fc;
                    edge_logits = Some(e.edge.logits);
                }
                None => {
                    fc = r.fc;
                    edge_logits = None;
                }
            }
        }
        let (c, e, c_logits, e_logits) = self.head_maps_full(s, fc, fe, edge_logits, grid, (hh, ww))?;
        Ok(Prediction {
            c,
            e,
            c_logits,
            e_logits,
            intermediate,
        })
    }

    fn head_maps(
        &self,
        s: &mut Session<'_, T>,
        fc: Var,
        fe: Var,
        edge_logits: Option<Var>,
        grid: (usize, usize),
        full: (usize, usize),
    ) -> Result<(Var, Var)> {
        let (c, e, _, _) = self.head_maps_full(s, fc, fe, edge_logits, grid, full)?;
        Ok((c, e))
    }

    fn head_maps_full(
        &self,
        s: &mut Session<'_, T>,
        fc: Var,
        fe: Var,
        edge_logits: Option<Var>,
        grid: (usize, usize),
        full: (usize, usize),
    ) -> Result<(Var, Var, Var, Var)> {
        let (cw, cb) = self.cod_classifier.bind(s);
        let c_low = ecgr::edge_classify(&mut s.tape, fc, cw, cb)?.logits;
        let e_low = match edge_logits {
            Some(l) => l,
            None => {
                let (ew, eb) = self.coee_classifier.bind(s);
                ecgr::edge_classify(&mut s.tape, fe, ew, eb)?.logits
            }
        };
        let mut up = |low: Var| -> Result<(Var, Var)> {
            let grid_map = s.tape.reshape(low, &[1, grid.0, grid.1])?;
            let logits = s.tape.resize_bilinear(grid_map, full.0, full.1)?;
            Ok((s.tape.sigmoid(logits), logits))
        };
        let (c, c_logits) = up(c_low)?;
        let (e, e_logits) = up(e_low)?;
        Ok((c, e, c_logits, e_logits))
    }

    /// Inference on one image; returns `(C, E)` as `1×H×W` maps.
    pub fn predict(&self, image: &Tensor<T>, exec: Execution) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut s = Session::new(&self.params);
        let x = s.tape.constant(image.clone());
        let p = self.forward(&mut s, x, exec, false)?;
        Ok((s.tape.value(p.c).clone(), s.tape.value(p.e).clone()))
    }
}

fn check_binary<T: Real>(name: &str, t: &Tensor<T>) -> Result<()> {
    if t.data().iter().all(|&v| v == T::zero() || v == T::one()) {
        Ok(())
    } else {
        Err(MglError::Data(format!("{name} labels must be 0 or 1")))
    }
}

/// `BCE(C, G_C) + γ·BCE(E, G_E)`, each a pixel mean. Returns the total and
/// the two (unweighted) terms.
pub fn mgl_loss<T: Real>(
    s: &mut Session<'_, T>,
    pred: &Prediction,
    mask: &Tensor<T>,
    edge: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<(Var, Var, Var)> {
    check_binary("mask", mask)?;
    check_binary("edge", edge)?;
    let mut maps = vec![(pred.c, pred.e)];
    if cfg.deep_supervision {
        maps.extend(pred.intermediate.iter().copied());
    }
    let mut total = None;
    let mut first = None;
    for (c, e) in maps {
        let lc = s.tape.bce(c, mask, BCE_EPS)?;
        let le = s.tape.bce(e, edge, BCE_EPS)?;
        let we = s.tape.scale(le, cfg.gamma);
        let l = s.tape.add(lc, we)?;
        first.get_or_insert((lc, le));
        total = Some(match total {
            None => l,
            Some(acc) => s.tape.add(acc, l)?,
        });
    }
    let (lc, le) = first.expect("at least one stage");
    Ok((total.expect("at least one stage"), lc, le))
}
