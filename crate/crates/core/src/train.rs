//! Mini-batch SGD over scene samples.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{sgd_poly_step, Real, Session, SgdConfig, SgdState, Tensor};
use crate::error::{MglError, Result};
use crate::exec::Execution;
use crate::network::{mgl_loss, LossConfig, MglModel};

/// One training example in model precision: image `3×H×W`, labels `1×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub image: Tensor<T>,
    pub mask: Tensor<T>,
    pub edge: Tensor<T>,
}

impl<T: Real> Sample<T> {
    /// Mirror left to right.
    pub fn flipped(&self) -> Self {
        fn flip<T: Real>(t: &Tensor<T>) -> Tensor<T> {
            let sh = t.shape();
            let w = sh[sh.len() - 1];
            let mut out = t.clone();
            for (dst, src) in out.data_mut().chunks_mut(w).zip(t.data().chunks(w)) {
                for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
                    *d = *s;
                }
            }
            out
        }
        Self {
            image: flip(&self.image),
            mask: flip(&self.mask),
            edge: flip(&self.edge),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub batch: usize,
    pub loss: LossConfig,
    pub seed: u64,
    pub flip: bool,
}

/// Loss of one step, measured before the update, and the rate used.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Mean loss and mean parameter gradients over `samples`. Per-sample passes
/// run on `exec`; their results are summed in sample order.
pub fn batch_gradients<T: Real>(
    model: &MglModel<T>,
    samples: &[&Sample<T>],
    loss: &LossConfig,
    exec: Execution,
) -> Result<(f64, Vec<Tensor<T>>)> {
    if samples.is_empty() {
        return Err(MglError::Data("empty batch".into()));
    }
    let per = exec.map(samples.len(), |i| -> Result<(f64, Vec<Tensor<T>>)> {
        let smp = samples[i];
        let mut s = Session::new(&model.params);
        let x = s.tape.constant(smp.image.clone());
        let pred = model.forward(&mut s, x, Execution::Sequential, loss.deep_supervision)?;
        let (l, _, _) = mgl_loss(&mut s, &pred, &smp.mask, &smp.edge, loss)?;
        let lv = s.tape.value(l).data()[0].as_f64();
        Ok((lv, s.gradients(l)?))
    });
    let scale = T::of(1.0 / samples.len() as f64);
    let mut total = 0.0;
    let mut acc: Option<Vec<Tensor<T>>> = None;
    for r in per {
        let (lv, g) = r?;
        total += lv;
        match &mut acc {
            None => acc = Some(g),
            Some(a) => {
                for (x, y) in a.iter_mut().zip(&g) {
                    for (p, q) in x.data_mut().iter_mut().zip(y.data()) {
                        *p += *q;
                    }
                }
            }
        }
    }
    let mut grads = acc.expect("nonempty batch");
    for g in &mut grads {
        g.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Ok((total / samples.len() as f64, grads))
}

/// Model plus optimiser state; everything a resumed run needs.
#[derive(Clone, Debug)]
pub struct Trainer<T: Real> {
    pub model: MglModel<T>,
    pub state: SgdState<T>,
    pub iter: usize,
    pub cfg: TrainConfig,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: MglModel<T>, cfg: TrainConfig) -> Self {
        let state = SgdState::new(&model.params);
        Self {
            model,
            state,
            iter: 0,
            cfg,
        }
    }

    /// Sample indices for iteration `iter`: a fresh permutation per epoch,
    /// seeded by `(seed, epoch)`, walked in batch-sized windows.
    pub fn batch_indices(&self, iter: usize, n: usize) -> Vec<usize> {
        let b = self.cfg.batch.clamp(1, n);
        let per_epoch = n / b;
        let (epoch, slot) = (iter / per_epoch, iter % per_epoch);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        perm.shuffle(&mut rng);
        perm[slot * b..(slot + 1) * b].to_vec()
    }

    fn flips(&self, iter: usize, count: usize) -> Vec<bool> {
        if !self.cfg.flip {
            return vec![false; count];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.rotate_left(17) ^ iter as u64);
        (0..count).map(|_| rand::Rng::random_bool(&mut rng, 0.5)).collect()
    }

    /// Forward, backward, momentum SGD step and scale clamp.
    pub fn step(&mut self, data: &[Sample<T>], exec: Execution) -> Result<StepRecord> {
        if data.is_empty() {
            return Err(MglError::Data("empty training set".into()));
        }
        let idx = self.batch_indices(self.iter, data.len());
        let flips = self.flips(self.iter, idx.len());
        let flipped: Vec<Sample<T>> = idx
            .iter()
            .zip(&flips)
            .filter(|(_, &f)| f)
            .map(|(&i, _)| data[i].flipped())
            .collect();
        let mut fl = flipped.iter();
        let batch: Vec<&Sample<T>> = idx
            .iter()
            .zip(&flips)
            .map(|(&i, &f)| if f { fl.next().expect("flipped copy") } else { &data[i] })
            .collect();
        let (loss, grads) = batch_gradients(&self.model, &batch, &self.cfg.loss, exec)?;
        let max_grad = grads
            .iter()
            .flat_map(|g| g.data())
            .fold(0.0f64, |m, v| m.max(v.as_f64().abs()));
        if !loss.is_finite() || !grads.iter().all(Tensor::all_finite) {
            return Err(MglError::NonFinite {
                iter: self.iter,
                max_grad,
            });
        }
        let lr = sgd_poly_step(&mut self.model.params, &grads, &mut self.state, self.iter, &self.cfg.sgd)?;
        self.model.clamp_sigma();
        let rec = StepRecord {
            iter: self.iter,
            loss,
            lr,
        };
        self.iter += 1;
        Ok(rec)
    }

    /// Run until `max_iter`, reporting every step to `on_step`.
    pub fn run(
        &mut self,
        data: &[Sample<T>],
        exec: Execution,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<Vec<StepRecord>> {
        let mut trace = Vec::with_capacity(self.cfg.sgd.max_iter.saturating_sub(self.iter));
        while self.iter < self.cfg.sgd.max_iter {
            let r = self.step(data, exec)?;
            on_step(&r);
            trace.push(r);
        }
        Ok(trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ModelConfig, Variant};

    fn cfg(base_lr: f64, batch: usize) -> TrainConfig {
        TrainConfig {
            sgd: SgdConfig {
                base_lr,
                power: 0.9,
                momentum: 0.9,
                max_iter: 20,
            },
            batch,
            loss: LossConfig::default(),
            seed: 3,
            flip: false,
        }
    }

    fn toy_model() -> MglModel<f32> {
        MglModel::new(
            ModelConfig {
                widths: [4, 4, 6, 6],
                channels: 4,
                nodes: 2,
                support: 2,
                k_nn: 2,
                stages: 1,
                variant: Variant::Full,
                per_stage_weights: false,
            },
            1,
        )
        .unwrap()
    }

    fn toy_data() -> Vec<Sample<f32>> {
        (0..4)
            .map(|k| Sample {
                image: Tensor::from_fn(&[3, 8, 8], |i| ((i * 7 + k * 3) % 11) as f32 / 11.0),
                mask: Tensor::from_fn(&[1, 8, 8], |i| ((i + k) % 3 == 0) as u8 as f32),
                edge: Tensor::from_fn(&[1, 8, 8], |i| ((i + k) % 5 == 0) as u8 as f32),
            })
            .collect()
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let t = Trainer::new(toy_model(), cfg(0.0, 3));
        let mut seen: Vec<usize> = (0..3).flat_map(|i| t.batch_indices(i, 10)).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert_eq!(t.batch_indices(5, 10), t.batch_indices(5, 10));
    }

    #[test]
    fn zero_rate_keeps_parameters_bitwise() {
        let data = toy_data();
        let mut t = Trainer::new(toy_model(), cfg(0.0, 2));
        let before = t.model.params.clone();
        for _ in 0..3 {
            t.step(&data, Execution::Sequential).unwrap();
        }
        for ((_, a), (_, b)) in t.model.params.iter().zip(before.iter()) {
            let (x, y): (Vec<u32>, Vec<u32>) = (
                a.data().iter().map(|v| v.to_bits()).collect(),
                b.data().iter().map(|v| v.to_bits()).collect(),
            );
            assert_eq!(x, y);
        }
    }

    #[test]
    fn parallel_and_sequential_batches_agree_bitwise() {
        let data = toy_data();
        let m = toy_model();
        let refs: Vec<&Sample<f32>> = data.iter().collect();
        let a = batch_gradients(&m, &refs, &LossConfig::default(), Execution::Sequential).unwrap();
        let b = batch_gradients(&m, &refs, &LossConfig::default(), Execution::Parallel).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn flip_is_an_involution() {
        let s = &toy_data()[1];
        assert_eq!(&s.flipped().flipped(), s);
        assert_ne!(&s.flipped(), s);
    }

    #[test]
    fn non_finite_input_aborts_with_diagnostics() {
        let mut data = toy_data();
        data[0].image.data_mut()[5] = f32::NAN;
        let mut t = Trainer::new(toy_model(), cfg(0.1, 4));
        match t.step(&data, Execution::Sequential) {
            Err(MglError::NonFinite { iter: 0, .. }) => {}
            other => panic!("expected non-finite abort, got {other:?}"),
        }
    }
}
