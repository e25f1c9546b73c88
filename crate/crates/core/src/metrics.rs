//! MAE for probability maps and threshold-swept F-measure (ODS/OIS) for
//! edge maps, with exact pixel matching.

use std::fmt::Write as _;

use crate::error::{MglError, Result};
use crate::exec::Execution;

/// Number of thresholds on the sweep grid `0.01, 0.02, …, 0.99`.
pub const THRESHOLDS: usize = 99;

pub fn threshold(i: usize) -> f64 {
    (i + 1) as f64 / 100.0
}

pub fn mae(pred: &[f64], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(MglError::shape(format!(
            "mae: prediction has {} values, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(pred.iter().zip(gt).map(|(p, &g)| (p - g as f64).abs()).sum::<f64>() / pred.len() as f64)
}

/// `2PR/(P+R)`, defined as 0 when there are no true positives.
pub fn f_measure(tp: u64, fp: u64, fn_: u64) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fn_) as f64;
    2.0 * p * r / (p + r)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn f(&self) -> f64 {
        f_measure(self.tp, self.fp, self.fn_)
    }

    pub fn recall(&self) -> f64 {
        let pos = self.tp + self.fn_;
        if pos == 0 {
            0.0
        } else {
            self.tp as f64 / pos as f64
        }
    }
}

/// Per-threshold counts; predictions `≥ t` count as edges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrCurve {
    pub counts: Vec<Counts>,
}

impl PrCurve {
    pub fn of_image(pred: &[f64], gt: &[u8]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(MglError::shape(format!(
                "edge eval: prediction has {} values, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let counts = (0..THRESHOLDS)
            .map(|i| {
                let t = threshold(i);
                let mut c = Counts::default();
                for (&p, &g) in pred.iter().zip(gt) {
                    match (p >= t, g != 0) {
                        (true, true) => c.tp += 1,
                        (true, false) => c.fp += 1,
                        (false, true) => c.fn_ += 1,
                        (false, false) => {}
                    }
                }
                c
            })
            .collect();
        Ok(Self { counts })
    }

    pub fn merge(&mut self, other: &PrCurve) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.tp += b.tp;
            a.fp += b.fp;
            a.fn_ += b.fn_;
        }
    }

    pub fn best_f(&self) -> f64 {
        self.counts.iter().map(Counts::f).fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeScores {
    pub ods: f64,
    pub ois: f64,
}

/// ODS: best F of dataset-aggregated counts over the shared grid. OIS: mean
/// of every image's own best F.
pub fn ods_ois(preds: &[Vec<f64>], gts: &[Vec<u8>], exec: Execution) -> Result<EdgeScores> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(MglError::Data(format!(
            "edge eval needs matching nonempty sets, got {} predictions and {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let curves = exec.map(preds.len(), |i| PrCurve::of_image(&preds[i], &gts[i]));
    let curves = curves.into_iter().collect::<Result<Vec<_>>>()?;
    let mut total = PrCurve {
        counts: vec![Counts::default(); THRESHOLDS],
    };
    let mut ois = 0.0;
    for c in &curves {
        total.merge(c);
        ois += c.best_f();
    }
    Ok(EdgeScores {
        ods: total.best_f(),
        ois: ois / curves.len() as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub images: usize,
    pub mae: f64,
    pub edges: EdgeScores,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>10}", "metric", "value");
        let _ = writeln!(s, "{:<8} {:>10}", "images", self.images);
        let _ = writeln!(s, "{:<8} {:>10.6}", "mae", self.mae);
        let _ = writeln!(s, "{:<8} {:>10.6}", "ods", self.edges.ods);
        let _ = writeln!(s, "{:<8} {:>10.6}", "ois", self.edges.ois);
        s
    }

    /// One `metric\tvalue` line per metric.
    pub fn lines(&self) -> String {
        format!(
            "images\t{}\nmae\t{}\nods\t{}\nois\t{}\n",
            self.images, self.mae, self.edges.ods, self.edges.ois
        )
    }
}
