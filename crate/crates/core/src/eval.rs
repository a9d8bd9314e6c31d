//! Full-image inference and the bad-pixel / MAE metric suite.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datagen::SampleTriplet;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{InputBatch, Model};
use crate::nn::{Ctx, Phase};
use crate::tensor::{Graph, ParamStore};

/// Percentages of pixels whose absolute error strictly exceeds 1, 3 and 5
/// px, the mean absolute error, and the mean inference time per image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pct_gt_1px: f64,
    pub pct_gt_3px: f64,
    pub pct_gt_5px: f64,
    pub mae_px: f64,
    pub wall_time_s: f64,
    pub n_pixels: u64,
}

/// Running sums behind a [`MetricReport`].
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    gt1: u64,
    gt3: u64,
    gt5: u64,
    abs_sum: f64,
    n: u64,
}

impl MetricAccumulator {
    pub fn add(&mut self, pred: &[f32], gt: &[f32]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(
                "metrics",
                format!("{} predictions vs {} targets", pred.len(), gt.len()),
            ));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            let e = (p as f64 - g as f64).abs();
            self.gt1 += (e > 1.0) as u64;
            self.gt3 += (e > 3.0) as u64;
            self.gt5 += (e > 5.0) as u64;
            self.abs_sum += e;
        }
        self.n += pred.len() as u64;
        Ok(())
    }

    pub fn report(&self, wall_time_s: f64) -> MetricReport {
        let pct = |k: u64| {
            if self.n == 0 {
                0.0
            } else {
                100.0 * k as f64 / self.n as f64
            }
        };
        MetricReport {
            pct_gt_1px: pct(self.gt1),
            pct_gt_3px: pct(self.gt3),
            pct_gt_5px: pct(self.gt5),
            mae_px: if self.n == 0 {
                0.0
            } else {
                self.abs_sum / self.n as f64
            },
            wall_time_s,
            n_pixels: self.n,
        }
    }
}

pub fn metrics(pred: &[f32], gt: &[f32]) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::default();
    acc.add(pred, gt)?;
    Ok(acc.report(0.0))
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serialises")
    }

    pub fn table_header() -> &'static str {
        "| Method | > 1 px | > 3 px | > 5 px | MAE (px) | Time (s) |\n|---|---|---|---|---|---|\n"
    }

    pub fn table_row(&self, method: &str) -> String {
        format!(
            "| {} | {:.2}% | {:.2}% | {:.2}% | {:.3} | {:.3} |\n",
            method,
            self.pct_gt_1px,
            self.pct_gt_3px,
            self.pct_gt_5px,
            self.mae_px,
            self.wall_time_s
        )
    }

    /// Header plus one row per (method, report).
    pub fn table(rows: &[(&str, &MetricReport)]) -> String {
        let mut s = String::from(Self::table_header());
        for (m, r) in rows {
            let _ = write!(s, "{}", r.table_row(m));
        }
        s
    }
}

/// Full-image prediction: reflect-pads to the network's divisibility
/// requirement, runs in evaluation mode and crops back. Parameters are not
/// modified.
pub fn predict(model: &Model, store: &ParamStore<f32>, sample: &SampleTriplet) -> Result<Image> {
    let (h, w) = (sample.height(), sample.width());
    let d = model.hg_config().divisor();
    let (ph, pw) = (h.div_ceil(d) * d, w.div_ceil(d) * d);
    let pad = |img: &Image| {
        if (ph, pw) == (h, w) {
            img.clone()
        } else {
            img.pad_reflect(ph, pw)
        }
    };
    let batch = InputBatch {
        left: pad(&sample.left).to_tensor(),
        right: pad(&sample.right).to_tensor(),
        left_defocus: pad(&sample.left_defocus).to_tensor(),
    };
    // Evaluation-mode batch norm only reads running statistics, so a
    // scratch copy keeps the caller's store untouched by construction.
    let mut scratch = store.clone();
    let mut graph = Graph::inference();
    let out = {
        let mut ctx = Ctx::new(&mut graph, &mut scratch, Phase::Eval);
        model.forward(&mut ctx, &batch)?
    };
    let full = Image::from_tensor(graph.value(out.final_disparity), 0)?;
    full.crop(0, 0, h, w)
}

/// Metrics over every pixel of every sample.
pub fn evaluate(
    model: &Model,
    store: &ParamStore<f32>,
    samples: &[SampleTriplet],
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut acc = MetricAccumulator::default();
    let mut elapsed = 0.0;
    for s in samples {
        let t0 = Instant::now();
        let pred = predict(model, store, s)?;
        elapsed += t0.elapsed().as_secs_f64();
        acc.add(&pred.data, &s.disparity.data)?;
    }
    Ok(acc.report(elapsed / samples.len() as f64))
}
