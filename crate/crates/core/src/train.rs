//! Loss assembly, Adam and the training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::KvConfig;
use crate::datagen::{augment, Flip, Patch};
use crate::error::{Error, Result};
use crate::hourglass::NetworkOutput;
use crate::model::{InputBatch, Model, ModelConfig, ModelKind};
use crate::nn::{Ctx, Phase};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction and a constant learning rate. Moments are kept
/// per parameter name and created lazily.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Scalar = f32> {
    pub params: AdamParams,
    pub t: u64,
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: AdamParams) -> Self {
        Adam {
            params,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.t += 1;
        let AdamParams {
            lr,
            beta1,
            beta2,
            eps,
        } = self.params;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (one_b1, one_b2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        let (bc1, bc2, lr, eps) = (T::of(bc1), T::of(bc2), T::of(lr), T::of(eps));
        for (name, p) in store.iter_mut().filter(|(_, p)| p.trainable) {
            let n = p.tensor.numel();
            let Some(grad) = p.tensor.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| vec![T::zero(); n]);
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| vec![T::zero(); n]);
            for (((w, &g), m), v) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Training hyperparameters. Defaults follow the published solver settings;
/// batch size, step count and patch geometry are desk-scale choices.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub adam: AdamParams,
    pub l2_lambda: f64,
    pub intermediate_loss_weight: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub patch_h: usize,
    pub patch_w: usize,
    pub patch_stride: usize,
    pub augment: bool,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Evaluate on the validation set every this many steps (0: never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::desk(ModelKind::Dfd),
            adam: AdamParams::default(),
            l2_lambda: 0.002,
            intermediate_loss_weight: 1.0,
            batch_size: 4,
            max_steps: 2000,
            seed: 0,
            patch_h: 64,
            patch_w: 64,
            patch_stride: 32,
            augment: true,
            checkpoint_every: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    /// Reads every training and model key; unknown keys are an error.
    pub fn from_kv(mut kv: KvConfig) -> Result<Self> {
        let mut c = TrainConfig {
            model: ModelConfig::from_kv(&mut kv)?,
            ..Default::default()
        };
        kv.take_into("lr", &mut c.adam.lr)?;
        kv.take_into("beta1", &mut c.adam.beta1)?;
        kv.take_into("beta2", &mut c.adam.beta2)?;
        kv.take_into("eps", &mut c.adam.eps)?;
        kv.take_into("l2_lambda", &mut c.l2_lambda)?;
        kv.take_into("intermediate_loss_weight", &mut c.intermediate_loss_weight)?;
        kv.take_into("batch_size", &mut c.batch_size)?;
        kv.take_into("max_steps", &mut c.max_steps)?;
        kv.take_into("seed", &mut c.seed)?;
        kv.take_into("patch_h", &mut c.patch_h)?;
        kv.take_into("patch_w", &mut c.patch_w)?;
        kv.take_into("patch_stride", &mut c.patch_stride)?;
        kv.take_into("augment", &mut c.augment)?;
        kv.take_into("checkpoint_every", &mut c.checkpoint_every)?;
        kv.take_into("eval_every", &mut c.eval_every)?;
        kv.ensure_consumed()?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.hg.validate()?;
        self.model.hg.check_input(self.patch_h, self.patch_w)?;
        if self.batch_size == 0 || self.patch_stride == 0 {
            return Err(Error::Config(
                "batch_size and patch_stride must be positive".into(),
            ));
        }
        if !(self.adam.lr > 0.0)
            || !(0.0..1.0).contains(&self.adam.beta1)
            || !(0.0..1.0).contains(&self.adam.beta2)
        {
            return Err(Error::Config(
                "lr must be positive and betas in [0, 1)".into(),
            ));
        }
        if !(self.l2_lambda >= 0.0) || !(self.intermediate_loss_weight >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Flips allowed for this model. Only stereo-only inputs can swap views
    /// under a horizontal flip; the defocused image exists for the left
    /// camera alone, so fusion inputs are flipped vertically only.
    pub fn flip_choices(&self) -> &'static [Flip] {
        if !self.augment {
            return &[Flip::None];
        }
        match self.model.kind {
            ModelKind::Fusion(_) => &[Flip::None, Flip::Vertical],
            _ => &[Flip::None, Flip::Horizontal, Flip::Vertical],
        }
    }
}

/// Mean of each 4×4 block divided by 4: disparity at quarter resolution.
pub fn quarter_target(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (n, c, h, w) = t.nchw()?;
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::shape(
            "quarter_target",
            format!("{}x{} not divisible by 4", h, w),
        ));
    }
    let (qh, qw) = (h / 4, w / 4);
    let src = t.data();
    let mut out = vec![0.0f32; n * c * qh * qw];
    for p in 0..n * c {
        for y in 0..qh {
            for x in 0..qw {
                let mut s = 0.0f32;
                for dy in 0..4 {
                    for dx in 0..4 {
                        s += src[p * h * w + (4 * y + dy) * w + 4 * x + dx];
                    }
                }
                out[p * qh * qw + y * qw + x] = s / 16.0 / 4.0;
            }
        }
    }
    Tensor::from_vec(&[n, c, qh, qw], out)
}

/// Loss vars recorded on the graph.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub final_mae: Var,
    pub intermediate: Vec<Var>,
    pub l2: Var,
}

/// MAE(final) + w·Σ MAE(intermediate, quarter target) + λ·‖weights‖².
pub fn total_loss<T: Scalar>(
    graph: &mut Graph<T>,
    store: &ParamStore<T>,
    output: &NetworkOutput,
    target: &Tensor<f32>,
    l2_lambda: f64,
    intermediate_weight: f64,
) -> Result<LossTerms> {
    let final_dims = graph.dims(output.final_disparity).to_vec();
    if final_dims != target.dims() {
        return Err(Error::shape(
            "total_loss",
            format!("output {:?} vs target {:?}", final_dims, target.dims()),
        ));
    }
    let full = graph.input(target.cast())?;
    let final_mae = graph.mae(output.final_disparity, full)?;
    let mut terms = vec![(final_mae, 1.0)];
    let mut intermediate = Vec::with_capacity(output.intermediate_disparities.len());
    if !output.intermediate_disparities.is_empty() {
        let quarter = graph.input(quarter_target(target)?.cast())?;
        for &p in &output.intermediate_disparities {
            let m = graph.mae(p, quarter)?;
            intermediate.push(m);
            terms.push((m, intermediate_weight));
        }
    }
    let l2 = graph.l2_penalty(store, l2_lambda)?;
    terms.push((l2, 1.0));
    let total = graph.weighted_sum(&terms)?;
    Ok(LossTerms {
        total,
        final_mae,
        intermediate,
        l2,
    })
}

/// One row of the loss curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub final_mae: f64,
    pub l2: f64,
}

pub fn loss_curve_csv(records: &[LossRecord]) -> String {
    let mut s = String::from("step,total,final_mae,l2\n");
    for r in records {
        let _ = writeln!(s, "{},{},{},{}", r.step, r.total, r.final_mae, r.l2);
    }
    s
}

/// Stacks patches into a batch: (inputs, N×1×H×W target).
pub fn collate(patches: &[Patch]) -> Result<(InputBatch<f32>, Tensor<f32>)> {
    let first = patches.first().ok_or(Error::EmptyDataset)?;
    let (h, w) = (first.input.height, first.input.width);
    let n = patches.len();
    let plane = h * w;
    let mut left = Vec::with_capacity(n * 3 * plane);
    let mut right = Vec::with_capacity(n * 3 * plane);
    let mut defocus = Vec::with_capacity(n * 3 * plane);
    let mut target = Vec::with_capacity(n * plane);
    for p in patches {
        if (p.input.channels, p.input.height, p.input.width) != (9, h, w) {
            return Err(Error::shape("collate", "patches differ in size"));
        }
        left.extend_from_slice(&p.input.data[..3 * plane]);
        right.extend_from_slice(&p.input.data[3 * plane..6 * plane]);
        defocus.extend_from_slice(&p.input.data[6 * plane..]);
        target.extend_from_slice(&p.target.data);
    }
    Ok((
        InputBatch {
            left: Tensor::from_vec(&[n, 3, h, w], left)?,
            right: Tensor::from_vec(&[n, 3, h, w], right)?,
            left_defocus: Tensor::from_vec(&[n, 3, h, w], defocus)?,
        },
        Tensor::from_vec(&[n, 1, h, w], target)?,
    ))
}

/// A resumable training loop over a fixed patch set.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub store: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub curve: Vec<LossRecord>,
    patches: Vec<Patch>,
    order: Vec<usize>,
    cursor: usize,
    data_rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    /// Initialises the network from `cfg.seed`. Patches must match the
    /// configured patch size.
    pub fn new(cfg: TrainConfig, patches: Vec<Patch>) -> Result<Self> {
        cfg.validate()?;
        if patches.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if patches.len() < cfg.batch_size {
            return Err(Error::Config(format!(
                "{} patches cannot fill a batch of {}",
                patches.len(),
                cfg.batch_size
            )));
        }
        for p in &patches {
            if (p.input.height, p.input.width) != (cfg.patch_h, cfg.patch_w) {
                return Err(Error::shape(
                    "trainer",
                    format!(
                        "patch {}x{} but config says {}x{}",
                        p.input.height, p.input.width, cfg.patch_h, cfg.patch_w
                    ),
                ));
            }
        }
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let model = Model::build(&cfg.model, &mut store, &mut init_rng)?;
        let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        data_rng.set_stream(1);
        let adam = Adam::new(cfg.adam);
        Ok(Trainer {
            cfg,
            model,
            store,
            adam,
            curve: Vec::new(),
            order: Vec::new(),
            cursor: 0,
            patches,
            data_rng,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Next batch in seeded order; the trailing partial batch of every
    /// epoch is dropped.
    fn next_batch(&mut self) -> Result<(InputBatch<f32>, Tensor<f32>)> {
        let b = self.cfg.batch_size;
        if self.cursor + b > self.order.len() {
            self.order = (0..self.patches.len()).collect();
            self.order.shuffle(&mut self.data_rng);
            self.cursor = 0;
        }
        let choices = self.cfg.flip_choices();
        let swap = self.cfg.model.kind == ModelKind::Stereo;
        let mut batch = Vec::with_capacity(b);
        for k in 0..b {
            let p = &self.patches[self.order[self.cursor + k]];
            let flip = *choices.choose(&mut self.data_rng).expect("non-empty");
            batch.push(augment(p, flip, swap));
        }
        self.cursor += b;
        collate(&batch)
    }

    /// One forward/backward/update. Errors on a non-finite loss.
    pub fn step(&mut self) -> Result<LossRecord> {
        let step = self.step;
        self.try_step().map_err(|e| match e {
            // The tape refuses non-finite values wherever they first appear.
            Error::NonFinite(_) => Error::Diverged {
                step,
                loss: f64::NAN,
            },
            other => other,
        })
    }

    fn try_step(&mut self) -> Result<LossRecord> {
        let (batch, target) = self.next_batch()?;
        let mut graph = Graph::new();
        let output = {
            let mut ctx = Ctx::new(&mut graph, &mut self.store, Phase::Train);
            self.model.forward(&mut ctx, &batch)?
        };
        let terms = total_loss(
            &mut graph,
            &self.store,
            &output,
            &target,
            self.cfg.l2_lambda,
            self.cfg.intermediate_loss_weight,
        )?;
        let record = LossRecord {
            step: self.step,
            total: graph.value(terms.total).item() as f64,
            final_mae: graph.value(terms.final_mae).item() as f64,
            l2: graph.value(terms.l2).item() as f64,
        };
        if !record.total.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                loss: record.total,
            });
        }
        graph.backward(terms.total)?;
        self.store.zero_grads();
        self.store.accumulate_grads(&graph)?;
        self.adam.step(&mut self.store);
        self.step += 1;
        self.curve.push(record);
        Ok(record)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut store = self.store.clone();
        store.zero_grads();
        Checkpoint::new(
            self.cfg.model.clone(),
            self.step as u64,
            store,
            Some(self.adam.clone()),
        )
    }

    /// Runs the remaining steps up to `max_steps`, writing periodic and
    /// final checkpoints into `out_dir` if given. `on_eval` is called every
    /// `eval_every` steps.
    pub fn run(
        &mut self,
        out_dir: Option<&Path>,
        mut on_eval: impl FnMut(usize, &Model, &ParamStore<f32>) -> Result<()>,
    ) -> Result<()> {
        if let Some(d) = out_dir {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        while self.step < self.cfg.max_steps {
            let r = self.step()?;
            if r.step % 100 == 0 {
                log::info!("step {} loss {:.4} mae {:.4}", r.step, r.total, r.final_mae);
            }
            let done = self.step;
            if self.cfg.eval_every > 0 && done % self.cfg.eval_every == 0 {
                on_eval(done, &self.model, &self.store)?;
            }
            if let Some(d) = out_dir {
                if self.cfg.checkpoint_every > 0
                    && done % self.cfg.checkpoint_every == 0
                    && done < self.cfg.max_steps
                {
                    self.checkpoint()
                        .save(&d.join(format!("step_{:06}.dfsn", done)))?;
                }
            }
        }
        if let Some(d) = out_dir {
            self.checkpoint().save(&final_checkpoint_path(d))?;
            let p = d.join("loss.csv");
            fs::write(&p, loss_curve_csv(&self.curve)).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

pub fn final_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("final.dfsn")
}
