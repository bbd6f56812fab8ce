//! Loss assembly, the optimisation loop and inference helpers.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{bce_logit, Graph, Var};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TabModel, TabOutput};
use crate::nn::ParamStore;
use crate::optim::{lr_at, Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    /// Number of epochs `T`.
    pub epochs: usize,
    pub seed: u64,
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lr0: 1e-3,
            epochs: 60,
            seed: 0,
            bn_momentum: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("train.lr0 must be positive, got {}", self.lr0)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!(
                "train.bn_momentum must lie in [0, 1], got {}",
                self.bn_momentum
            )));
        }
        Ok(())
    }
}

/// Normalised images and their annotator masks, in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Split<T> {
    /// `[C, H, W]` each.
    pub images: Vec<Tensor<T>>,
    /// `[R, H, W]` each, values in `{0, 1}`.
    pub masks: Vec<Tensor<T>>,
}

impl<T: Scalar> Split<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stacks the listed samples into `([B, C, H, W], [B, R, H, W])`.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        let images: Vec<&Tensor<T>> = idx.iter().map(|&i| &self.images[i]).collect();
        let masks: Vec<&Tensor<T>> = idx.iter().map(|&i| &self.masks[i]).collect();
        Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
    }
}

/// The loss node plus per-term values for logging.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub meta: f64,
    pub per_annotator: Vec<f64>,
}

/// Uniformly chosen annotator index per image, the target of the meta term.
pub fn pick_meta_targets(batch: usize, annotators: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..annotators)).collect()
}

/// Target maps `[B * (R + 1), 1, H, W]` in the row order of the model:
/// row `(b, 0)` is annotator `meta[b]`'s mask, row `(b, r)` is `y_r`.
pub fn preference_targets<T: Scalar>(masks: &Tensor<T>, annotators: usize, meta: &[usize]) -> Result<Tensor<T>> {
    let &[b, r, h, w] = masks.shape() else {
        return Err(Error::Data(format!("masks must be [B, R, H, W], got {:?}", masks.shape())));
    };
    if r != annotators {
        return Err(Error::Data(format!("batch has {r} annotator masks, model expects {annotators}")));
    }
    if meta.len() != b || meta.iter().any(|&m| m >= r) {
        return Err(Error::Data(format!("meta target choice {meta:?} invalid for {b} images, {r} annotators")));
    }
    let hw = h * w;
    let md = masks.data();
    let mut out = Vec::with_capacity(b * (r + 1) * hw);
    for (i, &pick) in meta.iter().enumerate() {
        let img = &md[i * r * hw..(i + 1) * r * hw];
        out.extend_from_slice(&img[pick * hw..(pick + 1) * hw]);
        out.extend_from_slice(img);
    }
    Tensor::new(&[b * (r + 1), 1, h, w], out)
}

/// Meta term plus one term per annotator, each a pixel-mean BCE on the
/// sampled logits.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &Tensor<T>, preferences: usize) -> Result<LossTerms> {
    let z = g.value(logits);
    if z.shape() != targets.shape() || !z.shape()[0].is_multiple_of(preferences) {
        return Err(Error::shapes("total_loss", z.shape(), targets.shape()));
    }
    let rows = z.shape()[0];
    let per_row = z.len() / rows;
    let images = rows / preferences;
    let mut terms = vec![0.0; preferences];
    for (row, (zr, yr)) in z.data().chunks(per_row).zip(targets.data().chunks(per_row)).enumerate() {
        let s: f64 = zr.iter().zip(yr).map(|(&a, &b)| bce_logit(a, b).as_f64()).sum();
        terms[row % preferences] += s / (per_row * images) as f64;
    }
    // Mean over all rows times the number of terms equals the sum of the
    // per-term means.
    let mean = g.bce_with_logits(logits, targets)?;
    let total = g.scale(mean, preferences as f64);
    Ok(LossTerms {
        total,
        meta: terms[0],
        per_annotator: terms[1..].to_vec(),
    })
}

/// Averaged losses of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_meta: f64,
    pub loss_per_annotator: Vec<f64>,
}

/// Serialisable generator position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Model, parameters, optimiser and generator of one run. All randomness
/// after construction comes from `rng`.
#[derive(Debug)]
pub struct Trainer<T: Scalar> {
    pub model: TabModel,
    pub params: ParamStore<T>,
    pub optim: Adam<T>,
    pub config: TrainConfig,
    /// Epochs completed.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    graph: Graph<T>,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh run: parameters are initialised from stream 0 of `seed`, the
    /// training generator uses stream 1.
    pub fn new(model_config: &ModelConfig, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let model = TabModel::new(&mut params, model_config, &mut init)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let optim = Adam::new(&params, AdamConfig::default());
        Ok(Self {
            model,
            params,
            optim,
            config: config.clone(),
            epoch: 0,
            rng,
            graph: Graph::new(),
        })
    }

    /// Rebuilds a trainer from saved state.
    pub fn restore(
        model_config: &ModelConfig,
        config: &TrainConfig,
        params: ParamStore<T>,
        optim: Adam<T>,
        epoch: usize,
        rng: &RngState,
    ) -> Result<Self> {
        let mut t = Self::new(model_config, config)?;
        let same_layout = t.params.len() == params.len()
            && t.params.iter().zip(params.iter()).all(|((_, a), (_, b))| {
                a.name == b.name && a.value.shape() == b.value.shape()
            });
        if !same_layout || optim.moments.len() != params.len() {
            return Err(Error::Config("checkpoint does not match the model configuration".into()));
        }
        t.params = params;
        t.optim = optim;
        t.epoch = epoch;
        t.rng = rng.restore();
        Ok(t)
    }

    pub fn done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// One optimisation step on a batch; returns `(total, meta, per
    /// annotator)` loss values.
    pub fn step(&mut self, images: &Tensor<T>, masks: &Tensor<T>, lr: f64) -> Result<(f64, f64, Vec<f64>)> {
        let &[b, _, h, w] = images.shape() else {
            return Err(Error::dim("step", format!("images must be [B, C, H, W], got {:?}", images.shape())));
        };
        let rows = self.model.config.preferences();
        let meta = pick_meta_targets(b, self.model.config.annotators, &mut self.rng);
        let targets = preference_targets(masks, self.model.config.annotators, &meta)?;
        let noise = self.model.draw_noise(b, h, w, &mut self.rng);
        let g = &mut self.graph;
        g.reset();
        let x = g.constant(images.clone());
        let terms = match self
            .model
            .forward(g, &self.params, x, noise.as_ref())
            .and_then(|out| total_loss(g, out.logits, &targets, rows))
        {
            Ok(t) => t,
            Err(Error::Numeric(msg)) => return Err(self.numeric_abort(&msg, lr)),
            Err(e) => return Err(e),
        };
        let loss = self.graph.value(terms.total).item()?.as_f64();
        if !loss.is_finite() {
            return Err(self.numeric_abort(&format!("loss became {loss}"), lr));
        }
        let g = &mut self.graph;
        g.backward(terms.total)?;
        self.params.zero_grad();
        self.params.accumulate_grads(g)?;
        self.params.apply_bn_updates(g, self.config.bn_momentum);
        self.optim.update(&mut self.params, lr)?;
        g.reset();
        Ok((loss, terms.meta, terms.per_annotator))
    }

    fn numeric_abort(&self, reason: &str, lr: f64) -> Error {
        let mut norms: Vec<(f64, &str)> = self
            .params
            .iter()
            .map(|(_, p)| {
                let n: f64 = p.grad.data().iter().map(|g| g.as_f64() * g.as_f64()).sum();
                (n, p.name.as_str())
            })
            .collect();
        norms.sort_by(|a, b| b.0.total_cmp(&a.0));
        let top: Vec<String> = norms
            .iter()
            .take(5)
            .map(|(n, name)| format!("{name}={:.3e}", num_traits::Float::sqrt(*n)))
            .collect();
        Error::Numeric(format!(
            "{reason} at epoch {} step {} (lr {lr:.3e}); largest previous-step gradient norms: {}",
            self.epoch,
            self.optim.step + 1,
            top.join(", ")
        ))
    }

    /// Runs one epoch over `data` in a freshly shuffled order.
    pub fn train_epoch(&mut self, data: &Split<T>) -> Result<EpochLog> {
        if self.done() {
            return Err(Error::Contract(format!("all {} epochs already ran", self.config.epochs)));
        }
        if data.is_empty() {
            return Err(Error::Data("empty training split".into()));
        }
        let lr = lr_at(self.epoch, self.config.lr0, self.config.epochs)?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let r = self.model.config.annotators;
        let (mut total, mut meta, mut per) = (0.0, 0.0, vec![0.0; r]);
        let mut batches = 0;
        for idx in order.chunks(self.config.batch_size) {
            let (images, masks) = data.batch(idx)?;
            let (t, m, p) = self.step(&images, &masks, lr)?;
            total += t;
            meta += m;
            per.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
            batches += 1;
        }
        let k = batches as f64;
        let log = EpochLog {
            epoch: self.epoch,
            lr,
            loss_total: total / k,
            loss_meta: meta / k,
            loss_per_annotator: per.iter().map(|v| v / k).collect(),
        };
        self.epoch += 1;
        Ok(log)
    }
}

/// Deterministic predictions for a batch: `sigmoid(mu)` per preference and
/// the heatmaps when the model has a PFE.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    /// `[B, R + 1, H, W]`.
    pub probs: Tensor<T>,
    /// `[B, R + 1, m, h, w]`.
    pub heatmaps: Option<Tensor<T>>,
}

/// Evaluation-mode forward (running batch-norm statistics, no sampling).
pub fn predict<T: Scalar>(model: &TabModel, ps: &ParamStore<T>, images: &Tensor<T>) -> Result<Prediction<T>> {
    let mut g = Graph::inference();
    let x = g.constant(images.clone());
    let out: TabOutput = model.forward(&mut g, ps, x, None)?;
    let probs = g.sigmoid(out.head.mu);
    let &[b, _, h, w] = images.shape() else { unreachable!("checked by the encoder") };
    let rows = out.preferences;
    let probs = g.value(probs).clone().reshape(&[b, rows, h, w])?;
    let heatmaps = match &out.pfe {
        Some(p) => {
            let v = g.value(p.heatmaps);
            let s = v.shape().to_vec();
            Some(v.clone().reshape(&[b, rows, s[1], s[2], s[3]])?)
        }
        None => None,
    };
    Ok(Prediction { probs, heatmaps })
}
