//! Label assignment, minibatch sampling, the training objective and the
//! SGD loop.

use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{render_image, DataError, Dataset, LabeledPair};
use crate::error::DomainError;
use crate::geometry::{iou, HoiProposal};
use crate::network::{PmfNet, Sample};
use crate::nn::Parameters;

/// Probabilities are clamped to `[EPS, 1 - EPS]` inside the log.
pub const EPS: f64 = 1e-7;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot sample from an empty pool")]
    EmptyPool,
    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Diverged { iteration: usize, loss: f64 },
}

/// Relation labels of one proposal. The affinity label is derived: it is
/// set exactly when any relation label is.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingLabel {
    pub y: Vec<bool>,
}

impl TrainingLabel {
    pub fn negative(num_actions: usize) -> Self {
        TrainingLabel {
            y: vec![false; num_actions],
        }
    }

    pub fn z(&self) -> bool {
        self.y.iter().any(|&b| b)
    }
}

/// Union of the action sets of every ground truth the proposal matches
/// under the dual-IoU rule.
pub fn assign_labels(
    prop: &HoiProposal,
    gts: &[LabeledPair],
    num_actions: usize,
    thr: f64,
) -> Result<TrainingLabel, DomainError> {
    let mut label = TrainingLabel::negative(num_actions);
    for gt in gts {
        if iou(&prop.human, &gt.pair.human)? >= thr && iou(&prop.object, &gt.pair.object)? >= thr {
            for &a in &gt.actions {
                if let Some(slot) = label.y.get_mut(a as usize) {
                    *slot = true;
                }
            }
        }
    }
    Ok(label)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Minibatch {
    pub indices: Vec<usize>,
    pub positives: usize,
    pub negatives: usize,
    /// Slots of the short class that were filled from the other one.
    pub deficit: usize,
}

/// Draws `batch` pool indices, positives and negatives in the proportion
/// `ratio`, without replacement. A short class is topped up from the other
/// one; a pool smaller than the batch is used whole.
pub fn sample_minibatch<R: Rng>(
    is_positive: &[bool],
    ratio: [usize; 2],
    batch: usize,
    rng: &mut R,
) -> Result<Minibatch, TrainError> {
    if is_positive.is_empty() {
        return Err(TrainError::EmptyPool);
    }
    let pos: Vec<usize> = (0..is_positive.len()).filter(|&i| is_positive[i]).collect();
    let neg: Vec<usize> = (0..is_positive.len())
        .filter(|&i| !is_positive[i])
        .collect();
    let batch = batch.min(is_positive.len());
    let want_pos = (batch * ratio[0] + (ratio[0] + ratio[1]) / 2) / (ratio[0] + ratio[1]);
    let want_neg = batch - want_pos;
    let (n_pos, n_neg) = if pos.len() < want_pos {
        (pos.len(), batch - pos.len())
    } else if neg.len() < want_neg {
        (batch - neg.len(), neg.len())
    } else {
        (want_pos, want_neg)
    };
    let deficit = want_pos.abs_diff(n_pos);
    if deficit > 0 {
        log::warn!(
            "minibatch wants {want_pos} positives and {want_neg} negatives, pool has {} and {}; using {n_pos} and {n_neg}",
            pos.len(),
            neg.len()
        );
    }
    let mut indices: Vec<usize> = sample_indices(rng, pos.len(), n_pos)
        .into_iter()
        .map(|i| pos[i])
        .chain(
            sample_indices(rng, neg.len(), n_neg)
                .into_iter()
                .map(|i| neg[i]),
        )
        .collect();
    indices.shuffle(rng);
    Ok(Minibatch {
        indices,
        positives: n_pos,
        negatives: n_neg,
        deficit,
    })
}

fn bce(t: f64, p: f64) -> f64 {
    let p = p.clamp(EPS, 1.0 - EPS);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub relation: f64,
    pub affinity: f64,
}

/// Batch mean of `sum_a BCE(y_a, s_L_a) + mu * BCE(z, s_G)`. The affinity
/// term is absent when `s_g` is `None` (gate disabled).
pub fn hoi_loss(
    s_l: &Array2<f64>,
    s_g: Option<&Array1<f64>>,
    labels: &[TrainingLabel],
    mu: f64,
) -> LossTerms {
    let b = labels.len().max(1) as f64;
    let mut relation = 0.0;
    let mut affinity = 0.0;
    for (i, label) in labels.iter().enumerate() {
        for (a, &y) in label.y.iter().enumerate() {
            relation += bce(y as u8 as f64, s_l[[i, a]]);
        }
        if let Some(s_g) = s_g {
            affinity += bce(label.z() as u8 as f64, s_g[i]);
        }
    }
    let relation = relation / b;
    let affinity = affinity / b;
    LossTerms {
        total: relation + mu * affinity,
        relation,
        affinity,
    }
}

/// Gradients of [`hoi_loss`] with respect to the relation and affinity
/// logits.
pub fn hoi_loss_gradients(
    s_l: &Array2<f64>,
    s_g: Option<&Array1<f64>>,
    labels: &[TrainingLabel],
    mu: f64,
) -> (Array2<f64>, Option<Array1<f64>>) {
    let b = labels.len().max(1) as f64;
    let g_rel = Array2::from_shape_fn(s_l.dim(), |(i, a)| {
        (s_l[[i, a]] - labels[i].y[a] as u8 as f64) / b
    });
    let g_aff = s_g
        .map(|s| Array1::from_shape_fn(s.len(), |i| mu * (s[i] - labels[i].z() as u8 as f64) / b));
    (g_rel, g_aff)
}

/// Loss of a forward pass plus parameter gradients accumulated into
/// `grads`.
pub fn loss_and_gradients(
    model: &PmfNet,
    images: &[Array3<f64>],
    samples: &[Sample<'_>],
    labels: &[TrainingLabel],
    mu: f64,
    grads: &mut PmfNet,
) -> Result<LossTerms, DomainError> {
    let cache = model.forward(images, samples)?;
    let f = cache.fusion();
    let s_g = f.affinity_logit.as_ref().map(|_| &f.s_g);
    let loss = hoi_loss(&f.s_l, s_g, labels, mu);
    let (g_rel, g_aff) = hoi_loss_gradients(&f.s_l, s_g, labels, mu);
    model.backward(&cache, &g_rel, g_aff.as_ref(), grads);
    Ok(loss)
}

/// SGD with momentum and L2 weight decay:
/// `v = m v + (g + wd p)`, `p -= lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(model: &PmfNet, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: model
                .tensors()
                .iter()
                .map(|t| vec![0.0; t.data.len()])
                .collect(),
        }
    }

    pub fn step(&mut self, model: &mut PmfNet, grads: &PmfNet, lr: f64) {
        let g = grads.tensors();
        for ((p, g), v) in model
            .tensors_mut()
            .into_iter()
            .zip(&g)
            .zip(&mut self.velocity)
        {
            for ((p, &g), v) in p.data.iter_mut().zip(g.data).zip(v.iter_mut()) {
                *v = self.momentum * *v + g + self.weight_decay * *p;
                *p -= lr * *v;
            }
        }
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub lr: f64,
    pub total: f64,
    pub relation: f64,
    pub affinity: f64,
}

pub const LOG_HEADER: &str = "iteration,lr,total,relation,affinity";

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.iteration, self.lr, self.total, self.relation, self.affinity
        )
    }
}

/// One labelled training proposal.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub image: usize,
    pub proposal: HoiProposal,
    pub label: TrainingLabel,
}

/// Rendered images and every labelled proposal of a dataset.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub images: Vec<Array3<f64>>,
    pub examples: Vec<TrainingExample>,
}

impl TrainingSet {
    pub fn new(
        ds: &Dataset,
        base_dir: Option<&Path>,
        match_threshold: f64,
    ) -> Result<Self, TrainError> {
        let num_actions = ds.num_actions();
        let mut images = Vec::with_capacity(ds.images.len());
        let mut examples = Vec::new();
        for (slot, img) in ds.images.iter().enumerate() {
            images.push(render_image(ds, img.id, base_dir)?);
            let gts = ds.ground_truth(img.id)?;
            for p in ds.pair_proposals(img.id)? {
                let label = assign_labels(&p.proposal, &gts, num_actions, match_threshold)?;
                examples.push(TrainingExample {
                    image: slot,
                    proposal: p.proposal,
                    label,
                });
            }
        }
        Ok(TrainingSet { images, examples })
    }

    pub fn positives(&self) -> Vec<bool> {
        self.examples.iter().map(|e| e.label.z()).collect()
    }
}

/// Model initialised from the configured seed.
pub fn init_model(cfg: &TrainConfig) -> Result<PmfNet, TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    Ok(PmfNet::new(&cfg.model, cfg.flags, &mut rng)?)
}

/// Optimiser state of a run, enough to continue it bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub iteration: usize,
    pub velocity: Vec<Vec<f64>>,
    /// Position of the sampling stream, in 32-bit words.
    pub rng_word_pos: u128,
}

pub struct Trainer<'a> {
    pub model: PmfNet,
    pub config: TrainConfig,
    set: &'a TrainingSet,
    positives: Vec<bool>,
    grads: PmfNet,
    sgd: Sgd,
    rng: ChaCha8Rng,
    iteration: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: PmfNet,
        config: TrainConfig,
        set: &'a TrainingSet,
    ) -> Result<Self, TrainError> {
        config.validate().map_err(TrainError::Config)?;
        if set.examples.is_empty() {
            return Err(TrainError::EmptyPool);
        }
        let mc = model.config();
        if mc != &config.model || model.flags() != config.flags {
            return Err(TrainError::Config(
                "model does not match the configuration".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        rng.set_stream(1);
        Ok(Trainer {
            grads: model.zeros_like(),
            sgd: Sgd::new(&model, config.train.momentum, config.train.weight_decay),
            positives: set.positives(),
            model,
            config,
            set,
            rng,
            iteration: 0,
        })
    }

    /// Continues a run from saved optimiser state.
    pub fn resume(mut self, state: TrainState) -> Result<Self, TrainError> {
        if state.velocity.len() != self.sgd.velocity.len()
            || state
                .velocity
                .iter()
                .zip(&self.sgd.velocity)
                .any(|(a, b)| a.len() != b.len())
        {
            return Err(TrainError::Config(
                "momentum buffers do not match the model".into(),
            ));
        }
        self.sgd.velocity = state.velocity;
        self.rng.set_word_pos(state.rng_word_pos);
        self.iteration = state.iteration;
        Ok(self)
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            iteration: self.iteration,
            velocity: self.sgd.velocity.clone(),
            rng_word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn learning_rate(&self) -> f64 {
        let t = &self.config.train;
        if self.iteration >= t.lr_drop_iteration {
            t.learning_rate * 0.1
        } else {
            t.learning_rate
        }
    }

    /// Samples a minibatch and takes one optimiser step.
    pub fn step(&mut self) -> Result<LogRow, TrainError> {
        let t = &self.config.train;
        let batch = sample_minibatch(
            &self.positives,
            t.pos_neg_ratio,
            t.batch_size,
            &mut self.rng,
        )?;
        self.step_on(&batch.indices)
    }

    /// One optimiser step on the given examples.
    pub fn step_on(&mut self, indices: &[usize]) -> Result<LogRow, TrainError> {
        let lr = self.learning_rate();
        let samples: Vec<Sample<'_>> = indices
            .iter()
            .map(|&i| Sample {
                image: self.set.examples[i].image,
                proposal: &self.set.examples[i].proposal,
            })
            .collect();
        let labels: Vec<TrainingLabel> = indices
            .iter()
            .map(|&i| self.set.examples[i].label.clone())
            .collect();
        self.grads = self.model.zeros_like();
        let loss = loss_and_gradients(
            &self.model,
            &self.set.images,
            &samples,
            &labels,
            self.config.train.affinity_weight,
            &mut self.grads,
        )?;
        if !loss.total.is_finite() {
            return Err(TrainError::Diverged {
                iteration: self.iteration,
                loss: loss.total,
            });
        }
        self.sgd.step(&mut self.model, &self.grads, lr);
        self.iteration += 1;
        Ok(LogRow {
            iteration: self.iteration,
            lr,
            total: loss.total,
            relation: loss.relation,
            affinity: loss.affinity,
        })
    }

    /// Steps until the configured iteration count, calling `on_step` after
    /// every step.
    pub fn run(
        &mut self,
        mut on_step: impl FnMut(&Trainer<'_>, &LogRow) -> Result<(), TrainError>,
    ) -> Result<(), TrainError> {
        while self.iteration < self.config.train.iterations {
            let row = self.step()?;
            on_step(self, &row)?;
        }
        Ok(())
    }
}

/// Trained parameters and the per-step loss log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PmfNet,
    pub log: Vec<LogRow>,
}

/// Trains a freshly initialised model on a whole dataset.
pub fn train(
    ds: &Dataset,
    base_dir: Option<&Path>,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let mut config = config.clone();
    config.model.num_actions = ds.num_actions();
    let set = TrainingSet::new(ds, base_dir, config.train.match_threshold)?;
    let model = init_model(&config)?;
    let mut trainer = Trainer::new(model, config, &set)?;
    let mut log = Vec::new();
    trainer.run(|_, row| {
        log.push(*row);
        Ok(())
    })?;
    Ok(TrainOutcome {
        model: trainer.model,
        log,
    })
}
