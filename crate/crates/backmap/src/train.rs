//! Optimization loop for one resolution step.
//!
//! [`split_dataset`] carves an ensemble into seeded train/validation/test
//! subsets. [`fit_step_model`] trains a step model on its loss with
//! adaptive-moment gradient descent, gradient accumulation, plateau-driven
//! learning-rate decay, early stopping, and best-checkpoint restoration.
//!
//! The optimizer itself ([`fit`]) is generic over a [`FitProblem`], so the
//! same loop that trains step models can be exercised on toy problems with
//! known optima. Every stochastic choice (splits, epoch shuffles, sampling
//! noise) is keyed to the config seed through independent generator
//! streams, which makes training bitwise reproducible.

use crate::coarsen::{apply_mapping, CGMapping, CoarsenError};
use crate::cvae::{
    sample_noise_stream, CoarseFrame, CvaeError, CvaeModel, ElboParts, FineFrame, StepContext,
};
use crate::gnn::ParamSet;
use crate::mol::{Ensemble, MolError};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Generator stream for the train/val/test shuffle.
const SPLIT_STREAM: u64 = 1 << 61;
/// Generator stream base for per-epoch frame shuffles.
const SHUFFLE_STREAM: u64 = 1 << 62;
/// Generator stream base for per-frame validation noise (epoch-independent,
/// so validation loss is comparable across epochs).
const VAL_NOISE_STREAM: u64 = 1 << 63;

/// Gradient updates larger than this global norm are rescaled onto it.
pub const GRAD_CLIP_NORM: f64 = 10.0;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("bad training config: {0}")]
    BadConfig(String),
    #[error("need at least {minimum} frames to split, got {actual}")]
    TooFewFrames { minimum: usize, actual: usize },
    #[error("non-finite {component} at epoch {epoch}; training aborted")]
    NonFinite { epoch: usize, component: &'static str },
    #[error(transparent)]
    Cvae(#[from] CvaeError),
    #[error(transparent)]
    Coarsen(#[from] CoarsenError),
    #[error(transparent)]
    Mol(#[from] MolError),
    #[error("failed to write history: {0}")]
    Io(#[from] std::io::Error),
}

/// Training configuration for one resolution step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub epochs: usize,
    /// Frames per micro-batch; each micro-batch gradient is the mean over
    /// its frames.
    pub batch_size: usize,
    /// Micro-batches averaged into one parameter update.
    pub accumulation_steps: usize,
    pub learning_rate: f64,
    /// Learning-rate multiplier applied when validation stagnates.
    /// Accepts the bare name `factor` in config files.
    #[serde(alias = "factor")]
    pub scheduler_factor: f64,
    /// Epochs without validation improvement before the learning rate is
    /// scaled by `scheduler_factor`.
    pub scheduler_patience: usize,
    /// Epochs without validation improvement before training stops.
    pub patience: usize,
    /// Epochs over which the KL weight ramps linearly from ~0 to its full
    /// value. Zero disables the ramp. Warming the KL term up lets the
    /// posterior become informative before the prior-matching pressure
    /// kicks in, avoiding the collapse where the decoder learns to ignore
    /// its latent entirely. Validation always scores the full objective.
    pub kl_warmup_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            train_fraction: 0.8,
            val_fraction: 0.1,
            test_fraction: 0.1,
            epochs: 100,
            batch_size: 1,
            accumulation_steps: 2,
            learning_rate: 1e-3,
            scheduler_factor: 0.5,
            scheduler_patience: 5,
            patience: 10,
            kl_warmup_epochs: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fractions = [
            ("train_fraction", self.train_fraction),
            ("val_fraction", self.val_fraction),
            ("test_fraction", self.test_fraction),
        ];
        for (name, value) in fractions {
            if !(value > 0.0 && value < 1.0) {
                return Err(TrainError::BadConfig(format!(
                    "{name} must lie strictly between 0 and 1, got {value}"
                )));
            }
        }
        let sum = self.train_fraction + self.val_fraction + self.test_fraction;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(TrainError::BadConfig(format!(
                "split fractions must sum to 1, got {sum}"
            )));
        }
        for (name, value) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("accumulation_steps", self.accumulation_steps),
            ("scheduler_patience", self.scheduler_patience),
            ("patience", self.patience),
        ] {
            if value == 0 {
                return Err(TrainError::BadConfig(format!("{name} must be at least 1")));
            }
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(TrainError::BadConfig(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !(self.scheduler_factor > 0.0 && self.scheduler_factor < 1.0) {
            return Err(TrainError::BadConfig(format!(
                "scheduler_factor must lie strictly between 0 and 1, got {}",
                self.scheduler_factor
            )));
        }
        Ok(())
    }
}

/// Seeded-shuffle split into train/validation/test at the configured
/// fractions. Train and validation sizes round down; the remainder is the
/// test set.
pub fn split_dataset(
    ensemble: &Ensemble,
    cfg: &TrainConfig,
) -> Result<(Ensemble, Ensemble, Ensemble), TrainError> {
    cfg.validate()?;
    let n = ensemble.n_frames();
    if n < 10 {
        return Err(TrainError::TooFewFrames {
            minimum: 10,
            actual: n,
        });
    }
    let n_train = (cfg.train_fraction * n as f64).floor() as usize;
    let n_val = (cfg.val_fraction * n as f64).floor() as usize;
    let n_test = n - n_train - n_val;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(TrainError::BadConfig(format!(
            "split {n_train}/{n_val}/{n_test} of {n} frames leaves an empty subset"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SPLIT_STREAM);
    order.shuffle(&mut rng);
    let train = ensemble.subset(&order[..n_train])?;
    let val = ensemble.subset(&order[n_train..n_train + n_val])?;
    let test = ensemble.subset(&order[n_train + n_val..])?;
    Ok((train, val, test))
}

/// One epoch of the training history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate in force during this epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub train_recon: f64,
    pub train_kl: f64,
    pub val_loss: f64,
    pub val_recon: f64,
    pub val_kl: f64,
}

/// Per-epoch loss history of one training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters the returned model carries.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.get(self.best_epoch)
    }

    /// Whitespace-separated table with a commented header line.
    pub fn table(&self) -> String {
        let mut out = String::from(
            "# epoch lr train_loss train_recon train_kl val_loss val_recon val_kl\n",
        );
        for r in &self.epochs {
            out.push_str(&format!(
                "{} {:.8e} {:.12e} {:.12e} {:.12e} {:.12e} {:.12e} {:.12e}\n",
                r.epoch,
                r.lr,
                r.train_loss,
                r.train_recon,
                r.train_kl,
                r.val_loss,
                r.val_recon,
                r.val_kl
            ));
        }
        out
    }

    pub fn write_table(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.table())?;
        Ok(())
    }
}

/// A differentiable problem the [`fit`] loop can optimize: named
/// parameters plus per-item loss/gradient evaluation over a training set
/// and a validation set. Gradients run parallel to the parameter arrays.
pub trait FitProblem {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn n_train(&self) -> usize;
    fn n_val(&self) -> usize;
    /// Loss components and gradient of one training item at the current
    /// parameters. `epoch` keys any per-epoch randomness and error reports.
    fn train_eval(
        &self,
        epoch: usize,
        item: usize,
    ) -> Result<(ElboParts, Vec<Array2<f64>>), TrainError>;
    /// Loss components of one validation item, with epoch-independent
    /// randomness so epochs are comparable.
    fn val_eval(&self, epoch: usize, item: usize) -> Result<ElboParts, TrainError>;
}

/// Adaptive moment estimation state over a parameter list.
struct AdamState {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Array2<f64>> = params
            .arrays()
            .iter()
            .map(|a| Array2::zeros(a.dim()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn apply(&mut self, params: &mut ParamSet, grad: &[Array2<f64>], lr: f64) {
        self.t += 1;
        let bias1 = 1.0 - ADAM_BETA1.powi(self.t);
        let bias2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (i, theta) in params.arrays_mut().iter_mut().enumerate() {
            for ((t, g), (m, v)) in theta
                .iter_mut()
                .zip(grad[i].iter())
                .zip(self.m[i].iter_mut().zip(self.v[i].iter_mut()))
            {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *t -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

fn zeros_like(params: &ParamSet) -> Vec<Array2<f64>> {
    params
        .arrays()
        .iter()
        .map(|a| Array2::zeros(a.dim()))
        .collect()
}

fn clip_global_norm(grad: &mut [Array2<f64>], max_norm: f64) {
    let sq: f64 = grad
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grad.iter_mut() {
            g.mapv_inplace(|x| x * scale);
        }
    }
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM | epoch as u64);
    order.shuffle(&mut rng);
    order
}

struct LossSums {
    loss: f64,
    recon: f64,
    kl: f64,
    count: usize,
}

impl LossSums {
    fn new() -> Self {
        LossSums {
            loss: 0.0,
            recon: 0.0,
            kl: 0.0,
            count: 0,
        }
    }

    fn add(&mut self, parts: &ElboParts) {
        self.loss += parts.loss;
        self.recon += parts.recon;
        self.kl += parts.kl;
        self.count += 1;
    }

    fn mean(&self) -> (f64, f64, f64) {
        let n = self.count.max(1) as f64;
        (self.loss / n, self.recon / n, self.kl / n)
    }
}

/// Run the optimization loop on any [`FitProblem`], invoking `log` after
/// every epoch. Returns the history; the problem's parameters end at the
/// best validation epoch (best-checkpoint restoration).
///
/// Per epoch: frames are visited in a seeded shuffled order, micro-batch
/// gradients are frame means, and every `accumulation_steps` micro-batches
/// their mean gradient — clipped to global norm [`GRAD_CLIP_NORM`] — feeds
/// one adaptive-moment update. Validation stagnating for
/// `scheduler_patience` epochs scales the learning rate by
/// `scheduler_factor`; stagnating for `patience` epochs stops training.
pub fn fit<P: FitProblem + Sync>(
    problem: &mut P,
    cfg: &TrainConfig,
    mut log: impl FnMut(&EpochRecord),
) -> Result<TrainHistory, TrainError> {
    cfg.validate()?;
    if problem.n_train() == 0 || problem.n_val() == 0 {
        return Err(TrainError::BadConfig(
            "training and validation sets must be nonempty".into(),
        ));
    }
    let mut adam = AdamState::new(problem.params());
    let mut lr = cfg.learning_rate;
    let mut history = TrainHistory::default();
    let mut best_val = f64::INFINITY;
    let mut best_params = problem.params().clone();
    let mut best_epoch = 0usize;
    let mut stagnant = 0usize;
    let mut sched_stagnant = 0usize;

    for epoch in 0..cfg.epochs {
        let order = epoch_order(problem.n_train(), cfg.seed, epoch);
        let mut train_sums = LossSums::new();
        let micros: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for group in micros.chunks(cfg.accumulation_steps) {
            let mut update = zeros_like(problem.params());
            for micro in group {
                // Parallel per-frame evaluation; results arrive in frame
                // order, and the reduction below is sequential in that
                // order, so the sum is identical for any thread count.
                let results: Vec<Result<(ElboParts, Vec<Array2<f64>>), TrainError>> = micro
                    .par_iter()
                    .map(|&item| problem.train_eval(epoch, item))
                    .collect();
                let mut micro_sum = zeros_like(problem.params());
                for result in results {
                    let (parts, grad) = result?;
                    train_sums.add(&parts);
                    for (acc, g) in micro_sum.iter_mut().zip(grad.iter()) {
                        *acc += g;
                    }
                }
                let inv = 1.0 / micro.len() as f64;
                for (acc, u) in micro_sum.iter_mut().zip(update.iter_mut()) {
                    acc.mapv_inplace(|x| x * inv);
                    *u += &*acc;
                }
            }
            let inv = 1.0 / group.len() as f64;
            for u in update.iter_mut() {
                u.mapv_inplace(|x| x * inv);
            }
            clip_global_norm(&mut update, GRAD_CLIP_NORM);
            adam.apply(problem.params_mut(), &update, lr);
        }

        let val_results: Vec<Result<ElboParts, TrainError>> = (0..problem.n_val())
            .into_par_iter()
            .map(|item| problem.val_eval(epoch, item))
            .collect();
        let mut val_sums = LossSums::new();
        for result in val_results {
            val_sums.add(&result?);
        }
        let (train_loss, train_recon, train_kl) = train_sums.mean();
        let (val_loss, val_recon, val_kl) = val_sums.mean();
        if !val_loss.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                component: "validation loss",
            });
        }
        let record = EpochRecord {
            epoch,
            lr,
            train_loss,
            train_recon,
            train_kl,
            val_loss,
            val_recon,
            val_kl,
        };
        log(&record);
        history.epochs.push(record);

        if val_loss < best_val {
            best_val = val_loss;
            best_params = problem.params().clone();
            best_epoch = epoch;
            stagnant = 0;
            sched_stagnant = 0;
        } else {
            stagnant += 1;
            sched_stagnant += 1;
            if sched_stagnant >= cfg.scheduler_patience {
                lr *= cfg.scheduler_factor;
                sched_stagnant = 0;
            }
            if stagnant >= cfg.patience {
                break;
            }
        }
    }

    *problem.params_mut() = best_params;
    history.best_epoch = best_epoch;
    Ok(history)
}

/// A step model plus precomputed frame geometry, packaged as a
/// [`FitProblem`]. Training pairs are teacher-forced: each fine frame's
/// conditioning coarse frame is its own projection through the mapping.
struct StepFitProblem {
    model: CvaeModel,
    ctx: StepContext,
    train_fine: Vec<FineFrame>,
    train_coarse: Vec<CoarseFrame>,
    val_fine: Vec<FineFrame>,
    val_coarse: Vec<CoarseFrame>,
    kl_warmup_epochs: usize,
    seed: u64,
}

impl StepFitProblem {
    fn frames(
        ensemble: &Ensemble,
        ctx: &StepContext,
        model: &CvaeModel,
    ) -> Result<(Vec<FineFrame>, Vec<CoarseFrame>), TrainError> {
        let mut fine = Vec::with_capacity(ensemble.n_frames());
        let mut coarse = Vec::with_capacity(ensemble.n_frames());
        for frame in ensemble.frames() {
            let projected = apply_mapping(frame, ctx.mapping())?;
            fine.push(FineFrame::new(frame, ctx, model.hyper())?);
            coarse.push(CoarseFrame::new(&projected, ctx, model.hyper())?);
        }
        Ok((fine, coarse))
    }

    /// Effective KL weight at a training epoch: a linear ramp during the
    /// configured warmup, the full weight afterwards and for validation.
    fn train_beta(&self, epoch: usize) -> f64 {
        let beta = self.model.hyper().beta;
        if self.kl_warmup_epochs == 0 {
            return beta;
        }
        beta * ((epoch + 1) as f64 / self.kl_warmup_epochs as f64).min(1.0)
    }

    fn eval(
        &self,
        epoch: usize,
        fine: &FineFrame,
        coarse: &CoarseFrame,
        noise_stream: u64,
        beta: f64,
        with_grad: bool,
    ) -> Result<(ElboParts, Vec<Array2<f64>>), TrainError> {
        let hyper = self.model.hyper();
        let noise = sample_noise_stream(
            self.ctx.n_coarse(),
            hyper.latent_dim,
            self.seed,
            noise_stream,
        );
        let mut tape = crate::gnn::Tape::new();
        let bound = self.model.params().bind(&mut tape);
        let elbo = self.model.step_elbo_on(
            &mut tape,
            &bound,
            fine,
            coarse,
            &self.ctx,
            beta,
            hyper.gamma,
            &noise,
        )?;
        let parts = ElboParts {
            loss: tape.value(elbo.loss)[[0, 0]],
            recon: tape.value(elbo.recon)[[0, 0]],
            kl: tape.value(elbo.kl)[[0, 0]],
        };
        if !parts.recon.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                component: "reconstruction loss",
            });
        }
        if !parts.kl.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                component: "KL divergence",
            });
        }
        if !with_grad {
            return Ok((parts, Vec::new()));
        }
        let grads = tape.backward(elbo.loss);
        let grad: Vec<Array2<f64>> = bound.vars().iter().map(|v| grads.of(*v).clone()).collect();
        if grad.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(TrainError::NonFinite {
                epoch,
                component: "gradient",
            });
        }
        Ok((parts, grad))
    }
}

impl FitProblem for StepFitProblem {
    fn params(&self) -> &ParamSet {
        self.model.params()
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        self.model.params_mut()
    }

    fn n_train(&self) -> usize {
        self.train_fine.len()
    }

    fn n_val(&self) -> usize {
        self.val_fine.len()
    }

    fn train_eval(
        &self,
        epoch: usize,
        item: usize,
    ) -> Result<(ElboParts, Vec<Array2<f64>>), TrainError> {
        // Noise is keyed to the frame identity, not its shuffled position,
        // so batching choices cannot change which noise a frame sees.
        let stream = ((epoch as u64) << 32) | item as u64;
        self.eval(
            epoch,
            &self.train_fine[item],
            &self.train_coarse[item],
            stream,
            self.train_beta(epoch),
            true,
        )
    }

    fn val_eval(&self, epoch: usize, item: usize) -> Result<ElboParts, TrainError> {
        let stream = VAL_NOISE_STREAM | item as u64;
        let (parts, _) = self.eval(
            epoch,
            &self.val_fine[item],
            &self.val_coarse[item],
            stream,
            self.model.hyper().beta,
            false,
        )?;
        Ok(parts)
    }
}

/// Train one step model on teacher-forced (fine, projected-coarse) pairs,
/// reporting each epoch through `log`.
pub fn fit_step_model_logged(
    train: &Ensemble,
    val: &Ensemble,
    mapping: &CGMapping,
    model: CvaeModel,
    cfg: &TrainConfig,
    log: impl FnMut(&EpochRecord),
) -> Result<(CvaeModel, TrainHistory), TrainError> {
    cfg.validate()?;
    let ctx = StepContext::from_topology(train.topology(), mapping.clone())?;
    let (train_fine, train_coarse) = StepFitProblem::frames(train, &ctx, &model)?;
    let (val_fine, val_coarse) = StepFitProblem::frames(val, &ctx, &model)?;
    let mut problem = StepFitProblem {
        model,
        ctx,
        train_fine,
        train_coarse,
        val_fine,
        val_coarse,
        kl_warmup_epochs: cfg.kl_warmup_epochs,
        seed: cfg.seed,
    };
    let history = fit(&mut problem, cfg, log)?;
    Ok((problem.model, history))
}

/// [`fit_step_model_logged`] without a logger.
pub fn fit_step_model(
    train: &Ensemble,
    val: &Ensemble,
    mapping: &CGMapping,
    model: CvaeModel,
    cfg: &TrainConfig,
) -> Result<(CvaeModel, TrainHistory), TrainError> {
    fit_step_model_logged(train, val, mapping, model, cfg, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cvae::CvaeHyper;
    use crate::mol::{Atom, Conformation, Element, Topology};
    use rand::Rng;

    fn single_atom_ensemble(n_frames: usize) -> Ensemble {
        let topology = Topology::new(
            vec![Atom {
                element: Element::C,
                name: "CA".into(),
                residue_index: 0,
                residue_type: "ALA".into(),
            }],
            vec![],
        )
        .unwrap();
        let frames = (0..n_frames)
            .map(|i| Conformation::from_rows(&[[i as f64, 0.0, 0.0]], 0).unwrap())
            .collect();
        Ensemble::new(topology, frames).unwrap()
    }

    fn frame_ids(ensemble: &Ensemble) -> Vec<usize> {
        ensemble
            .frames()
            .iter()
            .map(|f| f.position(0)[0].round() as usize)
            .collect()
    }

    #[test]
    fn split_hits_published_sizes() {
        let cfg = TrainConfig::default();
        let (train, val, test) = split_dataset(&single_atom_ensemble(3000), &cfg).unwrap();
        assert_eq!(
            (train.n_frames(), val.n_frames(), test.n_frames()),
            (2400, 300, 300)
        );
        let (train, val, test) = split_dataset(&single_atom_ensemble(10), &cfg).unwrap();
        assert_eq!((train.n_frames(), val.n_frames(), test.n_frames()), (8, 1, 1));
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_seeded() {
        let cfg = TrainConfig::default();
        let ensemble = single_atom_ensemble(50);
        let (train, val, test) = split_dataset(&ensemble, &cfg).unwrap();
        let mut all = frame_ids(&train);
        all.extend(frame_ids(&val));
        all.extend(frame_ids(&test));
        let mut sorted = all.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 50, "splits overlap or drop frames");
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());

        let (train2, val2, test2) = split_dataset(&ensemble, &cfg).unwrap();
        assert_eq!(frame_ids(&train), frame_ids(&train2));
        assert_eq!(frame_ids(&val), frame_ids(&val2));
        assert_eq!(frame_ids(&test), frame_ids(&test2));

        let other = TrainConfig {
            seed: 1,
            ..TrainConfig::default()
        };
        let (train3, _, _) = split_dataset(&ensemble, &other).unwrap();
        assert_ne!(frame_ids(&train), frame_ids(&train3));
        // The shuffle actually permutes: train is not simply 0..40.
        assert_ne!(frame_ids(&train), (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn split_rejects_small_and_degenerate_inputs() {
        let cfg = TrainConfig::default();
        let err = split_dataset(&single_atom_ensemble(9), &cfg).unwrap_err();
        assert!(matches!(
            err,
            TrainError::TooFewFrames {
                minimum: 10,
                actual: 9
            }
        ));
        let bad = TrainConfig {
            train_fraction: 0.5,
            val_fraction: 0.2,
            test_fraction: 0.2,
            ..TrainConfig::default()
        };
        assert!(matches!(
            split_dataset(&single_atom_ensemble(20), &bad),
            Err(TrainError::BadConfig(_))
        ));
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        let mut bad = ok.clone();
        bad.learning_rate = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.scheduler_factor = 1.0;
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.batch_size = 0;
        assert!(bad.validate().is_err());
    }

    /// Quadratic bowl with a known optimum, run through the same loop as
    /// the step models.
    struct Quadratic {
        params: ParamSet,
        target: Array2<f64>,
    }

    impl Quadratic {
        fn new() -> Self {
            let mut params = ParamSet::new();
            params.push("theta", Array2::zeros((2, 3)));
            let target = Array2::from_shape_fn((2, 3), |(i, j)| {
                if (i + j) % 2 == 0 {
                    0.3
                } else {
                    -0.3
                }
            });
            Quadratic { params, target }
        }

        fn parts(&self) -> ElboParts {
            let theta = &self.params.arrays()[0];
            let loss = theta
                .iter()
                .zip(self.target.iter())
                .map(|(t, c)| (t - c) * (t - c))
                .sum::<f64>();
            ElboParts {
                loss,
                recon: loss,
                kl: 0.0,
            }
        }
    }

    impl FitProblem for Quadratic {
        fn params(&self) -> &ParamSet {
            &self.params
        }
        fn params_mut(&mut self) -> &mut ParamSet {
            &mut self.params
        }
        fn n_train(&self) -> usize {
            4
        }
        fn n_val(&self) -> usize {
            2
        }
        fn train_eval(
            &self,
            _epoch: usize,
            _item: usize,
        ) -> Result<(ElboParts, Vec<Array2<f64>>), TrainError> {
            let theta = &self.params.arrays()[0];
            let grad = Array2::from_shape_fn(theta.dim(), |idx| {
                2.0 * (theta[idx] - self.target[idx])
            });
            Ok((self.parts(), vec![grad]))
        }
        fn val_eval(&self, _epoch: usize, _item: usize) -> Result<ElboParts, TrainError> {
            Ok(self.parts())
        }
    }

    #[test]
    fn quadratic_surrogate_converges_to_optimum() {
        let mut problem = Quadratic::new();
        // A gentle decay schedule lets progress resume between plateau
        // events, so the learning rate anneals all the way down instead of
        // collapsing while the iterate is still approaching.
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 2,
            accumulation_steps: 1,
            learning_rate: 0.1,
            scheduler_factor: 0.8,
            scheduler_patience: 5,
            patience: 200,
            ..TrainConfig::default()
        };
        let history = fit(&mut problem, &cfg, |_| {}).unwrap();
        let theta = &problem.params.arrays()[0];
        let worst = theta
            .iter()
            .zip(problem.target.iter())
            .map(|(t, c)| (t - c).abs())
            .fold(0.0, f64::max);
        assert!(
            worst <= 1e-6,
            "distance to optimum {worst} after {} epochs",
            history.epochs.len()
        );
        // Loss history is recorded for every epoch run.
        assert!(!history.epochs.is_empty());
        assert!(history.best().unwrap().val_loss <= history.epochs[0].val_loss);
    }

    /// Constant loss and zero gradient: validation can never improve after
    /// the first epoch, which exercises scheduler and early stopping.
    struct Constant {
        params: ParamSet,
    }

    impl Constant {
        fn new() -> Self {
            let mut params = ParamSet::new();
            params.push("theta", Array2::zeros((1, 1)));
            Constant { params }
        }
    }

    impl FitProblem for Constant {
        fn params(&self) -> &ParamSet {
            &self.params
        }
        fn params_mut(&mut self) -> &mut ParamSet {
            &mut self.params
        }
        fn n_train(&self) -> usize {
            2
        }
        fn n_val(&self) -> usize {
            1
        }
        fn train_eval(
            &self,
            _epoch: usize,
            _item: usize,
        ) -> Result<(ElboParts, Vec<Array2<f64>>), TrainError> {
            let parts = ElboParts {
                loss: 1.0,
                recon: 1.0,
                kl: 0.0,
            };
            Ok((parts, vec![Array2::zeros((1, 1))]))
        }
        fn val_eval(&self, _epoch: usize, _item: usize) -> Result<ElboParts, TrainError> {
            Ok(ElboParts {
                loss: 1.0,
                recon: 1.0,
                kl: 0.0,
            })
        }
    }

    #[test]
    fn stagnation_decays_lr_and_stops_early() {
        let mut problem = Constant::new();
        let cfg = TrainConfig {
            epochs: 100,
            batch_size: 1,
            accumulation_steps: 1,
            learning_rate: 1.0,
            scheduler_factor: 0.210,
            scheduler_patience: 2,
            patience: 5,
            ..TrainConfig::default()
        };
        let history = fit(&mut problem, &cfg, |_| {}).unwrap();
        // Epoch 0 improves over infinity; epochs 1..=5 stagnate, stopping
        // at patience 5: six epochs total.
        assert_eq!(history.epochs.len(), 6);
        assert_eq!(history.best_epoch, 0);
        // Scheduler fires after epochs 2 and 4: the stated factor
        // multiplies the learning rate each time.
        assert!((history.epochs[2].lr - 1.0).abs() < 1e-12);
        assert!((history.epochs[3].lr - 0.210).abs() < 1e-12);
        assert!((history.epochs[5].lr - 0.210 * 0.210).abs() < 1e-12);
    }

    struct Exploding {
        params: ParamSet,
    }

    impl FitProblem for Exploding {
        fn params(&self) -> &ParamSet {
            &self.params
        }
        fn params_mut(&mut self) -> &mut ParamSet {
            &mut self.params
        }
        fn n_train(&self) -> usize {
            1
        }
        fn n_val(&self) -> usize {
            1
        }
        fn train_eval(
            &self,
            epoch: usize,
            _item: usize,
        ) -> Result<(ElboParts, Vec<Array2<f64>>), TrainError> {
            if epoch == 3 {
                return Err(TrainError::NonFinite {
                    epoch,
                    component: "reconstruction loss",
                });
            }
            Ok((
                ElboParts {
                    loss: 1.0 / (epoch + 1) as f64,
                    recon: 0.0,
                    kl: 0.0,
                },
                vec![Array2::zeros((1, 1))],
            ))
        }
        fn val_eval(&self, epoch: usize, _item: usize) -> Result<ElboParts, TrainError> {
            Ok(ElboParts {
                loss: 1.0 / (epoch + 1) as f64,
                recon: 0.0,
                kl: 0.0,
            })
        }
    }

    #[test]
    fn divergence_aborts_with_epoch_and_component() {
        let mut params = ParamSet::new();
        params.push("theta", Array2::zeros((1, 1)));
        let mut problem = Exploding { params };
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 1,
            accumulation_steps: 1,
            ..TrainConfig::default()
        };
        let err = fit(&mut problem, &cfg, |_| {}).unwrap_err();
        let message = err.to_string();
        assert!(
            message.contains("epoch 3") && message.contains("reconstruction"),
            "unhelpful diagnostic: {message}"
        );
    }

    fn toy_step_ensemble(n_frames: usize) -> (Ensemble, CGMapping) {
        use Element::{C, N, O};
        let elements = [C, N, C, O, C, C];
        let atoms: Vec<Atom> = elements
            .iter()
            .enumerate()
            .map(|(i, &element)| Atom {
                element,
                name: format!("X{i}"),
                residue_index: i / 3,
                residue_type: "ALA".into(),
            })
            .collect();
        let bonds: Vec<(usize, usize)> = (0..5).map(|i| (i, i + 1)).collect();
        let topology = Topology::new(atoms, bonds).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let frames: Vec<Conformation> = (0..n_frames)
            .map(|_| {
                let coords = Array2::from_shape_fn((6, 3), |(i, d)| {
                    let base = if d == 0 { 1.5 * i as f64 } else { 0.0 };
                    base + rng.gen_range(-0.2..0.2)
                });
                Conformation::new(coords, 0).unwrap()
            })
            .collect();
        let ensemble = Ensemble::new(topology, frames).unwrap();
        let mapping = CGMapping::uniform(vec![0, 0, 0, 1, 1, 1], 2, 0).unwrap();
        (ensemble, mapping)
    }

    fn toy_train_hyper() -> CvaeHyper {
        CvaeHyper {
            k: 3,
            gamma: 0.5,
            encoder_depth: 1,
            prior_depth: 1,
            decoder_depth: 1,
            d_cut: 4.0,
            d_cut_cg: 12.0,
            f: 4,
            latent_dim: 2,
            beta: 0.05,
            multi_hop_order: 1,
        }
    }

    #[test]
    fn accumulation_matches_larger_batch_exactly() {
        let (ensemble, mapping) = toy_step_ensemble(10);
        let train = ensemble.subset(&[0, 1, 2, 3]).unwrap();
        let val = ensemble.subset(&[4, 5]).unwrap();
        let hyper = toy_train_hyper();
        let base = TrainConfig {
            epochs: 10,
            learning_rate: 1e-3,
            patience: 100,
            scheduler_patience: 100,
            seed: 7,
            ..TrainConfig::default()
        };
        let accumulated = TrainConfig {
            batch_size: 1,
            accumulation_steps: 2,
            ..base.clone()
        };
        let batched = TrainConfig {
            batch_size: 2,
            accumulation_steps: 1,
            ..base
        };
        let ctx = StepContext::from_topology(train.topology(), mapping.clone()).unwrap();
        let model = CvaeModel::for_context(&hyper, &ctx, 11).unwrap();
        // Ten epochs with two updates each: twenty parameter updates.
        let (model_a, hist_a) =
            fit_step_model(&train, &val, &mapping, model.clone(), &accumulated).unwrap();
        let (model_b, hist_b) = fit_step_model(&train, &val, &mapping, model, &batched).unwrap();
        assert_eq!(hist_a.epochs.len(), 10);
        for (a, b) in model_a
            .params()
            .arrays()
            .iter()
            .zip(model_b.params().arrays())
        {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= 1e-10, "{x} vs {y}");
            }
        }
        for (ra, rb) in hist_a.epochs.iter().zip(hist_b.epochs.iter()) {
            assert!((ra.val_loss - rb.val_loss).abs() <= 1e-10);
        }
    }

    #[test]
    fn training_is_seed_deterministic_and_improves() {
        let (ensemble, mapping) = toy_step_ensemble(12);
        let cfg = TrainConfig {
            epochs: 15,
            batch_size: 2,
            accumulation_steps: 1,
            learning_rate: 3e-3,
            patience: 15,
            scheduler_patience: 5,
            seed: 3,
            ..TrainConfig::default()
        };
        let (train, val, _) = split_dataset(&ensemble, &cfg).unwrap();
        let hyper = toy_train_hyper();
        let ctx = StepContext::from_topology(train.topology(), mapping.clone()).unwrap();
        let model = CvaeModel::for_context(&hyper, &ctx, 5).unwrap();
        let (fit_a, hist_a) =
            fit_step_model(&train, &val, &mapping, model.clone(), &cfg).unwrap();
        let (fit_b, hist_b) = fit_step_model(&train, &val, &mapping, model, &cfg).unwrap();
        assert_eq!(fit_a.params().digest(), fit_b.params().digest());
        assert_eq!(hist_a, hist_b);
        // The optimizer makes real progress on the toy problem.
        let first = hist_a.epochs[0].val_loss;
        let best = hist_a.best().unwrap().val_loss;
        assert!(best < first, "no improvement: {first} -> {best}");
    }

    #[test]
    fn best_checkpoint_is_restored() {
        let (ensemble, mapping) = toy_step_ensemble(10);
        let train = ensemble.subset(&[0, 1, 2, 3, 4, 5]).unwrap();
        let val = ensemble.subset(&[6, 7]).unwrap();
        // An aggressive learning rate makes late epochs overshoot, so the
        // best epoch is unlikely to be the last one.
        let cfg = TrainConfig {
            epochs: 12,
            batch_size: 3,
            accumulation_steps: 1,
            learning_rate: 0.05,
            patience: 12,
            scheduler_patience: 12,
            seed: 13,
            ..TrainConfig::default()
        };
        let hyper = toy_train_hyper();
        let ctx = StepContext::from_topology(train.topology(), mapping.clone()).unwrap();
        let model = CvaeModel::for_context(&hyper, &ctx, 17).unwrap();
        let (trained, history) = fit_step_model(&train, &val, &mapping, model, &cfg).unwrap();
        let best = history.best().unwrap();
        for record in &history.epochs {
            assert!(record.val_loss >= best.val_loss);
        }
        // Recomputing validation loss with the returned parameters matches
        // the best epoch's record, not the final epoch's.
        let ctx = StepContext::from_topology(train.topology(), mapping.clone()).unwrap();
        let (val_fine, val_coarse) = StepFitProblem::frames(&val, &ctx, &trained).unwrap();
        let problem = StepFitProblem {
            model: trained,
            ctx,
            train_fine: Vec::new(),
            train_coarse: Vec::new(),
            val_fine,
            val_coarse,
            kl_warmup_epochs: cfg.kl_warmup_epochs,
            seed: cfg.seed,
        };
        let mut sums = LossSums::new();
        for item in 0..problem.n_val() {
            sums.add(&problem.val_eval(0, item).unwrap());
        }
        let (loss, _, _) = sums.mean();
        assert!(
            (loss - best.val_loss).abs() < 1e-9,
            "restored params give {loss}, best epoch recorded {}",
            best.val_loss
        );
    }

    #[test]
    fn history_table_round_trips_through_disk() {
        let history = TrainHistory {
            epochs: vec![EpochRecord {
                epoch: 0,
                lr: 1e-3,
                train_loss: 2.5,
                train_recon: 2.0,
                train_kl: 5.0,
                val_loss: 2.6,
                val_recon: 2.1,
                val_kl: 5.1,
            }],
            best_epoch: 0,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.txt");
        history.write_table(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# epoch lr train_loss"));
        let fields: Vec<&str> = text.lines().nth(1).unwrap().split_whitespace().collect();
        assert_eq!(fields.len(), 8);
        assert_eq!(fields[0], "0");
        assert!((fields[5].parse::<f64>().unwrap() - 2.6).abs() < 1e-12);
    }
}
