//! Training and sampling over the expanded crystal domain.
//!
//! One training step draws a step index `t ~ U(1, T)` per crystal,
//! pads the crystal with mirage atoms, corrupts lattice, coordinates
//! and types with their forward kernels, and minimizes
//!
//! ```text
//! kappa_1 * loss_lattice + kappa_2 * loss_coords + kappa_3 * loss_types
//! ```
//!
//! assembled on the autodiff tape so one backward sweep yields exact
//! parameter gradients. The coordinate term is restricted to real-atom
//! rows when `mask_mirage_coords` is set: masked rows never enter the
//! graph, so perturbing their targets cannot change any bit of the
//! loss. The lattice term starts at `t = 2`; decoding at `t = 1` is
//! deterministic and has no trained reconstruction term.
//!
//! Sampling starts every trajectory at the joint prior over `n_m`
//! slots (`L_T ~ N(0, I)`, `F_T ~ U[0,1)^3`, `A_T` uniform over all
//! `K + 1` classes including mirage), walks the three backward kernels
//! jointly for `T` steps, and reduces. All-mirage end states reduce to
//! nothing; they are counted, not raised.
//!
//! Every random draw comes from a stream cipher seeded by mixing the
//! root seed with the step or trajectory index, so results never
//! depend on how work is spread across threads.

use crate::autodiff::NodeId;
use crate::categorical::{
    type_forward_sample, type_posterior_from_rates, CategoricalError, TypeDistribution,
};
use crate::crystal::{
    infuse_with, mirage_mask, reduce, Crystal, CrystalError, ExpandedCrystal, MirageInit,
};
use crate::lattice::{lattice_backward_step, lattice_forward_sample, lattice_posterior};
use crate::linalg::{gaussian_mat3, Mat3};
use crate::net::{record_forward, ModelParams, NetError, RecordedForward};
use crate::schedule::{make_schedule, NoiseSchedule, ScheduleConfig, ScheduleError};
use crate::torus::{
    coord_backward_step, coord_loss_weight, wn_conditional_score, wn_forward_sample,
    WrappedScoreConfig,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("crystal {index} has {n} atoms, more than the {n_m} slots configured")]
    OversizeCrystal { index: usize, n: usize, n_m: usize },
    #[error("slot count {n_m} outside [{min}, {max}] allowed by dataset and model")]
    BadSlotCount { n_m: usize, min: usize, max: usize },
    #[error("loss weights must be nonnegative, got ({0}, {1}, {2})")]
    NegativeKappa(f64, f64, f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty loss history")]
    EmptyHistory,
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Categorical(#[from] CategoricalError),
    #[error(transparent)]
    Crystal(#[from] CrystalError),
}

/// Training hyperparameters and variant flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Slots per expanded crystal; `None` resolves to the largest
    /// dataset atom count plus 5.
    pub n_m: Option<usize>,
    /// Weight of the lattice loss term.
    pub kappa_lattice: f64,
    /// Weight of the coordinate loss term.
    pub kappa_coords: f64,
    /// Weight of the type loss term.
    pub kappa_types: f64,
    /// Diffusion steps.
    pub t_max: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub score: WrappedScoreConfig,
    /// Steps between loss-balance log lines emitted by the CLI loop.
    pub report_interval: usize,
    /// Placement of mirage coordinates during infusion.
    pub mirage_init: MirageInit,
    /// When set, only real-atom rows enter the coordinate loss.
    pub mask_mirage_coords: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_m: None,
            kappa_lattice: 1.0,
            kappa_coords: 1.0,
            kappa_types: 1.0,
            t_max: 100,
            batch_size: 32,
            epochs: 20,
            learning_rate: 1e-3,
            seed: 0,
            score: WrappedScoreConfig::default(),
            report_interval: 50,
            mirage_init: MirageInit::Uniform,
            mask_mirage_coords: true,
        }
    }
}

/// The three weighted loss contributions of one step, with their
/// percentage shares of the total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lattice: f64,
    pub coords: f64,
    pub types: f64,
    /// Percentages in (lattice, coords, types) order; they sum to 100
    /// unless the total is exactly zero, in which case all three are 0.
    pub shares: [f64; 3],
}

impl LossBreakdown {
    pub fn new(lattice: f64, coords: f64, types: f64) -> Self {
        let total = lattice + coords + types;
        let shares = if total > 0.0 {
            [
                100.0 * lattice / total,
                100.0 * coords / total,
                100.0 * types / total,
            ]
        } else {
            [0.0; 3]
        };
        LossBreakdown {
            lattice,
            coords,
            types,
            shares,
        }
    }

    pub fn total(&self) -> f64 {
        self.lattice + self.coords + self.types
    }
}

/// Percentage shares averaged over a logged span, component-wise mean
/// of the raw values with shares recomputed from the means.
pub fn loss_balance_report(history: &[LossBreakdown]) -> Result<LossBreakdown, EngineError> {
    if history.is_empty() {
        return Err(EngineError::EmptyHistory);
    }
    let n = history.len() as f64;
    let lattice = history.iter().map(|b| b.lattice).sum::<f64>() / n;
    let coords = history.iter().map(|b| b.coords).sum::<f64>() / n;
    let types = history.iter().map(|b| b.types).sum::<f64>() / n;
    Ok(LossBreakdown::new(lattice, coords, types))
}

/// Adam with bias correction. Moments are public so checkpoints can
/// carry the exact optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub count: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &ModelParams, learning_rate: f64) -> Self {
        let zeros: Vec<Array2<f64>> = params
            .tensors()
            .iter()
            .map(|(_, t)| Array2::zeros(t.dim()))
            .collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            count: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Array2<f64>]) {
        self.count += 1;
        let c1 = 1.0 - self.beta1.powi(self.count as i32);
        let c2 = 1.0 - self.beta2.powi(self.count as i32);
        for ((tensor, grad), (m, v)) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(tensor)
                .and(grad)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                });
        }
    }
}

/// Mixes the root seed with a purpose tag and two indices into an
/// independent deterministic stream.
pub fn derive_rng(root: u64, salt: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut z = root
        ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ a.wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ b.wrapping_mul(0x94D0_49BB_1331_11EB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

const SALT_TRAIN: u64 = 0x5452_4149;
const SALT_SAMPLE: u64 = 0x5341_4d50;
const SALT_SHUFFLE: u64 = 0x5348_5546;

/// Deterministic epoch ordering of dataset indices.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = derive_rng(seed, SALT_SHUFFLE, epoch as u64, 0);
    order.shuffle(&mut rng);
    order
}

/// Mutable training state: parameters, optimizer, schedule and the
/// per-step loss history.
pub struct Trainer {
    pub params: ModelParams,
    pub opt: Adam,
    pub config: TrainConfig,
    pub schedule_config: ScheduleConfig,
    pub n_m: usize,
    pub schedule: NoiseSchedule,
    /// Coordinate loss normalization per step, index `t - 1`.
    lambdas: Vec<f64>,
    pub step: u64,
    pub history: Vec<LossBreakdown>,
}

impl Trainer {
    pub fn new(
        params: ModelParams,
        config: TrainConfig,
        schedule_config: ScheduleConfig,
        dataset_max_atoms: usize,
    ) -> Result<Self, EngineError> {
        if config.kappa_lattice < 0.0 || config.kappa_coords < 0.0 || config.kappa_types < 0.0 {
            return Err(EngineError::NegativeKappa(
                config.kappa_lattice,
                config.kappa_coords,
                config.kappa_types,
            ));
        }
        let n_m = config.n_m.unwrap_or(dataset_max_atoms + 5);
        if n_m < dataset_max_atoms.max(1) || n_m > params.config.max_atoms {
            return Err(EngineError::BadSlotCount {
                n_m,
                min: dataset_max_atoms.max(1),
                max: params.config.max_atoms,
            });
        }
        let schedule = make_schedule(config.t_max, &schedule_config)?;
        let lambdas = (1..=config.t_max)
            .map(|t| coord_loss_weight(schedule.sigma(t), &config.score))
            .collect();
        let opt = Adam::new(&params, config.learning_rate);
        Ok(Trainer {
            params,
            opt,
            config,
            schedule_config,
            n_m,
            schedule,
            lambdas,
            step: 0,
            history: Vec::new(),
        })
    }

    /// Rebuilds a trainer around restored parameter and optimizer
    /// state; `step` continues the stream-derivation sequence exactly
    /// where the saved run stopped.
    pub fn resume(
        params: ModelParams,
        opt: Adam,
        config: TrainConfig,
        schedule_config: ScheduleConfig,
        dataset_max_atoms: usize,
        step: u64,
    ) -> Result<Self, EngineError> {
        let mut t = Trainer::new(params, config, schedule_config, dataset_max_atoms)?;
        t.opt = opt;
        t.step = step;
        Ok(t)
    }

    pub fn lambda(&self, t: usize) -> f64 {
        self.lambdas[t - 1]
    }

    /// One optimizer update from one batch. Per-crystal work runs in
    /// parallel; gradients are averaged in batch order, so the result
    /// does not depend on thread count.
    pub fn train_step(&mut self, batch: &[Crystal]) -> Result<LossBreakdown, EngineError> {
        if batch.is_empty() {
            return Err(EngineError::EmptyBatch);
        }
        for (index, c) in batch.iter().enumerate() {
            if c.n_atoms() > self.n_m {
                return Err(EngineError::OversizeCrystal {
                    index,
                    n: c.n_atoms(),
                    n_m: self.n_m,
                });
            }
        }
        let step = self.step;
        let parts: Vec<(Vec<Array2<f64>>, [f64; 3])> = batch
            .par_iter()
            .enumerate()
            .map(|(i, crystal)| {
                let mut rng = derive_rng(self.config.seed, SALT_TRAIN, step, i as u64);
                self.crystal_loss_grads(crystal, &mut rng)
            })
            .collect::<Result<_, EngineError>>()?;

        let b = batch.len() as f64;
        let mut grads: Vec<Array2<f64>> = parts[0].0.iter().map(|g| g.clone()).collect();
        let mut sums = parts[0].1;
        for (g, s) in &parts[1..] {
            for (acc, gi) in grads.iter_mut().zip(g) {
                *acc += gi;
            }
            for k in 0..3 {
                sums[k] += s[k];
            }
        }
        for g in &mut grads {
            g.mapv_inplace(|v| v / b);
        }
        self.opt.step(&mut self.params, &grads);
        let breakdown = LossBreakdown::new(sums[0] / b, sums[1] / b, sums[2] / b);
        self.history.push(breakdown);
        self.step += 1;
        Ok(breakdown)
    }

    /// Corrupts one crystal at a random step and differentiates the
    /// joint weighted loss. Returns per-tensor gradients and the three
    /// weighted loss values.
    fn crystal_loss_grads<R: Rng>(
        &self,
        crystal: &Crystal,
        rng: &mut R,
    ) -> Result<(Vec<Array2<f64>>, [f64; 3]), EngineError> {
        let t_max = self.config.t_max;
        let t = rng.random_range(1..=t_max);
        let expanded = infuse_with(crystal, self.n_m, self.config.mirage_init, rng)?;
        let sigma_t = self.schedule.sigma(t);

        let l_t = lattice_forward_sample(&crystal.lattice, t, &self.schedule, rng);
        let f_t = wn_forward_sample(&expanded.frac_coords, sigma_t, rng);
        let k_total = self.params.config.k_total();
        let a0: Vec<usize> = expanded.atom_types.iter().map(|&a| a as usize).collect();
        let mut a_t = Vec::with_capacity(a0.len());
        for &slot_a0 in &a0 {
            a_t.push(type_forward_sample(slot_a0, t, &self.schedule, k_total, rng)?);
        }
        let a_t_u32: Vec<u32> = a_t.iter().map(|&a| a as u32).collect();

        let mut rec = record_forward(&self.params, &l_t, &f_t, &a_t_u32, t, t_max)?;
        let mut terms: Vec<NodeId> = Vec::with_capacity(3);

        // Lattice: KL between equal-variance Gaussians against the
        // forward posterior; no term at t = 1.
        let mut lattice_value = 0.0;
        if t >= 2 {
            let post = lattice_posterior(&l_t, &crystal.lattice, t, &self.schedule);
            let weight = self.config.kappa_lattice / (2.0 * post.variance);
            let mu = rec
                .tape
                .leaf(Array2::from_shape_fn((3, 3), |(r, c)| post.mean.0[r][c]));
            let d = rec.tape.sub(rec.lattice_mean, mu);
            let sq = rec.tape.mul(d, d);
            let s = rec.tape.sum_all(sq);
            let node = rec.tape.scale(s, weight);
            lattice_value = rec.tape.scalar(node);
            terms.push(node);
        }

        // Coordinates: score matching against the conditional wrapped
        // score, restricted to the masked rows.
        let target = wn_conditional_score(&f_t, &expanded.frac_coords, sigma_t, &self.config.score);
        let mask: Vec<usize> = if self.config.mask_mirage_coords {
            mirage_mask(&expanded)
        } else {
            (0..expanded.n_slots()).collect()
        };
        let coord_weight = self.config.kappa_coords * self.lambda(t);
        let coord_node = coord_loss_node(&mut rec, &target, &mask, coord_weight);
        let coords_value = rec.tape.scalar(coord_node);
        terms.push(coord_node);

        // Types: stepwise ELBO summed over every slot, mirage included.
        let type_node = self.type_loss_node(&mut rec, &a_t, &a0, t)?;
        let types_value = rec.tape.scalar(type_node);
        terms.push(type_node);

        let mut total = terms[0];
        for &term in &terms[1..] {
            total = rec.tape.add(total, term);
        }
        let grads = rec.backward(total).expect("loss is scalar by construction");
        Ok((grads, [lattice_value, coords_value, types_value]))
    }

    /// Builds the categorical loss on the tape: at `t = 1` the
    /// reconstruction cross-entropy, otherwise the KL between the
    /// hard-target posterior and the posterior induced by the predicted
    /// logits, using that only the predicted clean-type distribution
    /// carries gradients.
    fn type_loss_node(
        &self,
        rec: &mut RecordedForward,
        a_t: &[usize],
        a0: &[usize],
        t: usize,
    ) -> Result<NodeId, EngineError> {
        let kappa = self.config.kappa_types;
        let n = a_t.len();
        let k_total = self.params.config.k_total();
        let lsm = rec.tape.log_softmax(rec.type_logits);
        if t == 1 {
            let onehot = Array2::from_shape_fn((n, k_total), |(r, c)| {
                if a0[r] == c {
                    1.0
                } else {
                    0.0
                }
            });
            let oh = rec.tape.leaf(onehot);
            let picked = rec.tape.mul(oh, lsm);
            let s = rec.tape.sum_all(picked);
            return Ok(rec.tape.scale(s, -kappa));
        }
        let q_t = self.schedule.q_beta(t);
        let r_prev = self.schedule.q_alpha_bar(t - 1);
        let k = k_total as f64;
        // Likelihood rows Q_t[c -> a_t] and the hard-target posterior
        // are data, not functions of the parameters.
        let mut lik = Array2::zeros((n, k_total));
        let mut hard_post = Array2::zeros((n, k_total));
        let mut neg_entropy = 0.0;
        for r in 0..n {
            for c in 0..k_total {
                lik[(r, c)] = if c == a_t[r] {
                    1.0 - q_t + q_t / k
                } else {
                    q_t / k
                };
            }
            let hard = TypeDistribution::hard(a0[r], k_total)?;
            let post = type_posterior_from_rates(a_t[r], &hard, q_t, r_prev)?;
            for (c, &p) in post.probs().iter().enumerate() {
                hard_post[(r, c)] = p;
                neg_entropy += p * p.ln();
            }
        }
        let p0 = rec.tape.exp(lsm);
        let scaled = rec.tape.scale(p0, r_prev);
        let prior = rec.tape.add_const(scaled, (1.0 - r_prev) / k);
        let lik_leaf = rec.tape.leaf(lik);
        let w = rec.tape.mul(lik_leaf, prior);
        let lnw = rec.tape.ln(w);
        let hp = rec.tape.leaf(hard_post);
        let cross = rec.tape.mul(hp, lnw);
        let s1 = rec.tape.sum_all(cross);
        let rs = rec.tape.row_sum(w);
        let lnrs = rec.tape.ln(rs);
        let s2 = rec.tape.sum_all(lnrs);
        let diff = rec.tape.sub(s2, s1);
        let kl = rec.tape.add_const(diff, neg_entropy);
        Ok(rec.tape.scale(kl, kappa))
    }
}

/// Runs the configured number of epochs over `dataset`, shuffling with
/// a per-epoch stream and logging a loss-balance line every
/// `report_interval` steps.
///
/// The position within the run is derived from `trainer.step`, so a
/// trainer restored from a checkpoint continues with exactly the
/// batches and noise draws an uninterrupted run would have used.
pub fn train_epochs(trainer: &mut Trainer, dataset: &[Crystal]) -> Result<(), EngineError> {
    if dataset.is_empty() {
        return Err(EngineError::EmptyBatch);
    }
    let batch = trainer.config.batch_size.max(1);
    let steps_per_epoch = dataset.len().div_ceil(batch);
    let total = trainer.config.epochs as u64 * steps_per_epoch as u64;
    while trainer.step < total {
        let epoch = (trainer.step / steps_per_epoch as u64) as usize;
        let index_in_epoch = (trainer.step % steps_per_epoch as u64) as usize;
        let order = epoch_order(dataset.len(), trainer.config.seed, epoch);
        let ids = &order[index_in_epoch * batch..((index_in_epoch + 1) * batch).min(order.len())];
        let crystals: Vec<Crystal> = ids.iter().map(|&i| dataset[i].clone()).collect();
        let breakdown = trainer.train_step(&crystals)?;
        let interval = trainer.config.report_interval.max(1) as u64;
        if trainer.step % interval == 0 || trainer.step == total {
            let span = trainer.history.len().min(interval as usize);
            let report = loss_balance_report(&trainer.history[trainer.history.len() - span..])?;
            log::info!(
                "step {}/{} epoch {} loss {:.4} shares L {:.1}% F {:.1}% A {:.1}% (last {:.4})",
                trainer.step,
                total,
                epoch,
                report.total(),
                report.shares[0],
                report.shares[1],
                report.shares[2],
                breakdown.total(),
            );
        }
    }
    Ok(())
}

/// Masked squared score error on the tape:
/// `weight * sum_{i in mask} ||target_i - pred_i||^2`.
///
/// Rows outside `mask` are dropped before anything is placed on the
/// tape, so their target values cannot influence loss or gradients in
/// any bit.
pub fn coord_loss_node(
    rec: &mut RecordedForward,
    target: &[[f64; 3]],
    mask: &[usize],
    weight: f64,
) -> NodeId {
    let target_rows = rec.tape.leaf(Array2::from_shape_fn((mask.len(), 3), |(r, c)| {
        target[mask[r]][c]
    }));
    let picked = rec.tape.gather_rows(rec.coord_scores, mask.to_vec());
    let d = rec.tape.sub(target_rows, picked);
    let sq = rec.tape.mul(d, d);
    let s = rec.tape.sum_all(sq);
    rec.tape.scale(s, weight)
}

/// Generated crystals plus the count of all-mirage trajectories that
/// reduced to nothing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub crystals: Vec<Crystal>,
    pub discarded: usize,
}

/// Draws the joint prior state of one trajectory: standard normal
/// lattice, uniform coordinates, uniform types over all `k_total`
/// classes including mirage.
pub fn prior_state<R: Rng>(
    n_m: usize,
    k_total: usize,
    rng: &mut R,
) -> (Mat3, Vec<[f64; 3]>, Vec<u32>) {
    let l = gaussian_mat3(rng);
    let f = (0..n_m)
        .map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()])
        .collect();
    let a = (0..n_m).map(|_| rng.random_range(0..k_total) as u32).collect();
    (l, f, a)
}

/// Generates `count` crystals with `n_m` slots each. Trajectories run
/// in parallel on independent streams derived from `seed`, so any
/// thread count produces the same output.
///
/// The backward coordinate kernel consumes the network's score output
/// directly, so no series truncation settings are needed here.
pub fn sample(
    params: &ModelParams,
    count: usize,
    n_m: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<SampleOutcome, EngineError> {
    if n_m < 1 || n_m > params.config.max_atoms {
        return Err(EngineError::BadSlotCount {
            n_m,
            min: 1,
            max: params.config.max_atoms,
        });
    }
    let t_max = schedule.t_max();
    let k_total = params.config.k_total();
    let finite = |l: &Mat3, f: &[[f64; 3]], logits: &Array2<f64>| {
        l.is_finite()
            && f.iter().all(|r| r.iter().all(|v| v.is_finite()))
            && logits.iter().all(|v| v.is_finite())
    };
    let reduced: Vec<Option<Crystal>> = (0..count)
        .into_par_iter()
        .map(|traj| -> Result<Option<Crystal>, EngineError> {
            let mut rng = derive_rng(seed, SALT_SAMPLE, traj as u64, 0);
            let (mut l, mut f, mut a) = prior_state(n_m, k_total, &mut rng);
            for t in (1..=t_max).rev() {
                let out = crate::net::forward(params, &l, &f, &a, t, t_max)?;
                // A state that left the finite range can only keep
                // amplifying through the lattice head; count the
                // trajectory as a discard rather than failing the run.
                if !finite(&out.lattice_mean, &out.coord_scores, &out.type_logits) {
                    log::warn!("trajectory {traj} diverged at t = {t}; discarded");
                    return Ok(None);
                }
                l = lattice_backward_step(&out.lattice_mean, t, schedule, &mut rng);
                f = coord_backward_step(&f, &out.coord_scores, t, schedule, &mut rng);
                let mut next = Vec::with_capacity(a.len());
                for (slot, &cur) in a.iter().enumerate() {
                    let logits: Vec<f64> = out.type_logits.row(slot).to_vec();
                    let drawn = crate::categorical::type_backward_step(
                        cur as usize,
                        &logits,
                        t,
                        schedule,
                        &mut rng,
                    )?;
                    next.push(drawn as u32);
                }
                a = next;
            }
            if !l.is_finite() || f.iter().any(|r| r.iter().any(|v| !v.is_finite())) {
                log::warn!("trajectory {traj} diverged on the final step; discarded");
                return Ok(None);
            }
            let expanded = ExpandedCrystal {
                lattice: l,
                frac_coords: f,
                atom_types: a,
            };
            Ok(reduce(&expanded))
        })
        .collect::<Result<_, EngineError>>()?;
    let mut crystals = Vec::with_capacity(count);
    let mut discarded = 0;
    for r in reduced {
        match r {
            Some(c) => crystals.push(c),
            None => discarded += 1,
        }
    }
    Ok(SampleOutcome {
        crystals,
        discarded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::categorical::type_loss;
    use crate::net::ModelConfig;
    use crate::schedule::make_schedule;

    fn toy_model() -> ModelConfig {
        ModelConfig {
            hidden_dim: 16,
            num_layers: 2,
            num_freqs: 8,
            n_types: 3,
            max_atoms: 8,
        }
    }

    fn toy_train(t_max: usize) -> TrainConfig {
        TrainConfig {
            n_m: Some(6),
            t_max,
            batch_size: 10,
            learning_rate: 3e-3,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    fn toy_dataset(count: usize, seed: u64) -> Vec<Crystal> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let a = rng.random_range(4.0..5.0);
                let n = rng.random_range(2..=4);
                let coords = (0..n)
                    .map(|_| [rng.random(), rng.random(), rng.random()])
                    .collect();
                let types = (0..n).map(|_| rng.random_range(1..=3)).collect();
                Crystal::new(Mat3::cubic(a), coords, types).unwrap()
            })
            .collect()
    }

    #[test]
    fn oversize_crystal_is_rejected_with_its_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = ModelParams::init(toy_model(), &mut rng).unwrap();
        let mut trainer = Trainer::new(params, toy_train(6), ScheduleConfig::default(), 4).unwrap();
        let mut batch = toy_dataset(3, 2);
        let big = Crystal::new(
            Mat3::cubic(4.5),
            (0..7).map(|i| [0.1 * i as f64, 0.2, 0.3]).collect(),
            vec![1; 7],
        )
        .unwrap();
        batch.insert(2, big);
        match trainer.train_step(&batch) {
            Err(EngineError::OversizeCrystal { index, n, n_m }) => {
                assert_eq!((index, n, n_m), (2, 7, 6));
            }
            other => panic!("expected oversize rejection, got {other:?}"),
        }
    }

    #[test]
    fn first_step_is_bitwise_reproducible() {
        let batch = toy_dataset(10, 3);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let params = ModelParams::init(toy_model(), &mut rng).unwrap();
            let mut trainer = Trainer::new(params, toy_train(6), ScheduleConfig::default(), 4).unwrap();
            trainer.train_step(&batch).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "same seed and config must agree in every bit");
    }

    #[test]
    fn zero_coord_weight_ignores_coordinate_targets() {
        // With kappa_2 = 0 the coordinate term is scaled away, so the
        // total equals lattice + types and the coords share is 0.
        let batch = toy_dataset(10, 7);
        let mut config = toy_train(6);
        config.kappa_coords = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = ModelParams::init(toy_model(), &mut rng).unwrap();
        let mut trainer = Trainer::new(params, config, ScheduleConfig::default(), 4).unwrap();
        let b = trainer.train_step(&batch).unwrap();
        assert_eq!(b.coords, 0.0);
        assert_eq!(b.shares[1], 0.0);
        assert!((b.total() - (b.lattice + b.types)).abs() < 1e-15);
    }

    #[test]
    fn masked_loss_is_bitwise_blind_to_mirage_rows() {
        // Corrupting the coordinate targets of every masked-out row
        // must change neither the loss value nor any gradient bit.
        let crystal = &toy_dataset(1, 9)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let params = ModelParams::init(toy_model(), &mut rng).unwrap();
        let trainer = Trainer::new(params, toy_train(8), ScheduleConfig::default(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let expanded = infuse_with(crystal, 6, MirageInit::Uniform, &mut rng).unwrap();
        let t = 5;
        let sigma_t = trainer.schedule.sigma(t);
        let l_t = lattice_forward_sample(&crystal.lattice, t, &trainer.schedule, &mut rng);
        let f_t = wn_forward_sample(&expanded.frac_coords, sigma_t, &mut rng);
        let a_t: Vec<u32> = expanded.atom_types.clone();
        let mask = mirage_mask(&expanded);
        assert!(mask.len() < expanded.n_slots(), "fixture needs mirage rows");
        let target =
            wn_conditional_score(&f_t, &expanded.frac_coords, sigma_t, &trainer.config.score);
        let mut tampered = target.clone();
        for (i, row) in tampered.iter_mut().enumerate() {
            if !mask.contains(&i) {
                for v in row.iter_mut() {
                    *v += 1e6;
                }
            }
        }

        let run = |tgt: &[[f64; 3]]| {
            let mut rec =
                record_forward(&trainer.params, &l_t, &f_t, &a_t, t, 8).unwrap();
            let node = coord_loss_node(&mut rec, tgt, &mask, 1.7);
            let value = rec.tape.scalar(node);
            (value, rec.backward(node).unwrap())
        };
        let (v1, g1) = run(&target);
        let (v2, g2) = run(&tampered);
        assert!(v1.to_bits() == v2.to_bits(), "loss value changed");
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a, b, "gradient changed");
        }
    }

    #[test]
    fn tape_type_loss_matches_reference_value() {
        // The tape assembly and the plain evaluator compute the same
        // stepwise ELBO term through different algebra.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let params = ModelParams::init(toy_model(), &mut rng).unwrap();
        let config = toy_train(8);
        let trainer = Trainer::new(params, config, ScheduleConfig::default(), 4).unwrap();
        let crystal = &toy_dataset(1, 19)[0];
        for t in [1, 2, 5, 8] {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + t as u64);
            let expanded = infuse_with(crystal, 6, MirageInit::Uniform, &mut rng).unwrap();
            let a0: Vec<usize> = expanded.atom_types.iter().map(|&a| a as usize).collect();
            let k_total = trainer.params.config.k_total();
            let mut a_t = Vec::new();
            for &s in &a0 {
                a_t.push(type_forward_sample(s, t, &trainer.schedule, k_total, &mut rng).unwrap());
            }
            let a_t_u32: Vec<u32> = a_t.iter().map(|&a| a as u32).collect();
            let l_t = lattice_forward_sample(&crystal.lattice, t, &trainer.schedule, &mut rng);
            let f_t = wn_forward_sample(&expanded.frac_coords, trainer.schedule.sigma(t), &mut rng);
            let mut rec =
                record_forward(&trainer.params, &l_t, &f_t, &a_t_u32, t, 8).unwrap();
            let node = trainer.type_loss_node(&mut rec, &a_t, &a0, t).unwrap();
            let got = rec.tape.scalar(node);
            let logits = rec.tape.value(rec.type_logits).clone();
            let want = type_loss(&logits, &a_t, &a0, t, &trainer.schedule).unwrap();
            assert!(
                (got - want).abs() < 1e-10,
                "t = {t}: tape {got} vs reference {want}"
            );
        }
    }

    #[test]
    fn memorizing_ten_crystals_collapses_the_loss() {
        let batch = toy_dataset(10, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let params = ModelParams::init(toy_model(), &mut rng).unwrap();
        let mut trainer = Trainer::new(params, toy_train(8), ScheduleConfig::default(), 4).unwrap();
        let initial = trainer.train_step(&batch).unwrap().total();
        for _ in 0..199 {
            trainer.train_step(&batch).unwrap();
        }
        let tail: f64 = trainer.history[195..]
            .iter()
            .map(|b| b.total())
            .sum::<f64>()
            / 5.0;
        assert!(
            tail < 0.10 * initial,
            "initial {initial}, late average {tail}"
        );
    }

    #[test]
    fn balance_report_averages_and_reacts_to_kappa() {
        assert!(matches!(
            loss_balance_report(&[]),
            Err(EngineError::EmptyHistory)
        ));
        let equal = loss_balance_report(&[LossBreakdown::new(2.0, 2.0, 2.0)]).unwrap();
        for s in equal.shares {
            assert!((s - 100.0 / 3.0).abs() < 1e-12);
        }
        let zero_component = loss_balance_report(&[LossBreakdown::new(1.0, 0.0, 3.0)]).unwrap();
        assert_eq!(zero_component.shares[1], 0.0);
        assert!((zero_component.shares.iter().sum::<f64>() - 100.0).abs() < 0.1);

        // Doubling kappa_3 strictly raises the types share on the same
        // data and noise draws.
        let batch = toy_dataset(10, 27);
        let share_for = |kappa: f64| {
            let mut rng = ChaCha8Rng::seed_from_u64(29);
            let params = ModelParams::init(toy_model(), &mut rng).unwrap();
            let mut config = toy_train(6);
            config.kappa_types = kappa;
            let mut trainer = Trainer::new(params, config, ScheduleConfig::default(), 4).unwrap();
            trainer.train_step(&batch).unwrap().shares[2]
        };
        let base = share_for(1.0);
        let doubled = share_for(2.0);
        assert!(doubled > base, "share {base} -> {doubled}");
    }

    #[test]
    fn sampling_is_seeded_and_respects_domains() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let params = ModelParams::init(toy_model(), &mut rng).unwrap();
        let schedule = make_schedule(6, &ScheduleConfig::default()).unwrap();
        let one = sample(&params, 8, 6, &schedule, 42).unwrap();
        let two = sample(&params, 8, 6, &schedule, 42).unwrap();
        assert_eq!(one, two, "same seed must reproduce samples");
        assert_eq!(one.crystals.len() + one.discarded, 8);
        for c in &one.crystals {
            assert!(c.n_atoms() >= 1 && c.n_atoms() <= 6);
            for f in &c.frac_coords {
                for v in f {
                    assert!((0.0..1.0).contains(v));
                }
            }
            for &a in &c.atom_types {
                assert!(a >= 1 && a <= 4);
            }
        }
    }

    #[test]
    fn untrained_single_backward_step_stays_in_domain() {
        // A raw-initialization model and the shortest usable schedule
        // must still produce wrapped coordinates and legal indices.
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let params = ModelParams::init(toy_model(), &mut rng).unwrap();
        let schedule = make_schedule(2, &ScheduleConfig::default()).unwrap();
        let out = sample(&params, 12, 5, &schedule, 7).unwrap();
        for c in &out.crystals {
            for f in &c.frac_coords {
                for v in f {
                    assert!((0.0..1.0).contains(v), "coordinate {v} escaped the cell");
                }
            }
            for &a in &c.atom_types {
                assert!(a >= 1 && a as usize <= 4);
            }
        }
    }

    #[test]
    fn prior_type_statistics_match_the_closed_form() {
        // P(all slots real) = (K / (K+1))^n_m at the prior; with
        // K = 100 real types and 25 slots this is about 0.78, and the
        // exactly-one-mirage probability is about 0.19.
        let k_total = 101;
        let n_m = 25;
        let draws = 100_000;
        let mut all_real = 0u32;
        let mut one_mirage = 0u32;
        for i in 0..draws {
            let mut rng = derive_rng(99, SALT_SAMPLE, i as u64, 0);
            let (_, _, a) = prior_state(n_m, k_total, &mut rng);
            let mirages = a.iter().filter(|&&x| x == 0).count();
            if mirages == 0 {
                all_real += 1;
            } else if mirages == 1 {
                one_mirage += 1;
            }
        }
        let p_real = all_real as f64 / draws as f64;
        let p_one = one_mirage as f64 / draws as f64;
        let want_real = (100.0f64 / 101.0).powi(25);
        let want_one = 25.0 * (100.0f64 / 101.0).powi(24) / 101.0;
        assert!((p_real - want_real).abs() < 0.02, "{p_real} vs {want_real}");
        assert!((p_one - want_one).abs() < 0.02, "{p_one} vs {want_one}");
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(20, 5, 0);
        let b = epoch_order(20, 5, 0);
        assert_eq!(a, b);
        let c = epoch_order(20, 5, 1);
        assert_ne!(a, c, "different epochs should shuffle differently");
        let mut sorted = c.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn slot_count_bounds_are_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let params = ModelParams::init(toy_model(), &mut rng).unwrap();
        let bad = TrainConfig {
            n_m: Some(9),
            ..toy_train(6)
        };
        assert!(matches!(
            Trainer::new(params.clone(), bad, ScheduleConfig::default(), 4),
            Err(EngineError::BadSlotCount { n_m: 9, .. })
        ));
        let too_small = TrainConfig {
            n_m: Some(3),
            ..toy_train(6)
        };
        assert!(matches!(
            Trainer::new(params, too_small, ScheduleConfig::default(), 4),
            Err(EngineError::BadSlotCount { n_m: 3, .. })
        ));
    }
}
