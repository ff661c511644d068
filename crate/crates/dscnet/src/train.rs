//! Two-stage training: pre-train the plain auto-encoder, then fine-tune the
//! full network (encoder, self-expressive layer, decoder) jointly with Adam.
//!
//! Both stages are full-batch and deterministic: every epoch uses all N
//! samples as one batch, so the optimization is a deterministic momentum
//! method rather than a stochastic one. Given (seed, config, schedule, data)
//! the final parameters are bit-reproducible.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::{zero_diagonal, Model, ModelConfig, SelfExpressiveMode, SELF_EXPR_PARAM};
use crate::tensor::Tensor;

/// Pre-train epoch budget when the caller does not choose one.
pub const DEFAULT_PRETRAIN_EPOCHS: usize = 1000;
/// Pre-training stops early when the relative loss improvement over this
/// many epochs drops below [`EARLY_STOP_REL_IMPROVEMENT`].
pub const EARLY_STOP_WINDOW: usize = 50;
pub const EARLY_STOP_REL_IMPROVEMENT: f64 = 1e-6;

/// Learning rate and epoch budget for one training stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSchedule {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl TrainSchedule {
    pub fn new(epochs: usize, seed: u64) -> TrainSchedule {
        TrainSchedule {
            learning_rate: 1e-3,
            epochs,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::invalid("TrainSchedule", "learning rate must be > 0"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("TrainSchedule", "epochs must be >= 1"));
        }
        Ok(())
    }
}

/// Fine-tune epoch budget for the L1-regularized network with K clusters.
pub fn finetune_epochs_l1(k: usize) -> usize {
    160 + 20 * k
}

/// Fine-tune epoch budget for the L2-regularized network with K clusters.
pub fn finetune_epochs_l2(k: usize) -> usize {
    50 + 25 * k
}

/// Self-expression weight schedule used for the face-clustering benchmark:
/// λ2 = 10^(K/10 - 3).
pub fn lambda2_for_clusters(k: usize) -> f64 {
    10f64.powf(k as f64 / 10.0 - 3.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub recon: f64,
    pub reg: f64,
    pub selfexpr: f64,
    pub seconds: f64,
}

/// Per-epoch loss history of one training run.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,total,recon,reg,selfexpr,seconds\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{:.6}\n",
                r.epoch, r.total, r.recon, r.reg, r.selfexpr, r.seconds
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn final_total(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.total)
    }
}

/// One Adam update for a single tensor. Standard exponential moment
/// estimates with bias correction; `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::shape(
            "adam_step",
            format!("param {:?} vs grad {:?}", param.shape(), grad.shape()),
        ));
    }
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    let (pd, gd, md, vd) = (param.data_mut(), grad.data(), m.data_mut(), v.data_mut());
    for i in 0..pd.len() {
        let g = gd[i];
        md[i] = beta1 * md[i] + (1.0 - beta1) * g;
        vd[i] = beta2 * vd[i] + (1.0 - beta2) * g * g;
        let m_hat = md[i] / bc1;
        let v_hat = vd[i] / bc2;
        pd[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok(())
}

/// Adam optimizer state over a named parameter set.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Advance the shared step counter; call once per optimization step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Apply the update for one named parameter within the current step.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        adam_step(
            param,
            grad,
            m,
            v,
            self.t,
            self.lr,
            self.beta1,
            self.beta2,
            self.epsilon,
        )
    }
}

/// Options for [`finetune`].
#[derive(Debug, Clone, Copy, Default)]
pub struct FinetuneOptions {
    /// Feed the decoder Z instead of C·Z (diagnostic path; the
    /// reconstruction term then carries no gradient into C).
    pub bypass_self_expression: bool,
    /// Update only the self-expressive layer, leaving encoder and decoder
    /// at their initialization.
    pub freeze_autoencoder: bool,
}

/// Stage 1: train the plain auto-encoder (no self-expressive layer) on the
/// whole dataset as a single batch, minimizing ½‖X - X̂‖². Stops early when
/// the loss has stopped improving; aborts if the loss leaves the reals.
pub fn pretrain(
    x: &Tensor,
    config: &ModelConfig,
    schedule: &TrainSchedule,
) -> Result<(Vec<(String, Tensor)>, TrainLog)> {
    schedule.validate()?;
    let mut model = Model::new(config, SelfExpressiveMode::Disabled, schedule.seed)?;
    let log = run_epochs(&mut model, x, schedule, true, &FinetuneOptions::default())?;
    Ok((model.param_values(), log))
}

/// Stage 2: initialize encoder/decoder from `pretrained` (C keeps its tiny
/// random init) and minimize the composite loss over all parameters jointly.
pub fn finetune(
    x: &Tensor,
    pretrained: &[(String, Tensor)],
    config: &ModelConfig,
    schedule: &TrainSchedule,
    options: &FinetuneOptions,
) -> Result<(Model, TrainLog)> {
    schedule.validate()?;
    let mode = if options.bypass_self_expression {
        SelfExpressiveMode::Bypassed
    } else {
        SelfExpressiveMode::Enabled
    };
    let mut model = Model::new(config, mode, schedule.seed)?;
    model.apply_params(pretrained)?;
    let log = run_epochs(&mut model, x, schedule, false, options)?;
    Ok((model, log))
}

fn run_epochs(
    model: &mut Model,
    x: &Tensor,
    schedule: &TrainSchedule,
    early_stop: bool,
    options: &FinetuneOptions,
) -> Result<TrainLog> {
    model.set_input(x.clone())?;
    let mut adam = Adam::new(schedule.learning_rate);
    let mut log = TrainLog::default();
    let loss_node = model.loss_node();
    let params: Vec<(String, crate::autodiff::NodeId)> = model.graph.params().to_vec();
    let c_id = model.graph.param_id(SELF_EXPR_PARAM);
    let zero_diag = model.config.zero_diag;
    let mut window: Vec<f64> = Vec::new();

    for epoch in 1..=schedule.epochs {
        let started = Instant::now();
        let parts = model.loss_parts();
        if !parts.total.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: parts.total,
            });
        }

        let grads = model.graph.backward(loss_node)?;
        adam.begin_step();
        for (name, id) in &params {
            if options.freeze_autoencoder && name != SELF_EXPR_PARAM {
                continue;
            }
            adam.update(name, model.graph.value_mut(*id), &grads[name])?;
        }
        if zero_diag {
            if let Some(cid) = c_id {
                zero_diagonal(model.graph.value_mut(cid));
            }
        }
        model.graph.forward();

        log.records.push(EpochRecord {
            epoch,
            total: parts.total,
            recon: parts.recon,
            reg: parts.reg,
            selfexpr: parts.selfexpr,
            seconds: started.elapsed().as_secs_f64(),
        });

        if early_stop {
            window.push(parts.total);
            if window.len() > EARLY_STOP_WINDOW {
                let old = window[window.len() - 1 - EARLY_STOP_WINDOW];
                let improvement = (old - parts.total) / old.abs().max(f64::MIN_POSITIVE);
                if improvement < EARLY_STOP_REL_IMPROVEMENT {
                    break;
                }
            }
        }
    }

    let final_parts = model.loss_parts();
    if !final_parts.total.is_finite() {
        return Err(Error::Diverged {
            epoch: schedule.epochs,
            loss: final_parts.total,
        });
    }
    Ok(log)
}
