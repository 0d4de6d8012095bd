//! Self-supervised pretraining loop and its optimizer.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::data::TimeSeriesBatch;
use crate::encoder::{forward, init_params, EncoderConfig, ModelParams, ParamNodes};
use crate::error::{Error, Result};
use crate::objective::{loss_node, targets, LossConfig};
use crate::partition::{extract_subblocks, plan_partition, PartitionParams, PartitionPlan};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_frac: f64,
    pub total_iters: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base_lr: 3e-4,
            weight_decay: 3e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            warmup_frac: 0.1,
            total_iters: 1500,
            batch_size: 128,
            seed: 1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(Error::Config("betas must lie in (0, 1)".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("warmup fraction must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 || self.eps < 0.0 {
            return Err(Error::Config("weight decay and eps must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn warmup_iters(&self) -> usize {
        (self.warmup_frac * self.total_iters as f64).round() as usize
    }
}

/// Linear warmup to `base_lr`, then cosine decay to zero at `total_iters`.
pub fn lr_at(t: usize, cfg: &OptimizerConfig) -> f64 {
    let warm = cfg.warmup_iters();
    if t < warm {
        return cfg.base_lr * t as f64 / warm as f64;
    }
    let span = cfg.total_iters.saturating_sub(warm);
    if span == 0 {
        return 0.0;
    }
    let progress = ((t - warm) as f64 / span as f64).min(1.0);
    cfg.base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// Adam moments for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update.
///
/// `p ← p − lr·(m̂ / (√v̂ + ε) + wd·p)`. Non-finite gradients abort the
/// step before any state is touched.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adamw_step",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::shape(
                "adamw_step",
                format!("tensor {i}: param {:?} grad {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::Numerics(format!("gradient of tensor {i} is not finite")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let iter = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((pi, &gi), (mi, vi)) in iter {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *pi);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    /// Effective sub-block count used this iteration.
    pub k: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<IterRecord>,
    /// Draws of k rejected because the window could not host them.
    pub resampled_k: usize,
    pub wall_clock: Duration,
}

impl TrainLog {
    /// `iter,k,lr,loss` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,k,lr,loss\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{:e},{}", r.iter, r.k, r.lr, r.loss);
        }
        out
    }

    /// Mean loss over a range of iterations.
    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let slice = &self.records[range];
        slice.iter().map(|r| r.loss).sum::<f64>() / slice.len() as f64
    }
}

const MAX_K_RETRIES: usize = 10;

/// Everything that defines a pretraining run.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    pub partition: PartitionParams,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
}

fn draw_plan(t: usize, params: &PartitionParams, rng: &mut ChaCha8Rng, log: &mut TrainLog) -> Result<PartitionPlan> {
    let mut last = None;
    for _ in 0..MAX_K_RETRIES {
        let k = params.sample_k(rng);
        match plan_partition(t, k, params.rho) {
            Ok(plan) => return Ok(plan),
            Err(e @ Error::InvalidPartition(_)) => {
                log.resampled_k += 1;
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap())
}

/// Loss and gradients for one batch of windows under a fixed plan.
pub fn batch_loss_and_grads(
    params: &ModelParams,
    batch: &TimeSeriesBatch,
    plan: &PartitionPlan,
    loss_cfg: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<Tensor>)> {
    let blocks = extract_subblocks(batch, plan)?;
    let instances = blocks.instances();
    let input = blocks.into_encoder_input();

    let mut graph = Graph::new();
    let nodes = ParamNodes::register(&mut graph, params, true);
    let x = graph.constant(input);
    let z = forward(&mut graph, &nodes, params.convs.len(), x, true)?;
    let tv = targets(plan.k, loss_cfg.positive_mode, Some(rng))?;
    let loss = loss_node(&mut graph, z, instances, plan.k, loss_cfg.tau, &tv)?;
    let value = graph.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numerics(format!("loss is {value}")));
    }
    let mut grads = graph.backward(loss)?;
    let g = nodes
        .0
        .iter()
        .zip(params.tensors())
        .map(|(&id, p)| grads.take(id).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((value, g))
}

/// Pretrains a freshly initialized encoder on `dataset`.
///
/// The encoder's input width is taken from the dataset. Every draw (batch
/// indices, k, shuffled targets) comes from one seeded stream, so runs are
/// reproducible bit for bit.
pub fn pretrain(dataset: &TimeSeriesBatch, cfg: &PretrainConfig) -> Result<(ModelParams, TrainLog)> {
    let encoder = EncoderConfig {
        input_channels: dataset.channels(),
        ..cfg.encoder.clone()
    };
    let params = init_params(&encoder, cfg.optimizer.seed)?;
    pretrain_from(dataset, params, cfg)
}

/// Continues pretraining from existing parameters.
pub fn pretrain_from(
    dataset: &TimeSeriesBatch,
    mut params: ModelParams,
    cfg: &PretrainConfig,
) -> Result<(ModelParams, TrainLog)> {
    cfg.partition.validate()?;
    cfg.loss.validate()?;
    cfg.optimizer.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let opt = &cfg.optimizer;
    let start = Instant::now();
    let mut log = TrainLog::default();
    let mut state = OptimizerState::new(params.tensors());
    // distinct stream from parameter initialization
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed ^ 0x005e_ed0f_d1c0);

    for iter in 0..opt.total_iters {
        let indices: Vec<usize> = (0..opt.batch_size).map(|_| rng.gen_range(0..dataset.len())).collect();
        let plan = draw_plan(dataset.window_len(), &cfg.partition, &mut rng, &mut log)?;
        let batch = dataset.gather(&indices)?;
        let (loss, grads) = batch_loss_and_grads(&params, &batch, &plan, &cfg.loss, &mut rng)?;
        let lr = lr_at(iter, opt);
        adamw_step(&mut params.tensors_mut(), &grads, &mut state, lr, opt)?;
        log.records.push(IterRecord {
            iter,
            k: plan.k,
            lr,
            loss,
        });
    }
    log.wall_clock = start.elapsed();
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};
    use crate::objective::PositiveMode;
    use crate::partition::SplitMode;

    fn opt(total: usize) -> OptimizerConfig {
        OptimizerConfig {
            total_iters: total,
            ..OptimizerConfig::default()
        }
    }

    #[test]
    fn schedule_shape() {
        let cfg = opt(1000);
        assert_eq!(cfg.warmup_iters(), 100);
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert!((lr_at(50, &cfg) - 1.5e-4).abs() < 1e-18);
        assert_eq!(lr_at(100, &cfg), 3e-4);
        assert!((lr_at(99, &cfg) - 3e-4).abs() < 4e-6);
        assert!(lr_at(1000, &cfg).abs() < 1e-20);
        assert!((lr_at(550, &cfg) - 1.5e-4).abs() < 1e-15);
        for t in 101..1000 {
            assert!(lr_at(t, &cfg) <= lr_at(t - 1, &cfg));
        }
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let cfg = OptimizerConfig {
            weight_decay: 0.01,
            ..OptimizerConfig::default()
        };
        let mut p = Tensor::full(&[3], 1.0);
        let mut state = OptimizerState::new([&p]);
        adamw_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut state, 0.1, &cfg).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.999).abs() < 1e-15));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            eps: 0.0,
            ..OptimizerConfig::default()
        };
        let mut p = Tensor::zeros(&[2]);
        let mut state = OptimizerState::new([&p]);
        adamw_step(&mut [&mut p], &[Tensor::full(&[2], 1.0)], &mut state, 0.1, &cfg).unwrap();
        assert!(p.data().iter().all(|&v| (v + 0.1).abs() < 1e-12));
    }

    #[test]
    fn adamw_is_deterministic_and_validates() {
        let cfg = OptimizerConfig::default();
        let run = || {
            let mut p = Tensor::vector(&[0.5, -0.2]);
            let mut s = OptimizerState::new([&p]);
            adamw_step(&mut [&mut p], &[Tensor::vector(&[0.3, 0.1])], &mut s, 0.01, &cfg).unwrap();
            (p, s)
        };
        assert_eq!(run(), run());
        let mut p = Tensor::zeros(&[2]);
        let mut s = OptimizerState::new([&p]);
        let before = s.clone();
        let bad = Tensor::vector(&[f64::NAN, 0.0]);
        assert!(matches!(adamw_step(&mut [&mut p], &[bad], &mut s, 0.1, &cfg), Err(Error::Numerics(_))));
        assert_eq!(s, before);
        assert!(adamw_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut s, 0.1, &cfg).is_err());
    }

    #[test]
    fn optimizer_config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        let bad = |f: fn(&mut OptimizerConfig)| {
            let mut c = OptimizerConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.beta1 = 1.0));
        assert!(bad(|c| c.beta2 = 0.0));
        assert!(bad(|c| c.base_lr = 0.0));
        assert!(bad(|c| c.warmup_frac = 1.0));
        assert!(bad(|c| c.batch_size = 0));
    }

    fn tiny_setup(total: usize) -> (TimeSeriesBatch, PretrainConfig) {
        let data = gen_synthetic(&SyntheticSpec {
            n_per_class: 6,
            t: 32,
            d: 2,
            n_classes: 2,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let cfg = PretrainConfig {
            encoder: EncoderConfig {
                channels: vec![4, 4],
                kernel_sizes: vec![3, 3],
                embed_dim: 4,
                ..EncoderConfig::default()
            },
            partition: PartitionParams::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig {
                total_iters: total,
                batch_size: 4,
                seed: 3,
                ..OptimizerConfig::default()
            },
        };
        (data, cfg)
    }

    #[test]
    fn zero_iterations_returns_initial_params() {
        let (data, cfg) = tiny_setup(0);
        let (params, log) = pretrain(&data, &cfg).unwrap();
        let init = init_params(
            &EncoderConfig {
                input_channels: 2,
                ..cfg.encoder.clone()
            },
            cfg.optimizer.seed,
        )
        .unwrap();
        assert_eq!(params, init);
        assert!(log.records.is_empty());
    }

    #[test]
    fn runs_are_reproducible() {
        let (data, mut cfg) = tiny_setup(5);
        cfg.loss.positive_mode = PositiveMode::Shuffled;
        let (a, la) = pretrain(&data, &cfg).unwrap();
        let (b, lb) = pretrain(&data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la.records, lb.records);
        assert_eq!(la.to_csv(), lb.to_csv());
        assert!(la.to_csv().starts_with("iter,k,lr,loss\n"));
        assert_eq!(la.records.len(), 5);
    }

    #[test]
    fn impossible_k_resamples_then_fails() {
        let (data, mut cfg) = tiny_setup(2);
        // T = 32 cannot host 40 blocks at zero overlap
        cfg.partition = PartitionParams {
            rho: 0.0,
            split: SplitMode::Uniform { min: 40, max: 40 },
        };
        assert!(matches!(pretrain(&data, &cfg), Err(Error::InvalidPartition(_))));
        cfg.partition.split = SplitMode::Uniform { min: 2, max: 40 };
        let (_, log) = pretrain(&data, &cfg).unwrap();
        assert!(log.records.iter().all(|r| r.k >= 2));
    }
}
