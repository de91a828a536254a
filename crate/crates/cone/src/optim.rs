//! Adam optimization with two parameter groups (network weights and camera
//! response parameters, each with its own learning-rate schedule) and the
//! single-image training loop.

use crate::autodiff::Graph;
use crate::cem::{self, CrfParams, CrfVariant};
use crate::error::{Error, Result};
use crate::iem::{self, EnhNetWeights, SelfCalWeights};
use crate::imageio::{self, Checkpoint, Dataset};
use crate::losses::{self, LossConfig};
use crate::rng;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use std::path::Path;
use std::time::Instant;

/// Which parts of the model are trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Illumination network only; enhancement is the plain x ⊘ t baseline.
    IemOnly,
    /// Illumination network with a frozen camera response.
    FixedTheta,
    /// Illumination network and camera response parameters jointly.
    LearnedTheta,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<TrainMode> {
        match s {
            "iem_only" => Ok(TrainMode::IemOnly),
            "fixed_theta" => Ok(TrainMode::FixedTheta),
            "learned_theta" => Ok(TrainMode::LearnedTheta),
            other => Err(Error::Config(format!(
                "unknown mode '{other}', expected iem_only, fixed_theta or learned_theta"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::IemOnly => "iem_only",
            TrainMode::FixedTheta => "fixed_theta",
            TrainMode::LearnedTheta => "learned_theta",
        }
    }

    /// Stable one-byte tag for checkpoint serialization.
    pub fn tag(&self) -> u8 {
        match self {
            TrainMode::IemOnly => 0,
            TrainMode::FixedTheta => 1,
            TrainMode::LearnedTheta => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<TrainMode> {
        match tag {
            0 => Ok(TrainMode::IemOnly),
            1 => Ok(TrainMode::FixedTheta),
            2 => Ok(TrainMode::LearnedTheta),
            other => Err(Error::Data(format!("unknown mode tag {other}"))),
        }
    }
}

/// Full training configuration; serialized into checkpoints.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_iem: f32,
    pub lr_cem: f32,
    pub cem_decay: f32,
    pub cem_decay_every: usize,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub seed: u64,
    pub stages: usize,
    pub mode: TrainMode,
    pub variant: CrfVariant,
    pub theta_a: f32,
    pub theta_b: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let theta = CrfParams::default_for(CrfVariant::Sc);
        TrainConfig {
            epochs: 200,
            lr_iem: 1e-4,
            lr_cem: 1e-5,
            cem_decay: 0.1,
            cem_decay_every: 100,
            weight_decay: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            stages: 3,
            mode: TrainMode::LearnedTheta,
            variant: CrfVariant::Sc,
            theta_a: theta.a,
            theta_b: theta.b,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config(format!("epochs must be at least 1, got {}", self.epochs)));
        }
        if self.lr_iem <= 0.0 || self.lr_cem <= 0.0 {
            return Err(Error::Config(format!(
                "learning rates must be positive, got lr_iem={} lr_cem={}",
                self.lr_iem, self.lr_cem
            )));
        }
        if self.cem_decay_every < 1 {
            return Err(Error::Config("cem_decay_every must be at least 1".into()));
        }
        if self.stages < 1 {
            return Err(Error::Config(format!("stages must be at least 1, got {}", self.stages)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "Adam betas must lie in [0, 1), got beta1={} beta2={}",
                self.beta1, self.beta2
            )));
        }
        if self.adam_eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "adam_eps must be positive and weight_decay non-negative, got eps={} wd={}",
                self.adam_eps, self.weight_decay
            )));
        }
        if self.mode != TrainMode::IemOnly && self.variant == CrfVariant::None {
            return Err(Error::Config(format!(
                "mode {} requires a camera response variant other than none",
                self.mode.name()
            )));
        }
        if self.mode == TrainMode::IemOnly && self.variant != CrfVariant::None {
            return Err(Error::Config(format!(
                "mode iem_only never applies a camera response, so variant {} is contradictory",
                self.variant.name()
            )));
        }
        self.theta().validate()
    }

    /// Camera response parameters as configured.
    pub fn theta(&self) -> CrfParams {
        CrfParams {
            a: self.theta_a,
            b: self.theta_b,
            variant: self.variant,
            trainable: self.mode == TrainMode::LearnedTheta,
        }
    }
}

/// Adam moment accumulators for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> AdamState {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over a parameter group. Weight decay is the
/// coupled L2 form, added to the gradient before the moment updates.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f32,
    weight_decay: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "parameter group size mismatch: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let c1 = 1.0 - (beta1 as f64).powi(state.step as i32);
    let c2 = 1.0 - (beta2 as f64).powi(state.step as i32);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(&mut state.v)) {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient shape {:?} does not match parameter shape {:?}",
                g.shape(),
                p.shape()
            )));
        }
        for i in 0..p.numel() {
            let grad = g.data()[i] + weight_decay * p.data()[i];
            let mi = beta1 * m.data()[i] + (1.0 - beta1) * grad;
            let vi = beta2 * v.data()[i] + (1.0 - beta2) * grad * grad;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let mhat = mi as f64 / c1;
            let vhat = vi as f64 / c2;
            p.data_mut()[i] -= (lr as f64 * mhat / (vhat.sqrt() + eps as f64)) as f32;
        }
    }
    Ok(())
}

/// Learning rates for a 0-based epoch index: the network rate is constant,
/// the camera-response rate decays stepwise.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> (f32, f32) {
    let k = (epoch / cfg.cem_decay_every) as i32;
    let lr_cem = (cfg.lr_cem as f64 * (cfg.cem_decay as f64).powi(k)) as f32;
    (cfg.lr_iem, lr_cem)
}

/// Train from a scanned dataset (low-light images only).
pub fn train(
    ds: &Dataset,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    out_dir: Option<&Path>,
) -> Result<(Checkpoint, String)> {
    let mut images = Vec::with_capacity(ds.entries.len());
    let mut labels = Vec::with_capacity(ds.entries.len());
    for entry in &ds.entries {
        images.push(imageio::to_tensor(&imageio::load_image(&entry.low)?));
        labels.push(entry.stem.clone());
    }
    train_images(&images, &labels, cfg, loss_cfg, out_dir)
}

/// Train from in-memory images, initializing weights from the config seed.
pub fn train_images(
    images: &[Tensor],
    labels: &[String],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    out_dir: Option<&Path>,
) -> Result<(Checkpoint, String)> {
    let (enh, selfcal) = iem::init_weights(cfg.seed);
    train_from(enh, selfcal, images, labels, cfg, loss_cfg, out_dir)
}

pub(crate) fn train_from(
    mut enh: EnhNetWeights,
    mut selfcal: SelfCalWeights,
    images: &[Tensor],
    labels: &[String],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    out_dir: Option<&Path>,
) -> Result<(Checkpoint, String)> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.to_path_buf(), e))?;
    }

    let mut theta = cfg.theta();
    let mut adam_iem = {
        let mut refs = enh.tensors();
        refs.extend(selfcal.tensors());
        AdamState::new(&refs)
    };
    let theta_tensors = [Tensor::scalar(theta.a), Tensor::scalar(theta.b)];
    let mut adam_theta = AdamState::new(&[&theta_tensors[0], &theta_tensors[1]]);
    let mut theta_params = theta_tensors;

    let start = Instant::now();
    let mut log = String::from("epoch,lr_iem,lr_cem,L_sm,L_f,L_e,L_sp,L_c,total,wall_seconds\n");

    for epoch in 1..=cfg.epochs {
        let (lr_iem, lr_cem) = lr_at(epoch - 1, cfg);
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &format!("epoch/{epoch}")));

        let mut sums = [0.0f64; 6];
        for &idx in &order {
            let comps = step(
                &images[idx],
                &mut enh,
                &mut selfcal,
                &mut theta,
                &mut theta_params,
                &mut adam_iem,
                &mut adam_theta,
                cfg,
                loss_cfg,
                lr_iem,
                lr_cem,
            )
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!(
                    "epoch {epoch}, image {}: {msg}",
                    labels[idx]
                )),
                other => other,
            })?;
            for (s, c) in sums.iter_mut().zip(comps) {
                *s += c as f64;
            }
        }
        let n = images.len() as f64;
        let wall = start.elapsed().as_secs_f64();
        log.push_str(&format!(
            "{epoch},{lr_iem:e},{lr_cem:e},{:e},{:e},{:e},{:e},{:e},{:e},{wall:.3}\n",
            sums[0] / n,
            sums[1] / n,
            sums[2] / n,
            sums[3] / n,
            sums[4] / n,
            sums[5] / n,
        ));

        if let Some(dir) = out_dir {
            if epoch % 50 == 0 && epoch != cfg.epochs {
                let snap = snapshot(cfg, loss_cfg, &theta, &enh, &selfcal);
                imageio::save_checkpoint(&dir.join(format!("checkpoint_epoch{epoch:04}.bin")), &snap)?;
            }
        }
    }

    let ckpt = snapshot(cfg, loss_cfg, &theta, &enh, &selfcal);
    if let Some(dir) = out_dir {
        imageio::save_checkpoint(&dir.join("model.bin"), &ckpt)?;
        std::fs::write(dir.join("train_log.csv"), &log)
            .map_err(|e| Error::io(dir.join("train_log.csv"), e))?;
    }
    Ok((ckpt, log))
}

fn snapshot(
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    theta: &CrfParams,
    enh: &EnhNetWeights,
    selfcal: &SelfCalWeights,
) -> Checkpoint {
    Checkpoint {
        train_cfg: *cfg,
        loss_cfg: *loss_cfg,
        theta_a: theta.a,
        theta_b: theta.b,
        enh: enh.clone(),
        selfcal: selfcal.clone(),
    }
}

/// One image step: forward, backward, and both group updates. Returns the
/// loss components (L_sm, L_f, L_e, L_sp, L_c, total).
#[allow(clippy::too_many_arguments)]
fn step(
    x: &Tensor,
    enh: &mut EnhNetWeights,
    selfcal: &mut SelfCalWeights,
    theta: &mut CrfParams,
    theta_params: &mut [Tensor; 2],
    adam_iem: &mut AdamState,
    adam_theta: &mut AdamState,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    lr_iem: f32,
    lr_cem: f32,
) -> Result<[f32; 6]> {
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let en = enh.register(&mut g, true);
    let sn = selfcal.register(&mut g, true);
    let trace = iem::unroll(&mut g, xn, &en, &sn, selfcal, cfg.stages)?;
    let t_final = trace.stages.last().unwrap().t;

    let theta_nodes = (cfg.mode != TrainMode::IemOnly).then(|| cem::register_theta(&mut g, theta));
    let y = match &theta_nodes {
        None => cem::apply_baseline_node(&mut g, xn, t_final)?,
        Some(tn) => cem::apply_node(&mut g, xn, t_final, tn, cfg.variant)?,
    };

    let b = losses::breakdown(&mut g, &trace, xn, y, loss_cfg)?;
    let comps = [
        g.value(b.sm).item(),
        g.value(b.f).item(),
        g.value(b.e).item(),
        g.value(b.sp).item(),
        g.value(b.c).item(),
        g.value(b.total).item(),
    ];
    if comps.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numeric(format!("non-finite loss {:?}", comps)));
    }

    let grads = g.backward(b.total)?;

    let mut nodes = en.node_list();
    nodes.extend(sn.node_list());
    let gvec: Vec<Tensor> = nodes.iter().map(|&n| grads.dense(&g, n)).collect();
    {
        let mut params = enh.tensors_mut();
        params.extend(selfcal.tensors_mut());
        adam_step(
            &mut params,
            &gvec,
            adam_iem,
            lr_iem,
            cfg.weight_decay,
            cfg.beta1,
            cfg.beta2,
            cfg.adam_eps,
        )?;
    }

    if cfg.mode == TrainMode::LearnedTheta {
        let tn = theta_nodes.as_ref().unwrap();
        let tg = vec![grads.dense(&g, tn.a), grads.dense(&g, tn.b)];
        let mut refs: Vec<&mut Tensor> = theta_params.iter_mut().collect();
        adam_step(&mut refs, &tg, adam_theta, lr_cem, 0.0, cfg.beta1, cfg.beta2, cfg.adam_eps)?;
        theta.a = theta_params[0].item();
        theta.b = theta_params[1].item();
        theta.project();
        theta_params[1] = Tensor::scalar(theta.b);
    }

    Ok(comps)
}
