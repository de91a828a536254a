//! Unsupervised training losses: an illumination loss (edge-weighted
//! smoothness + fidelity, averaged over stages) and an enhancement loss
//! (exposure + spatial consistency + color constancy).

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::iem::StageTrace;
use crate::tensor::Tensor;

/// Loss weights and pooling configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub omega_f: f32,
    pub omega_c: f32,
    pub epsilon: f32,
    pub exposure_pool: usize,
    pub spatial_pool: usize,
    pub smooth_lambda: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            omega_f: 1.5,
            omega_c: 0.5,
            epsilon: 0.6,
            exposure_pool: 16,
            spatial_pool: 4,
            smooth_lambda: 10.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.omega_f < 0.0 || self.omega_c < 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got omega_f={} omega_c={}",
                self.omega_f, self.omega_c
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!(
                "exposure target must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if self.exposure_pool < 1 || self.spatial_pool < 1 {
            return Err(Error::Config(format!(
                "pool sizes must be at least 1, got exposure_pool={} spatial_pool={}",
                self.exposure_pool, self.spatial_pool
            )));
        }
        Ok(())
    }
}

/// Edge weights exp(−λ·|∇x̄|) from the channel-mean image, per direction.
/// Constants with respect to the illumination, so built outside the graph.
fn edge_weights(x: &Tensor, lambda: f32) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = x.chw()?;
    let mut mean = vec![0.0f32; h * w];
    for ch in 0..c {
        for (m, v) in mean.iter_mut().zip(x.channel(ch)) {
            *m += v / c as f32;
        }
    }
    let mut wh = vec![0.0f32; h * w];
    let mut wv = vec![0.0f32; h * w];
    for y in 0..h {
        for xx in 0..w {
            let i = y * w + xx;
            let dh = if xx + 1 < w { mean[i + 1] - mean[i] } else { 0.0 };
            let dv = if y + 1 < h { mean[i + w] - mean[i] } else { 0.0 };
            wh[i] = (-lambda * dh.abs()).exp();
            wv[i] = (-lambda * dv.abs()).exp();
        }
    }
    Ok((Tensor::new(vec![1, h, w], wh)?, Tensor::new(vec![1, h, w], wv)?))
}

/// Edge-preserving smoothness: mean over pixels and both directions of
/// exp(−λ·|∇x̄|)·|∇t|.
pub fn smoothness_loss(g: &mut Graph, t: NodeId, x: NodeId, cfg: &LossConfig) -> Result<NodeId> {
    let (wh, wv) = edge_weights(g.value(x), cfg.smooth_lambda)?;
    let wh = g.constant(wh);
    let wv = g.constant(wv);
    let (dh, dv) = g.spatial_gradient(t)?;
    let ah = g.abs(dh);
    let av = g.abs(dv);
    let ph = g.mul(wh, ah)?;
    let pv = g.mul(wv, av)?;
    let mh = g.mean(ph);
    let mv = g.mean(pv);
    let s = g.add(mh, mv)?;
    Ok(g.scale(s, 0.5))
}

/// Mean squared error between the illumination and the channel mean of the
/// stage input.
pub fn fidelity_loss(g: &mut Graph, t: NodeId, v: NodeId) -> Result<NodeId> {
    let m = g.channel_mean(v)?;
    let d = g.sub(t, m)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// Per-stage smoothness + ω_f·fidelity, averaged over stages.
pub fn loss_t(g: &mut Graph, trace: &StageTrace, x: NodeId, cfg: &LossConfig) -> Result<NodeId> {
    let (sm, f) = loss_t_parts(g, trace, x, cfg)?;
    let wf = g.scale(f, cfg.omega_f);
    g.add(sm, wf)
}

/// Stage-averaged smoothness and fidelity terms, reported separately.
fn loss_t_parts(g: &mut Graph, trace: &StageTrace, x: NodeId, cfg: &LossConfig) -> Result<(NodeId, NodeId)> {
    if trace.stages.is_empty() {
        return Err(Error::Config("loss over an empty stage trace".into()));
    }
    let mut sm_acc = None;
    let mut f_acc = None;
    for stage in &trace.stages {
        let sm = smoothness_loss(g, stage.t, x, cfg)?;
        let f = fidelity_loss(g, stage.t, stage.v)?;
        sm_acc = Some(match sm_acc {
            None => sm,
            Some(a) => g.add(a, sm)?,
        });
        f_acc = Some(match f_acc {
            None => f,
            Some(a) => g.add(a, f)?,
        });
    }
    let inv = 1.0 / trace.stages.len() as f32;
    Ok((g.scale(sm_acc.unwrap(), inv), g.scale(f_acc.unwrap(), inv)))
}

/// Squared distance of the pooled enhanced image from the exposure target.
pub fn exposure_loss(g: &mut Graph, y: NodeId, cfg: &LossConfig) -> Result<NodeId> {
    let p = g.avg_pool(y, cfg.exposure_pool)?;
    let d = g.add_const(p, -cfg.epsilon);
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// Squared difference of pooled spatial gradients between input and output.
pub fn spatial_loss(g: &mut Graph, x: NodeId, y: NodeId, cfg: &LossConfig) -> Result<NodeId> {
    if g.value(x).shape() != g.value(y).shape() {
        return Err(Error::Shape(format!(
            "spatial loss needs matching shapes, got {:?} and {:?}",
            g.value(x).shape(),
            g.value(y).shape()
        )));
    }
    let px = g.avg_pool(x, cfg.spatial_pool)?;
    let py = g.avg_pool(y, cfg.spatial_pool)?;
    let (xh, xv) = g.spatial_gradient(px)?;
    let (yh, yv) = g.spatial_gradient(py)?;
    let dh = g.sub(yh, xh)?;
    let dv = g.sub(yv, xv)?;
    let sh = g.mul(dh, dh)?;
    let sv = g.mul(dv, dv)?;
    let mh = g.mean(sh);
    let mv = g.mean(sv);
    let s = g.add(mh, mv)?;
    Ok(g.scale(s, 0.5))
}

/// Sum of squared pairwise differences between channel means.
pub fn color_loss(g: &mut Graph, y: NodeId) -> Result<NodeId> {
    let m = g.channel_means(y)?;
    if g.value(m).numel() != 3 {
        return Err(Error::Shape(format!(
            "color loss expects 3 channels, got {}",
            g.value(m).numel()
        )));
    }
    let mut acc = None;
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let a = g.index(m, i)?;
        let b = g.index(m, j)?;
        let d = g.sub(a, b)?;
        let sq = g.mul(d, d)?;
        acc = Some(match acc {
            None => sq,
            Some(a) => g.add(a, sq)?,
        });
    }
    Ok(acc.unwrap())
}

/// Enhancement loss: exposure + spatial + ω_c·color.
pub fn loss_y(g: &mut Graph, x: NodeId, y: NodeId, cfg: &LossConfig) -> Result<NodeId> {
    let e = exposure_loss(g, y, cfg)?;
    let sp = spatial_loss(g, x, y, cfg)?;
    let c = color_loss(g, y)?;
    let wc = g.scale(c, cfg.omega_c);
    let s = g.add(e, sp)?;
    g.add(s, wc)
}

/// Every loss component as a graph node, for logging and optimization.
pub struct LossBreakdown {
    pub sm: NodeId,
    pub f: NodeId,
    pub e: NodeId,
    pub sp: NodeId,
    pub c: NodeId,
    pub total: NodeId,
}

/// Build all components over a stage trace and the final enhanced image.
pub fn breakdown(
    g: &mut Graph,
    trace: &StageTrace,
    x: NodeId,
    y: NodeId,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let (sm, f) = loss_t_parts(g, trace, x, cfg)?;
    let e = exposure_loss(g, y, cfg)?;
    let sp = spatial_loss(g, x, y, cfg)?;
    let c = color_loss(g, y)?;
    let wf = g.scale(f, cfg.omega_f);
    let lt = g.add(sm, wf)?;
    let wc = g.scale(c, cfg.omega_c);
    let s = g.add(e, sp)?;
    let ly = g.add(s, wc)?;
    let total = g.add(lt, ly)?;
    Ok(LossBreakdown { sm, f, e, sp, c, total })
}

/// Illumination loss plus enhancement loss, unweighted.
pub fn total_loss(
    g: &mut Graph,
    trace: &StageTrace,
    x: NodeId,
    y: NodeId,
    cfg: &LossConfig,
) -> Result<NodeId> {
    Ok(breakdown(g, trace, x, y, cfg)?.total)
}
