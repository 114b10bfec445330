//! Gated fusion of the image and trajectory pyramids.
//!
//! At each level both feature maps are mapped into a shared space by 1x1
//! adapters. A selector (two 3x3 conv-BN-ReLU blocks over the concatenated
//! adapted features, then a 1x1 convolution to two channels) produces a
//! residual on the gate logits. The logits of level `i` are the
//! nearest-neighbour up-sampled logits of level `i - 1` plus that residual,
//! starting from a zero prior. A per-pixel two-way softmax turns the logits
//! into complementary gates, which linearly combine the adapted features.

use rand::Rng;

use crate::backbone::{Level, Widths};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv1x1, ConvBnRelu, Pass};
use crate::params::ParamStore;
use crate::tensor::Scalar;

/// `fuse` refuses gates whose per-pixel sum strays further than this from 1.
pub const GATE_SUM_TOLERANCE: f64 = 1e-4;

/// Adapted features `A_I`, `A_T` of one level.
#[derive(Debug, Clone, Copy)]
pub struct AdaptedPair {
    pub image: Var,
    pub traj: Var,
}

/// Gate logits (`[n, 2, h, w]`) and the normalized gates (`[n, 1, h, w]` each).
#[derive(Debug, Clone, Copy)]
pub struct GateState {
    pub logits: Var,
    pub image: Var,
    pub traj: Var,
}

/// Parameters of the fusion module at one level.
#[derive(Debug, Clone)]
pub struct GfmLevel {
    pub level: Level,
    pub channels: usize,
    pub adapter_image: Conv1x1,
    pub adapter_traj: Conv1x1,
    pub selector: [ConvBnRelu; 2],
    pub psi: Conv1x1,
}

impl GfmLevel {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, level: Level, widths: Widths) -> Self {
        let c = widths.channels(level);
        let name = format!("gfm.l{level}");
        GfmLevel {
            level,
            channels: c,
            adapter_image: Conv1x1::new(store, rng, &format!("{name}.adapter_image"), c, c),
            adapter_traj: Conv1x1::new(store, rng, &format!("{name}.adapter_traj"), c, c),
            selector: [
                ConvBnRelu::new(store, rng, &format!("{name}.selector1"), 2 * c, 2 * c),
                ConvBnRelu::new(store, rng, &format!("{name}.selector2"), 2 * c, 2 * c),
            ],
            psi: Conv1x1::new(store, rng, &format!("{name}.psi"), 2 * c, 2),
        }
    }

    /// Channel-preserving 1x1 adapters, one per modality.
    pub fn adapt<T: Scalar>(&self, p: &mut Pass<'_, T>, f_image: Var, f_traj: Var) -> Result<AdaptedPair> {
        let (si, st) = (p.g.shape(f_image), p.g.shape(f_traj));
        if si != st || si.c != self.channels {
            return Err(Error::shape("adapt", format!("two equal maps with {} channels", self.channels), format!("{si} / {st}")));
        }
        Ok(AdaptedPair {
            image: self.adapter_image.forward(p, f_image)?,
            traj: self.adapter_traj.forward(p, f_traj)?,
        })
    }

    /// Selector residual `psi(phi(phi(A_I ++ A_T)))`, two channels.
    pub fn gate_delta<T: Scalar>(&self, p: &mut Pass<'_, T>, pair: &AdaptedPair) -> Result<Var> {
        let cat = p.g.concat(pair.image, pair.traj)?;
        let h = self.selector[0].forward(p, cat)?;
        let h = self.selector[1].forward(p, h)?;
        self.psi.forward(p, h)
    }

    /// Full level: adapters, gate recursion, normalization and fusion.
    pub fn forward<T: Scalar>(&self, p: &mut Pass<'_, T>, f_image: Var, f_traj: Var, prev_logits: Option<Var>) -> Result<(AdaptedPair, GateState, Var)> {
        let pair = self.adapt(p, f_image, f_traj)?;
        let delta = self.gate_delta(p, &pair)?;
        let logits = update_gates(p.g, prev_logits, delta)?;
        let (gi, gt) = normalize_gates(p.g, logits)?;
        let fused = fuse(p.g, &pair, gi, gt)?;
        Ok((
            pair,
            GateState {
                logits,
                image: gi,
                traj: gt,
            },
            fused,
        ))
    }
}

/// `U2(prev) + delta`, or just `delta` at the first level (zero prior).
pub fn update_gates<T: Scalar>(g: &mut Graph<T>, prev: Option<Var>, delta: Var) -> Result<Var> {
    let ds = g.shape(delta);
    if ds.c != 2 {
        return Err(Error::shape("update_gates", "2 logit channels", ds));
    }
    match prev {
        None => Ok(delta),
        Some(prev) => {
            let ps = g.shape(prev);
            if ps.c != 2 || ps.h * 2 != ds.h || ps.w * 2 != ds.w || ps.n != ds.n {
                return Err(Error::shape("update_gates", format!("previous logits at half of {ds}"), ps));
            }
            let up = g.upsample2(prev);
            g.add(up, delta)
        }
    }
}

/// Two-way softmax over the logit channels: `(G_I, G_T)`.
pub fn normalize_gates<T: Scalar>(g: &mut Graph<T>, logits: Var) -> Result<(Var, Var)> {
    let ls = g.shape(logits);
    if ls.c != 2 {
        return Err(Error::shape("normalize_gates", "2 logit channels", ls));
    }
    let soft = g.softmax_channels(logits);
    Ok((g.channel(soft, 0)?, g.channel(soft, 1)?))
}

/// `A_f = G_I * A_I + G_T * A_T` with gates broadcast over channels.
pub fn fuse<T: Scalar>(g: &mut Graph<T>, pair: &AdaptedPair, gate_image: Var, gate_traj: Var) -> Result<Var> {
    let (a, b) = (g.value(gate_image), g.value(gate_traj));
    if a.shape() != b.shape() {
        return Err(Error::shape("fuse", a.shape(), b.shape()));
    }
    let deviation = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x + y - T::one()).abs().to_f64().unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max);
    if deviation > GATE_SUM_TOLERANCE {
        return Err(Error::UnnormalizedGates { deviation });
    }
    let wi = g.mul_gate(pair.image, gate_image)?;
    let wt = g.mul_gate(pair.traj, gate_traj)?;
    g.add(wi, wt)
}
