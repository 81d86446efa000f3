//! Change-map head and the patch-level supervision losses.
//!
//! The graph functions drive training; the standalone functions on grids use
//! the same numeric kernels and serve evaluation and tests.

use rand::Rng;

use crate::autodiff::{bce_value, masked_l1_value, Graph, Reduction, Var};
use crate::config::{AblationFlags, LossConfig};
use crate::data::{generate_patch_labels, BinaryMask, Grid, LocalScaleMap};
use crate::encoder::{TokenMap, TOKEN_STRIDE};
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Full-resolution change probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ChangeMap(pub Grid<f64>);

impl ChangeMap {
    pub fn new(probabilities: Grid<f64>) -> Result<Self> {
        if let Some(v) = probabilities.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidValue(format!("change probability {v} outside [0, 1]")));
        }
        Ok(Self(probabilities))
    }

    pub fn values(&self) -> &Grid<f64> {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBundle {
    pub l_pcl: f64,
    pub l_upcl: f64,
    pub l_sp: Vec<f64>,
    /// BCE against the expanded patch labels; non-zero only with `direct_sup`.
    pub l_direct: f64,
    pub total: f64,
}

/// 1×1 convolution to one channel, sigmoid, bilinear ×4 upsampling.
#[derive(Clone, Debug)]
pub struct ChangeHead {
    pub conv: Conv2d,
}

impl ChangeHead {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, channels: usize) -> Self {
        Self { conv: Conv2d::new(b, channels, 1, 1, 1, 0, true) }
    }

    /// Returns `[B, 1, out_h, out_w]` probabilities.
    pub fn predict_change_map<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        p: &TokenMap,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        if p.grid_h * TOKEN_STRIDE != out_h || p.grid_w * TOKEN_STRIDE != out_w {
            return Err(Error::Shape(format!(
                "token grid {}x{} cannot produce a {out_h}x{out_w} map at stride {TOKEN_STRIDE}",
                p.grid_h, p.grid_w
            )));
        }
        let x = p.to_spatial(g)?;
        let logits = self.conv.forward(g, s, x)?;
        let probs = g.sigmoid(logits);
        g.upsample_bilinear(probs, out_h, out_w)
    }
}

fn same_dims<A: Copy, B: Copy>(a: &Grid<A>, b: &Grid<B>, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean clamped BCE of the local-scale prediction against the local-scale labels.
pub fn loss_pcl(g_local: &LocalScaleMap, y_local: &LocalScaleMap, eps: f64) -> Result<f64> {
    same_dims(&g_local.0, &y_local.0, "loss_pcl")?;
    Ok(bce_value(g_local.0.data(), y_local.0.data(), eps))
}

/// Per-block semantic loss; the same functional as [`loss_pcl`].
pub fn loss_sp(q_s: &LocalScaleMap, y_local: &LocalScaleMap, eps: f64) -> Result<f64> {
    loss_pcl(q_s, y_local, eps)
}

/// `|(1 − Y)(G − Y)|` reduced over all pixels. `y_expanded` must be constant on
/// every `patch_h × patch_w` cell.
pub fn loss_upcl(
    g: &ChangeMap,
    y_expanded: &BinaryMask,
    patch_h: usize,
    patch_w: usize,
    reduction: Reduction,
) -> Result<f64> {
    same_dims(&g.0, y_expanded, "loss_upcl")?;
    let labels = generate_patch_labels(y_expanded, patch_h, patch_w)?;
    if &labels.expanded != y_expanded {
        return Err(Error::InvalidValue(format!(
            "expanded labels are not constant on {patch_h}x{patch_w} patches"
        )));
    }
    let y: Vec<f64> = y_expanded.data().iter().map(|&v| f64::from(v)).collect();
    Ok(masked_l1_value(g.0.data(), &y, reduction))
}

/// Combines the components: `total = w_sp·Σ l_sp + w_pcl·l_pcl + w_upcl·l_upcl + l_direct`.
pub fn total_loss(l_sp: &[f64], l_pcl: f64, l_upcl: f64, l_direct: f64, cfg: &LossConfig) -> LossBundle {
    let sp: f64 = l_sp.iter().sum();
    LossBundle {
        l_pcl,
        l_upcl,
        l_sp: l_sp.to_vec(),
        l_direct,
        total: cfg.w_sp * sp + cfg.w_pcl * l_pcl + cfg.w_upcl * l_upcl + l_direct,
    }
}

/// Batched targets: `y_local` is `[B, 1, gh, gw]`, `y_expanded` is `[B, 1, H, W]`.
#[derive(Clone, Debug)]
pub struct Targets<T> {
    pub y_local: Tensor<T>,
    pub y_expanded: Tensor<T>,
}

impl<T: Scalar> Targets<T> {
    pub fn from_grids(grids: &[&BinaryMask], patch_h: usize, patch_w: usize) -> Result<Self> {
        let first = grids.first().ok_or_else(|| Error::Shape("empty target batch".into()))?;
        let (gh, gw) = first.dims();
        let (h, w) = (gh * patch_h, gw * patch_w);
        let mut local = Vec::with_capacity(grids.len() * gh * gw);
        let mut expanded = Vec::with_capacity(grids.len() * h * w);
        for grid in grids {
            if grid.dims() != (gh, gw) {
                return Err(Error::Shape(format!("patch grid {:?} vs {:?}", grid.dims(), (gh, gw))));
            }
            local.extend(grid.data().iter().map(|&v| T::from_f64(f64::from(v))));
            for r in 0..h {
                for c in 0..w {
                    expanded.push(T::from_f64(f64::from(grid.get(r / patch_h, c / patch_w))));
                }
            }
        }
        let b = grids.len();
        Ok(Self {
            y_local: Tensor::new(&[b, 1, gh, gw], local)?,
            y_expanded: Tensor::new(&[b, 1, h, w], expanded)?,
        })
    }
}

/// Loss nodes of one training step. Components disabled by the ablation flags are `None`.
pub struct LossVars {
    pub total: Var,
    pub pcl: Option<Var>,
    pub upcl: Option<Var>,
    pub direct: Option<Var>,
    pub sp: Vec<Var>,
}

impl LossVars {
    pub fn bundle<T: Scalar>(&self, g: &Graph<T>, cfg: &LossConfig) -> LossBundle {
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item().as_f64());
        let sp: Vec<f64> = self.sp.iter().map(|&v| g.value(v).item().as_f64()).collect();
        let mut bundle = total_loss(&sp, val(self.pcl), val(self.upcl), val(self.direct), cfg);
        bundle.total = g.value(self.total).item().as_f64();
        bundle
    }
}

/// Builds every active loss term on the graph.
#[allow(clippy::too_many_arguments)]
pub fn supervision_losses<T: Scalar>(
    g: &mut Graph<T>,
    change_map: Var,
    aux: &[Var],
    targets: &Targets<T>,
    patch_h: usize,
    patch_w: usize,
    cfg: &LossConfig,
    flags: &AblationFlags,
) -> Result<LossVars> {
    let mut sp = Vec::with_capacity(aux.len());
    for &q in aux {
        sp.push(g.bce(q, &targets.y_local, cfg.eps)?);
    }
    let (mut pcl, mut upcl, mut direct) = (None, None, None);
    if flags.direct_sup {
        direct = Some(g.bce(change_map, &targets.y_expanded, cfg.eps)?);
    } else {
        if !flags.no_pcl {
            let local = g.max_pool2d_rect(change_map, (patch_h, patch_w), (patch_h, patch_w), 0)?;
            pcl = Some(g.bce(local, &targets.y_local, cfg.eps)?);
        }
        if !flags.no_upcl {
            upcl = Some(g.masked_l1(change_map, &targets.y_expanded, cfg.upcl_reduction.into())?);
        }
    }
    let mut terms = Vec::new();
    if !sp.is_empty() {
        let s = g.add_n(&sp)?;
        terms.push(g.scale(s, T::from_f64(cfg.w_sp)));
    }
    if let Some(v) = pcl {
        terms.push(g.scale(v, T::from_f64(cfg.w_pcl)));
    }
    if let Some(v) = upcl {
        terms.push(g.scale(v, T::from_f64(cfg.w_upcl)));
    }
    terms.extend(direct);
    if terms.is_empty() {
        return Err(Error::Config("every loss term is disabled".into()));
    }
    let total = g.add_n(&terms)?;
    Ok(LossVars { total, pcl, upcl, direct, sp })
}
