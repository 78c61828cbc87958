use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const SOFT_IOU_EPS: f64 = 1e-6;
const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossKind {
    #[default]
    SoftIou,
    Bce,
}

impl LossKind {
    pub fn apply<'t, T: Scalar>(self, heatmap: Var<'t, T>, mask: Var<'t, T>) -> Result<Var<'t, T>> {
        match self {
            LossKind::SoftIou => soft_iou_loss(heatmap, mask),
            LossKind::Bce => bce_loss(heatmap, mask),
        }
    }
}

fn check(op: &'static str, a: &Var<'_, impl Scalar>, b: &Var<'_, impl Scalar>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::dim(
            op,
            format!("heatmap {:?} vs mask {:?}", a.shape(), b.shape()),
        ))
    }
}

/// `1 − (Σ h·m + ε) / (Σ h + Σ m − Σ h·m + ε)` over the whole batch.
pub fn soft_iou_loss<'t, T: Scalar>(heatmap: Var<'t, T>, mask: Var<'t, T>) -> Result<Var<'t, T>> {
    check("soft_iou_loss", &heatmap, &mask)?;
    let inter = heatmap.mul(mask)?.sum();
    let union = heatmap.sum().add(mask.sum())?.sub(inter)?;
    let ratio = inter
        .add_scalar(SOFT_IOU_EPS)
        .div(union.add_scalar(SOFT_IOU_EPS))?;
    Ok(ratio.neg().add_scalar(1.0))
}

/// Mean binary cross-entropy with the heatmap clamped away from 0 and 1.
pub fn bce_loss<'t, T: Scalar>(heatmap: Var<'t, T>, mask: Var<'t, T>) -> Result<Var<'t, T>> {
    check("bce_loss", &heatmap, &mask)?;
    let h = heatmap.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    let pos = mask.mul(h.ln())?;
    let neg = mask
        .neg()
        .add_scalar(1.0)
        .mul(h.neg().add_scalar(1.0).ln())?;
    Ok(pos.add(neg)?.mean().neg())
}
