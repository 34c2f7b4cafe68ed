//! Mu-law PSNR evaluation with per-exposure-role aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{ExposureRole, RadianceFrame, MU};
use crate::radiometry::mu_tonemap_value;

/// PSNR reported for identical images (and the upper cap in general); the
/// metric is 10*log10(1/MSE) between mu-law images with peak 1.
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameScore {
    pub index: usize,
    pub role: ExposureRole,
    pub psnr_mu: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregates {
    pub low: Option<f64>,
    pub middle: Option<f64>,
    pub high: Option<f64>,
    pub all: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: Vec<FrameScore>,
    pub aggregates: Aggregates,
    pub runtime_ms_per_frame: f64,
}

/// PSNR in the mu-law tonemapped domain, capped at [`PSNR_CAP_DB`].
pub fn psnr_mu(pred: &RadianceFrame, gt: &RadianceFrame) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(format!(
            "psnr operands {:?} vs {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let n = pred.pixels().data().len() as f64;
    let mse: f64 = pred
        .pixels()
        .data()
        .iter()
        .zip(gt.pixels().data().iter())
        .map(|(&p, &g)| {
            let d = mu_tonemap_value(p, MU) - mu_tonemap_value(g, MU);
            d * d
        })
        .sum::<f64>()
        / n;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Score every frame and aggregate by reference-exposure role.
pub fn evaluate(
    preds: &[RadianceFrame],
    gts: &[RadianceFrame],
    roles: &[ExposureRole],
    runtime_ms_per_frame: f64,
) -> Result<EvalReport> {
    if preds.len() != gts.len() || preds.len() != roles.len() {
        return Err(Error::invalid(format!(
            "evaluate needs equal counts, got {} predictions, {} references, {} roles",
            preds.len(),
            gts.len(),
            roles.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::invalid("nothing to evaluate".to_string()));
    }

    let mut frames = Vec::with_capacity(preds.len());
    for (index, ((pred, gt), &role)) in preds.iter().zip(gts).zip(roles).enumerate() {
        frames.push(FrameScore {
            index,
            role,
            psnr_mu: psnr_mu(pred, gt)?,
        });
    }

    let mean_of = |role: Option<ExposureRole>| -> Option<f64> {
        let values: Vec<f64> = frames
            .iter()
            .filter(|f| role.is_none() || Some(f.role) == role)
            .map(|f| f.psnr_mu)
            .collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    };

    let aggregates = Aggregates {
        low: mean_of(Some(ExposureRole::Low)),
        middle: mean_of(Some(ExposureRole::Middle)),
        high: mean_of(Some(ExposureRole::High)),
        all: mean_of(None).expect("nonempty"),
    };

    Ok(EvalReport {
        frames,
        aggregates,
        runtime_ms_per_frame,
    })
}
