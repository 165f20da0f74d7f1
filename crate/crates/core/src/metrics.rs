//! Dice overlap, component-level false positives and negatives, detection.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grid::Mask;
use crate::postprocess::{connected_components, Connectivity};

/// `2|P ∩ G| / (|P| + |G|)`, and 1 when both masks are empty.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    pred.same_dims(gt)?;
    let (p, g) = (pred.count(), gt.count());
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * pred.and_count(gt) as f64 / (p + g) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Confusion {
    pub fp_count: f64,
    pub fp_size: f64,
    pub fn_count: f64,
    pub fn_size: f64,
}

fn unmatched(of: &Mask, against: &Mask, conn: Connectivity) -> (f64, f64) {
    let cs = connected_components(of, conn);
    let sizes: Vec<usize> = cs
        .components
        .iter()
        .filter(|c| c.voxels.iter().all(|&i| !against.data()[i]))
        .map(|c| c.count)
        .collect();
    let n = sizes.len();
    let mean = if n == 0 { 0.0 } else { sizes.iter().sum::<usize>() as f64 / n as f64 };
    (n as f64, mean)
}

/// Predicted components touching no ground truth (false positives) and
/// ground-truth components touching no prediction (false negatives).
pub fn component_confusion(pred: &Mask, gt: &Mask) -> Result<Confusion> {
    pred.same_dims(gt)?;
    let conn = Connectivity::TwentySix;
    let (fp_count, fp_size) = unmatched(pred, gt, conn);
    let (fn_count, fn_size) = unmatched(gt, pred, conn);
    Ok(Confusion { fp_count, fp_size, fn_count, fn_size })
}

/// Whether any predicted voxel hits the ground truth. `None` when `gt` is empty.
pub fn detection(pred: &Mask, gt: &Mask) -> Result<Option<bool>> {
    pred.same_dims(gt)?;
    if gt.count() == 0 {
        return Ok(None);
    }
    Ok(Some(pred.and_count(gt) >= 1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientScore {
    pub patient_id: String,
    pub dice: f64,
    pub confusion: Confusion,
    pub detected: Option<bool>,
}

pub fn score_patient(id: impl Into<String>, pred: &Mask, gt: &Mask) -> Result<PatientScore> {
    Ok(PatientScore {
        patient_id: id.into(),
        dice: dice(pred, gt)?,
        confusion: component_confusion(pred, gt)?,
        detected: detection(pred, gt)?,
    })
}

/// Arithmetic means over patients; detection over patients with a target.
#[derive(Clone, Debug, PartialEq)]
pub struct CohortSummary {
    pub dice: f64,
    pub confusion: Confusion,
    pub detection_rate: Option<f64>,
    pub patients: usize,
}

pub fn summarize(scores: &[PatientScore]) -> Result<CohortSummary> {
    if scores.is_empty() {
        return Err(Error::invalid("no patients to summarize"));
    }
    let n = scores.len() as f64;
    let mean = |f: &dyn Fn(&PatientScore) -> f64| scores.iter().map(f).sum::<f64>() / n;
    let flags: Vec<bool> = scores.iter().filter_map(|s| s.detected).collect();
    Ok(CohortSummary {
        dice: mean(&|s| s.dice),
        confusion: Confusion {
            fp_count: mean(&|s| s.confusion.fp_count),
            fp_size: mean(&|s| s.confusion.fp_size),
            fn_count: mean(&|s| s.confusion.fn_count),
            fn_size: mean(&|s| s.confusion.fn_size),
        },
        detection_rate: (!flags.is_empty())
            .then(|| flags.iter().filter(|&&d| d).count() as f64 / flags.len() as f64),
        patients: scores.len(),
    })
}

pub const CSV_HEADER: &str = "patient_id,dice,fp_count,fp_size,fn_count,fn_size,detected";

/// One row per patient plus a `mean` row. Undefined detection is `NA`.
pub fn report_csv(scores: &[PatientScore]) -> Result<String> {
    let summary = summarize(scores)?;
    let mut out = String::new();
    writeln!(out, "{CSV_HEADER}").unwrap();
    let det = |d: Option<bool>| d.map_or("NA".to_string(), |b| u8::from(b).to_string());
    for s in scores {
        let c = s.confusion;
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            s.patient_id, s.dice, c.fp_count, c.fp_size, c.fn_count, c.fn_size, det(s.detected)
        )
        .unwrap();
    }
    let c = summary.confusion;
    writeln!(
        out,
        "mean,{:.6},{:.6},{:.6},{:.6},{:.6},{}",
        summary.dice,
        c.fp_count,
        c.fp_size,
        c.fn_count,
        c.fn_size,
        summary.detection_rate.map_or("NA".to_string(), |r| format!("{r:.6}"))
    )
    .unwrap();
    Ok(out)
}
