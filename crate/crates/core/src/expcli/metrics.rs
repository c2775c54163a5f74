use serde::{Deserialize, Serialize};

use crate::segnet::{argmax_labels, one_hot, Network, SegError};
use crate::synthdata::VolumeSample;

/// `2|P∩G| / (|P| + |G|)` for one class; 1.0 when both sets are empty.
pub fn dice_score(pred: &[u8], gt: &[u8], class_id: u8) -> Result<f64, SegError> {
    if pred.len() != gt.len() {
        return Err(SegError::Shape(format!(
            "prediction has {} voxels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        let (ia, ib) = (a == class_id, b == class_id);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// Eval-mode losses and foreground Dice of a model on a sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub loss_ce: f64,
    pub loss_dice: f64,
    /// Dice of classes `1..K`, pooled over all voxels of all samples.
    pub dice: Vec<f64>,
    pub dice_mean: f64,
}

/// Runs the model without augmentation on every sample.
pub fn evaluate(net: &Network, samples: &[VolumeSample]) -> Result<EvalReport, SegError> {
    let k = net.config().num_classes;
    if samples.is_empty() {
        return Err(SegError::Shape("evaluation set is empty".into()));
    }
    let (mut ce, mut dl) = (0.0, 0.0);
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for s in samples {
        if usize::from(s.num_classes) != k {
            return Err(SegError::Config(format!(
                "model has {k} classes but data has {}",
                s.num_classes
            )));
        }
        let logits = net.infer(&s.volume)?;
        let shape = logits.dims5("evaluate")?;
        let targets = one_hot(&s.labels, shape)?;
        let (c, d, _) = Network::loss(&logits, &targets, Default::default())?;
        ce += c;
        dl += d;
        pred.extend(argmax_labels(&logits)?);
        gt.extend_from_slice(&s.labels);
    }
    let dice = (1..k as u8).map(|c| dice_score(&pred, &gt, c)).collect::<Result<Vec<_>, _>>()?;
    let n = samples.len() as f64;
    Ok(EvalReport {
        samples: samples.len(),
        loss_ce: ce / n,
        loss_dice: dl / n,
        dice_mean: dice.iter().sum::<f64>() / dice.len() as f64,
        dice,
    })
}
