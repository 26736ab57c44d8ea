use std::fmt::Write as _;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adam::AdamState;
use super::flops::count_flops;
use super::metrics::EvalReport;
use crate::data::{extract_batch, HsiCube, SampleSplit};
use crate::error::{Error, Result};
use crate::model::{Mode, Prediction, SdmambaModel};
use crate::params::Parameterized;
use crate::tensor::{Tape, Tensor};

/// Coordinates evaluated per call to [`SdmambaModel::predict`].
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    pub val_oa: f64,
    pub val_aa: f64,
    pub val_kappa: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    /// Header, then one `epoch,loss,val_oa,val_aa,val_kappa` line per epoch.
    pub fn to_text(&self) -> String {
        let mut s = String::from("epoch,loss,val_oa,val_aa,val_kappa\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{},{},{}", e.epoch, e.loss, e.val_oa, e.val_aa, e.val_kappa);
        }
        s
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

pub struct TrainOutcome {
    /// Weights from the epoch with the best validation OA.
    pub model: SdmambaModel,
    pub history: History,
    pub best_epoch: usize,
    /// Loss of the very first batch, before any update.
    pub initial_loss: f32,
}

fn targets(cube: &HsiCube, coords: &[(usize, usize)]) -> Result<Vec<usize>> {
    coords
        .iter()
        .map(|&(r, c)| match cube.label(r, c) {
            l if l > 0 => Ok(l as usize - 1),
            _ => Err(Error::Validation(format!("pixel ({r}, {c}) is unlabeled"))),
        })
        .collect()
}

/// Cross-entropy of one batch without touching the weights.
pub fn batch_loss(model: &SdmambaModel, cube: &HsiCube, coords: &[(usize, usize)], mode: Mode) -> Result<f32> {
    let patches = extract_batch(cube, coords, model.config.patch_size)?;
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let out = model.forward(&bound, tape.constant(patches), mode)?;
    Ok(out.logits.cross_entropy(&targets(cube, coords)?)?.value().item())
}

/// Name of the first parameter or buffer holding a NaN or infinity.
fn first_non_finite(model: &SdmambaModel) -> Option<String> {
    let mut found = None;
    model.visit("", &mut |name, t| {
        if found.is_none() && !t.is_finite() {
            found = Some(name);
        }
    });
    found
}

/// Forward, backward and one Adam update on one batch. Returns the loss
/// before the update.
///
/// A non-finite loss or gradient aborts before touching the weights and
/// names the first non-finite parameter, else the first non-finite
/// gradient. The epoch in that error is left at 0.
pub fn train_step(
    model: &mut SdmambaModel,
    adam: &mut AdamState,
    cube: &HsiCube,
    coords: &[(usize, usize)],
    anchor_seed: u64,
) -> Result<f32> {
    let patches = extract_batch(cube, coords, model.config.patch_size)?;
    let labels = targets(cube, coords)?;
    let tape = Tape::new();
    let bound = model.bind(&tape, true);
    let out = model.forward(&bound, tape.constant(patches), Mode::Train { anchor_seed })?;
    let loss = out.logits.cross_entropy(&labels)?;
    tape.backward(loss)?;
    let grads = bound.binder.grads()?;
    let value = loss.value().item();
    let bad_grad = grads.iter().find(|(_, g)| !g.is_finite()).map(|(n, _)| n.clone());
    if !value.is_finite() || bad_grad.is_some() {
        let param = first_non_finite(model)
            .or(bad_grad)
            .unwrap_or_else(|| "loss".into());
        return Err(Error::Divergence { epoch: 0, param });
    }
    if let Some(stats) = &out.batch_stats {
        model.update_running_stats(stats);
    }
    adam.step(model, &grads)?;
    Ok(value)
}

/// Seeded epoch loop with best-validation-OA model selection; the later
/// epoch wins a tie.
pub fn train(mut model: SdmambaModel, cube: &HsiCube, split: &SampleSplit) -> Result<TrainOutcome> {
    let cfg = model.config.clone();
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    let val = if split.val.is_empty() {
        warn!("validation split is empty; selecting on the training split");
        &split.train
    } else {
        &split.val
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = AdamState::new(cfg.learning_rate);
    let mut order = split.train.clone();
    let mut history = History::default();
    let mut best: Option<(f64, usize, SdmambaModel)> = None;
    let mut initial_loss = f32::NAN;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let anchor_seed = rng.gen::<u64>();
            let loss = match train_step(&mut model, &mut adam, cube, batch, anchor_seed) {
                Err(Error::Divergence { param, .. }) => return Err(Error::Divergence { epoch, param }),
                other => other?,
            };
            if initial_loss.is_nan() {
                initial_loss = loss;
            }
            if let Some(param) = first_non_finite(&model) {
                return Err(Error::Divergence { epoch, param });
            }
            total += loss as f64 * batch.len() as f64;
        }
        let report = evaluate(&model, cube, val)?;
        let record = EpochRecord {
            epoch,
            loss: total / order.len() as f64,
            val_oa: report.oa,
            val_aa: report.aa,
            val_kappa: report.kappa,
        };
        info!(
            "epoch {epoch:>3}  loss {:.4}  val OA {:.4}  AA {:.4}  kappa {:.4}",
            record.loss, record.val_oa, record.val_aa, record.val_kappa
        );
        if best.as_ref().is_none_or(|(oa, _, _)| record.val_oa >= *oa) {
            best = Some((record.val_oa, epoch, model.clone()));
        }
        history.epochs.push(record);
    }
    let (best_epoch, model) = match best {
        Some((_, e, m)) => (e, m),
        None => (0, model),
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        initial_loss,
    })
}

/// Eval-mode logits and features for `coords`, in chunks.
pub fn predict_coords(model: &SdmambaModel, cube: &HsiCube, coords: &[(usize, usize)]) -> Result<Prediction> {
    let (k, d) = (model.config.num_classes, model.config.hidden_dim);
    let mut logits = Vec::with_capacity(coords.len() * k);
    let mut features = Vec::with_capacity(coords.len() * d);
    for chunk in coords.chunks(EVAL_CHUNK) {
        let p = model.predict(&extract_batch(cube, chunk, model.config.patch_size)?)?;
        logits.extend_from_slice(p.logits.data());
        features.extend_from_slice(p.features.data());
    }
    Ok(Prediction {
        logits: Tensor::new(&[coords.len(), k], logits)?,
        features: Tensor::new(&[coords.len(), d], features)?,
    })
}

pub fn evaluate(model: &SdmambaModel, cube: &HsiCube, coords: &[(usize, usize)]) -> Result<EvalReport> {
    let k = model.config.num_classes;
    if cube.num_classes != k {
        return Err(Error::Config(format!("model has {k} classes, cube has {}", cube.num_classes)));
    }
    let truth = targets(cube, coords)?;
    let pred = if coords.is_empty() {
        Vec::new()
    } else {
        predict_coords(model, cube, coords)?.classes()
    };
    let mut report = EvalReport::from_predictions(&truth, &pred, k);
    report.flops_per_sample = count_flops(&model.config).sparse_flops();
    report.class_names = cube.class_names.clone();
    Ok(report)
}

/// Predicted label (1-based) for every labeled pixel, 0 elsewhere.
pub fn predict_map(model: &SdmambaModel, cube: &HsiCube) -> Result<Vec<i32>> {
    let coords = cube.labeled_coords();
    let mut map = vec![0; cube.height * cube.width];
    if coords.is_empty() {
        return Ok(map);
    }
    let classes = predict_coords(model, cube, &coords)?.classes();
    for (&(r, c), k) in coords.iter().zip(classes) {
        map[r * cube.width + c] = k as i32 + 1;
    }
    Ok(map)
}
