use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::{group_by_response, ClickRecord, ResponseWeights};
use super::model::{CtrConfig, CtrModel};
use crate::error::{GqsError, Result};
use crate::math::{cosine_lr, Adam, ParamStore};
use crate::metrics::{auc, logloss};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtrTrainConfig {
    pub epochs: usize,
    /// Response lists per minibatch.
    pub batch_lists: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub validation_fraction: f64,
    /// Keep the parameters of the epoch with the lowest validation logloss.
    pub early_stopping: bool,
    pub seed: u64,
}

impl Default for CtrTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_lists: 8,
            lr: 3e-3,
            weight_decay: 0.1,
            validation_fraction: 0.2,
            early_stopping: true,
            seed: 0,
        }
    }
}

/// Summary recorded with every CTR checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CtrTrainReport {
    pub train_auc: Option<f64>,
    pub train_logloss: f64,
    pub validation_auc: Option<f64>,
    pub validation_logloss: Option<f64>,
    pub epoch_losses: Vec<f64>,
    pub train_records: usize,
    pub validation_records: usize,
}

#[derive(Clone, Debug)]
pub struct CtrCheckpoint {
    pub model: CtrModel,
    pub report: CtrTrainReport,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: CtrConfig,
    report: CtrTrainReport,
}

impl CtrCheckpoint {
    fn sidecar_path(path: &Path) -> std::path::PathBuf {
        path.with_extension("json")
    }

    /// Writes parameters to `path` and config plus report to `path` with a
    /// `.json` extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.model.params().save(path)?;
        let side = Sidecar {
            config: self.model.config().clone(),
            report: self.report.clone(),
        };
        let side_path = Self::sidecar_path(path);
        std::fs::write(&side_path, serde_json::to_string_pretty(&side)?).map_err(|e| GqsError::io(&side_path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side_path = Self::sidecar_path(path);
        let text = std::fs::read_to_string(&side_path).map_err(|e| GqsError::io(&side_path, e))?;
        let side: Sidecar = serde_json::from_str(&text)?;
        let params = ParamStore::load(path)?;
        Ok(Self {
            model: CtrModel::from_params(side.config, params)?,
            report: side.report,
        })
    }
}

fn metrics_on(model: &CtrModel, records: &[ClickRecord]) -> Result<(Option<f64>, f64)> {
    let scores = model.score_records(records)?;
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let a = match auc(&scores, &labels) {
        Ok(a) => Some(a),
        Err(GqsError::SingleClass) => None,
        Err(e) => return Err(e),
    };
    Ok((a, logloss(&scores, &labels)?))
}

/// Splits records into (train, validation) by whole response lists.
pub fn split_by_response(records: &[ClickRecord], fraction: f64, seed: u64) -> (Vec<ClickRecord>, Vec<ClickRecord>) {
    let groups = group_by_response(records);
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(&mut rng::stream(seed, "ctr-split", 0));
    let n_val = ((groups.len() as f64) * fraction).round() as usize;
    let n_val = n_val.min(groups.len().saturating_sub(1));
    let mut is_val = vec![false; groups.len()];
    for &g in &order[..n_val] {
        is_val[g] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (g, group) in groups.iter().enumerate() {
        let dest = if is_val[g] { &mut val } else { &mut train };
        dest.extend(group.records.iter().map(|r| (*r).clone()));
    }
    (train, val)
}

/// Trains a CTR model with Adam on (optionally weighted) binary cross-entropy.
///
/// A `validation_fraction` of response lists is held out for the reported
/// validation metrics. `init` warm-starts from existing parameters.
pub fn train_ctr(
    dataset: &[ClickRecord],
    weights: Option<&ResponseWeights>,
    model_config: &CtrConfig,
    config: &CtrTrainConfig,
    init: Option<&CtrModel>,
) -> Result<CtrCheckpoint> {
    if dataset.is_empty() {
        return Err(GqsError::InvalidArgument("empty CTR dataset".into()));
    }
    if !dataset.iter().any(|r| r.label == 1) || !dataset.iter().any(|r| r.label == 0) {
        return Err(GqsError::SingleClass);
    }
    if !(0.0..1.0).contains(&config.validation_fraction) {
        return Err(GqsError::Config(format!(
            "validation_fraction {} outside [0, 1)",
            config.validation_fraction
        )));
    }
    let (train, val) = split_by_response(dataset, config.validation_fraction, config.seed);
    let mut model = match init {
        Some(m) => m.clone(),
        None => CtrModel::new(model_config.clone(), &mut rng::stream(config.seed, "ctr-init", 0)),
    };
    let mut groups: Vec<Vec<ClickRecord>> = group_by_response(&train)
        .into_iter()
        .map(|g| g.records.into_iter().cloned().collect())
        .collect();
    let mut adam = Adam::new(model.params(), config.lr);
    adam.weight_decay = config.weight_decay;
    let mut best: Option<(f64, ParamStore)> = None;
    let mut shuffle_rng = rng::stream(config.seed, "ctr-shuffle", 0);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let per_epoch = groups.len().div_ceil(config.batch_lists.max(1));
    let total_steps = per_epoch * config.epochs;
    let mut step = 0;
    for _ in 0..config.epochs {
        groups.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in groups.chunks(config.batch_lists.max(1)) {
            let batch: Vec<ClickRecord> = chunk.iter().flatten().cloned().collect();
            let (loss, grads) = model.loss_and_grad(&batch, weights)?;
            if !loss.is_finite() {
                return Err(GqsError::Diverged(format!("CTR loss {loss}")));
            }
            adam.lr = cosine_lr(config.lr, step, total_steps, total_steps / 20, 0.1);
            adam.step(model.params_mut(), &grads)?;
            step += 1;
            total += loss;
            batches += 1;
        }
        epoch_losses.push(total / batches.max(1) as f64);
        if config.early_stopping && !val.is_empty() {
            let (_, val_loss) = metrics_on(&model, &val)?;
            if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
                best = Some((val_loss, model.params().clone()));
            }
        }
    }
    if let Some((_, params)) = best {
        model.params_mut().assign_from(&params)?;
    }
    let (train_auc, train_logloss) = metrics_on(&model, &train)?;
    let (validation_auc, validation_logloss) = if val.is_empty() {
        (None, None)
    } else {
        let (a, l) = metrics_on(&model, &val)?;
        (a, Some(l))
    };
    Ok(CtrCheckpoint {
        model,
        report: CtrTrainReport {
            train_auc,
            train_logloss,
            validation_auc,
            validation_logloss,
            epoch_losses,
            train_records: train.len(),
            validation_records: val.len(),
        },
    })
}

/// Label-permuted copy of `records`, used as a no-signal control.
pub fn shuffle_labels(records: &[ClickRecord], rng: &mut impl Rng) -> Vec<ClickRecord> {
    let mut labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    labels.shuffle(rng);
    records
        .iter()
        .zip(labels)
        .map(|(r, label)| ClickRecord { label, ..r.clone() })
        .collect()
}
