//! Training and evaluation loops, plus the FM4 alpha grid search.

use crate::data::{merge_label, Dataset, LabelSpace, PatchPair, MERGED_NAMES};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::models::{argmax_rows, one_hot, ForwardOutput, FusionNetwork};
use crate::tensor::{AdamConfig, BnState, NodeId, Parameter, RunMode, Tape, Tensor, CE_FLOOR};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

pub const OPTIMIZER_NAME: &str = "adam";
pub const LOSS_NAME: &str = "categorical_cross_entropy";

/// Hyperparameters; the defaults are the tuned values used for every
/// fusion variant (Adam, lr 1e-4, 100 epochs, spatial dropout 0.2,
/// categorical cross entropy).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub dropout_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub early_stop_patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 100,
            dropout_rate: 0.2,
            batch_size: 32,
            seed: 0,
            early_stop_patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Parameter(format!(
                "dropout rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.learning_rate)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc,seconds\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc, e.seconds
            ));
        }
        out
    }

    /// CSV with the wall-time column blanked; this is the reproducible part.
    pub fn to_csv_deterministic(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc
            ));
        }
        out
    }
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Check that the network's class count matches the dataset/label space.
fn check_classes(net: &FusionNetwork<f32>, data: &Dataset) -> Result<()> {
    match net.spec.label_space {
        LabelSpace::Original17 => {
            if net.spec.num_classes != data.manifest.num_classes {
                return Err(Error::Config(format!(
                    "network has {} classes but dataset has {}",
                    net.spec.num_classes, data.manifest.num_classes
                )));
            }
        }
        LabelSpace::Merged8 => {
            if data.manifest.num_classes != 17 {
                return Err(Error::Config(format!(
                    "label merging needs a 17-class dataset, got {}",
                    data.manifest.num_classes
                )));
            }
        }
    }
    Ok(())
}

fn mapped_labels(patches: &[PatchPair], space: LabelSpace) -> Result<Vec<usize>> {
    patches
        .iter()
        .map(|p| merge_label(usize::from(p.label), space))
        .collect()
}

fn loss_node(tape: &mut Tape<f32>, out: &ForwardOutput, targets: &Tensor) -> Result<NodeId> {
    match out.branches {
        // Late fusion trains its branches independently; summing the branch
        // losses gives each disjoint parameter set its own gradient.
        Some((a, b)) => {
            let la = tape.cross_entropy(a, targets)?;
            let lb = tape.cross_entropy(b, targets)?;
            tape.add(la, lb)
        }
        None => tape.cross_entropy(out.probs, targets),
    }
}

struct Snapshot {
    params: Vec<Parameter<f32>>,
    bn: Vec<BnState<f32>>,
}

fn snapshot(net: &FusionNetwork<f32>) -> Snapshot {
    Snapshot {
        params: net.params().to_vec(),
        bn: net.bn_states().to_vec(),
    }
}

fn restore(net: &mut FusionNetwork<f32>, snap: &Snapshot) {
    net.params_mut().clone_from_slice(&snap.params);
    net.bn_states_mut().clone_from_slice(&snap.bn);
}

/// Infer-mode loss/accuracy over a normalized split.
fn eval_split(
    net: &mut FusionNetwork<f32>,
    patches: &[PatchPair],
    labels: &[usize],
    batch_size: usize,
) -> Result<(f64, f64)> {
    let k = net.spec.num_classes;
    let mut loss_sum = 0.0;
    let mut hits = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (batch, batch_labels) in patches.chunks(batch_size).zip(labels.chunks(batch_size)) {
        let mut tape = Tape::new();
        let run = net.forward_batch_graph(&mut tape, batch, RunMode::Infer, &mut rng)?;
        let targets = one_hot(batch_labels, k)?;
        let batch_loss = match run.out.branches {
            Some((a, b)) => {
                ce_value(&tape.value(a).data, &targets.data, k)
                    + ce_value(&tape.value(b).data, &targets.data, k)
            }
            None => ce_value(&tape.value(run.out.probs).data, &targets.data, k),
        };
        loss_sum += batch_loss * batch.len() as f64;
        let preds = argmax_rows(&tape.value(run.out.probs).data, k);
        hits += preds
            .iter()
            .zip(batch_labels)
            .filter(|(p, l)| *p == *l)
            .count();
    }
    let n = patches.len() as f64;
    Ok((loss_sum / n, hits as f64 / n))
}

fn ce_value(probs: &[f32], targets: &[f32], k: usize) -> f64 {
    let rows = probs.len() / k;
    let mut total = 0.0;
    for (p_row, t_row) in probs.chunks(k).zip(targets.chunks(k)) {
        for (&p, &t) in p_row.iter().zip(t_row) {
            if t == 1.0 {
                total += -(f64::from(p).max(CE_FLOOR)).ln();
            }
        }
    }
    total / rows as f64
}

/// Train on the dataset's train split with seeded shuffling, Adam updates,
/// and best-validation checkpointing. Deterministic given (seed, config,
/// dataset).
pub fn train(
    net: &mut FusionNetwork<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    check_classes(net, data)?;
    if data.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let space = net.spec.label_space;
    let k = net.spec.num_classes;
    let train_patches = data.normalized_split(&data.train);
    let val_patches = data.normalized_split(&data.val);
    let train_labels = mapped_labels(&data.train, space)?;
    let val_labels = mapped_labels(&data.val, space)?;

    let mut log = TrainLog::default();
    let mut best: Option<(f64, Snapshot)> = None;
    let mut stale = 0usize;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_patches.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64, 0)));

        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<PatchPair> = chunk.iter().map(|&i| train_patches[i].clone()).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| train_labels[i]).collect();
            let targets = one_hot(&batch_labels, k)?;
            let mut dropout_rng = ChaCha8Rng::seed_from_u64(mix_seed(
                cfg.seed,
                epoch as u64,
                1 + batch_idx as u64,
            ));
            let mut tape = Tape::new();
            let run = net.forward_batch_graph(
                &mut tape,
                &batch,
                RunMode::Train {
                    dropout_rate: cfg.dropout_rate,
                },
                &mut dropout_rng,
            )?;
            let loss = loss_node(&mut tape, &run.out, &targets)?;
            let loss_value = f64::from(tape.value(loss).item());
            if !loss_value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: batch_idx,
                });
            }
            loss_sum += loss_value * batch.len() as f64;
            let preds = argmax_rows(&tape.value(run.out.probs).data, k);
            hits += preds
                .iter()
                .zip(&batch_labels)
                .filter(|(p, l)| *p == *l)
                .count();
            // A non-finite gradient is the same blow-up as a NaN loss, just
            // caught one pass earlier.
            tape.backward(loss).map_err(|e| match e {
                Error::NonFinite(_) => Error::Divergence {
                    epoch,
                    batch: batch_idx,
                },
                other => other,
            })?;
            net.pull_grads(&tape, &run)?;
            net.adam_step(&cfg.adam())?;
        }

        let train_loss = loss_sum / train_patches.len() as f64;
        let train_acc = hits as f64 / train_patches.len() as f64;
        let (val_loss, val_acc) = if val_patches.is_empty() {
            (f64::NAN, 0.0)
        } else {
            eval_split(net, &val_patches, &val_labels, cfg.batch_size)?
        };
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
            seconds: started.elapsed().as_secs_f64(),
        });

        let improved = best.as_ref().map_or(true, |(acc, _)| val_acc > *acc);
        if improved {
            best = Some((val_acc, snapshot(net)));
            stale = 0;
        } else {
            stale += 1;
            if let Some(patience) = cfg.early_stop_patience {
                if stale > patience {
                    break;
                }
            }
        }
    }

    if let Some((_, snap)) = &best {
        restore(net, snap);
    }
    Ok(log)
}

/// Run the network over a split and accumulate the confusion matrix in the
/// given label space. Raw dataset labels and (for 17-class networks) raw
/// predictions are both mapped through the space before counting.
pub fn evaluate(
    net: &mut FusionNetwork<f32>,
    data: &Dataset,
    split: &[PatchPair],
    space: LabelSpace,
) -> Result<ConfusionMatrix> {
    if split.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let (k_out, names) = match space {
        LabelSpace::Merged8 => (8, MERGED_NAMES.iter().map(|s| s.to_string()).collect()),
        LabelSpace::Original17 => (
            net.spec.num_classes,
            data.manifest.class_names.clone(),
        ),
    };
    if names.len() != k_out {
        return Err(Error::Config(format!(
            "dataset has {} class names but the evaluation space needs {k_out}",
            names.len()
        )));
    }
    let net_classes = net.spec.num_classes;
    let map_pred = move |p: usize| -> Result<usize> {
        if net_classes == k_out {
            Ok(p)
        } else if net_classes == 17 && space == LabelSpace::Merged8 {
            merge_label(p, space)
        } else {
            Err(Error::Config(format!(
                "cannot map {net_classes}-class predictions into a {k_out}-class space"
            )))
        }
    };
    let mut cm = ConfusionMatrix::new(k_out, names)?;
    for batch in split.chunks(64) {
        let normalized = data.normalized_split(batch);
        let preds = net.predict(&normalized)?;
        for (patch, pred) in batch.iter().zip(preds) {
            let truth = merge_label(usize::from(patch.label), space)?;
            cm.record(truth, map_pred(pred)?)?;
        }
    }
    Ok(cm)
}

/// Result of the alpha grid search: every candidate with its validation
/// overall accuracy, evaluated exactly once, plus the winner (ties go to
/// the smaller alpha).
#[derive(Debug, Clone)]
pub struct AlphaSearch {
    pub evaluated: Vec<(f64, f64)>,
    pub best_alpha: f64,
}

pub fn default_alpha_grid() -> Vec<f64> {
    (0..=10).map(|i| f64::from(i) / 10.0).collect()
}

/// Grid-search alpha over cached branch probabilities.
pub fn alpha_grid_search(
    p_unet: &[f32],
    p_cnn: &[f32],
    k: usize,
    labels: &[usize],
    grid: &[f64],
) -> Result<AlphaSearch> {
    if grid.is_empty() {
        return Err(Error::Parameter("alpha grid is empty".into()));
    }
    if p_unet.len() != p_cnn.len() || p_unet.len() != labels.len() * k {
        return Err(Error::Data("branch probability shapes disagree".into()));
    }
    let mut evaluated = Vec::with_capacity(grid.len());
    for &alpha in grid {
        let combined: Vec<f32> = p_unet
            .iter()
            .zip(p_cnn)
            .map(|(&u, &c)| alpha as f32 * u + (1.0 - alpha as f32) * c)
            .collect();
        let preds = argmax_rows(&combined, k);
        let hits = preds.iter().zip(labels).filter(|(p, l)| *p == *l).count();
        evaluated.push((alpha, hits as f64 / labels.len() as f64));
    }
    let mut best = evaluated[0];
    for &(alpha, oa) in &evaluated[1..] {
        if oa > best.1 || (oa == best.1 && alpha < best.0) {
            best = (alpha, oa);
        }
    }
    Ok(AlphaSearch {
        evaluated,
        best_alpha: best.0,
    })
}

/// Evaluate both FM4 branches once on the validation split, pick the alpha
/// maximizing validation overall accuracy, and store it on the network.
pub fn tune_alpha(
    net: &mut FusionNetwork<f32>,
    data: &Dataset,
    val: &[PatchPair],
    grid: &[f64],
) -> Result<AlphaSearch> {
    if val.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let k = net.spec.num_classes;
    let space = net.spec.label_space;
    let labels = mapped_labels(val, space)?;
    let mut p_unet = Vec::with_capacity(val.len() * k);
    let mut p_cnn = Vec::with_capacity(val.len() * k);
    for batch in val.chunks(64) {
        let normalized = data.normalized_split(batch);
        let (u, c) = net.forward_branches(&normalized)?;
        p_unet.extend_from_slice(&u.data);
        p_cnn.extend_from_slice(&c.data);
    }
    let search = alpha_grid_search(&p_unet, &p_cnn, k, &labels, grid)?;
    net.set_alpha(search.best_alpha)?;
    Ok(search)
}
