use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::distill::{distill_loss, pool_tokens, StudentStates};
use super::net::{argmax, Mode};
use super::{FcdnConfig, FcdnModel};
use crate::connectivity::ChannelWeights;
use crate::data::EpochSet;
use crate::error::{invalid, Error, Result};
use crate::nn::{param_grads, AdamState, Graph, Tensor};
use crate::rng;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_acc: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.train_loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_loss.is_empty()
    }
}

/// Mean fused-logit cross-entropy and accuracy in evaluation mode.
pub fn evaluate(model: &FcdnModel, bands: &[EpochSet]) -> Result<(f64, f64)> {
    let logits = model.logits(bands)?;
    let labels = bands[0].labels();
    let c = model.config().n_classes;
    let mut loss = 0.0;
    let mut correct = 0;
    for (row, &l) in logits.data().chunks(c).zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[l];
        if argmax(row) == l {
            correct += 1;
        }
    }
    let n = labels.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Trains `model` in place with Adam, keeping the parameters of the epoch
/// with the best validation accuracy (ties broken by lower validation loss).
///
/// A teacher must be given exactly when `beta > 0`; its layer states feed the
/// similarity term and its predictions supervise the distillation head.
/// Without a teacher that head learns the true labels. One JSON record per
/// epoch is written to `log` when given.
pub fn train(
    model: &mut FcdnModel,
    teacher: Option<&FcdnModel>,
    train: &[EpochSet],
    val: &[EpochSet],
    mut log: Option<&mut dyn Write>,
) -> Result<TrainHistory> {
    let cfg = model.config().clone();
    match (cfg.beta > 0.0, teacher.is_some()) {
        (true, false) => return Err(Error::Config("beta > 0 requires a teacher model".into())),
        (false, true) => return Err(Error::Config("a teacher is only used when beta > 0".into())),
        _ => {}
    }
    model.check_bands(train)?;
    model.check_bands(val)?;
    if train[0].n_trials() == 0 || val[0].n_trials() == 0 {
        return Err(invalid!("empty training or validation split"));
    }
    if let Some(t) = teacher {
        t.check_bands(train)?;
    }
    let n = train[0].n_trials();
    let labels = train[0].labels().to_vec();
    let mut order_rng = rng::seeded(rng::derive_seed(cfg.seed, 1));
    let mut drop_rng = rng::seeded(rng::derive_seed(cfg.seed, 2));
    let mut adam = AdamState::new(model.params());
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, f64, FcdnModel)> = None;
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let inputs = model.batch_input(train, batch)?;
            let (teacher_pooled, dist_target) = match teacher {
                Some(t) => {
                    let (pooled, pred) = teacher_states(t, train, batch)?;
                    (Some(pooled), pred)
                }
                None => (None, y.clone()),
            };
            let mut step = || -> Result<f64> {
                let mut g = Graph::new(cfg.precision);
                let vars = model.params().bind(&mut g);
                let out = model.forward(&mut g, &vars, &inputs, Mode::Train(Some(&mut drop_rng)))?;
                let student = StudentStates {
                    cls_logits: out.cls_logits,
                    hidden: &out.hidden,
                    attn: &out.attn,
                };
                let main = distill_loss(
                    &mut g,
                    &student,
                    &y,
                    teacher_pooled.as_deref(),
                    cfg.alpha,
                    cfg.beta,
                    cfg.distill_sign,
                )?;
                let ce_dist = g.cross_entropy(out.dist_logits, &dist_target)?;
                let ce_dist = g.affine(ce_dist, cfg.alpha, 0.0)?;
                let loss = g.add(main, ce_dist)?;
                let value = g.value(loss).item();
                let mut grads = g.backward(loss)?;
                let pg = param_grads(&mut grads, &vars);
                if pg.iter().flatten().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("non-finite gradient".into()));
                }
                adam.step(model.params_mut(), &pg, cfg.lr)?;
                model.round_state();
                Ok(value)
            };
            let value = step().map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, batch {}: {m}", bi + 1)),
                other => other,
            })?;
            total += value * batch.len() as f64;
        }
        let train_loss = total / n as f64;
        let (val_loss, val_acc) = evaluate(model, val)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("epoch {epoch}: loss became non-finite")));
        }
        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);
        history.val_acc.push(val_acc);
        if let Some(w) = log.as_deref_mut() {
            let rec = EpochRecord {
                epoch,
                train_loss,
                val_loss,
                val_acc,
            };
            writeln!(w, "{}", serde_json::to_string(&rec).expect("record serializes")).map_err(|e| Error::io("training log", e))?;
        }
        let better = match &best {
            None => true,
            Some((acc, loss, _)) => val_acc > *acc || (val_acc == *acc && val_loss < *loss),
        };
        if better {
            best = Some((val_acc, val_loss, model.clone()));
            history.best_epoch = epoch;
        }
    }
    if let Some((_, _, m)) = best {
        *model = m;
    }
    Ok(history)
}

/// Teacher layer states pooled over tokens, plus the teacher's labels.
fn teacher_states(teacher: &FcdnModel, bands: &[EpochSet], batch: &[usize]) -> Result<(Vec<Tensor>, Vec<usize>)> {
    let inputs = teacher.batch_input(bands, batch)?;
    let t = teacher;
    let mut g = Graph::new(t.config().precision);
    let vars = t.params().bind(&mut g);
    let out = t.forward_eval(&mut g, &vars, &inputs)?;
    let pooled = out.hidden.iter().map(|&h| pool_tokens(g.value(h))).collect::<Result<Vec<_>>>()?;
    let c = t.config().n_classes;
    let pred = g.value(out.logits).data().chunks(c).map(argmax).collect();
    Ok((pooled, pred))
}

/// Trains a teacher (plain cross-entropy) with its own, typically wider and
/// deeper, transformer configuration.
pub fn train_teacher(
    config: &FcdnConfig,
    weights: Vec<ChannelWeights>,
    train_set: &[EpochSet],
    val: &[EpochSet],
) -> Result<(FcdnModel, TrainHistory)> {
    let mut cfg = config.clone();
    cfg.beta = 0.0;
    let mut teacher = FcdnModel::build(&cfg, weights, cfg.seed)?;
    let history = train(&mut teacher, None, train_set, val, None)?;
    Ok((teacher, history))
}
