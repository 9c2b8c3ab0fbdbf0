//! Pair sampling, the joint objective, the training loop and evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{debug, info};

use crate::backbones::ImageSample;
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{Model, PairOutputs};
use crate::nn::{accumulate, apply_stats, Ctx, Mode};
use crate::rng::Rng;
use crate::tensor::adam::{adam_step, AdamState};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::Var;

/// Dataset indices of a pair batch; `labels[b]` is shared by both members.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairBatch {
    pub anchors: Vec<usize>,
    pub positives: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Draws `batch_size` anchors uniformly from `pool` and, for each, a
/// positive uniformly from the other same-class members of `pool` (the
/// anchor itself when it is alone in its class).
pub fn sample_pairs(ds: &Dataset, pool: &[usize], batch_size: usize, rng: &mut Rng) -> Result<PairBatch> {
    if pool.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut by_class = vec![Vec::new(); ds.num_classes];
    for &i in pool {
        by_class[ds.samples[i].label].push(i);
    }
    let mut batch = PairBatch {
        anchors: Vec::with_capacity(batch_size),
        positives: Vec::with_capacity(batch_size),
        labels: Vec::with_capacity(batch_size),
    };
    for _ in 0..batch_size {
        let a = pool[rng.below(pool.len())];
        let label = ds.samples[a].label;
        let same = &by_class[label];
        let p = if same.len() < 2 {
            a
        } else {
            let others: Vec<usize> = same.iter().copied().filter(|&j| j != a).collect();
            others[rng.below(others.len())]
        };
        batch.anchors.push(a);
        batch.positives.push(p);
        batch.labels.push(label);
    }
    Ok(batch)
}

/// Cross-entropy terms of one batch. Semantic terms are `None` without the
/// vision-language branch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce_sem_a: Option<f64>,
    pub ce_sem_p: Option<f64>,
    pub ce_vis_a: f64,
    pub ce_vis_p: f64,
    pub lambda: f64,
}

/// `(sem_a + λ·vis_a + sem_p + λ·vis_p) / 4`, or `(vis_a + vis_p) / 2`
/// without semantic logits.
pub fn total_loss(ctx: &mut Ctx, out: &PairOutputs, labels: &[usize], lambda: f64) -> Result<(Var, LossBreakdown)> {
    let vis_a = ctx.cross_entropy(out.vis_a, labels)?;
    let vis_p = ctx.cross_entropy(out.vis_p, labels)?;
    let value = |ctx: &Ctx, v: Var| ctx.value(v).item();
    let (loss, sem) = match (out.sem_a, out.sem_p) {
        (Some(ya), Some(yp)) => {
            let sem_a = ctx.cross_entropy(ya, labels)?;
            let sem_p = ctx.cross_entropy(yp, labels)?;
            let wa = ctx.scale(vis_a, lambda);
            let wp = ctx.scale(vis_p, lambda);
            let s = ctx.add(sem_a, wa)?;
            let s = ctx.add(s, sem_p)?;
            let s = ctx.add(s, wp)?;
            (ctx.scale(s, 0.25), Some((value(ctx, sem_a), value(ctx, sem_p))))
        }
        _ => {
            let s = ctx.add(vis_a, vis_p)?;
            (ctx.scale(s, 0.5), None)
        }
    };
    let breakdown = LossBreakdown {
        total: value(ctx, loss),
        ce_sem_a: sem.map(|s| s.0),
        ce_sem_p: sem.map(|s| s.1),
        ce_vis_a: value(ctx, vis_a),
        ce_vis_p: value(ctx, vis_p),
        lambda,
    };
    Ok((loss, breakdown))
}

/// Overall accuracy, per-class accuracy and the `C×C` confusion matrix
/// (rows: true class, columns: prediction).
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn from_predictions(class_names: &[String], labels: &[usize], predictions: &[usize]) -> Self {
        let c = class_names.len();
        let mut confusion = vec![vec![0; c]; c];
        for (&y, &p) in labels.iter().zip(predictions) {
            confusion[y][p] += 1;
        }
        let correct: usize = (0..c).map(|i| confusion[i][i]).sum();
        let per_class = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let support: usize = row.iter().sum();
                if support == 0 {
                    0.0
                } else {
                    row[i] as f64 / support as f64
                }
            })
            .collect();
        EvalReport {
            class_names: class_names.to_vec(),
            accuracy: if labels.is_empty() { 0.0 } else { correct as f64 / labels.len() as f64 },
            per_class,
            confusion,
        }
    }

    pub fn support(&self) -> Vec<usize> {
        self.confusion.iter().map(|r| r.iter().sum()).collect()
    }

    /// One row per class (`class,support,accuracy,pred_<name>...`) followed
    /// by an `overall` row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["class".to_string(), "support".into(), "accuracy".into()];
        header.extend(self.class_names.iter().map(|n| format!("pred_{n}")));
        w.write_record(&header).map_err(csv_err)?;
        for (i, row) in self.confusion.iter().enumerate() {
            let mut rec = vec![self.class_names[i].clone(), row.iter().sum::<usize>().to_string(), format!("{:.6}", self.per_class[i])];
            rec.extend(row.iter().map(|n| n.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let total: usize = self.support().iter().sum();
        let mut rec = vec!["overall".to_string(), total.to_string(), format!("{:.6}", self.accuracy)];
        rec.extend(self.class_names.iter().map(|_| String::new()));
        w.write_record(&rec).map_err(csv_err)?;
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "accuracy {:.4}", self.accuracy)?;
        for (i, name) in self.class_names.iter().enumerate() {
            writeln!(f, "  {name:<12} {:.4}  {:?}", self.per_class[i], self.confusion[i])?;
        }
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Images evaluated together per forward pass; results do not depend on it.
pub const EVAL_CHUNK: usize = 16;

/// Predictions for the given dataset indices.
pub fn predict_indices(model: &Model, ds: &Dataset, indices: &[usize]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let imgs: Vec<&ImageSample> = chunk.iter().map(|&i| &ds.samples[i]).collect();
        out.extend(model.infer(&imgs)?.predictions);
    }
    Ok(out)
}

pub fn accuracy(model: &Model, ds: &Dataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Ok(f64::NAN);
    }
    let preds = predict_indices(model, ds, indices)?;
    let correct = preds.iter().zip(indices).filter(|(p, &i)| **p == ds.samples[i].label).count();
    Ok(correct as f64 / indices.len() as f64)
}

pub fn evaluate(model: &Model, ds: &Dataset) -> Result<EvalReport> {
    if ds.num_classes != model.num_classes() {
        return Err(Error::CheckpointMismatch(format!(
            "model has {} classes, dataset has {}",
            model.num_classes(),
            ds.num_classes
        )));
    }
    let all: Vec<usize> = (0..ds.len()).collect();
    let preds = predict_indices(model, ds, &all)?;
    let labels: Vec<usize> = ds.samples.iter().map(|s| s.label).collect();
    Ok(EvalReport::from_predictions(&model.config.model.class_names, &labels, &preds))
}

/// Model and optimiser state between steps.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let model = Model::new(config)?;
        let adam = AdamState::new(&model.store);
        Ok(Trainer { model, adam })
    }

    /// One optimiser step on a pair batch.
    pub fn step(&mut self, ds: &Dataset, batch: &PairBatch) -> Result<LossBreakdown> {
        let anchors: Vec<&ImageSample> = batch.anchors.iter().map(|&i| &ds.samples[i]).collect();
        let positives: Vec<&ImageSample> = batch.positives.iter().map(|&i| &ds.samples[i]).collect();
        let lambda = self.model.config.train.lambda;
        let (grads, stats, breakdown) = {
            let mut ctx = Ctx::new(&self.model.store, Mode::Train);
            let out = self.model.forward_pair(&mut ctx, &anchors, &positives)?;
            let (loss, breakdown) = total_loss(&mut ctx, &out, &batch.labels, lambda)?;
            let grads = ctx.backward(loss)?;
            (grads, ctx.take_stats(), breakdown)
        };
        let store = &mut self.model.store;
        store.zero_grad();
        accumulate(store, &grads);
        apply_stats(store, &stats);
        adam_step(store, &mut self.adam, &self.model.config.optim);
        Ok(breakdown)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.model.checkpoint(Some(&self.adam))
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub ce_sem_a: f64,
    pub ce_vis_a: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch\tL_train\tce_sem_a\tce_vis_a\ttrain_acc\tval_acc";

    pub fn tsv(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{:.4}",
            self.epoch, self.loss, self.ce_sem_a, self.ce_vis_a, self.train_acc, self.val_acc
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub history: Vec<EpochLog>,
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

impl TrainOutcome {
    pub fn final_train_acc(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |h| h.train_acc)
    }
}

/// Epoch-based training. Each epoch runs `ceil(|train| / batch_size)`
/// steps; the checkpoint with the best validation accuracy (training
/// accuracy when there is no validation split) is kept. Stops early once
/// `train.target_train_acc` is reached. Writes `train.log`, `best.ckpt`,
/// `final.ckpt` and `config.toml` under `out_dir` when given.
pub fn train(config: &RunConfig, ds: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config)?;
    if ds.num_classes != trainer.model.num_classes() {
        return Err(Error::config(
            "model.class_names",
            format!("{} classes configured, dataset has {}", trainer.model.num_classes(), ds.num_classes),
        ));
    }
    let root = Rng::new(config.seed);
    let (train_idx, val_idx) = ds.stratified_split(config.data.val_fraction, &mut root.split("split"));
    if train_idx.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut pairs_rng = root.split("pairs");
    let steps = train_idx.len().div_ceil(config.train.batch_size);
    let mut log_text = format!("{}\n", EpochLog::HEADER);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), config.to_toml())?;
    }
    let mut history = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0, trainer.checkpoint());
    for epoch in 1..=config.train.epochs {
        let mut sums = [0.0; 3];
        for _ in 0..steps {
            let batch = sample_pairs(ds, &train_idx, config.train.batch_size, &mut pairs_rng)?;
            let b = trainer.step(ds, &batch)?;
            sums[0] += b.total;
            sums[1] += b.ce_sem_a.unwrap_or(f64::NAN);
            sums[2] += b.ce_vis_a;
        }
        let train_acc = accuracy(&trainer.model, ds, &train_idx)?;
        let val_acc = accuracy(&trainer.model, ds, &val_idx)?;
        let entry = EpochLog {
            epoch,
            loss: sums[0] / steps as f64,
            ce_sem_a: sums[1] / steps as f64,
            ce_vis_a: sums[2] / steps as f64,
            train_acc,
            val_acc,
        };
        if !entry.loss.is_finite() {
            return Err(Error::config("optim.lr", format!("loss diverged at epoch {epoch}")));
        }
        info!("{}", entry.tsv());
        let _ = writeln!(log_text, "{}", entry.tsv());
        history.push(entry);
        let score = if val_idx.is_empty() { train_acc } else { val_acc };
        if score > best.0 {
            debug!("new best at epoch {epoch}: {score:.4}");
            best = (score, epoch, trainer.checkpoint());
        }
        if let Some(dir) = out_dir {
            fs::write(dir.join("train.log"), &log_text)?;
        }
        if config.train.target_train_acc.is_some_and(|t| train_acc >= t) {
            info!("reached target train accuracy at epoch {epoch}");
            break;
        }
    }
    if let Some(dir) = out_dir {
        best.2.save(&dir.join("best.ckpt"))?;
        trainer.checkpoint().save(&dir.join("final.ckpt"))?;
    }
    Ok(TrainOutcome {
        trainer,
        history,
        best: best.2,
        best_epoch: best.1,
        train_indices: train_idx,
        val_indices: val_idx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lgae::TokenBundle;
    use crate::model::Encoded;
    use crate::tensor::Tensor;

    fn tiny_dataset(sizes: &[usize]) -> Dataset {
        let mut samples = Vec::new();
        for (c, &n) in sizes.iter().enumerate() {
            for k in 0..n {
                samples.push(ImageSample::new(format!("{c}_{k}"), c, Tensor::zeros(&[3, 32, 32])).unwrap());
            }
        }
        Dataset::new(samples, sizes.len()).unwrap()
    }

    #[test]
    fn singleton_class_pairs_with_itself() {
        let ds = tiny_dataset(&[1, 3]);
        let pool: Vec<usize> = (0..4).collect();
        let b = sample_pairs(&ds, &pool, 200, &mut Rng::new(1)).unwrap();
        for ((&a, &p), &y) in b.anchors.iter().zip(&b.positives).zip(&b.labels) {
            assert_eq!(ds.samples[a].label, y);
            assert_eq!(ds.samples[p].label, y);
            if a == 0 {
                assert_eq!(p, 0);
            } else {
                assert_ne!(a, p);
            }
        }
        assert_eq!(b, sample_pairs(&ds, &pool, 200, &mut Rng::new(1)).unwrap());
        assert!(matches!(sample_pairs(&ds, &[], 2, &mut Rng::new(1)), Err(Error::EmptyDataset)));
    }

    /// Chi-square statistic of anchor class counts against uniform; the
    /// 0.999 quantile of χ² with 6 degrees of freedom is 22.46.
    #[test]
    fn anchor_classes_are_uniform() {
        let ds = tiny_dataset(&[5; 7]);
        let pool: Vec<usize> = (0..35).collect();
        let b = sample_pairs(&ds, &pool, 10_000, &mut Rng::new(9)).unwrap();
        let mut counts = [0.0f64; 7];
        for &y in &b.labels {
            counts[y] += 1.0;
        }
        let e = 10_000.0 / 7.0;
        let chi2: f64 = counts.iter().map(|c| (c - e).powi(2) / e).sum();
        assert!(chi2 < 22.46, "chi2 {chi2}, counts {counts:?}");
    }

    #[test]
    fn report_counts() {
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let r = EvalReport::from_predictions(&names, &[0, 0, 1, 2, 2, 2], &[0, 1, 1, 2, 0, 2]);
        assert_eq!(r.support(), vec![2, 1, 3]);
        assert_eq!(r.confusion, vec![vec![1, 1, 0], vec![0, 1, 0], vec![1, 0, 2]]);
        assert!((r.accuracy - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(r.per_class, vec![0.5, 1.0, 2.0 / 3.0]);
        let csv = r.to_csv().unwrap();
        assert!(csv.starts_with("class,support,accuracy,pred_a,pred_b,pred_c\na,2,0.500000,1,1,0\n"));
    }

    /// Mean negative log-softmax at the label, computed directly.
    fn ce_oracle(logits: &Tensor, labels: &[usize]) -> f64 {
        let c = logits.shape()[1];
        let mut total = 0.0;
        for (row, &y) in logits.data().chunks(c).zip(labels) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        total / labels.len() as f64
    }

    fn pair_loss(logits: [&Tensor; 4], labels: &[usize], lambda: f64, semantic: bool) -> LossBreakdown {
        let store = crate::tensor::params::ParamStore::new();
        let mut ctx = Ctx::new(&store, Mode::Train);
        let [va, vp, sa, sp] = logits.map(|t| ctx.constant(t.clone()));
        let dummy = ctx.constant(Tensor::zeros(&[1]));
        let enc = Encoded {
            tokens: TokenBundle {
                x: dummy,
                z_cls: dummy,
                group_sizes: Vec::new(),
            },
            semantic: None,
        };
        let out = PairOutputs {
            vis_a: va,
            vis_p: vp,
            sem_a: semantic.then_some(sa),
            sem_p: semantic.then_some(sp),
            anchor: enc.clone(),
            positive: enc,
        };
        total_loss(&mut ctx, &out, labels, lambda).unwrap().1
    }

    #[test]
    fn uniform_logits_give_log_class_count() {
        let z = Tensor::zeros(&[3, 7]);
        let b = pair_loss([&z; 4], &[0, 3, 6], 1.0, true);
        assert!((b.total - 7f64.ln()).abs() < 1e-12);
        assert_eq!(b.ce_sem_a, Some(b.ce_vis_a));
    }

    #[test]
    fn loss_combines_terms() {
        let mut rng = Rng::new(4);
        let labels = [1, 0, 4, 2];
        let t: Vec<Tensor> = (0..4).map(|_| Tensor::from_fn(&[4, 5], |_| 3.0 * rng.normal())).collect();
        let [va, vp, sa, sp] = [0, 1, 2, 3].map(|i| ce_oracle(&t[i], &labels));
        for lambda in [0.0, 0.5, 2.0] {
            let b = pair_loss([&t[0], &t[1], &t[2], &t[3]], &labels, lambda, true);
            assert!((b.total - (sa + lambda * va + sp + lambda * vp) / 4.0).abs() < 1e-12);
            assert!((b.ce_sem_p.unwrap() - sp).abs() < 1e-12);
        }
        let b = pair_loss([&t[0], &t[1], &t[2], &t[3]], &labels, 0.0, false);
        assert!((b.total - (va + vp) / 2.0).abs() < 1e-12);
        assert_eq!(b.ce_sem_a, None);
    }

    /// Every trainable tensor receives a nonzero gradient from one loss; no
    /// frozen tensor receives one at all.
    #[test]
    fn gradients_reach_exactly_the_trainable_parameters() {
        let cfg = crate::verify::shrink_config(&RunConfig::default());
        let model = Model::new(&cfg).unwrap();
        let ds = Dataset::synthetic(1, cfg.data.image_size, 2).unwrap();
        let batch = sample_pairs(&ds, &(0..ds.len()).collect::<Vec<_>>(), 4, &mut Rng::new(3)).unwrap();
        let anchors: Vec<&ImageSample> = batch.anchors.iter().map(|&i| &ds.samples[i]).collect();
        let positives: Vec<&ImageSample> = batch.positives.iter().map(|&i| &ds.samples[i]).collect();
        let mut ctx = Ctx::new(&model.store, Mode::Train);
        let out = model.forward_pair(&mut ctx, &anchors, &positives).unwrap();
        let (loss, _) = total_loss(&mut ctx, &out, &batch.labels, cfg.train.lambda).unwrap();
        let grads = ctx.backward(loss).unwrap();
        let with_grad: std::collections::HashSet<_> =
            grads.iter().filter(|(_, g)| g.data().iter().any(|&v| v != 0.0)).map(|(id, _)| *id).collect();
        for id in model.store.ids() {
            let p = model.store.get(id);
            assert_eq!(with_grad.contains(&id), !p.frozen, "{}", p.name);
        }
    }
}
