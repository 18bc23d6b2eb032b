//! Few-shot prototype evaluation and linear probing over frozen embeddings.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{derive_rng, STREAM_FEWSHOT};
use crate::tensor::{cosine, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub embedding: Vec<f64>,
    pub label: String,
}

/// Labeled examples partitioned by split.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledSplits {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotTask {
    pub ways: usize,
    pub shots: usize,
    /// Class order used for prediction indices (ascending label).
    pub classes: Vec<String>,
    pub support: Vec<Example>,
    pub query: Vec<Example>,
}

pub const DEFAULT_NUM_TASKS: usize = 500;
pub const DEFAULT_SHOTS: usize = 3;
pub const DEFAULT_MAX_QUERIES: usize = 50;

fn group_by_label(xs: &[Example]) -> BTreeMap<&str, Vec<usize>> {
    let mut m: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in xs.iter().enumerate() {
        m.entry(e.label.as_str()).or_default().push(i);
    }
    m
}

/// Seeded N-way K-shot tasks: support from `train`, queries from `test`
/// (all test examples of the sampled classes, shuffled, capped at `max_queries`).
pub fn sample_fewshot_tasks(
    data: &LabeledSplits,
    ways: usize,
    shots: usize,
    num_tasks: usize,
    max_queries: usize,
    seed: u64,
) -> Result<Vec<FewShotTask>> {
    if ways == 0 || shots == 0 || max_queries == 0 {
        return Err(Error::InvalidParameter("ways, shots and max_queries must be >= 1".into()));
    }
    let train = group_by_label(&data.train);
    let test = group_by_label(&data.test);
    let eligible: Vec<&str> = train
        .iter()
        .filter(|(c, ids)| ids.len() >= shots && test.contains_key(*c))
        .map(|(c, _)| *c)
        .collect();
    if eligible.len() < ways {
        return Err(Error::InsufficientExamples(format!(
            "{ways}-way {shots}-shot needs {ways} classes with >= {shots} train and >= 1 test examples; found {}",
            eligible.len()
        )));
    }
    let mut tasks = Vec::with_capacity(num_tasks);
    for t in 0..num_tasks {
        let mut rng = derive_rng(seed, STREAM_FEWSHOT, t as u64);
        let mut classes: Vec<&str> = eligible.choose_multiple(&mut rng, ways).copied().collect();
        classes.sort_unstable();
        let mut support = Vec::with_capacity(ways * shots);
        let mut pool = Vec::new();
        for c in &classes {
            let mut picks: Vec<usize> = train[c].choose_multiple(&mut rng, shots).copied().collect();
            picks.sort_unstable();
            support.extend(picks.into_iter().map(|i| data.train[i].clone()));
            pool.extend(test[c].iter().copied());
        }
        pool.sort_unstable();
        pool.shuffle(&mut rng);
        pool.truncate(max_queries);
        tasks.push(FewShotTask {
            ways,
            shots,
            classes: classes.iter().map(|c| c.to_string()).collect(),
            support,
            query: pool.into_iter().map(|i| data.test[i].clone()).collect(),
        });
    }
    Ok(tasks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub predictions: Vec<String>,
    pub accuracy: f64,
    /// Query/prototype pairs whose cosine was undefined.
    pub zero_norm_pairs: usize,
}

/// Class-mean prototypes, argmax cosine, ties to the lowest class index.
pub fn prototype_classify(task: &FewShotTask) -> Result<Classification> {
    let dim = task
        .support
        .first()
        .map(|e| e.embedding.len())
        .ok_or_else(|| Error::InsufficientExamples("empty support set".into()))?;
    let mut protos = vec![vec![0.0; dim]; task.classes.len()];
    let mut counts = vec![0usize; task.classes.len()];
    for e in &task.support {
        let c = task
            .classes
            .iter()
            .position(|c| *c == e.label)
            .ok_or_else(|| Error::InvalidParameter(format!("support label {} not in task classes", e.label)))?;
        if e.embedding.len() != dim {
            return Err(Error::ShapeMismatch("support embeddings differ in width".into()));
        }
        for (p, x) in protos[c].iter_mut().zip(&e.embedding) {
            *p += x;
        }
        counts[c] += 1;
    }
    for (p, &n) in protos.iter_mut().zip(&counts) {
        if n == 0 {
            return Err(Error::InsufficientExamples("class without support examples".into()));
        }
        for x in p.iter_mut() {
            *x /= n as f64;
        }
    }
    let mut predictions = Vec::with_capacity(task.query.len());
    let mut correct = 0usize;
    let mut zero_norm_pairs = 0;
    for q in &task.query {
        if q.embedding.len() != dim {
            return Err(Error::ShapeMismatch("query width differs from support".into()));
        }
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (c, p) in protos.iter().enumerate() {
            let s = match cosine(&q.embedding, p) {
                Some(s) => s,
                None => {
                    zero_norm_pairs += 1;
                    f64::NEG_INFINITY
                }
            };
            if s > best.0 {
                best = (s, c);
            }
        }
        let pred = &task.classes[best.1];
        if *pred == q.label {
            correct += 1;
        }
        predictions.push(pred.clone());
    }
    if zero_norm_pairs > 0 {
        log::warn!("prototype classification: {zero_norm_pairs} zero-norm pair(s) scored as -inf");
    }
    let accuracy = if task.query.is_empty() {
        0.0
    } else {
        correct as f64 / task.query.len() as f64
    };
    Ok(Classification {
        predictions,
        accuracy,
        zero_norm_pairs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotReport {
    pub mean: f64,
    pub std: f64,
    #[serde(rename = "N")]
    pub ways: usize,
    #[serde(rename = "K")]
    pub shots: usize,
    pub num_tasks: usize,
}

/// Mean and sample standard deviation of per-task accuracies.
pub fn summarize_accuracies(accs: &[f64], ways: usize, shots: usize) -> Result<FewShotReport> {
    if accs.is_empty() {
        return Err(Error::InsufficientExamples("no tasks to report".into()));
    }
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let std = if accs.len() < 2 {
        0.0
    } else {
        (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(FewShotReport {
        mean,
        std,
        ways,
        shots,
        num_tasks: accs.len(),
    })
}

pub fn fewshot_report(tasks: &[FewShotTask]) -> Result<FewShotReport> {
    let first = tasks
        .first()
        .ok_or_else(|| Error::InsufficientExamples("no tasks to report".into()))?;
    let accs = tasks
        .iter()
        .map(|t| prototype_classify(t).map(|c| c.accuracy))
        .collect::<Result<Vec<_>>>()?;
    summarize_accuracies(&accs, first.ways, first.shots)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Validation checks without improvement before stopping.
    pub patience: usize,
    pub eval_every: usize,
    pub bias: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            epochs: 5000,
            patience: 200,
            eval_every: 10,
            bias: true,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.epochs == 0 || self.patience == 0 || self.eval_every == 0 {
            return Err(Error::InvalidParameter("probe lr, epochs, patience and eval_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub test_accuracy: f64,
    pub valid_accuracy: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub classes: Vec<String>,
    /// `d × |classes|`, row-major.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    /// Training cross-entropy after each epoch.
    pub train_loss: Vec<f64>,
}

struct Design {
    x: Matrix,
    y: Vec<usize>,
}

fn design(xs: &[Example], classes: &[String], dim: usize) -> Result<Design> {
    let mut data = Vec::with_capacity(xs.len() * dim);
    let mut y = Vec::with_capacity(xs.len());
    for e in xs {
        if e.embedding.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "embedding width {} != {dim}",
                e.embedding.len()
            )));
        }
        data.extend_from_slice(&e.embedding);
        y.push(classes.binary_search(&e.label).map_err(|_| {
            Error::InvalidParameter(format!("label {} absent from training classes", e.label))
        })?);
    }
    Ok(Design {
        x: Matrix::from_vec(xs.len(), dim, data),
        y,
    })
}

fn logits(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    let mut z = x.matmul(w);
    for r in 0..z.rows() {
        for (v, bv) in z.row_mut(r).iter_mut().zip(b) {
            *v += bv;
        }
    }
    z
}

fn accuracy(d: &Design, w: &Matrix, b: &[f64]) -> f64 {
    if d.y.is_empty() {
        return 0.0;
    }
    let z = logits(&d.x, w, b);
    let correct = (0..z.rows())
        .filter(|&r| {
            let row = z.row(r);
            let arg = (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best });
            arg == d.y[r]
        })
        .count();
    correct as f64 / d.y.len() as f64
}

/// Softmax regression trained full-batch with Adam; returns the test accuracy
/// at the best validation check (strict improvements only).
pub fn linear_probe(data: &LabeledSplits, cfg: &ProbeConfig) -> Result<ProbeResult> {
    cfg.validate()?;
    let dim = data
        .train
        .first()
        .map(|e| e.embedding.len())
        .ok_or_else(|| Error::InsufficientExamples("empty training split".into()))?;
    let classes: Vec<String> = data
        .train
        .iter()
        .map(|e| e.label.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if classes.len() < 2 {
        return Err(Error::InsufficientExamples("linear probe needs >= 2 classes".into()));
    }
    let keep_known = |xs: &[Example]| -> Vec<Example> {
        xs.iter().filter(|e| classes.binary_search(&e.label).is_ok()).cloned().collect()
    };
    let train = design(&data.train, &classes, dim)?;
    let valid = design(&keep_known(&data.valid), &classes, dim)?;
    let test = design(&keep_known(&data.test), &classes, dim)?;
    let select = if valid.y.is_empty() { &train } else { &valid };

    let c = classes.len();
    let n = train.y.len() as f64;
    let mut w = Matrix::zeros(dim, c);
    let mut b = vec![0.0; c];
    let (mut mw, mut vw) = (Matrix::zeros(dim, c), Matrix::zeros(dim, c));
    let (mut mb, mut vb) = (vec![0.0; c], vec![0.0; c]);
    let (b1, b2, eps) = (crate::optim::BETA1, crate::optim::BETA2, crate::optim::EPS);

    let mut best = (f64::NEG_INFINITY, 0usize, 0.0, w.clone(), b.clone());
    let mut since_best = 0usize;
    let mut train_loss = Vec::new();
    let mut epochs_run = 0;
    for epoch in 1..=cfg.epochs {
        epochs_run = epoch;
        // softmax gradient: (P - Y) / n
        let mut p = logits(&train.x, &w, &b);
        let mut loss = 0.0;
        for r in 0..p.rows() {
            let row = p.row_mut(r);
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let s: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            loss += mx + s.ln() - row[train.y[r]];
            for v in row.iter_mut() {
                *v = (*v - mx).exp() / s;
            }
            row[train.y[r]] -= 1.0;
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        train_loss.push(loss / n);
        let gw = train.x.matmul_at(&p);
        let gb = p.sum_rows();
        let t = epoch as i32;
        let (bc1, bc2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let adam = |x: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *x -= cfg.lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
        };
        for i in 0..gw.data().len() {
            adam(&mut w.data_mut()[i], &mut mw.data_mut()[i], &mut vw.data_mut()[i], gw.data()[i]);
        }
        if cfg.bias {
            for k in 0..c {
                adam(&mut b[k], &mut mb[k], &mut vb[k], gb.data()[k]);
            }
        }
        if epoch % cfg.eval_every == 0 {
            let acc = accuracy(select, &w, &b);
            if acc > best.0 {
                best = (acc, epoch, accuracy(&test, &w, &b), w.clone(), b.clone());
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
    }
    if best.0 == f64::NEG_INFINITY {
        best = (accuracy(select, &w, &b), epochs_run, accuracy(&test, &w, &b), w, b);
    }
    Ok(ProbeResult {
        test_accuracy: best.2,
        valid_accuracy: best.0,
        best_epoch: best.1,
        epochs_run,
        classes,
        weights: best.3,
        bias: best.4,
        train_loss,
    })
}
