//! Evaluation metrics: symbol error rate, speaker similarity, prosody
//! correlation, linear speaker probes and paired significance tests.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ssvc_autodiff::{AdamW, AdamWConfig, Graph, ParamStore, Tensor};

use crate::error::{invalid, Error, Result};
use crate::synth::{CorpusTables, FeatureSequence, ProsodyContour, SpeakerParams};

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

/// Edit distance normalized by the reference length.
pub fn edit_distance_rate<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        if hyp.is_empty() {
            return Ok(0.0);
        }
        return Err(invalid("empty reference with non-empty hypothesis"));
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

/// Symbol error rate of oracle-transcribed system output.
pub fn wer_analog(
    tables: &CorpusTables,
    output: &FeatureSequence,
    target_content: &[usize],
    speaker: &SpeakerParams,
) -> Result<f64> {
    let r = tables.dims.frames_per_symbol;
    let whole = output.len() - output.len() % r;
    let hyp = if whole == 0 {
        Vec::new()
    } else {
        tables.oracle_decode_content(&output.slice(0, whole), speaker)?
    };
    edit_distance_rate(&hyp, target_content)
}

pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return Err(Error::Degenerate("zero-norm speaker vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Speaker-embedding cosine similarity using the oracle speaker estimator.
pub fn secs(tables: &CorpusTables, a: &FeatureSequence, b: &FeatureSequence) -> Result<f64> {
    let ea = tables.oracle_speaker_estimate(a)?;
    let eb = tables.oracle_speaker_estimate(b)?;
    cosine(&ea, &eb)
}

/// Sample Pearson correlation.
pub fn f0_correlation(a: &ProsodyContour, b: &ProsodyContour) -> Result<f64> {
    pearson(&a.0, &b.0)
}

pub fn pearson(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(invalid(format!("contours of length {} and {}", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let ma = a.iter().map(|v| *v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|v| *v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (*x as f64 - ma, *y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 1e-18 || sbb <= 1e-18 {
        return Err(Error::Degenerate("constant contour has undefined correlation".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f32,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { steps: 500, lr: 0.05 }
    }
}

/// Trains multinomial logistic regression on `train` rows and returns the
/// accuracy on `eval` rows. Inputs are standardized with training
/// statistics.
pub fn speaker_probe(
    inputs: &[Vec<f32>],
    labels: &[usize],
    train: &[usize],
    eval: &[usize],
    config: &ProbeConfig,
) -> Result<f64> {
    if inputs.len() != labels.len() || inputs.is_empty() {
        return Err(invalid("probe inputs and labels differ in length"));
    }
    let train_set: BTreeSet<usize> = train.iter().copied().collect();
    if eval.iter().any(|i| train_set.contains(i)) {
        return Err(invalid("probe train and eval splits overlap"));
    }
    if eval.is_empty() || train.is_empty() {
        return Err(invalid("probe split is empty"));
    }
    let classes: BTreeSet<usize> = labels.iter().copied().collect();
    if classes.len() < 2 {
        return Err(invalid("probe needs at least two classes"));
    }
    let class_index: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let n_classes = classes.len();
    let dim = inputs[0].len();

    let mut mean = vec![0.0f64; dim];
    for &i in train {
        for (m, v) in mean.iter_mut().zip(&inputs[i]) {
            *m += *v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    let mut std = vec![0.0f64; dim];
    for &i in train {
        for ((s, v), m) in std.iter_mut().zip(&inputs[i]).zip(&mean) {
            *s += (*v as f64 - m).powi(2);
        }
    }
    std.iter_mut().for_each(|s| *s = (*s / train.len() as f64).sqrt().max(1e-6));
    let standardize = |rows: &[usize]| -> Tensor {
        let data = rows
            .iter()
            .flat_map(|&i| {
                inputs[i]
                    .iter()
                    .zip(&mean)
                    .zip(&std)
                    .map(|((v, m), s)| ((*v as f64 - m) / s) as f32)
            })
            .collect();
        Tensor::matrix(rows.len(), dim, data).unwrap()
    };
    let x_train = standardize(train);
    let y_train: Vec<usize> = train.iter().map(|&i| class_index[&labels[i]]).collect();

    let mut store = ParamStore::new();
    let w = store.add("probe.w", Tensor::zeros(&[dim, n_classes]))?;
    let b = store.add("probe.b", Tensor::zeros(&[n_classes]))?;
    let cfg = AdamWConfig {
        lr: config.lr,
        beta1: 0.9,
        beta2: 0.999,
        weight_decay: 0.0,
        eps: 1e-8,
    };
    let mut opt = AdamW::new(cfg, &store, vec![w, b]);
    for _ in 0..config.steps {
        let mut g = Graph::new();
        let x = g.constant(x_train.clone());
        let (wv, bv) = (g.param(&store, w), g.param(&store, b));
        let logits = g.matmul(x, wv)?;
        let logits = g.add_row(logits, bv)?;
        let loss = g.cross_entropy_logits(logits, &y_train)?;
        let grads = g.backward(loss)?.for_params(&store);
        opt.step(&mut store, &grads)?;
    }

    let x_eval = standardize(eval);
    let mut g = Graph::new();
    let x = g.constant(x_eval);
    let (wv, bv) = (g.constant(store.get(w).clone()), g.constant(store.get(b).clone()));
    let logits = g.matmul(x, wv)?;
    let logits = g.add_row(logits, bv)?;
    let lv = g.value(logits);
    let correct = eval
        .iter()
        .enumerate()
        .filter(|(r, &i)| {
            let row = lv.row(*r);
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |acc, (c, v)| if *v > acc.1 { (c, *v) } else { acc })
                .0;
            pred == class_index[&labels[i]]
        })
        .count();
    Ok(correct as f64 / eval.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
    pub mean_diff: f64,
}

/// Two-sided paired t-test with `n − 1` degrees of freedom.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(invalid(format!("paired samples of length {} and {}", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 {
        return Err(Error::ZeroVariance { mean_diff: mean });
    }
    let t = mean / (var / n).sqrt();
    let df = n - 1.0;
    // P(|T| > t) = I_{df/(df+t²)}(df/2, 1/2)
    let p = statrs::function::beta::beta_reg(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0);
    Ok(TTest {
        t,
        p,
        df: a.len() - 1,
        mean_diff: mean,
    })
}

/// Outcome of comparing two systems' paired scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Comparison {
    Tested(TTest),
    /// Every paired difference is identical; with a zero mean the systems are
    /// indistinguishable (`t = 0`, `p = 1`).
    NoDifference { mean_diff: f64 },
}

pub fn compare_systems(a: &[f64], b: &[f64]) -> Result<Comparison> {
    match paired_ttest(a, b) {
        Ok(t) => Ok(Comparison::Tested(t)),
        Err(Error::ZeroVariance { mean_diff }) => Ok(Comparison::NoDifference { mean_diff }),
        Err(e) => Err(e),
    }
}

/// Listening-test scores aligned by `(tester, item)` across systems.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub systems: Vec<String>,
    pub keys: Vec<(String, String)>,
    /// `scores[s][k]` is system `s`'s score for key `k`.
    pub scores: Vec<Vec<f64>>,
}

impl ScoreTable {
    pub fn system(&self, name: &str) -> Option<&[f64]> {
        self.systems.iter().position(|s| s == name).map(|i| self.scores[i].as_slice())
    }
}

/// Reads a `tester,system,item,score` CSV. Row numbers in errors are file
/// line numbers (header is line 1).
pub fn mushra_ingest(path: &Path) -> Result<ScoreTable> {
    let reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Csv { row: 0, message: e.to_string() })?;
    mushra_from_reader(reader)
}

pub fn mushra_from_str(text: &str) -> Result<ScoreTable> {
    let reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    mushra_from_reader(reader)
}

fn mushra_from_reader<R: std::io::Read>(mut reader: csv::Reader<R>) -> Result<ScoreTable> {
    let header = reader
        .headers()
        .map_err(|e| Error::Csv { row: 1, message: e.to_string() })?
        .clone();
    let expected = ["tester", "system", "item", "score"];
    if header.len() != 4 || header.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::Csv {
            row: 1,
            message: format!("expected header tester,system,item,score, got {:?}", header.iter().collect::<Vec<_>>()),
        });
    }
    // system -> key -> (score, row)
    let mut by_system: BTreeMap<String, BTreeMap<(String, String), (f64, usize)>> = BTreeMap::new();
    let mut system_order: Vec<String> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Csv { row, message: e.to_string() })?;
        if rec.len() != 4 {
            return Err(Error::Csv { row, message: format!("expected 4 fields, got {}", rec.len()) });
        }
        let score: f64 = rec[3]
            .parse()
            .map_err(|_| Error::Csv { row, message: format!("score {:?} is not a number", &rec[3]) })?;
        if !(0.0..=100.0).contains(&score) {
            return Err(Error::Csv { row, message: format!("score {score} outside [0, 100]") });
        }
        let system = rec[1].to_string();
        if !by_system.contains_key(&system) {
            system_order.push(system.clone());
        }
        let key = (rec[0].to_string(), rec[2].to_string());
        let slot = by_system.entry(system).or_default();
        if let Some((_, first)) = slot.get(&key) {
            return Err(Error::Csv {
                row,
                message: format!("duplicate tester/system/item (first seen on row {first})"),
            });
        }
        slot.insert(key, (score, row));
    }
    if system_order.is_empty() {
        return Err(Error::Csv { row: 1, message: "no scores".into() });
    }
    let all_keys: BTreeSet<(String, String)> = by_system.values().flat_map(|m| m.keys().cloned()).collect();
    for system in &system_order {
        let m = &by_system[system];
        if let Some(missing) = all_keys.iter().find(|k| !m.contains_key(*k)) {
            // point at a row that exists for the missing key in another system
            let row = by_system.values().find_map(|o| o.get(missing).map(|(_, r)| *r)).unwrap_or(0);
            return Err(Error::Csv {
                row,
                message: format!(
                    "incomplete block: system {system} has no score for tester {} item {}",
                    missing.0, missing.1
                ),
            });
        }
    }
    let keys: Vec<(String, String)> = all_keys.into_iter().collect();
    let scores = system_order
        .iter()
        .map(|s| keys.iter().map(|k| by_system[s][k].0).collect())
        .collect();
    Ok(ScoreTable {
        systems: system_order,
        keys,
        scores,
    })
}
