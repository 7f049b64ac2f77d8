//! Model similarity, learning efficiency and entropy distributions.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{FedError, Result};
use crate::federation::RoundReport;
use crate::nn::{Layer, Model, Tensor2};
use crate::selection::entropy_scores;

/// Linear centred kernel alignment between two representations of the same
/// `n` samples:
///
/// `CKA = ||Yc' Xc||_F^2 / (||Xc' Xc||_F ||Yc' Yc||_F)`
///
/// with `Xc`, `Yc` the column-centred inputs. Returns `None` when either
/// input has (numerically) zero variance, where the score is undefined.
pub fn linear_cka(x: &Tensor2, y: &Tensor2) -> Result<Option<f64>> {
    if x.rows() != y.rows() {
        return Err(FedError::Shape(format!(
            "representations cover {} and {} samples",
            x.rows(),
            y.rows()
        )));
    }
    if x.rows() < 2 {
        return Err(FedError::Parameter("CKA needs at least two samples".into()));
    }
    let (Some(xc), Some(yc)) = (centered(x), centered(y)) else {
        return Ok(None);
    };
    let cross = frobenius_sq_of_product(&xc, &yc);
    let xx = frobenius_sq_of_product(&xc, &xc).sqrt();
    let yy = frobenius_sq_of_product(&yc, &yc).sqrt();
    if !(xx > 0.0 && yy > 0.0) {
        return Ok(None);
    }
    Ok(Some((cross / (xx * yy)).clamp(0.0, 1.0)))
}

/// Column-centred copy, or `None` if nothing is left after centring.
fn centered(t: &Tensor2) -> Option<Tensor2> {
    let (n, d) = (t.rows(), t.cols());
    let mut means = vec![0.0; d];
    for row in t.iter_rows() {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    let mut values = Vec::with_capacity(n * d);
    for row in t.iter_rows() {
        values.extend(row.iter().zip(&means).map(|(v, m)| v - m));
    }
    let scale: f64 = t.values().iter().map(|v| v * v).sum::<f64>().sqrt();
    let residual: f64 = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if residual <= 1e-12 * scale.max(f64::MIN_POSITIVE) || residual == 0.0 {
        return None;
    }
    Tensor2::new(n, d, values).ok()
}

/// `||A' B||_F^2` for row-aligned `A` (n x p) and `B` (n x q).
fn frobenius_sq_of_product(a: &Tensor2, b: &Tensor2) -> f64 {
    let (p, q) = (a.cols(), b.cols());
    let mut prod = vec![0.0; p * q];
    for (ra, rb) in a.iter_rows().zip(b.iter_rows()) {
        for (i, &av) in ra.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (acc, &bv) in prod[i * q..(i + 1) * q].iter_mut().zip(rb) {
                *acc += av * bv;
            }
        }
    }
    prod.iter().map(|v| v * v).sum()
}

/// Where in the network a representation is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerLevel {
    /// Output of the first hidden ReLU.
    Low,
    /// Output of the last hidden ReLU, the classifier's input.
    Mid,
    /// The logits.
    Up,
}

impl LayerLevel {
    pub const ALL: [LayerLevel; 3] = [LayerLevel::Low, LayerLevel::Mid, LayerLevel::Up];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerLevel::Low => "low",
            LayerLevel::Mid => "mid",
            LayerLevel::Up => "up",
        }
    }

    /// Index into [`crate::nn::ForwardPass::activations`].
    pub fn activation_index(self, model: &Model) -> usize {
        let relus: Vec<usize> = model
            .layers()
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Relu))
            .map(|(i, _)| i + 1)
            .collect();
        let logits = model.layers().len();
        match self {
            LayerLevel::Low => relus.first().copied().unwrap_or(logits),
            LayerLevel::Mid => relus.last().copied().unwrap_or(logits),
            LayerLevel::Up => logits,
        }
    }
}

impl fmt::Display for LayerLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerLevel {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self> {
        LayerLevel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| FedError::Parameter(format!("unknown layer level {s:?}")))
    }
}

/// Activations of one model at one level over a probe set.
#[derive(Debug, Clone)]
pub struct RepresentationProbe {
    pub layer_level: LayerLevel,
    pub activations: Tensor2,
}

pub fn probe(model: &Model, data: &Dataset, level: LayerLevel) -> Result<RepresentationProbe> {
    let all: Vec<usize> = (0..data.len()).collect();
    let (batch, _) = data.batch(&all);
    let mut pass = model.forward(&batch)?;
    let activations = pass.activations.swap_remove(level.activation_index(model));
    Ok(RepresentationProbe {
        layer_level: level,
        activations,
    })
}

/// Symmetric matrix of pairwise CKA scores; `None` marks undefined entries.
#[derive(Debug, Clone, PartialEq)]
pub struct CkaMatrix {
    pub layer_level: LayerLevel,
    pub size: usize,
    pub values: Vec<Option<f64>>,
}

impl CkaMatrix {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values[i * self.size + j]
    }

    /// Mean over defined off-diagonal entries.
    pub fn mean_off_diagonal(&self) -> Option<f64> {
        let vals: Vec<f64> = (0..self.size)
            .flat_map(|i| (0..self.size).filter(move |&j| j != i).map(move |j| (i, j)))
            .filter_map(|(i, j)| self.get(i, j))
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Header of column labels, then one labelled row per model.
    pub fn write_csv<W: Write>(&self, mut out: W, labels: &[String]) -> std::io::Result<()> {
        writeln!(out, ",{}", labels.join(","))?;
        for i in 0..self.size {
            let row: Vec<String> = (0..self.size)
                .map(|j| {
                    self.get(i, j)
                        .map_or_else(|| "NA".to_string(), |v| v.to_string())
                })
                .collect();
            let label = labels.get(i).map_or("", String::as_str);
            writeln!(out, "{label},{}", row.join(","))?;
        }
        Ok(())
    }
}

fn same_architecture(a: &Model, b: &Model) -> bool {
    a.layers().len() == b.layers().len()
        && a.layers()
            .iter()
            .zip(b.layers())
            .all(|(x, y)| match (x, y) {
                (Layer::Dense(p), Layer::Dense(q)) => {
                    p.inputs() == q.inputs() && p.outputs() == q.outputs()
                }
                (Layer::Relu, Layer::Relu) => true,
                _ => false,
            })
}

/// CKA between every pair of models on a shared probe set.
pub fn pairwise_cka(models: &[Model], probe_set: &Dataset, level: LayerLevel) -> Result<CkaMatrix> {
    if models.len() < 2 {
        return Err(FedError::Parameter(
            "pairwise CKA needs at least two models".into(),
        ));
    }
    if let Some(i) = models
        .iter()
        .position(|m| !same_architecture(m, &models[0]))
    {
        return Err(FedError::Parameter(format!(
            "model {i} has a different architecture"
        )));
    }
    let probes = models
        .iter()
        .map(|m| probe(m, probe_set, level).map(|p| p.activations))
        .collect::<Result<Vec<_>>>()?;
    let k = models.len();
    let mut values = vec![None; k * k];
    for i in 0..k {
        for j in i..k {
            let v = linear_cka(&probes[i], &probes[j])?;
            values[i * k + j] = v;
            values[j * k + i] = v;
        }
    }
    Ok(CkaMatrix {
        layer_level: level,
        size: k,
        values,
    })
}

/// Best test accuracy in percentage points per second of summed client
/// training time. `None` when there are no reports or no time was spent.
pub fn learning_efficiency(reports: &[RoundReport]) -> Option<f64> {
    let last = reports.last()?;
    let best = reports
        .iter()
        .map(|r| r.global_test_accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    let time = last.cumulative_client_train_time;
    (time > 0.0).then(|| 100.0 * best / time)
}

/// Learning efficiency from the raw quantities.
pub fn efficiency_from(best_accuracy: f64, total_time: f64) -> Option<f64> {
    (total_time > 0.0).then(|| 100.0 * best_accuracy / total_time)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyHistogram {
    /// `num_bins + 1` edges spanning `[0, ln num_classes]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl EntropyHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "bin_low,bin_high,count")?;
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(out, "{},{},{}", self.edges[i], self.edges[i + 1], c)?;
        }
        Ok(())
    }
}

/// Histogram of per-sample entropies under temperature `rho`.
pub fn entropy_histogram(
    model: &Model,
    data: &Dataset,
    rho: f64,
    num_bins: usize,
) -> Result<EntropyHistogram> {
    if num_bins < 2 {
        return Err(FedError::Parameter("need at least two bins".into()));
    }
    let top = (model.num_classes() as f64).ln();
    let edges: Vec<f64> = (0..=num_bins)
        .map(|i| top * i as f64 / num_bins as f64)
        .collect();
    let mut counts = vec![0; num_bins];
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(4096) {
        for s in entropy_scores(model, data, chunk, rho)? {
            let bin = if top > 0.0 {
                ((s.entropy / top) * num_bins as f64).floor() as usize
            } else {
                0
            };
            counts[bin.min(num_bins - 1)] += 1;
        }
    }
    Ok(EntropyHistogram { edges, counts })
}
