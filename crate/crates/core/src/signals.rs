//! Class-indicator signals over a batch and the smoothness bookkeeping built
//! on them.

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{self, GraphOptions};
use crate::matrix::{format_sig17, Matrix};

/// One binary indicator vector per class present in a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSignalSet {
    batch_size: usize,
    signals: BTreeMap<usize, Vec<f64>>,
}

impl LabelSignalSet {
    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Class ids present in the batch, ascending.
    pub fn classes_present(&self) -> Vec<usize> {
        self.signals.keys().copied().collect()
    }

    pub fn signal(&self, class: usize) -> Option<&[f64]> {
        self.signals.get(&class).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.signals.iter().map(|(&c, s)| (c, s.as_slice()))
    }

    /// `Σ_c s_c s_c^T`: 1 where two examples share a label, else 0.
    pub fn same_class_matrix(&self) -> Matrix {
        let b = self.batch_size;
        let mut y = Matrix::zeros(b, b);
        for s in self.signals.values() {
            for i in (0..b).filter(|&i| s[i] != 0.0) {
                for j in (0..b).filter(|&j| s[j] != 0.0) {
                    y[(i, j)] = 1.0;
                }
            }
        }
        y
    }
}

pub fn make_label_signals(labels: &[usize], num_classes: usize) -> Result<LabelSignalSet> {
    let b = labels.len();
    let mut signals = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        if c >= num_classes {
            return Err(Error::Parameter(format!("label {c} at position {i} outside [0, {num_classes})")));
        }
        signals.entry(c).or_insert_with(|| vec![0.0; b])[i] = 1.0;
    }
    Ok(LabelSignalSet { batch_size: b, signals })
}

/// `Σ_c s_c^T P s_c` over the classes present.
pub fn layer_smoothness_sum(graph_power: &Matrix, signals: &LabelSignalSet) -> Result<f64> {
    per_class_smoothness(graph_power, signals).map(|v| v.iter().map(|(_, s)| s).sum())
}

pub fn per_class_smoothness(graph_power: &Matrix, signals: &LabelSignalSet) -> Result<Vec<(usize, f64)>> {
    if graph_power.rows() != signals.batch_size() {
        return Err(Error::Shape(format!(
            "{}-node graph for a batch of {}",
            graph_power.rows(),
            signals.batch_size()
        )));
    }
    signals.iter().map(|(c, s)| Ok((c, graph::smoothness(graph_power, s)?))).collect()
}

pub fn smoothness_gap(sum_pre: f64, sum_post: f64) -> f64 {
    (sum_post - sum_pre).abs()
}

/// Mean of the absolute consecutive-layer gaps.
pub fn delta_total(gaps: &[f64]) -> Result<f64> {
    if gaps.is_empty() {
        return Err(Error::Config("at least two monitored layers are needed for a smoothness gap".into()));
    }
    Ok(gaps.iter().map(|g| g.abs()).sum::<f64>() / gaps.len() as f64)
}

/// Consecutive gaps `|t[l+1] - t[l]|` of a sequence of smoothness sums.
pub fn consecutive_gaps(sums: &[f64]) -> Vec<f64> {
    sums.windows(2).map(|w| smoothness_gap(w[0], w[1])).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSmoothness {
    pub layer_index: usize,
    pub per_class: Vec<(usize, f64)>,
    pub total: f64,
}

/// Label-signal smoothness at each monitored layer, in depth order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessProfile {
    pub power: u32,
    pub per_layer: Vec<LayerSmoothness>,
}

impl SmoothnessProfile {
    /// Profile of one batch. `layer_indices` names each representation.
    pub fn from_representations(
        representations: &[Matrix],
        layer_indices: &[usize],
        labels: &[usize],
        num_classes: usize,
        power: u32,
        opts: GraphOptions,
    ) -> Result<Self> {
        if representations.len() != layer_indices.len() {
            return Err(Error::Shape("one layer index per representation expected".into()));
        }
        let signals = make_label_signals(labels, num_classes)?;
        let mut per_layer = Vec::with_capacity(representations.len());
        for (rep, &layer_index) in representations.iter().zip(layer_indices) {
            if rep.rows() != labels.len() {
                return Err(Error::Shape(format!("{} representations for {} labels", rep.rows(), labels.len())));
            }
            let bg = graph::batch_graph(rep, opts)?;
            let lp = graph::laplacian_power_normalized(bg.graph.laplacian(), power)?;
            let per_class = per_class_smoothness(&lp.matrix, &signals)?;
            let total = per_class.iter().map(|(_, s)| s).sum();
            per_layer.push(LayerSmoothness { layer_index, per_class, total });
        }
        Ok(SmoothnessProfile { power, per_layer })
    }

    /// Entry-wise mean of profiles with identical layout. Classes missing from
    /// some profiles are averaged over the profiles that contain them.
    pub fn mean(profiles: &[SmoothnessProfile]) -> Result<Self> {
        let first = profiles.first().ok_or_else(|| Error::Parameter("no profiles to average".into()))?;
        let mut per_layer = Vec::with_capacity(first.per_layer.len());
        for (l, layer) in first.per_layer.iter().enumerate() {
            let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
            let mut total = 0.0;
            for p in profiles {
                let other = p
                    .per_layer
                    .get(l)
                    .filter(|o| o.layer_index == layer.layer_index && p.power == first.power)
                    .ok_or_else(|| Error::Shape("profiles do not share a layout".into()))?;
                for &(c, v) in &other.per_class {
                    let e = sums.entry(c).or_insert((0.0, 0));
                    e.0 += v;
                    e.1 += 1;
                }
                total += other.total;
            }
            per_layer.push(LayerSmoothness {
                layer_index: layer.layer_index,
                per_class: sums.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect(),
                total: total / profiles.len() as f64,
            });
        }
        Ok(SmoothnessProfile { power: first.power, per_layer })
    }

    pub fn totals(&self) -> Vec<f64> {
        self.per_layer.iter().map(|l| l.total).collect()
    }

    /// Mean absolute change of the summed smoothness between consecutive layers.
    pub fn mean_gap(&self) -> Result<f64> {
        delta_total(&consecutive_gaps(&self.totals()))
    }

    pub fn csv_header() -> &'static str {
        "epoch,layer_index,power_m,class_id,smoothness"
    }

    /// Appends rows `epoch,layer_index,power_m,class_id,smoothness` (no header).
    pub fn write_csv_rows<W: Write>(&self, epoch: usize, mut w: W) -> io::Result<()> {
        for layer in &self.per_layer {
            for &(c, v) in &layer.per_class {
                writeln!(w, "{epoch},{},{},{c},{}", layer.layer_index, self.power, format_sig17(v))?;
            }
        }
        Ok(())
    }
}
