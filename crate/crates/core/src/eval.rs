//! Retrieval evaluation and feature diagnostics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, ModelParams};
use crate::error::{Error, Result};
use crate::numeric::{argmax, squared_distance, Vec64};
use crate::synth::{Condition, Dataset, NoiseFlag};

/// A feature with the metadata retrieval needs.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub feature: Vec64,
    pub id: usize,
    pub view: usize,
    pub condition: Condition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRow {
    pub condition: Condition,
    /// Rank-1 percentage per probe view, aligned with [`EvalReport::views`];
    /// `None` when the condition has no probe in that view.
    pub cells: Vec<Option<f64>>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub views: Vec<usize>,
    pub rows: Vec<ConditionRow>,
    /// Mean over every populated cell.
    pub overall_mean: f64,
    pub gallery_size: usize,
    pub probe_size: usize,
    pub exclude_same_view: bool,
}

impl EvalReport {
    pub fn row(&self, condition: Condition) -> Option<&ConditionRow> {
        self.rows.iter().find(|r| r.condition == condition)
    }

    pub fn condition_mean(&self, condition: Condition) -> Option<f64> {
        self.row(condition).map(|r| r.mean)
    }

    /// Rows are probe conditions, columns are probe views plus `Mean`. A
    /// trailing comment line carries the config hash.
    pub fn to_csv(&self, config_hash: &str) -> String {
        let mut out = String::from("Probe");
        for v in &self.views {
            let _ = write!(out, ",view{v}");
        }
        out.push_str(",Mean\n");
        for row in &self.rows {
            out.push_str(row.condition.as_str());
            for c in &row.cells {
                match c {
                    Some(x) => {
                        let _ = write!(out, ",{x:.2}");
                    }
                    None => out.push(','),
                }
            }
            let _ = writeln!(out, ",{:.2}", row.mean);
        }
        let _ = writeln!(out, "# config_hash={config_hash}");
        out
    }
}

/// Nearest-neighbour rank-1 accuracy with Euclidean distance. Ties go to
/// the lowest gallery index.
pub fn rank1(gallery: &[EvalItem], probe: &[EvalItem], exclude_same_view: bool) -> Result<EvalReport> {
    if gallery.is_empty() || probe.is_empty() {
        return Err(Error::invalid("rank-1 needs a nonempty gallery and probe set"));
    }
    let dim = gallery[0].feature.len();
    if gallery.iter().chain(probe).any(|g| g.feature.len() != dim) {
        return Err(Error::invalid("gallery and probe features differ in dimension"));
    }
    let mut views: Vec<usize> = probe.iter().map(|p| p.view).collect();
    views.sort_unstable();
    views.dedup();
    let mut conditions: Vec<Condition> = probe.iter().map(|p| p.condition).collect();
    conditions.sort_unstable();
    conditions.dedup();

    // (hits, total) per (condition, view)
    let mut tally = vec![vec![(0usize, 0usize); views.len()]; conditions.len()];
    for (pi, p) in probe.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for (gi, g) in gallery.iter().enumerate() {
            if exclude_same_view && g.view == p.view {
                continue;
            }
            let d = squared_distance(&p.feature, &g.feature);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, gi));
            }
        }
        let (_, gi) = best.ok_or_else(|| {
            Error::Structural(format!(
                "probe {pi} (id {}, view {}) has no admissible gallery entry",
                p.id, p.view
            ))
        })?;
        let ci = conditions.binary_search(&p.condition).expect("condition listed");
        let vi = views.binary_search(&p.view).expect("view listed");
        let cell = &mut tally[ci][vi];
        cell.1 += 1;
        if gallery[gi].id == p.id {
            cell.0 += 1;
        }
    }

    let mut all_cells = Vec::new();
    let rows = conditions
        .iter()
        .zip(&tally)
        .map(|(&condition, counts)| {
            let cells: Vec<Option<f64>> = counts
                .iter()
                .map(|&(h, t)| (t > 0).then(|| 100.0 * h as f64 / t as f64))
                .collect();
            let present: Vec<f64> = cells.iter().flatten().copied().collect();
            all_cells.extend_from_slice(&present);
            ConditionRow {
                condition,
                mean: present.iter().sum::<f64>() / present.len() as f64,
                cells,
            }
        })
        .collect();
    Ok(EvalReport {
        views,
        rows,
        overall_mean: all_cells.iter().sum::<f64>() / all_cells.len() as f64,
        gallery_size: gallery.len(),
        probe_size: probe.len(),
        exclude_same_view,
    })
}

/// Embeddings `z` of every sample, computed on the raw frames.
pub fn embed<E: Encoder>(encoder: &E, params: &ModelParams, data: &Dataset) -> Result<Vec<Vec64>> {
    data.samples
        .iter()
        .map(|s| encoder.infer(params, &s.frames).map(|o| o.z))
        .collect()
}

/// Splits a test set into gallery (the first `nm_gallery_groups` NM groups
/// of every identity) and probes (everything else).
pub fn gallery_probe_split(data: &Dataset, features: &[Vec64], nm_gallery_groups: usize) -> (Vec<EvalItem>, Vec<EvalItem>) {
    let mut gallery = Vec::new();
    let mut probe = Vec::new();
    for (s, f) in data.samples.iter().zip(features) {
        let item = EvalItem {
            feature: f.clone(),
            id: s.id,
            view: s.view,
            condition: s.condition,
        };
        if s.condition == Condition::NM && s.group < nm_gallery_groups {
            gallery.push(item);
        } else {
            probe.push(item);
        }
    }
    (gallery, probe)
}

/// Embeds `data` with `params` and runs the gallery/probe protocol.
pub fn evaluate<E: Encoder>(
    encoder: &E,
    params: &ModelParams,
    data: &Dataset,
    nm_gallery_groups: usize,
    exclude_same_view: bool,
) -> Result<EvalReport> {
    if encoder.shape().d_in != data.samples.first().map_or(0, |s| s.frames[0].len()) {
        return Err(Error::invalid("dataset frame dimension does not match the encoder"));
    }
    let features = embed(encoder, params, data)?;
    let (gallery, probe) = gallery_probe_split(data, &features, nm_gallery_groups);
    rank1(&gallery, &probe, exclude_same_view)
}

/// Trace-of-covariance feature spread (biased estimator).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceStats {
    /// Mean over classes of the within-class variance.
    pub intra: f64,
    pub intra_nm_bg: f64,
    pub intra_cl: f64,
    /// Variance of all features about the global mean.
    pub total: f64,
}

impl VarianceStats {
    pub fn to_csv(&self, config_hash: &str) -> String {
        format!(
            "intra,intra_nm_bg,intra_cl,total\n{},{},{},{}\n# config_hash={config_hash}\n",
            self.intra, self.intra_nm_bg, self.intra_cl, self.total
        )
    }
}

fn spread(points: &[&Vec64]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, x) in mean.iter_mut().zip(p.iter()) {
            *m += x;
        }
    }
    let inv = 1.0 / points.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    points.iter().map(|p| squared_distance(p, &mean)).sum::<f64>() * inv
}

fn mean_intra(features: &[Vec64], ids: &[usize], keep: impl Fn(usize) -> bool) -> f64 {
    let mut classes: std::collections::BTreeMap<usize, Vec<&Vec64>> = Default::default();
    for (i, (f, &id)) in features.iter().zip(ids).enumerate() {
        if keep(i) {
            classes.entry(id).or_default().push(f);
        }
    }
    if classes.is_empty() {
        return 0.0;
    }
    classes.values().map(|c| spread(c)).sum::<f64>() / classes.len() as f64
}

/// Within-class and total variance. A class with one sample contributes 0;
/// a condition subset with no samples reports 0.
pub fn variance_stats(features: &[Vec64], ids: &[usize], conditions: &[Condition]) -> Result<VarianceStats> {
    if features.is_empty() {
        return Err(Error::invalid("variance statistics need at least one feature"));
    }
    if ids.len() != features.len() || conditions.len() != features.len() {
        return Err(Error::invalid("features, ids and conditions differ in length"));
    }
    let all: Vec<&Vec64> = features.iter().collect();
    Ok(VarianceStats {
        intra: mean_intra(features, ids, |_| true),
        intra_nm_bg: mean_intra(features, ids, |i| conditions[i] != Condition::CL),
        intra_cl: mean_intra(features, ids, |i| conditions[i] == Condition::CL),
        total: spread(&all),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemPoint {
    pub iteration: usize,
    pub clean_acc: f64,
    /// `None` when the set has no noisy sample.
    pub noisy_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemCurve {
    pub points: Vec<MemPoint>,
}

impl MemCurve {
    /// First snapshot iteration at which the chosen curve reaches
    /// `fraction` of its final value.
    pub fn reach(&self, fraction: f64, noisy: bool) -> Option<usize> {
        let value = |p: &MemPoint| if noisy { p.noisy_acc } else { Some(p.clean_acc) };
        let last = value(self.points.last()?)?;
        self.points
            .iter()
            .find(|p| value(p).is_some_and(|v| v >= fraction * last))
            .map(|p| p.iteration)
    }

    pub fn to_csv(&self, config_hash: &str) -> String {
        let mut out = String::from("iteration,clean_acc,noisy_acc\n");
        for p in &self.points {
            let noisy = p.noisy_acc.map_or(String::new(), |v| v.to_string());
            let _ = writeln!(out, "{},{},{}", p.iteration, p.clean_acc, noisy);
        }
        let _ = writeln!(out, "# config_hash={config_hash}");
        out
    }
}

/// Training-set accuracy against the assigned labels, split by the
/// ground-truth noise flag, at every snapshot.
pub fn memorization_curve<E: Encoder>(
    encoder: &E,
    snapshots: &[(usize, ModelParams)],
    data: &Dataset,
) -> Result<MemCurve> {
    if snapshots.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(Error::invalid("snapshots must be strictly increasing in iteration"));
    }
    let mut points = Vec::with_capacity(snapshots.len());
    for (iteration, params) in snapshots {
        let (mut clean, mut clean_n, mut noisy, mut noisy_n) = (0usize, 0usize, 0usize, 0usize);
        for s in &data.samples {
            let hit = argmax(&encoder.infer(params, &s.frames)?.p) == s.id;
            if s.noise_flag == NoiseFlag::Clean {
                clean_n += 1;
                clean += usize::from(hit);
            } else {
                noisy_n += 1;
                noisy += usize::from(hit);
            }
        }
        points.push(MemPoint {
            iteration: *iteration,
            clean_acc: if clean_n == 0 { 0.0 } else { clean as f64 / clean_n as f64 },
            noisy_acc: (noisy_n > 0).then(|| noisy as f64 / noisy_n as f64),
        });
    }
    Ok(MemCurve { points })
}

/// Writes one row per sample: id, condition, view, then the feature.
pub fn features_csv(data: &Dataset, features: &[Vec64], config_hash: &str) -> String {
    let d = features.first().map_or(0, |f| f.len());
    let mut out = String::from("id,condition,view");
    for k in 0..d {
        let _ = write!(out, ",f{k}");
    }
    out.push('\n');
    for (s, f) in data.samples.iter().zip(features) {
        let _ = write!(out, "{},{},{}", s.id, s.condition.as_str(), s.view);
        for x in f {
            let _ = write!(out, ",{x}");
        }
        out.push('\n');
    }
    let _ = writeln!(out, "# config_hash={config_hash}");
    out
}
