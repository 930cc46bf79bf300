//! Representation-similarity analysis: linear CKA between the features each
//! upstream adapter produces and the features of a ground-truth adapter
//! trained directly on the downstream task, plus exportable heatmaps of the
//! learned composition weights for side-by-side comparison.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::compose::CompositionWeights;
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::lora::{AdapterSet, SiteId};
use crate::math::{softmax, Matrix};
use crate::model::{forward, BaseModel, ClassifierHead, Overlay};

/// Linear CKA between two feature matrices with the same sample count:
/// `||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F)`, a value in [0, 1] by
/// Cauchy-Schwarz on the Gram matrices.
///
/// `center` subtracts each column's mean first (the standard preprocessing
/// for linear CKA); pass `false` to evaluate the raw formula.
pub fn linear_cka(x: &Matrix, y: &Matrix, center: bool) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::shape(
            "linear_cka",
            format!("{} samples", x.rows()),
            format!("{} samples", y.rows()),
        ));
    }
    if x.rows() < 2 {
        return Err(Error::Argument(
            "linear_cka needs at least two samples".into(),
        ));
    }
    let xc = if center { center_columns(x) } else { x.clone() };
    let yc = if center { center_columns(y) } else { y.clone() };

    let xtx = xc.transpose().matmul(&xc)?;
    let yty = yc.transpose().matmul(&yc)?;
    let ytx = yc.transpose().matmul(&xc)?;

    let denom = xtx.frob_norm() * yty.frob_norm();
    if denom == 0.0 {
        return Err(Error::Degenerate(
            "linear_cka on an all-zero feature matrix".into(),
        ));
    }
    Ok(ytx.frob_norm().powi(2) / denom)
}

fn center_columns(m: &Matrix) -> Matrix {
    let rows = m.rows() as f64;
    let mut means = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (mean, &v) in means.iter_mut().zip(m.row(i)) {
            *mean += v;
        }
    }
    means.iter_mut().for_each(|mean| *mean /= rows);
    Matrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) - means[j])
}

/// Token-mean projection outputs of one site over a probe set: one row per
/// probe sample, `d_model` columns.
pub fn collect_features(
    base: &BaseModel,
    overlay: Overlay<'_>,
    probe: &[Vec<f64>],
    site: SiteId,
) -> Result<Matrix> {
    if probe.is_empty() {
        return Err(Error::Argument("feature probe set is empty".into()));
    }
    if site.block >= base.config.blocks {
        return Err(Error::Argument(format!("unknown site {site}")));
    }
    let head = ClassifierHead::zeros(base.config.d_model, 1);
    let (_, cache) = forward(base, &head, overlay, probe)?;
    let mut rows = Vec::with_capacity(probe.len());
    for i in 0..probe.len() {
        rows.push(cache.site_projection_mean(i, site)?);
    }
    let d = base.config.d_model;
    Matrix::from_vec(probe.len(), d, rows.into_iter().flatten().collect())
}

/// A site x upstream grid of values in [0, 1] whose rows sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatGrid {
    pub sites: Vec<SiteId>,
    pub upstream: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub normalization: String,
}

impl HeatGrid {
    pub fn argmax_per_site(&self) -> Vec<usize> {
        self.values
            .iter()
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    /// Fraction of sites where both grids pick the same upstream.
    pub fn alignment_fraction(&self, other: &HeatGrid) -> Result<f64> {
        if self.sites != other.sites || self.upstream != other.upstream {
            return Err(Error::Argument(
                "heat grids cover different sites or upstream tasks".into(),
            ));
        }
        let a = self.argmax_per_site();
        let b = other.argmax_per_site();
        let agree = a.iter().zip(&b).filter(|(x, y)| x == y).count();
        Ok(agree as f64 / a.len() as f64)
    }
}

/// One forward pass per overlay, features of every site extracted from the
/// same cache.
fn features_all_sites(
    base: &BaseModel,
    overlay: Overlay<'_>,
    probe: &[Vec<f64>],
) -> Result<Vec<Matrix>> {
    let head = ClassifierHead::zeros(base.config.d_model, 1);
    let (_, cache) = forward(base, &head, overlay, probe)?;
    let d = base.config.d_model;
    base.sites()
        .into_iter()
        .map(|site| {
            let mut rows = Vec::with_capacity(probe.len());
            for i in 0..probe.len() {
                rows.push(cache.site_projection_mean(i, site)?);
            }
            Matrix::from_vec(probe.len(), d, rows.into_iter().flatten().collect())
        })
        .collect()
}

/// CKA similarity of every (site, upstream) pair against the ground-truth
/// adapter's features on the same probe, row-normalized across upstreams.
pub fn cka_map(
    base: &BaseModel,
    upstream_sets: &[AdapterSet],
    downstream_gt: &AdapterSet,
    probe: &[Vec<f64>],
    center: bool,
) -> Result<HeatGrid> {
    if upstream_sets.is_empty() {
        return Err(Error::Argument("cka_map needs upstream sets".into()));
    }
    let sites = base.sites();
    let gt_features = features_all_sites(base, Overlay::Adapter(downstream_gt), probe)?;
    let mut values = vec![Vec::with_capacity(upstream_sets.len()); sites.len()];
    for set in upstream_sets {
        let up_features = features_all_sites(base, Overlay::Adapter(set), probe)?;
        for (s, site) in sites.iter().enumerate() {
            let cka = linear_cka(&up_features[s], &gt_features[s], center)
                .map_err(|e| Error::Degenerate(format!("site {site}: {e}")))?;
            values[s].push(cka);
        }
    }
    for (site, row) in sites.iter().zip(&mut values) {
        let sum: f64 = row.iter().sum();
        if sum == 0.0 {
            return Err(Error::Degenerate(format!(
                "site {site}: all upstream CKA values are zero"
            )));
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(HeatGrid {
        sites,
        upstream: upstream_sets.iter().map(|s| s.provenance.clone()).collect(),
        values,
        normalization: "row-normalized-cka".into(),
    })
}

/// Softmax weights of a learned composition as a grid aligned with
/// [`cka_map`].
pub fn weight_map(weights: &CompositionWeights) -> Result<HeatGrid> {
    let sites: Vec<SiteId> = weights.sites().collect();
    let values = sites
        .iter()
        .map(|&s| softmax(weights.logits(s)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(HeatGrid {
        sites,
        upstream: weights.upstream_order.clone(),
        values,
        normalization: "softmax".into(),
    })
}

#[derive(Debug, Serialize)]
struct AlignmentSummary<'a> {
    sites: usize,
    agreements: usize,
    alignment_fraction: f64,
    cka_argmax: &'a [usize],
    weight_argmax: &'a [usize],
}

/// Serializes a grid as CSV. Values use shortest-round-trip formatting, so
/// reading the file back reproduces them exactly.
pub fn heat_grid_csv(grid: &HeatGrid) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "# lora-compose heatmap schema=1 normalization={}\n",
        grid.normalization
    ));
    out.push_str("site");
    for up in &grid.upstream {
        out.push(',');
        out.push_str(up);
    }
    out.push('\n');
    for (site, row) in grid.sites.iter().zip(&grid.values) {
        out.push_str(&site.to_string());
        for v in row {
            out.push(',');
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    out
}

/// Parses a grid written by [`heat_grid_csv`].
pub fn parse_heat_grid(text: &str) -> Result<HeatGrid> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty heatmap file".into()))?;
    let normalization = header
        .split("normalization=")
        .nth(1)
        .ok_or_else(|| Error::Format("heatmap header missing normalization".into()))?
        .trim()
        .to_string();
    let columns = lines
        .next()
        .ok_or_else(|| Error::Format("heatmap missing column row".into()))?;
    let upstream: Vec<String> = columns.split(',').skip(1).map(str::to_string).collect();

    let mut sites = Vec::new();
    let mut values = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let mut parts = line.split(',');
        let site_str = parts
            .next()
            .ok_or_else(|| Error::Format("heatmap row missing site".into()))?;
        let (block_part, role_part) = site_str
            .strip_prefix("block")
            .and_then(|s| s.split_once('.'))
            .ok_or_else(|| Error::Format(format!("bad site label {site_str:?}")))?;
        let block: usize = block_part
            .parse()
            .map_err(|_| Error::Format(format!("bad site label {site_str:?}")))?;
        sites.push(SiteId::new(block, crate::lora::SiteRole::from_tag(role_part)?));
        let row: Vec<f64> = parts
            .map(|p| {
                p.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad heatmap value {p:?}")))
            })
            .collect::<Result<_>>()?;
        if row.len() != upstream.len() {
            return Err(Error::Format("heatmap row width mismatch".into()));
        }
        values.push(row);
    }
    Ok(HeatGrid {
        sites,
        upstream,
        values,
        normalization,
    })
}

/// Writes the CKA grid, the weight grid, and a JSON alignment summary
/// (fraction of sites where the two argmaxes agree). Returns the three
/// paths.
pub fn export_maps(
    cka: &HeatGrid,
    weights: &HeatGrid,
    dir: &Path,
) -> Result<(PathBuf, PathBuf, PathBuf)> {
    let fraction = cka.alignment_fraction(weights)?;
    let cka_argmax = cka.argmax_per_site();
    let weight_argmax = weights.argmax_per_site();
    let summary = AlignmentSummary {
        sites: cka.sites.len(),
        agreements: (fraction * cka.sites.len() as f64).round() as usize,
        alignment_fraction: fraction,
        cka_argmax: &cka_argmax,
        weight_argmax: &weight_argmax,
    };

    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cka_path = dir.join("cka.csv");
    let weights_path = dir.join("weights.csv");
    let summary_path = dir.join("alignment.json");
    atomic_write(&cka_path, heat_grid_csv(cka).as_bytes())?;
    atomic_write(&weights_path, heat_grid_csv(weights).as_bytes())?;
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Format(format!("alignment summary: {e}")))?;
    atomic_write(&summary_path, json.as_bytes())?;
    Ok((cka_path, weights_path, summary_path))
}
