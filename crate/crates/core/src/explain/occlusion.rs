//! Occlusion analysis: mask a region of every input sample, re-predict and
//! report the mean percentage change of the prediction error per region.

use std::ops::Range;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::explain::saliency::SaliencyMap;
use crate::models::Forecaster;
use crate::tensor::Tensor;
use crate::training::predict_all;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OcclusionMode {
    /// One feature row at a time, all cities, all lags.
    FeatureRow,
    /// One city column at a time, all features, all lags.
    CityColumn,
    /// Non-overlapping `p×p` patches of the feature × city plane, all lags.
    Patch(usize),
    /// One full lag slice at a time.
    Temporal,
}

impl OcclusionMode {
    pub fn name(self) -> &'static str {
        match self {
            OcclusionMode::FeatureRow => "feature_row",
            OcclusionMode::CityColumn => "city_column",
            OcclusionMode::Patch(_) => "patch",
            OcclusionMode::Temporal => "temporal",
        }
    }
}

/// Value written into masked cells (scaled space).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fill {
    Constant(f64),
    /// Mean of each `(feature, city)` column over all samples and lags.
    ColumnMean,
}

/// Which outputs enter the error.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OcclusionTarget {
    /// Output index of a single target city.
    City(usize),
    AllTargets,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionSpec {
    pub mode: OcclusionMode,
    pub target: OcclusionTarget,
    pub fill: Fill,
}

impl OcclusionSpec {
    pub fn new(mode: OcclusionMode, target: OcclusionTarget) -> Self {
        OcclusionSpec {
            mode,
            target,
            fill: Fill::Constant(0.0),
        }
    }
}

/// Axis names for labelling maps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labels {
    pub features: Vec<String>,
    pub cities: Vec<String>,
    /// Output names (target cities), one per model output.
    pub targets: Vec<String>,
}

impl Labels {
    pub fn generic(features: usize, cities: usize, targets: usize) -> Self {
        Labels {
            features: (0..features).map(|i| format!("f{i}")).collect(),
            cities: (0..cities).map(|i| format!("c{i}")).collect(),
            targets: (0..targets).map(|i| format!("t{i}")).collect(),
        }
    }
}

/// A masked block of one `L×F×C` sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    pub lags: Range<usize>,
    pub features: Range<usize>,
    pub cities: Range<usize>,
}

/// Valid patch sizes for an `F×C` grid.
pub fn valid_patch_sizes(features: usize, cities: usize) -> Vec<usize> {
    (1..=features.min(cities))
        .filter(|p| features % p == 0 && cities % p == 0)
        .collect()
}

/// Mask positions in map order (row-major over the output grid) and the
/// grid extents.
pub fn regions(mode: OcclusionMode, lags: usize, features: usize, cities: usize) -> Result<(Vec<Region>, usize, usize)> {
    let all = |n: usize| 0..n;
    Ok(match mode {
        OcclusionMode::FeatureRow => (
            (0..features)
                .map(|f| Region {
                    lags: all(lags),
                    features: f..f + 1,
                    cities: all(cities),
                })
                .collect(),
            features,
            1,
        ),
        OcclusionMode::CityColumn => (
            (0..cities)
                .map(|c| Region {
                    lags: all(lags),
                    features: all(features),
                    cities: c..c + 1,
                })
                .collect(),
            1,
            cities,
        ),
        OcclusionMode::Patch(p) => {
            if p == 0 || features % p != 0 || cities % p != 0 {
                return Err(Error::config(format!(
                    "patch size {p} must divide {features} features and {cities} cities; valid sizes: {:?}",
                    valid_patch_sizes(features, cities)
                )));
            }
            let (rows, cols) = (features / p, cities / p);
            let mut out = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for j in 0..cols {
                    out.push(Region {
                        lags: all(lags),
                        features: i * p..(i + 1) * p,
                        cities: j * p..(j + 1) * p,
                    });
                }
            }
            (out, rows, cols)
        }
        OcclusionMode::Temporal => (
            (0..lags)
                .map(|l| Region {
                    lags: l..l + 1,
                    features: all(features),
                    cities: all(cities),
                })
                .collect(),
            1,
            lags,
        ),
    })
}

/// `100·(masked − reference)/reference`; positive means the region mattered.
pub fn percentage_change(mse_ref: f64, mse_masked: f64) -> Result<f64> {
    if mse_ref == 0.0 {
        return Err(Error::DegenerateReference);
    }
    if !(mse_ref > 0.0) {
        return Err(Error::contract(format!("reference MSE must be positive, got {mse_ref}")));
    }
    Ok(100.0 * (mse_masked - mse_ref) / mse_ref)
}

fn sample_mse(pred: &Tensor, truth: &Tensor, i: usize, target: OcclusionTarget) -> f64 {
    let n = truth.shape()[1];
    let (p, t) = (&pred.data()[i * n..(i + 1) * n], &truth.data()[i * n..(i + 1) * n]);
    match target {
        OcclusionTarget::City(c) => (p[c] - t[c]).powi(2),
        OcclusionTarget::AllTargets => p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64,
    }
}

/// Writes the fill into `region` of every sample in `inputs` (`[N,L,F,C]`).
pub fn mask(inputs: &Tensor, region: &Region, fill: &[f64]) -> Tensor {
    let s = inputs.shape();
    let (l_len, f_len, c_len) = (s[1], s[2], s[3]);
    let mut out = inputs.clone();
    let data = out.data_mut();
    for i in 0..s[0] {
        for l in region.lags.clone() {
            for f in region.features.clone() {
                for c in region.cities.clone() {
                    data[((i * l_len + l) * f_len + f) * c_len + c] = fill[f * c_len + c];
                }
            }
        }
    }
    out
}

fn fill_grid(inputs: &Tensor, fill: Fill) -> Vec<f64> {
    let s = inputs.shape();
    let (f_len, c_len) = (s[2], s[3]);
    match fill {
        Fill::Constant(v) => vec![v; f_len * c_len],
        Fill::ColumnMean => {
            let plane = f_len * c_len;
            let count = (s[0] * s[1]) as f64;
            let mut sums = vec![0.0; plane];
            for chunk in inputs.data().chunks(plane) {
                sums.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
            }
            sums.into_iter().map(|v| v / count).collect()
        }
    }
}

/// Mean percentage change of the error per mask position.
///
/// Samples whose reference error is exactly zero are skipped with a
/// warning; the map's `samples` field counts the ones used.
pub fn occlusion_map<M: Forecaster + ?Sized>(
    model: &M,
    spec: &OcclusionSpec,
    inputs: &Tensor,
    truths: &Tensor,
    labels: &Labels,
) -> Result<SaliencyMap> {
    let (l_len, f_len, c_len) = model.input_dims();
    let n_out = model.output_len();
    if inputs.ndim() != 4 || inputs.shape()[1..] != [l_len, f_len, c_len] {
        return Err(Error::dim(format!(
            "occlusion inputs {:?} do not match model input [N, {l_len}, {f_len}, {c_len}]",
            inputs.shape()
        )));
    }
    let n = inputs.shape()[0];
    if n == 0 {
        return Err(Error::contract("occlusion needs at least one sample"));
    }
    if truths.shape() != [n, n_out] {
        return Err(Error::dim(format!("truths {:?} for {n} samples of {n_out} outputs", truths.shape())));
    }
    if let OcclusionTarget::City(c) = spec.target {
        if c >= n_out {
            return Err(Error::config(format!("target index {c} but the model has {n_out} outputs")));
        }
    }
    let (positions, rows, cols) = regions(spec.mode, l_len, f_len, c_len)?;
    let fill = fill_grid(inputs, spec.fill);

    let reference = predict_all(model, inputs, 16)?;
    let ref_mse: Vec<f64> = (0..n).map(|i| sample_mse(&reference, truths, i, spec.target)).collect();
    let used: Vec<usize> = (0..n).filter(|&i| ref_mse[i] > 0.0).collect();
    if used.len() < n {
        log::warn!(
            "{} of {n} samples have zero reference error and are skipped",
            n - used.len()
        );
    }

    let grid = positions
        .par_iter()
        .map(|region| -> Result<f64> {
            let masked = predict_all(model, &mask(inputs, region, &fill), 16)?;
            let mut sum = 0.0;
            for &i in &used {
                sum += percentage_change(ref_mse[i], sample_mse(&masked, truths, i, spec.target))?;
            }
            Ok(if used.is_empty() { f64::NAN } else { sum / used.len() as f64 })
        })
        .collect::<Result<Vec<f64>>>()?;

    let target_name = match spec.target {
        OcclusionTarget::City(c) => labels.targets.get(c).cloned().unwrap_or_else(|| format!("t{c}")),
        OcclusionTarget::AllTargets => "all targets".to_string(),
    };
    let (row_axis, row_labels, col_axis, col_labels) = match spec.mode {
        OcclusionMode::FeatureRow => ("feature", labels.features.clone(), "target", vec![target_name.clone()]),
        OcclusionMode::CityColumn => ("target", vec![target_name.clone()], "city", labels.cities.clone()),
        OcclusionMode::Patch(p) => (
            "features",
            (0..rows).map(|i| span(&labels.features, i * p, p)).collect(),
            "cities",
            (0..cols).map(|j| span(&labels.cities, j * p, p)).collect(),
        ),
        OcclusionMode::Temporal => (
            "target",
            vec![target_name.clone()],
            "lag",
            (1..=l_len).map(|l| format!("lag{l}")).collect(),
        ),
    };
    let mut map = SaliencyMap::new(
        format!("Occlusion ({}) for {target_name}", spec.mode.name()),
        (row_axis, row_labels),
        (col_axis, col_labels),
        grid,
    )?
    .with_meta("mode", spec.mode.name())
    .with_meta("target", &target_name);
    if let OcclusionMode::Patch(p) = spec.mode {
        map = map.with_meta("patch", format!("{p}x{p}"));
    }
    map.samples = used.len();
    Ok(map.with_meta("samples", used.len()))
}

fn span(names: &[String], start: usize, len: usize) -> String {
    if len == 1 {
        names[start].clone()
    } else {
        format!("{}..{}", names[start], names[start + len - 1])
    }
}
