//! Sliding windows and the chronological train / validation / test split.

use std::ops::Range;

use crate::data::cube::WeatherCube;
use crate::data::scaler::Scaler;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `(L×F×C input, n-vector target)` pairs cut from one contiguous block of
/// days.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedSet {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub lags: usize,
    pub horizon: usize,
    pub target_feature: usize,
    pub target_cities: Vec<usize>,
    /// Cube day index of the first input day of window 0.
    pub first_day: usize,
}

impl WindowedSet {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cube day index of window `i`'s last lag.
    pub fn last_input_day(&self, i: usize) -> usize {
        self.first_day + i + self.lags - 1
    }

    pub fn target_day(&self, i: usize) -> usize {
        self.last_input_day(i) + self.horizon
    }

    /// Inputs and targets of the given windows, in the given order.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Tensor) {
        (self.inputs.select_first(idx), self.targets.select_first(idx))
    }

    /// The first `n` windows.
    pub fn take(&self, n: usize) -> WindowedSet {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (inputs, targets) = self.batch(&idx);
        WindowedSet {
            inputs,
            targets,
            ..self.clone()
        }
    }
}

/// Windows over every day of `cube`. Window `i` reads days `i .. i+L` and
/// targets day `i + L - 1 + horizon`, so `N = T − L − horizon + 1`.
pub fn make_windows(
    cube: &WeatherCube,
    lags: usize,
    horizon: usize,
    target_feature: usize,
    target_cities: &[usize],
) -> Result<WindowedSet> {
    let t = cube.days();
    if lags == 0 || horizon == 0 {
        return Err(Error::config("lags and horizon must be positive"));
    }
    if t < lags + horizon {
        return Err(Error::config(format!(
            "{t} days cannot hold a window of {lags} lags plus a {horizon}-day horizon"
        )));
    }
    let (f_len, c_len) = (cube.features().len(), cube.cities().len());
    if target_feature >= f_len || target_cities.iter().any(|&c| c >= c_len) || target_cities.is_empty() {
        return Err(Error::config("target feature or city index out of range"));
    }
    let n = t - lags - horizon + 1;
    let plane = f_len * c_len;
    let src = cube.values().data();
    let mut inputs = Vec::with_capacity(n * lags * plane);
    let mut targets = Vec::with_capacity(n * target_cities.len());
    for i in 0..n {
        inputs.extend_from_slice(&src[i * plane..(i + lags) * plane]);
        let day = i + lags - 1 + horizon;
        targets.extend(target_cities.iter().map(|&c| cube.get(day, target_feature, c)));
    }
    Ok(WindowedSet {
        inputs: Tensor::new(&[n, lags, f_len, c_len], inputs)?,
        targets: Tensor::new(&[n, target_cities.len()], targets)?,
        lags,
        horizon,
        target_feature,
        target_cities: target_cities.to_vec(),
        first_day: 0,
    })
}

/// Day ranges of the three blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Chronological split: the first `ratio` of days is train+validation (the
/// validation block is its last `1 − ratio`), the rest is test.
pub fn split_days(days: usize, ratio: f64) -> Result<SplitPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let head = |n: usize| ((n as f64) * ratio + 1e-9).floor() as usize;
    let trainval = head(days);
    let train = head(trainval);
    if train == 0 || train == trainval || trainval == days {
        return Err(Error::config(format!("{days} days are too few to split at {ratio}")));
    }
    Ok(SplitPlan {
        train: 0..train,
        val: train..trainval,
        test: trainval..days,
    })
}

/// Scaler fitted on the training days plus windows of each block.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub plan: SplitPlan,
    pub scaler: Scaler,
    pub scaled: WeatherCube,
    pub train: WindowedSet,
    pub val: WindowedSet,
    pub test: WindowedSet,
}

/// Splits, scales and windows a raw cube. Windows never cross a block
/// boundary.
pub fn prepare(
    cube: &WeatherCube,
    lags: usize,
    horizon: usize,
    target_feature: usize,
    target_cities: &[usize],
    ratio: f64,
) -> Result<Prepared> {
    let plan = split_days(cube.days(), ratio)?;
    let scaler = Scaler::fit(cube, plan.train.clone())?;
    prepare_with_scaler(cube, scaler, lags, horizon, target_feature, target_cities, ratio)
}

/// Like [`prepare`], with a scaler fitted elsewhere (e.g. loaded from a
/// run directory).
pub fn prepare_with_scaler(
    cube: &WeatherCube,
    scaler: Scaler,
    lags: usize,
    horizon: usize,
    target_feature: usize,
    target_cities: &[usize],
    ratio: f64,
) -> Result<Prepared> {
    if scaler.features() != cube.features() || scaler.cities() != cube.cities() {
        return Err(Error::config("scaler was fitted on different features or cities than the data"));
    }
    let plan = split_days(cube.days(), ratio)?;
    let scaled = scaler.scale(cube)?;
    let block = |name: &str, r: &Range<usize>| -> Result<WindowedSet> {
        let part = scaled.slice_days(r.start, r.len())?;
        let mut w = make_windows(&part, lags, horizon, target_feature, target_cities)
            .map_err(|e| Error::config(format!("{name} block ({} days): {e}", r.len())))?;
        w.first_day = r.start;
        Ok(w)
    };
    Ok(Prepared {
        train: block("train", &plan.train)?,
        val: block("validation", &plan.val)?,
        test: block("test", &plan.test)?,
        plan,
        scaler,
        scaled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn ramp(t: usize) -> WeatherCube {
        let start = NaiveDate::from_ymd_opt(2019, 1, 1).unwrap();
        WeatherCube::new(
            Tensor::from_fn(&[t, 2, 3], |i| i as f64),
            start.iter_days().take(t).collect(),
            vec!["a".into(), "b".into()],
            vec!["x".into(), "y".into(), "z".into()],
        )
        .unwrap()
    }

    #[test]
    fn window_counts() {
        assert_eq!(make_windows(&ramp(12), 10, 2, 0, &[0]).unwrap().len(), 1);
        assert_eq!(make_windows(&ramp(20), 10, 6, 0, &[0]).unwrap().len(), 5);
        assert!(make_windows(&ramp(11), 10, 2, 0, &[0]).is_err());
    }

    #[test]
    fn targets_index_the_cube() {
        let cube = ramp(20);
        let w = make_windows(&cube, 4, 3, 1, &[2, 0]).unwrap();
        for i in 0..w.len() {
            let day = i + 4 - 1 + 3;
            assert_eq!(w.target_day(i), day);
            assert_eq!(w.targets.get(&[i, 0]), cube.get(day, 1, 2));
            assert_eq!(w.targets.get(&[i, 1]), cube.get(day, 1, 0));
            assert_eq!(w.inputs.get(&[i, 0, 1, 2]), cube.get(i, 1, 2));
            assert_eq!(w.inputs.get(&[i, 3, 0, 1]), cube.get(i + 3, 0, 1));
        }
    }

    #[test]
    fn thousand_day_split() {
        let p = split_days(1000, 0.9).unwrap();
        assert_eq!(p.train, 0..810);
        assert_eq!(p.val, 810..900);
        assert_eq!(p.test, 900..1000);
        assert!(split_days(1000, 1.0).is_err());
        assert!(split_days(2, 0.9).is_err());
    }

    #[test]
    fn prepared_blocks_do_not_leak() {
        let cube = ramp(200);
        let p = prepare(&cube, 5, 2, 0, &[0, 1], 0.9).unwrap();
        for i in 0..p.test.len() {
            assert!(p.test.first_day + i >= p.plan.test.start);
            assert!(p.test.target_day(i) < p.plan.test.end);
        }
        for i in 0..p.train.len() {
            assert!(p.train.target_day(i) < p.plan.train.end);
        }
        assert_eq!(p.val.len(), p.plan.val.len() - 5 - 2 + 1);
        let tr = p.train.inputs.data();
        assert!(tr.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
