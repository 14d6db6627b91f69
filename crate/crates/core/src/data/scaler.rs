//! Per-(feature, city) min-max scaling.

use std::ops::Range;
use std::path::Path;

use crate::data::cube::WeatherCube;
use crate::error::{Error, Result};
use crate::layers::container::{Metadata, ParamContainer};
use crate::layers::ParamStore;
use crate::tensor::Tensor;

/// Column minima and maxima `[F, C]` of the training days. Constant columns
/// scale to 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Scaler {
    features: Vec<String>,
    cities: Vec<String>,
    min: Tensor,
    max: Tensor,
}

impl Scaler {
    pub fn fit(cube: &WeatherCube, days: Range<usize>) -> Result<Self> {
        if days.is_empty() || days.end > cube.days() {
            return Err(Error::config(format!(
                "scaler fit range {:?} is empty or outside 0..{}",
                days,
                cube.days()
            )));
        }
        let (f_len, c_len) = (cube.features().len(), cube.cities().len());
        let mut min = Tensor::full(&[f_len, c_len], f64::INFINITY);
        let mut max = Tensor::full(&[f_len, c_len], f64::NEG_INFINITY);
        for t in days {
            for f in 0..f_len {
                for c in 0..c_len {
                    let v = cube.get(t, f, c);
                    if v < min.get(&[f, c]) {
                        min.set(&[f, c], v);
                    }
                    if v > max.get(&[f, c]) {
                        max.set(&[f, c], v);
                    }
                }
            }
        }
        Ok(Scaler {
            features: cube.features().to_vec(),
            cities: cube.cities().to_vec(),
            min,
            max,
        })
    }

    pub fn features(&self) -> &[String] {
        &self.features
    }

    pub fn cities(&self) -> &[String] {
        &self.cities
    }

    pub fn min(&self, feature: usize, city: usize) -> f64 {
        self.min.get(&[feature, city])
    }

    pub fn max(&self, feature: usize, city: usize) -> f64 {
        self.max.get(&[feature, city])
    }

    pub fn range(&self, feature: usize, city: usize) -> f64 {
        self.max(feature, city) - self.min(feature, city)
    }

    pub fn scale_value(&self, feature: usize, city: usize, x: f64) -> f64 {
        let r = self.range(feature, city);
        if r == 0.0 {
            0.0
        } else {
            (x - self.min(feature, city)) / r
        }
    }

    pub fn descale_value(&self, feature: usize, city: usize, x: f64) -> f64 {
        x * self.range(feature, city) + self.min(feature, city)
    }

    fn check_labels(&self, cube: &WeatherCube) -> Result<()> {
        if cube.features() != self.features || cube.cities() != self.cities {
            return Err(Error::config(
                "scaler and cube disagree on feature or city order".to_string(),
            ));
        }
        Ok(())
    }

    fn map_cube(&self, cube: &WeatherCube, f: impl Fn(usize, usize, f64) -> f64) -> Result<WeatherCube> {
        self.check_labels(cube)?;
        let (f_len, c_len) = (self.features.len(), self.cities.len());
        let mut values = cube.values().clone();
        for (i, v) in values.data_mut().iter_mut().enumerate() {
            let (fi, ci) = ((i / c_len) % f_len, i % c_len);
            *v = f(fi, ci, *v);
        }
        cube.with_values(values)
    }

    /// Scaled copy of the cube. Days outside the fit range may leave [0, 1].
    pub fn scale(&self, cube: &WeatherCube) -> Result<WeatherCube> {
        self.map_cube(cube, |f, c, x| self.scale_value(f, c, x))
    }

    pub fn descale(&self, cube: &WeatherCube) -> Result<WeatherCube> {
        self.map_cube(cube, |f, c, x| self.descale_value(f, c, x))
    }

    /// Maps `[B, n]` scaled predictions of `feature` at `cities` back to
    /// physical units.
    pub fn descale_predictions(&self, pred: &Tensor, feature: usize, cities: &[usize]) -> Result<Tensor> {
        let s = pred.shape();
        if s.len() != 2 || s[1] != cities.len() {
            return Err(Error::dim(format!(
                "predictions {:?} do not match {} target cities",
                s,
                cities.len()
            )));
        }
        if feature >= self.features.len() || cities.iter().any(|&c| c >= self.cities.len()) {
            return Err(Error::config("target index outside the scaler's grid"));
        }
        let n = cities.len();
        Ok(Tensor::from_fn(s, |i| {
            self.descale_value(feature, cities[i % n], pred.data()[i])
        }))
    }

    pub fn to_container(&self) -> Result<ParamContainer> {
        let mut meta = Metadata::new();
        meta.set("kind", "scaler");
        for (key, names) in [("features", &self.features), ("cities", &self.cities)] {
            if names.iter().any(|n| n.contains(',') || n.contains('\n')) {
                return Err(Error::config(format!("{key} names must not contain commas or newlines")));
            }
            meta.set(key, names.join(","));
        }
        let mut store = ParamStore::new();
        store.add("min", self.min.clone(), false)?;
        store.add("max", self.max.clone(), false)?;
        Ok(ParamContainer::new(meta, store))
    }

    pub fn from_container(c: &ParamContainer) -> Result<Self> {
        if c.meta.get("kind") != Some("scaler") {
            return Err(Error::Format("container does not hold a scaler".into()));
        }
        let names = |key: &str| -> Result<Vec<String>> {
            Ok(c.meta.require(key)?.split(',').map(String::from).collect())
        };
        let (features, cities) = (names("features")?, names("cities")?);
        let grid = |name: &str| -> Result<Tensor> {
            let t = &c
                .store
                .by_name(name)
                .ok_or_else(|| Error::Format(format!("scaler is missing `{name}`")))?
                .tensor;
            if t.shape() != [features.len(), cities.len()] {
                return Err(Error::Format(format!("scaler `{name}` has shape {:?}", t.shape())));
            }
            Ok(t.clone())
        };
        let (min, max) = (grid("min")?, grid("max")?);
        if min.data().iter().zip(max.data()).any(|(a, b)| a > b) {
            return Err(Error::Format("scaler has max < min".into()));
        }
        Ok(Scaler {
            features,
            cities,
            min,
            max,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&ParamContainer::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn cube(cols: &[&[f64]]) -> WeatherCube {
        let t = cols[0].len();
        let c = cols.len();
        let values = Tensor::from_fn(&[t, 1, c], |i| cols[i % c][i / c]);
        let start = NaiveDate::from_ymd_opt(2021, 3, 1).unwrap();
        WeatherCube::new(
            values,
            start.iter_days().take(t).collect(),
            vec!["x".into()],
            (0..c).map(|i| format!("city{i}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn known_columns() {
        let cb = cube(&[&[2.0, 4.0, 6.0], &[5.0, 5.0, 5.0]]);
        let s = Scaler::fit(&cb, 0..3).unwrap();
        let scaled = s.scale(&cb).unwrap();
        assert_eq!(scaled.column(0, 0), [0.0, 0.5, 1.0]);
        assert_eq!(scaled.column(0, 1), [0.0, 0.0, 0.0]);
        let back = s.descale(&scaled).unwrap();
        assert_eq!(back, cb);
    }

    #[test]
    fn only_fit_days_count() {
        let cb = cube(&[&[0.0, 10.0, 20.0, 40.0]]);
        let s = Scaler::fit(&cb, 0..2).unwrap();
        assert_eq!((s.min(0, 0), s.max(0, 0)), (0.0, 10.0));
        assert_eq!(s.scale(&cb).unwrap().column(0, 0), [0.0, 1.0, 2.0, 4.0]);
        assert!(Scaler::fit(&cb, 2..2).is_err());
    }

    #[test]
    fn prediction_descaling() {
        let cb = cube(&[&[10.0, 30.0], &[0.0, 1.0]]);
        let s = Scaler::fit(&cb, 0..2).unwrap();
        let p = Tensor::new(&[3, 1], vec![0.5, 0.0, 1.0]).unwrap();
        assert_eq!(s.descale_predictions(&p, 0, &[0]).unwrap().data(), &[20.0, 10.0, 30.0]);
        assert!(s.descale_predictions(&p, 0, &[0, 1]).is_err());
    }

    #[test]
    fn container_round_trip() {
        let cb = cube(&[&[1.5, -2.0, 7.25], &[0.1, 0.2, 0.3]]);
        let s = Scaler::fit(&cb, 0..3).unwrap();
        let back = Scaler::from_container(&ParamContainer::from_bytes(&s.to_container().unwrap().to_bytes()).unwrap())
            .unwrap();
        assert_eq!(back, s);
    }
}
