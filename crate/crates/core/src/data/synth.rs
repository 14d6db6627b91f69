//! Synthetic weather cubes for tests, benchmarks and dry runs.
//!
//! Each column is a yearly cycle plus a shorter weather cycle whose phase
//! drifts from city to city, so upstream cities carry information about
//! downstream ones a few days later. Numeric values are rounded to one
//! decimal like station reports; categorical columns hold valid codes.

use std::f64::consts::TAU;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::cube::WeatherCube;
use crate::data::schema::{self, DEFAULT_CITIES, FEATURES};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SynthOptions {
    pub days: usize,
    pub start: NaiveDate,
    pub features: Vec<String>,
    pub cities: Vec<String>,
    /// Period of the short cycle in days.
    pub period: f64,
    /// Noise amplitude relative to the column amplitude.
    pub noise: f64,
    pub seed: u64,
}

impl SynthOptions {
    /// All eighteen features at the eighteen default cities.
    pub fn full(days: usize, seed: u64) -> Self {
        SynthOptions {
            days,
            start: NaiveDate::from_ymd_opt(2017, 1, 1).expect("valid date"),
            features: FEATURES.iter().map(|s| s.to_string()).collect(),
            cities: DEFAULT_CITIES.iter().map(|s| s.to_string()).collect(),
            period: 9.0,
            noise: 0.1,
            seed,
        }
    }

    /// Numeric-only grid with generic names `f0..`, `c0..`.
    pub fn small(days: usize, features: usize, cities: usize, seed: u64) -> Self {
        SynthOptions {
            features: (0..features).map(|i| format!("f{i}")).collect(),
            cities: (0..cities).map(|i| format!("c{i}")).collect(),
            ..Self::full(days, seed)
        }
    }
}

/// Plausible (base, amplitude) per known feature.
fn profile(feature: &str) -> (f64, f64) {
    match feature {
        "high_temp" => (60.0, 20.0),
        "low_temp" => (42.0, 15.0),
        "avg_temp" | "observed_temp" => (51.0, 17.0),
        "dew_point" | "avg_dew_point" | "observed_dew_point" => (42.0, 12.0),
        "high_dew_point" => (48.0, 12.0),
        "low_dew_point" => (36.0, 12.0),
        "max_wind_speed" => (18.0, 8.0),
        "wind_speed" => (10.0, 5.0),
        "wind_gust" => (22.0, 9.0),
        "visibility" => (8.0, 2.0),
        "sea_level_pressure" | "pressure" => (30.0, 0.3),
        "humidity" => (72.0, 15.0),
        _ => (0.0, 1.0),
    }
}

pub fn synthetic_cube(opts: &SynthOptions) -> Result<WeatherCube> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (t_len, f_len, c_len) = (opts.days, opts.features.len(), opts.cities.len());
    let feature_phase: Vec<f64> = (0..f_len).map(|_| rng.gen_range(0.0..TAU)).collect();
    let city_offset: Vec<f64> = (0..c_len).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let mut data = vec![0.0; t_len * f_len * c_len];
    for t in 0..t_len {
        for (f, name) in opts.features.iter().enumerate() {
            let (base, amp) = profile(name);
            for c in 0..c_len {
                let day = t as f64;
                // The short cycle arrives one day later per city index.
                let lagged = day - c as f64;
                let season = (TAU * day / 365.25 + feature_phase[f] * 0.1).sin();
                let weather = (TAU * lagged / opts.period + feature_phase[f]).sin();
                let noise = rng.gen_range(-1.0..1.0) * opts.noise;
                let u = 0.6 * season + 0.4 * weather + noise;
                let v = match schema::vocabulary(name) {
                    Some(voc) => {
                        let k = voc.len() as f64;
                        (((u + 1.5) / 3.0 * k).floor()).clamp(0.0, k - 1.0)
                    }
                    None => ((base + city_offset[c] * amp * 0.1 + amp * u) * 10.0).round() / 10.0,
                };
                data[(t * f_len + f) * c_len + c] = v;
            }
        }
    }
    WeatherCube::new(
        Tensor::new(&[t_len, f_len, c_len], data)?,
        opts.start.iter_days().take(t_len).collect(),
        opts.features.clone(),
        opts.cities.clone(),
    )
}
