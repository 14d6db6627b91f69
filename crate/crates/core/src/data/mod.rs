//! Dataset ingestion, scaling, windowing and splitting.

pub mod cube;
pub mod scaler;
pub mod schema;
pub mod synth;
pub mod windows;

pub use cube::{load_dataset, read_dataset, FillKind, Imputation, IngestReport, WeatherCube};
pub use scaler::Scaler;
pub use schema::{Vocabulary, DEFAULT_CITIES, DEFAULT_TARGET_CITIES, FEATURES, TABLE_CITY_ORDER};
pub use synth::{synthetic_cube, SynthOptions};
pub use windows::{make_windows, prepare, prepare_with_scaler, split_days, Prepared, SplitPlan, WindowedSet};
