//! Column names, city lists and the categorical vocabularies.

use std::sync::OnceLock;

/// The eighteen daily features, in canonical column order.
pub const FEATURES: [&str; 18] = [
    "high_temp",
    "low_temp",
    "avg_temp",
    "dew_point",
    "high_dew_point",
    "low_dew_point",
    "avg_dew_point",
    "max_wind_speed",
    "visibility",
    "sea_level_pressure",
    "observed_temp",
    "observed_dew_point",
    "humidity",
    "wind_direction",
    "wind_speed",
    "wind_gust",
    "pressure",
    "condition",
];

/// Default station list, alphabetical.
pub const DEFAULT_CITIES: [&str; 18] = [
    "Amsterdam",
    "Barcelona",
    "Berlin",
    "Brussels",
    "Copenhagen",
    "Dublin",
    "Frankfurt",
    "Hamburg",
    "London",
    "Luxembourg",
    "Lyon",
    "Maastricht",
    "Madrid",
    "Milan",
    "Munich",
    "Paris",
    "Rotterdam",
    "Zurich",
];

/// Default forecast targets, in model output order.
pub const DEFAULT_TARGET_CITIES: [&str; 6] = ["Paris", "Luxembourg", "London", "Brussels", "Frankfurt", "Rotterdam"];

/// Row order of the evaluation table when the targets are the defaults.
pub const TABLE_CITY_ORDER: [&str; 6] = ["Luxembourg", "Rotterdam", "Frankfurt", "Brussels", "London", "Paris"];

/// Ordered symbol list; a symbol's code is its position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pub feature: &'static str,
    symbols: Vec<String>,
}

impl Vocabulary {
    fn parse(feature: &'static str, text: &str) -> Self {
        let symbols = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        Vocabulary { feature, symbols }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Case-sensitive lookup after trimming surrounding whitespace.
    pub fn index(&self, symbol: &str) -> Option<usize> {
        let s = symbol.trim();
        self.symbols.iter().position(|v| v == s)
    }

    pub fn symbol(&self, code: usize) -> Option<&str> {
        self.symbols.get(code).map(String::as_str)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }
}

pub fn wind_direction_vocabulary() -> &'static Vocabulary {
    static V: OnceLock<Vocabulary> = OnceLock::new();
    V.get_or_init(|| Vocabulary::parse("wind_direction", include_str!("../../vocab/wind_direction.txt")))
}

pub fn condition_vocabulary() -> &'static Vocabulary {
    static V: OnceLock<Vocabulary> = OnceLock::new();
    V.get_or_init(|| Vocabulary::parse("condition", include_str!("../../vocab/condition.txt")))
}

/// The vocabulary of a categorical column, `None` for numeric columns.
pub fn vocabulary(feature: &str) -> Option<&'static Vocabulary> {
    match feature {
        "wind_direction" => Some(wind_direction_vocabulary()),
        "condition" => Some(condition_vocabulary()),
        _ => None,
    }
}
