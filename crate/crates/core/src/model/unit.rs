//! Fixed unit registry with factor-based conversion inside one dimension.

use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dimension {
    Power,
    Energy,
    Temperature,
    Time,
    Bytes,
    Dimensionless,
}

impl Dimension {
    pub fn base(self) -> Unit {
        let sym = match self {
            Dimension::Power => "W",
            Dimension::Energy => "J",
            Dimension::Temperature => "°C",
            Dimension::Time => "s",
            Dimension::Bytes => "B",
            Dimension::Dimensionless => "",
        };
        Unit::parse(sym).expect("base units are registered")
    }
}

/// A unit is its symbol, its dimension, and its factor relative to the
/// dimension's base unit. Derived units (integral/derivative results) may
/// carry synthesized symbols not present in the registry.
#[derive(Debug, Clone, PartialEq)]
pub struct Unit {
    symbol: String,
    pub dimension: Dimension,
    pub factor: f64,
}

const REGISTRY: &[(&str, Dimension, f64)] = &[
    ("W", Dimension::Power, 1.0),
    ("mW", Dimension::Power, 1e-3),
    ("kW", Dimension::Power, 1e3),
    ("MW", Dimension::Power, 1e6),
    ("J", Dimension::Energy, 1.0),
    ("kJ", Dimension::Energy, 1e3),
    ("Wh", Dimension::Energy, 3600.0),
    ("°C", Dimension::Temperature, 1.0),
    ("s", Dimension::Time, 1.0),
    ("ms", Dimension::Time, 1e-3),
    ("us", Dimension::Time, 1e-6),
    ("ns", Dimension::Time, 1e-9),
    ("B", Dimension::Bytes, 1.0),
    ("KB", Dimension::Bytes, 1e3),
    ("MB", Dimension::Bytes, 1e6),
    ("GB", Dimension::Bytes, 1e9),
    ("", Dimension::Dimensionless, 1.0),
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum UnitError {
    #[error("unknown unit {0:?}")]
    Unknown(String),
    #[error("dimension mismatch: cannot convert {from} to {to}")]
    DimensionMismatch { from: String, to: String },
}

impl Unit {
    /// Looks a symbol up in the registry. `degC` is accepted as an ASCII
    /// spelling of `°C`.
    pub fn parse(symbol: &str) -> Option<Unit> {
        let symbol = if symbol == "degC" { "°C" } else { symbol };
        REGISTRY.iter().find(|(s, _, _)| *s == symbol).map(|&(s, dimension, factor)| Unit {
            symbol: s.to_owned(),
            dimension,
            factor,
        })
    }

    pub fn dimensionless() -> Unit {
        Unit::parse("").unwrap()
    }

    pub fn symbol(&self) -> &str {
        &self.symbol
    }

    pub fn registry_symbols() -> impl Iterator<Item = &'static str> {
        REGISTRY.iter().map(|(s, _, _)| *s)
    }

    /// Builds a non-registry unit; used for integral/derivative results.
    pub fn derived(symbol: String, dimension: Dimension, factor: f64) -> Unit {
        Unit { symbol, dimension, factor }
    }

    /// Unit of the time-integral of `self` (values multiplied by seconds).
    pub fn integrated(&self) -> Unit {
        match self.dimension {
            Dimension::Power => {
                // W·s = J with the same multiplier.
                match REGISTRY
                    .iter()
                    .find(|(_, d, f)| *d == Dimension::Energy && *f == self.factor)
                {
                    Some(&(s, d, f)) => Unit { symbol: s.to_owned(), dimension: d, factor: f },
                    None => Unit::derived(format!("{}*s", self.symbol), Dimension::Energy, self.factor),
                }
            }
            Dimension::Dimensionless => Unit::parse("s").unwrap(),
            _ => Unit::derived(format!("{}*s", self.symbol), Dimension::Dimensionless, 1.0),
        }
    }

    /// Unit of the time-derivative of `self` (values divided by seconds).
    pub fn differentiated(&self) -> Unit {
        match self.dimension {
            Dimension::Energy => {
                match REGISTRY
                    .iter()
                    .find(|(_, d, f)| *d == Dimension::Power && *f == self.factor)
                {
                    Some(&(s, d, f)) => Unit { symbol: s.to_owned(), dimension: d, factor: f },
                    None => Unit::derived(format!("{}/s", self.symbol), Dimension::Power, self.factor),
                }
            }
            Dimension::Time => Unit::derived(
                if self.symbol.is_empty() { String::new() } else { format!("{}/s", self.symbol) },
                Dimension::Dimensionless,
                1.0,
            ),
            _ => Unit::derived(format!("{}/s", self.symbol), Dimension::Dimensionless, 1.0),
        }
    }
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.symbol)
    }
}

/// Converts `value` between units of the same dimension.
pub fn convert(value: f64, from: &Unit, to: &Unit) -> Result<f64, UnitError> {
    if from.dimension != to.dimension {
        return Err(UnitError::DimensionMismatch {
            from: from.symbol.clone(),
            to: to.symbol.clone(),
        });
    }
    Ok(value * (from.factor / to.factor))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn u(s: &str) -> Unit {
        Unit::parse(s).unwrap()
    }

    #[test]
    fn known_conversions() {
        assert_eq!(convert(2.5, &u("kW"), &u("W")).unwrap(), 2500.0);
        assert_eq!(convert(3600.0, &u("J"), &u("Wh")).unwrap(), 1.0);
        assert_eq!(convert(1.0, &u("Wh"), &u("J")).unwrap(), 3600.0);
        assert_eq!(convert(1500.0, &u("mW"), &u("W")).unwrap(), 1.5);
        assert_eq!(convert(1.0, &u("GB"), &u("KB")).unwrap(), 1e6);
        assert_eq!(convert(250.0, &u("ms"), &u("s")).unwrap(), 0.25);
    }

    #[test]
    fn mismatch_is_an_error() {
        assert!(matches!(
            convert(1.0, &u("W"), &u("°C")),
            Err(UnitError::DimensionMismatch { .. })
        ));
        assert!(convert(1.0, &u("J"), &u("W")).is_err());
    }

    #[test]
    fn identity_conversion_is_exact() {
        for sym in Unit::registry_symbols() {
            let unit = u(sym);
            assert_eq!(convert(123.456, &unit, &unit).unwrap(), 123.456);
        }
    }

    #[test]
    fn roundtrip_within_one_ulp() {
        for from in Unit::registry_symbols() {
            let fu = u(from);
            for to in Unit::registry_symbols() {
                let tu = u(to);
                if fu.dimension != tu.dimension {
                    continue;
                }
                let v = 7.25;
                let back = convert(convert(v, &fu, &tu).unwrap(), &tu, &fu).unwrap();
                let ulp = f64::EPSILON * v.abs() * 2.0;
                assert!((back - v).abs() <= ulp, "{from}->{to}: {back} vs {v}");
            }
        }
    }

    #[test]
    fn degc_alias_and_unicode_symbol() {
        assert_eq!(u("degC").symbol(), "°C");
        assert_eq!(u("°C").dimension, Dimension::Temperature);
    }

    #[test]
    fn integral_and_derivative_unit_algebra() {
        assert_eq!(u("W").integrated().symbol(), "J");
        assert_eq!(u("kW").integrated().symbol(), "kJ");
        assert_eq!(u("").integrated().symbol(), "s");
        assert_eq!(u("°C").integrated().symbol(), "°C*s");
        assert_eq!(u("J").differentiated().symbol(), "W");
        assert_eq!(u("kJ").differentiated().symbol(), "kW");
        let whs = u("Wh").differentiated();
        assert_eq!(whs.symbol(), "Wh/s");
        assert_eq!(whs.dimension, Dimension::Power);
        assert_eq!(whs.factor, 3600.0);
        assert_eq!(u("s").differentiated().symbol(), "s/s");
    }

    #[test]
    fn unknown_symbols_rejected() {
        assert!(Unit::parse("kWh").is_none());
        assert!(Unit::parse("w").is_none());
    }
}
