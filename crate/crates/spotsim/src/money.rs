//! Exact money arithmetic in integer micro-dollars.
//!
//! Billing must replay byte-identically, so no floats touch the ledgers:
//! prices are parsed from decimal strings into micro-dollars and all charges
//! are integer sums.

use std::iter::Sum;

use thiserror::Error;

/// An amount of money in micro-dollars (1e-6 USD).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Money(i64);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MoneyError {
    #[error("malformed money value {0:?}")]
    Malformed(String),
    #[error("money value {0:?} has more than 6 decimal places")]
    TooPrecise(String),
}

impl Money {
    pub const ZERO: Money = Money(0);

    pub fn from_micros(micros: i64) -> Money {
        Money(micros)
    }

    pub fn micros(self) -> i64 {
        self.0
    }

    /// Parses a decimal dollar string (e.g. "0.085") exactly.
    pub fn parse_dollars(s: &str) -> Result<Money, MoneyError> {
        let s = s.trim();
        let malformed = || MoneyError::Malformed(s.to_string());
        let (sign, digits) = match s.strip_prefix('-') {
            Some(rest) => (-1i64, rest),
            None => (1i64, s),
        };
        if digits.is_empty() {
            return Err(malformed());
        }
        let (whole, frac) = match digits.split_once('.') {
            Some((w, f)) => (w, f),
            None => (digits, ""),
        };
        if frac.len() > 6 {
            return Err(MoneyError::TooPrecise(s.to_string()));
        }
        if whole.is_empty() && frac.is_empty() {
            return Err(malformed());
        }
        let parse_digits = |d: &str| -> Result<i64, MoneyError> {
            if d.is_empty() {
                Ok(0)
            } else if d.bytes().all(|b| b.is_ascii_digit()) {
                d.parse::<i64>().map_err(|_| malformed())
            } else {
                Err(malformed())
            }
        };
        let whole = parse_digits(whole)?;
        let mut frac_micros = parse_digits(frac)?;
        for _ in frac.len()..6 {
            frac_micros *= 10;
        }
        Ok(Money(sign * (whole * 1_000_000 + frac_micros)))
    }

    pub fn dollars_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    /// Formats as plain decimal dollars with 6 digits, e.g. "0.085000".
    pub fn fmt_dollars(self) -> String {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        format!("{}{}.{:06}", sign, abs / 1_000_000, abs % 1_000_000)
    }

    /// Multiplies by an exact rational, rounding half away from zero.
    pub fn scale_ratio(self, num: u64, den: u64) -> Money {
        assert!(den > 0, "zero denominator");
        let v = self.0 as i128 * num as i128;
        let den = den as i128;
        let half = den / 2;
        let rounded = if v >= 0 {
            (v + half) / den
        } else {
            (v - half) / den
        };
        Money(rounded as i64)
    }

    /// Multiplies by a float factor (bid computation), rounding to micros.
    pub fn scale_f64(self, factor: f64) -> Money {
        Money((self.0 as f64 * factor).round() as i64)
    }

    pub fn times(self, n: u64) -> Money {
        Money(self.0 * n as i64)
    }

    pub fn is_positive(self) -> bool {
        self.0 > 0
    }
}

impl std::ops::Add for Money {
    type Output = Money;
    fn add(self, rhs: Money) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl std::ops::AddAssign for Money {
    fn add_assign(&mut self, rhs: Money) {
        self.0 += rhs.0;
    }
}

impl std::ops::Sub for Money {
    type Output = Money;
    fn sub(self, rhs: Money) -> Money {
        Money(self.0 - rhs.0)
    }
}

impl Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        iter.fold(Money::ZERO, |a, b| a + b)
    }
}

impl std::fmt::Display for Money {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "${}", self.fmt_dollars())
    }
}
