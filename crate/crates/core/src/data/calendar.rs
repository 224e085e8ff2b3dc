use chrono::{Datelike, NaiveDateTime, Timelike};

/// Category counts of the four calendar features, in column order:
/// hour of day, day of week (Monday = 0), day of month, month.
pub const CALENDAR_CARDINALITIES: [usize; 4] = [24, 7, 31, 12];

/// Integer-coded dynamic covariates for every row of a series, `[rows, K]`.
///
/// `K == 0` is the explicit "no dynamic covariates" marker used when the
/// series carries no timestamps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Covariates {
    codes: Vec<usize>,
    k: usize,
    cardinalities: Vec<usize>,
}

impl Covariates {
    pub fn none() -> Self {
        Self {
            codes: Vec::new(),
            k: 0,
            cardinalities: Vec::new(),
        }
    }

    pub fn features(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cardinalities
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.codes[r * self.k..(r + 1) * self.k]
    }

    /// Codes for rows `start..start + len`, flattened `[len, K]`.
    pub fn span(&self, start: usize, len: usize) -> &[usize] {
        &self.codes[start * self.k..(start + len) * self.k]
    }
}

pub fn calendar_codes(ts: &NaiveDateTime) -> [usize; 4] {
    [
        ts.hour() as usize,
        ts.weekday().num_days_from_monday() as usize,
        ts.day0() as usize,
        ts.month0() as usize,
    ]
}

/// Calendar covariates for each timestamp, or the empty marker when the
/// series has none.
pub fn calendar_covariates(timestamps: Option<&[NaiveDateTime]>) -> Covariates {
    match timestamps {
        None => Covariates::none(),
        Some(ts) => Covariates {
            codes: ts.iter().flat_map(calendar_codes).collect(),
            k: CALENDAR_CARDINALITIES.len(),
            cardinalities: CALENDAR_CARDINALITIES.to_vec(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::parse_timestamp;

    #[test]
    fn ett_first_row() {
        // 2016-07-01 was a Friday.
        let ts = parse_timestamp("2016-07-01T00:00").unwrap();
        assert_eq!(calendar_codes(&ts), [0, 4, 0, 6]);
    }

    #[test]
    fn sub_hourly_data_buckets_by_hour() {
        let ts: Vec<_> = ["2020-12-31 23:40:00", "2020-12-31 23:50:00", "2021-01-01 00:00:00"]
            .iter()
            .map(|s| parse_timestamp(s).unwrap())
            .collect();
        let cov = calendar_covariates(Some(&ts));
        assert_eq!(cov.features(), 4);
        assert_eq!(cov.row(0), &[23, 3, 30, 11]);
        assert_eq!(cov.row(1), &[23, 3, 30, 11]);
        assert_eq!(cov.row(2), &[0, 4, 0, 0]);
        for r in 0..3 {
            for (code, card) in cov.row(r).iter().zip(CALENDAR_CARDINALITIES) {
                assert!(*code < card);
            }
        }
    }

    #[test]
    fn no_timestamps_gives_empty_marker() {
        let cov = calendar_covariates(None);
        assert!(cov.is_empty());
        assert_eq!(cov.features(), 0);
    }
}
