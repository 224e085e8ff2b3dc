use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use chrono::{NaiveDate, NaiveDateTime};
use factr_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sampling interval of a series, in whole seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Frequency {
    seconds: i64,
}

impl Frequency {
    pub const HOURLY: Frequency = Frequency { seconds: 3600 };
    pub const DAILY: Frequency = Frequency { seconds: 86_400 };

    pub fn from_seconds(seconds: i64) -> Result<Self> {
        if seconds <= 0 {
            return Err(Error::Config(format!("frequency must be positive, got {seconds}s")));
        }
        Ok(Self { seconds })
    }

    pub fn seconds(self) -> i64 {
        self.seconds
    }

    /// Number of rows spanning `days` days.
    pub fn rows_per_days(self, days: i64) -> usize {
        (days * 86_400 / self.seconds) as usize
    }
}

impl FromStr for Frequency {
    type Err = Error;

    /// Accepts `<n><unit>` with unit one of `s`, `min`/`t`, `h`, `d`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let split = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
        let (num, unit) = s.split_at(split);
        let n: i64 = if num.is_empty() {
            1
        } else {
            num.parse().map_err(|_| Error::Config(format!("bad frequency '{s}'")))?
        };
        let mult = match unit {
            "s" | "sec" => 1,
            "min" | "t" | "m" => 60,
            "h" | "hour" => 3600,
            "d" | "day" => 86_400,
            _ => return Err(Error::Config(format!("bad frequency unit in '{s}'"))),
        };
        Frequency::from_seconds(n * mult)
    }
}

impl TryFrom<String> for Frequency {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Frequency> for String {
    fn from(f: Frequency) -> String {
        f.to_string()
    }
}

impl fmt::Display for Frequency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.seconds;
        if s % 86_400 == 0 {
            write!(f, "{}d", s / 86_400)
        } else if s % 3600 == 0 {
            write!(f, "{}h", s / 3600)
        } else if s % 60 == 0 {
            write!(f, "{}min", s / 60)
        } else {
            write!(f, "{s}s")
        }
    }
}

/// A fully loaded multivariate series: `values` is `[rows, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesDataset {
    pub values: Tensor<f64>,
    pub timestamps: Option<Vec<NaiveDateTime>>,
    pub channel_names: Vec<String>,
    pub frequency: Frequency,
}

const DATE_FORMATS: &[&str] = &[
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%dT%H:%M:%S%.f",
    "%Y-%m-%d %H:%M:%S%.f",
];

pub(crate) fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    DATE_FORMATS
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(s, fmt).ok())
        .or_else(|| {
            NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .ok()
                .and_then(|d| d.and_hms_opt(0, 0, 0))
        })
}

impl SeriesDataset {
    pub fn new(
        values: Tensor<f64>,
        timestamps: Option<Vec<NaiveDateTime>>,
        channel_names: Vec<String>,
        frequency: Frequency,
    ) -> Result<Self> {
        if values.rank() != 2 || values.shape()[1] != channel_names.len() {
            return Err(Error::Contract(format!(
                "values shape {:?} does not match {} channel names",
                values.shape(),
                channel_names.len()
            )));
        }
        if let Some(ts) = &timestamps {
            if ts.len() != values.shape()[0] {
                return Err(Error::Contract("timestamp count differs from row count".into()));
            }
            check_timestamps(ts, frequency)?;
        }
        Ok(Self {
            values,
            timestamps,
            channel_names,
            frequency,
        })
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn value(&self, row: usize, channel: usize) -> f64 {
        self.values.data()[row * self.channels() + channel]
    }

    /// Channel-major copy: `out[c][row]`.
    pub fn columns(&self) -> Vec<Vec<f64>> {
        let (rows, c) = (self.rows(), self.channels());
        let data = self.values.data();
        (0..c)
            .map(|ch| (0..rows).map(|r| data[r * c + ch]).collect())
            .collect()
    }

    /// Writes the dataset in the same CSV schema [`load_csv_dataset`] reads.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        let mut header: Vec<&str> = Vec::new();
        if self.timestamps.is_some() {
            header.push("date");
        }
        header.extend(self.channel_names.iter().map(String::as_str));
        writeln!(out, "{}", header.join(",")).expect("vec write");
        for r in 0..self.rows() {
            let mut fields: Vec<String> = Vec::with_capacity(header.len());
            if let Some(ts) = &self.timestamps {
                fields.push(ts[r].format("%Y-%m-%d %H:%M:%S").to_string());
            }
            for c in 0..self.channels() {
                fields.push(format!("{}", self.value(r, c)));
            }
            writeln!(out, "{}", fields.join(",")).expect("vec write");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn check_timestamps(ts: &[NaiveDateTime], freq: Frequency) -> Result<()> {
    for (i, pair) in ts.windows(2).enumerate() {
        let step = (pair[1] - pair[0]).num_seconds();
        if step <= 0 {
            return Err(Error::Load {
                row: i + 1,
                reason: format!("timestamp {} is not after {}", pair[1], pair[0]),
            });
        }
        if step != freq.seconds() {
            return Err(Error::Load {
                row: i + 1,
                reason: format!("timestamp step of {step}s does not match frequency {freq}"),
            });
        }
    }
    Ok(())
}

/// Loads a CSV with a header row. A leading column named `date` is parsed as
/// timestamps; every other column is a numeric channel, in file order.
///
/// `frequency` may be omitted when timestamps are present, in which case it
/// is taken from the first two rows. Row indices in errors are 0-based data
/// rows (the header is not counted).
pub fn load_csv_dataset(path: &Path, frequency: Option<Frequency>) -> Result<SeriesDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
            _ => Error::Csv(e),
        })?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let has_date = headers.first().is_some_and(|h| h.eq_ignore_ascii_case("date"));
    let channel_names: Vec<String> = headers[usize::from(has_date)..].to_vec();
    if channel_names.is_empty() {
        return Err(Error::Load {
            row: 0,
            reason: "no channel columns".into(),
        });
    }
    let c = channel_names.len();
    let mut values = Vec::new();
    let mut stamps = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::Load {
                row,
                reason: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let mut fields = record.iter();
        if has_date {
            let raw = fields.next().unwrap_or_default();
            let ts = parse_timestamp(raw).ok_or_else(|| Error::Load {
                row,
                reason: format!("unparseable timestamp '{raw}'"),
            })?;
            stamps.push(ts);
        }
        for (ch, cell) in fields.enumerate() {
            let cell = cell.trim();
            if cell.is_empty() {
                return Err(Error::Load {
                    row,
                    reason: format!("missing value in column '{}'", channel_names[ch]),
                });
            }
            let v: f64 = cell.parse().map_err(|_| Error::Load {
                row,
                reason: format!("non-numeric value '{cell}' in column '{}'", channel_names[ch]),
            })?;
            if !v.is_finite() {
                return Err(Error::Load {
                    row,
                    reason: format!("non-finite value in column '{}'", channel_names[ch]),
                });
            }
            values.push(v);
        }
    }
    let rows = values.len() / c;
    if rows == 0 {
        return Err(Error::Load {
            row: 0,
            reason: "no data rows".into(),
        });
    }
    let timestamps = has_date.then_some(stamps);
    let frequency = match (frequency, &timestamps) {
        (Some(f), _) => f,
        (None, Some(ts)) if ts.len() >= 2 => Frequency::from_seconds((ts[1] - ts[0]).num_seconds())
            .map_err(|_| Error::Load {
                row: 1,
                reason: "timestamps are not increasing".into(),
            })?,
        _ => Frequency::HOURLY,
    };
    SeriesDataset::new(Tensor::new(&[rows, c], values)?, timestamps, channel_names, frequency)
}
