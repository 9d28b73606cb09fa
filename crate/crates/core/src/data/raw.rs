//! Rating-log parsing.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// On-disk layout of a rating log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatingFormat {
    /// `user<TAB>item<TAB>rating<TAB>timestamp` (MovieLens 100K `u.data`).
    TabSeparated,
    /// `user::item::rating::timestamp` (MovieLens 1M `ratings.dat`).
    DoubleColon,
    /// Comma-separated with a header row naming the columns.
    Csv,
}

impl FromStr for RatingFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tab" | "tab_separated" | "tsv" => Ok(RatingFormat::TabSeparated),
            "double_colon" | "dat" | "::" => Ok(RatingFormat::DoubleColon),
            "csv" => Ok(RatingFormat::Csv),
            other => Err(Error::InvalidArgument(format!("unknown rating format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub rating: f64,
    pub timestamp: Option<i64>,
}

/// Parsed records in file order, one per distinct (user, item) pair.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawInteractions {
    pub records: Vec<Interaction>,
}

impl RawInteractions {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Collapse repeated (user, item) pairs onto the record with the latest
    /// timestamp. A later record wins ties and absent timestamps, and the
    /// survivor takes the file position of the winning record.
    pub fn dedup_latest(records: Vec<Interaction>) -> RawInteractions {
        let mut slots: Vec<Option<Interaction>> = Vec::with_capacity(records.len());
        let mut seen: HashMap<(String, String), usize> = HashMap::new();
        for rec in records {
            let key = (rec.user.clone(), rec.item.clone());
            match seen.get(&key) {
                Some(&slot) => {
                    let prev = slots[slot].as_ref().expect("live slot");
                    let newer = match (prev.timestamp, rec.timestamp) {
                        (Some(a), Some(b)) => b >= a,
                        _ => true,
                    };
                    if newer {
                        slots[slot] = None;
                        seen.insert(key, slots.len());
                        slots.push(Some(rec));
                    }
                }
                None => {
                    seen.insert(key, slots.len());
                    slots.push(Some(rec));
                }
            }
        }
        RawInteractions {
            records: slots.into_iter().flatten().collect(),
        }
    }
}

/// Read a rating log from disk.
pub fn load_ratings(path: impl AsRef<Path>, format: RatingFormat) -> Result<RawInteractions> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_ratings(BufReader::new(file), format, path)
}

/// Parse a rating log from any reader. `source` is only used in error messages.
pub fn parse_ratings<R: Read>(
    reader: R,
    format: RatingFormat,
    source: impl Into<PathBuf>,
) -> Result<RawInteractions> {
    let source = source.into();
    let records = match format {
        RatingFormat::TabSeparated => parse_delimited(reader, &source, |l| l.split('\t').collect())?,
        RatingFormat::DoubleColon => parse_delimited(reader, &source, |l| l.split("::").collect())?,
        RatingFormat::Csv => parse_csv(reader, &source)?,
    };
    if records.is_empty() {
        return Err(Error::EmptyInput(source));
    }
    Ok(RawInteractions::dedup_latest(records))
}

fn parse_delimited<R: Read>(
    reader: R,
    source: &Path,
    split: impl Fn(&str) -> Vec<&str>,
) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(source, e))?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let fields = split(line);
        if fields.len() < 3 {
            return Err(parse_error(
                source,
                lineno,
                format!("expected at least 3 fields (user, item, rating), found {}", fields.len()),
            ));
        }
        let timestamp = match fields.get(3).map(|s| s.trim()) {
            Some(t) if !t.is_empty() => Some(
                t.parse::<i64>()
                    .map_err(|_| parse_error(source, lineno, format!("bad timestamp {t:?}")))?,
            ),
            _ => None,
        };
        out.push(record(source, lineno, fields[0], fields[1], fields[2], timestamp)?);
    }
    Ok(out)
}

const USER_COLUMNS: &[&str] = &["user", "user_id", "userid", "uid"];
const ITEM_COLUMNS: &[&str] = &["item", "item_id", "itemid", "movieid", "movie_id", "artistid", "artist_id", "iid"];
const RATING_COLUMNS: &[&str] = &["rating", "weight", "count", "score", "value"];
const TIME_COLUMNS: &[&str] = &["timestamp", "time", "ts"];

fn parse_csv<R: Read>(reader: R, source: &Path) -> Result<Vec<Interaction>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.to_ascii_lowercase()).collect();
    let find = |names: &[&str]| headers.iter().position(|h| names.contains(&h.as_str()));
    let (user_col, item_col, rating_col) =
        match (find(USER_COLUMNS), find(ITEM_COLUMNS), find(RATING_COLUMNS)) {
            (Some(u), Some(i), Some(r)) => (u, i, r),
            _ => {
                return Err(parse_error(
                    source,
                    1,
                    format!("header must name user, item and rating columns, got {headers:?}"),
                ))
            }
        };
    let time_col = find(TIME_COLUMNS);
    let mut out = Vec::new();
    for (idx, row) in rdr.records().enumerate() {
        // header is line 1
        let lineno = idx + 2;
        let row = row.map_err(|e| parse_error(source, lineno, e.to_string()))?;
        let get = |c: usize| row.get(c).unwrap_or("");
        let timestamp = match time_col.map(get) {
            Some(t) if !t.is_empty() => Some(
                t.parse::<i64>()
                    .map_err(|_| parse_error(source, lineno, format!("bad timestamp {t:?}")))?,
            ),
            _ => None,
        };
        out.push(record(source, lineno, get(user_col), get(item_col), get(rating_col), timestamp)?);
    }
    Ok(out)
}

fn record(
    source: &Path,
    line: usize,
    user: &str,
    item: &str,
    rating: &str,
    timestamp: Option<i64>,
) -> Result<Interaction> {
    let (user, item) = (user.trim(), item.trim());
    if user.is_empty() || item.is_empty() {
        return Err(parse_error(source, line, "empty user or item id"));
    }
    let rating: f64 = rating
        .trim()
        .parse()
        .map_err(|_| parse_error(source, line, format!("bad rating {rating:?}")))?;
    if !rating.is_finite() || rating < 0.0 {
        return Err(parse_error(source, line, format!("rating must be finite and >= 0, got {rating}")));
    }
    Ok(Interaction {
        user: user.to_string(),
        item: item.to_string(),
        rating,
        timestamp,
    })
}

fn parse_error(source: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: source.to_path_buf(),
        line,
        message: message.into(),
    }
}
