//! UTM zone/band designators, zone histograms and dictionary location matching.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub const BANDS: &[u8; 20] = b"CDEFGHJKLMNPQRSTUVWX";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeoError {
    #[error("longitude {0} is not finite")]
    NonFiniteLongitude(f64),
    #[error("longitude {0} outside [-180, 180]")]
    LongitudeRange(f64),
    #[error("latitude {0} outside the UTM bands [-80, 84)")]
    OutOfBand(f64),
    #[error("invalid designator '{0}'")]
    BadDesignator(String),
}

pub fn utm_zone_number(lon: f64) -> Result<u8, GeoError> {
    if !lon.is_finite() {
        return Err(GeoError::NonFiniteLongitude(lon));
    }
    if !(-180.0..=180.0).contains(&lon) {
        return Err(GeoError::LongitudeRange(lon));
    }
    let lon = if lon == 180.0 { -180.0 } else { lon };
    let zone = ((lon + 180.0) / 6.0).floor() as i64 + 1;
    Ok(zone.clamp(1, 60) as u8)
}

pub fn latitude_band(lat: f64) -> Result<char, GeoError> {
    if !(lat >= -80.0 && lat < 84.0) {
        return Err(GeoError::OutOfBand(lat));
    }
    let idx = (((lat + 80.0) / 8.0).floor() as usize).min(BANDS.len() - 1);
    Ok(BANDS[idx] as char)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UtmDesignator {
    pub zone: u8,
    pub band: char,
}

impl UtmDesignator {
    pub fn from_lon_lat(lon: f64, lat: f64) -> Result<Self, GeoError> {
        Ok(Self { zone: utm_zone_number(lon)?, band: latitude_band(lat)? })
    }
}

impl fmt::Display for UtmDesignator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.zone, self.band)
    }
}

impl FromStr for UtmDesignator {
    type Err = GeoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || GeoError::BadDesignator(s.to_string());
        let band = s.chars().last().ok_or_else(bad)?.to_ascii_uppercase();
        let zone: u8 = s[..s.len() - band.len_utf8()].parse().map_err(|_| bad())?;
        if !(1..=60).contains(&zone) || !BANDS.contains(&(band as u8)) {
            return Err(bad());
        }
        Ok(Self { zone, band })
    }
}

impl Serialize for UtmDesignator {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for UtmDesignator {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn utm_designator(lon: f64, lat: f64) -> Result<String, GeoError> {
    UtmDesignator::from_lon_lat(lon, lat).map(|d| d.to_string())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ZoneHistogram {
    pub counts: BTreeMap<String, u64>,
    pub skipped: u64,
}

impl ZoneHistogram {
    pub fn total(&self) -> u64 {
        self.counts.values().sum::<u64>() + self.skipped
    }

    pub fn add(&mut self, lon: f64, lat: f64) {
        match utm_designator(lon, lat) {
            Ok(d) => *self.counts.entry(d).or_default() += 1,
            Err(_) => self.skipped += 1,
        }
    }

    pub fn merge(&mut self, other: &ZoneHistogram) {
        for (k, v) in &other.counts {
            *self.counts.entry(k.clone()).or_default() += v;
        }
        self.skipped += other.skipped;
    }

    /// Descending by count, then designator.
    pub fn sorted(&self) -> Vec<(String, u64)> {
        let mut v: Vec<(String, u64)> = self.counts.iter().map(|(k, &c)| (k.clone(), c)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        v
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["designator", "count"])?;
        for (d, c) in self.sorted() {
            w.write_record([d, c.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn zone_histogram(points: impl IntoIterator<Item = (f64, f64)>) -> ZoneHistogram {
    let mut h = ZoneHistogram::default();
    for (lon, lat) in points {
        h.add(lon, lat);
    }
    h
}

/// Dictionary matcher for place names: case-insensitive, word-delimited,
/// longest match wins and overlapping shorter matches are dropped.
#[derive(Debug, Clone)]
pub struct LocationMatcher {
    names: Vec<(Vec<char>, String)>,
}

impl LocationMatcher {
    pub fn new<S: AsRef<str>>(names: impl IntoIterator<Item = S>) -> Self {
        let mut names: Vec<(Vec<char>, String)> = names
            .into_iter()
            .map(|n| n.as_ref().trim().to_string())
            .filter(|n| !n.is_empty())
            .map(|n| (n.chars().flat_map(char::to_lowercase).collect(), n))
            .collect();
        names.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.1.cmp(&b.1)));
        names.dedup_by(|a, b| a.0 == b.0);
        Self { names }
    }

    pub fn extract(&self, text: &str) -> Vec<String> {
        let lower: Vec<char> = text.chars().flat_map(char::to_lowercase).collect();
        let is_word = |c: char| c.is_alphanumeric() || c == '_';
        let mut out = Vec::new();
        let mut i = 0;
        while i < lower.len() {
            if i > 0 && is_word(lower[i - 1]) {
                i += 1;
                continue;
            }
            let hit = self.names.iter().find(|(n, _)| {
                let end = i + n.len();
                end <= lower.len() && lower[i..end] == n[..] && (end == lower.len() || !is_word(lower[end]))
            });
            match hit {
                Some((n, name)) => {
                    out.push(name.clone());
                    i += n.len();
                }
                None => i += 1,
            }
        }
        out
    }
}

pub fn extract_locations<S: AsRef<str>>(text: &str, names: impl IntoIterator<Item = S>) -> Vec<String> {
    LocationMatcher::new(names).extract(text)
}
