//! Structured metadata rendered into caption sentences.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use chrono::{DateTime, Datelike, Utc};
use serde::{Deserialize, Serialize};

use crate::geo::utm_designator;
use crate::model::{Source, SourceRecord};

pub const DEFAULT_META_TEMPLATES: &str = include_str!("../assets/meta_templates.toml");

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetaError {
    #[error("longitude {0} outside [-180, 180)")]
    Longitude(f64),
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("bbox {bbox:?} exceeds image size {size:?}")]
    BboxOutside { bbox: [f64; 4], size: [u32; 2] },
    #[error("bbox {0:?} has negative extent")]
    BboxNegative([f64; 4]),
    #[error("cloud_cover {0} outside [0, 1]")]
    CloudCover(f64),
    #[error("gsd {0} must be positive")]
    Gsd(f64),
    #[error("{0} is not finite")]
    NotFinite(&'static str),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<String>,
    /// (x, y, w, h) in pixels, y = 0 at the top.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    /// (W, H) in pixels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_size: Option<[u32; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gsd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utm: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloud_cover: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan_direction: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_azimuth: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub off_nadir: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub city: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub country: Option<String>,
}

impl MetaRecord {
    pub fn validate(&self) -> Result<(), MetaError> {
        for (name, v) in [
            ("lon", self.lon),
            ("lat", self.lat),
            ("gsd", self.gsd),
            ("cloud_cover", self.cloud_cover),
            ("target_azimuth", self.target_azimuth),
            ("off_nadir", self.off_nadir),
        ] {
            if v.is_some_and(|v| !v.is_finite()) {
                return Err(MetaError::NotFinite(name));
            }
        }
        if let Some(lon) = self.lon {
            if !(-180.0..180.0).contains(&lon) {
                return Err(MetaError::Longitude(lon));
            }
        }
        if let Some(lat) = self.lat {
            if !(-90.0..=90.0).contains(&lat) {
                return Err(MetaError::Latitude(lat));
            }
        }
        if let Some(c) = self.cloud_cover {
            if !(0.0..=1.0).contains(&c) {
                return Err(MetaError::CloudCover(c));
            }
        }
        if let Some(g) = self.gsd {
            if g <= 0.0 {
                return Err(MetaError::Gsd(g));
            }
        }
        if let Some(b) = self.bbox {
            if b.iter().any(|v| !v.is_finite()) {
                return Err(MetaError::NotFinite("bbox"));
            }
            if b[0] < 0.0 || b[1] < 0.0 || b[2] < 0.0 || b[3] < 0.0 {
                return Err(MetaError::BboxNegative(b));
            }
            if let Some(size) = self.image_size {
                check_bbox(b, size)?;
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self == &MetaRecord::default()
    }
}

fn check_bbox(b: [f64; 4], size: [u32; 2]) -> Result<(), MetaError> {
    if b[0] + b[2] > size[0] as f64 || b[1] + b[3] > size[1] as f64 || b.iter().any(|v| *v < 0.0) {
        return Err(MetaError::BboxOutside { bbox: b, size });
    }
    Ok(())
}

/// Meteorological season, flipped for the southern hemisphere.
pub fn derive_season(timestamp: &DateTime<Utc>, lat: Option<f64>) -> Option<&'static str> {
    let lat = lat?;
    let north = match timestamp.month() {
        12 | 1 | 2 => "winter",
        3..=5 => "spring",
        6..=8 => "summer",
        _ => "autumn",
    };
    if lat >= 0.0 {
        return Some(north);
    }
    Some(match north {
        "winter" => "summer",
        "summer" => "winter",
        "spring" => "autumn",
        _ => "spring",
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Vertical {
    Top,
    Centre,
    Bottom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Horizontal {
    Left,
    Centre,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelativeLocation {
    pub vertical: Vertical,
    pub horizontal: Horizontal,
}

impl fmt::Display for RelativeLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = match self.vertical {
            Vertical::Top => "top",
            Vertical::Centre => "centre",
            Vertical::Bottom => "bottom",
        };
        let h = match self.horizontal {
            Horizontal::Left => "left",
            Horizontal::Centre => "centre",
            Horizontal::Right => "right",
        };
        write!(f, "{v}-{h}")
    }
}

/// Thirds grid cell of the bbox centre.
pub fn relative_location(bbox: [f64; 4], image_size: [u32; 2]) -> Result<RelativeLocation, MetaError> {
    check_bbox(bbox, image_size)?;
    let cx = (bbox[0] + bbox[2] / 2.0) / image_size[0] as f64;
    let cy = (bbox[1] + bbox[3] / 2.0) / image_size[1] as f64;
    let third = |t: f64| {
        if t < 1.0 / 3.0 {
            0
        } else if t < 2.0 / 3.0 {
            1
        } else {
            2
        }
    };
    let vertical = [Vertical::Top, Vertical::Centre, Vertical::Bottom][third(cy)];
    let horizontal = [Horizontal::Left, Horizontal::Centre, Horizontal::Right][third(cx)];
    Ok(RelativeLocation { vertical, horizontal })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazetteerEntry {
    pub name: String,
    pub kind: String,
    pub lat: f64,
    pub lon: f64,
    pub radius_km: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum GazetteerError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gazetteer {
    pub entries: Vec<GazetteerEntry>,
}

pub const EARTH_RADIUS_KM: f64 = 6371.0088;

pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = (lat2 - lat1).to_radians();
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GeoNames {
    pub city: Option<String>,
    pub country: Option<String>,
}

impl Gazetteer {
    /// CSV with header `name,kind,lat,lon,radius_km`.
    pub fn from_reader<R: std::io::Read>(r: R) -> Result<Self, GazetteerError> {
        let mut rdr = csv::Reader::from_reader(r);
        let entries = rdr.deserialize().collect::<Result<Vec<GazetteerEntry>, _>>()?;
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, GazetteerError> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    /// Nearest entry of `kind` whose radius covers the point.
    pub fn nearest(&self, lon: f64, lat: f64, kind: &str) -> Option<&GazetteerEntry> {
        self.entries
            .iter()
            .filter(|e| e.kind.eq_ignore_ascii_case(kind))
            .map(|e| (e, haversine_km(lat, lon, e.lat, e.lon)))
            .filter(|(e, d)| *d <= e.radius_km)
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(e, _)| e)
    }

    pub fn reverse_geocode(&self, lon: f64, lat: f64) -> GeoNames {
        GeoNames {
            city: self.nearest(lon, lat, "city").map(|e| e.name.clone()),
            country: self.nearest(lon, lat, "country").map(|e| e.name.clone()),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }
}

/// Fill `utm`, `city` and `country` from coordinates where absent.
pub fn enrich(meta: &mut MetaRecord, gazetteer: Option<&Gazetteer>) {
    let (Some(lon), Some(lat)) = (meta.lon, meta.lat) else {
        return;
    };
    if meta.utm.is_none() {
        meta.utm = utm_designator(lon, lat).ok();
    }
    if let Some(g) = gazetteer {
        let names = g.reverse_geocode(lon, lat);
        if meta.city.is_none() {
            meta.city = names.city;
        }
        if meta.country.is_none() {
            meta.country = names.country;
        }
    }
}

/// Fields available to templates: every MetaRecord field plus the derived
/// `season`, `relative_location` and `date`.
pub const TEMPLATE_FIELDS: &[&str] = &[
    "lon", "lat", "timestamp", "class_label", "bbox", "image_size", "gsd", "utm", "cloud_cover",
    "scan_direction", "target_azimuth", "off_nadir", "city", "country", "season", "relative_location", "date",
];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TemplateError {
    #[error("clause {index} ({group}): unknown placeholder {{{name}}}")]
    UnknownField { index: usize, group: String, name: String },
    #[error("clause {index} ({group}): unbalanced braces")]
    Unbalanced { index: usize, group: String },
    #[error("template file: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clause {
    pub group: String,
    pub template: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaTemplateSet {
    clauses: Vec<(Clause, Vec<Piece>)>,
}

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Text(String),
    Field(String),
}

fn parse_template(index: usize, clause: &Clause) -> Result<Vec<Piece>, TemplateError> {
    let mut pieces = Vec::new();
    let mut rest = clause.template.as_str();
    let unbalanced = || TemplateError::Unbalanced { index, group: clause.group.clone() };
    while let Some(open) = rest.find(['{', '}']) {
        if rest.as_bytes()[open] == b'}' {
            return Err(unbalanced());
        }
        if open > 0 {
            pieces.push(Piece::Text(rest[..open].to_string()));
        }
        let close = rest[open..].find('}').ok_or_else(unbalanced)? + open;
        let name = &rest[open + 1..close];
        if !TEMPLATE_FIELDS.contains(&name) {
            return Err(TemplateError::UnknownField { index, group: clause.group.clone(), name: name.to_string() });
        }
        pieces.push(Piece::Field(name.to_string()));
        rest = &rest[close + 1..];
    }
    if !rest.is_empty() {
        pieces.push(Piece::Text(rest.to_string()));
    }
    Ok(pieces)
}

#[derive(Deserialize)]
struct TemplateFile {
    clause: Vec<Clause>,
}

impl MetaTemplateSet {
    pub fn new(clauses: Vec<Clause>) -> Result<Self, TemplateError> {
        let clauses = clauses
            .into_iter()
            .enumerate()
            .map(|(i, c)| parse_template(i, &c).map(|p| (c, p)))
            .collect::<Result<_, _>>()?;
        Ok(Self { clauses })
    }

    pub fn from_toml(text: &str) -> Result<Self, TemplateError> {
        let file: TemplateFile = toml::from_str(text).map_err(|e| TemplateError::Parse(e.to_string()))?;
        Self::new(file.clause)
    }

    pub fn bundled() -> Self {
        Self::from_toml(DEFAULT_META_TEMPLATES).expect("bundled meta templates")
    }

    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        let text = std::fs::read_to_string(path).map_err(|e| TemplateError::Parse(e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn clauses(&self) -> impl Iterator<Item = &Clause> {
        self.clauses.iter().map(|(c, _)| c)
    }
}

fn num(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".to_string() } else { s.to_string() }
}

fn field_values(meta: &MetaRecord) -> BTreeMap<&'static str, String> {
    let mut m = BTreeMap::new();
    let mut put = |k: &'static str, v: Option<String>| {
        if let Some(v) = v.filter(|v| !v.is_empty()) {
            m.insert(k, v);
        }
    };
    put("lon", meta.lon.map(num));
    put("lat", meta.lat.map(num));
    put("timestamp", meta.timestamp.map(|t| t.format("%Y-%m-%d %H:%M UTC").to_string()));
    put("date", meta.timestamp.map(|t| t.format("%B %-d, %Y").to_string()));
    put("class_label", meta.class_label.as_ref().map(|c| c.replace('_', " ")));
    put("bbox", meta.bbox.map(|b| format!("{}x{} pixels at ({}, {})", num(b[2]), num(b[3]), num(b[0]), num(b[1]))));
    put("image_size", meta.image_size.map(|s| format!("{}x{}", s[0], s[1])));
    put("gsd", meta.gsd.map(num));
    put("utm", meta.utm.clone());
    put("cloud_cover", meta.cloud_cover.map(|c| num(c * 100.0)));
    put("scan_direction", meta.scan_direction.clone());
    put("target_azimuth", meta.target_azimuth.map(num));
    put("off_nadir", meta.off_nadir.map(num));
    put("city", meta.city.clone());
    put("country", meta.country.clone());
    put("season", meta.timestamp.and_then(|t| derive_season(&t, meta.lat)).map(String::from));
    put(
        "relative_location",
        match (meta.bbox, meta.image_size) {
            (Some(b), Some(s)) => relative_location(b, s).ok().map(|l| l.to_string()),
            _ => None,
        },
    );
    m
}

/// Clauses whose placeholders are all present, in template order, joined
/// with ", " and closed with a period. Empty metadata renders as "".
pub fn render_meta_caption(meta: &MetaRecord, templates: &MetaTemplateSet) -> String {
    let values = field_values(meta);
    let mut parts: Vec<String> = Vec::new();
    'clauses: for (_, pieces) in &templates.clauses {
        let mut s = String::new();
        for p in pieces {
            match p {
                Piece::Text(t) => s.push_str(t),
                Piece::Field(f) => match values.get(f.as_str()) {
                    Some(v) => s.push_str(v),
                    None => continue 'clauses,
                },
            }
        }
        let s = s.trim();
        if !s.is_empty() {
            parts.push(s.to_string());
        }
    }
    if parts.is_empty() {
        return String::new();
    }
    let mut sentence = parts.join(", ");
    if let Some(first) = sentence.chars().next() {
        let upper: String = first.to_uppercase().collect();
        sentence.replace_range(..first.len_utf8(), &upper);
    }
    if !sentence.ends_with('.') {
        sentence.push('.');
    }
    sentence
}

/// Redcaps timestamps are not rendered.
pub fn render_for_source(meta: &MetaRecord, source: Source, templates: &MetaTemplateSet) -> String {
    if source == Source::Redcaps && meta.timestamp.is_some() {
        let mut m = meta.clone();
        m.timestamp = None;
        return render_meta_caption(&m, templates);
    }
    render_meta_caption(meta, templates)
}

pub fn merge_captions(meta_sentence: &str, generated: &str) -> String {
    let (a, b) = (meta_sentence.trim(), generated.trim());
    match (a.is_empty(), b.is_empty()) {
        (true, _) => b.to_string(),
        (_, true) => a.to_string(),
        _ => format!("{a} {b}"),
    }
}

/// Enrich and render a record's metadata, then prefix it to the caption.
pub fn apply_meta_caption(record: &mut SourceRecord, templates: &MetaTemplateSet, gazetteer: Option<&Gazetteer>) {
    let Some(meta) = record.meta.as_mut() else {
        return;
    };
    enrich(meta, gazetteer);
    let sentence = render_for_source(meta, record.source, templates);
    record.caption = merge_captions(&sentence, &record.caption);
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn ts(month: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2017, month, 15, 10, 30, 0).unwrap()
    }

    fn gazetteer() -> Gazetteer {
        let csv = "name,kind,lat,lon,radius_km\n\
                   Paris,city,48.8566,2.3522,50\n\
                   Lyon,city,45.7640,4.8357,50\n\
                   France,country,46.6,2.2,600\n\
                   Orleans,city,47.9030,1.9093,400\n";
        Gazetteer::from_reader(csv.as_bytes()).unwrap()
    }

    fn fmow() -> MetaRecord {
        MetaRecord {
            lon: Some(2.35),
            lat: Some(48.85),
            timestamp: Some(ts(7)),
            class_label: Some("airport".into()),
            bbox: Some([800.0, 10.0, 100.0, 80.0]),
            image_size: Some([1000, 1000]),
            gsd: Some(0.5),
            utm: None,
            cloud_cover: Some(0.1),
            scan_direction: Some("forward".into()),
            target_azimuth: Some(120.0),
            off_nadir: Some(12.5),
            city: None,
            country: None,
        }
    }

    #[test]
    fn season_examples() {
        assert_eq!(derive_season(&ts(7), Some(48.0)), Some("summer"));
        assert_eq!(derive_season(&ts(7), Some(-33.0)), Some("winter"));
        assert_eq!(derive_season(&ts(7), None), None);
        assert_eq!(derive_season(&ts(12), Some(10.0)), Some("winter"));
        assert_eq!(derive_season(&ts(4), Some(-1.0)), Some("autumn"));
    }

    #[test]
    fn relative_location_examples() {
        assert_eq!(relative_location([450.0, 450.0, 100.0, 100.0], [1000, 1000]).unwrap().to_string(), "centre-centre");
        assert_eq!(relative_location([850.0, 50.0, 100.0, 100.0], [1000, 1000]).unwrap().to_string(), "top-right");
        assert!(relative_location([950.0, 50.0, 100.0, 100.0], [1000, 1000]).is_err());
        let bad = MetaRecord { bbox: Some([950.0, 0.0, 100.0, 10.0]), image_size: Some([1000, 1000]), ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn reverse_geocode_examples() {
        let g = gazetteer();
        assert_eq!(g.reverse_geocode(4.8357, 45.7640).city.as_deref(), Some("Lyon"));
        let far = Gazetteer::from_reader("name,kind,lat,lon,radius_km\nA,city,0,0,50\nB,city,10,10,50\n".as_bytes()).unwrap();
        assert_eq!(far.reverse_geocode(100.0, 50.0), GeoNames::default());

        // Between Paris and Orleans: Orleans' wide radius covers both, the nearer wins.
        let (lon, lat) = (2.2, 48.5);
        let d_paris = haversine_km(lat, lon, 48.8566, 2.3522);
        let d_orleans = haversine_km(lat, lon, 47.9030, 1.9093);
        assert!(d_paris < d_orleans);
        assert_eq!(g.reverse_geocode(lon, lat).city.as_deref(), Some("Paris"));
        assert_eq!(g.reverse_geocode(lon, lat).country.as_deref(), Some("France"));
    }

    #[test]
    fn haversine_hand_computation() {
        // One degree of longitude on the equator is R * pi / 180.
        assert!((haversine_km(0.0, 0.0, 0.0, 1.0) - EARTH_RADIUS_KM * std::f64::consts::PI / 180.0).abs() < 1e-9);
        // Paris to London is about 343.5 km.
        assert!((haversine_km(48.8566, 2.3522, 51.5074, -0.1278) - 343.5).abs() < 1.0);
    }

    #[test]
    fn render_examples() {
        let t = MetaTemplateSet::bundled();
        let only = MetaRecord { class_label: Some("airport".into()), ..Default::default() };
        let s = render_meta_caption(&only, &t);
        assert!(s.contains("airport"), "{s}");
        assert!(!s.contains("UTM") && !s.contains("season") && !s.contains("summer"), "{s}");
        assert!(s.ends_with('.'));
        assert_eq!(render_meta_caption(&MetaRecord::default(), &t), "");

        let mut full = fmow();
        enrich(&mut full, Some(&gazetteer()));
        assert_eq!(full.utm.as_deref(), Some("31U"));
        assert_eq!(full.city.as_deref(), Some("Paris"));
        let s = render_meta_caption(&full, &t);
        for needle in ["airport", "summer", "31U", "0.5", "top-right", "Paris", "France"] {
            assert!(s.contains(needle), "missing {needle}: {s}");
        }
        assert_eq!(render_meta_caption(&full, &t), s);
    }

    #[test]
    fn redcaps_timestamp_excluded() {
        let t = MetaTemplateSet::bundled();
        let m = MetaRecord { timestamp: Some(ts(7)), ..Default::default() };
        assert!(!render_for_source(&m, Source::Redcaps, &t).contains("2017"));
        assert!(render_for_source(&m, Source::Fmow, &t).contains("2017"));
    }

    #[test]
    fn template_validation() {
        let bad = "[[clause]]\ngroup = \"x\"\ntemplate = \"near {volcano}\"\n";
        assert!(matches!(MetaTemplateSet::from_toml(bad), Err(TemplateError::UnknownField { .. })));
        let unbalanced = "[[clause]]\ngroup = \"x\"\ntemplate = \"near {city\"\n";
        assert!(matches!(MetaTemplateSet::from_toml(unbalanced), Err(TemplateError::Unbalanced { .. })));
    }

    #[test]
    fn merge_examples() {
        assert_eq!(merge_captions("A.", "B."), "A. B.");
        assert_eq!(merge_captions("", "B."), "B.");
        assert_eq!(merge_captions("A.", ""), "A.");
    }

    fn rendered_clauses(meta: &MetaRecord, t: &MetaTemplateSet) -> Vec<String> {
        let single = |c: &Clause| MetaTemplateSet::new(vec![c.clone()]).unwrap();
        t.clauses().map(|c| render_meta_caption(meta, &single(c))).collect()
    }

    proptest! {
        #[test]
        fn omission_monotonicity(mask in any::<u16>()) {
            let t = MetaTemplateSet::bundled();
            let full = fmow();
            let mut partial = full.clone();
            if mask & 1 != 0 { partial.class_label = None; }
            if mask & 2 != 0 { partial.gsd = None; }
            if mask & 4 != 0 { partial.cloud_cover = None; }
            if mask & 8 != 0 { partial.off_nadir = None; }
            if mask & 16 != 0 { partial.scan_direction = None; }
            if mask & 32 != 0 { partial.target_azimuth = None; }
            let a = rendered_clauses(&full, &t);
            let b = rendered_clauses(&partial, &t);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(y.is_empty() || x == y);
            }
            prop_assert_eq!(render_meta_caption(&partial, &t), render_meta_caption(&partial, &t));
        }

        #[test]
        fn season_flip(month in 1u32..=12, lat in 0.1f64..90.0) {
            let t = ts(month);
            let n = derive_season(&t, Some(lat)).unwrap();
            let s = derive_season(&t, Some(-lat)).unwrap();
            let pair = [("winter", "summer"), ("summer", "winter"), ("spring", "autumn"), ("autumn", "spring")];
            prop_assert!(pair.contains(&(n, s)));
        }
    }
}
