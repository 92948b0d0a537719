//! Deterministic 200-record corpus for end-to-end runs.
//!
//! Web-sourced records point at `<base_url>/img/NNN`; the caller serves
//! [`Fixture::payloads`] there. Archive-sourced records carry pre-stored
//! images, metadata and candidate captions.

use std::io::Cursor;
use std::path::Path;

use chrono::{TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::caption::CaptionCandidateSet;
use crate::meta::MetaRecord;
use crate::model::{write_manifest, ManifestLine, Source, SourceRecord};
use crate::store::BlobStore;

pub const RECORDS: usize = 200;
const WEB: usize = 160;
const ARCHIVE: usize = 30;

/// What the image server should answer for one path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Payload {
    pub path: String,
    /// Status codes for successive requests; the last one repeats.
    pub statuses: Vec<u16>,
    pub body: Vec<u8>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Planted {
    pub no_keyword: usize,
    pub not_found: usize,
    pub zero_byte: usize,
    pub garbage: usize,
    pub transient: usize,
    pub url_duplicates: usize,
    pub near_duplicates: usize,
    pub archive: usize,
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub records: Vec<SourceRecord>,
    pub payloads: Vec<Payload>,
    /// Images for archive-sourced records, keyed by their `image_ref`.
    pub archive_images: Vec<Vec<u8>>,
    pub candidates: Vec<CaptionCandidateSet>,
    pub gazetteer_csv: String,
    pub planted: Planted,
}

pub fn png(width: u32, height: u32, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let img = image::RgbImage::from_fn(width, height, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]));
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png).expect("png encode");
    out
}

const PUB11: [Source; 11] = [
    Source::Laion2b,
    Source::Coyo700m,
    Source::Laioncoco,
    Source::Laion400m,
    Source::Wit,
    Source::Yfcc15m,
    Source::Cc12m,
    Source::Redcaps,
    Source::Cc3m,
    Source::Sbu,
    Source::Vg,
];

const PHRASES: [&str; 10] = [
    "satellite image of farmland",
    "aerial view of the harbour",
    "Sentinel-2 scene over the delta",
    "aerial photo of a stadium",
    "satellite view of the old town",
    "Landsat mosaic of the coast",
    "aerial imagery of a motorway junction",
    "a remote sensing picture of dunes",
    "earth observation pass over glaciers",
    "satellite photo of a solar farm",
];

const PLACES: [&str; 5] = ["Paris", "Cairo", "Lima", "Osaka", "Nairobi"];

const CLASSES: [&str; 5] = ["airport", "port", "stadium", "solar_farm", "crop_field"];

const GAZETTEER: &str = "name,kind,lat,lon,radius_km
Paris,city,48.8566,2.3522,40
France,country,46.6,2.2,600
Cairo,city,30.0444,31.2357,40
Egypt,country,26.8,30.8,700
Lima,city,-12.0464,-77.0428,40
Peru,country,-9.2,-75.0,900
Osaka,city,34.6937,135.5023,40
Japan,country,36.2,138.25,900
Nairobi,city,-1.2921,36.8219,40
Kenya,country,0.02,37.9,500
";

const COORDS: [(f64, f64); 5] = [
    (2.35, 48.86),
    (31.24, 30.04),
    (-77.04, -12.05),
    (135.5, 34.69),
    (36.82, -1.29),
];

/// Build the fixture for an image server at `base_url` (no trailing slash).
pub fn build(base_url: &str) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_f1c7);
    let mut records = Vec::with_capacity(RECORDS);
    let mut payloads = Vec::new();
    let mut planted = Planted::default();
    let mut originals: Vec<(String, Vec<u8>)> = Vec::new();
    let upper_base = base_url.replacen("http://", "HTTP://", 1);

    for i in 0..WEB {
        let source = PUB11[i % PUB11.len()];
        let id = format!("{}-{i:03}", source.as_str());
        let path = format!("/img/{i:03}");
        let caption = if i % 17 == 5 {
            planted.no_keyword += 1;
            format!("a cat sleeping on a sofa, photo {i}")
        } else {
            let place = if i % 7 == 0 { format!(" near {}", PLACES[i % PLACES.len()]) } else { String::new() };
            format!("{}{place}, frame {i}", PHRASES[i % PHRASES.len()])
        };
        let mut record = SourceRecord::new(id, source, caption);
        let (statuses, body) = match i {
            _ if i % 17 == 5 => (vec![200], png(8, 8, &mut rng)),
            _ if i % 20 == 1 => {
                planted.not_found += 1;
                (vec![404], Vec::new())
            }
            _ if i % 40 == 3 => {
                planted.zero_byte += 1;
                (vec![200], Vec::new())
            }
            _ if i % 40 == 23 => {
                planted.garbage += 1;
                (vec![200], b"<html>not an image</html>".to_vec())
            }
            _ if i % 50 == 7 => {
                planted.transient += 1;
                (vec![503, 200], png(8, 8, &mut rng))
            }
            _ if i % 19 == 11 && originals.len() > 2 => {
                // Different URL, same bytes as an earlier image.
                planted.near_duplicates += 1;
                let (_, bytes) = &originals[i % originals.len()];
                (vec![200], bytes.clone())
            }
            _ => {
                let bytes = png(8, 8, &mut rng);
                originals.push((path.clone(), bytes.clone()));
                (vec![200], bytes)
            }
        };
        record.url = Some(format!("{base_url}{path}"));
        payloads.push(Payload { path, statuses, body });
        records.push(record);
    }

    // URL duplicates: case and fragment variants of unique image URLs.
    let unique_paths: Vec<String> = originals.iter().map(|(p, _)| p.clone()).collect();
    let dup_count = RECORDS - WEB - ARCHIVE;
    for d in 0..dup_count {
        let source = PUB11[(d * 3 + 1) % PUB11.len()];
        let target = &unique_paths[(d * 5 + 2) % unique_paths.len()];
        let mut r = SourceRecord::new(
            format!("{}-dup{d:02}", source.as_str()),
            source,
            format!("{} again, copy {d}", PHRASES[d % PHRASES.len()]),
        );
        r.url = Some(format!("{upper_base}{target}#copy{d}"));
        records.push(r);
        planted.url_duplicates += 1;
    }

    let mut archive_images = Vec::new();
    let mut candidates = Vec::new();
    for (n, source) in [Source::Fmow, Source::Bigearthnet, Source::Millionaid].into_iter().enumerate() {
        for j in 0..10usize {
            let bytes = png(16, 16, &mut rng);
            let digest = crate::store::digest_hex(&bytes);
            archive_images.push(bytes);
            let id = format!("{}-{j:03}", source.as_str());
            let class = CLASSES[(j + n) % CLASSES.len()];
            let (lon, lat) = COORDS[j % COORDS.len()];
            let month = (j as u32 % 12) + 1;
            let meta = match source {
                Source::Fmow => MetaRecord {
                    lon: Some(lon + j as f64 * 0.01),
                    lat: Some(lat),
                    timestamp: Some(Utc.with_ymd_and_hms(2016, month, 3, 11, 0, 0).unwrap()),
                    class_label: Some(class.to_string()),
                    bbox: Some([10.0 + j as f64 * 30.0, 20.0, 60.0, 40.0]),
                    image_size: Some([400, 300]),
                    gsd: Some(0.3 + j as f64 * 0.1),
                    cloud_cover: Some(0.05 * j as f64),
                    ..Default::default()
                },
                Source::Bigearthnet => MetaRecord {
                    lon: Some(lon),
                    lat: Some(lat + j as f64 * 0.01),
                    timestamp: Some(Utc.with_ymd_and_hms(2018, month, 20, 9, 30, 0).unwrap()),
                    class_label: Some(class.to_string()),
                    gsd: Some(10.0),
                    ..Default::default()
                },
                _ => MetaRecord { class_label: Some(class.to_string()), ..Default::default() },
            };
            let mut r = SourceRecord::new(&id, source, "");
            r.image_ref = Some(digest);
            r.meta = Some(meta);
            records.push(r);
            let cands: Vec<String> = (0..20)
                .map(|k| format!("{} {}", ["an aerial image showing", "a satellite view of", "a top-down photo of", "an overhead scene with"][k % 4], candidate_tail(class, k)))
                .collect();
            candidates.push(CaptionCandidateSet::new(id, cands).expect("distinct candidates"));
            planted.archive += 1;
        }
    }
    assert_eq!(records.len(), RECORDS);

    Fixture { records, payloads, archive_images, candidates, gazetteer_csv: GAZETTEER.to_string(), planted }
}

fn candidate_tail(class: &str, k: usize) -> String {
    let class = class.replace('_', " ");
    let extras = ["with roads", "beside a river", "surrounded by trees", "in a dense city", "near the coast"];
    format!("a {class} {} ({k})", extras[k % extras.len()])
}

/// Write input manifest, candidates, gazetteer and a config into `dir`,
/// and seed `dir/blobs` with the archive images.
pub fn write(fixture: &Fixture, dir: &Path, seed: u64) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let lines: Vec<ManifestLine> = fixture.records.iter().cloned().map(ManifestLine::kept).collect();
    write_manifest(std::fs::File::create(dir.join("input.jsonl"))?, &lines)?;
    let mut cands = String::new();
    for c in &fixture.candidates {
        cands.push_str(&serde_json::to_string(c).expect("serialize candidates"));
        cands.push('\n');
    }
    std::fs::write(dir.join("candidates.jsonl"), cands)?;
    std::fs::write(dir.join("gazetteer.csv"), &fixture.gazetteer_csv)?;
    let store = BlobStore::new(dir.join("blobs"));
    for img in &fixture.archive_images {
        store.put(img)?;
    }
    std::fs::write(dir.join("config.toml"), config_toml(seed))?;
    Ok(())
}

pub fn config_toml(seed: u64) -> String {
    format!(
        "seed = {seed}

[paths]
input = \"input.jsonl\"
work_dir = \"work\"
blob_store = \"blobs\"
gazetteer = \"gazetteer.csv\"
candidates = \"candidates.jsonl\"

[fetch]
global_concurrency = 16
per_host_concurrency = 8
retries = 2
backoff_base = 5
timeout = 5000

[embedding]
provider = \"test\"
dim = 64

[shard]
max_samples_per_shard = 50
"
    )
}
