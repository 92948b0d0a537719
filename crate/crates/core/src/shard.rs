//! Webdataset-style tar shards: `<key>.jpg`, `<key>.txt`, `<key>.json` per sample.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const MEMBERS: [&str; 3] = ["jpg", "txt", "json"];

#[derive(Debug, thiserror::Error)]
pub enum ShardError {
    #[error("duplicate key '{0}'")]
    DuplicateKey(String),
    #[error("records '{first}' and '{second}' both sanitize to key '{key}'")]
    KeyCollision { key: String, first: String, second: String },
    #[error("key is empty")]
    EmptyKey,
    #[error("max_samples_per_shard must be at least 1")]
    ZeroShardSize,
    #[error("sample '{key}' is missing its .{member} member")]
    MissingMember { key: String, member: String },
    #[error("unexpected member '{0}'")]
    UnexpectedMember(String),
    #[error("corrupt tar at byte offset {offset}: {detail}")]
    Corrupt { offset: u64, detail: String },
    #[error("caption for '{0}' is not UTF-8")]
    Utf8(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShardSpec {
    pub max_samples_per_shard: usize,
    /// `{index}` expands to the zero-padded shard index.
    pub name_pattern: String,
}

impl Default for ShardSpec {
    fn default() -> Self {
        Self { max_samples_per_shard: 10_000, name_pattern: "shard-{index}.tar".into() }
    }
}

impl ShardSpec {
    pub fn shard_name(&self, index: usize) -> String {
        self.name_pattern.replace("{index}", &format!("{index:06}"))
    }

    pub fn validate(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.max_samples_per_shard == 0 {
            p.push("max_samples_per_shard must be at least 1".to_string());
        }
        if !self.name_pattern.contains("{index}") {
            p.push("name_pattern must contain {index}".to_string());
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardSample {
    pub key: String,
    pub image: Vec<u8>,
    pub caption: String,
    /// Serialized JSON, stored verbatim.
    pub meta: Vec<u8>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ShardIndex {
    pub shards: Vec<PathBuf>,
    /// (key, shard file name) in sample order.
    pub entries: Vec<(String, String)>,
    pub warnings: Vec<String>,
}

impl ShardIndex {
    pub fn write_csv(&self, path: &Path) -> Result<(), ShardError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["key", "shard_file"])?;
        for (k, s) in &self.entries {
            w.write_record([k, s])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Replace anything outside `[A-Za-z0-9_-]` with `_`. Dots are replaced
/// too: webdataset readers split the member name at the first dot.
pub fn sanitize_key(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Sanitize record ids, rejecting duplicates and collisions.
pub fn assign_keys<'a>(ids: impl IntoIterator<Item = &'a str>) -> Result<Vec<String>, ShardError> {
    let mut seen: HashMap<String, &str> = HashMap::new();
    let mut keys = Vec::new();
    for id in ids {
        let key = sanitize_key(id);
        if key.is_empty() {
            return Err(ShardError::EmptyKey);
        }
        if let Some(prev) = seen.insert(key.clone(), id) {
            if prev == id {
                return Err(ShardError::DuplicateKey(id.to_string()));
            }
            return Err(ShardError::KeyCollision { key, first: prev.to_string(), second: id.to_string() });
        }
        keys.push(key);
    }
    Ok(keys)
}

fn append<W: Write>(b: &mut tar::Builder<W>, name: &str, data: &[u8]) -> io::Result<()> {
    let mut h = tar::Header::new_gnu();
    h.set_size(data.len() as u64);
    h.set_mode(0o644);
    h.set_mtime(0);
    h.set_uid(0);
    h.set_gid(0);
    h.set_entry_type(tar::EntryType::Regular);
    b.append_data(&mut h, name, data)
}

fn write_one(path: &Path, samples: &[ShardSample]) -> Result<(), ShardError> {
    let tmp = path.with_extension("tar.tmp");
    let mut b = tar::Builder::new(BufWriter::new(File::create(&tmp)?));
    b.mode(tar::HeaderMode::Deterministic);
    for s in samples {
        append(&mut b, &format!("{}.jpg", s.key), &s.image)?;
        append(&mut b, &format!("{}.txt", s.key), s.caption.as_bytes())?;
        append(&mut b, &format!("{}.json", s.key), &s.meta)?;
    }
    b.into_inner()?.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Write samples in order, `max_samples_per_shard` per file, shards in parallel.
pub fn write_shards(samples: &[ShardSample], spec: &ShardSpec, out_dir: &Path) -> Result<ShardIndex, ShardError> {
    if spec.max_samples_per_shard == 0 {
        return Err(ShardError::ZeroShardSize);
    }
    let mut seen = HashMap::new();
    for s in samples {
        if s.key.is_empty() {
            return Err(ShardError::EmptyKey);
        }
        if seen.insert(s.key.as_str(), ()).is_some() {
            return Err(ShardError::DuplicateKey(s.key.clone()));
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let mut index = ShardIndex::default();
    if samples.is_empty() {
        index.warnings.push("no samples to write; zero shards produced".to_string());
        return Ok(index);
    }
    let chunks: Vec<(usize, &[ShardSample])> = samples.chunks(spec.max_samples_per_shard).enumerate().collect();
    chunks
        .par_iter()
        .map(|(i, chunk)| write_one(&out_dir.join(spec.shard_name(*i)), chunk))
        .collect::<Result<Vec<()>, _>>()?;
    for (i, chunk) in chunks {
        let name = spec.shard_name(i);
        index.entries.extend(chunk.iter().map(|s| (s.key.clone(), name.clone())));
        index.shards.push(out_dir.join(name));
    }
    Ok(index)
}

fn corrupt(offset: u64, e: impl std::fmt::Display) -> ShardError {
    ShardError::Corrupt { offset, detail: e.to_string() }
}

fn pad512(n: u64) -> u64 {
    n.div_ceil(512) * 512
}

/// Read every sample from a shard in stored order.
pub fn read_shard(path: &Path) -> Result<Vec<ShardSample>, ShardError> {
    read_shard_from(File::open(path)?)
}

pub fn read_shard_from<R: Read>(reader: R) -> Result<Vec<ShardSample>, ShardError> {
    let mut archive = tar::Archive::new(reader);
    let mut out: Vec<ShardSample> = Vec::new();
    let mut current: Option<(String, [Option<Vec<u8>>; 3])> = None;
    let mut next_offset = 0u64;
    let mut finished = std::collections::HashSet::new();

    fn finish(out: &mut Vec<ShardSample>, cur: (String, [Option<Vec<u8>>; 3])) -> Result<(), ShardError> {
        let (key, [jpg, txt, json]) = cur;
        let missing = |m: &str| ShardError::MissingMember { key: key.clone(), member: m.to_string() };
        let image = jpg.ok_or_else(|| missing("jpg"))?;
        let caption = txt.ok_or_else(|| missing("txt"))?;
        let meta = json.ok_or_else(|| missing("json"))?;
        let caption = String::from_utf8(caption).map_err(|_| ShardError::Utf8(key.clone()))?;
        out.push(ShardSample { key, image, caption, meta });
        Ok(())
    }

    let entries = archive.entries().map_err(|e| corrupt(0, e))?;
    for entry in entries {
        let mut entry = entry.map_err(|e| corrupt(next_offset, e))?;
        let data_at = entry.raw_file_position();
        let size = entry.size();
        next_offset = data_at + pad512(size);
        let path = entry.path().map_err(|e| corrupt(entry.raw_header_position(), e))?.to_string_lossy().into_owned();
        let (key, ext) = path.split_once('.').ok_or_else(|| ShardError::UnexpectedMember(path.clone()))?;
        let slot = MEMBERS.iter().position(|m| *m == ext).ok_or_else(|| ShardError::UnexpectedMember(path.clone()))?;
        let mut data = Vec::with_capacity(size as usize);
        entry.read_to_end(&mut data).map_err(|e| corrupt(data_at, e))?;
        if data.len() as u64 != size {
            return Err(corrupt(data_at, "truncated member"));
        }
        if current.as_ref().is_some_and(|(k, _)| k != key) {
            finish(&mut out, current.take().expect("checked"))?;
        }
        if current.is_none() && !finished.insert(key.to_string()) {
            return Err(ShardError::DuplicateKey(key.to_string()));
        }
        let cur = current.get_or_insert_with(|| (key.to_string(), [None, None, None]));
        if cur.1[slot].replace(data).is_some() {
            return Err(ShardError::DuplicateKey(path.clone()));
        }
    }
    if let Some(cur) = current {
        finish(&mut out, cur)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::digest_hex;
    use proptest::prelude::*;
    use rand::{Rng, RngCore, SeedableRng};

    fn sample(i: usize) -> ShardSample {
        ShardSample {
            key: format!("rec{i:04}"),
            image: vec![i as u8; 10 + i],
            caption: format!("caption {i} über"),
            meta: format!("{{\"i\":{i}}}").into_bytes(),
        }
    }

    #[test]
    fn sizes_10_10_5() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<_> = (0..25).map(sample).collect();
        let spec = ShardSpec { max_samples_per_shard: 10, ..Default::default() };
        let idx = write_shards(&samples, &spec, dir.path()).unwrap();
        assert_eq!(idx.shards.len(), 3);
        let sizes: Vec<usize> = idx.shards.iter().map(|p| read_shard(p).unwrap().len()).collect();
        assert_eq!(sizes, [10, 10, 5]);
        assert!(idx.shards[0].ends_with("shard-000000.tar"));
        let back: Vec<ShardSample> = idx.shards.iter().flat_map(|p| read_shard(p).unwrap()).collect();
        assert_eq!(back, samples);
        assert_eq!(idx.entries.len(), 25);
        assert_eq!(idx.entries[24], ("rec0024".to_string(), "shard-000002.tar".to_string()));
    }

    #[test]
    fn zero_samples_warns() {
        let dir = tempfile::tempdir().unwrap();
        let idx = write_shards(&[], &ShardSpec::default(), dir.path()).unwrap();
        assert!(idx.shards.is_empty() && idx.entries.is_empty());
        assert_eq!(idx.warnings.len(), 1);
    }

    #[test]
    fn duplicate_and_colliding_keys() {
        let dir = tempfile::tempdir().unwrap();
        let s = vec![sample(1), sample(1)];
        assert!(matches!(write_shards(&s, &ShardSpec::default(), dir.path()), Err(ShardError::DuplicateKey(_))));
        assert!(matches!(assign_keys(["a/b", "a.b"]), Err(ShardError::KeyCollision { .. })));
        assert!(matches!(assign_keys(["x", "x"]), Err(ShardError::DuplicateKey(_))));
        assert_eq!(assign_keys(["laion2b:00001.jpg"]).unwrap(), ["laion2b_00001_jpg"]);
    }

    #[test]
    fn three_samples_roundtrip_and_deterministic_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<_> = (0..3).map(sample).collect();
        let a = write_shards(&samples, &ShardSpec::default(), &dir.path().join("a")).unwrap();
        let b = write_shards(&samples, &ShardSpec::default(), &dir.path().join("b")).unwrap();
        assert_eq!(read_shard(&a.shards[0]).unwrap(), samples);
        assert_eq!(std::fs::read(&a.shards[0]).unwrap(), std::fs::read(&b.shards[0]).unwrap());
    }

    fn raw_tar(members: &[(&str, &[u8])]) -> Vec<u8> {
        let mut b = tar::Builder::new(Vec::new());
        for (name, data) in members {
            append(&mut b, name, data).unwrap();
        }
        b.into_inner().unwrap()
    }

    #[test]
    fn missing_member_named() {
        let bytes = raw_tar(&[("k1.jpg", b"img"), ("k1.json", b"{}"), ("k2.jpg", b"i"), ("k2.txt", b"t"), ("k2.json", b"{}")]);
        match read_shard_from(&bytes[..]) {
            Err(ShardError::MissingMember { key, member }) => assert_eq!((key.as_str(), member.as_str()), ("k1", "txt")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corrupt_header_reports_offset() {
        let mut bytes = raw_tar(&[("k1.jpg", b"img"), ("k1.txt", b"t"), ("k1.json", b"{}")]);
        // Second header starts after the first header and one padded data block.
        bytes[1024 + 148] ^= 0x55;
        match read_shard_from(&bytes[..]) {
            Err(ShardError::Corrupt { offset, .. }) => assert_eq!(offset, 1024),
            other => panic!("{other:?}"),
        }
        let truncated = &raw_tar(&[("k1.jpg", &[7u8; 4000]), ("k1.txt", b"t"), ("k1.json", b"{}")])[..2048];
        assert!(matches!(read_shard_from(truncated), Err(ShardError::Corrupt { offset: 512, .. })));
    }

    #[test]
    fn thousand_random_payloads() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let samples: Vec<ShardSample> = (0..1000)
            .map(|i| {
                let mut image = vec![0u8; rng.random_range(0..3000)];
                rng.fill_bytes(&mut image);
                ShardSample { key: format!("s{i}"), image, caption: format!("c{}", rng.random::<u32>()), meta: b"null".to_vec() }
            })
            .collect();
        let spec = ShardSpec { max_samples_per_shard: 128, ..Default::default() };
        let idx = write_shards(&samples, &spec, dir.path()).unwrap();
        assert_eq!(idx.shards.len(), 8);
        let back: Vec<ShardSample> = idx.shards.iter().flat_map(|p| read_shard(p).unwrap()).collect();
        assert_eq!(back.len(), 1000);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(digest_hex(&a.image), digest_hex(&b.image));
            assert_eq!((&a.key, &a.caption), (&b.key, &b.caption));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn shard_count_and_index(n in 1usize..60, max in 1usize..20) {
            let dir = tempfile::tempdir().unwrap();
            let samples: Vec<_> = (0..n).map(sample).collect();
            let spec = ShardSpec { max_samples_per_shard: max, ..Default::default() };
            let idx = write_shards(&samples, &spec, dir.path()).unwrap();
            prop_assert_eq!(idx.shards.len(), n.div_ceil(max));
            let keys: Vec<&String> = idx.entries.iter().map(|(k, _)| k).collect();
            let expect: Vec<&String> = samples.iter().map(|s| &s.key).collect();
            prop_assert_eq!(keys, expect);
        }

        #[test]
        fn roundtrip_arbitrary_bytes(image in prop::collection::vec(any::<u8>(), 0..2000), caption in ".{0,80}", meta in prop::collection::vec(any::<u8>(), 0..100)) {
            let dir = tempfile::tempdir().unwrap();
            let s = ShardSample { key: "k".into(), image, caption, meta };
            let idx = write_shards(std::slice::from_ref(&s), &ShardSpec::default(), dir.path()).unwrap();
            prop_assert_eq!(read_shard(&idx.shards[0]).unwrap(), vec![s]);
        }
    }
}
