//! Caption keyword filter.
//!
//! Two keyword groups are compiled into one ASCII case-insensitive regex.
//! Group 1 entries are stems ("aerial imag") that must start at a word
//! boundary but may end mid-word; group 2 entries are whole terms
//! ("Sentinel-2") bounded on both sides.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use regex::bytes::Regex;
use serde::{Deserialize, Serialize};

use crate::model::{Disposition, LineError, ManifestLine, Source, Stage, StageOutput};

pub const DEFAULT_KEYWORDS: &str = include_str!("../assets/keywords.toml");

#[derive(Debug, thiserror::Error)]
pub enum KeywordError {
    #[error("keyword set is empty")]
    Empty,
    #[error("empty keyword in group {0}")]
    EmptyKeyword(u8),
    #[error("keyword config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("keyword config: {0}")]
    Io(#[from] std::io::Error),
    #[error("keyword regex: {0}")]
    Regex(#[from] regex::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordSet {
    #[serde(default)]
    pub group1: Vec<String>,
    #[serde(default)]
    pub group2: Vec<String>,
}

impl KeywordSet {
    pub fn new(group1: Vec<String>, group2: Vec<String>) -> Self {
        Self { group1, group2 }
    }

    pub fn bundled() -> Self {
        Self::from_toml(DEFAULT_KEYWORDS).expect("bundled keyword config parses")
    }

    pub fn from_toml(text: &str) -> Result<Self, KeywordError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, KeywordError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    fn dedup(list: &[String]) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        list.iter()
            .filter(|k| seen.insert(k.to_ascii_lowercase()))
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct KeywordMatch {
    pub keyword: String,
    pub group: u8,
    pub byte_offset: usize,
}

#[derive(Debug, Clone)]
struct Keyword {
    text: String,
    group: u8,
}

#[derive(Debug, Clone)]
pub struct KeywordMatcher {
    regex: Regex,
    keywords: Vec<Keyword>,
    by_lower: HashMap<Vec<u8>, usize>,
}

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_'
}

pub fn compile_keywords(set: &KeywordSet) -> Result<KeywordMatcher, KeywordError> {
    let mut keywords = Vec::new();
    for (group, list) in [(1u8, &set.group1), (2u8, &set.group2)] {
        for text in KeywordSet::dedup(list) {
            if text.trim().is_empty() {
                return Err(KeywordError::EmptyKeyword(group));
            }
            keywords.push(Keyword { text, group });
        }
    }
    if keywords.is_empty() {
        return Err(KeywordError::Empty);
    }

    let mut by_lower = HashMap::new();
    for (idx, kw) in keywords.iter().enumerate() {
        by_lower.entry(kw.text.to_ascii_lowercase().into_bytes()).or_insert(idx);
    }

    // Longest alternatives first so leftmost-first behaves as leftmost-longest.
    let mut order: Vec<usize> = (0..keywords.len()).collect();
    order.sort_by(|&a, &b| {
        keywords[b].text.len().cmp(&keywords[a].text.len()).then(a.cmp(&b))
    });
    let alternatives: Vec<String> = order
        .iter()
        .map(|&i| {
            let kw = &keywords[i];
            let bytes = kw.text.as_bytes();
            let mut alt = String::new();
            if is_word_byte(bytes[0]) {
                alt.push_str(r"\b");
            }
            alt.push_str(&regex::escape(&kw.text));
            if kw.group == 2 && is_word_byte(bytes[bytes.len() - 1]) {
                alt.push_str(r"\b");
            }
            alt
        })
        .collect();
    let pattern = format!("(?i-u)(?:{})", alternatives.join("|"));
    let regex = Regex::new(&pattern)?;
    Ok(KeywordMatcher { regex, keywords, by_lower })
}

impl KeywordMatcher {
    pub fn len(&self) -> usize {
        self.keywords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keywords.is_empty()
    }

    pub fn group_sizes(&self) -> (usize, usize) {
        let g1 = self.keywords.iter().filter(|k| k.group == 1).count();
        (g1, self.keywords.len() - g1)
    }

    fn keyword_at(&self, matched: &[u8]) -> Option<&Keyword> {
        let lower = matched.to_ascii_lowercase();
        self.by_lower.get(&lower).map(|&i| &self.keywords[i])
    }

    /// All non-overlapping leftmost matches in `text`.
    pub fn match_caption(&self, text: &str) -> Vec<KeywordMatch> {
        self.regex
            .find_iter(text.as_bytes())
            .filter_map(|m| {
                self.keyword_at(m.as_bytes()).map(|kw| KeywordMatch {
                    keyword: kw.text.clone(),
                    group: kw.group,
                    byte_offset: m.start(),
                })
            })
            .collect()
    }

    pub fn is_match(&self, text: &str) -> bool {
        self.regex.is_match(text.as_bytes())
    }
}

/// Keep records whose caption matches at least one keyword.
///
/// Lines already removed upstream are carried through unchanged and not
/// counted. Sources for which `exempt` returns true pass as kept unmatched.
pub fn filter_stream<I>(matcher: &KeywordMatcher, lines: I, exempt: impl Fn(Source) -> bool) -> StageOutput
where
    I: IntoIterator<Item = Result<ManifestLine, LineError>>,
{
    let mut out = StageOutput::default();
    for line in lines {
        match line {
            Err(e) => out.errors.push(e),
            Ok(line) if line.disposition != Disposition::Kept => out.lines.push(line),
            Ok(line) => {
                let keep = exempt(line.record.source) || matcher.is_match(&line.record.caption);
                let d = if keep { Disposition::Kept } else { Disposition::RemovedByKeyword };
                out.push(Stage::Keywords, line.record, d);
            }
        }
    }
    out
}

pub fn keyword_histogram<'a>(
    matcher: &KeywordMatcher,
    captions: impl IntoIterator<Item = &'a str>,
) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for caption in captions {
        for m in matcher.match_caption(caption) {
            *counts.entry(m.keyword).or_insert(0) += 1;
        }
    }
    counts
}

/// `keyword,count` rows, most frequent first.
pub fn write_histogram_csv<W: Write>(writer: W, counts: &BTreeMap<String, u64>) -> csv::Result<()> {
    let mut rows: Vec<(&String, &u64)> = counts.iter().collect();
    rows.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["keyword", "count"])?;
    for (k, n) in rows {
        w.write_record([k.as_str(), &n.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SourceRecord;
    use proptest::prelude::*;

    fn set(g1: &[&str], g2: &[&str]) -> KeywordSet {
        KeywordSet::new(
            g1.iter().map(|s| s.to_string()).collect(),
            g2.iter().map(|s| s.to_string()).collect(),
        )
    }

    #[test]
    fn bundled_set_sizes() {
        let bundled = KeywordSet::bundled();
        assert_eq!(bundled.group1.len(), 27);
        assert_eq!(bundled.group2.len(), 15);
        let m = compile_keywords(&bundled).unwrap();
        assert_eq!(m.group_sizes(), (27, 15));
    }

    #[test]
    fn empty_keyword_rejected() {
        assert!(matches!(compile_keywords(&set(&[""], &[])), Err(KeywordError::EmptyKeyword(1))));
        assert!(matches!(compile_keywords(&set(&[], &[])), Err(KeywordError::Empty)));
    }

    #[test]
    fn stem_matches_case_insensitively() {
        let m = compile_keywords(&set(&["satellite imag"], &[])).unwrap();
        let hits = m.match_caption("Satellite Images of farms");
        assert_eq!(hits, vec![KeywordMatch { keyword: "satellite imag".into(), group: 1, byte_offset: 0 }]);
        assert!(m.match_caption("aerial imagery").is_empty());
    }

    #[test]
    fn default_set_examples() {
        let m = compile_keywords(&KeywordSet::bundled()).unwrap();
        let hits = m.match_caption("An aerial view of Paris");
        assert_eq!(hits.len(), 1);
        assert_eq!((hits[0].keyword.as_str(), hits[0].group), ("aerial view", 1));
        assert!(m.match_caption("").is_empty());

        let hits = m.match_caption("Sentinel-2 satellite image over WIT");
        let found: Vec<(&str, u8)> = hits.iter().map(|h| (h.keyword.as_str(), h.group)).collect();
        assert_eq!(found, vec![("Sentinel-2", 2), ("satellite imag", 1)]);
        assert_eq!(hits[1].byte_offset, 11);
    }

    #[test]
    fn left_boundary_blocks_infix_hits() {
        let m = compile_keywords(&KeywordSet::bundled()).unwrap();
        assert!(m.match_caption("abnaip survey").is_empty());
        assert!(m.match_caption("subaerial views").is_empty());
        assert!(!m.match_caption("(aerial view)").is_empty());
        // Whole-term rule for group 2.
        assert!(m.match_caption("USGSX data").is_empty());
        assert_eq!(m.match_caption("usgs data").len(), 1);
    }

    #[test]
    fn filter_stream_counts() {
        let m = compile_keywords(&KeywordSet::bundled()).unwrap();
        let recs = ["a dog", "an aerial view of a farm", "a cat"]
            .iter()
            .enumerate()
            .map(|(i, c)| Ok(ManifestLine::kept(SourceRecord::new(format!("r{i}"), Source::Cc3m, *c))));
        let out = filter_stream(&m, recs, |_| false);
        assert_eq!(out.kept().count(), 1);
        assert_eq!(out.ledger.counters(Source::Cc3m, Stage::Keywords).attempted, 3);
        assert_eq!(out.ledger.verify_conservation(), Ok(()));
    }

    #[test]
    fn filter_stream_keeps_order_and_reports_errors() {
        let m = compile_keywords(&KeywordSet::bundled()).unwrap();
        let mut input: Vec<Result<ManifestLine, LineError>> = (0..5)
            .map(|i| Ok(ManifestLine::kept(SourceRecord::new(format!("r{i}"), Source::Wit, "landsat scene"))))
            .collect();
        input.insert(2, Err(LineError { line: 3, message: "bad".into() }));
        let out = filter_stream(&m, input, |_| false);
        let ids: Vec<_> = out.kept().map(|r| r.record_id.as_str()).collect();
        assert_eq!(ids, ["r0", "r1", "r2", "r3", "r4"]);
        assert_eq!(out.errors.len(), 1);
    }

    #[test]
    fn planted_fixture_keeps_exactly_planted() {
        let m = compile_keywords(&KeywordSet::bundled()).unwrap();
        let keywords = ["aerial view", "Landsat", "satellite imagery", "remote sensing", "USGS"];
        let lines: Vec<_> = (0..100)
            .map(|i| {
                let caption = if i % 5 < 2 {
                    format!("photo {i} with {} of the coast", keywords[i % keywords.len()])
                } else {
                    format!("photo {i} of a birthday party near the coast")
                };
                Ok(ManifestLine::kept(SourceRecord::new(format!("r{i}"), Source::Laion2b, caption)))
            })
            .collect();
        let planted = (0..100).filter(|i| i % 5 < 2).count();
        assert_eq!(planted, 40);
        let out = filter_stream(&m, lines, |_| false);
        assert_eq!(out.kept().count(), planted);
    }

    #[test]
    fn histogram_counts() {
        let m = compile_keywords(&KeywordSet::bundled()).unwrap();
        let h = keyword_histogram(&m, ["aerial view and another aerial view"]);
        assert_eq!(h.get("aerial view"), Some(&2));
        assert!(keyword_histogram(&m, std::iter::empty()).is_empty());

        let mut captions: Vec<String> = (0..10).map(|i| format!("aerial view #{i}")).collect();
        captions.extend((0..5).map(|i| format!("map from USGS {i}")));
        let h = keyword_histogram(&m, captions.iter().map(String::as_str));
        let expected: BTreeMap<String, u64> =
            [("USGS".to_string(), 5), ("aerial view".to_string(), 10)].into_iter().collect();
        assert_eq!(h, expected);

        let mut csv_out = Vec::new();
        write_histogram_csv(&mut csv_out, &h).unwrap();
        assert_eq!(String::from_utf8(csv_out).unwrap(), "keyword,count\naerial view,10\nUSGS,5\n");
    }

    proptest! {
        #[test]
        fn ascii_case_folding_preserves_group1(text in "[ a-zA-Z.,-]{0,60}(aerial view|Satellite Image|space-borne view)?[ a-zA-Z]{0,20}") {
            let m = compile_keywords(&KeywordSet::bundled()).unwrap();
            let strip = |v: Vec<KeywordMatch>| v.into_iter().filter(|k| k.group == 1).collect::<Vec<_>>();
            prop_assert_eq!(strip(m.match_caption(&text)), strip(m.match_caption(&text.to_lowercase())));
            prop_assert_eq!(strip(m.match_caption(&text)), strip(m.match_caption(&text.to_uppercase())));
        }

        #[test]
        fn refiltering_kept_is_identity(captions in prop::collection::vec("[a-z ]{0,10}(aerial view|landsat|dog)?[a-z ]{0,10}", 0..30)) {
            let m = compile_keywords(&KeywordSet::bundled()).unwrap();
            let lines = captions.iter().enumerate()
                .map(|(i, c)| Ok(ManifestLine::kept(SourceRecord::new(format!("r{i}"), Source::Wit, c.clone()))));
            let first = filter_stream(&m, lines, |_| false);
            let kept = first.kept_records();
            let again = filter_stream(&m, kept.iter().cloned().map(|r| Ok(ManifestLine::kept(r))), |_| false);
            prop_assert_eq!(again.kept_records(), kept);
        }
    }
}
