//! Token vocabularies, framing, corpus files and per-class token histograms.
//!
//! Raw sequences carry discretizer symbols (composite codeword ids or SAX
//! symbols). A [`Vocabulary`] maps them to dense ids after four reserved
//! ones; framed sequences are `START ids.. END`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datapipe::ActivityId;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const START: u32 = 2;
pub const END: u32 = 3;
pub const NUM_RESERVED: u32 = 4;

pub fn is_reserved(id: u32) -> bool {
    id < NUM_RESERVED
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub label: Option<ActivityId>,
    pub participant_id: String,
}

impl TokenSequence {
    pub fn new(
        ids: Vec<u32>,
        label: Option<ActivityId>,
        participant_id: impl Into<String>,
    ) -> Self {
        Self {
            ids,
            label,
            participant_id: participant_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    /// `symbols[i]` is the raw symbol with id `i + NUM_RESERVED`.
    symbols: Vec<u32>,
    #[serde(skip)]
    index: HashMap<u32, u32>,
}

impl Vocabulary {
    /// Ids in first-occurrence order over `corpus`.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a TokenSequence>) -> Result<Self> {
        let mut v = Self {
            symbols: Vec::new(),
            index: HashMap::new(),
        };
        let mut any = false;
        for seq in corpus {
            for &s in &seq.ids {
                any = true;
                if !v.index.contains_key(&s) {
                    v.index.insert(s, NUM_RESERVED + v.symbols.len() as u32);
                    v.symbols.push(s);
                }
            }
        }
        if !any {
            return Err(Error::EmptyCorpus);
        }
        Ok(v)
    }

    pub fn from_symbols(symbols: Vec<u32>) -> Result<Self> {
        let index: HashMap<u32, u32> = symbols
            .iter()
            .enumerate()
            .map(|(i, &s)| (s, NUM_RESERVED + i as u32))
            .collect();
        if index.len() != symbols.len() {
            return Err(Error::format("vocabulary", "duplicate symbol"));
        }
        Ok(Self { symbols, index })
    }

    /// Number of ids including the reserved ones.
    pub fn size(&self) -> usize {
        NUM_RESERVED as usize + self.symbols.len()
    }

    /// Number of distinct observed symbols.
    pub fn observed(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbols(&self) -> &[u32] {
        &self.symbols
    }

    pub fn encode(&self, symbol: u32) -> u32 {
        self.index.get(&symbol).copied().unwrap_or(UNK)
    }

    pub fn decode(&self, id: u32) -> Option<u32> {
        id.checked_sub(NUM_RESERVED)
            .and_then(|i| self.symbols.get(i as usize).copied())
    }

    /// Stable 64-bit fingerprint of the id assignment.
    pub fn hash(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(b"vocab");
        for s in &self.symbols {
            h.update(s.to_le_bytes());
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|_| Error::missing(path, "vocabulary file; run `extract` or `sax` first"))?;
        let v: Vocabulary = serde_json::from_str(&text)?;
        Self::from_symbols(v.symbols)
    }
}

/// `[START] + encoded ids + [END]`; unseen symbols become UNK.
pub fn frame(seq: &TokenSequence, vocab: &Vocabulary) -> TokenSequence {
    let mut ids = Vec::with_capacity(seq.ids.len() + 2);
    ids.push(START);
    ids.extend(seq.ids.iter().map(|&s| vocab.encode(s)));
    ids.push(END);
    TokenSequence {
        ids,
        label: seq.label,
        participant_id: seq.participant_id.clone(),
    }
}

pub fn frame_all(seqs: &[TokenSequence], vocab: &Vocabulary) -> Vec<TokenSequence> {
    seqs.iter().map(|s| frame(s, vocab)).collect()
}

/// A padded batch: `ids[b]` has length `max_len`, PADs at the tail.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<Vec<u32>>,
    pub lens: Vec<usize>,
    pub max_len: usize,
}

pub fn collate(seqs: &[&TokenSequence]) -> Batch {
    let max_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let ids = seqs
        .iter()
        .map(|s| {
            let mut v = s.ids.clone();
            v.resize(max_len, PAD);
            v
        })
        .collect();
    Batch {
        ids,
        lens: seqs.iter().map(|s| s.len()).collect(),
        max_len,
    }
}

/// Writes one `# participant=.. label=..` line and one id line per sequence.
pub fn write_corpus(path: &Path, seqs: &[TokenSequence]) -> Result<()> {
    let mut out = String::new();
    for s in seqs {
        let label = s.label.map_or_else(|| "-".to_string(), |l| l.to_string());
        writeln!(out, "# participant={} label={label}", s.participant_id).expect("write to string");
        let ids: Vec<String> = s.ids.iter().map(u32::to_string).collect();
        writeln!(out, "{}", ids.join(" ")).expect("write to string");
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<TokenSequence>> {
    let text = fs::read_to_string(path)
        .map_err(|_| Error::missing(path, "token corpus; run `extract` or `sax` first"))?;
    let bad = |line: usize, msg: &str| Error::format("corpus", format!("line {}: {msg}", line + 1));
    let mut out = Vec::new();
    let mut pending: Option<(String, Option<ActivityId>)> = None;
    for (n, line) in text.lines().enumerate() {
        if let Some(meta) = line.strip_prefix('#') {
            let mut participant = String::new();
            let mut label = None;
            for kv in meta.split_whitespace() {
                match kv.split_once('=') {
                    Some(("participant", v)) => participant = v.to_string(),
                    Some(("label", "-")) => label = None,
                    Some(("label", v)) => label = Some(v.parse().map_err(|_| bad(n, "bad label"))?),
                    _ => {}
                }
            }
            pending = Some((participant, label));
        } else {
            let (participant, label) = pending
                .take()
                .ok_or_else(|| bad(n, "id line without header"))?;
            let ids = line
                .split_whitespace()
                .map(|t| t.parse::<u32>().map_err(|_| bad(n, "non-integer id")))
                .collect::<Result<_>>()?;
            out.push(TokenSequence {
                ids,
                label,
                participant_id: participant,
            });
        }
    }
    if pending.is_some() {
        return Err(Error::format("corpus", "trailing header without ids"));
    }
    Ok(out)
}

/// Per-class fraction of occurrences of each token.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassHistograms {
    pub classes: BTreeMap<ActivityId, BTreeMap<u32, f64>>,
}

/// Histograms over raw (unframed) sequences; unlabeled ones are skipped.
pub fn class_histograms(seqs: &[TokenSequence]) -> ClassHistograms {
    let mut counts: BTreeMap<ActivityId, BTreeMap<u32, usize>> = BTreeMap::new();
    for s in seqs {
        let Some(label) = s.label else { continue };
        let c = counts.entry(label).or_default();
        for &t in &s.ids {
            *c.entry(t).or_default() += 1;
        }
    }
    let classes = counts
        .into_iter()
        .filter_map(|(label, c)| {
            let total: usize = c.values().sum();
            (total > 0).then(|| {
                (
                    label,
                    c.into_iter()
                        .map(|(t, n)| (t, n as f64 / total as f64))
                        .collect(),
                )
            })
        })
        .collect();
    ClassHistograms { classes }
}

impl ClassHistograms {
    pub fn top_fraction(&self, class: ActivityId) -> Option<f64> {
        self.classes
            .get(&class)
            .and_then(|h| h.values().copied().reduce(f64::max))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w =
            csv::Writer::from_path(path).map_err(|e| Error::format("histograms", e.to_string()))?;
        w.write_record(["class", "token", "fraction"])
            .map_err(|e| Error::format("histograms", e.to_string()))?;
        for (class, h) in &self.classes {
            for (token, f) in h {
                w.write_record([class.to_string(), token.to_string(), format!("{f:.12}")])
                    .map_err(|e| Error::format("histograms", e.to_string()))?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// One bar panel per class over the `top` most frequent tokens overall.
    pub fn to_svg(&self, top: usize, class_name: &dyn Fn(ActivityId) -> String) -> String {
        let mut overall: BTreeMap<u32, f64> = BTreeMap::new();
        for h in self.classes.values() {
            for (&t, &f) in h {
                *overall.entry(t).or_default() += f;
            }
        }
        let mut tokens: Vec<(u32, f64)> = overall.into_iter().collect();
        tokens.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        tokens.truncate(top.max(1));
        let (pw, ph, margin) = (640.0, 140.0, 40.0);
        let n = self.classes.len().max(1);
        let height = margin + n as f64 * (ph + margin);
        let bar = (pw - 2.0 * margin) / tokens.len().max(1) as f64;
        let mut svg = String::new();
        writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{pw}" height="{height}" font-family="sans-serif" font-size="11">"#
        )
        .unwrap();
        for (i, (class, h)) in self.classes.iter().enumerate() {
            let top_y = margin + i as f64 * (ph + margin);
            let max = h.values().copied().fold(1e-12, f64::max);
            writeln!(
                svg,
                r#"<text x="{margin}" y="{:.1}">{} (max fraction {max:.3})</text>"#,
                top_y - 6.0,
                class_name(*class)
            )
            .unwrap();
            writeln!(
                svg,
                r##"<line x1="{margin}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#333"/>"##,
                top_y + ph,
                pw - margin,
                top_y + ph
            )
            .unwrap();
            for (j, (t, _)) in tokens.iter().enumerate() {
                let f = h.get(t).copied().unwrap_or(0.0);
                let bh = ph * f / max;
                writeln!(
                    svg,
                    r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{bh:.1}" fill="#4a78b0"><title>token {t}: {f:.4}</title></rect>"##,
                    margin + j as f64 * bar,
                    top_y + ph - bh,
                    (bar - 1.0).max(0.5)
                )
                .unwrap();
            }
        }
        svg.push_str("</svg>\n");
        svg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(ids: &[u32], label: Option<u32>) -> TokenSequence {
        TokenSequence::new(ids.to_vec(), label, "P000")
    }

    #[test]
    fn vocabulary_basics() {
        let v = Vocabulary::build(&[seq(&[10, 7, 10], None), seq(&[3, 7], None)]).unwrap();
        assert_eq!(v.size(), 7);
        assert_eq!(v.encode(10), 4);
        assert_eq!(v.encode(7), 5);
        assert_eq!(v.encode(3), 6);
        assert_eq!(v.encode(99), UNK);
        assert_eq!(v.decode(6), Some(3));
        assert_eq!(v.decode(START), None);
        assert!(matches!(
            Vocabulary::build(&[seq(&[], None)]),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn framing_and_collation() {
        let v = Vocabulary::build(&[seq(&(0..49).collect::<Vec<_>>(), None)]).unwrap();
        let f = frame(&seq(&(0..49).collect::<Vec<_>>(), Some(1)), &v);
        assert_eq!(f.len(), 51);
        assert_eq!((f.ids[0], f.ids[50]), (START, END));
        assert_eq!(frame(&seq(&[], None), &v).ids, vec![START, END]);
        let short = frame(&seq(&(0..21).collect::<Vec<_>>(), None), &v);
        let b = collate(&[&f, &short]);
        assert_eq!(b.max_len, 51);
        assert_eq!(b.lens, vec![51, 23]);
        assert!(b.ids[1][23..].iter().all(|&i| i == PAD));
        assert_eq!(b.ids[1][..23], short.ids[..]);
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("corpus.txt");
        let seqs = vec![
            seq(&[4, 5, 6], Some(2)),
            TokenSequence::new(vec![], None, "P009"),
        ];
        write_corpus(&p, &seqs).unwrap();
        assert_eq!(read_corpus(&p).unwrap(), seqs);
        let vp = dir.path().join("vocab.json");
        let v = Vocabulary::build(&seqs).unwrap();
        v.save(&vp).unwrap();
        let back = Vocabulary::load(&vp).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
    }

    #[test]
    fn histograms() {
        let h = class_histograms(&[seq(&[5, 5, 5], Some(0))]);
        assert_eq!(h.classes[&0], BTreeMap::from([(5, 1.0)]));
        let h = class_histograms(&[
            seq(&[1, 2, 2, 3], Some(0)),
            seq(&[9, 9], Some(1)),
            seq(&[2], Some(0)),
        ]);
        for c in h.classes.values() {
            assert!((c.values().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(h.top_fraction(0), Some(0.6));
        let svg = h.to_svg(10, &|c| format!("class {c}"));
        assert!(svg.starts_with("<svg") && svg.contains("class 1"));
    }
}
