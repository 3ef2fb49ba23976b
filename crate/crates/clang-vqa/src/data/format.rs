//! Feature files: a JSONL manifest next to a binary blob.
//!
//! The manifest's first line is a header record carrying the geometry, the
//! vocabulary, and the blob file name; every further line is one sample
//! with its byte range into the blob. The blob holds a 16-byte header
//! (magic "CLGF", format version, record count, reserved word) followed by
//! one little-endian f32 row-major matrix per sample, rows being
//! roi followed by the five box numbers. Ranges must tile the blob exactly:
//! no gaps, no overlaps, no trailing bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ObjectObservation, BOX_DIM};
use crate::text::Vocabulary;

use super::script::{EventScript, QASample, QuestionType};

pub const BLOB_MAGIC: [u8; 4] = *b"CLGF";
pub const BLOB_VERSION: u32 = 1;
pub const BLOB_HEADER_LEN: usize = 16;

/// Everything the header record carries besides the per-sample rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub k: usize,
    pub l: usize,
    pub n: usize,
    pub e: usize,
    pub predicates: usize,
    pub d1: usize,
    pub sigma: f64,
    pub seed: u64,
    pub record_count: usize,
    pub blob: String,
    pub vocab: Vocabulary,
}

impl DatasetMeta {
    pub fn nodes(&self) -> usize {
        self.k * self.l * self.n
    }

    /// Blob bytes per sample: M rows of d1 + 5 little-endian f32.
    pub fn record_len(&self) -> u64 {
        (self.nodes() * (self.d1 + BOX_DIM) * 4) as u64
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 || self.l == 0 || self.n == 0 || self.d1 == 0 {
            return Err(Error::Format(
                "header declares a zero dimension".into(),
            ));
        }
        // Caps keep every later size product inside u64 and a hostile
        // header from requesting absurd allocations.
        let nodes = self
            .k
            .checked_mul(self.l)
            .and_then(|kl| kl.checked_mul(self.n))
            .filter(|&m| m <= 1 << 20);
        let row = self.d1.checked_add(BOX_DIM).filter(|&r| r <= 1 << 12);
        if nodes.is_none() || row.is_none() {
            return Err(Error::Format(format!(
                "header geometry k={} l={} n={} d1={} is out of range",
                self.k, self.l, self.n, self.d1
            )));
        }
        if self.vocab.len() > self.vocab.capacity() {
            return Err(Error::Format(
                "vocabulary exceeds its declared capacity".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: u64,
    pub question_type: QuestionType,
    pub question: Vec<u32>,
    pub candidates: Vec<Vec<u32>>,
    pub gold: u32,
    pub script: EventScript,
    pub offset: u64,
    pub len: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ManifestLine {
    Header(DatasetMeta),
    Sample(SampleRecord),
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<QASample>,
}

/// Write `stem.manifest.jsonl` and `stem.blob` under `dir`. Returns the
/// manifest path. Offsets are assigned in sample order, so the blob is
/// tiled exactly by construction.
pub fn write_feature_file(
    dir: &Path,
    stem: &str,
    meta: &DatasetMeta,
    samples: &[QASample],
) -> Result<PathBuf> {
    let mut meta = meta.clone();
    meta.record_count = samples.len();
    meta.blob = format!("{stem}.blob");

    let row_len = meta.d1 + BOX_DIM;
    let mut blob = Vec::with_capacity(BLOB_HEADER_LEN + samples.len() * meta.record_len() as usize);
    blob.extend_from_slice(&BLOB_MAGIC);
    blob.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    blob.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    blob.extend_from_slice(&0u32.to_le_bytes());

    let mut manifest = String::new();
    manifest.push_str(&serde_json::to_string(&ManifestLine::Header(meta.clone()))?);
    manifest.push('\n');

    for sample in samples {
        let offset = blob.len() as u64;
        for obs in &sample.observations {
            if obs.roi.len() != meta.d1 || obs.bbox.len() != BOX_DIM {
                return Err(Error::dim(
                    "feature row",
                    obs.roi.len() + obs.bbox.len(),
                    row_len,
                ));
            }
            for &v in obs.roi.iter().chain(obs.bbox.iter()) {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let len = blob.len() as u64 - offset;
        if len != meta.record_len() {
            return Err(Error::dim("feature record", len, meta.record_len()));
        }
        let record = ManifestLine::Sample(SampleRecord {
            id: sample.id,
            question_type: sample.question_type,
            question: sample.question.iter().map(|&t| t as u32).collect(),
            candidates: sample
                .candidates
                .iter()
                .map(|c| c.iter().map(|&t| t as u32).collect())
                .collect(),
            gold: sample.gold as u32,
            script: sample.script.clone(),
            offset,
            len,
        });
        manifest.push_str(&serde_json::to_string(&record)?);
        manifest.push('\n');
    }

    fs::create_dir_all(dir)?;
    let manifest_path = dir.join(format!("{stem}.manifest.jsonl"));
    fs::write(&manifest_path, manifest)?;
    fs::write(dir.join(&meta.blob), blob)?;
    Ok(manifest_path)
}

/// Parse manifest text into the header and the sample records, checking the
/// declared count and id ordering. No blob access happens here.
pub fn parse_manifest(text: &str) -> Result<(DatasetMeta, Vec<SampleRecord>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let first = lines
        .next()
        .ok_or_else(|| Error::Format("manifest is empty".into()))?;
    let ManifestLine::Header(meta) = serde_json::from_str(first)? else {
        return Err(Error::Format(
            "first manifest record must be the header".into(),
        ));
    };
    meta.validate()?;

    let mut records = Vec::new();
    for line in lines {
        let ManifestLine::Sample(rec) = serde_json::from_str(line)? else {
            return Err(Error::Format("duplicate header record".into()));
        };
        if let Some(prev) = records.last().map(|r: &SampleRecord| r.id) {
            if rec.id <= prev {
                return Err(Error::Format(format!(
                    "sample ids must ascend, {} follows {prev}",
                    rec.id
                )));
            }
        }
        records.push(rec);
    }
    if records.len() != meta.record_count {
        return Err(Error::Format(format!(
            "header declares {} records, manifest carries {}",
            meta.record_count,
            records.len()
        )));
    }
    Ok((meta, records))
}

pub struct BlobHeader {
    pub version: u32,
    pub record_count: u32,
}

/// Decode and check the fixed 16-byte blob header.
pub fn parse_blob_header(bytes: &[u8]) -> Result<BlobHeader> {
    if bytes.len() < BLOB_HEADER_LEN {
        return Err(Error::Corrupt {
            offset: bytes.len() as u64,
            detail: "blob ends inside the 16-byte header".into(),
        });
    }
    if bytes[..4] != BLOB_MAGIC {
        return Err(Error::Format(format!(
            "bad blob magic {:02x?}, expected {:02x?}",
            &bytes[..4],
            BLOB_MAGIC
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != BLOB_VERSION {
        return Err(Error::Format(format!(
            "unsupported blob version {version}"
        )));
    }
    let record_count = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    Ok(BlobHeader {
        version,
        record_count,
    })
}

fn decode_sample(meta: &DatasetMeta, rec: &SampleRecord, payload: &[u8]) -> Result<QASample> {
    let cap = meta.vocab.capacity();
    let trans = |ts: &[u32]| -> Result<Vec<usize>> {
        ts.iter()
            .map(|&t| {
                let t = t as usize;
                if t >= cap {
                    Err(Error::Format(format!(
                        "token id {t} outside vocabulary capacity {cap}"
                    )))
                } else {
                    Ok(t)
                }
            })
            .collect()
    };
    if rec.candidates.len() != 4 {
        return Err(Error::Format(format!(
            "sample {} carries {} candidates, expected 4",
            rec.id,
            rec.candidates.len()
        )));
    }
    if rec.gold >= 4 {
        return Err(Error::Format(format!(
            "sample {} gold index {} out of range",
            rec.id, rec.gold
        )));
    }
    rec.script.validate(meta.k, meta.l)?;

    let row_len = meta.d1 + BOX_DIM;
    let m = meta.nodes();
    let mut observations = Vec::with_capacity(m);
    for row in 0..m {
        let at = row * row_len * 4;
        let floats: Vec<f32> = payload[at..at + row_len * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        observations.push(ObjectObservation {
            roi: floats[..meta.d1].to_vec(),
            bbox: floats[meta.d1..].to_vec(),
            frame_index: row / meta.n,
            clip_index: row / (meta.l * meta.n),
        });
    }
    Ok(QASample {
        id: rec.id,
        question_type: rec.question_type,
        question: trans(&rec.question)?,
        candidates: rec
            .candidates
            .iter()
            .map(|c| trans(c))
            .collect::<Result<_>>()?,
        gold: rec.gold as usize,
        script: rec.script.clone(),
        observations,
    })
}

/// Read one feature file back. The blob path is resolved relative to the
/// manifest's directory.
pub fn read_samples(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path)?;
    let (meta, _) = parse_manifest(&text)?;
    let blob_path = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&meta.blob);
    let blob = fs::read(blob_path)?;
    decode_dataset(&text, &blob)
}

/// The whole read path over in-memory bytes; `read_samples` is the file
/// wrapper around this.
pub fn decode_dataset(manifest_text: &str, blob: &[u8]) -> Result<Dataset> {
    let (meta, records) = parse_manifest(manifest_text)?;
    let header = parse_blob_header(blob)?;
    if header.record_count as usize != records.len() {
        return Err(Error::Format(format!(
            "blob header counts {} records, manifest {}",
            header.record_count,
            records.len()
        )));
    }

    let mut samples = Vec::with_capacity(records.len());
    let mut cursor = BLOB_HEADER_LEN as u64;
    for rec in &records {
        if rec.offset != cursor {
            return Err(Error::Format(format!(
                "record {} starts at byte {}, previous record ends at {cursor}",
                rec.id, rec.offset
            )));
        }
        if rec.len != meta.record_len() {
            return Err(Error::Format(format!(
                "record {} spans {} bytes, geometry needs {}",
                rec.id,
                rec.len,
                meta.record_len()
            )));
        }
        let end = rec.offset + rec.len;
        if end > blob.len() as u64 {
            return Err(Error::Corrupt {
                offset: blob.len() as u64,
                detail: format!(
                    "record {} needs bytes {}..{end}, blob ends early",
                    rec.id, rec.offset
                ),
            });
        }
        samples.push(decode_sample(
            &meta,
            rec,
            &blob[rec.offset as usize..end as usize],
        )?);
        cursor = end;
    }
    if cursor != blob.len() as u64 {
        return Err(Error::Format(format!(
            "blob carries {} trailing bytes no record claims",
            blob.len() as u64 - cursor
        )));
    }
    Ok(Dataset { meta, samples })
}

#[cfg(test)]
mod tests {
    use super::super::script::Event;
    use super::super::{base_vocabulary, TYPE_NAMES};
    use super::*;

    fn tiny_meta() -> DatasetMeta {
        DatasetMeta {
            k: 2,
            l: 2,
            n: 2,
            e: 2,
            predicates: 4,
            d1: 3,
            sigma: 0.1,
            seed: 9,
            record_count: 0,
            blob: String::new(),
            vocab: base_vocabulary(),
        }
    }

    fn tiny_sample(id: u64, meta: &DatasetMeta) -> QASample {
        let script = EventScript {
            entity_types: vec![0, 1],
            homes: vec![[0.4, 0.4], [0.6, 0.6]],
            events: vec![
                Event { subject: 0, predicate: 0, objects: vec![], clip: 0 },
                Event { subject: 1, predicate: 2, objects: vec![], clip: 1 },
            ],
            causal: vec![[0, 1]],
        };
        let mut observations = Vec::new();
        for row in 0..meta.nodes() {
            let v = id as f32 + row as f32 * 0.125;
            observations.push(ObjectObservation {
                roi: vec![v, -v, 0.5],
                bbox: vec![0.1, 0.1, 0.3, 0.3, 0.04],
                frame_index: row / meta.n,
                clip_index: row / (meta.l * meta.n),
            });
        }
        let vocab = &meta.vocab;
        QASample {
            id,
            question_type: QuestionType::Descriptive,
            question: vocab.encode("who advanced"),
            candidates: TYPE_NAMES[..4]
                .iter()
                .map(|t| vec![vocab.id_of(t)])
                .collect(),
            gold: 0,
            script,
            observations,
        }
    }

    fn write_tiny(dir: &Path) -> PathBuf {
        let meta = tiny_meta();
        let samples: Vec<QASample> = (0..3).map(|i| tiny_sample(i, &meta)).collect();
        write_feature_file(dir, "train", &meta, &samples).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact_and_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_tiny(dir.path());
        let read = read_samples(&manifest).unwrap();
        assert_eq!(read.samples.len(), 3);
        let meta = tiny_meta();
        for (i, s) in read.samples.iter().enumerate() {
            assert_eq!(*s, tiny_sample(i as u64, &meta));
        }

        let again = tempfile::tempdir().unwrap();
        write_feature_file(again.path(), "train", &read.meta, &read.samples).unwrap();
        for name in ["train.manifest.jsonl", "train.blob"] {
            let a = fs::read(dir.path().join(name)).unwrap();
            let b = fs::read(again.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs after a round trip");
        }
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_tiny(dir.path());
        let blob_path = dir.path().join("train.blob");
        let mut blob = fs::read(&blob_path).unwrap();
        blob[0] = b'X';
        fs::write(&blob_path, blob).unwrap();
        assert!(matches!(read_samples(&manifest), Err(Error::Format(_))));
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_tiny(dir.path());
        let blob_path = dir.path().join("train.blob");
        let mut blob = fs::read(&blob_path).unwrap();
        blob[4] = 9;
        fs::write(&blob_path, blob).unwrap();
        assert!(matches!(read_samples(&manifest), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_blob_reports_the_failing_offset() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_tiny(dir.path());
        let blob_path = dir.path().join("train.blob");
        let mut blob = fs::read(&blob_path).unwrap();
        blob.truncate(blob.len() - 10);
        let cut = blob.len() as u64;
        fs::write(&blob_path, blob).unwrap();
        match read_samples(&manifest) {
            Err(Error::Corrupt { offset, .. }) => assert_eq!(offset, cut),
            other => panic!("expected corruption, got {other:?}"),
        }
    }

    #[test]
    fn manifest_and_blob_counts_must_agree() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_tiny(dir.path());
        let text = fs::read_to_string(&manifest).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.pop();
        fs::write(&manifest, lines.join("\n")).unwrap();
        // Header still declares 3 records.
        assert!(matches!(read_samples(&manifest), Err(Error::Format(_))));
    }

    #[test]
    fn manifest_line_count_matches_header_count() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_tiny(dir.path());
        let text = fs::read_to_string(&manifest).unwrap();
        let header: ManifestLine = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        let ManifestLine::Header(meta) = header else {
            panic!("first record is not the header")
        };
        assert_eq!(meta.record_count, text.lines().count() - 1);
    }

    #[test]
    fn gap_between_records_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_tiny(dir.path());
        let text = fs::read_to_string(&manifest).unwrap();
        let patched = text.replace("\"offset\":16,", "\"offset\":20,");
        assert_ne!(text, patched);
        fs::write(&manifest, patched).unwrap();
        assert!(matches!(read_samples(&manifest), Err(Error::Format(_))));
    }

    #[test]
    fn header_must_come_first() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_tiny(dir.path());
        let text = fs::read_to_string(&manifest).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.swap(0, 1);
        fs::write(&manifest, lines.join("\n")).unwrap();
        assert!(matches!(read_samples(&manifest), Err(Error::Format(_))));
    }

    #[test]
    fn garbage_manifest_line_is_a_json_error() {
        let (ok, _) = parse_manifest(
            r#"{"kind":"header","k":1,"l":1,"n":1,"e":1,"predicates":4,"d1":2,"sigma":0.1,"seed":0,"record_count":0,"blob":"x.blob","vocab":{"tokens":["<pad>","<unk>"],"capacity":8}}"#,
        )
        .map(|(m, r)| (m.k, r))
        .unwrap();
        assert_eq!(ok, 1);
        assert!(matches!(
            parse_manifest("not json at all"),
            Err(Error::Json(_))
        ));
    }
}
