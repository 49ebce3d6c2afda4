//! On-disk formats: binary and CSV embedding sets, JSONL match records.
//!
//! Binary layout (little-endian): magic `OKPI`, u32 version, u64 sample
//! count, u32 dim, u32 domain_count, u8 flags (bit0 = has_target); then
//! per row: u64 id, u32 domain, f64 target when the flag is set, and
//! dim f32 embedding components. A NaN target encodes an unlabelled row
//! in a file that carries the target column.
//!
//! CSV layout: header `id,domain[,target],e0,...,e{dim-1}`; an empty
//! target field means unlabelled. CSV carries no explicit domain
//! universe, so loading infers the tightest one (max label + 1).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::data::{DomainLabel, EmbeddingSet, MatchRecord, Sample};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"OKPI";
const VERSION: u32 = 1;
const FLAG_HAS_TARGET: u8 = 0b0000_0001;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingFormat {
    Binary,
    Csv,
}

impl EmbeddingFormat {
    /// Guess the format from a file extension: `.csv` is CSV, anything
    /// else is treated as the binary container.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => EmbeddingFormat::Csv,
            _ => EmbeddingFormat::Binary,
        }
    }
}

pub fn load_embeddings(path: &Path, format: EmbeddingFormat) -> Result<EmbeddingSet> {
    match format {
        EmbeddingFormat::Binary => load_binary(path),
        EmbeddingFormat::Csv => load_csv(path),
    }
}

pub fn save_embeddings(set: &EmbeddingSet, path: &Path, format: EmbeddingFormat) -> Result<()> {
    match format {
        EmbeddingFormat::Binary => save_binary(set, path),
        EmbeddingFormat::Csv => save_csv(set, path),
    }
}

fn load_binary(path: &Path) -> Result<EmbeddingSet> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic bytes {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = r.read_u64::<LittleEndian>()?;
    let dim = r.read_u32::<LittleEndian>()? as usize;
    let domain_count = r.read_u32::<LittleEndian>()?;
    let flags = r.read_u8()?;
    let has_target = flags & FLAG_HAS_TARGET != 0;

    let mut samples = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let id = r.read_u64::<LittleEndian>()?;
        let domain = DomainLabel(r.read_u32::<LittleEndian>()?);
        let target = if has_target {
            let t = r.read_f64::<LittleEndian>()?;
            if t.is_nan() {
                None
            } else {
                Some(t)
            }
        } else {
            None
        };
        let mut embedding = vec![0f32; dim];
        r.read_f32_into::<LittleEndian>(&mut embedding)?;
        samples.push(Sample {
            id,
            domain,
            target,
            embedding,
        });
    }
    // Trailing bytes mean the header lied about the row count.
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Format("trailing bytes after last row".into()));
    }
    EmbeddingSet::new(dim, domain_count, samples)
}

fn save_binary(set: &EmbeddingSet, path: &Path) -> Result<()> {
    set.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    let has_target = set.has_targets();

    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u64::<LittleEndian>(set.samples.len() as u64)?;
    w.write_u32::<LittleEndian>(set.dim as u32)?;
    w.write_u32::<LittleEndian>(set.domain_count)?;
    w.write_u8(if has_target { FLAG_HAS_TARGET } else { 0 })?;

    for s in &set.samples {
        w.write_u64::<LittleEndian>(s.id)?;
        w.write_u32::<LittleEndian>(s.domain.0)?;
        if has_target {
            w.write_f64::<LittleEndian>(s.target.unwrap_or(f64::NAN))?;
        }
        for &x in &s.embedding {
            w.write_f32::<LittleEndian>(x)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn load_csv(path: &Path) -> Result<EmbeddingSet> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty file".into()))??;
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    if cols.len() < 3 || cols[0] != "id" || cols[1] != "domain" {
        return Err(Error::Format(format!("bad header `{header}`")));
    }
    let has_target = cols[2] == "target";
    let embed_start = if has_target { 3 } else { 2 };
    let dim = cols.len() - embed_start;
    for (j, col) in cols[embed_start..].iter().enumerate() {
        if *col != format!("e{j}") {
            return Err(Error::Format(format!("bad embedding column `{col}`")));
        }
    }
    if dim == 0 {
        return Err(Error::Format("header has no embedding columns".into()));
    }

    let mut samples = Vec::new();
    let mut max_domain = 0u32;
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Format(format!(
                "row {}: expected {} fields, got {}",
                lineno + 2,
                cols.len(),
                fields.len()
            )));
        }
        let id: u64 = fields[0]
            .parse()
            .map_err(|_| Error::Format(format!("row {}: bad id `{}`", lineno + 2, fields[0])))?;
        let domain: u32 = fields[1].parse().map_err(|_| {
            Error::Format(format!("row {}: bad domain `{}`", lineno + 2, fields[1]))
        })?;
        max_domain = max_domain.max(domain);
        let target = if has_target {
            let raw = fields[2].trim();
            if raw.is_empty() {
                None
            } else {
                let t: f64 = raw.parse().map_err(|_| {
                    Error::Format(format!("row {}: bad target `{raw}`", lineno + 2))
                })?;
                Some(t)
            }
        } else {
            None
        };
        let embedding = fields[embed_start..]
            .iter()
            .map(|f| {
                f.parse::<f32>()
                    .map_err(|_| Error::Format(format!("row {}: bad value `{f}`", lineno + 2)))
            })
            .collect::<Result<Vec<f32>>>()?;
        samples.push(Sample {
            id,
            domain: DomainLabel(domain),
            target,
            embedding,
        });
    }

    let domain_count = if samples.is_empty() { 1 } else { max_domain + 1 };
    EmbeddingSet::new(dim, domain_count, samples)
}

fn save_csv(set: &EmbeddingSet, path: &Path) -> Result<()> {
    set.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    let has_target = set.has_targets();

    write!(w, "id,domain")?;
    if has_target {
        write!(w, ",target")?;
    }
    for j in 0..set.dim {
        write!(w, ",e{j}")?;
    }
    writeln!(w)?;

    for s in &set.samples {
        write!(w, "{},{}", s.id, s.domain.0)?;
        if has_target {
            match s.target {
                Some(t) => write!(w, ",{t}")?,
                None => write!(w, ",")?,
            }
        }
        for &x in &s.embedding {
            write!(w, ",{x}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// One JSON object per line; byte-stable for identical inputs.
pub fn save_matches(records: &[MatchRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_matches(records, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_matches<W: Write>(records: &[MatchRecord], w: &mut W) -> Result<()> {
    for rec in records {
        serde_json::to_writer(&mut *w, rec)
            .map_err(|e| Error::Format(format!("match record serialization: {e}")))?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn load_matches(path: &Path) -> Result<Vec<MatchRecord>> {
    let mut records = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MatchRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("bad match record line: {e}")))?;
        records.push(rec);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FilterReason;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn toy_set() -> EmbeddingSet {
        EmbeddingSet::new(
            2,
            2,
            vec![
                Sample {
                    id: 10,
                    domain: DomainLabel(0),
                    target: Some(1.0),
                    embedding: vec![0.25, -1.5],
                },
                Sample {
                    id: 11,
                    domain: DomainLabel(1),
                    target: None,
                    embedding: vec![3.75, 0.125],
                },
                Sample {
                    id: 12,
                    domain: DomainLabel(0),
                    target: Some(0.0),
                    embedding: vec![-0.5, 2.0],
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn csv_three_rows_parse() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "id,domain,e0,e1\n0,0,1.0,2.0\n1,1,3.0,4.0\n2,0,5.0,6.0\n").unwrap();
        let set = load_embeddings(&path, EmbeddingFormat::Csv).unwrap();
        assert_eq!(set.dim, 2);
        assert_eq!(set.len(), 3);
        assert_eq!(set.domain_count, 2);
    }

    #[test]
    fn binary_wrong_magic_is_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.okpi");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        let err = load_embeddings(&path, EmbeddingFormat::Binary).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn csv_nan_embedding_is_validation_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "id,domain,e0,e1\n0,0,1.0,NaN\n").unwrap();
        let err = load_embeddings(&path, EmbeddingFormat::Csv).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn csv_row_arity_is_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "id,domain,e0,e1\n0,0,1.0\n").unwrap();
        let err = load_embeddings(&path, EmbeddingFormat::Csv).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn binary_duplicate_id_is_validation_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.okpi");
        let mut set = toy_set();
        set.samples[1].id = 10;
        // Bypass save-side validation to exercise the loader.
        let mut w = BufWriter::new(File::create(&path).unwrap());
        w.write_all(MAGIC).unwrap();
        w.write_u32::<LittleEndian>(VERSION).unwrap();
        w.write_u64::<LittleEndian>(2).unwrap();
        w.write_u32::<LittleEndian>(2).unwrap();
        w.write_u32::<LittleEndian>(2).unwrap();
        w.write_u8(0).unwrap();
        for s in &set.samples[..2] {
            w.write_u64::<LittleEndian>(s.id).unwrap();
            w.write_u32::<LittleEndian>(s.domain.0).unwrap();
            for &x in &s.embedding {
                w.write_f32::<LittleEndian>(x).unwrap();
            }
        }
        w.flush().unwrap();
        drop(w);
        let err = load_embeddings(&path, EmbeddingFormat::Binary).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.okpi");
        let set = toy_set();
        save_embeddings(&set, &path, EmbeddingFormat::Binary).unwrap();
        let loaded = load_embeddings(&path, EmbeddingFormat::Binary).unwrap();
        assert_eq!(set, loaded);
    }

    #[test]
    fn matches_jsonl_schema() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let records = vec![
            MatchRecord {
                query_id: 1,
                neighbor_ids: vec![9],
                distances: vec![0.5],
                filtered: FilterReason::None,
            },
            MatchRecord::filtered(2, FilterReason::QueryCaliper),
        ];
        save_matches(&records, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(
            lines[0],
            r#"{"query_id":1,"neighbor_ids":[9],"distances":[0.5],"filtered":"none"}"#
        );
        assert_eq!(
            lines[1],
            r#"{"query_id":2,"neighbor_ids":[],"distances":[],"filtered":"query_caliper"}"#
        );
        assert_eq!(load_matches(&path).unwrap(), records);
    }

    #[test]
    fn empty_match_list_gives_empty_file() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        save_matches(&[], &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 0);
    }

    proptest! {
        // Round-trip: save then load reproduces the set exactly in both
        // formats. CSV infers the domain universe, so generated sets use
        // the tightest one.
        #[test]
        fn round_trip_both_formats(
            dim in 1usize..6,
            raw in proptest::collection::vec(
                (0u32..4, proptest::option::of(-100f64..100.0), -1e3f32..1e3),
                1..40,
            ),
        ) {
            let mut samples = Vec::new();
            let mut max_domain = 0;
            for (i, (domain, target, base)) in raw.iter().enumerate() {
                max_domain = max_domain.max(*domain);
                samples.push(Sample {
                    id: i as u64 * 7 + 3,
                    domain: DomainLabel(*domain),
                    target: *target,
                    embedding: (0..dim).map(|j| base + j as f32).collect(),
                });
            }
            let set = EmbeddingSet::new(dim, max_domain + 1, samples).unwrap();

            let dir = tempdir().unwrap();
            let bin = dir.path().join("d.okpi");
            let csv = dir.path().join("d.csv");
            save_embeddings(&set, &bin, EmbeddingFormat::Binary).unwrap();
            save_embeddings(&set, &csv, EmbeddingFormat::Csv).unwrap();
            prop_assert_eq!(&load_embeddings(&bin, EmbeddingFormat::Binary).unwrap(), &set);
            prop_assert_eq!(&load_embeddings(&csv, EmbeddingFormat::Csv).unwrap(), &set);
        }
    }
}
