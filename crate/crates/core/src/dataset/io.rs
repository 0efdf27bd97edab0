//! Feature files and annotation manifests.
//!
//! A feature file is little-endian: 4 magic bytes (`STLG` for videos, `STLS`
//! for sentences), `u32` rows, `u32` columns, then `rows * columns` `f32`
//! values row-major. A split directory holds `manifest.tsv` with one
//! tab-separated record per line:
//! `id  video_file  sentence_file  start  end  labeled_flag`, paths relative to
//! the directory, `start`/`end` normalized, `labeled_flag` in `{0, 1}`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use super::{Dataset, FeatureSequence, GroundingSample, Split};
use crate::error::{Error, Result};
use crate::temporal::TemporalSegment;

pub const VIDEO_MAGIC: [u8; 4] = *b"STLG";
pub const SENTENCE_MAGIC: [u8; 4] = *b"STLS";
pub const MANIFEST_NAME: &str = "manifest.tsv";

pub fn write_features(path: &Path, magic: [u8; 4], seq: &FeatureSequence) -> Result<()> {
    let mut bytes = Vec::with_capacity(12 + 4 * seq.len() * seq.dim());
    bytes.extend_from_slice(&magic);
    bytes.extend_from_slice(&(seq.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&(seq.dim() as u32).to_le_bytes());
    for v in seq.data().iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path, magic: [u8; 4]) -> Result<FeatureSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(Error::format(path, "truncated header"));
    }
    if bytes[..4] != magic {
        return Err(Error::format(
            path,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..4]),
                String::from_utf8_lossy(&magic)
            ),
        ));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + 4 * rows * cols;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "header says {rows}x{cols} ({expected} bytes), file has {} bytes",
                bytes.len()
            ),
        ));
    }
    let values: Vec<f32> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let data = Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| Error::format(path, e.to_string()))?;
    FeatureSequence::new(data).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes every sample's features plus the manifest into `dir`.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    let features = dir.join("features");
    fs::create_dir_all(&features).map_err(|e| Error::io(&features, e))?;
    let manifest_path = dir.join(MANIFEST_NAME);
    let file = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut out = BufWriter::new(file);
    for s in &dataset.samples {
        let reference = s.reference.or(s.label).ok_or_else(|| {
            Error::Precondition(format!("sample {} has no segment to record", s.id))
        })?;
        let video_file = format!("features/{}.video", s.id);
        let sentence_file = format!("features/{}.sentence", s.id);
        write_features(&dir.join(&video_file), VIDEO_MAGIC, &s.video)?;
        write_features(&dir.join(&sentence_file), SENTENCE_MAGIC, &s.sentence)?;
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            s.id,
            video_file,
            sentence_file,
            reference.start(),
            reference.end(),
            u8::from(s.is_labeled())
        )
        .map_err(|e| Error::io(&manifest_path, e))?;
    }
    out.flush().map_err(|e| Error::io(&manifest_path, e))
}

/// Loads a split directory, inferring the split from its name (`train`,
/// `val`, `test`; anything else is treated as training data).
pub fn load_features(dir: &Path, max_len: usize) -> Result<Dataset> {
    let split = dir
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(Split::from_name)
        .unwrap_or(Split::Train);
    load_split(dir, split, max_len)
}

/// Loads a split directory. Videos longer than `max_len` are uniformly
/// subsampled; shorter ones keep their length and are padded at batching.
pub fn load_split(dir: &Path, split: Split, max_len: usize) -> Result<Dataset> {
    load_split_with_workers(dir, split, max_len, 1)
}

struct Record {
    id: String,
    video_file: String,
    sentence_file: String,
    segment: TemporalSegment,
    labeled: bool,
}

fn parse_manifest(manifest_path: &Path, text: &str) -> Result<Vec<Record>> {
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |msg: String| Error::format(manifest_path, format!("line {}: {msg}", lineno + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(at(format!("expected 6 fields, found {}", fields.len())));
        }
        let parse = |s: &str, what: &str| {
            s.parse::<f64>()
                .map_err(|_| at(format!("{what} {s:?} is not a number")))
        };
        let start = parse(fields[3], "start")?;
        let end = parse(fields[4], "end")?;
        let segment = TemporalSegment::new(start, end).map_err(|e| at(e.to_string()))?;
        let labeled = match fields[5] {
            "0" => false,
            "1" => true,
            other => return Err(at(format!("labeled_flag {other:?} must be 0 or 1"))),
        };
        records.push(Record {
            id: fields[0].to_string(),
            video_file: fields[1].to_string(),
            sentence_file: fields[2].to_string(),
            segment,
            labeled,
        });
    }
    Ok(records)
}

type Features = (FeatureSequence, FeatureSequence);

fn read_record(dir: &Path, r: &Record, max_len: usize) -> Result<Features> {
    let video = read_features(&dir.join(&r.video_file), VIDEO_MAGIC)?.limit_len(max_len);
    let sentence = read_features(&dir.join(&r.sentence_file), SENTENCE_MAGIC)?;
    Ok((video, sentence))
}

/// [`load_split`] reading feature files on `workers` threads. The result does
/// not depend on `workers`.
pub fn load_split_with_workers(dir: &Path, split: Split, max_len: usize, workers: usize) -> Result<Dataset> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be positive".into()));
    }
    let manifest_path = dir.join(MANIFEST_NAME);
    if !manifest_path.exists() {
        let empty = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_none();
        if empty {
            log::warn!("{}: empty directory, returning empty dataset", dir.display());
            return Ok(Dataset::new(Vec::new(), split));
        }
        return Err(Error::format(&manifest_path, "missing annotation manifest"));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let records = parse_manifest(&manifest_path, &text)?;
    let workers = workers.clamp(1, records.len().max(1));
    let features: Vec<Result<Features>> = if workers == 1 {
        records.iter().map(|r| read_record(dir, r, max_len)).collect()
    } else {
        let chunk = records.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = records
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|r| read_record(dir, r, max_len)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("feature reader panicked"))
                .collect()
        })
    };
    let mut samples = Vec::with_capacity(records.len());
    let mut video_dim = None;
    let mut word_dim = None;
    for (r, f) in records.into_iter().zip(features) {
        let (video, sentence) = f?;
        check_dim(&mut video_dim, video.dim(), &dir.join(&r.video_file))?;
        check_dim(&mut word_dim, sentence.dim(), &dir.join(&r.sentence_file))?;
        samples.push(GroundingSample {
            id: r.id,
            video,
            sentence,
            label: r.labeled.then_some(r.segment),
            reference: Some(r.segment),
        });
    }
    Ok(Dataset::new(samples, split))
}

fn check_dim(seen: &mut Option<usize>, dim: usize, path: &Path) -> Result<()> {
    match *seen {
        None => {
            *seen = Some(dim);
            Ok(())
        }
        Some(d) if d == dim => Ok(()),
        Some(d) => Err(Error::format(
            path,
            format!("feature dimension {dim} differs from {d} in earlier files"),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticConfig};

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&SyntheticConfig::small())
            .unwrap()
            .mask_labels(0.5, 1)
            .unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_split(dir.path(), Split::Train, 128).unwrap();
        assert_eq!(back, ds);
        assert_eq!(load_split_with_workers(dir.path(), Split::Train, 128, 3).unwrap(), ds);
    }

    #[test]
    fn empty_directory_gives_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_features(dir.path(), 128).unwrap().is_empty());
    }

    #[test]
    fn long_videos_are_uniformly_subsampled() {
        let dir = tempfile::tempdir().unwrap();
        let data = Array2::from_shape_fn((200, 3), |(t, d)| (t * 10 + d) as f32);
        let seq = FeatureSequence::new(data).unwrap();
        let sentence = FeatureSequence::new(Array2::ones((2, 2))).unwrap();
        let ds = Dataset::new(
            vec![GroundingSample {
                id: "v".into(),
                video: seq,
                sentence,
                label: None,
                reference: Some(TemporalSegment::new(0.1, 0.2).unwrap()),
            }],
            Split::Test,
        );
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_split(dir.path(), Split::Test, 128).unwrap();
        let v = &back.samples[0].video;
        assert_eq!(v.len(), 128);
        assert_eq!(v.data()[[1, 0]], 10.0);
        assert_eq!(v.data()[[127, 0]], 1980.0);
    }

    #[test]
    fn malformed_inputs_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("x.video");
        fs::write(&bad, b"NOPE\x01\0\0\0\x01\0\0\0\0\0\0\0").unwrap();
        let err = read_features(&bad, VIDEO_MAGIC).unwrap_err().to_string();
        assert!(err.contains("x.video") && err.contains("magic"), "{err}");

        fs::write(&bad, b"STLG\x02\0\0\0\x01\0\0\0\0\0\0\0").unwrap();
        let err = read_features(&bad, VIDEO_MAGIC).unwrap_err().to_string();
        assert!(err.contains("bytes"), "{err}");

        fs::write(dir.path().join(MANIFEST_NAME), "a\tx.video\ty\t0.1\n").unwrap();
        let err = load_features(dir.path(), 8).unwrap_err().to_string();
        assert!(err.contains("manifest.tsv") && err.contains("6 fields"), "{err}");

        fs::write(
            dir.path().join(MANIFEST_NAME),
            "a\tmissing.video\tmissing.sentence\t0.1\t0.2\t1\n",
        )
        .unwrap();
        let err = load_features(dir.path(), 8).unwrap_err().to_string();
        assert!(err.contains("missing.video"), "{err}");
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = generate_synthetic(&SyntheticConfig::small()).unwrap();
        ds.samples.truncate(2);
        ds.samples[1].video = FeatureSequence::new(Array2::ones((16, 5))).unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let err = load_features(dir.path(), 128).unwrap_err().to_string();
        assert!(err.contains("dimension"), "{err}");
    }
}
