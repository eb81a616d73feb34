//! `SNFR1` reader and writer.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! header (24 bytes)
//!   magic      "SNFR"
//!   version    u32 = 1
//!   n_records  u64
//!   dim        u32 = 768
//!   t_audio    u16
//!   t_video    u16
//! record (repeated n_records times)
//!   clip_id    u64
//!   label      u8
//!   pad        3 zero bytes
//!   audio      f32[t_audio * 768]
//!   video      f32[t_video * 768]
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ClipRecord, DataError, Dataset, Label, FEATURE_DIM};

pub const MAGIC: [u8; 4] = *b"SNFR";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset_to(dataset, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_dataset_to<W: Write>(dataset: &Dataset, w: &mut W) -> Result<(), DataError> {
    // Dataset::new already enforced the invariants; re-check the cheap ones
    // so a hand-assembled value cannot produce a half-written file.
    let (ta, tv) = (dataset.audio_tokens(), dataset.video_tokens());
    if ta == 0 || tv == 0 || ta > u16::MAX as usize || tv > u16::MAX as usize {
        return Err(DataError::Invalid(format!("token counts {ta}/{tv}")));
    }
    for r in dataset.records() {
        if r.audio.len() != ta * FEATURE_DIM || r.video.len() != tv * FEATURE_DIM {
            return Err(DataError::Invalid(format!("clip {} has the wrong feature length", r.clip_id)));
        }
        if !r.audio.iter().chain(&r.video).all(|v| v.is_finite()) {
            return Err(DataError::NonFinite { clip_id: r.clip_id });
        }
    }

    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(dataset.len() as u64).to_le_bytes())?;
    w.write_all(&(FEATURE_DIM as u32).to_le_bytes())?;
    w.write_all(&(ta as u16).to_le_bytes())?;
    w.write_all(&(tv as u16).to_le_bytes())?;
    let mut buf = Vec::with_capacity((ta + tv) * FEATURE_DIM * 4 + 12);
    for r in dataset.records() {
        buf.clear();
        buf.extend_from_slice(&r.clip_id.to_le_bytes());
        buf.push(r.label as u8);
        buf.extend_from_slice(&[0, 0, 0]);
        for v in r.audio.iter().chain(&r.video) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let mut r = BufReader::new(File::open(path)?);
    read_dataset_from(&mut r)
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), DataError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => DataError::TruncatedPayload(what.to_string()),
        _ => DataError::Io(e),
    })
}

pub fn read_dataset_from<R: Read>(r: &mut R) -> Result<Dataset, DataError> {
    let mut header = [0u8; HEADER_LEN];
    read_exact_or_truncated(r, &mut header[..4], "header")?;
    let magic: [u8; 4] = header[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(DataError::BadMagic(magic));
    }
    read_exact_or_truncated(r, &mut header[4..], "header")?;
    let version = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(DataError::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let n = u64::from_le_bytes(header[8..16].try_into().expect("8 bytes"));
    let dim = u32::from_le_bytes(header[16..20].try_into().expect("4 bytes"));
    if dim as usize != FEATURE_DIM {
        return Err(DataError::DimMismatch { found: dim });
    }
    let ta = u16::from_le_bytes(header[20..22].try_into().expect("2 bytes"));
    let tv = u16::from_le_bytes(header[22..24].try_into().expect("2 bytes"));
    if ta == 0 || tv == 0 {
        return Err(DataError::Invalid(format!("token counts {ta}/{tv}")));
    }

    let (na, nv) = (ta as usize * FEATURE_DIM, tv as usize * FEATURE_DIM);
    let mut payload = vec![0u8; (na + nv) * 4];
    let mut records = Vec::new();
    for i in 0..n {
        let mut head = [0u8; 12];
        read_exact_or_truncated(r, &mut head, &format!("record {i} of {n}"))?;
        let clip_id = u64::from_le_bytes(head[..8].try_into().expect("8 bytes"));
        let label = Label::from_index(head[8] as usize).ok_or(DataError::BadLabel(head[8]))?;
        if head[9..12] != [0, 0, 0] {
            return Err(DataError::Invalid(format!("non-zero padding in record {i}")));
        }
        read_exact_or_truncated(r, &mut payload, &format!("record {i} of {n}"))?;
        let mut values = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")));
        let audio: Vec<f32> = values.by_ref().take(na).collect();
        let video: Vec<f32> = values.collect();
        if !audio.iter().chain(&video).all(|v| v.is_finite()) {
            return Err(DataError::NonFinite { clip_id });
        }
        records.push(ClipRecord { clip_id, label, audio, video });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(DataError::Invalid("trailing bytes after the last record".into()));
    }
    Dataset::new(ta, tv, records)
}
