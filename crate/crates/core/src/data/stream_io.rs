//! Stream export: a TOML manifest (schedule, domains, digest) and a raw
//! little-endian record buffer. Each record is `source_id: u64`,
//! `corruption_seed: u64`, `domain_index: u32`, `label: u32`, then the
//! image as `f32` values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::corruption::DomainSpec;
use super::stream::{Sample, Stream, StreamSchedule};
use crate::error::{Error, Result};

const FORMAT: &str = "metatta-stream";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamManifest {
    pub format: String,
    pub version: u32,
    pub channels: usize,
    pub size: usize,
    pub num_classes: usize,
    pub count: usize,
    pub buffer: String,
    pub sha256: String,
    pub schedule: StreamSchedule,
    pub domains: Vec<DomainSpec>,
}

pub fn encode_stream(s: &Stream, buffer_name: &str) -> (StreamManifest, Vec<u8>) {
    let mut buf = Vec::new();
    for x in &s.samples {
        buf.extend_from_slice(&(x.source_id as u64).to_le_bytes());
        buf.extend_from_slice(&x.corruption_seed.to_le_bytes());
        buf.extend_from_slice(&(x.domain_index as u32).to_le_bytes());
        buf.extend_from_slice(&(x.label as u32).to_le_bytes());
        for v in &x.x {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let m = StreamManifest {
        format: FORMAT.into(),
        version: 1,
        channels: s.channels,
        size: s.size,
        num_classes: s.num_classes,
        count: s.samples.len(),
        buffer: buffer_name.into(),
        sha256: hex::encode(Sha256::digest(&buf)),
        schedule: s.schedule.clone(),
        domains: s.domains.clone(),
    };
    (m, buf)
}

pub fn decode_stream(m: &StreamManifest, buf: &[u8]) -> Result<Stream> {
    if m.format != FORMAT || m.version != 1 {
        return Err(Error::Data(format!("unsupported stream format {} v{}", m.format, m.version)));
    }
    if hex::encode(Sha256::digest(buf)) != m.sha256 {
        return Err(Error::Data("stream buffer digest does not match manifest".into()));
    }
    let pixels = m.channels * m.size * m.size;
    let rec = 24 + 4 * pixels;
    if buf.len() != rec * m.count {
        return Err(Error::Data(format!("stream buffer has {} bytes, expected {}", buf.len(), rec * m.count)));
    }
    let u64_at = |r: &[u8], o: usize| u64::from_le_bytes(r[o..o + 8].try_into().expect("8 bytes"));
    let u32_at = |r: &[u8], o: usize| u32::from_le_bytes(r[o..o + 4].try_into().expect("4 bytes"));
    let samples = buf
        .chunks_exact(rec)
        .enumerate()
        .map(|(t, r)| Sample {
            t,
            source_id: u64_at(r, 0) as usize,
            corruption_seed: u64_at(r, 8),
            domain_index: u32_at(r, 16) as usize,
            label: u32_at(r, 20) as usize,
            x: r[24..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect(),
        })
        .collect();
    Ok(Stream {
        schedule: m.schedule.clone(),
        domains: m.domains.clone(),
        channels: m.channels,
        size: m.size,
        num_classes: m.num_classes,
        samples,
    })
}

/// Writes `stem.toml` + `stem.bin`.
pub fn save_stream(stem: &Path, s: &Stream) -> Result<PathBuf> {
    let (mpath, bpath) = (stem.with_extension("toml"), stem.with_extension("bin"));
    if let Some(dir) = mpath.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = bpath.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let (m, buf) = encode_stream(s, &name);
    fs::write(&bpath, buf).map_err(|e| Error::io(&bpath, e))?;
    let text = toml::to_string(&m).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok(mpath)
}

pub fn load_stream(path: &Path) -> Result<Stream> {
    let mpath = path.with_extension("toml");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: StreamManifest = toml::from_str(&text).map_err(|e| Error::Parse {
        path: mpath.clone(),
        reason: e.to_string(),
    })?;
    let bpath = mpath.parent().unwrap_or_else(|| Path::new(".")).join(&m.buffer);
    let buf = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    decode_stream(&m, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::domains::DomainSet;
    use crate::data::glyphs::generate_synthetic_glyphs;
    use crate::data::stream::build_training_stream;
    use crate::seed;

    #[test]
    fn stream_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic_glyphs(20, 5, 2, 16, 1).unwrap();
        let s = build_training_stream(&DomainSet::default_source(), &ds, 3, 4, &mut seed::rng(9)).unwrap();
        let m = save_stream(&dir.path().join("s"), &s).unwrap();
        let back = load_stream(&m).unwrap();
        assert_eq!(back, s);
        let bits = |s: &Stream| s.samples.iter().flat_map(|x| x.x.iter().map(|v| v.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&s));
    }

    #[test]
    fn corrupted_buffer_rejected() {
        let ds = generate_synthetic_glyphs(5, 5, 1, 16, 1).unwrap();
        let s = build_training_stream(&DomainSet::default_source(), &ds, 1, 2, &mut seed::rng(9)).unwrap();
        let (m, mut buf) = encode_stream(&s, "x.bin");
        buf[30] ^= 0x40;
        assert!(decode_stream(&m, &buf).is_err());
    }
}
