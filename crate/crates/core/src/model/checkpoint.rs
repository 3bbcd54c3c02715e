//! On-disk parameter format: a TOML manifest naming every tensor (group,
//! shape, byte range) next to one little-endian raw buffer.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Storable, Tensor};

use super::convnet::ConvNetSpec;
use super::params::{Group, Param, ParamBundle};

const FORMAT: &str = "metatta-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub buffer: String,
    pub sha256: String,
    pub model: ConvNetSpec,
    pub tensors: Vec<TensorEntry>,
}

/// Paths of a checkpoint written under `stem`: `stem.toml` and `stem.bin`.
pub fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("toml"), stem.with_extension("bin"))
}

pub fn encode<S: Storable>(spec: &ConvNetSpec, params: &ParamBundle<S>, buffer_name: &str) -> (Manifest, Vec<u8>) {
    let mut buf = Vec::with_capacity(params.num_params() * S::BYTES);
    let mut tensors = Vec::new();
    for (group, p) in params.iter() {
        let offset = buf.len();
        for &v in p.tensor.data() {
            v.write_le(&mut buf);
        }
        tensors.push(TensorEntry {
            name: p.name.clone(),
            group,
            shape: p.tensor.shape().to_vec(),
            offset,
            bytes: buf.len() - offset,
        });
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        version: 1,
        dtype: S::DTYPE.to_string(),
        buffer: buffer_name.to_string(),
        sha256: hex::encode(Sha256::digest(&buf)),
        model: spec.clone(),
        tensors,
    };
    (manifest, buf)
}

pub fn decode<S: Storable>(manifest: &Manifest, buf: &[u8]) -> Result<ParamBundle<S>> {
    if manifest.format != FORMAT || manifest.version != 1 {
        return Err(Error::Checkpoint(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    if manifest.dtype != S::DTYPE {
        return Err(Error::Checkpoint(format!(
            "dtype {} cannot be read as {}",
            manifest.dtype,
            S::DTYPE
        )));
    }
    let digest = hex::encode(Sha256::digest(buf));
    if digest != manifest.sha256 {
        return Err(Error::Checkpoint("buffer digest does not match manifest".into()));
    }
    let mut groups: [Vec<Param<S>>; 3] = Default::default();
    for e in &manifest.tensors {
        let numel: usize = e.shape.iter().product();
        if e.bytes != numel * S::BYTES || e.offset + e.bytes > buf.len() {
            return Err(Error::Checkpoint(format!("bad byte range for `{}`", e.name)));
        }
        let data = buf[e.offset..e.offset + e.bytes]
            .chunks_exact(S::BYTES)
            .map(S::read_le)
            .collect();
        let tensor = Tensor::new(e.shape.clone(), data)?.with_requires_grad(true);
        let slot = Group::ALL.iter().position(|&g| g == e.group).expect("group");
        groups[slot].push(Param {
            name: e.name.clone(),
            tensor,
        });
    }
    let [omega, phi_ssl, phi_sup] = groups;
    ParamBundle::new(omega, phi_ssl, phi_sup)
}

/// Writes `stem.toml` + `stem.bin`; returns the buffer digest.
pub fn save<S: Storable>(stem: &Path, spec: &ConvNetSpec, params: &ParamBundle<S>) -> Result<String> {
    let (mpath, bpath) = checkpoint_paths(stem);
    let bname = bpath
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (manifest, buf) = encode(spec, params, &bname);
    if let Some(dir) = mpath.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&bpath, &buf).map_err(|e| Error::io(&bpath, e))?;
    let text = toml::to_string(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest.sha256)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Loads from a manifest path (or a stem; `.toml` is appended when missing).
pub fn load<S: Storable>(path: &Path) -> Result<(ConvNetSpec, ParamBundle<S>)> {
    let mpath = if path.extension().is_some_and(|e| e == "toml") {
        path.to_path_buf()
    } else {
        path.with_extension("toml")
    };
    let manifest = read_manifest(&mpath)?;
    let bpath = mpath
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.buffer);
    let buf = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    Ok((manifest.model.clone(), decode(&manifest, &buf)?))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::ConvNet;

    fn spec() -> ConvNetSpec {
        ConvNetSpec {
            in_channels: 3,
            image_size: 8,
            width: 4,
            kernel: 3,
            hidden: 5,
            num_classes: 3,
            gn_groups: 2,
            gn_eps: 1e-5,
        }
    }

    #[test]
    fn save_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let net = ConvNet::new(spec()).unwrap();
        let p: ParamBundle<f32> = net.init(&mut ChaCha8Rng::seed_from_u64(3));
        let stem = dir.path().join("ck/model");
        let digest = save(&stem, &spec(), &p).unwrap();
        let (s2, q) = load::<f32>(&stem).unwrap();
        assert_eq!(s2, spec());
        assert!(p.bit_eq(&q));
        assert_eq!(digest, read_manifest(&stem.with_extension("toml")).unwrap().sha256);
    }

    #[test]
    fn dtype_and_digest_are_checked() {
        let net = ConvNet::new(spec()).unwrap();
        let p: ParamBundle<f64> = net.init(&mut ChaCha8Rng::seed_from_u64(3));
        let (m, mut buf) = encode(&spec(), &p, "x.bin");
        assert!(decode::<f32>(&m, &buf).is_err());
        assert!(decode::<f64>(&m, &buf).is_ok());
        buf[0] ^= 1;
        assert!(decode::<f64>(&m, &buf).is_err());
    }
}
