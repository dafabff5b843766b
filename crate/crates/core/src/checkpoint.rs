//! Model checkpoints: a tar archive holding `manifest.json`, one raw
//! little-endian blob per tensor, and `pooled_stats.json`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, RngState};
use crate::nn::ParamStore;
use crate::scanet::{ScaNet, ScaNetConfig};
use crate::senet::{PooledStyleStats, SeNet, SeNetConfig};
use crate::Real;

pub const FORMAT: &str = "stylefit-checkpoint";
pub const VERSION: &str = "1";
const MANIFEST: &str = "manifest.json";
const POOLED: &str = "pooled_stats.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    file: String,
    sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Section<C> {
    config: C,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: String,
    dtype: String,
    styles: Vec<String>,
    rng: RngState,
    senet: Section<SeNetConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scanet: Option<Section<ScaNetConfig>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pooled_stats: Option<String>,
}

fn append(builder: &mut tar::Builder<File>, name: &str, data: &[u8]) -> Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(data.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_cksum();
    builder
        .append_data(&mut header, name, data)
        .map_err(|e| Error::Checkpoint(format!("writing {name}: {e}")))
}

fn tensor_blobs<T: Real>(section: &str, store: &ParamStore<T>) -> (Vec<TensorEntry>, Vec<(String, Vec<u8>)>) {
    let mut entries = Vec::new();
    let mut blobs = Vec::new();
    for (name, v) in store.iter() {
        let mut buf = Vec::with_capacity(v.len() * T::BYTES);
        for &x in v.iter() {
            x.write_le(&mut buf);
        }
        let file = format!("{section}/{name}.bin");
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: [v.nrows(), v.ncols()],
            file: file.clone(),
            sha256: hex::encode(Sha256::digest(&buf)),
        });
        blobs.push((file, buf));
    }
    (entries, blobs)
}

pub fn save<T: Real>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let (se_entries, mut blobs) = tensor_blobs("senet", &model.senet.store);
    let scanet = model.scanet.as_ref().map(|s| {
        let (entries, b) = tensor_blobs("scanet", &s.store);
        blobs.extend(b);
        Section {
            config: s.config.clone(),
            tensors: entries,
        }
    });
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION.into(),
        dtype: T::DTYPE.into(),
        styles: model.styles.clone(),
        rng: model.rng,
        senet: Section {
            config: model.senet.config.clone(),
            tensors: se_entries,
        },
        scanet,
        pooled_stats: model.pooled.as_ref().map(|_| POOLED.to_string()),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut builder = tar::Builder::new(file);
    append(
        &mut builder,
        MANIFEST,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes").as_bytes(),
    )?;
    for (name, data) in &blobs {
        append(&mut builder, name, data)?;
    }
    if let Some(p) = &model.pooled {
        append(
            &mut builder,
            POOLED,
            serde_json::to_string_pretty(p).expect("pooled stats serialize").as_bytes(),
        )?;
    }
    let mut file = builder
        .into_inner()
        .map_err(|e| Error::Checkpoint(format!("finishing archive: {e}")))?;
    file.flush().map_err(|e| Error::io(path, e))
}

fn read_entries(path: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut archive = tar::Archive::new(file);
    let corrupt = |e: std::io::Error| Error::Checkpoint(format!("{}: corrupt archive: {e}", path.display()));
    let mut out = BTreeMap::new();
    for entry in archive.entries().map_err(corrupt)? {
        let mut entry = entry.map_err(corrupt)?;
        let name = entry.path().map_err(corrupt)?.to_string_lossy().into_owned();
        let mut data = Vec::new();
        entry.read_to_end(&mut data).map_err(corrupt)?;
        out.insert(name, data);
    }
    Ok(out)
}

fn fill_store<T: Real>(store: &mut ParamStore<T>, tensors: &[TensorEntry], files: &BTreeMap<String, Vec<u8>>) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, manifest lists {}",
            store.len(),
            tensors.len()
        )));
    }
    for t in tensors {
        let id = store
            .find(&t.name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {}", t.name)))?;
        let data = files
            .get(&t.file)
            .ok_or_else(|| Error::Checkpoint(format!("missing blob {}", t.file)))?;
        if hex::encode(Sha256::digest(data)) != t.sha256 {
            return Err(Error::Checkpoint(format!("checksum mismatch for {}", t.file)));
        }
        let [r, c] = t.shape;
        if store.get(id).dim() != (r, c) || data.len() != r * c * T::BYTES {
            return Err(Error::Checkpoint(format!("shape mismatch for {}", t.name)));
        }
        let values: Vec<T> = data.chunks_exact(T::BYTES).map(T::read_le).collect();
        *store.get_mut(id) = Array2::from_shape_vec((r, c), values).expect("checked shape");
    }
    Ok(())
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let path = path.as_ref();
    let files = read_entries(path)?;
    let raw = files
        .get(MANIFEST)
        .ok_or_else(|| Error::Checkpoint(format!("{}: no {MANIFEST}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_slice(raw).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    if value.get("format").and_then(|v| v.as_str()) != Some(FORMAT) {
        return Err(Error::Checkpoint(format!("{} is not a model checkpoint", path.display())));
    }
    let version = value.get("version").and_then(|v| v.as_str()).unwrap_or("");
    if version != VERSION {
        return Err(Error::Version {
            found: version.to_string(),
            expected: VERSION.to_string(),
        });
    }
    let manifest: Manifest =
        serde_json::from_value(value).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    if manifest.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint dtype {} does not match requested {}",
            manifest.dtype,
            T::DTYPE
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut senet = SeNet::<T>::new(manifest.senet.config.clone(), &mut rng)?;
    fill_store(&mut senet.store, &manifest.senet.tensors, &files)?;
    let scanet = match &manifest.scanet {
        Some(section) => {
            let mut s = ScaNet::<T>::new(section.config.clone(), &mut rng)?;
            fill_store(&mut s.store, &section.tensors, &files)?;
            Some(s)
        }
        None => None,
    };
    let pooled = match &manifest.pooled_stats {
        Some(name) => {
            let data = files
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing {name}")))?;
            Some(
                serde_json::from_slice::<PooledStyleStats>(data)
                    .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?,
            )
        }
        None => None,
    };
    Ok(Model {
        styles: manifest.styles,
        senet,
        pooled,
        scanet,
        rng: manifest.rng,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::style_rep::{RepVariant, StyleRepConfig};

    fn model(with_scanet: bool) -> Model<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rep = StyleRepConfig::new(RepVariant::Params);
        let senet = SeNet::new(SeNetConfig::new(EncoderConfig::linear(5, 4), 2, rep.clone()), &mut rng).unwrap();
        let scanet = with_scanet.then(|| ScaNet::new(ScaNetConfig::new(EncoderConfig::linear(5, 4), rep), &mut rng).unwrap());
        Model {
            styles: vec!["a".into(), "b".into()],
            senet,
            pooled: None,
            scanet,
            rng: RngState { seed: 9, word_pos: 123 },
        }
    }

    #[test]
    fn round_trip_preserves_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model(true);
        save(&m, &path).unwrap();
        let back: Model<f32> = load(&path).unwrap();
        assert_eq!(back.senet.store.digest(), m.senet.store.digest());
        assert_eq!(
            back.scanet.as_ref().unwrap().store.digest(),
            m.scanet.as_ref().unwrap().store.digest()
        );
        assert_eq!(back.rng, m.rng);
    }

    #[test]
    fn stage_one_checkpoint_has_no_scanet() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s1.ckpt");
        save(&model(false), &path).unwrap();
        assert!(load::<f32>(&path).unwrap().scanet.is_none());
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&model(false), &path).unwrap();
        assert!(matches!(load::<f64>(&path), Err(Error::Checkpoint(_))));
    }
}
