//! On-disk formats: safetensors containers for tensors, TOML sidecars for
//! everything else. Every write goes to a temporary file first and is then
//! renamed into place.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use metaens_core::arch::ArchSpec;
use metaens_core::codec::{ColumnStats, NormStats};
use metaens_core::generator::{Generator, GeneratorConfig, WeightGenerator};
use metaens_core::weights::{ParamKey, WeightSet};
use metaens_core::{Error, Result, Scalar, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("{}: {e}", path.display()))
}

/// Writes `bytes` to `path` via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub fn write_toml<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = toml::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    write_atomic(path, text.as_bytes())
}

pub fn read_toml<S: DeserializeOwned>(path: &Path) -> Result<S> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    toml::from_str(&text).map_err(|e| io_err(path, e))
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Short stable identifier of an architecture.
pub fn arch_fingerprint(arch: &ArchSpec) -> String {
    let text = toml::to_string(arch).expect("architecture serializes");
    sha256_hex(text.as_bytes())[..16].to_string()
}

fn dtype_of<T: Scalar>() -> Dtype {
    match T::DTYPE {
        "f32" => Dtype::F32,
        _ => Dtype::F64,
    }
}

/// Serializes named tensors into a safetensors container.
pub fn save_tensors<T: Scalar>(path: &Path, tensors: &BTreeMap<String, Tensor<T>>) -> Result<()> {
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(k, t)| {
            let mut b = Vec::with_capacity(t.numel() * std::mem::size_of::<T>());
            for &v in t.data() {
                v.write_le(&mut b);
            }
            (k.clone(), t.shape().to_vec(), b)
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(k, s, b)| {
            Ok((
                k.clone(),
                TensorView::new(dtype_of::<T>(), s.clone(), b).map_err(|e| io_err(path, e))?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = HashMap::from([("dtype".to_string(), T::DTYPE.to_string())]);
    let out = safetensors::serialize(views, Some(meta)).map_err(|e| io_err(path, e))?;
    write_atomic(path, &out)
}

/// Loads every tensor, converting the stored precision to `T`.
pub fn load_tensors<T: Scalar>(path: &Path) -> Result<BTreeMap<String, Tensor<T>>> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| io_err(path, e))?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        let data: Vec<T> = match view.dtype() {
            Dtype::F32 => view
                .data()
                .chunks_exact(4)
                .map(|c| T::from_f64_lossy(f32::read_le(c) as f64))
                .collect(),
            Dtype::F64 => view
                .data()
                .chunks_exact(8)
                .map(|c| T::from_f64_lossy(f64::read_le(c)))
                .collect(),
            other => {
                return Err(io_err(
                    path,
                    format!("tensor `{name}` has unsupported dtype {other:?}"),
                ))
            }
        };
        out.insert(name, Tensor::new(view.shape().to_vec(), data)?);
    }
    Ok(out)
}

pub fn save_weights<T: Scalar>(path: &Path, ws: &WeightSet<T>) -> Result<()> {
    let map = ws.iter().map(|(k, t)| (k.to_string(), t.clone())).collect();
    save_tensors(path, &map)
}

/// Loads a network and checks it against `arch`.
pub fn load_weights<T: Scalar>(path: &Path, arch: Arc<ArchSpec>) -> Result<WeightSet<T>> {
    let tensors = load_tensors::<T>(path)?
        .into_iter()
        .map(|(k, t)| Ok((k.parse::<ParamKey>()?, t)))
        .collect::<Result<_>>()?;
    WeightSet::new(arch, tensors)
}

/// Sidecar of a generator checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorManifest {
    pub config: GeneratorConfig,
    pub arch: ArchSpec,
    pub arch_fingerprint: String,
    pub dtype: String,
    /// Free-form training provenance (stage, steps, seed, config hash, ...).
    pub provenance: BTreeMap<String, String>,
}

pub const GENERATOR_TENSORS: &str = "generator.safetensors";
pub const GENERATOR_MANIFEST: &str = "generator.toml";

/// Writes `dir/generator.safetensors` and `dir/generator.toml`.
pub fn save_generator<T: Scalar>(
    dir: &Path,
    gen: &Generator<T>,
    provenance: BTreeMap<String, String>,
) -> Result<()> {
    let mut map = gen.params().clone();
    for (key, cs) in &gen.norm_stats().entries {
        let n = cs.mean.len();
        map.insert(
            format!("norm.{key}.mean"),
            Tensor::new(vec![n], cs.mean.clone())?,
        );
        map.insert(
            format!("norm.{key}.std"),
            Tensor::new(vec![n], cs.std.clone())?,
        );
    }
    save_tensors(&dir.join(GENERATOR_TENSORS), &map)?;
    let manifest = GeneratorManifest {
        config: gen.config().clone(),
        arch: (**gen.arch()).clone(),
        arch_fingerprint: arch_fingerprint(gen.arch()),
        dtype: T::DTYPE.to_string(),
        provenance,
    };
    write_toml(&dir.join(GENERATOR_MANIFEST), &manifest)
}

pub fn load_generator<T: Scalar>(dir: &Path) -> Result<(Generator<T>, GeneratorManifest)> {
    let manifest: GeneratorManifest = read_toml(&dir.join(GENERATOR_MANIFEST))?;
    if arch_fingerprint(&manifest.arch) != manifest.arch_fingerprint {
        return Err(Error::structural(format!(
            "{}: architecture fingerprint does not match its description",
            dir.display()
        )));
    }
    let mut params = load_tensors::<T>(&dir.join(GENERATOR_TENSORS))?;
    let norm_names: Vec<String> = params
        .keys()
        .filter(|k| k.starts_with("norm."))
        .cloned()
        .collect();
    let mut entries = BTreeMap::new();
    for name in norm_names.iter().filter(|n| n.ends_with(".mean")) {
        let key_text = &name["norm.".len()..name.len() - ".mean".len()];
        let key = key_text.parse()?;
        let mean = params.remove(name).expect("listed").into_data();
        let std = params
            .remove(&format!("norm.{key_text}.std"))
            .ok_or_else(|| {
                Error::structural(format!("{}: missing std for {key_text}", dir.display()))
            })?
            .into_data();
        entries.insert(key, ColumnStats { mean, std });
    }
    params.retain(|k, _| !k.starts_with("norm."));
    let gen = Generator::from_parts(
        manifest.config.clone(),
        Arc::new(manifest.arch.clone()),
        params,
        NormStats { entries },
    )?;
    Ok((gen, manifest))
}
