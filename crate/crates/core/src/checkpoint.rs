//! Single-file checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "RELORACK"
//! version      u32
//! manifest     u64 length, then UTF-8 `key=value` lines
//! count        u64 number of buffers
//! per buffer:  u32 name length, name bytes, u8 dtype code (0 = f32, 1 = f64),
//!              u32 ndim, ndim x u64 dims, u64 byte length, raw data
//! trailer      8 bytes  "RELORAEN"
//! ```
//!
//! Parameters are stored as `param/<name>`, Adam moments as `m/<name>` and
//! `v/<name>`. Files are written to a temporary sibling and renamed into
//! place, so an interrupted save never clobbers the previous checkpoint.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ParamId, Transformer};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"RELORACK";
pub const TRAILER: &[u8; 8] = b"RELORAEN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Buffer {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl Buffer {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        Self::from_slice(t.shape(), t.data())
    }

    pub fn from_slice<T: Scalar>(shape: &[usize], data: &[T]) -> Self {
        let mut bytes = Vec::with_capacity(data.len() * T::DTYPE.size());
        for x in data {
            x.write_le(&mut bytes);
        }
        Buffer {
            dtype: T::DTYPE,
            shape: shape.to_vec(),
            bytes,
        }
    }

    /// Decodes into `T`, converting from the stored precision if needed.
    pub fn to_vec<T: Scalar>(&self) -> Vec<T> {
        match self.dtype {
            DType::F32 => self.bytes.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
            DType::F64 => self.bytes.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::from_vec(&self.shape, self.to_vec())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub manifest: BTreeMap<String, String>,
    pub buffers: BTreeMap<String, Buffer>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.manifest.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.manifest
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("manifest key `{key}` is missing")))
    }

    pub fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("manifest key `{key}` has invalid value `{raw}`")))
    }

    pub fn put(&mut self, name: impl Into<String>, buffer: Buffer) {
        self.buffers.insert(name.into(), buffer);
    }

    pub fn buffer(&self, name: &str) -> Result<&Buffer> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("buffer `{name}` is missing")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let mut text = String::new();
        for (k, v) in &self.manifest {
            text.push_str(k);
            text.push('=');
            text.push_str(v);
            text.push('\n');
        }
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.buffers.len() as u64).to_le_bytes());
        for (name, buf) in &self.buffers {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(buf.dtype.code());
            out.extend_from_slice(&(buf.shape.len() as u32).to_le_bytes());
            for &d in &buf.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(buf.bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(&buf.bytes);
        }
        out.extend_from_slice(TRAILER);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint archive (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        let len = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?;
        let mut manifest = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("malformed manifest line `{line}`")))?;
            manifest.insert(k.to_string(), v.to_string());
        }
        let count = r.u64()?;
        let mut buffers = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("buffer name is not UTF-8".into()))?
                .to_string();
            let code = r.take(1)?[0];
            let dtype = DType::from_code(code)
                .ok_or_else(|| Error::Checkpoint(format!("buffer `{name}` has unknown dtype code {code}")))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let nbytes = r.u64()? as usize;
            let expected = shape.iter().product::<usize>() * dtype.size();
            if nbytes != expected {
                return Err(Error::Checkpoint(format!(
                    "buffer `{name}` holds {nbytes} bytes but shape {shape:?} needs {expected}"
                )));
            }
            let data = r.take(nbytes)?.to_vec();
            buffers.insert(name, Buffer { dtype, shape, bytes: data });
        }
        if r.take(8)? != TRAILER {
            return Err(Error::Checkpoint("archive trailer is corrupt".into()));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after archive end".into()));
        }
        Ok(Archive { manifest, buffers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("archive truncated at byte {}", self.bytes.len())))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Manifest keys describing a model configuration.
pub fn write_model_config(archive: &mut Archive, cfg: &crate::model::ModelConfig) {
    archive.set("model.hidden", cfg.hidden);
    archive.set("model.heads", cfg.heads);
    archive.set("model.layers", cfg.layers);
    archive.set("model.vocab", cfg.vocab);
    archive.set("model.seq_len", cfg.seq_len);
    archive.set("model.ffn_hidden", cfg.ffn_hidden);
    archive.set("model.rope_base", cfg.rope_base);
    archive.set("model.tie_embeddings", cfg.tie_embeddings);
    archive.set("model.init_std", cfg.init_std);
}

pub fn read_model_config(archive: &Archive) -> Result<crate::model::ModelConfig> {
    let mut cfg = crate::model::ModelConfig::new(
        archive.parse("model.hidden")?,
        archive.parse("model.heads")?,
        archive.parse("model.layers")?,
        archive.parse("model.vocab")?,
        archive.parse("model.seq_len")?,
    );
    cfg.ffn_hidden = archive.parse("model.ffn_hidden")?;
    cfg.rope_base = archive.parse("model.rope_base")?;
    cfg.tie_embeddings = archive.parse("model.tie_embeddings")?;
    cfg.init_std = archive.parse("model.init_std")?;
    Ok(cfg)
}

/// Stores the configuration, every parameter, the LoRA scale and the merge
/// counts of wrapped projections.
pub fn write_model<T: Scalar>(archive: &mut Archive, model: &Transformer<T>) {
    write_model_config(archive, model.config());
    archive.set("dtype", T::DTYPE);
    archive.set("wrapped", model.is_wrapped());
    for (id, t) in model.params() {
        archive.put(format!("param/{id}"), Buffer::from_tensor(t));
    }
    for (l, block) in model.blocks().iter().enumerate() {
        for kind in crate::model::LinearKind::ALL {
            if let Some(lora) = block.linear(kind).as_lora() {
                archive.set("lora_scale", lora.scale());
                archive.set(format!("merged_count/{}", ParamId::Weight(l, kind)), lora.merged_count());
            }
        }
    }
}

/// Rebuilds a model, checking every buffer against the shape implied by the
/// stored configuration.
pub fn read_model<T: Scalar>(archive: &Archive) -> Result<Transformer<T>> {
    read_model_with_config(archive, read_model_config(archive)?)
}

/// Like [`read_model`] but validates the buffers against `cfg` instead of
/// the stored configuration.
pub fn read_model_with_config<T: Scalar>(archive: &Archive, cfg: crate::model::ModelConfig) -> Result<Transformer<T>> {
    let mut tensors = BTreeMap::new();
    for (name, buf) in &archive.buffers {
        let Some(pname) = name.strip_prefix("param/") else { continue };
        let id: ParamId = pname.parse()?;
        tensors.insert(id, buf.to_tensor::<T>()?);
    }
    let mut merged = BTreeMap::new();
    for (k, v) in &archive.manifest {
        if let Some(pname) = k.strip_prefix("merged_count/") {
            let n = v
                .parse()
                .map_err(|_| Error::Checkpoint(format!("manifest key `{k}` has invalid value `{v}`")))?;
            merged.insert(pname.parse()?, n);
        }
    }
    let scale = match archive.manifest.get("lora_scale") {
        Some(_) => archive.parse("lora_scale")?,
        None => 1.0,
    };
    Transformer::from_tensors(cfg, tensors, scale, &merged)
}

/// Saves a bare model checkpoint.
pub fn save_model<T: Scalar>(path: &Path, model: &Transformer<T>) -> Result<()> {
    let mut archive = Archive::new();
    archive.set("format_version", FORMAT_VERSION);
    write_model(&mut archive, model);
    archive.save(path)
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<Transformer<T>> {
    read_model(&Archive::load(path)?)
}

/// Effective weight of a projection in double precision: the dense weight,
/// or `W + s A B` for a wrapped one.
pub fn effective_weight(archive: &Archive, layer: &str) -> Result<(Vec<usize>, Vec<f64>)> {
    let base = archive
        .buffers
        .get(&format!("param/{layer}"))
        .ok_or_else(|| Error::Checkpoint(format!("layer `{layer}` is not in the checkpoint")))?;
    if base.shape.len() != 2 {
        return Err(Error::Checkpoint(format!("`{layer}` is not a matrix")));
    }
    let mut w: Vec<f64> = base.to_vec();
    if let (Some(a), Some(b)) = (
        archive.buffers.get(&format!("param/{layer}.lora_a")),
        archive.buffers.get(&format!("param/{layer}.lora_b")),
    ) {
        let scale: f64 = archive.parse("lora_scale")?;
        let (rows, cols) = (base.shape[0], base.shape[1]);
        let r = a.shape[1];
        if a.shape != [rows, r] || b.shape != [r, cols] {
            return Err(Error::Checkpoint(format!("LoRA factors of `{layer}` do not match its base")));
        }
        let mut ab = vec![0.0f64; rows * cols];
        let (av, bv): (Vec<f64>, Vec<f64>) = (a.to_vec(), b.to_vec());
        crate::tensor::gemm(
            crate::tensor::MatRef::row_major(&av, rows, r),
            crate::tensor::MatRef::row_major(&bv, r, cols),
            scale,
            0.0,
            &mut ab,
            cols,
        );
        for (x, d) in w.iter_mut().zip(ab) {
            *x += d;
        }
    }
    Ok((base.shape.clone(), w))
}
