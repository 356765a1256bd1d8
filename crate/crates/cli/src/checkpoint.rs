//! Versioned binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "IDMCKPT\0"
//! version      u32      currently 1
//! C_t          u64      target classes of the hybrid classifier
//! sections     u32      number of sections that follow
//! per section:
//!   name_len   u16, name (UTF-8)
//!   len        u64      payload bytes, so unknown or unwanted sections can be skipped
//!   payload
//! ```
//!
//! Sections written: `config` (the run config as TOML text), `meta`
//! (u64 source classes, u64 epoch), `model` (tensors) and `idm` (tensors of
//! the mixing module, needed only to resume training). A tensor list is a
//! u32 count followed by, per tensor, `u16 name_len, name, u32 rank,
//! rank × u64 dims, f64 values`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use idm_core::autodiff::Tensor;
use idm_core::network::{Model, ModelState};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult, Context};

pub const MAGIC: &[u8; 8] = b"IDMCKPT\0";
pub const VERSION: u32 = 1;

fn is_idm(name: &str) -> bool {
    name.starts_with("idm.")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub num_source_classes: usize,
    pub epoch: usize,
    pub state: ModelState,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ReadOptions {
    /// Leave the `idm` section unread; the model is then rebuilt without the mixing module.
    pub skip_idm: bool,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn encode_tensors<'a>(entries: impl Iterator<Item = &'a (String, Tensor)>) -> Vec<u8> {
    let entries: Vec<_> = entries.collect();
    let mut out = Vec::new();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        put_str(&mut out, name);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> CliResult<&'a [u8]> {
        if self.buf.len() < n {
            return Err(CliError::format(format!("truncated {} section", self.what)));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u16(&mut self) -> CliResult<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> CliResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> CliResult<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CliError::format(format!("non UTF-8 name in {} section", self.what)))
    }

    fn finish(&self) -> CliResult<()> {
        if !self.buf.is_empty() {
            return Err(CliError::format(format!("{} trailing bytes in {} section", self.buf.len(), self.what)));
        }
        Ok(())
    }
}

fn decode_tensors(buf: &[u8], what: &'static str) -> CliResult<Vec<(String, Tensor)>> {
    let mut c = Cursor { buf, what };
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = c.string()?;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<CliResult<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| CliError::format(format!("{name}: shape overflows")))?;
        let bytes = c.take(len.checked_mul(8).ok_or_else(|| CliError::format(format!("{name}: shape overflows")))?)?;
        let data = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        let tensor = Tensor::new(shape, data).map_err(|e| CliError::format(format!("{name}: {e}")))?;
        out.push((name, tensor));
    }
    c.finish()?;
    Ok(out)
}

impl Checkpoint {
    /// Entries are kept in file order: model tensors first, then the mixing module.
    pub fn from_model(config: &RunConfig, model: &Model, epoch: usize) -> Self {
        let mut state = model.state();
        state.entries.sort_by_key(|(name, _)| is_idm(name));
        Self { config: config.clone(), num_source_classes: model.config().num_source_classes, epoch, state }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta = Vec::with_capacity(16);
        meta.extend_from_slice(&(self.num_source_classes as u64).to_le_bytes());
        meta.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        let mut sections: Vec<(&str, Vec<u8>)> = vec![
            ("config", self.config.to_toml().into_bytes()),
            ("meta", meta),
            ("model", encode_tensors(self.state.entries.iter().filter(|(n, _)| !is_idm(n)))),
        ];
        if self.state.entries.iter().any(|(n, _)| is_idm(n)) {
            sections.push(("idm", encode_tensors(self.state.entries.iter().filter(|(n, _)| is_idm(n)))));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.state.num_target_classes as u64).to_le_bytes());
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (name, payload) in sections {
            put_str(&mut out, name);
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        out
    }

    /// Parses a checkpoint from any reader. Sections with unknown names are skipped.
    pub fn read_from(mut r: impl Read, options: ReadOptions) -> CliResult<Self> {
        let mut header = [0u8; 24];
        r.read_exact(&mut header).map_err(|_| CliError::format("file too short for a checkpoint header"))?;
        if &header[..8] != MAGIC {
            return Err(CliError::format("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(CliError::format(format!("unsupported checkpoint version {version} (expected {VERSION})")));
        }
        let num_target_classes = u64::from_le_bytes(header[12..20].try_into().unwrap()) as usize;
        let count = u32::from_le_bytes(header[20..24].try_into().unwrap());

        let (mut config, mut meta, mut model, mut idm) = (None, None, None, Vec::new());
        for _ in 0..count {
            let mut len2 = [0u8; 2];
            r.read_exact(&mut len2).map_err(|_| CliError::format("truncated section header"))?;
            let mut name = vec![0u8; u16::from_le_bytes(len2) as usize];
            let mut len8 = [0u8; 8];
            r.read_exact(&mut name).and_then(|_| r.read_exact(&mut len8)).map_err(|_| CliError::format("truncated section header"))?;
            let name = String::from_utf8(name).map_err(|_| CliError::format("non UTF-8 section name"))?;
            let len = u64::from_le_bytes(len8);
            let skip = (name == "idm" && options.skip_idm) || !matches!(name.as_str(), "config" | "meta" | "model" | "idm");
            if skip {
                let skipped = std::io::copy(&mut (&mut r).take(len), &mut std::io::sink())?;
                if skipped != len {
                    return Err(CliError::format(format!("truncated `{name}` section")));
                }
                continue;
            }
            let mut payload = Vec::new();
            (&mut r).take(len).read_to_end(&mut payload)?;
            if payload.len() as u64 != len {
                return Err(CliError::format(format!("truncated `{name}` section")));
            }
            match name.as_str() {
                "config" => {
                    let text = String::from_utf8(payload).map_err(|_| CliError::format("config section is not UTF-8"))?;
                    config = Some(RunConfig::parse(&text).map_err(|e| CliError::format(format!("config section: {}", e.message)))?);
                }
                "meta" => {
                    let mut c = Cursor { buf: &payload, what: "meta" };
                    meta = Some((c.u64()? as usize, c.u64()? as usize));
                    c.finish()?;
                }
                "model" => model = Some(decode_tensors(&payload, "model")?),
                _ => idm = decode_tensors(&payload, "idm")?,
            }
        }
        let missing = |s: &str| CliError::format(format!("checkpoint has no `{s}` section"));
        let config = config.ok_or_else(|| missing("config"))?;
        let (num_source_classes, epoch) = meta.ok_or_else(|| missing("meta"))?;
        let mut entries = model.ok_or_else(|| missing("model"))?;
        entries.extend(idm);
        Ok(Self { config, num_source_classes, epoch, state: ModelState { num_target_classes, entries } })
    }

    /// Writes through a temporary file and a rename, so an interrupted write
    /// never replaces a good checkpoint with a partial one.
    pub fn save(&self, path: &Path) -> CliResult<()> {
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp).context(tmp.display())?);
            w.write_all(&self.to_bytes()).context(tmp.display())?;
            w.flush().context(tmp.display())?;
        }
        fs::rename(&tmp, path).context(path.display())
    }

    pub fn load(path: &Path, options: ReadOptions) -> CliResult<Self> {
        let file = File::open(path).context(path.display())?;
        Self::read_from(BufReader::new(file), options).map_err(|e| e.context(path.display()))
    }

    /// Rebuilds the model. Without IDM tensors the model is built without the mixing module.
    pub fn to_model(&self) -> CliResult<Model> {
        let has_idm = self.state.entries.iter().any(|(n, _)| is_idm(n));
        let mut model_config = self.config.train.model_config(self.num_source_classes);
        if !has_idm {
            model_config.idm = None;
        }
        let mut model = Model::new(model_config, self.config.train.seed)?;
        model.load_state(&self.state).map_err(|e| CliError::format(format!("checkpoint does not match its config: {e}")))?;
        Ok(model)
    }
}
