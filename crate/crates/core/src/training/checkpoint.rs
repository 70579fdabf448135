use std::fs;
use std::io::Write;
use std::path::Path;

use s2st_numerics::{ParamStore, Tensor};

use crate::config::Preset;
use crate::error::{Error, Result};

use super::Adam;

const MAGIC: &[u8; 8] = b"T2CKPT1\n";

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: usize,
    pub seed: u64,
    pub fingerprint: u64,
    pub skipped_steps: usize,
    pub best_accuracy: f64,
    pub preset: Preset,
    pub params: ParamStore<f32>,
    pub adam: Adam,
}

fn err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    /// Layout: magic, u64 manifest length, UTF-8 manifest, little-endian
    /// f32 payload. Manifest lines are `key=value` headers, `config\t<kv>`
    /// lines, and `tensor\t<kind>\t<name>\t<shape>\t<offset>` entries with
    /// offsets in floats.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = String::new();
        manifest.push_str(&format!("step={}\nseed={}\nfingerprint={:016x}\n", self.step, self.seed, self.fingerprint));
        manifest.push_str(&format!("skipped={}\nbest_accuracy={}\nadam_t={}\n", self.skipped_steps, self.best_accuracy, self.adam.t));
        for line in self.preset.dump().lines() {
            manifest.push_str(&format!("config\t{line}\n"));
        }
        let mut payload: Vec<f32> = Vec::with_capacity(3 * self.params.num_values());
        for (id, p) in self.params.iter() {
            let shape = p.value.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
            for (kind, data) in [("value", p.value.data()), ("m", &self.adam.m[id.index()][..]), ("v", &self.adam.v[id.index()][..])] {
                manifest.push_str(&format!("tensor\t{kind}\t{}\t{shape}\t{}\n", p.name, payload.len()));
                payload.extend_from_slice(data);
            }
        }
        let mut out = Vec::with_capacity(16 + manifest.len() + 4 * payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(err("not a T2CKPT1 file"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let manifest = bytes.get(16..16 + len).ok_or_else(|| err("truncated manifest"))?;
        let manifest = std::str::from_utf8(manifest).map_err(|_| err("manifest is not UTF-8"))?;
        let payload = &bytes[16 + len..];
        if payload.len() % 4 != 0 {
            return Err(err("payload is not a whole number of floats"));
        }
        let floats: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();

        let mut headers = std::collections::HashMap::new();
        let mut config = String::new();
        let mut tensors = Vec::new();
        for line in manifest.lines() {
            if let Some(kv) = line.strip_prefix("config\t") {
                config.push_str(kv);
                config.push('\n');
            } else if let Some(t) = line.strip_prefix("tensor\t") {
                let f: Vec<&str> = t.split('\t').collect();
                if f.len() != 4 {
                    return Err(err(format!("bad tensor entry {line:?}")));
                }
                let shape = f[2]
                    .split('x')
                    .map(|d| d.parse::<usize>().map_err(|_| err(format!("bad shape in {line:?}"))))
                    .collect::<Result<Vec<_>>>()?;
                let offset: usize = f[3].parse().map_err(|_| err(format!("bad offset in {line:?}")))?;
                tensors.push((f[0].to_string(), f[1].to_string(), shape, offset));
            } else if let Some((k, v)) = line.split_once('=') {
                headers.insert(k.to_string(), v.to_string());
            } else if !line.is_empty() {
                return Err(err(format!("unrecognized manifest line {line:?}")));
            }
        }
        let header = |k: &str| headers.get(k).ok_or_else(|| err(format!("missing header {k}")));
        let parse_usize = |k: &str| header(k)?.parse::<usize>().map_err(|_| err(format!("bad header {k}")));
        let preset = Preset::from_kv_text(&config)?;
        let fingerprint = u64::from_str_radix(header("fingerprint")?, 16).map_err(|_| err("bad fingerprint"))?;
        if fingerprint != preset.fingerprint() {
            return Err(err("stored fingerprint does not match the stored configuration"));
        }

        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for (kind, name, shape, offset) in tensors {
            let n: usize = shape.iter().product();
            let data = floats.get(offset..offset + n).ok_or_else(|| err(format!("{name}: payload out of range")))?.to_vec();
            match kind.as_str() {
                "value" => {
                    params.add(name, Tensor::new(&shape, data)?)?;
                }
                "m" => m.push(data),
                "v" => v.push(data),
                _ => return Err(err(format!("unknown tensor kind {kind}"))),
            }
        }
        if m.len() != params.len() || v.len() != params.len() {
            return Err(err("optimizer moments do not match the parameters"));
        }
        let adam = Adam {
            m,
            v,
            t: header("adam_t")?.parse().map_err(|_| err("bad adam_t"))?,
            beta1: preset.train.adam_beta1,
            beta2: preset.train.adam_beta2,
            eps: preset.train.adam_eps,
        };
        Ok(Checkpoint {
            step: parse_usize("step")?,
            seed: header("seed")?.parse().map_err(|_| err("bad seed"))?,
            fingerprint,
            skipped_steps: parse_usize("skipped")?,
            best_accuracy: header("best_accuracy")?.parse().map_err(|_| err("bad best_accuracy"))?,
            preset,
            params,
            adam,
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn
    /// checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| err(format!("cannot read {}: {e}", path.display())))?;
        Checkpoint::from_bytes(&bytes)
    }
}
