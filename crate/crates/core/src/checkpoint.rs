//! Checkpoint format: a directory holding `manifest.json` (format version,
//! model config, progress counters, RNG state, tensor table) and
//! `weights.bin` (the named tensors as little-endian f32, at the offsets the
//! manifest lists). Optimizer moments ride along as `opt.m.*` / `opt.v.*`
//! tensors so training resumes exactly.

use crate::error::{Error, Result};
use crate::network::{MadaCenterNet, ModelConfig};
use crate::params::{Adam, ParamStore};
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct RngState {
    pub seed_hex: String,
    pub word_pos: (u64, u64),
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed = rng.get_seed();
        let pos = rng.get_word_pos();
        RngState {
            seed_hex: seed.iter().map(|b| format!("{b:02x}")).collect(),
            word_pos: ((pos >> 64) as u64, pos as u64),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        if self.seed_hex.len() != 64 {
            return Err(Error::checkpoint("rng seed must be 32 bytes of hex"));
        }
        let mut seed = [0u8; 32];
        for (i, chunk) in self.seed_hex.as_bytes().chunks(2).enumerate() {
            let s = std::str::from_utf8(chunk).map_err(|_| Error::checkpoint("bad rng seed hex"))?;
            seed[i] = u8::from_str_radix(s, 16).map_err(|_| Error::checkpoint("bad rng seed hex"))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos.0 as u128) << 64) | self.word_pos.1 as u128);
        Ok(rng)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into weights.bin.
    pub offset: u64,
    /// Element count.
    pub len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub epoch: usize,
    pub global_step: usize,
    pub rng_state: RngState,
    pub optimizer_step: Option<usize>,
    pub tensors: Vec<TensorRecord>,
}

pub fn save(
    dir: &Path,
    cfg: &ModelConfig,
    epoch: usize,
    global_step: usize,
    rng: &ChaCha8Rng,
    store: &ParamStore<f32>,
    adam: Option<&Adam<f32>>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut tensors = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    {
        let mut push = |name: String, value: &ArrayD<f32>| {
            tensors.push(TensorRecord {
                name,
                shape: value.shape().to_vec(),
                offset: blob.len() as u64,
                len: value.len(),
            });
            for v in value.iter() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        };
        for id in store.ids() {
            push(store.name(id).to_string(), store.value(id));
        }
        if let Some(adam) = adam {
            for (name, tensor) in adam.state_tensors(store) {
                push(name, tensor);
            }
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model_config: cfg.clone(),
        epoch,
        global_step,
        rng_state: RngState::capture(rng),
        optimizer_step: adam.map(|a| a.step_count()),
        tensors,
    };
    let mpath = dir.join("manifest.json");
    let mjson = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&mpath, mjson).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    let wpath = dir.join("weights.bin");
    let mut f = std::fs::File::create(&wpath).map_err(|e| Error::io(wpath.display().to_string(), e))?;
    f.write_all(&blob).map_err(|e| Error::io(wpath.display().to_string(), e))?;
    Ok(())
}

pub struct Loaded {
    pub manifest: Manifest,
    pub net: MadaCenterNet,
    pub store: ParamStore<f32>,
    /// Extra tensors (optimizer moments) keyed by name.
    pub extra: HashMap<String, ArrayD<f32>>,
}

pub fn load(dir: &Path) -> Result<Loaded> {
    let mpath = dir.join("manifest.json");
    let raw = std::fs::read_to_string(&mpath).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    let manifest: Manifest = serde_json::from_str(&raw).map_err(|e| {
        Error::checkpoint(format!("manifest {} does not parse: {e}", mpath.display()))
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::checkpoint(format!(
            "format version {} unsupported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let wpath = dir.join("weights.bin");
    let mut blob = Vec::new();
    std::fs::File::open(&wpath)
        .and_then(|mut f| f.read_to_end(&mut blob))
        .map_err(|e| Error::io(wpath.display().to_string(), e))?;

    let mut tensors: HashMap<String, ArrayD<f32>> = HashMap::new();
    for rec in &manifest.tensors {
        let start = rec.offset as usize;
        let end = start + rec.len * 4;
        if end > blob.len() {
            return Err(Error::checkpoint(format!(
                "tensor {} overruns weights.bin ({} > {})",
                rec.name,
                end,
                blob.len()
            )));
        }
        let data: Vec<f32> = blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&rec.shape), data)
            .map_err(|_| Error::checkpoint(format!("tensor {} shape mismatch", rec.name)))?;
        tensors.insert(rec.name.clone(), arr);
    }

    // Rebuild the parameter table from the config, then overwrite from disk.
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = MadaCenterNet::new(&mut store, &mut rng, &manifest.model_config)?;
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let Some(t) = tensors.remove(&name) else {
            return Err(Error::checkpoint(format!("missing tensor {name}")));
        };
        if t.shape() != store.value(id).shape() {
            return Err(Error::checkpoint(format!(
                "tensor {name} has shape {:?}, model expects {:?}",
                t.shape(),
                store.value(id).shape()
            )));
        }
        *store.value_mut(id) = t;
    }
    Ok(Loaded { manifest, net, store, extra: tensors })
}
