//! Checkpoint container: `SSCP` magic, version, JSON header (model/optimizer
//! configuration, tensor directory, step counter), then raw little-endian
//! f64 blobs for parameters and both Adam moments, in directory order.
//!
//! Weights are stored as f64, not f32: training runs entirely in f64 and
//! resuming must be bit-compatible with an uninterrupted run. The header
//! records the dtype so readers can tell.

use std::fs;
use std::path::Path;

use serde_json::{json, Map, Value};

use scenestreamer_core::model::{Model, ModelConfig};
use scenestreamer_core::nn::AdamW;
use scenestreamer_core::train::{TrainConfig, Trainer};

use crate::error::{AppError, AppResult};

const MAGIC: &[u8; 4] = b"SSCP";
const VERSION: u32 = 1;

pub fn save_checkpoint(tr: &Trainer, path: &Path) -> AppResult<()> {
    let names = tr.model.param_names();
    let shapes = tr.model.param_shapes();
    let tensors: Vec<Value> = names
        .iter()
        .zip(&shapes)
        .map(|(n, (r, c))| json!({"name": n, "rows": r, "cols": c}))
        .collect();
    let header = json!({
        "dtype": "f64le",
        "step": tr.step,
        "model_config": model_config_to_json(&tr.model.cfg),
        "train_config": {
            "base_lr": tr.cfg.base_lr,
            "warmup_steps": tr.cfg.warmup_steps,
            "total_steps": tr.cfg.total_steps,
            "grad_clip": tr.cfg.grad_clip,
            "weight_decay": tr.cfg.weight_decay,
        },
        "opt": {
            "beta1": tr.opt.beta1,
            "beta2": tr.opt.beta2,
            "eps": tr.opt.eps,
            "weight_decay": tr.opt.weight_decay,
            "step": tr.opt.step,
        },
        "tensors": tensors,
    });
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| AppError::Runtime(e.to_string()))?;
    let scalars = tr.model.num_scalars();
    let mut out = Vec::with_capacity(12 + header_bytes.len() + 3 * scalars * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for group in [&tr.model.params, &tr.opt.m, &tr.opt.v] {
        for mat in group.iter() {
            for &x in &mat.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    fs::write(path, out).map_err(|e| AppError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> AppResult<Trainer> {
    let bytes =
        fs::read(path).map_err(|e| AppError::Runtime(format!("{}: {e}", path.display())))?;
    let fail = |m: &str| AppError::Validation(format!("{}: {m}", path.display()));
    if bytes.len() < 12 || &bytes[0..4] != MAGIC {
        return Err(fail("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(fail(&format!("unsupported checkpoint version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12 + header_len;
    if bytes.len() < header_end {
        return Err(fail("truncated header"));
    }
    let header: Value = serde_json::from_slice(&bytes[12..header_end])
        .map_err(|e| fail(&format!("bad header json: {e}")))?;
    let h = header.as_object().ok_or_else(|| fail("header is not an object"))?;
    let dtype = str_field(h, "dtype").map_err(|m| fail(&m))?;
    if dtype != "f64le" {
        return Err(fail(&format!("unsupported dtype {dtype:?}")));
    }
    let step = u64_field(h, "step").map_err(|m| fail(&m))?;
    let mcfg = model_config_from_json(
        h.get("model_config").ok_or_else(|| fail("missing model_config"))?,
    )
    .map_err(|m| fail(&m))?;
    let tc = h
        .get("train_config")
        .and_then(Value::as_object)
        .ok_or_else(|| fail("missing train_config"))?;
    let tcfg = TrainConfig {
        base_lr: f64_field(tc, "base_lr").map_err(|m| fail(&m))?,
        warmup_steps: u64_field(tc, "warmup_steps").map_err(|m| fail(&m))?,
        total_steps: u64_field(tc, "total_steps").map_err(|m| fail(&m))?,
        grad_clip: f64_field(tc, "grad_clip").map_err(|m| fail(&m))?,
        weight_decay: f64_field(tc, "weight_decay").map_err(|m| fail(&m))?,
    };
    let oc = h
        .get("opt")
        .and_then(Value::as_object)
        .ok_or_else(|| fail("missing opt"))?;

    let mut model = Model::new(mcfg, 0)?;
    let tensors = h
        .get("tensors")
        .and_then(Value::as_array)
        .ok_or_else(|| fail("missing tensors"))?;
    let names = model.param_names().to_vec();
    let shapes = model.param_shapes();
    if tensors.len() != names.len() {
        return Err(fail(&format!(
            "tensor directory has {} entries, model expects {}",
            tensors.len(),
            names.len()
        )));
    }
    for (i, t) in tensors.iter().enumerate() {
        let t = t.as_object().ok_or_else(|| fail("tensor entry is not an object"))?;
        let name = str_field(t, "name").map_err(|m| fail(&m))?;
        let rows = u64_field(t, "rows").map_err(|m| fail(&m))? as usize;
        let cols = u64_field(t, "cols").map_err(|m| fail(&m))? as usize;
        if name != names[i] || (rows, cols) != shapes[i] {
            return Err(fail(&format!(
                "tensor {i} is {name} [{rows}x{cols}], model expects {} [{}x{}]",
                names[i], shapes[i].0, shapes[i].1
            )));
        }
    }
    let scalars = model.num_scalars();
    let blob = &bytes[header_end..];
    if blob.len() != 3 * scalars * 8 {
        return Err(fail(&format!(
            "blob holds {} bytes, expected {}",
            blob.len(),
            3 * scalars * 8
        )));
    }
    let mut opt = AdamW::new(&shapes, tcfg.weight_decay);
    opt.beta1 = f64_field(oc, "beta1").map_err(|m| fail(&m))?;
    opt.beta2 = f64_field(oc, "beta2").map_err(|m| fail(&m))?;
    opt.eps = f64_field(oc, "eps").map_err(|m| fail(&m))?;
    opt.weight_decay = f64_field(oc, "weight_decay").map_err(|m| fail(&m))?;
    opt.step = u64_field(oc, "step").map_err(|m| fail(&m))?;
    let mut offset = 0usize;
    for group in [&mut model.params, &mut opt.m, &mut opt.v] {
        for mat in group.iter_mut() {
            for x in mat.data.iter_mut() {
                *x = f64::from_le_bytes(blob[offset..offset + 8].try_into().unwrap());
                offset += 8;
            }
        }
    }
    let mut tr = Trainer::new(model, tcfg)?;
    tr.opt = opt;
    tr.step = step;
    Ok(tr)
}

pub fn model_config_to_json(c: &ModelConfig) -> Value {
    json!({
        "d_model": c.d_model,
        "n_heads": c.n_heads,
        "enc_layers": c.enc_layers,
        "dec_layers": c.dec_layers,
        "rs_layers": c.rs_layers,
        "d_rel": c.d_rel,
        "d_ff": c.d_ff,
        "max_agents": c.max_agents,
        "max_lights": c.max_lights,
        "max_map_segments": c.max_map_segments,
        "knn_k": c.knn_k,
        "nucleus_p": c.nucleus_p,
    })
}

pub fn model_config_from_json(v: &Value) -> Result<ModelConfig, String> {
    let o = v.as_object().ok_or("model_config is not an object")?;
    let u = |k: &str| u64_field(o, k).map(|x| x as usize);
    Ok(ModelConfig {
        d_model: u("d_model")?,
        n_heads: u("n_heads")?,
        enc_layers: u("enc_layers")?,
        dec_layers: u("dec_layers")?,
        rs_layers: u("rs_layers")?,
        d_rel: u("d_rel")?,
        d_ff: u("d_ff")?,
        max_agents: u("max_agents")?,
        max_lights: u("max_lights")?,
        max_map_segments: u("max_map_segments")?,
        knn_k: u("knn_k")?,
        nucleus_p: f64_field(o, "nucleus_p")?,
    })
}

fn str_field<'a>(o: &'a Map<String, Value>, k: &str) -> Result<&'a str, String> {
    o.get(k).and_then(Value::as_str).ok_or_else(|| format!("missing string field {k:?}"))
}

fn f64_field(o: &Map<String, Value>, k: &str) -> Result<f64, String> {
    o.get(k).and_then(Value::as_f64).ok_or_else(|| format!("missing number field {k:?}"))
}

fn u64_field(o: &Map<String, Value>, k: &str) -> Result<u64, String> {
    o.get(k).and_then(Value::as_u64).ok_or_else(|| format!("missing integer field {k:?}"))
}
