//! Binary model checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "VPAU"  u32 version
//! u32 in_channels, u32 levels, u32 base_features, u32 out_channels
//! f64 bn_momentum, f64 bn_epsilon
//! u32 tensor count, then per tensor:
//!     u32 name length, name bytes (UTF-8), u32 rank, u32 dims[rank], f32 data[]
//! u8 training-state flag; when 1:
//!     u64 epoch, u64 optimizer step, u32 tensor count, tensors as above
//! ```
//!
//! Model tensors are the learnable parameters, `<bn>.running_mean` /
//! `<bn>.running_var` per batch norm, and optionally `meta.template_grid`
//! (dims then spacing of the training template). Optimizer moments are stored
//! as `adam.m.<param>` / `adam.v.<param>`.

use std::collections::HashMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::unet::{AdamState, UNetConfig, UNetModel};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VPAU";
pub const CHECKPOINT_VERSION: u32 = 1;

const TEMPLATE_GRID: &str = "meta.template_grid";

/// Geometry of the template a model was trained on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemplateGrid {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub epoch: u64,
    pub adam: AdamState<f32>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: UNetModel,
    pub template_grid: Option<TemplateGrid>,
    pub training: Option<TrainingState>,
}

struct NamedTensor {
    name: String,
    dims: Vec<usize>,
    data: Vec<f32>,
}

fn write_tensor(buf: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f32]) {
    buf.write_u32::<LittleEndian>(name.len() as u32).unwrap();
    buf.extend_from_slice(name.as_bytes());
    buf.write_u32::<LittleEndian>(dims.len() as u32).unwrap();
    for &d in dims {
        buf.write_u32::<LittleEndian>(d as u32).unwrap();
    }
    for &v in data {
        buf.write_f32::<LittleEndian>(v).unwrap();
    }
}

fn corrupt(what: &str) -> Error {
    Error::Checkpoint(format!("corrupt or truncated file ({what})"))
}

fn read_tensor(r: &mut Cursor<&[u8]>) -> Result<NamedTensor> {
    let len = r.read_u32::<LittleEndian>().map_err(|_| corrupt("name length"))? as usize;
    let remaining = r.get_ref().len() - r.position() as usize;
    if len > remaining {
        return Err(corrupt("name"));
    }
    let mut name = vec![0u8; len];
    r.read_exact(&mut name).map_err(|_| corrupt("name"))?;
    let name = String::from_utf8(name).map_err(|_| corrupt("name encoding"))?;
    let rank = r.read_u32::<LittleEndian>().map_err(|_| corrupt("rank"))? as usize;
    if rank > 8 {
        return Err(corrupt("rank"));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.read_u32::<LittleEndian>().map_err(|_| corrupt("dims"))? as usize);
    }
    let n: usize = dims.iter().product();
    let remaining = r.get_ref().len() - r.position() as usize;
    if n.checked_mul(4).is_none_or(|b| b > remaining) {
        return Err(corrupt(&format!("data of {name}")));
    }
    let mut data = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut data)
        .map_err(|_| corrupt("data"))?;
    Ok(NamedTensor { name, dims, data })
}

fn read_tensors(r: &mut Cursor<&[u8]>) -> Result<Vec<NamedTensor>> {
    let count = r.read_u32::<LittleEndian>().map_err(|_| corrupt("tensor count"))?;
    (0..count).map(|_| read_tensor(r)).collect()
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let model = &ckpt.model;
    let cfg = model.config();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.write_u32::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
    for v in [cfg.in_channels, cfg.levels, cfg.base_features, cfg.out_channels] {
        buf.write_u32::<LittleEndian>(v as u32).unwrap();
    }
    buf.write_f64::<LittleEndian>(cfg.bn_momentum).unwrap();
    buf.write_f64::<LittleEndian>(cfg.bn_epsilon).unwrap();

    let count = model.params().len() + 2 * model.running_stats().len() + ckpt.template_grid.is_some() as usize;
    buf.write_u32::<LittleEndian>(count as u32).unwrap();
    for p in model.params() {
        write_tensor(&mut buf, &p.name, &p.shape, &p.value);
    }
    for s in model.running_stats() {
        write_tensor(&mut buf, &format!("{}.running_mean", s.name), &[s.mean.len()], &s.mean);
        write_tensor(&mut buf, &format!("{}.running_var", s.name), &[s.var.len()], &s.var);
    }
    if let Some(g) = ckpt.template_grid {
        let v = [
            g.dims[0] as f32,
            g.dims[1] as f32,
            g.dims[2] as f32,
            g.spacing[0],
            g.spacing[1],
            g.spacing[2],
        ];
        write_tensor(&mut buf, TEMPLATE_GRID, &[6], &v);
    }

    match &ckpt.training {
        None => buf.push(0),
        Some(state) => {
            buf.push(1);
            buf.write_u64::<LittleEndian>(state.epoch).unwrap();
            buf.write_u64::<LittleEndian>(state.adam.step).unwrap();
            buf.write_u32::<LittleEndian>(2 * model.params().len() as u32).unwrap();
            for (i, p) in model.params().iter().enumerate() {
                write_tensor(&mut buf, &format!("adam.m.{}", p.name), &p.shape, &state.adam.first[i]);
                write_tensor(&mut buf, &format!("adam.v.{}", p.name), &p.shape, &state.adam.second[i]);
            }
        }
    }
    buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| corrupt("magic"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| corrupt("version"))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut head = [0usize; 4];
    for h in &mut head {
        *h = r.read_u32::<LittleEndian>().map_err(|_| corrupt("config"))? as usize;
    }
    let config = UNetConfig {
        in_channels: head[0],
        levels: head[1],
        base_features: head[2],
        out_channels: head[3],
        bn_momentum: r.read_f64::<LittleEndian>().map_err(|_| corrupt("config"))?,
        bn_epsilon: r.read_f64::<LittleEndian>().map_err(|_| corrupt("config"))?,
    };
    let mut model =
        UNetModel::new(config, 0).map_err(|e| Error::Checkpoint(format!("declared configuration is invalid: {e}")))?;

    let mut tensors: HashMap<String, NamedTensor> =
        read_tensors(&mut r)?.into_iter().map(|t| (t.name.clone(), t)).collect();
    let mut take = |name: &str, dims: &[usize]| -> Result<Vec<f32>> {
        let t = tensors
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if t.dims != dims {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has dims {:?}, declared configuration needs {dims:?}",
                t.dims
            )));
        }
        Ok(t.data)
    };
    for p in model.params_mut() {
        p.value = take(&p.name, &p.shape.clone())?;
    }
    for s in model.running_stats_mut() {
        let n = s.mean.len();
        s.mean = take(&format!("{}.running_mean", s.name), &[n])?;
        s.var = take(&format!("{}.running_var", s.name), &[n])?;
    }
    let template_grid = match tensors.remove(TEMPLATE_GRID) {
        Some(t) if t.data.len() == 6 => Some(TemplateGrid {
            dims: [t.data[0] as usize, t.data[1] as usize, t.data[2] as usize],
            spacing: [t.data[3], t.data[4], t.data[5]],
        }),
        Some(_) => return Err(corrupt(TEMPLATE_GRID)),
        None => None,
    };
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
    }

    let flag = r.read_u8().map_err(|_| corrupt("training-state flag"))?;
    let training = match flag {
        0 => None,
        1 => {
            let epoch = r.read_u64::<LittleEndian>().map_err(|_| corrupt("epoch"))?;
            let step = r.read_u64::<LittleEndian>().map_err(|_| corrupt("optimizer step"))?;
            let mut moments: HashMap<String, NamedTensor> =
                read_tensors(&mut r)?.into_iter().map(|t| (t.name.clone(), t)).collect();
            let mut adam = AdamState::for_model(&model);
            adam.step = step;
            for (i, p) in model.params().iter().enumerate() {
                for (prefix, slot) in [("adam.m.", &mut adam.first[i]), ("adam.v.", &mut adam.second[i])] {
                    let name = format!("{prefix}{}", p.name);
                    let t = moments
                        .remove(&name)
                        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
                    if t.dims != p.shape {
                        return Err(Error::Checkpoint(format!(
                            "tensor {name} has dims {:?}, expected {:?}",
                            t.dims, p.shape
                        )));
                    }
                    *slot = t.data;
                }
            }
            Some(TrainingState { epoch, adam })
        }
        _ => return Err(corrupt("training-state flag")),
    };
    if (r.position() as usize) != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(Checkpoint {
        model,
        template_grid,
        training,
    })
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Saves only the model (no optimizer state, no template grid).
pub fn save_checkpoint(model: &UNetModel, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(
        &Checkpoint {
            model: model.clone(),
            template_grid: None,
            training: None,
        },
        path,
    )
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<UNetModel> {
    Ok(read_checkpoint(path)?.model)
}
