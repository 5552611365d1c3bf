//! Versioned binary checkpoints: the resolved model configuration (JSON),
//! its hash, and every parameter tensor as little-endian f64.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{DetectorModel, ModelConfig, ModelError, ModelParams};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"WALDCKPT";

/// A named view of one parameter tensor, used by the checkpoint writer and
/// the optimizer.
pub struct TensorSlot<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

impl ModelParams {
    /// Every parameter tensor in a stable, documented order.
    pub fn tensor_slots(&mut self) -> Vec<TensorSlot<'_>> {
        let mut slots: Vec<TensorSlot<'_>> = Vec::new();
        fn push<'a>(
            slots: &mut Vec<TensorSlot<'a>>,
            name: &str,
            shape: Vec<usize>,
            data: &'a mut [f64],
        ) {
            slots.push(TensorSlot { name: name.to_string(), shape, data });
        }
        macro_rules! conv {
            ($slots:expr, $prefix:expr, $layer:expr) => {{
                let shape = $layer.weight.shape().to_vec();
                push($slots, concat!($prefix, ".weight"), shape, $layer.weight.as_slice_mut().unwrap());
                let bshape = vec![$layer.bias.len()];
                push($slots, concat!($prefix, ".bias"), bshape, $layer.bias.as_slice_mut().unwrap());
            }};
        }
        conv!(&mut slots, "stream_ref.conv1", self.stream_ref.conv1);
        conv!(&mut slots, "stream_ref.conv2", self.stream_ref.conv2);
        conv!(&mut slots, "stream_ref.conv3", self.stream_ref.conv3);
        conv!(&mut slots, "stream_sensed.conv1", self.stream_sensed.conv1);
        conv!(&mut slots, "stream_sensed.conv2", self.stream_sensed.conv2);
        conv!(&mut slots, "stream_sensed.conv3", self.stream_sensed.conv3);
        conv!(&mut slots, "rpn.conv", self.rpn.conv);
        conv!(&mut slots, "rpn.head", self.rpn.head);
        if let Some(rfa) = self.rfa.as_mut() {
            conv!(&mut slots, "rfa.fc1", rfa.fc1);
            conv!(&mut slots, "rfa.fc2", rfa.fc2);
        }
        if let Some(caf) = self.caf.as_mut() {
            conv!(&mut slots, "caf.aux_ref", caf.aux_ref);
            conv!(&mut slots, "caf.aux_sensed", caf.aux_sensed);
        }
        conv!(&mut slots, "head.fc1", self.head.fc1);
        conv!(&mut slots, "head.cls", self.head.cls);
        conv!(&mut slots, "head.reg", self.head.reg);
        if let Some(reg3d) = self.head.reg3d.as_mut() {
            conv!(&mut slots, "head.reg3d", reg3d);
        }
        slots
    }

    /// Total number of learnable scalars.
    pub fn n_params(&mut self) -> usize {
        self.tensor_slots().iter().map(|s| s.data.len()).sum()
    }
}

/// Write a model checkpoint.
pub fn save_checkpoint(model: &DetectorModel, path: &Path) -> Result<(), ModelError> {
    let mut params = model.params.clone();
    let slots = params.tensor_slots();
    let config_json = serde_json::to_string(&model.config)
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&CHECKPOINT_FORMAT_VERSION.to_le_bytes())?;
    f.write_all(&(config_json.len() as u32).to_le_bytes())?;
    f.write_all(config_json.as_bytes())?;
    f.write_all(&model.config.config_hash().to_le_bytes())?;
    f.write_all(&(slots.len() as u32).to_le_bytes())?;
    for slot in slots {
        let name = slot.name.as_bytes();
        f.write_all(&(name.len() as u16).to_le_bytes())?;
        f.write_all(name)?;
        f.write_all(&(slot.shape.len() as u8).to_le_bytes())?;
        for d in &slot.shape {
            f.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in slot.data.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read a checkpoint back into a model.
pub fn load_checkpoint(path: &Path) -> Result<DetectorModel, ModelError> {
    let bad = |m: String| ModelError::Checkpoint(m);
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)".into()));
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    f.read_exact(&mut u32buf)?;
    let json_len = u32::from_le_bytes(u32buf) as usize;
    let mut json = vec![0u8; json_len];
    f.read_exact(&mut json)?;
    let config: ModelConfig =
        serde_json::from_slice(&json).map_err(|e| bad(format!("bad config json: {e}")))?;
    let mut u64buf = [0u8; 8];
    f.read_exact(&mut u64buf)?;
    let stored_hash = u64::from_le_bytes(u64buf);
    if stored_hash != config.config_hash() {
        return Err(bad("config hash mismatch (corrupted checkpoint?)".into()));
    }
    f.read_exact(&mut u32buf)?;
    let n_tensors = u32::from_le_bytes(u32buf) as usize;

    let mut model = DetectorModel::init(config, 0)?;
    let mut slots = model.params.tensor_slots();
    if slots.len() != n_tensors {
        return Err(bad(format!(
            "tensor count mismatch: file has {n_tensors}, architecture needs {}",
            slots.len()
        )));
    }
    for slot in slots.iter_mut() {
        let mut u16buf = [0u8; 2];
        f.read_exact(&mut u16buf)?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        let mut name = vec![0u8; name_len];
        f.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("bad tensor name".into()))?;
        if name != slot.name {
            return Err(bad(format!("tensor order mismatch: {name} vs {}", slot.name)));
        }
        let mut u8buf = [0u8; 1];
        f.read_exact(&mut u8buf)?;
        let ndim = u8buf[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            f.read_exact(&mut u32buf)?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        if shape != slot.shape {
            return Err(bad(format!(
                "tensor {name} shape mismatch: {shape:?} vs {:?}",
                slot.shape
            )));
        }
        let mut bytes = vec![0u8; slot.data.len() * 8];
        f.read_exact(&mut bytes)?;
        for (dst, chunk) in slot.data.iter_mut().zip(bytes.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    Ok(model)
}
