//! Versioned binary model checkpoints.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic           4 bytes  "LCKP"
//! version         u32      currently 1
//! spec length     u32      followed by that many bytes of ModelSpec JSON
//! tensor count    u32
//! per tensor:
//!   name length   u16      followed by that many bytes of UTF-8 name
//!   rank          u8
//!   dims          rank × u32
//!   data          product(dims) × f64 (IEEE-754 bits, little-endian)
//! ```
//!
//! The tensor list holds the frozen embedding table (`embedding.weight`),
//! every learnable parameter, and the batch-norm running statistics. Raw
//! float bits are preserved, so save → load → save round-trips bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelError, ModelSpec};
use crate::autodiff::Tensor;

const MAGIC: &[u8; 4] = b"LCKP";
const VERSION: u32 = 1;

impl Model {
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let spec_json = serde_json::to_vec(self.spec())
            .map_err(|e| ModelError::Checkpoint(format!("serialize spec: {e}")))?;
        w.write_all(&(spec_json.len() as u32).to_le_bytes())?;
        w.write_all(&spec_json)?;

        let mut tensors: Vec<(String, &Tensor)> =
            vec![("embedding.weight".to_string(), self.embedding())];
        tensors.extend(self.named_parameters());
        tensors.extend(self.named_buffers());

        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, tensor) in tensors {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u16).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&[tensor.shape().len() as u8])?;
            for d in tensor.shape() {
                w.write_all(&(*d as u32).to_le_bytes())?;
            }
            for v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model, ModelError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ModelError::Checkpoint("bad magic bytes".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        let spec_len = read_u32(&mut r)? as usize;
        let mut spec_buf = vec![0u8; spec_len];
        r.read_exact(&mut spec_buf)?;
        let spec: ModelSpec = serde_json::from_slice(&spec_buf)
            .map_err(|e| ModelError::Checkpoint(format!("parse spec: {e}")))?;

        let count = read_u32(&mut r)? as usize;
        let mut embedding = None;
        let mut rest = Vec::new();
        for _ in 0..count {
            let name_len = read_u16(&mut r)? as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)?;
            let name = String::from_utf8(name_buf)
                .map_err(|_| ModelError::Checkpoint("tensor name is not UTF-8".into()))?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank)?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                shape.push(read_u32(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = vec![0.0f64; numel];
            let mut buf = [0u8; 8];
            for v in data.iter_mut() {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            let tensor = Tensor::from_vec(&shape, data)
                .map_err(|e| ModelError::Checkpoint(format!("tensor '{name}': {e}")))?;
            if name == "embedding.weight" {
                embedding = Some(tensor);
            } else {
                rest.push((name, tensor));
            }
        }
        let embedding =
            embedding.ok_or_else(|| ModelError::Checkpoint("missing embedding.weight".into()))?;
        let mut model = Model::new(spec, embedding)?;

        let mut expected: Vec<String> = model
            .named_parameters()
            .iter()
            .map(|(n, _)| n.clone())
            .chain(model.named_buffers().iter().map(|(n, _)| n.clone()))
            .collect();
        for (name, tensor) in rest {
            match expected.iter().position(|n| *n == name) {
                Some(at) => {
                    expected.swap_remove(at);
                }
                None => {
                    return Err(ModelError::Checkpoint(format!(
                        "unexpected or duplicate tensor '{name}'"
                    )))
                }
            }
            model.load_tensor(&name, tensor)?;
        }
        if !expected.is_empty() {
            return Err(ModelError::Checkpoint(format!("missing tensors: {expected:?}")));
        }
        Ok(model)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, ModelError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u16(r: &mut impl Read) -> Result<u16, ModelError> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}
