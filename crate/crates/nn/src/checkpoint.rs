//! Parameter and buffer persistence in the safetensors format.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{NnError, Result};
use crate::params::ParamStore;

fn to_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for p in store.params() {
        owned.push((p.name.clone(), p.value.shape().to_vec(), to_bytes(p.value.data())));
    }
    for b in store.buffers() {
        owned.push((b.name.clone(), b.value.shape().to_vec(), to_bytes(b.value.data())));
    }
    let views = owned
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| NnError::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize_to_file(views, None, path).map_err(|e| NnError::Checkpoint(e.to_string()))
}

/// Loads values into `store`, which must already have the checkpoint's layout.
/// Every missing or mis-shaped tensor is reported in a single error.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let mut found: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(NnError::Checkpoint(format!("{name}: expected f32")));
        }
        let data = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        found.insert(name, (view.shape().to_vec(), data));
    }
    let mut bad = Vec::new();
    let names = store
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.shape().to_vec()))
        .chain(
            store
                .buffers()
                .iter()
                .map(|b| (b.name.clone(), b.value.shape().to_vec())),
        );
    for (name, shape) in names {
        match found.get(&name) {
            None => bad.push(format!("{name} (missing)")),
            Some((s, _)) if *s != shape => bad.push(format!("{name} (expected {shape:?}, found {s:?})")),
            Some(_) => {}
        }
    }
    if !bad.is_empty() {
        return Err(NnError::Checkpoint(format!(
            "checkpoint {} does not match the network: {}",
            path.display(),
            bad.join(", ")
        )));
    }
    for p in store.params_mut() {
        let (_, data) = found.remove(&p.name).expect("checked above");
        p.value.data_mut().copy_from_slice(&data);
    }
    for b in store.buffers_mut() {
        let (_, data) = found.remove(&b.name).expect("checked above");
        b.value.data_mut().copy_from_slice(&data);
    }
    Ok(())
}
