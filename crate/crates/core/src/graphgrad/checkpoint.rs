use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::ParamStore;
use super::tensor::Tensor;
use crate::container;
use crate::error::{Error, Result};

const MAGIC: &str = "LATENTLAB-PARAMS";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    step: u64,
    params: Vec<ParamEntry>,
}

/// Writes parameter values (not optimizer moments) in store order.
pub fn save_params(store: &ParamStore, path: &Path) -> Result<()> {
    let mut payload = Vec::with_capacity(store.num_values());
    let mut params = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        params.push(ParamEntry { name: name.to_string(), shape: t.shape().to_vec() });
        payload.extend_from_slice(t.data());
    }
    container::write(path, MAGIC, VERSION, &Header { step: store.step(), params }, &payload)
}

pub fn load_params(path: &Path) -> Result<ParamStore> {
    let (header, payload): (Header, _) = container::read(path, MAGIC, VERSION)?;
    let mut store = ParamStore::new();
    let mut offset = 0;
    for p in header.params {
        let n: usize = p.shape.iter().product();
        let end = offset + n;
        if end > payload.len() {
            return Err(Error::Format(format!("payload too short for {}", p.name)));
        }
        store.insert(&p.name, Tensor::new(p.shape, payload[offset..end].to_vec())?)?;
        offset = end;
    }
    if offset != payload.len() {
        return Err(Error::Format("trailing payload values".into()));
    }
    store.set_step(header.step);
    Ok(store)
}
