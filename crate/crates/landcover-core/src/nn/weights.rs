//! Binary weight container: named tensors (parameters and batch-norm
//! buffers) as little-endian f32, keyed by name so a freshly built graph of
//! the same architecture can be refilled exactly.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use thiserror::Error;

use super::graph::Graph;

const MAGIC: &[u8; 4] = b"LCW1";

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not a weights file (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("weights file misses tensor {0:?} required by the architecture")]
    MissingTensor(String),
    #[error("tensor {name:?} has shape {got:?}, architecture expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

pub fn save_weights(graph: &Graph, path: &Path) -> Result<(), WeightsError> {
    let io_err = |source| WeightsError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        let total = graph.params.len() + graph.buffers.len();
        w.write_u32::<LittleEndian>(total as u32)?;
        let entries = graph
            .params
            .iter()
            .map(|p| (&p.name, &p.value))
            .chain(graph.buffers.iter().map(|b| (&b.name, &b.value)));
        for (name, value) in entries {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u8(value.ndim() as u8)?;
            for &d in value.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in value.as_slice().expect("contiguous tensor") {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        w.flush()
    })()
    .map_err(io_err)
}

/// Fills the parameters and buffers of an already-built graph from a
/// weights file, matching tensors by name and checking shapes.
pub fn load_weights(graph: &mut Graph, path: &Path) -> Result<(), WeightsError> {
    let io_err = |source| WeightsError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(WeightsError::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let total = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let mut tensors: HashMap<String, ArrayD<f32>> = HashMap::with_capacity(total);
    for _ in 0..total {
        let name_len = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(io_err)?;
        let name = String::from_utf8_lossy(&name_bytes).into_owned();
        let ndim = r.read_u8().map_err(io_err)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u64::<LittleEndian>().map_err(io_err)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = vec![0f32; len];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(io_err)?;
        tensors.insert(
            name,
            ArrayD::from_shape_vec(IxDyn(&shape), data).expect("consistent tensor"),
        );
    }

    for param in &mut graph.params {
        let tensor = tensors
            .remove(&param.name)
            .ok_or_else(|| WeightsError::MissingTensor(param.name.clone()))?;
        if tensor.shape() != param.value.shape() {
            return Err(WeightsError::ShapeMismatch {
                name: param.name.clone(),
                expected: param.value.shape().to_vec(),
                got: tensor.shape().to_vec(),
            });
        }
        param.value = tensor;
    }
    for buffer in &mut graph.buffers {
        let tensor = tensors
            .remove(&buffer.name)
            .ok_or_else(|| WeightsError::MissingTensor(buffer.name.clone()))?;
        if tensor.shape() != buffer.value.shape() {
            return Err(WeightsError::ShapeMismatch {
                name: buffer.name.clone(),
                expected: buffer.value.shape().to_vec(),
                got: tensor.shape().to_vec(),
            });
        }
        buffer.value = tensor;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::GraphBuilder;
    use ndarray::Array4;

    fn small_graph(seed: u64) -> Graph {
        let mut b = GraphBuilder::new(seed);
        let x = b.input();
        let c = b.conv2d(x, "c", 1, 2, (3, 3), 1, (1, 1), 1, true);
        let n = b.batch_norm(c, "n", 2, 1e-5, 0.1);
        let r = b.relu(n);
        let g = b.global_avg_pool(r);
        let d = b.dense(g, "d", 2, 2);
        b.finish(d)
    }

    #[test]
    fn weights_round_trip_restores_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.bin");
        let g1 = small_graph(42);
        save_weights(&g1, &path).unwrap();

        // Different seed: different outputs until weights are loaded.
        let mut g2 = small_graph(777);
        let x = Array4::from_shape_fn((1, 1, 5, 5), |(_, _, i, j)| (i * 5 + j) as f32 * 0.1);
        assert_ne!(g1.forward_eval(&x), g2.forward_eval(&x));
        load_weights(&mut g2, &path).unwrap();
        assert_eq!(g1.forward_eval(&x), g2.forward_eval(&x));
    }

    #[test]
    fn loading_into_wrong_architecture_fails() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.bin");
        save_weights(&small_graph(1), &path).unwrap();

        let mut b = GraphBuilder::new(1);
        let x = b.input();
        let d = b.dense(x, "other", 3, 1);
        let mut g = b.finish(d);
        assert!(matches!(
            load_weights(&mut g, &path),
            Err(WeightsError::MissingTensor(_))
        ));
    }
}
