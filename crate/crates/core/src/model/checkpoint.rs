//! Versioned binary checkpoint: layer specs, weights, biases, momentum
//! velocities, and optionally the sub-model masks of a training run.
//! Round trips are bit-exact.

use super::{LayerSpec, NetworkModel, WeightStore};
use crate::neuron::NeuronKind;
use crate::numeric::ActivationKind;
use crate::partition::SubModelMask;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: [u8; 4] = *b"DNCK";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

fn activation_code(kind: ActivationKind) -> u8 {
    match kind {
        ActivationKind::ReLU => 0,
        ActivationKind::Tanh => 1,
        ActivationKind::Sigmoid => 2,
        ActivationKind::Identity => 3,
        ActivationKind::SoftmaxOutput => 4,
    }
}

fn activation_from_code(code: u8) -> Result<ActivationKind, CheckpointError> {
    Ok(match code {
        0 => ActivationKind::ReLU,
        1 => ActivationKind::Tanh,
        2 => ActivationKind::Sigmoid,
        3 => ActivationKind::Identity,
        4 => ActivationKind::SoftmaxOutput,
        other => return Err(CheckpointError::Corrupt(format!("activation code {other}"))),
    })
}

/// Writes a model and any per-worker masks to a writer.
pub fn write_checkpoint<W: Write>(
    mut w: W,
    model: &NetworkModel,
    masks: &[(u32, SubModelMask)],
) -> Result<(), CheckpointError> {
    w.write_all(&MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u64::<LittleEndian>(model.seed())?;
    w.write_u8(u8::from(model.bias_enabled()))?;
    w.write_u32::<LittleEndian>(model.layers().len() as u32)?;
    for layer in model.layers() {
        w.write_u32::<LittleEndian>(layer.units as u32)?;
        w.write_u8(activation_code(layer.activation))?;
        match layer.neuron_kind {
            NeuronKind::Standard => w.write_u8(0)?,
            NeuronKind::Dropout { retention } => {
                w.write_u8(1)?;
                w.write_f64::<LittleEndian>(retention)?;
            }
        }
        w.write_u8(u8::from(layer.normalize))?;
    }
    let store = model.store();
    for pair in 0..store.weights.len() {
        write_matrix(&mut w, &store.weights[pair])?;
        write_vector(&mut w, &store.biases[pair])?;
        write_matrix(&mut w, &store.weight_velocity[pair])?;
        write_vector(&mut w, &store.bias_velocity[pair])?;
    }
    w.write_u32::<LittleEndian>(masks.len() as u32)?;
    for (worker_id, mask) in masks {
        w.write_u32::<LittleEndian>(*worker_id)?;
        for retain in &mask.retain {
            write_bitmatrix(&mut w, retain)?;
        }
    }
    Ok(())
}

/// Reads a model and its stored masks back.
pub fn read_checkpoint<R: Read>(
    mut r: R,
) -> Result<(NetworkModel, Vec<(u32, SubModelMask)>), CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let seed = r.read_u64::<LittleEndian>()?;
    let bias_enabled = r.read_u8()? != 0;
    let n_layers = r.read_u32::<LittleEndian>()? as usize;
    if n_layers == 0 {
        return Err(CheckpointError::Corrupt("zero layers".into()));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let units = r.read_u32::<LittleEndian>()? as usize;
        if units == 0 {
            return Err(CheckpointError::Corrupt("zero-unit layer".into()));
        }
        let activation = activation_from_code(r.read_u8()?)?;
        let neuron_kind = match r.read_u8()? {
            0 => NeuronKind::Standard,
            1 => NeuronKind::Dropout {
                retention: r.read_f64::<LittleEndian>()?,
            },
            other => {
                return Err(CheckpointError::Corrupt(format!("neuron kind {other}")))
            }
        };
        let normalize = r.read_u8()? != 0;
        layers.push(LayerSpec {
            units,
            activation,
            neuron_kind,
            normalize,
        });
    }

    let mut store = WeightStore {
        weights: Vec::new(),
        biases: Vec::new(),
        weight_velocity: Vec::new(),
        bias_velocity: Vec::new(),
    };
    for pair in layers.windows(2) {
        let (n_out, n_in) = (pair[1].units, pair[0].units);
        store.weights.push(read_matrix(&mut r, n_out, n_in)?);
        store.biases.push(read_vector(&mut r, n_out)?);
        store.weight_velocity.push(read_matrix(&mut r, n_out, n_in)?);
        store.bias_velocity.push(read_vector(&mut r, n_out)?);
    }

    let n_masks = r.read_u32::<LittleEndian>()? as usize;
    let mut masks = Vec::with_capacity(n_masks);
    for _ in 0..n_masks {
        let worker_id = r.read_u32::<LittleEndian>()?;
        let mut retain = Vec::new();
        for pair in layers.windows(2) {
            retain.push(read_bitmatrix(&mut r, pair[1].units, pair[0].units)?);
        }
        masks.push((worker_id, SubModelMask { retain }));
    }

    Ok((
        NetworkModel::from_parts(layers, store, bias_enabled, seed),
        masks,
    ))
}

pub fn save_to_path<P: AsRef<Path>>(
    path: P,
    model: &NetworkModel,
    masks: &[(u32, SubModelMask)],
) -> Result<(), CheckpointError> {
    let file = File::create(path)?;
    write_checkpoint(BufWriter::new(file), model, masks)
}

pub fn load_from_path<P: AsRef<Path>>(
    path: P,
) -> Result<(NetworkModel, Vec<(u32, SubModelMask)>), CheckpointError> {
    let file = File::open(path)?;
    read_checkpoint(BufReader::new(file))
}

fn write_matrix<W: Write>(w: &mut W, m: &Array2<f64>) -> io::Result<()> {
    for &v in m.iter() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_matrix<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Array2<f64>, CheckpointError> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(r.read_f64::<LittleEndian>()?);
    }
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))
}

fn write_vector<W: Write>(w: &mut W, v: &Array1<f64>) -> io::Result<()> {
    for &x in v.iter() {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_vector<R: Read>(r: &mut R, len: usize) -> Result<Array1<f64>, CheckpointError> {
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(r.read_f64::<LittleEndian>()?);
    }
    Ok(Array1::from_vec(data))
}

fn write_bitmatrix<W: Write>(w: &mut W, m: &Array2<bool>) -> io::Result<()> {
    let mut byte = 0u8;
    let mut filled = 0;
    for &b in m.iter() {
        byte |= u8::from(b) << filled;
        filled += 1;
        if filled == 8 {
            w.write_u8(byte)?;
            byte = 0;
            filled = 0;
        }
    }
    if filled > 0 {
        w.write_u8(byte)?;
    }
    Ok(())
}

fn read_bitmatrix<R: Read>(
    r: &mut R,
    rows: usize,
    cols: usize,
) -> Result<Array2<bool>, CheckpointError> {
    let total = rows * cols;
    let n_bytes = total.div_ceil(8);
    let mut bytes = vec![0u8; n_bytes];
    r.read_exact(&mut bytes)?;
    let mut data = Vec::with_capacity(total);
    for i in 0..total {
        data.push(bytes[i / 8] >> (i % 8) & 1 == 1);
    }
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))
}
