//! Binary model checkpoints and memory snapshots.
//!
//! All integers are little-endian `u64` unless noted, all reals little-endian
//! IEEE-754 `f64`.
//!
//! Model file:
//!
//! | field        | type            |
//! |--------------|-----------------|
//! | magic        | `b"LGMODEL\0"`  |
//! | version      | `u32` (= 1)     |
//! | granularity  | `u32` (0 fused, 1 per-tensor) |
//! | seed         | `u64`           |
//! | layer count  | `u64` L         |
//! | layer sizes  | L × `u64`       |
//! | param count  | `u64` P         |
//! | params       | P × `f64`       |
//!
//! Memory snapshot: magic `b"LGMEMRY\0"`, version `u32`, memory count `u64`,
//! then per memory `task_id`, `capacity`, `dim`, item count `n`, `n` labels
//! and `n × dim` features (row-major).

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::linalg::FlatVector;
use crate::memory::{Coreset, EpisodicMemory};
use crate::model::{Batch, LayerGranularity, MlpModel};

const MODEL_MAGIC: &[u8; 8] = b"LGMODEL\0";
const MEMORY_MAGIC: &[u8; 8] = b"LGMEMRY\0";
const VERSION: u32 = 1;
// guards allocation sizes read from untrusted files
const MAX_COUNT: u64 = 1 << 32;

fn put_u64(out: &mut impl Write, v: u64) -> Result<()> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_usize(out: &mut impl Write, v: usize) -> Result<()> {
    put_u64(out, v as u64)
}

fn get_array<const N: usize>(input: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("file is truncated".into()),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

fn get_u64(input: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(get_array(input)?))
}

fn get_count(input: &mut impl Read, what: &str) -> Result<usize> {
    let n = get_u64(input)?;
    if n > MAX_COUNT {
        return Err(Error::Format(format!("{what} {n} is implausibly large")));
    }
    Ok(n as usize)
}

fn get_f64s(input: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    (0..n)
        .map(|_| Ok(f64::from_le_bytes(get_array(input)?)))
        .collect()
}

fn header(input: &mut impl Read, magic: &[u8; 8]) -> Result<()> {
    if &get_array::<8>(input)? != magic {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(get_array(input)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    Ok(())
}

fn expect_end(input: &mut impl Read) -> Result<()> {
    let mut probe = [0u8; 1];
    match input.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::Format("trailing bytes after payload".into())),
    }
}

pub fn write_model(out: &mut impl Write, model: &MlpModel) -> Result<()> {
    out.write_all(MODEL_MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let gran: u32 = match model.granularity() {
        LayerGranularity::Fused => 0,
        LayerGranularity::PerTensor => 1,
    };
    out.write_all(&gran.to_le_bytes())?;
    put_u64(out, model.seed())?;
    put_usize(out, model.layer_sizes().len())?;
    for &s in model.layer_sizes() {
        put_usize(out, s)?;
    }
    put_usize(out, model.params().len())?;
    for p in model.params().iter() {
        out.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_model(input: &mut impl Read) -> Result<MlpModel> {
    header(input, MODEL_MAGIC)?;
    let granularity = match u32::from_le_bytes(get_array(input)?) {
        0 => LayerGranularity::Fused,
        1 => LayerGranularity::PerTensor,
        g => return Err(Error::Format(format!("unknown layer granularity {g}"))),
    };
    let seed = get_u64(input)?;
    let layers = get_count(input, "layer count")?;
    let sizes = (0..layers)
        .map(|_| get_count(input, "layer size"))
        .collect::<Result<Vec<_>>>()?;
    let n = get_count(input, "parameter count")?;
    let params = get_f64s(input, n)?;
    expect_end(input)?;
    MlpModel::from_params(&sizes, FlatVector::new(params), seed, granularity)
}

pub fn save_model(path: &std::path::Path, model: &MlpModel) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_model(&mut out, model)?;
    out.flush()?;
    Ok(())
}

pub fn load_model(path: &std::path::Path) -> Result<MlpModel> {
    read_model(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn write_coreset(out: &mut impl Write, coreset: &Coreset) -> Result<()> {
    out.write_all(MEMORY_MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    put_usize(out, coreset.len())?;
    for m in coreset.memories() {
        put_usize(out, m.task_id)?;
        put_usize(out, m.capacity)?;
        put_usize(out, m.items.dim())?;
        put_usize(out, m.items.len())?;
        for &l in m.items.labels() {
            put_usize(out, l)?;
        }
        for x in m.items.inputs() {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_coreset(input: &mut impl Read) -> Result<Coreset> {
    header(input, MEMORY_MAGIC)?;
    let count = get_count(input, "memory count")?;
    let mut coreset = Coreset::new();
    for _ in 0..count {
        let task_id = get_count(input, "task id")?;
        let capacity = get_count(input, "capacity")?;
        let dim = get_count(input, "feature dimension")?;
        let n = get_count(input, "item count")?;
        if n.saturating_mul(dim) > MAX_COUNT as usize {
            return Err(Error::Format("memory payload is implausibly large".into()));
        }
        let labels = (0..n)
            .map(|_| get_count(input, "label"))
            .collect::<Result<Vec<_>>>()?;
        let inputs = get_f64s(input, n * dim)?;
        coreset.push(EpisodicMemory {
            task_id,
            capacity,
            items: Batch::new(inputs, dim, labels)?,
        })?;
    }
    expect_end(input)?;
    Ok(coreset)
}
