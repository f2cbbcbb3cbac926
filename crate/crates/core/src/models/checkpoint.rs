//! Binary checkpoints: layout headers followed by raw little-endian `f64`s.
//!
//! ```text
//! magic    8 bytes  "MTLCKPT\0"
//! version  u32      1
//! K        u32      number of task heads
//! rank     u32      adapter rank, 0 when no adapter is stored
//! layouts  backbone, then head 0..K, each:
//!            u32 entry count, then per entry:
//!            u32 id length, id bytes (UTF-8), u8 kind (0 weight, 1 bias),
//!            u64 rows, u64 cols
//! values   backbone values, then head values, as f64 LE in layout order
//! adapter  (rank > 0 only) f64 scaling, u32 pair count, then per pair:
//!            u32 backbone layer index, A (rank × cols), B (rows × rank)
//! ```
//!
//! All integers are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use super::{LoraAdapter, LoraPair, MultiTaskProgram, SharedBackboneModel};
use crate::diffcore::{LayerShape, Layout, ParamKind, ParamVector};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

const MAGIC: &[u8; 8] = b"MTLCKPT\0";
const VERSION: u32 = 1;

fn io_err(e: std::io::Error) -> Error {
    Error::Checkpoint(e.to_string())
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(io_err)
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(io_err)
}

fn put_f64s(w: &mut impl Write, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    Ok(())
}

fn get<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(io_err)?;
    Ok(buf)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(get(r)?))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(get(r)?))
}

fn get_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| Ok(f64::from_le_bytes(get(r)?))).collect()
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} does not fit in u32")))
}

fn write_layout(w: &mut impl Write, layout: &Layout) -> Result<()> {
    put_u32(w, to_u32(layout.entries().len(), "entry count")?)?;
    for e in layout.entries() {
        put_u32(w, to_u32(e.id.len(), "id length")?)?;
        w.write_all(e.id.as_bytes()).map_err(io_err)?;
        let kind = match e.kind {
            ParamKind::Weight => 0u8,
            ParamKind::Bias => 1u8,
        };
        w.write_all(&[kind]).map_err(io_err)?;
        put_u64(w, e.rows as u64)?;
        put_u64(w, e.cols as u64)?;
    }
    Ok(())
}

fn read_layout(r: &mut impl Read) -> Result<Layout> {
    let n = get_u32(r)? as usize;
    let mut entries = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let len = get_u32(r)? as usize;
        let mut id = vec![0u8; len];
        r.read_exact(&mut id).map_err(io_err)?;
        let id = String::from_utf8(id).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let kind = match get::<1>(r)?[0] {
            0 => ParamKind::Weight,
            1 => ParamKind::Bias,
            other => return Err(Error::Checkpoint(format!("unknown parameter kind {other}"))),
        };
        let rows = get_u64(r)? as usize;
        let cols = get_u64(r)? as usize;
        entries.push(LayerShape { id, rows, cols, kind });
    }
    Ok(Layout::new(entries))
}

pub fn write_checkpoint(
    w: &mut impl Write,
    model: &SharedBackboneModel,
    adapter: Option<&LoraAdapter>,
) -> Result<()> {
    if adapter.is_some_and(LoraAdapter::is_merged) {
        return Err(Error::Usage("cannot checkpoint an adapter that was already merged".into()));
    }
    w.write_all(MAGIC).map_err(io_err)?;
    put_u32(w, VERSION)?;
    put_u32(w, to_u32(model.heads.len(), "head count")?)?;
    put_u32(w, to_u32(adapter.map_or(0, |a| a.rank), "rank")?)?;
    write_layout(w, model.backbone.layout())?;
    for h in &model.heads {
        write_layout(w, h.layout())?;
    }
    put_f64s(w, model.backbone.values())?;
    for h in &model.heads {
        put_f64s(w, h.values())?;
    }
    if let Some(a) = adapter {
        put_f64s(w, &[a.scaling])?;
        put_u32(w, to_u32(a.pairs.len(), "pair count")?)?;
        for p in &a.pairs {
            put_u32(w, to_u32(p.layer, "layer index")?)?;
            put_f64s(w, p.a.data())?;
            put_f64s(w, p.b.data())?;
        }
    }
    Ok(())
}

/// Reads a checkpoint and checks its layouts against `program`.
pub fn read_checkpoint(
    r: &mut impl Read,
    program: Arc<dyn MultiTaskProgram>,
) -> Result<(SharedBackboneModel, Option<LoraAdapter>)> {
    if &get::<8>(r)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let k = get_u32(r)? as usize;
    let rank = get_u32(r)? as usize;
    if k != program.num_tasks() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {k} heads, program expects {}",
            program.num_tasks()
        )));
    }
    let backbone_layout = read_layout(r)?;
    if backbone_layout != program.backbone_layout() {
        return Err(Error::Checkpoint("backbone layout differs from program".into()));
    }
    let mut head_layouts = Vec::with_capacity(k);
    for i in 0..k {
        let l = read_layout(r)?;
        if l != program.head_layout(i) {
            return Err(Error::Checkpoint(format!("head {i} layout differs from program")));
        }
        head_layouts.push(l);
    }
    let n = backbone_layout.len();
    let backbone = ParamVector::new(backbone_layout.clone(), get_f64s(r, n)?)?;
    let heads = head_layouts
        .into_iter()
        .map(|l| {
            let n = l.len();
            ParamVector::new(l, get_f64s(r, n)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let adapter = if rank > 0 {
        let scaling = get_f64s(r, 1)?[0];
        let pairs_n = get_u32(r)? as usize;
        let mut pairs = Vec::with_capacity(pairs_n.min(1024));
        for _ in 0..pairs_n {
            let layer = get_u32(r)? as usize;
            let e = backbone_layout
                .entries()
                .get(layer)
                .ok_or_else(|| Error::Checkpoint(format!("adapter layer index {layer} out of range")))?;
            let a = Matrix::new(rank, e.cols, get_f64s(r, rank * e.cols)?)?;
            let b = Matrix::new(e.rows, rank, get_f64s(r, e.rows * rank)?)?;
            pairs.push(LoraPair { layer, a, b });
        }
        Some(LoraAdapter::from_parts(rank, scaling, pairs, backbone_layout))
    } else {
        None
    };
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(io_err)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
    }
    Ok((SharedBackboneModel::new(program, backbone, heads)?, adapter))
}

pub fn save_checkpoint(
    path: &Path,
    model: &SharedBackboneModel,
    adapter: Option<&LoraAdapter>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, model, adapter)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(
    path: &Path,
    program: Arc<dyn MultiTaskProgram>,
) -> Result<(SharedBackboneModel, Option<LoraAdapter>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(file), program)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Activation, DenseStack, LossKind};
    use crate::models::{attach_lora, MlpMultiTask};
    use crate::rng::seeded;

    #[test]
    fn round_trip_is_bit_exact() {
        let program: Arc<dyn MultiTaskProgram> = Arc::new(
            MlpMultiTask::new(
                DenseStack::from_widths("bb", &[3, 5, 4], Activation::Relu, Activation::Relu),
                (0..3)
                    .map(|i| DenseStack::from_widths(&format!("h{i}."), &[4, 2], Activation::Identity, Activation::Identity))
                    .collect(),
                LossKind::Mse,
            )
            .unwrap(),
        );
        let model = SharedBackboneModel::init(program.clone(), &mut seeded(1)).unwrap();
        let mut adapter = attach_lora(&model, 2, 3).unwrap();
        adapter.pairs[1].b.set(0, 1, -0.125);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &model, Some(&adapter)).unwrap();
        let (back, back_adapter) = load_checkpoint(&path, program.clone()).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.backbone.values()), bits(model.backbone.values()));
        for (a, b) in back.heads.iter().zip(&model.heads) {
            assert_eq!(bits(a.values()), bits(b.values()));
        }
        assert_eq!(back_adapter.unwrap(), adapter);

        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &model, None).unwrap();
        let (_, none) = read_checkpoint(&mut buf.as_slice(), program.clone()).unwrap();
        assert!(none.is_none());
        buf[0] = b'X';
        assert!(read_checkpoint(&mut buf.as_slice(), program).is_err());
    }
}
