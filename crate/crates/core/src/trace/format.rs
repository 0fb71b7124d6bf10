//! ATTRC01 binary encoding. All integers are little-endian `u64`, all
//! weights little-endian IEEE-754 `f32`. See `docs/attrc01.md` for the
//! byte-level layout.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{check_row, TraceError, TraceFile, TraceHeader, TraceSource, TraceStep};

pub const MAGIC: [u8; 8] = *b"ATTRC01\0";

/// Row-sum tolerance applied when reading; absorbs float32 capture error.
pub const READ_SUM_TOLERANCE: f64 = 1e-3;

const MAX_TAG_LEN: u64 = 1 << 20;

fn truncated(what: impl Into<String>) -> impl FnOnce(io::Error) -> TraceError {
    let what = what.into();
    move |e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            TraceError::TruncatedTrace(what)
        } else {
            TraceError::Io(e)
        }
    }
}

pub fn write_trace_to<W: Write>(trace: &TraceFile, mut w: W) -> Result<(), TraceError> {
    trace.check_shape()?;
    trace.check_normalized(READ_SUM_TOLERANCE)?;
    let h = &trace.header;
    w.write_all(&MAGIC)?;
    for v in [h.prefill_len, h.n_steps, h.n_layers, h.n_heads] {
        w.write_u64::<LittleEndian>(v as u64)?;
    }
    w.write_u8(h.head_averaged as u8)?;
    w.write_u8(h.source.code())?;
    w.write_u64::<LittleEndian>(h.model_tag.len() as u64)?;
    w.write_all(h.model_tag.as_bytes())?;
    for step in &trace.steps {
        w.write_u64::<LittleEndian>(step.step as u64)?;
        for heads in &step.rows {
            for row in heads {
                for &x in row {
                    w.write_f32::<LittleEndian>(x)?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace(trace: &TraceFile, path: impl AsRef<Path>) -> Result<(), TraceError> {
    let file = File::create(path)?;
    write_trace_to(trace, BufWriter::new(file))
}

fn read_header<R: Read>(r: &mut R) -> Result<TraceHeader, TraceError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated("magic"))?;
    if magic != MAGIC {
        return Err(TraceError::BadMagic);
    }
    let mut field = |name: &str| -> Result<usize, TraceError> {
        let v = r.read_u64::<LittleEndian>().map_err(truncated(name))?;
        usize::try_from(v).map_err(|_| TraceError::BadHeader(format!("{name} too large")))
    };
    let prefill_len = field("prefill_len")?;
    let n_steps = field("n_steps")?;
    let n_layers = field("n_layers")?;
    let n_heads = field("n_heads")?;
    let head_averaged = match r.read_u8().map_err(truncated("head_averaged"))? {
        0 => false,
        1 => true,
        v => return Err(TraceError::BadHeader(format!("head_averaged flag {v}"))),
    };
    let code = r.read_u8().map_err(truncated("source"))?;
    let source = TraceSource::from_code(code)
        .ok_or_else(|| TraceError::BadHeader(format!("unknown source code {code}")))?;
    let tag_len = r
        .read_u64::<LittleEndian>()
        .map_err(truncated("model_tag length"))?;
    if tag_len > MAX_TAG_LEN {
        return Err(TraceError::BadHeader(format!("model_tag length {tag_len}")));
    }
    let mut tag = vec![0u8; tag_len as usize];
    r.read_exact(&mut tag).map_err(truncated("model_tag"))?;
    let model_tag = String::from_utf8(tag)
        .map_err(|_| TraceError::BadHeader("model_tag is not UTF-8".into()))?;
    let header = TraceHeader {
        prefill_len,
        n_steps,
        n_layers,
        n_heads,
        head_averaged,
        source,
        model_tag,
    };
    header.validate()?;
    Ok(header)
}

/// Decodes and validates a trace. Rows must sum to one within
/// [`READ_SUM_TOLERANCE`]; trailing bytes are rejected.
pub fn read_trace_from<R: Read>(mut r: R) -> Result<TraceFile, TraceError> {
    let header = read_header(&mut r)?;
    let mut steps = Vec::with_capacity(header.n_steps);
    for t in 1..=header.n_steps {
        let got = r
            .read_u64::<LittleEndian>()
            .map_err(truncated(format!("step {t} header")))?;
        if got != t as u64 {
            return Err(TraceError::BadHeader(format!(
                "step record {t} carries step number {got}"
            )));
        }
        let len = header.row_len(t);
        let mut rows = Vec::with_capacity(header.n_layers);
        for layer in 0..header.n_layers {
            let mut heads = Vec::with_capacity(header.n_heads);
            for head in 0..header.n_heads {
                let mut row = vec![0f32; len];
                r.read_f32_into::<LittleEndian>(&mut row)
                    .map_err(truncated(format!("step {t} layer {layer} head {head}")))?;
                check_row(&row, t, layer, head, READ_SUM_TOLERANCE)?;
                heads.push(row);
            }
            rows.push(heads);
        }
        steps.push(TraceStep { step: t, rows });
    }
    let trailing = io::copy(&mut r, &mut io::sink())?;
    if trailing > 0 {
        return Err(TraceError::TrailingBytes(trailing));
    }
    Ok(TraceFile { header, steps })
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<TraceFile, TraceError> {
    let file = File::open(path)?;
    read_trace_from(BufReader::new(file))
}
