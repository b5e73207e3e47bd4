//! Versioned checkpoint files.
//!
//! Layout: the header line, one JSON line describing the model, then for each
//! tensor a line `array <name> <tag> <d1>x<d2>... <count>` followed by
//! `count` little-endian `f64` values and a newline, and finally `end`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec, ParamStore, ParamTag};
use crate::error::{Error, Result};
use crate::mode::BlockMode;

pub const CHECKPOINT_HEADER: &str = "pact-checkpoint v1";

/// A trained model plus the block mode it was trained in.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub trained_mode: BlockMode,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    model: ModelSpec,
    trained_mode: BlockMode,
}

pub fn write_checkpoint<W: Write>(mut out: W, checkpoint: &Checkpoint) -> Result<()> {
    writeln!(out, "{CHECKPOINT_HEADER}")?;
    let meta = Meta {
        model: *checkpoint.model.spec(),
        trained_mode: checkpoint.trained_mode,
    };
    writeln!(out, "{}", serde_json::to_string(&meta)?)?;
    for p in checkpoint.model.params().iter() {
        let dims: Vec<String> = p.shape.iter().map(|d| d.to_string()).collect();
        writeln!(out, "array {} {} {} {}", p.name, p.tag.as_str(), dims.join("x"), p.values.len())?;
        for v in &p.values {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(b"\n")?;
    }
    writeln!(out, "end")?;
    out.flush()?;
    Ok(())
}

fn read_line<R: BufRead>(input: &mut R) -> Result<String> {
    let mut line = String::new();
    if input.read_line(&mut line)? == 0 {
        return Err(Error::Checkpoint("unexpected end of file".into()));
    }
    Ok(line.trim_end_matches('\n').to_string())
}

fn parse_usize(s: &str, what: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::Checkpoint(format!("bad {what} `{s}`")))
}

pub fn read_checkpoint<R: BufRead>(mut input: R) -> Result<Checkpoint> {
    let header = read_line(&mut input)?;
    if header != CHECKPOINT_HEADER {
        return Err(Error::Checkpoint(format!("unsupported header `{header}`")));
    }
    let meta: Meta = serde_json::from_str(&read_line(&mut input)?)?;
    let mut store = ParamStore::new();
    loop {
        let line = read_line(&mut input)?;
        if line == "end" {
            break;
        }
        let fields: Vec<&str> = line.split(' ').collect();
        let ["array", name, tag, dims, count] = fields[..] else {
            return Err(Error::Checkpoint(format!("malformed array line `{line}`")));
        };
        let shape = dims
            .split('x')
            .map(|d| parse_usize(d, "extent"))
            .collect::<Result<Vec<_>>>()?;
        let count = parse_usize(count, "count")?;
        if shape.iter().product::<usize>() != count {
            return Err(Error::Checkpoint(format!("array `{name}`: {count} values for shape {shape:?}")));
        }
        let mut bytes = vec![0u8; count * 8 + 1];
        input.read_exact(&mut bytes)?;
        if bytes[count * 8] != b'\n' {
            return Err(Error::Checkpoint(format!("array `{name}` is not newline-terminated")));
        }
        let values = bytes[..count * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        store.push(name, ParamTag::parse(tag)?, &shape, values);
    }
    Ok(Checkpoint {
        model: Model::with_params(meta.model, &store)?,
        trained_mode: meta.trained_mode,
    })
}
