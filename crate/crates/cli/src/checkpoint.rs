//! Plain-text encoder checkpoints.
//!
//! ```text
//! ASCCKPT v1
//! dims 32 64 64
//! <w1 values>
//! <b1 values>
//! ...
//! ```

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use asc_core::encoder::Block;
use asc_core::{Encoder, Tensor};

use crate::error::{CliError, CliResult};

const MAGIC: &str = "ASCCKPT v1";

pub fn write_encoder<W: Write>(encoder: &Encoder, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{MAGIC}")?;
    let dims: Vec<String> = encoder.dims().iter().map(usize::to_string).collect();
    writeln!(w, "dims {}", dims.join(" "))?;
    for p in encoder.params() {
        let line: Vec<String> = p.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn read_encoder<R: BufRead>(r: R) -> CliResult<Encoder> {
    let mut lines = r.lines();
    let mut next = |what: &str| -> CliResult<String> {
        lines
            .next()
            .ok_or_else(|| CliError::Format(format!("checkpoint truncated before {what}")))?
            .map_err(|e| CliError::Format(e.to_string()))
    };
    let magic = next("header")?;
    if magic.trim_end() != MAGIC {
        return Err(CliError::Format(format!("not a checkpoint: {magic:?}")));
    }
    let dims_line = next("dims")?;
    let dims: Vec<usize> = dims_line
        .strip_prefix("dims ")
        .ok_or_else(|| CliError::Format(format!("bad dims line {dims_line:?}")))?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| CliError::Format(format!("bad dim {t:?}"))))
        .collect::<CliResult<_>>()?;
    if dims.len() < 2 {
        return Err(CliError::Format("checkpoint needs at least two dims".into()));
    }
    let mut blocks = Vec::with_capacity(dims.len() - 1);
    for pair in dims.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let weight = parse_values(&next("weights")?, fan_out * fan_in)?;
        let bias = parse_values(&next("bias")?, fan_out)?;
        blocks.push(Block {
            weight: Tensor::matrix(fan_out, fan_in, weight)?,
            bias: Tensor::vector(bias)?,
        });
    }
    if let Some(extra) = lines.next() {
        let extra = extra.map_err(|e| CliError::Format(e.to_string()))?;
        if !extra.trim().is_empty() {
            return Err(CliError::Format("trailing data after checkpoint".into()));
        }
    }
    Ok(Encoder::from_blocks(blocks)?)
}

fn parse_values(line: &str, expected: usize) -> CliResult<Vec<f64>> {
    let values: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| CliError::Format(format!("bad value {t:?}"))))
        .collect::<CliResult<_>>()?;
    if values.len() != expected {
        return Err(CliError::Format(format!(
            "expected {expected} values, found {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Numeric("non-finite parameter in checkpoint".into()));
    }
    Ok(values)
}

pub fn save(encoder: &Encoder, path: &Path) -> CliResult<()> {
    let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_encoder(encoder, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> CliResult<Encoder> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    read_encoder(BufReader::new(file))
}
