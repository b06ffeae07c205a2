//! Model checkpoints.
//!
//! Layout: a UTF-8 text header of `\n`-terminated lines, then the raw payload.
//!
//! ```text
//! flatgrad-checkpoint 1
//! arch C
//! seed 7
//! precision 64
//! input 784                      (dims joined by 'x', e.g. 1x28x28)
//! layers dense(512);relu;...
//! param dense1.weight 784x512
//! param dense1.bias 512
//! ...
//! end
//! ```
//!
//! The payload follows the `end` line directly: every tensor in header order,
//! row-major, each value an IEEE-754 binary64 in little-endian byte order.
//! Nothing may follow the payload.

use crate::error::{Error, IoContext, Result};
use crate::nn::{parse_layers, ArchId, Model, Param};
use crate::tensor::Tensor;
use std::path::Path;

const MAGIC: &str = "flatgrad-checkpoint 1";

fn dims(shape: &[usize]) -> String {
    shape
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join("x")
}

fn parse_dims(s: &str) -> Option<Vec<usize>> {
    s.split('x').map(|d| d.parse().ok()).collect()
}

pub fn encode(model: &Model) -> Vec<u8> {
    let mut header = format!(
        "{MAGIC}\narch {}\nseed {}\nprecision 64\ninput {}\nlayers {}\n",
        model.arch(),
        model.seed(),
        dims(model.input_shape()),
        model.describe_layers()
    );
    for p in model.params() {
        header.push_str(&format!("param {} {}\n", p.name, dims(p.value.shape())));
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    for p in model.params() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Model, String> {
    let mut pos = 0;
    let mut next_line = || -> std::result::Result<&str, String> {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or("truncated header")?;
        let line =
            std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| "header is not UTF-8")?;
        pos += end + 1;
        Ok(line)
    };
    if next_line()? != MAGIC {
        return Err("not a flatgrad checkpoint".into());
    }
    let mut field = |key: &str| -> std::result::Result<String, String> {
        let line = next_line()?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| format!("expected '{key}', found '{line}'"))
    };
    let arch: ArchId = field("arch")?
        .parse()
        .map_err(|e: crate::Error| e.to_string())?;
    let seed: u64 = field("seed")?.parse().map_err(|_| "bad seed")?;
    if field("precision")? != "64" {
        return Err("only 64-bit checkpoints are supported".into());
    }
    let input = parse_dims(&field("input")?).ok_or("bad input shape")?;
    let layers = parse_layers(&field("layers")?).map_err(|e| e.to_string())?;
    let mut specs = Vec::new();
    loop {
        let line = next_line()?;
        if line == "end" {
            break;
        }
        let rest = line
            .strip_prefix("param ")
            .ok_or_else(|| format!("unexpected header line '{line}'"))?;
        let (name, shape) = rest.rsplit_once(' ').ok_or("bad param line")?;
        specs.push((
            name.to_string(),
            parse_dims(shape).ok_or("bad param shape")?,
        ));
    }
    let mut payload = &bytes[pos..];
    let mut params = Vec::with_capacity(specs.len());
    for (name, shape) in specs {
        let n: usize = shape.iter().product();
        if payload.len() < 8 * n {
            return Err(format!("payload truncated in {name}"));
        }
        let data = payload[..8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        payload = &payload[8 * n..];
        params.push(Param {
            name,
            value: Tensor::new(shape, data).map_err(|e| e.to_string())?,
        });
    }
    if !payload.is_empty() {
        return Err(format!("{} trailing bytes", payload.len()));
    }
    Model::from_parts(arch, seed, &input, &layers, params).map_err(|e| e.to_string())
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)).context(|| format!("writing {}", path.display()))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).context(|| format!("reading {}", path.display()))?;
    decode(&bytes).map_err(|reason| Error::Format {
        path: path.to_path_buf(),
        reason,
    })
}
