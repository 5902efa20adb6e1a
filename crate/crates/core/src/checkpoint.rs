//! Checkpoint container: a line-oriented text header followed by the raw
//! little-endian `f32` payload of every array, in header order.
//!
//! ```text
//! setcomp-checkpoint 1
//! step 1200
//! rng <seed hex> <stream> <word position>
//! adam <lr> <beta1> <beta2> <eps> <t>
//! config {"kind":"model1",...}
//! array param f.conv0.w 8,1,3,3
//! array buffer f.bn0.running_mean 8
//! array adam_m f.conv0.w 8,1,3,3
//! end
//! <payload>
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::nn::{Adam, ParamStore, Tensor};

const MAGIC: &str = "setcomp-checkpoint 1";

/// Position of a seeded ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    /// Model and training configuration, as stored JSON.
    pub config: Value,
    pub params: ParamStore<f32>,
    pub optimizer: Option<Adam>,
    pub rng: Option<RngState>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.chars().any(char::is_whitespace) {
        return Err(Error::Checkpoint {
            field: format!("array `{name}`"),
            reason: "names must be nonempty and free of whitespace".into(),
        });
    }
    Ok(())
}

fn dims(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Serializes a checkpoint to bytes.
pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut header = String::new();
    let mut payload: Vec<&[f32]> = Vec::new();
    writeln!(header, "{MAGIC}").unwrap();
    writeln!(header, "step {}", ck.step).unwrap();
    if let Some(r) = &ck.rng {
        writeln!(header, "rng {} {} {}", hex(&r.seed), r.stream, r.word_pos).unwrap();
    }
    if let Some(a) = &ck.optimizer {
        writeln!(header, "adam {:?} {:?} {:?} {:?} {}", a.lr, a.beta1, a.beta2, a.eps, a.t).unwrap();
    }
    writeln!(header, "config {}", serde_json::to_string(&ck.config)?).unwrap();
    for (name, entry) in ck.params.iter() {
        check_name(name)?;
        let kind = if entry.trainable { "param" } else { "buffer" };
        writeln!(header, "array {kind} {name} {}", dims(&entry.tensor.shape)).unwrap();
        payload.push(&entry.tensor.data);
    }
    if let Some(a) = &ck.optimizer {
        for (kind, moments) in [("adam_m", &a.first), ("adam_v", &a.second)] {
            for (name, v) in moments {
                check_name(name)?;
                writeln!(header, "array {kind} {name} {}", v.len()).unwrap();
                payload.push(v);
            }
        }
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    for arr in payload {
        for v in arr {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn bad(field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        field: field.into(),
        reason: reason.into(),
    }
}

fn parse<T: std::str::FromStr>(field: &str, s: Option<&str>) -> Result<T> {
    s.and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(field, format!("missing or malformed value {s:?}")))
}

/// Parses checkpoint bytes, naming the offending field on failure.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("header", "truncated before `end`"))?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| bad("header", "not valid UTF-8"))
    };
    if next_line()? != MAGIC {
        return Err(bad("magic", "not a checkpoint file"));
    }
    let mut step = None;
    let mut config = None;
    let mut rng = None;
    let mut adam: Option<Adam> = None;
    let mut arrays: Vec<(String, String, Vec<usize>)> = Vec::new();
    loop {
        let line = next_line()?;
        if line == "end" {
            break;
        }
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        match key {
            "step" => step = Some(parse::<u64>("step", Some(rest))?),
            "config" => {
                config = Some(serde_json::from_str::<Value>(rest).map_err(|e| bad("config", e.to_string()))?)
            }
            "rng" => {
                let mut it = rest.split(' ');
                let seed = it.next().and_then(unhex).ok_or_else(|| bad("rng.seed", "expected 64 hex digits"))?;
                rng = Some(RngState {
                    seed,
                    stream: parse("rng.stream", it.next())?,
                    word_pos: parse("rng.word_pos", it.next())?,
                });
            }
            "adam" => {
                let mut it = rest.split(' ');
                let mut a = Adam::new(parse("adam.lr", it.next())?);
                a.beta1 = parse("adam.beta1", it.next())?;
                a.beta2 = parse("adam.beta2", it.next())?;
                a.eps = parse("adam.eps", it.next())?;
                a.t = parse("adam.t", it.next())?;
                adam = Some(a);
            }
            "array" => {
                let parts: Vec<&str> = rest.split(' ').collect();
                if parts.len() != 3 {
                    return Err(bad("array", format!("malformed entry `{rest}`")));
                }
                let field = format!("array `{}`", parts[1]);
                let shape = parts[2]
                    .split(',')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad(field.clone(), format!("bad shape `{}`", parts[2])))?;
                if !matches!(parts[0], "param" | "buffer" | "adam_m" | "adam_v") {
                    return Err(bad(field, format!("unknown kind `{}`", parts[0])));
                }
                arrays.push((parts[0].to_string(), parts[1].to_string(), shape));
            }
            other => return Err(bad(other, "unknown header field")),
        }
    }
    let step = step.ok_or_else(|| bad("step", "missing"))?;
    let config = config.ok_or_else(|| bad("config", "missing"))?;
    let mut offset = pos;
    let mut params = ParamStore::new();
    let mut first = BTreeMap::new();
    let mut second = BTreeMap::new();
    for (kind, name, shape) in arrays {
        let n: usize = shape.iter().product();
        let field = format!("array `{name}`");
        let end = offset + 4 * n;
        if end > bytes.len() {
            return Err(bad(field, format!("payload ends after {} of {} bytes", bytes.len() - offset, 4 * n)));
        }
        let data: Vec<f32> = bytes[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        offset = end;
        match kind.as_str() {
            "param" => params.insert_param(name, Tensor::new(shape, data)),
            "buffer" => params.insert_buffer(name, Tensor::new(shape, data)),
            "adam_m" => {
                first.insert(name, data);
            }
            _ => {
                second.insert(name, data);
            }
        }
    }
    if offset != bytes.len() {
        return Err(bad("payload", format!("{} trailing bytes", bytes.len() - offset)));
    }
    let optimizer = match adam {
        Some(mut a) => {
            a.first = first;
            a.second = second;
            Some(a)
        }
        None if first.is_empty() && second.is_empty() => None,
        None => return Err(bad("adam", "moment arrays without optimizer settings")),
    };
    Ok(Checkpoint {
        step,
        config,
        params,
        optimizer,
        rng,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}
