//! Checkpoint persistence.
//!
//! A checkpoint is a plain text file of named parameter arrays with shapes.
//! Values are stored as hexadecimal IEEE-754 bit patterns, so a round trip
//! through disk is bit-exact.

use crate::error::{Error, Result};
use crate::model::{Dims, Model, ModelVariant};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

const MAGIC: &str = "disent-checkpoint";
const VERSION: u32 = 1;

pub fn save<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    write_to(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_to<T: Scalar, W: Write>(model: &Model<T>, w: &mut W) -> Result<()> {
    let d = model.dims();
    writeln!(w, "{MAGIC} {VERSION}")?;
    writeln!(w, "variant {}", model.variant().as_str())?;
    writeln!(w, "obs {} {}", d.obs_h, d.obs_w)?;
    writeln!(w, "latent {}", d.latent)?;
    writeln!(w, "hidden {}", d.hidden)?;
    writeln!(w, "conv_channels {}", d.conv_channels)?;
    writeln!(w, "actions {}", d.n_actions)?;
    writeln!(w, "params {}", model.params().len())?;
    for p in model.params() {
        write!(w, "param {} {}", p.name, p.value.shape().len())?;
        for extent in p.value.shape() {
            write!(w, " {extent}")?;
        }
        writeln!(w)?;
        let mut first = true;
        for v in p.value.data() {
            if !first {
                write!(w, " ")?;
            }
            write!(w, "{:016x}", v.as_f64().to_bits())?;
            first = false;
        }
        writeln!(w)?;
    }
    writeln!(w, "end")?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let f = File::open(path)?;
    read_from(&mut BufReader::new(f))
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn next_line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return Err(bad("unexpected end of file"));
    }
    Ok(line.trim_end().to_string())
}

fn parse_kv(line: &str, key: &str) -> Result<Vec<String>> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(key) {
        return Err(bad(format!("expected `{key}` line, got `{line}`")));
    }
    Ok(parts.map(|s| s.to_string()).collect())
}

fn parse_usize(s: &str, what: &str) -> Result<usize> {
    s.parse().map_err(|_| bad(format!("bad {what} `{s}`")))
}

pub fn read_from<T: Scalar, R: BufRead>(r: &mut R) -> Result<Model<T>> {
    let header = next_line(r)?;
    let fields = parse_kv(&header, MAGIC)?;
    if fields.first().map(|s| s.as_str()) != Some("1") {
        return Err(bad(format!("unsupported version in `{header}`")));
    }
    let variant = ModelVariant::parse(&parse_kv(&next_line(r)?, "variant")?[0])
        .map_err(|e| bad(e.to_string()))?;
    let obs = parse_kv(&next_line(r)?, "obs")?;
    let dims = Dims {
        obs_h: parse_usize(&obs[0], "obs height")?,
        obs_w: parse_usize(&obs[1], "obs width")?,
        latent: parse_usize(&parse_kv(&next_line(r)?, "latent")?[0], "latent")?,
        hidden: parse_usize(&parse_kv(&next_line(r)?, "hidden")?[0], "hidden")?,
        conv_channels: parse_usize(
            &parse_kv(&next_line(r)?, "conv_channels")?[0],
            "conv_channels",
        )?,
        n_actions: parse_usize(&parse_kv(&next_line(r)?, "actions")?[0], "actions")?,
    };
    let n_params = parse_usize(&parse_kv(&next_line(r)?, "params")?[0], "params")?;

    // build the skeleton, then overwrite every tensor
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let mut model: Model<T> = Model::from_dims(variant, dims, &mut rng);
    if model.params().len() != n_params {
        return Err(bad(format!(
            "{} declares {n_params} params, architecture has {}",
            variant.as_str(),
            model.params().len()
        )));
    }
    for i in 0..n_params {
        let header = next_line(r)?;
        let fields = parse_kv(&header, "param")?;
        if fields.len() < 2 {
            return Err(bad(format!("malformed param line `{header}`")));
        }
        let name = &fields[0];
        let ndim = parse_usize(&fields[1], "rank")?;
        if fields.len() != 2 + ndim {
            return Err(bad(format!("param `{name}` shape is truncated")));
        }
        let shape: Vec<usize> = fields[2..]
            .iter()
            .map(|s| parse_usize(s, "extent"))
            .collect::<Result<_>>()?;
        let expect = &model.params()[i];
        if &expect.name != name || expect.value.shape() != shape.as_slice() {
            return Err(bad(format!(
                "param {i} is `{name}` {shape:?}, architecture expects `{}` {:?}",
                expect.name,
                expect.value.shape()
            )));
        }
        let data_line = next_line(r)?;
        let words: Vec<&str> = data_line.split_whitespace().collect();
        let numel: usize = shape.iter().product();
        if words.len() != numel {
            return Err(bad(format!(
                "param `{name}` holds {} values, expected {numel}",
                words.len()
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for word in words {
            let bits = u64::from_str_radix(word, 16)
                .map_err(|_| bad(format!("bad value `{word}` in `{name}`")))?;
            data.push(T::from_f64(f64::from_bits(bits)));
        }
        model.params_mut()[i].value = Tensor::new(shape, data)?;
    }
    let tail = next_line(r)?;
    if tail != "end" {
        return Err(bad(format!("expected `end`, got `{tail}`")));
    }
    Ok(model)
}

/// Check a loaded checkpoint against the environment/model configuration a
/// caller intends to evaluate it with.
pub fn check_compatible<T: Scalar>(
    model: &Model<T>,
    variant: ModelVariant,
    obs_h: usize,
    obs_w: usize,
    n_actions: usize,
) -> Result<()> {
    let d = model.dims();
    if model.variant() != variant {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint is a {} model, config wants {}",
            model.variant().as_str(),
            variant.as_str()
        )));
    }
    if (d.obs_h, d.obs_w) != (obs_h, obs_w) {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint observations are {}x{}, config wants {obs_h}x{obs_w}",
            d.obs_h, d.obs_w
        )));
    }
    if d.n_actions != n_actions {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint has {} actions, config wants {n_actions}",
            d.n_actions
        )));
    }
    Ok(())
}
