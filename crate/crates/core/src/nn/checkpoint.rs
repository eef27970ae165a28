//! Text checkpoint format for [`Mlp`].
//!
//! ```text
//! fpimpute-mlp 1
//! sizes 4 128 64 100
//! activations tanh tanh identity
//! w0 <out*in hex words, row-major>
//! b0 <out hex words>
//! ...
//! end
//! ```
//!
//! Every float is written as the 16-digit hex of its IEEE-754 bit pattern,
//! so a read after a write reproduces the network bit for bit.

use nalgebra::{DMatrix, DVector};

use crate::error::{ImputeError, Result};

use super::mlp::{Activation, Layer, Mlp};

const MAGIC: &str = "fpimpute-mlp";
const VERSION: u32 = 1;

pub fn write_checkpoint(net: &Mlp) -> String {
    let mut out = format!("{MAGIC} {VERSION}\n");
    let sizes: Vec<String> = net.layer_sizes().iter().map(usize::to_string).collect();
    out.push_str(&format!("sizes {}\n", sizes.join(" ")));
    let acts: Vec<&str> = net.layers().iter().map(|l| l.activation.name()).collect();
    out.push_str(&format!("activations {}\n", acts.join(" ")));
    for (i, layer) in net.layers().iter().enumerate() {
        let w = &layer.weights;
        let words: Vec<String> = (0..w.nrows())
            .flat_map(|r| (0..w.ncols()).map(move |c| (r, c)))
            .map(|rc| hex(w[rc]))
            .collect();
        out.push_str(&format!("w{i} {}\n", words.join(" ")));
        let words: Vec<String> = layer.biases.iter().map(|&b| hex(b)).collect();
        out.push_str(&format!("b{i} {}\n", words.join(" ")));
    }
    out.push_str("end\n");
    out
}

pub fn read_checkpoint(text: &str) -> Result<Mlp> {
    let mut lines = text.lines();
    read_checkpoint_lines(&mut lines)
}

/// Reads one checkpoint from `lines`, consuming through its `end` line.
pub fn read_checkpoint_lines<'a, I: Iterator<Item = &'a str>>(lines: &mut I) -> Result<Mlp> {
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| ImputeError::Checkpoint(format!("truncated checkpoint, expected {what}")))
    };

    let header = next("header")?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(ImputeError::Checkpoint(format!("bad header '{header}'")));
    }
    let version: u32 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| ImputeError::Checkpoint("missing format version".into()))?;
    if version != VERSION {
        return Err(ImputeError::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }

    let sizes: Vec<usize> = fields(next("sizes")?, "sizes")?
        .iter()
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| ImputeError::Checkpoint(format!("bad layer size: {e}")))?;
    if sizes.len() < 2 {
        return Err(ImputeError::Checkpoint("need at least two layer sizes".into()));
    }
    let acts: Vec<Activation> = fields(next("activations")?, "activations")?
        .iter()
        .map(|s| {
            Activation::from_name(s)
                .ok_or_else(|| ImputeError::Checkpoint(format!("unknown activation '{s}'")))
        })
        .collect::<Result<_>>()?;
    if acts.len() != sizes.len() - 1 {
        return Err(ImputeError::Checkpoint(format!(
            "{} activations for {} layers",
            acts.len(),
            sizes.len() - 1
        )));
    }

    let mut layers = Vec::with_capacity(acts.len());
    for (i, (dims, act)) in sizes.windows(2).zip(acts).enumerate() {
        let (fan_in, fan_out) = (dims[0], dims[1]);
        let w = floats(fields(next("weights")?, &format!("w{i}"))?, fan_out * fan_in)?;
        let b = floats(fields(next("biases")?, &format!("b{i}"))?, fan_out)?;
        layers.push(Layer {
            weights: DMatrix::from_row_slice(fan_out, fan_in, &w),
            biases: DVector::from_vec(b),
            activation: act,
        });
    }
    if next("end")?.trim() != "end" {
        return Err(ImputeError::Checkpoint("missing end marker".into()));
    }
    Mlp::from_layers(layers)
}

fn hex(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn fields<'a>(line: &'a str, key: &str) -> Result<Vec<&'a str>> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(key) {
        return Err(ImputeError::Checkpoint(format!(
            "expected '{key}' record, got '{}'",
            line.chars().take(32).collect::<String>()
        )));
    }
    Ok(parts.collect())
}

fn floats(words: Vec<&str>, expected: usize) -> Result<Vec<f64>> {
    if words.len() != expected {
        return Err(ImputeError::Checkpoint(format!(
            "expected {expected} values, found {}",
            words.len()
        )));
    }
    words
        .iter()
        .map(|w| {
            u64::from_str_radix(w, 16)
                .map(f64::from_bits)
                .map_err(|e| ImputeError::Checkpoint(format!("bad float word '{w}': {e}")))
        })
        .collect()
}
