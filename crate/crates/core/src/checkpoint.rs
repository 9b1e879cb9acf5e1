//! Model checkpoints as JSON.
//!
//! Floats are written with 17 significant digits in scientific notation,
//! so write -> read -> write is byte-identical.

use std::io::{self, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::ser::{CompactFormatter, Formatter};

use crate::error::Result;
use crate::nn::Model;

/// Compact JSON with fixed-width float output.
#[derive(Debug, Default, Clone, Copy)]
pub struct CanonicalFloats;

impl Formatter for CanonicalFloats {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            write!(writer, "{value:.16e}")
        } else {
            CompactFormatter.write_f64(writer, value)
        }
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, f64::from(value))
    }
}

/// Serialize any value with canonical float formatting.
pub fn to_canonical_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, CanonicalFloats);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json writes utf-8"))
}

pub fn to_string(model: &Model) -> Result<String> {
    to_canonical_json(model)
}

pub fn from_str(s: &str) -> Result<Model> {
    Ok(serde_json::from_str(s)?)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let mut s = to_string(model)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    from_str(&std::fs::read_to_string(path)?)
}
