//! File formats: a little-endian binary array container and a plain-text
//! `key=value` manifest.
//!
//! Container layout: magic `HSB1`, version `u32`, entry count `u32`, then per
//! entry a `u16` name length and name bytes, a dtype byte (1 = f64,
//! 2 = interleaved complex f64), a rank byte, the dims as `u64`s and the
//! row-major payload.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HSB1";
pub const VERSION: u32 = 1;

const DTYPE_F64: u8 = 1;
const DTYPE_C64: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    Real(ArrayD<f64>),
    Complex(ArrayD<C64>),
}

impl ArrayData {
    pub fn shape(&self) -> &[usize] {
        match self {
            ArrayData::Real(a) => a.shape(),
            ArrayData::Complex(a) => a.shape(),
        }
    }

    /// Bitwise equality, so that NaN payloads compare equal to themselves.
    pub fn bit_eq(&self, other: &Self) -> bool {
        match (self, other) {
            (ArrayData::Real(a), ArrayData::Real(b)) => {
                a.shape() == b.shape() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (ArrayData::Complex(a), ArrayData::Complex(b)) => {
                a.shape() == b.shape()
                    && a.iter().zip(b.iter()).all(|(x, y)| x.re.to_bits() == y.re.to_bits() && x.im.to_bits() == y.im.to_bits())
            }
            _ => false,
        }
    }
}

/// Ordered list of named arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArrayContainer {
    entries: Vec<(String, ArrayData)>,
}

impl ArrayContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, ArrayData)] {
        &self.entries
    }

    /// Insert or replace an entry, keeping first-insertion order.
    pub fn insert(&mut self, name: impl Into<String>, data: ArrayData) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::Format(format!("entry name of {} bytes is too long", name.len())));
        }
        if data.shape().len() > u8::MAX as usize {
            return Err(Error::Format("array rank exceeds 255".into()));
        }
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = data,
            None => self.entries.push((name, data)),
        }
        Ok(())
    }

    pub fn insert_real<D: ndarray::Dimension>(&mut self, name: impl Into<String>, a: &ndarray::Array<f64, D>) -> Result<()> {
        self.insert(name, ArrayData::Real(a.clone().into_dyn()))
    }

    pub fn insert_complex<D: ndarray::Dimension>(&mut self, name: impl Into<String>, a: &ndarray::Array<C64, D>) -> Result<()> {
        self.insert(name, ArrayData::Complex(a.clone().into_dyn()))
    }

    pub fn get(&self, name: &str) -> Option<&ArrayData> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, d)| d)
    }

    pub fn real(&self, name: &str) -> Result<&ArrayD<f64>> {
        match self.get(name) {
            Some(ArrayData::Real(a)) => Ok(a),
            Some(_) => Err(Error::Format(format!("entry {name:?} is not real"))),
            None => Err(Error::Format(format!("missing entry {name:?}"))),
        }
    }

    pub fn complex(&self, name: &str) -> Result<&ArrayD<C64>> {
        match self.get(name) {
            Some(ArrayData::Complex(a)) => Ok(a),
            Some(_) => Err(Error::Format(format!("entry {name:?} is not complex"))),
            None => Err(Error::Format(format!("missing entry {name:?}"))),
        }
    }

    pub fn real2(&self, name: &str) -> Result<ndarray::Array2<f64>> {
        self.real(name)?
            .clone()
            .into_dimensionality()
            .map_err(|_| Error::Format(format!("entry {name:?} is not two-dimensional")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, data) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let code = match data {
                ArrayData::Real(_) => DTYPE_F64,
                ArrayData::Complex(_) => DTYPE_C64,
            };
            out.push(code);
            out.push(data.shape().len() as u8);
            for &d in data.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match data {
                ArrayData::Real(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                ArrayData::Complex(a) => a.iter().for_each(|v| {
                    out.extend_from_slice(&v.re.to_le_bytes());
                    out.extend_from_slice(&v.im.to_le_bytes());
                }),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, expected HSB1".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let count = r.u32()?;
        let mut out = Self::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
                .to_owned();
            let code = r.u8()?;
            let width = match code {
                DTYPE_F64 => 8,
                DTYPE_C64 => 16,
                other => return Err(Error::Format(format!("unknown dtype code {other} for entry {name:?}"))),
            };
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            let mut count: usize = 1;
            for _ in 0..rank {
                let d = usize::try_from(r.u64()?).map_err(|_| Error::Format("dimension overflows usize".into()))?;
                count = count.checked_mul(d).ok_or_else(|| Error::Format("element count overflows".into()))?;
                dims.push(d);
            }
            let nbytes = count.checked_mul(width).ok_or_else(|| Error::Format("payload size overflows".into()))?;
            let payload = r.take(nbytes)?;
            let f = |k: usize| f64::from_le_bytes(payload[8 * k..8 * k + 8].try_into().expect("8 bytes"));
            // ndarray also caps the product of the nonzero axes, which an
            // empty array with huge dimensions can exceed.
            let bad_shape = |_| Error::Format(format!("shape {dims:?} of entry {name:?} is not representable"));
            let data = if code == DTYPE_F64 {
                ArrayData::Real(ArrayD::from_shape_vec(IxDyn(&dims), (0..count).map(f).collect()).map_err(bad_shape)?)
            } else {
                let v = (0..count).map(|k| C64::new(f(2 * k), f(2 * k + 1))).collect();
                ArrayData::Complex(ArrayD::from_shape_vec(IxDyn(&dims), v).map_err(bad_shape)?)
            };
            if out.get(&name).is_some() {
                return Err(Error::Format(format!("duplicate entry {name:?}")));
            }
            out.entries.push((name, data));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(e) => {
                let s = &self.buf[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::Format(format!("truncated container at byte {}", self.pos))),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// `key=value` configuration. Serialization sorts keys, one pair per line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    map: BTreeMap<String, String>,
}

fn valid_key(k: &str) -> bool {
    !k.is_empty() && k.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-'))
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parse text. Blank lines and lines starting with `#` are skipped;
    /// duplicate keys, malformed keys and control characters are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected key=value", no + 1)))?;
            if !valid_key(k) {
                return Err(Error::Format(format!("line {}: invalid key {k:?}", no + 1)));
            }
            if v.chars().any(char::is_control) {
                return Err(Error::Format(format!("line {}: control character in value", no + 1)));
            }
            if map.insert(k.to_owned(), v.to_owned()).is_some() {
                return Err(Error::Format(format!("line {}: duplicate key {k:?}", no + 1)));
            }
        }
        Ok(Self { map })
    }

    pub fn set(&mut self, key: &str, value: impl fmt::Display) -> Result<()> {
        let v = value.to_string();
        if !valid_key(key) {
            return Err(Error::Format(format!("invalid key {key:?}")));
        }
        if v.chars().any(char::is_control) {
            return Err(Error::Format(format!("control character in value for {key:?}")));
        }
        self.map.insert(key.to_owned(), v);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Config(format!("manifest is missing {key:?}")))
    }

    pub fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse().map_err(|_| Error::Config(format!("manifest value {key}={raw} does not parse")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_string())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

impl fmt::Display for Manifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.map {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

/// Path of the manifest that accompanies a container file: the same path
/// with `.manifest` appended.
pub fn manifest_path(path: impl AsRef<Path>) -> std::path::PathBuf {
    let mut os = path.as_ref().as_os_str().to_owned();
    os.push(".manifest");
    os.into()
}

/// Round-trippable float formatting with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}
