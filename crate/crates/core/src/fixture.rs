//! Self-describing container for named arrays.
//!
//! Layout: an ASCII header, one directive per line, terminated by `end`,
//! followed by the little-endian payload of every section in header order.
//!
//! ```text
//! msdeform-fixture 1
//! precision f64
//! meta levels 3
//! section level0 4 1 16 8 8
//! end
//! <payload>
//! ```
//!
//! Pyramid fixtures carry `levels`, `batch`, `channels` and one `shape.<l>`
//! meta entry per level; parameter checkpoints reuse the container with one
//! section per parameter tensor.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::pyramid::{FeaturePyramid, SpatialShape};

const MAGIC: &str = "msdeform-fixture 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn tag(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub precision: Precision,
    pub meta: BTreeMap<String, String>,
    pub sections: Vec<(String, DenseArray)>,
}

impl Fixture {
    pub fn new(precision: Precision) -> Self {
        Self {
            precision,
            meta: BTreeMap::new(),
            sections: Vec::new(),
        }
    }

    pub fn section(&self, name: &str) -> Option<&DenseArray> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
    }

    pub fn push(&mut self, name: impl Into<String>, array: DenseArray) {
        self.sections.push((name.into(), array));
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut header = format!("{MAGIC}\nprecision {}\n", self.precision.tag());
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::InvalidArgument(format!("bad meta entry {k:?}")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        for (name, array) in &self.sections {
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("bad section name {name:?}")));
            }
            header.push_str(&format!("section {name} {}", array.ndim()));
            for d in array.shape() {
                header.push_str(&format!(" {d}"));
            }
            header.push('\n');
        }
        header.push_str("end\n");
        w.write_all(header.as_bytes())?;
        for (_, array) in &self.sections {
            match self.precision {
                Precision::F64 => {
                    for v in array.data() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                Precision::F32 => {
                    for v in array.data() {
                        w.write_all(&(*v as f32).to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = std::io::BufReader::new(r);
        let mut line = String::new();
        let mut next_line = |r: &mut std::io::BufReader<_>| -> Result<String> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Parse("unexpected end of fixture header".into()));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next_line(&mut r)? != MAGIC {
            return Err(Error::Parse("not a msdeform fixture".into()));
        }
        let precision = match next_line(&mut r)?.as_str() {
            "precision f64" => Precision::F64,
            "precision f32" => Precision::F32,
            other => return Err(Error::Parse(format!("bad precision line {other:?}"))),
        };
        let mut fixture = Fixture::new(precision);
        let mut layout: Vec<(String, Vec<usize>)> = Vec::new();
        loop {
            let l = next_line(&mut r)?;
            let mut parts = l.split(' ');
            match parts.next() {
                Some("end") => break,
                Some("meta") => {
                    let key = parts
                        .next()
                        .ok_or_else(|| Error::Parse(format!("bad meta {l:?}")))?;
                    let value = parts.collect::<Vec<_>>().join(" ");
                    fixture.meta.insert(key.to_string(), value);
                }
                Some("section") => {
                    let fields: Vec<&str> = parts.collect();
                    let bad = || Error::Parse(format!("bad section line {l:?}"));
                    let (name, rest) = fields.split_first().ok_or_else(bad)?;
                    let (ndim, dims) = rest.split_first().ok_or_else(bad)?;
                    let ndim: usize = ndim.parse().map_err(|_| bad())?;
                    let dims: Vec<usize> = dims
                        .iter()
                        .map(|d| d.parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad())?;
                    if dims.len() != ndim {
                        return Err(bad());
                    }
                    layout.push((name.to_string(), dims));
                }
                _ => return Err(Error::Parse(format!("unknown header directive {l:?}"))),
            }
        }
        let width = precision.width();
        for (name, dims) in layout {
            let n: usize = dims.iter().product();
            let mut buf = vec![0u8; n * width];
            r.read_exact(&mut buf)
                .map_err(|e| Error::Parse(format!("section {name}: truncated payload ({e})")))?;
            let data: Vec<f64> = match precision {
                Precision::F64 => buf
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect(),
                Precision::F32 => buf
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
                    .collect(),
            };
            fixture.push(name, DenseArray::new(dims, data)?);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Parse("trailing bytes after fixture payload".into()));
        }
        Ok(fixture)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

pub fn pyramid_to_fixture(p: &FeaturePyramid, precision: Precision) -> Fixture {
    let mut f = Fixture::new(precision);
    f.meta.insert("kind".into(), "pyramid".into());
    f.meta.insert("levels".into(), p.num_levels().to_string());
    f.meta.insert("batch".into(), p.batch().to_string());
    f.meta.insert("channels".into(), p.channels().to_string());
    for (l, (level, shape)) in p.levels().iter().zip(p.spatial_shapes()).enumerate() {
        f.meta.insert(format!("shape.{l}"), shape.to_string());
        f.push(format!("level{l}"), level.values().clone());
    }
    f
}

pub fn pyramid_from_fixture(f: &Fixture) -> Result<FeaturePyramid> {
    let meta = |k: &str| {
        f.meta
            .get(k)
            .ok_or_else(|| Error::Parse(format!("pyramid fixture missing meta {k}")))
    };
    let parse_count = |k: &str| -> Result<usize> {
        meta(k)?
            .parse()
            .map_err(|_| Error::Parse(format!("meta {k} is not a count")))
    };
    if meta("kind")? != "pyramid" {
        return Err(Error::Parse("fixture is not a pyramid".into()));
    }
    let levels = parse_count("levels")?;
    let (b, c) = (parse_count("batch")?, parse_count("channels")?);
    let mut arrays = Vec::with_capacity(levels);
    for l in 0..levels {
        let shape: SpatialShape = meta(&format!("shape.{l}"))?.parse()?;
        let a = f
            .section(&format!("level{l}"))
            .ok_or_else(|| Error::Parse(format!("pyramid fixture missing level{l}")))?;
        a.expect_shape(&[b, c, shape.height, shape.width], "pyramid fixture level")?;
        arrays.push(a.clone());
    }
    FeaturePyramid::from_arrays(arrays)
}
