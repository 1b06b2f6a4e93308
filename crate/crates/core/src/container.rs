//! Named-array container files.
//!
//! A container is a zip archive holding one `.npy` member per key, i.e. the
//! `.npz` layout, so files interoperate with numpy (`np.load`). Members are
//! stored uncompressed with a fixed timestamp which makes the output
//! byte-identical for identical contents.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, Write};
use std::path::Path;

use ndarray::{Array, ArrayD, Dimension, IxDyn};
use num_complex::Complex;
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, DateTime, ZipArchive, ZipWriter};

use crate::error::{ensure, Error, Result};
use crate::scalar::Real;

const MAGIC: &[u8] = b"\x93NUMPY";

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    U8(Vec<u8>),
    I64(Vec<i64>),
    F32(Vec<f32>),
    F64(Vec<f64>),
    C64(Vec<Complex<f32>>),
    C128(Vec<Complex<f64>>),
    Str(Vec<String>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            ArrayData::U8(v) => v.len(),
            ArrayData::I64(v) => v.len(),
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::C64(v) => v.len(),
            ArrayData::C128(v) => v.len(),
            ArrayData::Str(v) => v.len(),
        }
    }

    fn descr(&self) -> String {
        match self {
            ArrayData::U8(_) => "|u1".into(),
            ArrayData::I64(_) => "<i8".into(),
            ArrayData::F32(_) => "<f4".into(),
            ArrayData::F64(_) => "<f8".into(),
            ArrayData::C64(_) => "<c8".into(),
            ArrayData::C128(_) => "<c16".into(),
            ArrayData::Str(v) => {
                let width = v.iter().map(|s| s.chars().count()).max().unwrap_or(0).max(1);
                format!("<U{width}")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn new(shape: Vec<usize>, data: ArrayData) -> Result<Self> {
        let n: usize = shape.iter().product();
        ensure!(
            n == data.len(),
            Shape,
            "shape {shape:?} holds {n} elements but {} were given",
            data.len()
        );
        Ok(NamedArray { shape, data })
    }

    fn write_npy<W: Write>(&self, w: &mut W) -> Result<()> {
        let shape = match self.shape.len() {
            0 => "()".to_string(),
            1 => format!("({},)", self.shape[0]),
            _ => format!(
                "({})",
                self.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
            ),
        };
        let descr = self.data.descr();
        let mut header =
            format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape}, }}");
        // Pad so that magic + version + length + header is a multiple of 64.
        let total = MAGIC.len() + 2 + 2 + header.len() + 1;
        header.push_str(&" ".repeat((64 - total % 64) % 64));
        header.push('\n');
        w.write_all(MAGIC)?;
        w.write_all(&[1, 0])?;
        w.write_all(&(header.len() as u16).to_le_bytes())?;
        w.write_all(header.as_bytes())?;
        let mut buf = Vec::new();
        match &self.data {
            ArrayData::U8(v) => buf.extend_from_slice(v),
            ArrayData::I64(v) => v.iter().for_each(|x| buf.extend(x.to_le_bytes())),
            ArrayData::F32(v) => v.iter().for_each(|x| buf.extend(x.to_le_bytes())),
            ArrayData::F64(v) => v.iter().for_each(|x| buf.extend(x.to_le_bytes())),
            ArrayData::C64(v) => v.iter().for_each(|z| {
                buf.extend(z.re.to_le_bytes());
                buf.extend(z.im.to_le_bytes());
            }),
            ArrayData::C128(v) => v.iter().for_each(|z| {
                buf.extend(z.re.to_le_bytes());
                buf.extend(z.im.to_le_bytes());
            }),
            ArrayData::Str(v) => {
                let width: usize = descr[2..].parse().expect("unicode width");
                for s in v {
                    let mut n = 0;
                    for ch in s.chars() {
                        buf.extend((ch as u32).to_le_bytes());
                        n += 1;
                    }
                    buf.extend(std::iter::repeat_n(0u8, 4 * (width - n)));
                }
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    fn read_npy(bytes: &[u8]) -> Result<Self> {
        ensure!(bytes.len() >= 10 && &bytes[..6] == MAGIC, Format, "bad npy magic");
        let (hlen, start) = match bytes[6] {
            1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
            2 | 3 => {
                ensure!(bytes.len() >= 12, Format, "truncated npy header");
                (u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize, 12)
            }
            v => return Err(Error::Format(format!("unsupported npy version {v}"))),
        };
        ensure!(bytes.len() >= start + hlen, Format, "truncated npy header");
        let header = std::str::from_utf8(&bytes[start..start + hlen])
            .map_err(|_| Error::Format("npy header is not utf-8".into()))?;
        let descr = header_field(header, "descr")?;
        let descr = descr.trim_matches(|c| c == '\'' || c == '"');
        let fortran = header_field(header, "fortran_order")?;
        ensure!(fortran.trim() == "False", Format, "fortran-ordered arrays are not supported");
        let shape_str = header_field(header, "shape")?;
        let shape: Vec<usize> = shape_str
            .trim_matches(|c| c == '(' || c == ')')
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<usize>().map_err(|_| Error::Format(format!("bad shape {shape_str}"))))
            .collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let body = &bytes[start + hlen..];
        let need = |size: usize| -> Result<()> {
            ensure!(body.len() >= n * size, Format, "npy body too short for shape {shape:?}");
            Ok(())
        };
        let le = |chunk: &[u8]| -> [u8; 8] {
            let mut b = [0u8; 8];
            b[..chunk.len()].copy_from_slice(chunk);
            b
        };
        let data = match descr {
            "|u1" | "<u1" | "|b1" => {
                need(1)?;
                ArrayData::U8(body[..n].to_vec())
            }
            "<i8" => {
                need(8)?;
                ArrayData::I64(body[..8 * n].chunks_exact(8).map(|c| i64::from_le_bytes(le(c))).collect())
            }
            "<f4" => {
                need(4)?;
                ArrayData::F32(
                    body[..4 * n]
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                )
            }
            "<f8" => {
                need(8)?;
                ArrayData::F64(body[..8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(le(c))).collect())
            }
            "<c8" => {
                need(8)?;
                ArrayData::C64(
                    body[..8 * n]
                        .chunks_exact(8)
                        .map(|c| {
                            Complex::new(
                                f32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                                f32::from_le_bytes([c[4], c[5], c[6], c[7]]),
                            )
                        })
                        .collect(),
                )
            }
            "<c16" => {
                need(16)?;
                ArrayData::C128(
                    body[..16 * n]
                        .chunks_exact(16)
                        .map(|c| Complex::new(f64::from_le_bytes(le(&c[..8])), f64::from_le_bytes(le(&c[8..]))))
                        .collect(),
                )
            }
            d if d.starts_with("<U") => {
                let width: usize = d[2..].parse().map_err(|_| Error::Format(format!("bad dtype {d}")))?;
                need(4 * width)?;
                let mut out = Vec::with_capacity(n);
                for item in body[..4 * width * n].chunks_exact(4 * width.max(1)) {
                    let s: String = item
                        .chunks_exact(4)
                        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .take_while(|&u| u != 0)
                        .filter_map(char::from_u32)
                        .collect();
                    out.push(s);
                }
                if width == 0 {
                    out = vec![String::new(); n];
                }
                ArrayData::Str(out)
            }
            d => return Err(Error::Format(format!("unsupported dtype {d}"))),
        };
        NamedArray::new(shape, data)
    }
}

fn header_field<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    let pat_sq = format!("'{key}':");
    let pat_dq = format!("\"{key}\":");
    let pos = header
        .find(&pat_sq)
        .map(|p| p + pat_sq.len())
        .or_else(|| header.find(&pat_dq).map(|p| p + pat_dq.len()))
        .ok_or_else(|| Error::Format(format!("npy header lacks `{key}`")))?;
    let rest = header[pos..].trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')').map(|e| e + 1)
    } else {
        rest.find(',').or_else(|| rest.find('}'))
    }
    .ok_or_else(|| Error::Format(format!("unterminated `{key}` in npy header")))?;
    Ok(&rest[..end])
}

/// Ordered set of named arrays, persisted as an `.npz` archive.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    entries: BTreeMap<String, NamedArray>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn insert(&mut self, key: impl Into<String>, array: NamedArray) {
        self.entries.insert(key.into(), array);
    }

    pub fn get(&self, key: &str) -> Result<&NamedArray> {
        self.entries.get(key).ok_or_else(|| Error::MissingKey(key.to_string()))
    }

    pub fn put_complex<T: Real, D: Dimension>(&mut self, key: &str, a: &Array<Complex<T>, D>) {
        let data = a.iter().map(|z| Complex::new(z.re.as_f64() as f32, z.im.as_f64() as f32)).collect();
        self.insert(key, NamedArray { shape: a.shape().to_vec(), data: ArrayData::C64(data) });
    }

    pub fn put_real<T: Real, D: Dimension>(&mut self, key: &str, a: &Array<T, D>) {
        let data = match T::NAME {
            "f32" => ArrayData::F32(a.iter().map(|x| x.as_f64() as f32).collect()),
            _ => ArrayData::F64(a.iter().map(|x| x.as_f64()).collect()),
        };
        self.insert(key, NamedArray { shape: a.shape().to_vec(), data });
    }

    pub fn put_u8<D: Dimension>(&mut self, key: &str, a: &Array<u8, D>) {
        self.insert(key, NamedArray { shape: a.shape().to_vec(), data: ArrayData::U8(a.iter().copied().collect()) });
    }

    pub fn put_strings(&mut self, key: &str, values: &[String]) {
        self.insert(key, NamedArray { shape: vec![values.len()], data: ArrayData::Str(values.to_vec()) });
    }

    pub fn put_text(&mut self, key: &str, text: &str) {
        self.insert(key, NamedArray { shape: vec![], data: ArrayData::Str(vec![text.to_string()]) });
    }

    pub fn put_scalar(&mut self, key: &str, x: f64) {
        self.insert(key, NamedArray { shape: vec![], data: ArrayData::F64(vec![x]) });
    }

    pub fn complex<T: Real>(&self, key: &str) -> Result<ArrayD<Complex<T>>> {
        let a = self.get(key)?;
        let data: Vec<Complex<T>> = match &a.data {
            ArrayData::C64(v) => v.iter().map(|z| Complex::new(T::lit(z.re as f64), T::lit(z.im as f64))).collect(),
            ArrayData::C128(v) => v.iter().map(|z| Complex::new(T::lit(z.re), T::lit(z.im))).collect(),
            ArrayData::F32(v) => v.iter().map(|&x| Complex::new(T::lit(x as f64), T::zero())).collect(),
            ArrayData::F64(v) => v.iter().map(|&x| Complex::new(T::lit(x), T::zero())).collect(),
            _ => return Err(Error::Format(format!("`{key}` is not a numeric array"))),
        };
        ArrayD::from_shape_vec(IxDyn(&a.shape), data).map_err(|e| Error::Shape(e.to_string()))
    }

    pub fn real<T: Real>(&self, key: &str) -> Result<ArrayD<T>> {
        let a = self.get(key)?;
        let data: Vec<T> = match &a.data {
            ArrayData::F32(v) => v.iter().map(|&x| T::lit(x as f64)).collect(),
            ArrayData::F64(v) => v.iter().map(|&x| T::lit(x)).collect(),
            ArrayData::U8(v) => v.iter().map(|&x| T::lit(x as f64)).collect(),
            ArrayData::I64(v) => v.iter().map(|&x| T::lit(x as f64)).collect(),
            _ => return Err(Error::Format(format!("`{key}` is not a real array"))),
        };
        ArrayD::from_shape_vec(IxDyn(&a.shape), data).map_err(|e| Error::Shape(e.to_string()))
    }

    pub fn u8(&self, key: &str) -> Result<ArrayD<u8>> {
        let a = self.get(key)?;
        match &a.data {
            ArrayData::U8(v) => {
                ArrayD::from_shape_vec(IxDyn(&a.shape), v.clone()).map_err(|e| Error::Shape(e.to_string()))
            }
            _ => Err(Error::Format(format!("`{key}` is not a uint8 array"))),
        }
    }

    pub fn strings(&self, key: &str) -> Result<Vec<String>> {
        match &self.get(key)?.data {
            ArrayData::Str(v) => Ok(v.clone()),
            _ => Err(Error::Format(format!("`{key}` is not a string array"))),
        }
    }

    pub fn text(&self, key: &str) -> Result<String> {
        self.strings(key)?
            .into_iter()
            .next()
            .ok_or_else(|| Error::Format(format!("`{key}` is empty")))
    }

    pub fn scalar(&self, key: &str) -> Result<f64> {
        self.real::<f64>(key)?
            .iter()
            .next()
            .copied()
            .ok_or_else(|| Error::Format(format!("`{key}` is empty")))
    }

    pub fn write_to<W: Write + Seek>(&self, w: W) -> Result<()> {
        let mut zip = ZipWriter::new(w);
        let opts = SimpleFileOptions::default()
            .compression_method(CompressionMethod::Stored)
            .last_modified_time(DateTime::default())
            .large_file(true);
        for (key, arr) in &self.entries {
            zip.start_file(format!("{key}.npy"), opts)?;
            arr.write_npy(&mut zip)?;
        }
        zip.finish()?;
        Ok(())
    }

    pub fn read_from<R: Read + Seek>(r: R) -> Result<Self> {
        let mut zip = ZipArchive::new(r)?;
        let mut entries = BTreeMap::new();
        for i in 0..zip.len() {
            let mut file = zip.by_index(i)?;
            let name = file.name().to_string();
            let key = name.strip_suffix(".npy").unwrap_or(&name).to_string();
            let mut bytes = Vec::with_capacity(file.size() as usize);
            file.read_to_end(&mut bytes)?;
            entries.insert(key, NamedArray::read_npy(&bytes)?);
        }
        Ok(Container { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path)?;
        Self::read_from(BufReader::new(file))
    }
}
