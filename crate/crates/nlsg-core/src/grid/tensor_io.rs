//! Flat binary tensor files.
//!
//! Layout: a 16-byte header (magic `NLSG`, u8 rank, u8 dtype, 10 zero bytes
//! of padding), then `rank` little-endian u32 dimensions, then the payload in
//! row-major order. dtype 0 is little-endian f64, dtype 1 is u8. Round-trips
//! are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{ConfusionField, ImageTensor, LabelMap, ProbabilityMap};

const MAGIC: &[u8; 4] = b"NLSG";
const HEADER_LEN: usize = 16;

const DTYPE_F64: u8 = 0;
const DTYPE_U8: u8 = 1;

/// An untyped tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    U8(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl RawTensor {
    pub fn f64(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expect: usize = dims.iter().product();
        if values.len() != expect {
            return Err(Error::shape(
                format!("{expect} elements"),
                format!("{}", values.len()),
            ));
        }
        Ok(RawTensor {
            dims,
            data: TensorData::F64(values),
        })
    }

    pub fn u8(dims: Vec<usize>, values: Vec<u8>) -> Result<Self> {
        let expect: usize = dims.iter().product();
        if values.len() != expect {
            return Err(Error::shape(
                format!("{expect} elements"),
                format!("{}", values.len()),
            ));
        }
        Ok(RawTensor {
            dims,
            data: TensorData::U8(values),
        })
    }

    pub fn as_f64(&self) -> Result<&[f64]> {
        match &self.data {
            TensorData::F64(v) => Ok(v),
            TensorData::U8(_) => Err(Error::Format("expected f64 tensor, found u8".into())),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            TensorData::F64(_) => Err(Error::Format("expected u8 tensor, found f64".into())),
        }
    }

    pub fn expect_rank(&self, rank: usize) -> Result<()> {
        if self.dims.len() != rank {
            return Err(Error::Format(format!(
                "expected rank {rank} tensor, found rank {}",
                self.dims.len()
            )));
        }
        Ok(())
    }
}

/// Serialize a tensor into a writer.
pub fn write_tensor_to<W: Write>(mut w: W, tensor: &RawTensor) -> Result<()> {
    if tensor.dims.is_empty() || tensor.dims.len() > 255 {
        return Err(Error::arg("tensor rank must be in 1..=255"));
    }
    let dtype = match tensor.data {
        TensorData::F64(_) => DTYPE_F64,
        TensorData::U8(_) => DTYPE_U8,
    };
    let mut header = [0u8; HEADER_LEN];
    header[..4].copy_from_slice(MAGIC);
    header[4] = tensor.dims.len() as u8;
    header[5] = dtype;
    w.write_all(&header)?;
    for &d in &tensor.dims {
        let d = u32::try_from(d).map_err(|_| Error::arg("dimension exceeds u32"))?;
        w.write_all(&d.to_le_bytes())?;
    }
    match &tensor.data {
        TensorData::F64(values) => {
            for &v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        TensorData::U8(values) => w.write_all(values)?,
    }
    Ok(())
}

/// Deserialize a tensor from a reader.
pub fn read_tensor_from<R: Read>(mut r: R) -> Result<RawTensor> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)
        .map_err(|e| Error::Format(format!("truncated tensor header: {e}")))?;
    if &header[..4] != MAGIC {
        return Err(Error::Format("bad magic, not a tensor file".into()));
    }
    let rank = usize::from(header[4]);
    let dtype = header[5];
    if rank == 0 {
        return Err(Error::Format("tensor rank 0 is not supported".into()));
    }
    if header[6..].iter().any(|&b| b != 0) {
        return Err(Error::Format("nonzero header padding".into()));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for _ in 0..rank {
        let mut buf = [0u8; 4];
        r.read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("truncated dimension list: {e}")))?;
        let d = u32::from_le_bytes(buf) as usize;
        dims.push(d);
        count = count
            .checked_mul(d)
            .ok_or_else(|| Error::Format("tensor element count overflows".into()))?;
    }
    let data = match dtype {
        DTYPE_F64 => {
            let mut bytes = vec![0u8; count * 8];
            r.read_exact(&mut bytes)
                .map_err(|e| Error::Format(format!("truncated f64 payload: {e}")))?;
            let values = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            TensorData::F64(values)
        }
        DTYPE_U8 => {
            let mut values = vec![0u8; count];
            r.read_exact(&mut values)
                .map_err(|e| Error::Format(format!("truncated u8 payload: {e}")))?;
            TensorData::U8(values)
        }
        other => return Err(Error::Format(format!("unknown dtype tag {other}"))),
    };
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after tensor payload".into()));
    }
    Ok(RawTensor { dims, data })
}

pub fn write_tensor(path: &Path, tensor: &RawTensor) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write_tensor_to(&mut w, tensor)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<RawTensor> {
    let file = File::open(path)?;
    read_tensor_from(BufReader::new(file))
}

/// Images are stored rank 3: `[height, width, channels]`.
pub fn save_image(path: &Path, image: &ImageTensor) -> Result<()> {
    let t = RawTensor::f64(
        vec![image.height(), image.width(), image.channels()],
        image.values().to_vec(),
    )?;
    write_tensor(path, &t)
}

pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let t = read_tensor(path)?;
    t.expect_rank(3)?;
    ImageTensor::new(t.dims[1], t.dims[0], t.dims[2], t.as_f64()?.to_vec())
}

/// Label maps are stored rank 2: `[height, width]`, u8 payload. The class
/// count is not part of the file, so the caller supplies it and labels are
/// re-validated against it on load.
pub fn save_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    let t = RawTensor::u8(
        vec![labels.height(), labels.width()],
        labels.labels().to_vec(),
    )?;
    write_tensor(path, &t)
}

pub fn load_labels(path: &Path, classes: usize) -> Result<LabelMap> {
    let t = read_tensor(path)?;
    t.expect_rank(2)?;
    LabelMap::new(t.dims[1], t.dims[0], classes, t.as_u8()?.to_vec())
}

/// Probability maps are stored rank 3: `[height, width, classes]`.
pub fn save_probability_map(path: &Path, map: &ProbabilityMap) -> Result<()> {
    let t = RawTensor::f64(
        vec![map.height(), map.width(), map.classes()],
        map.probs().to_vec(),
    )?;
    write_tensor(path, &t)
}

pub fn load_probability_map(path: &Path) -> Result<ProbabilityMap> {
    let t = read_tensor(path)?;
    t.expect_rank(3)?;
    ProbabilityMap::new(t.dims[1], t.dims[0], t.dims[2], t.as_f64()?.to_vec())
}

/// Confusion fields are stored rank 4: `[height, width, classes, classes]`.
pub fn save_confusion_field(path: &Path, field: &ConfusionField) -> Result<()> {
    let t = RawTensor::f64(
        vec![
            field.height(),
            field.width(),
            field.classes(),
            field.classes(),
        ],
        field.entries().to_vec(),
    )?;
    write_tensor(path, &t)
}

pub fn load_confusion_field(path: &Path) -> Result<ConfusionField> {
    let t = read_tensor(path)?;
    t.expect_rank(4)?;
    if t.dims[2] != t.dims[3] {
        return Err(Error::Format(format!(
            "confusion field must be square, found {}x{}",
            t.dims[2], t.dims[3]
        )));
    }
    ConfusionField::new(t.dims[1], t.dims[0], t.dims[2], t.as_f64()?.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_stable() {
        let t = RawTensor::u8(vec![2, 3], vec![0, 1, 2, 3, 4, 5]).unwrap();
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"NLSG");
        assert_eq!(buf[4], 2); // rank
        assert_eq!(buf[5], 1); // u8 dtype
        assert_eq!(&buf[6..16], &[0u8; 10]);
        assert_eq!(&buf[16..20], &2u32.to_le_bytes());
        assert_eq!(&buf[20..24], &3u32.to_le_bytes());
        assert_eq!(&buf[24..], &[0, 1, 2, 3, 4, 5]);
        assert_eq!(buf.len(), 16 + 2 * 4 + 6);
    }

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let values = vec![0.0, -0.0, 1.5, f64::MIN_POSITIVE, 1e300, -3.25];
        let t = RawTensor::f64(vec![6], values.clone()).unwrap();
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t).unwrap();
        let back = read_tensor_from(&buf[..]).unwrap();
        let got = back.as_f64().unwrap();
        for (a, b) in got.iter().zip(&values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let t = RawTensor::u8(vec![1], vec![7]).unwrap();
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t).unwrap();
        buf[0] = b'X';
        assert!(read_tensor_from(&buf[..]).is_err());
    }

    #[test]
    fn truncated_payload_rejected() {
        let t = RawTensor::f64(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(read_tensor_from(&buf[..]).is_err());
    }

    #[test]
    fn trailing_bytes_rejected() {
        let t = RawTensor::u8(vec![1], vec![7]).unwrap();
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t).unwrap();
        buf.push(0);
        assert!(read_tensor_from(&buf[..]).is_err());
    }

    #[test]
    fn unknown_dtype_rejected() {
        let t = RawTensor::u8(vec![1], vec![7]).unwrap();
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t).unwrap();
        buf[5] = 9;
        assert!(read_tensor_from(&buf[..]).is_err());
    }

    #[test]
    fn typed_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let labels = LabelMap::new(3, 2, 4, vec![0, 1, 2, 3, 0, 1]).unwrap();
        let path = dir.path().join("labels.nlsg");
        save_labels(&path, &labels).unwrap();
        assert_eq!(load_labels(&path, 4).unwrap(), labels);
        // loading with too few classes must fail validation
        assert!(load_labels(&path, 3).is_err());

        let field = crate::grid::normalize_columns(2, 2, 2, &[
            3.0, 1.0, 1.0, 3.0, 2.0, 1.0, 2.0, 1.0, 1.0, 1.0, 1.0, 1.0, 5.0, 1.0, 1.0, 5.0,
        ])
        .unwrap();
        let path = dir.path().join("field.nlsg");
        save_confusion_field(&path, &field).unwrap();
        assert_eq!(load_confusion_field(&path).unwrap(), field);
    }

    #[test]
    fn corrupted_field_fails_validation_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.nlsg");
        // columns do not sum to 1
        let t = RawTensor::f64(vec![1, 1, 2, 2], vec![0.9, 0.0, 0.0, 0.9]).unwrap();
        write_tensor(&path, &t).unwrap();
        assert!(load_confusion_field(&path).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_f64_round_trip(
            values in prop::collection::vec(prop::num::f64::ANY, 1..64),
        ) {
            let t = RawTensor::f64(vec![values.len()], values.clone()).unwrap();
            let mut buf = Vec::new();
            write_tensor_to(&mut buf, &t).unwrap();
            let back = read_tensor_from(&buf[..]).unwrap();
            let got = back.as_f64().unwrap();
            for (a, b) in got.iter().zip(&values) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn arbitrary_u8_round_trip(
            values in prop::collection::vec(any::<u8>(), 1..256),
            split in 1usize..16,
        ) {
            let dims = if values.len() % split == 0 {
                vec![split, values.len() / split]
            } else {
                vec![values.len()]
            };
            let t = RawTensor::u8(dims, values.clone()).unwrap();
            let mut buf = Vec::new();
            write_tensor_to(&mut buf, &t).unwrap();
            let back = read_tensor_from(&buf[..]).unwrap();
            prop_assert_eq!(back.as_u8().unwrap(), &values[..]);
        }
    }
}
