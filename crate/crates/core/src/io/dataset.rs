//! Dataset files of single-factor batches.
//!
//! ```text
//! magic "DCIGNDAT" | u32 version | u32 resolution | u8 object kind
//! u32 intrinsic dimension | u8 factor count, u8 factor tags
//! u64 batch count
//! per batch: u8 active factor tag | u32 batch size
//!   per example: f64 azimuth, elevation, light azimuth, intrinsic...
//!                then resolution² f32 pixels, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::binary::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::layout::Factor;
use crate::scene::{ObjectKind, SceneParams, TransformBatch, INTRINSIC_DIM};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"DCIGNDAT";
pub const DATASET_VERSION: u32 = 1;
/// Byte offset of the batch count.
const COUNT_OFFSET: u64 = 8 + 4 + 4 + 1 + 4 + 1 + 4;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub resolution: usize,
    pub object: ObjectKind,
    pub batches: u64,
}

impl DatasetHeader {
    fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::default();
        e.bytes(DATASET_MAGIC);
        e.u32(DATASET_VERSION);
        e.u32(self.resolution as u32);
        e.u8(self.object.tag());
        e.u32(INTRINSIC_DIM as u32);
        e.u8(Factor::ALL.len() as u8);
        for f in Factor::ALL {
            e.u8(f.tag());
        }
        e.u64(self.batches);
        debug_assert_eq!(e.buf.len() as u64, COUNT_OFFSET + 8);
        e.buf
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes, "dataset header");
        if d.take(8)? != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let version = d.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::Version {
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let resolution = d.u32()? as usize;
        let object = ObjectKind::from_tag(d.u8()?).ok_or_else(|| Error::Format("unknown object kind".into()))?;
        let dim = d.u32()? as usize;
        if dim != INTRINSIC_DIM {
            return Err(Error::Format(format!("intrinsic dimension {dim}, expected {INTRINSIC_DIM}")));
        }
        let n = d.u8()? as usize;
        let tags: Vec<u8> = (0..n).map(|_| d.u8()).collect::<Result<_>>()?;
        if tags != Factor::ALL.map(Factor::tag) {
            return Err(Error::Format(format!("unsupported factor schema {tags:?}")));
        }
        if resolution == 0 {
            return Err(Error::Corrupt("zero resolution".into()));
        }
        Ok(Self {
            resolution,
            object,
            batches: d.u64()?,
        })
    }
}

fn header_len() -> usize {
    COUNT_OFFSET as usize + 8
}

/// Streams batches to a file and patches the batch count on [`finish`](Self::finish).
pub struct DatasetWriter {
    out: BufWriter<File>,
    path: PathBuf,
    header: DatasetHeader,
}

impl DatasetWriter {
    pub fn create(path: impl AsRef<Path>, resolution: usize, object: ObjectKind) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let header = DatasetHeader {
            resolution,
            object,
            batches: 0,
        };
        let mut out = BufWriter::new(file);
        out.write_all(&header.encode()).map_err(|e| Error::io(&path, e))?;
        Ok(Self { out, path, header })
    }

    pub fn write_batch(&mut self, batch: &TransformBatch) -> Result<()> {
        batch.validate()?;
        let mut e = Encoder::default();
        e.u8(batch.active.tag());
        e.u32(batch.len() as u32);
        for (p, img) in batch.params.iter().zip(&batch.images) {
            img.ensure_shape(&[1, self.header.resolution, self.header.resolution], "dataset image")?;
            e.f64(p.azimuth);
            e.f64(p.elevation);
            e.f64(p.light_azimuth);
            for &v in &p.intrinsic {
                e.f64(v);
            }
            for &v in img.data() {
                e.bytes(&v.to_le_bytes());
            }
        }
        self.out.write_all(&e.buf).map_err(|err| Error::io(&self.path, err))?;
        self.header.batches += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<DatasetHeader> {
        let io = |e| Error::io(&self.path, e);
        self.out.seek(SeekFrom::Start(COUNT_OFFSET)).map_err(io)?;
        self.out.write_all(&self.header.batches.to_le_bytes()).map_err(io)?;
        self.out.flush().map_err(io)?;
        Ok(self.header.clone())
    }
}

/// Iterates the batches of a dataset file, validating each one.
pub struct DatasetReader {
    input: BufReader<File>,
    path: PathBuf,
    header: DatasetHeader,
    read: u64,
}

impl DatasetReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut input = BufReader::new(file);
        let mut head = vec![0u8; header_len()];
        read_exact_or_corrupt(&mut input, &mut head, &path)?;
        let header = DatasetHeader::decode(&head)?;
        Ok(Self {
            input,
            path,
            header,
            read: 0,
        })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    fn read_batch(&mut self) -> Result<TransformBatch> {
        let mut head = [0u8; 5];
        read_exact_or_corrupt(&mut self.input, &mut head, &self.path)?;
        let active = Factor::from_tag(head[0])
            .ok_or_else(|| Error::Corrupt(format!("batch {} has unknown factor tag {}", self.read, head[0])))?;
        let size = u32::from_le_bytes(head[1..5].try_into().expect("4 bytes")) as usize;
        let res = self.header.resolution;
        let per_example = 8 * (3 + INTRINSIC_DIM) + 4 * res * res;
        let total = size
            .checked_mul(per_example)
            .filter(|&t| t <= 1 << 32)
            .ok_or_else(|| Error::Corrupt(format!("batch {} declares {size} examples", self.read)))?;
        let mut body = vec![0u8; total];
        read_exact_or_corrupt(&mut self.input, &mut body, &self.path)?;
        let mut d = Decoder::new(&body, "dataset batch");
        let mut params = Vec::with_capacity(size);
        let mut images = Vec::with_capacity(size);
        for _ in 0..size {
            let azimuth = d.f64()?;
            let elevation = d.f64()?;
            let light_azimuth = d.f64()?;
            let intrinsic = (0..INTRINSIC_DIM).map(|_| d.f64()).collect::<Result<_>>()?;
            params.push(SceneParams {
                azimuth,
                elevation,
                light_azimuth,
                intrinsic,
            });
            let pixels = d
                .take(4 * res * res)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            images.push(Tensor::new(&[1, res, res], pixels)?);
        }
        let batch = TransformBatch { images, params, active };
        batch
            .validate()
            .map_err(|e| Error::Corrupt(format!("batch {}: {e}", self.read)))?;
        self.read += 1;
        Ok(batch)
    }
}

fn read_exact_or_corrupt(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Corrupt(format!("{} is truncated", path.display()))
        } else {
            Error::io(path, e)
        }
    })
}

impl Iterator for DatasetReader {
    type Item = Result<TransformBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.read < self.header.batches {
            return Some(self.read_batch());
        }
        if self.read == self.header.batches {
            // a clean end of input must follow the declared batches
            self.read += 1;
            let mut probe = [0u8; 1];
            return match self.input.read(&mut probe) {
                Ok(0) => None,
                Ok(_) => Some(Err(Error::Corrupt(format!("{} has trailing data", self.path.display())))),
                Err(e) => Some(Err(Error::io(&self.path, e))),
            };
        }
        None
    }
}

/// Writes `batches` to `path`.
pub fn write_dataset<I>(path: impl AsRef<Path>, resolution: usize, object: ObjectKind, batches: I) -> Result<DatasetHeader>
where
    I: IntoIterator<Item = Result<TransformBatch>>,
{
    let mut w = DatasetWriter::create(path, resolution, object)?;
    for b in batches {
        w.write_batch(&b?)?;
    }
    w.finish()
}

/// Reads a whole dataset into memory.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<(DatasetHeader, Vec<TransformBatch>)> {
    let reader = DatasetReader::open(path)?;
    let header = reader.header().clone();
    let batches = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, batches))
}
