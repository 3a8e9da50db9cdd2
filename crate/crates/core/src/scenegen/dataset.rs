//! Binary dataset container.
//!
//! Little-endian layout:
//!
//! ```text
//! "WDPH" | version u16 | count u32 | C u16 | H u16 | W u16 | vocab_size u16
//! vocab_size × (len u16, utf-8 bytes)            -- in id order
//! count × (caption_len u16, ids u16[caption_len],
//!          image f32[C·H·W], depth f32[H·W], mask u8[H·W])
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::textprior::Vocabulary;

pub const DATASET_MAGIC: [u8; 4] = *b"WDPH";
pub const DATASET_VERSION: u16 = 1;

/// One training example: image, caption ids, metric depth and validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Vec<f32>,
    pub caption: Vec<u16>,
    pub depth: Vec<f32>,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub vocabulary: Vocabulary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.header.height * self.header.width
    }

    /// Checks every sample against the header.
    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        let px = h.height * h.width;
        for (i, s) in self.samples.iter().enumerate() {
            let bad = if s.image.len() != h.channels * px || s.depth.len() != px || s.mask.len() != px {
                Some("array sizes disagree with header".to_string())
            } else if s.caption.len() > u16::MAX as usize {
                Some("caption too long".to_string())
            } else if let Some(id) = s.caption.iter().find(|&&id| id as usize >= h.vocabulary.len()) {
                Some(format!("token id {id} outside vocabulary"))
            } else if s.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
                Some("image value outside [0, 1]".to_string())
            } else if s
                .depth
                .iter()
                .zip(&s.mask)
                .any(|(&d, &m)| m && !(d > 0.0 && d.is_finite()))
            {
                Some("non-positive depth under mask".to_string())
            } else {
                None
            };
            if let Some(msg) = bad {
                return Err(Error::contract(format!("sample {i}"), msg));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let h = &self.header;
        let count = u32::try_from(self.samples.len()).map_err(|_| Error::config("too many samples for a u32 count"))?;
        let dims = [h.channels, h.height, h.width].map(|d| u16::try_from(d).unwrap_or(0));
        if dims.contains(&0) {
            return Err(Error::config(format!(
                "dimensions {:?} do not fit u16",
                (h.channels, h.height, h.width)
            )));
        }
        let mut out = Vec::new();
        out.extend_from_slice(&DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        for d in dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&(h.vocabulary.len() as u16).to_le_bytes());
        for token in h.vocabulary.tokens() {
            let len = u16::try_from(token.len()).map_err(|_| Error::Vocabulary(format!("token {token:?} too long")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(token.as_bytes());
        }
        for s in &self.samples {
            out.extend_from_slice(&(s.caption.len() as u16).to_le_bytes());
            for id in &s.caption {
                out.extend_from_slice(&id.to_le_bytes());
            }
            for v in s.image.iter().chain(&s.depth) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend(s.mask.iter().map(|&m| m as u8));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != DATASET_MAGIC {
            return Err(FormatError::Magic {
                expected: DATASET_MAGIC,
                found: magic,
            }
            .into());
        }
        let version = r.u16("version")?;
        if version != DATASET_VERSION {
            return Err(FormatError::Version {
                expected: DATASET_VERSION,
                found: version,
            }
            .into());
        }
        let count = r.u32("count")? as usize;
        let channels = r.u16("channels")? as usize;
        let height = r.u16("height")? as usize;
        let width = r.u16("width")? as usize;
        let vocab_size = r.u16("vocab_size")? as usize;
        let mut tokens = Vec::with_capacity(vocab_size);
        for i in 0..vocab_size {
            let len = r.u16("token length")? as usize;
            let raw = r.take(len, "token")?;
            let token =
                std::str::from_utf8(raw).map_err(|_| FormatError::Malformed(format!("token {i} is not utf-8")))?;
            tokens.push(token.to_string());
        }
        let vocabulary = Vocabulary::from_tokens(tokens)?;
        let header = DatasetHeader {
            channels,
            height,
            width,
            vocabulary,
        };

        let mut samples = Vec::with_capacity(count.min(1 << 20));
        for i in 0..count {
            if r.remaining() == 0 {
                return Err(FormatError::CountMismatch {
                    declared: count,
                    found: i,
                }
                .into());
            }
            samples.push(r.record(&header, i)?);
        }
        if r.remaining() > 0 {
            let mut extra = 0;
            while r.remaining() > 0 {
                if r.record(&header, count + extra).is_err() {
                    return Err(FormatError::Malformed("trailing bytes after the last record".into()).into());
                }
                extra += 1;
            }
            return Err(FormatError::CountMismatch {
                declared: count,
                found: count + extra,
            }
            .into());
        }
        let ds = Dataset { header, samples };
        ds.validate().map_err(|e| FormatError::Malformed(e.to_string()))?;
        Ok(ds)
    }
}

/// Little-endian cursor that reports short reads as truncation.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(FormatError::Truncated(format!(
                "{what}: need {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            ))
            .into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        Ok(self
            .take(4 * n, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn record(&mut self, h: &DatasetHeader, index: usize) -> Result<Sample> {
        let what = |field: &str| format!("record {index} {field}");
        let len = self.u16(&what("caption length"))? as usize;
        let caption = self
            .take(2 * len, &what("caption"))?
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let px = h.height * h.width;
        let image = self.f32s(h.channels * px, &what("image"))?;
        let depth = self.f32s(px, &what("depth"))?;
        let mask = self
            .take(px, &what("mask"))?
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(FormatError::Malformed(format!("record {index}: mask byte {other}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Sample {
            image,
            caption,
            depth,
            mask,
        })
    }
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, ds.to_bytes()?)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::from_bytes(&fs::read(path)?)
}
