//! Image blob codecs.
//!
//! * `Raw` stores row-major `H x W x C` bytes.
//! * `Rle` stores `(count: u32 LE, value: u8)` runs over the same byte stream.
//! * `Subsample2` keeps the top-left pixel of every 2x2 block and re-expands
//!   with nearest neighbor on decode. It is the only lossy codec.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum CodecId {
    Raw = 0,
    Rle = 1,
    Subsample2 = 2,
}

impl CodecId {
    pub const ALL: [CodecId; 3] = [CodecId::Raw, CodecId::Rle, CodecId::Subsample2];

    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0 => Self::Raw,
            1 => Self::Rle,
            2 => Self::Subsample2,
            _ => return None,
        })
    }

    pub fn is_lossless(self) -> bool {
        !matches!(self, Self::Subsample2)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Raw => "raw",
            Self::Rle => "rle",
            Self::Subsample2 => "subsample2",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("image {height}x{width}x{channels} exceeds field limits {max_height}x{max_width}x{max_channels}")]
    DimsExceedMax {
        height: usize,
        width: usize,
        channels: usize,
        max_height: u16,
        max_width: u16,
        max_channels: u8,
    },
    #[error("pixel buffer has {got} bytes, expected {expected}")]
    BadPixelBuffer { expected: usize, got: usize },
    #[error("output buffer has {got} bytes, expected {expected}")]
    BadOutputBuffer { expected: usize, got: usize },
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),
}

/// Owned `H x W x C` image of 8-bit samples, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Image {
    pub height: u16,
    pub width: u16,
    pub channels: u8,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(height: u16, width: u16, channels: u8, pixels: Vec<u8>) -> Result<Self, CodecError> {
        let expected = height as usize * width as usize * channels as usize;
        if pixels.len() != expected {
            return Err(CodecError::BadPixelBuffer {
                expected,
                got: pixels.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn byte_len(&self) -> usize {
        self.pixels.len()
    }
}

/// Encoded image as stored in the heap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBlob {
    pub height: u16,
    pub width: u16,
    pub channels: u8,
    pub codec: CodecId,
    pub payload: Vec<u8>,
}

impl ImageBlob {
    pub fn view(&self) -> BlobView<'_> {
        BlobView {
            height: self.height,
            width: self.width,
            channels: self.channels,
            codec: self.codec,
            payload: &self.payload,
        }
    }
}

/// Borrowed encoded image, e.g. straight out of a mapped page.
#[derive(Debug, Clone, Copy)]
pub struct BlobView<'a> {
    pub height: u16,
    pub width: u16,
    pub channels: u8,
    pub codec: CodecId,
    pub payload: &'a [u8],
}

impl BlobView<'_> {
    pub fn decoded_len(&self) -> usize {
        self.height as usize * self.width as usize * self.channels as usize
    }
}

pub fn subsampled_len(height: usize, width: usize, channels: usize) -> usize {
    height.div_ceil(2) * width.div_ceil(2) * channels
}

/// Encodes `image` for a field limited to `max_height x max_width x channels`.
pub fn encode_image(
    image: &Image,
    codec: CodecId,
    max_height: u16,
    max_width: u16,
    channels: u8,
) -> Result<ImageBlob, CodecError> {
    if image.height > max_height || image.width > max_width || image.channels != channels {
        return Err(CodecError::DimsExceedMax {
            height: image.height as usize,
            width: image.width as usize,
            channels: image.channels as usize,
            max_height,
            max_width,
            max_channels: channels,
        });
    }
    let (h, w, c) = (image.height as usize, image.width as usize, image.channels as usize);
    let payload = match codec {
        CodecId::Raw => image.pixels.clone(),
        CodecId::Rle => rle_encode(&image.pixels),
        CodecId::Subsample2 => {
            let mut out = Vec::with_capacity(subsampled_len(h, w, c));
            for y in (0..h).step_by(2) {
                for x in (0..w).step_by(2) {
                    let at = (y * w + x) * c;
                    out.extend_from_slice(&image.pixels[at..at + c]);
                }
            }
            out
        }
    };
    Ok(ImageBlob {
        height: image.height,
        width: image.width,
        channels: image.channels,
        codec,
        payload,
    })
}

pub fn rle_encode(bytes: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    let mut iter = bytes.iter().copied();
    let Some(mut value) = iter.next() else {
        return out;
    };
    let mut count: u32 = 1;
    for b in iter {
        if b == value && count < u32::MAX {
            count += 1;
        } else {
            out.extend_from_slice(&count.to_le_bytes());
            out.push(value);
            value = b;
            count = 1;
        }
    }
    out.extend_from_slice(&count.to_le_bytes());
    out.push(value);
    out
}

/// Decodes into a caller-owned buffer of exactly `H * W * C` bytes. Never allocates.
pub fn decode_image(blob: BlobView<'_>, out: &mut [u8]) -> Result<(), CodecError> {
    let expected = blob.decoded_len();
    if out.len() != expected {
        return Err(CodecError::BadOutputBuffer {
            expected,
            got: out.len(),
        });
    }
    let (h, w, c) = (blob.height as usize, blob.width as usize, blob.channels as usize);
    match blob.codec {
        CodecId::Raw => {
            if blob.payload.len() != expected {
                return Err(CodecError::CorruptPayload(format!(
                    "raw payload is {} bytes, expected {expected}",
                    blob.payload.len()
                )));
            }
            out.copy_from_slice(blob.payload);
        }
        CodecId::Rle => {
            if !blob.payload.len().is_multiple_of(5) {
                return Err(CodecError::CorruptPayload("rle payload is not a whole number of runs".into()));
            }
            let mut at = 0usize;
            for run in blob.payload.chunks_exact(5) {
                let count = u32::from_le_bytes([run[0], run[1], run[2], run[3]]) as usize;
                if count == 0 {
                    return Err(CodecError::CorruptPayload("zero-length run".into()));
                }
                let end = at + count;
                if end > expected {
                    return Err(CodecError::CorruptPayload(format!(
                        "runs exceed decoded size {expected}"
                    )));
                }
                out[at..end].fill(run[4]);
                at = end;
            }
            if at != expected {
                return Err(CodecError::CorruptPayload(format!(
                    "runs sum to {at}, expected {expected}"
                )));
            }
        }
        CodecId::Subsample2 => {
            let sub_w = w.div_ceil(2);
            if blob.payload.len() != subsampled_len(h, w, c) {
                return Err(CodecError::CorruptPayload(format!(
                    "subsampled payload is {} bytes, expected {}",
                    blob.payload.len(),
                    subsampled_len(h, w, c)
                )));
            }
            for y in 0..h {
                let src_row = (y / 2) * sub_w;
                for x in 0..w {
                    let src = (src_row + x / 2) * c;
                    let dst = (y * w + x) * c;
                    out[dst..dst + c].copy_from_slice(&blob.payload[src..src + c]);
                }
            }
        }
    }
    Ok(())
}
