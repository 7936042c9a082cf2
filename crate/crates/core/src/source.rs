//! Sample values and sample providers consumed by the writer.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::codecs::Image;
use crate::format::{DType, FieldDescriptor, FieldType};
use crate::rng::SplitMix64;
use crate::Error;

/// One field of one sample, before encoding.
#[derive(Debug, Clone, PartialEq)]
pub enum FieldValue {
    Int(i64),
    Float(f64),
    /// Little-endian element bytes, exactly `dtype.size() * num_elements` long.
    Array(Vec<u8>),
    Bytes(Vec<u8>),
    Image(Image),
}

impl FieldValue {
    pub fn f32_array(values: &[f32]) -> Self {
        FieldValue::Array(values.iter().flat_map(|v| v.to_le_bytes()).collect())
    }

    pub fn i64_array(values: &[i64]) -> Self {
        FieldValue::Array(values.iter().flat_map(|v| v.to_le_bytes()).collect())
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            FieldValue::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_image(&self) -> Option<&Image> {
        match self {
            FieldValue::Image(img) => Some(img),
            _ => None,
        }
    }

    /// Bitwise equality (floats compared by bit pattern).
    pub fn bit_eq(&self, other: &FieldValue) -> bool {
        match (self, other) {
            (FieldValue::Float(a), FieldValue::Float(b)) => a.to_bits() == b.to_bits(),
            _ => self == other,
        }
    }

    /// Checks this value against a field type.
    pub fn check(&self, ty: &FieldType) -> Result<(), String> {
        match (self, ty) {
            (FieldValue::Int(_), FieldType::IntScalar)
            | (FieldValue::Float(_), FieldType::FloatScalar)
            | (FieldValue::Bytes(_), FieldType::VarBytes) => Ok(()),
            (FieldValue::Array(bytes), FieldType::FixedArray { .. }) => {
                let want = ty.array_byte_len().unwrap_or(0);
                if bytes.len() as u64 == want {
                    Ok(())
                } else {
                    Err(format!("array has {} bytes, field needs {want}", bytes.len()))
                }
            }
            (FieldValue::Image(_), FieldType::Image { .. }) => Ok(()),
            (v, t) => Err(format!("value {} does not fit field kind {:?}", v.kind_name(), t.kind())),
        }
    }

    fn kind_name(&self) -> &'static str {
        match self {
            FieldValue::Int(_) => "int",
            FieldValue::Float(_) => "float",
            FieldValue::Array(_) => "array",
            FieldValue::Bytes(_) => "bytes",
            FieldValue::Image(_) => "image",
        }
    }
}

/// Random-access provider of samples. The sample count must be known up front.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn sample(&self, index: usize) -> Result<Vec<FieldValue>, Error>;
}

/// Samples held in memory.
#[derive(Debug, Clone, Default)]
pub struct InMemorySource {
    pub samples: Vec<Vec<FieldValue>>,
}

impl InMemorySource {
    pub fn new(samples: Vec<Vec<FieldValue>>) -> Self {
        Self { samples }
    }
}

impl SampleSource for InMemorySource {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn sample(&self, index: usize) -> Result<Vec<FieldValue>, Error> {
        self.samples.get(index).cloned().ok_or(Error::IndexOutOfRange {
            index: index as u64,
            len: self.samples.len() as u64,
        })
    }
}

/// Seeded labeled images built from constant-gray 8x8 tiles, so RLE has runs to find.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSource {
    pub num_samples: usize,
    pub height: u16,
    pub width: u16,
    pub channels: u8,
    pub num_classes: u32,
    pub seed: u64,
}

const TILE: usize = 8;

impl SyntheticSource {
    pub fn new(num_samples: usize, height: u16, width: u16, channels: u8, seed: u64) -> Self {
        Self {
            num_samples,
            height,
            width,
            channels,
            num_classes: 10,
            seed,
        }
    }

    /// Parses `NxHxWxC`, e.g. `1000x32x32x3`.
    pub fn parse(spec: &str, seed: u64) -> Result<Self, Error> {
        let parts: Vec<&str> = spec.split('x').collect();
        let bad = || Error::Config(format!("synthetic spec {spec:?} is not NxHxWxC"));
        if parts.len() != 4 {
            return Err(bad());
        }
        let n = parts[0].parse().map_err(|_| bad())?;
        let h = parts[1].parse().map_err(|_| bad())?;
        let w = parts[2].parse().map_err(|_| bad())?;
        let c = parts[3].parse().map_err(|_| bad())?;
        if h == 0 || w == 0 || c == 0 {
            return Err(bad());
        }
        Ok(Self::new(n, h, w, c, seed))
    }

    pub fn schema(&self) -> Vec<FieldDescriptor> {
        image_schema(self.height, self.width, self.channels)
    }

    pub fn label(&self, index: usize) -> i64 {
        SplitMix64::for_stream(self.seed, index as u64, 0).next_below(self.num_classes as u64) as i64
    }

    pub fn image(&self, index: usize) -> Image {
        let (h, w, c) = (self.height as usize, self.width as usize, self.channels as usize);
        let mut rng = SplitMix64::for_stream(self.seed, index as u64, 1);
        let tiles_x = w.div_ceil(TILE);
        let tiles: Vec<u8> = (0..h.div_ceil(TILE) * tiles_x)
            .map(|_| rng.next_u64() as u8)
            .collect();
        let mut pixels = vec![0u8; h * w * c];
        for y in 0..h {
            for x in 0..w {
                let v = tiles[(y / TILE) * tiles_x + x / TILE];
                pixels[(y * w + x) * c..(y * w + x + 1) * c].fill(v);
            }
        }
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            pixels,
        }
    }
}

impl SampleSource for SyntheticSource {
    fn len(&self) -> usize {
        self.num_samples
    }

    fn sample(&self, index: usize) -> Result<Vec<FieldValue>, Error> {
        if index >= self.num_samples {
            return Err(Error::IndexOutOfRange {
                index: index as u64,
                len: self.num_samples as u64,
            });
        }
        Ok(vec![FieldValue::Int(self.label(index)), FieldValue::Image(self.image(index))])
    }
}

/// `[label: INT_SCALAR, image: IMAGE]`, the schema of image classification sources.
pub fn image_schema(max_height: u16, max_width: u16, channels: u8) -> Vec<FieldDescriptor> {
    vec![
        FieldDescriptor::new("label", FieldType::IntScalar),
        FieldDescriptor::new(
            "image",
            FieldType::Image {
                max_height,
                max_width,
                channels,
            },
        ),
    ]
}

/// Minimal raster file: `height, width, channels` as u32 LE, then raw pixels.
pub const RASTER_HEADER_LEN: usize = 12;

pub fn encode_raster(image: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(RASTER_HEADER_LEN + image.pixels.len());
    out.extend_from_slice(&(image.height as u32).to_le_bytes());
    out.extend_from_slice(&(image.width as u32).to_le_bytes());
    out.extend_from_slice(&(image.channels as u32).to_le_bytes());
    out.extend_from_slice(&image.pixels);
    out
}

pub fn decode_raster(bytes: &[u8]) -> Result<Image, Error> {
    let bad = |m: &str| Error::Source {
        index: 0,
        message: format!("bad raster file: {m}"),
    };
    if bytes.len() < RASTER_HEADER_LEN {
        return Err(bad("truncated header"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let (h, w, c) = (dim(0), dim(1), dim(2));
    if h > u16::MAX as u32 || w > u16::MAX as u32 || c > u8::MAX as u32 {
        return Err(bad("dimensions too large"));
    }
    Image::new(h as u16, w as u16, c as u8, bytes[RASTER_HEADER_LEN..].to_vec()).map_err(|e| bad(&e.to_string()))
}

pub fn read_raster_header(path: &Path) -> Result<(u16, u16, u8), Error> {
    let mut head = [0u8; RASTER_HEADER_LEN];
    fs::File::open(path)?.read_exact(&mut head)?;
    let dim = |i: usize| u32::from_le_bytes(head[4 * i..4 * i + 4].try_into().unwrap());
    let (h, w, c) = (dim(0), dim(1), dim(2));
    if h > u16::MAX as u32 || w > u16::MAX as u32 || c == 0 || c > u8::MAX as u32 {
        return Err(Error::Source {
            index: 0,
            message: format!("{}: bad raster dimensions", path.display()),
        });
    }
    Ok((h as u16, w as u16, c as u8))
}

/// A `label/filename` tree of raster files. Labels are the sorted
/// subdirectory positions; samples are ordered by (label, filename).
#[derive(Debug, Clone)]
pub struct DirectorySource {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    pub files: Vec<(PathBuf, i64)>,
    pub max_height: u16,
    pub max_width: u16,
    pub channels: u8,
}

impl DirectorySource {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, Error> {
        let root = root.as_ref().to_path_buf();
        let mut class_names: Vec<String> = fs::read_dir(&root)?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().map(|t| t.is_dir()).unwrap_or(false))
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        class_names.sort();
        let mut files = Vec::new();
        for (label, class) in class_names.iter().enumerate() {
            let mut names: Vec<PathBuf> = fs::read_dir(root.join(class))?
                .filter_map(|e| e.ok())
                .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
                .map(|e| e.path())
                .collect();
            names.sort();
            files.extend(names.into_iter().map(|p| (p, label as i64)));
        }
        let (mut max_height, mut max_width, mut channels) = (1u16, 1u16, None);
        for (path, _) in &files {
            let (h, w, c) = read_raster_header(path)?;
            max_height = max_height.max(h);
            max_width = max_width.max(w);
            match channels {
                None => channels = Some(c),
                Some(existing) if existing != c => {
                    return Err(Error::Source {
                        index: 0,
                        message: format!("{}: {c} channels, expected {existing}", path.display()),
                    })
                }
                _ => {}
            }
        }
        Ok(Self {
            root,
            class_names,
            files,
            max_height,
            max_width,
            channels: channels.unwrap_or(1),
        })
    }

    pub fn schema(&self) -> Vec<FieldDescriptor> {
        image_schema(self.max_height, self.max_width, self.channels)
    }
}

impl SampleSource for DirectorySource {
    fn len(&self) -> usize {
        self.files.len()
    }

    fn sample(&self, index: usize) -> Result<Vec<FieldValue>, Error> {
        let (path, label) = self.files.get(index).ok_or(Error::IndexOutOfRange {
            index: index as u64,
            len: self.files.len() as u64,
        })?;
        let bytes = fs::read(path)?;
        let image = decode_raster(&bytes).map_err(|e| Error::Source {
            index: index as u64,
            message: format!("{}: {e}", path.display()),
        })?;
        Ok(vec![FieldValue::Int(*label), FieldValue::Image(image)])
    }
}

/// Writes `[label, image]` samples as a `label/NNNNNNNN.raw` tree readable by [`DirectorySource`].
/// Sample order is preserved as long as labels are non-decreasing or the
/// reader sorts the same way: files are named by sample index.
pub fn export_directory(source: &dyn SampleSource, root: &Path) -> Result<(), Error> {
    fs::create_dir_all(root)?;
    for i in 0..source.len() {
        let sample = source.sample(i)?;
        let (Some(label), Some(image)) = (
            sample.first().and_then(FieldValue::as_int),
            sample.get(1).and_then(FieldValue::as_image),
        ) else {
            return Err(Error::Source {
                index: i as u64,
                message: "expected [label, image] sample".into(),
            });
        };
        let dir = root.join(format!("{label:05}"));
        fs::create_dir_all(&dir)?;
        let mut f = fs::File::create(dir.join(format!("{i:08}.raw")))?;
        f.write_all(&encode_raster(image))?;
    }
    Ok(())
}

/// Byte length of a FIXED_ARRAY payload for `dtype` and `dims`.
pub fn array_len(dtype: DType, dims: &[u32]) -> usize {
    dtype.size() * dims.iter().map(|&d| d as usize).product::<usize>()
}
