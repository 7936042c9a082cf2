//! Per-sample transform pipeline.
//!
//! Transforms are sorted into two categories. `Fusible` ones are plain
//! kernels that write into a pre-planned output region and take no locks;
//! consecutive fusible transforms form one stage that a worker runs
//! back-to-back for a sample. `Opaque` ones are arbitrary callbacks run on
//! the consumer side, once per sample, after the slot has been filled.
//!
//! All intermediate and output buffers for every ring slot live in one arena
//! sized by [`PipelinePlan`] before the first batch.

mod plan;
mod ring;
mod transforms;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::codecs::BlobView;
use crate::rng::{derive_seed, SplitMix64};

pub use plan::{plan, PipelinePlan, SlotLayout, Stage};
pub use ring::{
    BatchRing, ConsumeLease, FillTicket, PositionLease, RingError, RingState, RingStats, SampleFailure, SlotState,
};
pub use transforms::{CastF32, Decode, Normalize, OpaqueFn, RandomCrop, RandomFlip, Resize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    Fusible,
    Opaque,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ElemType {
    U8,
    F32,
}

impl ElemType {
    pub const fn size(self) -> usize {
        match self {
            ElemType::U8 => 1,
            ElemType::F32 => 4,
        }
    }
}

/// `height x width x channels`, channels interleaved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub height: u32,
    pub width: u32,
    pub channels: u32,
}

impl Shape {
    pub const fn new(height: u32, width: u32, channels: u32) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn elements(&self) -> usize {
        self.height as usize * self.width as usize * self.channels as usize
    }

    pub(crate) fn pack(&self) -> u64 {
        (self.height as u64) << 42 | (self.width as u64) << 21 | self.channels as u64
    }

    pub(crate) fn unpack(v: u64) -> Self {
        const MASK: u64 = (1 << 21) - 1;
        Self::new((v >> 42) as u32, ((v >> 21) & MASK) as u32, (v & MASK) as u32)
    }
}

/// Largest output a transform can produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorSpec {
    pub shape: Shape,
    pub elem: ElemType,
}

impl TensorSpec {
    pub fn byte_len(&self) -> usize {
        self.shape.elements() * self.elem.size()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InputSpec {
    Encoded {
        max_height: u16,
        max_width: u16,
        channels: u8,
    },
    Tensor(TensorSpec),
}

#[derive(Debug, Clone, Copy)]
pub struct TensorRef<'a> {
    pub shape: Shape,
    pub elem: ElemType,
    pub bytes: &'a [u8],
}

impl TensorRef<'_> {
    /// Element `i` as f32 regardless of storage type.
    #[inline]
    pub fn get_f32(&self, i: usize) -> f32 {
        match self.elem {
            ElemType::U8 => self.bytes[i] as f32,
            ElemType::F32 => f32::from_le_bytes(self.bytes[4 * i..4 * i + 4].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Value<'a> {
    Encoded(BlobView<'a>),
    Tensor(TensorRef<'a>),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct TransformError(pub String);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PipelineError {
    #[error("pipeline has no transforms")]
    Empty,
    #[error("transform {transform:?} rejects its input: {message}")]
    SpecMismatch { transform: String, message: String },
    #[error("cannot parse pipeline spec: {0}")]
    Parse(String),
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
}

pub trait Transform: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    fn category(&self) -> Category {
        Category::Fusible
    }

    /// Largest output for a given input. Must be pure.
    fn output_spec(&self, input: &InputSpec) -> Result<TensorSpec, PipelineError>;

    /// Writes the output into the front of `out` (which is exactly
    /// `output_spec(..).byte_len()` bytes) and returns its actual shape.
    fn apply(&self, input: Value<'_>, out: &mut [u8], rng: &mut SplitMix64) -> Result<Shape, TransformError>;
}

/// Identifies a sample for randomness. Each sample owns one stream that its
/// transforms draw from in pipeline order, so results do not depend on which
/// thread runs which stage, and transforms that draw nothing leave the rest unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleContext {
    pub seed: u64,
    pub epoch: u64,
    pub index: u64,
}

impl SampleContext {
    pub fn rng(&self) -> SplitMix64 {
        SplitMix64::for_stream(derive_seed(self.seed, self.epoch, self.index), 0x7066, 0)
    }
}

/// Parses `name:args|name:args`, e.g. `decode|crop:32,32|flip:0.5|normalize:127.5,64`.
///
/// Known names: `decode`, `crop:H,W`, `flip:P`, `resize:H,W`, `normalize:MEAN,STD`
/// (or `C` means followed by `C` stds), `cast`.
pub fn parse_pipeline(spec: &str) -> Result<Vec<Arc<dyn Transform>>, PipelineError> {
    let spec = spec.trim();
    if spec.is_empty() {
        return Err(PipelineError::Empty);
    }
    spec.split('|').map(|item| parse_transform(item.trim())).collect()
}

fn parse_transform(item: &str) -> Result<Arc<dyn Transform>, PipelineError> {
    let (name, args) = item.split_once(':').unwrap_or((item, ""));
    let nums = || -> Result<Vec<f64>, PipelineError> {
        if args.is_empty() {
            return Ok(Vec::new());
        }
        args.split(',')
            .map(|a| a.trim().parse::<f64>().map_err(|_| PipelineError::Parse(format!("{item:?}: bad number {a:?}"))))
            .collect()
    };
    let arity = |n: usize, v: &[f64]| {
        if v.len() == n {
            Ok(())
        } else {
            Err(PipelineError::Parse(format!("{item:?}: expected {n} arguments")))
        }
    };
    let dim = |v: f64| -> Result<u32, PipelineError> {
        if v >= 1.0 && v.fract() == 0.0 && v <= u16::MAX as f64 {
            Ok(v as u32)
        } else {
            Err(PipelineError::Parse(format!("{item:?}: bad dimension {v}")))
        }
    };
    Ok(match name {
        "decode" => {
            arity(0, &nums()?)?;
            Arc::new(Decode)
        }
        "cast" => {
            arity(0, &nums()?)?;
            Arc::new(CastF32)
        }
        "crop" => {
            let v = nums()?;
            arity(2, &v)?;
            Arc::new(RandomCrop::new(dim(v[0])?, dim(v[1])?))
        }
        "resize" => {
            let v = nums()?;
            arity(2, &v)?;
            Arc::new(Resize::new(dim(v[0])?, dim(v[1])?))
        }
        "flip" => {
            let v = nums()?;
            arity(1, &v)?;
            if !(0.0..=1.0).contains(&v[0]) {
                return Err(PipelineError::Parse(format!("{item:?}: probability must be in [0, 1]")));
            }
            Arc::new(RandomFlip::new(v[0]))
        }
        "normalize" => {
            let v = nums()?;
            if v.len() < 2 || v.len() % 2 != 0 {
                return Err(PipelineError::Parse(format!("{item:?}: expected MEAN,STD or C means then C stds")));
            }
            let half = v.len() / 2;
            let mean: Vec<f32> = v[..half].iter().map(|&x| x as f32).collect();
            let std: Vec<f32> = v[half..].iter().map(|&x| x as f32).collect();
            if std.contains(&0.0) {
                return Err(PipelineError::Parse(format!("{item:?}: zero std")));
            }
            Arc::new(Normalize::new(mean, std))
        }
        other => return Err(PipelineError::Parse(format!("unknown transform {other:?}"))),
    })
}

/// Straight-line reference: runs each transform into a freshly allocated
/// buffer. Used to check fused execution.
pub fn run_unfused(
    transforms: &[Arc<dyn Transform>],
    input_spec: &InputSpec,
    input: Value<'_>,
    ctx: SampleContext,
) -> Result<(Shape, ElemType, Vec<u8>), TransformError> {
    let mut spec = *input_spec;
    let mut current: Option<(Shape, ElemType, Vec<u8>)> = None;
    let mut rng = ctx.rng();
    for transform in transforms {
        let out_spec = transform
            .output_spec(&spec)
            .map_err(|e| TransformError(e.to_string()))?;
        let mut out = vec![0u8; out_spec.byte_len()];
        let value = match &current {
            None => input,
            Some((shape, elem, bytes)) => Value::Tensor(TensorRef {
                shape: *shape,
                elem: *elem,
                bytes: &bytes[..shape.elements() * elem.size()],
            }),
        };
        let shape = transform.apply(value, &mut out, &mut rng)?;
        out.truncate(shape.elements() * out_spec.elem.size());
        current = Some((shape, out_spec.elem, out));
        spec = InputSpec::Tensor(out_spec);
    }
    current.ok_or_else(|| TransformError("empty pipeline".into()))
}
