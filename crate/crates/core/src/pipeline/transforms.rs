use std::fmt;

use super::{Category, ElemType, InputSpec, PipelineError, Shape, TensorRef, TensorSpec, Transform, TransformError, Value};
use crate::codecs::decode_image;
use crate::rng::SplitMix64;

fn tensor_input(name: &str, input: &InputSpec) -> Result<TensorSpec, PipelineError> {
    match input {
        InputSpec::Tensor(t) => Ok(*t),
        InputSpec::Encoded { .. } => Err(PipelineError::SpecMismatch {
            transform: name.to_string(),
            message: "expects a decoded tensor, got an encoded image".into(),
        }),
    }
}

fn tensor_value<'a>(name: &str, input: Value<'a>) -> Result<TensorRef<'a>, TransformError> {
    match input {
        Value::Tensor(t) => Ok(t),
        Value::Encoded(_) => Err(TransformError(format!("{name}: expects a decoded tensor"))),
    }
}

/// Encoded image to `u8` pixels.
#[derive(Debug, Clone, Copy, Default)]
pub struct Decode;

impl Transform for Decode {
    fn name(&self) -> &str {
        "decode"
    }

    fn output_spec(&self, input: &InputSpec) -> Result<TensorSpec, PipelineError> {
        match *input {
            InputSpec::Encoded {
                max_height,
                max_width,
                channels,
            } => Ok(TensorSpec {
                shape: Shape::new(max_height as u32, max_width as u32, channels as u32),
                elem: ElemType::U8,
            }),
            InputSpec::Tensor(_) => Err(PipelineError::SpecMismatch {
                transform: "decode".into(),
                message: "expects an encoded image".into(),
            }),
        }
    }

    fn apply(&self, input: Value<'_>, out: &mut [u8], _rng: &mut SplitMix64) -> Result<Shape, TransformError> {
        let Value::Encoded(blob) = input else {
            return Err(TransformError("decode: expects an encoded image".into()));
        };
        let len = blob.decoded_len();
        if len > out.len() {
            return Err(TransformError(format!(
                "decode: {}x{}x{} image exceeds the planned buffer",
                blob.height, blob.width, blob.channels
            )));
        }
        decode_image(blob, &mut out[..len]).map_err(|e| TransformError(format!("decode: {e}")))?;
        Ok(Shape::new(blob.height as u32, blob.width as u32, blob.channels as u32))
    }
}

/// Random `height x width` window. Inputs smaller than the window are cropped
/// to their own extent along that axis.
#[derive(Debug, Clone, Copy)]
pub struct RandomCrop {
    height: u32,
    width: u32,
}

impl RandomCrop {
    pub fn new(height: u32, width: u32) -> Self {
        assert!(height >= 1 && width >= 1);
        Self { height, width }
    }
}

impl Transform for RandomCrop {
    fn name(&self) -> &str {
        "crop"
    }

    fn output_spec(&self, input: &InputSpec) -> Result<TensorSpec, PipelineError> {
        let t = tensor_input("crop", input)?;
        Ok(TensorSpec {
            shape: Shape::new(
                self.height.min(t.shape.height),
                self.width.min(t.shape.width),
                t.shape.channels,
            ),
            elem: t.elem,
        })
    }

    fn apply(&self, input: Value<'_>, out: &mut [u8], rng: &mut SplitMix64) -> Result<Shape, TransformError> {
        let t = tensor_value("crop", input)?;
        let (ih, iw) = (t.shape.height, t.shape.width);
        let (oh, ow) = (self.height.min(ih), self.width.min(iw));
        let y0 = rng.next_below((ih - oh + 1) as u64) as usize;
        let x0 = rng.next_below((iw - ow + 1) as u64) as usize;
        let px = t.shape.channels as usize * t.elem.size();
        let (src_row, dst_row) = (iw as usize * px, ow as usize * px);
        for y in 0..oh as usize {
            let src = (y0 + y) * src_row + x0 * px;
            out[y * dst_row..(y + 1) * dst_row].copy_from_slice(&t.bytes[src..src + dst_row]);
        }
        Ok(Shape::new(oh, ow, t.shape.channels))
    }
}

/// Horizontal mirror with probability `p`.
#[derive(Debug, Clone, Copy)]
pub struct RandomFlip {
    p: f64,
}

impl RandomFlip {
    pub fn new(p: f64) -> Self {
        Self { p }
    }
}

impl Transform for RandomFlip {
    fn name(&self) -> &str {
        "flip"
    }

    fn output_spec(&self, input: &InputSpec) -> Result<TensorSpec, PipelineError> {
        tensor_input("flip", input)
    }

    fn apply(&self, input: Value<'_>, out: &mut [u8], rng: &mut SplitMix64) -> Result<Shape, TransformError> {
        let t = tensor_value("flip", input)?;
        let len = t.bytes.len();
        let flip = rng.next_f64() < self.p;
        if !flip {
            out[..len].copy_from_slice(t.bytes);
            return Ok(t.shape);
        }
        let px = t.shape.channels as usize * t.elem.size();
        let w = t.shape.width as usize;
        let row = w * px;
        let h = t.shape.height as usize;
        let (src, dst) = (&t.bytes[..h * row], &mut out[..h * row]);
        match px {
            1 => mirror_rows::<1>(src, dst, row),
            3 => mirror_rows::<3>(src, dst, row),
            4 => mirror_rows::<4>(src, dst, row),
            12 => mirror_rows::<12>(src, dst, row),
            _ => {
                for (src, dst) in src.chunks_exact(row).zip(dst.chunks_exact_mut(row)) {
                    for (s, d) in src.chunks_exact(px).zip(dst.chunks_exact_mut(px).rev()) {
                        d.copy_from_slice(s);
                    }
                }
            }
        }
        Ok(t.shape)
    }
}

/// Nearest-neighbor resize to a fixed size.
#[derive(Debug, Clone, Copy)]
pub struct Resize {
    height: u32,
    width: u32,
}

impl Resize {
    pub fn new(height: u32, width: u32) -> Self {
        assert!(height >= 1 && width >= 1);
        Self { height, width }
    }
}

impl Transform for Resize {
    fn name(&self) -> &str {
        "resize"
    }

    fn output_spec(&self, input: &InputSpec) -> Result<TensorSpec, PipelineError> {
        let t = tensor_input("resize", input)?;
        Ok(TensorSpec {
            shape: Shape::new(self.height, self.width, t.shape.channels),
            elem: t.elem,
        })
    }

    fn apply(&self, input: Value<'_>, out: &mut [u8], _rng: &mut SplitMix64) -> Result<Shape, TransformError> {
        let t = tensor_value("resize", input)?;
        let (ih, iw) = (t.shape.height as usize, t.shape.width as usize);
        if ih == 0 || iw == 0 {
            return Err(TransformError("resize: empty input".into()));
        }
        let (oh, ow) = (self.height as usize, self.width as usize);
        let px = t.shape.channels as usize * t.elem.size();
        for y in 0..oh {
            let sy = y * ih / oh;
            for x in 0..ow {
                let sx = x * iw / ow;
                let src = (sy * iw + sx) * px;
                let dst = (y * ow + x) * px;
                out[dst..dst + px].copy_from_slice(&t.bytes[src..src + px]);
            }
        }
        Ok(Shape::new(self.height, self.width, t.shape.channels))
    }
}

/// `(x - mean[c]) / std[c]` as `f32`. A single mean/std pair applies to all channels.
#[derive(Debug, Clone)]
pub struct Normalize {
    mean: Vec<f32>,
    std: Vec<f32>,
}

impl Normalize {
    pub fn new(mean: Vec<f32>, std: Vec<f32>) -> Self {
        assert_eq!(mean.len(), std.len());
        assert!(!mean.is_empty());
        Self { mean, std }
    }
}

impl Transform for Normalize {
    fn name(&self) -> &str {
        "normalize"
    }

    fn output_spec(&self, input: &InputSpec) -> Result<TensorSpec, PipelineError> {
        let t = tensor_input("normalize", input)?;
        if self.mean.len() != 1 && self.mean.len() != t.shape.channels as usize {
            return Err(PipelineError::SpecMismatch {
                transform: "normalize".into(),
                message: format!("{} channel statistics for {} channels", self.mean.len(), t.shape.channels),
            });
        }
        Ok(TensorSpec {
            shape: t.shape,
            elem: ElemType::F32,
        })
    }

    fn apply(&self, input: Value<'_>, out: &mut [u8], _rng: &mut SplitMix64) -> Result<Shape, TransformError> {
        let t = tensor_value("normalize", input)?;
        let n = t.shape.elements();
        let out = &mut out[..4 * n];
        if self.mean.len() == 1 {
            let (m, s) = (self.mean[0], self.std[0]);
            normalize_px(t.elem, &t.bytes[..n * t.elem.size()], out, 1, |_, v| (v - m) / s);
        } else {
            let c = t.shape.channels as usize;
            let px_bytes = &t.bytes[..n * t.elem.size()];
            normalize_px(t.elem, px_bytes, out, c, |k, v| (v - self.mean[k]) / self.std[k]);
        }
        Ok(t.shape)
    }
}

/// Widens to `f32` without changing values.
#[derive(Debug, Clone, Copy, Default)]
pub struct CastF32;

impl Transform for CastF32 {
    fn name(&self) -> &str {
        "cast"
    }

    fn output_spec(&self, input: &InputSpec) -> Result<TensorSpec, PipelineError> {
        let t = tensor_input("cast", input)?;
        Ok(TensorSpec {
            shape: t.shape,
            elem: ElemType::F32,
        })
    }

    fn apply(&self, input: Value<'_>, out: &mut [u8], _rng: &mut SplitMix64) -> Result<Shape, TransformError> {
        let t = tensor_value("cast", input)?;
        for (i, dst) in out.chunks_exact_mut(4).take(t.shape.elements()).enumerate() {
            dst.copy_from_slice(&t.get_f32(i).to_le_bytes());
        }
        Ok(t.shape)
    }
}

type SpecFn = dyn Fn(&TensorSpec) -> Result<TensorSpec, PipelineError> + Send + Sync;
type ApplyFn = dyn Fn(TensorRef<'_>, &mut [u8], &mut SplitMix64) -> Result<Shape, TransformError> + Send + Sync;

/// User callback. Runs on the consuming thread, one sample at a time.
pub struct OpaqueFn {
    name: String,
    spec: Box<SpecFn>,
    apply: Box<ApplyFn>,
}

impl OpaqueFn {
    pub fn new(
        name: impl Into<String>,
        spec: impl Fn(&TensorSpec) -> Result<TensorSpec, PipelineError> + Send + Sync + 'static,
        apply: impl Fn(TensorRef<'_>, &mut [u8], &mut SplitMix64) -> Result<Shape, TransformError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            spec: Box::new(spec),
            apply: Box::new(apply),
        }
    }

    /// Elementwise map over `f32` values, shape preserved. Input of any element type.
    pub fn map_f32(name: impl Into<String>, f: impl Fn(f32) -> f32 + Send + Sync + 'static) -> Self {
        Self::new(
            name,
            |t| {
                Ok(TensorSpec {
                    shape: t.shape,
                    elem: ElemType::F32,
                })
            },
            move |t, out, _| {
                for (i, dst) in out.chunks_exact_mut(4).take(t.shape.elements()).enumerate() {
                    dst.copy_from_slice(&f(t.get_f32(i)).to_le_bytes());
                }
                Ok(t.shape)
            },
        )
    }
}

impl fmt::Debug for OpaqueFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OpaqueFn").field("name", &self.name).finish_non_exhaustive()
    }
}

impl Transform for OpaqueFn {
    fn name(&self) -> &str {
        &self.name
    }

    fn category(&self) -> Category {
        Category::Opaque
    }

    fn output_spec(&self, input: &InputSpec) -> Result<TensorSpec, PipelineError> {
        (self.spec)(&tensor_input(&self.name, input)?)
    }

    fn apply(&self, input: Value<'_>, out: &mut [u8], rng: &mut SplitMix64) -> Result<Shape, TransformError> {
        (self.apply)(tensor_value(&self.name, input)?, out, rng)
    }
}

/// Reverses the order of `P`-byte pixels within each row.
fn mirror_rows<const P: usize>(src: &[u8], dst: &mut [u8], row: usize) {
    for (src, dst) in src.chunks_exact(row).zip(dst.chunks_exact_mut(row)) {
        let (s, _) = src.as_chunks::<P>();
        let (d, _) = dst.as_chunks_mut::<P>();
        for (s, d) in s.iter().zip(d.iter_mut().rev()) {
            *d = *s;
        }
    }
}

/// Applies `f(channel, value)` element-wise; `out` holds little-endian f32.
#[inline(always)]
fn normalize_px(elem: ElemType, src: &[u8], out: &mut [u8], c: usize, f: impl Fn(usize, f32) -> f32) {
    match elem {
        ElemType::U8 => {
            for (s, d) in src.chunks_exact(c).zip(out.chunks_exact_mut(4 * c)) {
                for (k, (&v, d)) in s.iter().zip(d.chunks_exact_mut(4)).enumerate() {
                    d.copy_from_slice(&f(k, v as f32).to_le_bytes());
                }
            }
        }
        ElemType::F32 => {
            for (s, d) in src.chunks_exact(4 * c).zip(out.chunks_exact_mut(4 * c)) {
                for (k, (v, d)) in s.chunks_exact(4).zip(d.chunks_exact_mut(4)).enumerate() {
                    let v = f32::from_le_bytes([v[0], v[1], v[2], v[3]]);
                    d.copy_from_slice(&f(k, v).to_le_bytes());
                }
            }
        }
    }
}
