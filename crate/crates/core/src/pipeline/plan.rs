use std::ops::Range;
use std::sync::Arc;

use super::{Category, InputSpec, PipelineError, TensorSpec, Transform};

const REGION_ALIGN: usize = 64;

/// Maximal run of transforms sharing a category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stage {
    pub category: Category,
    pub transforms: Range<usize>,
}

/// Byte layout of one ring slot. Transform `t` owns
/// `offsets[t]..offsets[t] + lens[t] * batch_size`, one `lens[t]` stride per
/// batch position, so each transform's outputs for a batch are contiguous.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotLayout {
    pub batch_size: usize,
    pub slot_count: usize,
    pub offsets: Vec<usize>,
    pub lens: Vec<usize>,
    pub slot_bytes: usize,
}

impl SlotLayout {
    pub fn arena_bytes(&self) -> usize {
        self.slot_bytes * self.slot_count
    }

    pub fn region(&self, slot: usize, transform: usize, position: usize) -> Range<usize> {
        debug_assert!(slot < self.slot_count && position < self.batch_size);
        let start = slot * self.slot_bytes + self.offsets[transform] + position * self.lens[transform];
        start..start + self.lens[transform]
    }
}

#[derive(Debug, Clone)]
pub struct PipelinePlan {
    pub transforms: Vec<Arc<dyn Transform>>,
    pub input: InputSpec,
    /// Output spec of each transform.
    pub specs: Vec<TensorSpec>,
    pub stages: Vec<Stage>,
    /// Transforms `..fused_end` run on workers; the rest on the consumer.
    pub fused_end: usize,
    pub layout: SlotLayout,
}

impl PipelinePlan {
    pub fn output_spec(&self) -> TensorSpec {
        *self.specs.last().expect("plan has transforms")
    }

    pub fn arena_bytes(&self) -> usize {
        self.layout.arena_bytes()
    }
}

/// Resolves output specs, groups stages and sizes the arena. The first
/// transform must be fusible: workers hand it the stored sample directly.
pub fn plan(
    transforms: Vec<Arc<dyn Transform>>,
    input: InputSpec,
    batch_size: usize,
    slot_count: usize,
) -> Result<PipelinePlan, PipelineError> {
    if transforms.is_empty() {
        return Err(PipelineError::Empty);
    }
    if batch_size == 0 || slot_count == 0 {
        return Err(PipelineError::Config("batch_size and slot_count must be >= 1".into()));
    }
    if transforms[0].category() == Category::Opaque {
        return Err(PipelineError::Config(format!(
            "first transform {:?} must be fusible",
            transforms[0].name()
        )));
    }

    let mut specs = Vec::with_capacity(transforms.len());
    let mut current = input;
    for t in &transforms {
        let spec = t.output_spec(&current)?;
        if spec.byte_len() == 0 {
            return Err(PipelineError::SpecMismatch {
                transform: t.name().to_string(),
                message: "empty output".into(),
            });
        }
        specs.push(spec);
        current = InputSpec::Tensor(spec);
    }

    let mut stages: Vec<Stage> = Vec::new();
    for (i, t) in transforms.iter().enumerate() {
        match stages.last_mut() {
            Some(s) if s.category == t.category() => s.transforms.end = i + 1,
            _ => stages.push(Stage {
                category: t.category(),
                transforms: i..i + 1,
            }),
        }
    }
    let fused_end = stages[0].transforms.end;

    let mut offsets = Vec::with_capacity(specs.len());
    let mut lens = Vec::with_capacity(specs.len());
    let mut at = 0usize;
    for spec in &specs {
        offsets.push(at);
        lens.push(spec.byte_len());
        at = (at + spec.byte_len() * batch_size).next_multiple_of(REGION_ALIGN);
    }

    Ok(PipelinePlan {
        transforms,
        input,
        specs,
        stages,
        fused_end,
        layout: SlotLayout {
            batch_size,
            slot_count,
            offsets,
            lens,
            slot_bytes: at,
        },
    })
}
