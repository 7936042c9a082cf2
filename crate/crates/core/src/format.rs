//! On-disk layout of the container file.
//!
//! A file is four contiguous sections:
//!
//! ```text
//! +-----------+------------------+-------------------------+------------------+
//! | Header    | Data Table       | Heap (whole pages)      | Allocation Table |
//! | 56 + 124n | rows * row_width | page-aligned start      | 8 + 16 * regions |
//! +-----------+------------------+-------------------------+------------------+
//! ```
//!
//! Every integer is little-endian. Rows are fixed width so row `i` lives at
//! `data_table_offset + i * row_width`.

use std::fmt;

use crate::codecs::CodecId;

pub const MAGIC: [u8; 8] = *b"FASTDS01";
pub const FORMAT_VERSION: u32 = 1;
/// Fixed header prefix: magic, version, counts, offsets and 2 pad bytes.
pub const HEADER_PREFIX_LEN: usize = 56;
pub const DESCRIPTOR_LEN: usize = 124;
pub const FIELD_NAME_LEN: usize = 64;
pub const MAX_FIELD_NAME_BYTES: usize = 63;
pub const KIND_PARAMS_LEN: usize = 48;
pub const MIN_PAGE_SIZE: u64 = 64 * 1024;
pub const DEFAULT_PAGE_SIZE: u64 = 8 * 1024 * 1024;
pub const REGION_ENTRY_LEN: usize = 16;
pub const MAX_ARRAY_DIMS: usize = 4;
pub const FILE_EXTENSION: &str = "bbox";

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("corrupt row: {0}")]
    CorruptRow(String),
    #[error("invalid allocation table: {0}")]
    InvalidAllocationTable(String),
}

fn invalid(msg: impl Into<String>) -> FormatError {
    FormatError::InvalidHeader(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FieldKind {
    IntScalar = 0,
    FloatScalar = 1,
    FixedArray = 2,
    VarBytes = 3,
    Image = 4,
}

impl FieldKind {
    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0 => Self::IntScalar,
            1 => Self::FloatScalar,
            2 => Self::FixedArray,
            3 => Self::VarBytes,
            4 => Self::Image,
            _ => return None,
        })
    }

    pub const fn cell_width(self) -> u32 {
        match self {
            Self::IntScalar | Self::FloatScalar | Self::FixedArray => 8,
            Self::VarBytes => 16,
            Self::Image => 24,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum DType {
    U8 = 0,
    I64 = 1,
    F32 = 2,
    F64 = 3,
}

impl DType {
    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0 => Self::U8,
            1 => Self::I64,
            2 => Self::F32,
            3 => Self::F64,
            _ => return None,
        })
    }

    pub const fn size(self) -> usize {
        match self {
            Self::U8 => 1,
            Self::F32 => 4,
            Self::I64 | Self::F64 => 8,
        }
    }
}

/// Shape of a FIXED_ARRAY field: up to four dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ArrayShape {
    ndims: u8,
    dims: [u32; MAX_ARRAY_DIMS],
}

impl ArrayShape {
    pub fn new(dims: &[u32]) -> Result<Self, FormatError> {
        if dims.is_empty() || dims.len() > MAX_ARRAY_DIMS {
            return Err(invalid(format!("array rank {} not in 1..=4", dims.len())));
        }
        if dims.contains(&0) {
            return Err(invalid("array dimension of 0"));
        }
        let mut out = [0u32; MAX_ARRAY_DIMS];
        out[..dims.len()].copy_from_slice(dims);
        Ok(Self {
            ndims: dims.len() as u8,
            dims: out,
        })
    }

    pub fn dims(&self) -> &[u32] {
        &self.dims[..self.ndims as usize]
    }

    pub fn num_elements(&self) -> u64 {
        self.dims().iter().map(|&d| d as u64).product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FieldType {
    IntScalar,
    FloatScalar,
    FixedArray { dtype: DType, shape: ArrayShape },
    VarBytes,
    Image {
        max_height: u16,
        max_width: u16,
        channels: u8,
    },
}

impl FieldType {
    pub fn kind(&self) -> FieldKind {
        match self {
            Self::IntScalar => FieldKind::IntScalar,
            Self::FloatScalar => FieldKind::FloatScalar,
            Self::FixedArray { .. } => FieldKind::FixedArray,
            Self::VarBytes => FieldKind::VarBytes,
            Self::Image { .. } => FieldKind::Image,
        }
    }

    /// Byte length of a FIXED_ARRAY payload.
    pub fn array_byte_len(&self) -> Option<u64> {
        match self {
            Self::FixedArray { dtype, shape } => Some(dtype.size() as u64 * shape.num_elements()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FieldDescriptor {
    pub name: String,
    pub ty: FieldType,
}

impl FieldDescriptor {
    pub fn new(name: impl Into<String>, ty: FieldType) -> Self {
        Self {
            name: name.into(),
            ty,
        }
    }

    pub fn row_cell_width(&self) -> u32 {
        self.ty.kind().cell_width()
    }

    fn validate(&self) -> Result<(), FormatError> {
        if self.name.is_empty() || self.name.len() > MAX_FIELD_NAME_BYTES {
            return Err(invalid(format!(
                "field name {:?} must be 1..=63 bytes",
                self.name
            )));
        }
        if self.name.as_bytes().contains(&0) {
            return Err(invalid("field name contains NUL"));
        }
        match self.ty {
            FieldType::Image {
                max_height,
                max_width,
                channels,
            } if max_height == 0 || max_width == 0 || channels == 0 => {
                Err(invalid(format!("image field {:?} has a zero dimension", self.name)))
            }
            _ => Ok(()),
        }
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        let start = out.len();
        let mut name = [0u8; FIELD_NAME_LEN];
        name[..self.name.len()].copy_from_slice(self.name.as_bytes());
        out.extend_from_slice(&name);
        out.push(self.ty.kind() as u8);
        let mut params = [0u8; KIND_PARAMS_LEN];
        match self.ty {
            FieldType::FixedArray { dtype, shape } => {
                params[0] = dtype as u8;
                params[1] = shape.ndims;
                for (i, d) in shape.dims.iter().enumerate() {
                    params[2 + 4 * i..6 + 4 * i].copy_from_slice(&d.to_le_bytes());
                }
            }
            FieldType::Image {
                max_height,
                max_width,
                channels,
            } => {
                params[0..2].copy_from_slice(&max_height.to_le_bytes());
                params[2..4].copy_from_slice(&max_width.to_le_bytes());
                params[4] = channels;
            }
            _ => {}
        }
        out.extend_from_slice(&params);
        out.extend_from_slice(&self.row_cell_width().to_le_bytes());
        out.extend_from_slice(&[0u8; 7]);
        debug_assert_eq!(out.len() - start, DESCRIPTOR_LEN);
    }

    fn decode(b: &[u8]) -> Result<Self, FormatError> {
        debug_assert_eq!(b.len(), DESCRIPTOR_LEN);
        let name_bytes = &b[..FIELD_NAME_LEN];
        let end = name_bytes.iter().position(|&c| c == 0).unwrap_or(FIELD_NAME_LEN);
        if name_bytes[end..].iter().any(|&c| c != 0) {
            return Err(invalid("field name padding is not zero"));
        }
        let name = std::str::from_utf8(&name_bytes[..end])
            .map_err(|_| invalid("field name is not UTF-8"))?
            .to_owned();
        let kind = FieldKind::from_byte(b[64]).ok_or_else(|| invalid(format!("unknown field kind {}", b[64])))?;
        let p = &b[65..65 + KIND_PARAMS_LEN];
        let ty = match kind {
            FieldKind::IntScalar => FieldType::IntScalar,
            FieldKind::FloatScalar => FieldType::FloatScalar,
            FieldKind::VarBytes => FieldType::VarBytes,
            FieldKind::FixedArray => {
                let dtype = DType::from_byte(p[0]).ok_or_else(|| invalid(format!("unknown dtype {}", p[0])))?;
                let ndims = p[1] as usize;
                if ndims == 0 || ndims > MAX_ARRAY_DIMS {
                    return Err(invalid(format!("array rank {ndims} not in 1..=4")));
                }
                let dims: Vec<u32> = (0..ndims).map(|i| le_u32(&p[2 + 4 * i..])).collect();
                if (ndims..MAX_ARRAY_DIMS).any(|i| le_u32(&p[2 + 4 * i..]) != 0) {
                    return Err(invalid("unused array dims are not zero"));
                }
                FieldType::FixedArray {
                    dtype,
                    shape: ArrayShape::new(&dims)?,
                }
            }
            FieldKind::Image => FieldType::Image {
                max_height: le_u16(&p[0..]),
                max_width: le_u16(&p[2..]),
                channels: p[4],
            },
        };
        let width = le_u32(&b[113..]);
        if width != kind.cell_width() {
            return Err(invalid(format!(
                "row_cell_width {width} does not match kind {kind:?}"
            )));
        }
        let d = Self { name, ty };
        d.validate()?;
        Ok(d)
    }
}

/// File-level metadata. Magic and version are implied.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetHeader {
    pub num_samples: u64,
    pub page_size: u64,
    pub data_table_offset: u64,
    pub heap_offset: u64,
    pub alloc_table_offset: u64,
    pub fields: Vec<FieldDescriptor>,
}

pub fn header_len(num_fields: usize) -> u64 {
    (HEADER_PREFIX_LEN + DESCRIPTOR_LEN * num_fields) as u64
}

pub fn row_width(fields: &[FieldDescriptor]) -> u64 {
    fields.iter().map(|f| f.row_cell_width() as u64).sum()
}

pub fn align_up(value: u64, align: u64) -> u64 {
    value.div_ceil(align) * align
}

pub fn validate_page_size(page_size: u64) -> Result<(), FormatError> {
    if !page_size.is_power_of_two() || page_size < MIN_PAGE_SIZE {
        return Err(invalid(format!(
            "page size {page_size} must be a power of two >= {MIN_PAGE_SIZE}"
        )));
    }
    Ok(())
}

impl DatasetHeader {
    /// Lays out an empty heap for `num_samples` rows of `fields`.
    pub fn layout(num_samples: u64, page_size: u64, fields: Vec<FieldDescriptor>) -> Self {
        let data_table_offset = header_len(fields.len());
        let table_end = data_table_offset + num_samples * row_width(&fields);
        // heap_offset must be strictly past the data table start.
        let heap_offset = align_up(table_end.max(data_table_offset + 1), page_size);
        Self {
            num_samples,
            page_size,
            data_table_offset,
            heap_offset,
            alloc_table_offset: heap_offset,
            fields,
        }
    }

    pub fn row_width(&self) -> u64 {
        row_width(&self.fields)
    }

    pub fn num_pages(&self) -> u64 {
        (self.alloc_table_offset - self.heap_offset) / self.page_size
    }

    pub fn byte_len(&self) -> u64 {
        header_len(self.fields.len())
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    /// Page index of a heap offset.
    pub fn page_of(&self, offset: u64) -> u64 {
        (offset - self.heap_offset) / self.page_size
    }

    pub fn row_offset(&self, index: u64) -> u64 {
        self.data_table_offset + index * self.row_width()
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        if self.fields.is_empty() {
            return Err(invalid("num_fields must be >= 1"));
        }
        if self.fields.len() > u16::MAX as usize {
            return Err(invalid("too many fields"));
        }
        for (i, f) in self.fields.iter().enumerate() {
            f.validate()?;
            if self.fields[..i].iter().any(|g| g.name == f.name) {
                return Err(invalid(format!("duplicate field name {:?}", f.name)));
            }
        }
        validate_page_size(self.page_size)?;
        if self.data_table_offset != self.byte_len() {
            return Err(invalid("data_table_offset must equal the header length"));
        }
        if !self.heap_offset.is_multiple_of(self.page_size) {
            return Err(invalid("heap_offset is not page aligned"));
        }
        let table_end = self
            .num_samples
            .checked_mul(self.row_width())
            .and_then(|b| b.checked_add(self.data_table_offset))
            .ok_or_else(|| invalid("data table size overflows"))?;
        if !(self.data_table_offset < self.heap_offset && table_end <= self.heap_offset) {
            return Err(invalid("data table overlaps the heap"));
        }
        if self.heap_offset > self.alloc_table_offset {
            return Err(invalid("heap_offset is past alloc_table_offset"));
        }
        if !(self.alloc_table_offset - self.heap_offset).is_multiple_of(self.page_size) {
            return Err(invalid("heap is not a whole number of pages"));
        }
        Ok(())
    }
}

pub fn encode_header(header: &DatasetHeader) -> Result<Vec<u8>, FormatError> {
    header.validate()?;
    let mut out = Vec::with_capacity(header.byte_len() as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&header.num_samples.to_le_bytes());
    out.extend_from_slice(&(header.fields.len() as u16).to_le_bytes());
    out.extend_from_slice(&header.page_size.to_le_bytes());
    out.extend_from_slice(&header.data_table_offset.to_le_bytes());
    out.extend_from_slice(&header.heap_offset.to_le_bytes());
    out.extend_from_slice(&header.alloc_table_offset.to_le_bytes());
    out.extend_from_slice(&[0u8; 2]);
    for f in &header.fields {
        f.encode_into(&mut out);
    }
    Ok(out)
}

/// Parses a header from the start of a file. Trailing bytes are ignored.
pub fn decode_header(bytes: &[u8]) -> Result<DatasetHeader, FormatError> {
    if bytes.len() < HEADER_PREFIX_LEN {
        if bytes.len() >= 8 && bytes[..8] != MAGIC {
            return Err(FormatError::BadMagic);
        }
        return Err(invalid(format!("truncated header ({} bytes)", bytes.len())));
    }
    if bytes[..8] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = le_u32(&bytes[8..]);
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let num_samples = le_u64(&bytes[12..]);
    let num_fields = le_u16(&bytes[20..]) as usize;
    let page_size = le_u64(&bytes[22..]);
    let data_table_offset = le_u64(&bytes[30..]);
    let heap_offset = le_u64(&bytes[38..]);
    let alloc_table_offset = le_u64(&bytes[46..]);
    let need = header_len(num_fields) as usize;
    if bytes.len() < need {
        return Err(invalid(format!(
            "truncated field descriptors: need {need} bytes, have {}",
            bytes.len()
        )));
    }
    let fields = bytes[HEADER_PREFIX_LEN..need]
        .chunks_exact(DESCRIPTOR_LEN)
        .map(FieldDescriptor::decode)
        .collect::<Result<Vec<_>, _>>()?;
    let header = DatasetHeader {
        num_samples,
        page_size,
        data_table_offset,
        heap_offset,
        alloc_table_offset,
        fields,
    };
    header.validate()?;
    Ok(header)
}

/// IMAGE row cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ImageCell {
    pub offset: u64,
    pub len: u64,
    pub height: u16,
    pub width: u16,
    pub channels: u8,
    pub codec: CodecId,
}

/// One fixed-width Data Table cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    /// Heap offset; the length follows from the field's dtype and dims.
    Array { offset: u64 },
    Bytes { offset: u64, len: u64 },
    Image(ImageCell),
}

impl Cell {
    /// Heap region referenced by this cell, if any. Empty byte strings reference nothing.
    pub fn heap_ref(&self, ty: &FieldType) -> Option<(u64, u64)> {
        match *self {
            Cell::Array { offset } => ty.array_byte_len().map(|len| (offset, len)),
            Cell::Bytes { len: 0, .. } => None,
            Cell::Bytes { offset, len } => Some((offset, len)),
            Cell::Image(c) if c.len == 0 => None,
            Cell::Image(c) => Some((c.offset, c.len)),
            Cell::Int(_) | Cell::Float(_) => None,
        }
    }

    fn kind(&self) -> FieldKind {
        match self {
            Cell::Int(_) => FieldKind::IntScalar,
            Cell::Float(_) => FieldKind::FloatScalar,
            Cell::Array { .. } => FieldKind::FixedArray,
            Cell::Bytes { .. } => FieldKind::VarBytes,
            Cell::Image(_) => FieldKind::Image,
        }
    }
}

/// Appends the encoding of `cells` to `out`.
pub fn encode_row_into(
    schema: &[FieldDescriptor],
    cells: &[Cell],
    out: &mut Vec<u8>,
) -> Result<(), FormatError> {
    if schema.len() != cells.len() {
        return Err(FormatError::SchemaMismatch(format!(
            "{} cells for {} fields",
            cells.len(),
            schema.len()
        )));
    }
    for (field, cell) in schema.iter().zip(cells) {
        if field.ty.kind() != cell.kind() {
            return Err(FormatError::SchemaMismatch(format!(
                "field {:?} is {:?}, got {:?} cell",
                field.name,
                field.ty.kind(),
                cell.kind()
            )));
        }
        match *cell {
            Cell::Int(v) => out.extend_from_slice(&v.to_le_bytes()),
            Cell::Float(v) => out.extend_from_slice(&v.to_le_bytes()),
            Cell::Array { offset } => out.extend_from_slice(&offset.to_le_bytes()),
            Cell::Bytes { offset, len } => {
                out.extend_from_slice(&offset.to_le_bytes());
                out.extend_from_slice(&len.to_le_bytes());
            }
            Cell::Image(c) => {
                out.extend_from_slice(&c.offset.to_le_bytes());
                out.extend_from_slice(&c.len.to_le_bytes());
                out.extend_from_slice(&c.height.to_le_bytes());
                out.extend_from_slice(&c.width.to_le_bytes());
                out.push(c.channels);
                out.push(c.codec as u8);
                out.extend_from_slice(&[0u8; 2]);
            }
        }
    }
    Ok(())
}

pub fn encode_row(schema: &[FieldDescriptor], cells: &[Cell]) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::with_capacity(row_width(schema) as usize);
    encode_row_into(schema, cells, &mut out)?;
    Ok(out)
}

/// Decodes a single cell starting at `bytes[0]`. Allocation free.
pub fn decode_cell(field: &FieldDescriptor, bytes: &[u8]) -> Result<Cell, FormatError> {
    let width = field.row_cell_width() as usize;
    if bytes.len() < width {
        return Err(FormatError::CorruptRow("cell truncated".into()));
    }
    Ok(match field.ty {
        FieldType::IntScalar => Cell::Int(le_u64(bytes) as i64),
        FieldType::FloatScalar => Cell::Float(f64::from_bits(le_u64(bytes))),
        FieldType::FixedArray { .. } => Cell::Array {
            offset: le_u64(bytes),
        },
        FieldType::VarBytes => Cell::Bytes {
            offset: le_u64(bytes),
            len: le_u64(&bytes[8..]),
        },
        FieldType::Image { .. } => {
            let codec = CodecId::from_byte(bytes[21])
                .ok_or_else(|| FormatError::CorruptRow(format!("unknown codec {}", bytes[21])))?;
            Cell::Image(ImageCell {
                offset: le_u64(bytes),
                len: le_u64(&bytes[8..]),
                height: le_u16(&bytes[16..]),
                width: le_u16(&bytes[18..]),
                channels: bytes[20],
                codec,
            })
        }
    })
}

pub fn decode_row(schema: &[FieldDescriptor], bytes: &[u8]) -> Result<Vec<Cell>, FormatError> {
    if bytes.len() as u64 != row_width(schema) {
        return Err(FormatError::SchemaMismatch(format!(
            "row is {} bytes, schema needs {}",
            bytes.len(),
            row_width(schema)
        )));
    }
    let mut at = 0;
    schema
        .iter()
        .map(|f| {
            let cell = decode_cell(f, &bytes[at..])?;
            at += f.row_cell_width() as usize;
            Ok(cell)
        })
        .collect()
}

/// Byte offset of each field's cell within a row.
pub fn cell_offsets(schema: &[FieldDescriptor]) -> Vec<usize> {
    let mut at = 0;
    schema
        .iter()
        .map(|f| {
            let o = at;
            at += f.row_cell_width() as usize;
            o
        })
        .collect()
}

/// Allocated heap region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Region {
    pub offset: u64,
    pub len: u64,
}

impl Region {
    pub fn end(&self) -> u64 {
        self.offset + self.len
    }

    pub fn contains(&self, offset: u64, len: u64) -> bool {
        offset >= self.offset && offset + len <= self.end()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AllocationTable {
    pub regions: Vec<Region>,
}

impl AllocationTable {
    pub fn byte_len(&self) -> u64 {
        8 + (REGION_ENTRY_LEN * self.regions.len()) as u64
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len() as usize);
        out.extend_from_slice(&(self.regions.len() as u64).to_le_bytes());
        for r in &self.regions {
            out.extend_from_slice(&r.offset.to_le_bytes());
            out.extend_from_slice(&r.len.to_le_bytes());
        }
        out
    }

    /// Parses a table that must occupy exactly `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() < 8 {
            return Err(FormatError::InvalidAllocationTable("truncated count".into()));
        }
        let count = le_u64(bytes);
        let body = &bytes[8..];
        if (body.len() as u64) != count.saturating_mul(REGION_ENTRY_LEN as u64) {
            return Err(FormatError::InvalidAllocationTable(format!(
                "{count} regions declared but {} bytes follow",
                body.len()
            )));
        }
        let regions = body
            .chunks_exact(REGION_ENTRY_LEN)
            .map(|c| Region {
                offset: le_u64(c),
                len: le_u64(&c[8..]),
            })
            .collect();
        Ok(Self { regions })
    }

    /// Index of the region containing `[offset, offset + len)`, by binary search.
    pub fn find(&self, offset: u64, len: u64) -> Option<usize> {
        let i = self.regions.partition_point(|r| r.offset <= offset);
        let i = i.checked_sub(1)?;
        self.regions[i].contains(offset, len).then_some(i)
    }

    pub fn allocated_bytes(&self) -> u64 {
        self.regions.iter().map(|r| r.len).sum()
    }

    /// Page ids covered by a region.
    pub fn pages_of(header: &DatasetHeader, offset: u64, len: u64) -> std::ops::RangeInclusive<u64> {
        let first = header.page_of(offset);
        let last = header.page_of(offset + len.max(1) - 1);
        first..=last
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ViolationKind {
    Header,
    AllocationTable,
    RegionOutOfHeap,
    UnsortedRegions,
    OverlappingRegions,
    PageSpan,
    DanglingHeapReference,
    UnallocatedHeapReference,
    InvalidRow,
}

impl ViolationKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::Header => "invalid header",
            Self::AllocationTable => "invalid allocation table",
            Self::RegionOutOfHeap => "region outside heap",
            Self::UnsortedRegions => "unsorted regions",
            Self::OverlappingRegions => "overlapping regions",
            Self::PageSpan => "region crosses page boundary",
            Self::DanglingHeapReference => "dangling heap reference",
            Self::UnallocatedHeapReference => "unallocated heap reference",
            Self::InvalidRow => "invalid row",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind.label(), self.detail)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }

    fn push(&mut self, kind: ViolationKind, detail: impl Into<String>) {
        self.violations.push(Violation {
            kind,
            detail: detail.into(),
        });
    }
}

/// Checks the region list against the heap bounds and page rules.
pub fn validate_regions(header: &DatasetHeader, table: &AllocationTable, report: &mut ValidationReport) {
    let page = header.page_size;
    for (i, r) in table.regions.iter().enumerate() {
        if r.len == 0 || r.offset < header.heap_offset || r.end() > header.alloc_table_offset {
            report.push(
                ViolationKind::RegionOutOfHeap,
                format!("region {i} [{}, {}) outside heap", r.offset, r.end()),
            );
            continue;
        }
        let rel = r.offset - header.heap_offset;
        if r.len > page {
            if !rel.is_multiple_of(page) {
                report.push(
                    ViolationKind::PageSpan,
                    format!("oversize region {i} at {} is not page aligned", r.offset),
                );
            }
        } else if rel / page != (rel + r.len - 1) / page {
            report.push(
                ViolationKind::PageSpan,
                format!("region {i} at {} crosses a page boundary", r.offset),
            );
        }
        if i > 0 {
            let prev = table.regions[i - 1];
            if prev.offset > r.offset {
                report.push(ViolationKind::UnsortedRegions, format!("region {i} precedes region {}", i - 1));
            } else if prev.end() > r.offset {
                report.push(
                    ViolationKind::OverlappingRegions,
                    format!("regions {} and {i} overlap", i - 1),
                );
            }
        }
    }
}

/// Validates a complete file image.
pub fn validate_bytes(bytes: &[u8]) -> ValidationReport {
    let mut report = ValidationReport::default();
    let header = match decode_header(bytes) {
        Ok(h) => h,
        Err(e) => {
            report.push(ViolationKind::Header, e.to_string());
            return report;
        }
    };
    let alloc_start = header.alloc_table_offset as usize;
    if bytes.len() < alloc_start {
        report.push(
            ViolationKind::Header,
            format!("file is {} bytes, alloc table starts at {alloc_start}", bytes.len()),
        );
        return report;
    }
    let table = match AllocationTable::decode(&bytes[alloc_start..]) {
        Ok(t) => t,
        Err(e) => {
            report.push(ViolationKind::AllocationTable, e.to_string());
            return report;
        }
    };
    validate_regions(&header, &table, &mut report);
    let width = header.row_width() as usize;
    let start = header.data_table_offset as usize;
    for i in 0..header.num_samples as usize {
        let row = &bytes[start + i * width..start + (i + 1) * width];
        let cells = match decode_row(&header.fields, row) {
            Ok(c) => c,
            Err(e) => {
                report.push(ViolationKind::InvalidRow, format!("row {i}: {e}"));
                continue;
            }
        };
        check_row_refs(&header, &table, i, &cells, &mut report);
    }
    report
}

/// Heap-reference and image-dimension checks for one decoded row.
pub fn check_row_refs(
    header: &DatasetHeader,
    table: &AllocationTable,
    row: usize,
    cells: &[Cell],
    report: &mut ValidationReport,
) {
    for (field, cell) in header.fields.iter().zip(cells) {
        if let (Cell::Image(c), FieldType::Image { max_height, max_width, channels }) = (cell, field.ty) {
            if c.height > max_height || c.width > max_width || c.channels != channels {
                report.push(
                    ViolationKind::InvalidRow,
                    format!("row {row} field {:?}: image dims exceed descriptor", field.name),
                );
            }
        }
        let Some((offset, len)) = cell.heap_ref(&field.ty) else {
            continue;
        };
        let end = offset.checked_add(len);
        if offset < header.heap_offset || end.is_none_or(|e| e > header.alloc_table_offset) {
            report.push(
                ViolationKind::DanglingHeapReference,
                format!("row {row} field {:?} references [{offset}, +{len})", field.name),
            );
        } else if table.find(offset, len).is_none() {
            report.push(
                ViolationKind::UnallocatedHeapReference,
                format!("row {row} field {:?} references unallocated [{offset}, +{len})", field.name),
            );
        }
    }
}

#[inline]
pub(crate) fn le_u16(b: &[u8]) -> u16 {
    u16::from_le_bytes([b[0], b[1]])
}

#[inline]
pub(crate) fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b[..4].try_into().unwrap())
}

#[inline]
pub(crate) fn le_u64(b: &[u8]) -> u64 {
    u64::from_le_bytes(b[..8].try_into().unwrap())
}
