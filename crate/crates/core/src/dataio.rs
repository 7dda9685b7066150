//! File formats: RECIST annotation CSVs, the binary heatmap container,
//! detections documents, and CT intensity windowing.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::LesionMeta;
use crate::geometry::{
    bbox_from_extremes, extremes_from_recist, pad_bbox, BBox, ExtremePoints, Point2,
    RecistDiameters, DEFAULT_BOX_PAD,
};
use crate::grid::Grid2;
use crate::grouping::{Detection, Source};
use crate::targets::{HeatmapBundle, CHANNEL_NAMES};

/// Largest per-coordinate disagreement tolerated between a row's box and the
/// box re-derived from its measurements.
pub const BOX_CONSISTENCY_TOL: f64 = 1e-3;

pub const COL_FILE_NAME: &str = "File_name";
pub const COL_COORDS: &str = "Measurement_coordinates";
pub const COL_BOX: &str = "Bounding_boxes";
pub const COL_TYPE: &str = "Coarse_lesion_type";
pub const COL_DIAMETERS: &str = "Lesion_diameters_Pixel_";
pub const COL_SPACING: &str = "Spacing_mm_px_";
pub const COL_SPLIT: &str = "Train_Val_Test";

const REQUIRED_COLUMNS: [&str; 7] = [
    COL_FILE_NAME,
    COL_COORDS,
    COL_BOX,
    COL_TYPE,
    COL_DIAMETERS,
    COL_SPACING,
    COL_SPLIT,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn from_code(code: i64) -> Option<Split> {
        match code {
            1 => Some(Split::Train),
            2 => Some(Split::Val),
            3 => Some(Split::Test),
            _ => None,
        }
    }

    pub fn code(self) -> i64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

/// One annotated lesion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecistAnnotation {
    /// `patient_study_series_slice` image key.
    pub file_name: String,
    pub diameters: RecistDiameters,
    /// Box as recorded in the file (already padded).
    pub bbox: BBox,
    /// Coarse type code 1-8, or -1 when unknown.
    pub lesion_type: i32,
    /// (long, short) in pixels.
    pub diameters_px: (f64, f64),
    /// (x, y, z) in mm per pixel / per slice.
    pub spacing: (f64, f64, f64),
    pub split: Split,
}

impl RecistAnnotation {
    pub fn extremes(&self) -> ExtremePoints {
        extremes_from_recist(&self.diameters)
    }

    /// Box re-derived from the measurements with the standard padding.
    pub fn derived_bbox(&self) -> BBox {
        pad_bbox(&bbox_from_extremes(&self.extremes()), DEFAULT_BOX_PAD, None)
    }

    pub fn meta(&self) -> LesionMeta {
        LesionMeta {
            lesion_type: self.lesion_type,
            long_diameter_mm: self.diameters_px.0 * self.spacing.0,
            slice_interval_mm: self.spacing.2,
        }
    }
}

/// A row flagged during parsing.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowIssue {
    /// 1-based line number in the CSV file.
    pub line: u64,
    pub file_name: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ParsedAnnotations {
    pub records: Vec<RecistAnnotation>,
    /// Rows dropped because their key is on the exclusion list.
    pub excluded: usize,
    /// Rows whose recorded box disagrees with the measurements.
    pub inconsistent: Vec<RowIssue>,
    /// Rows whose measurements have zero width or height.
    pub degenerate: Vec<RowIssue>,
}

impl ParsedAnnotations {
    /// Records grouped by image key, keys sorted.
    pub fn by_image(&self) -> BTreeMap<&str, Vec<&RecistAnnotation>> {
        let mut map: BTreeMap<&str, Vec<&RecistAnnotation>> = BTreeMap::new();
        for r in &self.records {
            map.entry(r.file_name.as_str()).or_default().push(r);
        }
        map
    }
}

/// Reads an exclusion list: one image key per line, `#` starts a comment.
pub fn read_exclusion_list(path: &Path) -> Result<HashSet<String>> {
    let text = fs::read_to_string(path)?;
    Ok(parse_exclusion_list(&text))
}

pub fn parse_exclusion_list(text: &str) -> HashSet<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect()
}

fn parse_reals(field: &str, expected: usize, line: u64, column: &str) -> Result<Vec<f64>> {
    let values: std::result::Result<Vec<f64>, _> =
        field.split(',').map(|s| s.trim().parse::<f64>()).collect();
    let bad = |message: String| Error::MalformedRow {
        row: line as usize,
        message,
    };
    let values = values.map_err(|e| bad(format!("{column}: {e} in {field:?}")))?;
    if values.len() != expected {
        return Err(bad(format!(
            "{column}: expected {expected} numbers, found {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(bad(format!("{column}: non-finite value in {field:?}")));
    }
    Ok(values)
}

fn parse_int(field: &str, line: u64, column: &str) -> Result<i64> {
    let t = field.trim();
    t.parse::<i64>()
        .or_else(|_| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.fract() == 0.0)
                .map(|v| v as i64)
                .ok_or(())
        })
        .map_err(|_| Error::MalformedRow {
            row: line as usize,
            message: format!("{column}: expected an integer, found {field:?}"),
        })
}

/// Parses annotations from any reader, dropping rows whose key is in `exclude`.
pub fn parse_annotations_from_reader<R: Read>(
    reader: R,
    exclude: &HashSet<String>,
) -> Result<ParsedAnnotations> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut index = BTreeMap::new();
    for name in REQUIRED_COLUMNS {
        let i = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
        index.insert(name, i);
    }

    let mut out = ParsedAnnotations::default();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |name: &str| rec.get(index[name]).unwrap_or("");

        let file_name = field(COL_FILE_NAME).trim().to_string();
        if file_name.is_empty() {
            return Err(Error::MalformedRow {
                row: line as usize,
                message: format!("{COL_FILE_NAME} is empty"),
            });
        }
        if exclude.contains(&file_name) {
            out.excluded += 1;
            continue;
        }
        let c = parse_reals(field(COL_COORDS), 8, line, COL_COORDS)?;
        let b = parse_reals(field(COL_BOX), 4, line, COL_BOX)?;
        let d = parse_reals(field(COL_DIAMETERS), 2, line, COL_DIAMETERS)?;
        let s = parse_reals(field(COL_SPACING), 3, line, COL_SPACING)?;
        let lesion_type = parse_int(field(COL_TYPE), line, COL_TYPE)?;
        let split_code = parse_int(field(COL_SPLIT), line, COL_SPLIT)?;
        let split = Split::from_code(split_code).ok_or_else(|| Error::MalformedRow {
            row: line as usize,
            message: format!("{COL_SPLIT}: expected 1, 2 or 3, found {split_code}"),
        })?;

        let diameters = RecistDiameters::from_segments(
            (Point2::new(c[0], c[1]), Point2::new(c[2], c[3])),
            (Point2::new(c[4], c[5]), Point2::new(c[6], c[7])),
        );
        let record = RecistAnnotation {
            file_name,
            diameters,
            bbox: BBox::new(b[0], b[1], b[2], b[3]),
            lesion_type: if (1..=8).contains(&lesion_type) {
                lesion_type as i32
            } else {
                -1
            },
            diameters_px: (d[0].max(d[1]), d[0].min(d[1])),
            spacing: (s[0], s[1], s[2]),
            split,
        };

        if record.extremes().is_degenerate() {
            out.degenerate.push(RowIssue {
                line,
                file_name: record.file_name.clone(),
                detail: "measurements have zero width or height".into(),
            });
        }
        let derived = record.derived_bbox();
        let diff = derived
            .to_array()
            .iter()
            .zip(record.bbox.to_array())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if diff > BOX_CONSISTENCY_TOL {
            out.inconsistent.push(RowIssue {
                line,
                file_name: record.file_name.clone(),
                detail: format!("recorded box differs from measurements by {diff} px"),
            });
        }
        out.records.push(record);
    }
    Ok(out)
}

/// Parses an annotation CSV, optionally applying an exclusion list file.
pub fn parse_annotations(
    csv_path: &Path,
    exclusion_list: Option<&Path>,
) -> Result<ParsedAnnotations> {
    let exclude = match exclusion_list {
        Some(p) => read_exclusion_list(p)?,
        None => HashSet::new(),
    };
    let file = fs::File::open(csv_path)?;
    parse_annotations_from_reader(file, &exclude)
}

fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Writes annotations in the same CSV schema [`parse_annotations`] reads.
pub fn write_annotations<W: Write>(writer: W, records: &[RecistAnnotation]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(REQUIRED_COLUMNS)?;
    for r in records {
        let d = &r.diameters;
        w.write_record([
            r.file_name.clone(),
            join(&[
                d.long_a.x,
                d.long_a.y,
                d.long_b.x,
                d.long_b.y,
                d.short_a.x,
                d.short_a.y,
                d.short_b.x,
                d.short_b.y,
            ]),
            join(&r.bbox.to_array()),
            r.lesion_type.to_string(),
            join(&[r.diameters_px.0, r.diameters_px.1]),
            join(&[r.spacing.0, r.spacing.1, r.spacing.2]),
            r.split.code().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Heatmap container

pub const HEATMAP_MAGIC: &str = "RKHM1";
pub const HEATMAP_EXTENSION: &str = "rkhm";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatmapHeader {
    pub height: usize,
    pub width: usize,
    pub stride: u32,
    pub input_width: u32,
    pub input_height: u32,
    pub channel_names: Vec<String>,
    pub payload_bytes: usize,
}

impl HeatmapHeader {
    fn expected_payload(&self) -> usize {
        CHANNEL_NAMES.len() * self.height * self.width * 4
    }
}

/// Serialises a bundle: magic line, one-line JSON header, then 13 planes of
/// little-endian `f32`, row-major, in channel order.
pub fn encode_heatmaps(bundle: &HeatmapBundle) -> Result<Vec<u8>> {
    bundle.validate()?;
    let header = HeatmapHeader {
        height: bundle.rows(),
        width: bundle.cols(),
        stride: bundle.stride,
        input_width: bundle.input_size.0,
        input_height: bundle.input_size.1,
        channel_names: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
        payload_bytes: CHANNEL_NAMES.len() * bundle.rows() * bundle.cols() * 4,
    };
    let header_json = serde_json::to_string(&header).map_err(|e| Error::Header(e.to_string()))?;
    let mut out = Vec::with_capacity(header_json.len() + header.payload_bytes + 16);
    out.extend_from_slice(HEATMAP_MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(header_json.as_bytes());
    out.push(b'\n');
    for plane in bundle.planes() {
        for v in plane.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_heatmaps(bytes: &[u8]) -> Result<HeatmapBundle> {
    let magic = HEATMAP_MAGIC.as_bytes();
    if bytes.len() < magic.len() + 1
        || &bytes[..magic.len()] != magic
        || bytes[magic.len()] != b'\n'
    {
        return Err(Error::BadMagic {
            expected: HEATMAP_MAGIC,
        });
    }
    let rest = &bytes[magic.len() + 1..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Header("header line is not terminated".into()))?;
    let header: HeatmapHeader =
        serde_json::from_slice(&rest[..nl]).map_err(|e| Error::Header(e.to_string()))?;
    if header.channel_names != CHANNEL_NAMES {
        return Err(Error::Header(format!(
            "unexpected channel names {:?}",
            header.channel_names
        )));
    }
    if header.stride == 0 {
        return Err(Error::Header("stride must be >= 1".into()));
    }
    if header.payload_bytes != header.expected_payload() {
        return Err(Error::SizeMismatch(format!(
            "header declares {} payload bytes but {}x{}x13 planes need {}",
            header.payload_bytes,
            header.height,
            header.width,
            header.expected_payload()
        )));
    }
    let payload = &rest[nl + 1..];
    if payload.len() < header.payload_bytes {
        return Err(Error::TruncatedPayload {
            expected: header.payload_bytes,
            found: payload.len(),
        });
    }
    if payload.len() > header.payload_bytes {
        return Err(Error::SizeMismatch(format!(
            "{} trailing bytes after payload",
            payload.len() - header.payload_bytes
        )));
    }
    let cells = header.height * header.width;
    let mut planes = payload.chunks_exact(cells * 4).map(|chunk| {
        let data = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Grid2::from_vec(header.height, header.width, data)
    });
    let mut next = || -> Result<Grid2<f32>> {
        match planes.next() {
            Some(p) => p,
            // zero-sized grids produce no chunks
            None => Ok(Grid2::zeros(header.height, header.width)),
        }
    };
    let keypoints = [next()?, next()?, next()?, next()?, next()?];
    let offsets = [
        next()?,
        next()?,
        next()?,
        next()?,
        next()?,
        next()?,
        next()?,
        next()?,
    ];
    Ok(HeatmapBundle {
        keypoints,
        offsets,
        stride: header.stride,
        input_size: (header.input_width, header.input_height),
    })
}

pub fn write_heatmaps(path: &Path, bundle: &HeatmapBundle) -> Result<()> {
    fs::write(path, encode_heatmaps(bundle)?)?;
    Ok(())
}

pub fn read_heatmaps(path: &Path) -> Result<HeatmapBundle> {
    decode_heatmaps(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Detections document

pub const DETECTIONS_FORMAT: &str = "recist-detections/1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExtremesRecord {
    top: [f64; 2],
    left: [f64; 2],
    bottom: [f64; 2],
    right: [f64; 2],
    center: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionRecord {
    extremes: ExtremesRecord,
    score: f64,
    bbox: [f64; 4],
    source: Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionsDocument {
    format: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
    images: BTreeMap<String, Vec<DetectionRecord>>,
}

/// Detections for a set of images, keyed by image key.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionsFile {
    /// Free-form record of the configuration that produced the detections.
    pub provenance: Option<serde_json::Value>,
    pub images: BTreeMap<String, Vec<Detection>>,
}

fn arr(p: &Point2) -> [f64; 2] {
    [p.x, p.y]
}

fn pt(a: [f64; 2]) -> Point2 {
    Point2::new(a[0], a[1])
}

impl From<&Detection> for DetectionRecord {
    fn from(d: &Detection) -> Self {
        let e = &d.extremes;
        DetectionRecord {
            extremes: ExtremesRecord {
                top: arr(&e.top),
                left: arr(&e.left),
                bottom: arr(&e.bottom),
                right: arr(&e.right),
                center: arr(&e.center),
            },
            score: d.score,
            bbox: d.bbox.to_array(),
            source: d.source,
        }
    }
}

impl From<&DetectionRecord> for Detection {
    fn from(r: &DetectionRecord) -> Self {
        let e = &r.extremes;
        Detection {
            extremes: ExtremePoints {
                top: pt(e.top),
                left: pt(e.left),
                bottom: pt(e.bottom),
                right: pt(e.right),
                center: pt(e.center),
            },
            score: r.score,
            bbox: BBox::new(r.bbox[0], r.bbox[1], r.bbox[2], r.bbox[3]),
            source: r.source,
        }
    }
}

/// Pretty-printed JSON; floats use the shortest representation that reads
/// back to the same bits.
pub fn encode_detections(file: &DetectionsFile) -> Result<Vec<u8>> {
    let doc = DetectionsDocument {
        format: DETECTIONS_FORMAT.to_string(),
        provenance: file.provenance.clone(),
        images: file
            .images
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().map(DetectionRecord::from).collect()))
            .collect(),
    };
    for (key, dets) in &doc.images {
        for (i, d) in dets.iter().enumerate() {
            let e = &d.extremes;
            let finite = [e.top, e.left, e.bottom, e.right, e.center]
                .iter()
                .flatten()
                .chain(d.bbox.iter())
                .chain(std::iter::once(&d.score))
                .all(|v| v.is_finite());
            if !finite {
                return Err(Error::Schema {
                    path: format!("images.{key}[{i}]"),
                    message: "non-finite value".into(),
                });
            }
        }
    }
    let mut out = serde_json::to_vec_pretty(&doc).map_err(|e| Error::Schema {
        path: ".".into(),
        message: e.to_string(),
    })?;
    out.push(b'\n');
    Ok(out)
}

pub fn decode_detections(bytes: &[u8]) -> Result<DetectionsFile> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    let doc: DetectionsDocument =
        serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
    if doc.format != DETECTIONS_FORMAT {
        return Err(Error::Schema {
            path: "format".into(),
            message: format!("expected {DETECTIONS_FORMAT:?}, found {:?}", doc.format),
        });
    }
    Ok(DetectionsFile {
        provenance: doc.provenance,
        images: doc
            .images
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().map(Detection::from).collect()))
            .collect(),
    })
}

pub fn write_detections(path: &Path, file: &DetectionsFile) -> Result<()> {
    fs::write(path, encode_detections(file)?)?;
    Ok(())
}

pub fn read_detections(path: &Path) -> Result<DetectionsFile> {
    decode_detections(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// CT windowing

/// A display window in Hounsfield units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowPreset {
    pub name: String,
    pub level: f64,
    pub width: f64,
}

/// Three multi-view windows: HU ranges [-1024, 2050], [-1350, 150] and
/// [-160, 240].
pub fn default_window_presets() -> Vec<WindowPreset> {
    [
        ("wide", 513.0, 3074.0),
        ("lung", -600.0, 1500.0),
        ("soft-tissue", 40.0, 400.0),
    ]
    .into_iter()
    .map(|(name, level, width)| WindowPreset {
        name: name.to_string(),
        level,
        width,
    })
    .collect()
}

/// `v -> clamp((v - (level - width/2)) / width, 0, 1)` over a flat buffer.
pub fn window_values(values: &[f32], level: f64, width: f64) -> Result<Vec<f32>> {
    if !(width > 0.0) || !level.is_finite() || !width.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "window width must be positive and finite, got level {level} width {width}"
        )));
    }
    let lo = level - width / 2.0;
    Ok(values
        .iter()
        .map(|&v| ((f64::from(v) - lo) / width).clamp(0.0, 1.0) as f32)
        .collect())
}

pub fn apply_ct_window(values: &Grid2<f32>, level: f64, width: f64) -> Result<Grid2<f32>> {
    let out = window_values(values.as_slice(), level, width)?;
    Grid2::from_vec(values.rows(), values.cols(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::{render_targets, TargetConfig};

    const HEADER: &str = "File_name,Patient_index,Measurement_coordinates,Bounding_boxes,Lesion_diameters_Pixel_,Coarse_lesion_type,Spacing_mm_px_,Train_Val_Test\n";

    #[test]
    fn parses_row_and_reassigns_long_axis() {
        let csv = format!(
            "{HEADER}000001_01_01_109.png,1,\"12, 31, 47, 29, 30, 10, 30, 50\",\"7, 5, 52, 55\",\"40, 35.06\",3,\"0.8, 0.8, 5\",3\n"
        );
        let parsed = parse_annotations_from_reader(csv.as_bytes(), &HashSet::new()).unwrap();
        let r = &parsed.records[0];
        assert_eq!(r.diameters.long_a, Point2::new(30., 10.));
        assert_eq!(r.diameters.long_b, Point2::new(30., 50.));
        assert_eq!(r.diameters.short_a, Point2::new(12., 31.));
        assert_eq!(r.split, Split::Test);
        assert_eq!(r.lesion_type, 3);
        assert!(parsed.inconsistent.is_empty());
        assert_eq!(r.meta().long_diameter_mm, 32.0);
        assert_eq!(r.meta().slice_interval_mm, 5.0);
    }

    #[test]
    fn keeps_order_when_first_pair_is_longer() {
        let csv = format!(
            "{HEADER}a.png,1,\"0, 20, 60, 20, 30, 5, 30, 35\",\"-5, 0, 65, 40\",\"60, 30\",-1,\"1, 1, 1\",1\n"
        );
        let parsed = parse_annotations_from_reader(csv.as_bytes(), &HashSet::new()).unwrap();
        let r = &parsed.records[0];
        assert_eq!(r.diameters.long_a, Point2::new(0., 20.));
        assert_eq!(r.diameters.short_b, Point2::new(30., 35.));
        assert_eq!(r.split, Split::Train);
        assert_eq!(r.lesion_type, -1);
    }

    #[test]
    fn inconsistent_and_degenerate_rows_reported() {
        let csv = format!(
            "{HEADER}a.png,1,\"0, 20, 60, 20, 30, 5, 30, 35\",\"0, 0, 65, 40\",\"60, 30\",1,\"1, 1, 1\",2\nb.png,1,\"0, 5, 10, 5, 3, 5, 6, 5\",\"-5, 0, 15, 10\",\"10, 3\",1,\"1, 1, 1\",2\n"
        );
        let parsed = parse_annotations_from_reader(csv.as_bytes(), &HashSet::new()).unwrap();
        assert_eq!(parsed.records.len(), 2);
        assert_eq!(parsed.inconsistent.len(), 1);
        assert_eq!(parsed.inconsistent[0].file_name, "a.png");
        assert_eq!(parsed.inconsistent[0].line, 2);
        assert_eq!(parsed.degenerate.len(), 1);
        assert_eq!(parsed.degenerate[0].file_name, "b.png");
    }

    #[test]
    fn malformed_rows_name_their_line() {
        let csv = format!(
            "{HEADER}a.png,1,\"0, 20, 60, 20, 30, 5, 30, 35\",\"-5, 0, 65, 40\",\"60, 30\",1,\"1, 1, 1\",2\nb.png,1,\"0, 20, 60\",\"-5, 0, 65, 40\",\"60, 30\",1,\"1, 1, 1\",2\n"
        );
        let err = parse_annotations_from_reader(csv.as_bytes(), &HashSet::new()).unwrap_err();
        assert!(matches!(err, Error::MalformedRow { row: 3, .. }), "{err}");

        let bad_split = format!(
            "{HEADER}a.png,1,\"0, 20, 60, 20, 30, 5, 30, 35\",\"-5, 0, 65, 40\",\"60, 30\",1,\"1, 1, 1\",7\n"
        );
        assert!(parse_annotations_from_reader(bad_split.as_bytes(), &HashSet::new()).is_err());

        let missing = "File_name,Bounding_boxes\na.png,\"1,2,3,4\"\n";
        let err = parse_annotations_from_reader(missing.as_bytes(), &HashSet::new()).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(ref c) if c == COL_COORDS));
    }

    #[test]
    fn exclusion_list_parsing() {
        let set = parse_exclusion_list("# noisy\na.png\n\n  b.png  # trailing\n");
        assert_eq!(set.len(), 2);
        assert!(set.contains("a.png") && set.contains("b.png"));
    }

    fn sample_bundle() -> HeatmapBundle {
        let e = ExtremePoints::new(
            Point2::new(30., 10.),
            Point2::new(12., 31.),
            Point2::new(30., 50.),
            Point2::new(47., 29.),
        );
        render_targets(&[e], 16, 16, 4, &TargetConfig::default())
            .unwrap()
            .bundle
    }

    #[test]
    fn heatmap_layout() {
        let bytes = encode_heatmaps(&sample_bundle()).unwrap();
        assert!(bytes.starts_with(b"RKHM1\n{\"height\":16,\"width\":16,\"stride\":4,"));
        let nl = bytes.iter().skip(6).position(|&b| b == b'\n').unwrap() + 6;
        assert_eq!(bytes.len() - nl - 1, 13 * 16 * 16 * 4);
    }

    #[test]
    fn heatmap_errors() {
        let bytes = encode_heatmaps(&sample_bundle()).unwrap();
        assert!(matches!(
            decode_heatmaps(b"RKHM2\n{}\n"),
            Err(Error::BadMagic { .. })
        ));
        let truncated = &bytes[..bytes.len() - 10];
        assert!(matches!(
            decode_heatmaps(truncated),
            Err(Error::TruncatedPayload { .. })
        ));
        let mut trailing = bytes.clone();
        trailing.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(
            decode_heatmaps(&trailing),
            Err(Error::SizeMismatch(_))
        ));
        let text = String::from_utf8_lossy(&bytes[..120]).to_string();
        let tampered_header = text.replacen("\"height\":16", "\"height\":15", 1);
        let mut tampered = tampered_header.into_bytes();
        tampered.extend_from_slice(&bytes[120..]);
        assert!(matches!(
            decode_heatmaps(&tampered),
            Err(Error::SizeMismatch(_))
        ));
    }

    #[test]
    fn detections_round_trip_and_errors() {
        let e = ExtremePoints::new(
            Point2::new(30.1, 10.0),
            Point2::new(12.0, 31.0),
            Point2::new(30.0, 50.0),
            Point2::new(47.0, 29.3),
        );
        let mut file = DetectionsFile::default();
        file.images.insert(
            "b.png".into(),
            vec![
                Detection::new(e, 4.0, Source::Original),
                Detection::new(e, 0.1 + 0.2, Source::Flipped),
            ],
        );
        file.images.insert("a.png".into(), vec![]);
        let bytes = encode_detections(&file).unwrap();
        let back = decode_detections(&bytes).unwrap();
        assert_eq!(back, file);
        assert_eq!(
            back.images["b.png"][1].score.to_bits(),
            (0.1f64 + 0.2).to_bits()
        );
        assert!(String::from_utf8_lossy(&bytes).contains("\"score\": 4.0"));

        let empty =
            decode_detections(&encode_detections(&DetectionsFile::default()).unwrap()).unwrap();
        assert!(empty.images.is_empty());

        let bad = br#"{"format":"recist-detections/1","images":{"a":[{"extremes":{},"score":1,"bbox":[0,0,1,1],"source":"original"}]}}"#;
        match decode_detections(bad) {
            Err(Error::Schema { path, .. }) => {
                assert!(path.starts_with("images.a[0].extremes"), "{path}")
            }
            other => panic!("unexpected {other:?}"),
        }
        let wrong_format = br#"{"format":"other","images":{}}"#;
        assert!(matches!(
            decode_detections(wrong_format),
            Err(Error::Schema { .. })
        ));
    }

    #[test]
    fn ct_window_examples() {
        let g = Grid2::from_vec(1, 3, vec![-150.0, 250.0, 50.0]).unwrap();
        let w = apply_ct_window(&g, 50.0, 400.0).unwrap();
        assert_eq!(w.as_slice(), &[0.0, 1.0, 0.5]);
        assert!(apply_ct_window(&g, 50.0, 0.0).is_err());
        assert!(apply_ct_window(&g, 50.0, -3.0).is_err());
        assert_eq!(default_window_presets().len(), 3);
    }

    #[test]
    fn annotations_write_then_parse() {
        let csv = format!(
            "{HEADER}000001_01_01_109.png,1,\"12, 31, 47, 29, 30, 10, 30, 50\",\"7, 5, 52, 55\",\"40, 35.06\",3,\"0.8, 0.8, 5\",3\n"
        );
        let parsed = parse_annotations_from_reader(csv.as_bytes(), &HashSet::new()).unwrap();
        let mut buf = Vec::new();
        write_annotations(&mut buf, &parsed.records).unwrap();
        let again = parse_annotations_from_reader(buf.as_slice(), &HashSet::new()).unwrap();
        assert_eq!(again.records, parsed.records);
    }
}
