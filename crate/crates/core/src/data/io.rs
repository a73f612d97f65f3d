//! Disk layout:
//!
//! ```text
//! <root>/<split>/<seq_id>/rgb/000000.png     8-bit RGB
//! <root>/<split>/<seq_id>/depth/000000.png   16-bit gray, millimetres
//! <root>/<split>/annotations.json            optional box labels
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AnnotatedFrame, BBox, DepthImage, Frame, RgbImage, SequenceDataset, Split};
use crate::error::{Error, Result};

pub const ANNOTATIONS_FILE: &str = "annotations.json";

/// One labelled frame as stored in `annotations.json`. Boxes are
/// `[x_min, y_min, width, height]` in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub seq_id: String,
    pub frame_idx: usize,
    pub boxes: Vec<[f64; 4]>,
    pub class_ids: Vec<usize>,
}

impl AnnotationRecord {
    pub fn from_boxes(seq_id: &str, frame_idx: usize, boxes: &[BBox]) -> Self {
        Self {
            seq_id: seq_id.to_string(),
            frame_idx,
            boxes: boxes.iter().map(|b| [b.x_min, b.y_min, b.width(), b.height()]).collect(),
            class_ids: boxes.iter().map(|b| b.class_id).collect(),
        }
    }

    pub fn to_boxes(&self) -> Result<Vec<BBox>> {
        if self.boxes.len() != self.class_ids.len() {
            return Err(Error::Dataset(format!(
                "{}/{}: {} boxes but {} class ids",
                self.seq_id,
                self.frame_idx,
                self.boxes.len(),
                self.class_ids.len()
            )));
        }
        self.boxes
            .iter()
            .zip(&self.class_ids)
            .map(|(b, &c)| {
                let bb = BBox::new(b[0], b[1], b[0] + b[2], b[1] + b[3], c);
                if bb.is_valid() {
                    Ok(bb)
                } else {
                    Err(Error::Dataset(format!("{}/{}: degenerate box {b:?}", self.seq_id, self.frame_idx)))
                }
            })
            .collect()
    }
}

/// Ground truth keyed by `(seq_id, frame_idx)`.
pub type Annotations = BTreeMap<(String, usize), Vec<BBox>>;

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn frame_indices(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for path in read_dir_sorted(dir)? {
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let idx = stem
            .parse::<usize>()
            .map_err(|_| Error::Dataset(format!("{}: frame file name is not an index", path.display())))?;
        out.push((idx, path));
    }
    out.sort_by_key(|(i, _)| *i);
    Ok(out)
}

fn decode_err(path: &Path, reason: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn read_png(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| decode_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| decode_err(path, e))?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let (info, buf) = read_png(path)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(decode_err(path, format!("expected 8-bit rgb, got {:?}", info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data = match info.color_type {
        png::ColorType::Rgb => buf,
        png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        other => return Err(decode_err(path, format!("expected rgb, got {other:?}"))),
    };
    Ok(RgbImage {
        width: w,
        height: h,
        data,
    })
}

pub fn read_depth(path: &Path) -> Result<DepthImage> {
    let (info, buf) = read_png(path)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(decode_err(
            path,
            format!("expected 16-bit grayscale depth, got {:?}/{:?}", info.color_type, info.bit_depth),
        ));
    }
    let data = buf.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect();
    Ok(DepthImage {
        width: info.width as usize,
        height: info.height as usize,
        data,
    })
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| decode_err(path, e))?;
    writer.write_image_data(data).map_err(|e| decode_err(path, e))?;
    writer.finish().map_err(|e| decode_err(path, e))
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    write_png(path, img.width, img.height, png::ColorType::Rgb, png::BitDepth::Eight, &img.data)
}

pub fn write_depth(path: &Path, img: &DepthImage) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().flat_map(|d| d.to_be_bytes()).collect();
    write_png(path, img.width, img.height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)
}

pub fn load_sequences(root: &Path, split: Split) -> Result<SequenceDataset> {
    let split_dir = root.join(split.as_str());
    if !split_dir.is_dir() {
        return Err(Error::Dataset(format!("missing directory {}", split_dir.display())));
    }
    let mut sequences = Vec::new();
    for seq_dir in read_dir_sorted(&split_dir)? {
        if !seq_dir.join("rgb").is_dir() {
            continue;
        }
        let seq_id = seq_dir.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let rgb = frame_indices(&seq_dir.join("rgb"))?;
        let depth = frame_indices(&seq_dir.join("depth"))?;
        if rgb.len() != depth.len() || rgb.iter().zip(&depth).any(|(a, b)| a.0 != b.0) {
            return Err(Error::Dataset(format!(
                "sequence `{seq_id}`: mismatched rgb/depth counts ({} vs {})",
                rgb.len(),
                depth.len()
            )));
        }
        let frames = rgb
            .iter()
            .zip(&depth)
            .map(|((idx, rp), (_, dp))| {
                let frame = Frame::new(read_rgb(rp)?, read_depth(dp)?, seq_id.clone(), *idx);
                frame.map_err(|e| Error::Dataset(format!("{}: {e}", rp.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        if !frames.is_empty() {
            sequences.push(frames);
        }
    }
    SequenceDataset::new(sequences, split)
}

pub fn load_annotations(root: &Path, split: Split) -> Result<Annotations> {
    let path = root.join(split.as_str()).join(ANNOTATIONS_FILE);
    read_annotations_file(&path)
}

pub fn read_annotations_file(path: &Path) -> Result<Annotations> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records: Vec<AnnotationRecord> = serde_json::from_str(&text)?;
    let mut out = Annotations::new();
    for r in &records {
        out.insert((r.seq_id.clone(), r.frame_idx), r.to_boxes()?);
    }
    Ok(out)
}

/// Frames joined with their labels. Frames without a record carry no boxes.
pub fn load_annotated(root: &Path, split: Split) -> Result<Vec<AnnotatedFrame>> {
    let dataset = load_sequences(root, split)?;
    let mut ann = load_annotations(root, split)?;
    Ok(dataset
        .sequences
        .into_iter()
        .flatten()
        .map(|frame| {
            let boxes = ann.remove(&(frame.seq_id.clone(), frame.frame_idx)).unwrap_or_default();
            AnnotatedFrame { frame, boxes }
        })
        .collect())
}

/// Writes a dataset (and optionally per-frame boxes, indexed like
/// `dataset.sequences`) under `<root>/<split>/`.
pub fn write_split(root: &Path, dataset: &SequenceDataset, boxes: Option<&[Vec<Vec<BBox>>]>) -> Result<()> {
    let split_dir = root.join(dataset.split.as_str());
    let mut records = Vec::new();
    for (si, seq) in dataset.sequences.iter().enumerate() {
        let seq_id = &seq[0].seq_id;
        let rgb_dir = split_dir.join(seq_id).join("rgb");
        let depth_dir = split_dir.join(seq_id).join("depth");
        for d in [&rgb_dir, &depth_dir] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        for (fi, frame) in seq.iter().enumerate() {
            let name = format!("{:06}.png", frame.frame_idx);
            write_rgb(&rgb_dir.join(&name), &frame.rgb)?;
            write_depth(&depth_dir.join(&name), &frame.depth)?;
            if let Some(b) = boxes {
                records.push(AnnotationRecord::from_boxes(seq_id, frame.frame_idx, &b[si][fi]));
            }
        }
    }
    if boxes.is_some() {
        let path = split_dir.join(ANNOTATIONS_FILE);
        let text = serde_json::to_string_pretty(&records)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
