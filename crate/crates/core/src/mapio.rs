//! Flat binary map files and PPM images.
//!
//! A map file starts with one ASCII line of eight space-separated fields,
//! `DSMAP <version> <H> <W> <C> <dtype> <time> <view>\n`, followed by
//! `H·W·C` little-endian values in row-major, channel-last order.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{FeatureMap, SegmentationMap};

pub const MAGIC: &str = "DSMAP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
    U32,
}

impl Dtype {
    fn code(self) -> &'static str {
        match self {
            Dtype::F64 => "f64",
            Dtype::F32 => "f32",
            Dtype::U32 => "u32",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "f64" => Some(Dtype::F64),
            "f32" => Some(Dtype::F32),
            "u32" => Some(Dtype::U32),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 | Dtype::U32 => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapHeader {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub dtype: Dtype,
    pub time: f64,
    pub view: usize,
}

fn header_line(h: &MapHeader) -> String {
    format!(
        "{MAGIC} {VERSION} {} {} {} {} {} {}\n",
        h.height,
        h.width,
        h.channels,
        h.dtype.code(),
        h.time,
        h.view
    )
}

fn parse_header(path: &Path, line: &str) -> Result<MapHeader> {
    let bad = |why: &str| Error::format(path, why.to_string());
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 8 {
        return Err(bad("header must have 8 fields"));
    }
    if fields[0] != MAGIC {
        return Err(bad("bad magic"));
    }
    if fields[1].parse::<u32>().ok() != Some(VERSION) {
        return Err(bad("unsupported version"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad dimension"));
    Ok(MapHeader {
        height: num(fields[2])?,
        width: num(fields[3])?,
        channels: num(fields[4])?,
        dtype: Dtype::parse(fields[5]).ok_or_else(|| bad("unknown dtype"))?,
        time: fields[6].parse().map_err(|_| bad("bad time"))?,
        view: num(fields[7])?,
    })
}

fn encode_map(header: &MapHeader, floats: Option<&[f64]>, ints: Option<&[u32]>) -> Vec<u8> {
    let mut bytes = header_line(header).into_bytes();
    match (header.dtype, floats, ints) {
        (Dtype::F64, Some(v), _) => v.iter().for_each(|x| bytes.extend(x.to_le_bytes())),
        (Dtype::F32, Some(v), _) => v.iter().for_each(|x| bytes.extend((*x as f32).to_le_bytes())),
        (Dtype::U32, _, Some(v)) => v.iter().for_each(|x| bytes.extend(x.to_le_bytes())),
        _ => unreachable!("dtype and payload disagree"),
    }
    bytes
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_map(path: &Path) -> Result<(MapHeader, Vec<u8>)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header = parse_header(path, &line)?;
    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    let want = header.height * header.width * header.channels * header.dtype.width();
    if body.len() != want {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, header implies {want}", body.len()),
        ));
    }
    Ok((header, body))
}

pub fn write_feature_map(path: &Path, map: &FeatureMap, dtype: Dtype, time: f64, view: usize) -> Result<()> {
    if dtype == Dtype::U32 {
        return Err(Error::InvalidConfig("feature maps need a float dtype".into()));
    }
    let header = MapHeader {
        height: map.height,
        width: map.width,
        channels: map.dim,
        dtype,
        time,
        view,
    };
    write_bytes(path, &encode_map(&header, Some(&map.data), None))
}

pub fn read_feature_map(path: &Path) -> Result<(FeatureMap, MapHeader)> {
    let (h, body) = read_map(path)?;
    let data: Vec<f64> = match h.dtype {
        Dtype::F64 => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::U32 => return Err(Error::format(path, "expected a float map")),
    };
    Ok((FeatureMap::from_data(h.width, h.height, h.channels, data)?, h))
}

pub fn write_label_map(path: &Path, seg: &SegmentationMap, time: f64, view: usize) -> Result<()> {
    let header = MapHeader {
        height: seg.height,
        width: seg.width,
        channels: 1,
        dtype: Dtype::U32,
        time,
        view,
    };
    write_bytes(path, &encode_map(&header, None, Some(&seg.labels)))
}

pub fn read_label_map(path: &Path) -> Result<(SegmentationMap, MapHeader)> {
    let (h, body) = read_map(path)?;
    if h.dtype != Dtype::U32 || h.channels != 1 {
        return Err(Error::format(path, "expected a single-channel u32 label map"));
    }
    let labels = body
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((SegmentationMap::new(h.width, h.height, labels)?, h))
}

/// Binary PPM (P6).
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Shape(format!(
            "{} bytes do not fill a {width}x{height} RGB image",
            rgb.len()
        )));
    }
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(rgb);
    write_bytes(path, &bytes)
}

/// Stable, well-separated color per label; label 0 is black.
pub fn label_color(label: u32) -> [u8; 3] {
    if label == 0 {
        return [0, 0, 0];
    }
    // golden-angle hue walk
    let hue = (label as f64 * 0.618_033_988_749_895).fract();
    let sat = 0.65 + 0.35 * ((label / 7) % 2) as f64;
    hsv_to_rgb(hue, sat, 0.95)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let (r, g, b) = match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

pub fn label_rgb(seg: &SegmentationMap) -> Vec<u8> {
    seg.labels.iter().flat_map(|l| label_color(*l)).collect()
}

pub fn write_label_ppm(path: &Path, seg: &SegmentationMap) -> Result<()> {
    write_ppm(path, seg.width, seg.height, &label_rgb(seg))
}
