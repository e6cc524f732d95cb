//! PCD v0.7 reader and writer (`DATA ascii` and `DATA binary`).

use std::fs;
use std::io::Write;
use std::path::Path;

use log::warn;

use super::{is_finite_point, CloudError, PointCloud};
use crate::geom::Point3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PcdEncoding {
    Ascii,
    Binary,
}

/// A loaded cloud plus bookkeeping about what was discarded.
#[derive(Clone, Debug)]
pub struct PcdLoad {
    pub cloud: PointCloud,
    /// Points with a NaN or infinite coordinate.
    pub dropped: usize,
    /// Fields other than x/y/z/rgb(a).
    pub ignored_fields: Vec<String>,
}

#[derive(Clone, Debug)]
struct Field {
    name: String,
    size: usize,
    kind: char,
    count: usize,
}

impl Field {
    /// Packed rgb(a): a u32 stored either as such or bit-cast into an f32.
    fn is_color(&self) -> bool {
        matches!(self.name.as_str(), "rgb" | "rgba") && self.size == 4
    }
}

struct Header {
    fields: Vec<Field>,
    points: usize,
    encoding: PcdEncoding,
}

pub fn load_pcd(path: impl AsRef<Path>) -> Result<PcdLoad, CloudError> {
    let bytes = fs::read(path.as_ref())?;
    read_pcd(&bytes)
}

pub fn read_pcd(bytes: &[u8]) -> Result<PcdLoad, CloudError> {
    let (header, data_offset) = parse_header(bytes)?;
    let find = |name: &str| header.fields.iter().position(|f| f.name == name);
    let (ix, iy, iz) = match (find("x"), find("y"), find("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(CloudError::MalformedHeader("FIELDS must include x y z".into())),
    };
    for &i in &[ix, iy, iz] {
        let f = &header.fields[i];
        if f.kind != 'F' || !(f.size == 4 || f.size == 8) || f.count != 1 {
            return Err(CloudError::MalformedHeader(format!(
                "field {} must be a scalar float",
                f.name
            )));
        }
    }
    let irgb = find("rgb").or_else(|| find("rgba"));
    let ignored_fields: Vec<String> = header
        .fields
        .iter()
        .map(|f| f.name.clone())
        .filter(|n| !matches!(n.as_str(), "x" | "y" | "z" | "rgb" | "rgba" | "_"))
        .collect();
    if !ignored_fields.is_empty() {
        warn!("ignoring PCD fields {ignored_fields:?}");
    }

    let rows = match header.encoding {
        PcdEncoding::Ascii => decode_ascii(&header, &bytes[data_offset..])?,
        PcdEncoding::Binary => decode_binary(&header, &bytes[data_offset..])?,
    };

    let mut points = Vec::with_capacity(rows.len());
    let mut colors = irgb.map(|_| Vec::with_capacity(rows.len()));
    let mut dropped = 0;
    for row in rows {
        let p = Point3::new(row[ix], row[iy], row[iz]);
        if !is_finite_point(&p) {
            dropped += 1;
            continue;
        }
        points.push(p);
        if let (Some(i), Some(c)) = (irgb, colors.as_mut()) {
            c.push(unpack_rgb(row[i]));
        }
    }
    if dropped > 0 {
        warn!("dropped {dropped} non-finite PCD points");
    }
    Ok(PcdLoad {
        cloud: PointCloud { points, colors },
        dropped,
        ignored_fields,
    })
}

/// Color fields are decoded to their raw 32-bit pattern (see `Field::is_color`).
fn unpack_rgb(raw: f64) -> [u8; 3] {
    let bits = raw as u32;
    [(bits >> 16) as u8, (bits >> 8) as u8, bits as u8]
}

fn parse_header(bytes: &[u8]) -> Result<(Header, usize), CloudError> {
    let mut offset = 0;
    let mut names: Option<Vec<String>> = None;
    let mut sizes: Option<Vec<usize>> = None;
    let mut kinds: Option<Vec<char>> = None;
    let mut counts: Option<Vec<usize>> = None;
    let mut width: Option<usize> = None;
    let mut height: usize = 1;
    let mut points: Option<usize> = None;

    while offset < bytes.len() {
        let end = bytes[offset..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|p| offset + p + 1)
            .unwrap_or(bytes.len());
        let line = std::str::from_utf8(&bytes[offset..end])
            .map_err(|_| CloudError::MalformedHeader("non-UTF-8 header line".into()))?
            .trim();
        offset = end;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let key = it.next().unwrap_or_default().to_ascii_uppercase();
        let rest: Vec<&str> = it.collect();
        let parse_usizes = |v: &[&str]| -> Result<Vec<usize>, CloudError> {
            v.iter()
                .map(|s| {
                    s.parse::<usize>()
                        .map_err(|_| CloudError::MalformedHeader(format!("bad {key} value {s:?}")))
                })
                .collect()
        };
        match key.as_str() {
            "VERSION" | "VIEWPOINT" => {}
            "FIELDS" => names = Some(rest.iter().map(|s| s.to_string()).collect()),
            "SIZE" => sizes = Some(parse_usizes(&rest)?),
            "TYPE" => {
                let k: Vec<char> = rest.iter().filter_map(|s| s.chars().next()).collect();
                if k.iter().any(|c| !matches!(c, 'F' | 'U' | 'I')) {
                    return Err(CloudError::MalformedHeader(format!("bad TYPE {rest:?}")));
                }
                kinds = Some(k);
            }
            "COUNT" => counts = Some(parse_usizes(&rest)?),
            "WIDTH" => width = parse_usizes(&rest)?.first().copied(),
            "HEIGHT" => height = parse_usizes(&rest)?.first().copied().unwrap_or(1),
            "POINTS" => points = parse_usizes(&rest)?.first().copied(),
            "DATA" => {
                let encoding = match rest.first().map(|s| s.to_ascii_lowercase()).as_deref() {
                    Some("ascii") => PcdEncoding::Ascii,
                    Some("binary") => PcdEncoding::Binary,
                    Some(other) => return Err(CloudError::UnsupportedEncoding(other.to_string())),
                    None => return Err(CloudError::MalformedHeader("DATA without encoding".into())),
                };
                let names = names.ok_or_else(|| CloudError::MalformedHeader("missing FIELDS".into()))?;
                let n = names.len();
                let sizes = sizes.unwrap_or_else(|| vec![4; n]);
                let kinds = kinds.unwrap_or_else(|| vec!['F'; n]);
                let counts = counts.unwrap_or_else(|| vec![1; n]);
                if sizes.len() != n || kinds.len() != n || counts.len() != n {
                    return Err(CloudError::MalformedHeader(
                        "FIELDS/SIZE/TYPE/COUNT lengths differ".into(),
                    ));
                }
                let fields = names
                    .into_iter()
                    .zip(sizes)
                    .zip(kinds)
                    .zip(counts)
                    .map(|(((name, size), kind), count)| Field {
                        name,
                        size,
                        kind,
                        count,
                    })
                    .collect::<Vec<_>>();
                for f in &fields {
                    let ok = match f.kind {
                        'F' => matches!(f.size, 4 | 8),
                        _ => matches!(f.size, 1 | 2 | 4 | 8),
                    };
                    if !ok {
                        return Err(CloudError::MalformedHeader(format!(
                            "unsupported size {} for field {}",
                            f.size, f.name
                        )));
                    }
                }
                let points = points
                    .or_else(|| width.map(|w| w * height))
                    .ok_or_else(|| CloudError::MalformedHeader("missing POINTS".into()))?;
                return Ok((
                    Header {
                        fields,
                        points,
                        encoding,
                    },
                    offset,
                ));
            }
            other => return Err(CloudError::MalformedHeader(format!("unknown key {other}"))),
        }
    }
    Err(CloudError::MalformedHeader("missing DATA line".into()))
}

/// One row per point; multi-count fields keep only their first element.
fn decode_ascii(header: &Header, data: &[u8]) -> Result<Vec<Vec<f64>>, CloudError> {
    let text = std::str::from_utf8(data)
        .map_err(|_| CloudError::MalformedData("non-UTF-8 ASCII data".into()))?;
    let width: usize = header.fields.iter().map(|f| f.count).sum();
    let mut rows = Vec::with_capacity(header.points);
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if rows.len() == header.points {
            break;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() < width {
            return Err(CloudError::MalformedData(format!("short row {line:?}")));
        }
        let mut row = Vec::with_capacity(header.fields.len());
        let mut t = 0;
        for f in &header.fields {
            let bad = || CloudError::MalformedData(format!("bad value {:?}", tokens[t]));
            let v = if f.is_color() && f.kind == 'F' {
                tokens[t].parse::<f32>().map_err(|_| bad())?.to_bits() as f64
            } else {
                tokens[t].parse::<f64>().map_err(|_| bad())?
            };
            row.push(v);
            t += f.count;
        }
        rows.push(row);
    }
    if rows.len() != header.points {
        return Err(CloudError::MalformedData(format!(
            "expected {} points, found {}",
            header.points,
            rows.len()
        )));
    }
    Ok(rows)
}

fn decode_binary(header: &Header, data: &[u8]) -> Result<Vec<Vec<f64>>, CloudError> {
    let stride: usize = header.fields.iter().map(|f| f.size * f.count).sum();
    let needed = stride * header.points;
    if data.len() < needed {
        return Err(CloudError::MalformedData(format!(
            "binary data has {} bytes, expected {needed}",
            data.len()
        )));
    }
    let rows = data[..needed]
        .chunks_exact(stride)
        .map(|rec| {
            let mut off = 0;
            header
                .fields
                .iter()
                .map(|f| {
                    let b = &rec[off..off + f.size];
                    let v = if f.is_color() {
                        u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64
                    } else {
                        decode_scalar(b, f.kind)
                    };
                    off += f.size * f.count;
                    v
                })
                .collect()
        })
        .collect();
    Ok(rows)
}

fn decode_scalar(b: &[u8], kind: char) -> f64 {
    match (kind, b.len()) {
        ('F', 4) => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
        ('F', 8) => f64::from_le_bytes(b.try_into().unwrap()),
        ('U', 1) => b[0] as f64,
        ('U', 2) => u16::from_le_bytes([b[0], b[1]]) as f64,
        ('U', 4) => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
        ('U', 8) => u64::from_le_bytes(b.try_into().unwrap()) as f64,
        ('I', 1) => b[0] as i8 as f64,
        ('I', 2) => i16::from_le_bytes([b[0], b[1]]) as f64,
        ('I', 4) => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
        ('I', 8) => i64::from_le_bytes(b.try_into().unwrap()) as f64,
        _ => unreachable!("validated in header"),
    }
}

/// Writes `x y z` as `f32` fields.
pub fn write_pcd(
    path: impl AsRef<Path>,
    cloud: &PointCloud,
    encoding: PcdEncoding,
) -> Result<(), CloudError> {
    let n = cloud.len();
    let mut out = Vec::with_capacity(200 + n * 12);
    write!(
        out,
        "# .PCD v0.7 - Point Cloud Data file format\nVERSION 0.7\nFIELDS x y z\nSIZE 4 4 4\nTYPE F F F\nCOUNT 1 1 1\nWIDTH {n}\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\nPOINTS {n}\n"
    )?;
    match encoding {
        PcdEncoding::Ascii => {
            writeln!(out, "DATA ascii")?;
            for p in &cloud.points {
                writeln!(out, "{} {} {}", p.x as f32, p.y as f32, p.z as f32)?;
            }
        }
        PcdEncoding::Binary => {
            writeln!(out, "DATA binary")?;
            out.extend_from_slice(&cloud.to_f32_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}
