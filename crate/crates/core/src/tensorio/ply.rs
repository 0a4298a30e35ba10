//! PLY point clouds: reads ascii and binary little-endian vertex data
//! (`x y z`, optional `red green blue`, optional integer `label`) and writes
//! binary little-endian clouds.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    /// World coordinates in meters.
    pub positions: Vec<[f32; 3]>,
    pub colors: Option<Vec<[u8; 3]>>,
    /// Per-point ground-truth labels when the file carries a `label` property.
    pub labels: Option<Vec<i32>>,
}

impl PointCloud {
    pub fn new(positions: Vec<[f32; 3]>, colors: Option<Vec<[u8; 3]>>) -> Result<Self> {
        let pc = PointCloud { positions, colors, labels: None };
        pc.validate()?;
        Ok(pc)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions.is_empty() {
            return Err(Error::Data("point cloud is empty".into()));
        }
        if let Some(i) = self.positions.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::Data(format!("point {i} has non-finite coordinates")));
        }
        let n = self.positions.len();
        if self.colors.as_ref().is_some_and(|c| c.len() != n) {
            return Err(Error::Data("color count differs from point count".into()));
        }
        if self.labels.as_ref().is_some_and(|l| l.len() != n) {
            return Err(Error::Data("label count differs from point count".into()));
        }
        Ok(())
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0f64; 3];
        for p in &self.positions {
            for k in 0..3 {
                c[k] += p[k] as f64;
            }
        }
        let n = self.positions.len().max(1) as f64;
        c.map(|v| v / n)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn decode_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
enum Property {
    Scalar(String, Scalar),
    List,
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

#[derive(Debug, PartialEq, Eq)]
enum Encoding {
    Ascii,
    BinaryLe,
}

fn parse_header<R: BufRead>(r: &mut R) -> Result<(Encoding, Vec<Element>)> {
    let mut line = String::new();
    let next = |r: &mut R, line: &mut String| -> Result<()> {
        line.clear();
        let n = r.read_line(line).map_err(|e| Error::Format(format!("ply header: {e}")))?;
        if n == 0 {
            return Err(Error::Format("ply header: unexpected end of file".into()));
        }
        Ok(())
    };
    next(r, &mut line)?;
    if line.trim() != "ply" {
        return Err(Error::Format("not a PLY file".into()));
    }
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        next(r, &mut line)?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => encoding = Some(Encoding::Ascii),
            ["format", "binary_little_endian", _] => encoding = Some(Encoding::BinaryLe),
            ["format", other, _] => {
                return Err(Error::Format(format!("unsupported PLY format {other}")))
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| Error::Format(format!("bad element count {count:?}")))?,
                props: Vec::new(),
            }),
            ["property", "list", ..] => elements
                .last_mut()
                .ok_or_else(|| Error::Format("property before element".into()))?
                .props
                .push(Property::List),
            ["property", ty, name] => {
                let s = Scalar::parse(ty)
                    .ok_or_else(|| Error::Format(format!("unknown PLY type {ty:?}")))?;
                elements
                    .last_mut()
                    .ok_or_else(|| Error::Format("property before element".into()))?
                    .props
                    .push(Property::Scalar(name.to_string(), s));
            }
            _ => return Err(Error::Format(format!("unrecognized PLY header line {:?}", line.trim()))),
        }
    }
    let encoding = encoding.ok_or_else(|| Error::Format("PLY header lacks format".into()))?;
    Ok((encoding, elements))
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_ply_from(BufReader::new(f)).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn read_ply_from<R: BufRead>(mut r: R) -> Result<PointCloud> {
    let (encoding, elements) = parse_header(&mut r)?;
    let vi = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::Format("no vertex element".into()))?;
    // Elements before the vertex block are skipped; they must be fixed-size in binary mode.
    for e in &elements[..vi] {
        skip_element(&mut r, e, &encoding)?;
    }
    let vertex = &elements[vi];
    let idx = |name: &str| {
        vertex.props.iter().position(|p| matches!(p, Property::Scalar(n, _) if n == name))
    };
    let (ix, iy, iz) = match (idx("x"), idx("y"), idx("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(Error::Format("vertex element lacks x/y/z".into())),
    };
    let rgb = match (idx("red"), idx("green"), idx("blue")) {
        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
        _ => None,
    };
    let label_idx = idx("label");
    if vertex.props.iter().any(|p| matches!(p, Property::List)) {
        return Err(Error::Format("list properties on vertices are not supported".into()));
    }
    let mut positions = Vec::with_capacity(vertex.count);
    let mut colors = rgb.map(|_| Vec::with_capacity(vertex.count));
    let mut labels = label_idx.map(|_| Vec::with_capacity(vertex.count));
    let mut values = vec![0.0f64; vertex.props.len()];
    let scalars: Vec<Scalar> = vertex
        .props
        .iter()
        .map(|p| match p {
            Property::Scalar(_, s) => *s,
            Property::List => unreachable!(),
        })
        .collect();
    let stride: usize = scalars.iter().map(|s| s.size()).sum();
    let mut buf = vec![0u8; stride];
    let mut line = String::new();
    for i in 0..vertex.count {
        match encoding {
            Encoding::BinaryLe => {
                r.read_exact(&mut buf)
                    .map_err(|_| Error::Format(format!("truncated vertex data at vertex {i}")))?;
                let mut off = 0;
                for (v, s) in values.iter_mut().zip(&scalars) {
                    *v = s.decode_le(&buf[off..off + s.size()]);
                    off += s.size();
                }
            }
            Encoding::Ascii => {
                line.clear();
                r.read_line(&mut line).map_err(|e| Error::Format(e.to_string()))?;
                let mut toks = line.split_whitespace();
                for v in values.iter_mut() {
                    let t = toks
                        .next()
                        .ok_or_else(|| Error::Format(format!("short vertex line {i}")))?;
                    *v = t
                        .parse()
                        .map_err(|_| Error::Format(format!("bad number {t:?} at vertex {i}")))?;
                }
            }
        }
        positions.push([values[ix] as f32, values[iy] as f32, values[iz] as f32]);
        if let (Some(c), Some([a, b, d])) = (colors.as_mut(), rgb) {
            c.push([values[a] as u8, values[b] as u8, values[d] as u8]);
        }
        if let (Some(l), Some(li)) = (labels.as_mut(), label_idx) {
            l.push(values[li] as i32);
        }
    }
    let pc = PointCloud { positions, colors, labels };
    pc.validate()?;
    Ok(pc)
}

fn skip_element<R: BufRead>(r: &mut R, e: &Element, enc: &Encoding) -> Result<()> {
    match enc {
        Encoding::Ascii => {
            let mut line = String::new();
            for _ in 0..e.count {
                line.clear();
                r.read_line(&mut line).map_err(|err| Error::Format(err.to_string()))?;
            }
        }
        Encoding::BinaryLe => {
            let mut size = 0;
            for p in &e.props {
                match p {
                    Property::Scalar(_, s) => size += s.size(),
                    Property::List => {
                        return Err(Error::Format(format!(
                            "cannot skip list element {:?} before vertices",
                            e.name
                        )))
                    }
                }
            }
            let mut sink = vec![0u8; size * e.count];
            r.read_exact(&mut sink)
                .map_err(|_| Error::Format(format!("truncated element {:?}", e.name)))?;
        }
    }
    Ok(())
}

/// Writes a binary little-endian PLY with optional colors and labels.
pub fn write_ply(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    cloud.validate()?;
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_ply_to(&mut w, cloud).map_err(|e| Error::io(path, e))
}

pub fn write_ply_to<W: Write>(w: &mut W, cloud: &PointCloud) -> std::io::Result<()> {
    writeln!(w, "ply\nformat binary_little_endian 1.0")?;
    writeln!(w, "element vertex {}", cloud.len())?;
    writeln!(w, "property float x\nproperty float y\nproperty float z")?;
    if cloud.colors.is_some() {
        writeln!(w, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
    }
    if cloud.labels.is_some() {
        writeln!(w, "property int label")?;
    }
    writeln!(w, "end_header")?;
    for i in 0..cloud.len() {
        for c in cloud.positions[i] {
            w.write_all(&c.to_le_bytes())?;
        }
        if let Some(colors) = &cloud.colors {
            w.write_all(&colors[i])?;
        }
        if let Some(labels) = &cloud.labels {
            w.write_all(&labels[i].to_le_bytes())?;
        }
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_with_face_element() {
        let text = "ply\nformat ascii 1.0\ncomment x\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nproperty ushort label\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 1 2 255 0 0 3\n-1 0.5 4 0 255 0 7\n3 0 1 2\n";
        let pc = read_ply_from(text.as_bytes()).unwrap();
        assert_eq!(pc.positions, vec![[0.0, 1.0, 2.0], [-1.0, 0.5, 4.0]]);
        assert_eq!(pc.colors.unwrap()[1], [0, 255, 0]);
        assert_eq!(pc.labels.unwrap(), vec![3, 7]);
    }

    #[test]
    fn binary_round_trip() {
        let mut pc = PointCloud::new(
            vec![[0.5, -1.0, 2.0], [1.0, 2.0, 3.0]],
            Some(vec![[1, 2, 3], [4, 5, 6]]),
        )
        .unwrap();
        pc.labels = Some(vec![-1, 4]);
        let mut bytes = Vec::new();
        write_ply_to(&mut bytes, &pc).unwrap();
        assert_eq!(read_ply_from(&bytes[..]).unwrap(), pc);
    }

    #[test]
    fn truncated_binary_errors() {
        let pc = PointCloud::new(vec![[0.0; 3]; 3], None).unwrap();
        let mut bytes = Vec::new();
        write_ply_to(&mut bytes, &pc).unwrap();
        bytes.truncate(bytes.len() - 2);
        assert!(read_ply_from(&bytes[..]).is_err());
    }

    #[test]
    fn empty_cloud_rejected() {
        assert!(PointCloud::new(vec![], None).is_err());
        assert!(PointCloud::new(vec![[f32::NAN, 0.0, 0.0]], None).is_err());
    }
}
