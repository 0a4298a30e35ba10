//! RGB-D frames and the on-disk scene layout.
//!
//! A scene directory follows the ScanNet export conventions:
//!
//! ```text
//! scene/
//!   color/<id>.png | <id>.jpg      8-bit RGB
//!   depth/<id>.png                 16-bit single channel, millimeters, 0 = invalid
//!   pose/<id>.txt                  4x4 camera-to-world, row-major
//!   intrinsic/<id>.txt             fx fy cx cy, a 3x3 or a 4x4 matrix;
//!   intrinsic/intrinsic_depth.txt  shared fallback when no per-frame file exists
//!   cloud.ply                      scene points (ascii or binary little-endian)
//! ```
//!
//! Intrinsics always refer to the depth resolution.

use std::path::{Path, PathBuf};

use image::ImageReader;

use crate::{Error, Result};

/// Frobenius tolerance on `RᵀR − I` accepted when loading a pose.
pub const POSE_LOAD_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb8Image {
    pub width: usize,
    pub height: usize,
    /// Row-major interleaved RGB.
    pub data: Vec<u8>,
}

impl Rgb8Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::Argument(format!(
                "rgb image {width}x{height} needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Rgb8Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Rgb8Image { width, height, data }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copies out the `w`×`h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Rgb8Image> {
        if x0 + w > self.width || y0 + h > self.height || w == 0 || h == 0 {
            return Err(Error::Argument(format!(
                "crop ({x0},{y0},{w},{h}) outside {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Ok(Rgb8Image { width: w, height: h, data })
    }

    /// Nearest-neighbor resize, used to bring very large color views down to
    /// a working resolution before feature extraction.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Rgb8Image {
        let mut out = Rgb8Image::filled(width, height, [0, 0, 0]);
        for y in 0..height {
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            for x in 0..width {
                let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64) as usize;
                out.put(x, y, self.pixel(sx.min(self.width - 1), sy.min(self.height - 1)));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    /// Millimeters; 0 marks an invalid pixel.
    pub data: Vec<u16>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<u16>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::Argument(format!(
                "depth map {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(DepthMap { width, height, data })
    }

    #[inline]
    pub fn raw(&self, x: usize, y: usize) -> u16 {
        self.data[y * self.width + x]
    }

    /// Depth in meters, `None` for invalid pixels.
    #[inline]
    pub fn meters(&self, x: usize, y: usize) -> Option<f32> {
        match self.raw(x, y) {
            0 => None,
            mm => Some(mm_to_m(mm)),
        }
    }
}

#[inline]
pub fn mm_to_m(mm: u16) -> f32 {
    mm as f32 / 1000.0
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f32,
    pub fy: f32,
    pub cx: f32,
    pub cy: f32,
}

impl Intrinsics {
    pub fn new(fx: f32, fy: f32, cx: f32, cy: f32) -> Result<Self> {
        let k = Intrinsics { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::Data(format!("invalid intrinsics {self:?}")));
        }
        Ok(())
    }

    /// Accepts `fx fy cx cy`, a 3×3 camera matrix or a 4×4 ScanNet matrix.
    pub fn parse(text: &str) -> Result<Self> {
        let v = parse_numbers(text)?;
        let k = match v.len() {
            4 => Intrinsics { fx: v[0], fy: v[1], cx: v[2], cy: v[3] },
            9 => Intrinsics { fx: v[0], fy: v[4], cx: v[2], cy: v[5] },
            16 => Intrinsics { fx: v[0], fy: v[5], cx: v[2], cy: v[6] },
            n => return Err(Error::Data(format!("intrinsics: expected 4, 9 or 16 numbers, got {n}"))),
        };
        k.validate()?;
        Ok(k)
    }

    pub fn to_text(&self) -> String {
        format!("{} {} {} {}\n", self.fx, self.fy, self.cx, self.cy)
    }
}

/// Row-major 4×4 camera-to-world transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose(pub [[f32; 4]; 4]);

impl Pose {
    pub fn identity() -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Pose(m)
    }

    pub fn from_translation(t: [f32; 3]) -> Self {
        let mut p = Self::identity();
        for (i, ti) in t.iter().enumerate() {
            p.0[i][3] = *ti;
        }
        p
    }

    /// Builds a pose from a rotation (rows) and a translation.
    pub fn from_rt(r: [[f32; 3]; 3], t: [f32; 3]) -> Self {
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&r[i]);
            m[i][3] = t[i];
        }
        m[3][3] = 1.0;
        Pose(m)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let v = parse_numbers(text)?;
        if v.len() != 16 {
            return Err(Error::Data(format!("pose: expected 16 numbers, got {}", v.len())));
        }
        let mut m = [[0.0; 4]; 4];
        for (i, x) in v.into_iter().enumerate() {
            m[i / 4][i % 4] = x;
        }
        Ok(Pose(m))
    }

    pub fn to_text(&self) -> String {
        self.0
            .iter()
            .map(|r| format!("{} {} {} {}\n", r[0], r[1], r[2], r[3]))
            .collect()
    }

    /// Frobenius norm of `RᵀR − I` for the rotation block.
    pub fn orthonormality_error(&self) -> f64 {
        let m = &self.0;
        let mut acc = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| m[k][i] as f64 * m[k][j] as f64).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                acc += (dot - target).powi(2);
            }
        }
        acc.sqrt()
    }

    pub fn validate(&self, tolerance: f64) -> Result<()> {
        if self.0.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Data("pose contains non-finite values".into()));
        }
        if self.0[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Data(format!("pose bottom row {:?} is not (0,0,0,1)", self.0[3])));
        }
        let err = self.orthonormality_error();
        if err > tolerance {
            return Err(Error::Data(format!(
                "pose rotation is not orthonormal (|RᵀR−I|_F = {err:.3e})"
            )));
        }
        Ok(())
    }

    /// General 4×4 inverse in double precision.
    pub fn inverse_f64(&self) -> Result<[[f64; 4]; 4]> {
        let mut a = [[0.0f64; 8]; 4];
        for i in 0..4 {
            for j in 0..4 {
                a[i][j] = self.0[i][j] as f64;
            }
            a[i][4 + i] = 1.0;
        }
        for col in 0..4 {
            let pivot = (col..4)
                .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
                .unwrap();
            if a[pivot][col].abs() < 1e-12 {
                return Err(Error::Data("pose is singular".into()));
            }
            a.swap(col, pivot);
            let p = a[col][col];
            for v in a[col].iter_mut() {
                *v /= p;
            }
            for row in 0..4 {
                if row != col {
                    let f = a[row][col];
                    if f != 0.0 {
                        for k in 0..8 {
                            a[row][k] -= f * a[col][k];
                        }
                    }
                }
            }
        }
        let mut inv = [[0.0; 4]; 4];
        for i in 0..4 {
            inv[i].copy_from_slice(&a[i][4..]);
        }
        Ok(inv)
    }

    pub fn transform_point(&self, p: [f32; 3]) -> [f32; 3] {
        let m = &self.0;
        let mut out = [0.0f32; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = (m[i][0] as f64 * p[0] as f64
                + m[i][1] as f64 * p[1] as f64
                + m[i][2] as f64 * p[2] as f64
                + m[i][3] as f64) as f32;
        }
        out
    }
}

fn parse_numbers(text: &str) -> Result<Vec<f32>> {
    text.split_whitespace()
        .map(|t| {
            t.parse::<f32>()
                .map_err(|_| Error::Data(format!("not a number: {t:?}")))
        })
        .collect()
}

/// One RGB-D view.
#[derive(Clone, Debug)]
pub struct Frame {
    pub id: u32,
    pub image: Rgb8Image,
    pub depth: DepthMap,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
}

/// Paths of the four files belonging to one frame.
#[derive(Clone, Debug)]
pub struct FramePaths {
    pub color: PathBuf,
    pub depth: PathBuf,
    pub pose: PathBuf,
    pub intrinsics: PathBuf,
}

pub fn frame_paths(scene_dir: &Path, frame_id: u32) -> Result<FramePaths> {
    let first_existing = |candidates: &[PathBuf]| -> Result<PathBuf> {
        candidates
            .iter()
            .find(|p| p.is_file())
            .cloned()
            .ok_or_else(|| Error::Data(format!("missing file {}", candidates[0].display())))
    };
    Ok(FramePaths {
        color: first_existing(&[
            scene_dir.join("color").join(format!("{frame_id}.png")),
            scene_dir.join("color").join(format!("{frame_id}.jpg")),
        ])?,
        depth: first_existing(&[scene_dir.join("depth").join(format!("{frame_id}.png"))])?,
        pose: first_existing(&[scene_dir.join("pose").join(format!("{frame_id}.txt"))])?,
        intrinsics: first_existing(&[
            scene_dir.join("intrinsic").join(format!("{frame_id}.txt")),
            scene_dir.join("intrinsic").join("intrinsic_depth.txt"),
        ])?,
    })
}

pub fn load_frame(scene_dir: impl AsRef<Path>, frame_id: u32) -> Result<Frame> {
    let scene_dir = scene_dir.as_ref();
    let paths = frame_paths(scene_dir, frame_id)?;
    let read_text = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
    let pose = Pose::parse(&read_text(&paths.pose)?)
        .map_err(|e| Error::Data(format!("{}: {e}", paths.pose.display())))?;
    pose.validate(POSE_LOAD_TOLERANCE)
        .map_err(|e| Error::Data(format!("{}: {e}", paths.pose.display())))?;
    let intrinsics = Intrinsics::parse(&read_text(&paths.intrinsics)?)
        .map_err(|e| Error::Data(format!("{}: {e}", paths.intrinsics.display())))?;
    Ok(Frame {
        id: frame_id,
        image: read_rgb(&paths.color)?,
        depth: read_depth_png(&paths.depth)?,
        pose,
        intrinsics,
    })
}

/// Writes a frame using the scene layout. The intrinsics go to a per-frame file.
pub fn write_frame(scene_dir: impl AsRef<Path>, frame: &Frame) -> Result<()> {
    let dir = scene_dir.as_ref();
    for sub in ["color", "depth", "pose", "intrinsic"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let id = frame.id;
    write_rgb_png(dir.join("color").join(format!("{id}.png")), &frame.image)?;
    write_depth_png(dir.join("depth").join(format!("{id}.png")), &frame.depth)?;
    let pose_path = dir.join("pose").join(format!("{id}.txt"));
    std::fs::write(&pose_path, frame.pose.to_text()).map_err(|e| Error::io(&pose_path, e))?;
    let k_path = dir.join("intrinsic").join(format!("{id}.txt"));
    std::fs::write(&k_path, frame.intrinsics.to_text()).map_err(|e| Error::io(&k_path, e))
}

/// Frame ids present in `scene/depth`, ascending.
pub fn list_frames(scene_dir: impl AsRef<Path>) -> Result<Vec<u32>> {
    let depth_dir = scene_dir.as_ref().join("depth");
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(&depth_dir).map_err(|e| Error::io(&depth_dir, e))? {
        let entry = entry.map_err(|e| Error::io(&depth_dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix(".png") {
            if let Ok(id) = stem.parse::<u32>() {
                ids.push(id);
            }
        }
    }
    ids.sort_unstable();
    Ok(ids)
}

/// Keeps the ids at positions `0, stride, 2·stride, …`.
pub fn subsample_frames(frame_ids: &[u32], stride: usize) -> Result<Vec<u32>> {
    if stride == 0 {
        return Err(Error::Argument("frame stride must be >= 1".into()));
    }
    Ok(frame_ids.iter().step_by(stride).copied().collect())
}

pub fn read_rgb(path: impl AsRef<Path>) -> Result<Rgb8Image> {
    let path = path.as_ref();
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image { path: path.into(), source })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Rgb8Image::new(w as usize, h as usize, img.into_raw())
}

pub fn write_rgb_png(path: impl AsRef<Path>, img: &Rgb8Image) -> Result<()> {
    let path = path.as_ref();
    image::save_buffer(
        path,
        &img.data,
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|source| Error::Image { path: path.into(), source })
}

pub fn read_depth_png(path: impl AsRef<Path>) -> Result<DepthMap> {
    let path = path.as_ref();
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image { path: path.into(), source })?;
    let luma = match img {
        image::DynamicImage::ImageLuma16(buf) => buf,
        other => {
            return Err(Error::Data(format!(
                "{}: depth must be 16-bit single channel, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = luma.dimensions();
    DepthMap::new(w as usize, h as usize, luma.into_raw())
}

pub fn write_depth_png(path: impl AsRef<Path>, depth: &DepthMap) -> Result<()> {
    let path = path.as_ref();
    let buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
        image::ImageBuffer::from_raw(depth.width as u32, depth.height as u32, depth.data.clone())
            .ok_or_else(|| Error::Argument("depth buffer size mismatch".into()))?;
    buf.save(path)
        .map_err(|source| Error::Image { path: path.into(), source })
}

/// Writes a label map as an 8-bit indexed PNG with a fixed palette.
pub fn write_label_png(path: impl AsRef<Path>, width: usize, height: usize, labels: &[i32]) -> Result<()> {
    let path = path.as_ref();
    if labels.len() != width * height {
        return Err(Error::Argument("label map size mismatch".into()));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    let palette: Vec<u8> = (0..256).flat_map(|i| palette_color(i as i32)).collect();
    enc.set_palette(palette);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let idx: Vec<u8> = labels.iter().map(|&l| l.rem_euclid(256) as u8).collect();
    writer
        .write_image_data(&idx)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Deterministic, well-spread color for a label id. Negative ids are gray.
pub fn palette_color(label: i32) -> [u8; 3] {
    if label < 0 {
        return [128, 128, 128];
    }
    const BASE: [[u8; 3]; 12] = [
        [174, 199, 232], [152, 223, 138], [31, 119, 180], [255, 187, 120],
        [188, 189, 34], [140, 86, 75], [255, 152, 150], [214, 39, 40],
        [197, 176, 213], [148, 103, 189], [196, 156, 148], [23, 190, 207],
    ];
    let l = label as usize;
    let base = BASE[l % BASE.len()];
    // rotate channels for ids beyond the base table
    let shift = (l / BASE.len()) % 3;
    let mut c = [base[shift % 3], base[(shift + 1) % 3], base[(shift + 2) % 3]];
    if l / (BASE.len() * 3) % 2 == 1 {
        c = c.map(|v| 255 - v);
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsample_takes_every_stride() {
        let ids: Vec<u32> = (0..=29).collect();
        assert_eq!(subsample_frames(&ids, 10).unwrap(), vec![0, 10, 20]);
        assert_eq!(subsample_frames(&ids, 1).unwrap(), ids);
        let short: Vec<u32> = (0..=4).collect();
        assert_eq!(subsample_frames(&short, 10).unwrap(), vec![0]);
        assert!(subsample_frames(&[], 3).unwrap().is_empty());
        assert!(subsample_frames(&ids, 0).is_err());
    }

    #[test]
    fn depth_conversion_is_exact() {
        assert_eq!(mm_to_m(1500), 1.5);
        for mm in [1u16, 7, 999, 1000, 4095, 65535] {
            assert_eq!(mm_to_m(mm) as f64, (mm as f64 / 1000.0) as f32 as f64);
        }
    }

    #[test]
    fn intrinsics_formats() {
        let a = Intrinsics::parse("100 100 50 50").unwrap();
        let b = Intrinsics::parse("100 0 50\n0 100 50\n0 0 1").unwrap();
        let c = Intrinsics::parse("100 0 50 0\n0 100 50 0\n0 0 1 0\n0 0 0 1").unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert!(Intrinsics::parse("0 100 50 50").is_err());
    }

    #[test]
    fn pose_inverse_of_translation() {
        let p = Pose::from_translation([0.0, 0.0, 1.0]);
        let inv = p.inverse_f64().unwrap();
        assert_eq!(inv[2][3], -1.0);
        let mut singular = Pose::identity();
        singular.0[2][2] = 0.0;
        assert!(singular.inverse_f64().is_err());
    }

    fn write_scene(dir: &Path, pose_text: &str) {
        let frame = Frame {
            id: 0,
            image: Rgb8Image::filled(4, 3, [10, 20, 30]),
            depth: DepthMap::new(4, 3, vec![1500; 12]).unwrap(),
            pose: Pose::identity(),
            intrinsics: Intrinsics::new(2.0, 2.0, 2.0, 1.5).unwrap(),
        };
        write_frame(dir, &frame).unwrap();
        std::fs::write(dir.join("pose/0.txt"), pose_text).unwrap();
    }

    #[test]
    fn load_frame_reads_all_files() {
        let dir = tempfile::tempdir().unwrap();
        write_scene(dir.path(), &Pose::identity().to_text());
        let f = load_frame(dir.path(), 0).unwrap();
        assert_eq!(f.pose, Pose::identity());
        assert_eq!(f.depth.meters(1, 1), Some(1.5));
        assert_eq!(f.image.pixel(3, 2), [10, 20, 30]);
        assert_eq!(list_frames(dir.path()).unwrap(), vec![0]);
    }

    #[test]
    fn load_frame_rejects_scaled_rotation() {
        let dir = tempfile::tempdir().unwrap();
        write_scene(dir.path(), "2 0 0 0\n0 2 0 0\n0 0 2 0\n0 0 0 1\n");
        let err = load_frame(dir.path(), 0).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }

    #[test]
    fn load_frame_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        write_scene(dir.path(), &Pose::identity().to_text());
        std::fs::remove_file(dir.path().join("depth/0.png")).unwrap();
        assert!(load_frame(dir.path(), 0).is_err());
    }

    #[test]
    fn eight_bit_depth_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        write_rgb_png(&p, &Rgb8Image::filled(2, 2, [1, 1, 1])).unwrap();
        assert!(read_depth_png(&p).is_err());
    }

    #[test]
    fn label_png_writes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.png");
        write_label_png(&p, 2, 2, &[0, 1, 2, 3]).unwrap();
        assert!(p.metadata().unwrap().len() > 0);
    }
}
