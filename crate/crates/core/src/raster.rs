//! Software rasterization of the posed face into a triangle-ID visibility
//! buffer, and encoding of NMFC (normalised mean face coordinate)
//! conditioning images.

use std::io::Read as _;
use std::path::Path;

use nalgebra::{Vector2, Vector3};

use crate::camera::SopCamera;
use crate::error::{Error, Result};
use crate::fitter::FitResult;
use crate::model::{Mesh, NormalizedMeanFace, ShapeBasis};
use crate::scalar::Real;

/// Background sentinel for pixels covered by no triangle.
pub const NO_TRIANGLE: u32 = u32::MAX;

/// Per-pixel visible triangle ids with a z-buffer.
#[derive(Debug, Clone)]
pub struct TriangleIdBuffer<T: Real> {
    pub width: usize,
    pub height: usize,
    /// Row-major; `NO_TRIANGLE` marks background.
    pub ids: Vec<u32>,
    pub depth: Vec<T>,
}

impl<T: Real> TriangleIdBuffer<T> {
    pub fn id_at(&self, x: usize, y: usize) -> u32 {
        self.ids[y * self.width + x]
    }
}

/// W x H x 3 float image of normalized mean-face coordinates in [0, 1];
/// background pixels are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NmfcImage<T: Real> {
    pub width: usize,
    pub height: usize,
    /// Row-major, 3 channels interleaved.
    pub pixels: Vec<T>,
}

impl<T: Real> NmfcImage<T> {
    pub fn pixel(&self, x: usize, y: usize) -> [T; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }
}

fn cross2<T: Real>(ux: T, uy: T, vx: T, vy: T) -> T {
    ux * vy - uy * vx
}

/// Edge ownership for pixels exactly on an edge: with pixel y growing
/// downwards and front faces having positive signed area, a zero-valued edge
/// function counts as inside only for top (`dy == 0, dx > 0`) and left
/// (`dy < 0`) edges. Reversing the edge flips the predicate, so a shared
/// edge is owned by exactly one triangle.
fn edge_accepts_zero<T: Real>(ax: T, ay: T, bx: T, by: T) -> bool {
    let dy = by - ay;
    let dx = bx - ax;
    dy < T::zero() || (dy == T::zero() && dx > T::zero())
}

/// Coverage test shared by the production rasterizer and the brute-force
/// oracle: returns the interpolated camera-space depth when the pixel center
/// is covered.
pub fn pixel_coverage<T: Real>(
    p: &[Vector2<T>; 3],
    z: &[T; 3],
    px: T,
    py: T,
) -> Option<T> {
    let area2 = cross2(p[1].x - p[0].x, p[1].y - p[0].y, p[2].x - p[0].x, p[2].y - p[0].y);
    if area2 <= T::zero() {
        // Back-facing or degenerate.
        return None;
    }
    let mut w = [T::zero(); 3];
    for e in 0..3 {
        let a = p[(e + 1) % 3];
        let b = p[(e + 2) % 3];
        let we = cross2(b.x - a.x, b.y - a.y, px - a.x, py - a.y);
        if we < T::zero() {
            return None;
        }
        if we == T::zero() && !edge_accepts_zero(a.x, a.y, b.x, b.y) {
            return None;
        }
        w[e] = we;
    }
    Some((w[0] * z[0] + w[1] * z[1] + w[2] * z[2]) / area2)
}

/// Rasterizes a posed mesh into a triangle-id/z buffer.
///
/// Pixel centers sit at (x + 0.5, y + 0.5). Depth is the camera-space z
/// after rotation (scale independent); smaller z is nearer. Depth ties go to
/// the smaller triangle id, which makes the output independent of triangle
/// submission order.
pub fn rasterize<T: Real>(
    mesh: &Mesh<T>,
    cam: &SopCamera<T>,
    width: usize,
    height: usize,
) -> Result<TriangleIdBuffer<T>> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("zero raster size".into()));
    }
    let mut buf = TriangleIdBuffer {
        width,
        height,
        ids: vec![NO_TRIANGLE; width * height],
        depth: vec![T::max_value().unwrap(); width * height],
    };
    let r = cam.rotation_matrix();
    let projected: Vec<(Vector2<T>, T)> = mesh
        .vertices
        .iter()
        .map(|v| {
            let rv = r * v;
            (
                Vector2::new(
                    cam.scale * rv.x + cam.translation.x,
                    cam.scale * rv.y + cam.translation.y,
                ),
                rv.z,
            )
        })
        .collect();

    let half = T::c(0.5);
    for (tri_id, tri) in mesh.topology.iter().enumerate() {
        let p = [
            projected[tri[0] as usize].0,
            projected[tri[1] as usize].0,
            projected[tri[2] as usize].0,
        ];
        let z = [
            projected[tri[0] as usize].1,
            projected[tri[1] as usize].1,
            projected[tri[2] as usize].1,
        ];
        let min_x = p[0].x.min(p[1].x).min(p[2].x);
        let max_x = p[0].x.max(p[1].x).max(p[2].x);
        let min_y = p[0].y.min(p[1].y).min(p[2].y);
        let max_y = p[0].y.max(p[1].y).max(p[2].y);
        let x0 = (min_x - half).floor().as_f64().max(0.0) as usize;
        let y0 = (min_y - half).floor().as_f64().max(0.0) as usize;
        let x1 = ((max_x - half).ceil().as_f64().max(-1.0) as isize)
            .min(width as isize - 1);
        let y1 = ((max_y - half).ceil().as_f64().max(-1.0) as isize)
            .min(height as isize - 1);
        if x1 < x0 as isize || y1 < y0 as isize {
            continue;
        }
        let id = tri_id as u32;
        for y in y0..=(y1 as usize) {
            let py = T::from_usize(y).unwrap() + half;
            for x in x0..=(x1 as usize) {
                let px = T::from_usize(x).unwrap() + half;
                if let Some(zp) = pixel_coverage(&p, &z, px, py) {
                    let idx = y * width + x;
                    if zp < buf.depth[idx] || (zp == buf.depth[idx] && id < buf.ids[idx]) {
                        buf.depth[idx] = zp;
                        buf.ids[idx] = id;
                    }
                }
            }
        }
    }
    Ok(buf)
}

/// Fills each covered pixel with the centroid of its visible triangle in
/// normalized mean-face coordinates; background stays (0, 0, 0).
pub fn encode_nmfc<T: Real>(
    buf: &TriangleIdBuffer<T>,
    nmf: &NormalizedMeanFace<T>,
    topology: &[[u32; 3]],
) -> Result<NmfcImage<T>> {
    let mut pixels = vec![T::zero(); buf.width * buf.height * 3];
    let third = T::one() / T::c(3.0);
    for (i, &id) in buf.ids.iter().enumerate() {
        if id == NO_TRIANGLE {
            continue;
        }
        let tri = topology
            .get(id as usize)
            .ok_or_else(|| Error::InvalidArgument(format!("triangle id {id} out of range")))?;
        let a = nmf.coords[tri[0] as usize];
        let b = nmf.coords[tri[1] as usize];
        let c = nmf.coords[tri[2] as usize];
        for ch in 0..3 {
            pixels[i * 3 + ch] = (a[ch] + b[ch] + c[ch]) * third;
        }
    }
    Ok(NmfcImage {
        width: buf.width,
        height: buf.height,
        pixels,
    })
}

/// Centroid color a triangle id maps to; used by tests and previews.
pub fn triangle_centroid<T: Real>(
    nmf: &NormalizedMeanFace<T>,
    tri: &[u32; 3],
) -> Vector3<T> {
    let a = nmf.coords[tri[0] as usize];
    let b = nmf.coords[tri[1] as usize];
    let c = nmf.coords[tri[2] as usize];
    // Same arithmetic as encode_nmfc so values compare bit-equal.
    let third = T::one() / T::c(3.0);
    Vector3::new(
        (a[0] + b[0] + c[0]) * third,
        (a[1] + b[1] + c[1]) * third,
        (a[2] + b[2] + c[2]) * third,
    )
}

/// Renders the NMFC image for one set of shape parameters and camera.
pub fn render_nmfc_frame<T: Real>(
    basis: &ShapeBasis<T>,
    params: &crate::model::ShapeParams<T>,
    cam: &SopCamera<T>,
    nmf: &NormalizedMeanFace<T>,
    width: usize,
    height: usize,
) -> Result<NmfcImage<T>> {
    let mesh = basis.synthesize(params)?;
    let buf = rasterize(&mesh, cam, width, height)?;
    encode_nmfc(&buf, nmf, basis.topology())
}

/// Renders the whole fitted sequence deterministically.
pub fn render_nmfc_sequence<T: Real>(
    basis: &ShapeBasis<T>,
    fit: &FitResult<T>,
    width: usize,
    height: usize,
) -> Result<Vec<NmfcImage<T>>> {
    if fit.identity.len() != basis.n_id() {
        return Err(Error::DimensionMismatch(
            "fit identity dimension does not match basis".into(),
        ));
    }
    let nmf = basis.normalized_mean_face()?;
    (0..fit.num_frames())
        .map(|t| render_nmfc_frame(basis, &fit.params_at(t), &fit.cameras[t], &nmf, width, height))
        .collect()
}

const NMFC_MAGIC: &[u8; 4] = b"NMFC";

/// Writes the lossless float32 sidecar (`.nmfc`): magic, u32 width, u32
/// height, then W*H*3 little-endian float32 values.
pub fn save_nmfc<T: Real>(img: &NmfcImage<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(12 + img.pixels.len() * 4);
    out.extend_from_slice(NMFC_MAGIC);
    out.extend_from_slice(&(img.width as u32).to_le_bytes());
    out.extend_from_slice(&(img.height as u32).to_le_bytes());
    for v in &img.pixels {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_nmfc<T: Real>(path: impl AsRef<Path>) -> Result<NmfcImage<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = std::io::Cursor::new(&bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic)
        .map_err(|_| Error::CorruptContainer("nmfc too short".into()))?;
    if &magic != NMFC_MAGIC {
        return Err(Error::CorruptContainer("bad nmfc magic".into()));
    }
    let mut u32buf = [0u8; 4];
    cur.read_exact(&mut u32buf).unwrap();
    let width = u32::from_le_bytes(u32buf) as usize;
    cur.read_exact(&mut u32buf).unwrap();
    let height = u32::from_le_bytes(u32buf) as usize;
    let body = &bytes[12..];
    if body.len() != width * height * 3 * 4 {
        return Err(Error::CorruptContainer("nmfc blob size mismatch".into()));
    }
    let pixels = body
        .chunks_exact(4)
        .map(|c| T::c(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Ok(NmfcImage {
        width,
        height,
        pixels,
    })
}

/// 8-bit PNG preview; training-path math always reads the float sidecar.
pub fn save_nmfc_png<T: Real>(img: &NmfcImage<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut rgb = image::RgbImage::new(img.width as u32, img.height as u32);
    for y in 0..img.height {
        for x in 0..img.width {
            let p = img.pixel(x, y);
            rgb.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    (p[0].as_f64() * 255.0).round().clamp(0.0, 255.0) as u8,
                    (p[1].as_f64() * 255.0).round().clamp(0.0, 255.0) as u8,
                    (p[2].as_f64() * 255.0).round().clamp(0.0, 255.0) as u8,
                ]),
            );
        }
    }
    rgb.save(path)?;
    Ok(())
}
