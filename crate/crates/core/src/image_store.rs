//! Image container, source catalog and pair manifest, plus their on-disk formats.
//!
//! Images are stored in the SFI container:
//!
//! ```text
//! bytes 0..4     ASCII "SFI1"
//! bytes 4..8     little-endian u32 header length H
//! bytes 8..8+H   UTF-8 JSON header {width, height, dtype:"f32", order:"row-major", wcs}
//! then           width*height little-endian f32 values, row-major, NaN = invalid
//! ```
//!
//! Catalogs are CSV files with the header `id,x,y,a,b,theta,flux`. Manifests are
//! JSON arrays of [`PairManifest`].

use std::f64::consts::{FRAC_PI_2, PI};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::psf::PsfSpec;

pub const SFI_MAGIC: [u8; 4] = *b"SFI1";

/// Tangent-plane (gnomonic) world coordinate system with a CD matrix.
///
/// Pixel coordinates follow the FITS convention: the center of the first pixel
/// (row 0, column 0) is at `(1.0, 1.0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WcsModel {
    /// Reference pixel `(x, y)`, 1-based.
    pub crpix: [f64; 2],
    /// Reference sky point `(ra, dec)` in degrees.
    pub crval: [f64; 2],
    /// Linear transform from pixel offsets to intermediate world coordinates,
    /// in degrees per pixel.
    pub cd: [[f64; 2]; 2],
}

impl WcsModel {
    pub fn new(crpix: [f64; 2], crval: [f64; 2], cd: [[f64; 2]; 2]) -> Result<Self> {
        let wcs = WcsModel { crpix, crval, cd };
        wcs.validate()?;
        Ok(wcs)
    }

    /// North-up, east-left TAN frame with square pixels of `scale_arcsec`.
    pub fn north_up(crpix: [f64; 2], crval: [f64; 2], scale_arcsec: f64) -> Result<Self> {
        let s = scale_arcsec / 3600.0;
        Self::new(crpix, crval, [[-s, 0.0], [0.0, s]])
    }

    pub fn det(&self) -> f64 {
        self.cd[0][0] * self.cd[1][1] - self.cd[0][1] * self.cd[1][0]
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .crpix
            .iter()
            .chain(self.crval.iter())
            .chain(self.cd.iter().flatten());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidWcs("non-finite value".into()));
        }
        let det = self.det();
        if det == 0.0 || !det.is_finite() {
            return Err(Error::InvalidWcs("det(cd) = 0".into()));
        }
        let [ra, dec] = self.crval;
        if !(-90.0..=90.0).contains(&dec) {
            return Err(Error::InvalidWcs(format!("dec {dec} outside [-90, 90]")));
        }
        if !(0.0..360.0).contains(&ra) {
            return Err(Error::InvalidWcs(format!("ra {ra} outside [0, 360)")));
        }
        Ok(())
    }

    /// Same frame, shifted so that pixel `(row, col)` becomes the first pixel.
    pub fn cropped(&self, row: usize, col: usize) -> WcsModel {
        WcsModel {
            crpix: [self.crpix[0] - col as f64, self.crpix[1] - row as f64],
            ..*self
        }
    }
}

impl Default for WcsModel {
    /// A 0.05"/px field at (ra, dec) = (150, 2) with the reference pixel at (1, 1).
    fn default() -> Self {
        let s = 0.05 / 3600.0;
        WcsModel {
            crpix: [1.0, 1.0],
            crval: [150.0, 2.0],
            cd: [[-s, 0.0], [0.0, s]],
        }
    }
}

/// A 2D flux raster with its calibration. NaN marks invalid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    width: usize,
    height: usize,
    data: Vec<f32>,
    wcs: WcsModel,
}

impl ImagePlane {
    pub fn new(width: usize, height: usize, data: Vec<f32>, wcs: WcsModel) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if width > u32::MAX as usize || height > u32::MAX as usize {
            return Err(Error::InvalidImage("dimensions exceed u32".into()));
        }
        if data.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "data length {} != {width}x{height}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| v.is_infinite()) {
            return Err(Error::InvalidImage(format!("infinite value at index {pos}")));
        }
        wcs.validate()?;
        Ok(ImagePlane {
            width,
            height,
            data,
            wcs,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32, wcs: WcsModel) -> Result<Self> {
        Self::new(width, height, vec![value; width * height], wcs)
    }

    pub fn from_fn(width: usize, height: usize, wcs: WcsModel, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                data.push(f(row, col));
            }
        }
        Self::new(width, height, data, wcs)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn wcs(&self) -> &WcsModel {
        &self.wcs
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.width..(row + 1) * self.width]
    }

    /// Replace the pixel payload, keeping dimensions and calibration.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::new(self.width, self.height, data, self.wcs)
    }

    pub fn with_wcs(&self, wcs: WcsModel) -> Result<Self> {
        wcs.validate()?;
        Ok(ImagePlane { wcs, ..self.clone() })
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|v| !v.is_nan()).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid_count() as f64 / self.data.len() as f64
    }

    /// Sum of valid pixels, accumulated in f64.
    pub fn sum(&self) -> f64 {
        self.data.iter().filter(|v| !v.is_nan()).map(|&v| v as f64).sum()
    }

    /// Sub-image of `height x width` pixels starting at `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, width: usize, height: usize) -> Result<Self> {
        if row + height > self.height || col + width > self.width {
            return Err(Error::DimMismatch(format!(
                "crop {width}x{height} at ({row}, {col}) exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width * height);
        for r in row..row + height {
            data.extend_from_slice(&self.row(r)[col..col + width]);
        }
        Self::new(width, height, data, self.wcs.cropped(row, col))
    }
}

/// One detected (or injected) celestial object.
///
/// Positions are 0-based pixel coordinates with pixel centers at integers:
/// `x` runs along columns, `y` along rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub id: u64,
    pub x: f64,
    pub y: f64,
    /// Semi-major axis, pixels.
    pub a: f64,
    /// Semi-minor axis, pixels.
    pub b: f64,
    /// Position angle of the major axis in radians, counter-clockwise from +x,
    /// in (-pi/2, pi/2].
    pub theta: f64,
    pub flux: f64,
}

impl SourceRecord {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::InvalidSource { id: self.id, reason };
        for (name, v) in [
            ("x", self.x),
            ("y", self.y),
            ("a", self.a),
            ("b", self.b),
            ("theta", self.theta),
            ("flux", self.flux),
        ] {
            if !v.is_finite() {
                return Err(fail(format!("{name} is not finite")));
            }
        }
        if !(self.a >= self.b && self.b > 0.0) {
            return Err(fail(format!("need a >= b > 0, got a={} b={}", self.a, self.b)));
        }
        Ok(())
    }

    pub fn validate_in(&self, width: usize, height: usize) -> Result<()> {
        self.validate()?;
        if !(0.0..width as f64).contains(&self.x) || !(0.0..height as f64).contains(&self.y) {
            return Err(Error::InvalidSource {
                id: self.id,
                reason: format!("centroid ({}, {}) outside {width}x{height}", self.x, self.y),
            });
        }
        Ok(())
    }

    /// The same source expressed on a grid downscaled by `scale` (pixel centers
    /// of the coarse grid at `scale * i + (scale - 1) / 2` on the fine grid).
    pub fn rescaled(&self, scale: usize) -> SourceRecord {
        let s = scale as f64;
        let off = (s - 1.0) / 2.0;
        SourceRecord {
            x: (self.x - off) / s,
            y: (self.y - off) / s,
            a: self.a / s,
            b: self.b / s,
            ..*self
        }
    }
}

/// Round f64 samples to f32 so the f32 total tracks the f64 total.
///
/// Each output is one of the two f32 neighbours of its input (so per-sample
/// error stays below one f32 ulp), chosen in order to keep the running rounding
/// error closest to zero. Exactly representable values are returned unchanged.
pub fn round_preserving_sum(values: &[f64]) -> Vec<f32> {
    let mut carry = 0.0f64;
    values
        .iter()
        .map(|&x| {
            let near = x as f32;
            if x.is_nan() || !near.is_finite() {
                return near;
            }
            let e_near = near as f64 - x;
            if e_near == 0.0 {
                return near;
            }
            let other = if e_near > 0.0 { near.next_down() } else { near.next_up() };
            let e_other = other as f64 - x;
            let pick = if (carry + e_other).abs() < (carry + e_near).abs() {
                other
            } else {
                near
            };
            carry += pick as f64 - x;
            pick
        })
        .collect()
}

/// Fold an angle into (-pi/2, pi/2]; ellipses are pi-periodic.
pub fn normalize_theta(theta: f64) -> f64 {
    let mut t = theta % PI;
    if t <= -FRAC_PI_2 {
        t += PI;
    } else if t > FRAC_PI_2 {
        t -= PI;
    }
    t
}

/// Provenance of one HR/LR training pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairManifest {
    pub hr_path: PathBuf,
    pub lr_path: PathBuf,
    pub scale: usize,
    pub psf: PsfSpec,
    /// `(row, col)` of the HR patch in its parent image.
    pub patch_origin: (usize, usize),
    /// Smaller of the HR and LR valid-pixel fractions.
    pub valid_fraction: f64,
}

#[derive(Serialize, Deserialize)]
struct SfiHeader {
    width: u64,
    height: u64,
    dtype: String,
    order: String,
    wcs: WcsModel,
}

/// Serialize an image into SFI bytes.
pub fn encode_image(img: &ImagePlane) -> Result<Vec<u8>> {
    let header = SfiHeader {
        width: img.width as u64,
        height: img.height as u64,
        dtype: "f32".into(),
        order: "row-major".into(),
        wcs: img.wcs,
    };
    let json = serde_json::to_vec(&header)?;
    let header_len =
        u32::try_from(json.len()).map_err(|_| Error::InvalidHeader("header longer than u32::MAX".into()))?;
    let mut out = Vec::with_capacity(8 + json.len() + 4 * img.data.len());
    out.extend_from_slice(&SFI_MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    for v in &img.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parse SFI bytes, validating every container invariant.
pub fn decode_image(bytes: &[u8]) -> Result<ImagePlane> {
    if bytes.len() < 8 {
        return Err(Error::InvalidHeader(format!(
            "file is {} bytes, shorter than the fixed preamble",
            bytes.len()
        )));
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[0..4]);
    if magic != SFI_MAGIC {
        return Err(Error::BadMagic {
            expected: SFI_MAGIC,
            found: magic,
        });
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let payload_start = 8usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::InvalidHeader("header length exceeds file size".into()))?;
    let header: SfiHeader = serde_json::from_slice(&bytes[8..payload_start])?;
    if header.dtype != "f32" {
        return Err(Error::InvalidHeader(format!("unsupported dtype {:?}", header.dtype)));
    }
    if header.order != "row-major" {
        return Err(Error::InvalidHeader(format!("unsupported order {:?}", header.order)));
    }
    let n = (header.width as usize)
        .checked_mul(header.height as usize)
        .ok_or_else(|| Error::InvalidHeader("dimensions overflow".into()))?;
    let payload = &bytes[payload_start..];
    if payload.len() != n * 4 {
        return Err(Error::LengthMismatch {
            expected: n * 4,
            found: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    ImagePlane::new(header.width as usize, header.height as usize, data, header.wcs)
}

pub fn write_image(img: &ImagePlane, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_image(img)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<ImagePlane> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

pub fn write_catalog(sources: &[SourceRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_catalog_to(sources, file)
}

/// Write a catalog to any writer. f64 fields use the shortest representation
/// that parses back to the same value.
pub fn write_catalog_to(sources: &[SourceRecord], writer: impl Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(["id", "x", "y", "a", "b", "theta", "flux"])?;
    for s in sources {
        s.validate()?;
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::io("<catalog>", e))?;
    Ok(())
}

pub fn read_catalog(path: impl AsRef<Path>) -> Result<Vec<SourceRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_catalog_from(file)
}

pub fn read_catalog_from(reader: impl std::io::Read) -> Result<Vec<SourceRecord>> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "x", "y", "a", "b", "theta", "flux"] {
        return Err(Error::InvalidHeader(format!(
            "catalog header must be id,x,y,a,b,theta,flux, got {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for rec in r.deserialize() {
        let s: SourceRecord = rec?;
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_manifest(entries: &[PairManifest], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = serde_json::to_vec_pretty(entries)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<PairManifest>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_preserving_rounding() {
        let vals: Vec<f64> = (0..10_000)
            .map(|i| 1.0 + (i as f64 * 0.7371).sin() * 1e-3 + 1.0 / 3.0)
            .collect();
        let exact: f64 = vals.iter().sum();
        let out = round_preserving_sum(&vals);
        let near: f64 = vals.iter().map(|&v| v as f32 as f64).sum();
        let kept: f64 = out.iter().map(|&v| v as f64).sum();
        assert!((kept - exact).abs() <= f32::EPSILON as f64 * 2.0);
        assert!((kept - exact).abs() <= (near - exact).abs());
        for (o, v) in out.iter().zip(&vals) {
            assert!(((*o as f64) - v).abs() <= (*v as f32).abs() as f64 * f32::EPSILON as f64);
        }
        assert_eq!(round_preserving_sum(&[0.5, 2.0, f64::NAN])[..2], [0.5, 2.0]);
        assert!(round_preserving_sum(&[f64::NAN])[0].is_nan());
    }

    fn tiny(value: f32) -> ImagePlane {
        ImagePlane::new(1, 1, vec![value], WcsModel::default()).unwrap()
    }

    #[test]
    fn one_pixel_layout() {
        let img = tiny(0.0);
        let bytes = encode_image(&img).unwrap();
        assert_eq!(&bytes[0..4], b"SFI1");
        let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 8 + h + 4);
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + h]).unwrap();
        assert_eq!(header["dtype"], "f32");
        assert_eq!(header["order"], "row-major");
        assert_eq!(header["width"], 1);
        assert_eq!(header["wcs"]["cd"][1][1], 0.05 / 3600.0);
        assert_eq!(decode_image(&bytes).unwrap(), img);
    }

    #[test]
    fn nan_payload_is_bitwise_preserved() {
        let weird = f32::from_bits(0x7fc0_1234);
        let img = ImagePlane::new(2, 1, vec![f32::NAN, weird], WcsModel::default()).unwrap();
        let back = decode_image(&encode_image(&img).unwrap()).unwrap();
        assert_eq!(back.data()[0].to_bits(), f32::NAN.to_bits());
        assert_eq!(back.data()[1].to_bits(), 0x7fc0_1234);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = encode_image(&tiny(1.0)).unwrap();
        bytes[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_image(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn rejects_truncated_payload() {
        let img = ImagePlane::filled(4, 4, 1.0, WcsModel::default()).unwrap();
        let bytes = encode_image(&img).unwrap();
        let err = decode_image(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(
            err,
            Error::LengthMismatch {
                expected: 64,
                found: 61
            }
        ));
    }

    #[test]
    fn rejects_singular_wcs_on_read() {
        let mut img_bytes = encode_image(&tiny(1.0)).unwrap();
        let h = u32::from_le_bytes(img_bytes[4..8].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&img_bytes[8..8 + h]).unwrap();
        header["wcs"]["cd"] = serde_json::json!([[1.0, 2.0], [2.0, 4.0]]);
        let json = serde_json::to_vec(&header).unwrap();
        let payload = img_bytes.split_off(8 + h);
        let mut bytes = b"SFI1".to_vec();
        bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&json);
        bytes.extend_from_slice(&payload);
        assert!(matches!(decode_image(&bytes), Err(Error::InvalidWcs(_))));
    }

    #[test]
    fn rejects_infinite_pixels() {
        assert!(ImagePlane::new(1, 1, vec![f32::INFINITY], WcsModel::default()).is_err());
        assert!(ImagePlane::new(0, 1, vec![], WcsModel::default()).is_err());
    }

    #[test]
    fn catalog_header_only_when_empty() {
        let mut buf = Vec::new();
        write_catalog_to(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "id,x,y,a,b,theta,flux\n");
        assert!(read_catalog_from(buf.as_slice()).unwrap().is_empty());
    }

    #[test]
    fn catalog_exact_roundtrip() {
        let s = SourceRecord {
            id: 1,
            x: 10.5,
            y: 20.25,
            a: 3.0,
            b: 1.5,
            theta: std::f64::consts::FRAC_PI_4,
            flux: 100.0,
        };
        let mut buf = Vec::new();
        write_catalog_to(&[s], &mut buf).unwrap();
        assert_eq!(read_catalog_from(buf.as_slice()).unwrap(), vec![s]);
    }

    #[test]
    fn catalog_rejects_a_less_than_b() {
        let text = "id,x,y,a,b,theta,flux\n1,1,1,1.0,2.0,0,5\n";
        assert!(matches!(
            read_catalog_from(text.as_bytes()),
            Err(Error::InvalidSource { id: 1, .. })
        ));
        let malformed = "id,x,y,a,b,theta,flux\n1,1,oops,1.0,2.0,0,5\n";
        assert!(matches!(read_catalog_from(malformed.as_bytes()), Err(Error::Csv(_))));
    }

    #[test]
    fn crop_shifts_reference_pixel() {
        let img = ImagePlane::from_fn(8, 6, WcsModel::default(), |r, c| (r * 8 + c) as f32).unwrap();
        let sub = img.crop(2, 3, 4, 3).unwrap();
        assert_eq!(sub.get(0, 0), img.get(2, 3));
        assert_eq!(sub.wcs().crpix, [1.0 - 3.0, 1.0 - 2.0]);
        assert!(img.crop(4, 0, 8, 3).is_err());
    }

    #[test]
    fn theta_folding() {
        assert_eq!(normalize_theta(FRAC_PI_2), FRAC_PI_2);
        assert!((normalize_theta(-FRAC_PI_2) - FRAC_PI_2).abs() < 1e-15);
        assert!((normalize_theta(PI + 0.25) - 0.25).abs() < 1e-15);
    }
}
