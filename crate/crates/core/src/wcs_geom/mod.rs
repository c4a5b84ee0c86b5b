//! Pixel-to-sky mapping, pixel footprints on the celestial sphere and the
//! HR/LR footprint overlap plan used by flux-conserving resampling.

mod clip;
mod plan;
mod sphere;

pub use clip::{clip_to_rect, shoelace_area, Point};
pub use plan::{footprint_overlaps, read_plan, write_plan, OverlapEntry, PlanEntry, ResamplePlan};
pub use sphere::{angle_sum_excess, spherical_polygon_area, spherical_quad_area, tangent_polygon_area};

use crate::error::{Error, Result};
use crate::image_store::WcsModel;

pub type Vec3 = [f64; 3];

#[inline]
pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn radec_to_unit(ra_deg: f64, dec_deg: f64) -> Vec3 {
    let (ra, dec) = (ra_deg.to_radians(), dec_deg.to_radians());
    [dec.cos() * ra.cos(), dec.cos() * ra.sin(), dec.sin()]
}

/// `(ra, dec)` in degrees, ra folded into [0, 360).
pub fn unit_to_radec(v: Vec3) -> (f64, f64) {
    let dec = v[2].atan2(v[0].hypot(v[1]));
    let mut ra = v[1].atan2(v[0]).to_degrees();
    if ra < 0.0 {
        ra += 360.0;
    }
    if ra >= 360.0 {
        ra -= 360.0;
    }
    (ra, dec.to_degrees())
}

/// Orthonormal basis of the tangent plane at the reference point:
/// `(center, east, north)`.
fn tangent_basis(wcs: &WcsModel) -> (Vec3, Vec3, Vec3) {
    let (ra, dec) = (wcs.crval[0].to_radians(), wcs.crval[1].to_radians());
    let (sa, ca) = ra.sin_cos();
    let (sd, cd) = dec.sin_cos();
    ([cd * ca, cd * sa, sd], [-sa, ca, 0.0], [-sd * ca, -sd * sa, cd])
}

/// Standard (tangent-plane) coordinates in radians for a 1-based pixel position.
#[inline]
pub fn pixel_to_standard(wcs: &WcsModel, u: f64, v: f64) -> (f64, f64) {
    let du = u - wcs.crpix[0];
    let dv = v - wcs.crpix[1];
    let xi = (wcs.cd[0][0] * du + wcs.cd[0][1] * dv).to_radians();
    let eta = (wcs.cd[1][0] * du + wcs.cd[1][1] * dv).to_radians();
    (xi, eta)
}

#[inline]
pub fn standard_to_pixel(wcs: &WcsModel, xi: f64, eta: f64) -> (f64, f64) {
    let (x, y) = (xi.to_degrees(), eta.to_degrees());
    let det = wcs.det();
    let du = (wcs.cd[1][1] * x - wcs.cd[0][1] * y) / det;
    let dv = (-wcs.cd[1][0] * x + wcs.cd[0][0] * y) / det;
    (du + wcs.crpix[0], dv + wcs.crpix[1])
}

/// Unit direction on the sky of a 1-based pixel position.
pub fn pixel_to_unit(wcs: &WcsModel, u: f64, v: f64) -> Result<Vec3> {
    if !u.is_finite() || !v.is_finite() {
        return Err(Error::Projection(format!("non-finite pixel ({u}, {v})")));
    }
    let (xi, eta) = pixel_to_standard(wcs, u, v);
    let (c, e, n) = tangent_basis(wcs);
    let d = [
        c[0] + xi * e[0] + eta * n[0],
        c[1] + xi * e[1] + eta * n[1],
        c[2] + xi * e[2] + eta * n[2],
    ];
    let len = norm(d);
    Ok([d[0] / len, d[1] / len, d[2] / len])
}

/// TAN deprojection of a 1-based pixel position to `(ra, dec)` degrees.
pub fn pixel_to_sky(wcs: &WcsModel, u: f64, v: f64) -> Result<(f64, f64)> {
    if !u.is_finite() || !v.is_finite() {
        return Err(Error::Projection(format!("non-finite pixel ({u}, {v})")));
    }
    let (xi, eta) = pixel_to_standard(wcs, u, v);
    let (ra0, dec0) = (wcs.crval[0].to_radians(), wcs.crval[1].to_radians());
    let (sd0, cd0) = dec0.sin_cos();
    let denom = cd0 - eta * sd0;
    let dra = xi.atan2(denom);
    let dec = (sd0 + eta * cd0).atan2(xi.hypot(denom));
    let mut ra = (ra0 + dra).to_degrees();
    ra = ra.rem_euclid(360.0);
    if ra >= 360.0 {
        ra -= 360.0;
    }
    Ok((ra, dec.to_degrees()))
}

/// Project a sky direction into 1-based pixel coordinates. Fails for
/// directions on or behind the plane through the sphere center orthogonal to
/// the reference direction.
pub fn unit_to_pixel(wcs: &WcsModel, d: Vec3) -> Result<(f64, f64)> {
    let (c, e, n) = tangent_basis(wcs);
    let cz = dot(d, c);
    if !(cz > 0.0) {
        return Err(Error::Projection(
            "direction lies beyond the projection hemisphere".into(),
        ));
    }
    Ok(standard_to_pixel(wcs, dot(d, e) / cz, dot(d, n) / cz))
}

pub fn sky_to_pixel(wcs: &WcsModel, ra_deg: f64, dec_deg: f64) -> Result<(f64, f64)> {
    if !ra_deg.is_finite() || !dec_deg.is_finite() {
        return Err(Error::Projection("non-finite sky position".into()));
    }
    let (ra0, dec0) = (wcs.crval[0].to_radians(), wcs.crval[1].to_radians());
    let (ra, dec) = (ra_deg.to_radians(), dec_deg.to_radians());
    let (sd0, cd0) = dec0.sin_cos();
    let (sd, cd) = dec.sin_cos();
    let (sdra, cdra) = (ra - ra0).sin_cos();
    let cos_c = sd0 * sd + cd0 * cd * cdra;
    if !(cos_c > 0.0) {
        return Err(Error::Projection(
            "sky position lies beyond the projection hemisphere".into(),
        ));
    }
    let xi = cd * sdra / cos_c;
    let eta = (cd0 * sd - sd0 * cd * cdra) / cos_c;
    Ok(standard_to_pixel(wcs, xi, eta))
}

/// The receptive field of one pixel: a spherical quadrilateral whose corners
/// are counter-clockwise when viewed from outside the sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkyQuad {
    pub corners: [Vec3; 4],
}

impl SkyQuad {
    /// Build from four corners in boundary order, reorienting to CCW.
    pub fn new(mut corners: [Vec3; 4]) -> Result<Self> {
        for c in &corners {
            if (norm(*c) - 1.0).abs() > 1e-12 {
                return Err(Error::Degenerate("corner is not a unit vector".into()));
            }
        }
        let center = {
            let s = corners
                .iter()
                .fold([0.0; 3], |acc, c| [acc[0] + c[0], acc[1] + c[1], acc[2] + c[2]]);
            let l = norm(s);
            [s[0] / l, s[1] / l, s[2] / l]
        };
        let mut orient = 0.0;
        for k in 0..4 {
            let a = sub(corners[k], center);
            let b = sub(corners[(k + 1) % 4], center);
            orient += dot(center, cross(a, b));
        }
        if orient < 0.0 {
            corners.reverse();
        }
        Ok(SkyQuad { corners })
    }

    pub fn area(&self) -> Result<f64> {
        spherical_quad_area(self)
    }

    /// True when `d` lies inside the quad (all edge planes on the inner side).
    pub fn contains(&self, d: Vec3) -> bool {
        (0..4).all(|k| {
            let n = cross(self.corners[k], self.corners[(k + 1) % 4]);
            dot(n, d) >= 0.0
        })
    }
}

/// Pixel-coordinate corners of pixel `(row, col)` (0-based), in boundary order,
/// expressed in 1-based FITS pixel coordinates.
pub fn pixel_corners(row: usize, col: usize) -> [(f64, f64); 4] {
    let (x0, y0) = (col as f64 + 0.5, row as f64 + 0.5);
    [(x0, y0), (x0 + 1.0, y0), (x0 + 1.0, y0 + 1.0), (x0, y0 + 1.0)]
}

/// Footprint on the sky of pixel `(row, col)`.
pub fn pixel_footprint(wcs: &WcsModel, row: usize, col: usize) -> Result<SkyQuad> {
    let pc = pixel_corners(row, col);
    let mut corners = [[0.0; 3]; 4];
    for (dst, (u, v)) in corners.iter_mut().zip(pc) {
        *dst = pixel_to_unit(wcs, u, v)?;
    }
    SkyQuad::new(corners)
}

/// Sky area of pixel `(row, col)` in steradians, evaluated from tangent-plane
/// coordinates (no round trip through unit vectors).
pub fn pixel_area(wcs: &WcsModel, row: usize, col: usize) -> f64 {
    let pts = pixel_corners(row, col).map(|(u, v)| pixel_to_standard(wcs, u, v));
    tangent_polygon_area(&pts)
}
