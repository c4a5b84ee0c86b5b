//! Footprint overlap plan between an HR grid and an LR grid.
//!
//! HR pixel corners are projected into LR pixel coordinates. Each projected HR
//! quadrilateral is clipped against the LR pixel squares it touches; the
//! clipped planar area (in LR pixels, where one LR pixel has area 1) is
//! rescaled to steradians by the LR pixel's sky area.
//!
//! The plan is stored as compressed rows keyed by LR pixel index.
//!
//! ## SFP1 sidecar
//!
//! ```text
//! "SFP1"
//! u32 hr_width, u32 hr_height, u32 lr_width, u32 lr_height      (LE)
//! per LR pixel, row-major:  u32 count, then count x (u32 hr_index, f64 area_sr, f64 weight)
//! hr_width*hr_height f64 HR pixel areas, then lr_width*lr_height f64 LR pixel areas
//! ```

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::clip::{clip_to_rect, shoelace_area, Point};
use super::{pixel_area, pixel_to_unit, unit_to_pixel};
use crate::error::{Error, Result};
use crate::image_store::WcsModel;

pub const PLAN_MAGIC: [u8; 4] = *b"SFP1";

/// Overlaps smaller than this fraction of the HR pixel area are dropped as
/// clipping noise.
pub const DEGENERATE_OVERLAP: f64 = 1e-12;

/// One HR contribution to an LR pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanEntry {
    pub hr_index: u32,
    /// Overlap sky area in steradians.
    pub area: f64,
    /// `area / hr_pixel_area`.
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapEntry {
    pub hr_index: usize,
    pub lr_index: usize,
    pub area: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResamplePlan {
    hr_dims: (usize, usize),
    lr_dims: (usize, usize),
    offsets: Vec<usize>,
    entries: Vec<PlanEntry>,
    hr_area: Vec<f64>,
    lr_area: Vec<f64>,
}

impl ResamplePlan {
    /// `(width, height)` of the HR grid.
    pub fn hr_dims(&self) -> (usize, usize) {
        self.hr_dims
    }

    pub fn lr_dims(&self) -> (usize, usize) {
        self.lr_dims
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries contributing to LR pixel `lr_index` (the overlap set of that pixel).
    pub fn lr_row(&self, lr_index: usize) -> &[PlanEntry] {
        &self.entries[self.offsets[lr_index]..self.offsets[lr_index + 1]]
    }

    pub fn hr_area(&self, hr_index: usize) -> f64 {
        self.hr_area[hr_index]
    }

    pub fn lr_area(&self, lr_index: usize) -> f64 {
        self.lr_area[lr_index]
    }

    pub fn iter(&self) -> impl Iterator<Item = OverlapEntry> + '_ {
        (0..self.lr_dims.0 * self.lr_dims.1).flat_map(move |i| {
            self.lr_row(i).iter().map(move |e| OverlapEntry {
                hr_index: e.hr_index as usize,
                lr_index: i,
                area: e.area,
                weight: e.weight,
            })
        })
    }

    /// Total overlap area assigned to each HR pixel, `sum_i A_ij`.
    pub fn hr_coverage(&self) -> Vec<f64> {
        let mut cov = vec![0.0; self.hr_area.len()];
        for e in &self.entries {
            cov[e.hr_index as usize] += e.area;
        }
        cov
    }
}

/// Maps 1-based HR pixel positions into 0-based LR pixel positions.
enum VertexMap {
    /// Both frames share the tangent point: the mapping is affine.
    Affine {
        m: [[f64; 2]; 2],
        hr: WcsModel,
        lr: WcsModel,
    },
    Sky {
        hr: WcsModel,
        lr: WcsModel,
    },
}

impl VertexMap {
    fn new(hr: &WcsModel, lr: &WcsModel) -> Self {
        if hr.crval == lr.crval {
            let det = lr.det();
            let inv = [
                [lr.cd[1][1] / det, -lr.cd[0][1] / det],
                [-lr.cd[1][0] / det, lr.cd[0][0] / det],
            ];
            let mut m = [[0.0; 2]; 2];
            for (r, row) in m.iter_mut().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = inv[r][0] * hr.cd[0][c] + inv[r][1] * hr.cd[1][c];
                }
            }
            VertexMap::Affine { m, hr: *hr, lr: *lr }
        } else {
            VertexMap::Sky { hr: *hr, lr: *lr }
        }
    }

    fn map(&self, u: f64, v: f64) -> Option<Point> {
        match self {
            VertexMap::Affine { m, hr, lr } => {
                let du = u - hr.crpix[0];
                let dv = v - hr.crpix[1];
                Some((
                    lr.crpix[0] + m[0][0] * du + m[0][1] * dv - 1.0,
                    lr.crpix[1] + m[1][0] * du + m[1][1] * dv - 1.0,
                ))
            }
            VertexMap::Sky { hr, lr } => {
                let d = pixel_to_unit(hr, u, v).ok()?;
                let (x, y) = unit_to_pixel(lr, d).ok()?;
                Some((x - 1.0, y - 1.0))
            }
        }
    }
}

fn area_grid(wcs: &WcsModel, (w, h): (usize, usize)) -> Vec<f64> {
    (0..h)
        .into_par_iter()
        .flat_map_iter(|r| (0..w).map(move |c| pixel_area(wcs, r, c)))
        .collect()
}

/// Build the overlap plan between an HR grid and an LR grid. Dimensions are
/// `(width, height)`.
pub fn footprint_overlaps(
    hr_wcs: &WcsModel,
    hr_dims: (usize, usize),
    lr_wcs: &WcsModel,
    lr_dims: (usize, usize),
) -> Result<ResamplePlan> {
    hr_wcs.validate()?;
    lr_wcs.validate()?;
    let (hw, hh) = hr_dims;
    let (lw, lh) = lr_dims;
    if hw == 0 || hh == 0 || lw == 0 || lh == 0 {
        return Err(Error::InvalidParam("grid dimensions must be positive".into()));
    }
    if hw * hh > u32::MAX as usize {
        return Err(Error::InvalidParam("HR grid too large for u32 indices".into()));
    }

    let map = VertexMap::new(hr_wcs, lr_wcs);
    // HR pixel corner (r, c) sits at 1-based HR coordinate (c + 0.5, r + 0.5).
    let vw = hw + 1;
    let vertices: Vec<Option<Point>> = (0..hh + 1)
        .into_par_iter()
        .flat_map_iter(|r| {
            let map = &map;
            (0..vw).map(move |c| map.map(c as f64 + 0.5, r as f64 + 0.5))
        })
        .collect();

    let hr_area = area_grid(hr_wcs, hr_dims);
    let lr_area = area_grid(lr_wcs, lr_dims);

    let rows: Vec<Vec<(u32, PlanEntry)>> = (0..hh)
        .into_par_iter()
        .map(|r| {
            let mut out = Vec::new();
            for c in 0..hw {
                let corners = [
                    vertices[r * vw + c],
                    vertices[r * vw + c + 1],
                    vertices[(r + 1) * vw + c + 1],
                    vertices[(r + 1) * vw + c],
                ];
                let Some(quad) = corners.into_iter().collect::<Option<Vec<Point>>>() else {
                    continue;
                };
                let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
                for &(x, y) in &quad {
                    xmin = xmin.min(x);
                    xmax = xmax.max(x);
                    ymin = ymin.min(y);
                    ymax = ymax.max(y);
                }
                let j0 = (xmin + 0.5).floor().max(0.0);
                let j1 = (xmax + 0.5).floor().min(lw as f64 - 1.0);
                let i0 = (ymin + 0.5).floor().max(0.0);
                let i1 = (ymax + 0.5).floor().min(lh as f64 - 1.0);
                if j0 > j1 || i0 > i1 {
                    continue;
                }
                let hr_index = r * hw + c;
                let a_hr = hr_area[hr_index];
                for li in i0 as usize..=i1 as usize {
                    for lj in j0 as usize..=j1 as usize {
                        let (x, y) = (lj as f64, li as f64);
                        let piece = clip_to_rect(&quad, x - 0.5, x + 0.5, y - 0.5, y + 0.5);
                        let lr_index = li * lw + lj;
                        let area = shoelace_area(&piece) * lr_area[lr_index];
                        if area < DEGENERATE_OVERLAP * a_hr {
                            continue;
                        }
                        out.push((
                            lr_index as u32,
                            PlanEntry {
                                hr_index: hr_index as u32,
                                area,
                                weight: area / a_hr,
                            },
                        ));
                    }
                }
            }
            out
        })
        .collect();

    let n_lr = lw * lh;
    let mut counts = vec![0usize; n_lr + 1];
    for (lr, _) in rows.iter().flatten() {
        counts[*lr as usize + 1] += 1;
    }
    for k in 1..=n_lr {
        counts[k] += counts[k - 1];
    }
    let offsets = counts.clone();
    let total = offsets[n_lr];
    if total == 0 {
        return Err(Error::EmptyPlan);
    }
    let mut cursor = counts;
    let mut entries = vec![
        PlanEntry {
            hr_index: 0,
            area: 0.0,
            weight: 0.0
        };
        total
    ];
    for (lr, e) in rows.into_iter().flatten() {
        let slot = &mut cursor[lr as usize];
        entries[*slot] = e;
        *slot += 1;
    }

    Ok(ResamplePlan {
        hr_dims,
        lr_dims,
        offsets,
        entries,
        hr_area,
        lr_area,
    })
}

pub fn write_plan(plan: &ResamplePlan, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(24 + plan.entries.len() * 20);
    out.extend_from_slice(&PLAN_MAGIC);
    for d in [plan.hr_dims.0, plan.hr_dims.1, plan.lr_dims.0, plan.lr_dims.1] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for i in 0..plan.lr_dims.0 * plan.lr_dims.1 {
        let row = plan.lr_row(i);
        out.extend_from_slice(&(row.len() as u32).to_le_bytes());
        for e in row {
            out.extend_from_slice(&e.hr_index.to_le_bytes());
            out.extend_from_slice(&e.area.to_le_bytes());
            out.extend_from_slice(&e.weight.to_le_bytes());
        }
    }
    for a in plan.hr_area.iter().chain(plan.lr_area.iter()) {
        out.extend_from_slice(&a.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_plan(path: impl AsRef<Path>) -> Result<ResamplePlan> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != PLAN_MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(magic);
        return Err(Error::BadMagic {
            expected: PLAN_MAGIC,
            found,
        });
    }
    let hw = cur.u32()? as usize;
    let hh = cur.u32()? as usize;
    let lw = cur.u32()? as usize;
    let lh = cur.u32()? as usize;
    let mut offsets = Vec::with_capacity(lw * lh + 1);
    offsets.push(0);
    let mut entries = Vec::new();
    for _ in 0..lw * lh {
        let n = cur.u32()? as usize;
        for _ in 0..n {
            entries.push(PlanEntry {
                hr_index: cur.u32()?,
                area: cur.f64()?,
                weight: cur.f64()?,
            });
        }
        offsets.push(entries.len());
    }
    let hr_area = (0..hw * hh).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
    let lr_area = (0..lw * lh).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
    if cur.pos != bytes.len() {
        return Err(Error::LengthMismatch {
            expected: cur.pos,
            found: bytes.len(),
        });
    }
    Ok(ResamplePlan {
        hr_dims: (hw, hh),
        lr_dims: (lw, lh),
        offsets,
        entries,
        hr_area,
        lr_area,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::LengthMismatch {
                expected: end,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hr_wcs() -> WcsModel {
        WcsModel::north_up([32.5, 32.5], [150.0, 2.0], 0.05).unwrap()
    }

    fn scaled(w: &WcsModel, s: f64, shift: (f64, f64)) -> WcsModel {
        WcsModel {
            crpix: [
                (w.crpix[0] - 0.5) / s + 0.5 + shift.0,
                (w.crpix[1] - 0.5) / s + 0.5 + shift.1,
            ],
            crval: w.crval,
            cd: [[w.cd[0][0] * s, w.cd[0][1] * s], [w.cd[1][0] * s, w.cd[1][1] * s]],
        }
    }

    #[test]
    fn identical_grids_give_identity() {
        let w = hr_wcs();
        let plan = footprint_overlaps(&w, (16, 12), &w, (16, 12)).unwrap();
        assert_eq!(plan.len(), 16 * 12);
        for e in plan.iter() {
            assert_eq!(e.hr_index, e.lr_index);
            assert!((e.weight - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn nested_grid_blocks() {
        let w = hr_wcs();
        let lr = scaled(&w, 2.0, (0.0, 0.0));
        let plan = footprint_overlaps(&w, (64, 64), &lr, (32, 32)).unwrap();
        for i in 0..32 * 32 {
            let (li, lj) = (i / 32, i % 32);
            let row = plan.lr_row(i);
            assert_eq!(row.len(), 4);
            for e in row {
                let (r, c) = (e.hr_index as usize / 64, e.hr_index as usize % 64);
                assert_eq!((r / 2, c / 2), (li, lj));
                assert!((e.weight - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn half_pixel_shift_nine_neighbours() {
        let w = hr_wcs();
        // shifting the LR grid by a quarter LR pixel = half an HR pixel
        let lr = scaled(&w, 2.0, (0.25, 0.25));
        let plan = footprint_overlaps(&w, (64, 64), &lr, (31, 31)).unwrap();
        let i = 10 * 31 + 10;
        let mut weights: Vec<f64> = plan.lr_row(i).iter().map(|e| e.weight).collect();
        weights.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert_eq!(weights.len(), 9);
        let expect = [1.0, 0.5, 0.5, 0.5, 0.5, 0.25, 0.25, 0.25, 0.25];
        for (w, e) in weights.iter().zip(expect) {
            assert!((w - e).abs() < 1e-6, "{weights:?}");
        }
        let covered: f64 = plan
            .lr_row(i)
            .iter()
            .map(|e| e.weight * plan.hr_area(e.hr_index as usize))
            .sum();
        assert!((covered - plan.lr_area(i)).abs() / plan.lr_area(i) < 1e-9);
    }

    #[test]
    fn disjoint_grids_give_empty_plan() {
        let w = hr_wcs();
        let mut far = w;
        far.crpix = [5000.5, 5000.5];
        assert!(matches!(
            footprint_overlaps(&w, (8, 8), &far, (8, 8)),
            Err(Error::EmptyPlan)
        ));
    }

    #[test]
    fn plan_sidecar_roundtrip() {
        let w = hr_wcs();
        let lr = scaled(&w, 2.0, (0.1, -0.2));
        let plan = footprint_overlaps(&w, (12, 10), &lr, (6, 5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("plan.sfp");
        write_plan(&plan, &p).unwrap();
        assert_eq!(read_plan(&p).unwrap(), plan);
    }
}
