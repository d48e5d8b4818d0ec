//! Point-to-region lookup via a uniform grid over the map bounding box, plus
//! income-decile class assignment for regions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::SesRegion;

#[derive(Debug, Clone, Copy)]
struct BBox {
    min_x: f64,
    min_y: f64,
    max_x: f64,
    max_y: f64,
}

impl BBox {
    fn of_rings(rings: &[Vec<(f64, f64)>]) -> BBox {
        let mut b = BBox {
            min_x: f64::INFINITY,
            min_y: f64::INFINITY,
            max_x: f64::NEG_INFINITY,
            max_y: f64::NEG_INFINITY,
        };
        for ring in rings {
            for &(x, y) in ring {
                b.min_x = b.min_x.min(x);
                b.min_y = b.min_y.min(y);
                b.max_x = b.max_x.max(x);
                b.max_y = b.max_y.max(y);
            }
        }
        b
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min_x && x <= self.max_x && y >= self.min_y && y <= self.max_y
    }
}

/// Uniform lon/lat grid over the SES map. Each cell lists the regions whose
/// bounding boxes intersect it (a superset of true containment), in file
/// order, which is also the boundary tie-break order.
pub struct SpatialIndex {
    regions: Vec<SesRegion>,
    region_boxes: Vec<BBox>,
    bbox: BBox,
    cells_per_axis: usize,
    cells: Vec<Vec<u32>>,
}

impl SpatialIndex {
    pub fn build(regions: Vec<SesRegion>, cells_per_axis: usize) -> Result<Self> {
        if regions.is_empty() {
            return Err(Error::Spatial("no regions".into()));
        }
        let cells_per_axis = cells_per_axis.max(1);
        let region_boxes: Vec<BBox> = regions.iter().map(|r| BBox::of_rings(&r.rings)).collect();
        let mut bbox = BBox {
            min_x: f64::INFINITY,
            min_y: f64::INFINITY,
            max_x: f64::NEG_INFINITY,
            max_y: f64::NEG_INFINITY,
        };
        for b in &region_boxes {
            bbox.min_x = bbox.min_x.min(b.min_x);
            bbox.min_y = bbox.min_y.min(b.min_y);
            bbox.max_x = bbox.max_x.max(b.max_x);
            bbox.max_y = bbox.max_y.max(b.max_y);
        }
        let mut cells = vec![Vec::new(); cells_per_axis * cells_per_axis];
        let span_x = (bbox.max_x - bbox.min_x).max(f64::MIN_POSITIVE);
        let span_y = (bbox.max_y - bbox.min_y).max(f64::MIN_POSITIVE);
        let cell_of = |v: f64, min: f64, span: f64| -> usize {
            let t = ((v - min) / span * cells_per_axis as f64).floor() as isize;
            t.clamp(0, cells_per_axis as isize - 1) as usize
        };
        for (idx, b) in region_boxes.iter().enumerate() {
            let cx0 = cell_of(b.min_x, bbox.min_x, span_x);
            let cx1 = cell_of(b.max_x, bbox.min_x, span_x);
            let cy0 = cell_of(b.min_y, bbox.min_y, span_y);
            let cy1 = cell_of(b.max_y, bbox.min_y, span_y);
            for cy in cy0..=cy1 {
                for cx in cx0..=cx1 {
                    cells[cy * cells_per_axis + cx].push(idx as u32);
                }
            }
        }
        Ok(SpatialIndex {
            regions,
            region_boxes,
            bbox,
            cells_per_axis,
            cells,
        })
    }

    pub fn regions(&self) -> &[SesRegion] {
        &self.regions
    }

    /// Candidate region indices for a point (superset of containment).
    pub fn candidates(&self, lon: f64, lat: f64) -> &[u32] {
        if !self.bbox.contains(lon, lat) {
            return &[];
        }
        let n = self.cells_per_axis;
        let span_x = (self.bbox.max_x - self.bbox.min_x).max(f64::MIN_POSITIVE);
        let span_y = (self.bbox.max_y - self.bbox.min_y).max(f64::MIN_POSITIVE);
        let cx = (((lon - self.bbox.min_x) / span_x * n as f64).floor() as isize)
            .clamp(0, n as isize - 1) as usize;
        let cy = (((lat - self.bbox.min_y) / span_y * n as f64).floor() as isize)
            .clamp(0, n as isize - 1) as usize;
        &self.cells[cy * n + cx]
    }

    /// Region containing the point by even-odd ray casting. Boundary points
    /// resolve to the first containing region in file order; `None` outside
    /// every region.
    pub fn locate(&self, lon: f64, lat: f64) -> Option<&SesRegion> {
        self.locate_idx(lon, lat).map(|i| &self.regions[i])
    }

    pub fn locate_idx(&self, lon: f64, lat: f64) -> Option<usize> {
        for &idx in self.candidates(lon, lat) {
            let idx = idx as usize;
            if !self.region_boxes[idx].contains(lon, lat) {
                continue;
            }
            if region_contains(&self.regions[idx], lon, lat) {
                return Some(idx);
            }
        }
        None
    }

    /// Exhaustive scan over all regions, ignoring the grid. Used as the
    /// correctness oracle for `locate`.
    pub fn locate_bruteforce(&self, lon: f64, lat: f64) -> Option<usize> {
        self.regions
            .iter()
            .position(|r| region_contains(r, lon, lat))
    }
}

/// Even-odd containment across all rings; points exactly on a ring edge count
/// as inside so the file-order tie rule applies on shared borders.
pub fn region_contains(region: &SesRegion, lon: f64, lat: f64) -> bool {
    let mut inside = false;
    for ring in &region.rings {
        if on_ring_boundary(ring, lon, lat) {
            return true;
        }
        if point_in_ring(ring, lon, lat) {
            inside = !inside;
        }
    }
    inside
}

fn point_in_ring(ring: &[(f64, f64)], x: f64, y: f64) -> bool {
    let n = ring.len();
    if n < 3 {
        return false;
    }
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = ring[i];
        let (xj, yj) = ring[j];
        if (yi > y) != (yj > y) {
            let x_cross = (xj - xi) * (y - yi) / (yj - yi) + xi;
            if x < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn on_ring_boundary(ring: &[(f64, f64)], x: f64, y: f64) -> bool {
    let n = ring.len();
    if n < 2 {
        return false;
    }
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = ring[i];
        let (xj, yj) = ring[j];
        // exact colinearity and within the segment's bounding box
        let cross = (xj - xi) * (y - yi) - (yj - yi) * (x - xi);
        if cross == 0.0
            && x >= xi.min(xj)
            && x <= xi.max(xj)
            && y >= yi.min(yj)
            && y <= yi.max(yj)
        {
            return true;
        }
        j = i;
    }
    false
}

/// Mapping region -> decile class label in 1..=n_classes, labels ascending
/// with income.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecileAssignment {
    pub n_classes: usize,
    pub classes: BTreeMap<String, u8>,
    /// Income quantile cut points (n_classes + 1 edges).
    pub cut_points: Vec<f64>,
}

impl DecileAssignment {
    pub fn class_of(&self, region_id: &str) -> Option<u8> {
        self.classes.get(region_id).copied()
    }
}

/// Split regions into `n_classes` income bins.
///
/// Unweighted: regions sorted ascending by (income, region_id) and cut into
/// contiguous blocks as equal as possible, the remainder spread over the
/// first blocks. Weighted: cut points are weighted income quantiles, equal
/// incomes always share a class.
pub fn assign_deciles(
    regions: &[SesRegion],
    weights: Option<&BTreeMap<String, u64>>,
    n_classes: usize,
) -> Result<DecileAssignment> {
    for r in regions {
        if !r.income.is_finite() {
            return Err(Error::Decile(format!(
                "region {} has non-finite income",
                r.region_id
            )));
        }
    }
    match weights {
        None => assign_deciles_unweighted(regions, n_classes),
        Some(w) => assign_deciles_weighted(regions, w, n_classes),
    }
}

fn sorted_by_income(regions: &[SesRegion]) -> Vec<&SesRegion> {
    let mut v: Vec<&SesRegion> = regions.iter().collect();
    v.sort_by(|a, b| {
        a.income
            .partial_cmp(&b.income)
            .unwrap()
            .then_with(|| a.region_id.cmp(&b.region_id))
    });
    v
}

fn assign_deciles_unweighted(regions: &[SesRegion], n_classes: usize) -> Result<DecileAssignment> {
    let n = regions.len();
    if n < n_classes {
        return Err(Error::Decile(format!(
            "need at least {n_classes} regions, got {n}"
        )));
    }
    let sorted = sorted_by_income(regions);
    let base = n / n_classes;
    let rem = n % n_classes;
    let mut classes = BTreeMap::new();
    let mut cut_points = vec![sorted[0].income];
    let mut pos = 0usize;
    for c in 0..n_classes {
        let size = base + usize::from(c < rem);
        for r in &sorted[pos..pos + size] {
            classes.insert(r.region_id.clone(), (c + 1) as u8);
        }
        pos += size;
        cut_points.push(sorted[pos.min(n) - 1].income);
    }
    Ok(DecileAssignment {
        n_classes,
        classes,
        cut_points,
    })
}

fn assign_deciles_weighted(
    regions: &[SesRegion],
    weights: &BTreeMap<String, u64>,
    n_classes: usize,
) -> Result<DecileAssignment> {
    let sorted = sorted_by_income(regions);
    let total: u64 = sorted
        .iter()
        .map(|r| weights.get(&r.region_id).copied().unwrap_or(0))
        .sum();
    if (total as usize) < n_classes {
        return Err(Error::Decile(format!(
            "total weight {total} below {n_classes}"
        )));
    }
    let mut classes = BTreeMap::new();
    let mut cut_points = vec![sorted[0].income];
    let mut cum = 0u64;
    let mut last_class = 1u8;
    let mut i = 0usize;
    while i < sorted.len() {
        // group of equal incomes shares one class
        let mut j = i;
        let mut group_w = 0u64;
        while j < sorted.len() && sorted[j].income == sorted[i].income {
            group_w += weights.get(&sorted[j].region_id).copied().unwrap_or(0);
            j += 1;
        }
        let mid = cum as f64 + group_w as f64 / 2.0;
        let mut class = (mid / total as f64 * n_classes as f64).floor() as i64 + 1;
        class = class.clamp(last_class as i64, n_classes as i64);
        for r in &sorted[i..j] {
            classes.insert(r.region_id.clone(), class as u8);
        }
        while last_class < class as u8 {
            cut_points.push(sorted[i].income);
            last_class += 1;
        }
        cum += group_w;
        i = j;
    }
    while cut_points.len() < n_classes + 1 {
        cut_points.push(sorted.last().unwrap().income);
    }
    Ok(DecileAssignment {
        n_classes,
        classes,
        cut_points,
    })
}
