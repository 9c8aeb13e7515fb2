//! Occupancy-probability grid built from lidar scans at known pose.
//!
//! Cells hold `p` = probability of being occupied. A cell is occupied when
//! `p > 0.52`, free when `p < 0.48` and unknown otherwise. Scans update cells
//! in log-odds with an inverse sensor model and clamp to `[0.02, 0.98]`.
//!
//! On disk a grid is a binary PGM (`P5`, maxval 255, value = round(p * 255),
//! first image row = highest grid row so the picture is north-up) plus a JSON
//! sidecar carrying resolution and origin.

use std::collections::VecDeque;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Rect, Vec2};

pub const OCCUPIED_THRESHOLD: f64 = 0.52;
pub const FREE_THRESHOLD: f64 = 0.48;
pub const UNKNOWN_P: f64 = 0.5;
pub const P_MIN: f64 = 0.02;
pub const P_MAX: f64 = 0.98;
pub const LOGIT_HIT: f64 = 0.85;
pub const LOGIT_MISS: f64 = -0.4;
pub const MAP_SCHEMA: u32 = 1;

/// Grid coordinate. Ordering is row-major (`y` first), which matches the
/// linear cell index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub y: i32,
    pub x: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    pub fn neighbors8(self) -> impl Iterator<Item = Cell> {
        NEIGHBORS8
            .iter()
            .map(move |&(dx, dy)| Cell::new(self.x + dx, self.y + dy))
    }
}

pub const NEIGHBORS8: [(i32, i32); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellClass {
    Occupied,
    Free,
    Unknown,
}

pub fn classify_p(p: f64) -> CellClass {
    if p > OCCUPIED_THRESHOLD {
        CellClass::Occupied
    } else if p < FREE_THRESHOLD {
        CellClass::Free
    } else {
        CellClass::Unknown
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(l: f64) -> f64 {
    1.0 / (1.0 + (-l).exp())
}

/// Applies one log-odds increment to `p` and clamps the result.
pub fn log_odds_update(p: f64, delta: f64) -> f64 {
    let l = (logit(p) + delta).clamp(logit(P_MIN), logit(P_MAX));
    sigmoid(l).clamp(P_MIN, P_MAX)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    width: usize,
    height: usize,
    resolution: f64,
    origin: Vec2,
    cells: Vec<f64>,
}

impl OccupancyGrid {
    /// A fresh grid with every cell unknown.
    pub fn new(width: usize, height: usize, resolution: f64, origin: Vec2) -> Self {
        assert!(resolution > 0.0, "resolution must be positive");
        Self {
            width,
            height,
            resolution,
            origin,
            cells: vec![UNKNOWN_P; width * height],
        }
    }

    /// Smallest grid whose extent covers `bounds`.
    pub fn covering(bounds: &Rect, resolution: f64) -> Self {
        let w = (bounds.width() / resolution - 1e-9).ceil().max(1.0) as usize;
        let h = (bounds.height() / resolution - 1e-9).ceil().max(1.0) as usize;
        Self::new(w, h, resolution, bounds.min)
    }

    pub fn from_probabilities(
        width: usize,
        height: usize,
        resolution: f64,
        origin: Vec2,
        cells: Vec<f64>,
    ) -> Result<Self> {
        if cells.len() != width * height {
            return Err(Error::MapFormat(format!(
                "expected {} cells, got {}",
                width * height,
                cells.len()
            )));
        }
        if cells.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::MapFormat("probability outside [0, 1]".into()));
        }
        Ok(Self {
            width,
            height,
            resolution,
            origin,
            cells,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> Vec2 {
        self.origin
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn contains(&self, c: Cell) -> bool {
        c.x >= 0 && c.y >= 0 && (c.x as usize) < self.width && (c.y as usize) < self.height
    }

    pub fn index(&self, c: Cell) -> Option<usize> {
        self.contains(c)
            .then(|| c.y as usize * self.width + c.x as usize)
    }

    pub fn cell_at(&self, index: usize) -> Cell {
        Cell::new((index % self.width) as i32, (index / self.width) as i32)
    }

    pub fn p(&self, c: Cell) -> Option<f64> {
        self.index(c).map(|i| self.cells[i])
    }

    pub fn set(&mut self, c: Cell, p: f64) {
        let i = self.index(c).expect("cell outside grid");
        self.cells[i] = p.clamp(0.0, 1.0);
    }

    pub fn world_to_cell(&self, p: Vec2) -> Cell {
        Cell::new(
            ((p.x - self.origin.x) / self.resolution).floor() as i32,
            ((p.y - self.origin.y) / self.resolution).floor() as i32,
        )
    }

    pub fn cell_center(&self, c: Cell) -> Vec2 {
        Vec2::new(
            self.origin.x + (c.x as f64 + 0.5) * self.resolution,
            self.origin.y + (c.y as f64 + 0.5) * self.resolution,
        )
    }

    pub fn classify(&self, c: Cell) -> Option<CellClass> {
        self.p(c).map(classify_p)
    }

    pub fn classify_index(&self, i: usize) -> CellClass {
        classify_p(self.cells[i])
    }

    /// Folds one lidar sweep taken at `pose` into the grid.
    ///
    /// Beam `i` points along `pose.theta + 2*pi*i/n`. Cells a beam passes
    /// through move toward free; the terminal cell of a beam shorter than
    /// `max_range` moves toward occupied. Each cell is updated at most once
    /// per sweep and a hit wins over a miss.
    pub fn integrate_scan(&mut self, pose: Pose, ranges: &[f64], max_range: f64) -> Result<()> {
        let origin = pose.position();
        let start = self.world_to_cell(origin);
        if !self.contains(start) {
            return Err(Error::OutsideGrid {
                x: origin.x,
                y: origin.y,
            });
        }
        if ranges.is_empty() {
            return Ok(());
        }
        const HIT_NUDGE: f64 = 1e-3;
        const MISS: u8 = 1;
        const HIT: u8 = 2;
        let mut marks = vec![0u8; self.cells.len()];
        let n = ranges.len() as f64;
        let mut cells = Vec::new();
        for (i, &range) in ranges.iter().enumerate() {
            let dir = Vec2::from_angle(pose.theta + 2.0 * PI * i as f64 / n);
            let range = range.min(max_range);
            let hit = range < max_range;
            // a surface lying on a cell boundary belongs to the cell behind it
            let end = origin + dir * if hit { range + HIT_NUDGE * self.resolution } else { range };
            cells.clear();
            let truncated = self.traverse(origin, end, &mut cells);
            let last = cells.len().saturating_sub(1);
            for (k, c) in cells.iter().enumerate() {
                let idx = c.y as usize * self.width + c.x as usize;
                if k == last && hit && !truncated {
                    marks[idx] = HIT;
                } else if marks[idx] == 0 {
                    marks[idx] = MISS;
                }
            }
        }
        for (p, m) in self.cells.iter_mut().zip(&marks) {
            match *m {
                HIT => *p = log_odds_update(*p, LOGIT_HIT),
                MISS => *p = log_odds_update(*p, LOGIT_MISS),
                _ => {}
            }
        }
        Ok(())
    }

    /// Grid traversal from `a` to `b`, pushing every in-grid cell visited.
    /// Returns true when the walk left the grid before reaching `b`.
    fn traverse(&self, a: Vec2, b: Vec2, out: &mut Vec<Cell>) -> bool {
        let mut c = self.world_to_cell(a);
        let goal = self.world_to_cell(b);
        let d = b - a;
        let step_x = if d.x > 0.0 { 1 } else { -1 };
        let step_y = if d.y > 0.0 { 1 } else { -1 };
        let res = self.resolution;
        let next_boundary = |cell: i32, step: i32, origin: f64| {
            origin + (cell + if step > 0 { 1 } else { 0 }) as f64 * res
        };
        let mut t_max_x = if d.x != 0.0 {
            (next_boundary(c.x, step_x, self.origin.x) - a.x) / d.x
        } else {
            f64::INFINITY
        };
        let mut t_max_y = if d.y != 0.0 {
            (next_boundary(c.y, step_y, self.origin.y) - a.y) / d.y
        } else {
            f64::INFINITY
        };
        let t_dx = if d.x != 0.0 { res / d.x.abs() } else { f64::INFINITY };
        let t_dy = if d.y != 0.0 { res / d.y.abs() } else { f64::INFINITY };
        loop {
            if !self.contains(c) {
                return true;
            }
            out.push(c);
            if c == goal || (t_max_x > 1.0 && t_max_y > 1.0) {
                return false;
            }
            if t_max_x < t_max_y {
                c.x += step_x;
                t_max_x += t_dx;
            } else {
                c.y += step_y;
                t_max_y += t_dy;
            }
        }
    }

    /// Free cells with at least one unknown cell among their in-grid
    /// 8-neighbors, in row-major order.
    pub fn frontier_cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for i in 0..self.cells.len() {
            if self.classify_index(i) != CellClass::Free {
                continue;
            }
            let c = self.cell_at(i);
            if c.neighbors8()
                .any(|n| self.classify(n) == Some(CellClass::Unknown))
            {
                out.push(c);
            }
        }
        out
    }

    pub fn is_frontier(&self, c: Cell) -> bool {
        self.classify(c) == Some(CellClass::Free)
            && c.neighbors8()
                .any(|n| self.classify(n) == Some(CellClass::Unknown))
    }

    /// Map entropy in nats: `-sum p ln p` over all cells.
    pub fn entropy(&self) -> f64 {
        self.cells
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }

    /// 8-connected components of `cells` (which must lie in this grid).
    pub fn clusters(&self, cells: &[Cell]) -> Vec<Vec<Cell>> {
        let mut member = vec![false; self.cells.len()];
        for &c in cells {
            if let Some(i) = self.index(c) {
                member[i] = true;
            }
        }
        let mut seen = vec![false; self.cells.len()];
        let mut out = Vec::new();
        for &c in cells {
            let Some(i) = self.index(c) else { continue };
            if seen[i] {
                continue;
            }
            seen[i] = true;
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([c]);
            while let Some(cur) = queue.pop_front() {
                comp.push(cur);
                for n in cur.neighbors8() {
                    if let Some(j) = self.index(n) {
                        if member[j] && !seen[j] {
                            seen[j] = true;
                            queue.push_back(n);
                        }
                    }
                }
            }
            comp.sort();
            out.push(comp);
        }
        out
    }

    pub fn meta(&self) -> MapMeta {
        MapMeta {
            schema: MAP_SCHEMA,
            width: self.width,
            height: self.height,
            resolution: self.resolution,
            origin: [self.origin.x, self.origin.y],
        }
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        for row in (0..self.height).rev() {
            let start = row * self.width;
            out.extend(
                self.cells[start..start + self.width]
                    .iter()
                    .map(|p| (p * 255.0).round() as u8),
            );
        }
        out
    }

    pub fn from_pgm(bytes: &[u8], meta: &MapMeta) -> Result<Self> {
        if meta.schema != MAP_SCHEMA {
            return Err(Error::Schema {
                found: meta.schema,
                expected: MAP_SCHEMA,
            });
        }
        let image = decode_pgm(bytes)?;
        if image.width != meta.width || image.height != meta.height {
            return Err(Error::MapFormat(format!(
                "image is {}x{} but sidecar says {}x{}",
                image.width, image.height, meta.width, meta.height
            )));
        }
        let mut cells = vec![0.0; meta.width * meta.height];
        for (r, chunk) in image.pixels.chunks(meta.width).enumerate() {
            let row = meta.height - 1 - r;
            for (x, &v) in chunk.iter().enumerate() {
                cells[row * meta.width + x] = v as f64 / 255.0;
            }
        }
        Self::from_probabilities(
            meta.width,
            meta.height,
            meta.resolution,
            Vec2::new(meta.origin[0], meta.origin[1]),
            cells,
        )
    }
}

/// JSON sidecar accompanying a PGM map export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapMeta {
    pub schema: u32,
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    pub origin: [f64; 2],
}

pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Encodes an 8-bit binary PGM.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Decodes an 8-bit binary PGM (comments allowed in the header).
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let bad = |m: &str| Error::MapFormat(m.to_string());
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let num = |s: String| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let width = num(token()?)?;
    let height = num(token()?)?;
    if num(token()?)? != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    let data = &bytes[(pos + 1).min(bytes.len())..];
    if data.len() != width * height {
        return Err(bad("raster size does not match header"));
    }
    Ok(GrayImage {
        width,
        height,
        pixels: data.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification_thresholds() {
        assert_eq!(classify_p(0.5), CellClass::Unknown);
        assert_eq!(classify_p(0.53), CellClass::Occupied);
        assert_eq!(classify_p(0.47), CellClass::Free);
        assert_eq!(classify_p(0.48), CellClass::Unknown);
        assert_eq!(classify_p(0.52), CellClass::Unknown);
    }

    #[test]
    fn fresh_grid_is_unknown() {
        let g = OccupancyGrid::new(5, 4, 0.1, Vec2::ZERO);
        assert!(g.probabilities().iter().all(|&p| p == 0.5));
        assert!(g.frontier_cells().is_empty());
    }

    #[test]
    fn max_range_beam_frees_cells() {
        let mut g = OccupancyGrid::new(100, 100, 0.1, Vec2::ZERO);
        g.integrate_scan(Pose::new(5.0, 5.0, 0.3), &[3.0], 3.0)
            .unwrap();
        let touched: Vec<f64> = g.probabilities().iter().copied().filter(|&p| p != 0.5).collect();
        assert!(touched.len() >= 30);
        assert!(touched.iter().all(|&p| p < 0.5));
        assert!(g.probabilities().iter().all(|&p| p <= 0.5));
    }

    #[test]
    fn repeated_hits_follow_closed_form() {
        let mut g = OccupancyGrid::new(50, 50, 0.1, Vec2::ZERO);
        let pose = Pose::new(1.05, 2.55, 0.0);
        let target = g.world_to_cell(Vec2::new(2.05, 2.55));
        let mut prev = 0.5;
        for k in 1..=10 {
            g.integrate_scan(pose, &[1.0], 6.0).unwrap();
            let p = g.p(target).unwrap();
            let expected = (1.0 / (1.0 + (-(0.85 * k as f64).min(49f64.ln())).exp())).min(0.98);
            assert!((p - expected).abs() < 1e-12, "k={k}: {p} vs {expected}");
            assert!(p >= prev);
            prev = p;
        }
        assert!((prev - 0.98).abs() < 1e-12);
    }

    #[test]
    fn empty_scan_is_identity() {
        let mut g = OccupancyGrid::new(10, 10, 0.1, Vec2::ZERO);
        g.set(Cell::new(3, 3), 0.2);
        let before = g.clone();
        g.integrate_scan(Pose::new(0.5, 0.5, 0.0), &[], 6.0).unwrap();
        assert_eq!(g, before);
        assert_eq!(g.entropy(), before.entropy());
    }

    #[test]
    fn scan_outside_grid_rejected() {
        let mut g = OccupancyGrid::new(10, 10, 0.1, Vec2::ZERO);
        assert!(matches!(
            g.integrate_scan(Pose::new(-1.0, 0.5, 0.0), &[1.0], 6.0),
            Err(Error::OutsideGrid { .. })
        ));
    }

    #[test]
    fn beams_truncate_at_border() {
        let mut g = OccupancyGrid::new(10, 10, 0.1, Vec2::ZERO);
        // hit lies beyond the grid: nothing may be marked occupied
        g.integrate_scan(Pose::new(0.55, 0.55, 0.0), &[2.0], 6.0)
            .unwrap();
        assert!(g.probabilities().iter().all(|&p| p <= 0.5));
        assert!(g.p(Cell::new(9, 5)).unwrap() < 0.5);
    }

    #[test]
    fn entropy_of_uniform_grids() {
        let g = OccupancyGrid::new(10, 10, 0.1, Vec2::ZERO);
        assert!((g.entropy() - 100.0 * (-0.5 * 0.5f64.ln())).abs() < 1e-12);
        assert!((g.entropy() - 34.657359027997266).abs() < 1e-9);
        let g = OccupancyGrid::from_probabilities(4, 5, 0.1, Vec2::ZERO, vec![0.98; 20]).unwrap();
        assert!((g.entropy() - 20.0 * (-0.98 * 0.98f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn pgm_roundtrip_quantizes() {
        let mut g = OccupancyGrid::new(7, 3, 0.05, Vec2::new(-1.0, 2.0));
        g.set(Cell::new(0, 0), 0.98);
        g.set(Cell::new(6, 2), 0.02);
        let bytes = g.to_pgm();
        assert!(bytes.starts_with(b"P5\n7 3\n255\n"));
        // top image row is the highest grid row
        assert_eq!(bytes[11 + 6], (0.02f64 * 255.0).round() as u8);
        let back = OccupancyGrid::from_pgm(&bytes, &g.meta()).unwrap();
        for (a, b) in back.probabilities().iter().zip(g.probabilities()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        assert_eq!(back.origin(), g.origin());
    }

    #[test]
    fn clusters_split_components() {
        let g = OccupancyGrid::new(10, 10, 0.1, Vec2::ZERO);
        let cells = [
            Cell::new(0, 0),
            Cell::new(1, 1),
            Cell::new(5, 5),
            Cell::new(6, 5),
            Cell::new(9, 9),
        ];
        let comps = g.clusters(&cells);
        assert_eq!(comps.len(), 3);
        assert_eq!(comps[0], vec![Cell::new(0, 0), Cell::new(1, 1)]);
    }
}
