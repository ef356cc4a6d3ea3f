//! Small geometry helpers shared by the simulator and the model.

use serde::{Deserialize, Serialize};

/// A point in world coordinates, meters. `z` is up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dist(&self, other: &Point3) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    /// Horizontal (x, y) distance, ignoring z.
    pub fn dist_xy(&self, other: &Point3) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        (dx * dx + dy * dy).sqrt()
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

/// Integer grid cell. `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }
}

/// Normalize an angle into [-pi, pi). Values already in range pass through
/// unchanged so exact headings survive.
pub fn wrap_angle(a: f64) -> f64 {
    if (-std::f64::consts::PI..std::f64::consts::PI).contains(&a) {
        return a;
    }
    let two_pi = std::f64::consts::TAU;
    let mut r = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if r >= std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Smallest absolute difference between two angles.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}

/// Half-open cell rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellRect {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl CellRect {
    pub fn contains(&self, c: Cell) -> bool {
        c.x >= self.x0 && c.x < self.x1 && c.y >= self.y0 && c.y < self.y1
    }

    pub fn width(&self) -> i32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> i32 {
        self.y1 - self.y0
    }

    /// Center of the rectangle in cell units.
    pub fn center_cells(&self) -> (f64, f64) {
        (
            (self.x0 + self.x1) as f64 / 2.0,
            (self.y0 + self.y1) as f64 / 2.0,
        )
    }
}

/// Cells crossed by the line between two cells, Bresenham order, endpoints included.
pub fn bresenham(a: Cell, b: Cell) -> Vec<Cell> {
    let mut out = Vec::new();
    let (mut x0, mut y0) = (a.x, a.y);
    let (x1, y1) = (b.x, b.y);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        out.push(Cell::new(x0, y0));
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_angle_range() {
        for k in -20..20 {
            let a = k as f64 * 0.7;
            let w = wrap_angle(a);
            assert!((-std::f64::consts::PI..std::f64::consts::PI).contains(&w), "{a} -> {w}");
            // same direction
            assert!((w.sin() - a.sin()).abs() < 1e-9);
            assert!((w.cos() - a.cos()).abs() < 1e-9);
        }
    }

    #[test]
    fn bresenham_endpoints() {
        let line = bresenham(Cell::new(0, 0), Cell::new(5, 2));
        assert_eq!(line.first(), Some(&Cell::new(0, 0)));
        assert_eq!(line.last(), Some(&Cell::new(5, 2)));
        // monotone in x
        for w in line.windows(2) {
            assert!(w[1].x >= w[0].x);
        }
    }

    #[test]
    fn bresenham_single() {
        assert_eq!(bresenham(Cell::new(3, 3), Cell::new(3, 3)), vec![Cell::new(3, 3)]);
    }
}
