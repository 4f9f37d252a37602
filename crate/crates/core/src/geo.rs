use serde::{Deserialize, Serialize};

/// Planar position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64) -> Self {
        Position { x, y }
    }

    pub fn distance_sq(&self, other: &Position) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    pub fn distance(&self, other: &Position) -> f64 {
        self.distance_sq(other).sqrt()
    }
}

/// Axis-aligned rectangle, half-open on the right/top edges except where it
/// touches the area boundary (see [`Rect::contains_closed`]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x1: f64,
    pub x2: f64,
    pub y1: f64,
    pub y2: f64,
}

impl Rect {
    pub fn new(x1: f64, x2: f64, y1: f64, y2: f64) -> Self {
        Rect { x1, x2, y1, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Position {
        Position::new((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn contains_closed(&self, p: &Position) -> bool {
        p.x >= self.x1 && p.x <= self.x2 && p.y >= self.y1 && p.y <= self.y2
    }

    /// Euclidean distance from `p` to the nearest point of the rectangle (0 inside).
    pub fn distance_to(&self, p: &Position) -> f64 {
        let dx = if p.x < self.x1 {
            self.x1 - p.x
        } else if p.x > self.x2 {
            p.x - self.x2
        } else {
            0.0
        };
        let dy = if p.y < self.y1 {
            self.y1 - p.y
        } else if p.y > self.y2 {
            p.y - self.y2
        } else {
            0.0
        };
        (dx * dx + dy * dy).sqrt()
    }
}
