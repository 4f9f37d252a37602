use crate::geo::Position;
use crate::NodeId;

/// Uniform bucket grid with cell size equal to the radio range, so every
/// in-range peer lies in the 3x3 block of cells around a node.
pub struct SpatialGrid {
    cell: f64,
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<NodeId>>,
}

impl SpatialGrid {
    pub fn new(width: f64, height: f64, cell: f64) -> Self {
        let cols = ((width / cell).ceil() as usize).max(1);
        let rows = ((height / cell).ceil() as usize).max(1);
        SpatialGrid {
            cell,
            cols,
            rows,
            buckets: vec![Vec::new(); cols * rows],
        }
    }

    fn cell_of(&self, p: &Position) -> (usize, usize) {
        let cx = ((p.x / self.cell).floor().max(0.0) as usize).min(self.cols - 1);
        let cy = ((p.y / self.cell).floor().max(0.0) as usize).min(self.rows - 1);
        (cx, cy)
    }

    pub fn rebuild(&mut self, positions: &[Position], alive: &[bool]) {
        for b in &mut self.buckets {
            b.clear();
        }
        for (i, p) in positions.iter().enumerate() {
            if !alive[i] {
                continue;
            }
            let (cx, cy) = self.cell_of(p);
            self.buckets[cy * self.cols + cx].push(NodeId(i as u32));
        }
    }

    /// Candidate peers (unfiltered by distance) around `p`, in bucket order.
    pub fn candidates<'a>(&'a self, p: &Position) -> impl Iterator<Item = NodeId> + 'a {
        let (cx, cy) = self.cell_of(p);
        let x0 = cx.saturating_sub(1);
        let x1 = (cx + 1).min(self.cols - 1);
        let y0 = cy.saturating_sub(1);
        let y1 = (cy + 1).min(self.rows - 1);
        (y0..=y1).flat_map(move |y| {
            (x0..=x1).flat_map(move |x| self.buckets[y * self.cols + x].iter().copied())
        })
    }
}
