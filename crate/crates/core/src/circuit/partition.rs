//! Bounding boxes for image-structured circuits.

use serde::{Deserialize, Serialize};

use super::{NodeId, NodeKind};
use crate::scalar::Real;
use crate::Circuit;

/// Half-open pixel rectangle `[row, row + height) × [col, col + width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn new(row: usize, col: usize, height: usize, width: usize) -> Self {
        Self { row, col, height, width }
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, other: &Rect) -> bool {
        other.row >= self.row
            && other.col >= self.col
            && other.row + other.height <= self.row + self.height
            && other.col + other.width <= self.col + self.width
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.row < other.row + other.height
            && other.row < self.row + self.height
            && self.col < other.col + other.width
            && other.col < self.col + self.width
    }

    /// Top and bottom halves (the top gets the smaller half).
    pub fn split_rows(&self) -> Option<(Rect, Rect)> {
        (self.height >= 2).then(|| {
            let h = self.height / 2;
            (
                Rect::new(self.row, self.col, h, self.width),
                Rect::new(self.row + h, self.col, self.height - h, self.width),
            )
        })
    }

    /// Left and right halves.
    pub fn split_cols(&self) -> Option<(Rect, Rect)> {
        (self.width >= 2).then(|| {
            let w = self.width / 2;
            (
                Rect::new(self.row, self.col, self.height, w),
                Rect::new(self.row, self.col + w, self.height, self.width - w),
            )
        })
    }

    /// Row-major variable ids covered on a grid of the given width.
    pub fn vars(&self, grid_width: usize) -> impl Iterator<Item = u32> + '_ {
        (self.row..self.row + self.height)
            .flat_map(move |r| (self.col..self.col + self.width).map(move |c| (r * grid_width + c) as u32))
    }
}

/// Node id to bounding box for circuits over an image grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScopePartition {
    pub height: usize,
    pub width: usize,
    boxes: Vec<Option<Rect>>,
}

impl ScopePartition {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, boxes: Vec::new() }
    }

    pub fn set(&mut self, node: NodeId, rect: Rect) {
        let i = node as usize;
        if self.boxes.len() <= i {
            self.boxes.resize(i + 1, None);
        }
        self.boxes[i] = Some(rect);
    }

    pub fn box_of(&self, node: NodeId) -> Option<Rect> {
        self.boxes.get(node as usize).copied().flatten()
    }

    /// First product whose child boxes do not tile its own box exactly.
    pub fn check_tiling<T: Real>(&self, c: &Circuit<T>) -> Result<(), NodeId> {
        for n in 0..c.num_nodes() as NodeId {
            if c.kind(n) != NodeKind::Product {
                continue;
            }
            let parent = self.box_of(n).ok_or(n)?;
            let kids: Option<Vec<Rect>> = c.children(n).iter().map(|&k| self.box_of(k)).collect();
            let kids = kids.ok_or(n)?;
            let inside = kids.iter().all(|k| parent.contains(k));
            let disjoint = kids.iter().enumerate().all(|(i, a)| kids[..i].iter().all(|b| !a.intersects(b)));
            let area: usize = kids.iter().map(Rect::area).sum();
            if !(inside && disjoint && area == parent.area()) {
                return Err(n);
            }
        }
        Ok(())
    }

    /// First node whose scope is not exactly the pixels of its box.
    pub fn check_scopes<T: Real>(&self, c: &Circuit<T>) -> Result<(), NodeId> {
        for n in 0..c.num_nodes() as NodeId {
            let b = self.box_of(n).ok_or(n)?;
            let mut want: Vec<u32> = b.vars(self.width).collect();
            want.sort_unstable();
            if c.scope(n).to_vec() != want {
                return Err(n);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halves_tile_the_parent() {
        let r = Rect::new(1, 2, 5, 3);
        let (a, b) = r.split_rows().unwrap();
        assert_eq!((a.height, b.height), (2, 3));
        assert!(r.contains(&a) && r.contains(&b) && !a.intersects(&b));
        let (l, rr) = r.split_cols().unwrap();
        assert_eq!(l.area() + rr.area(), r.area());
        assert!(Rect::new(0, 0, 1, 1).split_rows().is_none());
    }
}
