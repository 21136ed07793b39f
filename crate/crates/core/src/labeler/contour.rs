//! Outer-border following over pixel centers with simple chain approximation.
//!
//! The tracer starts at the first foreground pixel in raster order and walks
//! the 8-connected outer border (Suzuki-Abe style), then keeps only the pixels
//! where the chain direction changes.

use thiserror::Error;

use crate::raster::{BinaryMask, BoundingBox, Polygon};

use super::components::fit_bbox;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ContourError {
    #[error("mask has no foreground")]
    Empty,
    /// The border collapses to fewer than three vertices (a single pixel or a
    /// one-pixel-wide line); only a box can describe it.
    #[error("component too thin for a polygon; bbox {0:?}")]
    Degenerate(BoundingBox),
}

/// Chain codes, counter-clockwise on screen starting east.
const DIRS: [(i64, i64); 8] = [
    (1, 0),
    (1, -1),
    (0, -1),
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

fn dir_index(from: (i64, i64), to: (i64, i64)) -> usize {
    let d = (to.0 - from.0, to.1 - from.1);
    DIRS.iter()
        .position(|&x| x == d)
        .expect("consecutive border pixels are 8-neighbors")
}

/// Raw border pixel chain of the region containing the first foreground
/// pixel. A lone pixel yields a one-element chain.
pub fn border_chain(m: &BinaryMask) -> Option<Vec<(i64, i64)>> {
    let (sx, sy) = m.foreground().next()?;
    let start = (sx as i64, sy as i64);
    let fg = |p: (i64, i64)| m.get_or_bg(p.0, p.1);
    let step = |p: (i64, i64), d: usize| (p.0 + DIRS[d].0, p.1 + DIRS[d].1);

    // Clockwise from west: the first neighbor found anchors termination.
    let first = (0..8)
        .map(|k| (4 + 8 - k) % 8)
        .map(|d| step(start, d))
        .find(|&p| fg(p));
    let Some(first) = first else {
        return Some(vec![start]);
    };

    let mut chain = Vec::new();
    let mut prev = first;
    let mut cur = start;
    loop {
        let back = dir_index(cur, prev);
        let next = (1..=8)
            .map(|k| step(cur, (back + k) % 8))
            .find(|&p| fg(p))
            .expect("a pixel with a neighbor always finds one");
        chain.push(cur);
        if next == start && cur == first {
            break;
        }
        prev = cur;
        cur = next;
    }
    Some(chain)
}

/// Keeps chain pixels where the incoming and outgoing moves differ, starting
/// from the first such pixel in chain order.
pub fn approximate_chain(chain: &[(i64, i64)]) -> Vec<(i64, i64)> {
    let n = chain.len();
    if n < 2 {
        return chain.to_vec();
    }
    (0..n)
        .filter(|&i| {
            let before = chain[(i + n - 1) % n];
            let after = chain[(i + 1) % n];
            dir_index(before, chain[i]) != dir_index(chain[i], after)
        })
        .map(|i| chain[i])
        .collect()
}

/// Outer contour of a single-component mask as a counter-clockwise polygon.
pub fn trace_contour(component: &BinaryMask) -> Result<Polygon, ContourError> {
    let chain = border_chain(component).ok_or(ContourError::Empty)?;
    let vertices = approximate_chain(&chain);
    if vertices.len() < 3 {
        let bbox = fit_bbox(component).ok_or(ContourError::Empty)?;
        return Err(ContourError::Degenerate(bbox));
    }
    Ok(Polygon::from_pixels(&vertices).expect("at least three vertices"))
}
