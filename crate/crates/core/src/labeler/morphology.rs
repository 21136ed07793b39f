//! Binary erosion, dilation, opening and closing with square structuring
//! elements.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::BinaryMask;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MorphologyError {
    #[error("structuring element side must be odd and >= 1, got {0}")]
    EvenSide(usize),
    #[error("structuring element needs {expected} cells, got {actual}")]
    CellCount { expected: usize, actual: usize },
}

/// Odd-sided square structuring element anchored at its center.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "StructuringElementRepr", into = "StructuringElementRepr")]
pub struct StructuringElement {
    side: usize,
    cells: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct StructuringElementRepr {
    side: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cells: Option<Vec<bool>>,
}

impl TryFrom<StructuringElementRepr> for StructuringElement {
    type Error = MorphologyError;

    fn try_from(r: StructuringElementRepr) -> Result<Self, Self::Error> {
        match r.cells {
            Some(cells) => Self::new(r.side, cells),
            None => Self::square(r.side),
        }
    }
}

impl From<StructuringElement> for StructuringElementRepr {
    fn from(se: StructuringElement) -> Self {
        let full = se.cells.iter().all(|&c| c);
        StructuringElementRepr {
            side: se.side,
            cells: (!full).then_some(se.cells),
        }
    }
}

impl StructuringElement {
    pub fn new(side: usize, cells: Vec<bool>) -> Result<Self, MorphologyError> {
        if side.is_multiple_of(2) {
            return Err(MorphologyError::EvenSide(side));
        }
        if cells.len() != side * side {
            return Err(MorphologyError::CellCount {
                expected: side * side,
                actual: cells.len(),
            });
        }
        Ok(Self { side, cells })
    }

    /// All-true square.
    pub fn square(side: usize) -> Result<Self, MorphologyError> {
        Self::new(side, vec![true; side * side])
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn radius(&self) -> usize {
        self.side / 2
    }

    /// Active offsets relative to the anchor.
    fn offsets(&self) -> Vec<(i64, i64)> {
        let r = self.radius() as i64;
        let mut out = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                let i = ((dy + r) as usize) * self.side + (dx + r) as usize;
                if self.cells[i] {
                    out.push((dx, dy));
                }
            }
        }
        out
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.cells.len();
        (0..n).all(|i| self.cells[i] == self.cells[n - 1 - i])
    }
}

impl Default for StructuringElement {
    fn default() -> Self {
        Self::square(3).expect("3 is odd")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MorphologyParams {
    #[serde(default)]
    pub structuring_element: StructuringElement,
    #[serde(default = "one")]
    pub open_iterations: usize,
    #[serde(default = "one")]
    pub close_iterations: usize,
}

fn one() -> usize {
    1
}

impl Default for MorphologyParams {
    fn default() -> Self {
        Self {
            structuring_element: StructuringElement::default(),
            open_iterations: 1,
            close_iterations: 1,
        }
    }
}

/// Value assumed for pixels beyond the image edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Border {
    Background,
    Foreground,
}

impl Border {
    fn value(self) -> bool {
        matches!(self, Border::Foreground)
    }
}

fn sample(m: &BinaryMask, x: i64, y: i64, border: Border) -> bool {
    if x < 0 || y < 0 || x >= m.width() as i64 || y >= m.height() as i64 {
        border.value()
    } else {
        m.get(x as u32, y as u32)
    }
}

/// Pixel survives iff every active offset lands on foreground.
pub fn erode(m: &BinaryMask, se: &StructuringElement, border: Border) -> BinaryMask {
    let offsets = se.offsets();
    BinaryMask::from_fn(m.width(), m.height(), |x, y| {
        offsets
            .iter()
            .all(|&(dx, dy)| sample(m, x as i64 + dx, y as i64 + dy, border))
    })
    .expect("same dims")
}

/// Pixel is set iff some reflected offset lands on foreground.
pub fn dilate(m: &BinaryMask, se: &StructuringElement, border: Border) -> BinaryMask {
    let offsets = se.offsets();
    BinaryMask::from_fn(m.width(), m.height(), |x, y| {
        offsets
            .iter()
            .any(|&(dx, dy)| sample(m, x as i64 - dx, y as i64 - dy, border))
    })
    .expect("same dims")
}

fn pad(m: &BinaryMask, p: u32) -> BinaryMask {
    BinaryMask::from_fn(m.width() + 2 * p, m.height() + 2 * p, |x, y| {
        m.get_or_bg(x as i64 - p as i64, y as i64 - p as i64)
    })
    .expect("padded dims")
}

fn crop(m: &BinaryMask, p: u32, width: u32, height: u32) -> BinaryMask {
    BinaryMask::from_fn(width, height, |x, y| m.get(x + p, y + p)).expect("crop dims")
}

/// `iterations` erosions followed by as many dilations.
pub fn open(m: &BinaryMask, se: &StructuringElement, iterations: usize) -> BinaryMask {
    let mut out = m.clone();
    for _ in 0..iterations {
        out = erode(&out, se, Border::Background);
    }
    for _ in 0..iterations {
        out = dilate(&out, se, Border::Background);
    }
    out
}

/// `iterations` dilations followed by as many erosions, evaluated on a
/// background-padded canvas so shapes touching the edge are not clipped by the
/// erosion pass.
pub fn close(m: &BinaryMask, se: &StructuringElement, iterations: usize) -> BinaryMask {
    if iterations == 0 {
        return m.clone();
    }
    let p = (se.radius() * iterations) as u32;
    let mut out = pad(m, p);
    for _ in 0..iterations {
        out = dilate(&out, se, Border::Background);
    }
    for _ in 0..iterations {
        out = erode(&out, se, Border::Background);
    }
    crop(&out, p, m.width(), m.height())
}

/// Opening (speckle removal) then closing (hole filling).
pub fn refine_mask(m: &BinaryMask, params: &MorphologyParams) -> BinaryMask {
    let se = &params.structuring_element;
    let opened = open(m, se, params.open_iterations);
    close(&opened, se, params.close_iterations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn speckle_removed_by_opening() {
        let m = BinaryMask::from_ascii(&[".....", ".....", "..#..", ".....", "....."]).unwrap();
        let se = StructuringElement::default();
        assert_eq!(open(&m, &se, 1).count(), 0);
    }

    #[test]
    fn hole_filled_by_closing() {
        let m = BinaryMask::from_ascii(&[
            ".......", ".#####.", ".#####.", ".##.##.", ".#####.", ".#####.", ".......",
        ])
        .unwrap();
        let se = StructuringElement::default();
        let closed = close(&m, &se, 1);
        let mut solid = m.clone();
        solid.set(3, 3, true);
        assert_eq!(closed, solid);
    }

    #[test]
    fn closing_keeps_shapes_touching_the_edge() {
        let m = BinaryMask::from_ascii(&["###..", "###..", "###..", ".....", "....."]).unwrap();
        let se = StructuringElement::default();
        assert_eq!(close(&m, &se, 1), m);
        assert_eq!(refine_mask(&m, &MorphologyParams::default()), m);
    }

    #[test]
    fn refine_separates_thin_bridge() {
        let m = BinaryMask::from_ascii(&[
            "###....###",
            "###....###",
            "##########",
            "###....###",
            "###....###",
        ])
        .unwrap();
        let out = open(&m, &StructuringElement::default(), 1);
        assert!(!out.get(5, 2));
        assert!(out.get(1, 1) && out.get(8, 3));
    }

    #[test]
    fn element_validation() {
        assert_eq!(
            StructuringElement::square(4).unwrap_err(),
            MorphologyError::EvenSide(4)
        );
        assert!(StructuringElement::new(3, vec![true; 8]).is_err());
        let p: MorphologyParams = serde_json::from_str(r#"{"structuring_element":{"side":5}}"#).unwrap();
        assert_eq!(p.structuring_element.side(), 5);
        assert_eq!(p.open_iterations, 1);
    }

    fn mask() -> impl Strategy<Value = BinaryMask> {
        (1u32..20, 1u32..20).prop_flat_map(|(w, h)| {
            proptest::collection::vec(any::<bool>(), (w * h) as usize)
                .prop_map(move |b| BinaryMask::new(w, h, b).unwrap())
        })
    }

    /// Reference erosion written directly from the set definition.
    fn erode_ref(m: &BinaryMask, r: i64, outside: bool) -> BinaryMask {
        BinaryMask::from_fn(m.width(), m.height(), |x, y| {
            let mut ok = true;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (px, py) = (x as i64 + dx, y as i64 + dy);
                    let inside = px >= 0 && py >= 0 && px < m.width() as i64 && py < m.height() as i64;
                    let v = if inside { m.get(px as u32, py as u32) } else { outside };
                    ok &= v;
                }
            }
            ok
        })
        .unwrap()
    }

    proptest! {
        #[test]
        fn duality(m in mask(), side in prop_oneof![Just(1usize), Just(3), Just(5)]) {
            let se = StructuringElement::square(side).unwrap();
            let lhs = dilate(&m.complement(), &se, Border::Foreground);
            let rhs = erode(&m, &se, Border::Background).complement();
            prop_assert_eq!(lhs, rhs);
            let lhs = dilate(&m.complement(), &se, Border::Background);
            let rhs = erode(&m, &se, Border::Foreground).complement();
            prop_assert_eq!(lhs, rhs);
            prop_assert_eq!(erode(&m, &se, Border::Background), erode_ref(&m, se.radius() as i64, false));
        }

        #[test]
        fn refine_idempotent(m in mask()) {
            let p = MorphologyParams::default();
            let se = &p.structuring_element;
            let o = open(&m, se, 1);
            prop_assert_eq!(open(&o, se, 1), o.clone());
            let c = close(&m, se, 1);
            prop_assert_eq!(close(&c, se, 1), c);
            let r = refine_mask(&m, &p);
            prop_assert_eq!(refine_mask(&r, &p), r);
        }
    }
}
