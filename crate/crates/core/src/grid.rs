use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Latent video token grid, `frames x height x width`.
///
/// Tokens are flattened frame-major, then row, then column:
/// `flat = (t * height + h) * width + w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct TokenGrid {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl TokenGrid {
    pub fn new(frames: usize, height: usize, width: usize) -> Result<Self> {
        let grid = TokenGrid { frames, height, width };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(CoreError::invalid("TokenGrid", format!("zero extent in {self:?}")));
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.frames * self.height * self.width
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, t: usize, h: usize, w: usize) -> usize {
        debug_assert!(t < self.frames && h < self.height && w < self.width);
        (t * self.height + h) * self.width + w
    }

    #[inline]
    pub fn coords(&self, flat: usize) -> (usize, usize, usize) {
        let w = flat % self.width;
        let rest = flat / self.width;
        (rest / self.height, rest % self.height, w)
    }

    /// Euclidean distance between two tokens in grid coordinates.
    pub fn distance(&self, a: usize, b: usize) -> f64 {
        let (ta, ha, wa) = self.coords(a);
        let (tb, hb, wb) = self.coords(b);
        let d = |x: usize, y: usize| x as f64 - y as f64;
        (d(ta, tb).powi(2) + d(ha, hb).powi(2) + d(wa, wb).powi(2)).sqrt()
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.frames, self.height, self.width]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn frame_major_order() {
        let g = TokenGrid::new(2, 3, 4).unwrap();
        assert_eq!(g.index(0, 0, 1), 1);
        assert_eq!(g.index(0, 1, 0), 4);
        assert_eq!(g.index(1, 0, 0), 12);
        assert_eq!(g.coords(23), (1, 2, 3));
        assert!(TokenGrid::new(0, 1, 1).is_err());
    }

    proptest! {
        #[test]
        fn coords_roundtrip(f in 1usize..6, h in 1usize..6, w in 1usize..6, seed in 0usize..1000) {
            let g = TokenGrid::new(f, h, w).unwrap();
            let flat = seed % g.len();
            let (t, y, x) = g.coords(flat);
            prop_assert_eq!(g.index(t, y, x), flat);
        }
    }
}
