use crate::error::{Error, Result};
use std::fmt;

/// Rank-4 extents in (batch, channel, height, width) order.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    /// Scalar shape used by loss values.
    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    /// Total element count. Panics on overflow; use [`Shape::checked_len`]
    /// when extents come from untrusted input.
    pub fn len(&self) -> usize {
        self.checked_len()
            .unwrap_or_else(|_| panic!("size error: extents {self} overflow addressable size"))
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0
    }

    pub fn checked_len(&self) -> Result<usize> {
        self.n
            .checked_mul(self.c)
            .and_then(|x| x.checked_mul(self.h))
            .and_then(|x| x.checked_mul(self.w))
            // stay within a byte-addressable allocation even at 8 bytes/elem
            .filter(|&x| x <= (isize::MAX as usize) / 8)
            .ok_or_else(|| Error::Data(format!("size error: extents {self} overflow addressable size")))
    }

    #[inline(always)]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    /// Spatial congruence: same batch, height and width.
    pub fn same_spatial(&self, o: &Shape) -> bool {
        self.n == o.n && self.h == o.h && self.w == o.w
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn chw(&self) -> usize {
        self.c * self.h * self.w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_is_row_major() {
        let s = Shape::new(2, 3, 4, 5);
        assert_eq!(s.idx(0, 0, 0, 0), 0);
        assert_eq!(s.idx(0, 0, 0, 1), 1);
        assert_eq!(s.idx(0, 0, 1, 0), 5);
        assert_eq!(s.idx(0, 1, 0, 0), 20);
        assert_eq!(s.idx(1, 0, 0, 0), 60);
        assert_eq!(s.len(), 120);
    }

    #[test]
    fn overflow_is_a_size_error() {
        let s = Shape::new(usize::MAX, 2, 2, 2);
        assert!(s.checked_len().is_err());
        let huge = Shape::new(1 << 30, 1 << 30, 1 << 30, 1);
        assert!(huge.checked_len().is_err());
    }

    #[test]
    fn zero_extent_is_valid_and_empty() {
        let s = Shape::new(0, 3, 4, 5);
        assert_eq!(s.checked_len().unwrap(), 0);
        assert!(s.is_empty());
    }
}
