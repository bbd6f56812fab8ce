use alloc::vec;
use alloc::vec::Vec;

/// Binary `h x w` mask stored as bytes in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn empty(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![0; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x) as u8);
            }
        }
        Self { h, w, data }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x] != 0
    }

    /// Value at signed coordinates; everything outside the frame is background.
    fn at(&self, y: isize, x: isize) -> bool {
        y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w && self.get(y as usize, x as usize)
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Centroid `(y, x)` of the foreground, or the frame centre when empty.
    pub fn centroid(&self) -> (f64, f64) {
        let (mut sy, mut sx, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.h {
            for x in 0..self.w {
                if self.get(y, x) {
                    sy += y as f64;
                    sx += x as f64;
                    n += 1;
                }
            }
        }
        if n == 0 {
            return ((self.h as f64 - 1.0) / 2.0, (self.w as f64 - 1.0) / 2.0);
        }
        (sy / n as f64, sx / n as f64)
    }
}

/// Offsets of a digital disk `dy^2 + dx^2 <= r^2`.
pub fn disk(radius: u32) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

pub fn dilate(m: &Mask, radius: u32) -> Mask {
    let se = disk(radius);
    Mask::from_fn(m.h, m.w, |y, x| {
        se.iter().any(|&(dy, dx)| m.at(y as isize + dy, x as isize + dx))
    })
}

/// Erosion with the frame exterior counted as background.
pub fn erode(m: &Mask, radius: u32) -> Mask {
    let se = disk(radius);
    Mask::from_fn(m.h, m.w, |y, x| {
        se.iter().all(|&(dy, dx)| m.at(y as isize + dy, x as isize + dx))
    })
}

/// Translation by `(dx, dy)` with zero fill.
pub fn shift(m: &Mask, dx: i32, dy: i32) -> Mask {
    Mask::from_fn(m.h, m.w, |y, x| m.at(y as isize - dy as isize, x as isize - dx as isize))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(n: usize, lo: usize, hi: usize) -> Mask {
        Mask::from_fn(n, n, |y, x| (lo..hi).contains(&y) && (lo..hi).contains(&x))
    }

    #[test]
    fn disk_sizes() {
        assert_eq!(disk(0).len(), 1);
        assert_eq!(disk(1).len(), 5);
        assert_eq!(disk(2).len(), 13);
    }

    #[test]
    fn single_pixel_dilates_to_disk() {
        let m = Mask::from_fn(9, 9, |y, x| y == 4 && x == 4);
        assert_eq!(dilate(&m, 2).area(), 13);
        assert_eq!(erode(&dilate(&m, 2), 2), m);
    }

    #[test]
    fn erosion_shrinks_square() {
        let m = square(10, 2, 8);
        assert_eq!(erode(&m, 1), square(10, 3, 7));
    }

    #[test]
    fn shift_moves_and_clips() {
        let m = square(6, 0, 2);
        let s = shift(&m, 1, 2);
        assert_eq!(s.area(), 4);
        assert!(s.get(2, 1) && s.get(3, 2));
        assert_eq!(shift(&m, -3, 0).area(), 0);
    }
}
