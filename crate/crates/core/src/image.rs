//! Dense per-pixel containers and sampling.

use crate::frame::FlowField;
use crate::geometry::Vec2;
use crate::scalar::Real;

/// Row-major `width × height` grid of per-pixel values.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<V> {
    width: usize,
    height: usize,
    data: Vec<V>,
}

impl<V: Clone> Grid<V> {
    pub fn new(width: usize, height: usize, fill: V) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }
}

impl<V> Grid<V> {
    /// Wraps `data`; returns `None` when the length does not match.
    pub fn from_vec(width: usize, height: usize, data: Vec<V>) -> Option<Self> {
        (data.len() == width * height).then_some(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> V) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn same_dims<W>(&self, other: &Grid<W>) -> bool {
        self.dims() == other.dims()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &V {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut V {
        &mut self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: V) {
        self.data[y * self.width + x] = v;
    }

    pub fn as_slice(&self) -> &[V] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [V] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<V> {
        self.data
    }

    /// Iterates `(x, y, &value)` in row-major order.
    pub fn iter_xy(&self) -> impl Iterator<Item = (usize, usize, &V)> {
        let w = self.width;
        self.data.iter().enumerate().map(move |(i, v)| (i % w, i / w, v))
    }

    pub fn map<W>(&self, f: impl FnMut(&V) -> W) -> Grid<W> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T: Real> Grid<T> {
    /// Bilinear sample at a subpixel position inside `[0, w-1] × [0, h-1]`.
    pub fn sample_bilinear(&self, u: Vec2<T>) -> Option<T> {
        let max_x = T::lit((self.width.checked_sub(1)?) as f64);
        let max_y = T::lit((self.height.checked_sub(1)?) as f64);
        if !(u.x >= T::zero() && u.y >= T::zero() && u.x <= max_x && u.y <= max_y) {
            return None;
        }
        let x0 = u.x.floor();
        let y0 = u.y.floor();
        let fx = u.x - x0;
        let fy = u.y - y0;
        let x0 = x0.to_usize()?;
        let y0 = y0.to_usize()?;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let one = T::one();
        let a = *self.get(x0, y0);
        let b = *self.get(x1, y0);
        let c = *self.get(x0, y1);
        let d = *self.get(x1, y1);
        Some((one - fx) * (one - fy) * a + fx * (one - fy) * b + (one - fx) * fy * c + fx * fy * d)
    }
}

/// Gathers `prev` at `u + F(u)` for every pixel `u`.
///
/// Invalid flow and samples outside the image yield 0, so disoccluded pixels
/// start over.
///
/// # Panics
/// Panics if `prev` and `flow` differ in size.
pub fn warp_image<T: Real>(prev: &Grid<T>, flow: &FlowField<T>) -> Grid<T> {
    assert!(
        prev.same_dims(&flow.vectors),
        "warp_image: map and flow dimensions differ"
    );
    Grid::from_fn(prev.width(), prev.height(), |x, y| {
        if !*flow.valid.get(x, y) {
            return T::zero();
        }
        let f = *flow.vectors.get(x, y);
        let target = Vec2::new(T::lit(x as f64) + f.x, T::lit(y as f64) + f.y);
        prev.sample_bilinear(target).unwrap_or_else(T::zero)
    })
}
