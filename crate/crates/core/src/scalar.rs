use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point coordinate type used by the geometry and detection layers: f32 or f64.
pub trait Scalar: Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static {
    /// Lossy conversion from f64; panics only for values the target type cannot hold at all.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 representable in scalar type")
    }

    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("usize representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }

    /// Total order, with NaN sorting last. Coordinates are finite by construction.
    fn total_cmp_s(&self, other: &Self) -> std::cmp::Ordering {
        self.partial_cmp(other)
            .unwrap_or_else(|| match (self.is_nan(), other.is_nan()) {
                (true, false) => std::cmp::Ordering::Greater,
                (false, true) => std::cmp::Ordering::Less,
                _ => std::cmp::Ordering::Equal,
            })
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
