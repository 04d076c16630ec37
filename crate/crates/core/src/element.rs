use std::fmt::{Debug, Display};

use num_traits::Float;

/// Scalar type used for keys, values, queries and outputs.
///
/// Implemented for `f64` (default) and `f32`.
pub trait Element: Float + Debug + Display + Default + Send + Sync + 'static {
    /// Size of one element in bytes.
    const BYTES: usize;
    /// Short name, e.g. `"f64"`.
    const NAME: &'static str;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f64 {
    const BYTES: usize = 8;
    const NAME: &'static str = "f64";

    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

impl Element for f32 {
    const BYTES: usize = 4;
    const NAME: &'static str = "f32";

    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}
