//! Sampling kernels `K(p, q)` shared by splatting and slicing.

use std::fmt;
use std::str::FromStr;

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Kernel {
    /// Weight 1 on the rounded cell, halves rounding up.
    Nearest,
    /// Tent kernel `max(0, 1 - |p - q|)`.
    #[default]
    Linear,
}

/// Cells where a kernel can be nonzero for one coordinate: at most two.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Support {
    pub start: i64,
    pub len: usize,
}

impl Support {
    pub fn iter(self) -> impl Iterator<Item = i64> {
        (0..self.len as i64).map(move |k| self.start + k)
    }
}

fn nearest_index(p: f64) -> i64 {
    (p + 0.5).floor() as i64
}

impl Kernel {
    pub fn weight(self, p: f64, q: i64) -> f64 {
        match self {
            Kernel::Nearest => {
                if nearest_index(p) == q {
                    1.0
                } else {
                    0.0
                }
            }
            Kernel::Linear => (1.0 - (p - q as f64).abs()).max(0.0),
        }
    }

    /// `dK/dp`, with 0 taken at the kinks of the linear kernel.
    pub fn derivative(self, p: f64, q: i64) -> f64 {
        match self {
            Kernel::Nearest => 0.0,
            Kernel::Linear => {
                let d = p - q as f64;
                if d.abs() >= 1.0 || d == 0.0 {
                    0.0
                } else {
                    -d.signum()
                }
            }
        }
    }

    pub fn support(self, p: f64) -> Support {
        match self {
            Kernel::Nearest => Support {
                start: nearest_index(p),
                len: 1,
            },
            Kernel::Linear => {
                let f = p.floor();
                Support {
                    start: f as i64,
                    len: if f == p { 1 } else { 2 },
                }
            }
        }
    }
}

pub fn kernel_weight(p: f64, q: i64, kernel: Kernel) -> f64 {
    kernel.weight(p, q)
}

pub fn kernel_derivative(p: f64, q: i64, kernel: Kernel) -> f64 {
    kernel.derivative(p, q)
}

pub fn support(p: f64, kernel: Kernel) -> Support {
    kernel.support(p)
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kernel::Nearest => "nearest",
            Kernel::Linear => "linear",
        })
    }
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "nearest" => Ok(Kernel::Nearest),
            "linear" => Ok(Kernel::Linear),
            other => Err(Error::InvalidParameter(format!("unknown kernel {other:?}"))),
        }
    }
}
