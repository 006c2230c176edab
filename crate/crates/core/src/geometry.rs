//! Axis-aligned box arithmetic shared by every other module.

use core::fmt;

/// Axis-aligned rectangle `(l, t, r, b)` in normalized scene coordinates.
///
/// Degenerate zero-area boxes are valid; negative extent is not.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box {
    l: f64,
    t: f64,
    r: f64,
    b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoxError {
    NonFinite,
    NegativeExtent,
    OutOfRange,
}

impl fmt::Display for BoxError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoxError::NonFinite => write!(f, "box coordinate is not finite"),
            BoxError::NegativeExtent => write!(f, "box has negative extent (l > r or t > b)"),
            BoxError::OutOfRange => write!(f, "box coordinate outside [0, 1]"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for BoxError {}

impl Box {
    /// Builds a normalized box; coordinates must lie in `[0, 1]` with
    /// `l <= r` and `t <= b`.
    pub fn new(l: f64, t: f64, r: f64, b: f64) -> Result<Self, BoxError> {
        let bx = Self::unnormalized(l, t, r, b)?;
        let in_range = |x: f64| (0.0..=1.0).contains(&x);
        if in_range(l) && in_range(t) && in_range(r) && in_range(b) {
            Ok(bx)
        } else {
            Err(BoxError::OutOfRange)
        }
    }

    /// Like [`Box::new`] but skips the `[0, 1]` range check. Used for raw
    /// model outputs (which may drift outside the scene) and in tests.
    pub fn unnormalized(l: f64, t: f64, r: f64, b: f64) -> Result<Self, BoxError> {
        if ![l, t, r, b].iter().all(|x| x.is_finite()) {
            return Err(BoxError::NonFinite);
        }
        if l > r || t > b {
            return Err(BoxError::NegativeExtent);
        }
        Ok(Self { l, t, r, b })
    }

    pub fn l(&self) -> f64 {
        self.l
    }
    pub fn t(&self) -> f64 {
        self.t
    }
    pub fn r(&self) -> f64 {
        self.r
    }
    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.l, self.t, self.r, self.b]
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.l + self.r), 0.5 * (self.t + self.b))
    }
}

pub fn area(bx: &Box) -> f64 {
    (bx.r - bx.l) * (bx.b - bx.t)
}

fn intersection_area(a: &Box, b: &Box) -> f64 {
    let iw = (a.r.min(b.r) - a.l.max(b.l)).max(0.0);
    let ih = (a.b.min(b.b) - a.t.max(b.t)).max(0.0);
    iw * ih
}

/// Intersection over union in `[0, 1]`; zero union yields 0.
pub fn iou(a: &Box, b: &Box) -> f64 {
    let inter = intersection_area(a, b);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU in `[-1, 1]`: IoU minus the fraction of the enclosing
/// box not covered by the union. Zero enclosing area yields 0.
pub fn giou(a: &Box, b: &Box) -> f64 {
    let inter = intersection_area(a, b);
    let union = area(a) + area(b) - inter;
    let ew = a.r.max(b.r) - a.l.min(b.l);
    let eh = a.b.max(b.b) - a.t.min(b.t);
    let enclose = ew * eh;
    if enclose <= 0.0 {
        return 0.0;
    }
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    iou - (enclose - union) / enclose
}

/// GIoU together with its gradient with respect to the coordinates of `a`
/// (`b` held fixed). Piecewise-linear kinks (coordinate ties, the
/// zero-intersection boundary) take the one-sided derivative of the active
/// branch; degenerate union or enclosing area yields zero gradient.
pub fn giou_grad(a: &Box, b: &Box) -> (f64, [f64; 4]) {
    let iw = a.r.min(b.r) - a.l.max(b.l);
    let ih = a.b.min(b.b) - a.t.max(b.t);
    let inter = iw.max(0.0) * ih.max(0.0);
    let union = area(a) + area(b) - inter;
    let ew = a.r.max(b.r) - a.l.min(b.l);
    let eh = a.b.max(b.b) - a.t.min(b.t);
    let enclose = ew * eh;
    if enclose <= 0.0 || union <= 0.0 {
        return (giou(a, b), [0.0; 4]);
    }

    // d(inter)/d(a.l, a.t, a.r, a.b)
    let mut d_i = [0.0; 4];
    if iw > 0.0 && ih > 0.0 {
        if a.l > b.l {
            d_i[0] = -ih;
        }
        if a.r < b.r {
            d_i[2] = ih;
        }
        if a.t > b.t {
            d_i[1] = -iw;
        }
        if a.b < b.b {
            d_i[3] = iw;
        }
    }
    let w = a.r - a.l;
    let h = a.b - a.t;
    let d_a = [-h, -w, h, w];
    let mut d_e = [0.0; 4];
    if a.l < b.l {
        d_e[0] = -eh;
    }
    if a.r > b.r {
        d_e[2] = eh;
    }
    if a.t < b.t {
        d_e[1] = -ew;
    }
    if a.b > b.b {
        d_e[3] = ew;
    }

    let value = inter / union - (enclose - union) / enclose;
    let mut grad = [0.0; 4];
    for j in 0..4 {
        let d_u = d_a[j] - d_i[j];
        // d(I/U) + d(U/E); the constant −1 term drops out
        grad[j] = (d_i[j] * union - inter * d_u) / (union * union)
            + (d_u * enclose - union * d_e[j]) / (enclose * enclose);
    }
    (value, grad)
}
