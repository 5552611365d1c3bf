//! Exact 3-D IoU for yaw-rotated boxes: convex polygon intersection of the
//! ground-plane footprints times the vertical overlap.

use crate::box3d::Box3D;

type Pt = (f64, f64);

/// Footprint corners of a box in the ground plane (x, z), rotated by its
/// yaw about the vertical axis.
fn footprint(b: &Box3D) -> Vec<Pt> {
    let (c, s) = (b.theta.cos(), b.theta.sin());
    let hx = b.l / 2.0;
    let hz = b.w / 2.0;
    [(-hx, -hz), (hx, -hz), (hx, hz), (-hx, hz)]
        .iter()
        .map(|(x, z)| (b.x_cam + x * c - z * s, b.z_cam + x * s + z * c))
        .collect()
}

fn polygon_area(poly: &[Pt]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % poly.len()];
        acc += x0 * y1 - x1 * y0;
    }
    acc.abs() / 2.0
}

/// Sutherland-Hodgman clip of a polygon by the half-plane left of a->b.
fn clip_edge(poly: &[Pt], a: Pt, b: Pt) -> Vec<Pt> {
    let inside = |p: Pt| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0) >= 0.0;
    let intersect = |p: Pt, q: Pt| -> Pt {
        let dx1 = q.0 - p.0;
        let dy1 = q.1 - p.1;
        let dx2 = b.0 - a.0;
        let dy2 = b.1 - a.1;
        let denom = dx1 * dy2 - dy1 * dx2;
        if denom.abs() < 1e-300 {
            return p;
        }
        let t = ((a.0 - p.0) * dy2 - (a.1 - p.1) * dx2) / denom;
        (p.0 + t * dx1, p.1 + t * dy1)
    };
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let cur = poly[i];
        let prev = poly[(i + poly.len() - 1) % poly.len()];
        match (inside(cur), inside(prev)) {
            (true, true) => out.push(cur),
            (true, false) => {
                out.push(intersect(prev, cur));
                out.push(cur);
            }
            (false, true) => out.push(intersect(prev, cur)),
            (false, false) => {}
        }
    }
    out
}

/// Intersection area of two convex polygons (counter-clockwise corners).
fn convex_intersection_area(a: &[Pt], b: &[Pt]) -> f64 {
    let mut poly = a.to_vec();
    for i in 0..b.len() {
        if poly.is_empty() {
            return 0.0;
        }
        poly = clip_edge(&poly, b[i], b[(i + 1) % b.len()]);
    }
    polygon_area(&poly)
}

/// Exact IoU of two yaw-rotated 3-D boxes.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let y_overlap = (a.y_cam + a.h / 2.0).min(b.y_cam + b.h / 2.0)
        - (a.y_cam - a.h / 2.0).max(b.y_cam - b.h / 2.0);
    if y_overlap <= 0.0 {
        return 0.0;
    }
    let inter_area = convex_intersection_area(&footprint(a), &footprint(b));
    let inter = inter_area * y_overlap;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}
