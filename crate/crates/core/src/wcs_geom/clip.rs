//! Sutherland-Hodgman clipping against axis-aligned rectangles and shoelace area.

pub type Point = (f64, f64);

#[derive(Clone, Copy)]
enum Edge {
    Left(f64),
    Right(f64),
    Bottom(f64),
    Top(f64),
}

impl Edge {
    #[inline]
    fn inside(self, p: Point) -> bool {
        match self {
            Edge::Left(x) => p.0 >= x,
            Edge::Right(x) => p.0 <= x,
            Edge::Bottom(y) => p.1 >= y,
            Edge::Top(y) => p.1 <= y,
        }
    }

    #[inline]
    fn intersect(self, a: Point, b: Point) -> Point {
        match self {
            Edge::Left(x) | Edge::Right(x) => {
                let t = (x - a.0) / (b.0 - a.0);
                (x, a.1 + t * (b.1 - a.1))
            }
            Edge::Bottom(y) | Edge::Top(y) => {
                let t = (y - a.1) / (b.1 - a.1);
                (a.0 + t * (b.0 - a.0), y)
            }
        }
    }
}

fn clip_edge(input: &[Point], edge: Edge, out: &mut Vec<Point>) {
    out.clear();
    let n = input.len();
    if n == 0 {
        return;
    }
    let mut prev = input[n - 1];
    let mut prev_in = edge.inside(prev);
    for &cur in input {
        let cur_in = edge.inside(cur);
        if cur_in {
            if !prev_in {
                out.push(edge.intersect(prev, cur));
            }
            out.push(cur);
        } else if prev_in {
            out.push(edge.intersect(prev, cur));
        }
        prev = cur;
        prev_in = cur_in;
    }
}

/// Clip a convex polygon to `[xmin, xmax] x [ymin, ymax]`.
pub fn clip_to_rect(poly: &[Point], xmin: f64, xmax: f64, ymin: f64, ymax: f64) -> Vec<Point> {
    let mut a: Vec<Point> = poly.to_vec();
    let mut b: Vec<Point> = Vec::with_capacity(poly.len() + 4);
    for edge in [Edge::Left(xmin), Edge::Right(xmax), Edge::Bottom(ymin), Edge::Top(ymax)] {
        clip_edge(&a, edge, &mut b);
        std::mem::swap(&mut a, &mut b);
        if a.is_empty() {
            break;
        }
    }
    a
}

/// Unsigned polygon area.
pub fn shoelace_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    // centered on the first vertex to limit cancellation
    let o = poly[0];
    let mut twice = 0.0;
    for k in 1..n - 1 {
        let (ax, ay) = (poly[k].0 - o.0, poly[k].1 - o.1);
        let (bx, by) = (poly[k + 1].0 - o.0, poly[k + 1].1 - o.1);
        twice += ax * by - ay * bx;
    }
    0.5 * twice.abs()
}
