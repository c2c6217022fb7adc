//! Static k-d tree over `D`-dimensional points for nearest, k-nearest and
//! radius queries. Built once by median splits on the widest axis; queries
//! return indices into the original point slice.

use alloc::vec;
use alloc::vec::Vec;

const LEAF: usize = 8;

pub struct KdTree<const D: usize> {
    points: Vec<[f64; D]>,
    index: Vec<usize>,
    axis: Vec<u8>,
}

#[inline]
fn dist2<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    let mut s = 0.0;
    for i in 0..D {
        let d = a[i] - b[i];
        s += d * d;
    }
    s
}

impl<const D: usize> KdTree<D> {
    pub fn new(points: &[[f64; D]]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut axis = vec![0u8; points.len()];
        build(points, &mut order, &mut axis, 0);
        KdTree { points: order.iter().map(|&i| points[i]).collect(), index: order, axis }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Original index and squared distance of the nearest point.
    pub fn nearest(&self, q: &[f64; D]) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_in(0, self.points.len(), q, &mut best);
        Some((self.index[best.0], best.1))
    }

    #[inline]
    fn offer(&self, best: &mut (usize, f64), i: usize, d: f64) {
        if d < best.1 || (d == best.1 && (best.0 == usize::MAX || self.index[i] < self.index[best.0])) {
            *best = (i, d);
        }
    }

    fn nearest_in(&self, lo: usize, hi: usize, q: &[f64; D], best: &mut (usize, f64)) {
        if hi - lo <= LEAF {
            for i in lo..hi {
                let d = dist2(&self.points[i], q);
                self.offer(best, i, d);
            }
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let a = self.axis[mid] as usize;
        let diff = q[a] - self.points[mid][a];
        let d = dist2(&self.points[mid], q);
        self.offer(best, mid, d);
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.nearest_in(near.0, near.1, q, best);
        if diff * diff <= best.1 {
            self.nearest_in(far.0, far.1, q, best);
        }
    }

    /// The `k` nearest points as (original index, squared distance), closest first.
    pub fn knn(&self, q: &[f64; D], k: usize) -> Vec<(usize, f64)> {
        let mut heap: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        if k > 0 && !self.points.is_empty() {
            self.knn_in(0, self.points.len(), q, k, &mut heap);
        }
        heap.into_iter().map(|(i, d)| (self.index[i], d)).collect()
    }

    fn push_sorted(&self, heap: &mut Vec<(usize, f64)>, k: usize, i: usize, d: f64) {
        if heap.len() == k && d >= heap[k - 1].1 {
            return;
        }
        let pos = heap.partition_point(|&(_, hd)| hd <= d);
        heap.insert(pos, (i, d));
        heap.truncate(k);
    }

    fn knn_in(&self, lo: usize, hi: usize, q: &[f64; D], k: usize, heap: &mut Vec<(usize, f64)>) {
        if hi - lo <= LEAF {
            for i in lo..hi {
                self.push_sorted(heap, k, i, dist2(&self.points[i], q));
            }
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let a = self.axis[mid] as usize;
        let diff = q[a] - self.points[mid][a];
        self.push_sorted(heap, k, mid, dist2(&self.points[mid], q));
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.knn_in(near.0, near.1, q, k, heap);
        if heap.len() < k || diff * diff <= heap[heap.len() - 1].1 {
            self.knn_in(far.0, far.1, q, k, heap);
        }
    }

    /// All points within `radius`, as original indices in ascending order.
    pub fn within(&self, q: &[f64; D], radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if !self.points.is_empty() {
            self.within_in(0, self.points.len(), q, radius * radius, &mut out);
        }
        out.sort_unstable();
        out
    }

    fn within_in(&self, lo: usize, hi: usize, q: &[f64; D], r2: f64, out: &mut Vec<usize>) {
        if hi - lo <= LEAF {
            out.extend((lo..hi).filter(|&i| dist2(&self.points[i], q) <= r2).map(|i| self.index[i]));
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let a = self.axis[mid] as usize;
        let diff = q[a] - self.points[mid][a];
        if dist2(&self.points[mid], q) <= r2 {
            out.push(self.index[mid]);
        }
        if diff < 0.0 || diff * diff <= r2 {
            self.within_in(lo, mid, q, r2, out);
        }
        if diff >= 0.0 || diff * diff <= r2 {
            self.within_in(mid + 1, hi, q, r2, out);
        }
    }
}

fn build<const D: usize>(points: &[[f64; D]], order: &mut [usize], axis: &mut [u8], offset: usize) {
    let n = order.len();
    if n <= LEAF {
        return;
    }
    let mut lo = [f64::INFINITY; D];
    let mut hi = [f64::NEG_INFINITY; D];
    for &i in order.iter() {
        for a in 0..D {
            lo[a] = lo[a].min(points[i][a]);
            hi[a] = hi[a].max(points[i][a]);
        }
    }
    let mut best = 0;
    for a in 1..D {
        if hi[a] - lo[a] > hi[best] - lo[best] {
            best = a;
        }
    }
    let mid = n / 2;
    order.select_nth_unstable_by(mid, |&x, &y| points[x][best].total_cmp(&points[y][best]).then(x.cmp(&y)));
    axis[offset + mid] = best as u8;
    let (left, rest) = order.split_at_mut(mid);
    build(points, left, axis, offset);
    build(points, &mut rest[1..], axis, offset + mid + 1);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute<const D: usize>(pts: &[[f64; D]], q: &[f64; D]) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = pts.iter().enumerate().map(|(i, p)| (i, dist2(p, q))).collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        all
    }

    proptest! {
        #[test]
        fn nearest_matches_brute_force(
            pts in proptest::collection::vec(prop::array::uniform3(-5.0f64..5.0), 1..300),
            q in prop::array::uniform3(-6.0f64..6.0),
        ) {
            let tree = KdTree::new(&pts);
            let (_, d) = tree.nearest(&q).unwrap();
            prop_assert_eq!(d, brute(&pts, &q)[0].1);
        }

        #[test]
        fn knn_matches_brute_force(
            pts in proptest::collection::vec(prop::array::uniform2(-5.0f64..5.0), 1..200),
            q in prop::array::uniform2(-6.0f64..6.0),
            k in 1usize..20,
        ) {
            let tree = KdTree::new(&pts);
            let got: Vec<f64> = tree.knn(&q, k).iter().map(|x| x.1).collect();
            let want: Vec<f64> = brute(&pts, &q).iter().take(k).map(|x| x.1).collect();
            prop_assert_eq!(got, want);
        }

        #[test]
        fn within_matches_brute_force(
            pts in proptest::collection::vec(prop::array::uniform3(-2.0f64..2.0), 0..200),
            q in prop::array::uniform3(-2.0f64..2.0),
            r in 0.0f64..2.0,
        ) {
            let tree = KdTree::new(&pts);
            let want: Vec<usize> = (0..pts.len()).filter(|&i| dist2(&pts[i], &q) <= r * r).collect();
            prop_assert_eq!(tree.within(&q, r), want);
        }
    }

    #[test]
    fn duplicates_and_empty() {
        let tree = KdTree::<2>::new(&[]);
        assert!(tree.nearest(&[0.0, 0.0]).is_none());
        let pts = vec![[1.0, 1.0]; 50];
        let tree = KdTree::new(&pts);
        assert_eq!(tree.nearest(&[1.0, 1.0]), Some((0, 0.0)));
        assert_eq!(tree.knn(&[0.0, 0.0], 5).len(), 5);
    }
}
