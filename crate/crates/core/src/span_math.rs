//! One-dimensional interval geometry on normalized video time.
//!
//! Spans live in `[0, 1]`. Two parameterizations are used throughout the
//! crate: start/end ([`Span`]) for metrics and losses, center/width
//! ([`CwSpan`]) for diffusion and decoder deltas.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A normalized temporal interval with `0 <= start <= end <= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub start: f64,
    pub end: f64,
}

/// Center/width view of a [`Span`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CwSpan {
    pub center: f64,
    pub width: f64,
}

impl Span {
    /// Builds a span, checking ordering and the unit-interval bounds.
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !start.is_finite() || !end.is_finite() {
            return Err(Error::NonFinite("span"));
        }
        if !(0.0..=1.0).contains(&start) || !(0.0..=1.0).contains(&end) || start > end {
            return Err(Error::InvalidArgument(format!(
                "span [{start}, {end}] is not an ordered sub-interval of [0, 1]"
            )));
        }
        Ok(Span { start, end })
    }

    pub fn width(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }
}

impl CwSpan {
    pub fn new(center: f64, width: f64) -> Self {
        CwSpan { center, width }
    }
}

/// Temporal intersection over union. Zero when the union has zero length.
pub fn iou(a: &Span, b: &Span) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.width() + b.width() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: IoU minus the fraction of the enclosing hull not covered
/// by the union. Equals [`iou`] whenever the spans overlap or touch.
pub fn giou(a: &Span, b: &Span) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.width() + b.width() - inter;
    let hull = a.end.max(b.end) - a.start.min(b.start);
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    if hull <= 0.0 {
        return iou;
    }
    iou - (hull - union) / hull
}

pub fn se_to_cw(s: &Span) -> CwSpan {
    CwSpan {
        center: 0.5 * (s.start + s.end),
        width: s.end - s.start,
    }
}

/// Converts back to start/end, clamping into `[0, 1]` with width at least `w_min`.
pub fn cw_to_se(c: &CwSpan, w_min: f64) -> Span {
    let half = 0.5 * c.width;
    clamp_unchecked(c.center - half, c.center + half, w_min)
}

/// Turns an arbitrary pair of reals into a valid [`Span`].
///
/// Coordinates are clipped to `[0, 1]` and reordered. A span narrower than
/// `w_min` is widened symmetrically about its center, then shifted back
/// inside the unit interval if the widening crossed a boundary.
pub fn clamp_span(start: f64, end: f64, w_min: f64) -> Result<Span> {
    if !start.is_finite() || !end.is_finite() {
        return Err(Error::NonFinite("clamp_span input"));
    }
    if !(w_min > 0.0 && w_min <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "minimum width {w_min} must lie in (0, 1]"
        )));
    }
    Ok(clamp_unchecked(start, end, w_min))
}

fn clamp_unchecked(start: f64, end: f64, w_min: f64) -> Span {
    let a = start.clamp(0.0, 1.0);
    let b = end.clamp(0.0, 1.0);
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    if hi - lo >= w_min {
        return Span { start: lo, end: hi };
    }
    let half = 0.5 * w_min;
    let center = (0.5 * (lo + hi)).clamp(half, 1.0 - half);
    Span {
        start: (center - half).max(0.0),
        end: (center + half).min(1.0),
    }
}

/// Outcome of [`vote`].
#[derive(Debug, Clone, PartialEq)]
pub struct Vote {
    pub winner: usize,
    pub scores: Vec<f64>,
}

/// Scores every candidate by its summed IoU with all other candidates and
/// picks the highest score, lowest index on ties.
pub fn vote(spans: &[Span]) -> Result<Vote> {
    if spans.is_empty() {
        return Err(Error::NoCandidates);
    }
    let n = spans.len();
    let mut scores = vec![0.0; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = iou(&spans[i], &spans[j]);
            scores[i] += v;
            scores[j] += v;
        }
    }
    let mut winner = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[winner] {
            winner = i;
        }
    }
    Ok(Vote { winner, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn sp(s: f64, e: f64) -> Span {
        Span::new(s, e).unwrap()
    }

    // Interval measure computed on a fine grid, independent of the closed form.
    fn grid_iou(a: &Span, b: &Span) -> f64 {
        let n = 20_000;
        let (mut inter, mut uni) = (0usize, 0usize);
        for k in 0..n {
            let x = (k as f64 + 0.5) / n as f64;
            let ia = x >= a.start && x < a.end;
            let ib = x >= b.start && x < b.end;
            inter += (ia && ib) as usize;
            uni += (ia || ib) as usize;
        }
        if uni == 0 {
            0.0
        } else {
            inter as f64 / uni as f64
        }
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&sp(0.2, 0.5), &sp(0.2, 0.5)), 1.0);
        assert_eq!(iou(&sp(0.0, 0.2), &sp(0.8, 1.0)), 0.0);
        let a = sp(0.2, 0.5);
        let b = sp(0.3, 0.6);
        assert_abs_diff_eq!(grid_iou(&a, &b), 0.5, epsilon = 1e-3);
        assert_abs_diff_eq!(iou(&a, &b), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn zero_width_identical_spans_have_zero_iou() {
        let a = sp(0.4, 0.4);
        assert_eq!(iou(&a, &a), 0.0);
    }

    #[test]
    fn giou_examples() {
        assert_eq!(giou(&sp(0.2, 0.5), &sp(0.2, 0.5)), 1.0);
        assert_abs_diff_eq!(giou(&sp(0.0, 0.2), &sp(0.8, 1.0)), -0.6, epsilon = 1e-12);
        let (a, b) = (sp(0.1, 0.4), sp(0.3, 0.9));
        assert_eq!(giou(&a, &b), iou(&a, &b));
    }

    #[test]
    fn parameterization_examples() {
        let c = se_to_cw(&sp(0.2, 0.6));
        assert_abs_diff_eq!(c.center, 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(c.width, 0.4, epsilon = 1e-15);
        assert_eq!(se_to_cw(&sp(0.0, 1.0)), CwSpan::new(0.5, 1.0));
    }

    #[test]
    fn clamp_examples() {
        assert_eq!(clamp_span(-0.1, 0.5, 1.0 / 64.0).unwrap(), sp(0.0, 0.5));
        assert_eq!(clamp_span(0.7, 0.3, 1.0 / 64.0).unwrap(), sp(0.3, 0.7));
        assert_eq!(
            clamp_span(0.5, 0.5, 1.0 / 64.0).unwrap(),
            sp(0.4921875, 0.5078125)
        );
        // widening at a boundary shifts inward
        assert_eq!(clamp_span(1.0, 1.0, 0.25).unwrap(), sp(0.75, 1.0));
    }

    #[test]
    fn clamp_rejects_non_finite() {
        assert!(matches!(
            clamp_span(f64::NAN, 0.5, 0.1),
            Err(Error::NonFinite(_))
        ));
        assert!(clamp_span(0.1, f64::INFINITY, 0.1).is_err());
        assert!(clamp_span(0.1, 0.2, 0.0).is_err());
    }

    #[test]
    fn vote_examples() {
        assert!(matches!(vote(&[]), Err(Error::NoCandidates)));
        let single = vote(&[sp(0.1, 0.3)]).unwrap();
        assert_eq!(single, Vote { winner: 0, scores: vec![0.0] });

        let v = vote(&[sp(0.1, 0.3), sp(0.12, 0.32), sp(0.7, 0.9)]).unwrap();
        // brute force: |[0.12,0.3]| / |[0.1,0.32]|
        let expected = (0.3 - 0.12) / (0.32 - 0.1);
        assert_eq!(v.winner, 0);
        assert_abs_diff_eq!(v.scores[0], expected, epsilon = 1e-12);
        assert_abs_diff_eq!(v.scores[1], expected, epsilon = 1e-12);
        assert_abs_diff_eq!(v.scores[0], 0.8182, epsilon = 1e-4);
        assert_eq!(v.scores[2], 0.0);
    }

    fn arb_span() -> impl Strategy<Value = Span> {
        (0.0..=1.0f64, 0.0..=1.0f64).prop_map(|(a, b)| Span {
            start: a.min(b),
            end: a.max(b),
        })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_span(), b in arb_span()) {
            let v = iou(&a, &b);
            prop_assert_eq!(v, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!(giou(&a, &b) <= v + 1e-15);
        }

        #[test]
        fn clamp_output_is_valid(s in -3.0..3.0f64, e in -3.0..3.0f64, w in 0.001..1.0f64) {
            let c = clamp_span(s, e, w).unwrap();
            prop_assert!(c.start >= 0.0 && c.end <= 1.0 && c.start <= c.end);
            prop_assert!(c.width() >= w - 1e-12);
        }

        #[test]
        fn cw_round_trip(a in arb_span()) {
            prop_assume!(a.width() >= 1.0 / 64.0);
            let back = cw_to_se(&se_to_cw(&a), 1.0 / 64.0);
            prop_assert!((back.start - a.start).abs() < 1e-12);
            prop_assert!((back.end - a.end).abs() < 1e-12);
        }

        #[test]
        fn vote_is_permutation_stable(spans in proptest::collection::vec(arb_span(), 1..8), rot in 0usize..8) {
            let v = vote(&spans).unwrap();
            let mut rotated = spans.clone();
            let k = rot % spans.len();
            rotated.rotate_left(k);
            let w = vote(&rotated).unwrap();
            let n = spans.len();
            // scores follow their spans
            for i in 0..n {
                prop_assert!((w.scores[i] - v.scores[(i + k) % n]).abs() < 1e-12);
            }
            let best = v.scores[v.winner];
            prop_assert!((w.scores[w.winner] - best).abs() < 1e-12);
        }
    }
}
