//! Histogram of box elongation, `max(w, h) / min(w, h)`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectStats {
    /// `counts.len() + 1` edges starting at 1; the last bin also collects
    /// every ratio beyond its upper edge.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub total: usize,
    pub fraction_gt_175: f64,
    pub fraction_gt_3: f64,
}

pub fn aspect_stats(boxes: &[BBox], bin_width: f64, max_ratio: f64) -> AspectStats {
    assert!(bin_width > 0.0 && max_ratio > 1.0, "bins need positive width above ratio 1");
    let bins = ((max_ratio - 1.0) / bin_width).ceil() as usize;
    let edges: Vec<f64> = (0..=bins).map(|i| 1.0 + i as f64 * bin_width).collect();
    let mut counts = vec![0usize; bins];
    let (mut gt175, mut gt3, mut total) = (0usize, 0usize, 0usize);
    for b in boxes.iter().filter(|b| b.width() > 0.0 && b.height() > 0.0) {
        let r = b.aspect();
        total += 1;
        gt175 += usize::from(r > 1.75);
        gt3 += usize::from(r > 3.0);
        let i = (((r - 1.0) / bin_width).floor() as usize).min(bins - 1);
        counts[i] += 1;
    }
    let frac = |n: usize| if total == 0 { 0.0 } else { n as f64 / total as f64 };
    AspectStats { edges, counts, total, fraction_gt_175: frac(gt175), fraction_gt_3: frac(gt3) }
}

impl AspectStats {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", self.edges[i], self.edges[i + 1], c);
        }
        out
    }

    /// Plain SVG bar chart, no timestamps or random ids.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (640.0, 360.0, 40.0);
        let n = self.counts.len().max(1) as f64;
        let max = self.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
        let bw = (w - 2.0 * pad) / n;
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
             <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
        );
        for (i, &c) in self.counts.iter().enumerate() {
            let bh = (h - 2.0 * pad) * c as f64 / max;
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"steelblue\"><title>[{}, {}): {}</title></rect>",
                pad + i as f64 * bw,
                h - pad - bh,
                (bw - 1.0).max(0.5),
                bh,
                self.edges[i],
                self.edges[i + 1],
                c
            );
        }
        let _ = writeln!(
            s,
            "<line x1=\"{pad}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"black\"/>\n\
             <text x=\"{pad}\" y=\"{ty}\" font-size=\"12\">max/min ratio {lo} .. {hi}; n = {n}; &gt;1.75: {a:.3}; &gt;3: {b:.3}</text>",
            y = h - pad,
            x2 = w - pad,
            ty = h - 12.0,
            lo = self.edges.first().copied().unwrap_or(1.0),
            hi = self.edges.last().copied().unwrap_or(1.0),
            n = self.total,
            a = self.fraction_gt_175,
            b = self.fraction_gt_3,
        );
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squares_only() {
        let boxes = vec![BBox::new(0.0, 0.0, 10.0, 10.0, 0); 5];
        let s = aspect_stats(&boxes, 0.25, 10.0);
        assert_eq!(s.fraction_gt_175, 0.0);
        assert_eq!(s.counts[0], 5);
    }

    #[test]
    fn one_elongated_box() {
        let s = aspect_stats(&[BBox::new(0.0, 0.0, 10.0, 40.0, 0)], 0.25, 10.0);
        assert_eq!(s.fraction_gt_175, 1.0);
        assert_eq!(s.fraction_gt_3, 1.0);
        // ratio 4 falls in [4.0, 4.25)
        assert_eq!(s.counts[12], 1);
        assert_eq!(s.to_csv().lines().count(), 37);
        assert!(s.to_svg().starts_with("<svg"));
    }

    #[test]
    fn overflow_goes_to_last_bin() {
        let s = aspect_stats(&[BBox::new(0.0, 0.0, 100.0, 1.0, 0)], 0.5, 3.0);
        assert_eq!(s.counts, vec![0, 0, 0, 1]);
        assert!(s.fraction_gt_3 <= s.fraction_gt_175);
    }
}
