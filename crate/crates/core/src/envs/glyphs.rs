//! Synthetic seven-segment digit images, used as the base dataset when no
//! IDX files are configured.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::BaseData;
use crate::ndcore::Tensor;
use crate::rng::{stream, tag};

// segments: top, top-right, bottom-right, bottom, bottom-left, top-left, middle
const DIGITS: [[bool; 7]; 10] = [
    [true, true, true, true, true, true, false],
    [false, true, true, false, false, false, false],
    [true, true, false, true, true, false, true],
    [true, true, true, true, false, false, true],
    [false, true, true, false, false, true, true],
    [true, false, true, true, false, true, true],
    [true, false, true, true, true, true, true],
    [true, true, true, false, false, false, false],
    [true, true, true, true, true, true, true],
    [true, true, true, true, false, true, true],
];

pub const MIN_SIDE: usize = 8;

/// `n` images of `side x side` pixels, labels cycling through 0..9 and then
/// shuffled. Pixel values are multiples of 1/255 in `[0, 1]`.
pub fn synthetic_glyphs(n: usize, side: usize, seed: u64) -> BaseData {
    assert!(side >= MIN_SIDE, "glyph side must be >= {MIN_SIDE}");
    let mut rng = stream(seed, tag::BASE, 0);
    let noise = Normal::new(0.0, 0.15).expect("valid normal");
    let d = side * side;
    let mut labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);
    let mut data = vec![0.0; n * d];
    for (i, &label) in labels.iter().enumerate() {
        let img = &mut data[i * d..(i + 1) * d];
        let dx: i64 = rng.random_range(-1..=1);
        let dy: i64 = rng.random_range(-1..=1);
        let x0 = 2 + dx;
        let x1 = side as i64 - 3 + dx;
        let y0 = 1 + dy;
        let y1 = side as i64 - 2 + dy;
        let ym = (y0 + y1) / 2;
        let ink = rng.random_range(0.6..1.0);
        let thick = rng.random_bool(0.5);
        let mut put = |x: i64, y: i64| {
            for xx in [x, x + i64::from(thick)] {
                if (0..side as i64).contains(&xx) && (0..side as i64).contains(&y) {
                    img[y as usize * side + xx as usize] = ink;
                }
            }
        };
        let seg = DIGITS[label];
        let hline = |y: i64, put: &mut dyn FnMut(i64, i64)| (x0..=x1).for_each(|x| put(x, y));
        let vline = |x: i64, ya: i64, yb: i64, put: &mut dyn FnMut(i64, i64)| (ya..=yb).for_each(|y| put(x, y));
        if seg[0] {
            hline(y0, &mut put);
        }
        if seg[1] {
            vline(x1, y0, ym, &mut put);
        }
        if seg[2] {
            vline(x1, ym, y1, &mut put);
        }
        if seg[3] {
            hline(y1, &mut put);
        }
        if seg[4] {
            vline(x0, ym, y1, &mut put);
        }
        if seg[5] {
            vline(x0, y0, ym, &mut put);
        }
        if seg[6] {
            hline(ym, &mut put);
        }
        for v in img.iter_mut() {
            let noisy: f64 = *v + noise.sample(&mut rng);
            *v = (noisy.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
    BaseData::new(Tensor::new(vec![n, d], data).expect("sized"), labels).expect("labels in range")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyphs_are_quantized_and_seeded() {
        let a = synthetic_glyphs(50, 10, 3);
        let b = synthetic_glyphs(50, 10, 3);
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
        assert_eq!(a.x.shape(), &[50, 100]);
        for v in a.x.data() {
            assert!((0.0..=1.0).contains(v));
            assert!(((v * 255.0).round() - v * 255.0).abs() < 1e-9);
        }
        assert_eq!(a.n_classes, 10);
    }

    #[test]
    fn class_means_are_distinct() {
        let data = synthetic_glyphs(1000, 12, 1);
        let d = 144;
        let mut means = vec![vec![0.0; d]; 10];
        let mut counts = [0usize; 10];
        for (i, &y) in data.y.iter().enumerate() {
            counts[y] += 1;
            for (m, &v) in means[y].iter_mut().zip(&data.x.data()[i * d..(i + 1) * d]) {
                *m += v;
            }
        }
        for (m, c) in means.iter_mut().zip(counts) {
            m.iter_mut().for_each(|v| *v /= c as f64);
        }
        // nearest class mean should classify most samples correctly
        let mut correct = 0;
        for (i, &y) in data.y.iter().enumerate() {
            let row = &data.x.data()[i * d..(i + 1) * d];
            let best = (0..10)
                .min_by(|&a, &b| {
                    let da: f64 = row.iter().zip(&means[a]).map(|(x, m)| (x - m).powi(2)).sum();
                    let db: f64 = row.iter().zip(&means[b]).map(|(x, m)| (x - m).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            correct += usize::from(best == y);
        }
        assert!(correct > 700, "{correct}");
    }
}
