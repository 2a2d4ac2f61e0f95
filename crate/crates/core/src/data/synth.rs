//! Procedural class-conditional image corpora.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Image;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    /// Scale and phase of a checker pattern depend on the class.
    Checkerboard,
    /// A soft blob whose position is set by the class.
    Blobs,
    /// Stripes whose orientation is set by the class.
    Bars,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "checkerboard" => Ok(SynthKind::Checkerboard),
            "blobs" => Ok(SynthKind::Blobs),
            "bars" => Ok(SynthKind::Bars),
            other => Err(Error::invalid(format!(
                "unknown dataset kind {other:?} (expected checkerboard, blobs or bars)"
            ))),
        }
    }
}

impl std::fmt::Display for SynthKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SynthKind::Checkerboard => "checkerboard",
            SynthKind::Blobs => "blobs",
            SynthKind::Bars => "bars",
        })
    }
}

fn color<R: Rng>(rng: &mut R, channels: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..channels).map(|_| rng.random_range(lo..hi)).collect()
}

fn fill<F: Fn(usize, usize) -> f64>(
    h: usize,
    w: usize,
    fg: &[f64],
    bg: &[f64],
    mask: F,
) -> Image {
    let c = fg.len();
    let mut img = Image::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let m = mask(y, x).clamp(0.0, 1.0);
            for ch in 0..c {
                img.set(y, x, ch, (m * fg[ch] + (1.0 - m) * bg[ch]).clamp(0.0, 1.0));
            }
        }
    }
    img
}

fn render<R: Rng>(kind: SynthKind, class: usize, classes: usize, h: usize, w: usize, c: usize, rng: &mut R) -> Image {
    let fg = color(rng, c, 0.6, 1.0);
    let bg = color(rng, c, 0.0, 0.3);
    match kind {
        SynthKind::Checkerboard => {
            let cell = [2usize, 4, 8][(class / 2) % 3].min(h.max(1));
            let phase = class % 2;
            fill(h, w, &fg, &bg, |y, x| ((y / cell + x / cell + phase) % 2) as f64)
        }
        SynthKind::Blobs => {
            let angle = 2.0 * PI * class as f64 / classes as f64;
            let r = 0.28 * h.min(w) as f64;
            let cy = 0.5 * (h as f64 - 1.0) + r * angle.sin() + rng.random_range(-0.75..0.75);
            let cx = 0.5 * (w as f64 - 1.0) + r * angle.cos() + rng.random_range(-0.75..0.75);
            let rad = 0.14 * h.min(w) as f64 * rng.random_range(0.85..1.15);
            fill(h, w, &fg, &bg, |y, x| {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                (-d2 / (2.0 * rad * rad)).exp()
            })
        }
        SynthKind::Bars => {
            let period = 4usize;
            let orient = class % 4;
            let thick = if class / 4 % 2 == 0 { 2 } else { 1 };
            fill(h, w, &fg, &bg, |y, x| {
                let t = match orient {
                    0 => y,
                    1 => x,
                    2 => x + y,
                    _ => x + h - 1 - y,
                };
                ((t % period) < thick) as u8 as f64
            })
        }
    }
}

/// `n` labelled images; label `i % class_count` for the `i`-th image, so
/// the labels cover every class evenly. Bit-reproducible from `seed`.
pub fn synth_dataset(
    kind: SynthKind,
    class_count: usize,
    n: usize,
    seed: u64,
    height: usize,
    width: usize,
    channels: usize,
) -> Result<Vec<(Image, usize)>> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be positive"));
    }
    if class_count == 0 {
        return Err(Error::invalid("class_count must be positive"));
    }
    if height == 0 || width == 0 || channels == 0 {
        return Err(Error::invalid("image extents must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|i| {
            let label = i % class_count;
            (render(kind, label, class_count, height, width, channels, &mut rng), label)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class_means(data: &[(Image, usize)], classes: usize) -> Vec<Vec<f64>> {
        let dims = data[0].0.pixels.len();
        let mut sums = vec![vec![0.0; dims]; classes];
        let mut counts = vec![0usize; classes];
        for (img, l) in data {
            counts[*l] += 1;
            for (s, v) in sums[*l].iter_mut().zip(&img.pixels) {
                *s += v;
            }
        }
        for (s, n) in sums.iter_mut().zip(counts) {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
        sums
    }

    #[test]
    fn reproducible_and_balanced() {
        for kind in [SynthKind::Checkerboard, SynthKind::Blobs, SynthKind::Bars] {
            let a = synth_dataset(kind, 4, 40, 11, 16, 16, 3).unwrap();
            let b = synth_dataset(kind, 4, 40, 11, 16, 16, 3).unwrap();
            assert_eq!(a, b);
            let mut counts = [0; 4];
            a.iter().for_each(|(_, l)| counts[*l] += 1);
            assert_eq!(counts, [10; 4]);
            assert!(a.iter().all(|(img, _)| img.pixels.iter().all(|v| (0.0..=1.0).contains(v))));
        }
    }

    #[test]
    fn classes_are_separable() {
        for kind in [SynthKind::Checkerboard, SynthKind::Blobs, SynthKind::Bars] {
            let data = synth_dataset(kind, 4, 400, 2, 16, 16, 3).unwrap();
            let means = class_means(&data, 4);
            for i in 0..4 {
                for j in i + 1..4 {
                    let d: f64 = means[i]
                        .iter()
                        .zip(&means[j])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    assert!(d > 0.05, "{kind}: classes {i},{j} distance {d}");
                }
            }
        }
    }

    #[test]
    fn unknown_kind_is_rejected() {
        assert!("spirals".parse::<SynthKind>().is_err());
        assert_eq!("bars".parse::<SynthKind>().unwrap(), SynthKind::Bars);
    }
}
