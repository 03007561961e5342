//! Procedural 32×32 single-channel images in three domains.
//!
//! * `smooth`: a mid-gray field plus four broad Gaussian bumps.
//! * `texture`: band-pass filtered white noise (difference of blurs).
//! * `glyph`: a 4×4 grid of 8×8 cells, each a glyph from a fixed 16-entry
//!   binary atlas, lightly smoothed.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
const CELL: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Smooth,
    Texture,
    Glyph,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Smooth, Domain::Texture, Domain::Glyph];

    pub fn name(self) -> &'static str {
        match self {
            Domain::Smooth => "smooth",
            Domain::Texture => "texture",
            Domain::Glyph => "glyph",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smooth" => Ok(Domain::Smooth),
            "texture" => Ok(Domain::Texture),
            "glyph" => Ok(Domain::Glyph),
            other => Err(Error::Argument(format!("unknown image domain `{other}`"))),
        }
    }
}

/// Sampling ratios over the three domains.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMix {
    pub smooth: f64,
    pub texture: f64,
    pub glyph: f64,
}

impl DomainMix {
    pub fn only(domain: Domain) -> Self {
        let mut m = DomainMix {
            smooth: 0.0,
            texture: 0.0,
            glyph: 0.0,
        };
        *m.ratio_mut(domain) = 1.0;
        m
    }

    pub fn uniform() -> Self {
        DomainMix {
            smooth: 1.0 / 3.0,
            texture: 1.0 / 3.0,
            glyph: 1.0 / 3.0,
        }
    }

    pub fn ratio(&self, d: Domain) -> f64 {
        match d {
            Domain::Smooth => self.smooth,
            Domain::Texture => self.texture,
            Domain::Glyph => self.glyph,
        }
    }

    fn ratio_mut(&mut self, d: Domain) -> &mut f64 {
        match d {
            Domain::Smooth => &mut self.smooth,
            Domain::Texture => &mut self.texture,
            Domain::Glyph => &mut self.glyph,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = [self.smooth, self.texture, self.glyph];
        if r.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::config("data.mix", "ratios must be nonnegative"));
        }
        let total: f64 = r.iter().sum();
        if total == 0.0 {
            return Err(Error::config("data.mix", "mixture is empty"));
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config("data.mix", format!("ratios sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Domain for each of `count` samples: counts are allotted by largest
    /// remainder and the order is shuffled with `seed`.
    pub fn assign(&self, count: usize, seed: u64) -> Result<Vec<Domain>> {
        self.validate()?;
        let raw: Vec<f64> = Domain::ALL.iter().map(|&d| self.ratio(d) * count as f64).collect();
        let mut counts: Vec<usize> = raw.iter().map(|v| v.floor() as usize).collect();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())));
        let mut left = count - counts.iter().sum::<usize>();
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            if raw[i] > 0.0 {
                counts[i] += 1;
                left -= 1;
            }
        }
        let mut out: Vec<Domain> = Domain::ALL
            .iter()
            .zip(&counts)
            .flat_map(|(&d, &c)| std::iter::repeat(d).take(c))
            .collect();
        Rng::new(seed).shuffle(&mut out);
        Ok(out)
    }
}

const ATLAS: [[&str; 8]; 16] = [
    ["..####..", ".#....#.", "#......#", "#......#", "#......#", "#......#", ".#....#.", "..####.."],
    ["...##...", "..###...", ".#.##...", "...##...", "...##...", "...##...", "...##...", ".######."],
    ["########", "#......#", "#......#", "########", "#.......", "#.......", "#.......", "#......."],
    ["#......#", ".#....#.", "..#..#..", "...##...", "...##...", "..#..#..", ".#....#.", "#......#"],
    ["########", "...##...", "...##...", "...##...", "...##...", "...##...", "...##...", "...##..."],
    ["#.......", "#.......", "#.......", "#.......", "#.......", "#.......", "#.......", "########"],
    ["#......#", "##....##", "#.#..#.#", "#..##..#", "#......#", "#......#", "#......#", "#......#"],
    ["..####..", ".#....#.", "#.......", ".####...", ".....##.", ".......#", ".#....#.", "..####.."],
    ["#......#", "#......#", "#......#", "########", "#......#", "#......#", "#......#", "#......#"],
    ["...#....", "..###...", ".#.#.#..", "#..#..#.", "...#....", "...#....", "...#....", "...#...."],
    ["########", ".......#", "......#.", ".....#..", "....#...", "...#....", "..#.....", ".#......"],
    ["#.#.#.#.", ".#.#.#.#", "#.#.#.#.", ".#.#.#.#", "#.#.#.#.", ".#.#.#.#", "#.#.#.#.", ".#.#.#.#"],
    ["........", "..####..", ".#....#.", ".#....#.", ".#....#.", ".#....#.", "..####..", "........"],
    ["#......#", "#......#", ".#....#.", ".#....#.", "..#..#..", "..#..#..", "...##...", "...##..."],
    ["######..", "#.....#.", "#......#", "#......#", "#......#", "#......#", "#.....#.", "######.."],
    ["...##...", "...##...", "...##...", "########", "########", "...##...", "...##...", "...##..."],
];

/// The 16 binary 8×8 glyphs, row-major, 1.0 = ink.
pub fn glyph_atlas() -> Vec<[f64; CELL * CELL]> {
    ATLAS
        .iter()
        .map(|rows| {
            let mut g = [0.0; CELL * CELL];
            for (r, row) in rows.iter().enumerate() {
                for (c, ch) in row.bytes().enumerate() {
                    g[r * CELL + c] = if ch == b'#' { 1.0 } else { 0.0 };
                }
            }
            g
        })
        .collect()
}

/// One `1 × 32 × 32` image of `domain`, a pure function of `(domain, seed)`.
pub fn render_domain_image(domain: Domain, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    let px = match domain {
        Domain::Smooth => smooth(&mut rng),
        Domain::Texture => texture(&mut rng),
        Domain::Glyph => glyph(&mut rng),
    };
    Tensor::new(&[1, IMAGE_SIZE, IMAGE_SIZE], px).expect("fixed image size")
}

fn smooth(rng: &mut Rng) -> Vec<f64> {
    let n = IMAGE_SIZE;
    let mut img = vec![0.5; n * n];
    for _ in 0..4 {
        let (cy, cx) = (rng.uniform() * n as f64, rng.uniform() * n as f64);
        let sigma = 6.0 + 4.0 * rng.uniform();
        let amp = 0.5 * (rng.uniform() - 0.5);
        for y in 0..n {
            for x in 0..n {
                let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                img[y * n + x] += amp * (-r2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img
}

fn blur(img: &[f64], sigma: f64) -> Vec<f64> {
    let n = IMAGE_SIZE;
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    // Separable, wrap-around boundary.
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                let mut s = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let o = k as isize - radius;
                    let (yy, xx) = if horizontal {
                        (y, (x as isize + o).rem_euclid(n as isize) as usize)
                    } else {
                        ((y as isize + o).rem_euclid(n as isize) as usize, x)
                    };
                    s += w * src[yy * n + xx];
                }
                out[y * n + x] = s / norm;
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

fn texture(rng: &mut Rng) -> Vec<f64> {
    let n = IMAGE_SIZE;
    let white = rng.normals(n * n);
    let fine = blur(&white, 0.8);
    let coarse = blur(&white, 2.0);
    let band: Vec<f64> = fine.iter().zip(&coarse).map(|(a, b)| a - b).collect();
    let mean = band.iter().sum::<f64>() / band.len() as f64;
    let std = (band.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / band.len() as f64).sqrt();
    let contrast = 0.15 + 0.1 * rng.uniform();
    band.iter()
        .map(|v| (0.5 + contrast * (v - mean) / std).clamp(0.0, 1.0))
        .collect()
}

fn glyph(rng: &mut Rng) -> Vec<f64> {
    let n = IMAGE_SIZE;
    let atlas = glyph_atlas();
    let mut img = vec![0.0; n * n];
    for cy in 0..n / CELL {
        for cx in 0..n / CELL {
            let g = &atlas[rng.below(atlas.len())];
            for r in 0..CELL {
                for c in 0..CELL {
                    img[(cy * CELL + r) * n + cx * CELL + c] = g[r * CELL + c];
                }
            }
        }
    }
    // Light smoothing: 92% own value, 8% mean of the 4-neighbourhood.
    let mut out = img.clone();
    for y in 0..n {
        for x in 0..n {
            let mut s = 0.0;
            let mut k = 0.0;
            for (dy, dx) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if (0..n as isize).contains(&yy) && (0..n as isize).contains(&xx) {
                    s += img[yy as usize * n + xx as usize];
                    k += 1.0;
                }
            }
            out[y * n + x] = 0.92 * img[y * n + x] + 0.08 * s / k;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyph_histogram_is_bimodal() {
        for seed in 0..20 {
            let img = render_domain_image(Domain::Glyph, seed);
            let near = img
                .data()
                .iter()
                .filter(|&&v| v <= 0.1 || v >= 0.9)
                .count();
            assert!(near as f64 >= 0.9 * img.numel() as f64);
            let lo: Vec<f64> = img.data().iter().cloned().filter(|&v| v < 0.5).collect();
            let hi: Vec<f64> = img.data().iter().cloned().filter(|&v| v >= 0.5).collect();
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            assert!(mean(&hi) - mean(&lo) >= 0.8);
        }
    }

    #[test]
    fn smooth_has_small_gradients() {
        for seed in 0..20 {
            let img = render_domain_image(Domain::Smooth, seed);
            let d = img.data();
            let n = IMAGE_SIZE;
            let mut worst: f64 = 0.0;
            for y in 0..n {
                for x in 0..n {
                    if x + 1 < n {
                        worst = worst.max((d[y * n + x + 1] - d[y * n + x]).abs());
                    }
                    if y + 1 < n {
                        worst = worst.max((d[(y + 1) * n + x] - d[y * n + x]).abs());
                    }
                }
            }
            assert!(worst <= 0.2, "{worst}");
        }
    }

    #[test]
    fn images_are_pure_and_in_range() {
        for d in Domain::ALL {
            let a = render_domain_image(d, 7);
            assert_eq!(a, render_domain_image(d, 7));
            assert_ne!(a, render_domain_image(d, 8));
            assert_eq!(a.shape(), &[1, 32, 32]);
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn unknown_domain_is_rejected() {
        assert!(matches!("photo".parse::<Domain>(), Err(Error::Argument(_))));
        assert_eq!("glyph".parse::<Domain>().unwrap(), Domain::Glyph);
    }

    #[test]
    fn atlas_glyphs_are_distinct() {
        let atlas = glyph_atlas();
        assert_eq!(atlas.len(), 16);
        for i in 0..16 {
            for j in i + 1..16 {
                assert_ne!(atlas[i], atlas[j], "{i} {j}");
            }
        }
    }

    #[test]
    fn mix_assignment_counts() {
        let mix = DomainMix {
            smooth: 0.5,
            texture: 0.25,
            glyph: 0.25,
        };
        let a = mix.assign(100, 1).unwrap();
        assert_eq!(a.iter().filter(|d| **d == Domain::Smooth).count(), 50);
        assert_eq!(a.iter().filter(|d| **d == Domain::Glyph).count(), 25);
        let only = DomainMix::only(Domain::Glyph).assign(10, 0).unwrap();
        assert!(only.iter().all(|d| *d == Domain::Glyph));
        let empty = DomainMix {
            smooth: 0.0,
            texture: 0.0,
            glyph: 0.0,
        };
        assert!(matches!(empty.assign(3, 0), Err(Error::Config { .. })));
    }
}
