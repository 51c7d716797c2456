//! Synthetic Q/K/V generation.
//!
//! All randomness comes from ChaCha8 seeded with the config seed, so a seed
//! reproduces the same values on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::harness::config::{DataMode, RunConfig};
use crate::layout::{gen_reorder_index, permute_rows, LatentLayout};
use crate::tensor::{Matrix, Scalar};

/// Noise added on top of the upsampled field in smooth mode.
pub const SMOOTH_NOISE: f64 = 0.1;

/// Token-grid geometry the generators need. Patches need not tile the
/// frame here, so padded configs can be generated before padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub cell_h: usize,
    pub cell_w: usize,
}

impl Grid {
    pub fn n(&self) -> usize {
        self.frames * self.height * self.width
    }
}

impl From<&LatentLayout> for Grid {
    fn from(l: &LatentLayout) -> Self {
        Self {
            frames: l.frames(),
            height: l.height(),
            width: l.width(),
            cell_h: l.patch_h(),
            cell_w: l.patch_w(),
        }
    }
}

impl From<&RunConfig> for Grid {
    fn from(c: &RunConfig) -> Self {
        Self {
            frames: c.frames,
            height: c.height,
            width: c.width,
            cell_h: c.patch_h,
            cell_w: c.patch_w,
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `n x cols` matrix of standard normal draws, row-major.
pub fn gaussian_matrix<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| T::from_f64(normal(rng)))
}

/// Per frame and column, a standard normal field on a lattice with one node
/// per cell corner is bilinearly interpolated to every token, then
/// `SMOOTH_NOISE`-scaled Gaussian noise is added. Tokens sharing a cell
/// interpolate the same four nodes and so stay close to each other.
pub fn smooth_matrix<T: Scalar>(grid: &Grid, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<T> {
    let lat_h = grid.height.div_ceil(grid.cell_h) + 1;
    let lat_w = grid.width.div_ceil(grid.cell_w) + 1;
    let frame_len = grid.height * grid.width;
    let mut out = vec![0.0f64; grid.n() * cols];
    for f in 0..grid.frames {
        // lattice[(a * lat_w + b) * cols + c]
        let lattice: Vec<f64> = (0..lat_h * lat_w * cols).map(|_| normal(rng)).collect();
        let node = |a: usize, b: usize, c: usize| lattice[(a * lat_w + b) * cols + c];
        for y in 0..grid.height {
            let fy = (y as f64 + 0.5) / grid.cell_h as f64;
            let a = (fy.floor() as usize).min(lat_h - 2);
            let ty = fy - a as f64;
            for x in 0..grid.width {
                let fx = (x as f64 + 0.5) / grid.cell_w as f64;
                let b = (fx.floor() as usize).min(lat_w - 2);
                let tx = fx - b as f64;
                let row = f * frame_len + y * grid.width + x;
                for c in 0..cols {
                    out[row * cols + c] = (1.0 - ty) * (1.0 - tx) * node(a, b, c)
                        + (1.0 - ty) * tx * node(a, b + 1, c)
                        + ty * (1.0 - tx) * node(a + 1, b, c)
                        + ty * tx * node(a + 1, b + 1, c);
                }
            }
        }
    }
    for v in out.iter_mut() {
        *v += SMOOTH_NOISE * normal(rng);
    }
    Matrix::from_fn(grid.n(), cols, |r, c| T::from_f64(out[r * cols + c]))
}

/// Generated attention inputs, each `n x (heads * d)` with head `h` in
/// columns `[h*d, (h+1)*d)`.
#[derive(Debug, Clone)]
pub struct Synthetic<T: Scalar> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
}

/// Generates Q, then K, then V from one seeded stream.
pub fn generate<T: Scalar>(grid: &Grid, cols: usize, mode: DataMode, seed: u64) -> Result<Synthetic<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let one = |rng: &mut ChaCha8Rng| -> Result<Matrix<T>> {
        match mode {
            DataMode::Gaussian => Ok(gaussian_matrix(grid.n(), cols, rng)),
            DataMode::Smooth => Ok(smooth_matrix(grid, cols, rng)),
            DataMode::File => Err(Error::Config("file mode has nothing to generate".into())),
        }
    };
    let q = one(&mut rng)?;
    let k = one(&mut rng)?;
    let v = one(&mut rng)?;
    Ok(Synthetic { q, k, v })
}

/// Synthetic inputs for `config`.
pub fn gen_synthetic<T: Scalar>(config: &RunConfig) -> Result<Synthetic<T>> {
    config.validate()?;
    generate(&Grid::from(config), config.heads * config.d, config.data_mode, config.seed)
}

/// Checks user-supplied matrices against `config` (file mode).
pub fn validate_inputs<T: Scalar>(config: &RunConfig, data: &Synthetic<T>) -> Result<()> {
    let want = (config.n(), config.heads * config.d);
    for (name, m) in [("Q", &data.q), ("K", &data.k), ("V", &data.v)] {
        if m.shape() != want {
            return Err(Error::Shape(format!(
                "{name} is {:?}, config expects {want:?}",
                m.shape()
            )));
        }
    }
    Ok(())
}

/// Mean over regions and columns of the population variance of a region's
/// tokens. `x` is in original token order.
pub fn mean_within_region_variance<T: Scalar>(x: &Matrix<T>, layout: &LatentLayout) -> Result<f64> {
    let xr = permute_rows(x, &gen_reorder_index(layout))?;
    let (g, p, d) = (layout.regions(), layout.region_size(), x.cols());
    let mut total = 0.0;
    for i in 0..g {
        for c in 0..d {
            let vals: Vec<f64> = (i * p..(i + 1) * p).map(|u| xr.get(u, c).as_f64()).collect();
            let mean = vals.iter().sum::<f64>() / p as f64;
            total += vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p as f64;
        }
    }
    Ok(total / (g * d).max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::encode;

    #[test]
    fn same_seed_same_bytes() {
        let cfg = RunConfig {
            frames: 1,
            height: 2,
            width: 4,
            patch_h: 2,
            patch_w: 2,
            d: 2,
            seed: 42,
            ..RunConfig::default()
        };
        let a = gen_synthetic::<f32>(&cfg).unwrap();
        let b = gen_synthetic::<f32>(&cfg).unwrap();
        assert_eq!(a.q.shape(), (8, 2));
        assert_eq!(encode(&a.q).unwrap(), encode(&b.q).unwrap());
        assert_eq!(encode(&a.v).unwrap(), encode(&b.v).unwrap());
        assert_ne!(a.q, a.k);
        let c = gen_synthetic::<f32>(&RunConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a.q, c.q);
    }

    #[test]
    fn smooth_tokens_are_locally_similar() {
        let layout = LatentLayout::new(2, 8, 16, 2, 4).unwrap();
        let grid = Grid::from(&layout);
        let mut smooth = 0.0;
        let mut noise = 0.0;
        for seed in 0..20 {
            let s = generate::<f64>(&grid, 8, DataMode::Smooth, seed).unwrap();
            let g = generate::<f64>(&grid, 8, DataMode::Gaussian, seed).unwrap();
            smooth += mean_within_region_variance(&s.q, &layout).unwrap();
            noise += mean_within_region_variance(&g.q, &layout).unwrap();
        }
        assert!(smooth < noise, "smooth {smooth} vs gaussian {noise}");
    }

    #[test]
    fn file_mode_validates_shapes() {
        let cfg = RunConfig {
            frames: 1,
            height: 2,
            width: 2,
            patch_h: 1,
            patch_w: 1,
            d: 3,
            heads: 2,
            data_mode: DataMode::File,
            ..RunConfig::default()
        };
        assert!(gen_synthetic::<f32>(&cfg).is_err());
        let ok = Synthetic {
            q: Matrix::<f32>::zeros(4, 6),
            k: Matrix::zeros(4, 6),
            v: Matrix::zeros(4, 6),
        };
        validate_inputs(&cfg, &ok).unwrap();
        let bad = Synthetic {
            v: Matrix::zeros(4, 3),
            ..ok
        };
        assert!(validate_inputs(&cfg, &bad).is_err());
    }
}
