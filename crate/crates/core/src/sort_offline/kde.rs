//! Gaussian kernel density estimates on the 8-bit feature grid.

use super::SortError;

/// Number of representable feature values per axis.
pub const GRID: usize = 256;

/// Density on the full 256×256 grid, indexed `[(f1 + 128) * 256 + (f2 + 128)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeGrid {
    pub bandwidth: f64,
    pub density: Vec<f64>,
}

impl KdeGrid {
    pub fn at(&self, f1: i8, f2: i8) -> f64 {
        self.density[(f1 as i16 + 128) as usize * GRID + (f2 as i16 + 128) as usize]
    }

    /// Grid cell holding the largest density (first in row-major order).
    pub fn argmax(&self) -> (i8, i8) {
        let (i, _) = self
            .density
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
        (((i / GRID) as i16 - 128) as i8, ((i % GRID) as i16 - 128) as i8)
    }
}

fn kernel_matrix(bandwidth: f64) -> Vec<f64> {
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    (0..GRID * GRID)
        .map(|k| {
            let d = (k / GRID) as f64 - (k % GRID) as f64;
            (-d * d * inv).exp()
        })
        .collect()
}

fn check_bandwidth(bandwidth: f64) -> Result<(), SortError> {
    if bandwidth.is_finite() && bandwidth > 0.0 {
        Ok(())
    } else {
        Err(SortError::Bandwidth(bandwidth))
    }
}

/// Separable Gaussian KDE of 2-D points, normalized to sum to 1 over the grid.
pub fn fit_kde(points: &[(i8, i8)], bandwidth: f64) -> Result<KdeGrid, SortError> {
    if points.is_empty() {
        return Err(SortError::EmptyInput);
    }
    check_bandwidth(bandwidth)?;
    let mut hist = vec![0.0; GRID * GRID];
    for &(a, b) in points {
        hist[(a as i16 + 128) as usize * GRID + (b as i16 + 128) as usize] += 1.0;
    }
    let k = kernel_matrix(bandwidth);
    // Smooth along f2 inside each row, then along f1 across rows.
    let mut rows = vec![0.0; GRID * GRID];
    for r in 0..GRID {
        let h = &hist[r * GRID..(r + 1) * GRID];
        if h.iter().all(|&c| c == 0.0) {
            continue;
        }
        for y in 0..GRID {
            let kr = &k[y * GRID..(y + 1) * GRID];
            rows[r * GRID + y] = h.iter().zip(kr).map(|(a, b)| a * b).sum();
        }
    }
    let mut density = vec![0.0; GRID * GRID];
    for x in 0..GRID {
        for r in 0..GRID {
            let w = k[x * GRID + r];
            if w == 0.0 || rows[r * GRID..(r + 1) * GRID].iter().all(|&c| c == 0.0) {
                continue;
            }
            for y in 0..GRID {
                density[x * GRID + y] += w * rows[r * GRID + y];
            }
        }
    }
    let total: f64 = density.iter().sum();
    density.iter_mut().for_each(|d| *d /= total);
    Ok(KdeGrid { bandwidth, density })
}

/// One-dimensional KDE of `values` on the 256 feature levels, normalized.
pub fn marginal_kde(values: &[i8], bandwidth: f64) -> Result<Vec<f64>, SortError> {
    if values.is_empty() {
        return Err(SortError::EmptyInput);
    }
    check_bandwidth(bandwidth)?;
    let mut hist = [0.0; GRID];
    for &v in values {
        hist[(v as i16 + 128) as usize] += 1.0;
    }
    let k = kernel_matrix(bandwidth);
    let mut d: Vec<f64> = (0..GRID)
        .map(|x| (0..GRID).map(|r| k[x * GRID + r] * hist[r]).sum())
        .collect();
    let total: f64 = d.iter().sum();
    d.iter_mut().for_each(|v| *v /= total);
    Ok(d)
}

/// Half of Silverman's rule of thumb, at least one LSB.
pub fn default_bandwidth(values: &[i8]) -> f64 {
    let n = values.len() as f64;
    if n < 2.0 {
        return 1.0;
    }
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (0.5 * 1.06 * var.sqrt() * n.powf(-0.2)).max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn single_point_peaks_at_its_cell() {
        let k = fit_kde(&[(17, -40)], 3.0).unwrap();
        assert_eq!(k.argmax(), (17, -40));
    }

    #[test]
    fn two_far_points_give_two_maxima() {
        let pts = [(-60i8, -60i8), (50, 40)];
        let h = 2.0;
        let k = fit_kde(&pts, h).unwrap();
        // Direct kernel-sum evaluation as the oracle.
        let direct = |x: f64, y: f64| -> f64 {
            pts.iter()
                .map(|&(a, b)| {
                    let dx = x - a as f64;
                    let dy = y - b as f64;
                    (-(dx * dx + dy * dy) / (2.0 * h * h)).exp()
                })
                .sum()
        };
        let mut maxima = vec![];
        for x in -127i16..127 {
            for y in -127i16..127 {
                let d = k.at(x as i8, y as i8);
                let nb = [(-1, 0), (1, 0), (0, -1), (0, 1)];
                if nb.iter().all(|&(dx, dy)| d > k.at((x + dx) as i8, (y + dy) as i8)) {
                    maxima.push((x as i8, y as i8));
                }
                let ratio = d / k.at(-60, -60);
                let oracle = direct(x as f64, y as f64) / direct(-60.0, -60.0);
                assert!((ratio - oracle).abs() < 1e-9);
            }
        }
        assert_eq!(maxima, vec![(-60, -60), (50, 40)]);
    }

    #[test]
    fn density_sums_to_one() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..3 {
            let pts: Vec<(i8, i8)> = (0..50).map(|_| (rng.random(), rng.random())).collect();
            let bw = rng.random_range(0.5..20.0);
            let k = fit_kde(&pts, bw).unwrap();
            assert!((k.density.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(k.density.iter().all(|&d| d >= 0.0));
        }
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(matches!(fit_kde(&[], 1.0), Err(SortError::EmptyInput)));
    }
}
