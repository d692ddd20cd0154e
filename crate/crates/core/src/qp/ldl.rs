//! Banded LDL' factorization of a symmetric matrix under a caller-supplied
//! permutation. Quasi-definite matrices factor without pivoting for any
//! symmetric permutation, which is what the solver relies on.

#[derive(Clone, Debug)]
pub struct BandedLdl {
    n: usize,
    bw: usize,
    d: Vec<f64>,
    /// `lrow[i * bw + t]` holds `L[i][i - bw + t]` (zero outside the matrix).
    lrow: Vec<f64>,
    /// `lcol[j * bw + t]` holds `L[j + 1 + t][j]` (zero outside the matrix).
    lcol: Vec<f64>,
    /// `perm[pos]` is the original index stored at position `pos`.
    perm: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZeroPivot {
    pub position: usize,
}

impl BandedLdl {
    /// Factors the symmetric matrix given by `entries` (original indices,
    /// each off-diagonal pair supplied once, duplicates summed).
    pub fn factor(n: usize, entries: &[(usize, usize, f64)], perm: Vec<usize>) -> Result<Self, ZeroPivot> {
        debug_assert_eq!(perm.len(), n);
        let mut iperm = vec![0; n];
        for (pos, &orig) in perm.iter().enumerate() {
            iperm[orig] = pos;
        }
        let bw = entries
            .iter()
            .map(|&(i, j, _)| iperm[i].abs_diff(iperm[j]))
            .max()
            .unwrap_or(0);
        let w = bw + 1;
        // Row-major lower band: `band[i * w + (i - j)]` holds `L[i][j]`.
        let mut band = vec![0.0; n * w];
        for &(i, j, v) in entries {
            let (pi, pj) = (iperm[i], iperm[j]);
            let (r, c) = if pi >= pj { (pi, pj) } else { (pj, pi) };
            band[r * w + (r - c)] += v;
        }

        let mut d = vec![0.0; n];
        let mut scratch = vec![0.0; w];
        for j in 0..n {
            let lo = j.saturating_sub(bw);
            // scratch[k - lo] = L[j][k] * d[k]
            let mut dj = band[j * w];
            for k in lo..j {
                let ljk = band[j * w + (j - k)];
                scratch[k - lo] = ljk * d[k];
                dj -= ljk * scratch[k - lo];
            }
            if dj == 0.0 || !dj.is_finite() {
                return Err(ZeroPivot { position: j });
            }
            d[j] = dj;
            let hi = (j + bw).min(n - 1);
            for i in (j + 1)..=hi {
                let lo_i = i.saturating_sub(bw).max(lo);
                let mut v = band[i * w + (i - j)];
                for k in lo_i..j {
                    v -= band[i * w + (i - k)] * scratch[k - lo];
                }
                band[i * w + (i - j)] = v / dj;
            }
        }
        let mut lrow = vec![0.0; n * bw];
        let mut lcol = vec![0.0; n * bw];
        for i in 0..n {
            for k in i.saturating_sub(bw)..i {
                let v = band[i * w + (i - k)];
                lrow[i * bw + (k + bw - i)] = v;
                lcol[k * bw + (i - k - 1)] = v;
            }
        }
        Ok(Self { n, bw, d, lrow, lcol, perm })
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `K x = rhs` in place.
    pub fn solve(&self, rhs: &mut [f64]) {
        let mut work = vec![0.0; self.n + self.bw];
        self.solve_with(rhs, &mut work);
    }

    /// As [`solve`](Self::solve), with caller-provided scratch of length
    /// at least `dim() + bandwidth()`.
    pub fn solve_with(&self, rhs: &mut [f64], work: &mut [f64]) {
        let (n, bw) = (self.n, self.bw);
        // Padded layout: y[i] lives at work[bw + i] so every band slice is full.
        let y = &mut work[..n + bw];
        y[..bw].fill(0.0);
        for (pos, &orig) in self.perm.iter().enumerate() {
            y[bw + pos] = rhs[orig];
        }
        for i in 0..n {
            let row = &self.lrow[i * bw..(i + 1) * bw];
            let acc: f64 = row.iter().zip(&y[i..i + bw]).map(|(l, v)| l * v).sum();
            y[bw + i] -= acc;
        }
        for i in 0..n {
            y[bw + i] /= self.d[i];
        }
        for i in (0..n).rev() {
            let hi = (i + bw).min(n - 1);
            let col = &self.lcol[i * bw..i * bw + (hi - i)];
            let acc: f64 = col.iter().zip(&y[bw + i + 1..bw + hi + 1]).map(|(l, v)| l * v).sum();
            y[bw + i] -= acc;
        }
        for (pos, &orig) in self.perm.iter().enumerate() {
            rhs[orig] = y[bw + pos];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_mul(entries: &[(usize, usize, f64)], n: usize, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for &(i, j, v) in entries {
            out[i] += v * x[j];
            if i != j {
                out[j] += v * x[i];
            }
        }
        out
    }

    #[test]
    fn solves_quasi_definite_system_under_permutation() {
        // [P A'; A -I/rho] with P = [[4,1],[1,3]], A = [1 1].
        let entries = vec![(0, 0, 4.0), (1, 0, 1.0), (1, 1, 3.0), (2, 0, 1.0), (2, 1, 1.0), (2, 2, -0.1)];
        for perm in [vec![0, 1, 2], vec![2, 0, 1], vec![1, 2, 0]] {
            let f = BandedLdl::factor(3, &entries, perm).unwrap();
            let x_true = [0.5, -1.25, 2.0];
            let mut rhs = dense_mul(&entries, 3, &x_true);
            f.solve(&mut rhs);
            for (a, b) in rhs.iter().zip(x_true) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tridiagonal_bandwidth_is_one() {
        let n = 50;
        let mut entries = Vec::new();
        for i in 0..n {
            entries.push((i, i, 4.0));
            if i > 0 {
                entries.push((i, i - 1, -1.0));
            }
        }
        let f = BandedLdl::factor(n, &entries, (0..n).collect()).unwrap();
        assert_eq!(f.bandwidth(), 1);
        let x_true: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let mut rhs = dense_mul(&entries, n, &x_true);
        f.solve(&mut rhs);
        for (a, b) in rhs.iter().zip(&x_true) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_matrix_reports_zero_pivot() {
        let entries = vec![(0, 0, 0.0), (1, 1, 1.0)];
        assert_eq!(BandedLdl::factor(2, &entries, vec![0, 1]).unwrap_err(), ZeroPivot { position: 0 });
    }
}
