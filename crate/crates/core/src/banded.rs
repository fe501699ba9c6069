//! Symmetric banded matrices: Cholesky factorization, solves, log-determinant
//! and the selected inverse (all entries of `A⁻¹` inside the band).

/// Lower band of a symmetric matrix, stored column by column.
#[derive(Clone, Debug, PartialEq)]
pub struct BandMatrix {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    /// Zero matrix with `bw` sub-diagonals.
    pub fn zeros(n: usize, bw: usize) -> Self {
        BandMatrix { n, bw, data: vec![0.0; n * (bw + 1)] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    fn slot(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        debug_assert!(i - j <= self.bw, "entry ({i},{j}) outside band {}", self.bw);
        j * (self.bw + 1) + (i - j)
    }

    pub fn in_band(&self, i: usize, j: usize) -> bool {
        i.abs_diff(j) <= self.bw
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if self.in_band(i, j) {
            self.data[self.slot(i, j)]
        } else {
            0.0
        }
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j);
        self.data[s] = v;
    }

    /// Adds `v` to entry `(i, j)` (and by symmetry `(j, i)`).
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j);
        self.data[s] += v;
    }

    pub fn add_diagonal(&mut self, v: f64) {
        for j in 0..self.n {
            self.data[j * (self.bw + 1)] += v;
        }
    }

    pub fn clear(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for j in 0..self.n {
            y[j] += self.get(j, j) * x[j];
            for i in j + 1..(j + self.bw + 1).min(self.n) {
                let v = self.get(i, j);
                y[i] += v * x[j];
                y[j] += v * x[i];
            }
        }
        y
    }

    /// Cholesky factor `L` with `A = L Lᵀ`; on failure returns the index of the
    /// first non-positive pivot.
    pub fn cholesky(&self) -> Result<BandCholesky, usize> {
        let (n, bw) = (self.n, self.bw);
        let w = bw + 1;
        let mut l = self.data.clone();
        for j in 0..n {
            let k0 = j.saturating_sub(bw);
            let mut d = l[j * w];
            for k in k0..j {
                let v = l[k * w + (j - k)];
                d -= v * v;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(j);
            }
            let djj = d.sqrt();
            l[j * w] = djj;
            for i in j + 1..(j + w).min(n) {
                let mut s = l[j * w + (i - j)];
                for k in i.saturating_sub(bw)..j {
                    s -= l[k * w + (i - k)] * l[k * w + (j - k)];
                }
                l[j * w + (i - j)] = s / djj;
            }
        }
        Ok(BandCholesky { n, bw, l })
    }
}

/// Banded lower Cholesky factor.
#[derive(Clone, Debug)]
pub struct BandCholesky {
    n: usize,
    bw: usize,
    l: Vec<f64>,
}

impl BandCholesky {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.l[j * (self.bw + 1) + (i - j)]
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n).map(|j| self.at(j, j).ln()).sum::<f64>()
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, bw) = (self.n, self.bw);
        let mut x = b.to_vec();
        for i in 0..n {
            let mut s = x[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.at(i, k) * x[k];
            }
            x[i] = s / self.at(i, i);
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..(i + bw + 1).min(n) {
                s -= self.at(k, i) * x[k];
            }
            x[i] = s / self.at(i, i);
        }
        x
    }

    /// Entries of `A⁻¹` inside the band, by the Takahashi recurrences.
    pub fn selected_inverse(&self) -> BandMatrix {
        let (n, bw) = (self.n, self.bw);
        let mut z = BandMatrix::zeros(n, bw);
        for j in (0..n).rev() {
            let ljj = self.at(j, j);
            let hi = (j + bw + 1).min(n);
            // unit-lower multipliers of column j
            let mult: Vec<f64> = (j + 1..hi).map(|k| self.at(k, j) / ljj).collect();
            for i in (j + 1..hi).rev() {
                let mut s = 0.0;
                for (off, &m) in mult.iter().enumerate() {
                    let k = j + 1 + off;
                    s -= z.get(i, k) * m;
                }
                z.set(i, j, s);
            }
            let mut d = 1.0 / (ljj * ljj);
            for (off, &m) in mult.iter().enumerate() {
                d -= z.get(j, j + 1 + off) * m;
            }
            z.set(j, j, d);
        }
        z
    }
}
