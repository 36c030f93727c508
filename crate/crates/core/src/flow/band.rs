//! Banded LU factorization with partial pivoting.
//!
//! Row `r` stores columns `r - kl ..= r + kl + ku`; the extra `kl` upper
//! diagonals hold fill-in created by row interchanges.

#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let width = 2 * kl + ku + 1;
        Self { n, kl, ku, width, data: vec![0.0; n * width] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn slot(&self, r: usize, c: usize) -> usize {
        debug_assert!(c + self.kl >= r && c <= r + self.kl + self.ku, "({r}, {c}) outside band");
        r * self.width + (c + self.kl - r)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        if c + self.kl < r || c > r + self.kl + self.ku {
            return 0.0;
        }
        self.data[self.slot(r, c)]
    }

    #[inline]
    pub fn add(&mut self, r: usize, c: usize, v: f64) {
        let s = self.slot(r, c);
        self.data[s] += v;
    }

    pub fn clear(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }

    /// `y = A·x` for an unfactored matrix.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|r| {
                let lo = r.saturating_sub(self.kl);
                let hi = (r + self.kl + self.ku).min(self.n - 1);
                (lo..=hi).map(|c| self.data[self.slot(r, c)] * x[c]).sum()
            })
            .collect()
    }

    pub fn factor(mut self) -> Result<BandLu, usize> {
        let (n, kl, ku, w) = (self.n, self.kl, self.ku, self.width);
        let mut piv = vec![0usize; n];
        for k in 0..n {
            let last = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = self.data[k * w + kl].abs();
            for i in (k + 1)..=last {
                let v = self.data[i * w + (k + kl - i)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return Err(k);
            }
            piv[k] = p;
            let cmax = (k + kl + ku).min(n - 1);
            if p != k {
                for c in k..=cmax {
                    let a = k * w + (c + kl - k);
                    let b = p * w + (c + kl - p);
                    self.data.swap(a, b);
                }
            }
            let pivot = self.data[k * w + kl];
            for i in (k + 1)..=last {
                let ik = i * w + (k + kl - i);
                let l = self.data[ik] / pivot;
                self.data[ik] = l;
                if l == 0.0 {
                    continue;
                }
                for c in (k + 1)..=cmax {
                    let src = self.data[k * w + (c + kl - k)];
                    self.data[i * w + (c + kl - i)] -= l * src;
                }
            }
        }
        Ok(BandLu { m: self, piv })
    }
}

#[derive(Debug, Clone)]
pub struct BandLu {
    m: BandMatrix,
    piv: Vec<usize>,
}

impl BandLu {
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let BandMatrix { n, kl, ku, width: w, ref data } = self.m;
        for k in 0..n {
            let p = self.piv[k];
            if p != k {
                b.swap(k, p);
            }
            let bk = b[k];
            if bk != 0.0 {
                for i in (k + 1)..=(k + kl).min(n - 1) {
                    b[i] -= data[i * w + (k + kl - i)] * bk;
                }
            }
        }
        for k in (0..n).rev() {
            let mut s = b[k];
            for c in (k + 1)..=(k + kl + ku).min(n - 1) {
                s -= data[k * w + (c + kl - k)] * b[c];
            }
            b[k] = s / data[k * w + kl];
        }
    }
}
