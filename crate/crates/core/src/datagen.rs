//! Finite i.i.d. samples from a materialized data-generating process.

use crate::mechanisms::Dgp;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedAliasIndex;
use std::io::Write;

/// Column-oriented sample. Row `i` is `(cell[i], x_bin_row(i), x_num_row(i), t[i], y[i])`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n: usize,
    pub u: usize,
    pub h: usize,
    pub seed: u64,
    pub cell: Vec<u32>,
    /// `n * u` binary covariates, row-major.
    pub x_bin: Vec<u8>,
    /// `n * h` ordinal covariates, row-major.
    pub x_num: Vec<f64>,
    pub t: Vec<u8>,
    pub y: Vec<u8>,
}

impl Dataset {
    /// Assembles a dataset from explicit columns; binary covariates are decoded
    /// from the cell id (binary block fastest) and `x_num` is given row-major.
    pub fn from_columns(u: usize, h: usize, seed: u64, cell: Vec<u32>, x_num: Vec<f64>, t: Vec<u8>, y: Vec<u8>) -> Self {
        let n = cell.len();
        assert!(t.len() == n && y.len() == n && x_num.len() == n * h);
        let mut x_bin = Vec::with_capacity(n * u);
        for &c in &cell {
            let bin = c as usize & ((1usize << u) - 1);
            x_bin.extend((0..u).map(|j| ((bin >> j) & 1) as u8));
        }
        Dataset { n, u, h, seed, cell, x_bin, x_num, t, y }
    }

    #[inline]
    pub fn x_bin_row(&self, i: usize) -> &[u8] {
        &self.x_bin[i * self.u..(i + 1) * self.u]
    }

    #[inline]
    pub fn x_num_row(&self, i: usize) -> &[f64] {
        &self.x_num[i * self.h..(i + 1) * self.h]
    }

    pub fn n_treated(&self) -> usize {
        self.t.iter().filter(|&&t| t == 1).count()
    }

    /// Writes `xb1..xbu, xn1..xnh, t, y` with a header row.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (1..=self.u).map(|j| format!("xb{j}")).collect();
        header.extend((1..=self.h).map(|j| format!("xn{j}")));
        header.push("t".into());
        header.push("y".into());
        w.write_record(&header)?;
        let mut rec = Vec::with_capacity(header.len());
        for i in 0..self.n {
            rec.clear();
            rec.extend(self.x_bin_row(i).iter().map(|b| b.to_string()));
            rec.extend(self.x_num_row(i).iter().map(|v| v.to_string()));
            rec.push(self.t[i].to_string());
            rec.push(self.y[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn sample_dataset(dgp: &Dgp, n: usize, seed: u64) -> Dataset {
    assert!(n >= 1, "sample size must be positive");
    let support = dgp.support();
    let alias = WeightedAliasIndex::new(dgp.pmf.probs.clone()).expect("pmf has positive mass");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (u, h) = (support.u, support.h);
    let mut cell = Vec::with_capacity(n);
    let mut x_bin = Vec::with_capacity(n * u);
    let mut x_num = Vec::with_capacity(n * h);
    let mut t = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let g = &dgp.treatment.g_table;
    let m = &dgp.outcome.m_table;
    for _ in 0..n {
        let id = alias.sample(&mut rng);
        let ti = u8::from(rng.random::<f64>() < g[id]);
        let yi = u8::from(rng.random::<f64>() < m[ti as usize][id]);
        let (bin, num) = support.split(id);
        x_bin.extend((0..u).map(|j| ((bin >> j) & 1) as u8));
        x_num.extend_from_slice(&support.num_grid[num]);
        cell.push(id as u32);
        t.push(ti);
        y.push(yi);
    }
    Dataset { n, u, h, seed, cell, x_bin, x_num, t, y }
}
