//! Summary statistics and least-squares fits over benchmark rows.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, StudentsT};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn stddev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Slope of the least-squares line through `(x, y)`.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficient {
    pub estimate: f64,
    pub std_error: f64,
}

impl Coefficient {
    pub fn t(&self) -> f64 {
        self.estimate / self.std_error
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolyFit {
    /// Constant term first.
    pub coefficients: Vec<Coefficient>,
    pub dof: usize,
}

impl PolyFit {
    /// Whether the two-sided `level` confidence interval of coefficient `i`
    /// contains zero.
    pub fn indistinguishable_from_zero(&self, i: usize, level: f64) -> bool {
        let c = self.coefficients[i];
        if c.std_error == 0.0 {
            return c.estimate == 0.0;
        }
        let t = StudentsT::new(0.0, 1.0, self.dof as f64).expect("positive dof");
        c.t().abs() <= t.inverse_cdf(0.5 + level / 2.0)
    }
}

/// Ordinary least squares fit of `y = Σ b_i x^i` for `i` in `0..=degree`.
/// `None` when there are too few distinct points.
pub fn polyfit(x: &[f64], y: &[f64], degree: usize) -> Option<PolyFit> {
    let n = x.len();
    let p = degree + 1;
    if n <= p || n != y.len() {
        return None;
    }
    // Centre and scale x so the normal equations stay well conditioned.
    let (mx, sx) = (mean(x), stddev(x));
    if sx == 0.0 {
        return None;
    }
    let design = DMatrix::from_fn(n, p, |r, c| ((x[r] - mx) / sx).powi(c as i32));
    let yv = DVector::from_column_slice(y);
    let xtx = design.transpose() * &design;
    let inv = xtx.try_inverse()?;
    let beta = &inv * design.transpose() * &yv;
    let resid = &yv - &design * &beta;
    let dof = n - p;
    let sigma2 = resid.norm_squared() / dof as f64;
    let cov = inv * sigma2;

    // Map the scaled-basis coefficients back to powers of raw x.
    // t[(k, j)]: coefficient of x^k in ((x - mx)/sx)^j.
    let mut t = DMatrix::<f64>::zeros(p, p);
    for j in 0..p {
        for k in 0..=j {
            t[(k, j)] = binomial(j, k) as f64 * (-mx).powi((j - k) as i32) / sx.powi(j as i32);
        }
    }
    let raw_beta = &t * &beta;
    let raw_cov = &t * cov * t.transpose();
    Some(PolyFit {
        coefficients: (0..p)
            .map(|k| Coefficient { estimate: raw_beta[k], std_error: raw_cov[(k, k)].max(0.0).sqrt() })
            .collect(),
        dof,
    })
}

fn binomial(n: usize, k: usize) -> u64 {
    (0..k).fold(1u64, |acc, i| acc * (n - i) as u64 / (i + 1) as u64)
}
