use std::sync::Mutex;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{BaeError, Result};
use crate::forward::{DiskModel, Point};

/// Builds leadfields and their conductivity derivatives at any conductivity.
pub trait ForwardFactory: Sync {
    fn location_count(&self) -> usize;

    /// Leadfield block and Jacobian (`m x 2` each) at one location.
    fn block_and_jacobian(
        &self,
        location: usize,
        sigma: f64,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)>;

    /// Full `m x 2n` leadfield.
    fn leadfield(&self, sigma: f64) -> Result<DMatrix<f64>>;

    fn block(&self, location: usize, sigma: f64) -> Result<DMatrix<f64>> {
        Ok(self.block_and_jacobian(location, sigma)?.0)
    }
}

fn check_location(location: usize, n: usize) -> Result<()> {
    if location >= n {
        return Err(BaeError::Config(format!(
            "location {location} is out of range ({n} locations)"
        )));
    }
    Ok(())
}

/// Rebuilds the discrete model for every requested conductivity.
#[derive(Debug)]
pub struct ExactFactory {
    base: DiskModel,
    positions: Vec<Point>,
    cache: Mutex<Option<DiskModel>>,
}

impl ExactFactory {
    pub fn new(base: DiskModel, positions: Vec<Point>) -> Self {
        ExactFactory {
            base,
            positions,
            cache: Mutex::new(None),
        }
    }

    fn model(&self, sigma: f64) -> Result<DiskModel> {
        let mut cache = self.cache.lock().expect("factory cache poisoned");
        if let Some(m) = cache.as_ref() {
            if m.skull_conductivity() == sigma {
                return Ok(m.clone());
            }
        }
        let model = self.base.with_skull_conductivity(sigma)?;
        *cache = Some(model.clone());
        Ok(model)
    }
}

impl ForwardFactory for ExactFactory {
    fn location_count(&self) -> usize {
        self.positions.len()
    }

    fn block_and_jacobian(
        &self,
        location: usize,
        sigma: f64,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        check_location(location, self.positions.len())?;
        self.model(sigma)?
            .leadfield_and_jacobian(self.positions[location])
    }

    fn leadfield(&self, sigma: f64) -> Result<DMatrix<f64>> {
        self.model(sigma)?.leadfield(&self.positions)
    }
}

/// Piecewise cubic Hermite interpolation in `ln sigma` between exact
/// leadfields and Jacobians on a fixed node set.
#[derive(Debug, Clone)]
pub struct TabulatedFactory {
    log_nodes: Vec<f64>,
    leadfields: Vec<DMatrix<f64>>,
    /// Derivatives with respect to `ln sigma`.
    slopes: Vec<DMatrix<f64>>,
}

impl TabulatedFactory {
    /// Tabulates `base` at `nodes` conductivities spread evenly in
    /// `ln sigma` over `[lower, upper]`.
    pub fn build(
        base: &DiskModel,
        positions: &[Point],
        lower: f64,
        upper: f64,
        nodes: usize,
    ) -> Result<Self> {
        if !(0.0 < lower && lower < upper) || nodes < 2 {
            return Err(BaeError::Config(
                "tabulation needs 0 < lower < upper and two nodes".into(),
            ));
        }
        let (a, b) = (lower.ln(), upper.ln());
        let log_nodes: Vec<f64> = (0..nodes)
            .map(|k| a + (b - a) * k as f64 / (nodes - 1) as f64)
            .collect();
        let tables = log_nodes
            .par_iter()
            .map(|&u| {
                let sigma = u.exp();
                let (lf, jac) = base
                    .with_skull_conductivity(sigma)?
                    .leadfield_with_jacobian(positions)?;
                Ok((lf, jac * sigma))
            })
            .collect::<Result<Vec<_>>>()?;
        let (leadfields, slopes) = tables.into_iter().unzip();
        Ok(TabulatedFactory {
            log_nodes,
            leadfields,
            slopes,
        })
    }

    pub fn range(&self) -> (f64, f64) {
        (
            self.log_nodes[0].exp(),
            self.log_nodes[self.log_nodes.len() - 1].exp(),
        )
    }

    /// Hermite weights for value and log-derivative at `sigma`.
    fn weights(&self, sigma: f64) -> Result<(usize, [f64; 4], [f64; 4], f64)> {
        let u = sigma.ln();
        let (first, last) = (self.log_nodes[0], self.log_nodes[self.log_nodes.len() - 1]);
        let slack = 1e-12 * (last - first);
        if !(u >= first - slack && u <= last + slack) {
            return Err(BaeError::Config(format!(
                "conductivity {sigma} is outside the tabulated range {:?}",
                self.range()
            )));
        }
        let k = self
            .log_nodes
            .partition_point(|&x| x <= u)
            .clamp(1, self.log_nodes.len() - 1)
            - 1;
        let h = self.log_nodes[k + 1] - self.log_nodes[k];
        let t = ((u - self.log_nodes[k]) / h).clamp(0.0, 1.0);
        let (t2, t3) = (t * t, t * t * t);
        let value = [
            2.0 * t3 - 3.0 * t2 + 1.0,
            (t3 - 2.0 * t2 + t) * h,
            -2.0 * t3 + 3.0 * t2,
            (t3 - t2) * h,
        ];
        let slope = [
            (6.0 * t2 - 6.0 * t) / h,
            3.0 * t2 - 4.0 * t + 1.0,
            (-6.0 * t2 + 6.0 * t) / h,
            3.0 * t2 - 2.0 * t,
        ];
        Ok((k, value, slope, sigma))
    }

    fn combine(&self, k: usize, w: [f64; 4], cols: std::ops::Range<usize>) -> DMatrix<f64> {
        let c = cols.start;
        let n = cols.len();
        self.leadfields[k].columns(c, n) * w[0]
            + self.slopes[k].columns(c, n) * w[1]
            + self.leadfields[k + 1].columns(c, n) * w[2]
            + self.slopes[k + 1].columns(c, n) * w[3]
    }
}

impl ForwardFactory for TabulatedFactory {
    fn location_count(&self) -> usize {
        self.leadfields[0].ncols() / 2
    }

    fn block_and_jacobian(
        &self,
        location: usize,
        sigma: f64,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        check_location(location, self.location_count())?;
        let (k, value, slope, sigma) = self.weights(sigma)?;
        let cols = 2 * location..2 * location + 2;
        let a = self.combine(k, value, cols.clone());
        let j = self.combine(k, slope, cols) / sigma;
        Ok((a, j))
    }

    fn leadfield(&self, sigma: f64) -> Result<DMatrix<f64>> {
        let (k, value, _, _) = self.weights(sigma)?;
        Ok(self.combine(k, value, 0..self.leadfields[0].ncols()))
    }
}
