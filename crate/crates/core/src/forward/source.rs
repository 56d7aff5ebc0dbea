use crate::config::{fmt_list, KeyValues};
use crate::error::{BaeError, Result};

use super::ModelSpec;

pub type Point = [f64; 2];

/// Radial unit vector at `p`.
pub fn radial_direction(p: Point) -> [f64; 2] {
    let r = p[0].hypot(p[1]);
    [p[0] / r, p[1] / r]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dipole {
    pub location_index: usize,
    pub moment: [f64; 2],
}

impl Dipole {
    pub fn radial(location_index: usize, position: Point, amplitude: f64) -> Self {
        let n = radial_direction(position);
        Dipole {
            location_index,
            moment: [amplitude * n[0], amplitude * n[1]],
        }
    }

    pub fn amplitude(&self) -> f64 {
        self.moment[0].hypot(self.moment[1])
    }
}

/// Region of the brain compartment that holds candidate sources.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSpaceSpec {
    /// Angular sector in degrees, measured from the +x axis.
    pub sector_deg: [f64; 2],
    /// Inner and outer radius of the band.
    pub band: [f64; 2],
    /// Target distance between neighbouring candidates (disk units); rounded
    /// to a whole number of standard-grid cells.
    pub spacing: f64,
}

impl Default for SourceSpaceSpec {
    fn default() -> Self {
        SourceSpaceSpec {
            sector_deg: [60.0, 120.0],
            band: [0.55, 0.75],
            spacing: 0.03125,
        }
    }
}

impl SourceSpaceSpec {
    pub const KEYS: &'static [&'static str] = &["sector", "band", "spacing"];

    pub fn from_kv(kv: &KeyValues, base: &SourceSpaceSpec) -> Result<Self> {
        let mut spec = base.clone();
        if let Some(v) = kv.get_list::<f64>("sector")? {
            spec.sector_deg = <[f64; 2]>::try_from(v.as_slice())
                .map_err(|_| BaeError::Config("`sector` needs two angles".into()))?;
        }
        if let Some(v) = kv.get_list::<f64>("band")? {
            spec.band = <[f64; 2]>::try_from(v.as_slice())
                .map_err(|_| BaeError::Config("`band` needs two radii".into()))?;
        }
        if let Some(s) = kv.get::<f64>("spacing")? {
            spec.spacing = s;
        }
        Ok(spec)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("sector", fmt_list(&self.sector_deg));
        kv.set("band", fmt_list(&self.band));
        kv.set("spacing", format!("{:?}", self.spacing));
        kv
    }

    fn contains(&self, p: Point) -> bool {
        let r = p[0].hypot(p[1]);
        let angle = p[1].atan2(p[0]).to_degrees();
        r >= self.band[0]
            && r <= self.band[1]
            && angle >= self.sector_deg[0]
            && angle <= self.sector_deg[1]
    }
}

/// Candidate (reconstruction) locations on the standard grid and test
/// locations on the sample grid.
///
/// Error statistics are trained at the candidate positions evaluated on the
/// sample grid. Test sources sit on sample-grid nodes that are never
/// candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSpace {
    pub candidates: Vec<Point>,
    pub tests: Vec<Point>,
    pub spacing: f64,
}

fn grid_nodes(grid_size: usize, stride: usize) -> impl Iterator<Item = Point> {
    let h = 2.0 / (grid_size as f64 - 1.0);
    let centre = grid_size / 2;
    (0..grid_size).flat_map(move |j| {
        (0..grid_size).filter_map(move |i| {
            let on_lattice = (i as isize - centre as isize).rem_euclid(stride as isize) == 0
                && (j as isize - centre as isize).rem_euclid(stride as isize) == 0;
            on_lattice.then(|| [-1.0 + i as f64 * h, -1.0 + j as f64 * h])
        })
    })
}

fn same_point(a: Point, b: Point) -> bool {
    (a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9
}

impl SourceSpace {
    pub fn build(spec: &SourceSpaceSpec, standard: &ModelSpec, sample: &ModelSpec) -> Result<Self> {
        if !(spec.band[0] < spec.band[1] && spec.sector_deg[0] < spec.sector_deg[1]) {
            return Err(BaeError::Config("empty source band or sector".into()));
        }
        let hc = standard.spacing();
        let limit = standard.radii[0] - hc.max(sample.spacing());
        if spec.band[1] >= limit {
            return Err(BaeError::Geometry(format!(
                "source band outer radius {} must stay below {limit} (one cell inside the brain)",
                spec.band[1]
            )));
        }
        let stride = ((spec.spacing / hc).round() as usize).max(1);
        let candidates: Vec<Point> = grid_nodes(standard.grid_size, stride)
            .filter(|&p| spec.contains(p))
            .collect();
        if candidates.is_empty() {
            return Err(BaeError::Geometry("source space has no candidates".into()));
        }
        let tests: Vec<Point> = grid_nodes(sample.grid_size, 1)
            .filter(|&p| spec.contains(p))
            .filter(|&p| !candidates.iter().any(|&c| same_point(c, p)))
            .collect();
        Ok(SourceSpace {
            candidates,
            tests,
            spacing: stride as f64 * hc,
        })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// True when no test location coincides with a candidate location.
    pub fn is_disjoint(&self) -> bool {
        !self
            .tests
            .iter()
            .any(|&t| self.candidates.iter().any(|&c| same_point(c, t)))
    }
}
