//! Layered-disk conductor discretized with a five-point finite-volume
//! stencil: leadfields, skull-conductivity sensitivities and synthetic
//! measurements.

mod measurement;
mod solver;
mod source;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::config::{fmt_list, KeyValues};
use crate::error::{BaeError, Result};
use solver::{EnvelopeCholesky, LowerRows};

pub use measurement::{simulate_measurement, Measurement, Truth};
pub use source::{radial_direction, Dipole, Point, SourceSpace, SourceSpaceSpec};

/// Relative residual every linear solve must reach.
pub const SOLVE_TOLERANCE: f64 = 1e-10;

const NO_UNKNOWN: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conductivities {
    pub brain: f64,
    pub skull: f64,
    pub scalp: f64,
}

impl Default for Conductivities {
    fn default() -> Self {
        Conductivities {
            brain: 0.33,
            skull: 0.0103,
            scalp: 0.43,
        }
    }
}

/// Construction parameters of a [`DiskModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    /// Nodes per side of the square grid on `[-1, 1]^2`.
    pub grid_size: usize,
    /// Brain, skull-outer and scalp-outer radii.
    pub radii: [f64; 3],
    pub conductivities: Conductivities,
    pub electrode_count: usize,
    /// Multiplier applied to every electrode potential (unit choice).
    pub potential_scale: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            grid_size: 65,
            radii: [0.80, 0.87, 1.0],
            conductivities: Conductivities::default(),
            electrode_count: 32,
            potential_scale: 100.0,
        }
    }
}

impl ModelSpec {
    pub const KEYS: &'static [&'static str] = &[
        "grid_size",
        "radii",
        "conductivities",
        "electrodes",
        "potential_scale",
    ];

    pub fn fine() -> Self {
        ModelSpec {
            grid_size: 129,
            ..Default::default()
        }
    }

    /// Reads `grid_size`, `radii`, `conductivities` (brain, skull, scalp),
    /// `electrodes` and `potential_scale`; missing keys keep `base` values.
    pub fn from_kv(kv: &KeyValues, base: &ModelSpec) -> Result<Self> {
        let mut spec = base.clone();
        if let Some(n) = kv.get::<usize>("grid_size")? {
            spec.grid_size = n;
        }
        if let Some(r) = kv.get_list::<f64>("radii")? {
            spec.radii = <[f64; 3]>::try_from(r.as_slice())
                .map_err(|_| BaeError::Config("`radii` needs three values".into()))?;
        }
        if let Some(c) = kv.get_list::<f64>("conductivities")? {
            let c = <[f64; 3]>::try_from(c.as_slice())
                .map_err(|_| BaeError::Config("`conductivities` needs three values".into()))?;
            spec.conductivities = Conductivities {
                brain: c[0],
                skull: c[1],
                scalp: c[2],
            };
        }
        if let Some(m) = kv.get::<usize>("electrodes")? {
            spec.electrode_count = m;
        }
        if let Some(s) = kv.get::<f64>("potential_scale")? {
            spec.potential_scale = s;
        }
        Ok(spec)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        let c = self.conductivities;
        kv.set("grid_size", self.grid_size);
        kv.set("radii", fmt_list(&self.radii));
        kv.set("conductivities", fmt_list(&[c.brain, c.skull, c.scalp]));
        kv.set("electrodes", self.electrode_count);
        kv.set("potential_scale", format!("{:?}", self.potential_scale));
        kv
    }

    pub fn spacing(&self) -> f64 {
        2.0 / (self.grid_size as f64 - 1.0)
    }

    pub fn with_skull(&self, sigma: f64) -> Self {
        let mut s = self.clone();
        s.conductivities.skull = sigma;
        s
    }
}

#[derive(Debug, Clone, Copy)]
struct Edge {
    a: usize,
    b: usize,
    /// Conductance contributed by brain and scalp cells.
    fixed: f64,
    /// Number of adjacent skull cells divided by two; the skull part of the
    /// conductance is `skull * sigma_skull`.
    skull: f64,
}

/// Geometry shared by all models built on the same grid and radii.
#[derive(Debug)]
struct Geometry {
    n: usize,
    h: f64,
    node_to_unknown: Vec<usize>,
    unknown_to_node: Vec<usize>,
    edges: Vec<Edge>,
    electrodes: Vec<usize>,
    reference: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Compartment {
    Brain,
    Skull,
    Scalp,
    Outside,
}

/// A discretized layered-disk conductor at fixed conductivities.
///
/// The stiffness operator is singular with the constants as null space; it
/// is solved grounded at one interior node and every solution is shifted to
/// zero mean over the conducting nodes.
#[derive(Debug, Clone)]
pub struct DiskModel {
    spec: ModelSpec,
    geometry: Arc<Geometry>,
    factor: Arc<EnvelopeCholesky>,
}

fn compartment(radii: &[f64; 3], r: f64) -> Compartment {
    if r < radii[0] {
        Compartment::Brain
    } else if r < radii[1] {
        Compartment::Skull
    } else if r < radii[2] {
        Compartment::Scalp
    } else {
        Compartment::Outside
    }
}

fn validate(spec: &ModelSpec) -> Result<()> {
    if spec.grid_size < 17 {
        return Err(BaeError::Geometry(format!(
            "grid_size {} is below 17",
            spec.grid_size
        )));
    }
    let [rb, rk, rs] = spec.radii;
    if !(0.0 < rb && rb < rk && rk < rs && rs <= 1.0) {
        return Err(BaeError::Geometry(format!(
            "radii must satisfy 0 < brain < skull < scalp <= 1, got {:?}",
            spec.radii
        )));
    }
    let h = spec.spacing();
    for (name, thickness) in [("brain", rb), ("skull", rk - rb), ("scalp", rs - rk)] {
        if thickness < h {
            return Err(BaeError::Geometry(format!(
                "{name} compartment ({thickness}) is thinner than one cell ({h})"
            )));
        }
    }
    let c = spec.conductivities;
    for (name, v) in [("brain", c.brain), ("skull", c.skull), ("scalp", c.scalp)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(BaeError::Geometry(format!(
                "{name} conductivity must be positive, got {v}"
            )));
        }
    }
    if spec.electrode_count < 2 {
        return Err(BaeError::Geometry("need at least two electrodes".into()));
    }
    if !(spec.potential_scale > 0.0 && spec.potential_scale.is_finite()) {
        return Err(BaeError::Geometry(
            "potential_scale must be positive".into(),
        ));
    }
    Ok(())
}

fn build_geometry(spec: &ModelSpec) -> Result<Geometry> {
    let n = spec.grid_size;
    let h = spec.spacing();
    let coord = |i: usize| -1.0 + i as f64 * h;
    // cell (i, j) spans nodes i..i+1, j..j+1
    let cells: Vec<Compartment> = (0..(n - 1) * (n - 1))
        .map(|c| {
            let (i, j) = (c % (n - 1), c / (n - 1));
            let (x, y) = (coord(i) + 0.5 * h, coord(j) + 0.5 * h);
            compartment(&spec.radii, x.hypot(y))
        })
        .collect();
    let cell = |i: isize, j: isize| -> Compartment {
        if i < 0 || j < 0 || i >= n as isize - 1 || j >= n as isize - 1 {
            Compartment::Outside
        } else {
            cells[j as usize * (n - 1) + i as usize]
        }
    };
    let c = spec.conductivities;
    let split = |comp: Compartment| -> (f64, f64) {
        match comp {
            Compartment::Brain => (0.5 * c.brain, 0.0),
            Compartment::Scalp => (0.5 * c.scalp, 0.0),
            Compartment::Skull => (0.0, 0.5),
            Compartment::Outside => (0.0, 0.0),
        }
    };

    let mut raw_edges = Vec::new();
    for j in 0..n {
        for i in 0..n {
            let node = j * n + i;
            let (ii, jj) = (i as isize, j as isize);
            if i + 1 < n {
                // horizontal edge: cells below and above
                let (f1, s1) = split(cell(ii, jj - 1));
                let (f2, s2) = split(cell(ii, jj));
                if f1 + f2 + s1 + s2 > 0.0 {
                    raw_edges.push((node, node + 1, f1 + f2, s1 + s2));
                }
            }
            if j + 1 < n {
                let (f1, s1) = split(cell(ii - 1, jj));
                let (f2, s2) = split(cell(ii, jj));
                if f1 + f2 + s1 + s2 > 0.0 {
                    raw_edges.push((node, node + n, f1 + f2, s1 + s2));
                }
            }
        }
    }
    let mut node_to_unknown = vec![NO_UNKNOWN; n * n];
    for &(a, b, _, _) in &raw_edges {
        node_to_unknown[a] = 0;
        node_to_unknown[b] = 0;
    }
    let mut unknown_to_node = Vec::new();
    for (node, slot) in node_to_unknown.iter_mut().enumerate() {
        if *slot == 0 {
            *slot = unknown_to_node.len();
            unknown_to_node.push(node);
        }
    }
    let edges: Vec<Edge> = raw_edges
        .into_iter()
        .map(|(a, b, fixed, skull)| Edge {
            a: node_to_unknown[a],
            b: node_to_unknown[b],
            fixed,
            skull,
        })
        .collect();

    let mut electrodes = Vec::with_capacity(spec.electrode_count);
    for k in 0..spec.electrode_count {
        let theta = 2.0 * std::f64::consts::PI * k as f64 / spec.electrode_count as f64;
        let (ex, ey) = (spec.radii[2] * theta.cos(), spec.radii[2] * theta.sin());
        let best = unknown_to_node
            .iter()
            .enumerate()
            .map(|(u, &node)| {
                let (x, y) = (coord(node % n), coord(node / n));
                (u, (x - ex).hypot(y - ey))
            })
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .map(|(u, _)| u)
            .expect("conducting nodes exist");
        if electrodes.contains(&best) {
            return Err(BaeError::Geometry(format!(
                "electrodes {k} collides with another electrode; grid too coarse"
            )));
        }
        electrodes.push(best);
    }
    let centre = (n / 2) * n + n / 2;
    let reference = node_to_unknown[centre];
    if reference == NO_UNKNOWN {
        return Err(BaeError::Geometry("centre node is not conducting".into()));
    }
    Ok(Geometry {
        n,
        h,
        node_to_unknown,
        unknown_to_node,
        edges,
        electrodes,
        reference,
    })
}

/// Builds and factors the model described by `spec`.
pub fn build_model(spec: &ModelSpec) -> Result<DiskModel> {
    validate(spec)?;
    let geometry = Arc::new(build_geometry(spec)?);
    DiskModel::assemble(spec.clone(), geometry)
}

impl DiskModel {
    fn assemble(spec: ModelSpec, geometry: Arc<Geometry>) -> Result<Self> {
        let nu = geometry.unknown_to_node.len();
        let g = geometry.reference;
        // grounded system: drop the reference unknown
        let reduced = |u: usize| if u < g { u } else { u - 1 };
        let mut diag = vec![0.0; nu - 1];
        let mut lower = vec![Vec::new(); nu - 1];
        let sigma = spec.conductivities.skull;
        for e in &geometry.edges {
            let c = e.fixed + sigma * e.skull;
            if e.a != g {
                diag[reduced(e.a)] += c;
            }
            if e.b != g {
                diag[reduced(e.b)] += c;
            }
            if e.a != g && e.b != g {
                let (ra, rb) = (reduced(e.a), reduced(e.b));
                let (hi, lo) = if ra > rb { (ra, rb) } else { (rb, ra) };
                lower[hi].push((lo, -c));
            }
        }
        let factor = EnvelopeCholesky::factor(&LowerRows { diag, lower })?;
        Ok(DiskModel {
            spec,
            geometry,
            factor: Arc::new(factor),
        })
    }

    /// Same geometry with a different skull conductivity.
    pub fn with_skull_conductivity(&self, sigma: f64) -> Result<Self> {
        let spec = self.spec.with_skull(sigma);
        validate(&spec)?;
        Self::assemble(spec, Arc::clone(&self.geometry))
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn skull_conductivity(&self) -> f64 {
        self.spec.conductivities.skull
    }

    pub fn spacing(&self) -> f64 {
        self.geometry.h
    }

    pub fn electrode_count(&self) -> usize {
        self.geometry.electrodes.len()
    }

    pub fn conducting_node_count(&self) -> usize {
        self.geometry.unknown_to_node.len()
    }

    /// Grid node indices (`j * grid_size + i`) of the electrodes.
    pub fn electrode_nodes(&self) -> Vec<usize> {
        self.geometry
            .electrodes
            .iter()
            .map(|&u| self.geometry.unknown_to_node[u])
            .collect()
    }

    pub fn node_position(&self, node: usize) -> Point {
        let n = self.geometry.n;
        let h = self.geometry.h;
        [-1.0 + (node % n) as f64 * h, -1.0 + (node / n) as f64 * h]
    }

    fn unknown_at(&self, i: isize, j: isize) -> Option<usize> {
        let n = self.geometry.n as isize;
        if i < 0 || j < 0 || i >= n || j >= n {
            return None;
        }
        let u = self.geometry.node_to_unknown[(j * n + i) as usize];
        (u != NO_UNKNOWN).then_some(u)
    }

    /// Grid indices of the node at `p`; `p` must coincide with a node.
    pub fn grid_indices(&self, p: Point) -> Result<(isize, isize)> {
        let h = self.geometry.h;
        let fi = (p[0] + 1.0) / h;
        let fj = (p[1] + 1.0) / h;
        let (i, j) = (fi.round(), fj.round());
        if (fi - i).abs() > 1e-6 || (fj - j).abs() > 1e-6 {
            return Err(BaeError::Geometry(format!(
                "location {p:?} is not a node of the {}-grid",
                self.geometry.n
            )));
        }
        Ok((i as isize, j as isize))
    }

    /// Right-hand side of a point current dipole at `p`: a pair of opposite
    /// monopoles on the axis-adjacent nodes, `1 / (2h)` each, per unit
    /// moment component.
    pub fn dipole_rhs(&self, p: Point, moment: [f64; 2]) -> Result<Vec<f64>> {
        let (i, j) = self.grid_indices(p)?;
        let q = 1.0 / (2.0 * self.geometry.h);
        let mut f = vec![0.0; self.conducting_node_count()];
        let pairs = [((i + 1, j), (i - 1, j)), ((i, j + 1), (i, j - 1))];
        for (axis, (plus, minus)) in pairs.into_iter().enumerate() {
            if moment[axis] == 0.0 {
                continue;
            }
            let (up, um) = match (
                self.unknown_at(plus.0, plus.1),
                self.unknown_at(minus.0, minus.1),
            ) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(BaeError::Geometry(format!(
                        "dipole at {p:?} touches a non-conducting node"
                    )))
                }
            };
            f[up] += q * moment[axis];
            f[um] -= q * moment[axis];
        }
        Ok(f)
    }

    fn stiffness_apply(&self, u: &[f64], skull_only: bool) -> Vec<f64> {
        let sigma = self.spec.conductivities.skull;
        let mut out = vec![0.0; u.len()];
        for e in &self.geometry.edges {
            let c = if skull_only {
                e.skull
            } else {
                e.fixed + sigma * e.skull
            };
            let d = c * (u[e.a] - u[e.b]);
            out[e.a] += d;
            out[e.b] -= d;
        }
        out
    }

    /// `K u` for the full (ungrounded) stiffness operator.
    pub fn apply_stiffness(&self, u: &[f64]) -> Vec<f64> {
        self.stiffness_apply(u, false)
    }

    /// `(dK / d sigma_skull) u`; constant because the operator is affine in
    /// the skull conductivity.
    pub fn apply_skull_derivative(&self, u: &[f64]) -> Vec<f64> {
        self.stiffness_apply(u, true)
    }

    /// Solves `K u = f` for a zero-sum `f`, returning the zero-mean solution.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let nu = self.conducting_node_count();
        if rhs.len() != nu {
            return Err(BaeError::Shape(format!(
                "rhs has {} entries, model has {nu} unknowns",
                rhs.len()
            )));
        }
        let g = self.geometry.reference;
        let rhs_norm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rhs_norm == 0.0 {
            return Ok(vec![0.0; nu]);
        }
        let mut u = self.grounded_solve(rhs, g);
        let mut residual = self.relative_residual(&u, rhs, rhs_norm);
        // one refinement sweep if the direct solve lands short of tolerance
        if residual > SOLVE_TOLERANCE {
            let ku = self.apply_stiffness(&u);
            let r: Vec<f64> = rhs.iter().zip(&ku).map(|(f, k)| f - k).collect();
            let du = self.grounded_solve(&r, g);
            u.iter_mut().zip(&du).for_each(|(a, b)| *a += b);
            residual = self.relative_residual(&u, rhs, rhs_norm);
        }
        if !(residual <= SOLVE_TOLERANCE) {
            return Err(BaeError::Solver { residual });
        }
        Ok(u)
    }

    fn grounded_solve(&self, rhs: &[f64], g: usize) -> Vec<f64> {
        let mut x: Vec<f64> = rhs
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != g)
            .map(|(_, &v)| v)
            .collect();
        self.factor.solve_in_place(&mut x);
        x.insert(g, 0.0);
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        x.iter_mut().for_each(|v| *v -= mean);
        x
    }

    fn relative_residual(&self, u: &[f64], rhs: &[f64], rhs_norm: f64) -> f64 {
        let ku = self.apply_stiffness(u);
        ku.iter()
            .zip(rhs)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
            / rhs_norm
    }

    /// Average-referenced, scaled electrode readings of a potential field.
    pub fn electrode_potentials(&self, u: &[f64]) -> DVector<f64> {
        let mut v = DVector::from_iterator(
            self.electrode_count(),
            self.geometry.electrodes.iter().map(|&e| u[e]),
        );
        average_reference(&mut v);
        v * self.spec.potential_scale
    }

    /// Electrode potentials of a single dipole by a direct forward solve.
    pub fn dipole_potentials(&self, p: Point, moment: [f64; 2]) -> Result<DVector<f64>> {
        let f = self.dipole_rhs(p, moment)?;
        let u = self.solve(&f)?;
        Ok(self.electrode_potentials(&u))
    }

    /// The `m x 2` leadfield block of one location by two direct solves.
    pub fn leadfield_block(&self, p: Point) -> Result<DMatrix<f64>> {
        let mut a = DMatrix::zeros(self.electrode_count(), 2);
        for axis in 0..2 {
            let mut moment = [0.0; 2];
            moment[axis] = 1.0;
            a.set_column(axis, &self.dipole_potentials(p, moment)?);
        }
        Ok(a)
    }

    /// Leadfield block and its skull-conductivity derivative at `p`.
    ///
    /// The derivative comes from the sensitivity solve
    /// `K u' = -(dK/dsigma) u` for each unit dipole.
    pub fn leadfield_and_jacobian(&self, p: Point) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let m = self.electrode_count();
        let mut a = DMatrix::zeros(m, 2);
        let mut jac = DMatrix::zeros(m, 2);
        for axis in 0..2 {
            let mut moment = [0.0; 2];
            moment[axis] = 1.0;
            let f = self.dipole_rhs(p, moment)?;
            let u = self.solve(&f)?;
            a.set_column(axis, &self.electrode_potentials(&u));
            let rhs: Vec<f64> = self.apply_skull_derivative(&u).iter().map(|v| -v).collect();
            let du = self.solve(&rhs)?;
            jac.set_column(axis, &self.electrode_potentials(&du));
        }
        Ok((a, jac))
    }

    /// Reciprocity basis: row `k` holds the potential field produced by
    /// injecting the average-referenced unit current of electrode `k`.
    fn reciprocity_fields(&self) -> Result<Vec<Vec<f64>>> {
        let m = self.electrode_count();
        let nu = self.conducting_node_count();
        (0..m)
            .into_par_iter()
            .map(|k| {
                let mut rhs = vec![0.0; nu];
                for (j, &e) in self.geometry.electrodes.iter().enumerate() {
                    rhs[e] = if j == k {
                        1.0 - 1.0 / m as f64
                    } else {
                        -1.0 / m as f64
                    };
                }
                self.solve(&rhs)
            })
            .collect()
    }

    /// Contracts per-electrode node fields with the dipole stencils of every
    /// location: column `2i + axis` holds `g_k . f` over electrodes `k`.
    fn contract(&self, fields: &[Vec<f64>], locations: &[Point]) -> Result<DMatrix<f64>> {
        let m = self.electrode_count();
        let mut a = DMatrix::zeros(m, 2 * locations.len());
        for (i, &p) in locations.iter().enumerate() {
            for axis in 0..2 {
                let mut moment = [0.0; 2];
                moment[axis] = 1.0;
                let f = self.dipole_rhs(p, moment)?;
                let nz: Vec<(usize, f64)> = f
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(k, &v)| (k, v))
                    .collect();
                let mut col = DVector::from_iterator(
                    m,
                    fields
                        .iter()
                        .map(|g| nz.iter().map(|&(k, v)| g[k] * v).sum::<f64>()),
                );
                average_reference(&mut col);
                a.set_column(2 * i + axis, &(col * self.spec.potential_scale));
            }
        }
        Ok(a)
    }

    /// Leadfield `A` with columns `(2i, 2i+1)` for unit x- and y-dipoles at
    /// location `i`, computed with `m` reciprocal solves.
    pub fn leadfield(&self, locations: &[Point]) -> Result<DMatrix<f64>> {
        let fields = self.reciprocity_fields()?;
        self.contract(&fields, locations)
    }

    /// Leadfield and its skull-conductivity derivative for all locations.
    ///
    /// The derivative uses the adjoint fields `K z_k = -(dK/dsigma) g_k`, so
    /// `dA_k = z_k . f`; the cost is `2m` solves regardless of the number of
    /// locations.
    pub fn leadfield_with_jacobian(
        &self,
        locations: &[Point],
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let fields = self.reciprocity_fields()?;
        let adjoint: Vec<Vec<f64>> = fields
            .par_iter()
            .map(|g| {
                let rhs: Vec<f64> = self.apply_skull_derivative(g).iter().map(|v| -v).collect();
                self.solve(&rhs)
            })
            .collect::<Result<_>>()?;
        Ok((
            self.contract(&fields, locations)?,
            self.contract(&adjoint, locations)?,
        ))
    }

    /// Skull-conductivity Jacobian `dA^l / dsigma` (`m x 2`) at one location.
    pub fn leadfield_jacobian(&self, p: Point) -> Result<DMatrix<f64>> {
        Ok(self.leadfield_and_jacobian(p)?.1)
    }

    /// A textual description suitable for `build-model` output.
    pub fn describe(&self) -> String {
        let mut kv = self.spec.to_kv();
        kv.set("spacing", format!("{:?}", self.spacing()));
        kv.set("conducting_nodes", self.conducting_node_count());
        kv.set(
            "electrode_nodes",
            self.electrode_nodes()
                .iter()
                .map(|n| n.to_string())
                .collect::<Vec<_>>()
                .join(", "),
        );
        kv.to_text()
    }
}

pub(crate) fn average_reference(v: &mut DVector<f64>) {
    let mean = v.mean();
    v.iter_mut().for_each(|x| *x -= mean);
}
