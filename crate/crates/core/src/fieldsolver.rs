//! Unit-voltage electrostatics of the cylindrically symmetric electrode
//! stack.
//!
//! The two electrode assemblies (inner and outer tube pairs) are rasterized
//! onto an axisymmetric (r, z) grid, each basis potential is relaxed to the
//! Laplace solution with the chosen electrode at 1 V, and the solved field is
//! reduced to a constant + dipole + traceless quadrupole expansion about the
//! trap centre. The four radial rods break the cylindrical symmetry and are
//! deliberately not solved here; their basis entries come from calibration in
//! the trap model.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relaxation sweep cap.
pub const MAX_SWEEPS: usize = 1_000_000;

/// Default relaxation tolerance (max relative update per sweep).
pub const DEFAULT_TOLERANCE: f64 = 1e-8;

/// Mechanical dimensions of the trapping region (all metres).
///
/// The published drawing is not numerically legible, so the defaults are
/// documented estimates; every value is configurable. The tip gap default
/// comes from the 370 um cavity length minus twice a ~10 um fibre recess.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrapGeometry {
    pub inner_electrode_inner_radius: f64,
    pub inner_electrode_outer_radius: f64,
    pub outer_electrode_inner_radius: f64,
    pub outer_electrode_outer_radius: f64,
    /// Axial separation of the two inner-electrode tips.
    pub tip_gap: f64,
    pub fibre_recess: f64,
    /// Distance of the four radial rods from the trap centre.
    pub radial_electrode_distance: f64,
    pub radial_electrode_radius: f64,
    pub domain_radius: f64,
    pub domain_half_height: f64,
}

impl Default for TrapGeometry {
    fn default() -> Self {
        TrapGeometry {
            inner_electrode_inner_radius: 115e-6,
            inner_electrode_outer_radius: 250e-6,
            outer_electrode_inner_radius: 350e-6,
            outer_electrode_outer_radius: 600e-6,
            tip_gap: 350e-6,
            fibre_recess: 10e-6,
            radial_electrode_distance: 1.0e-3,
            radial_electrode_radius: 250e-6,
            domain_radius: 2.4e-3,
            domain_half_height: 2.4e-3,
        }
    }
}

impl TrapGeometry {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("inner_electrode_inner_radius", self.inner_electrode_inner_radius),
            ("inner_electrode_outer_radius", self.inner_electrode_outer_radius),
            ("outer_electrode_inner_radius", self.outer_electrode_inner_radius),
            ("outer_electrode_outer_radius", self.outer_electrode_outer_radius),
            ("tip_gap", self.tip_gap),
            ("fibre_recess", self.fibre_recess),
            ("radial_electrode_distance", self.radial_electrode_distance),
            ("radial_electrode_radius", self.radial_electrode_radius),
            ("domain_radius", self.domain_radius),
            ("domain_half_height", self.domain_half_height),
        ];
        for (name, v) in fields {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Geometry(format!("{name} must be strictly positive, got {v}")));
            }
        }
        if self.inner_electrode_outer_radius <= self.inner_electrode_inner_radius {
            return Err(Error::Geometry(
                "inner electrode outer radius must exceed its inner radius".into(),
            ));
        }
        if self.outer_electrode_outer_radius <= self.outer_electrode_inner_radius {
            return Err(Error::Geometry(
                "outer electrode outer radius must exceed its inner radius".into(),
            ));
        }
        if self.outer_electrode_inner_radius <= self.inner_electrode_outer_radius {
            return Err(Error::Geometry(
                "outer electrode must sit outside the inner electrode".into(),
            ));
        }
        if self.domain_radius <= self.outer_electrode_outer_radius {
            return Err(Error::Geometry("domain radius must enclose the electrodes".into()));
        }
        if self.domain_half_height <= self.tip_gap / 2.0 {
            return Err(Error::Geometry("domain half-height must exceed half the tip gap".into()));
        }
        Ok(())
    }
}

/// Axisymmetric electrode surfaces that can be held at 1 V for a basis
/// solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SolverElectrode {
    /// Both outer tubes (the main rf pair, driven in common).
    OuterPair,
    /// Inner tube of the upper assembly (z > 0).
    InnerUpper,
    /// Inner tube of the lower assembly (z < 0).
    InnerLower,
}

impl SolverElectrode {
    pub const ALL: [SolverElectrode; 3] =
        [SolverElectrode::OuterPair, SolverElectrode::InnerUpper, SolverElectrode::InnerLower];

    pub fn label(&self) -> &'static str {
        match self {
            SolverElectrode::OuterPair => "outer_pair",
            SolverElectrode::InnerUpper => "inner_upper",
            SolverElectrode::InnerLower => "inner_lower",
        }
    }
}

impl std::str::FromStr for SolverElectrode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "outer_pair" => Ok(SolverElectrode::OuterPair),
            "inner_upper" => Ok(SolverElectrode::InnerUpper),
            "inner_lower" => Ok(SolverElectrode::InnerLower),
            other => Err(Error::UnknownElectrode(other.into())),
        }
    }
}

/// Node classification on the (r, z) grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Free,
    /// Dirichlet node owned by an electrode surface.
    Electrode(SolverElectrode),
    /// Dirichlet node on the grounded outer boundary of the domain.
    DomainBoundary,
}

impl NodeKind {
    pub fn is_dirichlet(&self) -> bool {
        !matches!(self, NodeKind::Free)
    }
}

/// Uniform axisymmetric potential grid.
///
/// Nodes live at (r_i, z_j) = (i * spacing, z_min + j * spacing); the grid
/// covers r in [0, domain_radius], z in [-H, +H]. Dirichlet nodes never
/// change during relaxation.
#[derive(Debug, Clone)]
pub struct PotentialGrid {
    pub spacing: f64,
    pub nr: usize,
    pub nz: usize,
    pub z_min: f64,
    pub values: Vec<f64>,
    pub kinds: Vec<NodeKind>,
    /// Max relative update of the last relaxation sweep (0 for unsolved grids).
    pub residual: f64,
}

impl PotentialGrid {
    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.nr + i
    }

    pub fn r(&self, i: usize) -> f64 {
        i as f64 * self.spacing
    }

    pub fn z(&self, j: usize) -> f64 {
        self.z_min + j as f64 * self.spacing
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[self.idx(i, j)]
    }

    pub fn kind(&self, i: usize, j: usize) -> NodeKind {
        self.kinds[self.idx(i, j)]
    }

    pub fn dirichlet_count(&self) -> usize {
        self.kinds.iter().filter(|k| k.is_dirichlet()).count()
    }

    pub fn electrode_node_count(&self) -> usize {
        self.kinds.iter().filter(|k| matches!(k, NodeKind::Electrode(_))).count()
    }

    /// Max absolute residual of the interior five-point stencil, in volts.
    pub fn interior_stencil_residual(&self) -> f64 {
        let mut worst = 0.0_f64;
        for j in 1..self.nz - 1 {
            for i in 0..self.nr - 1 {
                if self.kind(i, j).is_dirichlet() {
                    continue;
                }
                let target = self.stencil_value(i, j);
                worst = worst.max((self.value(i, j) - target).abs());
            }
        }
        worst
    }

    /// Discrete Laplace update value at node (i, j): the potential that
    /// makes the local stencil residual vanish. On the axis the symmetric
    /// (Neumann) stencil is used.
    #[inline]
    fn stencil_value(&self, i: usize, j: usize) -> f64 {
        let up = self.value(i, j + 1);
        let dn = self.value(i, j - 1);
        if i == 0 {
            (4.0 * self.value(1, j) + up + dn) / 6.0
        } else {
            let h_over_2r = 0.5 / i as f64; // spacing / (2 r_i)
            let east = self.value(i + 1, j);
            let west = self.value(i - 1, j);
            ((1.0 + h_over_2r) * east + (1.0 - h_over_2r) * west + up + dn) / 4.0
        }
    }

    /// CSV rows (r, z, value) for export.
    pub fn rows(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        (0..self.nz).flat_map(move |j| (0..self.nr).map(move |i| (self.r(i), self.z(j), self.value(i, j))))
    }
}

/// Rasterization predicate: which solver electrode (if any) owns the point
/// (r, z). Kept as a free function so tests can run an independent census.
pub fn electrode_at(geometry: &TrapGeometry, r: f64, z: f64) -> Option<SolverElectrode> {
    let za = z.abs();
    let tip = geometry.tip_gap / 2.0;
    if za >= tip
        && r >= geometry.inner_electrode_inner_radius
        && r <= geometry.inner_electrode_outer_radius
    {
        return Some(if z > 0.0 { SolverElectrode::InnerUpper } else { SolverElectrode::InnerLower });
    }
    if za >= tip
        && r >= geometry.outer_electrode_inner_radius
        && r <= geometry.outer_electrode_outer_radius
    {
        return Some(SolverElectrode::OuterPair);
    }
    None
}

/// Discretize the trap geometry onto an axisymmetric grid.
///
/// Electrode bodies become Dirichlet nodes; the outer domain boundary is held
/// at 0 V. Requires `spacing <= tip_gap / 20` so the gap is resolved.
pub fn build_axisymmetric_grid(geometry: &TrapGeometry, spacing: f64) -> Result<PotentialGrid> {
    geometry.validate()?;
    if !(spacing > 0.0) || !spacing.is_finite() {
        return Err(Error::Geometry(format!("spacing must be positive, got {spacing}")));
    }
    let limit = geometry.tip_gap / 20.0;
    if spacing > limit {
        return Err(Error::GridTooCoarse { spacing_m: spacing, limit_m: limit });
    }

    let nr = (geometry.domain_radius / spacing).round() as usize + 1;
    let nz = 2 * (geometry.domain_half_height / spacing).round() as usize + 1;
    let z_min = -((nz - 1) as f64) / 2.0 * spacing;

    let mut kinds = vec![NodeKind::Free; nr * nz];
    let mut values = vec![0.0; nr * nz];
    for j in 0..nz {
        for i in 0..nr {
            let r = i as f64 * spacing;
            let z = z_min + j as f64 * spacing;
            let k = if i == nr - 1 || j == 0 || j == nz - 1 {
                NodeKind::DomainBoundary
            } else if let Some(e) = electrode_at(geometry, r, z) {
                NodeKind::Electrode(e)
            } else {
                NodeKind::Free
            };
            kinds[j * nr + i] = k;
            values[j * nr + i] = 0.0;
        }
    }

    Ok(PotentialGrid { spacing, nr, nz, z_min, values, kinds, residual: 0.0 })
}

/// Relax the grid to the Laplace solution with `electrode` at 1 V and every
/// other electrode (and the domain boundary) at 0 V.
///
/// Successive over-relaxation with the standard optimal factor; convergence
/// when the max relative update per sweep drops below `tolerance`. The
/// returned grid satisfies the discrete interior residual bound.
pub fn solve_basis_potential(
    grid: &PotentialGrid,
    electrode: SolverElectrode,
    tolerance: f64,
) -> Result<PotentialGrid> {
    if !(tolerance > 0.0 && tolerance < 1.0) {
        return Err(Error::Geometry(format!("tolerance must be in (0, 1), got {tolerance}")));
    }
    if !grid.kinds.iter().any(|k| matches!(k, NodeKind::Electrode(e) if *e == electrode)) {
        return Err(Error::UnknownElectrode(format!(
            "{} was not rasterized onto this grid",
            electrode.label()
        )));
    }
    let mut boundary = vec![0.0; grid.values.len()];
    for (b, k) in boundary.iter_mut().zip(&grid.kinds) {
        if let NodeKind::Electrode(e) = k {
            if *e == electrode {
                *b = 1.0;
            }
        }
    }
    solve_with_boundary(grid, &boundary, tolerance)
}

/// Relax with explicit per-node Dirichlet values (1 entry per node; only
/// Dirichlet nodes are read). Exposed for manufactured-solution tests and
/// superposition checks.
pub fn solve_with_boundary(
    grid: &PotentialGrid,
    boundary_values: &[f64],
    tolerance: f64,
) -> Result<PotentialGrid> {
    let mut out = grid.clone();
    for (idx, k) in out.kinds.iter().enumerate() {
        out.values[idx] = if k.is_dirichlet() { boundary_values[idx] } else { 0.0 };
    }

    let n_longest = out.nr.max(out.nz) as f64;
    let omega = 2.0 / (1.0 + (std::f64::consts::PI / n_longest).sin());

    let nr = out.nr;
    let mut worst_rel = f64::INFINITY;
    for sweep in 0..MAX_SWEEPS {
        let mut max_update = 0.0_f64;
        let mut max_abs = 0.0_f64;
        for j in 1..out.nz - 1 {
            let row = j * nr;
            for i in 0..nr - 1 {
                let idx = row + i;
                if out.kinds[idx].is_dirichlet() {
                    continue;
                }
                let target = out.stencil_value(i, j);
                let old = out.values[idx];
                let new = old + omega * (target - old);
                out.values[idx] = new;
                max_update = max_update.max((new - old).abs());
                max_abs = max_abs.max(new.abs());
            }
        }
        for v in &out.values {
            max_abs = max_abs.max(v.abs());
        }
        worst_rel = if max_abs > 0.0 { max_update / max_abs } else { 0.0 };
        if worst_rel < tolerance {
            out.residual = worst_rel;
            return Ok(out);
        }
        let _ = sweep;
    }
    Err(Error::NoConvergence { sweeps: MAX_SWEEPS, residual: worst_rel })
}

/// Constant + dipole + traceless quadrupole expansion of one solved basis
/// potential, per applied volt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisEntry {
    /// Constant term (V per applied V).
    pub a0: f64,
    /// Dipole coefficient vector (V/m per applied V).
    pub b: Vector3<f64>,
    /// Symmetric traceless quadrupole (V/m^2 per applied V); the potential
    /// term is 0.5 r^T Q r.
    pub q: Matrix3<f64>,
}

impl BasisEntry {
    pub fn zero() -> Self {
        BasisEntry { a0: 0.0, b: Vector3::zeros(), q: Matrix3::zeros() }
    }

    /// Cylindrically symmetric entry: dipole along z, quadrupole
    /// diag(a, a, -2a).
    pub fn axisymmetric(a0: f64, dipole_z: f64, quad: f64) -> Self {
        BasisEntry {
            a0,
            b: Vector3::new(0.0, 0.0, dipole_z),
            q: Matrix3::from_diagonal(&Vector3::new(quad, quad, -2.0 * quad)),
        }
    }

    /// Potential of this entry at `r` for 1 V applied.
    pub fn potential(&self, r: &Vector3<f64>) -> f64 {
        self.a0 + self.b.dot(r) + 0.5 * (self.q * r).dot(r)
    }

    /// Electric field (-grad of the potential) at `r` for 1 V applied.
    pub fn field(&self, r: &Vector3<f64>) -> Vector3<f64> {
        -(self.b + self.q * r)
    }

    pub fn validate(&self) -> Result<()> {
        let scale = self.q.amax();
        if scale > 0.0 {
            let sym = (self.q - self.q.transpose()).amax();
            if sym > 1e-9 * scale {
                return Err(Error::Geometry("quadrupole not symmetric".into()));
            }
            if self.q.trace().abs() > 1e-9 * scale {
                return Err(Error::Geometry(format!(
                    "quadrupole trace {:.3e} violates the Laplace constraint",
                    self.q.trace()
                )));
            }
        }
        Ok(())
    }
}

/// Multipole reduction of a solved axisymmetric field, plus diagnostics.
#[derive(Debug, Clone)]
pub struct MultipoleFit {
    pub entry: BasisEntry,
    /// Degree-3 and degree-4 axial coefficients (diagnostics only).
    pub higher_order: Vec<f64>,
    pub rms_residual: f64,
    pub node_count: usize,
}

/// Least-squares fit of the axisymmetric harmonic polynomial basis to the
/// nodes inside a ball of `fit_radius` about `(0, center_z)`.
///
/// Basis (degree <= 2): {1, z, r^2/2 - z^2}; with `max_degree = 4` the
/// axial degree-3 and degree-4 harmonics are fitted as diagnostics. Errors
/// if the ball contains Dirichlet nodes.
pub fn extract_multipoles(
    field: &PotentialGrid,
    center_z: f64,
    fit_radius: f64,
    max_degree: usize,
) -> Result<MultipoleFit> {
    if max_degree != 2 && max_degree != 4 {
        return Err(Error::FitRegion(format!("max_degree must be 2 or 4, got {max_degree}")));
    }
    if !(fit_radius > field.spacing * 2.0) {
        return Err(Error::FitRegion("fit radius must span at least two grid spacings".into()));
    }

    let mut rs = Vec::new();
    let mut zs = Vec::new();
    let mut phis = Vec::new();
    for j in 0..field.nz {
        let z = field.z(j) - center_z;
        for i in 0..field.nr {
            let r = field.r(i);
            if r * r + z * z > fit_radius * fit_radius {
                continue;
            }
            if field.kind(i, j).is_dirichlet() {
                return Err(Error::FitRegion(format!(
                    "fit ball of radius {fit_radius:.3e} m encloses a Dirichlet node at (r={r:.3e}, z={:.3e})",
                    z + center_z
                )));
            }
            rs.push(r);
            zs.push(z);
            phis.push(field.value(i, j));
        }
    }
    let n = phis.len();
    let n_params = if max_degree == 4 { 5 } else { 3 };
    if n < n_params * 3 {
        return Err(Error::FitRegion(format!(
            "only {n} nodes inside the fit ball; need at least {}",
            n_params * 3
        )));
    }

    // Columns scaled by fit_radius powers for conditioning.
    let s = fit_radius;
    let design = DMatrix::from_fn(n, n_params, |row, col| {
        let r = rs[row] / s;
        let z = zs[row] / s;
        match col {
            0 => 1.0,
            1 => z,
            2 => 0.5 * r * r - z * z,
            3 => z * z * z - 1.5 * z * r * r,
            _ => z.powi(4) - 3.0 * z * z * r * r + 0.375 * r.powi(4),
        }
    });
    let ys = DVector::from_vec(phis);
    let gram = design.transpose() * &design;
    let rhs = design.transpose() * &ys;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::FitRegion("degenerate harmonic fit".into()))?;
    let sol = chol.solve(&rhs);
    let residuals = &design * &sol - &ys;
    let rms = (residuals.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();

    let a0 = sol[0];
    let dipole_z = sol[1] / s;
    let quad = sol[2] / (s * s);
    let higher_order = if max_degree == 4 {
        vec![sol[3] / s.powi(3), sol[4] / s.powi(4)]
    } else {
        Vec::new()
    };

    Ok(MultipoleFit {
        entry: BasisEntry::axisymmetric(a0, dipole_z, quad),
        higher_order,
        rms_residual: rms,
        node_count: n,
    })
}
