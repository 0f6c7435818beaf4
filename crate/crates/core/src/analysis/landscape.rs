use rayon::prelude::*;

use crate::agents::GaussianPolicy;
use crate::envs::EnvSpec;
use crate::numkit::{dot, Matrix, ParamVector};
use crate::pipeline::{evaluate_policy, EvalResult};
use crate::{Error, Result};

/// Axis range used by the planar grid unless the caller overrides it.
pub const DEFAULT_GRID_RANGE: (f64, f64) = (-0.2, 1.2);
pub const DEFAULT_GRID_RESOLUTION: usize = 15;

/// Inputs whose squared sine is below this are treated as collinear.
const COLLINEAR_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub t: f64,
    pub mean: f64,
    pub stderr: f64,
}

impl CurvePoint {
    pub fn csv(points: &[CurvePoint]) -> String {
        let mut out = String::from("t,mean_return,stderr\n");
        for p in points {
            out.push_str(&format!("{:?},{:?},{:?}\n", p.t, p.mean, p.stderr));
        }
        out
    }
}

fn check_same_actor(a: &GaussianPolicy, b: &GaussianPolicy) -> Result<()> {
    if a.params.spec() != b.params.spec() || a.low != b.low || a.high != b.high || a.squash != b.squash {
        return Err(Error::shape("actors differ in architecture or action bounds"));
    }
    Ok(())
}

fn with_params(template: &GaussianPolicy, values: Vec<f64>) -> Result<GaussianPolicy> {
    Ok(GaussianPolicy {
        params: template.params.with_values(values)?,
        ..template.clone()
    })
}

fn evaluate_values(template: &GaussianPolicy, values: Vec<f64>, env: &EnvSpec, episodes: usize, seed: u64) -> Result<EvalResult> {
    evaluate_policy(&with_params(template, values)?, env, episodes, seed)
}

/// Greedy returns along θ(t) = (1−t)·θ_offline + t·θ_online; t = 0 is the
/// offline checkpoint. Every point uses the same evaluation seed.
pub fn interpolate_eval(
    offline: &GaussianPolicy,
    online: &GaussianPolicy,
    ts: &[f64],
    env: &EnvSpec,
    episodes: usize,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    check_same_actor(offline, online)?;
    if let Some(t) = ts.iter().find(|t| !t.is_finite()) {
        return Err(Error::invalid(format!("interpolation coefficient {t} is not finite")));
    }
    let a = offline.params.values();
    let b = online.params.values();
    ts.par_iter()
        .map(|&t| {
            let values = a.iter().zip(b).map(|(x, y)| (1.0 - t) * x + t * y).collect();
            let e = evaluate_values(offline, values, env, episodes, seed)?;
            Ok(CurvePoint {
                t,
                mean: e.mean,
                stderr: e.stderr,
            })
        })
        .collect()
}

/// Origin θ₁ with orthogonal directions u′ = θ₂ − θ₁ and v′, the part of
/// θ₃ − θ₁ orthogonal to u′.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneBasis {
    pub origin: ParamVector,
    pub u: ParamVector,
    pub v: ParamVector,
    pub u_norm: f64,
    pub v_norm: f64,
    /// Cosine between θ₂ − θ₁ and θ₃ − θ₁ before orthogonalization.
    pub cosine: f64,
}

fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

fn remove_projection(v: &mut [f64], u: &[f64], uu: f64) {
    let c = dot(u, v) / uu;
    for (vi, ui) in v.iter_mut().zip(u) {
        *vi -= c * ui;
    }
}

pub fn plane_basis(theta1: &ParamVector, theta2: &ParamVector, theta3: &ParamVector) -> Result<PlaneBasis> {
    if theta1.spec() != theta2.spec() || theta1.spec() != theta3.spec() {
        return Err(Error::shape("plane basis needs three checkpoints of the same architecture"));
    }
    let o = theta1.values();
    let u: Vec<f64> = theta2.values().iter().zip(o).map(|(a, b)| a - b).collect();
    let mut v: Vec<f64> = theta3.values().iter().zip(o).map(|(a, b)| a - b).collect();
    let uu = dot(&u, &u);
    if !uu.is_finite() || !v.iter().all(|x| x.is_finite()) {
        return Err(Error::non_finite("plane basis directions"));
    }
    if uu == 0.0 {
        return Err(Error::invalid("θ₂ equals θ₁, so u is zero"));
    }
    let v_len = norm(&v);
    let cosine = if v_len == 0.0 { 1.0 } else { dot(&u, &v) / (uu.sqrt() * v_len) };
    if v_len == 0.0 || 1.0 - cosine * cosine <= COLLINEAR_TOL {
        return Err(Error::invalid(format!(
            "θ₃ − θ₁ is collinear with θ₂ − θ₁ (cosine {cosine:.15})"
        )));
    }
    // a second pass removes the rounding left by the first
    remove_projection(&mut v, &u, uu);
    remove_projection(&mut v, &u, uu);
    let u_norm = uu.sqrt();
    let v_norm = norm(&v);
    Ok(PlaneBasis {
        origin: theta1.clone(),
        u: theta1.with_values(u)?,
        v: theta1.with_values(v)?,
        u_norm,
        v_norm,
        cosine,
    })
}

impl PlaneBasis {
    /// θ₁ + l·u′ + t·v′.
    pub fn point(&self, l: f64, t: f64) -> Vec<f64> {
        self.origin
            .values()
            .iter()
            .zip(self.u.values().iter().zip(self.v.values()))
            .map(|(o, (u, v))| o + l * u + t * v)
            .collect()
    }

    /// ⟨u′, v′⟩ / (‖u′‖‖v′‖).
    pub fn relative_inner_product(&self) -> f64 {
        dot(self.u.values(), self.v.values()) / (self.u_norm * self.v_norm)
    }
}

/// Grid of greedy returns; entry (i, j) is at l = coords[i] along u′ and
/// t = coords[j] along v′.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneGrid {
    pub coords: Vec<f64>,
    pub returns: Matrix,
    pub stderr: Matrix,
}

impl PlaneGrid {
    /// Matrix layout: the header holds the t coordinates, the first column
    /// the l coordinates.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("l\\t");
        for t in &self.coords {
            out.push_str(&format!(",{t:?}"));
        }
        out.push('\n');
        for (i, l) in self.coords.iter().enumerate() {
            out.push_str(&format!("{l:?}"));
            for v in self.returns.row(i) {
                out.push_str(&format!(",{v:?}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Evenly spaced coordinates; values within rounding of 0 or 1 snap to them
/// so the checkpoints themselves lie on the grid.
fn grid_coords(range: (f64, f64), resolution: usize) -> Vec<f64> {
    let (lo, hi) = range;
    let span = hi - lo;
    (0..resolution)
        .map(|i| {
            let c = lo + span * i as f64 / (resolution - 1) as f64;
            let tol = 1e-12 * span.abs().max(1.0);
            if c.abs() <= tol {
                0.0
            } else if (c - 1.0).abs() <= tol {
                1.0
            } else {
                c
            }
        })
        .collect()
}

/// Evaluates the actor at θ₁ + l·u′ + t·v′ over a square grid. Cells are
/// independent and run in parallel; all use the same evaluation seed.
pub fn plane_grid_eval(
    basis: &PlaneBasis,
    template: &GaussianPolicy,
    range: (f64, f64),
    resolution: usize,
    env: &EnvSpec,
    episodes: usize,
    seed: u64,
) -> Result<PlaneGrid> {
    if resolution < 2 {
        return Err(Error::invalid(format!("grid resolution must be at least 2, got {resolution}")));
    }
    if !(range.0.is_finite() && range.1.is_finite() && range.0 < range.1) {
        return Err(Error::invalid(format!("grid range {range:?} must be finite and increasing")));
    }
    if template.params.spec() != basis.origin.spec() {
        return Err(Error::shape("actor template does not match the plane basis"));
    }
    let coords = grid_coords(range, resolution);
    let cells: Vec<(usize, usize)> = (0..resolution).flat_map(|i| (0..resolution).map(move |j| (i, j))).collect();
    let results = cells
        .par_iter()
        .map(|&(i, j)| evaluate_values(template, basis.point(coords[i], coords[j]), env, episodes, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut returns = Matrix::zeros(resolution, resolution);
    let mut stderr = Matrix::zeros(resolution, resolution);
    for (&(i, j), e) in cells.iter().zip(&results) {
        returns.set(i, j, e.mean);
        stderr.set(i, j, e.stderr);
    }
    Ok(PlaneGrid { coords, returns, stderr })
}

/// One row per checkpoint holding its flattened parameters.
pub fn export_checkpoint_matrix(checkpoints: &[&ParamVector]) -> Result<Matrix> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::invalid("no checkpoints to export"))?;
    if let Some(i) = checkpoints.iter().position(|c| c.spec() != first.spec()) {
        return Err(Error::shape(format!("checkpoint {i} has a different architecture from checkpoint 0")));
    }
    let rows: Vec<Vec<f64>> = checkpoints.iter().map(|c| c.values().to_vec()).collect();
    Matrix::from_rows(&rows)
}

/// Comma-separated rows without a header; floats round-trip exactly.
pub fn checkpoint_matrix_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_checkpoint_matrix(text: &str) -> Result<Matrix> {
    let mut rows = Vec::new();
    let mut offset = 0u64;
    for (i, line) in text.lines().enumerate() {
        let row = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                line: i + 1,
                offset,
                message: e.to_string(),
            })?;
        if let Some(first) = rows.first().map(|r: &Vec<f64>| r.len()) {
            if row.len() != first {
                return Err(Error::Parse {
                    line: i + 1,
                    offset,
                    message: format!("expected {first} values, found {}", row.len()),
                });
            }
        }
        rows.push(row);
        offset += line.len() as u64 + 1;
    }
    if rows.is_empty() {
        return Err(Error::invalid("checkpoint matrix is empty"));
    }
    Matrix::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{rng_from_seed, standard_normal_vec, Activation, MlpSpec, OutputTransform};
    use proptest::prelude::*;

    fn actor(seed: u64) -> GaussianPolicy {
        GaussianPolicy::new(2, &[6], Activation::Tanh, vec![-1.0; 2], vec![1.0; 2], true, seed).unwrap()
    }

    fn env() -> EnvSpec {
        EnvSpec::builtin("reach2d").unwrap()
    }

    #[test]
    fn interpolation_endpoints_are_exact() {
        let (a, b) = (actor(1), actor(2));
        let e = env();
        let pts = interpolate_eval(&a, &b, &[0.0, 0.5, 1.0], &e, 3, 9).unwrap();
        let ea = evaluate_policy(&a, &e, 3, 9).unwrap();
        let eb = evaluate_policy(&b, &e, 3, 9).unwrap();
        assert_eq!((pts[0].mean, pts[0].stderr), (ea.mean, ea.stderr));
        assert_eq!((pts[2].mean, pts[2].stderr), (eb.mean, eb.stderr));
        assert_eq!(pts.iter().map(|p| p.t).collect::<Vec<_>>(), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn identical_endpoints_give_a_flat_curve() {
        let a = actor(4);
        let pts = interpolate_eval(&a, &a, &[-0.5, 0.0, 0.3, 1.0, 1.5], &env(), 2, 1).unwrap();
        assert!(pts.iter().all(|p| p.mean == pts[0].mean));
    }

    #[test]
    fn interpolation_rejects_shape_mismatch() {
        let a = actor(1);
        let b = GaussianPolicy::new(2, &[7], Activation::Tanh, vec![-1.0; 2], vec![1.0; 2], true, 1).unwrap();
        assert!(matches!(interpolate_eval(&a, &b, &[0.0], &env(), 1, 0), Err(Error::Shape(_))));
    }

    /// A 1 → n linear layer has 2n parameters.
    fn flat_spec(n: usize) -> MlpSpec {
        MlpSpec::new(vec![1, n], Activation::Tanh, OutputTransform::Identity).unwrap()
    }

    fn pv(values: Vec<f64>) -> ParamVector {
        flat_spec(values.len() / 2).zeros().with_values(values).unwrap()
    }

    fn three_values(len: usize, seed: u64) -> [Vec<f64>; 3] {
        let mut rng = rng_from_seed(seed);
        [
            standard_normal_vec(&mut rng, len),
            standard_normal_vec(&mut rng, len),
            standard_normal_vec(&mut rng, len),
        ]
    }

    #[test]
    fn orthogonal_directions_are_kept() {
        let b = plane_basis(&pv(vec![0.0; 4]), &pv(vec![1.0, 0.0, 0.0, 0.0]), &pv(vec![0.0, 2.0, 3.0, 0.0])).unwrap();
        assert_eq!(b.v.values(), &[0.0, 2.0, 3.0, 0.0]);
        assert_eq!(b.cosine, 0.0);
    }

    #[test]
    fn projection_is_removed() {
        // v = 2u + w with w ⟂ u
        let b = plane_basis(&pv(vec![1.0; 4]), &pv(vec![2.0, 2.0, 1.0, 1.0]), &pv(vec![3.0, 3.0, 2.0, 0.0])).unwrap();
        assert_eq!(b.u.values(), &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(b.v.values(), &[0.0, 0.0, 1.0, -1.0]);
    }

    #[test]
    fn collinear_inputs_report_the_cosine() {
        let err = plane_basis(&pv(vec![0.0; 4]), &pv(vec![1.0, 2.0, 0.0, 0.0]), &pv(vec![-2.0, -4.0, 0.0, 0.0])).unwrap_err();
        assert!(err.to_string().contains("cosine -1.0"), "{err}");
        assert!(plane_basis(&pv(vec![0.0; 4]), &pv(vec![0.0; 4]), &pv(vec![1.0; 4])).is_err());
    }

    #[test]
    fn grid_corners_match_checkpoints() {
        // dyadic parameters keep θ₁ + u′ exactly equal to θ₂
        let t1 = actor(3);
        let len = t1.params.len();
        let quant = |seed: u64| -> Vec<f64> {
            let mut rng = rng_from_seed(seed);
            standard_normal_vec(&mut rng, len).iter().map(|x| (x * 64.0).round() / 64.0).collect()
        };
        let (a, b) = (quant(1), quant(2));
        // third direction supported on coordinates where θ₂ − θ₁ vanishes
        let mut c = a.clone();
        let mut b = b;
        b[..len / 2].copy_from_slice(&a[..len / 2]);
        for x in &mut c[..len / 2] {
            *x += 0.25;
        }
        let p1 = with_params(&t1, a).unwrap();
        let p2 = with_params(&t1, b).unwrap();
        let p3 = with_params(&t1, c).unwrap();
        let basis = plane_basis(&p1.params, &p2.params, &p3.params).unwrap();
        assert_eq!(basis.relative_inner_product(), 0.0);
        let e = env();
        let grid = plane_grid_eval(&basis, &t1, (0.0, 1.0), 2, &e, 2, 5).unwrap();
        assert_eq!(grid.coords, vec![0.0, 1.0]);
        assert_eq!(grid.returns.get(0, 0), evaluate_policy(&p1, &e, 2, 5).unwrap().mean);
        assert_eq!(grid.returns.get(1, 0), evaluate_policy(&p2, &e, 2, 5).unwrap().mean);
        assert_eq!(grid.returns.get(0, 1), evaluate_policy(&p3, &e, 2, 5).unwrap().mean);
        assert_eq!(grid.to_csv().lines().count(), 3);
        assert!(plane_grid_eval(&basis, &t1, (0.0, 1.0), 1, &e, 2, 5).is_err());
    }

    #[test]
    fn default_grid_contains_zero_and_one() {
        let c = grid_coords(DEFAULT_GRID_RANGE, DEFAULT_GRID_RESOLUTION);
        assert_eq!(c.len(), 15);
        assert!(c.contains(&0.0) && c.contains(&1.0));
        assert_eq!((c[0], c[14]), (-0.2, 1.2));
    }

    #[test]
    fn checkpoint_matrix_round_trips() {
        let (a, b) = (actor(1), actor(2));
        let m = export_checkpoint_matrix(&[&a.params, &b.params, &a.params]).unwrap();
        assert_eq!(m.rows(), 3);
        assert_eq!(m.row(0), m.row(2));
        assert_eq!(parse_checkpoint_matrix(&checkpoint_matrix_csv(&m)).unwrap(), m);
        let other = actor_with_hidden(5);
        assert!(matches!(export_checkpoint_matrix(&[&a.params, &other.params]), Err(Error::Shape(_))));
        assert!(matches!(parse_checkpoint_matrix("1,2\n3\n"), Err(Error::Parse { line: 2, offset: 4, .. })));
    }

    fn actor_with_hidden(h: usize) -> GaussianPolicy {
        GaussianPolicy::new(2, &[h], Activation::Tanh, vec![-1.0; 2], vec![1.0; 2], true, 0).unwrap()
    }

    proptest! {
        #[test]
        fn random_bases_are_orthogonal(seed in any::<u64>(), half in 2usize..100) {
            let spec = flat_spec(half);
            let n = spec.param_count();
            let [a, b, c] = three_values(n, seed);
            let basis = plane_basis(&spec.zeros().with_values(a).unwrap(), &spec.zeros().with_values(b).unwrap(), &spec.zeros().with_values(c).unwrap()).unwrap();
            prop_assert!(basis.relative_inner_product().abs() <= 1e-10);
        }

        #[test]
        fn basis_is_invariant_to_scaling_the_third_direction(seed in any::<u64>(), s in 0.01f64..100.0) {
            let spec = flat_spec(4);
            let n = spec.param_count();
            let [a, b, c] = three_values(n, seed);
            let scaled: Vec<f64> = c.iter().zip(&a).map(|(x, o)| o + s * (x - o)).collect();
            let p = |v: Vec<f64>| spec.zeros().with_values(v).unwrap();
            let b1 = plane_basis(&p(a.clone()), &p(b.clone()), &p(c)).unwrap();
            let b2 = plane_basis(&p(a), &p(b), &p(scaled)).unwrap();
            for (x, y) in b1.v.values().iter().zip(b2.v.values()) {
                prop_assert!((x / b1.v_norm - y / b2.v_norm).abs() <= 1e-9);
            }
        }
    }
}
