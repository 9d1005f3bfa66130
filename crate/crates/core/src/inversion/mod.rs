//! Image to latent inversion: `w` by derivative-free search on the L1
//! reconstruction error, then `n` by Tikhonov-regularized deconvolution.

mod krylov;
mod nelder_mead;
mod spectral;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use krylov::{solve as krylov_solve, solve_preconditioned, KrylovMethod, KrylovReport};
pub use nelder_mead::{nelder_mead, SimplexOptions, SimplexResult};
pub use spectral::SpectralInverse;

use crate::error::{Error, Result};
use crate::phantom::{segment, visit_intensity, NoiseField, PhantomGenerator, VoxelGrid, N_PARAMS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Simplex iterations per start and phase.
    pub max_iterations: usize,
    /// Objective spread at which a simplex counts as converged.
    pub tolerance: f64,
    /// Starts besides the moment estimate: `w = 0` plus seeded Gaussian draws.
    pub multi_start: usize,
    pub seed: u64,
    /// Start from style parameters estimated from image moments.
    pub moment_start: bool,
    /// Voxel stride of the coarse search phase (1 disables it).
    pub coarse_stride: usize,
    /// Simplex iterations of the full-resolution polish after a coarse phase.
    pub polish_iterations: usize,
    pub cg_iterations: usize,
    pub cg_tolerance: f64,
    /// Tikhonov weight relative to the squared noise amplitude.
    pub lambda: f64,
    pub krylov: KrylovMethod,
    /// Precondition the noise solve with the exact spectral inverse.
    pub preconditioned: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_iterations: 2000,
            tolerance: 1e-7,
            multi_start: 1,
            seed: 0,
            moment_start: true,
            coarse_stride: 2,
            polish_iterations: 250,
            cg_iterations: 200,
            cg_tolerance: 1e-8,
            lambda: 1e-3,
            krylov: KrylovMethod::ConjugateGradient,
            preconditioned: true,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.max_iterations == 0 || self.cg_iterations == 0 || self.coarse_stride == 0 {
            return bad("iteration budgets and stride must be positive");
        }
        if self.multi_start == 0 && !self.moment_start {
            return bad("need at least one start");
        }
        if !(self.lambda >= 0.0) || !(self.tolerance >= 0.0) || !(self.cg_tolerance > 0.0) {
            return bad("lambda and tolerances must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StyleFit {
    pub w: Vec<f64>,
    /// Mean |I - G(w, 0)| over the grid.
    pub l1: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// The image had no brain to fit.
    pub degenerate: bool,
    /// Best objective per iteration of the winning start, full resolution.
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct InversionResult {
    pub w_hat: Vec<f64>,
    pub n_hat: NoiseField,
    /// Mean |I - G(w_hat, n_hat)|.
    pub l1_error: f64,
    pub style_l1: f64,
    pub iterations: usize,
    pub converged: bool,
    pub degenerate: bool,
    pub noise_report: KrylovReport,
}

fn check_grid(image: &VoxelGrid, gen: &PhantomGenerator) -> Result<()> {
    if image.dims != gen.grid.dims || image.spacing_mm != gen.grid.spacing_mm || image.data.len() != gen.grid.len() {
        return Err(Error::Dimension {
            expected: format!("{:?} at {} mm", gen.grid.dims, gen.grid.spacing_mm),
            got: format!("{:?} at {} mm", image.dims, image.spacing_mm),
        });
    }
    Ok(())
}

/// `mean |I - G(w, 0)|` over voxels on a `stride` lattice. Only the brain
/// bounding box is rasterized; the rest contributes `|I|`.
struct L1Objective<'a> {
    gen: &'a PhantomGenerator,
    image: &'a [f32],
    stride: usize,
    abs_total: f64,
    count: f64,
}

impl<'a> L1Objective<'a> {
    fn new(gen: &'a PhantomGenerator, image: &'a VoxelGrid, stride: usize) -> Self {
        let [nx, ny, nz] = image.dims;
        let mut abs_total = 0.0;
        let mut count = 0.0;
        for z in (0..nz).step_by(stride) {
            for y in (0..ny).step_by(stride) {
                for x in (0..nx).step_by(stride) {
                    abs_total += f64::from(image.data[(z * ny + y) * nx + x]).abs();
                    count += 1.0;
                }
            }
        }
        L1Objective {
            gen,
            image: &image.data,
            stride,
            abs_total,
            count,
        }
    }

    fn value(&self, w: &[f64]) -> f64 {
        let Ok(shape) = self.gen.decoder.decode(w) else {
            return f64::INFINITY;
        };
        let mut delta = 0.0;
        let visited = visit_intensity(&shape, &self.gen.grid, self.stride, |i, g| {
            let v = f64::from(self.image[i]);
            delta += (v - g.clamp(0.0, 1.0)).abs() - v.abs();
        });
        match visited {
            Ok(()) => (self.abs_total + delta) / self.count,
            Err(_) => f64::INFINITY,
        }
    }
}

/// Style vector read off the segmented image: ellipsoid semi-axes from
/// second moments (`E[x^2] = a^2 / 5` for a solid ellipsoid).
pub fn moment_estimate(image: &VoxelGrid, gen: &PhantomGenerator) -> Option<Vec<f64>> {
    let seg = segment(image);
    let spec = image.spec();
    let [nx, ny, nz] = image.dims;
    let moments = |weights: &[f64]| -> Option<([f64; 3], [f64; 3])> {
        let mut m0 = 0.0;
        let mut m1 = [0.0; 3];
        let mut m2 = [0.0; 3];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let wgt = weights[spec.index(x, y, z)];
                    if wgt == 0.0 {
                        continue;
                    }
                    let p = spec.position([x, y, z]);
                    m0 += wgt;
                    for k in 0..3 {
                        m1[k] += wgt * p[k];
                        m2[k] += wgt * p[k] * p[k];
                    }
                }
            }
        }
        if m0 < 8.0 {
            return None;
        }
        let mean = m1.map(|v| v / m0);
        // voxel-size correction for the variance of a box-sampled solid
        let h2 = spec.spacing_mm * spec.spacing_mm / 12.0;
        let axes = std::array::from_fn(|k| (5.0 * (m2[k] / m0 - mean[k] * mean[k] - h2).max(0.0)).sqrt());
        Some((mean, axes))
    };
    let (_, brain) = moments(&seg.brain)?;
    let (_, inner) = moments(&seg.inner)?;
    let thickness = (0..3).map(|k| brain[k] - inner[k]).sum::<f64>() / 3.0;
    let (vc, vent) = moments(&seg.ventricle).unwrap_or(([0.0; 3], [gen.decoder.p0[4], gen.decoder.p0[5], gen.decoder.p0[6]]));
    let p: [f64; N_PARAMS] = [brain[0], brain[1], brain[2], thickness, vent[0], vent[1], vent[2], vc[1]];
    let w = gen.decoder.pseudo_inverse(&p);
    w.iter().all(|v| v.is_finite()).then_some(w)
}

/// `argmin_w mean |I - G(w, 0)|` by multi-start Nelder-Mead.
pub fn invert_style(image: &VoxelGrid, gen: &PhantomGenerator, config: &OptimizerConfig) -> Result<StyleFit> {
    config.validate()?;
    check_grid(image, gen)?;
    let d = gen.style_dim();
    let degenerate = segment(image).brain.iter().all(|&b| b == 0.0);

    // (start, initial simplex step)
    let mut starts: Vec<(Vec<f64>, f64)> = Vec::new();
    if config.moment_start && !degenerate {
        if let Some(w) = moment_estimate(image, gen) {
            starts.push((w, 0.05));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for k in 0..config.multi_start {
        let w = if k == 0 {
            vec![0.0; d]
        } else {
            (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()
        };
        starts.push((w, 0.5));
    }

    let fine = L1Objective::new(gen, image, 1);
    let coarse = (config.coarse_stride > 1).then(|| L1Objective::new(gen, image, config.coarse_stride));
    let mut best: Option<StyleFit> = None;
    for (w0, step) in starts {
        let mut iterations = 0;
        let mut evaluations = 0;
        let mut x = w0;
        let mut step = step;
        if let Some(c) = &coarse {
            let r = nelder_mead(
                |w| c.value(w),
                &x,
                SimplexOptions {
                    initial_step: step,
                    max_iterations: config.max_iterations,
                    f_tol: config.tolerance,
                    x_tol: 1e-3,
                },
            );
            iterations += r.iterations;
            evaluations += r.evaluations;
            x = r.x;
            step = 0.02;
        }
        let budget = if coarse.is_some() {
            config.polish_iterations
        } else {
            config.max_iterations
        };
        let r = nelder_mead(
            |w| fine.value(w),
            &x,
            SimplexOptions {
                initial_step: step,
                max_iterations: budget,
                f_tol: config.tolerance,
                x_tol: 1e-4,
            },
        );
        iterations += r.iterations;
        evaluations += r.evaluations;
        let fit = StyleFit {
            w: r.x,
            l1: r.value,
            iterations,
            evaluations,
            converged: r.converged && !degenerate,
            degenerate,
            trace: r.trace,
        };
        if best.as_ref().is_none_or(|b| fit.l1 < b.l1) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one start"))
}

/// `argmin_n |A n - (I - raster(w))|^2 + lambda eps^2 |n|^2`, via the normal
/// equations `(K^T K + lambda) n = K^T r / eps` with `A = eps K`.
pub fn recover_noise(
    image: &VoxelGrid,
    w_hat: &[f64],
    gen: &PhantomGenerator,
    config: &OptimizerConfig,
) -> Result<(NoiseField, KrylovReport)> {
    config.validate()?;
    check_grid(image, gen)?;
    let raster = gen.raster(w_hat)?;
    let residual: Vec<f64> = image.data.iter().zip(&raster).map(|(&i, r)| f64::from(i) - r).collect();
    let dims = gen.grid.dims;
    let op = &gen.noise;
    let eps = op.amplitude;
    if eps == 0.0 {
        return Err(Error::InvalidConfig("noise amplitude is zero".into()));
    }
    let mut rhs = op.blur(&residual, dims);
    for v in &mut rhs {
        *v /= eps;
    }
    let mut tmp = vec![0.0; rhs.len()];
    let lambda = config.lambda;
    let apply = |v: &[f64], out: &mut [f64]| {
        op.blur_into(v, &mut tmp, dims);
        op.blur_into(&tmp, out, dims);
        for (o, x) in out.iter_mut().zip(v) {
            *o += lambda * x;
        }
    };
    let (n, report) = if config.preconditioned {
        let pre = SpectralInverse::new(op, dims, lambda);
        solve_preconditioned(apply, |v, out| pre.apply(v, out), &rhs, config.krylov, config.cg_iterations, config.cg_tolerance)?
    } else {
        krylov_solve(apply, &rhs, config.krylov, config.cg_iterations, config.cg_tolerance)?
    };
    Ok((NoiseField { dims, values: n }, report))
}

pub fn mean_abs_diff(a: &VoxelGrid, b: &VoxelGrid) -> f64 {
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (f64::from(*x) - f64::from(*y)).abs())
        .sum::<f64>()
        / a.data.len().max(1) as f64
}

/// Style search followed by noise recovery.
pub fn invert(image: &VoxelGrid, gen: &PhantomGenerator, config: &OptimizerConfig) -> Result<InversionResult> {
    let style = invert_style(image, gen, config)?;
    let (n_hat, noise_report) = recover_noise(image, &style.w, gen, config)?;
    let recon = gen.generate(&style.w, &n_hat)?;
    Ok(InversionResult {
        l1_error: mean_abs_diff(image, &recon),
        w_hat: style.w,
        n_hat,
        style_l1: style.l1,
        iterations: style.iterations,
        converged: style.converged && noise_report.converged,
        degenerate: style.degenerate,
        noise_report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn objective_matches_direct_l1() {
        let gen = PhantomGenerator::default();
        let img = gen.generate(&[0.1; 8], &gen.noise_from_seed(1)).unwrap();
        let obj = L1Objective::new(&gen, &img, 1);
        let w = [0.3, -0.1, 0.0, 0.2, 0.1, 0.0, -0.2, 0.4];
        let direct = mean_abs_diff(&img, &gen.render(&w).unwrap());
        assert!((obj.value(&w) - direct).abs() < 1e-9, "{} vs {direct}", obj.value(&w));
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        crate::stats::pearson(a, b)
    }

    #[test]
    fn zero_residual_gives_zero_noise() {
        let gen = PhantomGenerator::default();
        let w = [0.2; 8];
        // the image is the f32 raster, so the residual is rounding only
        let img = gen.render(&w).unwrap();
        let (n, rep) = recover_noise(&img, &w, &gen, &OptimizerConfig::default()).unwrap();
        assert!(rep.converged);
        assert!(n.values.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn known_style_recovers_noise() {
        let gen = PhantomGenerator::default();
        let w = [0.1, -0.2, 0.3, 0.0, 0.1, 0.2, -0.1, 0.0];
        let truth = gen.noise_from_seed(9);
        let img = gen.generate(&w, &truth).unwrap();
        let cfg = OptimizerConfig::default();
        let (n, rep) = recover_noise(&img, &w, &gen, &cfg).unwrap();
        assert!(rep.converged && rep.iterations <= 3, "{rep:?}");
        let dims = gen.grid.dims;
        // compare blurred fields inside the head; the background is clipped at 0
        let raster = gen.raster(&w).unwrap();
        let inside = |v: Vec<f64>| -> Vec<f64> { v.into_iter().zip(&raster).filter(|(_, g)| **g > 0.1).map(|(x, _)| x).collect() };
        let a = inside(gen.noise.blur(&n.values, dims));
        let b = inside(gen.noise.blur(&truth.values, dims));
        let rho = pearson(&a, &b);
        assert!(rho > 0.9, "{rho}");
        let recon = gen.generate(&w, &n).unwrap();
        assert!(mean_abs_diff(&img, &recon) < 1e-3);

        // gradient of |eps K n - r|^2 + lambda eps^2 |n|^2 at the solution
        let r: Vec<f64> = img.data.iter().zip(&raster).map(|(&i, g)| f64::from(i) - g).collect();
        let eps = gen.noise.amplitude;
        let grad = |v: &[f64]| -> f64 {
            let kv = gen.noise.blur(v, dims);
            let res: Vec<f64> = kv.iter().zip(&r).map(|(k, ri)| eps * k - ri).collect();
            let kt = gen.noise.blur(&res, dims);
            kt.iter()
                .zip(v)
                .map(|(g, vi)| (2.0 * eps * g + 2.0 * cfg.lambda * eps * eps * vi).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let g0 = grad(&vec![0.0; r.len()]);
        assert!(grad(&n.values) < 1e-6 * g0, "{} vs {g0}", grad(&n.values));
    }

    #[test]
    fn unpreconditioned_solve_agrees() {
        let gen = PhantomGenerator::with_grid(crate::phantom::GridSpec::cube(40, 5.2));
        let w = [0.0; 8];
        let img = gen.generate(&w, &gen.noise_from_seed(2)).unwrap();
        let fast = OptimizerConfig::default();
        let (a, _) = recover_noise(&img, &w, &gen, &fast).unwrap();
        for krylov in [KrylovMethod::ConjugateGradient, KrylovMethod::ConjugateResidual] {
            let slow = OptimizerConfig {
                preconditioned: false,
                krylov,
                cg_iterations: 2000,
                lambda: 0.05,
                ..fast.clone()
            };
            let (b, rep) = recover_noise(&img, &w, &gen, &slow).unwrap();
            let (c, _) = recover_noise(&img, &w, &gen, &OptimizerConfig { lambda: 0.05, ..fast.clone() }).unwrap();
            assert!(rep.converged, "{krylov:?}");
            if krylov == KrylovMethod::ConjugateResidual {
                assert!(rep.residual_norms.windows(2).all(|p| p[1] <= p[0] * (1.0 + 1e-12)));
            }
            let diff = b.values.iter().zip(&c.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-5, "{krylov:?}: {diff}");
        }
        assert!(a.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn self_inversion_and_determinism() {
        let gen = PhantomGenerator::default();
        let w = [0.2, -0.3, 0.1, 0.25, -0.1, 0.15, 0.0, -0.2];
        let img = gen.generate(&w, &gen.noise_from_seed(4)).unwrap();
        let cfg = OptimizerConfig::default();
        let r = invert(&img, &gen, &cfg).unwrap();
        assert!(r.converged && !r.degenerate);
        assert!(r.l1_error < 2e-3, "{}", r.l1_error);
        let recon = gen.generate(&r.w_hat, &r.n_hat).unwrap();
        assert!((mean_abs_diff(&img, &recon) - r.l1_error).abs() < 1e-12);
        let va = gen.decoder.decode(&w).unwrap().analytic_volumes();
        let vb = gen.decoder.decode(&r.w_hat).unwrap().analytic_volumes();
        for k in 0..3 {
            assert!(((va[k] - vb[k]) / va[k]).abs() < 0.02);
        }
        let again = invert(&img, &gen, &cfg).unwrap();
        assert_eq!(again.w_hat, r.w_hat);
        assert_eq!(again.n_hat.values, r.n_hat.values);
    }

    #[test]
    fn best_so_far_is_nonincreasing() {
        let gen = PhantomGenerator::default();
        let img = gen.render(&[0.3; 8]).unwrap();
        let cfg = OptimizerConfig {
            coarse_stride: 1,
            max_iterations: 150,
            ..OptimizerConfig::default()
        };
        let fit = invert_style(&img, &gen, &cfg).unwrap();
        assert!(fit.trace.windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn degenerate_image_does_not_panic() {
        let gen = PhantomGenerator::default();
        let img = VoxelGrid::zeros(gen.grid);
        let cfg = OptimizerConfig {
            max_iterations: 50,
            ..OptimizerConfig::default()
        };
        let r = invert(&img, &gen, &cfg).unwrap();
        assert!(r.degenerate && !r.converged);
    }

    #[test]
    fn grid_mismatch_is_an_error() {
        let gen = PhantomGenerator::default();
        let img = VoxelGrid::zeros(crate::phantom::GridSpec::cube(8, 1.0));
        assert!(invert_style(&img, &gen, &OptimizerConfig::default()).is_err());
    }
}
