//! Stochastic Wasserstein–Procrustes alignment of point and Gaussian clouds.
//!
//! Each step draws a batch from both clouds, matches the batches by
//! entropic optimal transport on the current map, takes a gradient step on
//! `‖X_t R − P_t Y_t‖²_F` and re-projects `R` onto the orthogonal group.
//! Between epochs the batch size doubles and the step count is divided by
//! four.
//!
//! Gaussian clouds add a refinement phase in which the batch matching also
//! scores variance vectors, so that items with similar dispersion are
//! preferred partners. The map itself is always driven by the means only;
//! variances are never rotated.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{
    orthogonality_defect, project_orthogonal, solve_procrustes, GaussianCloud, OrthogonalMap,
    PointCloud, ORTHOGONALITY_TOL,
};
use crate::transport::{coupling_to_matching, CostMatrix, Coupling, Matching, Sinkhorn};

/// How the map is initialised before the first stochastic step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    Identity,
    /// [`convex_init`] on the most frequent rows.
    Convex,
}

/// Which gradient drives the map update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMode {
    /// `−2 X_tᵀ P_t Y_t`; the curvature term vanishes after projection
    /// for orthogonal `R`.
    Cross,
    /// `2 X_tᵀ (X_t R − P_t Y_t)`, the exact gradient of the batch objective.
    Full,
}

/// Where the covariance-aware nested iterations run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NestedPlacement {
    /// After the full means-only schedule, as one refinement pass of
    /// `nested_iters × (final epoch steps)` steps.
    Refinement,
    /// `nested_iters` steps after every outer step.
    PerStep,
}

macro_rules! string_enum {
    ($ty:ty { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $name),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok(Self::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " '{}'"), other
                    ))),
                }
            }
        }
    };
}

string_enum!(InitMode { Identity => "identity", Convex => "convex" });
string_enum!(GradientMode { Cross => "cross", Full => "full" });
string_enum!(NestedPlacement { Refinement => "refinement", PerStep => "per-step" });

#[derive(Debug, Clone, PartialEq)]
pub struct AlignConfig {
    pub epochs: usize,
    pub initial_batch: usize,
    /// Steps in the first epoch.
    pub initial_iters: usize,
    /// Step size, applied to the gradient divided by the batch size.
    pub learning_rate: f64,
    pub sinkhorn_reg: f64,
    pub sinkhorn_max_iter: usize,
    pub sinkhorn_tol: f64,
    pub nested_iters: usize,
    /// Nested steps use `learning_rate * nested_lr_factor`.
    pub nested_lr_factor: f64,
    /// Weight of the variance similarity in nested matching.
    pub covariance_weight: f64,
    pub nested_placement: NestedPlacement,
    /// Batches are drawn from this many leading (most frequent) rows.
    pub train_top_k: usize,
    pub seed: u64,
    pub normalize_inputs: bool,
    pub init_mode: InitMode,
    pub convex_sample: usize,
    pub convex_iters: usize,
    pub gradient: GradientMode,
    /// Fail with a numerical error as soon as a projection leaves
    /// [`ORTHOGONALITY_TOL`].
    pub check_orthogonality: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            initial_batch: 500,
            initial_iters: 5000,
            learning_rate: 0.5,
            sinkhorn_reg: 0.05,
            sinkhorn_max_iter: crate::transport::DEFAULT_MAX_ITER,
            sinkhorn_tol: crate::transport::DEFAULT_TOL,
            nested_iters: 2,
            nested_lr_factor: 0.1,
            covariance_weight: 1.0,
            nested_placement: NestedPlacement::Refinement,
            train_top_k: 20_000,
            seed: 0,
            normalize_inputs: true,
            init_mode: InitMode::Convex,
            convex_sample: 1000,
            convex_iters: 10,
            gradient: GradientMode::Cross,
            check_orthogonality: false,
        }
    }
}

/// Batch size and step count of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochPlan {
    pub epoch: usize,
    pub batch: usize,
    pub iters: usize,
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("initial_batch", self.initial_batch),
            ("initial_iters", self.initial_iters),
            ("sinkhorn_max_iter", self.sinkhorn_max_iter),
            ("nested_iters", self.nested_iters),
            ("train_top_k", self.train_top_k),
            ("convex_sample", self.convex_sample),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        let scalars = [
            ("learning_rate", self.learning_rate),
            ("sinkhorn_reg", self.sinkhorn_reg),
            ("sinkhorn_tol", self.sinkhorn_tol),
            ("nested_lr_factor", self.nested_lr_factor),
            ("covariance_weight", self.covariance_weight),
        ];
        for (name, value) in scalars {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {value}")));
            }
        }
        if self.nested_lr_factor > 1.0 {
            return Err(Error::Config(format!(
                "nested_lr_factor must be <= 1, got {}",
                self.nested_lr_factor
            )));
        }
        if self.epochs > 30 {
            return Err(Error::Config(format!(
                "epochs = {} would overflow the doubling batch size",
                self.epochs
            )));
        }
        Ok(())
    }

    /// Per-epoch batch sizes and step counts: the batch doubles and the step
    /// count is floor-divided by four at every epoch boundary.
    pub fn schedule(&self) -> Vec<EpochPlan> {
        let mut iters = self.initial_iters;
        (0..self.epochs)
            .map(|epoch| {
                let plan = EpochPlan {
                    epoch,
                    batch: self.initial_batch << epoch,
                    iters,
                };
                iters /= 4;
                plan
            })
            .collect()
    }

    /// Flat `key = value` view used by run manifests.
    pub fn to_key_values(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("initial_batch", self.initial_batch.to_string()),
            ("initial_iters", self.initial_iters.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("sinkhorn_reg", self.sinkhorn_reg.to_string()),
            ("sinkhorn_max_iter", self.sinkhorn_max_iter.to_string()),
            ("sinkhorn_tol", self.sinkhorn_tol.to_string()),
            ("nested_iters", self.nested_iters.to_string()),
            ("nested_lr_factor", self.nested_lr_factor.to_string()),
            ("covariance_weight", self.covariance_weight.to_string()),
            ("nested_placement", self.nested_placement.to_string()),
            ("train_top_k", self.train_top_k.to_string()),
            ("seed", self.seed.to_string()),
            ("normalize_inputs", self.normalize_inputs.to_string()),
            ("init_mode", self.init_mode.to_string()),
            ("convex_sample", self.convex_sample.to_string()),
            ("convex_iters", self.convex_iters.to_string()),
            ("gradient", self.gradient.to_string()),
            ("check_orthogonality", self.check_orthogonality.to_string()),
        ]
    }

    /// Sets one field from its `key = value` form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse '{value}' for {key}")))
        }
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "initial_batch" => self.initial_batch = parse(key, value)?,
            "initial_iters" => self.initial_iters = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "sinkhorn_reg" => self.sinkhorn_reg = parse(key, value)?,
            "sinkhorn_max_iter" => self.sinkhorn_max_iter = parse(key, value)?,
            "sinkhorn_tol" => self.sinkhorn_tol = parse(key, value)?,
            "nested_iters" => self.nested_iters = parse(key, value)?,
            "nested_lr_factor" => self.nested_lr_factor = parse(key, value)?,
            "covariance_weight" => self.covariance_weight = parse(key, value)?,
            "nested_placement" => self.nested_placement = value.parse()?,
            "train_top_k" => self.train_top_k = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "normalize_inputs" => self.normalize_inputs = parse(key, value)?,
            "init_mode" => self.init_mode = value.parse()?,
            "convex_sample" => self.convex_sample = parse(key, value)?,
            "convex_iters" => self.convex_iters = parse(key, value)?,
            "gradient" => self.gradient = value.parse()?,
            "check_orthogonality" => self.check_orthogonality = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Matching on means only.
    Means,
    /// Matching on means and variances.
    Nested,
}

/// One stochastic step: the batch objective `‖X_t R − P_t Y_t‖²_F / b`
/// measured before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub step: usize,
    pub epoch: usize,
    pub phase: Phase,
    pub batch: usize,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct AlignResult {
    pub map: OrthogonalMap,
    pub trace: Vec<TracePoint>,
    /// The schedule the run followed.
    pub schedule: Vec<EpochPlan>,
    pub epochs_run: usize,
    pub final_batch: usize,
    /// Map after the means-only stage of a Gaussian refinement run.
    pub means_only_map: Option<OrthogonalMap>,
    /// Largest `‖RᵀR − I‖_F` seen after any projection.
    pub max_orthogonality_defect: f64,
}

/// Unsupervised alignment of two point clouds.
pub fn align_points(x: &PointCloud, y: &PointCloud, cfg: &AlignConfig) -> Result<AlignResult> {
    Run::new(x, y, None, cfg)?.execute(false)
}

/// Unsupervised alignment of two Gaussian clouds: a means-only stage
/// followed by nested steps whose matching also scores variances.
pub fn align_gaussian(
    gx: &GaussianCloud,
    gy: &GaussianCloud,
    cfg: &AlignConfig,
) -> Result<AlignResult> {
    Run::new(
        gx.means(),
        gy.means(),
        Some((gx.variances(), gy.variances())),
        cfg,
    )?
    .execute(true)
}

/// Centres the columns and scales so that the mean row norm is one.
/// Returns the scale that was divided out.
pub fn normalize_cloud(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let mean = m.row_mean();
    let mut centered = m.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let scale = mean_row_norm(&centered);
    if scale > 0.0 {
        centered /= scale;
        (centered, scale)
    } else {
        (centered, 1.0)
    }
}

fn mean_row_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|r| r.norm()).sum::<f64>() / m.nrows() as f64
}

fn unit_mean_row_norm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let s = mean_row_norm(m);
    if s > 0.0 {
        m / s
    } else {
        m.clone()
    }
}

/// `‖X R − Y‖²_F` for row-matched batches.
pub fn batch_objective(x: &DMatrix<f64>, r: &DMatrix<f64>, y_matched: &DMatrix<f64>) -> f64 {
    (x * r - y_matched).norm_squared()
}

/// Gradient of the batch objective in `R`, in the requested form.
pub fn batch_gradient(
    x: &DMatrix<f64>,
    r: &DMatrix<f64>,
    y_matched: &DMatrix<f64>,
    mode: GradientMode,
) -> DMatrix<f64> {
    match mode {
        GradientMode::Cross => x.tr_mul(y_matched) * -2.0,
        GradientMode::Full => x.tr_mul(&(x * r - y_matched)) * 2.0,
    }
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_INIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;

struct Run<'a> {
    cfg: &'a AlignConfig,
    x: DMatrix<f64>,
    y: DMatrix<f64>,
    /// Variances scaled to unit mean row norm.
    variances: Option<(DMatrix<f64>, DMatrix<f64>)>,
    top_x: usize,
    top_y: usize,
    rng: ChaCha8Rng,
    r: DMatrix<f64>,
    trace: Vec<TracePoint>,
    max_defect: f64,
}

impl<'a> Run<'a> {
    fn new(
        x: &PointCloud,
        y: &PointCloud,
        variances: Option<(&DMatrix<f64>, &DMatrix<f64>)>,
        cfg: &'a AlignConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if x.dim() != y.dim() {
            return Err(Error::InvalidInput(format!(
                "source dimension {} differs from target dimension {}",
                x.dim(),
                y.dim()
            )));
        }
        if let Some((vx, vy)) = variances {
            if vx.shape() != x.as_matrix().shape() || vy.shape() != y.as_matrix().shape() {
                return Err(Error::InvalidInput(
                    "variance matrices must have the shape of their means".into(),
                ));
            }
        }
        let top_x = x.nrows().min(cfg.train_top_k);
        let top_y = y.nrows().min(cfg.train_top_k);
        let available = top_x.min(top_y);
        for plan in cfg.schedule().iter().filter(|p| p.iters > 0) {
            if plan.batch > available {
                return Err(Error::Config(format!(
                    "epoch {} needs batches of {} rows but only {available} training rows \
                     are available (n = {}, m = {}, train_top_k = {})",
                    plan.epoch + 1,
                    plan.batch,
                    x.nrows(),
                    y.nrows(),
                    cfg.train_top_k
                )));
            }
        }
        let (xm, ym) = if cfg.normalize_inputs {
            (normalize_cloud(x.as_matrix()).0, normalize_cloud(y.as_matrix()).0)
        } else {
            (x.as_matrix().clone(), y.as_matrix().clone())
        };
        let variances = variances.map(|(vx, vy)| (unit_mean_row_norm(vx), unit_mean_row_norm(vy)));
        let d = x.dim();
        Ok(Self {
            cfg,
            x: xm,
            y: ym,
            variances,
            top_x,
            top_y,
            rng: rng_stream(cfg.seed, STREAM_TRAIN),
            r: DMatrix::identity(d, d),
            trace: Vec::new(),
            max_defect: 0.0,
        })
    }

    fn execute(mut self, gaussian: bool) -> Result<AlignResult> {
        let cfg = self.cfg;
        if cfg.init_mode == InitMode::Convex {
            let sample = cfg.convex_sample;
            let init = convex_init(
                &PointCloud::new(self.x.clone())?,
                &PointCloud::new(self.y.clone())?,
                sample,
                cfg.convex_iters,
                cfg.seed,
            )?;
            self.r = init.into_matrix();
        }

        let schedule = cfg.schedule();
        let per_step_nesting = gaussian && cfg.nested_placement == NestedPlacement::PerStep;
        let nested_lr = cfg.learning_rate * cfg.nested_lr_factor;
        let mut last = schedule[0];
        for plan in schedule.iter().filter(|p| p.iters > 0) {
            for _ in 0..plan.iters {
                self.step(plan, Phase::Means, cfg.learning_rate)?;
                if per_step_nesting {
                    for _ in 0..cfg.nested_iters {
                        self.step(plan, Phase::Nested, nested_lr)?;
                    }
                }
            }
            last = *plan;
        }

        let mut means_only_map = None;
        if gaussian && cfg.nested_placement == NestedPlacement::Refinement {
            means_only_map = Some(OrthogonalMap::new(self.r.clone())?);
            for _ in 0..cfg.nested_iters * last.iters {
                self.step(&last, Phase::Nested, nested_lr)?;
            }
        }

        Ok(AlignResult {
            map: OrthogonalMap::new(self.r)?,
            trace: self.trace,
            epochs_run: last.epoch + 1,
            final_batch: last.batch,
            schedule,
            means_only_map,
            max_orthogonality_defect: self.max_defect,
        })
    }

    fn step(&mut self, plan: &EpochPlan, phase: Phase, lr: f64) -> Result<()> {
        let b = plan.batch;
        let step = self.trace.len();
        let ix = index::sample(&mut self.rng, self.top_x, b).into_vec();
        let iy = index::sample(&mut self.rng, self.top_y, b).into_vec();
        let xt = self.x.select_rows(&ix);
        let yt = self.y.select_rows(&iy);
        let xr = &xt * &self.r;

        let mut similarity = &xr * yt.transpose();
        if phase == Phase::Nested {
            let (vx, vy) = self
                .variances
                .as_ref()
                .expect("nested steps only run with variances");
            let cx = vx.select_rows(&ix);
            let cy = vy.select_rows(&iy);
            similarity += (cx * cy.transpose()) * self.cfg.covariance_weight;
        }
        if similarity.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numerical(format!(
                "similarity matrix became non-finite at step {step}"
            )));
        }
        let solution = Sinkhorn::new(self.cfg.sinkhorn_reg)
            .max_iter(self.cfg.sinkhorn_max_iter)
            .tol(self.cfg.sinkhorn_tol)
            .solve(&CostMatrix::from_similarity(&similarity)?)?;
        let matching = coupling_to_matching(&solution.coupling)?;
        let y_matched = yt.select_rows(matching.target_of());

        let objective = (&xr - &y_matched).norm_squared() / b as f64;
        if !objective.is_finite() {
            return Err(Error::Numerical(format!("batch objective diverged at step {step}")));
        }
        let gradient = batch_gradient(&xt, &self.r, &y_matched, self.cfg.gradient);
        let updated = &self.r - gradient * (lr / b as f64);
        let projected = project_orthogonal(&updated)
            .map_err(|e| Error::Numerical(format!("projection failed at step {step}: {e}")))?;
        let defect = orthogonality_defect(projected.matrix());
        self.max_defect = self.max_defect.max(defect);
        if self.cfg.check_orthogonality && !(defect <= ORTHOGONALITY_TOL) {
            return Err(Error::Numerical(format!(
                "||RᵀR - I||_F = {defect:e} after projection at step {step}"
            )));
        }
        self.r = projected.into_matrix();
        self.trace.push(TracePoint {
            step,
            epoch: plan.epoch,
            phase,
            batch: b,
            objective,
        });
        Ok(())
    }
}

/// `(‖M_x R − P M_y‖²_F, ‖Σ_x − P Σ_y‖²_F)` with `P` the given matching.
pub fn objective(
    gx: &GaussianCloud,
    gy: &GaussianCloud,
    r: &OrthogonalMap,
    matching: &Matching,
) -> Result<(f64, f64)> {
    if matching.len() != gx.nrows() {
        return Err(Error::InvalidInput(format!(
            "matching covers {} rows but the source has {}",
            matching.len(),
            gx.nrows()
        )));
    }
    if gx.dim() != gy.dim() || r.dim() != gx.dim() {
        return Err(Error::InvalidInput("dimensions of clouds and map differ".into()));
    }
    if let Some(&bad) = matching.target_of().iter().find(|&&j| j >= gy.nrows()) {
        return Err(Error::InvalidInput(format!(
            "matching refers to target {bad}, but the target has {} rows",
            gy.nrows()
        )));
    }
    let xr = gx.means().as_matrix() * r.matrix();
    let ym = gy.means().as_matrix();
    let (vx, vy) = (gx.variances(), gy.variances());
    let mut mean_term = 0.0;
    let mut cov_term = 0.0;
    for (i, &j) in matching.target_of().iter().enumerate() {
        mean_term += (xr.row(i) - ym.row(j)).norm_squared();
        cov_term += (vx.row(i) - vy.row(j)).norm_squared();
    }
    Ok((mean_term, cov_term))
}

/// Quantiles kept from each sorted similarity row in the warm start.
const PROFILE_LEN: usize = 128;
/// Entropic regularisation for the Frank–Wolfe linear subproblems, relative
/// to a cost normalised to unit maximum.
const FW_REG: f64 = 0.01;
const FW_SINKHORN_MAX_ITER: usize = 300;
const FW_SINKHORN_TOL: f64 = 1e-5;

/// Initial map from a convex relaxation of the matching on the leading
/// `sample_size` rows of each cloud.
///
/// The matching is relaxed to couplings `P` and `‖K_X P − P K_Y‖²_F` is
/// minimised by Frank–Wolfe with step `2/(2+k)`, where `K` are the Gram
/// matrices of the samples. The linear subproblem of every iteration is an
/// entropic transport solved by Sinkhorn, and the step is the smaller of
/// `2/(2+k)` and the exact line minimiser. The returned map is the
/// Procrustes solution for the greedy hard matching of the final coupling.
///
/// For centred clouds the uniform coupling is itself a stationary point of
/// the relaxation, so the iterations start from the coupling of sorted
/// similarity profiles instead: each row's sorted inner products with its
/// own sample are invariant to rotating the cloud and to reordering it.
pub fn convex_init(
    x: &PointCloud,
    y: &PointCloud,
    sample_size: usize,
    fw_iters: usize,
    seed: u64,
) -> Result<OrthogonalMap> {
    if x.dim() != y.dim() {
        return Err(Error::InvalidInput("clouds have different dimensions".into()));
    }
    let available = x.nrows().min(y.nrows());
    if sample_size == 0 || sample_size > available {
        return Err(Error::Config(format!(
            "convex initialisation sample of {sample_size} rows exceeds the {available} \
             available"
        )));
    }
    let xs = x.as_matrix().rows(0, sample_size).into_owned();
    let mut ys = y.as_matrix().rows(0, sample_size).into_owned();
    let gram_norm = |m: &DMatrix<f64>| m.tr_mul(m).norm();
    let (nx, ny) = (gram_norm(&xs), gram_norm(&ys));
    if nx > 0.0 && ny > 0.0 {
        // Scale K_Y to the Frobenius norm of K_X.
        ys *= (nx / ny).sqrt();
    }

    let mut plan = profile_coupling(&xs, &ys, seed)?;
    for k in 1..=fw_iters {
        let residual = relaxation_residual(&xs, &ys, &plan);
        let grad = residual_gradient(&xs, &ys, &residual);
        let scale = grad.amax();
        if scale == 0.0 {
            break;
        }
        let vertex = Sinkhorn::new(FW_REG)
            .max_iter(FW_SINKHORN_MAX_ITER)
            .tol(FW_SINKHORN_TOL)
            .solve(&CostMatrix::new(grad / scale)?)?
            .coupling;
        let direction = vertex.plan() - &plan;
        // The objective is quadratic along the direction, so the exact line
        // minimiser caps the 2/(2+k) schedule and no step increases it.
        let change = relaxation_residual(&xs, &ys, &direction);
        let curvature = change.norm_squared();
        let exact = if curvature > 0.0 {
            (-residual.dot(&change) / curvature).max(0.0)
        } else {
            0.0
        };
        let gamma = exact.min(2.0 / (2.0 + k as f64));
        plan += direction * gamma;
    }

    let coupling = Coupling::new(
        plan,
        DVector::from_element(sample_size, 1.0 / sample_size as f64),
        DVector::from_element(sample_size, 1.0 / sample_size as f64),
    )?;
    let matching = coupling_to_matching(&coupling)?;
    let x_sample = x.head(sample_size);
    let y_sample = PointCloud::new(y.as_matrix().rows(0, sample_size).select_rows(matching.target_of()))?;
    solve_procrustes(&x_sample, &y_sample)
}

/// Value of `‖K_X P − P K_Y‖²_F` with `K = X Xᵀ`.
pub fn relaxation_objective(x: &DMatrix<f64>, y: &DMatrix<f64>, plan: &DMatrix<f64>) -> f64 {
    relaxation_residual(x, y, plan).norm_squared()
}

fn relaxation_residual(x: &DMatrix<f64>, y: &DMatrix<f64>, plan: &DMatrix<f64>) -> DMatrix<f64> {
    // K_X P = X (Xᵀ P), P K_Y = (P Y) Yᵀ: never forms the Gram matrices.
    x * x.tr_mul(plan) - (plan * y) * y.transpose()
}

/// `∇_P ‖K_X P − P K_Y‖²_F = 2 (K_X E − E K_Y)` with `E` the residual.
#[cfg(test)]
fn relaxation_gradient(x: &DMatrix<f64>, y: &DMatrix<f64>, plan: &DMatrix<f64>) -> DMatrix<f64> {
    residual_gradient(x, y, &relaxation_residual(x, y, plan))
}

fn residual_gradient(x: &DMatrix<f64>, y: &DMatrix<f64>, e: &DMatrix<f64>) -> DMatrix<f64> {
    (x * x.tr_mul(e) - (e * y) * y.transpose()) * 2.0
}

/// Sorted inner products of every row with its own cloud, sampled at
/// [`PROFILE_LEN`] evenly spaced ranks.
fn similarity_profiles(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let gram = m * m.transpose();
    let len = PROFILE_LEN.min(n);
    let ranks: Vec<usize> = (0..len)
        .map(|q| if len == 1 { 0 } else { q * (n - 1) / (len - 1) })
        .collect();
    let mut out = DMatrix::zeros(n, len);
    let mut buf = vec![0.0; n];
    for i in 0..n {
        // Gram is symmetric: column i is row i.
        buf.copy_from_slice(gram.column(i).as_slice());
        buf.sort_unstable_by(|a, b| b.total_cmp(a));
        for (q, &r) in ranks.iter().enumerate() {
            out[(i, q)] = buf[r];
        }
    }
    out
}

/// Entropic coupling of the similarity profiles. When every profile is the
/// same (degenerate clouds) a seeded random permutation is used instead.
fn profile_coupling(x: &DMatrix<f64>, y: &DMatrix<f64>, seed: u64) -> Result<DMatrix<f64>> {
    let px = similarity_profiles(x);
    let py = similarity_profiles(y);
    let sq_x = px.row_iter().map(|r| r.norm_squared()).collect::<Vec<_>>();
    let sq_y = py.row_iter().map(|r| r.norm_squared()).collect::<Vec<_>>();
    let mut dist = &px * py.transpose() * -2.0;
    for ((i, j), d) in dist.iter_mut().enumerate().map(|(k, d)| ((k % sq_x.len(), k / sq_x.len()), d)) {
        *d = (*d + sq_x[i] + sq_y[j]).max(0.0);
    }
    let scale = dist.amax();
    if scale == 0.0 {
        let n = x.nrows();
        let perm = index::sample(&mut rng_stream(seed, STREAM_INIT), n, n).into_vec();
        let mut plan = DMatrix::zeros(n, n);
        for (i, j) in perm.into_iter().enumerate() {
            plan[(i, j)] = 1.0 / n as f64;
        }
        return Ok(plan);
    }
    Ok(Sinkhorn::new(FW_REG)
        .max_iter(FW_SINKHORN_MAX_ITER)
        .tol(FW_SINKHORN_TOL)
        .solve(&CostMatrix::new(dist / scale)?)?
        .coupling
        .plan()
        .clone())
}
