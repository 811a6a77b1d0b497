//! Auxiliary-phase inference: single-site Gibbs updates of the factor
//! indicators under the MRF-IBP prior, supervision clamping, new-factor
//! birth and the Gaussian posterior over factor appearance.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{
    free_factor_name, log_joint, Annotation, AppearanceModel, Dataset, FactorState, FeatureBag,
    Hyperparams, SupervisionLabels,
};
use crate::parallel::{self, Schedule};
use crate::representation::PatchMarginals;
use crate::rng::{self, StreamRng};

/// Sampler schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Total number of full sweeps.
    pub iterations: usize,
    /// Sweeps between appearance updates.
    pub appearance_resample_period: usize,
    pub birth_enabled: bool,
    /// Largest number of new factors proposed at one patch.
    pub birth_truncation: usize,
    /// Draw `A` from its posterior during burn-in instead of using the mean.
    pub sample_appearance: bool,
    pub burn_in: usize,
    /// Trailing sweeps averaged into patch marginals.
    pub retain_samples: usize,
    /// When false the appearance model is never updated (frozen loadings).
    pub update_appearance: bool,
    /// Free factors created at initialization, after the supervised block.
    pub initial_free_factors: usize,
    /// Background block `[start, end)` inside the supervised factors; with a
    /// foreground mask it is clamped off on foreground patches and every other
    /// supervised factor is clamped off on background patches.
    pub background: Option<[usize; 2]>,
    /// Evaluate the log-joint every this many sweeps (0 disables).
    pub trace_every: usize,
    pub schedule: Schedule,
}

impl SweepConfig {
    /// Auxiliary training defaults (2000 sweeps).
    pub fn auxiliary() -> Self {
        SweepConfig {
            iterations: 2000,
            appearance_resample_period: 1,
            birth_enabled: true,
            birth_truncation: 3,
            sample_appearance: true,
            burn_in: 1000,
            retain_samples: 20,
            update_appearance: true,
            initial_free_factors: 0,
            background: None,
            trace_every: 0,
            schedule: Schedule::Parallel,
        }
    }

    /// Target adaptation defaults (100 sweeps, no births).
    pub fn target() -> Self {
        SweepConfig {
            iterations: 100,
            birth_enabled: false,
            burn_in: 80,
            retain_samples: 20,
            ..SweepConfig::auxiliary()
        }
    }

    /// Same schedule with `iterations` sweeps; burn-in and retention are
    /// rescaled to keep their proportions.
    pub fn with_iterations(mut self, iterations: usize) -> Self {
        if self.iterations > 0 && iterations > 0 {
            let scale = |v: usize| (v * iterations) / self.iterations;
            self.burn_in = scale(self.burn_in).min(iterations - 1);
            self.retain_samples = scale(self.retain_samples)
                .max(1)
                .min(iterations - self.burn_in);
        }
        self.iterations = iterations;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("empty training schedule (iterations = 0)".into()));
        }
        if self.appearance_resample_period == 0 {
            return Err(Error::Config("appearance_resample_period must be > 0".into()));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::Config("burn_in must be < iterations".into()));
        }
        if self.retain_samples == 0 || self.retain_samples > self.iterations - self.burn_in {
            return Err(Error::Config(
                "retain_samples must be in 1..=iterations-burn_in".into(),
            ));
        }
        if let Some([s, e]) = self.background {
            if s > e {
                return Err(Error::Config("background block start > end".into()));
            }
        }
        Ok(())
    }
}

/// Probability of `z_jk = 1` from the unnormalized log weights of both states.
fn two_point(ln_w1: f64, ln_w0: f64) -> f64 {
    1.0 / (1.0 + (ln_w0 - ln_w1).exp())
}

/// Conditional of one cell given everything else.
///
/// `m_minus` excludes the cell; `agree1`/`agree0` count neighbors whose
/// value is 1 / 0; `delta_sq` is ‖r₁‖² − ‖r₀‖² for the residuals with the
/// cell on and off.
#[inline]
fn conditional(
    n: usize,
    m_minus: usize,
    agree1: usize,
    agree0: usize,
    delta_sq: f64,
    hp: &Hyperparams,
) -> f64 {
    if m_minus == 0 {
        return 0.0;
    }
    if m_minus >= n {
        return 1.0;
    }
    let var_x = hp.sigma_x * hp.sigma_x;
    let ln_w1 = (m_minus as f64).ln() + hp.beta * agree1 as f64 - delta_sq / (2.0 * var_x);
    let ln_w0 = ((n - m_minus) as f64).ln() + hp.beta * agree0 as f64;
    two_point(ln_w1, ln_w0)
}

/// Probability that factor `k` is on at patch `j` given all other cells,
/// under the urn prior, the Potts coupling and the Gaussian likelihood.
/// Exactly zero when no other patch of the image uses the factor.
pub fn factor_conditional(
    state: &FactorState,
    bag: &FeatureBag,
    appearance: &AppearanceModel,
    j: usize,
    k: usize,
    hp: &Hyperparams,
) -> Result<f64> {
    let a = appearance.loadings();
    check_alignment(state, bag, a)?;
    if j >= state.n_patches() {
        return Err(Error::Index {
            what: "patch",
            index: j,
            limit: state.n_patches(),
        });
    }
    if k >= state.k_active() {
        return Err(Error::Index {
            what: "factor",
            index: k,
            limit: state.k_active(),
        });
    }
    let neighbors = bag.neighbors()?;
    let m_minus = state.active_count()[k] - state.get(j, k) as usize;
    let agree1 = neighbors[j].iter().filter(|&&o| state.get(o, k)).count();
    let agree0 = neighbors[j].len() - agree1;

    let row = state.row(j);
    let x = &bag.patches[j].feature;
    let mut delta_sq = 0.0;
    for d in 0..a.ncols() {
        let r0 = x[d]
            - (0..a.nrows())
                .filter(|&f| f != k && row[f] != 0)
                .map(|f| a[(f, d)])
                .sum::<f64>();
        let akd = a[(k, d)];
        delta_sq += akd * akd - 2.0 * r0 * akd;
    }
    Ok(conditional(
        state.n_patches(),
        m_minus,
        agree1,
        agree0,
        delta_sq,
        hp,
    ))
}

fn check_alignment(state: &FactorState, bag: &FeatureBag, a: &DMatrix<f64>) -> Result<()> {
    if state.n_patches() != bag.n_patches() {
        return Err(Error::Dimension(format!(
            "{}: state has {} rows, bag has {} patches",
            bag.image_id,
            state.n_patches(),
            bag.n_patches()
        )));
    }
    if state.k_active() != a.nrows() {
        return Err(Error::Dimension(format!(
            "{}: state has {} factors, appearance has {}",
            bag.image_id,
            state.k_active(),
            a.nrows()
        )));
    }
    if bag.n_patches() > 0 && bag.dim() != a.ncols() {
        return Err(Error::Dimension(format!(
            "{}: feature dim {} != appearance dim {}",
            bag.image_id,
            bag.dim(),
            a.ncols()
        )));
    }
    Ok(())
}

/// Replaces the unsupervised conditional with the supervised one for
/// annotated factors: strong labels fix the cell, weak labels multiply the
/// "on" weight by the image label.
pub fn apply_supervision(
    raw: f64,
    labels: &SupervisionLabels,
    j: usize,
    k: usize,
) -> Result<f64> {
    if !labels.is_annotated(k) {
        return Ok(raw);
    }
    match &labels.annotation {
        Annotation::None => Ok(raw),
        Annotation::Weak { weak } => match weak.get(k) {
            Some(true) => Ok(raw),
            Some(false) => Ok(0.0),
            None => Ok(raw),
        },
        Annotation::Strong { strong } => {
            let row = strong.get(j).ok_or(Error::Index {
                what: "patch",
                index: j,
                limit: strong.len(),
            })?;
            Ok(match row.get(k) {
                Some(&l) => l as u8 as f64,
                None => raw,
            })
        }
    }
}

fn strongly_labeled(labels: &SupervisionLabels, j: usize, k: usize) -> Option<bool> {
    match &labels.annotation {
        Annotation::Strong { strong } if labels.is_annotated(k) => {
            strong.get(j).and_then(|row| row.get(k)).copied()
        }
        _ => None,
    }
}

/// Full clamping pipeline for one cell: supervision, then the
/// foreground/background split.
fn supervised_probability(
    raw: f64,
    labels: &SupervisionLabels,
    j: usize,
    k: usize,
    hp: &Hyperparams,
    cfg: &SweepConfig,
) -> Result<f64> {
    let p = apply_supervision(raw, labels, j, k)?;
    if strongly_labeled(labels, j, k).is_some() {
        return Ok(p);
    }
    if let (Some(fg), Some([start, end])) = (&labels.foreground, cfg.background) {
        let in_block = (start..end).contains(&k);
        let is_fg = fg.get(j).copied().unwrap_or(true);
        if (is_fg && in_block) || (!is_fg && !in_block && k < hp.k_supervised) {
            return Ok(0.0);
        }
    }
    Ok(p)
}

fn ln_normal_isotropic(sq_norm: f64, dim: usize, var: f64) -> f64 {
    -0.5 * dim as f64 * ((2.0 * std::f64::consts::PI).ln() + var.ln()) - sq_norm / (2.0 * var)
}

fn ln_poisson(n: usize, rate: f64) -> f64 {
    if rate == 0.0 {
        return if n == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    n as f64 * rate.ln() - rate - crate::model::ln_factorial(n)
}

/// Samples how many new factors to create at a patch given its residual.
///
/// Candidates `n = 0..=max_new` are weighted by a Poisson(α/N) prior times the
/// marginal likelihood of the residual with `n` fresh factors drawn from
/// N(0, σ_A²·I), i.e. N(r; 0, (σ_X² + n·σ_A²)·I).
pub(crate) fn sample_birth_count<R: Rng + ?Sized>(
    residual: &[f64],
    n_patches: usize,
    max_new: usize,
    hp: &Hyperparams,
    rng: &mut R,
) -> usize {
    let rate = hp.alpha / n_patches.max(1) as f64;
    if max_new == 0 || rate <= 0.0 {
        return 0;
    }
    let sq: f64 = residual.iter().map(|v| v * v).sum();
    let var_x = hp.sigma_x * hp.sigma_x;
    let var_a = hp.sigma_a * hp.sigma_a;
    let ln_w: Vec<f64> = (0..=max_new)
        .map(|n| {
            ln_poisson(n, rate) + ln_normal_isotropic(sq, residual.len(), var_x + n as f64 * var_a)
        })
        .collect();
    let max = ln_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = ln_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (n, wn) in w.iter().enumerate() {
        if u < *wn {
            return n;
        }
        u -= wn;
    }
    max_new
}

pub(crate) fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Draws the loadings of `n` factors that are active only at one patch, from
/// their posterior given that patch's residual (prior N(0, σ_A²·I) per row).
fn sample_new_rows<R: Rng + ?Sized>(
    residual: &[f64],
    n: usize,
    hp: &Hyperparams,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    let var_x = hp.sigma_x * hp.sigma_x;
    let var_a = hp.sigma_a * hp.sigma_a;
    let gain = var_a / (var_x + n as f64 * var_a);
    let mut rows = vec![vec![0.0; residual.len()]; n];
    for (d, &r) in residual.iter().enumerate() {
        // Conditioning a joint prior draw on the observed residual.
        let prior: Vec<f64> = (0..n)
            .map(|_| hp.sigma_a * std_normal(rng))
            .collect();
        let noise = hp.sigma_x * std_normal(rng);
        let innovation = r - prior.iter().sum::<f64>() - noise;
        for (i, row) in rows.iter_mut().enumerate() {
            row[d] = prior[i] + gain * innovation;
        }
    }
    rows
}

/// Loadings as row vectors; the sampler appends rows for factors born
/// during a sweep.
#[derive(Debug, Clone)]
pub(crate) struct Loadings {
    rows: Vec<Vec<f64>>,
}

impl Loadings {
    pub(crate) fn from_matrix(a: &DMatrix<f64>) -> Self {
        Loadings {
            rows: (0..a.nrows())
                .map(|i| a.row(i).iter().copied().collect())
                .collect(),
        }
    }

    fn residual(&self, x: &[f64], row: &[u8], out: &mut [f64]) {
        out.copy_from_slice(x);
        for (f, &on) in row.iter().enumerate() {
            if on != 0 {
                for (o, a) in out.iter_mut().zip(&self.rows[f]) {
                    *o -= a;
                }
            }
        }
    }
}

/// Proposes new factors at patch `j`, appending the columns to `state` (on
/// at `j` only) and their loadings to `loadings`. Returns the number born.
///
/// Births are capped so that the state never exceeds `k_limit` factors.
#[allow(clippy::too_many_arguments)]
pub(crate) fn birth_at<R: Rng + ?Sized>(
    state: &mut FactorState,
    loadings: &mut Loadings,
    x: &[f64],
    j: usize,
    k_limit: usize,
    hp: &Hyperparams,
    cfg: &SweepConfig,
    rng: &mut R,
) -> usize {
    let room = k_limit.saturating_sub(state.k_active());
    let max_new = cfg.birth_truncation.min(room);
    if max_new == 0 {
        if cfg.birth_truncation > 0 && room == 0 {
            log::trace!("birth suppressed at patch {j}: factor cap {k_limit} reached");
        }
        return 0;
    }
    let mut residual = vec![0.0; x.len()];
    loadings.residual(x, state.row(j), &mut residual);
    let n = sample_birth_count(&residual, state.n_patches(), max_new, hp, rng);
    if n == 0 {
        return 0;
    }
    let first = state.k_active();
    state.add_columns(n);
    for f in first..first + n {
        state.set(j, f, true);
    }
    loadings.rows.extend(sample_new_rows(&residual, n, hp, rng));
    n
}

/// Public form of [`birth_at`]: returns the updated state and appearance
/// model with newborn factors appended (prior covariance σ_A² on the new
/// diagonal entries, generated names). Does nothing unless births are
/// enabled and the model is below `hp.k_max`.
pub fn birth_new_factors<R: Rng + ?Sized>(
    state: &FactorState,
    bag: &FeatureBag,
    appearance: &AppearanceModel,
    j: usize,
    hp: &Hyperparams,
    cfg: &SweepConfig,
    rng: &mut R,
) -> Result<(FactorState, AppearanceModel)> {
    check_alignment(state, bag, appearance.loadings())?;
    if j >= bag.n_patches() {
        return Err(Error::Index {
            what: "patch",
            index: j,
            limit: bag.n_patches(),
        });
    }
    let mut state = state.clone();
    if !cfg.birth_enabled {
        return Ok((state, appearance.clone()));
    }
    let mut loadings = Loadings::from_matrix(appearance.loadings());
    let born = birth_at(
        &mut state,
        &mut loadings,
        &bag.patches[j].feature,
        j,
        hp.k_max,
        hp,
        cfg,
        rng,
    );
    if born > 0 {
        log::debug!("{}: {born} new factor(s) at patch {j}", bag.image_id);
    }
    let new_rows = &loadings.rows[appearance.k()..];
    Ok((state, append_factors(appearance, new_rows, hp)))
}

/// Appends factors with the given loadings to a model.
pub(crate) fn append_factors(
    model: &AppearanceModel,
    rows: &[Vec<f64>],
    hp: &Hyperparams,
) -> AppearanceModel {
    if rows.is_empty() {
        return model.clone();
    }
    let (k0, dim, n) = (model.k(), model.dim(), rows.len());
    let grow = |m: &DMatrix<f64>| {
        let mut out = m.clone().resize_vertically(k0 + n, 0.0);
        for (i, r) in rows.iter().enumerate() {
            for d in 0..dim {
                out[(k0 + i, d)] = r[d];
            }
        }
        out
    };
    let mut covariance = model.covariance.clone().resize(k0 + n, k0 + n, 0.0);
    for i in k0..k0 + n {
        covariance[(i, i)] = hp.sigma_a * hp.sigma_a;
    }
    let mut factor_names = model.factor_names.clone();
    factor_names.extend((k0..k0 + n).map(free_factor_name));
    AppearanceModel {
        mean: grow(&model.mean),
        covariance,
        factor_names,
        hyperparams: model.hyperparams,
        draw: model.draw.as_ref().map(grow),
    }
}

/// One image with everything a sweep needs.
pub(crate) struct ImageChain<'a> {
    pub bag: &'a FeatureBag,
    pub neighbors: Vec<Vec<usize>>,
    pub labels: SupervisionLabels,
    pub state: FactorState,
    pub rng: StreamRng,
    /// Loadings of factors born in the current sweep.
    pub born: Vec<Vec<f64>>,
    pub marginals: Option<PatchMarginals>,
    failure: Option<Error>,
}

impl<'a> ImageChain<'a> {
    pub(crate) fn new(
        bag: &'a FeatureBag,
        labels: SupervisionLabels,
        state: FactorState,
        rng: StreamRng,
    ) -> Result<Self> {
        Ok(ImageChain {
            neighbors: bag.neighbors()?,
            bag,
            labels,
            state,
            rng,
            born: Vec::new(),
            marginals: None,
            failure: None,
        })
    }
}

/// One pass over an image: every cell in patch-major, factor-minor order,
/// followed by a birth proposal at each patch when enabled. Returns the
/// loadings of the factors born during the pass.
pub(crate) fn sweep_chain(
    chain: &mut ImageChain<'_>,
    global: &Loadings,
    k_limit: usize,
    hp: &Hyperparams,
    cfg: &SweepConfig,
) -> Result<Vec<Vec<f64>>> {
    let k_global = global.rows.len();
    let mut local = global.clone();
    let state = &mut chain.state;
    let n = state.n_patches();
    let dim = chain.bag.dim();
    let mut residual = vec![0.0; dim];

    for j in 0..n {
        let x = &chain.bag.patches[j].feature;
        local.residual(x, state.row(j), &mut residual);
        for k in 0..state.k_active() {
            let current = state.get(j, k);
            let a_k = &local.rows[k];
            if current {
                for (r, a) in residual.iter_mut().zip(a_k) {
                    *r += a;
                }
            }
            let p = if let Some(l) = strongly_labeled(&chain.labels, j, k) {
                l as u8 as f64
            } else {
                let m_minus = state.active_count()[k] - current as usize;
                let agree1 = chain.neighbors[j].iter().filter(|&&o| state.get(o, k)).count();
                let agree0 = chain.neighbors[j].len() - agree1;
                let delta_sq: f64 = residual
                    .iter()
                    .zip(a_k)
                    .map(|(r, a)| a * a - 2.0 * r * a)
                    .sum();
                let raw = conditional(n, m_minus, agree1, agree0, delta_sq, hp);
                supervised_probability(raw, &chain.labels, j, k, hp, cfg)?
            };
            let u: f64 = chain.rng.random();
            let value = u < p;
            state.set(j, k, value);
            if value {
                for (r, a) in residual.iter_mut().zip(a_k) {
                    *r -= a;
                }
            }
        }
        if cfg.birth_enabled {
            birth_at(state, &mut local, x, j, k_limit, hp, cfg, &mut chain.rng);
        }
    }
    Ok(local.rows.split_off(k_global))
}

/// One full Gibbs sweep over an image (see [`SweepConfig`]); newborn factors
/// are appended to `state` and their loadings returned.
pub fn sweep_image(
    state: &mut FactorState,
    bag: &FeatureBag,
    appearance: &AppearanceModel,
    labels: &SupervisionLabels,
    hp: &Hyperparams,
    cfg: &SweepConfig,
    rng: &mut StreamRng,
) -> Result<Vec<Vec<f64>>> {
    check_alignment(state, bag, appearance.loadings())?;
    labels.validate(hp.k_supervised, bag.n_patches())?;
    let mut chain = ImageChain::new(bag, labels.clone(), state.clone(), rng.clone())?;
    let born = sweep_chain(
        &mut chain,
        &Loadings::from_matrix(appearance.loadings()),
        hp.k_max,
        hp,
        cfg,
    )?;
    *state = chain.state;
    *rng = chain.rng;
    Ok(born)
}

/// Z̃ᵀZ̃ and Z̃ᵀX̃ accumulated over images.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub ztz: DMatrix<f64>,
    pub ztx: DMatrix<f64>,
}

impl SufficientStats {
    pub fn zeros(k: usize, dim: usize) -> Self {
        SufficientStats {
            ztz: DMatrix::zeros(k, k),
            ztx: DMatrix::zeros(k, dim),
        }
    }

    /// Statistics of one image, with the state zero-padded to `k` factors.
    pub fn of_image(state: &FactorState, bag: &FeatureBag, k: usize, dim: usize) -> Self {
        let mut s = SufficientStats::zeros(k, dim);
        let mut active = Vec::with_capacity(k);
        for (j, patch) in bag.patches.iter().enumerate() {
            active.clear();
            active.extend(
                state
                    .row(j)
                    .iter()
                    .enumerate()
                    .filter(|(_, &c)| c != 0)
                    .map(|(f, _)| f),
            );
            for &a in &active {
                for &b in &active {
                    s.ztz[(a, b)] += 1.0;
                }
                for d in 0..dim {
                    s.ztx[(a, d)] += patch.feature[d];
                }
            }
        }
        s
    }

    /// Sums per-image statistics in image order.
    pub fn collect(
        states: &[&FactorState],
        bags: &[&FeatureBag],
        k: usize,
        dim: usize,
        schedule: Schedule,
    ) -> Self {
        let parts = parallel::map_indexed(schedule, states.len(), |i| {
            SufficientStats::of_image(states[i], bags[i], k, dim)
        });
        let mut total = SufficientStats::zeros(k, dim);
        for p in parts {
            total.ztz += p.ztz;
            total.ztx += p.ztx;
        }
        total
    }

    pub fn is_empty(&self) -> bool {
        self.ztz.iter().all(|v| *v == 0.0)
    }
}

/// Posterior mean and covariance of the loadings under a zero-mean
/// isotropic prior: μ = (Z̃ᵀZ̃ + σ_X²/σ_A²·I)⁻¹Z̃ᵀX̃, Σ = σ_X²(Z̃ᵀZ̃ + σ_X²/σ_A²·I)⁻¹.
pub fn flat_prior_posterior(
    stats: &SufficientStats,
    hp: &Hyperparams,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let k = stats.ztz.nrows();
    let system = &stats.ztz + DMatrix::identity(k, k) * hp.ridge();
    let chol = system
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("appearance posterior precision"))?;
    let mean = chol.solve(&stats.ztx);
    let covariance = linalg::symmetrize(chol.inverse() * (hp.sigma_x * hp.sigma_x));
    Ok((mean, covariance))
}

/// Draws loadings `μ + L·E` with `LLᵀ = Σ` and standard normal `E`.
pub(crate) fn draw_loadings<R: Rng + ?Sized>(
    mean: &DMatrix<f64>,
    covariance: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let l = covariance
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("appearance covariance"))?
        .l();
    let e = DMatrix::from_fn(mean.nrows(), mean.ncols(), |_, _| std_normal(rng));
    Ok(mean + l * e)
}

fn max_k(states: &[&FactorState]) -> usize {
    states.iter().map(|s| s.k_active()).max().unwrap_or(0)
}

fn common_dim(bags: &[&FeatureBag]) -> Result<usize> {
    let mut dim = None;
    for b in bags.iter().filter(|b| b.n_patches() > 0) {
        match dim {
            None => dim = Some(b.dim()),
            Some(d) if d != b.dim() => {
                return Err(Error::Dimension(format!(
                    "{}: feature dim {} != {d}",
                    b.image_id,
                    b.dim()
                )))
            }
            _ => {}
        }
    }
    Ok(dim.unwrap_or(0))
}

/// Appearance posterior given the current factor states of every image
/// (states with fewer factors are zero-padded). With
/// `cfg.sample_appearance` the returned model also carries a posterior draw
/// used as loadings.
pub fn sample_appearance(
    states: &[FactorState],
    bags: &[FeatureBag],
    hp: &Hyperparams,
    cfg: &SweepConfig,
    rng: &mut StreamRng,
) -> Result<AppearanceModel> {
    if states.is_empty() {
        return Err(Error::Empty("no images for the appearance update"));
    }
    if states.len() != bags.len() {
        return Err(Error::Dimension("states and bags differ in length".into()));
    }
    let states: Vec<&FactorState> = states.iter().collect();
    let bags: Vec<&FeatureBag> = bags.iter().collect();
    let dim = common_dim(&bags)?;
    let k = max_k(&states);
    for (s, b) in states.iter().zip(&bags) {
        if s.n_patches() != b.n_patches() {
            return Err(Error::Dimension(format!(
                "{}: state rows != patch count",
                b.image_id
            )));
        }
    }
    let stats = SufficientStats::collect(&states, &bags, k, dim, cfg.schedule);
    let (mean, covariance) = flat_prior_posterior(&stats, hp)?;
    let draw = if cfg.sample_appearance {
        Some(draw_loadings(&mean, &covariance, rng)?)
    } else {
        None
    };
    Ok(AppearanceModel {
        factor_names: (0..k).map(free_factor_name).collect(),
        mean,
        covariance,
        hyperparams: *hp,
        draw,
    })
}

/// How the appearance model is refreshed between sweeps.
pub(crate) trait AppearanceUpdate {
    fn update(
        &self,
        chains: &[ImageChain<'_>],
        current: &AppearanceModel,
        draw: bool,
        rng: &mut StreamRng,
    ) -> Result<AppearanceModel>;
}

/// Appearance update under the flat zero-mean prior.
pub(crate) struct FlatPrior {
    pub hp: Hyperparams,
    pub schedule: Schedule,
}

impl AppearanceUpdate for FlatPrior {
    fn update(
        &self,
        chains: &[ImageChain<'_>],
        current: &AppearanceModel,
        draw: bool,
        rng: &mut StreamRng,
    ) -> Result<AppearanceModel> {
        let states: Vec<&FactorState> = chains.iter().map(|c| &c.state).collect();
        let bags: Vec<&FeatureBag> = chains.iter().map(|c| c.bag).collect();
        let stats =
            SufficientStats::collect(&states, &bags, current.k(), current.dim(), self.schedule);
        let (mean, covariance) = flat_prior_posterior(&stats, &self.hp)?;
        let draw = if draw {
            Some(draw_loadings(&mean, &covariance, rng)?)
        } else {
            None
        };
        Ok(AppearanceModel {
            mean,
            covariance,
            draw,
            factor_names: current.factor_names.clone(),
            hyperparams: self.hp,
        })
    }
}

/// Output of [`run_chains`].
pub(crate) struct ChainRun {
    pub model: AppearanceModel,
    pub trace: Vec<(usize, f64)>,
}

/// Merges the factors born in each image into the global model, in image
/// order, dropping births beyond `k_max`.
fn merge_births(
    chains: &mut [ImageChain<'_>],
    model: &AppearanceModel,
    hp: &Hyperparams,
) -> AppearanceModel {
    let k_global = model.k();
    let total: usize = chains.iter().map(|c| c.born.len()).sum();
    if total == 0 {
        return model.clone();
    }
    let room = hp.k_max.saturating_sub(k_global);
    let mut offset = k_global;
    let mut accepted_rows = Vec::new();
    let mut placements = Vec::with_capacity(chains.len());
    for c in chains.iter_mut() {
        let take = c.born.len().min(room - (offset - k_global));
        if take < c.born.len() {
            log::debug!(
                "{}: dropping {} births beyond k_max={}",
                c.bag.image_id,
                c.born.len() - take,
                hp.k_max
            );
        }
        placements.push((offset, take));
        accepted_rows.extend(c.born.drain(..).take(take));
        offset += take;
    }
    let k_new = offset;
    for (c, (start, take)) in chains.iter_mut().zip(placements) {
        let mut keep: Vec<(usize, usize)> = (0..k_global).map(|f| (f, f)).collect();
        keep.extend((0..take).map(|i| (k_global + i, start + i)));
        c.state = place_columns(&c.state, k_new, &keep);
        if let Some(m) = c.marginals.as_mut() {
            m.resize_factors(k_new);
        }
    }
    append_factors(model, &accepted_rows, hp)
}

/// New state with `k_new` columns where column `src` moves to `dst` for each
/// pair; unlisted destinations are zero.
fn place_columns(state: &FactorState, k_new: usize, moves: &[(usize, usize)]) -> FactorState {
    let mut out = FactorState::zeros(state.n_patches(), k_new);
    for j in 0..state.n_patches() {
        for &(src, dst) in moves {
            if state.get(j, src) {
                out.set(j, dst, true);
            }
        }
    }
    out
}

/// Removes factors at or after `first_free` that no image uses.
fn prune_unused(chains: &mut [ImageChain<'_>], model: &AppearanceModel, first_free: usize) -> AppearanceModel {
    let k = model.k();
    let mut used = vec![false; k];
    for c in chains.iter() {
        for (f, &m) in c.state.active_count().iter().enumerate() {
            used[f] |= m > 0;
        }
    }
    let keep: Vec<usize> = (0..k).filter(|&f| f < first_free || used[f]).collect();
    if keep.len() == k {
        return model.clone();
    }
    for c in chains.iter_mut() {
        c.state.select_columns(&keep);
        if let Some(m) = c.marginals.as_mut() {
            m.select_factors(&keep);
        }
    }
    let pick_rows = |m: &DMatrix<f64>| m.select_rows(keep.iter());
    let mut factor_names: Vec<String> = keep.iter().map(|&f| model.factor_names[f].clone()).collect();
    for (i, name) in factor_names.iter_mut().enumerate().skip(first_free) {
        *name = free_factor_name(i);
    }
    AppearanceModel {
        mean: pick_rows(&model.mean),
        covariance: model.covariance.select_rows(keep.iter()).select_columns(keep.iter()),
        factor_names,
        hyperparams: model.hyperparams,
        draw: model.draw.as_ref().map(pick_rows),
    }
}

/// Runs `cfg.iterations` sweeps over all chains, interleaving appearance
/// updates. Sweeps of distinct images run under `cfg.schedule`; births are
/// merged and the appearance refreshed between sweeps, so the result does
/// not depend on the schedule.
pub(crate) fn run_chains(
    chains: &mut [ImageChain<'_>],
    mut model: AppearanceModel,
    hp: &Hyperparams,
    cfg: &SweepConfig,
    updater: &dyn AppearanceUpdate,
    prune_from: Option<usize>,
    rng: &mut StreamRng,
) -> Result<ChainRun> {
    let mut trace = Vec::new();
    let retain_from = cfg.iterations - cfg.retain_samples;
    for sweep in 0..cfg.iterations {
        let global = Loadings::from_matrix(model.loadings());
        let k_limit = hp.k_max;
        parallel::for_each_mut(cfg.schedule, chains, |_, chain| {
            match sweep_chain(chain, &global, k_limit, hp, cfg) {
                Ok(born) => chain.born = born,
                Err(e) => chain.failure = Some(e),
            }
        });
        if let Some(e) = chains.iter_mut().find_map(|c| c.failure.take()) {
            return Err(e);
        }

        model = merge_births(chains, &model, hp);
        if let Some(first_free) = prune_from {
            model = prune_unused(chains, &model, first_free);
        }
        let last = sweep + 1 == cfg.iterations;
        if cfg.update_appearance && ((sweep + 1) % cfg.appearance_resample_period == 0 || last) {
            let draw = cfg.sample_appearance && sweep < cfg.burn_in && !last;
            model = updater.update(chains, &model, draw, rng)?;
        }
        if sweep >= retain_from {
            for c in chains.iter_mut() {
                c.marginals
                    .get_or_insert_with(|| PatchMarginals::zeros(c.state.n_patches(), c.state.k_active()))
                    .accumulate(&c.state);
            }
        }
        if cfg.trace_every > 0 && ((sweep + 1) % cfg.trace_every == 0 || last) {
            let bags: Vec<FeatureBag> = chains.iter().map(|c| c.bag.clone()).collect();
            let states: Vec<FactorState> = chains.iter().map(|c| c.state.clone()).collect();
            let lj = log_joint(&bags, &states, &model, hp)?;
            log::info!("sweep {}: log-joint {lj:.4}", sweep + 1);
            trace.push((sweep + 1, lj));
        }
    }
    Ok(ChainRun { model, trace })
}

/// Result of auxiliary training.
#[derive(Debug, Clone)]
pub struct AuxiliaryFit {
    pub model: AppearanceModel,
    /// Final states, grouped by dataset.
    pub states: Vec<Vec<FactorState>>,
    /// Supervised vocabulary (first `k_supervised` factor names).
    pub vocabulary: Vec<String>,
    /// `(sweep, log-joint)` pairs when tracing is enabled.
    pub trace: Vec<(usize, f64)>,
}

/// Union of the datasets' attribute names in order of first appearance.
pub fn merged_vocabulary(datasets: &[Dataset]) -> Vec<String> {
    let mut vocab: Vec<String> = Vec::new();
    for ds in datasets {
        for a in &ds.attributes {
            if !vocab.contains(a) {
                vocab.push(a.clone());
            }
        }
    }
    vocab
}

/// Maps a dataset's labels onto the global vocabulary. Supervised factors the
/// dataset does not name become unannotated for its images.
fn align_labels(
    labels: &SupervisionLabels,
    local: &[String],
    vocab: &[String],
) -> Result<SupervisionLabels> {
    let index: Vec<usize> = local
        .iter()
        .map(|a| vocab.iter().position(|v| v == a).expect("vocabulary is a union"))
        .collect();
    let k = vocab.len();
    let remap = |v: &[bool]| {
        let mut out = vec![false; k];
        for (i, &g) in index.iter().enumerate() {
            out[g] = v[i];
        }
        out
    };
    let annotation = match &labels.annotation {
        Annotation::None => Annotation::None,
        Annotation::Weak { weak } => Annotation::Weak { weak: remap(weak) },
        Annotation::Strong { strong } => Annotation::Strong {
            strong: strong.iter().map(|r| remap(r)).collect(),
        },
    };
    let local_mask = labels.annotated.clone().unwrap_or_else(|| vec![true; local.len()]);
    let annotated = remap(&local_mask);
    Ok(SupervisionLabels {
        annotation,
        annotated: if annotated.iter().all(|&a| a) {
            None
        } else {
            Some(annotated)
        },
        foreground: labels.foreground.clone(),
    })
}

/// Random initial state: each cell on with probability 0.5 after clamping.
pub(crate) fn initial_state(
    n_patches: usize,
    k: usize,
    labels: &SupervisionLabels,
    hp: &Hyperparams,
    cfg: &SweepConfig,
    rng: &mut StreamRng,
) -> Result<FactorState> {
    let mut state = FactorState::zeros(n_patches, k);
    for j in 0..n_patches {
        for f in 0..k {
            let p = supervised_probability(0.5, labels, j, f, hp, cfg)?;
            let u: f64 = rng.random();
            state.set(j, f, u < p);
        }
    }
    Ok(state)
}

/// Learns factor appearance on annotated source datasets (strong, weak or
/// mixed supervision).
pub fn train_auxiliary(
    datasets: &[Dataset],
    hp: &Hyperparams,
    cfg: &SweepConfig,
) -> Result<AuxiliaryFit> {
    hp.validate()?;
    cfg.validate()?;
    if datasets.iter().all(|d| d.items.is_empty()) {
        return Err(Error::Empty("no auxiliary images"));
    }
    let vocabulary = merged_vocabulary(datasets);
    if vocabulary.len() != hp.k_supervised {
        return Err(Error::Vocabulary(format!(
            "datasets name {} attributes {:?}, k_supervised is {}",
            vocabulary.len(),
            vocabulary,
            hp.k_supervised
        )));
    }
    let all_bags: Vec<&FeatureBag> = datasets
        .iter()
        .flat_map(|d| d.items.iter().map(|it| &it.bag))
        .collect();
    let dim = common_dim(&all_bags)?;
    let k0 = hp.k_supervised + cfg.initial_free_factors;
    if k0 > hp.k_max {
        return Err(Error::Config(format!(
            "{k0} initial factors exceed k_max {}",
            hp.k_max
        )));
    }

    let mut chains = Vec::with_capacity(all_bags.len());
    let mut sizes = Vec::with_capacity(datasets.len());
    for (di, ds) in datasets.iter().enumerate() {
        sizes.push(ds.items.len());
        for item in &ds.items {
            item.labels.validate(ds.attributes.len(), item.bag.n_patches())?;
            let labels = align_labels(&item.labels, &ds.attributes, &vocabulary)?;
            let mut rng = rng::image_stream(hp.rng_seed, "auxiliary", di, &item.bag.image_id);
            let state = initial_state(item.bag.n_patches(), k0, &labels, hp, cfg, &mut rng)?;
            chains.push(ImageChain::new(&item.bag, labels, state, rng)?);
        }
    }

    let updater = FlatPrior {
        hp: *hp,
        schedule: cfg.schedule,
    };
    let mut rng = rng::stream(hp.rng_seed, &["auxiliary-appearance"]);
    let init = AppearanceModel::uninformative(k0, dim, &vocabulary, *hp);
    let init = updater.update(&chains, &init, cfg.sample_appearance && cfg.burn_in > 0, &mut rng)?;
    let run = run_chains(
        &mut chains,
        init,
        hp,
        cfg,
        &updater,
        Some(hp.k_supervised),
        &mut rng,
    )?;

    let mut states = Vec::with_capacity(datasets.len());
    let mut it = chains.into_iter();
    for n in sizes {
        states.push(it.by_ref().take(n).map(|c| c.state).collect());
    }
    Ok(AuxiliaryFit {
        model: run.model,
        states,
        vocabulary,
        trace: run.trace,
    })
}

/// Unsupervised inference of factor states for new images with the
/// appearance held fixed. Returns final states and trailing marginals.
pub fn infer_states(
    bags: &[FeatureBag],
    model: &AppearanceModel,
    hp: &Hyperparams,
    cfg: &SweepConfig,
) -> Result<Vec<(FactorState, PatchMarginals)>> {
    cfg.validate()?;
    let dim = common_dim(&bags.iter().collect::<Vec<_>>())?;
    if !bags.is_empty() && dim != model.dim() {
        return Err(Error::Dimension(format!(
            "feature dim {dim} != model dim {}",
            model.dim()
        )));
    }
    let cfg = SweepConfig {
        update_appearance: false,
        birth_enabled: false,
        ..*cfg
    };
    let labels = SupervisionLabels::none();
    let mut chains = bags
        .iter()
        .map(|bag| {
            let mut rng = rng::image_stream(hp.rng_seed, "infer", 0, &bag.image_id);
            let state = initial_state(bag.n_patches(), model.k(), &labels, hp, &cfg, &mut rng)?;
            ImageChain::new(bag, labels.clone(), state, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let updater = FlatPrior {
        hp: *hp,
        schedule: cfg.schedule,
    };
    let mut rng = rng::stream(hp.rng_seed, &["infer-appearance"]);
    run_chains(&mut chains, model.clone(), hp, &cfg, &updater, None, &mut rng)?;
    Ok(chains
        .into_iter()
        .map(|c| {
            let m = c.marginals.expect("retain_samples >= 1");
            (c.state, m)
        })
        .collect())
}
