//! Unsupervised adaptation of a source appearance model to a target image
//! set. The source posterior (mean and row covariance) becomes the prior of
//! the target appearance update.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::gibbs::{
    self, draw_loadings, run_chains, AppearanceUpdate, ImageChain, SufficientStats, SweepConfig,
};
use crate::linalg;
use crate::model::{
    free_factor_name, AppearanceModel, FactorState, FeatureBag, Hyperparams, SupervisionLabels,
};
use crate::parallel::Schedule;
use crate::representation::PatchMarginals;
use crate::rng::{self, StreamRng};

/// Extends a source model to `k_target` factors. Added factors get zero
/// mean and an independent σ_A²·I prior block.
pub fn extend_prior(
    source: &AppearanceModel,
    k_target: usize,
    hp: &Hyperparams,
) -> Result<AppearanceModel> {
    let k = source.k();
    if k_target < k {
        return Err(Error::Config(format!(
            "k_target {k_target} is smaller than the source model ({k} factors)"
        )));
    }
    if k_target > hp.k_max {
        return Err(Error::Config(format!(
            "k_target {k_target} exceeds k_max {}",
            hp.k_max
        )));
    }
    if k_target == k {
        return Ok(source.clone());
    }
    let extra = k_target - k;
    let free_cov = DMatrix::identity(extra, extra) * (hp.sigma_a * hp.sigma_a);
    let mut factor_names = source.factor_names.clone();
    factor_names.extend((k..k_target).map(free_factor_name));
    Ok(AppearanceModel {
        mean: source.mean.clone().resize_vertically(k_target, 0.0),
        covariance: linalg::block_diag(&source.covariance, &free_cov),
        factor_names,
        hyperparams: *hp,
        draw: None,
    })
}

/// Gaussian prior over the loadings with precomputed precision.
struct InformativePrior {
    mean: DMatrix<f64>,
    covariance: DMatrix<f64>,
    precision: DMatrix<f64>,
}

impl InformativePrior {
    fn new(prior: &AppearanceModel) -> Result<Self> {
        prior.check()?;
        Ok(InformativePrior {
            mean: prior.mean.clone(),
            covariance: prior.covariance.clone(),
            precision: linalg::spd_inverse(&prior.covariance, "prior covariance")?,
        })
    }

    /// Σ_T = σ_X²(Z̃ᵀZ̃ + σ_X²Σ_S⁻¹)⁻¹, μ_T = Σ_T(σ_X⁻²Z̃ᵀX̃ + Σ_S⁻¹μ_S).
    ///
    /// With no target evidence the prior is returned unchanged.
    fn posterior(
        &self,
        stats: &SufficientStats,
        hp: &Hyperparams,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if stats.is_empty() {
            return Ok((self.mean.clone(), self.covariance.clone()));
        }
        let var_x = hp.sigma_x * hp.sigma_x;
        let system = &stats.ztz + &self.precision * var_x;
        let chol = system
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("target posterior precision"))?;
        // μ_T = (Z̃ᵀZ̃ + σ_X²P)⁻¹(Z̃ᵀX̃ + σ_X²·P·μ_S)
        let rhs = &stats.ztx + (&self.precision * &self.mean) * var_x;
        let mean = chol.solve(&rhs);
        let covariance = linalg::symmetrize(chol.inverse() * var_x);
        Ok((mean, covariance))
    }

    /// Posterior of the rows from `frozen` on, with the first `frozen` rows
    /// held at their prior mean. The held rows keep their prior covariance.
    fn conditional_posterior(
        &self,
        stats: &SufficientStats,
        frozen: usize,
        hp: &Hyperparams,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let k = self.mean.nrows();
        let free = k - frozen;
        if stats.is_empty() || free == 0 {
            return Ok((self.mean.clone(), self.covariance.clone()));
        }
        let var_x = hp.sigma_x * hp.sigma_x;
        let p_ff = self.precision.view((frozen, frozen), (free, free));
        let system = stats.ztz.view((frozen, frozen), (free, free)) + p_ff * var_x;
        let chol = system
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("target posterior precision"))?;
        let held = self.mean.rows(0, frozen);
        let rhs = stats.ztx.rows(frozen, free) - stats.ztz.view((frozen, 0), (free, frozen)) * held
            + (p_ff * self.mean.rows(frozen, free)) * var_x;
        let mut mean = self.mean.clone();
        mean.rows_mut(frozen, free).copy_from(&chol.solve(&rhs));
        let covariance = linalg::block_diag(
            &self.covariance.view((0, 0), (frozen, frozen)).into_owned(),
            &linalg::symmetrize(chol.inverse() * var_x),
        );
        Ok((mean, covariance))
    }
}

/// How the transferred factors are treated during target adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Adaptation {
    /// Every factor is updated under the transferred prior.
    #[default]
    Full,
    /// Transferred factors keep the source means (direct transfer); only the
    /// added free factors are learned on the target.
    FreezeSource,
}

/// Target appearance posterior given current target states, with `prior`
/// (typically the extended source posterior) as the prior.
pub fn adapt_appearance(
    states: &[FactorState],
    bags: &[FeatureBag],
    prior: &AppearanceModel,
    hp: &Hyperparams,
) -> Result<AppearanceModel> {
    if states.len() != bags.len() {
        return Err(Error::Dimension("states and bags differ in length".into()));
    }
    let k = prior.k();
    let dim = prior.dim();
    for (s, b) in states.iter().zip(bags) {
        if s.n_patches() != b.n_patches() || s.k_active() > k {
            return Err(Error::Dimension(format!(
                "{}: state {}x{} does not fit bag with {} patches and {k} factors",
                b.image_id,
                s.n_patches(),
                s.k_active(),
                b.n_patches()
            )));
        }
        if b.n_patches() > 0 && b.dim() != dim {
            return Err(Error::Dimension(format!(
                "{}: feature dim {} != prior dim {dim}",
                b.image_id,
                b.dim()
            )));
        }
    }
    let prior_stats = InformativePrior::new(prior)?;
    let sref: Vec<&FactorState> = states.iter().collect();
    let bref: Vec<&FeatureBag> = bags.iter().collect();
    let stats = SufficientStats::collect(&sref, &bref, k, dim, Schedule::Serial);
    let (mean, covariance) = prior_stats.posterior(&stats, hp)?;
    Ok(AppearanceModel {
        mean,
        covariance,
        factor_names: prior.factor_names.clone(),
        hyperparams: *hp,
        draw: None,
    })
}

struct TransferUpdate {
    prior: InformativePrior,
    /// Leading rows held at the prior mean.
    frozen: usize,
    hp: Hyperparams,
    schedule: Schedule,
}

impl AppearanceUpdate for TransferUpdate {
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
        let (mean, covariance) = if self.frozen == 0 {
            self.prior.posterior(&stats, &self.hp)?
        } else {
            self.prior.conditional_posterior(&stats, self.frozen, &self.hp)?
        };
        let draw = if draw {
            let mut d = draw_loadings(&mean, &covariance, rng)?;
            d.rows_mut(0, self.frozen).copy_from(&mean.rows(0, self.frozen));
            Some(d)
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

/// Adapted model plus per-image inference results on the target set.
#[derive(Debug, Clone)]
pub struct TargetFit {
    pub model: AppearanceModel,
    pub states: Vec<FactorState>,
    /// Mean activation over the trailing `retain_samples` sweeps.
    pub marginals: Vec<PatchMarginals>,
    pub trace: Vec<(usize, f64)>,
}

/// Runs unsupervised inference on the target images, alternating Gibbs
/// sweeps with the transfer appearance update.
///
/// The source is extended to `k_target` factors first. With
/// `cfg.update_appearance == false` no factor is ever updated. Passing a
/// zero-factor source trains every factor from scratch on the target.
pub fn adapt_target(
    target: &[FeatureBag],
    source: &AppearanceModel,
    k_target: usize,
    hp: &Hyperparams,
    cfg: &SweepConfig,
) -> Result<TargetFit> {
    adapt_target_with(target, source, k_target, hp, cfg, Adaptation::Full)
}

/// [`adapt_target`] with an explicit treatment of the transferred factors.
pub fn adapt_target_with(
    target: &[FeatureBag],
    source: &AppearanceModel,
    k_target: usize,
    hp: &Hyperparams,
    cfg: &SweepConfig,
    adaptation: Adaptation,
) -> Result<TargetFit> {
    hp.validate()?;
    cfg.validate()?;
    if target.is_empty() {
        return Err(Error::Empty("no target images"));
    }
    if let Some(b) = target
        .iter()
        .find(|b| b.n_patches() > 0 && b.dim() != source.dim())
    {
        return Err(Error::Dimension(format!(
            "{}: target feature dim {} != source dim {}",
            b.image_id,
            b.dim(),
            source.dim()
        )));
    }
    let prior = extend_prior(source, k_target, hp)?;
    let updater = TransferUpdate {
        prior: InformativePrior::new(&prior)?,
        frozen: match adaptation {
            Adaptation::Full => 0,
            Adaptation::FreezeSource => source.k(),
        },
        hp: *hp,
        schedule: cfg.schedule,
    };

    let labels = SupervisionLabels::none();
    let mut chains = target
        .iter()
        .map(|bag| {
            let mut rng = rng::image_stream(hp.rng_seed, "target", 0, &bag.image_id);
            let state =
                gibbs::initial_state(bag.n_patches(), k_target, &labels, hp, cfg, &mut rng)?;
            ImageChain::new(bag, labels.clone(), state, rng)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = rng::stream(hp.rng_seed, &["target-appearance"]);
    let run = run_chains(&mut chains, prior, hp, cfg, &updater, None, &mut rng)?;
    let mut model = run.model;
    model.draw = None;
    let (states, marginals) = chains
        .into_iter()
        .map(|c| {
            let m = c.marginals.expect("retain_samples >= 1");
            (c.state, m)
        })
        .unzip();
    Ok(TargetFit {
        model,
        states,
        marginals,
        trace: run.trace,
    })
}
