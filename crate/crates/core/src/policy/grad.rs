use ndarray::Array2;

use super::{PolicyError, PolicyParams, PolicyView, Trajectory};
use crate::data::Narrative;
use crate::vocab::{Phase, TokenId, Vocab};

/// Dense gradient with respect to the effective weight matrix `W`.
///
/// Every gradient in the crate is first accumulated here and then chained
/// into the trainable factors, which is valid because `∂/∂A = G·Bᵀ` and
/// `∂/∂B = Aᵀ·G` are linear in `G`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightGrad(pub Array2<f64>);

impl WeightGrad {
    pub fn zeros(params: &PolicyParams) -> Self {
        WeightGrad(Array2::zeros((params.dims.vocab_size, params.dims.ctx_dim)))
    }

    /// Adds `weight · ∂ log p(token | prefix) / ∂W` for one step.
    #[allow(clippy::too_many_arguments)]
    pub fn add_token(
        &mut self,
        view: &PolicyView<'_>,
        narrative: &Narrative,
        prefix: &[TokenId],
        phase: Phase,
        token: TokenId,
        temperature: f64,
        weight: f64,
    ) -> Result<(), PolicyError> {
        if temperature <= 0.0 {
            return Err(PolicyError::Temperature(temperature));
        }
        let ctx = view.context(narrative, prefix, phase);
        let lp = view.phase_logprobs(&ctx, phase, temperature);
        let allowed = view.vocab().allowed(phase);
        for (k, &v) in allowed.iter().enumerate() {
            let indicator = if v == token { 1.0 } else { 0.0 };
            let coef = weight * (indicator - lp[k].exp()) / temperature;
            if coef == 0.0 {
                continue;
            }
            let mut row = self.0.row_mut(v.index());
            for &(i, x) in &ctx.entries {
                row[i] += coef * x;
            }
        }
        Ok(())
    }

    /// Adds `weight · ∂ log π(traj) / ∂W` over every token of the trajectory.
    pub fn add_trajectory(
        &mut self,
        view: &PolicyView<'_>,
        narrative: &Narrative,
        traj: &Trajectory,
        temperature: f64,
        weight: f64,
    ) -> Result<(), PolicyError> {
        for (pos, &tok) in traj.tokens.iter().enumerate() {
            self.add_token(view, narrative, &traj.tokens[..pos], traj.phase_at(pos), tok, temperature, weight)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaGrad {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

/// Gradient over the trainable parts of [`PolicyParams`]; frozen parts are `None`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamGrad {
    pub base: Option<Array2<f64>>,
    pub acc: Option<DeltaGrad>,
    pub tone: Option<DeltaGrad>,
}

impl ParamGrad {
    pub fn chain(params: &PolicyParams, g: &WeightGrad) -> Self {
        let delta = |d: &super::LowRankDelta, active: bool| {
            if active {
                DeltaGrad { a: g.0.dot(&d.b.t()), b: d.a.t().dot(&g.0) }
            } else {
                DeltaGrad { a: Array2::zeros(d.a.raw_dim()), b: Array2::zeros(d.b.raw_dim()) }
            }
        };
        ParamGrad {
            base: params.trainable.base.then(|| g.0.clone()),
            acc: params.trainable.acc.then(|| delta(&params.acc, params.active.acc)),
            tone: params.trainable.tone.then(|| delta(&params.tone, params.active.tone)),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_none() && self.acc.is_none() && self.tone.is_none()
    }

    pub fn scale(&mut self, s: f64) {
        self.for_each_mut(|m| *m *= s);
    }

    fn for_each_mut(&mut self, mut f: impl FnMut(&mut Array2<f64>)) {
        if let Some(b) = self.base.as_mut() {
            f(b);
        }
        for d in [self.acc.as_mut(), self.tone.as_mut()].into_iter().flatten() {
            f(&mut d.a);
            f(&mut d.b);
        }
    }

    /// Gradient ascent: `θ ← θ + lr·g` on every part present in `self`.
    pub fn apply(&self, params: &mut PolicyParams, lr: f64) {
        if let Some(g) = &self.base {
            params.base.scaled_add(lr, g);
        }
        if let Some(g) = &self.acc {
            params.acc.a.scaled_add(lr, &g.a);
            params.acc.b.scaled_add(lr, &g.b);
        }
        if let Some(g) = &self.tone {
            params.tone.a.scaled_add(lr, &g.a);
            params.tone.b.scaled_add(lr, &g.b);
        }
    }

    /// Concatenation base, acc.a, acc.b, tone.a, tone.b (present parts only, row-major).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(b) = &self.base {
            out.extend(b.iter());
        }
        for d in [&self.acc, &self.tone].into_iter().flatten() {
            out.extend(d.a.iter());
            out.extend(d.b.iter());
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Gradient of the trajectory log-probability over the trainable deltas.
pub fn grad_logprob(
    params: &PolicyParams,
    vocab: &Vocab,
    narrative: &Narrative,
    traj: &Trajectory,
    temperature: f64,
) -> Result<ParamGrad, PolicyError> {
    let mut g = WeightGrad::zeros(params);
    if !(params.trainable.base || params.trainable.acc || params.trainable.tone) {
        return Ok(ParamGrad::default());
    }
    g.add_trajectory(&params.view(vocab)?, narrative, traj, temperature, 1.0)?;
    Ok(ParamGrad::chain(params, &g))
}
