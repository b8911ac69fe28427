//! The toy autoregressive policy.
//!
//! Next-token logits are `W·ctx` where `ctx` concatenates a bag of the
//! narrative's tokens, a bag of the last few generated tokens and a one-hot
//! phase indicator. The effective matrix is the base plus two low-rank
//! adapters:
//!
//! ```text
//! W = W₀ + [acc active]·A_acc·B_acc + [tone active]·A_tone·B_tone
//! ```
//!
//! Generation runs Reasoning → Explanation → Prediction. Each phase samples
//! from a softmax restricted to the tokens that phase may emit, so the
//! prediction segment is always a single APPROVE or DENY.

mod checkpoint;
mod grad;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Decision, Narrative};
use crate::vocab::{Phase, TokenId, Vocab, APPROVE, DENY, END_EXPLAIN, END_REASON};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Provenance, CHECKPOINT_VERSION};
pub use grad::{grad_logprob, DeltaGrad, ParamGrad, WeightGrad};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy expects vocabulary of {expected} tokens (hash {expected_hash}), got {got} (hash {got_hash})")]
    VocabMismatch { expected: usize, expected_hash: String, got: usize, got_hash: String },
    #[error("token {0} is outside the vocabulary")]
    UnknownToken(u16),
    #[error("malformed trajectory: {0}")]
    Trajectory(String),
    #[error("gradients need a positive temperature, got {0}")]
    Temperature(f64),
    #[error("invalid caps: {0}")]
    Caps(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Hard ceiling on a whole trajectory.
pub const MAX_GENERATION: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Caps {
    pub reasoning: usize,
    pub explanation: usize,
}

impl Default for Caps {
    fn default() -> Self {
        Caps { reasoning: 32, explanation: 24 }
    }
}

impl Caps {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.reasoning == 0 || self.explanation == 0 {
            return Err(PolicyError::Caps("segment caps must be positive".into()));
        }
        if self.reasoning + self.explanation + 1 > MAX_GENERATION {
            return Err(PolicyError::Caps(format!("total length exceeds {MAX_GENERATION}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub feature_dims: usize,
    pub vocab_size: usize,
    pub ctx_dim: usize,
    pub rank: usize,
    pub recency_window: usize,
}

impl PolicyDims {
    pub fn new(vocab: &Vocab, rank: usize, recency_window: usize) -> Self {
        PolicyDims {
            feature_dims: vocab.feature_dims(),
            vocab_size: vocab.len(),
            ctx_dim: 2 * vocab.len() + Phase::ALL.len(),
            rank,
            recency_window,
        }
    }
}

/// Low-rank additive delta `A·B`, `A` is vocab × rank and `B` rank × ctx.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankDelta {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

impl LowRankDelta {
    pub fn zeros(dims: &PolicyDims) -> Self {
        LowRankDelta { a: Array2::zeros((dims.vocab_size, dims.rank)), b: Array2::zeros((dims.rank, dims.ctx_dim)) }
    }

    pub fn product(&self) -> Array2<f64> {
        self.a.dot(&self.b)
    }

    pub fn is_zero(&self) -> bool {
        self.a.iter().chain(self.b.iter()).all(|&v| v == 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AdapterFlags {
    pub acc: bool,
    pub tone: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrainableFlags {
    pub base: bool,
    pub acc: bool,
    pub tone: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub dims: PolicyDims,
    pub vocab_hash: String,
    pub base: Array2<f64>,
    pub acc: LowRankDelta,
    pub tone: LowRankDelta,
    pub active: AdapterFlags,
    pub trainable: TrainableFlags,
}

fn gaussian(rows: usize, cols: usize, scale: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, scale).expect("scale must be finite and non-negative");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(&mut rng))
}

impl PolicyParams {
    /// Untrained policy: small Gaussian base weights, both adapters zero and
    /// inactive, only the base trainable.
    pub fn new_raw(vocab: &Vocab, rank: usize, recency_window: usize, init_scale: f64, seed: u64) -> Self {
        let dims = PolicyDims::new(vocab, rank, recency_window);
        PolicyParams {
            base: gaussian(dims.vocab_size, dims.ctx_dim, init_scale, seed),
            acc: LowRankDelta::zeros(&dims),
            tone: LowRankDelta::zeros(&dims),
            dims,
            vocab_hash: vocab.hash().to_string(),
            active: AdapterFlags::default(),
            trainable: TrainableFlags { base: true, acc: false, tone: false },
        }
    }

    /// Starts the ACC adapter: `A` Gaussian, `B` zero, so the effective
    /// weights are unchanged. Freezes the base.
    pub fn attach_acc(&mut self, init_scale: f64, seed: u64) {
        self.acc.a = gaussian(self.dims.vocab_size, self.dims.rank, init_scale, seed);
        self.acc.b.fill(0.0);
        self.active.acc = true;
        self.trainable = TrainableFlags { base: false, acc: true, tone: false };
    }

    /// Starts the TONE adapter with ACC kept active but frozen.
    pub fn attach_tone(&mut self, init_scale: f64, seed: u64) {
        self.tone.a = gaussian(self.dims.vocab_size, self.dims.rank, init_scale, seed);
        self.tone.b.fill(0.0);
        self.active.tone = true;
        self.trainable = TrainableFlags { base: false, acc: false, tone: true };
    }

    pub fn effective_weights(&self) -> Array2<f64> {
        let mut w = self.base.clone();
        if self.active.acc {
            w += &self.acc.product();
        }
        if self.active.tone {
            w += &self.tone.product();
        }
        w
    }

    /// Every trainable coordinate, in the order of [`ParamGrad::flatten`].
    pub fn trainable_coords_mut(&mut self) -> Vec<&mut f64> {
        let mut out: Vec<&mut f64> = Vec::new();
        if self.trainable.base {
            out.extend(self.base.iter_mut());
        }
        if self.trainable.acc {
            out.extend(self.acc.a.iter_mut());
            out.extend(self.acc.b.iter_mut());
        }
        if self.trainable.tone {
            out.extend(self.tone.a.iter_mut());
            out.extend(self.tone.b.iter_mut());
        }
        out
    }

    pub fn check_vocab(&self, vocab: &Vocab) -> Result<(), PolicyError> {
        if vocab.len() != self.dims.vocab_size || vocab.hash() != self.vocab_hash {
            return Err(PolicyError::VocabMismatch {
                expected: self.dims.vocab_size,
                expected_hash: self.vocab_hash.clone(),
                got: vocab.len(),
                got_hash: vocab.hash().to_string(),
            });
        }
        Ok(())
    }

    /// Freezes parameters and precomputes the effective weights for decoding.
    pub fn view<'v>(&self, vocab: &'v Vocab) -> Result<PolicyView<'v>, PolicyError> {
        self.check_vocab(vocab)?;
        Ok(PolicyView { vocab, weights: self.effective_weights(), recency: self.dims.recency_window })
    }
}

/// Sparse context vector: sorted `(index, value)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    pub entries: Vec<(usize, f64)>,
    pub dim: usize,
}

impl Context {
    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for &(i, x) in &self.entries {
            v[i] = x;
        }
        v
    }
}

/// Builds the context for the next token: narrative bag, bag of the last
/// `recency` tokens of `prefix`, and the phase one-hot.
pub fn context_features(
    vocab_size: usize,
    narrative: &[TokenId],
    prefix: &[TokenId],
    phase: Phase,
    recency: usize,
) -> Context {
    let recent = &prefix[prefix.len().saturating_sub(recency)..];
    let mut idx: Vec<usize> =
        narrative.iter().map(|t| t.index()).chain(recent.iter().map(|t| vocab_size + t.index())).collect();
    idx.sort_unstable();
    let mut entries: Vec<(usize, f64)> = Vec::with_capacity(idx.len() + 1);
    for i in idx {
        match entries.last_mut() {
            Some((j, c)) if *j == i => *c += 1.0,
            _ => entries.push((i, 1.0)),
        }
    }
    entries.push((2 * vocab_size + phase.index(), 1.0));
    Context { entries, dim: 2 * vocab_size + Phase::ALL.len() }
}

/// Log-softmax of `logits / temperature`. Temperature 0 gives a one-hot at
/// the first maximum (log-probabilities 0 and −∞).
pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = i;
            }
        }
        return (0..logits.len()).map(|i| if i == best { 0.0 } else { f64::NEG_INFINITY }).collect();
    }
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    let m = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + scaled.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
    scaled.iter().map(|s| s - lse).collect()
}

/// Full-vocabulary next-token distribution, with no phase restriction.
pub fn next_token_dist(weights: &Array2<f64>, ctx: &Context, temperature: f64) -> Vec<f64> {
    let logits: Vec<f64> = (0..weights.nrows()).map(|v| row_dot(weights, v, ctx)).collect();
    log_softmax(&logits, temperature).into_iter().map(f64::exp).collect()
}

fn row_dot(weights: &Array2<f64>, row: usize, ctx: &Context) -> f64 {
    let r = weights.row(row);
    ctx.entries.iter().map(|&(i, x)| r[i] * x).sum()
}

/// Generated tokens with the reasoning / explanation / prediction boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub tokens: Vec<TokenId>,
    pub token_logprobs: Vec<f64>,
    /// End (exclusive) of the reasoning and of the explanation segment.
    pub segment_bounds: [usize; 2],
}

impl Trajectory {
    pub fn reasoning(&self) -> &[TokenId] {
        &self.tokens[..self.segment_bounds[0]]
    }

    /// Explanation segment, including END_EXPLAIN when it was emitted.
    pub fn explanation(&self) -> &[TokenId] {
        &self.tokens[self.segment_bounds[0]..self.segment_bounds[1]]
    }

    pub fn prediction_token(&self) -> TokenId {
        self.tokens[self.segment_bounds[1]]
    }

    pub fn prediction(&self) -> Decision {
        if self.prediction_token() == APPROVE {
            Decision::Approve
        } else {
            Decision::Deny
        }
    }

    pub fn logprob(&self) -> f64 {
        self.token_logprobs.iter().sum()
    }

    pub fn phase_at(&self, position: usize) -> Phase {
        if position < self.segment_bounds[0] {
            Phase::Reasoning
        } else if position < self.segment_bounds[1] {
            Phase::Explanation
        } else {
            Phase::Prediction
        }
    }

    /// Checks segment order, the single-token prediction and the caps.
    pub fn validate(&self, caps: &Caps) -> Result<(), PolicyError> {
        let [r, e] = self.segment_bounds;
        let bad = |m: &str| Err(PolicyError::Trajectory(m.to_string()));
        if !(r <= e && e + 1 == self.tokens.len()) {
            return bad("segment bounds do not leave exactly one prediction token");
        }
        if self.token_logprobs.len() != self.tokens.len() {
            return bad("log-probability count differs from token count");
        }
        if r == 0 || r > caps.reasoning || e - r == 0 || e - r > caps.explanation {
            return bad("segment length outside caps");
        }
        if !matches!(self.prediction_token(), APPROVE | DENY) {
            return bad("prediction is not APPROVE or DENY");
        }
        let ends_early = |seg: &[TokenId], end: TokenId| seg[..seg.len() - 1].contains(&end);
        if ends_early(self.reasoning(), END_REASON) || ends_early(self.explanation(), END_EXPLAIN) {
            return bad("segment continues after its end token");
        }
        Ok(())
    }
}

/// Per-segment log-probabilities; `total` is their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryScore {
    pub segments: [f64; 3],
    pub total: f64,
}

impl TrajectoryScore {
    /// True when some token had zero probability under the scoring policy.
    pub fn is_impossible(&self) -> bool {
        self.total == f64::NEG_INFINITY
    }
}

/// A parameter snapshot with its effective weights materialized.
#[derive(Debug, Clone)]
pub struct PolicyView<'v> {
    vocab: &'v Vocab,
    weights: Array2<f64>,
    recency: usize,
}

impl<'v> PolicyView<'v> {
    pub fn vocab(&self) -> &'v Vocab {
        self.vocab
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn context(&self, narrative: &Narrative, prefix: &[TokenId], phase: Phase) -> Context {
        context_features(self.vocab.len(), &narrative.tokens, prefix, phase, self.recency)
    }

    /// Log-probabilities over the tokens allowed in `phase`, in the order of
    /// [`Vocab::allowed`].
    pub fn phase_logprobs(&self, ctx: &Context, phase: Phase, temperature: f64) -> Vec<f64> {
        let logits: Vec<f64> =
            self.vocab.allowed(phase).iter().map(|t| row_dot(&self.weights, t.index(), ctx)).collect();
        log_softmax(&logits, temperature)
    }

    fn step_logprob(&self, narrative: &Narrative, prefix: &[TokenId], phase: Phase, token: TokenId, t: f64) -> f64 {
        let ctx = self.context(narrative, prefix, phase);
        let lp = self.phase_logprobs(&ctx, phase, t);
        match self.vocab.allowed(phase).binary_search(&token) {
            Ok(k) => lp[k],
            Err(_) => f64::NEG_INFINITY,
        }
    }

    pub fn sample(&self, narrative: &Narrative, temperature: f64, caps: &Caps, rng: &mut impl Rng) -> Trajectory {
        let mut tokens = Vec::with_capacity(caps.reasoning + caps.explanation + 1);
        let mut token_logprobs = Vec::with_capacity(tokens.capacity());
        let mut segment_bounds = [0; 2];
        let plan = [
            (Phase::Reasoning, caps.reasoning, Some(END_REASON)),
            (Phase::Explanation, caps.explanation, Some(END_EXPLAIN)),
            (Phase::Prediction, 1, None),
        ];
        for (k, (phase, cap, end)) in plan.into_iter().enumerate() {
            let allowed = self.vocab.allowed(phase);
            for _ in 0..cap {
                let ctx = self.context(narrative, &tokens, phase);
                let lp = self.phase_logprobs(&ctx, phase, temperature);
                let pick = if temperature == 0.0 {
                    lp.iter().position(|&l| l == 0.0).expect("one-hot has a mode")
                } else {
                    draw(&lp, rng)
                };
                tokens.push(allowed[pick]);
                token_logprobs.push(lp[pick]);
                if Some(allowed[pick]) == end {
                    break;
                }
            }
            if k < 2 {
                segment_bounds[k] = tokens.len();
            }
        }
        Trajectory { tokens, token_logprobs, segment_bounds }
    }

    pub fn sample_seeded(&self, narrative: &Narrative, temperature: f64, caps: &Caps, seed: u64) -> Trajectory {
        self.sample(narrative, temperature, caps, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn greedy(&self, narrative: &Narrative, caps: &Caps) -> Trajectory {
        // greedy decoding never touches the rng
        self.sample_seeded(narrative, 0.0, caps, 0)
    }

    /// Scores `traj` token by token under this snapshot.
    pub fn score(
        &self,
        narrative: &Narrative,
        traj: &Trajectory,
        temperature: f64,
    ) -> Result<TrajectoryScore, PolicyError> {
        if let Some(t) = traj.tokens.iter().find(|t| !self.vocab.contains(**t)) {
            return Err(PolicyError::UnknownToken(t.0));
        }
        let logprobs = self.token_logprobs(narrative, traj, temperature);
        let mut segments = [0.0; 3];
        for (pos, lp) in logprobs.iter().enumerate() {
            segments[traj.phase_at(pos).index()] += lp;
        }
        let total = logprobs.iter().sum();
        Ok(TrajectoryScore { segments, total })
    }

    /// Per-token log-probabilities of `traj`, in order.
    pub fn token_logprobs(&self, narrative: &Narrative, traj: &Trajectory, temperature: f64) -> Vec<f64> {
        (0..traj.tokens.len())
            .map(|pos| {
                self.step_logprob(narrative, &traj.tokens[..pos], traj.phase_at(pos), traj.tokens[pos], temperature)
            })
            .collect()
    }
}

pub(crate) fn draw(logprobs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &l) in logprobs.iter().enumerate() {
        if l == f64::NEG_INFINITY {
            continue;
        }
        acc += l.exp();
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

pub fn sample_trajectory(
    params: &PolicyParams,
    vocab: &Vocab,
    narrative: &Narrative,
    temperature: f64,
    caps: &Caps,
    seed: u64,
) -> Result<Trajectory, PolicyError> {
    caps.validate()?;
    Ok(params.view(vocab)?.sample_seeded(narrative, temperature, caps, seed))
}

pub fn trajectory_logprob(
    params: &PolicyParams,
    vocab: &Vocab,
    narrative: &Narrative,
    traj: &Trajectory,
    temperature: f64,
) -> Result<f64, PolicyError> {
    Ok(params.view(vocab)?.score(narrative, traj, temperature)?.total)
}
