//! Targeted adversarial-perturbation synthesis against speaker verification.
//!
//! The attack ascends the margin between a verification score and its
//! threshold with fixed-size signed-gradient steps, stopping at the first
//! accepted sample. Scoring can run directly on the waveform or through a
//! frozen replay simulator, and a cascade ensemble perturbs one waveform
//! until every surrogate model in an ordered list accepts it.

use serde::{Deserialize, Serialize};

use crate::asv::{decide, SpeakerEmbedder, VerificationThreshold};
use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nrs::NrsModel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// When the perturbation loop stops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopPolicy {
    /// Stop at the first iteration whose sample is accepted.
    FirstSuccess,
}

/// Perturbation-loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Per-step amplitude of the signed update.
    pub epsilon: f64,
    /// Hard cap on sign-steps (global across an ensemble's inner loops).
    pub max_iterations: usize,
    pub stop_policy: StopPolicy,
    /// Clamp samples to [-1, 1] after every step.
    pub clip_to_valid_range: bool,
    /// Base seed recorded with results; the loop itself is deterministic.
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 0.0004,
            max_iterations: 1000,
            stop_policy: StopPolicy::FirstSuccess,
            clip_to_valid_range: true,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::InvalidParam("epsilon must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidParam(
                "max_iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Which scoring path a surrogate exposes to the attacker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    /// Score the waveform directly.
    AsvOnly,
    /// Map the waveform through the replay simulator, then score.
    NrsThenAsv,
}

impl SurrogateKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SurrogateKind::AsvOnly => "asv_only",
            SurrogateKind::NrsThenAsv => "nrs_then_asv",
        }
    }
}

impl std::fmt::Display for SurrogateKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SurrogateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asv_only" => Ok(SurrogateKind::AsvOnly),
            "nrs_then_asv" => Ok(SurrogateKind::NrsThenAsv),
            other => Err(Error::InvalidParam(format!(
                "unknown surrogate kind `{other}`"
            ))),
        }
    }
}

/// A frozen scoring path the attacker differentiates through.
#[derive(Clone, Copy)]
pub struct SurrogateModel<'a, S: Scalar> {
    pub kind: SurrogateKind,
    pub embedder: &'a SpeakerEmbedder<S>,
    /// Replay simulator in front of the embedder (`nrs_then_asv` only).
    pub nrs: Option<&'a NrsModel<S>>,
    pub tau: VerificationThreshold,
}

impl<'a, S: Scalar> SurrogateModel<'a, S> {
    pub fn asv_only(embedder: &'a SpeakerEmbedder<S>, tau: VerificationThreshold) -> Self {
        SurrogateModel {
            kind: SurrogateKind::AsvOnly,
            embedder,
            nrs: None,
            tau,
        }
    }

    pub fn nrs_then_asv(
        embedder: &'a SpeakerEmbedder<S>,
        nrs: &'a NrsModel<S>,
        tau: VerificationThreshold,
    ) -> Self {
        SurrogateModel {
            kind: SurrogateKind::NrsThenAsv,
            embedder,
            nrs: Some(nrs),
            tau,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.nrs) {
            (SurrogateKind::AsvOnly, Some(_)) => Err(Error::InvalidParam(
                "direct scoring path must not carry a replay simulator".into(),
            )),
            (SurrogateKind::NrsThenAsv, None) => Err(Error::InvalidParam(
                "simulated-replay scoring path needs a replay simulator".into(),
            )),
            (SurrogateKind::NrsThenAsv, Some(n)) if !n.frozen => Err(Error::InvalidParam(
                "replay simulator must be frozen before it is attacked through".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Enrollment embedding used by every scoring call of one attack.
    pub fn enroll_embedding(&self, x_enroll: &Waveform<S>) -> Result<Vec<S>> {
        self.embedder.embed(x_enroll)
    }

    /// Build the differentiable scoring graph and return (graph, score node,
    /// input node).
    fn build_score_graph(
        &self,
        x: &[S],
        enroll_emb: &[S],
        input_grad: bool,
    ) -> Result<(Graph<S>, Var, Var)> {
        let mut g = Graph::new();
        let xv = g.leaf(Tensor::row(x.to_vec()), input_grad);
        let h = match self.kind {
            SurrogateKind::AsvOnly => xv,
            SurrogateKind::NrsThenAsv => {
                let nrs = self.nrs.expect("validated: simulator present");
                let nb = nrs.bind(&mut g, false);
                nrs.forward(&mut g, &nb, xv)?
            }
        };
        let eb = self.embedder.bind(&mut g, false);
        let emb = self.embedder.forward(&mut g, &eb, h)?;
        let en = g.constant(Tensor::col(enroll_emb.to_vec()));
        let s = g.cos_sim(emb, en)?;
        Ok((g, s, xv))
    }

    /// Score a waveform against a precomputed enrollment embedding along this
    /// surrogate's path.
    pub fn score_against(&self, x: &Waveform<S>, enroll_emb: &[S]) -> Result<S> {
        let (g, s, _) = self.build_score_graph(&x.samples, enroll_emb, false)?;
        Ok(g.value(s).item())
    }
}

/// Margin of a sample over the acceptance threshold along the surrogate's
/// scoring path; positive means the sample already verifies.
pub fn adv_loss<S: Scalar>(
    x: &Waveform<S>,
    x_enroll: &Waveform<S>,
    m: &SurrogateModel<'_, S>,
) -> Result<S> {
    m.validate()?;
    let enroll = m.enroll_embedding(x_enroll)?;
    let s = m.score_against(x, &enroll)?;
    Ok(s - S::of_f64(m.tau.tau))
}

/// [`adv_loss`] together with its analytic gradient with respect to the
/// input samples, computed on the same graph the attack iterates over.
pub fn adv_loss_grad<S: Scalar>(
    x: &Waveform<S>,
    x_enroll: &Waveform<S>,
    m: &SurrogateModel<'_, S>,
) -> Result<(S, Vec<S>)> {
    m.validate()?;
    let enroll = m.enroll_embedding(x_enroll)?;
    let (mut g, s, xv) = m.build_score_graph(&x.samples, &enroll, true)?;
    let loss = g.value(s).item() - S::of_f64(m.tau.tau);
    let mut grads = g.backward(s);
    let gx = grads
        .take_flat(xv)
        .ok_or_else(|| Error::Attack("input gradient unavailable".into()))?;
    Ok((loss, gx))
}

/// One signed-gradient ascent step: each sample moves by exactly ±epsilon
/// where the gradient is non-zero (sign(0) = 0), optionally clamped to the
/// valid amplitude range.
pub fn pgd_step<S: Scalar>(
    x_prev: &Waveform<S>,
    grad: &[S],
    epsilon: S,
    clamp: bool,
) -> Result<Waveform<S>> {
    if grad.len() != x_prev.len() {
        return Err(Error::ShapeMismatch(format!(
            "gradient has {} entries for {} samples",
            grad.len(),
            x_prev.len()
        )));
    }
    let one = S::one();
    let samples = x_prev
        .samples
        .iter()
        .zip(grad)
        .map(|(&x, &g)| {
            let step = if g > S::zero() {
                epsilon
            } else if g < S::zero() {
                -epsilon
            } else {
                S::zero()
            };
            let y = x + step;
            if clamp {
                y.min(one).max(-one)
            } else {
                y
            }
        })
        .collect();
    Waveform::new(samples)
}

/// Outcome of one attack run.
#[derive(Debug, Clone)]
pub struct AttackResult<S: Scalar> {
    /// The perturbed waveform at termination.
    pub adversarial: Waveform<S>,
    /// Total sign-steps taken (across all inner loops for an ensemble).
    pub iterations_used: usize,
    /// True iff the final sample verifies on every attacked surrogate.
    pub succeeded: bool,
    /// Final score of `adversarial` on each surrogate, in attack order.
    pub final_scores: Vec<f64>,
    /// Max absolute sample change versus the source.
    pub perturbation_linf: f64,
}

fn linf<S: Scalar>(a: &Waveform<S>, b: &Waveform<S>) -> f64 {
    a.samples
        .iter()
        .zip(&b.samples)
        .fold(0.0f64, |m, (&x, &y)| m.max((x - y).as_f64().abs()))
}

/// Ascend one surrogate's score from `x` until it verifies or the step budget
/// runs out. Returns the waveform, steps taken, whether it now verifies, and
/// its final score.
fn pgd_core<S: Scalar>(
    mut x: Waveform<S>,
    enroll_emb: &[S],
    m: &SurrogateModel<'_, S>,
    cfg: &AttackConfig,
    budget: usize,
) -> Result<(Waveform<S>, usize, bool, f64)> {
    let tau = S::of_f64(m.tau.tau);
    let eps = S::of_f64(cfg.epsilon);
    let mut iters = 0usize;
    loop {
        let (mut g, s, xv) = m.build_score_graph(&x.samples, enroll_emb, true)?;
        let score = g.value(s).item();
        if !score.as_f64().is_finite() {
            return Err(Error::Attack(format!(
                "score became non-finite after {iters} steps"
            )));
        }
        if decide(score, tau) {
            return Ok((x, iters, true, score.as_f64()));
        }
        if iters >= budget {
            return Ok((x, iters, false, score.as_f64()));
        }
        let mut grads = g.backward(s);
        let gx = grads
            .take_flat(xv)
            .ok_or_else(|| Error::Attack("input gradient unavailable".into()))?;
        if !gx.iter().all(|v| v.is_finite()) {
            return Err(Error::Attack(format!(
                "non-finite input gradient at step {}",
                iters + 1
            )));
        }
        x = pgd_step(&x, &gx, eps, cfg.clip_to_valid_range)?;
        iters += 1;
    }
}

/// Signed-gradient attack on a single surrogate, stopping at the first
/// accepted sample. The source must not already verify: the attack targets
/// impostor pairs.
pub fn pgd_attack<S: Scalar>(
    x0: &Waveform<S>,
    x_enroll: &Waveform<S>,
    m: &SurrogateModel<'_, S>,
    cfg: &AttackConfig,
) -> Result<AttackResult<S>> {
    cfg.validate()?;
    m.validate()?;
    let enroll_emb = m.enroll_embedding(x_enroll)?;
    let s0 = m.score_against(x0, &enroll_emb)?;
    if decide(s0, S::of_f64(m.tau.tau)) {
        return Err(Error::Attack(format!(
            "source already verifies against the enrollment (score {} >= threshold {})",
            s0.as_f64(),
            m.tau.tau
        )));
    }
    let (adv, iters, _, _) = pgd_core(x0.clone(), &enroll_emb, m, cfg, cfg.max_iterations)?;
    let final_score = m.score_against(&adv, &enroll_emb)?;
    let succeeded = decide(final_score, S::of_f64(m.tau.tau));
    Ok(AttackResult {
        perturbation_linf: linf(x0, &adv),
        adversarial: adv,
        iterations_used: iters,
        succeeded,
        final_scores: vec![final_score.as_f64()],
    })
}

/// Cascade attack on an ordered list of surrogates sharing one waveform.
///
/// Each sweep runs the single-surrogate loop per model in order, continuing
/// from the current sample; the attack ends when a full sweep finds every
/// model already verifying, or when the global step budget is exhausted.
pub fn ensemble_pgd<S: Scalar>(
    models: &[SurrogateModel<'_, S>],
    x_enroll: &Waveform<S>,
    x0: &Waveform<S>,
    cfg: &AttackConfig,
) -> Result<AttackResult<S>> {
    cfg.validate()?;
    if models.is_empty() {
        return Err(Error::InvalidParam(
            "ensemble needs at least one surrogate".into(),
        ));
    }
    for m in models {
        m.validate()?;
    }
    let enrolls: Vec<Vec<S>> = models
        .iter()
        .map(|m| m.enroll_embedding(x_enroll))
        .collect::<Result<_>>()?;

    let mut x = x0.clone();
    let mut used = 0usize;
    loop {
        let mut all_ok = true;
        let mut progressed = false;
        for (m, enroll) in models.iter().zip(&enrolls) {
            let budget_left = cfg.max_iterations - used;
            let (nx, it, ok, _) = pgd_core(x, enroll, m, cfg, budget_left)?;
            x = nx;
            used += it;
            progressed |= it > 0;
            all_ok &= ok;
        }
        if (all_ok && !progressed) || used >= cfg.max_iterations {
            break;
        }
    }

    let mut final_scores = Vec::with_capacity(models.len());
    let mut succeeded = true;
    for (m, enroll) in models.iter().zip(&enrolls) {
        let s = m.score_against(&x, enroll)?;
        succeeded &= decide(s, S::of_f64(m.tau.tau));
        final_scores.push(s.as_f64());
    }
    Ok(AttackResult {
        perturbation_linf: linf(x0, &x),
        adversarial: x,
        iterations_used: used,
        succeeded,
        final_scores,
    })
}
