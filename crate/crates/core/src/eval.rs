//! Attack evaluation: synthesis frameworks, digital and replayed scoring
//! paths, white-box and transfer runners, and deterministic report artifacts.
//!
//! Evaluation always scores plain verification systems — the replay
//! simulator exists only on the attack side, while the replayed path uses the
//! ground-truth parametric channel. Trials carry explicit counts and every
//! reported rate travels with the number of trials behind it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::asv::{decide, SpeakerEmbedder, VerificationThreshold};
use crate::attack::{ensemble_pgd, AttackConfig, AttackResult, SurrogateKind, SurrogateModel};
use crate::audio::Waveform;
use crate::channel::{apply_channel, ChannelParams};
use crate::error::{Error, Result};
use crate::nrs::NrsModel;
use crate::plot::{BarChart, BarGroup};
use crate::rng::derive_seed;
use crate::scalar::Scalar;

/// How adversarial examples are synthesized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Framework {
    /// Attack the verification model directly.
    Baseline,
    /// Attack through the replay simulator only.
    NrsOnly,
    /// Jointly attack the simulated-replay path and the direct path.
    NrsJoint,
}

impl Framework {
    pub const ALL: [Framework; 3] = [Framework::Baseline, Framework::NrsOnly, Framework::NrsJoint];

    pub fn as_str(self) -> &'static str {
        match self {
            Framework::Baseline => "baseline",
            Framework::NrsOnly => "nrs_only",
            Framework::NrsJoint => "nrs_joint",
        }
    }
}

impl std::fmt::Display for Framework {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Framework {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Framework::Baseline),
            "nrs_only" => Ok(Framework::NrsOnly),
            "nrs_joint" => Ok(Framework::NrsJoint),
            other => Err(Error::InvalidParam(format!("unknown framework `{other}`"))),
        }
    }
}

/// How the adversarial waveform reaches the evaluated system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackPath {
    /// Feed the waveform to the system directly.
    Digital,
    /// Play it through the ground-truth replay channel first.
    Ota,
}

impl AttackPath {
    pub const ALL: [AttackPath; 2] = [AttackPath::Digital, AttackPath::Ota];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackPath::Digital => "digital",
            AttackPath::Ota => "ota",
        }
    }
}

impl std::fmt::Display for AttackPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AttackPath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "digital" => Ok(AttackPath::Digital),
            "ota" => Ok(AttackPath::Ota),
            other => Err(Error::InvalidParam(format!("unknown attack path `{other}`"))),
        }
    }
}

/// Fraction of successful trials.
pub fn success_rate(results: &[bool]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::InsufficientData(
            "success rate over zero trials".into(),
        ));
    }
    let hits = results.iter().filter(|&&s| s).count();
    Ok(hits as f64 / results.len() as f64)
}

/// One scored trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial_id: usize,
    /// Whether the evaluated system accepted the sample.
    pub success: bool,
    /// Verification score on the evaluated system.
    pub score: f64,
}

/// Results of evaluating one batch of adversarial examples on one target
/// system along one path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationRun {
    pub framework: Framework,
    /// System(s) the examples were synthesized against.
    pub surrogate_ids: Vec<String>,
    /// System the examples were evaluated on.
    pub target_id: String,
    pub attack_path: AttackPath,
    pub trial_results: Vec<TrialOutcome>,
    /// Ground-truth channel used by the replayed path.
    pub channel: Option<ChannelParams>,
    /// Mean synthesis iterations across trials.
    pub mean_iterations: f64,
    /// Trials whose synthesis exhausted the iteration cap.
    pub cap_failures: usize,
}

impl EvaluationRun {
    pub fn validate(&self) -> Result<()> {
        if self.trial_results.is_empty() {
            return Err(Error::InvalidParam("evaluation run has no trials".into()));
        }
        if self.attack_path == AttackPath::Ota && self.channel.is_none() {
            return Err(Error::InvalidParam(
                "replayed-path run must record its channel".into(),
            ));
        }
        if self.surrogate_ids.is_empty() {
            return Err(Error::InvalidParam("run names no surrogate".into()));
        }
        Ok(())
    }

    pub fn n_trials(&self) -> usize {
        self.trial_results.len()
    }

    pub fn success_rate(&self) -> f64 {
        let hits = self.trial_results.iter().filter(|t| t.success).count();
        hits as f64 / self.trial_results.len() as f64
    }
}

/// One impostor attack trial: a source utterance to perturb and the target
/// speaker's enrollment utterance.
#[derive(Debug, Clone)]
pub struct AttackPair<S: Scalar> {
    pub source: Waveform<S>,
    pub enroll: Waveform<S>,
}

/// A verification system under evaluation.
#[derive(Clone, Copy)]
pub struct EvalSystem<'a, S: Scalar> {
    pub id: &'a str,
    pub embedder: &'a SpeakerEmbedder<S>,
    pub tau: VerificationThreshold,
}

impl<'a, S: Scalar> EvalSystem<'a, S> {
    fn as_target(&self) -> SurrogateModel<'a, S> {
        SurrogateModel::asv_only(self.embedder, self.tau)
    }
}

/// The ordered surrogate list a framework attacks on a given system. The
/// simulator-in-loop path comes first so the joint attack alternates
/// simulated-replay and direct sweeps.
pub fn surrogates_for<'a, S: Scalar>(
    framework: Framework,
    system: &EvalSystem<'a, S>,
    nrs: Option<&'a NrsModel<S>>,
) -> Result<Vec<SurrogateModel<'a, S>>> {
    let need_nrs = || {
        nrs.ok_or_else(|| {
            Error::InvalidParam(format!(
                "framework {framework} needs a trained replay simulator"
            ))
        })
    };
    let models = match framework {
        Framework::Baseline => vec![system.as_target()],
        Framework::NrsOnly => vec![SurrogateModel::nrs_then_asv(
            system.embedder,
            need_nrs()?,
            system.tau,
        )],
        Framework::NrsJoint => vec![
            SurrogateModel::nrs_then_asv(system.embedder, need_nrs()?, system.tau),
            system.as_target(),
        ],
    };
    for m in &models {
        m.validate()?;
    }
    Ok(models)
}

/// Synthesize adversarial examples for every pair in the attack set, with the
/// given system as the (white-box) surrogate.
pub fn synthesize_attacks<S: Scalar>(
    framework: Framework,
    system: &EvalSystem<'_, S>,
    nrs: Option<&NrsModel<S>>,
    attack_set: &[AttackPair<S>],
    cfg: &AttackConfig,
) -> Result<Vec<AttackResult<S>>> {
    if attack_set.is_empty() {
        return Err(Error::InvalidParam("attack set is empty".into()));
    }
    let models = surrogates_for(framework, system, nrs)?;
    attack_set
        .iter()
        .map(|pair| ensemble_pgd(&models, &pair.enroll, &pair.source, cfg))
        .collect()
}

/// Score one adversarial example on a plain verification target along one
/// path. The replayed path captures the waveform through the ground-truth
/// channel with a per-trial noise stream; evaluation never routes audio
/// through the replay simulator.
pub fn evaluate_attack<S: Scalar>(
    x_adv: &Waveform<S>,
    x_enroll: &Waveform<S>,
    target: &SurrogateModel<'_, S>,
    path: AttackPath,
    channel: Option<&ChannelParams>,
    trial_seed: u64,
) -> Result<(bool, f64)> {
    if target.kind != SurrogateKind::AsvOnly {
        return Err(Error::InvalidParam(
            "evaluation target must be a plain verification system".into(),
        ));
    }
    target.validate()?;
    let enroll_emb = target.enroll_embedding(x_enroll)?;
    let score = match path {
        AttackPath::Digital => target.score_against(x_adv, &enroll_emb)?,
        AttackPath::Ota => {
            let p = channel.ok_or_else(|| {
                Error::InvalidParam("replayed-path evaluation needs a channel".into())
            })?;
            let captured = apply_channel(x_adv, p, trial_seed)?;
            target.score_against(&captured, &enroll_emb)?
        }
    };
    Ok((decide(score, S::of_f64(target.tau.tau)), score.as_f64()))
}

fn mean_iterations<S: Scalar>(results: &[AttackResult<S>]) -> f64 {
    results.iter().map(|r| r.iterations_used as f64).sum::<f64>() / results.len() as f64
}

fn cap_failures<S: Scalar>(results: &[AttackResult<S>]) -> usize {
    results.iter().filter(|r| !r.succeeded).count()
}

/// Score a batch of waveforms on one target, one outcome per trial.
fn score_batch<S: Scalar>(
    waves: &[Waveform<S>],
    enroll_embs: &[Vec<S>],
    target: &EvalSystem<'_, S>,
) -> Result<Vec<TrialOutcome>> {
    let model = target.as_target();
    let tau = S::of_f64(target.tau.tau);
    waves
        .iter()
        .zip(enroll_embs)
        .enumerate()
        .map(|(trial_id, (w, emb))| {
            let score = model.score_against(w, emb)?;
            Ok(TrialOutcome {
                trial_id,
                success: decide(score, tau),
                score: score.as_f64(),
            })
        })
        .collect()
}

/// Capture every adversarial example once through the channel, one fresh
/// noise stream per trial.
fn capture_batch<S: Scalar>(
    results: &[AttackResult<S>],
    channel: &ChannelParams,
    base_seed: u64,
    label: &str,
) -> Result<Vec<Waveform<S>>> {
    results
        .iter()
        .enumerate()
        .map(|(t, r)| apply_channel(&r.adversarial, channel, derive_seed(base_seed, label, t as u64)))
        .collect()
}

/// White-box evaluation: for each system, synthesize with the system itself
/// as surrogate, then score the same examples digitally and after replay.
/// Returns two runs (digital, replayed) per system, in system order.
pub fn run_white_box<S: Scalar>(
    framework: Framework,
    systems: &[EvalSystem<'_, S>],
    nrs: Option<&NrsModel<S>>,
    attack_set: &[AttackPair<S>],
    cfg: &AttackConfig,
    channel: &ChannelParams,
) -> Result<Vec<EvaluationRun>> {
    if systems.is_empty() {
        return Err(Error::InvalidParam("no systems to evaluate".into()));
    }
    let mut runs = Vec::with_capacity(systems.len() * 2);
    for sys in systems {
        let results = synthesize_attacks(framework, sys, nrs, attack_set, cfg)?;
        let enroll_embs: Vec<Vec<S>> = attack_set
            .iter()
            .map(|p| sys.embedder.embed(&p.enroll))
            .collect::<Result<_>>()?;
        let adv: Vec<Waveform<S>> = results.iter().map(|r| r.adversarial.clone()).collect();
        let label = format!("ota:{framework}:{}", sys.id);
        let captured = capture_batch(&results, channel, cfg.seed, &label)?;

        for (path, waves) in [(AttackPath::Digital, &adv), (AttackPath::Ota, &captured)] {
            let run = EvaluationRun {
                framework,
                surrogate_ids: vec![sys.id.to_string()],
                target_id: sys.id.to_string(),
                attack_path: path,
                trial_results: score_batch(waves, &enroll_embs, sys)?,
                channel: (path == AttackPath::Ota).then(|| channel.clone()),
                mean_iterations: mean_iterations(&results),
                cap_failures: cap_failures(&results),
            };
            run.validate()?;
            runs.push(run);
        }
    }
    Ok(runs)
}

/// Surrogate-by-target success rates for one path. Diagonal cells are
/// white-box, off-diagonal cells are transfer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuccessMatrix {
    pub path: AttackPath,
    /// Row labels: the system attacks were synthesized against.
    pub surrogates: Vec<String>,
    /// Column labels: the system attacks were evaluated on.
    pub targets: Vec<String>,
    /// rates[row][col] in [0, 1].
    pub rates: Vec<Vec<f64>>,
    /// trials[row][col]: trial count behind each cell.
    pub trials: Vec<Vec<usize>>,
}

impl SuccessMatrix {
    pub fn validate(&self) -> Result<()> {
        let (r, c) = (self.surrogates.len(), self.targets.len());
        if r == 0 || c == 0 {
            return Err(Error::InvalidParam("empty success matrix".into()));
        }
        if self.rates.len() != r || self.trials.len() != r {
            return Err(Error::ShapeMismatch(format!(
                "matrix has {} rate rows and {} trial rows for {r} surrogates",
                self.rates.len(),
                self.trials.len()
            )));
        }
        for (rates, trials) in self.rates.iter().zip(&self.trials) {
            if rates.len() != c || trials.len() != c {
                return Err(Error::ShapeMismatch(format!(
                    "matrix row has {} rates and {} trial counts for {c} targets",
                    rates.len(),
                    trials.len()
                )));
            }
            for (&rate, &n) in rates.iter().zip(trials) {
                if !(0.0..=1.0).contains(&rate) {
                    return Err(Error::InvalidParam(format!("rate {rate} outside [0, 1]")));
                }
                if n == 0 {
                    return Err(Error::InvalidParam("matrix cell with zero trials".into()));
                }
            }
        }
        Ok(())
    }

    /// Trial-weighted average per surrogate row.
    pub fn row_marginals(&self) -> Vec<f64> {
        self.rates
            .iter()
            .zip(&self.trials)
            .map(|(rates, ns)| weighted_mean(rates, ns))
            .collect()
    }

    /// Trial-weighted average per target column.
    pub fn col_marginals(&self) -> Vec<f64> {
        (0..self.targets.len())
            .map(|c| {
                let rates: Vec<f64> = self.rates.iter().map(|row| row[c]).collect();
                let ns: Vec<usize> = self.trials.iter().map(|row| row[c]).collect();
                weighted_mean(&rates, &ns)
            })
            .collect()
    }
}

fn weighted_mean(rates: &[f64], ns: &[usize]) -> f64 {
    let total: usize = ns.iter().sum();
    rates
        .iter()
        .zip(ns)
        .map(|(&r, &n)| r * n as f64)
        .sum::<f64>()
        / total as f64
}

/// Transfer evaluation output: one matrix per path plus the underlying runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferReport {
    pub digital: SuccessMatrix,
    pub ota: SuccessMatrix,
    pub runs: Vec<EvaluationRun>,
}

/// Cross-system evaluation: synthesize white-box per surrogate, capture each
/// example once through the channel, then score the same audio on every
/// target. Produces the full surrogate-by-target matrix for both paths.
pub fn run_transfer<S: Scalar>(
    framework: Framework,
    systems: &[EvalSystem<'_, S>],
    nrs: Option<&NrsModel<S>>,
    attack_set: &[AttackPair<S>],
    cfg: &AttackConfig,
    channel: &ChannelParams,
) -> Result<TransferReport> {
    if systems.len() < 2 {
        return Err(Error::InvalidParam(
            "transfer evaluation needs at least two systems".into(),
        ));
    }
    let n = systems.len();
    let ids: Vec<String> = systems.iter().map(|s| s.id.to_string()).collect();
    let mut runs = Vec::with_capacity(n * n * 2);
    let mut digital_rates = vec![vec![0.0; n]; n];
    let mut ota_rates = vec![vec![0.0; n]; n];
    let mut trials = vec![vec![0usize; n]; n];

    // Enrollment embeddings per (target, pair), computed once.
    let mut enroll_embs: Vec<Vec<Vec<S>>> = Vec::with_capacity(n);
    for sys in systems {
        enroll_embs.push(
            attack_set
                .iter()
                .map(|p| sys.embedder.embed(&p.enroll))
                .collect::<Result<_>>()?,
        );
    }

    for (si, sur) in systems.iter().enumerate() {
        let results = synthesize_attacks(framework, sur, nrs, attack_set, cfg)?;
        let adv: Vec<Waveform<S>> = results.iter().map(|r| r.adversarial.clone()).collect();
        let label = format!("ota:{framework}:{}", sur.id);
        let captured = capture_batch(&results, channel, cfg.seed, &label)?;
        let iters = mean_iterations(&results);
        let caps = cap_failures(&results);

        for (ti, tgt) in systems.iter().enumerate() {
            for (path, waves) in [(AttackPath::Digital, &adv), (AttackPath::Ota, &captured)] {
                let outcomes = score_batch(waves, &enroll_embs[ti], tgt)?;
                let rate = outcomes.iter().filter(|t| t.success).count() as f64
                    / outcomes.len() as f64;
                match path {
                    AttackPath::Digital => digital_rates[si][ti] = rate,
                    AttackPath::Ota => ota_rates[si][ti] = rate,
                }
                trials[si][ti] = outcomes.len();
                let run = EvaluationRun {
                    framework,
                    surrogate_ids: vec![sur.id.to_string()],
                    target_id: tgt.id.to_string(),
                    attack_path: path,
                    trial_results: outcomes,
                    channel: (path == AttackPath::Ota).then(|| channel.clone()),
                    mean_iterations: iters,
                    cap_failures: caps,
                };
                run.validate()?;
                runs.push(run);
            }
        }
    }

    let digital = SuccessMatrix {
        path: AttackPath::Digital,
        surrogates: ids.clone(),
        targets: ids.clone(),
        rates: digital_rates,
        trials: trials.clone(),
    };
    let ota = SuccessMatrix {
        path: AttackPath::Ota,
        surrogates: ids.clone(),
        targets: ids,
        rates: ota_rates,
        trials,
    };
    digital.validate()?;
    ota.validate()?;
    Ok(TransferReport { digital, ota, runs })
}

/// Paths of the files a report emission writes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportPaths {
    pub csv: PathBuf,
    pub markdown: PathBuf,
    pub text: PathBuf,
    pub plot: PathBuf,
}

fn csv_line(run: &EvaluationRun) -> String {
    format!(
        "{},{},{},{},{},{},{},{}\n",
        run.framework,
        run.surrogate_ids.join("+"),
        run.target_id,
        run.attack_path,
        run.n_trials(),
        run.success_rate(),
        run.mean_iterations,
        run.cap_failures
    )
}

/// Trial-weighted average success rate over the runs matching (framework,
/// path), or `None` if no run matches.
fn framework_path_rate(runs: &[EvaluationRun], fw: Framework, path: AttackPath) -> Option<f64> {
    let matching: Vec<&EvaluationRun> = runs
        .iter()
        .filter(|r| r.framework == fw && r.attack_path == path)
        .collect();
    if matching.is_empty() {
        return None;
    }
    let rates: Vec<f64> = matching.iter().map(|r| r.success_rate()).collect();
    let ns: Vec<usize> = matching.iter().map(|r| r.n_trials()).collect();
    Some(weighted_mean(&rates, &ns))
}

/// Write the full report set: machine-readable CSV, markdown and plain-text
/// summaries, and a success-rate bar chart. Emission is deterministic — the
/// same runs and digest produce byte-identical CSV.
pub fn emit_report(
    runs: &[EvaluationRun],
    manifest_digest: &str,
    out_dir: &Path,
) -> Result<ReportPaths> {
    if runs.is_empty() {
        return Err(Error::InvalidParam("no runs to report".into()));
    }
    for run in runs {
        run.validate()?;
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    let write = |name: &str, body: &str| -> Result<PathBuf> {
        let path = out_dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Ok(path)
    };

    // Machine-readable rows.
    let mut csv = String::from(
        "framework,surrogate,target,path,n_trials,success_rate,mean_iterations,cap_failures\n",
    );
    for run in runs {
        csv.push_str(&csv_line(run));
    }
    let csv_path = write("results.csv", &csv)?;

    // Shared summary content.
    let note = "channel: synthetic parametric replay channel (not a physical rig); \
                trial counts are desk-scale";
    let header = [
        ("manifest", manifest_digest.to_string()),
        ("runs", runs.len().to_string()),
        ("note", note.to_string()),
    ];
    let rows: Vec<[String; 8]> = runs
        .iter()
        .map(|r| {
            [
                r.framework.to_string(),
                r.surrogate_ids.join("+"),
                r.target_id.clone(),
                r.attack_path.to_string(),
                r.n_trials().to_string(),
                format!("{:.1}%", r.success_rate() * 100.0),
                format!("{:.1}", r.mean_iterations),
                r.cap_failures.to_string(),
            ]
        })
        .collect();
    let cols = [
        "framework",
        "surrogate",
        "target",
        "path",
        "trials",
        "success",
        "mean iters",
        "cap fails",
    ];
    let averages: Vec<(Framework, AttackPath, f64)> = Framework::ALL
        .iter()
        .flat_map(|&fw| AttackPath::ALL.iter().map(move |&p| (fw, p)))
        .filter_map(|(fw, p)| framework_path_rate(runs, fw, p).map(|r| (fw, p, r)))
        .collect();

    // Markdown summary.
    let mut md = String::from("# Attack evaluation summary\n\n");
    for (k, v) in &header {
        let _ = writeln!(md, "- {k}: {v}");
    }
    md.push('\n');
    let _ = writeln!(md, "| {} |", cols.join(" | "));
    let _ = writeln!(md, "|{}|", cols.map(|_| "---").join("|"));
    for row in &rows {
        let _ = writeln!(md, "| {} |", row.join(" | "));
    }
    md.push('\n');
    md.push_str("## Averages (trial-weighted)\n\n");
    for (fw, p, r) in &averages {
        let _ = writeln!(md, "- {fw} / {p}: {:.1}%", r * 100.0);
    }
    let md_path = write("summary.md", &md)?;

    // Plain-text summary with aligned columns.
    let mut widths: Vec<usize> = cols.iter().map(|c| c.len()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut txt = String::from("attack evaluation summary\n");
    for (k, v) in &header {
        let _ = writeln!(txt, "{k}: {v}");
    }
    txt.push('\n');
    let fmt_row = |cells: &[String]| -> String {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let head: Vec<String> = cols.iter().map(|c| c.to_string()).collect();
    let _ = writeln!(txt, "{}", fmt_row(&head));
    let _ = writeln!(txt, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    for row in &rows {
        let _ = writeln!(txt, "{}", fmt_row(&row.to_vec()));
    }
    txt.push('\n');
    for (fw, p, r) in &averages {
        let _ = writeln!(txt, "average {fw} / {p}: {:.1}%", r * 100.0);
    }
    let txt_path = write("summary.txt", &txt)?;

    // Framework-vs-path bar chart over the averages.
    let series: Vec<AttackPath> = AttackPath::ALL
        .iter()
        .copied()
        .filter(|&p| averages.iter().any(|&(_, ap, _)| ap == p))
        .collect();
    let groups: Vec<BarGroup> = Framework::ALL
        .iter()
        .copied()
        .filter(|&fw| averages.iter().any(|&(afw, _, _)| afw == fw))
        .map(|fw| BarGroup {
            label: fw.to_string(),
            values: series
                .iter()
                .map(|&p| {
                    averages
                        .iter()
                        .find(|&&(afw, ap, _)| afw == fw && ap == p)
                        .map_or(0.0, |&(_, _, r)| r)
                })
                .collect(),
        })
        .collect();
    let chart = BarChart {
        title: "attack success rate".into(),
        series: series.iter().map(|p| p.to_string()).collect(),
        groups,
    };
    let plot_path = out_dir.join("success_rates.png");
    chart.save(&plot_path)?;

    Ok(ReportPaths {
        csv: csv_path,
        markdown: md_path,
        text: txt_path,
        plot: plot_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asv::{cosine_score, ArchitectureId, Calibration, EmbedderConfig};
    use crate::audio::SAMPLE_RATE;
    use crate::nn::ParamId;
    use crate::nrs::NrsConfig;
    use crate::rng::rng_for;
    use rand::Rng;

    fn tone(freq: f64, len: usize, amp: f64, phase: f64) -> Waveform<f64> {
        let w = 2.0 * std::f64::consts::PI * freq / SAMPLE_RATE as f64;
        Waveform::new(
            (0..len)
                .map(|i| amp * (w * i as f64 + phase).sin())
                .collect(),
        )
        .unwrap()
    }

    fn thr(tau: f64) -> VerificationThreshold {
        VerificationThreshold {
            tau,
            calibration: Calibration::EerPoint,
            trial_count: 0,
        }
    }

    fn small_nrs(seed: u64) -> NrsModel<f64> {
        let cfg = NrsConfig {
            depth: 3,
            base_channels: 4,
            channel_growth: 2,
            downsample_factor: 2,
            kernel: 5,
        };
        let mut m = NrsModel::init(cfg, seed).unwrap();
        let mut rng = rng_for(seed, "eval-test-randomize", 0);
        for k in 0..m.params.len() {
            for v in m.params.get_mut(ParamId(k)).data.iter_mut() {
                *v += 0.05 * (rng.gen::<f64>() - 0.5);
            }
        }
        m.frozen = true;
        m
    }

    fn pairs(n: usize) -> Vec<AttackPair<f64>> {
        (0..n)
            .map(|i| AttackPair {
                source: tone(300.0 + 37.0 * i as f64, 8000, 0.5, 0.1 * i as f64),
                enroll: tone(610.0 + 23.0 * i as f64, 8000, 0.5, 0.3),
            })
            .collect()
    }

    /// Threshold slightly above every pair's initial score on the system, so
    /// each trial is a genuine impostor that a short attack can flip.
    fn tau_above(emb: &SpeakerEmbedder<f64>, set: &[AttackPair<f64>], gap: f64) -> f64 {
        set.iter()
            .map(|p| {
                cosine_score(
                    &emb.embed(&p.source).unwrap(),
                    &emb.embed(&p.enroll).unwrap(),
                )
                .unwrap()
            })
            .fold(f64::NEG_INFINITY, f64::max)
            + gap
    }

    #[test]
    fn success_rate_counts_fractions() {
        assert_eq!(success_rate(&[true, false, true, false]).unwrap(), 0.5);
        assert_eq!(success_rate(&[true, true, true]).unwrap(), 1.0);
        assert_eq!(success_rate(&[false, false]).unwrap(), 0.0);
        assert!(success_rate(&[]).is_err());

        let mut rng = rng_for(3, "rate-perm", 0);
        let flags: Vec<bool> = (0..40).map(|_| rng.gen_bool(0.3)).collect();
        let mut shuffled = flags.clone();
        crate::rng::shuffle(&mut shuffled, &mut rng);
        assert_eq!(
            success_rate(&flags).unwrap(),
            success_rate(&shuffled).unwrap()
        );
    }

    #[test]
    fn identity_channel_reproduces_digital_decisions() {
        let emb = SpeakerEmbedder::init(EmbedderConfig::new(ArchitectureId::MelNet), 4).unwrap();
        let identity = ChannelParams::identity();
        let target = SurrogateModel::asv_only(&emb, thr(0.2));
        for (i, p) in pairs(4).iter().enumerate() {
            let (d_ok, d_score) =
                evaluate_attack(&p.source, &p.enroll, &target, AttackPath::Digital, None, 0)
                    .unwrap();
            let (o_ok, o_score) = evaluate_attack(
                &p.source,
                &p.enroll,
                &target,
                AttackPath::Ota,
                Some(&identity),
                i as u64,
            )
            .unwrap();
            assert_eq!(d_ok, o_ok);
            assert!((d_score - o_score).abs() < 1e-9, "{d_score} vs {o_score}");
        }
    }

    #[test]
    fn evaluation_rejects_simulator_targets_and_missing_channels() {
        let emb = SpeakerEmbedder::init(EmbedderConfig::new(ArchitectureId::MelNet), 4).unwrap();
        let nrs = small_nrs(9);
        let p = &pairs(1)[0];
        let through_sim = SurrogateModel::nrs_then_asv(&emb, &nrs, thr(0.2));
        assert!(evaluate_attack(
            &p.source,
            &p.enroll,
            &through_sim,
            AttackPath::Digital,
            None,
            0
        )
        .is_err());

        let target = SurrogateModel::asv_only(&emb, thr(0.2));
        assert!(
            evaluate_attack(&p.source, &p.enroll, &target, AttackPath::Ota, None, 0).is_err()
        );
    }

    #[test]
    fn white_box_baseline_sweeps_both_paths() {
        let emb = SpeakerEmbedder::init(EmbedderConfig::new(ArchitectureId::MelNet), 4).unwrap();
        let set = pairs(3);
        let tau = tau_above(&emb, &set, 0.02);
        let systems = [EvalSystem {
            id: "mel_net",
            embedder: &emb,
            tau: thr(tau),
        }];
        let cfg = AttackConfig {
            epsilon: 0.002,
            max_iterations: 300,
            ..AttackConfig::default()
        };
        let runs = run_white_box(
            Framework::Baseline,
            &systems,
            None,
            &set,
            &cfg,
            &ChannelParams::identity(),
        )
        .unwrap();
        assert_eq!(runs.len(), 2);
        let digital = &runs[0];
        let ota = &runs[1];
        assert_eq!(digital.attack_path, AttackPath::Digital);
        assert_eq!(ota.attack_path, AttackPath::Ota);
        assert_eq!(digital.n_trials(), 3);
        assert_eq!(digital.surrogate_ids, vec!["mel_net"]);
        assert_eq!(digital.target_id, "mel_net");
        assert!(digital.channel.is_none() && ota.channel.is_some());
        assert_eq!(digital.cap_failures, 0);
        assert_eq!(digital.success_rate(), 1.0, "white-box digital is exact");
        assert!(digital.mean_iterations >= 1.0);
        // Identity channel: replayed decisions equal digital decisions.
        for (d, o) in digital.trial_results.iter().zip(&ota.trial_results) {
            assert_eq!(d.success, o.success);
        }
    }

    #[test]
    fn white_box_joint_framework_verifies_digitally() {
        let emb = SpeakerEmbedder::init(EmbedderConfig::new(ArchitectureId::MelNet), 4).unwrap();
        let nrs = small_nrs(9);
        let set = pairs(2);
        let tau = tau_above(&emb, &set, 0.02);
        let systems = [EvalSystem {
            id: "mel_net",
            embedder: &emb,
            tau: thr(tau),
        }];
        let cfg = AttackConfig {
            epsilon: 0.002,
            max_iterations: 500,
            ..AttackConfig::default()
        };
        let runs = run_white_box(
            Framework::NrsJoint,
            &systems,
            Some(&nrs),
            &set,
            &cfg,
            &ChannelParams::identity(),
        )
        .unwrap();
        let digital = &runs[0];
        assert_eq!(digital.cap_failures, 0);
        // The joint attack's second surrogate IS the digital target, so every
        // successful synthesis verifies digitally.
        assert_eq!(digital.success_rate(), 1.0);
        let ota = &runs[1];
        for (d, o) in digital.trial_results.iter().zip(&ota.trial_results) {
            assert_eq!(d.success, o.success);
        }
    }

    #[test]
    fn frameworks_demand_their_simulator() {
        let emb = SpeakerEmbedder::init(EmbedderConfig::new(ArchitectureId::MelNet), 4).unwrap();
        let sys = EvalSystem {
            id: "mel_net",
            embedder: &emb,
            tau: thr(0.5),
        };
        assert!(surrogates_for(Framework::Baseline, &sys, None).is_ok());
        assert!(surrogates_for(Framework::NrsOnly, &sys, None).is_err());
        assert!(surrogates_for(Framework::NrsJoint, &sys, None).is_err());
        let nrs = small_nrs(9);
        let joint = surrogates_for(Framework::NrsJoint, &sys, Some(&nrs)).unwrap();
        assert_eq!(joint.len(), 2);
        assert_eq!(joint[0].kind, SurrogateKind::NrsThenAsv);
        assert_eq!(joint[1].kind, SurrogateKind::AsvOnly);
    }

    #[test]
    fn transfer_matrix_covers_all_cells() {
        let mel = SpeakerEmbedder::init(EmbedderConfig::new(ArchitectureId::MelNet), 4).unwrap();
        let raw = SpeakerEmbedder::init(EmbedderConfig::new(ArchitectureId::RawNet), 6).unwrap();
        let set = pairs(2);
        let systems = [
            EvalSystem {
                id: "mel_net",
                embedder: &mel,
                tau: thr(tau_above(&mel, &set, 0.01)),
            },
            EvalSystem {
                id: "raw_net",
                embedder: &raw,
                tau: thr(tau_above(&raw, &set, 0.01)),
            },
        ];
        let cfg = AttackConfig {
            epsilon: 0.002,
            max_iterations: 150,
            ..AttackConfig::default()
        };
        let report = run_transfer(
            Framework::Baseline,
            &systems,
            None,
            &set,
            &cfg,
            &ChannelParams::identity(),
        )
        .unwrap();
        assert_eq!(report.runs.len(), 8, "2 surrogates x 2 targets x 2 paths");
        for m in [&report.digital, &report.ota] {
            m.validate().unwrap();
            assert_eq!(m.surrogates, vec!["mel_net", "raw_net"]);
            assert_eq!(m.targets, vec!["mel_net", "raw_net"]);
            assert!(m.trials.iter().flatten().all(|&n| n == 2));
            assert!(m
                .rates
                .iter()
                .flatten()
                .all(|r| (0.0..=1.0).contains(r)));
            assert_eq!(m.row_marginals().len(), 2);
            assert_eq!(m.col_marginals().len(), 2);
        }
        // Diagonal cells are white-box: synthesis succeeded within budget, so
        // the digital diagonal matches the per-run success rates.
        for (i, _) in systems.iter().enumerate() {
            let diag = report.digital.rates[i][i];
            let run = report
                .runs
                .iter()
                .find(|r| {
                    r.surrogate_ids == vec![systems[i].id.to_string()]
                        && r.target_id == systems[i].id
                        && r.attack_path == AttackPath::Digital
                })
                .unwrap();
            assert_eq!(diag, run.success_rate());
        }
        assert!(run_transfer(
            Framework::Baseline,
            &systems[..1],
            None,
            &set,
            &cfg,
            &ChannelParams::identity(),
        )
        .is_err());
    }

    fn fake_run(fw: Framework, path: AttackPath, id: &str, hits: usize, n: usize) -> EvaluationRun {
        EvaluationRun {
            framework: fw,
            surrogate_ids: vec![id.to_string()],
            target_id: id.to_string(),
            attack_path: path,
            trial_results: (0..n)
                .map(|t| TrialOutcome {
                    trial_id: t,
                    success: t < hits,
                    score: 0.1 * t as f64,
                })
                .collect(),
            channel: (path == AttackPath::Ota).then(ChannelParams::identity),
            mean_iterations: 12.25,
            cap_failures: 0,
        }
    }

    #[test]
    fn report_emission_is_deterministic_and_complete() {
        let runs = vec![
            fake_run(Framework::Baseline, AttackPath::Digital, "mel_net", 8, 8),
            fake_run(Framework::Baseline, AttackPath::Ota, "mel_net", 4, 8),
            fake_run(Framework::NrsJoint, AttackPath::Digital, "mel_net", 8, 8),
            fake_run(Framework::NrsJoint, AttackPath::Ota, "mel_net", 6, 8),
        ];
        let dir = tempfile::tempdir().unwrap();
        let paths = emit_report(&runs, "abc123", dir.path()).unwrap();
        let csv = std::fs::read_to_string(&paths.csv).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "framework,surrogate,target,path,n_trials,success_rate,mean_iterations,cap_failures"
        );
        assert_eq!(csv.lines().count(), 1 + runs.len());
        assert_eq!(
            lines.next().unwrap(),
            "baseline,mel_net,mel_net,digital,8,1,12.25,0"
        );
        assert!(csv.contains("baseline,mel_net,mel_net,ota,8,0.5,12.25,0"));

        let md = std::fs::read_to_string(&paths.markdown).unwrap();
        let txt = std::fs::read_to_string(&paths.text).unwrap();
        for body in [&md, &txt] {
            assert!(body.contains("abc123"), "summary embeds the digest");
            assert!(body.contains("synthetic"), "summary flags the channel");
            assert!(body.contains("75.0%"), "nrs_joint ota average");
        }
        assert!(image::open(&paths.plot).is_ok());

        // Re-emission reproduces the CSV byte-for-byte.
        let dir2 = tempfile::tempdir().unwrap();
        let paths2 = emit_report(&runs, "abc123", dir2.path()).unwrap();
        assert_eq!(std::fs::read(&paths.csv).unwrap(), std::fs::read(&paths2.csv).unwrap());
        assert_eq!(std::fs::read(&paths.markdown).unwrap(), std::fs::read(&paths2.markdown).unwrap());

        assert!(emit_report(&[], "abc123", dir.path()).is_err());
    }

    #[test]
    fn matrix_marginals_are_trial_weighted() {
        let m = SuccessMatrix {
            path: AttackPath::Digital,
            surrogates: vec!["a".into(), "b".into()],
            targets: vec!["a".into(), "b".into()],
            rates: vec![vec![1.0, 0.0], vec![0.5, 0.5]],
            trials: vec![vec![30, 10], vec![10, 10]],
        };
        m.validate().unwrap();
        let rows = m.row_marginals();
        assert!((rows[0] - 0.75).abs() < 1e-12);
        assert!((rows[1] - 0.5).abs() < 1e-12);
        let cols = m.col_marginals();
        assert!((cols[0] - (30.0 * 1.0 + 10.0 * 0.5) / 40.0).abs() < 1e-12);
        assert!((cols[1] - 0.25).abs() < 1e-12);

        let mut bad = m.clone();
        bad.rates[0][0] = 1.5;
        assert!(bad.validate().is_err());
        let mut bad = m;
        bad.trials[1][1] = 0;
        assert!(bad.validate().is_err());
    }
}
