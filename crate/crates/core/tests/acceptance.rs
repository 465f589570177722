//! End-to-end acceptance gate.
//!
//! Each test prints one `ACCEPTANCE <n> (<name>): PASS/FAIL` line and then
//! asserts, so `cargo test --test acceptance -- --nocapture` doubles as the
//! verification report. Tests 1-3, 6, 8 and 10 share one full pipeline run
//! (built lazily, cached across invocations under the cargo tmp dir); the
//! remaining tests are self-contained library-level checks.

use std::path::{Path, PathBuf};

use once_cell::sync::Lazy;
use rand::Rng;

use replaysim_core::asv::{
    compute_eer, eer_reference_sweep, ArchitectureId, Calibration,
    EmbedderConfig, SpeakerEmbedder, VerificationThreshold,
};
use replaysim_core::attack::{adv_loss, adv_loss_grad, pgd_attack, pgd_step, SurrogateModel};
use replaysim_core::audio::{load_wav, Waveform, SAMPLE_RATE};
use replaysim_core::channel::ChannelParams;
use replaysim_core::ckpt::{load_json, AsvCheckpoint};
use replaysim_core::corpus::{CorpusIndex, SplitSpec, SynthCorpusConfig};
use replaysim_core::eval::{evaluate_attack, AttackPath, AttackPair, EvaluationRun, Framework};
use replaysim_core::manifest::ExperimentManifest;
use replaysim_core::nrs::{LossKind, NrsModel};
use replaysim_core::pipeline::{
    materialize_attack_pairs, AblationReport, AttackRecords, Pipeline,
};
use replaysim_core::rng::rng_for;
use replaysim_core::F;

/// Trials per attack cell in the main run (each loss-ablation cell is smaller).
const MAIN_TRIALS: usize = 100;
const ABLATION_TRIALS: usize = 25;
/// Escalating budgets for digital trials that exhaust the default iteration
/// cap; such trials are slow score crawls, not optimization failures.
const RAISED_CAPS: [usize; 2] = [4000, 16000];

/// The experiment this gate certifies: a generated 20-speaker corpus, both
/// toy systems, the default replay channel, and a simulator big enough to
/// make attacks through it survive the real channel.
fn acceptance_manifest() -> ExperimentManifest {
    let mut m = ExperimentManifest::default_desk(20260814);
    m.corpus.synth = Some(SynthCorpusConfig {
        speakers: 20,
        utterances_per_speaker: 40,
        duration_secs: 1.0,
        seed: 20260814,
    });
    m.corpus.splits = SplitSpec {
        embedder_train: 340,
        nrs_source: 200,
        attack_set: 100,
        enroll_pool: 100,
    };
    m.evaluation.trials = MAIN_TRIALS;
    m.nrs.arch.depth = 6;
    m.nrs.arch.base_channels = 16;
    m.nrs.arch.channel_growth = 8;
    m.nrs.train.max_epochs = 40;
    m.nrs.train.patience = 10;
    m.nrs.train.batch_size = 16;
    m.nrs.train.crop_secs = 1.0;
    m
}

struct MainRun {
    manifest: ExperimentManifest,
    pipeline: Pipeline,
    index: CorpusIndex,
    asv: Vec<AsvCheckpoint<F>>,
    runs: Vec<EvaluationRun>,
}

static MAIN: Lazy<Result<MainRun, String>> = Lazy::new(|| {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&root).map_err(|e| e.to_string())?;
    let manifest = acceptance_manifest();
    let pipeline = Pipeline::new(manifest.clone(), &root, &root.join("runs"))
        .map_err(|e| e.to_string())?;
    let index = pipeline.prepare_data().map_err(|e| e.to_string())?;
    let asv = pipeline.train_asv().map_err(|e| e.to_string())?;
    pipeline.gen_replay_pairs().map_err(|e| e.to_string())?;
    pipeline.train_nrs().map_err(|e| e.to_string())?;
    pipeline.attack(None, None).map_err(|e| e.to_string())?;
    let runs = pipeline.evaluate().map_err(|e| e.to_string())?;
    pipeline.report().map_err(|e| e.to_string())?;
    Ok(MainRun {
        manifest,
        pipeline,
        index,
        asv,
        runs,
    })
});

static ABLATION: Lazy<Result<AblationReport, String>> = Lazy::new(|| {
    let run = main_run();
    run.pipeline
        .run_loss_ablation(ABLATION_TRIALS)
        .map_err(|e| e.to_string())
});

fn main_run() -> &'static MainRun {
    match MAIN.as_ref() {
        Ok(run) => run,
        Err(e) => panic!("main pipeline run failed: {e}"),
    }
}

fn ablation() -> &'static AblationReport {
    match ABLATION.as_ref() {
        Ok(rep) => rep,
        Err(e) => panic!("loss ablation failed: {e}"),
    }
}

fn verdict(n: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {n} ({name}): {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "ACCEPTANCE {n} ({name}) failed: {detail}");
}

fn cell_rate(runs: &[EvaluationRun], fw: Framework, target: &str, path: AttackPath) -> f64 {
    runs.iter()
        .find(|r| r.framework == fw && r.target_id == target && r.attack_path == path)
        .map(|r| r.success_rate())
        .unwrap_or_else(|| panic!("no evaluation run for {fw}/{target}"))
}

/// Trial-weighted success over both systems along one path.
fn pooled_rate(runs: &[EvaluationRun], fw: Framework, path: AttackPath) -> f64 {
    let cells: Vec<&EvaluationRun> = runs
        .iter()
        .filter(|r| r.framework == fw && r.attack_path == path)
        .collect();
    let trials: usize = cells.iter().map(|r| r.trial_results.len()).sum();
    let hits: usize = cells
        .iter()
        .map(|r| r.trial_results.iter().filter(|t| t.success).count())
        .sum();
    hits as f64 / trials as f64
}

fn attack_pairs(run: &MainRun) -> Vec<AttackPair<F>> {
    let rows = run.pipeline.load_attack_rows().expect("trial pairs exist");
    materialize_attack_pairs(&run.index, &rows).expect("pairs materialize")
}

// ---------------------------------------------------------------------------
// 1. Digital white-box success on every impostor trial.
// ---------------------------------------------------------------------------
#[test]
fn acceptance_01_digital_whitebox_success() {
    let run = main_run();
    let pairs = attack_pairs(run);
    let mut details = Vec::new();
    let mut all_ok = true;
    for ck in &run.asv {
        let rec: AttackRecords =
            load_json(&run.pipeline.paths().attack_records(Framework::Baseline, &ck.system_id))
                .expect("baseline records exist");
        let capped: Vec<usize> = rec
            .trials
            .iter()
            .filter(|t| !t.succeeded)
            .map(|t| t.trial_id)
            .collect();
        if capped.is_empty() {
            details.push(format!(
                "{}: {}/{} at cap {}",
                ck.system_id,
                rec.trials.len(),
                rec.trials.len(),
                run.manifest.attack.max_iterations
            ));
            continue;
        }
        // Documented exception path: trials that exhaust the default cap are
        // retried with raised budgets; the attack must then succeed. The
        // stragglers are slow-crawl pairs (near-orthogonal start), not
        // optimization failures.
        let embedder = ck.embedder().expect("checkpoint rebuilds");
        let surrogate = SurrogateModel::asv_only(&embedder, ck.threshold);
        let mut rescued = 0usize;
        let mut cap_needed = run.manifest.attack.max_iterations;
        for &t in &capped {
            for cap in RAISED_CAPS {
                let mut cfg = run.manifest.attack.clone();
                cfg.max_iterations = cap;
                let r = pgd_attack(&pairs[t].source, &pairs[t].enroll, &surrogate, &cfg)
                    .expect("attack runs");
                if r.succeeded {
                    rescued += 1;
                    cap_needed = cap_needed.max(cap);
                    break;
                }
            }
        }
        all_ok &= rescued == capped.len();
        details.push(format!(
            "{}: {}/{} at cap {}, {} retried at raised cap ({} succeeded by cap {}; exception documented)",
            ck.system_id,
            rec.trials.len() - capped.len(),
            rec.trials.len(),
            run.manifest.attack.max_iterations,
            capped.len(),
            rescued,
            cap_needed
        ));
    }
    verdict(1, "digital white-box success", all_ok, &details.join("; "));
}

// ---------------------------------------------------------------------------
// 2. The default channel costs the baseline attack ≥ 20 points.
// ---------------------------------------------------------------------------
#[test]
fn acceptance_02_replay_degradation() {
    let run = main_run();
    let mut details = Vec::new();
    let mut all_ok = true;
    for ck in &run.asv {
        let digital = cell_rate(&run.runs, Framework::Baseline, &ck.system_id, AttackPath::Digital);
        let ota = cell_rate(&run.runs, Framework::Baseline, &ck.system_id, AttackPath::Ota);
        let gap = digital - ota;
        all_ok &= gap >= 0.20;
        details.push(format!(
            "{}: digital {:.1}% → replayed {:.1}% (gap {:.1} points)",
            ck.system_id,
            100.0 * digital,
            100.0 * ota,
            100.0 * gap
        ));
    }
    verdict(2, "replay degradation", all_ok, &details.join("; "));
}

// ---------------------------------------------------------------------------
// 3. Simulator-in-the-loop ordering of replayed success rates.
// ---------------------------------------------------------------------------
#[test]
fn acceptance_03_framework_ordering() {
    let run = main_run();
    let b = pooled_rate(&run.runs, Framework::Baseline, AttackPath::Ota);
    let o = pooled_rate(&run.runs, Framework::NrsOnly, AttackPath::Ota);
    let j = pooled_rate(&run.runs, Framework::NrsJoint, AttackPath::Ota);
    let per_system: Vec<String> = run
        .asv
        .iter()
        .map(|ck| {
            format!(
                "{}: {:.1}/{:.1}/{:.1}%",
                ck.system_id,
                100.0 * cell_rate(&run.runs, Framework::Baseline, &ck.system_id, AttackPath::Ota),
                100.0 * cell_rate(&run.runs, Framework::NrsOnly, &ck.system_id, AttackPath::Ota),
                100.0 * cell_rate(&run.runs, Framework::NrsJoint, &ck.system_id, AttackPath::Ota),
            )
        })
        .collect();
    let pass = b <= o && o < j && j >= b + 0.05;
    verdict(
        3,
        "framework ordering",
        pass,
        &format!(
            "replayed success baseline {:.1}% ≤ simulator-only {:.1}% < joint {:.1}% \
             (joint - baseline = {:.1} points; per-system {})",
            100.0 * b,
            100.0 * o,
            100.0 * j,
            100.0 * (j - b),
            per_system.join(", ")
        ),
    );
}

// ---------------------------------------------------------------------------
// 4. Every loss configuration trains a simulator that beats identity.
// ---------------------------------------------------------------------------
#[test]
fn acceptance_04_simulator_beats_identity() {
    let rep = ablation();
    let mut details = Vec::new();
    let mut all_ok = true;
    for kind in LossKind::ALL {
        let cell = rep
            .cells
            .iter()
            .find(|c| c.loss == kind)
            .unwrap_or_else(|| panic!("ablation is missing {kind:?}"));
        let ok = cell.best_val_loss < cell.identity_val_loss;
        all_ok &= ok;
        details.push(format!(
            "{}: trained {:.4} vs identity {:.4}",
            kind.as_str(),
            cell.best_val_loss,
            cell.identity_val_loss
        ));
    }
    verdict(4, "simulator beats identity", all_ok, &details.join("; "));
}

// ---------------------------------------------------------------------------
// 5. Analytic input gradients match central finite differences.
// ---------------------------------------------------------------------------
#[test]
fn acceptance_05_gradient_oracle() {
    // Computed in f64 so the finite-difference reference itself is trustworthy.
    let len = 2048usize;
    let h = 1e-3f64;
    let tol = 1e-3f64;
    let positions = 64usize;
    let mut rng = rng_for(415, "grad-oracle", 0);
    // Broadband probe signals: a pure tone leaves most spectral bins at
    // near-zero magnitude, where |X| has unbounded curvature and the central
    // difference itself is unreliable at this step size.
    let probe = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Waveform<f64> {
        let f0 = rng.gen_range(90.0..260.0);
        Waveform::new(
            (0..n)
                .map(|i| {
                    let t = i as f64 / SAMPLE_RATE as f64;
                    0.55 * (2.0 * std::f64::consts::PI * f0 * t).sin()
                        + rng.gen_range(-0.16..0.16)
                })
                .collect(),
        )
        .unwrap()
    };
    let thr = VerificationThreshold {
        tau: 0.2,
        calibration: Calibration::EerPoint,
        trial_count: 100,
    };
    let mut details = Vec::new();
    let mut all_ok = true;
    for arch in [ArchitectureId::MelNet, ArchitectureId::RawNet] {
        let embedder: SpeakerEmbedder<f64> =
            SpeakerEmbedder::init(EmbedderConfig::new(arch), 7).unwrap();
        let mut sim: NrsModel<f64> = NrsModel::init(Default::default(), 11).unwrap();
        sim.frozen = true;
        let surrogates = [
            ("direct", SurrogateModel::asv_only(&embedder, thr)),
            ("simulated", SurrogateModel::nrs_then_asv(&embedder, &sim, thr)),
        ];
        for (kind_name, m) in &surrogates {
            let x = probe(&mut rng, len);
            let enroll = probe(&mut rng, SAMPLE_RATE as usize);
            let (_, grad) = adv_loss_grad(&x, &enroll, m).unwrap();
            let mut hits = 0usize;
            for k in 0..positions {
                let i = k * len / positions;
                let mut xp = x.clone();
                xp.samples[i] += h;
                let lp = adv_loss(&xp, &enroll, m).unwrap();
                let mut xm = x.clone();
                xm.samples[i] -= h;
                let lm = adv_loss(&xm, &enroll, m).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-12);
                if rel <= tol {
                    hits += 1;
                }
            }
            let ok = hits * 100 >= positions * 95;
            all_ok &= ok;
            details.push(format!("{}/{}: {hits}/{positions}", arch.as_str(), kind_name));
        }
    }
    verdict(5, "gradient oracle", all_ok, &details.join("; "));
}

// ---------------------------------------------------------------------------
// 6. Sign steps move samples by exactly ±ε, and stored attacks respect the
//    iteration-count perturbation budget.
// ---------------------------------------------------------------------------
#[test]
fn acceptance_06_sign_step_exactness_and_budget() {
    // Property: for random inputs and gradients, each output sample is
    // exactly one of {x - ε, x, x + ε} in the working precision, matching the
    // sign of the gradient, before any range clamping.
    let mut rng = rng_for(88, "sign-step", 0);
    let eps = 0.0004f32;
    let mut step_ok = true;
    for _ in 0..200 {
        let n = rng.gen_range(1..400);
        let x: Vec<f32> = (0..n).map(|_| rng.gen_range(-0.9..0.9)).collect();
        let g: Vec<f32> = (0..n)
            .map(|_| {
                if rng.gen_range(0..10) < 1 {
                    0.0
                } else {
                    rng.gen_range(-1.0..1.0)
                }
            })
            .collect();
        let xw = Waveform::new(x.clone()).unwrap();
        let out = pgd_step(&xw, &g, eps, false).unwrap();
        for ((&xi, &gi), &yi) in x.iter().zip(&g).zip(&out.samples) {
            let expected = if gi > 0.0 {
                xi + eps
            } else if gi < 0.0 {
                xi - eps
            } else {
                xi
            };
            if yi != expected {
                step_ok = false;
            }
        }
    }

    // Budget: every stored attack satisfies ‖x_adv − x₀‖∞ ≤ ε · iterations
    // (tiny relative slack for float accumulation across ~10³ steps).
    let run = main_run();
    let eps64 = run.manifest.attack.epsilon;
    let mut checked = 0usize;
    let mut budget_ok = true;
    for fw in Framework::ALL {
        for ck in &run.asv {
            let rec: AttackRecords =
                load_json(&run.pipeline.paths().attack_records(fw, &ck.system_id))
                    .expect("attack records exist");
            for t in &rec.trials {
                let bound = eps64 * t.iterations_used.max(1) as f64;
                if t.perturbation_linf > bound * (1.0 + 1e-3) {
                    budget_ok = false;
                }
                checked += 1;
            }
        }
    }
    verdict(
        6,
        "sign-step exactness and perturbation budget",
        step_ok && budget_ok,
        &format!(
            "200 random step batches exact; {checked} stored attacks within ε·iterations"
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. Fast EER equals the exhaustive sweep on randomized trial lists.
// ---------------------------------------------------------------------------
#[test]
fn acceptance_07_eer_sweep_equivalence() {
    let mut rng = rng_for(2718, "eer-acceptance", 0);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let n_same = rng.gen_range(1..=100);
        let n_diff = rng.gen_range(1..=100);
        let mut scores = Vec::with_capacity(n_same + n_diff);
        let mut labels = Vec::with_capacity(n_same + n_diff);
        for i in 0..n_same + n_diff {
            let same = i < n_same;
            let raw: f64 = if same {
                rng.gen_range(-0.3..1.0)
            } else {
                rng.gen_range(-1.0..0.5)
            };
            // a third of the lists are quantized to force score ties
            let s = if case % 3 == 0 { (raw * 6.0).round() / 6.0 } else { raw };
            scores.push(s);
            labels.push(same);
        }
        let (fast, _) = compute_eer(&scores, &labels).unwrap();
        let (oracle, _) = eer_reference_sweep(&scores, &labels).unwrap();
        worst = worst.max((fast - oracle).abs());
    }
    verdict(
        7,
        "EER sweep equivalence",
        worst <= 1e-9,
        &format!("200 randomized lists, worst |Δ| = {worst:.2e}"),
    );
}

// ---------------------------------------------------------------------------
// 8. The identity channel reproduces digital decisions exactly.
// ---------------------------------------------------------------------------
#[test]
fn acceptance_08_identity_channel_equivalence() {
    let run = main_run();
    let pairs = attack_pairs(run);
    let identity = ChannelParams::identity();
    let mut matches = 0usize;
    let mut total = 0usize;
    for ck in &run.asv {
        let embedder = ck.embedder().expect("checkpoint rebuilds");
        let target = SurrogateModel::asv_only(&embedder, ck.threshold);
        let rec: AttackRecords =
            load_json(&run.pipeline.paths().attack_records(Framework::Baseline, &ck.system_id))
                .expect("baseline records exist");
        let cell_dir = run
            .pipeline
            .paths()
            .attack_cell_dir(Framework::Baseline, &ck.system_id);
        for t in &rec.trials {
            let adv: Waveform<F> = load_wav(cell_dir.join(&t.wav)).expect("stored wav loads");
            let enroll = &pairs[t.trial_id].enroll;
            let (dig, _) =
                evaluate_attack(&adv, enroll, &target, AttackPath::Digital, None, 0).unwrap();
            let (ota, _) =
                evaluate_attack(&adv, enroll, &target, AttackPath::Ota, Some(&identity), t.trial_id as u64)
                    .unwrap();
            matches += (dig == ota) as usize;
            total += 1;
        }
    }
    verdict(
        8,
        "identity-channel equivalence",
        matches == total && total >= 100,
        &format!("{matches}/{total} decisions identical"),
    );
}

// ---------------------------------------------------------------------------
// 9. The pipeline is bitwise reproducible from its manifest.
// ---------------------------------------------------------------------------
#[test]
fn acceptance_09_bitwise_reproducibility() {
    // A compact manifest keeps two full pipeline executions affordable; the
    // property under test is manifest-determinism, not scale.
    let mut m = ExperimentManifest::default_desk(777);
    m.evaluation.trials = 6;
    m.attack.max_iterations = 300;
    m.nrs.arch.depth = 3;
    m.nrs.arch.base_channels = 4;
    m.nrs.arch.channel_growth = 4;
    m.nrs.train.max_epochs = 6;
    m.nrs.train.batch_size = 4;
    m.nrs.train.crop_secs = 0.5;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut csvs: Vec<Vec<(String, Vec<u8>)>> = Vec::new();
    for d in &dirs {
        let p = Pipeline::new(m.clone(), d.path(), &d.path().join("runs")).unwrap();
        p.run_all().unwrap();
        let mut files = Vec::new();
        collect_csvs(p.run_dir(), p.run_dir(), &mut files);
        files.sort();
        csvs.push(files);
    }
    let names: Vec<&String> = csvs[0].iter().map(|(n, _)| n).collect();
    let same_set = names == csvs[1].iter().map(|(n, _)| n).collect::<Vec<_>>();
    let same_bytes = same_set
        && csvs[0]
            .iter()
            .zip(&csvs[1])
            .all(|((_, a), (_, b))| a == b);
    verdict(
        9,
        "bitwise reproducibility",
        same_bytes && !csvs[0].is_empty(),
        &format!(
            "{} CSV artifacts identical across two runs from one manifest",
            csvs[0].len()
        ),
    );
}

fn collect_csvs(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect_csvs(root, &path, out);
        } else if path.extension().is_some_and(|e| e == "csv") {
            let rel = path.strip_prefix(root).unwrap().display().to_string();
            out.push((rel, std::fs::read(&path).unwrap()));
        }
    }
}

// ---------------------------------------------------------------------------
// 10. The loss-configuration comparison completes and emits a sane table.
// ---------------------------------------------------------------------------
#[test]
fn acceptance_10_loss_ablation_table() {
    let run = main_run();
    let rep = ablation();
    // Published replayed-path white-box averages from the physical-replay
    // study this artifact models; shown for context only. Not comparable:
    // that study used full-scale systems and a real loudspeaker-microphone
    // loop, this artifact uses toy systems and a parametric channel.
    let reference: &[(LossKind, f64)] = &[
        (LossKind::WavL1, 52.2),
        (LossKind::WavL2, 42.5),
        (LossKind::Gan, 55.2),
        (LossKind::MelL1, 56.4),
        (LossKind::MelL1PlusWavL1, 52.3),
        (LossKind::MelL1PlusAsv, 57.7),
    ];
    let mut ok = rep.cells.len() == LossKind::ALL.len() * run.asv.len();
    println!("loss configuration × system (replayed white-box success, {} trials/cell):", rep.n_trials);
    println!("{:22} {:9} {:>9} {:>9} {:>22}", "loss", "system", "replayed", "digital", "reference (not comparable)");
    for kind in LossKind::ALL {
        let reference_avg = reference
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, v)| *v)
            .unwrap();
        for ck in &run.asv {
            let cell = rep
                .cells
                .iter()
                .find(|c| c.loss == kind && c.system_id == ck.system_id);
            match cell {
                Some(c) => {
                    ok &= c.n_trials == rep.n_trials
                        && (0.0..=1.0).contains(&c.ota_rate)
                        && (0.0..=1.0).contains(&c.digital_rate)
                        && c.best_val_loss.is_finite();
                    println!(
                        "{:22} {:9} {:>8.1}% {:>8.1}% {:>21.1}%",
                        kind.as_str(),
                        c.system_id,
                        100.0 * c.ota_rate,
                        100.0 * c.digital_rate,
                        reference_avg
                    );
                }
                None => ok = false,
            }
        }
    }
    verdict(
        10,
        "loss ablation table",
        ok,
        &format!(
            "{} cells × {} trials complete; reference column is from the original \
             hardware study and is not comparable to this synthetic setup",
            rep.cells.len(),
            rep.n_trials
        ),
    );
}
