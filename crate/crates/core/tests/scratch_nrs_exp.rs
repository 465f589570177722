//! Scratch NRS-quality experiment harness (not part of the final suite).
//! Knobs via env vars so configs don't require recompiles.

use std::time::Instant;

use replaysim_core::attack::SurrogateModel;
use replaysim_core::audio::{load_wav, Waveform};
use replaysim_core::channel::apply_channel;
use replaysim_core::ckpt::{load_json, AsvCheckpoint, NrsCheckpoint};
use replaysim_core::corpus::{SplitSpec, SynthCorpusConfig};
use replaysim_core::eval::{AttackPath, Framework};
use replaysim_core::manifest::ExperimentManifest;
use replaysim_core::nrs::{nrs_forward, LossConfig, LossKind};
use replaysim_core::pipeline::{AttackRecords, Pipeline};
use replaysim_core::rng::derive_seed;
use replaysim_core::F;

fn env_usize(k: &str, d: usize) -> usize {
    std::env::var(k).ok().and_then(|s| s.parse().ok()).unwrap_or(d)
}
fn env_f64(k: &str, d: f64) -> f64 {
    std::env::var(k).ok().and_then(|s| s.parse().ok()).unwrap_or(d)
}

#[test]
#[ignore]
fn nrs_quality_experiment() {
    let tag = std::env::var("EXP_TAG").unwrap_or_else(|_| "b".into());
    let trials = env_usize("TRIALS", 10);
    let loss_kind = match std::env::var("NRS_LOSS").as_deref() {
        Ok("wav_l1") => LossKind::WavL1,
        Ok("wav_l2") => LossKind::WavL2,
        Ok("gan") => LossKind::Gan,
        Ok("mel_l1_plus_wav_l1") => LossKind::MelL1PlusWavL1,
        Ok("mel_l1_plus_asv") => LossKind::MelL1PlusAsv,
        _ => LossKind::MelL1,
    };

    let mut m = ExperimentManifest::default_desk(20260814);
    m.corpus.synth = Some(SynthCorpusConfig {
        speakers: env_usize("SPEAKERS", 20),
        utterances_per_speaker: env_usize("UTTS", 40),
        duration_secs: 1.0,
        seed: 20260814,
    });
    m.corpus.splits = SplitSpec {
        embedder_train: env_usize("EMB_TRAIN", 320),
        nrs_source: env_usize("NRS_SRC", 200),
        attack_set: 100,
        enroll_pool: 100,
    };
    m.evaluation.trials = trials;
    m.nrs.arch.depth = env_usize("NRS_DEPTH", 6);
    m.nrs.arch.base_channels = env_usize("NRS_BASE", 16);
    m.nrs.arch.channel_growth = env_usize("NRS_GROWTH", 8);
    m.nrs.loss = LossConfig::new(loss_kind);
    m.nrs.train.max_epochs = env_usize("NRS_EPOCHS", 40);
    m.nrs.train.patience = env_usize("NRS_PATIENCE", 10);
    m.nrs.train.batch_size = env_usize("NRS_BATCH", 16);
    m.nrs.train.crop_secs = env_f64("NRS_CROP", 1.0);

    let root = std::path::PathBuf::from(format!("/root/scratch/exp-{tag}"));
    std::fs::create_dir_all(&root).unwrap();
    let p = Pipeline::new(m.clone(), &root, &root.join("out")).unwrap();
    println!("run dir: {}", p.run_dir().display());
    let run = p.run_dir().to_path_buf();

    let t0 = Instant::now();
    let index = p.prepare_data().unwrap();
    println!("prepare-data: {:.1}s ({} utts)", t0.elapsed().as_secs_f64(), index.utterances.len());

    let t0 = Instant::now();
    let asv = p.train_asv().unwrap();
    println!("train-asv: {:.1}s", t0.elapsed().as_secs_f64());
    for c in &asv {
        println!("  {}: eer {:.4} tau {:.4}", c.system_id, c.holdout_eer, c.threshold.tau);
    }

    let t0 = Instant::now();
    let meta = p.gen_replay_pairs().unwrap();
    println!(
        "gen-replay-pairs: {:.1}s ({} train / {} val)",
        t0.elapsed().as_secs_f64(),
        meta.n_train,
        meta.n_val
    );

    let t0 = Instant::now();
    let nrs = p.train_nrs().unwrap();
    println!(
        "train-nrs: {:.1}s identity_val {:.5} best_val {:.5} at epoch {} ({} run)",
        t0.elapsed().as_secs_f64(),
        nrs.identity_val_loss,
        nrs.best_val_loss,
        nrs.best_epoch,
        nrs.history.len()
    );

    let t0 = Instant::now();
    p.attack(None, None).unwrap();
    println!("attack: {:.1}s", t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let runs = p.evaluate().unwrap();
    println!("evaluate: {:.1}s", t0.elapsed().as_secs_f64());
    for r in &runs {
        println!(
            "  {:9} {:7} {:8} rate {:.3} mean_iters {:7.1} cap_failures {}",
            r.framework.as_str(),
            r.target_id,
            match r.attack_path {
                AttackPath::Digital => "digital",
                AttackPath::Ota => "ota",
            },
            r.success_rate(),
            r.mean_iterations,
            r.cap_failures
        );
    }

    // decomposition: per cell, mean scores along each path
    let eval_seed = m.stage_seed("evaluate", 0);
    let rows_csv = std::fs::read_to_string(run.join("attack/pairs.csv")).unwrap();
    let mut enrolls: Vec<Waveform<F>> = Vec::new();
    for line in rows_csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (spk, utt) = (f[5], f[6]);
        let idx = index
            .utterances
            .iter()
            .position(|u| u.speaker_id == spk && u.utterance_id == utt)
            .unwrap();
        enrolls.push(index.load_waveform(idx).unwrap());
    }
    let nrs_ck: NrsCheckpoint<F> = load_json(&run.join("nrs/model.json")).unwrap();
    for sys_id in ["mel_net", "raw_net"] {
        let ck: AsvCheckpoint<F> = load_json(&run.join(format!("asv/{sys_id}.json"))).unwrap();
        let emb = ck.embedder().unwrap();
        let target = SurrogateModel::asv_only(&emb, ck.threshold);
        let tau = ck.threshold.tau;
        println!("== {sys_id} tau {tau:.4}");
        for fw in [Framework::Baseline, Framework::NrsOnly, Framework::NrsJoint] {
            let rec: AttackRecords = load_json(
                &run.join(format!("attack/{}/{sys_id}/records.json", fw.as_str())),
            )
            .unwrap();
            let label = format!("ota:{}:{sys_id}", fw.as_str());
            let (mut digital, mut pred, mut quiet, mut noisy) =
                (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for (t, tr) in rec.trials.iter().enumerate() {
                let adv: Waveform<F> = load_wav(
                    run.join(format!("attack/{}/{sys_id}/{}", fw.as_str(), tr.wav)),
                )
                .unwrap();
                let e = target.enroll_embedding(&enrolls[t]).unwrap();
                digital.push(target.score_against(&adv, &e).unwrap() as f64);
                let sim = nrs_forward(&nrs_ck.model, &adv).unwrap();
                pred.push(target.score_against(&sim, &e).unwrap() as f64);
                let mut qp = m.channel.clone();
                qp.noise_snr_db = None;
                let cq = apply_channel(&adv, &qp, 0).unwrap();
                quiet.push(target.score_against(&cq, &e).unwrap() as f64);
                let cn = apply_channel(&adv, &m.channel, derive_seed(eval_seed, &label, t as u64))
                    .unwrap();
                noisy.push(target.score_against(&cn, &e).unwrap() as f64);
            }
            let stats = |v: &[f64]| {
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                let over = v.iter().filter(|&&s| s >= tau).count();
                format!("mean {mean:.4} ≥τ {over}/{}", v.len())
            };
            println!(
                "  {:9} digital[{}] nrs_pred[{}] chan_quiet[{}] chan_noisy[{}]",
                fw.as_str(),
                stats(&digital),
                stats(&pred),
                stats(&quiet),
                stats(&noisy)
            );
        }
    }
}
